//! End-to-end checks through the `scflow` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scflow::autodiff::Tensor;
use scflow::checkpoint::Checkpoint;
use scflow::datasets::gaussian_noise;
use scflow::distill::x0_predict;

const SMALL: &[&str] = &["--set", "eval_n=200", "--set", "hidden=32,32", "--set", "batch_size=64"];

fn scflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scflow")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = scflow(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn train_teacher(dir: &Path, iters: &str) {
    let d = dir.to_str().unwrap();
    ok(&with_small(&["train-teacher", "--iters", iters, "--out-dir", d]));
}

fn read_points(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn data_dump_writes_labelled_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.csv");
    ok(&["data", "dump", "--name", "gauss8", "--n", "5", "--seed", "3", "--out", out.to_str().unwrap()]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "sample_id,x_0,x_1,label");
    assert_eq!(text.lines().count(), 6);
    let (points, _) = scflow::datasets::sample("gauss8", 5, 3).unwrap();
    assert_eq!(read_points(&out)[2][..2], points.row(2)[..]);
}

#[test]
fn exit_codes() {
    assert_eq!(scflow(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(scflow(&["train-teacher", "--set", "ema_mu=1.5"]).status.code(), Some(1));
    let err = String::from_utf8(scflow(&["train-teacher", "--set", "ema_mu=1.5"]).stderr).unwrap();
    assert!(err.contains("ema_mu out of [0,1]"), "{err}");
    assert_eq!(scflow(&["train-teacher", "--set", "no_such_key=1"]).status.code(), Some(1));
    let missing = scflow(&["sample", "--ckpt", "/nonexistent/x.ckpt", "--out", "/nonexistent/y.csv"]);
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(scflow(&["data", "dump", "--name", "nope", "--n", "3", "--out", "x.csv"]).status.code(), Some(1));
}

#[test]
fn flag_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "# small run\nteacher_iters = 100\n").unwrap();
    let out = dir.path().join("t");
    let args = with_small(&["train-teacher", "--config", conf.to_str().unwrap(), "--iters", "20", "--out-dir", out.to_str().unwrap()]);
    ok(&args);
    let cfg = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(cfg.lines().any(|l| l == "teacher_iters = 20"), "{cfg}");
    let log = fs::read_to_string(out.join("teacher_log.csv")).unwrap();
    assert!(log.lines().last().unwrap().starts_with("20,"));
}

#[test]
fn one_step_sample_is_x0_prediction_of_seeded_noise() {
    let dir = tempfile::tempdir().unwrap();
    train_teacher(dir.path(), "30");
    let ckpt = dir.path().join("teacher.ckpt");
    let out = dir.path().join("s.csv");
    ok(&["sample", "--ckpt", ckpt.to_str().unwrap(), "--nfe", "1", "--n", "16", "--seed", "9", "--out", out.to_str().unwrap()]);
    let net = Checkpoint::load(&ckpt).unwrap().net("net").unwrap();
    let noise = gaussian_noise(16, 2, &mut ChaCha8Rng::seed_from_u64(9));
    let want = x0_predict(&net, &noise, &[1.0; 16]).unwrap();
    let got = Tensor::from_rows(&read_points(&out)).unwrap();
    assert_eq!(got, want);
}

#[test]
fn sample_records_trajectory_and_guides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&with_small(&["train-teacher", "--iters", "20", "--out-dir", d, "--set", "conditional=true"]));
    let ckpt = dir.path().join("teacher.ckpt");
    let traj = dir.path().join("traj.csv");
    let out = dir.path().join("s.csv");
    ok(&[
        "sample", "--ckpt", ckpt.to_str().unwrap(), "--nfe", "4", "--n", "3", "--gamma", "1.5", "--class", "2",
        "--out", out.to_str().unwrap(), "--record-traj", traj.to_str().unwrap(),
    ]);
    // 3 samples x (4 steps + final state)
    assert_eq!(fs::read_to_string(&traj).unwrap().lines().count(), 1 + 3 * 5);
    let bad = scflow(&["sample", "--ckpt", ckpt.to_str().unwrap(), "--gamma", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn eval_prints_nfe_columns() {
    let dir = tempfile::tempdir().unwrap();
    train_teacher(dir.path(), "20");
    let ckpt = dir.path().join("teacher.ckpt");
    let long = dir.path().join("m.csv");
    let out = ok(&with_small(&[
        "eval", "--ckpt", ckpt.to_str().unwrap(), "--dataset", "gauss8", "--nfes", "1,2,4,8,16", "--out", long.to_str().unwrap(),
    ]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "metric,NFE=1,NFE=2,NFE=4,NFE=8,NFE=16");
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 6));
    let long = fs::read_to_string(long).unwrap();
    assert_eq!(long.lines().count(), 6);
    assert!(long.starts_with("run_id,nfe,energy_distance"));
}

fn distill_args<'a>(teacher: &'a str, out: &'a str, iters: &'a str) -> Vec<&'a str> {
    with_small(&[
        "distill", "--teacher", teacher, "--iters", iters, "--out-dir", out, "--set", "log_every=5", "--set", "ckpt_every=10",
        "--set", "eval_every=10", "--set", "n_rf=4", "--set", "n_bi=8",
    ])
}

#[test]
fn identical_runs_are_byte_identical_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("teacher");
    train_teacher(&t, "40");
    let t2 = dir.path().join("teacher2");
    train_teacher(&t2, "40");
    for f in ["teacher.ckpt", "teacher_log.csv", "metrics.csv"] {
        assert_eq!(fs::read(t.join(f)).unwrap(), fs::read(t2.join(f)).unwrap(), "{f}");
    }

    let teacher = t.join("teacher.ckpt");
    let teacher = teacher.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&distill_args(teacher, a.to_str().unwrap(), "20"));
    ok(&distill_args(teacher, b.to_str().unwrap(), "20"));
    let files = ["distill.ckpt", "distill_10.ckpt", "train_log.csv", "eval_log.csv", "metrics.csv", "metrics_wide.csv"];
    for f in files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest = fs::read_to_string(a.join("MANIFEST")).unwrap();
    assert!(files.iter().all(|f| manifest.contains(f)) && manifest.contains("config.txt"));

    // resume in a fresh directory from the midpoint checkpoint
    let c = dir.path().join("c");
    let mid = a.join("distill_10.ckpt");
    let mut args = distill_args(teacher, c.to_str().unwrap(), "20");
    args.extend(["--resume", mid.to_str().unwrap()]);
    ok(&args);
    for f in ["distill.ckpt", "metrics.csv", "metrics_wide.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(c.join(f)).unwrap(), "{f}");
    }

    // resume inside a copy of the run directory: logs are rewritten to match
    let d = dir.path().join("d");
    fs::create_dir(&d).unwrap();
    for entry in fs::read_dir(&a).unwrap() {
        let p = entry.unwrap().path();
        fs::copy(&p, d.join(p.file_name().unwrap())).unwrap();
    }
    fs::write(d.join("distill.ckpt"), b"stale").unwrap();
    let mid = d.join("distill_10.ckpt");
    let mut args = distill_args(teacher, d.to_str().unwrap(), "20");
    args.extend(["--resume", mid.to_str().unwrap()]);
    ok(&args);
    for f in ["distill.ckpt", "train_log.csv", "eval_log.csv", "metrics.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(d.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn distill_without_teacher_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = scflow(&["distill", "--out-dir", dir.path().to_str().unwrap(), "--iters", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("teacher_ckpt"));
}

#[test]
fn ablate_runs_differ_only_in_loss_weights() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t");
    train_teacher(&t, "20");
    let root = dir.path().join("abl");
    let teacher = t.join("teacher.ckpt");
    ok(&with_small(&[
        "ablate", "--teacher", teacher.to_str().unwrap(), "--iters", "6", "--out-dir", root.to_str().unwrap(), "--stack", "cd,gan,rf,bi",
        "--set", "n_rf=2", "--set", "n_bi=2", "--set", "eval_nfes=1,2",
    ]));
    let subs = ["0_cd", "1_gan", "2_rf", "3_bi"];
    let configs: Vec<String> = subs.iter().map(|s| fs::read_to_string(root.join(s).join("config.txt")).unwrap()).collect();
    for c in &configs {
        assert!(root.join("0_cd").join("metrics.csv").exists());
        let diff: Vec<(&str, &str)> = configs[0]
            .lines()
            .zip(c.lines())
            .filter(|(x, y)| x != y)
            .collect();
        assert!(
            diff.iter().all(|(x, _)| x.starts_with("lambda_") || x.starts_with("out_dir")),
            "{diff:?}"
        );
    }
    assert!(configs[0].contains("lambda_gan = 0\n") && configs[3].contains("lambda_bi = 0.1\n"));
    let summary = fs::read_to_string(root.join("ablation.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), "run,metric,NFE=1,NFE=2");
    assert!(summary.contains("cd+gan+rf+bi,max_consistency"));
}
