//! Run orchestration: output directories, logs, evaluation and the
//! ablation matrix.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::datasets::{gaussian_noise, Dataset};
use crate::distill::{DistillState, LossSchedule, StepLosses};
use crate::error::{Error, Result};
use crate::eval::{
    consistency_matrix, knn_precision_recall, random_directions, saturation_stats, sliced_wasserstein_with,
    straightness, energy_distance, write_reports, write_reports_wide, MetricReport,
};
use crate::flow::{euler_sample, Guided, LossPoint, TeacherState, Trajectory, VelocityField};
use crate::networks::VelocityNet;
use crate::seeds;

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "MANIFEST";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const DISTILL_CKPT: &str = "distill.ckpt";
pub const LAST_GOOD_CKPT: &str = "last_good.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_LOG: &str = "eval_log.csv";
pub const METRICS: &str = "metrics.csv";
pub const METRICS_WIDE: &str = "metrics_wide.csv";

/// Create the output directory and write the resolved config into it.
pub fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    Ok(dir)
}

/// Write `MANIFEST`: tool version, then one `crc32 size path` line per file
/// below `dir`, sorted by path.
pub fn write_manifest(dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut out = format!("scflow {}\n", env!("CARGO_PKG_VERSION"));
    for rel in files {
        if rel == MANIFEST_FILE {
            continue;
        }
        let bytes = fs::read(dir.join(&rel))?;
        writeln!(out, "{:08x} {} {}", crc32fast::hash(&bytes), bytes.len(), rel).unwrap();
    }
    fs::write(dir.join(MANIFEST_FILE), out)?;
    Ok(())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap();
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Fixed evaluation inputs derived from the run seed: shared noise, held-out
/// real points and projection directions.
pub struct EvalSetup {
    pub noise: Tensor,
    pub real: Tensor,
    pub directions: Vec<Vec<f64>>,
    pub knn_k: usize,
}

impl EvalSetup {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let ds = cfg.dataset_kind()?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, seeds::EVAL_NOISE));
        let noise = gaussian_noise(cfg.eval_n, ds.dim(), &mut noise_rng);
        let mut real_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, seeds::EVAL_REAL));
        let (real, _) = ds.sample_with(cfg.eval_n, &mut real_rng)?;
        let directions = random_directions(
            cfg.sw_projections,
            ds.dim(),
            seeds::derive(cfg.seed, seeds::EVAL_PROJECTIONS),
        );
        Ok(Self {
            noise,
            real,
            directions,
            knn_k: cfg.knn_k,
        })
    }

    /// Metrics of `field` at every NFE in `nfes`, compared with the held-out
    /// real points.
    pub fn evaluate(&self, field: &dyn VelocityField, run_id: &str, nfes: &[usize]) -> Result<Vec<MetricReport>> {
        let samples = nfes
            .iter()
            .map(|&n| euler_sample(field, &self.noise, n, false).map(|(z, _)| z))
            .collect::<Result<Vec<_>>>()?;
        let consistency = consistency_matrix(&samples);
        let mut reports = Vec::with_capacity(nfes.len());
        for (i, (&nfe, x)) in nfes.iter().zip(&samples).enumerate() {
            let (precision, recall) = knn_precision_recall(&self.real, x, self.knn_k)?;
            let (mean_shift, std_ratio) = saturation_stats(x, &self.real)?;
            reports.push(MetricReport {
                run_id: run_id.to_string(),
                nfe,
                energy_distance: energy_distance(x, &self.real)?,
                sliced_wasserstein: sliced_wasserstein_with(x, &self.real, &self.directions)?,
                precision,
                recall,
                consistency: consistency[i].clone(),
                straightness: straightness(field, &self.noise, nfe.max(2))?,
                mean_shift,
                std_ratio,
            });
        }
        Ok(reports)
    }
}

fn write_csv_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn teacher_log_csv(log: &[LossPoint]) -> String {
    let mut s = String::from("iter,loss\n");
    for p in log {
        writeln!(s, "{},{}", p.iter, p.loss).unwrap();
    }
    s
}

/// Result of a teacher run.
pub struct TeacherRun {
    pub dir: PathBuf,
    pub state: TeacherState,
    pub log: Vec<LossPoint>,
    pub metrics: Vec<MetricReport>,
}

/// Train a teacher into `cfg.out_dir`: config, loss log, checkpoint, metrics
/// at `teacher_nfe` and manifest.
pub fn run_teacher(cfg: &RunConfig) -> Result<TeacherRun> {
    let dir = prepare_out_dir(cfg)?;
    let mut state = TeacherState::init(cfg)?;
    let log = crate::flow::continue_teacher(&mut state, cfg, cfg.teacher_iters)?;
    fs::write(dir.join("teacher_log.csv"), teacher_log_csv(&log))?;
    Checkpoint::from_teacher(&state).save(&dir.join(TEACHER_CKPT))?;
    let setup = EvalSetup::new(cfg)?;
    let metrics = setup.evaluate(&state.net, "teacher", &[cfg.teacher_nfe])?;
    write_csv_file(&dir.join(METRICS), |w| write_reports(w, &metrics, &[cfg.teacher_nfe], cfg.dataset_kind().unwrap().dim()))?;
    write_manifest(&dir)?;
    Ok(TeacherRun {
        dir,
        state,
        log,
        metrics,
    })
}

/// Teacher velocity net from a teacher checkpoint.
pub fn load_teacher(path: &Path) -> Result<VelocityNet> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != crate::checkpoint::Kind::Teacher {
        return Err(Error::Checkpoint(format!("{} is not a teacher checkpoint", path.display())));
    }
    ck.net("net")
}

const TRAIN_LOG_HEADER: &str = "iter,total,cd,gan_gen,gan_disc,rf,bi,gan_on,rf_on,bi_on";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn train_log_row(l: &StepLosses) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        l.iter,
        l.total,
        l.cd,
        opt(l.gan_gen),
        opt(l.gan_disc),
        opt(l.rf),
        opt(l.bi),
        l.active.gan as u8,
        l.active.rf as u8,
        l.active.bi as u8
    )
}

/// Log rows with iteration `<= iter` from an existing log, so a resumed run
/// rewrites the same file an uninterrupted run would.
fn log_prefix(path: &Path, header: &str, iter: u64, iter_of: impl Fn(&str) -> Option<u64>) -> Result<String> {
    let mut out = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            if iter_of(line).is_some_and(|i| i <= iter) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Result of a distillation run.
pub struct DistillRun {
    pub dir: PathBuf,
    pub state: DistillState,
    pub log: Vec<StepLosses>,
    pub metrics: Vec<MetricReport>,
}

/// Fresh distillation from `cfg.teacher_ckpt`.
pub fn run_distillation(cfg: &RunConfig) -> Result<DistillRun> {
    let path = cfg.teacher_ckpt.as_ref().ok_or_else(|| Error::Config {
        key: "teacher_ckpt".into(),
        detail: "a teacher checkpoint is required".into(),
    })?;
    let teacher = load_teacher(Path::new(path))?;
    let state = DistillState::init(cfg, teacher)?;
    drive_distillation(cfg, state)
}

/// Continue a run from a distillation checkpoint up to `cfg.iters`.
pub fn resume_distillation(cfg: &RunConfig, ckpt: &Path) -> Result<DistillRun> {
    let state = Checkpoint::load(ckpt)?.into_distill()?;
    if state.student.arch != cfg.velocity_arch()? {
        return Err(Error::Checkpoint("checkpoint architecture does not match the config".into()));
    }
    drive_distillation(cfg, state)
}

/// File name of the periodic checkpoint written at `iter`.
pub fn periodic_ckpt_name(iter: u64) -> String {
    format!("distill_{iter}.ckpt")
}

fn first_field_u64(line: &str) -> Option<u64> {
    line.split(',').next()?.parse().ok()
}

fn eval_row_iter(line: &str) -> Option<u64> {
    line.split(',').next()?.strip_prefix("iter")?.parse().ok()
}

fn drive_distillation(cfg: &RunConfig, mut state: DistillState) -> Result<DistillRun> {
    let dir = prepare_out_dir(cfg)?;
    let sched = LossSchedule::from_config(cfg);
    sched.validate()?;
    let ds = cfg.dataset_kind()?;
    let dim = ds.dim();
    let setup = EvalSetup::new(cfg)?;
    let eval_header = crate::eval::report_header(&cfg.eval_nfes, dim);

    let log_path = dir.join(TRAIN_LOG);
    let eval_path = dir.join(EVAL_LOG);
    let mut train_log = log_prefix(&log_path, TRAIN_LOG_HEADER, state.iter, first_field_u64)?;
    let mut eval_log = log_prefix(&eval_path, &eval_header, state.iter, eval_row_iter)?;
    let mut log = Vec::new();

    while state.iter < cfg.iters {
        let next = state.iter + 1;
        let logging = cfg.log_every > 0 && (next % cfg.log_every == 0 || next == 1 || next == cfg.iters);
        let losses = match state.step(cfg, &sched, ds, logging) {
            Ok(l) => l,
            Err(e @ Error::Divergence { .. }) => {
                // parameters are untouched by the failed step
                Checkpoint::from_distill(&state).save(&dir.join(LAST_GOOD_CKPT))?;
                fs::write(&log_path, &train_log)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if logging {
            train_log.push_str(&train_log_row(&losses));
            train_log.push('\n');
            log.push(losses);
        }
        if cfg.eval_every > 0 && state.iter % cfg.eval_every == 0 {
            for r in setup.evaluate(&state.student, &format!("iter{}", state.iter), &cfg.eval_nfes)? {
                eval_log.push_str(&r.csv_row());
                eval_log.push('\n');
            }
        }
        if cfg.ckpt_every > 0 && state.iter % cfg.ckpt_every == 0 && state.iter < cfg.iters {
            Checkpoint::from_distill(&state).save(&dir.join(periodic_ckpt_name(state.iter)))?;
            fs::write(&log_path, &train_log)?;
            if cfg.eval_every > 0 {
                fs::write(&eval_path, &eval_log)?;
            }
        }
    }
    fs::write(&log_path, &train_log)?;
    if cfg.eval_every > 0 {
        fs::write(&eval_path, &eval_log)?;
    }
    Checkpoint::from_distill(&state).save(&dir.join(DISTILL_CKPT))?;

    let mut metrics = setup.evaluate(&state.teacher, "teacher", &[cfg.teacher_nfe])?;
    let student = setup.evaluate(&state.student, "student", &cfg.eval_nfes)?;
    let ema = setup.evaluate(&state.ema, "ema", &cfg.eval_nfes)?;
    // teacher rows have a one-entry consistency list; pad to the shared width
    for r in &mut metrics {
        r.consistency = vec![0.0; cfg.eval_nfes.len()];
    }
    metrics.extend(student.iter().cloned());
    metrics.extend(ema);
    write_csv_file(&dir.join(METRICS), |w| write_reports(w, &metrics, &cfg.eval_nfes, dim))?;
    write_csv_file(&dir.join(METRICS_WIDE), |w| write_reports_wide(w, &student))?;
    write_manifest(&dir)?;
    Ok(DistillRun {
        dir,
        state,
        log,
        metrics,
    })
}

/// One optional loss term of the ablation stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Cd,
    Gan,
    Rf,
    Bi,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::Cd => "cd",
            Term::Gan => "gan",
            Term::Rf => "rf",
            Term::Bi => "bi",
        }
    }
}

/// Parse `cd,gan,rf,bi`-style stacks; `cd` must come first.
pub fn parse_stack(s: &str) -> Result<Vec<Term>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim) {
        let term = match part {
            "cd" => Term::Cd,
            "gan" => Term::Gan,
            "rf" => Term::Rf,
            "bi" => Term::Bi,
            other => return Err(Error::invalid(format!("unknown loss term `{other}` (valid: cd, gan, rf, bi)"))),
        };
        if out.contains(&term) {
            return Err(Error::invalid(format!("loss term `{part}` repeated")));
        }
        out.push(term);
    }
    if out.first() != Some(&Term::Cd) {
        return Err(Error::invalid("the ablation stack must start with `cd`"));
    }
    Ok(out)
}

/// Config of the ablation run that enables exactly `enabled`: the weights
/// of other terms are zeroed, everything else is kept.
pub fn ablation_config(base: &RunConfig, enabled: &[Term], out_dir: &Path) -> RunConfig {
    let on = |t: Term, w: f64| if enabled.contains(&t) { w } else { 0.0 };
    RunConfig {
        lambda_gan: on(Term::Gan, base.lambda_gan),
        lambda_rf: on(Term::Rf, base.lambda_rf),
        lambda_bi: on(Term::Bi, base.lambda_bi),
        out_dir: out_dir.to_string_lossy().into_owned(),
        ..base.clone()
    }
}

/// Incremental runs `stack[..1]`, `stack[..2]`, ... in subdirectories of
/// `cfg.out_dir`, plus `ablation.csv` with energy distance and maximum
/// NFE consistency per run and NFE.
pub fn ablate(cfg: &RunConfig, stack: &[Term]) -> Result<Vec<DistillRun>> {
    let root = prepare_out_dir(cfg)?;
    let mut runs = Vec::new();
    for i in 0..stack.len() {
        let label = stack[..=i].iter().map(|t| t.name()).collect::<Vec<_>>().join("+");
        let sub = root.join(format!("{i}_{}", stack[i].name()));
        let sub_cfg = ablation_config(cfg, &stack[..=i], &sub);
        let run = run_distillation(&sub_cfg)?;
        fs::write(sub.join("label.txt"), format!("{label}\n"))?;
        runs.push(run);
    }
    let mut s = String::from("run,metric");
    for n in &cfg.eval_nfes {
        write!(s, ",NFE={n}").unwrap();
    }
    s.push('\n');
    for (i, run) in runs.iter().enumerate() {
        let label = stack[..=i].iter().map(|t| t.name()).collect::<Vec<_>>().join("+");
        let rows: Vec<&MetricReport> = run.metrics.iter().filter(|r| r.run_id == "student").collect();
        for (metric, f) in [
            ("energy_distance", (|r: &MetricReport| r.energy_distance) as fn(&MetricReport) -> f64),
            ("max_consistency", |r| r.consistency.iter().copied().fold(0.0, f64::max)),
            ("straightness", |r| r.straightness),
        ] {
            write!(s, "{label},{metric}").unwrap();
            for r in &rows {
                write!(s, ",{}", f(r)).unwrap();
            }
            s.push('\n');
        }
    }
    fs::write(root.join("ablation.csv"), s)?;
    write_manifest(&root)?;
    Ok(runs)
}

/// Options of the `sample` command.
#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub nfe: usize,
    pub n: usize,
    pub seed: u64,
    pub gamma: Option<f64>,
    pub class: Option<usize>,
    pub record: bool,
}

/// Seeded noise pushed through `nfe` Euler steps of `net`, optionally with
/// guidance towards one class.
pub fn sample_net(net: &VelocityNet, opts: &SampleOptions) -> Result<(Tensor, Option<Trajectory>)> {
    if opts.n == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let noise = gaussian_noise(opts.n, net.arch.data_dim, &mut rng);
    match (opts.class, opts.gamma) {
        (Some(k), gamma) => {
            let guided = Guided {
                net,
                classes: vec![k; opts.n],
                gamma: gamma.unwrap_or(1.0),
            };
            euler_sample(&guided, &noise, opts.nfe, opts.record)
        }
        (None, Some(g)) if g != 1.0 => Err(Error::invalid("--gamma needs --class")),
        (None, _) => euler_sample(net, &noise, opts.nfe, opts.record),
    }
}

/// `sample_id,x_0,x_1,...` CSV of a point set.
pub fn points_csv(points: &Tensor, labels: Option<&[usize]>) -> String {
    let d = points.cols();
    let mut s = String::from("sample_id");
    for j in 0..d {
        write!(s, ",x_{j}").unwrap();
    }
    if labels.is_some() {
        s.push_str(",label");
    }
    s.push('\n');
    for i in 0..points.rows() {
        write!(s, "{i}").unwrap();
        for x in points.row(i) {
            write!(s, ",{x}").unwrap();
        }
        if let Some(l) = labels {
            write!(s, ",{}", l[i]).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Write `n` points of a dataset to CSV.
pub fn data_dump(name: &str, n: usize, seed: u64, out: &Path) -> Result<()> {
    let ds: Dataset = name.parse()?;
    let (points, labels) = ds.sample_with(n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut f = fs::File::create(out)?;
    f.write_all(points_csv(&points, labels.as_deref()).as_bytes())?;
    Ok(())
}

/// Metrics of a checkpoint's net on `cfg`'s evaluation setup.
pub fn eval_checkpoint(ckpt: &Path, which: &str, cfg: &RunConfig) -> Result<Vec<MetricReport>> {
    let net = Checkpoint::load(ckpt)?.net(which)?;
    if net.arch.data_dim != cfg.dataset_kind()?.dim() {
        return Err(Error::invalid("checkpoint data dimension differs from the dataset"));
    }
    EvalSetup::new(cfg)?.evaluate(&net, which, &cfg.eval_nfes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_parsing() {
        assert_eq!(parse_stack("cd,gan,rf,bi").unwrap(), vec![Term::Cd, Term::Gan, Term::Rf, Term::Bi]);
        assert!(parse_stack("gan,cd").is_err());
        assert!(parse_stack("cd,cd").is_err());
        assert!(parse_stack("cd,xx").is_err());
    }

    #[test]
    fn ablation_configs_differ_only_in_weights() {
        let base = RunConfig::default();
        let stack = parse_stack("cd,gan,rf,bi").unwrap();
        let cfgs: Vec<RunConfig> = (0..4).map(|i| ablation_config(&base, &stack[..=i], Path::new("x"))).collect();
        for a in &cfgs {
            for b in &cfgs {
                assert!(a.diff_keys(b).iter().all(|k| k.starts_with("lambda_")));
            }
        }
        assert_eq!((cfgs[0].lambda_gan, cfgs[0].lambda_rf, cfgs[0].lambda_bi), (0.0, 0.0, 0.0));
        assert_eq!(cfgs[3].lambda_bi, base.lambda_bi);
    }

    #[test]
    fn points_csv_layout() {
        let p = Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap();
        assert_eq!(points_csv(&p, Some(&[3])), "sample_id,x_0,x_1,label\n0,0.5,-1,3\n");
    }

    #[test]
    fn manifest_lists_files_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.csv"), "x\n").unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/a.txt"), "y").unwrap();
        write_manifest(dir.path()).unwrap();
        let m = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let lines: Vec<&str> = m.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(" 2 b.csv") && lines[2].ends_with(" 1 sub/a.txt"), "{m}");
        write_manifest(dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap(), m);
    }
}
