use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scflow::config::RunConfig;
use scflow::eval::{write_reports, write_reports_wide};
use scflow::runner::{self, SampleOptions};
use scflow::{Error, Result};

/// Flow-matching teachers, self-corrected one/few-step students and
/// point-cloud metrics on toy 2D data.
#[derive(Parser)]
#[command(name = "scflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` config file; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lambda_gan=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Training iterations (teacher_iters for train-teacher, iters otherwise).
    #[arg(long)]
    iters: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow-matching teacher.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Distill a teacher checkpoint into a one/few-step student.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Teacher checkpoint.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Continue from a distillation checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate points from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Which net of a distillation checkpoint: student, ema or teacher.
        #[arg(long, default_value = "ema")]
        net: String,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Guidance scale (needs --class).
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the sampler trajectory to this CSV.
        #[arg(long)]
        record_traj: Option<PathBuf>,
    },
    /// Metric report of a checkpoint at several NFEs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "ema")]
        net: String,
        #[arg(long)]
        dataset: Option<String>,
        /// Comma-separated step counts.
        #[arg(long, default_value = "1,2,4,8,16")]
        nfes: String,
        /// Long-form report; the wide NFE table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Incremental loss-stack runs.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "cd,gan,rf,bi")]
        stack: String,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write samples of a dataset to CSV.
    Dump {
        #[arg(long)]
        name: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

impl ConfigArgs {
    fn resolve(&self, iters_key: &str, extra: &[(&str, String)]) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(i) = self.iters {
            overrides.push((iters_key.to_string(), i.to_string()));
        }
        if let Some(d) = &self.out_dir {
            overrides.push(("out_dir".into(), d.to_string_lossy().into_owned()));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        overrides.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher { cfg } => {
            let cfg = cfg.resolve("teacher_iters", &[])?;
            let run = runner::run_teacher(&cfg)?;
            let m = &run.metrics[0];
            println!(
                "teacher: {} iters, energy distance at {} NFE = {}, written to {}",
                run.state.iter,
                m.nfe,
                m.energy_distance,
                run.dir.display()
            );
        }
        Command::Distill { cfg, teacher, resume } => {
            let extra: Vec<_> = teacher.iter().map(|t| ("teacher_ckpt", path_str(t))).collect();
            let cfg = cfg.resolve("iters", &extra)?;
            let run = match resume {
                Some(ck) => runner::resume_distillation(&cfg, &ck)?,
                None => runner::run_distillation(&cfg)?,
            };
            for m in run.metrics.iter().filter(|m| m.run_id != "teacher") {
                println!("{} NFE={} energy_distance={}", m.run_id, m.nfe, m.energy_distance);
            }
            println!("written to {}", run.dir.display());
        }
        Command::Sample {
            ckpt,
            net,
            nfe,
            n,
            seed,
            gamma,
            class,
            out,
            record_traj,
        } => {
            let net = scflow::checkpoint::Checkpoint::load(&ckpt)?.net(&net)?;
            let opts = SampleOptions {
                nfe,
                n,
                seed,
                gamma,
                class,
                record: record_traj.is_some(),
            };
            let (points, traj) = runner::sample_net(&net, &opts)?;
            fs::write(&out, runner::points_csv(&points, None))?;
            if let (Some(path), Some(traj)) = (record_traj, traj) {
                let mut buf = Vec::new();
                traj.write_csv(&mut buf)?;
                fs::write(path, buf)?;
            }
        }
        Command::Eval {
            ckpt,
            net,
            dataset,
            nfes,
            out,
            cfg,
        } => {
            let mut extra = vec![("eval_nfes", nfes)];
            if let Some(d) = dataset {
                extra.push(("dataset", d));
            }
            let cfg = cfg.resolve("iters", &extra)?;
            let reports = runner::eval_checkpoint(&ckpt, &net, &cfg)?;
            if let Some(path) = out {
                let mut buf = Vec::new();
                write_reports(&mut buf, &reports, &cfg.eval_nfes, cfg.dataset_kind()?.dim())?;
                fs::write(path, buf)?;
            }
            write_reports_wide(std::io::stdout().lock(), &reports)?;
        }
        Command::Ablate { cfg, stack, teacher } => {
            let extra: Vec<_> = teacher.iter().map(|t| ("teacher_ckpt", path_str(t))).collect();
            let cfg = cfg.resolve("iters", &extra)?;
            let stack = runner::parse_stack(&stack)?;
            runner::ablate(&cfg, &stack)?;
            print!("{}", fs::read_to_string(Path::new(&cfg.out_dir).join("ablation.csv"))?);
        }
        Command::Data {
            command: DataCommand::Dump { name, n, seed, out },
        } => runner::data_dump(&name, n, seed, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
