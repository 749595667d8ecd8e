//! Run configuration: a flat `key = value` text format.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! key = value    # trailing comment
//! ```
//!
//! Blank lines are ignored, keys are case-sensitive, unknown keys are
//! rejected, and a key may appear at most once per source. Lists are
//! comma-separated (`hidden = 128,128,128,128`). Overrides (command-line
//! flags) are applied after the file and win over it.

use std::fmt::Write as _;
use std::path::Path;

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::networks::{DiscArch, VelocityArch, DEFAULT_TIME_MAX_FREQ};

/// Learning-rate schedule over a run of known length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate down to zero at the last step.
    Cosine,
}

impl LrSchedule {
    /// Rate for the step taken from iteration `iter` (0-based) of `total`.
    pub fn rate(self, base: f64, iter: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = iter as f64 / total.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }
}

/// How per-sample times are drawn during distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeSampling {
    /// Uniform on `(0, 1]`.
    Continuous,
    /// Uniform over the `grid_n` points `1/N, 2/N, .., 1`.
    Grid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub seed: u64,

    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub time_max_freq: f64,
    pub class_embed_dim: usize,
    pub conditional: bool,
    pub label_drop: f64,
    pub gamma: f64,
    pub disc_hidden: Vec<usize>,

    pub teacher_iters: u64,
    pub lr_teacher: f64,
    pub teacher_lr_schedule: LrSchedule,
    pub grid_n: usize,

    pub lambda_gan: f64,
    pub lambda_rf: f64,
    pub lambda_bi: f64,
    pub n_gan: u64,
    pub n_rf: u64,
    pub n_bi: u64,
    pub t_trunc: f64,
    pub t_skip: f64,
    pub ema_mu: f64,
    pub lr_student: f64,
    pub lr_disc: f64,
    pub iters: u64,
    pub batch_size: usize,
    pub t_sampling: TimeSampling,
    pub distill_lr_schedule: LrSchedule,
    pub teacher_ckpt: Option<String>,

    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub log_every: u64,
    pub eval_every: u64,
    pub ckpt_every: u64,
    pub eval_n: usize,
    pub eval_nfes: Vec<usize>,
    pub teacher_nfe: usize,
    pub knn_k: usize,
    pub sw_projections: usize,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: "gauss8".into(),
            seed: 0,
            hidden: vec![128; 4],
            time_embed_dim: 32,
            time_max_freq: DEFAULT_TIME_MAX_FREQ,
            class_embed_dim: 16,
            conditional: false,
            label_drop: 0.1,
            gamma: 1.5,
            disc_hidden: vec![128; 3],
            teacher_iters: 8000,
            lr_teacher: 1e-3,
            teacher_lr_schedule: LrSchedule::Cosine,
            grid_n: 50,
            lambda_gan: 0.1,
            lambda_rf: 0.1,
            lambda_bi: 0.1,
            n_gan: 0,
            n_rf: 1000,
            n_bi: 1000,
            t_trunc: 0.4,
            t_skip: 0.1,
            ema_mu: 0.9,
            lr_student: 1e-3,
            lr_disc: 2e-3,
            iters: 4000,
            batch_size: 256,
            t_sampling: TimeSampling::Continuous,
            distill_lr_schedule: LrSchedule::Cosine,
            teacher_ckpt: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 100,
            eval_every: 0,
            ckpt_every: 0,
            eval_n: 2000,
            eval_nfes: vec![1, 2, 4, 8, 16],
            teacher_nfe: 50,
            knn_k: 5,
            sw_projections: 128,
            out_dir: "runs/default".into(),
        }
    }
}

/// Every accepted key, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "dataset",
    "seed",
    "hidden",
    "time_embed_dim",
    "time_max_freq",
    "class_embed_dim",
    "conditional",
    "label_drop",
    "gamma",
    "disc_hidden",
    "teacher_iters",
    "lr_teacher",
    "teacher_lr_schedule",
    "grid_n",
    "lambda_gan",
    "lambda_rf",
    "lambda_bi",
    "n_gan",
    "n_rf",
    "n_bi",
    "t_trunc",
    "t_skip",
    "ema_mu",
    "lr_student",
    "lr_disc",
    "iters",
    "batch_size",
    "t_sampling",
    "distill_lr_schedule",
    "teacher_ckpt",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "log_every",
    "eval_every",
    "ckpt_every",
    "eval_n",
    "eval_nfes",
    "teacher_nfe",
    "knn_k",
    "sw_projections",
    "out_dir",
];

fn err(key: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        detail: detail.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| err(key, format!("cannot parse `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_num::<usize>(key, s.trim()))
        .collect()
}

fn parse_schedule(key: &str, v: &str) -> Result<LrSchedule> {
    match v {
        "constant" => Ok(LrSchedule::Constant),
        "cosine" => Ok(LrSchedule::Cosine),
        _ => Err(err(key, "expected `constant` or `cosine`")),
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "dataset" => self.dataset = v.to_string(),
            "seed" => self.seed = parse_num(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "time_embed_dim" => self.time_embed_dim = parse_num(key, v)?,
            "time_max_freq" => self.time_max_freq = parse_num(key, v)?,
            "class_embed_dim" => self.class_embed_dim = parse_num(key, v)?,
            "conditional" => self.conditional = parse_num(key, v)?,
            "label_drop" => self.label_drop = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "disc_hidden" => self.disc_hidden = parse_list(key, v)?,
            "teacher_iters" => self.teacher_iters = parse_num(key, v)?,
            "lr_teacher" => self.lr_teacher = parse_num(key, v)?,
            "teacher_lr_schedule" => self.teacher_lr_schedule = parse_schedule(key, v)?,
            "distill_lr_schedule" => self.distill_lr_schedule = parse_schedule(key, v)?,
            "grid_n" => self.grid_n = parse_num(key, v)?,
            "lambda_gan" => self.lambda_gan = parse_num(key, v)?,
            "lambda_rf" => self.lambda_rf = parse_num(key, v)?,
            "lambda_bi" => self.lambda_bi = parse_num(key, v)?,
            "n_gan" => self.n_gan = parse_num(key, v)?,
            "n_rf" => self.n_rf = parse_num(key, v)?,
            "n_bi" => self.n_bi = parse_num(key, v)?,
            "t_trunc" => self.t_trunc = parse_num(key, v)?,
            "t_skip" => self.t_skip = parse_num(key, v)?,
            "ema_mu" => self.ema_mu = parse_num(key, v)?,
            "lr_student" => self.lr_student = parse_num(key, v)?,
            "lr_disc" => self.lr_disc = parse_num(key, v)?,
            "iters" => self.iters = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "t_sampling" => {
                self.t_sampling = match v {
                    "continuous" => TimeSampling::Continuous,
                    "grid" => TimeSampling::Grid,
                    _ => return Err(err(key, "expected `continuous` or `grid`")),
                }
            }
            "teacher_ckpt" => {
                self.teacher_ckpt = if v.is_empty() { None } else { Some(v.to_string()) }
            }
            "adam_beta1" => self.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam_eps = parse_num(key, v)?,
            "log_every" => self.log_every = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "ckpt_every" => self.ckpt_every = parse_num(key, v)?,
            "eval_n" => self.eval_n = parse_num(key, v)?,
            "eval_nfes" => self.eval_nfes = parse_list(key, v)?,
            "teacher_nfe" => self.teacher_nfe = parse_num(key, v)?,
            "knn_k" => self.knn_k = parse_num(key, v)?,
            "sw_projections" => self.sw_projections = parse_num(key, v)?,
            "out_dir" => self.out_dir = v.to_string(),
            _ => return Err(err(key, "unknown key")),
        }
        Ok(())
    }

    /// Parse config text on top of the defaults, then validate.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(err(line, format!("line {}: expected `key = value`", lineno + 1)));
            };
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(err(k, "duplicate key"));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    /// File (optional) plus overrides; overrides take precedence.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(err(key, format!("{key} out of [0,1]")))
            }
        };
        let nonneg = |key: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(err(key, format!("{key} must be >= 0")))
            }
        };
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(err(key, format!("{key} must be > 0")))
            }
        };
        self.dataset_kind()
            .map_err(|e| err("dataset", e.to_string()))?;
        unit("ema_mu", self.ema_mu)?;
        unit("t_trunc", self.t_trunc)?;
        unit("t_skip", self.t_skip)?;
        unit("label_drop", self.label_drop)?;
        nonneg("lambda_gan", self.lambda_gan)?;
        nonneg("lambda_rf", self.lambda_rf)?;
        nonneg("lambda_bi", self.lambda_bi)?;
        positive("lr_teacher", self.lr_teacher)?;
        positive("lr_student", self.lr_student)?;
        positive("lr_disc", self.lr_disc)?;
        positive("adam_eps", self.adam_eps)?;
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(err("adam_beta1", "adam_beta1 out of [0,1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(err("adam_beta2", "adam_beta2 out of [0,1)"));
        }
        if !self.gamma.is_finite() {
            return Err(err("gamma", "gamma must be finite"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(err("hidden", "hidden widths must be positive"));
        }
        if self.disc_hidden.is_empty() || self.disc_hidden.contains(&0) {
            return Err(err("disc_hidden", "hidden widths must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(err("time_embed_dim", "must be even and positive"));
        }
        if !(self.time_max_freq >= 1.0 && self.time_max_freq.is_finite()) {
            return Err(err("time_max_freq", "must be >= 1"));
        }
        if self.conditional && self.class_embed_dim == 0 {
            return Err(err("class_embed_dim", "must be positive for conditional runs"));
        }
        if self.conditional && self.dataset_kind()?.n_classes().is_none() {
            return Err(err("conditional", format!("dataset {} has no labels", self.dataset)));
        }
        if self.grid_n < 2 {
            return Err(err("grid_n", "grid_n must be >= 2"));
        }
        if self.batch_size == 0 {
            return Err(err("batch_size", "batch_size must be >= 1"));
        }
        if self.eval_n < 2 {
            return Err(err("eval_n", "eval_n must be >= 2"));
        }
        if self.eval_nfes.is_empty() || self.eval_nfes.contains(&0) {
            return Err(err("eval_nfes", "NFE list must be nonempty and positive"));
        }
        if self.teacher_nfe == 0 {
            return Err(err("teacher_nfe", "must be >= 1"));
        }
        if self.knn_k == 0 || self.knn_k >= self.eval_n {
            return Err(err("knn_k", "knn_k must be in 1..eval_n"));
        }
        if self.sw_projections == 0 {
            return Err(err("sw_projections", "must be >= 1"));
        }
        Ok(())
    }

    pub fn dataset_kind(&self) -> Result<Dataset> {
        self.dataset.parse()
    }

    pub fn velocity_arch(&self) -> Result<VelocityArch> {
        let ds = self.dataset_kind()?;
        Ok(VelocityArch {
            data_dim: ds.dim(),
            hidden: self.hidden.clone(),
            time_embed_dim: self.time_embed_dim,
            time_max_freq: self.time_max_freq,
            n_classes: if self.conditional { ds.n_classes() } else { None },
            class_embed_dim: self.class_embed_dim,
        })
    }

    pub fn disc_arch(&self) -> Result<DiscArch> {
        Ok(DiscArch {
            data_dim: self.dataset_kind()?.dim(),
            hidden: self.disc_hidden.clone(),
        })
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "dataset" => self.dataset.clone(),
            "seed" => self.seed.to_string(),
            "hidden" => join(&self.hidden),
            "time_embed_dim" => self.time_embed_dim.to_string(),
            "time_max_freq" => self.time_max_freq.to_string(),
            "class_embed_dim" => self.class_embed_dim.to_string(),
            "conditional" => self.conditional.to_string(),
            "label_drop" => self.label_drop.to_string(),
            "gamma" => self.gamma.to_string(),
            "disc_hidden" => join(&self.disc_hidden),
            "teacher_iters" => self.teacher_iters.to_string(),
            "lr_teacher" => self.lr_teacher.to_string(),
            "teacher_lr_schedule" => self.teacher_lr_schedule.name().into(),
            "grid_n" => self.grid_n.to_string(),
            "lambda_gan" => self.lambda_gan.to_string(),
            "lambda_rf" => self.lambda_rf.to_string(),
            "lambda_bi" => self.lambda_bi.to_string(),
            "n_gan" => self.n_gan.to_string(),
            "n_rf" => self.n_rf.to_string(),
            "n_bi" => self.n_bi.to_string(),
            "t_trunc" => self.t_trunc.to_string(),
            "t_skip" => self.t_skip.to_string(),
            "ema_mu" => self.ema_mu.to_string(),
            "lr_student" => self.lr_student.to_string(),
            "lr_disc" => self.lr_disc.to_string(),
            "iters" => self.iters.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "t_sampling" => match self.t_sampling {
                TimeSampling::Continuous => "continuous".into(),
                TimeSampling::Grid => "grid".into(),
            },
            "distill_lr_schedule" => self.distill_lr_schedule.name().into(),
            "teacher_ckpt" => self.teacher_ckpt.clone().unwrap_or_default(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "log_every" => self.log_every.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "ckpt_every" => self.ckpt_every.to_string(),
            "eval_n" => self.eval_n.to_string(),
            "eval_nfes" => join(&self.eval_nfes),
            "teacher_nfe" => self.teacher_nfe.to_string(),
            "knn_k" => self.knn_k.to_string(),
            "sw_projections" => self.sw_projections.to_string(),
            "out_dir" => self.out_dir.clone(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Full config in the file grammar; `from_text(to_text())` reproduces it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            writeln!(s, "{k} = {}", self.value_of(k)).unwrap();
        }
        s
    }

    /// Keys whose values differ between two configs.
    pub fn diff_keys(&self, other: &RunConfig) -> Vec<&'static str> {
        KEYS.iter()
            .copied()
            .filter(|k| self.value_of(k) != other.value_of(k))
            .collect()
    }
}
