//! Flow-matching primitives: the linear path between data (t = 0) and noise
//! (t = 1), the velocity regression loss, classifier-free guidance, and the
//! Euler sampler that integrates from t = 1 down to t = 0.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamConfig, AdamState, Gradients, Graph, Tensor};
use crate::config::RunConfig;
use crate::datasets::{gaussian_noise, Dataset};
use crate::error::{Error, Result};
use crate::networks::{check_batch, Cond, VelocityNet};
use crate::seeds;

/// `(1 - t) z0 + t z1`.
pub fn interpolate(z0: &[f64], z1: &[f64], t: f64) -> Result<Vec<f64>> {
    check_unit_time(t)?;
    if z0.len() != z1.len() {
        return Err(Error::shape("interpolate", "z0 and z1 differ in dimension"));
    }
    Ok(z0.iter().zip(z1).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// Row-wise [`interpolate`] with one time per row.
pub fn interpolate_batch(z0: &Tensor, z1: &Tensor, t: &[f64]) -> Result<Tensor> {
    if z0.shape() != z1.shape() || z0.rank() != 2 || z0.rows() != t.len() {
        return Err(Error::shape(
            "interpolate",
            format!("z0 {:?}, z1 {:?}, {} times", z0.shape(), z1.shape(), t.len()),
        ));
    }
    let d = z0.cols();
    let mut out = Vec::with_capacity(z0.len());
    for (i, &ti) in t.iter().enumerate() {
        out.extend(interpolate(z0.row(i), z1.row(i), ti)?);
    }
    Tensor::matrix(t.len(), d, out)
}

pub(crate) fn check_unit_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::invalid(format!("time {t} outside [0, 1]")))
    }
}

/// Training tuple for one step of flow matching.
#[derive(Clone, Debug)]
pub struct FlowBatch {
    pub z0: Tensor,
    pub z1: Tensor,
    pub t: Vec<f64>,
    pub labels: Option<Vec<Cond>>,
}

impl FlowBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.t.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n = self.t.len();
        let d = self.z0.cols();
        check_batch(&self.z0, n, d)?;
        check_batch(&self.z1, n, d)?;
        if self.labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::invalid("label count differs from batch size"));
        }
        self.t.iter().try_for_each(|&t| check_unit_time(t))
    }

    pub fn z_t(&self) -> Result<Tensor> {
        interpolate_batch(&self.z0, &self.z1, &self.t)
    }
}

fn fm_graph(net: &VelocityNet, batch: &FlowBatch) -> Result<(Graph, crate::autodiff::Var)> {
    batch.validate()?;
    let mut g = Graph::new();
    let zt = g.constant(batch.z_t()?);
    let target = g.constant(zip_rows(&batch.z1, &batch.z0, |a, b| a - b));
    let v = net.build(&mut g, "net", zt, &batch.t, batch.labels.as_deref())?;
    let loss = g.mean_sq_dist(target, v);
    Ok((g, loss))
}

/// Mean over the batch of `|(z1 - z0) - v(z_t, t[, c])|²`.
pub fn fm_loss(net: &VelocityNet, batch: &FlowBatch) -> Result<f64> {
    let (mut g, loss) = fm_graph(net, batch)?;
    g.run(&net.feed("net"))?;
    g.scalar(loss)
}

/// Loss value and its gradient with respect to the net's parameters
/// (keyed by unprefixed parameter name).
pub fn fm_loss_and_grads(net: &VelocityNet, batch: &FlowBatch) -> Result<(f64, Gradients)> {
    let (mut g, loss) = fm_graph(net, batch)?;
    g.run(&net.feed("net"))?;
    let grads = g.backward(loss, &Tensor::scalar(1.0))?;
    Ok((g.scalar(loss)?, strip_prefix(grads, "net")))
}

pub(crate) fn strip_prefix(grads: Gradients, prefix: &str) -> Gradients {
    grads
        .into_iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(prefix)
                .and_then(|r| r.strip_prefix('.'))
                .map(|r| (r.to_string(), v))
        })
        .collect()
}

pub(crate) fn zip_rows(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// `γ v(z, c, t) + (1 - γ) v(z, ∅, t)` for a batch sharing one time.
pub fn cfg_velocity(net: &VelocityNet, z: &Tensor, t: f64, classes: &[usize], gamma: f64) -> Result<Tensor> {
    let n = z.rows();
    let ts = vec![t; n];
    if !net.is_conditional() {
        if gamma != 1.0 {
            return Err(Error::invalid("guidance with gamma != 1 needs a conditional net"));
        }
        return net.velocity(z, &ts, None);
    }
    if classes.len() != n {
        return Err(Error::invalid("class count differs from batch size"));
    }
    let cond: Vec<Cond> = classes.iter().map(|&k| Cond::Class(k)).collect();
    let null = vec![Cond::Null; n];
    if gamma == 1.0 {
        return net.velocity(z, &ts, Some(&cond));
    }
    if gamma == 0.0 {
        return net.velocity(z, &ts, Some(&null));
    }
    let vc = net.velocity(z, &ts, Some(&cond))?;
    let vu = net.velocity(z, &ts, Some(&null))?;
    Ok(zip_rows(&vc, &vu, |c, u| gamma * c + (1.0 - gamma) * u))
}

/// Anything that yields a velocity for a batch at a shared time.
pub trait VelocityField {
    fn velocity_at(&self, z: &Tensor, t: f64) -> Result<Tensor>;
}

impl VelocityField for VelocityNet {
    /// Conditional nets are evaluated with the null token.
    fn velocity_at(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let ts = vec![t; z.rows()];
        if self.is_conditional() {
            let null = vec![Cond::Null; z.rows()];
            self.velocity(z, &ts, Some(&null))
        } else {
            self.velocity(z, &ts, None)
        }
    }
}

/// A conditional net sampled with guidance scale `gamma` towards `classes`.
pub struct Guided<'a> {
    pub net: &'a VelocityNet,
    pub classes: Vec<usize>,
    pub gamma: f64,
}

impl VelocityField for Guided<'_> {
    fn velocity_at(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        cfg_velocity(self.net, z, t, &self.classes, self.gamma)
    }
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> VelocityField for F {
    fn velocity_at(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self(z, t)
    }
}

/// One recorded sampler state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub t: f64,
    pub z: Tensor,
    pub v: Tensor,
    /// `z - t v`, the one-step estimate of clean data from this state.
    pub z0_hat: Tensor,
}

/// Sampler states from t = 1 down to t = 0. The final entry (t = 0) holds
/// the returned sample; its velocity is evaluated for completeness only.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    /// Number of Euler steps taken (the final t = 0 record excluded).
    pub fn n_steps(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let d = self.steps[0].z.cols();
        let mut header = vec!["sample_id".to_string(), "step".into(), "t".into()];
        for prefix in ["z", "v", "zhat0"] {
            header.extend((0..d).map(|j| format!("{prefix}_{j}")));
        }
        writeln!(w, "{}", header.join(","))?;
        let n = self.steps[0].z.rows();
        for i in 0..n {
            for (k, s) in self.steps.iter().enumerate() {
                let mut row = vec![i.to_string(), k.to_string(), s.t.to_string()];
                for src in [&s.z, &s.v, &s.z0_hat] {
                    row.extend(src.row(i).iter().map(f64::to_string));
                }
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// Euler integration of `dz/dt = v` from t = 1 to t = 0 on the uniform grid
/// `t_k = 1 - k / n_steps`.
pub fn euler_sample(
    field: &dyn VelocityField,
    z1: &Tensor,
    n_steps: usize,
    record: bool,
) -> Result<(Tensor, Option<Trajectory>)> {
    if n_steps < 1 {
        return Err(Error::invalid("n_steps must be >= 1"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut z = z1.clone();
    let mut steps = Vec::new();
    for k in 0..n_steps {
        let t = 1.0 - k as f64 * dt;
        let v = field.velocity_at(&z, t)?;
        if v.shape() != z.shape() {
            return Err(Error::shape("velocity field", "output shape differs from input"));
        }
        let next = zip_rows(&z, &v, |a, b| a - dt * b);
        if record {
            let z0_hat = zip_rows(&z, &v, |a, b| a - t * b);
            steps.push(TrajectoryStep { t, z, v, z0_hat });
        }
        z = next;
    }
    let traj = if record {
        let v = field.velocity_at(&z, 0.0)?;
        steps.push(TrajectoryStep {
            t: 0.0,
            z0_hat: z.clone(),
            z: z.clone(),
            v,
        });
        Some(Trajectory { steps })
    } else {
        None
    };
    Ok((z, traj))
}

/// Time of grid index `i ∈ 0..n`: `(i + 1) / n`, so the grid is
/// `1/n, 2/n, .., 1`, the times an `n`-step Euler sampler visits.
pub fn grid_time(i: usize, n: usize) -> f64 {
    (i + 1) as f64 / n as f64
}

/// Mutable state of teacher training.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub net: VelocityNet,
    pub opt: AdamState,
    pub iter: u64,
    pub rng: ChaCha8Rng,
}

impl TeacherState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let net = VelocityNet::new(cfg.velocity_arch()?, seeds::derive(cfg.seed, seeds::TEACHER_INIT), true)?;
        let opt = AdamState::new(adam_config(cfg), &net.params);
        Ok(Self {
            net,
            opt,
            iter: 0,
            rng: ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, seeds::TEACHER_STREAM)),
        })
    }

    /// Draw a batch and take one Adam step; returns the batch loss.
    pub fn train_step(&mut self, cfg: &RunConfig, ds: Dataset) -> Result<f64> {
        let batch = draw_teacher_batch(
            ds,
            cfg.batch_size,
            cfg.grid_n,
            self.net.is_conditional().then_some(cfg.label_drop),
            &mut self.rng,
        )?;
        let (loss, grads) = fm_loss_and_grads(&self.net, &batch)?;
        check_loss(self.iter + 1, loss)?;
        let lr = cfg.teacher_lr_schedule.rate(cfg.lr_teacher, self.iter, cfg.teacher_iters);
        self.opt.step(&mut self.net.params, &grads, lr)?;
        self.iter += 1;
        Ok(loss)
    }
}

pub(crate) fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    }
}

/// Loss values above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub(crate) fn check_loss(iter: u64, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Divergence {
            iter,
            detail: format!("loss {loss}"),
        });
    }
    Ok(())
}

/// Batch for teacher training: times on the `grid_n` grid. With
/// `label_drop = Some(p)` labels are kept and replaced by ∅ with prob. `p`.
pub fn draw_teacher_batch(
    ds: Dataset,
    n: usize,
    grid_n: usize,
    label_drop: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<FlowBatch> {
    let (z0, labels) = ds.sample_with(n, rng)?;
    let z1 = gaussian_noise(n, ds.dim(), rng);
    let t: Vec<f64> = (0..n).map(|_| grid_time(rng.random_range(0..grid_n), grid_n)).collect();
    let labels = match (label_drop, labels) {
        (Some(p), Some(ls)) => Some(
            ls.into_iter()
                .map(|k| if rng.random_bool(p) { Cond::Null } else { Cond::Class(k) })
                .collect(),
        ),
        (Some(_), None) => return Err(Error::invalid(format!("dataset {ds} has no labels"))),
        _ => None,
    };
    Ok(FlowBatch { z0, z1, t, labels })
}

/// Loss curve entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub iter: u64,
    pub loss: f64,
}

/// Train a teacher from scratch for `cfg.teacher_iters` steps; returns the
/// final state and the loss logged every `cfg.log_every` steps.
pub fn train_teacher(cfg: &RunConfig) -> Result<(TeacherState, Vec<LossPoint>)> {
    let mut state = TeacherState::init(cfg)?;
    let log = continue_teacher(&mut state, cfg, cfg.teacher_iters)?;
    Ok((state, log))
}

/// Run teacher training until `state.iter == until`.
pub fn continue_teacher(state: &mut TeacherState, cfg: &RunConfig, until: u64) -> Result<Vec<LossPoint>> {
    let ds = cfg.dataset_kind()?;
    let mut log = Vec::new();
    while state.iter < until {
        let loss = state.train_step(cfg, ds)?;
        if cfg.log_every > 0 && (state.iter % cfg.log_every == 0 || state.iter == 1 || state.iter == until) {
            log.push(LossPoint { iter: state.iter, loss });
        }
    }
    Ok(log)
}
