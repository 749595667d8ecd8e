//! Self-corrected flow distillation: a student initialised from the teacher
//! is trained with a truncated consistency loss plus adversarial, reflow and
//! bidirectional terms, with an EMA copy serving as the consistency target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Feeds, Graph, ParamSet, Tensor, Var};
use crate::config::{RunConfig, TimeSampling};
use crate::datasets::{gaussian_noise, Dataset};
use crate::error::{Error, Result};
use crate::flow::{adam_config, check_loss, check_unit_time, grid_time, interpolate_batch, strip_prefix, zip_rows};
use crate::networks::{check_batch, Cond, Discriminator, VelocityNet};
use crate::seeds;

/// Loss weights, warm-up gates and time thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSchedule {
    pub lambda_gan: f64,
    pub lambda_rf: f64,
    pub lambda_bi: f64,
    pub n_gan: u64,
    pub n_rf: u64,
    pub n_bi: u64,
    pub t_trunc: f64,
    pub t_skip: f64,
    pub ema_mu: f64,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self {
            lambda_gan: 0.1,
            lambda_rf: 0.1,
            lambda_bi: 0.1,
            n_gan: 0,
            n_rf: 1000,
            n_bi: 1000,
            t_trunc: 0.4,
            t_skip: 0.1,
            ema_mu: 0.9,
        }
    }
}

impl LossSchedule {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            lambda_gan: cfg.lambda_gan,
            lambda_rf: cfg.lambda_rf,
            lambda_bi: cfg.lambda_bi,
            n_gan: cfg.n_gan,
            n_rf: cfg.n_rf,
            n_bi: cfg.n_bi,
            t_trunc: cfg.t_trunc,
            t_skip: cfg.t_skip,
            ema_mu: cfg.ema_mu,
        }
    }

    /// Truncated consistency only.
    pub fn cd_only(self) -> Self {
        Self {
            lambda_gan: 0.0,
            lambda_rf: 0.0,
            lambda_bi: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_gan", self.lambda_gan),
            ("lambda_rf", self.lambda_rf),
            ("lambda_bi", self.lambda_bi),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("{name} must be >= 0")));
            }
        }
        for (name, v) in [("t_trunc", self.t_trunc), ("t_skip", self.t_skip), ("ema_mu", self.ema_mu)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} out of [0,1]")));
            }
        }
        Ok(())
    }

    /// Which weighted terms enter the total at 1-based iteration `iter`.
    pub fn active(&self, iter: u64) -> Active {
        Active {
            gan: self.lambda_gan > 0.0 && iter >= self.n_gan,
            rf: self.lambda_rf > 0.0 && iter >= self.n_rf,
            bi: self.lambda_bi > 0.0 && iter >= self.n_bi,
        }
    }
}

/// Set of optional loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Active {
    pub gan: bool,
    pub rf: bool,
    pub bi: bool,
}

impl Active {
    pub const ALL: Active = Active {
        gan: true,
        rf: true,
        bi: true,
    };

    fn union(self, o: Active) -> Active {
        Active {
            gan: self.gan || o.gan,
            rf: self.rf || o.rf,
            bi: self.bi || o.bi,
        }
    }
}

/// Velocity evaluated with one time per row.
pub trait BatchField {
    fn velocity_rows(&self, z: &Tensor, t: &[f64]) -> Result<Tensor>;
}

impl BatchField for VelocityNet {
    fn velocity_rows(&self, z: &Tensor, t: &[f64]) -> Result<Tensor> {
        let null = null_cond(self, t.len());
        self.velocity(z, t, null.as_deref())
    }
}

impl<F: Fn(&Tensor, &[f64]) -> Result<Tensor>> BatchField for F {
    fn velocity_rows(&self, z: &Tensor, t: &[f64]) -> Result<Tensor> {
        self(z, t)
    }
}

/// Distillation ignores labels: conditional nets get the null token.
fn null_cond(net: &VelocityNet, n: usize) -> Option<Vec<Cond>> {
    net.is_conditional().then(|| vec![Cond::Null; n])
}

fn check_times(t: &[f64]) -> Result<()> {
    t.iter().try_for_each(|&ti| check_unit_time(ti))
}

/// Row-wise `z - c_i * v`.
fn sub_scaled_rows(z: &Tensor, c: &[f64], v: &Tensor) -> Tensor {
    let d = z.cols();
    let data = z
        .data()
        .iter()
        .zip(v.data())
        .enumerate()
        .map(|(k, (zi, vi))| zi - c[k / d] * vi)
        .collect();
    Tensor::new(z.shape().to_vec(), data).unwrap()
}

/// Data prediction `f(z, t) = z - t v(z, t)`, one time per row.
pub fn x0_predict(field: &dyn BatchField, z: &Tensor, t: &[f64]) -> Result<Tensor> {
    check_times(t)?;
    if z.rank() != 2 || z.rows() != t.len() {
        return Err(Error::shape("x0_predict", format!("{:?} with {} times", z.shape(), t.len())));
    }
    let v = field.velocity_rows(z, t)?;
    if v.shape() != z.shape() {
        return Err(Error::shape("x0_predict", format!("velocity {:?} for z {:?}", v.shape(), z.shape())));
    }
    Ok(sub_scaled_rows(z, t, &v))
}

/// One signed Euler step of the teacher per row:
/// `z - (t_from - t_to) v(z, t_from)`.
pub fn teacher_step(teacher: &dyn BatchField, z: &Tensor, t_from: &[f64], t_to: &[f64]) -> Result<Tensor> {
    check_times(t_from)?;
    check_times(t_to)?;
    if t_from.len() != t_to.len() || z.rank() != 2 || z.rows() != t_from.len() {
        return Err(Error::shape("teacher_step", format!("{:?} with {}/{} times", z.shape(), t_from.len(), t_to.len())));
    }
    let v = teacher.velocity_rows(z, t_from)?;
    let dt: Vec<f64> = t_from.iter().zip(t_to).map(|(a, b)| a - b).collect();
    Ok(sub_scaled_rows(z, &dt, &v))
}

/// Skipped times from uniform draws `u_s`, `u_k` in `[0, 1)`.
pub fn time_skip_with(t: f64, t_skip: f64, u_s: f64, u_k: f64) -> (f64, f64) {
    let r_s = t.clamp(0.0, t_skip);
    let r_k = (1.0 - t).clamp(0.0, t_skip);
    let down = (t - u_s * r_s).max(0.0);
    let up = (t + u_k * r_k).min(1.0);
    (down, up)
}

/// `(t_down, t_up)` around `t`, each at most `t_skip` away and inside `[0, 1]`.
pub fn time_skip(t: f64, t_skip: f64, rng: &mut impl Rng) -> (f64, f64) {
    let u_s: f64 = rng.random();
    let u_k: f64 = rng.random();
    time_skip_with(t, t_skip, u_s, u_k)
}

/// `ema <- mu ema + (1 - mu) theta`, in place.
pub fn ema_update(ema: &mut ParamSet, theta: &ParamSet, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid("ema_mu out of [0,1]"));
    }
    if ema.len() != theta.len() {
        return Err(Error::invalid("EMA and student have different parameter sets"));
    }
    for (name, e) in ema.iter() {
        match theta.get(name) {
            Some(t) if t.shape() == e.shape() => {}
            _ => return Err(Error::shape(name.clone(), "EMA and student shapes differ")),
        }
    }
    for (name, e) in ema.iter_mut() {
        let t = &theta[name];
        for (ei, ti) in e.data_mut().iter_mut().zip(t.data()) {
            *ei = mu * *ei + (1.0 - mu) * ti;
        }
    }
    Ok(())
}

/// One distillation minibatch with every random quantity already drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillBatch {
    pub z0: Tensor,
    pub z1: Tensor,
    pub t: Vec<f64>,
    pub t_down: Vec<f64>,
    pub t_up: Vec<f64>,
    /// Times for the reflow term, drawn independently of `t`.
    pub t_rf: Vec<f64>,
}

impl DistillBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let d = self.z0.cols();
        check_batch(&self.z0, n, d)?;
        check_batch(&self.z1, n, d)?;
        if self.t_down.len() != n || self.t_up.len() != n || self.t_rf.len() != n {
            return Err(Error::invalid("time vectors differ in length from the batch"));
        }
        for ts in [&self.t, &self.t_down, &self.t_up, &self.t_rf] {
            check_times(ts)?;
        }
        Ok(())
    }

    pub fn z_t(&self) -> Result<Tensor> {
        interpolate_batch(&self.z0, &self.z1, &self.t)
    }

    /// Rows in the consistency branch (`t > t_trunc`) and in the direct
    /// regression branch (`t <= t_trunc`).
    pub fn partition(&self, t_trunc: f64) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| self.t[i] > t_trunc)
    }
}

fn draw_time(sampling: TimeSampling, grid_n: usize, rng: &mut ChaCha8Rng) -> f64 {
    match sampling {
        // 1 - U[0,1) lies in (0, 1]
        TimeSampling::Continuous => 1.0 - rng.random::<f64>(),
        TimeSampling::Grid => grid_time(rng.random_range(0..grid_n), grid_n),
    }
}

/// Draw a batch; consumes the same amount of randomness whatever the
/// schedule, so gates never shift the stream.
pub fn draw_distill_batch(
    ds: Dataset,
    n: usize,
    t_skip: f64,
    sampling: TimeSampling,
    grid_n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DistillBatch> {
    let (z0, _) = ds.sample_with(n, rng)?;
    let z1 = gaussian_noise(n, ds.dim(), rng);
    let mut t = Vec::with_capacity(n);
    let mut t_down = Vec::with_capacity(n);
    let mut t_up = Vec::with_capacity(n);
    for _ in 0..n {
        let ti = draw_time(sampling, grid_n, rng);
        let (d, u) = time_skip(ti, t_skip, rng);
        t.push(ti);
        t_down.push(d);
        t_up.push(u);
    }
    let t_rf = (0..n).map(|_| draw_time(sampling, grid_n, rng)).collect();
    Ok(DistillBatch {
        z0,
        z1,
        t,
        t_down,
        t_up,
        t_rf,
    })
}

fn row_sq_dist_sum(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Truncated consistency loss.
pub fn loss_cd(
    student: &dyn BatchField,
    ema: &dyn BatchField,
    teacher: &dyn BatchField,
    batch: &DistillBatch,
    t_trunc: f64,
) -> Result<f64> {
    batch.validate()?;
    let zt = batch.z_t()?;
    let f = x0_predict(student, &zt, &batch.t)?;
    let (high, low) = batch.partition(t_trunc);
    let mut total = 0.0;
    if !high.is_empty() {
        let pick = |ts: &[f64]| high.iter().map(|&i| ts[i]).collect::<Vec<_>>();
        let (t_h, t_down) = (pick(&batch.t), pick(&batch.t_down));
        let z_down = teacher_step(teacher, &zt.select_rows(&high)?, &t_h, &t_down)?;
        let target = x0_predict(ema, &z_down, &t_down)?;
        total += row_sq_dist_sum(&target, &f.select_rows(&high)?);
    }
    if !low.is_empty() {
        total += row_sq_dist_sum(&batch.z0.select_rows(&low)?, &f.select_rows(&low)?);
    }
    Ok(total / batch.len() as f64)
}

/// Non-saturating logistic GAN losses `(generator, discriminator)` on the
/// student's one-step samples `f(z1, 1)`.
pub fn loss_gan(
    student: &dyn BatchField,
    logits: &dyn Fn(&Tensor) -> Result<Vec<f64>>,
    z1: &Tensor,
    z0: &Tensor,
) -> Result<(f64, f64)> {
    if z1.rows() == 0 || z0.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let fake = x0_predict(student, z1, &vec![1.0; z1.rows()])?;
    let d_fake = logits(&fake)?;
    let d_real = logits(z0)?;
    Ok(gan_from_logits(&d_real, &d_fake))
}

/// GAN losses from precomputed logits.
pub fn gan_from_logits(d_real: &[f64], d_fake: &[f64]) -> (f64, f64) {
    use crate::autodiff::softplus;
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64;
    let gen = mean(d_fake, &|x| softplus(-x));
    let disc = mean(d_real, &|x| softplus(-x)) + mean(d_fake, &softplus);
    (gen, disc)
}

/// Reflow loss on the student's own one-step samples.
pub fn loss_rf(student: &dyn BatchField, z1: &Tensor, t_rf: &[f64]) -> Result<f64> {
    let n = z1.rows();
    if n == 0 || t_rf.len() != n {
        return Err(Error::invalid("reflow times must match a nonempty batch"));
    }
    let x_hat = x0_predict(student, z1, &vec![1.0; n])?;
    let d = z1.cols();
    let z_hat_data = x_hat
        .data()
        .iter()
        .zip(z1.data())
        .enumerate()
        .map(|(k, (x, z))| {
            let t = t_rf[k / d];
            (1.0 - t) * x + t * z
        })
        .collect();
    let z_hat = Tensor::new(z1.shape().to_vec(), z_hat_data)?;
    let f = x0_predict(student, &z_hat, t_rf)?;
    Ok(row_sq_dist_sum(&x_hat, &f) / n as f64)
}

/// Bidirectional consistency loss: the target comes from a teacher step
/// towards noise.
pub fn loss_bi(
    student: &dyn BatchField,
    ema: &dyn BatchField,
    teacher: &dyn BatchField,
    batch: &DistillBatch,
) -> Result<f64> {
    batch.validate()?;
    let zt = batch.z_t()?;
    let f = x0_predict(student, &zt, &batch.t)?;
    let z_up = teacher_step(teacher, &zt, &batch.t, &batch.t_up)?;
    let target = x0_predict(ema, &z_up, &batch.t_up)?;
    Ok(row_sq_dist_sum(&target, &f) / batch.len() as f64)
}

/// Loss values of one step. Terms are `None` when not computed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub iter: u64,
    pub total: f64,
    pub cd: f64,
    pub gan_gen: Option<f64>,
    pub gan_disc: Option<f64>,
    pub rf: Option<f64>,
    pub bi: Option<f64>,
    pub active: Active,
}

/// Frozen teacher, student, EMA student, discriminator and their
/// optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillState {
    pub teacher: VelocityNet,
    pub student: VelocityNet,
    pub ema: VelocityNet,
    pub disc: Discriminator,
    pub opt_student: AdamState,
    pub opt_disc: AdamState,
    pub iter: u64,
    pub rng: ChaCha8Rng,
}

/// Graph holding every loss term of a step.
pub struct LossGraph {
    pub graph: Graph,
    pub cd: Var,
    pub gan_gen: Option<Var>,
    pub gan_disc: Option<Var>,
    pub rf: Option<Var>,
    pub bi: Option<Var>,
    pub total: Var,
}

fn column(g: &mut Graph, values: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::column(values)?))
}

/// `z - t v(z, t)` in the graph.
fn build_x0(g: &mut Graph, net: &VelocityNet, prefix: &str, z: Var, t: &[f64]) -> Result<Var> {
    let null = null_cond(net, t.len());
    let v = net.build(g, prefix, z, t, null.as_deref())?;
    let tc = column(g, t)?;
    let tv = g.mul(tc, v);
    Ok(g.sub(z, tv))
}

/// `z - dt v` in the graph.
fn build_step(g: &mut Graph, z: Var, v: Var, dt: &[f64]) -> Result<Var> {
    let c = column(g, dt)?;
    let cv = g.mul(c, v);
    Ok(g.sub(z, cv))
}

fn sum_sq_dist(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    g.sum(sq)
}

impl DistillState {
    /// Student and EMA start as exact copies of the teacher.
    pub fn init(cfg: &RunConfig, teacher: VelocityNet) -> Result<Self> {
        let arch = cfg.velocity_arch()?;
        if teacher.arch != arch {
            return Err(Error::Config {
                key: "teacher_ckpt".into(),
                detail: "teacher architecture does not match the config".into(),
            });
        }
        let disc = Discriminator::new(cfg.disc_arch()?, seeds::derive(cfg.seed, seeds::DISC_INIT), false)?;
        let adam = adam_config(cfg);
        Ok(Self {
            opt_student: AdamState::new(adam, &teacher.params),
            opt_disc: AdamState::new(adam, &disc.params),
            student: teacher.clone(),
            ema: teacher.clone(),
            teacher,
            disc,
            iter: 0,
            rng: ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, seeds::DISTILL_STREAM)),
        })
    }

    fn feeds(&self) -> [crate::autodiff::Prefixed<'_>; 4] {
        [
            self.student.feed("student"),
            self.ema.feed("ema"),
            self.teacher.feed("teacher"),
            self.disc.feed("disc"),
        ]
    }

    /// Build the loss graph. `weights` decides which terms enter `total`;
    /// `extra` adds further terms for reporting only.
    pub fn build_losses(&self, batch: &DistillBatch, sched: &LossSchedule, weights: Active, extra: Active) -> Result<LossGraph> {
        batch.validate()?;
        let want = weights.union(extra);
        let n = batch.len();
        let mut g = Graph::new();
        let zt_val = batch.z_t()?;
        let zt = g.constant(zt_val.clone());
        let f = build_x0(&mut g, &self.student, "student", zt, &batch.t)?;

        // teacher velocity at (z_t, t): full batch if the upward step needs it
        let (high, low) = batch.partition(sched.t_trunc);
        let v_full = if want.bi {
            let null = null_cond(&self.teacher, n);
            Some(self.teacher.build(&mut g, "teacher", zt, &batch.t, null.as_deref())?)
        } else {
            None
        };

        let mut parts = Vec::new();
        if !high.is_empty() {
            let pick = |ts: &[f64]| high.iter().map(|&i| ts[i]).collect::<Vec<_>>();
            let (t_h, t_down) = (pick(&batch.t), pick(&batch.t_down));
            let zt_h = g.select_rows(zt, &high);
            let v_h = match v_full {
                Some(v) => g.select_rows(v, &high),
                None => {
                    let null = null_cond(&self.teacher, high.len());
                    self.teacher.build(&mut g, "teacher", zt_h, &t_h, null.as_deref())?
                }
            };
            let dt: Vec<f64> = t_h.iter().zip(&t_down).map(|(a, b)| a - b).collect();
            let z_down = build_step(&mut g, zt_h, v_h, &dt)?;
            let z_down = g.stop_grad(z_down);
            let target = build_x0(&mut g, &self.ema, "ema", z_down, &t_down)?;
            let target = g.stop_grad(target);
            let f_h = g.select_rows(f, &high);
            parts.push(sum_sq_dist(&mut g, target, f_h));
        }
        if !low.is_empty() {
            let z0_l = g.constant(batch.z0.select_rows(&low)?);
            let f_l = g.select_rows(f, &low);
            parts.push(sum_sq_dist(&mut g, z0_l, f_l));
        }
        let cd_sum = match parts[..] {
            [a, b] => g.add(a, b),
            [a] => a,
            _ => unreachable!("batch is nonempty"),
        };
        let cd = g.scale(cd_sum, 1.0 / n as f64);

        let z1 = g.constant(batch.z1.clone());
        let fake = if want.gan || want.rf {
            Some(build_x0(&mut g, &self.student, "student", z1, &vec![1.0; n])?)
        } else {
            None
        };

        let (mut gan_gen, mut gan_disc) = (None, None);
        if want.gan {
            let fake = fake.unwrap();
            let d_fake = self.disc.build(&mut g, "disc", fake);
            let neg = g.neg(d_fake);
            let sp = g.softplus(neg);
            gan_gen = Some(g.mean(sp));

            let z0 = g.constant(batch.z0.clone());
            let d_real = self.disc.build(&mut g, "disc", z0);
            let neg_real = g.neg(d_real);
            let sp_real = g.softplus(neg_real);
            let real_term = g.mean(sp_real);
            let sg_fake = g.stop_grad(fake);
            let d_sg = self.disc.build(&mut g, "disc", sg_fake);
            let sp_fake = g.softplus(d_sg);
            let fake_term = g.mean(sp_fake);
            gan_disc = Some(g.add(real_term, fake_term));
        }

        let mut rf = None;
        if want.rf {
            let x_hat = g.stop_grad(fake.unwrap());
            let one_minus: Vec<f64> = batch.t_rf.iter().map(|t| 1.0 - t).collect();
            let a = column(&mut g, &one_minus)?;
            let b = column(&mut g, &batch.t_rf)?;
            let ax = g.mul(a, x_hat);
            let bz = g.mul(b, z1);
            let z_hat = g.add(ax, bz);
            let f_hat = build_x0(&mut g, &self.student, "student", z_hat, &batch.t_rf)?;
            rf = Some(g.mean_sq_dist(x_hat, f_hat));
        }

        let mut bi = None;
        if want.bi {
            let dt: Vec<f64> = batch.t.iter().zip(&batch.t_up).map(|(a, b)| a - b).collect();
            let z_up = build_step(&mut g, zt, v_full.unwrap(), &dt)?;
            let z_up = g.stop_grad(z_up);
            let target = build_x0(&mut g, &self.ema, "ema", z_up, &batch.t_up)?;
            let target = g.stop_grad(target);
            bi = Some(g.mean_sq_dist(target, f));
        }

        let mut total = cd;
        for (on, term, lambda) in [
            (weights.gan, gan_gen, sched.lambda_gan),
            (weights.rf, rf, sched.lambda_rf),
            (weights.bi, bi, sched.lambda_bi),
        ] {
            if on {
                let w = g.scale(term.unwrap(), lambda);
                total = g.add(total, w);
            }
        }
        Ok(LossGraph {
            graph: g,
            cd,
            gan_gen,
            gan_disc,
            rf,
            bi,
            total,
        })
    }

    /// Evaluate a built loss graph with the current parameters.
    pub fn run_losses(&self, lg: &mut LossGraph) -> Result<()> {
        let [s, e, t, d] = self.feeds();
        lg.graph.run(&Feeds(vec![&s, &e, &t, &d]))
    }

    /// Loss values on a given batch without updating anything.
    pub fn evaluate(&self, batch: &DistillBatch, sched: &LossSchedule, weights: Active) -> Result<StepLosses> {
        let mut lg = self.build_losses(batch, sched, weights, Active::ALL)?;
        self.run_losses(&mut lg)?;
        read_losses(&lg, self.iter, weights)
    }

    /// One training iteration: draw a batch, update student (and
    /// discriminator while the adversarial term is on), then the EMA.
    /// With `report_all`, inactive terms are evaluated for logging too.
    pub fn step(&mut self, cfg: &RunConfig, sched: &LossSchedule, ds: Dataset, report_all: bool) -> Result<StepLosses> {
        let batch = draw_distill_batch(ds, cfg.batch_size, sched.t_skip, cfg.t_sampling, cfg.grid_n, &mut self.rng)?;
        let rate = |base| cfg.distill_lr_schedule.rate(base, self.iter, cfg.iters);
        let (lr_s, lr_d) = (rate(cfg.lr_student), rate(cfg.lr_disc));
        self.step_on(&batch, sched, lr_s, lr_d, report_all)
    }

    /// As [`step`](Self::step) on a supplied batch.
    pub fn step_on(
        &mut self,
        batch: &DistillBatch,
        sched: &LossSchedule,
        lr_student: f64,
        lr_disc: f64,
        report_all: bool,
    ) -> Result<StepLosses> {
        let iter = self.iter + 1;
        let active = sched.active(iter);
        let extra = if report_all { Active::ALL } else { Active::default() };
        let mut lg = self.build_losses(batch, sched, active, extra)?;
        self.run_losses(&mut lg).map_err(|e| match e {
            Error::NonFinite(node) => Error::Divergence {
                iter,
                detail: format!("non-finite value at {node}"),
            },
            other => other,
        })?;
        let losses = read_losses(&lg, iter, active)?;
        check_loss(iter, losses.total)?;

        let grads = lg.graph.backward(lg.total, &Tensor::scalar(1.0))?;
        let g_student = strip_prefix(grads, "student");
        let g_disc = if active.gan {
            let d = lg.gan_disc.expect("built when active");
            check_loss(iter, losses.gan_disc.unwrap())?;
            Some(strip_prefix(lg.graph.backward(d, &Tensor::scalar(1.0))?, "disc"))
        } else {
            None
        };
        self.opt_student.step(&mut self.student.params, &g_student, lr_student)?;
        if let Some(gd) = g_disc {
            self.opt_disc.step(&mut self.disc.params, &gd, lr_disc)?;
        }
        ema_update(&mut self.ema.params, &self.student.params, sched.ema_mu)?;
        self.iter = iter;
        Ok(losses)
    }
}

fn read_losses(lg: &LossGraph, iter: u64, active: Active) -> Result<StepLosses> {
    let g = &lg.graph;
    let opt = |v: Option<Var>| v.map(|v| g.scalar(v)).transpose();
    Ok(StepLosses {
        iter,
        total: g.scalar(lg.total)?,
        cd: g.scalar(lg.cd)?,
        gan_gen: opt(lg.gan_gen)?,
        gan_disc: opt(lg.gan_disc)?,
        rf: opt(lg.rf)?,
        bi: opt(lg.bi)?,
        active,
    })
}

/// Run distillation until `state.iter == until`; returns losses logged every
/// `cfg.log_every` iterations (and at the first).
pub fn continue_distill(state: &mut DistillState, cfg: &RunConfig, until: u64) -> Result<Vec<StepLosses>> {
    let sched = LossSchedule::from_config(cfg);
    sched.validate()?;
    let ds = cfg.dataset_kind()?;
    let mut log = Vec::new();
    while state.iter < until {
        let next = state.iter + 1;
        let logging = cfg.log_every > 0 && (next % cfg.log_every == 0 || next == 1);
        let losses = state.step(cfg, &sched, ds, logging)?;
        if logging {
            log.push(losses);
        }
    }
    Ok(log)
}

/// Convenience for the standalone loss functions on a state's nets.
pub fn state_losses(state: &DistillState, batch: &DistillBatch, sched: &LossSchedule) -> Result<(f64, (f64, f64), f64, f64)> {
    let logits = |x: &Tensor| state.disc.discriminate(x);
    let cd = loss_cd(&state.student, &state.ema, &state.teacher, batch, sched.t_trunc)?;
    let gan = loss_gan(&state.student, &logits, &batch.z1, &batch.z0)?;
    let rf = loss_rf(&state.student, &batch.z1, &batch.t_rf)?;
    let bi = loss_bi(&state.student, &state.ema, &state.teacher, batch)?;
    Ok((cd, gan, rf, bi))
}

/// `|a - b|` over all parameters, as a sum of squares.
pub fn param_sq_dist(a: &ParamSet, b: &ParamSet) -> f64 {
    a.iter().map(|(k, t)| zip_rows(t, &b[k], |x, y| (x - y) * (x - y)).data().iter().sum::<f64>()).sum()
}
