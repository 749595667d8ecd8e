//! Velocity-field MLP and discriminator MLP.
//!
//! Both networks are plain SiLU MLPs over the autodiff graph. The velocity
//! net consumes `[z, time_embed(t), class_embed(c)]` concatenated along the
//! feature axis; its class table carries one extra row used as the null
//! token for unconditional evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Prefixed, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_TIME_MAX_FREQ: f64 = 100.0;

/// Sinusoidal embedding `[sin(ω_0 t) .. sin(ω_{K-1} t), cos(ω_0 t) .. cos(ω_{K-1} t)]`
/// with `K = dim / 2` frequencies spaced geometrically from 1 to `max_freq`.
pub fn time_embed(t: f64, dim: usize, max_freq: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("time embedding dim {dim} must be even and positive")));
    }
    let freqs = time_frequencies(dim / 2, max_freq);
    let mut out = Vec::with_capacity(dim);
    out.extend(freqs.iter().map(|w| (w * t).sin()));
    out.extend(freqs.iter().map(|w| (w * t).cos()));
    Ok(out)
}

pub fn time_frequencies(k: usize, max_freq: f64) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    (0..k)
        .map(|i| max_freq.powf(i as f64 / (k - 1) as f64))
        .collect()
}

/// Conditioning token for a class-conditional net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cond {
    /// The null token ∅.
    Null,
    Class(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityArch {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub time_max_freq: f64,
    /// `Some(n)` for a class-conditional net with `n` real classes.
    pub n_classes: Option<usize>,
    pub class_embed_dim: usize,
}

impl Default for VelocityArch {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: vec![128; 4],
            time_embed_dim: 32,
            time_max_freq: DEFAULT_TIME_MAX_FREQ,
            n_classes: None,
            class_embed_dim: 16,
        }
    }
}

impl VelocityArch {
    pub fn input_dim(&self) -> usize {
        self.data_dim
            + self.time_embed_dim
            + if self.n_classes.is_some() { self.class_embed_dim } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("network widths must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim must be even and positive"));
        }
        if !(self.time_max_freq >= 1.0 && self.time_max_freq.is_finite()) {
            return Err(Error::invalid("time_max_freq must be >= 1"));
        }
        if matches!(self.n_classes, Some(0)) || (self.n_classes.is_some() && self.class_embed_dim == 0) {
            return Err(Error::invalid("conditional nets need classes and an embedding dim"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        dims_chain(self.input_dim(), &self.hidden, self.data_dim)
    }

    pub fn param_count(&self) -> usize {
        let mlp: usize = self.layer_dims().iter().map(|(i, o)| i * o + o).sum();
        mlp + self.n_classes.map_or(0, |n| (n + 1) * self.class_embed_dim)
    }
}

fn dims_chain(input: usize, hidden: &[usize], output: usize) -> Vec<(usize, usize)> {
    let mut widths = vec![input];
    widths.extend_from_slice(hidden);
    widths.push(output);
    widths.windows(2).map(|w| (w[0], w[1])).collect()
}

fn init_mlp(params: &mut ParamSet, dims: &[(usize, usize)], rng: &mut ChaCha8Rng, zero_final: bool) {
    let last = dims.len() - 1;
    for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            if zero_final && i == last {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        let w = draw(fan_in * fan_out);
        let b = draw(fan_out);
        params.insert(format!("l{i}.w"), Tensor::matrix(fan_in, fan_out, w).unwrap());
        params.insert(format!("l{i}.b"), Tensor::new(vec![fan_out], b).unwrap());
    }
}

fn build_mlp(g: &mut Graph, prefix: &str, x: Var, n_layers: usize) -> Var {
    let mut h = x;
    for i in 0..n_layers {
        let w = g.param(&format!("{prefix}.l{i}.w"));
        let b = g.param(&format!("{prefix}.l{i}.b"));
        h = g.linear(h, w, b);
        if i + 1 < n_layers {
            h = g.silu(h);
        }
    }
    h
}

/// Velocity field `v(z, t[, c])`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    pub arch: VelocityArch,
    pub params: ParamSet,
}

impl VelocityNet {
    /// Random init from `seed`. With `zero_final` the output layer starts at
    /// zero, so the net is the zero field.
    pub fn new(arch: VelocityArch, seed: u64, zero_final: bool) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_mlp(&mut params, &arch.layer_dims(), &mut rng, zero_final);
        if let Some(n) = arch.n_classes {
            let table = (0..(n + 1) * arch.class_embed_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            params.insert(
                "cls_emb".into(),
                Tensor::matrix(n + 1, arch.class_embed_dim, table)?,
            );
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: VelocityArch, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        let template = Self::new(arch.clone(), 0, false)?;
        if template.params.len() != params.len()
            || template
                .params
                .iter()
                .any(|(k, t)| params.get(k).map(Tensor::shape) != Some(t.shape()))
        {
            return Err(Error::invalid("parameter blocks do not match the architecture"));
        }
        Ok(Self { arch, params })
    }

    pub fn is_conditional(&self) -> bool {
        self.arch.n_classes.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn feed<'a>(&'a self, prefix: &'a str) -> Prefixed<'a> {
        Prefixed {
            prefix,
            params: &self.params,
        }
    }

    fn n_layers(&self) -> usize {
        self.arch.hidden.len() + 1
    }

    /// Append `v(z, t[, c])` to `g`, with parameters named `{prefix}.*`.
    /// `z` must evaluate to `[t.len(), data_dim]`.
    pub fn build(
        &self,
        g: &mut Graph,
        prefix: &str,
        z: Var,
        t: &[f64],
        cond: Option<&[Cond]>,
    ) -> Result<Var> {
        if t.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let dim = self.arch.time_embed_dim;
        let mut emb = Vec::with_capacity(t.len() * dim);
        for &ti in t {
            emb.extend(time_embed(ti, dim, self.arch.time_max_freq)?);
        }
        let emb = g.constant(Tensor::matrix(t.len(), dim, emb)?);
        let mut parts = vec![z, emb];
        match (self.arch.n_classes, cond) {
            (Some(n), Some(cond)) => {
                if cond.len() != t.len() {
                    return Err(Error::invalid("label count differs from batch size"));
                }
                let mut onehot = vec![0.0; t.len() * (n + 1)];
                for (i, c) in cond.iter().enumerate() {
                    let col = match *c {
                        Cond::Null => n,
                        Cond::Class(k) if k < n => k,
                        Cond::Class(k) => {
                            return Err(Error::invalid(format!("class {k} out of range 0..{n}")))
                        }
                    };
                    onehot[i * (n + 1) + col] = 1.0;
                }
                let onehot = g.constant(Tensor::matrix(t.len(), n + 1, onehot)?);
                let table = g.param(&format!("{prefix}.cls_emb"));
                parts.push(g.matmul(onehot, table));
            }
            (Some(_), None) => {
                return Err(Error::invalid(
                    "conditional net needs a condition (use the null token for unconditional)",
                ))
            }
            (None, Some(_)) => {
                return Err(Error::invalid("unconditional net given a condition"));
            }
            (None, None) => {}
        }
        let x = g.concat(&parts);
        Ok(build_mlp(g, prefix, x, self.n_layers()))
    }

    /// Evaluate the velocity for a batch `z: [n, data_dim]`.
    pub fn velocity(&self, z: &Tensor, t: &[f64], cond: Option<&[Cond]>) -> Result<Tensor> {
        check_batch(z, t.len(), self.arch.data_dim)?;
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let v = self.build(&mut g, "net", zv, t, cond)?;
        g.run(&self.feed("net"))?;
        Ok(g.value(v).unwrap().clone())
    }
}

pub(crate) fn check_batch(z: &Tensor, n: usize, dim: usize) -> Result<()> {
    if z.rank() != 2 || z.rows() != n || z.cols() != dim {
        return Err(Error::shape(
            "batch",
            format!("expected [{n}, {dim}], got {:?}", z.shape()),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscArch {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for DiscArch {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: vec![128; 3],
        }
    }
}

impl DiscArch {
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        dims_chain(self.data_dim, &self.hidden, 1)
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// MLP producing one realness logit per point.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub arch: DiscArch,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn new(arch: DiscArch, seed: u64, zero_final: bool) -> Result<Self> {
        if arch.data_dim == 0 || arch.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("discriminator widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_mlp(&mut params, &arch.layer_dims(), &mut rng, zero_final);
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: DiscArch, params: ParamSet) -> Result<Self> {
        let template = Self::new(arch.clone(), 0, false)?;
        if template.params.len() != params.len()
            || template
                .params
                .iter()
                .any(|(k, t)| params.get(k).map(Tensor::shape) != Some(t.shape()))
        {
            return Err(Error::invalid("parameter blocks do not match the architecture"));
        }
        Ok(Self { arch, params })
    }

    pub fn feed<'a>(&'a self, prefix: &'a str) -> Prefixed<'a> {
        Prefixed {
            prefix,
            params: &self.params,
        }
    }

    /// Append the logit computation for `x: [n, data_dim]`; result `[n, 1]`.
    pub fn build(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        build_mlp(g, prefix, x, self.arch.hidden.len() + 1)
    }

    pub fn discriminate(&self, z: &Tensor) -> Result<Vec<f64>> {
        if z.rank() != 2 || z.cols() != self.arch.data_dim {
            return Err(Error::shape(
                "discriminator input",
                format!("expected [n, {}], got {:?}", self.arch.data_dim, z.shape()),
            ));
        }
        let mut g = Graph::new();
        let x = g.constant(z.clone());
        let logit = self.build(&mut g, "disc", x);
        g.run(&self.feed("disc"))?;
        Ok(g.value(logit).unwrap().data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embed_at_zero() {
        let e = time_embed(0.0, 8, 100.0).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
    }

    #[test]
    fn embed_norm() {
        for &t in &[0.0, 0.13, 0.5, 0.999, 1.0] {
            let e = time_embed(t, 32, 100.0).unwrap();
            let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_dim4_uses_frequencies_1_and_100() {
        let e = time_embed(0.5, 4, 100.0).unwrap();
        assert_eq!(e, vec![0.5f64.sin(), 50f64.sin(), 0.5f64.cos(), 50f64.cos()]);
    }

    #[test]
    fn embed_rejects_bad_input() {
        assert!(time_embed(-0.01, 4, 100.0).is_err());
        assert!(time_embed(1.01, 4, 100.0).is_err());
        assert!(time_embed(0.5, 3, 100.0).is_err());
    }

    #[test]
    fn zero_final_layer_gives_zero_velocity() {
        let net = VelocityNet::new(VelocityArch::default(), 3, true).unwrap();
        let z = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.3, 0.4]]).unwrap();
        let v = net.velocity(&z, &[0.1, 0.9], None).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn velocity_is_deterministic() {
        let net = VelocityNet::new(VelocityArch::default(), 5, false).unwrap();
        let z = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let a = net.velocity(&z, &[0.3], None).unwrap();
        let b = net.velocity(&z, &[0.3], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conditioning_mismatch_is_rejected() {
        let uncond = VelocityNet::new(VelocityArch::default(), 0, false).unwrap();
        let cond_arch = VelocityArch {
            n_classes: Some(8),
            ..VelocityArch::default()
        };
        let cond = VelocityNet::new(cond_arch, 0, false).unwrap();
        let z = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(uncond.velocity(&z, &[0.5], Some(&[Cond::Class(1)])).is_err());
        assert!(cond.velocity(&z, &[0.5], None).is_err());
        assert!(cond.velocity(&z, &[0.5], Some(&[Cond::Class(8)])).is_err());
        // the null row exists
        assert!(cond.velocity(&z, &[0.5], Some(&[Cond::Null])).is_ok());
    }

    #[test]
    fn param_counts_for_default_widths() {
        let arch = VelocityArch::default();
        assert_eq!(arch.param_count(), 54_274);
        let net = VelocityNet::new(arch.clone(), 0, false).unwrap();
        assert_eq!(net.param_count(), 54_274);
        let cond = VelocityArch {
            n_classes: Some(8),
            ..arch
        };
        assert_eq!(cond.param_count(), 56_466);
        assert_eq!(VelocityNet::new(cond, 0, false).unwrap().param_count(), 56_466);
        assert_eq!(DiscArch::default().param_count(), 2 * 128 + 128 + 2 * 16_512 + 129);
    }

    #[test]
    fn zero_disc_gives_zero_logits() {
        let d = Discriminator::new(DiscArch::default(), 1, true).unwrap();
        let z = Tensor::from_rows(&[vec![5.0, -3.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(d.discriminate(&z).unwrap(), vec![0.0, 0.0]);
        assert!(d.discriminate(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn from_params_checks_shapes() {
        let net = VelocityNet::new(VelocityArch::default(), 0, false).unwrap();
        let mut params = net.params.clone();
        assert!(VelocityNet::from_params(net.arch.clone(), params.clone()).is_ok());
        params.insert("l0.w".into(), Tensor::zeros(&[3, 3]));
        assert!(VelocityNet::from_params(net.arch.clone(), params).is_err());
    }
}
