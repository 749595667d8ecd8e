//! Toy 2D distributions and the identity encoder.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const GAUSS8_RADIUS: f64 = 2.0;
pub const GAUSS8_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    Gauss8,
    Moons,
    Checkerboard,
    Spiral,
    PointMass,
}

impl Dataset {
    pub const ALL: [Dataset; 5] = [
        Dataset::Gauss8,
        Dataset::Moons,
        Dataset::Checkerboard,
        Dataset::Spiral,
        Dataset::PointMass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Gauss8 => "gauss8",
            Dataset::Moons => "moons",
            Dataset::Checkerboard => "checkerboard",
            Dataset::Spiral => "spiral",
            Dataset::PointMass => "point_mass",
        }
    }

    pub fn dim(self) -> usize {
        2
    }

    /// Number of label classes, for datasets that carry labels.
    pub fn n_classes(self) -> Option<usize> {
        match self {
            Dataset::Gauss8 => Some(8),
            Dataset::Moons => Some(2),
            _ => None,
        }
    }

    /// Half-width of a box that holds essentially all samples.
    pub fn bound(self) -> f64 {
        match self {
            Dataset::Gauss8 => 3.0,
            Dataset::Moons => 2.5,
            Dataset::Checkerboard => 2.0,
            Dataset::Spiral => 4.5,
            Dataset::PointMass => 0.0,
        }
    }

    /// Draw `n` points (and labels where the dataset has them).
    pub fn sample_with(self, n: usize, rng: &mut impl Rng) -> Result<(Tensor, Option<Vec<usize>>)> {
        if n == 0 {
            return Err(Error::invalid("sample count must be >= 1"));
        }
        let mut pts = Vec::with_capacity(2 * n);
        let mut labels = self.n_classes().map(|_| Vec::with_capacity(n));
        for _ in 0..n {
            let (x, y, label) = self.draw(rng);
            pts.push(x);
            pts.push(y);
            if let (Some(ls), Some(l)) = (labels.as_mut(), label) {
                ls.push(l);
            }
        }
        Ok((Tensor::matrix(n, 2, pts)?, labels))
    }

    fn draw(self, rng: &mut impl Rng) -> (f64, f64, Option<usize>) {
        let normal = |rng: &mut dyn rand::RngCore| -> f64 { rng.sample(StandardNormal) };
        match self {
            Dataset::Gauss8 => {
                let k = rng.random_range(0..8usize);
                let [cx, cy] = gauss8_center(k);
                let x = cx + GAUSS8_STD * normal(rng);
                let y = cy + GAUSS8_STD * normal(rng);
                (x, y, Some(k))
            }
            Dataset::Moons => {
                let k = rng.random_range(0..2usize);
                let a = rng.random_range(0.0..PI);
                let (x, y) = if k == 0 {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                // centre and scale to roughly [-2, 2]
                let x = 1.5 * (x - 0.5) + 0.05 * normal(rng);
                let y = 1.5 * (y - 0.25) + 0.05 * normal(rng);
                (x, y, Some(k))
            }
            Dataset::Checkerboard => {
                let x = rng.random_range(-2.0..2.0f64);
                let stripe = if rng.random_bool(0.5) { 0.0 } else { -2.0 };
                let y = rng.random_range(0.0..1.0) + stripe + (x.floor().rem_euclid(2.0));
                (x, y, None)
            }
            Dataset::Spiral => {
                let s = rng.random_range(0.0..1.0f64).sqrt() * 3.0 * PI;
                let arm = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let x = arm * (-s.cos() * s) / (3.0 * PI) * 4.0 + 0.05 * normal(rng);
                let y = arm * (s.sin() * s) / (3.0 * PI) * 4.0 + 0.05 * normal(rng);
                (x, y, None)
            }
            Dataset::PointMass => (0.0, 0.0, None),
        }
    }
}

pub fn gauss8_center(k: usize) -> [f64; 2] {
    let a = k as f64 * PI / 4.0;
    [GAUSS8_RADIUS * a.cos(), GAUSS8_RADIUS * a.sin()]
}

/// Index of the gauss8 component whose mean is closest to `p`.
pub fn nearest_gauss8_component(p: &[f64]) -> usize {
    (0..8)
        .map(|k| {
            let c = gauss8_center(k);
            (k, (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dataset::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::UnknownDataset {
                name: s.to_string(),
                valid: Dataset::ALL.map(Dataset::name).join(", "),
            })
    }
}

/// Draw `n` points of the named dataset with a fresh generator seeded by `seed`.
pub fn sample(name: &str, n: usize, seed: u64) -> Result<(Tensor, Option<Vec<usize>>)> {
    let ds: Dataset = name.parse()?;
    ds.sample_with(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Standard normal noise `[n, dim]`.
pub fn gaussian_noise(n: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(n, dim, data).expect("positive dims")
}

/// Encoder into the space the flow lives in; identity at toy scale.
pub fn encode(x: &Tensor) -> Tensor {
    x.clone()
}

/// Inverse of [`encode`].
pub fn decode(z: &Tensor) -> Tensor {
    z.clone()
}
