//! Point-cloud metrics and sampler diagnostics.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::flow::{euler_sample, VelocityField};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_pair_dist(a: &Tensor, b: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let ai = a.row(i);
        let mut row = 0.0;
        for j in 0..b.rows() {
            row += dist(ai, b.row(j));
        }
        total += row;
    }
    total / (a.rows() * b.rows()) as f64
}

/// Mean over distinct pairs `i != j` within one set.
fn mean_within_dist_distinct(a: &Tensor) -> f64 {
    let n = a.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += dist(a.row(i), a.row(j));
        }
    }
    2.0 * total / (n * (n - 1)) as f64
}

fn check_sets(a: &Tensor, b: &Tensor, min: usize) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::shape("metric input", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rows() < min || b.rows() < min {
        return Err(Error::invalid(format!("point sets need at least {min} points")));
    }
    Ok(())
}

/// Energy distance `2 E|a-b| - E|a-a'| - E|b-b'|` as a V-statistic (all
/// pairs including `i = j`). Nonnegative, symmetric, and exactly zero for
/// identical multisets.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_sets(a, b, 2)?;
    let ab = mean_pair_dist(a, b);
    let aa = mean_pair_dist(a, a);
    let bb = mean_pair_dist(b, b);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// U-statistic form: within-set means over distinct pairs. Unbiased but
/// may be slightly negative.
pub fn energy_distance_unbiased(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_sets(a, b, 2)?;
    Ok(2.0 * mean_pair_dist(a, b) - mean_within_dist_distinct(a) - mean_within_dist_distinct(b))
}

/// `n` directions drawn uniformly on the unit sphere of dimension `d`.
pub fn random_directions(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// 1D Wasserstein-2 between two empirical distributions given as sorted
/// samples (quantile coupling; sizes may differ).
pub fn wasserstein2_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == m {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        return (s / n as f64).sqrt();
    }
    // walk the merged quantile breakpoints i/n and j/m
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut s = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        s += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    s.sqrt()
}

fn project_sorted(x: &Tensor, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = (0..x.rows())
        .map(|i| x.row(i).iter().zip(dir).map(|(a, b)| a * b).sum())
        .collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Mean over the given unit directions of the 1D Wasserstein-2 distance
/// between the projected sets.
pub fn sliced_wasserstein_with(a: &Tensor, b: &Tensor, dirs: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b, 1)?;
    if dirs.is_empty() || dirs.iter().any(|d| d.len() != a.cols()) {
        return Err(Error::invalid("projection directions missing or of wrong dimension"));
    }
    let total: f64 = dirs
        .iter()
        .map(|d| wasserstein2_sorted(&project_sorted(a, d), &project_sorted(b, d)))
        .sum();
    Ok(total / dirs.len() as f64)
}

/// Sliced Wasserstein-2 with `n_projections` random directions from `seed`.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_projections: usize, seed: u64) -> Result<f64> {
    if n_projections == 0 {
        return Err(Error::invalid("n_projections must be >= 1"));
    }
    check_sets(a, b, 1)?;
    sliced_wasserstein_with(a, b, &random_directions(n_projections, a.cols(), seed))
}

/// Distance from each point to its `k`-th nearest neighbour within the set
/// (the point itself excluded).
pub fn knn_radii(x: &Tensor, k: usize) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n];
    (0..n)
        .map(|i| {
            for j in 0..n {
                d[j] = dist(x.row(i), x.row(j));
            }
            d[i] = f64::INFINITY;
            let mut local = d.clone();
            let (_, kth, _) = local.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

fn coverage(manifold: &Tensor, radii: &[f64], probes: &Tensor) -> f64 {
    let inside = (0..probes.rows())
        .filter(|&i| {
            let p = probes.row(i);
            (0..manifold.rows()).any(|j| dist(p, manifold.row(j)) <= radii[j])
        })
        .count();
    inside as f64 / probes.rows() as f64
}

/// Improved precision and recall with k-NN manifold estimates.
///
/// Precision is the fraction of `fake` points inside the union of balls
/// around `real` points (each ball's radius is that point's k-NN distance
/// within `real`); recall swaps the roles.
pub fn knn_precision_recall(real: &Tensor, fake: &Tensor, k: usize) -> Result<(f64, f64)> {
    check_sets(real, fake, 1)?;
    if k == 0 || k >= real.rows() || k >= fake.rows() {
        return Err(Error::invalid(format!(
            "k = {k} must be in 1..{}",
            real.rows().min(fake.rows())
        )));
    }
    let precision = coverage(real, &knn_radii(real, k), fake);
    let recall = coverage(fake, &knn_radii(fake, k), real);
    Ok((precision, recall))
}

/// Entry `(i, j)`: mean over noises of the distance between the samples
/// drawn with `nfes[i]` and `nfes[j]` Euler steps from the same noise.
pub fn nfe_consistency(field: &dyn VelocityField, noise: &Tensor, nfes: &[usize]) -> Result<Vec<Vec<f64>>> {
    if nfes.is_empty() {
        return Err(Error::invalid("NFE list is empty"));
    }
    let samples = nfes
        .iter()
        .map(|&n| euler_sample(field, noise, n, false).map(|(z, _)| z))
        .collect::<Result<Vec<_>>>()?;
    Ok(consistency_matrix(&samples))
}

/// Pairwise mean row distance between sample sets drawn from shared noise.
pub fn consistency_matrix(samples: &[Tensor]) -> Vec<Vec<f64>> {
    let k = samples.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let (a, b) = (&samples[i], &samples[j]);
            let d = (0..a.rows()).map(|r| dist(a.row(r), b.row(r))).sum::<f64>() / a.rows() as f64;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

pub fn matrix_max(m: &[Vec<f64>]) -> f64 {
    m.iter().flatten().copied().fold(0.0, f64::max)
}

/// Mean over noises and Euler steps of `|v(z_t, t) - (z1 - ẑ0)|²`, where
/// `ẑ0` is the final sample: how far the local velocity strays from the
/// straight chord between noise and sample.
pub fn straightness(field: &dyn VelocityField, noise: &Tensor, n_eval_steps: usize) -> Result<f64> {
    if n_eval_steps < 2 {
        return Err(Error::invalid("straightness needs at least 2 steps"));
    }
    let (z0, traj) = euler_sample(field, noise, n_eval_steps, true)?;
    let traj = traj.expect("recorded");
    let n = noise.rows();
    let mut total = 0.0;
    for step in &traj.steps[..n_eval_steps] {
        for i in 0..n {
            let chord = noise.row(i).iter().zip(z0.row(i)).map(|(a, b)| a - b);
            total += step.v.row(i).iter().zip(chord).map(|(v, c)| (v - c).powi(2)).sum::<f64>();
        }
    }
    Ok(total / (n * n_eval_steps) as f64)
}

/// Per-dimension mean shift (`samples - reference`) and std ratio
/// (`samples / reference`).
pub fn saturation_stats(samples: &Tensor, reference: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    check_sets(samples, reference, 1)?;
    let stats = |x: &Tensor| -> (Vec<f64>, Vec<f64>) {
        let (n, d) = (x.rows() as f64, x.cols());
        let mean: Vec<f64> = (0..d).map(|j| (0..x.rows()).map(|i| x.row(i)[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| ((0..x.rows()).map(|i| (x.row(i)[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        (mean, std)
    };
    let (ms, ss) = stats(samples);
    let (mr, sr) = stats(reference);
    let shift = ms.iter().zip(&mr).map(|(a, b)| a - b).collect();
    let ratio = ss.iter().zip(&sr).map(|(a, b)| a / b).collect();
    Ok((shift, ratio))
}

/// Largest `|ratio - 1|` over dimensions.
pub fn std_ratio_deviation(ratio: &[f64]) -> f64 {
    ratio.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max)
}

/// Metrics for one (run, NFE) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub run_id: String,
    pub nfe: usize,
    pub energy_distance: f64,
    pub sliced_wasserstein: f64,
    pub precision: f64,
    pub recall: f64,
    /// Consistency against every NFE of the evaluated list, in list order.
    pub consistency: Vec<f64>,
    pub straightness: f64,
    pub mean_shift: Vec<f64>,
    pub std_ratio: Vec<f64>,
}

/// Header of the metric CSV for the given NFE list and data dimension.
pub fn report_header(nfes: &[usize], dim: usize) -> String {
    let mut cols: Vec<String> = [
        "run_id",
        "nfe",
        "energy_distance",
        "sliced_wasserstein",
        "precision",
        "recall",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend(nfes.iter().map(|n| format!("consistency_nfe{n}")));
    cols.push("straightness".into());
    cols.extend((0..dim).map(|j| format!("mean_shift_{j}")));
    cols.extend((0..dim).map(|j| format!("std_ratio_{j}")));
    cols.join(",")
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.run_id.clone(),
            self.nfe.to_string(),
            self.energy_distance.to_string(),
            self.sliced_wasserstein.to_string(),
            self.precision.to_string(),
            self.recall.to_string(),
        ];
        cols.extend(self.consistency.iter().map(f64::to_string));
        cols.push(self.straightness.to_string());
        cols.extend(self.mean_shift.iter().map(f64::to_string));
        cols.extend(self.std_ratio.iter().map(f64::to_string));
        cols.join(",")
    }

    pub fn is_valid(&self) -> bool {
        let finite = [self.energy_distance, self.sliced_wasserstein, self.precision, self.recall, self.straightness]
            .iter()
            .chain(&self.consistency)
            .chain(&self.mean_shift)
            .chain(&self.std_ratio)
            .all(|v| v.is_finite());
        finite && (0.0..=1.0).contains(&self.precision) && (0.0..=1.0).contains(&self.recall)
    }
}

/// Long form: one row per report.
pub fn write_reports(mut w: impl Write, reports: &[MetricReport], nfes: &[usize], dim: usize) -> std::io::Result<()> {
    writeln!(w, "{}", report_header(nfes, dim))?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Wide form: one row per metric, one `NFE=n` column per report.
pub fn write_reports_wide(mut w: impl Write, reports: &[MetricReport]) -> std::io::Result<()> {
    let mut header = vec!["metric".to_string()];
    header.extend(reports.iter().map(|r| format!("NFE={}", r.nfe)));
    writeln!(w, "{}", header.join(","))?;
    let rows: [(&str, fn(&MetricReport) -> f64); 6] = [
        ("energy_distance", |r| r.energy_distance),
        ("sliced_wasserstein", |r| r.sliced_wasserstein),
        ("precision", |r| r.precision),
        ("recall", |r| r.recall),
        ("max_consistency", |r| r.consistency.iter().copied().fold(0.0, f64::max)),
        ("std_ratio_deviation", |r| std_ratio_deviation(&r.std_ratio)),
    ];
    for (name, f) in rows {
        let mut cols = vec![name.to_string()];
        cols.extend(reports.iter().map(|r| f(r).to_string()));
        writeln!(w, "{}", cols.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::gaussian_noise;

    fn pts(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn energy_distance_identical_is_zero() {
        let a = gaussian_noise(50, 2, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn energy_distance_point_masses() {
        let a = pts(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let b = pts(&[&[3.0, 4.0], &[3.0, 4.0]]);
        assert_eq!(energy_distance(&a, &b).unwrap(), 10.0);
        assert_eq!(energy_distance_unbiased(&a, &b).unwrap(), 10.0);
    }

    #[test]
    fn energy_distance_needs_two_points() {
        let a = pts(&[&[0.0, 0.0]]);
        assert!(energy_distance(&a, &a).is_err());
    }

    #[test]
    fn sliced_wasserstein_basics() {
        let a = pts(&[&[0.0, 0.0]]);
        let b = pts(&[&[1.0, 0.0]]);
        assert_eq!(sliced_wasserstein_with(&a, &b, &[vec![1.0, 0.0]]).unwrap(), 1.0);
        let x = gaussian_noise(40, 2, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(sliced_wasserstein(&x, &x, 16, 0).unwrap(), 0.0);
        let one_d_a = pts(&[&[0.0]]);
        let one_d_b = pts(&[&[1.0]]);
        assert_eq!(sliced_wasserstein(&one_d_a, &one_d_b, 8, 3).unwrap(), 1.0);
    }

    #[test]
    fn w2_unequal_sizes() {
        // {0, 1} vs {0.5}: every quantile is 0.5 away
        assert!((wasserstein2_sorted(&[0.0, 1.0], &[0.5]) - 0.5).abs() < 1e-15);
        // {0} vs {0, 2}: half the mass moves by 2 -> sqrt(0.5 * 4)
        assert!((wasserstein2_sorted(&[0.0], &[0.0, 2.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn precision_recall_extremes() {
        let real = gaussian_noise(200, 2, &mut ChaCha8Rng::seed_from_u64(3));
        let (p, r) = knn_precision_recall(&real, &real, 5).unwrap();
        assert_eq!((p, r), (1.0, 1.0));
        let far = Tensor::new(real.shape().to_vec(), real.data().iter().map(|v| v + 100.0).collect()).unwrap();
        let (p, r) = knn_precision_recall(&real, &far, 5).unwrap();
        assert_eq!((p, r), (0.0, 0.0));
        assert!(knn_precision_recall(&real, &real, 0).is_err());
        assert!(knn_precision_recall(&real, &real, 200).is_err());
    }

    #[test]
    fn consistency_of_constant_field() {
        let field = |z: &Tensor, _t: f64| -> Result<Tensor> {
            Ok(Tensor::new(z.shape().to_vec(), vec![0.5; z.len()]).unwrap())
        };
        let noise = gaussian_noise(30, 2, &mut ChaCha8Rng::seed_from_u64(4));
        let m = nfe_consistency(&field, &noise, &[1, 2, 4, 8, 16]).unwrap();
        assert!(matrix_max(&m) < 1e-14);
        assert!(straightness(&field, &noise, 8).unwrap() < 1e-28);
    }

    #[test]
    fn consistency_matrix_symmetric_zero_diagonal() {
        let field = |z: &Tensor, t: f64| -> Result<Tensor> { Ok(z.map(|v| v * t + 0.3)) };
        let noise = gaussian_noise(30, 2, &mut ChaCha8Rng::seed_from_u64(5));
        let m = nfe_consistency(&field, &noise, &[1, 3, 7]).unwrap();
        for i in 0..3 {
            assert_eq!(m[i][i], 0.0);
            for j in 0..3 {
                assert_eq!(m[i][j], m[j][i]);
            }
        }
        assert!(matrix_max(&m) > 0.0);
    }

    #[test]
    fn straightness_ignores_noise_order() {
        let field = |z: &Tensor, _t: f64| -> Result<Tensor> {
            let rows: Vec<Vec<f64>> = (0..z.rows()).map(|i| vec![-z.row(i)[1], z.row(i)[0]]).collect();
            Tensor::from_rows(&rows)
        };
        let noise = gaussian_noise(20, 2, &mut ChaCha8Rng::seed_from_u64(6));
        let rev: Vec<usize> = (0..20).rev().collect();
        let a = straightness(&field, &noise, 6).unwrap();
        let b = straightness(&field, &noise.select_rows(&rev).unwrap(), 6).unwrap();
        assert!(a > 0.0);
        assert!((a - b).abs() < 1e-12 * a);
        assert!(straightness(&field, &noise, 1).is_err());
    }

    #[test]
    fn saturation_of_scaled_copy() {
        let r = gaussian_noise(100, 2, &mut ChaCha8Rng::seed_from_u64(7));
        let (shift, ratio) = saturation_stats(&r, &r).unwrap();
        assert_eq!(shift, vec![0.0, 0.0]);
        assert_eq!(ratio, vec![1.0, 1.0]);
        let doubled = r.map(|v| 2.0 * v);
        let (_, ratio) = saturation_stats(&doubled, &r).unwrap();
        for x in ratio {
            assert!((x - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn report_csv_layout() {
        let rep = MetricReport {
            run_id: "r".into(),
            nfe: 1,
            energy_distance: 0.5,
            sliced_wasserstein: 0.25,
            precision: 1.0,
            recall: 0.75,
            consistency: vec![0.0, 0.1],
            straightness: 2.0,
            mean_shift: vec![0.0, 0.0],
            std_ratio: vec![1.0, 1.0],
        };
        assert!(rep.is_valid());
        let header = report_header(&[1, 2], 2);
        assert_eq!(header.split(',').count(), rep.csv_row().split(',').count());
        let mut buf = Vec::new();
        write_reports_wide(&mut buf, &[rep.clone(), MetricReport { nfe: 2, ..rep }]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("metric,NFE=1,NFE=2\n"));
    }
}
