//! Library results checked against independent recomputations.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scflow::autodiff::{Graph, ParamSet, Tensor};
use scflow::config::RunConfig;
use scflow::datasets::{gaussian_noise, sample};
use scflow::distill::{loss_gan, time_skip, x0_predict};
use scflow::eval::{energy_distance, energy_distance_unbiased, knn_precision_recall, random_directions, sliced_wasserstein_with, straightness};
use scflow::flow::{euler_sample, train_teacher};
use scflow::networks::{DiscArch, Discriminator, VelocityArch, VelocityNet};

fn norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Plain-loop MLP: `x @ W + b`, SiLU between layers.
fn mlp_by_hand(params: &ParamSet, x: &[f64], n_layers: usize) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in 0..n_layers {
        let w = &params[&format!("l{l}.w")];
        let b = &params[&format!("l{l}.b")];
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        assert_eq!(rows, h.len());
        let mut out = b.data().to_vec();
        for (j, o) in out.iter_mut().enumerate() {
            for (i, hi) in h.iter().enumerate() {
                *o += hi * w.data()[i * cols + j];
            }
        }
        if l + 1 < n_layers {
            out.iter_mut().for_each(|v| *v = silu(*v));
        }
        h = out;
    }
    h
}

#[test]
fn two_layer_mlp_forward_matches_hand_computation() {
    let disc = Discriminator::new(DiscArch { data_dim: 2, hidden: vec![16] }, 0, false).unwrap();
    for x in [[0.5, -0.5], [0.2, -0.7]] {
        let got = disc.discriminate(&Tensor::from_rows(&[x.to_vec()]).unwrap()).unwrap();
        let want = mlp_by_hand(&disc.params, &x, 2);
        assert!(close(got[0], want[0], 1e-12), "{got:?} vs {want:?}");
    }
}

#[test]
fn seed0_velocity_net_matches_standalone_forward() {
    let arch = VelocityArch::default();
    let net = VelocityNet::new(arch.clone(), 0, false).unwrap();
    let (z, t) = ([1.0, 0.0], 0.3);
    let k = arch.time_embed_dim / 2;
    let freqs: Vec<f64> = (0..k)
        .map(|i| (arch.time_max_freq.ln() * i as f64 / (k - 1) as f64).exp())
        .collect();
    let mut input = z.to_vec();
    input.extend(freqs.iter().map(|w| (w * t).sin()));
    input.extend(freqs.iter().map(|w| (w * t).cos()));
    let want = mlp_by_hand(&net.params, &input, arch.hidden.len() + 1);
    let got = net.velocity(&Tensor::from_rows(&[z.to_vec()]).unwrap(), &[t], None).unwrap();
    for (g, w) in got.data().iter().zip(&want) {
        assert!(close(*g, *w, 1e-10), "{g} vs {w}");
    }
}

fn random_mlp(rng: &mut ChaCha8Rng, dims: &[usize]) -> ParamSet {
    let mut p = BTreeMap::new();
    for (l, w) in dims.windows(2).enumerate() {
        let data = (0..w[0] * w[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
        p.insert(format!("l{l}.w"), Tensor::matrix(w[0], w[1], data).unwrap());
        let b = (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
        p.insert(format!("l{l}.b"), Tensor::new(vec![w[1]], b).unwrap());
    }
    p
}

fn mlp_loss_graph(x: &Tensor, y: &Tensor, n_layers: usize) -> Graph {
    let mut g = Graph::new();
    let mut h = g.constant(x.clone());
    for l in 0..n_layers {
        let w = g.param(&format!("l{l}.w"));
        let b = g.param(&format!("l{l}.b"));
        h = g.linear(h, w, b);
        if l + 1 < n_layers {
            h = g.silu(h);
        }
    }
    let target = g.constant(y.clone());
    let d = g.sub(h, target);
    let sq = g.square(d);
    let loss = g.mean(sq);
    g.set_output("loss", loss);
    g
}

#[test]
fn mlp_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dims = [2, 16, 16, 2];
    let params = random_mlp(&mut rng, &dims);
    let x = Tensor::matrix(8, 2, (0..16).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let y = Tensor::matrix(8, 2, (0..16).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let mut g = mlp_loss_graph(&x, &y, 3);
    g.run(&params).unwrap();
    let grads = g.backward_scalar("loss").unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, t) in &params {
        for k in 0..t.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[k] += delta;
                let mut g = mlp_loss_graph(&x, &y, 3);
                g.run(&p).unwrap();
                g.scalar(g.output("loss").unwrap()).unwrap()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let an = grads[name].data()[k];
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6));
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn energy_distance_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = gaussian_noise(500, 2, &mut rng);
    let mut b = gaussian_noise(500, 2, &mut rng);
    for i in 0..500 {
        b.data_mut()[2 * i] += 3.0;
    }
    let mean_dist = |x: &Tensor, y: &Tensor, skip_diag: bool| {
        let mut s = 0.0;
        let mut c = 0usize;
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                if skip_diag && i == j {
                    continue;
                }
                s += norm(x.row(i), y.row(j));
                c += 1;
            }
        }
        s / c as f64
    };
    let v = 2.0 * mean_dist(&a, &b, false) - mean_dist(&a, &a, false) - mean_dist(&b, &b, false);
    let u = 2.0 * mean_dist(&a, &b, false) - mean_dist(&a, &a, true) - mean_dist(&b, &b, true);
    assert!(close(energy_distance(&a, &b).unwrap(), v, 1e-12));
    assert!(close(energy_distance_unbiased(&a, &b).unwrap(), u, 1e-12));
    // shifted unit Gaussians are far apart
    assert!(v > 2.0);
}

#[test]
fn sliced_wasserstein_matches_sorting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = gaussian_noise(100, 2, &mut rng);
    let b = gaussian_noise(100, 2, &mut rng).map(|x| 1.5 * x + 0.3);
    let dirs = random_directions(64, 2, 9);
    let mut total = 0.0;
    for d in &dirs {
        let proj = |x: &Tensor| {
            let mut p: Vec<f64> = (0..x.rows()).map(|i| x.row(i)[0] * d[0] + x.row(i)[1] * d[1]).collect();
            p.sort_by(|u, v| u.partial_cmp(v).unwrap());
            p
        };
        let (pa, pb) = (proj(&a), proj(&b));
        let w2: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 100.0;
        total += w2.sqrt();
    }
    let want = total / dirs.len() as f64;
    assert!(close(sliced_wasserstein_with(&a, &b, &dirs).unwrap(), want, 1e-12));
}

fn brute_precision_recall(real: &Tensor, fake: &Tensor, k: usize) -> (f64, f64) {
    let radii = |x: &Tensor| -> Vec<f64> {
        (0..x.rows())
            .map(|i| {
                let mut d: Vec<f64> = (0..x.rows()).filter(|&j| j != i).map(|j| norm(x.row(i), x.row(j))).collect();
                d.sort_by(|u, v| u.partial_cmp(v).unwrap());
                d[k - 1]
            })
            .collect()
    };
    let cover = |m: &Tensor, r: &[f64], p: &Tensor| {
        (0..p.rows()).filter(|&i| (0..m.rows()).any(|j| norm(p.row(i), m.row(j)) <= r[j])).count() as f64 / p.rows() as f64
    };
    (cover(real, &radii(real), fake), cover(fake, &radii(fake), real))
}

#[test]
fn dropped_modes_lower_recall_not_precision() {
    let (real, _) = sample("gauss8", 800, 1).unwrap();
    let (pool, labels) = sample("gauss8", 1600, 2).unwrap();
    let keep: Vec<usize> = (0..pool.rows()).filter(|&i| labels.as_ref().unwrap()[i] < 4).collect();
    let fake = pool.select_rows(&keep).unwrap();
    let (p, r) = knn_precision_recall(&real, &fake, 5).unwrap();
    assert_eq!((p, r), brute_precision_recall(&real, &fake, 5));
    assert!(p > 0.9, "precision {p}");
    assert!(r < 0.6 && r < p - 0.3, "recall {r} vs precision {p}");
}

#[test]
fn straightness_recomputed_from_trajectory_csv() {
    let rotate = |z: &Tensor, _t: f64| -> scflow::Result<Tensor> {
        let rows: Vec<Vec<f64>> = (0..z.rows()).map(|i| vec![-z.row(i)[1], z.row(i)[0]]).collect();
        Tensor::from_rows(&rows)
    };
    let noise = gaussian_noise(20, 2, &mut ChaCha8Rng::seed_from_u64(4));
    let n = 8;
    let s = straightness(&rotate, &noise, n).unwrap();

    let (_, traj) = euler_sample(&rotate, &noise, n, true).unwrap();
    let mut csv = Vec::new();
    traj.unwrap().write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    // per sample: rows for steps 0..=n; step 0 holds the noise, step n the sample
    let mut total = 0.0;
    for sample_rows in rows.chunks(n + 1) {
        let z1 = [sample_rows[0][col("z_0")], sample_rows[0][col("z_1")]];
        let zhat = [sample_rows[n][col("z_0")], sample_rows[n][col("z_1")]];
        for r in &sample_rows[..n] {
            total += (r[col("v_0")] - (z1[0] - zhat[0])).powi(2) + (r[col("v_1")] - (z1[1] - zhat[1])).powi(2);
        }
    }
    let want = total / (20 * n) as f64;
    assert!(s > 0.0);
    assert!(close(s, want, 1e-12), "{s} vs {want}");
}

#[test]
fn gan_loss_matches_logits_recomputation() {
    let arch = VelocityArch::default();
    let student = VelocityNet::new(arch, 0, false).unwrap();
    let disc = Discriminator::new(DiscArch::default(), 0, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z1 = gaussian_noise(4, 2, &mut rng);
    let (z0, _) = sample("gauss8", 4, 0).unwrap();
    let (gen, dl) = loss_gan(&student, &|x: &Tensor| disc.discriminate(x), &z1, &z0).unwrap();

    let fake = x0_predict(&student, &z1, &[1.0; 4]).unwrap();
    let d_fake = disc.discriminate(&fake).unwrap();
    let d_real = disc.discriminate(&z0).unwrap();
    let sp = |x: f64| (1.0 + x.exp()).ln();
    let want_gen = d_fake.iter().map(|&x| sp(-x)).sum::<f64>() / 4.0;
    let want_disc = d_real.iter().map(|&x| sp(-x)).sum::<f64>() / 4.0 + d_fake.iter().map(|&x| sp(x)).sum::<f64>() / 4.0;
    assert!(close(gen, want_gen, 1e-12) && close(dl, want_disc, 1e-12));
}

#[test]
fn time_skip_bounds_hold_over_many_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..10_000 {
        let (down, up) = time_skip(0.5, 0.1, &mut rng);
        assert!((0.4..=0.5).contains(&down) && (0.5..=0.6).contains(&up));
        lo = lo.min(down);
        hi = hi.max(up);
    }
    // the draws reach close to both clip limits
    assert!(lo < 0.401 && hi > 0.599);
}

#[test]
fn point_mass_teacher_collapses_noise_to_origin() {
    let mut cfg = RunConfig::default();
    cfg.set("dataset", "point_mass").unwrap();
    cfg.teacher_iters = 1500;
    let (state, _) = train_teacher(&cfg).unwrap();
    let noise = gaussian_noise(500, 2, &mut ChaCha8Rng::seed_from_u64(1));
    let (x, _) = euler_sample(&state.net, &noise, 50, false).unwrap();
    let worst = (0..x.rows()).map(|i| norm(x.row(i), &[0.0, 0.0])).fold(0.0, f64::max);
    assert!(worst < 0.1, "farthest sample at radius {worst}");
}
