use drive_imitation::expert::{collect_demos, Variable};
use drive_imitation::gp::*;
use drive_imitation::track::build_desk_track;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gauss-Jordan inverse with partial pivoting, independent of the library path.
fn invert(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        inv.swap(c, p);
        let d = a[c][c];
        for j in 0..n {
            a[c][j] /= d;
            inv[c][j] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                for j in 0..n {
                    a[r][j] -= f * a[c][j];
                    inv[r][j] -= f * inv[c][j];
                }
            }
        }
    }
    inv
}

fn synthetic(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| (v / 9.0).sin() * 2.0 + 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    (x, y)
}

#[test]
fn posterior_matches_dense_formula_on_50_points() {
    let (x, y) = synthetic(50, 1);
    let p = RqParams {
        signal_var: 1.8,
        length_scale: 7.0,
        alpha: 1.5,
    };
    let noise = 0.02;
    let mean0 = 0.3;
    let model = GpModel::new(x.clone(), y.clone(), p, noise, mean0).unwrap();
    let k: Vec<Vec<f64>> = (0..50)
        .map(|i| {
            (0..50)
                .map(|j| {
                    let r: f64 = x[i] - x[j];
                    let kij = 1.8 * (1.0 + r * r / (2.0 * 1.5 * 49.0)).powf(-1.5);
                    kij + if i == j { noise + JITTER * 1.8 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let kinv = invert(k);
    let queries = [0.0, 13.3, 50.0, 77.7, 120.0];
    let (pm, pv) = model.posterior(&queries);
    for (q, xs) in queries.iter().enumerate() {
        let ks: Vec<f64> = x
            .iter()
            .map(|xi| {
                let r = xi - xs;
                1.8 * (1.0 + r * r / (2.0 * 1.5 * 49.0)).powf(-1.5)
            })
            .collect();
        let mut m = mean0;
        let mut quad = 0.0;
        for i in 0..50 {
            for j in 0..50 {
                m += ks[i] * kinv[i][j] * (y[j] - mean0);
                quad += ks[i] * kinv[i][j] * ks[j];
            }
        }
        assert!((pm[q] - m).abs() < 1e-8, "mean at {xs}: {} vs {m}", pm[q]);
        assert!((pv[q] - (1.8 - quad)).abs() < 1e-8, "var at {xs}");
    }
}

#[test]
fn lml_gradient_matches_central_differences() {
    let (x, y) = synthetic(60, 2);
    let p = RqParams {
        signal_var: 1.3,
        length_scale: 6.0,
        alpha: 0.8,
    };
    let (_, g) = log_marginal_likelihood(&x, &y, &p, 0.05, 0.1).unwrap();
    let base = [p.signal_var.ln(), p.length_scale.ln(), p.alpha.ln()];
    for i in 0..3 {
        let h = 1e-5;
        let at = |d: f64| {
            let mut v = base;
            v[i] += d;
            let q = RqParams {
                signal_var: v[0].exp(),
                length_scale: v[1].exp(),
                alpha: v[2].exp(),
            };
            log_marginal_likelihood(&x, &y, &q, 0.05, 0.1).unwrap().0
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
        assert!(rel < 1e-5, "param {i}: analytic {} fd {fd} rel {rel}", g[i]);
    }
}

#[test]
fn recovers_length_scale_from_prior_draw() {
    let truth = RqParams {
        signal_var: 1.0,
        length_scale: 10.0,
        alpha: 2.0,
    };
    let x: Vec<f64> = (0..100).map(|i| i as f64 * 2.0).collect();
    // prior draw via the library's sampler on a model far from any data
    let anchor = GpModel::new(vec![1e7], vec![0.0], truth, 1e-4, 0.0).unwrap();
    let sampler = PathSampler::new(&anchor, &x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y = sampler.draw(&mut rng);
    let model = fit(
        &x,
        &y,
        &FitOptions {
            noise_var: Some(1e-4),
            ..FitOptions::default()
        },
    )
    .unwrap();
    let ratio = model.params.length_scale / truth.length_scale;
    assert!((0.5..=2.0).contains(&ratio), "recovered {:?}", model.params);
}

#[test]
fn fitted_lml_dominates_every_init() {
    let (x, y) = synthetic(80, 4);
    let inits = default_inits(&x, &y);
    let noise = 0.01;
    let model = fit(
        &x,
        &y,
        &FitOptions {
            noise_var: Some(noise),
            inits: Some(inits.clone()),
            ..FitOptions::default()
        },
    )
    .unwrap();
    let best = model.log_marginal_likelihood();
    for p in inits {
        let m = GpModel::new(model.x.clone(), model.y.clone(), p, noise, model.prior_mean).unwrap();
        assert!(best >= m.log_marginal_likelihood(), "{p:?}");
    }
}

#[test]
fn tuned_noise_tracks_residual_variance() {
    let s2: f64 = 0.04;
    let p = RqParams {
        signal_var: 1.0,
        length_scale: 20.0,
        alpha: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..200).map(|i| i as f64).collect();
    let truth: Vec<f64> = x.iter().map(|v| (v / 30.0).sin()).collect();
    let rounds: Vec<Vec<(f64, f64)>> = (0..4)
        .map(|_| {
            x.iter()
                .zip(&truth)
                .map(|(a, t)| (*a, t + s2.sqrt() * rng.sample::<f64, _>(StandardNormal)))
                .collect()
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = rounds.iter().flatten().copied().unzip();
    let base = GpModel::new(xs, ys, p, 1e-6, 0.0).unwrap();
    let tuned = tune_noise(&base, &rounds).unwrap();
    let steps = (tuned.noise_var / s2).log10().abs() / 0.5;
    assert!(steps <= 1.0 + 1e-9, "selected {} for residual variance {s2}", tuned.noise_var);
    let points: Vec<(f64, f64)> = rounds.iter().flatten().copied().collect();
    assert!(coverage(&tuned, &points) >= 0.99);
}

#[test]
fn sampler_mean_matches_posterior() {
    let (x, y) = synthetic(30, 6);
    let p = RqParams {
        signal_var: 1.0,
        length_scale: 8.0,
        alpha: 1.0,
    };
    let model = GpModel::new(x, y, p, 0.05, 0.0).unwrap();
    let grid: Vec<f64> = (0..20).map(|i| i as f64 * 5.0).collect();
    let sampler = PathSampler::new(&model, &grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10_000;
    let mut sum = vec![0.0; grid.len()];
    for _ in 0..n {
        for (s, v) in sum.iter_mut().zip(sampler.draw(&mut rng)) {
            *s += v;
        }
    }
    for i in 0..grid.len() {
        let m = sum[i] / n as f64;
        let se = sampler.sd[i] / (n as f64).sqrt();
        assert!((m - sampler.mean[i]).abs() < 3.0 * se + 1e-12, "grid {i}");
    }
}

#[test]
fn demo_pipeline_covers_and_bounds_samples() {
    let track = build_desk_track();
    let demo = collect_demos(&track, 8, 0).unwrap();
    let model = fit_demo(&demo, Variable::Trackpos, track.total_length).unwrap();
    let points: Vec<(f64, f64)> = demo
        .rounds
        .iter()
        .flatten()
        .map(|r| (r.sigma, r.d))
        .collect();
    assert!(coverage(&model, &points) >= 0.99);
    let grid = sample_grid(track.total_length);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples = sample_trajectories(&model, &grid, 100, &mut rng).unwrap();
    assert_eq!(samples.len(), 100);
    let band = model.band(&grid);
    for s in &samples {
        for i in 0..grid.len() {
            assert!(s.values[i] >= band.lower[i] && s.values[i] <= band.upper[i]);
        }
    }

    // refit on one sample: its values stay inside the refit band
    let s = &samples[0];
    let refit = GpModel::new(s.grid.clone(), s.values.clone(), model.params, model.noise_var, model.prior_mean).unwrap();
    let (m, v) = refit.posterior(&grid);
    for i in 0..grid.len() {
        assert!((m[i] - s.values[i]).abs() <= CI_MULTIPLIER * (v[i] + model.noise_var).sqrt());
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gp.json");
    model.save(&path).unwrap();
    let back = GpModel::load(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.posterior(&grid), model.posterior(&grid));
}
