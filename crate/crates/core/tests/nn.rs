use drive_imitation::nn::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn forward_matches_hand_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = DenseNet::new(&[4, 8, 3], Activation::Relu, Activation::Linear, &mut rng);
    let batch = 5;
    let x = rand_vec(4 * batch, &mut rng);
    let y = net.predict(&x, batch).unwrap();
    let (l0, l1) = (&net.layers[0], &net.layers[1]);
    for b in 0..batch {
        let h: Vec<f64> = (0..8)
            .map(|o| (l0.b[o] + (0..4).map(|i| l0.w[o * 4 + i] * x[b * 4 + i]).sum::<f64>()).max(0.0))
            .collect();
        for o in 0..3 {
            let want = l1.b[o] + (0..8).map(|i| l1.w[o * 8 + i] * h[i]).sum::<f64>();
            assert!((y[b * 3 + o] - want).abs() < 1e-12);
        }
    }
}

fn fd_check(hidden: Activation, out: Activation, out_dim: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DenseNet::new(&[8, 16, 16, out_dim], hidden, out, &mut rng);
    let batch = 3;
    let x = rand_vec(8 * batch, &mut rng);
    let c = rand_vec(out_dim * batch, &mut rng);
    let loss = |n: &DenseNet| -> f64 { n.predict(&x, batch).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum() };
    let tape = net.forward(&x, batch).unwrap();
    let g = net.backward(&tape, &c).unwrap().flat();
    let p0 = net.params_flat();
    let h = 1e-6;
    let mut checked = 0;
    for i in (0..p0.len()).step_by(7) {
        let mut p = p0.clone();
        p[i] += h;
        net.set_params_flat(&p);
        let up = loss(&net);
        p[i] -= 2.0 * h;
        net.set_params_flat(&p);
        let dn = loss(&net);
        let fd = (up - dn) / (2.0 * h);
        let err = (fd - g[i]).abs();
        assert!(err < 1e-6 + 1e-5 * fd.abs(), "param {i}: analytic {} fd {fd}", g[i]);
        checked += 1;
    }
    net.set_params_flat(&p0);
    assert!(checked > 50);
}

#[test]
fn backward_matches_finite_differences_for_every_head() {
    // softsign trunks avoid ReLU kinks under perturbation
    fd_check(Activation::Softsign, Activation::MdnHead, ACTOR_OUT, 2);
    fd_check(Activation::Softsign, Activation::Softmax, COMPONENTS, 3);
    fd_check(Activation::Softsign, Activation::Linear, 1, 4);
    fd_check(Activation::Softsign, Activation::Variance, 4, 5);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut net = DenseNet::new(&[1, 1], Activation::Linear, Activation::Linear, &mut rng);
    net.layers[0].w[0] = 2.0;
    net.layers[0].b[0] = -1.5;
    let mut st = AdamState::new(&net);
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    // minimize (w + b)^2 at x = 1, plus w^2 on the side
    for _ in 0..2000 {
        let tape = net.forward(&[1.0], 1).unwrap();
        let y = tape.output()[0];
        let mut g = net.backward(&tape, &[2.0 * y]).unwrap();
        g.layers[0].0[0] += 2.0 * net.layers[0].w[0];
        adam_step(&mut net, &g, &mut st, &cfg);
    }
    assert!(net.layers[0].w[0].abs() < 1e-2, "{:?}", net.layers[0]);
    assert!(net.layers[0].b[0].abs() < 1e-2);
}

fn example_dist() -> MdnDistribution {
    MdnDistribution {
        alpha: [0.5, 0.3, 0.2],
        mu: [[0.2, -0.1], [-0.4, 0.3], [0.6, 0.5]],
        var: [[0.01, 0.02], [0.03, 0.015], [0.02, 0.04]],
    }
}

#[test]
fn mixture_density_integrates_to_one() {
    let d = example_dist();
    let h = 0.01;
    let mut total = 0.0;
    let mut first = [0.0; 2];
    for i in 0..400 {
        let a0 = -2.0 + (i as f64 + 0.5) * h;
        for j in 0..400 {
            let a1 = -2.0 + (j as f64 + 0.5) * h;
            let p = d.log_prob([a0, a1]).exp() * h * h;
            total += p;
            first[0] += a0 * p;
            first[1] += a1 * p;
        }
    }
    assert!((total - 1.0).abs() < 1e-6, "{total}");
    let m = d.mixture_mean();
    assert!((first[0] - m[0]).abs() < 1e-6 && (first[1] - m[1]).abs() < 1e-6);
}

#[test]
fn sample_mean_matches_mixture_mean() {
    let d = example_dist();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 50_000;
    let mut s = [0.0; 2];
    for _ in 0..n {
        let a = d.sample(&mut rng);
        s[0] += a[0];
        s[1] += a[1];
    }
    let m = d.mixture_mean();
    for k in 0..2 {
        // total sd is below 0.5 in both dims
        assert!((s[k] / n as f64 - m[k]).abs() < 3.0 * 0.5 / (n as f64).sqrt());
    }
    assert_eq!(d.dominant_mean(), [0.2, -0.1]);
}

#[test]
fn entropy_of_identical_components_is_gaussian_estimate() {
    let v = [0.02, 0.005];
    let d = MdnDistribution {
        alpha: [0.2, 0.3, 0.5],
        mu: [[0.1, 0.2]; 3],
        var: [v; 3],
    };
    let draws = entropy_draws();
    let m2: Vec<f64> = (0..2)
        .map(|k| draws.iter().map(|e| e[k] * e[k]).sum::<f64>() / draws.len() as f64)
        .collect();
    let want: f64 = (0..2)
        .map(|k| 0.5 * (2.0 * std::f64::consts::PI * v[k]).ln() + 0.5 * m2[k])
        .sum();
    assert!((d.entropy() - want).abs() < 1e-10, "{} vs {want}", d.entropy());
}

#[test]
fn entropy_falls_as_variance_shrinks() {
    let mut prev = f64::INFINITY;
    for s in [0.05, 0.02, 0.01, 0.001, 1e-5] {
        let mut d = example_dist();
        d.var = [[s, s]; 3];
        let h = d.entropy();
        assert!(h < prev);
        prev = h;
    }
}

fn perturb(d: &MdnDistribution, which: usize, c: usize, k: usize, h: f64) -> MdnDistribution {
    let mut e = *d;
    match which {
        0 => e.alpha[c] += h,
        1 => e.mu[c][k] += h,
        _ => e.var[c][k] += h,
    }
    e
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let d = example_dist();
    let a = [0.15, 0.05];
    let (_, glp, da) = d.log_prob_grad(a);
    let (_, gh) = d.entropy_grad();
    let h = 1e-7;
    for which in 0..3 {
        for c in 0..COMPONENTS {
            for k in 0..ACTION_DIM {
                if which == 0 && k > 0 {
                    continue;
                }
                let (up, dn) = (perturb(&d, which, c, k, h), perturb(&d, which, c, k, -h));
                let fd_lp = (up.log_prob(a) - dn.log_prob(a)) / (2.0 * h);
                let fd_h = (up.entropy() - dn.entropy()) / (2.0 * h);
                let (an_lp, an_h) = match which {
                    0 => (glp.alpha[c], gh.alpha[c]),
                    1 => (glp.mu[c][k], gh.mu[c][k]),
                    _ => (glp.var[c][k], gh.var[c][k]),
                };
                assert!((fd_lp - an_lp).abs() < 1e-5 * (1.0 + fd_lp.abs()), "lp {which} {c} {k}: {an_lp} vs {fd_lp}");
                assert!((fd_h - an_h).abs() < 1e-5 * (1.0 + fd_h.abs()), "H {which} {c} {k}: {an_h} vs {fd_h}");
            }
        }
    }
    for k in 0..ACTION_DIM {
        let mut up = a;
        up[k] += h;
        let mut dn = a;
        dn[k] -= h;
        let fd = (d.log_prob(up) - d.log_prob(dn)) / (2.0 * h);
        assert!((fd - da[k]).abs() < 1e-5 * (1.0 + fd.abs()));
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let p = MdnPolicy::new(10, &[16, 8], 42);
    let bytes = encode_checkpoint(&p);
    let q = decode_checkpoint(&bytes).unwrap();
    assert_eq!(p, q);
    assert_eq!(encode_checkpoint(&q), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.bin");
    p.save(&path).unwrap();
    assert_eq!(MdnPolicy::load_expecting(&path, 10, &[16, 8]).unwrap(), p);
    let err = MdnPolicy::load_expecting(&path, 10, &[16, 16]).unwrap_err().to_string();
    assert!(err.contains("layer widths"), "{err}");
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let p = MdnPolicy::new(6, &[4], 1);
    let bytes = encode_checkpoint(&p);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 9]).is_err());
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(decode_checkpoint(&flipped).is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(decode_checkpoint(&wrong).is_err());
    assert!(decode_checkpoint(&[]).is_err());
}

#[test]
fn non_finite_gradients_are_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = DenseNet::new(&[2, 3, 1], Activation::Softsign, Activation::Linear, &mut rng);
    let tape = net.forward(&[0.1, 0.2], 1).unwrap();
    assert!(net.backward(&tape, &[f64::NAN]).is_err());
}
