use drive_imitation::nn::{MdnPolicy, ACTION_DIM};
use drive_imitation::ppo::*;
use drive_imitation::sim::TerminationKind;
use drive_imitation::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OBS: usize = 4;

/// Random batch for `policy`. Old log-probs are the current ones shifted by
/// `offsets` (cycled), which sets the probability ratios.
fn batch(policy: &MdnPolicy, n: usize, offsets: &[f64], seed: u64) -> Minibatch {
    let dim = policy.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut actions = Vec::new();
    let mut old = Vec::new();
    for i in 0..n {
        let (d, _) = policy.evaluate(&obs[i * dim..(i + 1) * dim]).unwrap();
        let a = d.sample(&mut rng);
        actions.push(a);
        old.push(d.log_prob(a) + offsets[i % offsets.len()]);
    }
    Minibatch {
        obs,
        actions,
        old_log_probs: old,
        advantages: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        returns: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn set_all(p: &mut MdnPolicy, flat: &[f64]) {
    let mut at = 0;
    for net in p.nets_mut() {
        let n = net.num_params();
        net.set_params_flat(&flat[at..at + n]);
        at += n;
    }
}

fn all_params(p: &MdnPolicy) -> Vec<f64> {
    p.nets().iter().flat_map(|n| n.params_flat()).collect()
}

#[test]
fn loss_gradient_matches_finite_differences() {
    // 8 -> 16 -> 16 -> {12, 1, 3}
    let obs = 8;
    let mut policy = MdnPolicy::new(obs, &[16, 16], 3);
    let cfg = PpoConfig::default();
    // ratios well inside or well outside the clip range, so central
    // differences never straddle a kink
    let mb = batch(&policy, 12, &[-0.5, -0.05, 0.05, 0.5], 4);
    let (parts, g) = ppo_loss(&policy, &mb, &cfg).unwrap();
    assert!((parts.total - (parts.policy + 0.5 * parts.value - 0.005 * parts.entropy)).abs() < 1e-12);
    let g = g.flat();
    let p0 = all_params(&policy);
    let h = 1e-6;
    let mut fd = vec![0.0; p0.len()];
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] += h;
        set_all(&mut policy, &p);
        let up = ppo_loss_value(&policy, &mb, &cfg).unwrap().total;
        p[i] -= 2.0 * h;
        set_all(&mut policy, &p);
        let dn = ppo_loss_value(&policy, &mb, &cfg).unwrap().total;
        fd[i] = (up - dn) / (2.0 * h);
    }
    set_all(&mut policy, &p0);
    let diff = fd.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
}

#[test]
fn unclipped_policy_gradient_is_vanilla_policy_gradient() {
    let mut policy = MdnPolicy::new(OBS, &[8], 5);
    let cfg = PpoConfig {
        value_coef: 0.0,
        entropy_coef: 0.0,
        clip: 1e9,
        ..PpoConfig::default()
    };
    let mb = batch(&policy, 16, &[-0.3, 0.1, 0.25], 6);
    let (_, g) = ppo_loss(&policy, &mb, &cfg).unwrap();
    let g = g.flat();
    // -mean(A rho grad log pi), the importance-weighted policy gradient,
    // from central differences of log pi
    let rho: Vec<f64> = (0..mb.len())
        .map(|i| {
            let (d, _) = policy.evaluate(&mb.obs[i * OBS..(i + 1) * OBS]).unwrap();
            (d.log_prob(mb.actions[i]) - mb.old_log_probs[i]).exp()
        })
        .collect();
    let surrogate = |p: &MdnPolicy| -> f64 {
        (0..mb.len())
            .map(|i| {
                let (d, _) = p.evaluate(&mb.obs[i * OBS..(i + 1) * OBS]).unwrap();
                -mb.advantages[i] * rho[i] * d.log_prob(mb.actions[i])
            })
            .sum::<f64>()
            / mb.len() as f64
    };
    let p0 = all_params(&policy);
    let h = 1e-6;
    let mut fd = vec![0.0; p0.len()];
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] += h;
        set_all(&mut policy, &p);
        let up = surrogate(&policy);
        p[i] -= 2.0 * h;
        set_all(&mut policy, &p);
        fd[i] = (up - surrogate(&policy)) / (2.0 * h);
    }
    let dot: f64 = fd.iter().zip(&g).map(|(a, b)| a * b).sum();
    let na = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = g.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(dot / (na * nb) > 0.9999, "cosine {}", dot / (na * nb));
}

#[test]
fn scheduler_batch_is_minibatch_multiple_covering_two_episodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10_000 {
        let mb = [64, 128, 256][rng.random_range(0..3)];
        let mut s = BatchScheduler::new(mb * rng.random_range(1..5), mb);
        let mut longest = 0;
        for _ in 0..rng.random_range(1..6) {
            let len = rng.random_range(1..5000);
            for t in 1..=len {
                s.observe(t);
            }
            longest = longest.max(len);
            assert_eq!(s.batch % mb, 0);
            assert!(s.batch + mb > 2 * longest, "B {} for longest {longest}", s.batch);
            assert_eq!(s.max_length, longest);
        }
    }
}

/// One-step episodes with reward -|a - 0.5| summed over both commands.
struct Target {
    obs: Vec<f64>,
}

impl Environment for Target {
    fn obs_dim(&self) -> usize {
        OBS
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.obs.clone()
    }

    fn step(&mut self, a: [f64; ACTION_DIM]) -> Result<StepOutcome> {
        Ok(StepOutcome {
            obs: self.obs.clone(),
            reward: -(a[0] - 0.5).abs() - (a[1] - 0.5).abs(),
            done: true,
            termination: TerminationKind::None,
            completed_rounds: false,
        })
    }
}

#[test]
fn sanity_environment_mean_action_reaches_target() {
    let mut env = Target {
        obs: vec![0.3, -0.2, 0.5, 1.0],
    };
    let cfg = PpoConfig {
        hidden: vec![64],
        total_steps: 200 * 512,
        ..PpoConfig::default()
    };
    let mut tr = Trainer::new(cfg, OBS, 11).unwrap();
    let log = tr.train(&mut env, |_, _| Ok(())).unwrap();
    assert!(log.len() <= 200);
    let (d, _) = tr.policy.evaluate(&env.obs).unwrap();
    for m in [d.mixture_mean(), d.dominant_mean()] {
        assert!((m[0] - 0.5).abs() <= 0.05 && (m[1] - 0.5).abs() <= 0.05, "{m:?}");
    }
}

#[test]
fn stored_log_probs_survive_an_update() {
    let mut env = Target {
        obs: vec![0.1, 0.2, 0.3, 0.4],
    };
    let mut tr = Trainer::new(bandit_config(0), OBS, 2).unwrap();
    let mut buf = RolloutBuffer::new(OBS);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..256 {
        let o = env.reset(&mut rng);
        let (d, v) = tr.policy.evaluate(&o).unwrap();
        let a = d.sample(&mut rng);
        let r = env.step(a).unwrap().reward;
        buf.push(&o, a, d.log_prob(a), r, v, true);
    }
    let stored = buf.log_probs.clone();
    tr.update(&buf, 0.0).unwrap();
    assert_eq!(buf.log_probs, stored);
    let (d, _) = tr.policy.evaluate(&env.obs).unwrap();
    let fresh: Vec<f64> = buf.actions.iter().map(|a| d.log_prob(*a)).collect();
    assert!(fresh.iter().zip(&stored).any(|(a, b)| a != b));
}

/// Contextual bandit: obs is a random sign, reward peaks at steering = 0.5 * sign.
struct Bandit {
    rng: ChaCha8Rng,
    sign: f64,
}

impl Bandit {
    fn obs(&mut self) -> Vec<f64> {
        self.sign = if self.rng.random::<bool>() { 1.0 } else { -1.0 };
        vec![self.sign, 1.0, 0.0, 0.0]
    }
}

impl Environment for Bandit {
    fn obs_dim(&self) -> usize {
        OBS
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.obs()
    }

    fn step(&mut self, a: [f64; ACTION_DIM]) -> Result<StepOutcome> {
        let s = a[0].clamp(-1.0, 1.0);
        let t = a[1].clamp(-1.0, 1.0);
        let reward = -(s - 0.5 * self.sign).abs() - (t + 0.3).abs();
        Ok(StepOutcome {
            obs: self.obs(),
            reward,
            done: true,
            termination: TerminationKind::None,
            completed_rounds: false,
        })
    }
}

fn bandit_config(steps: u64) -> PpoConfig {
    PpoConfig {
        hidden: vec![32],
        lr: 3e-3,
        initial_batch: 256,
        minibatch: 64,
        total_steps: steps,
        ..PpoConfig::default()
    }
}

#[test]
fn learns_a_contextual_bandit() {
    let mut env = Bandit {
        rng: ChaCha8Rng::seed_from_u64(1),
        sign: 1.0,
    };
    let mut tr = Trainer::new(bandit_config(25_000), OBS, 2).unwrap();
    let log = tr.train(&mut env, |_, _| Ok(())).unwrap();
    assert!(log.len() >= 90);
    let early = log[..5].iter().map(|m| m.mean_return).sum::<f64>() / 5.0;
    let late = log[log.len() - 5..].iter().map(|m| m.mean_return).sum::<f64>() / 5.0;
    assert!(late > early + 0.3, "early {early} late {late}");
    for sign in [1.0, -1.0] {
        let (d, _) = tr.policy.evaluate(&[sign, 1.0, 0.0, 0.0]).unwrap();
        let m = d.dominant_mean();
        assert!((m[0] - 0.5 * sign).abs() < 0.15, "sign {sign}: {m:?}");
        assert!((m[1] + 0.3).abs() < 0.15, "sign {sign}: {m:?}");
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let run = |seed: u64| {
        let mut env = Bandit {
            rng: ChaCha8Rng::seed_from_u64(3),
            sign: 1.0,
        };
        let mut tr = Trainer::new(bandit_config(1_500), OBS, seed).unwrap();
        let log = tr.train(&mut env, |_, _| Ok(())).unwrap();
        (log, tr.policy)
    };
    let (la, pa) = run(7);
    let (lb, pb) = run(7);
    assert_eq!(la, lb);
    assert_eq!(pa, pb);
    let (_, pc) = run(8);
    assert_ne!(pa, pc);
}

#[test]
fn update_callback_errors_stop_training() {
    let mut env = Bandit {
        rng: ChaCha8Rng::seed_from_u64(3),
        sign: 1.0,
    };
    let mut tr = Trainer::new(bandit_config(5_000), OBS, 1).unwrap();
    let mut calls = 0;
    let r = tr.train(&mut env, |_, _| {
        calls += 1;
        Err(drive_imitation::Error::Invalid("stop".into()))
    });
    assert!(r.is_err());
    assert_eq!(calls, 1);
}

#[test]
fn metrics_csv_has_header_and_rows() {
    let m = UpdateMetrics {
        update: 0,
        steps: 512,
        batch: 512,
        mean_return: -3.5,
        mean_ep_len: 20.0,
        policy_loss: 0.1,
        value_loss: 2.0,
        entropy: -1.0,
        completed: 0,
        episodes: 25,
    };
    let csv = metrics_csv(&[m, m]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1].split(',').count(), METRICS_HEADER.split(',').count());
}
