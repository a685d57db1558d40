use std::sync::Arc;

use drive_imitation::eval::*;
use drive_imitation::expert::{collect_demos, ExpertDriver, ExpertParams, Variable};
use drive_imitation::gp::{fit_demo, sample_grid, GpModel, RqParams};
use drive_imitation::nn::MdnPolicy;
use drive_imitation::sim::{SimState, OBS_DIM};
use drive_imitation::track::{build_desk_track, generate_road, RoadKind, RoadSpec, Track};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn expert_controller(track: Arc<Track>, seed: u64) -> impl FnMut(&[f64], &SimState) -> [f64; 2] {
    let mut driver = ExpertDriver::new(ExpertParams::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |_, s| {
        let a = driver.act(s, &track, &mut rng);
        [a.steering, a.torque]
    }
}

#[test]
fn seven_rounds_give_seven_laps() {
    let track = Arc::new(build_desk_track());
    let mut ctrl = expert_controller(Arc::clone(&track), 1);
    let r = drive(Arc::clone(&track), &mut ctrl, &RolloutOptions::default()).unwrap();
    assert_eq!(r.laps.len(), DEFAULT_ROUNDS);
    assert!(!r.aborted);
    assert_eq!(r.safety.collisions, 0);
    assert_eq!(r.safety.completion_rate(), 1.0);
    // three obstacles per lap
    assert!(r.safety.obstacles_passed >= 3 * DEFAULT_ROUNDS);
    for lap in &r.laps {
        let span: f64 = lap.windows(2).map(|w| (w[1].sigma - w[0].sigma).rem_euclid(track.total_length)).sum();
        assert!((span - track.total_length).abs() < 30.0, "lap spans {span} m");
    }
}

#[test]
fn mean_only_rollouts_are_deterministic() {
    let track = Arc::new(build_desk_track());
    let policy = MdnPolicy::new(OBS_DIM, &[16], 3);
    let opts = RolloutOptions {
        rounds: 1,
        max_failures: 5,
        seed: 4,
        ..RolloutOptions::default()
    };
    let mut c1 = PolicyController { policy: &policy, mode: ActionMode::MeanOnly };
    let a = drive(Arc::clone(&track), &mut c1, &opts).unwrap();
    let mut c2 = PolicyController { policy: &policy, mode: ActionMode::MeanOnly };
    let b = drive(Arc::clone(&track), &mut c2, &opts).unwrap();
    assert_eq!(a, b);
    assert!(a.aborted);
    let err = rollout(&policy, track, &opts).unwrap_err().to_string();
    assert!(err.contains("consecutive episodes"), "{err}");
}

fn steering_increment_variance(r: &Rollout) -> f64 {
    let d: Vec<f64> = r
        .partial
        .iter()
        .flat_map(|ep| ep.windows(2).map(|w| w[1].psi_deg - w[0].psi_deg).collect::<Vec<_>>())
        .collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d.len() as f64
}

#[test]
fn sampled_mode_varies_more_than_mean_only() {
    let track = Arc::new(build_desk_track());
    let policy = MdnPolicy::new(OBS_DIM, &[16], 5);
    let run = |mode| {
        let opts = RolloutOptions {
            rounds: 1,
            mode,
            seed: 6,
            max_failures: 30,
            ..RolloutOptions::default()
        };
        drive(Arc::clone(&track), &mut PolicyController { policy: &policy, mode }, &opts).unwrap()
    };
    let mean = run(ActionMode::MeanOnly);
    let sampled = run(ActionMode::Sampled);
    assert!(steering_increment_variance(&sampled) > steering_increment_variance(&mean));
}

#[test]
fn untrained_policy_rarely_completes() {
    let track = Arc::new(build_desk_track());
    let policy = MdnPolicy::new(OBS_DIM, &[16], 7);
    let st = two_lap_completion(&policy, track, 20, ActionMode::Sampled, 8).unwrap();
    assert_eq!(st.episodes, 20);
    assert!(st.rate() <= 0.05, "{st:?}");
    assert_eq!(st.terminations.values().sum::<usize>(), 20 - st.completed);
}

#[test]
fn never_steering_collides_on_alternating_road() {
    let spec = RoadSpec::new(RoadKind::Alternating50m, 1).with_length(800.0);
    let track = Arc::new(generate_road(&spec).unwrap());
    let mut straight = |_: &[f64], _: &SimState| [0.0, 0.2];
    let opts = RolloutOptions {
        rounds: 1,
        max_failures: 40,
        ..RolloutOptions::default()
    };
    let r = drive(track, &mut straight, &opts).unwrap();
    assert!(r.aborted);
    assert!(r.safety.collisions > 0, "{:?}", r.safety);
    // obstacles are 50 m apart in alternating lanes: one lies within 100 m of
    // every spawn, so only a curve can end a straight-line episode first
    for e in &r.episodes {
        assert!(e.steps < 100 / 3 * 10, "{e:?}");
    }
    assert_eq!(r.safety.completion_rate(), 0.0);
    assert!(r.safety.collision_rate() > 0.0 && r.safety.collision_rate() <= 1.0);
}

fn offset(demo: &drive_imitation::expert::DemoLog, dv: f64) -> drive_imitation::expert::DemoLog {
    let mut d = demo.clone();
    for r in d.rounds.iter_mut().flatten() {
        r.v_kmh += dv;
    }
    d
}

#[test]
fn self_comparison_and_constructed_offset() {
    let track = build_desk_track();
    let lap = track.total_length;
    let demo = collect_demos(&track, 3, 2).unwrap();
    let ed = fit_demo(&demo, Variable::Trackpos, lap).unwrap();
    let ev = fit_demo(&demo, Variable::Speed, lap).unwrap();

    let same = compare(&ed, &ev, &demo, lap).unwrap();
    assert_eq!(same.trackpos.mean_gap, 0.0);
    assert_eq!(same.speed.mean_gap, 0.0);
    assert_eq!(same.trackpos.in_ci_fraction, 1.0);
    assert_eq!(same.speed.ci_overlap, 1.0);
    assert_eq!(same.grid, sample_grid(lap));

    let shifted = compare(&ed, &ev, &offset(&demo, 5.0), lap).unwrap();
    assert!((shifted.speed.mean_gap - 5.0).abs() <= 0.1, "{}", shifted.speed.mean_gap);
    assert!(shifted.trackpos.mean_gap < 1e-9);

    let csv = shifted.to_csv();
    assert_eq!(csv.lines().count(), shifted.grid.len() + 1);
    let dir = tempfile::tempdir().unwrap();
    shifted.save(&dir.path().join("report")).unwrap();
    let back: ComparisonReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(back, shifted);
    assert!(shifted.summary().contains("mean gap"));
}

fn toy_model(seed: u64) -> GpModel {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..40).map(|i| i as f64 * 5.0).collect();
    let y: Vec<f64> = x.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
    let p = RqParams {
        signal_var: rng.random_range(0.5..2.0),
        length_scale: rng.random_range(5.0..30.0),
        alpha: 1.0,
    };
    GpModel::new(x, y, p, rng.random_range(0.01..0.5), 0.0).unwrap()
}

#[test]
fn comparison_bounds_and_symmetry() {
    let grid: Vec<f64> = (0..40).map(|i| i as f64 * 5.0).collect();
    for seed in 0..10 {
        let (a, b) = (toy_model(seed), toy_model(seed + 100));
        let ab = compare_models(Variable::Trackpos, &a, &b, &grid);
        let ba = compare_models(Variable::Trackpos, &b, &a, &grid);
        for f in [ab.in_ci_fraction, ab.ci_overlap, ba.in_ci_fraction] {
            assert!((0.0..=1.0).contains(&f));
        }
        assert_eq!(ab.mean_gap, ba.mean_gap);
        assert_eq!(ab.ci_overlap, ba.ci_overlap);
        assert_eq!(ab.expert_mean, ba.agent_mean);
        assert_eq!(ab, compare_models(Variable::Trackpos, &a, &b, &grid));
    }
}
