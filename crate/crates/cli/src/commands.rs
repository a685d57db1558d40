use std::path::{Path, PathBuf};
use std::sync::Arc;

use drive_imitation::config::{Config, TABLE_LR};
use drive_imitation::eval::{
    self, drive, generalization_suite, safety_table, Controller, ExpertController, PolicyController,
    RolloutOptions, SuiteOptions,
};
use drive_imitation::expert::{collect_demos_with, load_demo, DemoLog, Variable};
use drive_imitation::gp::{fit_demo, load_samples, sample_grid, sample_trajectories, save_samples, GpModel, TrajectorySample};
use drive_imitation::io::{write_atomic, write_json};
use drive_imitation::nn::MdnPolicy;
use drive_imitation::ppo::{metrics_csv, DrivingEnv, Trainer};
use drive_imitation::reward::{ExpertProfile, RewardMode};
use drive_imitation::sim::OBS_DIM;
use drive_imitation::track::{self, build_desk_track, track_by_id, RoadSpec, Track};
use drive_imitation::{Error, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A path to a track file, or a track id.
pub fn resolve_track(arg: &str) -> Result<Track> {
    let p = Path::new(arg);
    if p.is_file() {
        return Track::load(p);
    }
    track_by_id(arg).map_err(|_| Error::Invalid(format!("`{arg}` is neither a track file nor a known track id")))
}

/// The `# track=` metadata line of a CSV log.
pub fn track_from_log(path: &Path) -> Result<Track> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.trim_start_matches('#').trim().strip_prefix("track=").map(str::to_string))
        .ok_or_else(|| Error::Invalid(format!("{}: no `# track=` line; pass --track", path.display())))?;
    resolve_track(&id)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn generate_road(kind: &str, length: f64, seed: u64, out: &Path) -> Result<()> {
    let track = if kind == "desk" {
        build_desk_track()
    } else {
        track::generate_road(&RoadSpec::new(kind.parse()?, seed).with_length(length))?
    };
    track.save(out)?;
    println!(
        "{}: {:.1} m, {} obstacles -> {}",
        track.id,
        track.total_length,
        track.obstacles.len(),
        out.display()
    );
    Ok(())
}

fn collect(track: &Track, rounds: usize, seed: u64, cfg: &Config) -> Result<DemoLog> {
    collect_demos_with(track, rounds, seed, &cfg.expert, &cfg.vehicle)
}

pub fn collect_expert(track: &str, rounds: usize, seed: u64, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = Config::resolve(config)?;
    let track = resolve_track(track)?;
    let demo = collect(&track, rounds, seed, &cfg)?;
    demo.save(out)?;
    println!("{} rounds, {} rows -> {}", demo.rounds.len(), demo.num_records(), out.display());
    Ok(())
}

pub fn fit_gp(demo: &Path, variable: Variable, track: Option<&str>, out: &Path) -> Result<()> {
    let track = match track {
        Some(t) => resolve_track(t)?,
        None => track_from_log(demo)?,
    };
    let log = load_demo(demo, &track)?;
    let model = fit_demo(&log, variable, track.total_length)?;
    model.save(out)?;
    let p = &model.params;
    println!(
        "{variable}: signal_var {:.4}, length_scale {:.2} m, alpha {:.3}, noise_var {:.4}, {} points -> {}",
        p.signal_var,
        p.length_scale,
        p.alpha,
        model.noise_var,
        model.x.len(),
        out.display()
    );
    Ok(())
}

fn draw(model: &GpModel, n: usize, seed: u64) -> Result<Vec<TrajectorySample>> {
    let grid = sample_grid(model.info.lap_length);
    sample_trajectories(model, &grid, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_gp(model: &Path, n: usize, seed: u64, out: &Path) -> Result<()> {
    let m = GpModel::load(model)?;
    if !(m.info.lap_length > 0.0) {
        return Err(Error::Invalid(format!("{}: model has no lap length", model.display())));
    }
    let samples = draw(&m, n, seed)?;
    save_samples(out, &samples, &m.info)?;
    println!("{n} samples on {} grid points -> {}", samples[0].grid.len(), out.display());
    Ok(())
}

fn load_model(path: &Path, variable: Variable, track: &Track) -> Result<GpModel> {
    let m = GpModel::load(path)?;
    if m.info.variable.is_some_and(|v| v != variable) {
        return Err(Error::Invalid(format!("{} models {:?}, expected {variable}", path.display(), m.info.variable)));
    }
    if (m.info.lap_length - track.total_length).abs() > 1e-6 * track.total_length {
        return Err(Error::Invalid(format!(
            "{} was fitted on a {:.1} m lap, track `{}` is {:.1} m",
            path.display(),
            m.info.lap_length,
            track.id,
            track.total_length
        )));
    }
    Ok(m)
}

/// Expert GPs from files, or fitted on fresh demos from the config.
fn expert_models(d: Option<&PathBuf>, v: Option<&PathBuf>, track: &Track, cfg: &Config) -> Result<(GpModel, GpModel)> {
    match (d, v) {
        (Some(d), Some(v)) => Ok((load_model(d, Variable::Trackpos, track)?, load_model(v, Variable::Speed, track)?)),
        _ => {
            eprintln!("fitting expert GPs on {} fresh demo rounds", cfg.demo.rounds);
            let demo = collect(track, cfg.demo.rounds, cfg.demo.seed, cfg)?;
            let lap = track.total_length;
            Ok((fit_demo(&demo, Variable::Trackpos, lap)?, fit_demo(&demo, Variable::Speed, lap)?))
        }
    }
}

pub fn train(a: &crate::TrainArgs) -> Result<()> {
    let mut cfg = Config::resolve(a.config.config.as_deref())?;
    if let Some(t) = &a.track {
        cfg.track.id = t.clone();
    }
    if let Some(m) = a.reward {
        cfg.reward.mode = m;
    }
    if let Some(s) = a.steps {
        cfg.ppo.total_steps = s;
    }
    if let Some(c) = a.checkpoint_every {
        cfg.ppo.checkpoint_every = c;
    }
    if a.table_lr {
        cfg.ppo.lr = TABLE_LR;
    }
    cfg.validate()?;
    let track = Arc::new(resolve_track(&cfg.track.id)?);
    let (md, mv) = expert_models(a.expert_d.as_ref(), a.expert_v.as_ref(), &track, &cfg)?;
    let (sd, sv) = match (&a.samples_d, &a.samples_v) {
        (Some(d), Some(v)) => (load_samples(d)?.0, load_samples(v)?.0),
        _ if cfg.reward.mode == RewardMode::Stochastic => {
            let n = cfg.sampling.samples;
            eprintln!("drawing {n} trajectories per variable");
            (draw(&md, n, cfg.sampling.seed)?, draw(&mv, n, cfg.sampling.seed.wrapping_add(1))?)
        }
        _ => (Vec::new(), Vec::new()),
    };
    let profile = Arc::new(ExpertProfile::from_models(&md, &mv, &sd, &sv, track.total_length)?);
    let mut env = DrivingEnv::new(Arc::clone(&track), profile, cfg.reward.clone())?;
    env.sim.params = cfg.vehicle.clone();

    ensure_dir(&a.out_dir)?;
    write_atomic(&a.out_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let metrics_path = a.out_dir.join("metrics.csv");
    let every = cfg.ppo.checkpoint_every;
    let mut rows = Vec::new();
    let mut trainer = Trainer::new(cfg.ppo.clone(), OBS_DIM, a.seed)?;
    trainer.train(&mut env, |m, policy| {
        rows.push(*m);
        write_atomic(&metrics_path, metrics_csv(&rows).as_bytes())?;
        if every > 0 && m.update % every == 0 {
            policy.save(&a.out_dir.join(format!("checkpoint-{:06}.bin", m.update)))?;
        }
        if m.update % 10 == 0 {
            eprintln!(
                "update {:>5}  steps {:>8}  B {:>5}  return {:>9.1}  len {:>7.1}  completed {}",
                m.update, m.steps, m.batch, m.mean_return, m.mean_ep_len, m.completed
            );
        }
        Ok(())
    })?;
    trainer.policy.save(&a.out_dir.join("policy.bin"))?;
    println!(
        "{} updates, {} steps -> {}",
        trainer.updates,
        trainer.steps,
        a.out_dir.join("policy.bin").display()
    );
    Ok(())
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn evaluate(a: &crate::EvaluateArgs) -> Result<()> {
    let cfg = Config::resolve(a.config.config.as_deref())?;
    let track = Arc::new(resolve_track(a.track.as_deref().unwrap_or(&cfg.track.id))?);
    let opts = RolloutOptions {
        rounds: a.rounds.unwrap_or(cfg.eval.rounds),
        mode: a.mode.unwrap_or(cfg.eval.mode),
        seed: a.seed,
        max_failures: cfg.eval.max_failures,
        vehicle: cfg.vehicle.clone(),
    };
    if opts.rounds < 2 {
        // noise tuning holds out whole laps
        return Err(Error::Invalid(format!("--rounds must be >= 2 to fit the agent's GPs, got {}", opts.rounds)));
    }
    let policy = match &a.checkpoint {
        Some(p) => {
            let policy = MdnPolicy::load(p)?;
            if policy.input_dim() != OBS_DIM {
                return Err(Error::Invalid(format!(
                    "{} expects {} inputs, the simulator emits {OBS_DIM}",
                    p.display(),
                    policy.input_dim()
                )));
            }
            Some(policy)
        }
        None => None,
    };
    let mut ctrl: Box<dyn Controller + '_> = match &policy {
        Some(policy) => Box::new(PolicyController { policy, mode: opts.mode }),
        None => Box::new(ExpertController::new(cfg.expert.clone(), Arc::clone(&track))),
    };

    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let r = drive(Arc::clone(&track), ctrl.as_mut(), &opts)?;
    if r.aborted {
        write_json(&with_suffix(&a.out, "-safety.json"), &r.safety)?;
        return Err(Error::Rollout(format!(
            "{} consecutive episodes ended without a lap ({} of {} laps logged, terminations {:?}); safety counts in {}",
            opts.max_failures + 1,
            r.laps.len(),
            opts.rounds,
            r.safety.terminations,
            with_suffix(&a.out, "-safety.json").display()
        )));
    }
    let (ed, ev) = expert_models(a.expert_d.as_ref(), a.expert_v.as_ref(), &track, &cfg)?;
    let mut demo = r.as_demo(opts.seed);
    if policy.is_none() {
        demo.driver_id = "scripted-expert".into();
    }
    demo.save(&with_suffix(&a.out, "-laps.csv"))?;
    let mut report = eval::compare(&ed, &ev, &demo, track.total_length)?;
    report.safety = Some(r.safety.clone());
    report.save(&a.out)?;
    println!("{}", report.summary());

    if a.generalization {
        let suite = SuiteOptions {
            expert_rounds: cfg.demo.rounds,
            rollout: opts.clone(),
            ..SuiteOptions::default()
        };
        let reports = generalization_suite(ctrl.as_mut(), a.seed, &suite)?;
        let table = safety_table(&reports);
        write_atomic(&with_suffix(&a.out, "-generalization.csv"), table.as_bytes())?;
        write_json(&with_suffix(&a.out, "-generalization.json"), &reports)?;
        print!("{table}");
    }
    Ok(())
}
