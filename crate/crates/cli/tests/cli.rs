use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_drive-imitation"));
    c.env_remove("DRIVE_IMITATION_CONFIG");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_flags_print_usage_and_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["generate-road", "--kind", "desk", "--out", "t.json", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = run(dir.path(), &["fly"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), &["generate-road", "--kind", "spiral", "--out", "t.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown road kind"));
}

#[test]
fn bad_inputs_exit_2_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("norounds.csv"), "# track=desk\nt,x,y\n0,0,0\n").unwrap();
    let o = run(p, &["fit-gp", "--demo", "norounds.csv", "--variable", "speed", "--out", "m.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("round"), "{}", stderr(&o));
    assert!(!p.join("m.json").exists());

    let o = run(p, &["sample-gp", "--model", "missing.json", "--out", "s.csv"]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(p.join("c.toml"), "[ppo]\nminibatch = 300\n").unwrap();
    let o = bin()
        .current_dir(p)
        .env("DRIVE_IMITATION_CONFIG", p.join("c.toml"))
        .args(["collect-expert", "--track", "desk", "--rounds", "1", "--out", "d.csv"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("multiple of minibatch"));
}

#[test]
fn desk_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let desk = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let desk = desk.to_str().unwrap();
    ok(p, &["generate-road", "--kind", "desk", "--out", "desk.json"]);
    ok(p, &["collect-expert", "--track", "desk.json", "--rounds", "3", "--seed", "1", "--out", "demo.csv"]);
    ok(p, &["fit-gp", "--demo", "demo.csv", "--variable", "trackpos", "--out", "d.json"]);
    ok(p, &["fit-gp", "--demo", "demo.csv", "--variable", "speed", "--out", "v.json"]);
    let out = ok(p, &["sample-gp", "--model", "d.json", "--n", "10", "--seed", "2", "--out", "sd.csv"]);
    assert!(out.contains("120 grid points"), "{out}");
    ok(p, &["sample-gp", "--model", "v.json", "--n", "10", "--seed", "3", "--out", "sv.csv"]);
    let samples = std::fs::read_to_string(p.join("sd.csv")).unwrap();
    assert_eq!(samples.lines().filter(|l| !l.starts_with('#')).count(), 1 + 10 * 120);

    let train = |out: &str| {
        ok(
            p,
            &[
                "train", "--config", desk, "--seed", "7", "--track", "desk.json", "--reward", "stochastic",
                "--expert-d", "d.json", "--expert-v", "v.json", "--samples-d", "sd.csv", "--samples-v", "sv.csv",
                "--steps", "1100", "--checkpoint-every", "1", "--out-dir", out,
            ],
        )
    };
    train("a");
    train("b");
    let read = |f: &str| std::fs::read(p.join(f)).unwrap();
    assert_eq!(read("a/metrics.csv"), read("b/metrics.csv"));
    assert_eq!(read("a/policy.bin"), read("b/policy.bin"));
    let metrics = String::from_utf8(read("a/metrics.csv")).unwrap();
    assert!(metrics.starts_with("update,steps,B,"));
    let updates = metrics.lines().count() - 1;
    assert!(updates >= 2);
    for u in 1..=updates {
        assert!(p.join(format!("a/checkpoint-{u:06}.bin")).exists());
    }
    assert!(std::fs::read_to_string(p.join("a/config.toml")).unwrap().contains("mode = \"stochastic\""));

    // an untrained policy cannot finish a lap: runtime failure with diagnostics
    let o = run(
        p,
        &["evaluate", "--checkpoint", "a/policy.bin", "--track", "desk.json", "--rounds", "2", "--expert-d", "d.json", "--expert-v", "v.json", "--out", "rep/agent"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rollout aborted"), "{}", stderr(&o));
    assert!(p.join("rep/agent-safety.json").exists());

    let out = ok(
        p,
        &["evaluate", "--expert", "--track", "desk.json", "--rounds", "2", "--expert-d", "d.json", "--expert-v", "v.json", "--out", "rep/expert"],
    );
    assert!(out.contains("mean gap"), "{out}");
    for f in ["rep/expert.json", "rep/expert.csv", "rep/expert-laps.csv"] {
        assert!(p.join(f).exists(), "{f}");
    }
    let out = ok(p, &["replay", "--log", "rep/expert-laps.csv", "--svg", "rep/expert.svg"]);
    assert!(out.contains("scripted-expert"), "{out}");
    assert!(std::fs::read_to_string(p.join("rep/expert.svg")).unwrap().starts_with("<svg"));

    let o = run(p, &["evaluate", "--checkpoint", "a/policy.bin", "--expert"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(p, &["evaluate", "--expert", "--track", "desk", "--rounds", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(">= 2"));
}
