use rover_suspension::harness::{self, HarnessError, RunConfig};
use rover_suspension::rl::Algo;
use std::fs;
use std::path::Path;
use std::process::Command;

fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_toml(
        r#"
        steps = 400
        seed = 3
        eval.episodes = 2
        [rl]
        hidden = "16,16"
        batch_size = 32
        warmup_steps = 100
        log_interval = 100
        "#,
    )
    .unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn rover() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rover"))
}

#[test]
fn resolved_config_round_trips() {
    let mut cfg = RunConfig::default();
    cfg.apply_toml("algo = \"td3\"\npid.kp = 75.5\nenv.disturbance_enabled = true\n").unwrap();
    let text = cfg.resolved();
    let mut back = RunConfig::default();
    back.apply_toml(&text).unwrap();
    assert_eq!(back.resolved(), text);
    assert_eq!(back.algo, Algo::Td3);
    assert_eq!(back.pid.kp, 75.5);
    assert!(back.env.disturbance_enabled);
    let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(keys.len(), RunConfig::keys().len());
}

#[test]
fn unknown_and_mistyped_keys_are_rejected() {
    let mut cfg = RunConfig::default();
    assert!(matches!(cfg.apply_toml("pid.kq = 3.0"), Err(HarnessError::UnknownKey(_))));
    assert!(cfg.apply_toml("pid.kp = \"high\"").is_err());
    assert!(cfg.apply_toml("rl.hidden = [64, 64]").is_err());
    assert!(cfg.apply_toml("algo = \"ppo\"").is_err());
    assert!(cfg.apply_toml("suspension = \"semi\"").is_err());
}

#[test]
fn training_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for keep in [&a, &b] {
        harness::cmd_train(&tiny(&run), None, |_| {}).unwrap();
        fs::rename(&run, keep).unwrap();
    }
    for f in ["metrics.csv", "episodes.csv", "checkpoint.bin", "config.resolved"] {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        assert!(x == y, "{f} differs between identical runs");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,ep_rew_mean,ep_len_mean,actor_loss,critic_loss,ent_coef");
    // A row every log_interval steps once the first episode has finished.
    let steps: Vec<usize> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(!steps.is_empty() && steps.len() <= 4);
    assert!(steps.iter().all(|s| s % 100 == 0) && *steps.last().unwrap() == 400);
}

#[test]
fn checkpoint_carries_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.algo = Algo::Ddpg;
    let run = harness::cmd_train(&cfg, Some(&dir.path().join("copy.bin")), |_| {}).unwrap();
    let (agent, saved) = harness::load_checkpoint(&dir.path().join("copy.bin")).unwrap();
    assert_eq!(agent, run.agent);
    assert_eq!(saved.resolved(), cfg.resolved());

    let mut other = RunConfig::default();
    let loaded = harness::agent_for(&mut other, &dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(other.algo, Algo::Ddpg);
    assert_eq!(loaded.algo(), Algo::Ddpg);

    fs::write(dir.path().join("junk.bin"), b"not a checkpoint").unwrap();
    assert!(matches!(harness::load_checkpoint(&dir.path().join("junk.bin")), Err(HarnessError::BadCheckpoint(_))));
}

#[test]
fn eval_traces_follow_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.eval_height = 0.25;
    let summary = harness::cmd_eval(&cfg, None).unwrap();
    assert_eq!(summary.episodes, 2);
    let dt = cfg.env.control_interval;
    for i in 0..2 {
        let text = fs::read_to_string(dir.path().join(format!("trace_{i}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "time,pitch,velocity,q3,q4,reward");
        let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        assert!(!rows.is_empty());
        for (k, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), 6);
            assert!((r[0] - (k + 1) as f64 * dt).abs() < 1e-9, "row {k} time {}", r[0]);
        }
        let last = rows.last().unwrap()[5];
        assert!([100.0, -100.0, -50.0].contains(&last));
        assert!(rows[..rows.len() - 1].iter().all(|r| r[5] == 0.0));
    }
}

#[test]
fn cli_rejects_unknown_algorithm() {
    let dir = tempfile::tempdir().unwrap();
    let out = rover().args(["train", "--algo", "ppo", "--steps", "10", "--out"]).arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ppo"));
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn cli_rejects_unknown_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "env.height_mid = 0.3\n").unwrap();
    let out = rover().args(["eval", "--config"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("env.height_mid"));
}

#[test]
fn cli_flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "steps = 5\nseed = 1\nrl.warmup_steps = 100\nrl.log_interval = 100\nrl.hidden = \"8\"\n").unwrap();
    let out = rover()
        .args(["train", "--steps", "200", "--seed", "4", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = fs::read_to_string(dir.path().join("config.resolved")).unwrap();
    assert!(resolved.contains("steps = 200\n") && resolved.contains("seed = 4\n"));
    assert!(resolved.contains("rl.hidden = \"8\"\n"));
}

#[test]
fn gradcheck_exit_codes() {
    let ok = rover().args(["gradcheck", "--seed", "1"]).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = rover().args(["gradcheck", "--perturb"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}
