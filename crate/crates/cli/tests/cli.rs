use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pects::agent::ExperimentConfig;
use pects::bounds::{exit_probability_bound, ExitBoundInputs};

fn pects(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pects"))
        .args(args)
        .env_remove("PECTS_OUT_ROOT")
        .output()
        .expect("run pects")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), stderr(&o));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const ORACLE_RUN: &str = r#"
env = "unicycle"
task = "goal"
agent = "oracle_pects"
episodes = 1
episode_cap = 40
train_episode_cap = 20

[planner]
candidates = 16
particles = 1
horizon = 6
"#;

const LEARNED_RUN: &str = r#"
env = "unicycle"
task = "circle"
episodes = 4
train_episode_cap = 15
episode_cap = 10

[planner]
candidates = 12
particles = 2
horizon = 4

[sensor]
grid_spacing = 0.5

[learning.ensemble]
size = 2
min_data = 20
min_steps = 10
max_steps = 10
arch = { hidden = [8] }

[learning.cbf]
steps = 10
batch_size = 32
arch = { hidden = [8], activation = "relu" }
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn print_config_round_trips() {
    let o = ok(pects(&["print-config", "--env", "double_integrator", "--task", "circle"]));
    let cfg = ExperimentConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(cfg.env.as_str(), "double_integrator");
    assert_eq!(cfg.planner.candidates, 400);
    assert_eq!(cfg.to_toml(), stdout(&o));
}

#[test]
fn print_config_rejects_unknown_env() {
    let o = pects(&["print-config", "--env", "hovercraft"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_required_field_exits_2_with_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "task = \"goal\"\n");
    let o = pects(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("env"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn invalid_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for (text, field) in [
        ("env = \"unicycle\"\ntask = \"goal\"\nepisodes = 0\n", "episodes"),
        ("env = \"unicycle\"\ntask = \"goal\"\nbogus = 1\n", "bogus"),
        ("env = \"unicycle\"\ntask = \"goal\"\n[planner]\nbeta = 2.0\n", "planner.beta"),
    ] {
        let cfg = write_config(dir.path(), "c.toml", text);
        let o = pects(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
        assert_eq!(o.status.code(), Some(2), "{text}");
        assert!(stderr(&o).contains(field), "{field}: {}", stderr(&o));
    }
}

#[test]
fn bounds_prints_six_digits() {
    let o = ok(pects(&["bounds", "--kappa", "0.95", "--k", "10", "--h0", "0", "--delta", "1", "--sigma", "0.1"]));
    assert_eq!(stdout(&o).trim(), "1.000000");
    let o = ok(pects(&["bounds", "--kappa", "0.95", "--k", "25", "--h0", "1", "--delta", "2", "--sigma", "0.1"]));
    let want = exit_probability_bound(&ExitBoundInputs {
        kappa: 0.95,
        horizon: 25,
        h0: 1.0,
        delta: 2.0,
        sigma: 0.1,
    })
    .unwrap();
    assert_eq!(stdout(&o).trim(), format!("{want:.6}"));
}

#[test]
fn bounds_rejects_bad_kappa() {
    for k in ["1.5", "-0.1", "NaN"] {
        let o = pects(&["bounds", "--kappa", k, "--k", "10", "--h0", "0.5", "--delta", "1", "--sigma", "0.1"]);
        assert_eq!(o.status.code(), Some(2), "kappa {k}");
    }
    let o = pects(&["bounds", "--kappa", "0.9", "--k", "10", "--h0", "0.5", "--delta", "0", "--sigma", "0.1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_of_missing_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = pects(&["eval", "--run", p(dir.path()), "--episodes", "1"]);
    assert_eq!(o.status.code(), Some(3));
    let o = pects(&["cbf-grid", "--run", p(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn oracle_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", ORACLE_RUN);
    let run = dir.path().join("run");
    ok(pects(&["train", "--config", p(&cfg), "--out", p(&run), "--quiet"]));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    for key in ["version", "config", "artifacts", "wall_clock_secs"] {
        assert!(manifest.get(key).is_some(), "{key}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "episode,reward,steps,success,safe,recovery_steps,restarts,explore,certified");
    assert_eq!(lines.len(), 2);

    ok(pects(&["eval", "--run", p(&run), "--episodes", "3", "--seed", "4"]));
    let summary_text = fs::read_to_string(run.join("summary.json")).unwrap();
    let traj = fs::read_to_string(run.join("trajectories.csv")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&summary_text).unwrap();
    let mut keys: Vec<&String> = summary.as_object().unwrap().keys().collect();
    keys.sort();
    assert_eq!(keys, ["ep_reward_mean", "ep_reward_std", "n_episodes", "safe_pct", "success_pct"]);
    assert_eq!(summary["n_episodes"], 3);
    assert_eq!(traj.lines().next().unwrap(), "episode,step,s0,s1,s2,a0,a1,reward,collided,mode");
    let any_collision = traj.lines().skip(1).any(|l| l.split(',').nth(8) == Some("true"));
    assert_eq!(summary["safe_pct"].as_f64() == Some(100.0), !any_collision);

    let out2 = dir.path().join("again");
    ok(pects(&["eval", "--run", p(&run), "--episodes", "3", "--seed", "4", "--out", p(&out2)]));
    assert_eq!(fs::read_to_string(out2.join("summary.json")).unwrap(), summary_text);
    assert_eq!(fs::read_to_string(out2.join("trajectories.csv")).unwrap(), traj);

    ok(pects(&["cbf-grid", "--run", p(&run), "--resolution", "0.05"]));
    let grid = fs::read_to_string(run.join("grid.csv")).unwrap();
    let mut rows = grid.lines();
    assert_eq!(rows.next(), Some("x,y,h"));
    let vals: Vec<Vec<f64>> = rows.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(vals.len(), 121 * 121);
    assert!(vals.iter().all(|r| r[2] > -1.0 && r[2] < 1.0));
    assert_eq!(vals[0][..2], [-3.0, -3.0]);
    assert!((vals[vals.len() - 1][0] - 3.0).abs() < 1e-12);
}

#[test]
fn learned_run_is_reproducible_and_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", LEARNED_RUN);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(pects(&["train", "--config", p(&cfg), "--out", p(&a), "--seed", "9", "--quiet"]));
    ok(pects(&["train", "--config", p(&cfg), "--out", p(&b), "--seed", "9", "--quiet"]));
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(metrics.lines().count(), 5);
    for f in ["config.toml", "ensemble.ckpt", "barrier.ckpt", "transitions.csv", "safety_buffers.csv"] {
        assert!(a.join(f).is_file(), "{f}");
    }

    // The run directory alone is enough to evaluate, even after moving it.
    let moved = dir.path().join("moved");
    fs::rename(&a, &moved).unwrap();
    ok(pects(&["eval", "--run", p(&moved), "--episodes", "2"]));
    ok(pects(&["cbf-grid", "--run", p(&moved), "--resolution", "0.5", "--extent", "1"]));
    assert_eq!(fs::read_to_string(moved.join("grid.csv")).unwrap().lines().count(), 1 + 5 * 5);

    fs::remove_file(moved.join("barrier.ckpt")).unwrap();
    let o = pects(&["eval", "--run", p(&moved), "--episodes", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("barrier.ckpt"));
}

#[test]
fn long_run_writes_one_metrics_row_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let text = "env = \"unicycle\"\ntask = \"circle\"\nepisodes = 500\nexploration_episodes = 500\ntrain_episode_cap = 2\n[sensor]\ngrid_spacing = 1.0\n";
    let cfg = write_config(dir.path(), "c.toml", text);
    let run = dir.path().join("run");
    ok(pects(&["train", "--config", p(&cfg), "--out", p(&run), "--quiet"]));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 501);
}

#[test]
fn out_root_env_var_sets_default_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", ORACLE_RUN);
    let root = dir.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_pects"))
        .args(["train", "--config", p(&cfg), "--quiet", "--seed", "3"])
        .env("PECTS_OUT_ROOT", &root)
        .output()
        .unwrap();
    let o = ok(o);
    let run = root.join("unicycle_goal_oracle_pects_s3");
    assert_eq!(stdout(&o).trim(), p(&run));
    assert!(run.join("manifest.json").is_file());
}
