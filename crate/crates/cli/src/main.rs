use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Parser, Subcommand};
use pects::agent::{self, Agent, AgentKind, ExperimentConfig};
use pects::bounds::{exit_probability_bound, ExitBoundInputs};
use pects::model::Barrier;
use pects::neural::checkpoint;
use serde_json::json;

const CONFIG_FILE: &str = "config.toml";
const MANIFEST_FILE: &str = "manifest.json";
const METRICS_FILE: &str = "metrics.csv";
const ENSEMBLE_FILE: &str = "ensemble.ckpt";
const BARRIER_FILE: &str = "barrier.ckpt";
const CLASSIFIER_FILE: &str = "classifier.ckpt";
const TRANSITIONS_FILE: &str = "transitions.csv";
const SAFETY_FILE: &str = "safety_buffers.csv";

#[derive(Parser)]
#[command(name = "pects", version, about = "Train and evaluate safe model-based RL agents")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an agent; writes a self-contained run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory. Defaults to a directory under $PECTS_OUT_ROOT (or ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a trained run with frozen models.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to `eval_episodes` from the run config.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for summary.json and trajectories.csv (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the barrier on an xy grid (heading 0, zero velocity).
    CbfGrid {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        resolution: f64,
        /// Half-width of the square grid.
        #[arg(long, default_value_t = 3.0)]
        extent: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the K-step exit probability bound.
    Bounds {
        #[arg(long, allow_negative_numbers = true)]
        kappa: f64,
        #[arg(long = "k")]
        k: u32,
        #[arg(long, allow_negative_numbers = true)]
        h0: f64,
        #[arg(long, allow_negative_numbers = true)]
        delta: f64,
        #[arg(long, allow_negative_numbers = true)]
        sigma: f64,
    },
    /// Print a complete configuration with every default filled in.
    PrintConfig {
        #[arg(long, default_value = "unicycle")]
        env: String,
        #[arg(long, default_value = "goal")]
        task: String,
        #[arg(long, default_value = "pects")]
        agent: String,
    },
}

enum Fail {
    Config(String),
    Missing(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Fail {
    fn from(e: anyhow::Error) -> Self {
        Fail::Other(e)
    }
}

impl From<pects::Error> for Fail {
    fn from(e: pects::Error) -> Self {
        match e {
            pects::Error::Config { .. } | pects::Error::InvalidInput(_) | pects::Error::NonFinite(_) => {
                Fail::Config(e.to_string())
            }
            other => Fail::Other(other.into()),
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Other(e.into())
    }
}

type CmdResult = Result<(), Fail>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train { config, out, seed, quiet } => cmd_train(&config, out, seed, quiet),
        Cmd::Eval { run, episodes, seed, out } => cmd_eval(&run, episodes, seed, out),
        Cmd::CbfGrid { run, resolution, extent, out } => cmd_cbf_grid(&run, resolution, extent, out),
        Cmd::Bounds { kappa, k, h0, delta, sigma } => cmd_bounds(kappa, k, h0, delta, sigma),
        Cmd::PrintConfig { env, task, agent } => cmd_print_config(&env, &task, &agent),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Missing(m)) => {
            eprintln!("error: missing artifact: {m}");
            ExitCode::from(3)
        }
        Err(Fail::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn default_run_dir(cfg: &ExperimentConfig) -> PathBuf {
    let root = std::env::var_os("PECTS_OUT_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{}_{}_{}_s{}", cfg.env.as_str(), task_name(cfg), cfg.agent.as_str(), cfg.seed))
}

fn task_name(cfg: &ExperimentConfig) -> &'static str {
    match cfg.task {
        pects::envs::TaskKind::Goal => "goal",
        pects::envs::TaskKind::Circle => "circle",
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Fail> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn cmd_train(config: &Path, out: Option<PathBuf>, seed: Option<u64>, quiet: bool) -> CmdResult {
    let text = fs::read_to_string(config).map_err(|e| Fail::Config(format!("{}: {e}", config.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out.unwrap_or_else(|| default_run_dir(&cfg));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let started = Instant::now();
    let mut log = |m: &agent::EpisodeMetrics| {
        if !quiet {
            eprintln!(
                "episode {:>4}  reward {:>9.2}  steps {:>4}  safe {}  recovery {}",
                m.episode, m.reward, m.steps, m.safe, m.recovery_steps
            );
        }
    };
    let res = agent::train(&cfg, &mut log)?;

    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    let mut w = create(&dir.join(METRICS_FILE))?;
    agent::write_metrics_csv(&mut w, &res.metrics)?;
    w.flush()?;
    res.transitions.write_csv(create(&dir.join(TRANSITIONS_FILE))?)?;
    res.buffers.write_csv(create(&dir.join(SAFETY_FILE))?)?;

    let mut artifacts = serde_json::Map::new();
    for (k, v) in [
        ("config", CONFIG_FILE),
        ("metrics", METRICS_FILE),
        ("transitions", TRANSITIONS_FILE),
        ("safety_buffers", SAFETY_FILE),
    ] {
        artifacts.insert(k.into(), v.into());
    }
    match cfg.agent {
        AgentKind::Pects => {
            checkpoint::save_ensemble(&dir.join(ENSEMBLE_FILE), &res.agent.ensemble)?;
            checkpoint::save_barrier(&dir.join(BARRIER_FILE), &res.agent.cbf)?;
            artifacts.insert("ensemble".into(), ENSEMBLE_FILE.into());
            artifacts.insert("barrier".into(), BARRIER_FILE.into());
        }
        AgentKind::PetsSc => {
            checkpoint::save_ensemble(&dir.join(ENSEMBLE_FILE), &res.agent.ensemble)?;
            checkpoint::save_classifier(&dir.join(CLASSIFIER_FILE), &res.agent.classifier)?;
            artifacts.insert("ensemble".into(), ENSEMBLE_FILE.into());
            artifacts.insert("classifier".into(), CLASSIFIER_FILE.into());
        }
        AgentKind::OraclePects => {}
    }

    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "agent": cfg.agent.as_str(),
        "episodes": res.metrics.len(),
        "artifacts": artifacts,
        "config": cfg.to_toml(),
        "created_unix": created,
        "wall_clock_secs": started.elapsed().as_secs_f64(),
    });
    let mut w = create(&dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut w, &manifest).context("writing manifest")?;
    writeln!(w)?;
    w.flush()?;
    println!("{}", dir.display());
    Ok(())
}

fn require(path: PathBuf) -> Result<PathBuf, Fail> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Fail::Missing(path.display().to_string()))
    }
}

/// Rebuilds the agent stored in a run directory.
fn load_agent(run: &Path) -> Result<Agent, Fail> {
    let cfg_path = require(run.join(CONFIG_FILE))?;
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let mut a = Agent::new(cfg)?;
    match a.cfg.agent {
        AgentKind::Pects => {
            a.ensemble = checkpoint::load_ensemble(&require(run.join(ENSEMBLE_FILE))?)?;
            a.cbf = checkpoint::load_barrier(&require(run.join(BARRIER_FILE))?)?;
        }
        AgentKind::PetsSc => {
            a.ensemble = checkpoint::load_ensemble(&require(run.join(ENSEMBLE_FILE))?)?;
            a.classifier = checkpoint::load_classifier(&require(run.join(CLASSIFIER_FILE))?)?;
        }
        AgentKind::OraclePects => {}
    }
    Ok(a)
}

fn cmd_eval(run: &Path, episodes: Option<usize>, seed: u64, out: Option<PathBuf>) -> CmdResult {
    let a = load_agent(run)?;
    let n = episodes.unwrap_or(a.cfg.eval_episodes);
    let (summary, records) = agent::evaluate(&a, n, seed)?;
    let dir = out.unwrap_or_else(|| run.to_path_buf());
    fs::create_dir_all(&dir)?;
    let mut w = create(&dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut w, &summary).context("writing summary")?;
    writeln!(w)?;
    w.flush()?;
    let mut w = create(&dir.join("trajectories.csv"))?;
    agent::write_trajectories_csv(&mut w, a.cfg.env, &records)?;
    w.flush()?;
    println!(
        "episodes {}  reward {:.2} +- {:.2}  success {:.1}%  safe {:.1}%",
        summary.n_episodes, summary.ep_reward_mean, summary.ep_reward_std, summary.success_pct, summary.safe_pct
    );
    Ok(())
}

/// Grid coordinates `-extent, -extent + res, ..., extent`.
fn grid_axis(resolution: f64, extent: f64) -> Result<Vec<f64>, Fail> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Fail::Config("resolution: must be finite and > 0".into()));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Fail::Config("extent: must be finite and > 0".into()));
    }
    let n = (2.0 * extent / resolution).round() as usize + 1;
    Ok((0..n).map(|i| -extent + i as f64 * resolution).collect())
}

fn cmd_cbf_grid(run: &Path, resolution: f64, extent: f64, out: Option<PathBuf>) -> CmdResult {
    let axis = grid_axis(resolution, extent)?;
    let a = load_agent(run)?;
    let h: &dyn Barrier = match a.cfg.agent {
        AgentKind::Pects => &a.cbf,
        AgentKind::OraclePects => &a.oracle.1,
        AgentKind::PetsSc => return Err(Fail::Missing(format!("{}: run has no barrier", run.join(BARRIER_FILE).display()))),
    };
    let dim = a.cfg.env.state_dim();
    let mut states = ndarray::Array2::<f64>::zeros((axis.len() * axis.len(), dim));
    for (i, &x) in axis.iter().enumerate() {
        for (j, &y) in axis.iter().enumerate() {
            let r = i * axis.len() + j;
            states[[r, 0]] = x;
            states[[r, 1]] = y;
        }
    }
    let vals = h.values(states.view());
    let dir = out.unwrap_or_else(|| run.to_path_buf());
    fs::create_dir_all(&dir)?;
    let mut w = create(&dir.join("grid.csv"))?;
    writeln!(w, "x,y,h")?;
    for (r, v) in vals.iter().enumerate() {
        writeln!(w, "{:?},{:?},{:?}", states[[r, 0]], states[[r, 1]], v)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_bounds(kappa: f64, k: u32, h0: f64, delta: f64, sigma: f64) -> CmdResult {
    let p = exit_probability_bound(&ExitBoundInputs {
        kappa,
        horizon: k,
        h0,
        delta,
        sigma,
    })?;
    println!("{p:.6}");
    Ok(())
}

fn cmd_print_config(env: &str, task: &str, agent: &str) -> CmdResult {
    let text = format!("env = {env:?}\ntask = {task:?}\nagent = {agent:?}\n");
    let cfg = ExperimentConfig::from_toml(&text)?;
    print!("{}", cfg.to_toml());
    Ok(())
}
