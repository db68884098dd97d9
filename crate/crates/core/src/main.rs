use clap::{Args, Parser, Subcommand};
use rover_suspension::harness::{self, HarnessError, RunConfig};
use rover_suspension::rl::Algo;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rover", about = "Active five-bar rover suspension: simulation and reinforcement learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an agent and write metrics.csv, checkpoint.bin and config.resolved.
    Train(Common),
    /// Run the noise-free policy and write one trace_<i>.csv per episode.
    Eval(Common),
    /// Run the policy against the passive rover and write compare.csv.
    Compare(Common),
    /// Finite-difference audit of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt each analytic gradient (suite sensitivity check).
        #[arg(long, hide = true)]
        perturb: bool,
    },
}

#[derive(Args)]
struct Common {
    /// File of dotted `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// sac, ddpg or td3
    #[arg(long)]
    algo: Option<String>,
    /// active or passive
    #[arg(long)]
    suspension: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Obstacle height in metres for eval and compare.
    #[arg(long)]
    height: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra checkpoint copy written after training.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    load: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(a) = &self.algo {
            cfg.algo = Algo::parse(a)?;
        }
        if let Some(s) = &self.suspension {
            cfg.suspension = harness::parse_suspension(s)?;
        }
        if let Some(n) = self.steps {
            cfg.total_steps = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(h) = self.height {
            cfg.eval_height = h;
        }
        if let Some(n) = self.episodes {
            cfg.eval_episodes = n;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }
}

fn train(c: &Common) -> Result<(), HarnessError> {
    let cfg = c.resolve()?;
    let res = harness::cmd_train(&cfg, c.save.as_deref(), |r| {
        println!(
            "step {:>7}  ep_rew_mean {:+8.2}  ep_len_mean {:6.1}  actor {:+9.3}  critic {:9.3}  ent_coef {:.4}",
            r.step, r.ep_rew_mean, r.ep_len_mean, r.actor_loss, r.critic_loss, r.ent_coef
        )
    })?;
    println!(
        "{} episodes, {} gradient steps, outputs in {}",
        res.metrics.episodes.len(),
        res.metrics.gradient_steps,
        cfg.out.display()
    );
    Ok(())
}

fn eval(c: &Common) -> Result<(), HarnessError> {
    let mut cfg = c.resolve()?;
    let agent = match &c.load {
        Some(p) => Some(harness::agent_for(&mut cfg, p)?),
        None => {
            println!("no --load given: evaluating an untrained {} policy", cfg.algo.name());
            None
        }
    };
    let s = harness::cmd_eval(&cfg, agent.as_ref())?;
    println!("height {:.3} m, {} episodes", cfg.eval_height, s.episodes);
    println!("success rate      {:.2}", s.success_rate());
    println!("peak |pitch|      {:.2} deg", s.peak_pitch);
    println!("mean velocity     {:.3} m/s", s.mean_velocity);
    Ok(())
}

fn compare(c: &Common) -> Result<(), HarnessError> {
    let mut cfg = c.resolve()?;
    let path = c.load.clone().unwrap_or_else(|| cfg.out.join("checkpoint.bin"));
    let agent = harness::agent_for(&mut cfg, &path)?;
    let cmp = harness::cmd_compare(&cfg, &agent)?;
    let (a, p) = (cmp.peak_active(), cmp.peak_passive());
    println!("height {:.3} m", cfg.eval_height);
    println!("peak |pitch| active   {a:.2} deg");
    println!("peak |pitch| passive  {p:.2} deg");
    println!("reduction             {:.2} deg ({:.0}%)", p - a, 100.0 * (p - a) / p.max(1e-12));
    println!("active mean velocity while crossing  {:.3} m/s", cmp.active_crossing_velocity());
    println!("passive minimum velocity             {:.3} m/s", cmp.passive_min_velocity());
    Ok(())
}

fn gradcheck(seed: u64, perturb: bool) -> Result<(), HarnessError> {
    let (report, err) = match harness::cmd_gradcheck(seed, perturb) {
        Ok(r) => (r, None),
        Err((r, e)) => (r, Some(e)),
    };
    for c in &report.checks {
        println!(
            "{:<48} max rel err {:.3e}  tol {:.0e}  params {:>5}  {}",
            c.name,
            c.max_rel_err,
            c.tolerance,
            c.params,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    err.map_or(Ok(()), Err)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Train(c) => train(c),
        Cmd::Eval(c) => eval(c),
        Cmd::Compare(c) => compare(c),
        Cmd::Gradcheck { seed, perturb } => gradcheck(*seed, *perturb),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
