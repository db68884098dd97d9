//! Command implementations behind the `rover` binary: configuration,
//! training, evaluation, active/passive comparison and the gradient audit.

use crate::approx::ApproxError;
use crate::control::PidGains;
use crate::env::{Action, EnvError, EpisodeConfig, RoverEnv};
use crate::gradcheck::{self, GradcheckReport};
use crate::mechanism::{MechanismConfig, MechanismError};
use crate::physics::{BodyParams, PhysicsError, RoverModel, SuspensionMode};
use crate::rl::{self, Agent, Algo, MetricsRow, RlConfig, RlError, RunMetrics};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Everything a command needs. Each field has a dotted key in the config
/// file; see [`RunConfig::resolved`] for the full list.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algo: Algo,
    pub suspension: SuspensionMode,
    pub total_steps: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub eval_episodes: usize,
    pub eval_height: f64,
    pub env: EpisodeConfig,
    pub pid: PidGains,
    pub physics: BodyParams,
    pub mechanism: MechanismConfig,
    pub rl: RlConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Sac,
            suspension: SuspensionMode::Active,
            total_steps: 100_000,
            seed: 0,
            out: PathBuf::from("runs/default"),
            eval_episodes: 20,
            eval_height: 0.32,
            env: EpisodeConfig::default(),
            pid: PidGains::default(),
            physics: BodyParams::default(),
            mechanism: MechanismConfig::default(),
            rl: RlConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Scalar {
    Float(f64),
    Int(i64),
    Bool(bool),
    Str(String),
}

impl Scalar {
    fn render(&self) -> String {
        match self {
            Scalar::Float(x) => toml::Value::Float(*x).to_string(),
            Scalar::Int(i) => i.to_string(),
            Scalar::Bool(b) => b.to_string(),
            Scalar::Str(s) => toml::Value::String(s.clone()).to_string(),
        }
    }
}

fn want_f64(key: &str, v: &toml::Value) -> Result<f64, HarnessError> {
    match v {
        toml::Value::Float(x) => Ok(*x),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(HarnessError::Config(format!("{key}: expected a number"))),
    }
}

fn want_int(key: &str, v: &toml::Value) -> Result<i64, HarnessError> {
    match v {
        toml::Value::Integer(i) => Ok(*i),
        _ => Err(HarnessError::Config(format!("{key}: expected an integer"))),
    }
}

fn want_usize(key: &str, v: &toml::Value) -> Result<usize, HarnessError> {
    usize::try_from(want_int(key, v)?).map_err(|_| HarnessError::Config(format!("{key}: must be >= 0")))
}

fn want_u64(key: &str, v: &toml::Value) -> Result<u64, HarnessError> {
    u64::try_from(want_int(key, v)?).map_err(|_| HarnessError::Config(format!("{key}: must be >= 0")))
}

fn want_bool(key: &str, v: &toml::Value) -> Result<bool, HarnessError> {
    v.as_bool().ok_or_else(|| HarnessError::Config(format!("{key}: expected true or false")))
}

fn want_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str, HarnessError> {
    v.as_str().ok_or_else(|| HarnessError::Config(format!("{key}: expected a string")))
}

pub fn parse_suspension(s: &str) -> Result<SuspensionMode, HarnessError> {
    match s {
        "active" => Ok(SuspensionMode::Active),
        "passive" => Ok(SuspensionMode::Passive),
        other => Err(HarnessError::Config(format!("unknown suspension '{other}' (expected active or passive)"))),
    }
}

fn suspension_name(m: SuspensionMode) -> &'static str {
    match m {
        SuspensionMode::Active => "active",
        SuspensionMode::Passive => "passive",
    }
}

fn parse_hidden(key: &str, s: &str) -> Result<Vec<usize>, HarnessError> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| HarnessError::Config(format!("{key}: expected e.g. \"64,64\""))))
        .collect()
}

/// Generates the key table: `entries` lists every key with its value and
/// `set_numeric` assigns one from a parsed scalar.
macro_rules! numeric_keys {
    ($( $key:literal => $($field:tt).+ : $kind:ident ),* $(,)?) => {
        fn numeric_entries(&self) -> Vec<(&'static str, Scalar)> {
            vec![$( ($key, numeric_keys!(@out $kind, self.$($field).+)) ),*]
        }

        fn set_numeric(&mut self, key: &str, v: &toml::Value) -> Result<bool, HarnessError> {
            match key {
                $( $key => self.$($field).+ = numeric_keys!(@in $kind, key, v), )*
                _ => return Ok(false),
            }
            Ok(true)
        }
    };
    (@out f64, $e:expr) => { Scalar::Float($e) };
    (@out usize, $e:expr) => { Scalar::Int($e as i64) };
    (@out u64, $e:expr) => { Scalar::Int($e as i64) };
    (@out bool, $e:expr) => { Scalar::Bool($e) };
    (@in f64, $k:expr, $v:expr) => { want_f64($k, $v)? };
    (@in usize, $k:expr, $v:expr) => { want_usize($k, $v)? };
    (@in u64, $k:expr, $v:expr) => { want_u64($k, $v)? };
    (@in bool, $k:expr, $v:expr) => { want_bool($k, $v)? };
}

impl RunConfig {
    numeric_keys! {
        "steps" => total_steps: usize,
        "seed" => seed: u64,
        "eval.episodes" => eval_episodes: usize,
        "eval.height" => eval_height: f64,

        "env.height_min" => env.height_range.0: f64,
        "env.height_max" => env.height_range.1: f64,
        "env.max_agent_steps" => env.max_agent_steps: usize,
        "env.pitch_fail_deg" => env.pitch_fail_deg: f64,
        "env.yaw_fail_deg" => env.yaw_fail_deg: f64,
        "env.threshold_distance" => env.threshold_distance: f64,
        "env.control_interval" => env.control_interval: f64,
        "env.crossing_margin" => env.crossing_margin: f64,
        "env.disturbance_enabled" => env.disturbance_enabled: bool,
        "env.disturbance_amplitude" => env.disturbance_amplitude: f64,
        "env.step_x" => env.step_x: f64,
        "env.world_extent" => env.world_extent: f64,
        "env.start_gap" => env.start_gap: f64,
        "env.settle_time" => env.settle_time: f64,

        "pid.kp" => pid.kp: f64,
        "pid.ki" => pid.ki: f64,
        "pid.kd" => pid.kd: f64,
        "pid.integral_limit" => pid.integral_limit: f64,
        "pid.torque_limit" => pid.torque_limit: f64,

        "physics.chassis_mass" => physics.chassis_mass: f64,
        "physics.chassis_inertia" => physics.chassis_inertia: f64,
        "physics.link1_mass" => physics.link1_mass: f64,
        "physics.link2_mass" => physics.link2_mass: f64,
        "physics.link3_mass" => physics.link3_mass: f64,
        "physics.link4_mass" => physics.link4_mass: f64,
        "physics.wheel_mass" => physics.wheel_mass: f64,
        "physics.contact_stiffness" => physics.contact_stiffness: f64,
        "physics.contact_damping" => physics.contact_damping: f64,
        "physics.friction_coeff" => physics.friction_coeff: f64,
        "physics.drive_speed" => physics.drive_speed: f64,
        "physics.joint_damping" => physics.joint_damping: f64,
        "physics.gravity" => physics.gravity: f64,
        "physics.dt" => physics.dt: f64,

        "mechanism.pivot_front_x" => mechanism.chassis_pivot_front.x: f64,
        "mechanism.pivot_front_z" => mechanism.chassis_pivot_front.z: f64,
        "mechanism.pivot_rear_x" => mechanism.chassis_pivot_rear.x: f64,
        "mechanism.pivot_rear_z" => mechanism.chassis_pivot_rear.z: f64,
        "mechanism.len_link1" => mechanism.len_link1: f64,
        "mechanism.len_link2" => mechanism.len_link2: f64,
        "mechanism.len_link3" => mechanism.len_link3: f64,
        "mechanism.len_link4" => mechanism.len_link4: f64,
        "mechanism.ext_link1" => mechanism.ext_link1: f64,
        "mechanism.ext_link2" => mechanism.ext_link2: f64,
        "mechanism.drop_link1" => mechanism.drop_link1: f64,
        "mechanism.drop_link2" => mechanism.drop_link2: f64,
        "mechanism.wheel_radius" => mechanism.wheel_radius: f64,
        "mechanism.spring_rate_front" => mechanism.spring_rate_front: f64,
        "mechanism.spring_rate_rear" => mechanism.spring_rate_rear: f64,
        "mechanism.spring_rest_front" => mechanism.spring_rest_front: f64,
        "mechanism.spring_rest_rear" => mechanism.spring_rest_rear: f64,
        "mechanism.joint_limit" => mechanism.joint_limit: f64,

        "rl.gamma" => rl.gamma: f64,
        "rl.tau" => rl.tau: f64,
        "rl.batch_size" => rl.batch_size: usize,
        "rl.replay_capacity" => rl.replay_capacity: usize,
        "rl.warmup_steps" => rl.warmup_steps: usize,
        "rl.target_entropy" => rl.target_entropy: f64,
        "rl.lr_actor" => rl.lr_actor: f64,
        "rl.lr_critic" => rl.lr_critic: f64,
        "rl.lr_alpha" => rl.lr_alpha: f64,
        "rl.init_alpha" => rl.init_alpha: f64,
        "rl.auto_alpha" => rl.auto_alpha: bool,
        "rl.exploration_noise" => rl.exploration_noise: f64,
        "rl.policy_noise" => rl.policy_noise: f64,
        "rl.noise_clip" => rl.noise_clip: f64,
        "rl.policy_delay" => rl.policy_delay: usize,
        "rl.log_interval" => rl.log_interval: usize,
    }

    fn entries(&self) -> Vec<(&'static str, Scalar)> {
        let hidden = self.rl.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
        let mut e = vec![
            ("algo", Scalar::Str(self.algo.name().to_string())),
            ("suspension", Scalar::Str(suspension_name(self.suspension).to_string())),
            ("out", Scalar::Str(self.out.to_string_lossy().into_owned())),
            ("rl.hidden", Scalar::Str(hidden)),
        ];
        e.extend(self.numeric_entries());
        e.sort_by(|a, b| a.0.cmp(b.0));
        e
    }

    /// Every key the config file accepts, sorted.
    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Assigns one dotted key.
    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<(), HarnessError> {
        match key {
            "algo" => self.algo = Algo::parse(want_str(key, v)?)?,
            "suspension" => self.suspension = parse_suspension(want_str(key, v)?)?,
            "out" => self.out = PathBuf::from(want_str(key, v)?),
            "rl.hidden" => self.rl.hidden = parse_hidden(key, want_str(key, v)?)?,
            _ => {
                if !self.set_numeric(key, v)? {
                    return Err(HarnessError::UnknownKey(key.to_string()));
                }
            }
        }
        Ok(())
    }

    /// Applies a config document of dotted keys (nested tables are flattened
    /// to the same keys) on top of `self`.
    pub fn apply_toml(&mut self, text: &str) -> Result<(), HarnessError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat)?;
        for (k, v) in &flat {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = RunConfig::default();
        cfg.apply_toml(&text)?;
        Ok(cfg)
    }

    /// The full effective configuration, one `key = value` line per key.
    /// Feeding it back through [`RunConfig::apply_toml`] reproduces `self`.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v.render());
            s.push('\n');
        }
        s
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.total_steps == 0 {
            return Err(HarnessError::Config("steps must be > 0".into()));
        }
        if self.eval_episodes == 0 {
            return Err(HarnessError::Config("eval.episodes must be > 0".into()));
        }
        if !(self.eval_height > 0.0) {
            return Err(HarnessError::Config("eval.height must be > 0".into()));
        }
        self.env.validate()?;
        self.pid.validate().map_err(HarnessError::Config)?;
        self.physics.validate()?;
        self.mechanism.validate()?;
        self.rl.validate()?;
        Ok(())
    }

    pub fn model(&self) -> Result<RoverModel, HarnessError> {
        Ok(RoverModel::new(self.mechanism.clone(), self.physics.clone())?)
    }

    pub fn make_env(&self, mode: SuspensionMode) -> Result<RoverEnv, HarnessError> {
        Ok(RoverEnv::new(self.model()?, self.pid, self.env.clone(), mode)?)
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) -> Result<(), HarnessError> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            toml::Value::Array(_) | toml::Value::Datetime(_) => {
                return Err(HarnessError::Config(format!("{key}: only scalar values are allowed")))
            }
            _ => {
                out.insert(key, v.clone());
            }
        }
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

const CHECKPOINT_CONFIG_MAGIC: &[u8; 8] = b"RVSUSCFG";

/// Checkpoint file: config magic, length-prefixed resolved config, then the
/// agent's own serialization.
pub fn save_checkpoint(path: &Path, cfg: &RunConfig, agent: &Agent) -> Result<(), HarnessError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_CONFIG_MAGIC);
    let text = cfg.resolved();
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    agent.write_to(&mut buf)?;
    write_atomic(path, &buf)
}

/// Returns the agent and the configuration it was trained with.
pub fn load_checkpoint(path: &Path) -> Result<(Agent, RunConfig), HarnessError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut input = BufReader::new(file);
    let bad = |m: &str| HarnessError::BadCheckpoint(format!("{}: {m}", path.display()));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_CONFIG_MAGIC {
        return Err(bad("not a rover checkpoint"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 20 {
        return Err(bad("config block too large"));
    }
    let mut text = vec![0u8; len as usize];
    input.read_exact(&mut text).map_err(|_| bad("truncated config block"))?;
    let text = String::from_utf8(text).map_err(|_| bad("config block is not UTF-8"))?;
    let mut cfg = RunConfig::default();
    cfg.apply_toml(&text)?;
    let agent = Agent::read_from(&mut input, cfg.rl.clone()).map_err(|e| match e {
        RlError::Approx(ApproxError::BadCheckpoint(m)) => bad(&m),
        other => HarnessError::Rl(other),
    })?;
    if agent.algo() != cfg.algo {
        return Err(bad("algorithm tag disagrees with the stored config"));
    }
    Ok((agent, cfg))
}

fn prepare_out(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<fs::File>>, HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn fresh_agent(cfg: &RunConfig) -> Result<Agent, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(Agent::new(cfg.algo, cfg.rl.clone(), &mut rng)?)
}

pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub agent: Agent,
}

/// Trains and writes `config.resolved`, `metrics.csv`, `episodes.csv` and
/// `checkpoint.bin` (plus a copy at `save` if given).
pub fn cmd_train<F: FnMut(&MetricsRow)>(
    cfg: &RunConfig,
    save: Option<&Path>,
    mut on_row: F,
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    prepare_out(&cfg.out)?;
    let resolved = cfg.out.join("config.resolved");
    fs::write(&resolved, cfg.resolved()).map_err(io_err(&resolved))?;

    let mut env = cfg.make_env(cfg.suspension)?;
    let mut agent = fresh_agent(cfg)?;
    let metrics_path = cfg.out.join("metrics.csv");
    let mut w = csv_writer(&metrics_path)?;
    w.write_record(["step", "ep_rew_mean", "ep_len_mean", "actor_loss", "critic_loss", "ent_coef"])?;
    let mut write_err = None;
    let metrics = rl::train(&mut agent, &mut env, cfg.total_steps, cfg.seed, |row| {
        let rec = [
            row.step.to_string(),
            row.ep_rew_mean.to_string(),
            row.ep_len_mean.to_string(),
            row.actor_loss.to_string(),
            row.critic_loss.to_string(),
            row.ent_coef.to_string(),
        ];
        if let Err(e) = w.write_record(&rec).and_then(|_| w.flush().map_err(csv::Error::from)) {
            write_err.get_or_insert(e);
        }
        on_row(row);
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    w.flush().map_err(io_err(&metrics_path))?;

    let episodes_path = cfg.out.join("episodes.csv");
    let mut w = csv_writer(&episodes_path)?;
    w.write_record(["episode", "end_step", "reward", "length"])?;
    for (i, e) in metrics.episodes.iter().enumerate() {
        w.write_record(&[(i + 1).to_string(), e.end_step.to_string(), e.reward.to_string(), e.length.to_string()])?;
    }
    w.flush().map_err(io_err(&episodes_path))?;

    save_checkpoint(&cfg.out.join("checkpoint.bin"), cfg, &agent)?;
    if let Some(p) = save {
        save_checkpoint(p, cfg, &agent)?;
    }
    Ok(TrainOutcome { metrics, agent })
}

/// One noise-free evaluation episode, sampled at agent-step resolution plus
/// the per-tick pitch and velocity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeTrace {
    pub time: Vec<f64>,
    pub pitch: Vec<f64>,
    pub velocity: Vec<f64>,
    pub q3: Vec<f64>,
    pub q4: Vec<f64>,
    pub reward: Vec<f64>,
    pub tick_pitch: Vec<f64>,
    pub tick_velocity: Vec<f64>,
    pub success: bool,
}

impl EpisodeTrace {
    pub fn peak_pitch(&self) -> f64 {
        self.tick_pitch.iter().fold(0.0, |m, p| m.max(p.abs()))
    }

    pub fn mean_velocity(&self) -> f64 {
        mean(&self.tick_velocity)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn run_episode(agent: &Agent, env: &mut RoverEnv, seed: u64, height: f64) -> Result<EpisodeTrace, HarnessError> {
    let mut obs = env.reset_to_height(seed, height)?;
    let interval = env.config().control_interval;
    let mut tr = EpisodeTrace::default();
    loop {
        let r = env.step(&agent.eval_action(&obs))?;
        let s = env.state();
        tr.time.push(env.steps() as f64 * interval);
        tr.pitch.push(s.chassis_pitch.to_degrees());
        tr.velocity.push(s.vel_x);
        tr.q3.push(s.q3.to_degrees());
        tr.q4.push(s.q4.to_degrees());
        tr.reward.push(r.reward);
        tr.tick_pitch.extend(&r.info.pitch_trace);
        tr.tick_velocity.extend(&r.info.velocity_trace);
        obs = r.observation;
        if r.done {
            tr.success = r.info.crossed;
            return Ok(tr);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub successes: usize,
    pub peak_pitch: f64,
    pub mean_velocity: f64,
}

impl EvalSummary {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }
}

/// Evaluates `agent` (or a freshly initialized one when `None`) and writes
/// one `trace_<i>.csv` per episode. Episode `i` resets with seed `seed + i`.
pub fn cmd_eval(cfg: &RunConfig, agent: Option<&Agent>) -> Result<EvalSummary, HarnessError> {
    cfg.validate()?;
    prepare_out(&cfg.out)?;
    let resolved = cfg.out.join("config.resolved");
    fs::write(&resolved, cfg.resolved()).map_err(io_err(&resolved))?;
    let owned;
    let agent = match agent {
        Some(a) => a,
        None => {
            owned = fresh_agent(cfg)?;
            &owned
        }
    };
    let mut env = cfg.make_env(cfg.suspension)?;
    let mut successes = 0;
    let mut peak: f64 = 0.0;
    let mut velocities = Vec::new();
    for i in 0..cfg.eval_episodes {
        let tr = run_episode(agent, &mut env, cfg.seed.wrapping_add(i as u64), cfg.eval_height)?;
        let path = cfg.out.join(format!("trace_{i}.csv"));
        let mut w = csv_writer(&path)?;
        w.write_record(["time", "pitch", "velocity", "q3", "q4", "reward"])?;
        for k in 0..tr.time.len() {
            w.write_record(&[
                tr.time[k].to_string(),
                tr.pitch[k].to_string(),
                tr.velocity[k].to_string(),
                tr.q3[k].to_string(),
                tr.q4[k].to_string(),
                tr.reward[k].to_string(),
            ])?;
        }
        w.flush().map_err(io_err(&path))?;
        successes += tr.success as usize;
        peak = peak.max(tr.peak_pitch());
        velocities.extend(&tr.tick_velocity);
    }
    Ok(EvalSummary { episodes: cfg.eval_episodes, successes, peak_pitch: peak, mean_velocity: mean(&velocities) })
}

/// Aligned per-tick traces of an active and a passive run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Comparison {
    pub time: Vec<f64>,
    pub pitch_active: Vec<f64>,
    pub pitch_passive: Vec<f64>,
    pub vel_active: Vec<f64>,
    pub vel_passive: Vec<f64>,
    /// Time at which each run first satisfied the crossing condition.
    pub crossed_active: Option<f64>,
    pub crossed_passive: Option<f64>,
}

impl Comparison {
    pub fn peak_active(&self) -> f64 {
        self.pitch_active.iter().fold(0.0, |m, p| m.max(p.abs()))
    }

    pub fn peak_passive(&self) -> f64 {
        self.pitch_passive.iter().fold(0.0, |m, p| m.max(p.abs()))
    }

    /// Mean active velocity from the start of the episode until the active
    /// run has crossed (the whole trace if it never does).
    pub fn active_crossing_velocity(&self) -> f64 {
        let end = self.crossed_active.unwrap_or(f64::INFINITY);
        let v: Vec<f64> = self.time.iter().zip(&self.vel_active).filter(|(t, _)| **t <= end).map(|(_, v)| *v).collect();
        mean(&v)
    }

    pub fn passive_min_velocity(&self) -> f64 {
        self.vel_passive.iter().fold(f64::INFINITY, |m, v| m.min(*v))
    }
}

/// Seconds of extra simulation after both runs have crossed.
pub const COMPARE_TAIL: f64 = 1.0;

/// Runs the trained policy on the active rover and zero actuation on the
/// passive rover from the same reset. Both are simulated for the same number
/// of control intervals, without the pitch and yaw failure rules, so their
/// time columns line up: until both have crossed plus [`COMPARE_TAIL`], or
/// `env.max_agent_steps` intervals, whichever comes first.
pub fn compare_runs(cfg: &RunConfig, agent: &Agent) -> Result<Comparison, HarnessError> {
    let mut active = cfg.make_env(SuspensionMode::Active)?;
    let mut passive = cfg.make_env(SuspensionMode::Passive)?;
    let mut obs = active.reset_to_height(cfg.seed, cfg.eval_height)?;
    passive.reset_to_height(cfg.seed, cfg.eval_height)?;
    let dt = cfg.physics.dt;
    let interval = cfg.env.control_interval;
    let tail_steps = (COMPARE_TAIL / interval).ceil() as usize;
    let mut cmp = Comparison::default();
    let mut tick = 0usize;
    let mut since_both = 0usize;
    for step in 1..=cfg.env.max_agent_steps {
        let ia = active.advance(&agent.eval_action(&obs))?;
        let ip = passive.advance(&Action::ZERO)?;
        obs = active.observation();
        for k in 0..ia.pitch_trace.len() {
            tick += 1;
            cmp.time.push(tick as f64 * dt);
            cmp.pitch_active.push(ia.pitch_trace[k]);
            cmp.pitch_passive.push(ip.pitch_trace[k]);
            cmp.vel_active.push(ia.velocity_trace[k]);
            cmp.vel_passive.push(ip.velocity_trace[k]);
        }
        let now = step as f64 * interval;
        if ia.crossed && cmp.crossed_active.is_none() {
            cmp.crossed_active = Some(now);
        }
        if ip.crossed && cmp.crossed_passive.is_none() {
            cmp.crossed_passive = Some(now);
        }
        if cmp.crossed_active.is_some() && cmp.crossed_passive.is_some() {
            since_both += 1;
            if since_both >= tail_steps {
                break;
            }
        }
    }
    Ok(cmp)
}

/// Runs [`compare_runs`] and writes `compare.csv`.
pub fn cmd_compare(cfg: &RunConfig, agent: &Agent) -> Result<Comparison, HarnessError> {
    cfg.validate()?;
    prepare_out(&cfg.out)?;
    let resolved = cfg.out.join("config.resolved");
    fs::write(&resolved, cfg.resolved()).map_err(io_err(&resolved))?;
    let cmp = compare_runs(cfg, agent)?;
    let path = cfg.out.join("compare.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["time", "pitch_active", "pitch_passive", "vel_active", "vel_passive"])?;
    for k in 0..cmp.time.len() {
        w.write_record(&[
            cmp.time[k].to_string(),
            cmp.pitch_active[k].to_string(),
            cmp.pitch_passive[k].to_string(),
            cmp.vel_active[k].to_string(),
            cmp.vel_passive[k].to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(cmp)
}

/// Runs the finite-difference suite; `Err` lists the failing checks.
pub fn cmd_gradcheck(seed: u64, perturb: bool) -> Result<GradcheckReport, (GradcheckReport, HarnessError)> {
    let report = gradcheck::run(seed, perturb);
    if report.all_passed() {
        Ok(report)
    } else {
        let names: Vec<String> = report.failing().iter().map(|c| c.name.clone()).collect();
        let err = HarnessError::Gradcheck(names.join("; "));
        Err((report, err))
    }
}

/// Loads `path` for eval/compare. The checkpoint's network and algorithm
/// settings win; everything else comes from `cfg`.
pub fn agent_for(cfg: &mut RunConfig, path: &Path) -> Result<Agent, HarnessError> {
    let (agent, stored) = load_checkpoint(path)?;
    cfg.algo = stored.algo;
    cfg.rl = stored.rl;
    Ok(agent)
}
