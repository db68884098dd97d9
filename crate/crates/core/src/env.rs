//! Episodic step-climbing environment: observation construction, action
//! scaling, the terminal reward rule and the episode lifecycle.

use crate::control::{JointControllers, PidGains};
use crate::mechanism::JOINT_LIMIT_RAD;
use crate::physics::{
    distance_to_obstacle, PhysicsError, RoverModel, RoverState, SuspensionMode, TerrainProfile,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Bound applied to every observation component.
pub const OBS_BOUND: f64 = 50.0;
pub const OBS_DIM: usize = 4;
pub const ACT_DIM: usize = 4;

pub const REWARD_FAIL: f64 = -100.0;
pub const REWARD_TIMEOUT: f64 = -50.0;
pub const REWARD_CROSSED: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("step called on a finished episode; call reset first")]
    EpisodeFinished,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

impl From<crate::mechanism::MechanismError> for EnvError {
    fn from(e: crate::mechanism::MechanismError) -> Self {
        EnvError::Physics(e.into())
    }
}

/// `[pitch (deg), roll (deg), distance (m), height (m)]`, each clipped to ±50.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn new(pitch_deg: f64, roll_deg: f64, distance: f64, height: f64) -> Self {
        Self([pitch_deg, roll_deg, distance, height].map(|v| v.clamp(-OBS_BOUND, OBS_BOUND)))
    }

    pub fn pitch(&self) -> f64 {
        self.0[0]
    }
    pub fn roll(&self) -> f64 {
        self.0[1]
    }
    pub fn distance(&self) -> f64 {
        self.0[2]
    }
    pub fn height(&self) -> f64 {
        self.0[3]
    }
}

/// `[a0, a1, a2, a3]` in [-1, 1]: a0/a1 drive the middle and rear pair,
/// a2/a3 the pair meeting the obstacle first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action(pub [f64; ACT_DIM]);

impl Action {
    pub const ZERO: Action = Action([0.0; ACT_DIM]);

    pub fn clipped(&self) -> Action {
        Action(self.0.map(|a| if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) }))
    }
}

/// Maps an action to `(front_target, rear_target)` joint angles in radians.
pub fn scale_action(a: &Action) -> (f64, f64) {
    let [a0, a1, a2, a3] = a.0;
    (0.5 * (a2 + a3) * JOINT_LIMIT_RAD, 0.5 * (a0 + a1) * JOINT_LIMIT_RAD)
}

/// Terminal reward rule, branches checked in order: tilt, heading,
/// crossing, timeout.
pub fn compute_reward(pitch_deg: f64, yaw_deg: f64, crossed: bool, steps: usize, cfg: &EpisodeConfig) -> (f64, bool) {
    if pitch_deg.abs() > cfg.pitch_fail_deg {
        (REWARD_FAIL, true)
    } else if yaw_deg.abs() > cfg.yaw_fail_deg {
        (REWARD_FAIL, true)
    } else if crossed {
        (REWARD_CROSSED, true)
    } else if steps > cfg.max_agent_steps {
        (REWARD_TIMEOUT, true)
    } else {
        (0.0, false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    /// Obstacle heights are drawn uniformly from this range, m.
    pub height_range: (f64, f64),
    pub max_agent_steps: usize,
    pub pitch_fail_deg: f64,
    pub yaw_fail_deg: f64,
    /// Distance at which the agent takes over, m.
    pub threshold_distance: f64,
    /// Simulated time per agent step, s.
    pub control_interval: f64,
    pub crossing_margin: f64,
    pub disturbance_enabled: bool,
    /// Peak roll/yaw disturbance, degrees.
    pub disturbance_amplitude: f64,
    /// World x of the step face.
    pub step_x: f64,
    pub world_extent: f64,
    /// Extra run-up before the threshold distance, m.
    pub start_gap: f64,
    /// Longest settling phase before the approach, s.
    pub settle_time: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            height_range: (0.25, 0.32),
            max_agent_steps: 430,
            pitch_fail_deg: 20.0,
            yaw_fail_deg: 10.0,
            threshold_distance: 1.0,
            control_interval: 0.05,
            crossing_margin: 0.05,
            disturbance_enabled: false,
            disturbance_amplitude: 2.0,
            step_x: 4.0,
            world_extent: 12.0,
            start_gap: 0.5,
            settle_time: 2.0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let (lo, hi) = self.height_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(EnvError::InvalidConfig(format!("bad height_range {:?}", self.height_range)));
        }
        if !(self.threshold_distance > 0.0 && self.control_interval > 0.0 && self.crossing_margin >= 0.0) {
            return Err(EnvError::InvalidConfig(
                "threshold_distance and control_interval must be > 0, crossing_margin >= 0".into(),
            ));
        }
        if self.max_agent_steps == 0 {
            return Err(EnvError::InvalidConfig("max_agent_steps must be > 0".into()));
        }
        if !(self.disturbance_amplitude >= 0.0) {
            return Err(EnvError::InvalidConfig("disturbance_amplitude must be >= 0".into()));
        }
        if !(self.step_x > self.threshold_distance + self.start_gap + 2.0 && self.world_extent > self.step_x + 2.0) {
            return Err(EnvError::InvalidConfig("world too short for the approach or the climb".into()));
        }
        Ok(())
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepInfo {
    pub sim_time: f64,
    pub crossed: bool,
    /// Chassis pitch per physics tick, degrees.
    pub pitch_trace: Vec<f64>,
    /// Chassis forward velocity per physics tick, m/s.
    pub velocity_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

fn draw_height(cfg: &EpisodeConfig, rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = cfg.height_range;
    if hi > lo { rng.random_range(lo..=hi) } else { lo }
}

/// The obstacle height `RoverEnv::reset(seed)` will use.
pub fn sample_height(cfg: &EpisodeConfig, seed: u64) -> f64 {
    draw_height(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub struct RoverEnv {
    model: RoverModel,
    gains: PidGains,
    cfg: EpisodeConfig,
    mode: SuspensionMode,
    state: RoverState,
    profile: TerrainProfile,
    pid: JointControllers,
    rng: ChaCha8Rng,
    steps: usize,
    done: bool,
    obs: Observation,
}

impl RoverEnv {
    pub fn new(model: RoverModel, gains: PidGains, cfg: EpisodeConfig, mode: SuspensionMode) -> Result<Self, EnvError> {
        cfg.validate()?;
        gains.validate().map_err(EnvError::InvalidConfig)?;
        let profile = TerrainProfile::new(cfg.step_x, cfg.height_range.0, cfg.world_extent);
        let state = model.resting_state(1.0)?;
        Ok(Self {
            model,
            gains,
            cfg,
            mode,
            state,
            profile,
            pid: JointControllers::default(),
            rng: ChaCha8Rng::seed_from_u64(0),
            steps: 0,
            done: true,
            obs: Observation([0.0; OBS_DIM]),
        })
    }

    pub fn model(&self) -> &RoverModel {
        &self.model
    }
    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }
    pub fn mode(&self) -> SuspensionMode {
        self.mode
    }
    pub fn state(&self) -> &RoverState {
        &self.state
    }
    pub fn profile(&self) -> &TerrainProfile {
        &self.profile
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn is_done(&self) -> bool {
        self.done
    }
    pub fn observation(&self) -> Observation {
        self.obs
    }

    /// Starts an episode on a freshly drawn obstacle height.
    pub fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let height = draw_height(&self.cfg, &mut rng);
        self.reset_with_height(height, rng)
    }

    /// Starts an episode at a fixed obstacle height.
    pub fn reset_to_height(&mut self, seed: u64, height: f64) -> Result<Observation, EnvError> {
        self.reset_with_height(height, ChaCha8Rng::seed_from_u64(seed))
    }

    fn reset_with_height(&mut self, height: f64, rng: ChaCha8Rng) -> Result<Observation, EnvError> {
        self.rng = rng;
        self.profile = TerrainProfile::new(self.cfg.step_x, height, self.cfg.world_extent);
        self.pid = JointControllers::default();
        self.steps = 0;

        // Place the rover so its leading edge is start_gap behind the trigger.
        let mut state = self.model.resting_state(0.0)?;
        let d0 = distance_to_obstacle(&self.model, &state, &self.profile)?;
        state.chassis_x += d0 - (self.cfg.threshold_distance + self.cfg.start_gap);

        let dt = self.model.params.dt;
        let settle_ticks = (self.cfg.settle_time / dt).round() as usize;
        for _ in 0..settle_ticks {
            state = self.tick(&state, (0.0, 0.0), 0.0)?;
            if state.at_rest(1e-3) {
                break;
            }
        }
        let drive = self.model.params.drive_speed;
        let max_approach = ((self.cfg.threshold_distance + self.cfg.start_gap) * 20.0 / drive.max(0.05) / dt) as usize;
        for _ in 0..max_approach {
            if distance_to_obstacle(&self.model, &state, &self.profile)? <= self.cfg.threshold_distance {
                break;
            }
            state = self.tick(&state, (0.0, 0.0), drive)?;
        }
        state.sim_time = 0.0;
        self.state = state;
        self.apply_disturbance();
        self.done = false;
        self.obs = self.build_observation()?;
        Ok(self.obs)
    }

    /// One physics tick with PID torques recomputed for `targets` = `(rear, front)`.
    fn tick(&mut self, state: &RoverState, targets: (f64, f64), drive: f64) -> Result<RoverState, EnvError> {
        let dt = self.model.params.dt;
        let torques = match self.mode {
            SuspensionMode::Active => self.pid.update(&self.gains, targets, (state.q3, state.q4), dt),
            SuspensionMode::Passive => (0.0, 0.0),
        };
        Ok(self.model.step_with_drive(state, self.mode, torques, drive, &self.profile)?)
    }

    fn apply_disturbance(&mut self) {
        if self.cfg.disturbance_enabled && self.cfg.disturbance_amplitude > 0.0 {
            let amp = self.cfg.disturbance_amplitude.to_radians();
            self.state.roll = self.rng.random_range(-amp..=amp);
            self.state.yaw = self.rng.random_range(-amp..=amp);
        } else {
            self.state.roll = 0.0;
            self.state.yaw = 0.0;
        }
    }

    fn build_observation(&self) -> Result<Observation, EnvError> {
        Ok(Observation::new(
            self.state.chassis_pitch.to_degrees(),
            self.state.roll.to_degrees(),
            distance_to_obstacle(&self.model, &self.state, &self.profile)?,
            self.profile.step_height,
        ))
    }

    /// True once the rear wheel's trailing edge has cleared the face by the
    /// margin with every wheel resting on the upper level.
    pub fn crossed(&self) -> Result<bool, EnvError> {
        let wheels = self.model.state_wheels(&self.state)?;
        let r = self.model.config.wheel_radius;
        let rear = wheels.iter().map(|w| w.x).fold(f64::INFINITY, f64::min);
        let upper = wheels.iter().all(|w| w.x > self.profile.step_x);
        let contact = self.state.wheel_contact.iter().all(|&c| c);
        Ok(rear - r > self.profile.step_x + self.cfg.crossing_margin && upper && contact)
    }

    /// Runs one control interval without touching the episode bookkeeping.
    pub fn advance(&mut self, action: &Action) -> Result<StepInfo, EnvError> {
        let (front, rear) = scale_action(&action.clipped());
        let dt = self.model.params.dt;
        let ticks = ((self.cfg.control_interval / dt).round() as usize).max(1);
        let drive = self.model.params.drive_speed;
        let mut info = StepInfo {
            pitch_trace: Vec::with_capacity(ticks),
            velocity_trace: Vec::with_capacity(ticks),
            ..StepInfo::default()
        };
        let mut state = self.state;
        for _ in 0..ticks {
            state = self.tick(&state, (rear, front), drive)?;
            info.pitch_trace.push(state.chassis_pitch.to_degrees());
            info.velocity_trace.push(state.vel_x);
        }
        self.state = state;
        self.apply_disturbance();
        self.obs = self.build_observation()?;
        info.sim_time = self.state.sim_time;
        info.crossed = self.crossed()?;
        Ok(info)
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let info = self.advance(action)?;
        self.steps += 1;
        let (reward, done) = compute_reward(
            self.state.chassis_pitch.to_degrees(),
            self.state.yaw.to_degrees(),
            info.crossed,
            self.steps,
            &self.cfg,
        );
        self.done = done;
        Ok(StepResult { observation: self.obs, reward, done, info })
    }

    /// Overwrites the simulation state; used by fixtures that need to place
    /// the rover in a particular configuration.
    pub fn set_state(&mut self, state: RoverState) -> Result<(), EnvError> {
        self.state = state;
        self.obs = self.build_observation()?;
        Ok(())
    }
}
