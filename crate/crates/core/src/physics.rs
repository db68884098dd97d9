//! Sagittal-plane rigid-body dynamics of the rover on a single-step terrain.
//!
//! The left and right suspensions are mirrored, so the planar model carries
//! one five-bar whose masses, springs, motor torques and wheel contacts are
//! all counted twice. Generalized coordinates are
//! `[chassis_x, chassis_z, chassis_pitch, q3, q4]`.
//!
//! Kinetic energy uses the mass matrix frozen at the neutral configuration.
//! Conservative forces (gravity on every body, torsion springs, wheel contact
//! springs) enter through a coordinate-increment discrete gradient of the
//! potential, and dissipative forces (contact damping, friction, joint
//! damping) are evaluated at the midpoint velocity. The resulting implicit
//! step changes the total mechanical energy by exactly the work of the
//! dissipative and actuation forces, so an unactuated, undriven rover never
//! gains energy.

use crate::geom::{Pose2, Vec2};
use crate::mechanism::{self, MechanismConfig, MechanismError, MechanismPose};
use nalgebra::{Cholesky, DMatrix, DVector, Matrix5, SMatrix, Vector5};
use thiserror::Error;

pub type GenVec = Vector5<f64>;
type Jacobian = SMatrix<f64, 2, 5>;

/// Mirrored sides collapsed into the plane.
pub const SIDES: f64 = 2.0;
/// Slip speed at which the regularized friction force saturates, m/s.
pub const FRICTION_SLIP_SCALE: f64 = 0.05;
/// Finite-difference step for wheel Jacobians.
pub const JACOBIAN_STEP: f64 = 1e-6;

const NEWTON_MAX_ITERS: usize = 50;
/// Residual tolerances of the implicit step, in momentum units (kg·m/s).
const NEWTON_TOL: f64 = 1e-9;
const NEWTON_ACCEPT: f64 = 1e-6;
/// Deepest interval halving tried before a step is declared failed.
const MAX_SUBDIVISION: u32 = 6;

struct Substep<'a> {
    tau: GenVec,
    drive_speed: f64,
    mode: SuspensionMode,
    profile: &'a TerrainProfile,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("x = {x} m lies outside the world [0, {extent}]")]
    OutOfWorld { x: f64, extent: f64 },
    #[error("numerical blow-up at t = {time:.4} s: {what}")]
    NumericalBlowup { time: f64, what: String },
    #[error("invalid body parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

/// Flat ground with one vertical-faced step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerrainProfile {
    pub step_x: f64,
    pub step_height: f64,
    pub extent: f64,
}

impl TerrainProfile {
    pub fn new(step_x: f64, step_height: f64, extent: f64) -> Self {
        Self { step_x, step_height, extent }
    }

    pub fn corner(&self) -> Vec2 {
        Vec2::new(self.step_x, self.step_height)
    }
}

pub fn terrain_height(profile: &TerrainProfile, x: f64) -> Result<f64, PhysicsError> {
    if !(0.0..=profile.extent).contains(&x) {
        return Err(PhysicsError::OutOfWorld { x, extent: profile.extent });
    }
    Ok(if x < profile.step_x { 0.0 } else { profile.step_height })
}

/// One active contact between a wheel and a terrain feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactPoint {
    /// Penetration depth, > 0.
    pub depth: f64,
    /// Unit normal pointing from the terrain toward the wheel center.
    pub normal: Vec2,
}

impl ContactPoint {
    /// Tangent along which a forward-rolling wheel pushes itself.
    pub fn tangent(&self) -> Vec2 {
        self.normal.perp_cw()
    }
}

/// Penetrations of a wheel against the lower ground, the vertical face
/// (or the convex top corner, treated as a point), and the upper level.
/// A wheel sitting in the concave foot of the step touches two features.
pub fn contact_points(center: Vec2, radius: f64, profile: &TerrainProfile) -> [Option<ContactPoint>; 2] {
    let make = |dist: f64, normal: Vec2| {
        let depth = radius - dist;
        (depth > 0.0).then_some(ContactPoint { depth, normal })
    };
    if center.x < profile.step_x {
        let ground = make(center.z, Vec2::new(0.0, 1.0));
        let face = if center.z <= profile.step_height {
            make(profile.step_x - center.x, Vec2::new(-1.0, 0.0))
        } else {
            let v = center - profile.corner();
            let d = v.norm();
            if d > 0.0 {
                make(d, v * (1.0 / d))
            } else {
                None
            }
        };
        [ground, face]
    } else {
        [make(center.z - profile.step_height, Vec2::new(0.0, 1.0)), None]
    }
}

/// Rigid-body, contact and integrator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams {
    pub chassis_mass: f64,
    pub chassis_inertia: f64,
    pub link1_mass: f64,
    pub link2_mass: f64,
    pub link3_mass: f64,
    pub link4_mass: f64,
    pub wheel_mass: f64,
    /// N/m, per physical wheel.
    pub contact_stiffness: f64,
    /// N·s/m, per physical wheel.
    pub contact_damping: f64,
    pub friction_coeff: f64,
    /// Commanded wheel surface speed, m/s.
    pub drive_speed: f64,
    /// Viscous damping at each control-link joint, N·m·s/rad.
    pub joint_damping: f64,
    pub gravity: f64,
    pub dt: f64,
}

impl Default for BodyParams {
    fn default() -> Self {
        Self {
            chassis_mass: 12.2,
            chassis_inertia: 0.8,
            link1_mass: 0.6,
            link2_mass: 0.6,
            link3_mass: 0.3,
            link4_mass: 0.3,
            wheel_mass: 0.7,
            contact_stiffness: 5e4,
            contact_damping: 1e3,
            friction_coeff: 0.9,
            drive_speed: 0.7,
            joint_damping: 0.5,
            gravity: 9.81,
            dt: 1e-3,
        }
    }
}

impl BodyParams {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let positive = [
            ("chassis_mass", self.chassis_mass),
            ("chassis_inertia", self.chassis_inertia),
            ("link1_mass", self.link1_mass),
            ("link2_mass", self.link2_mass),
            ("link3_mass", self.link3_mass),
            ("link4_mass", self.link4_mass),
            ("wheel_mass", self.wheel_mass),
            ("contact_stiffness", self.contact_stiffness),
            ("contact_damping", self.contact_damping),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PhysicsError::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..=2.0).contains(&self.friction_coeff) {
            return Err(PhysicsError::InvalidParams(format!(
                "friction_coeff must be in [0, 2], got {}",
                self.friction_coeff
            )));
        }
        if !(self.joint_damping >= 0.0 && self.gravity >= 0.0 && self.drive_speed.is_finite()) {
            return Err(PhysicsError::InvalidParams("joint_damping and gravity must be >= 0".into()));
        }
        Ok(())
    }

    /// Mass of the whole rover, both sides included.
    pub fn total_mass(&self) -> f64 {
        self.chassis_mass
            + SIDES
                * (self.link1_mass + self.link2_mass + self.link3_mass + self.link4_mass + 3.0 * self.wheel_mass)
    }
}

/// Force exerted by the terrain on one physical wheel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactForce {
    pub force: Vec2,
    pub in_contact: bool,
}

fn sat(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Penalty contact force on one wheel: spring-damper along each contact
/// normal (never pulling), plus regularized Coulomb friction that servos
/// the wheel surface speed toward `params.drive_speed`.
pub fn contact_force(
    wheel_center: Vec2,
    wheel_radius: f64,
    profile: &TerrainProfile,
    wheel_velocity: Vec2,
    params: &BodyParams,
) -> ContactForce {
    let mut force = Vec2::ZERO;
    let mut in_contact = false;
    for cp in contact_points(wheel_center, wheel_radius, profile).into_iter().flatten() {
        in_contact = true;
        let separating = cp.normal.dot(wheel_velocity);
        let normal =
            (params.contact_stiffness * cp.depth - params.contact_damping * separating).max(0.0);
        let t = cp.tangent();
        let slip = t.dot(wheel_velocity) - params.drive_speed;
        let friction = -params.friction_coeff * normal * sat(slip / FRICTION_SLIP_SCALE);
        force = force + cp.normal * normal + t * friction;
    }
    ContactForce { force, in_contact }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuspensionMode {
    /// Control links driven by joint torques, springs removed.
    Active,
    /// Torsion springs at the control-link joints, no actuation.
    Passive,
}

/// Full simulation state of the rover.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoverState {
    pub chassis_x: f64,
    pub chassis_z: f64,
    pub chassis_pitch: f64,
    pub vel_x: f64,
    pub vel_z: f64,
    pub pitch_rate: f64,
    pub q3: f64,
    pub q4: f64,
    pub q3_rate: f64,
    pub q4_rate: f64,
    /// Held kinematically; only the environment's disturbance injector moves it.
    pub roll: f64,
    pub yaw: f64,
    /// `[front, mid, rear]`
    pub wheel_contact: [bool; 3],
    pub sim_time: f64,
}

impl RoverState {
    pub fn coords(&self) -> GenVec {
        GenVec::new(self.chassis_x, self.chassis_z, self.chassis_pitch, self.q3, self.q4)
    }

    pub fn rates(&self) -> GenVec {
        GenVec::new(self.vel_x, self.vel_z, self.pitch_rate, self.q3_rate, self.q4_rate)
    }

    fn set_coords(&mut self, g: &GenVec, v: &GenVec) {
        self.chassis_x = g[0];
        self.chassis_z = g[1];
        self.chassis_pitch = g[2];
        self.q3 = g[3];
        self.q4 = g[4];
        self.vel_x = v[0];
        self.vel_z = v[1];
        self.pitch_rate = v[2];
        self.q3_rate = v[3];
        self.q4_rate = v[4];
    }

    pub fn chassis_pose(&self) -> Pose2 {
        Pose2::new(self.chassis_x, self.chassis_z, self.chassis_pitch)
    }

    pub fn at_rest(&self, tol: f64) -> bool {
        self.rates().amax() < tol
    }
}

/// Body points carrying mass in the chassis frame, with their masses
/// (both sides). Link masses sit at link midpoints.
fn mass_points(config: &MechanismConfig, params: &BodyParams, pose: &MechanismPose) -> [(Vec2, f64); 7] {
    let half = |a: Vec2, b: Vec2| (a + b) * 0.5;
    [
        (pose.wheel_front, SIDES * params.wheel_mass),
        (pose.wheel_mid, SIDES * params.wheel_mass),
        (pose.wheel_rear, SIDES * params.wheel_mass),
        (half(pose.joint_c, pose.joint_m), SIDES * params.link1_mass),
        (half(pose.joint_d, pose.joint_m), SIDES * params.link2_mass),
        (half(config.chassis_pivot_rear, pose.joint_d), SIDES * params.link3_mass),
        (half(config.chassis_pivot_front, pose.joint_c), SIDES * params.link4_mass),
    ]
}

fn chassis_of(g: &GenVec) -> Pose2 {
    Pose2::new(g[0], g[1], g[2])
}

/// Precomputed rover model: geometry, parameters and the constant mass matrix.
#[derive(Debug, Clone)]
pub struct RoverModel {
    pub config: MechanismConfig,
    pub params: BodyParams,
    mass: Matrix5<f64>,
    mass_inv: Matrix5<f64>,
}

/// Everything the integrator needs about one wheel contact, frozen at the
/// start of the step.
struct FrozenContact {
    jac: Jacobian,
    normal: Vec2,
    tangent: Vec2,
    spring_force: f64,
}

impl RoverModel {
    pub fn new(config: MechanismConfig, params: BodyParams) -> Result<Self, PhysicsError> {
        config.validate()?;
        params.validate()?;
        let mut model = Self { config, params, mass: Matrix5::zeros(), mass_inv: Matrix5::zeros() };
        model.mass = model.neutral_mass_matrix()?;
        model.mass_inv = model
            .mass
            .try_inverse()
            .ok_or_else(|| PhysicsError::InvalidParams("singular mass matrix".into()))?;
        Ok(model)
    }

    pub fn mass_matrix(&self) -> &Matrix5<f64> {
        &self.mass
    }

    fn pose(&self, g: &GenVec) -> Result<MechanismPose, MechanismError> {
        mechanism::solve_unchecked(&self.config, g[3], g[4])
    }

    fn neutral_mass_matrix(&self) -> Result<Matrix5<f64>, PhysicsError> {
        let mut m = Matrix5::zeros();
        m[(0, 0)] = self.params.chassis_mass;
        m[(1, 1)] = self.params.chassis_mass;
        m[(2, 2)] = self.params.chassis_inertia;
        let g0 = GenVec::zeros();
        let h = JACOBIAN_STEP;
        let n_points = 7;
        for k in 0..n_points {
            let mut jac = Jacobian::zeros();
            let mass = self.world_mass_points(&g0)?[k].1;
            for j in 0..5 {
                let mut gp = g0;
                let mut gm = g0;
                gp[j] += h;
                gm[j] -= h;
                let d = (self.world_mass_points(&gp)?[k].0 - self.world_mass_points(&gm)?[k].0) * (0.5 / h);
                jac[(0, j)] = d.x;
                jac[(1, j)] = d.z;
            }
            m += jac.transpose() * jac * mass;
        }
        Ok(m)
    }

    fn world_mass_points(&self, g: &GenVec) -> Result<[(Vec2, f64); 7], MechanismError> {
        let pose = self.pose(g)?;
        let chassis = chassis_of(g);
        Ok(mass_points(&self.config, &self.params, &pose).map(|(p, m)| (chassis.apply(p), m)))
    }

    /// World-frame wheel centers `[front, mid, rear]` for generalized coordinates `g`.
    pub fn wheel_centers(&self, g: &GenVec) -> Result<[Vec2; 3], MechanismError> {
        let pose = self.pose(g)?;
        Ok(mechanism::wheel_positions(&pose, &chassis_of(g)))
    }

    pub fn state_wheels(&self, state: &RoverState) -> Result<[Vec2; 3], MechanismError> {
        self.wheel_centers(&state.coords())
    }

    /// Central-difference Jacobians of the three wheel centers.
    pub fn wheel_jacobians(&self, g: &GenVec, h: f64) -> Result<[Jacobian; 3], MechanismError> {
        let mut jacs = [Jacobian::zeros(); 3];
        for j in 0..5 {
            let mut gp = *g;
            let mut gm = *g;
            gp[j] += h;
            gm[j] -= h;
            let wp = self.wheel_centers(&gp)?;
            let wm = self.wheel_centers(&gm)?;
            for (jac, (a, b)) in jacs.iter_mut().zip(wp.iter().zip(wm.iter())) {
                let d = (*a - *b) * (0.5 / h);
                jac[(0, j)] = d.x;
                jac[(1, j)] = d.z;
            }
        }
        Ok(jacs)
    }

    fn spring_rates(&self, mode: SuspensionMode) -> (f64, f64) {
        match mode {
            SuspensionMode::Passive => (self.config.spring_rate_rear, self.config.spring_rate_front),
            SuspensionMode::Active => (0.0, 0.0),
        }
    }

    /// Gravity + torsion springs + contact springs, J.
    pub fn potential_energy(
        &self,
        g: &GenVec,
        mode: SuspensionMode,
        profile: &TerrainProfile,
    ) -> Result<f64, MechanismError> {
        let pose = self.pose(g)?;
        let chassis = chassis_of(g);
        let p = &self.params;
        let mut u = p.gravity * p.chassis_mass * g[1];
        for (pt, m) in mass_points(&self.config, p, &pose) {
            u += p.gravity * m * chassis.apply(pt).z;
        }
        let (k3, k4) = self.spring_rates(mode);
        let c = &self.config;
        u += SIDES * 0.5 * k3 * (g[3] - c.spring_rest_rear).powi(2);
        u += SIDES * 0.5 * k4 * (g[4] - c.spring_rest_front).powi(2);
        for w in mechanism::wheel_positions(&pose, &chassis) {
            for cp in contact_points(w, c.wheel_radius, profile).into_iter().flatten() {
                u += SIDES * 0.5 * p.contact_stiffness * cp.depth * cp.depth;
            }
        }
        Ok(u)
    }

    pub fn kinetic_energy(&self, v: &GenVec) -> f64 {
        0.5 * v.dot(&(self.mass * v))
    }

    pub fn total_energy(
        &self,
        state: &RoverState,
        mode: SuspensionMode,
        profile: &TerrainProfile,
    ) -> Result<f64, MechanismError> {
        Ok(self.kinetic_energy(&state.rates()) + self.potential_energy(&state.coords(), mode, profile)?)
    }

    /// Coordinate-increment discrete gradient: `grad · (g1 - g0) == U(g1) - U(g0)`.
    fn discrete_gradient(
        &self,
        g0: &GenVec,
        g1: &GenVec,
        u0: f64,
        mode: SuspensionMode,
        profile: &TerrainProfile,
    ) -> Result<GenVec, MechanismError> {
        let mut grad = GenVec::zeros();
        let mut y = *g0;
        let mut u_prev = u0;
        for i in 0..5 {
            let mut next = y;
            next[i] = g1[i];
            let u_next = self.potential_energy(&next, mode, profile)?;
            let dq = g1[i] - g0[i];
            grad[i] = if dq.abs() > 1e-9 {
                (u_next - u_prev) / dq
            } else {
                let h = 1e-7;
                let mut a = y;
                let mut b = y;
                a[i] += h;
                b[i] -= h;
                (self.potential_energy(&a, mode, profile)? - self.potential_energy(&b, mode, profile)?)
                    / (2.0 * h)
            };
            y = next;
            u_prev = u_next;
        }
        Ok(grad)
    }

    /// Advances one `dt` using `self.params.drive_speed`.
    pub fn step_dynamics(
        &self,
        state: &RoverState,
        mode: SuspensionMode,
        joint_torques: (f64, f64),
        profile: &TerrainProfile,
    ) -> Result<RoverState, PhysicsError> {
        self.step_with_drive(state, mode, joint_torques, self.params.drive_speed, profile)
    }

    /// Advances one `dt`. `joint_torques` are `(rear, front)` motor torques
    /// applied on each side; they are ignored in passive mode.
    pub fn step_with_drive(
        &self,
        state: &RoverState,
        mode: SuspensionMode,
        joint_torques: (f64, f64),
        drive_speed: f64,
        profile: &TerrainProfile,
    ) -> Result<RoverState, PhysicsError> {
        let g0 = state.coords();
        let v0 = state.rates();
        let mut tau = GenVec::zeros();
        if mode == SuspensionMode::Active {
            tau[3] = SIDES * joint_torques.0;
            tau[4] = SIDES * joint_torques.1;
        }
        let step = Substep { tau, drive_speed, mode, profile };
        let (g1, v1) = self.integrate(&step, &g0, &v0, self.params.dt, state.sim_time, 0)?;

        let blowup = |what: String| PhysicsError::NumericalBlowup { time: state.sim_time, what };
        if !(g1.iter().all(|x| x.is_finite()) && v1.iter().all(|x| x.is_finite())) {
            return Err(blowup("non-finite coordinates".into()));
        }

        let mut next = *state;
        next.set_coords(&g1, &v1);
        next.sim_time = state.sim_time + self.params.dt;
        let wheels = self.wheel_centers(&g1)?;
        next.wheel_contact = wheels.map(|w| {
            contact_points(w, self.config.wheel_radius, profile).iter().any(Option::is_some)
        });
        Ok(next)
    }

    /// Implicit step over `dt`, halving the interval when Newton fails.
    fn integrate(
        &self,
        step: &Substep,
        g0: &GenVec,
        v0: &GenVec,
        dt: f64,
        time: f64,
        depth: u32,
    ) -> Result<(GenVec, GenVec), PhysicsError> {
        match self.implicit_step(step, g0, v0, dt, time) {
            Err(PhysicsError::NumericalBlowup { .. }) if depth < MAX_SUBDIVISION => {
                let half = 0.5 * dt;
                let (gm, vm) = self.integrate(step, g0, v0, half, time, depth + 1)?;
                self.integrate(step, &gm, &vm, half, time + half, depth + 1)
            }
            other => other,
        }
    }

    fn implicit_step(
        &self,
        step: &Substep,
        g0: &GenVec,
        v0: &GenVec,
        dt: f64,
        time: f64,
    ) -> Result<(GenVec, GenVec), PhysicsError> {
        let p = &self.params;
        let Substep { tau, drive_speed, mode, profile } = *step;
        let (g0, v0) = (*g0, *v0);
        let blowup = |what: String| PhysicsError::NumericalBlowup { time, what };

        let wheels = self.wheel_centers(&g0)?;
        let jacs = self.wheel_jacobians(&g0, JACOBIAN_STEP)?;
        let mut contacts: Vec<FrozenContact> = Vec::with_capacity(4);
        for (w, jac) in wheels.iter().zip(jacs.iter()) {
            for cp in contact_points(*w, self.config.wheel_radius, profile).into_iter().flatten() {
                contacts.push(FrozenContact {
                    jac: *jac,
                    normal: cp.normal,
                    tangent: cp.tangent(),
                    spring_force: p.contact_stiffness * cp.depth,
                });
            }
        }

        // Generalized dissipative force at midpoint velocity `vb`.
        let dissipative = |vb: &GenVec| -> GenVec {
            let mut f = GenVec::zeros();
            for c in &contacts {
                let vel = c.jac * vb;
                let vel = Vec2::new(vel[0], vel[1]);
                let separating = c.normal.dot(vel);
                let damping = (-p.contact_damping * separating).max(-c.spring_force);
                let normal = (c.spring_force + damping).max(0.0);
                let slip = c.tangent.dot(vel) - drive_speed;
                let friction = -p.friction_coeff * normal * sat(slip / FRICTION_SLIP_SCALE);
                let force = c.normal * damping + c.tangent * friction;
                f += c.jac.transpose() * nalgebra::Vector2::new(force.x, force.z) * SIDES;
            }
            f[3] -= SIDES * p.joint_damping * vb[3];
            f[4] -= SIDES * p.joint_damping * vb[4];
            f
        };

        // Newton matrix: mass, spring and joint terms, the damping and friction
        // slopes at the current midpoint velocity, and the contact stiffness of
        // whatever the trial end-of-step pose touches.
        let (k3, k4) = self.spring_rates(mode);
        let mut base = self.mass * 2.0;
        base[(3, 3)] += SIDES * (k3 * dt * dt + p.joint_damping * dt);
        base[(4, 4)] += SIDES * (k4 * dt * dt + p.joint_damping * dt);
        let newton_matrix = |vb: &GenVec, g1: &GenVec| -> Result<Matrix5<f64>, MechanismError> {
            let mut a = base;
            for c in &contacts {
                let vel = c.jac * vb;
                let vel = Vec2::new(vel[0], vel[1]);
                let jn = c.jac.transpose() * nalgebra::Vector2::new(c.normal.x, c.normal.z);
                let jt = c.jac.transpose() * nalgebra::Vector2::new(c.tangent.x, c.tangent.z);
                let separating = c.normal.dot(vel);
                let damping = -p.contact_damping * separating;
                if damping > -c.spring_force {
                    a += jn * jn.transpose() * (SIDES * p.contact_damping * dt);
                }
                let normal = (c.spring_force + damping.max(-c.spring_force)).max(0.0);
                let slip = c.tangent.dot(vel) - drive_speed;
                let slope = p.friction_coeff * normal / slip.abs().max(FRICTION_SLIP_SCALE);
                a += jt * jt.transpose() * (SIDES * slope * dt);
            }
            for (w, jac) in self.wheel_centers(g1)?.iter().zip(jacs.iter()) {
                for cp in contact_points(*w, self.config.wheel_radius, profile).into_iter().flatten() {
                    let jn = jac.transpose() * nalgebra::Vector2::new(cp.normal.x, cp.normal.z);
                    a += jn * jn.transpose() * (SIDES * p.contact_stiffness * dt * dt);
                }
            }
            Ok(a)
        };

        let u0 = self.potential_energy(&g0, mode, profile)?;
        // Joints in `locked` are held at a prescribed midpoint rate; their
        // residual rows carry the stop reaction and are dropped from Newton.
        let solve = |locked: &[(usize, f64)]| -> Result<GenVec, PhysicsError> {
            let pin = |vb: &mut GenVec| {
                for &(i, rate) in locked {
                    vb[i] = rate;
                }
            };
            let residual_at = |vb: &GenVec| -> Result<GenVec, PhysicsError> {
                let g1 = g0 + vb * dt;
                let grad = self.discrete_gradient(&g0, &g1, u0, mode, profile)?;
                let force = -grad + dissipative(vb) + tau;
                let mut r = self.mass * (vb - v0) * 2.0 - force * dt;
                for &(i, _) in locked {
                    r[i] = 0.0;
                }
                Ok(r)
            };
            let mut vb = v0;
            pin(&mut vb);
            let mut residual = residual_at(&vb)?;
            let mut residual_norm = residual.amax();
            for _ in 0..NEWTON_MAX_ITERS {
                if !residual_norm.is_finite() {
                    return Err(blowup("non-finite residual".into()));
                }
                if residual_norm < NEWTON_TOL {
                    break;
                }
                let mut a = newton_matrix(&vb, &(g0 + vb * dt))?;
                for &(i, _) in locked {
                    a.row_mut(i).fill(0.0);
                    a.column_mut(i).fill(0.0);
                    a[(i, i)] = 1.0;
                }
                let chol = Cholesky::new(a).ok_or_else(|| blowup("singular Newton matrix".into()))?;
                let delta = chol.solve(&residual);
                // backtrack until the residual shrinks
                let mut scale = 1.0;
                loop {
                    let trial = vb - delta * scale;
                    let r = residual_at(&trial)?;
                    let n = r.amax();
                    if n < residual_norm || scale < 1e-2 {
                        vb = trial;
                        residual = r;
                        residual_norm = n;
                        break;
                    }
                    scale *= 0.5;
                }
            }
            if residual_norm > NEWTON_ACCEPT {
                return Err(blowup(format!("implicit step did not converge (residual {residual_norm:e})")));
            }
            Ok(vb)
        };

        // Joints that would pass a stop are re-solved landing exactly on it.
        let limit = self.config.joint_limit;
        let mut locked: Vec<(usize, f64)> = Vec::with_capacity(2);
        let mut vb = solve(&locked)?;
        for _ in 0..2 {
            let mut grew = false;
            for i in [3, 4] {
                let end = g0[i] + vb[i] * dt;
                if end.abs() > limit && !locked.iter().any(|&(j, _)| j == i) {
                    locked.push((i, (end.clamp(-limit, limit) - g0[i]) / dt));
                    grew = true;
                }
            }
            if !grew {
                break;
            }
            vb = solve(&locked)?;
        }

        let mut g1 = g0 + vb * dt;
        let v1 = vb * 2.0 - v0;
        let mut stopped = Vec::with_capacity(2);
        for i in [3, 4] {
            if g1[i].abs() >= limit {
                g1[i] = g1[i].clamp(-limit, limit);
                if v1[i] * g1[i] > 0.0 {
                    stopped.push(i);
                }
            }
        }
        if stopped.is_empty() {
            return Ok((g1, v1));
        }
        Ok((g1, self.stop_impulse(&v1, &stopped)))
    }

    /// Zeroes the rates of the `stopped` joints with an impulse acting on
    /// those joints only, so the stop exchanges no momentum with the chassis.
    fn stop_impulse(&self, v: &GenVec, stopped: &[usize]) -> GenVec {
        let n = stopped.len();
        let mut w = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for (a, &i) in stopped.iter().enumerate() {
            rhs[a] = v[i];
            for (b, &j) in stopped.iter().enumerate() {
                w[(a, b)] = self.mass_inv[(i, j)];
            }
        }
        let Some(lambda) = w.lu().solve(&rhs) else { return *v };
        let mut out = *v;
        for (a, &i) in stopped.iter().enumerate() {
            out -= self.mass_inv.column(i) * lambda[a];
        }
        for &i in stopped {
            out[i] = 0.0;
        }
        out
    }

    /// Rover at rest with neutral suspension, pitch 0, wheels resting on
    /// flat ground at their static penetration, chassis at `chassis_x`.
    pub fn resting_state(&self, chassis_x: f64) -> Result<RoverState, PhysicsError> {
        let pose = mechanism::solve_loop_closure(&self.config, 0.0, 0.0)?;
        let lowest = pose.wheels().iter().map(|w| w.z).fold(f64::INFINITY, f64::min);
        let sag = self.params.total_mass() * self.params.gravity
            / (3.0 * SIDES * self.params.contact_stiffness);
        let chassis_z = self.config.wheel_radius - lowest - sag;
        let mut state = RoverState {
            chassis_x,
            chassis_z,
            chassis_pitch: 0.0,
            vel_x: 0.0,
            vel_z: 0.0,
            pitch_rate: 0.0,
            q3: 0.0,
            q4: 0.0,
            q3_rate: 0.0,
            q4_rate: 0.0,
            roll: 0.0,
            yaw: 0.0,
            wheel_contact: [true; 3],
            sim_time: 0.0,
        };
        state.wheel_contact = self.wheel_centers(&state.coords())?.map(|w| w.z < self.config.wheel_radius);
        Ok(state)
    }
}

/// `step_x` minus the leading edge of the foremost wheel. Negative once
/// that edge is past the face.
pub fn distance_to_obstacle(
    model: &RoverModel,
    state: &RoverState,
    profile: &TerrainProfile,
) -> Result<f64, MechanismError> {
    let wheels = model.state_wheels(state)?;
    let front = wheels.iter().map(|w| w.x).fold(f64::NEG_INFINITY, f64::max);
    Ok(profile.step_x - (front + model.config.wheel_radius))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(h: f64) -> TerrainProfile {
        TerrainProfile::new(5.0, h, 10.0)
    }

    #[test]
    fn terrain_is_piecewise_constant() {
        assert_eq!(terrain_height(&profile(0.32), 1.0).unwrap(), 0.0);
        assert_eq!(terrain_height(&profile(0.32), 5.0).unwrap(), 0.32);
        assert_eq!(terrain_height(&profile(0.25), 7.0).unwrap(), 0.25);
        assert!(matches!(terrain_height(&profile(0.25), -0.1), Err(PhysicsError::OutOfWorld { .. })));
        assert!(matches!(terrain_height(&profile(0.25), 10.5), Err(PhysicsError::OutOfWorld { .. })));
    }

    #[test]
    fn no_force_in_the_air() {
        let params = BodyParams::default();
        let f = contact_force(Vec2::new(1.0, 1.1), 0.1, &profile(0.3), Vec2::ZERO, &params);
        assert_eq!(f.force, Vec2::ZERO);
        assert!(!f.in_contact);
    }

    #[test]
    fn static_wheel_carries_its_weight() {
        let params = BodyParams { drive_speed: 0.0, ..BodyParams::default() };
        let weight = 3.0 * 9.81;
        let depth = weight / params.contact_stiffness;
        let f = contact_force(Vec2::new(1.0, 0.1 - depth), 0.1, &profile(0.3), Vec2::ZERO, &params);
        assert!(f.in_contact);
        assert!((f.force.z - weight).abs() < 1e-6);
        assert!(f.force.x.abs() < 1e-12);
    }

    #[test]
    fn face_pushes_back_horizontally() {
        let params = BodyParams { drive_speed: 0.0, ..BodyParams::default() };
        let depth = 0.004;
        // center level with mid-face, well clear of the ground
        let center = Vec2::new(5.0 - 0.1 + depth, 0.15);
        let f = contact_force(center, 0.1, &profile(0.3), Vec2::ZERO, &params);
        assert!((f.force.x + params.contact_stiffness * depth).abs() < 1e-9);
        assert!(f.force.z.abs() < 1e-12);
    }

    #[test]
    fn corner_normal_points_from_corner_to_center() {
        let prof = profile(0.3);
        let center = Vec2::new(4.95, 0.36);
        let cps = contact_points(center, 0.1, &prof);
        let cp = cps[1].expect("corner contact");
        let v = center - prof.corner();
        assert!((cp.depth - (0.1 - v.norm())).abs() < 1e-15);
        assert!((cp.normal.x - v.x / v.norm()).abs() < 1e-15);
    }

    #[test]
    fn drive_pulls_wheel_forward_and_up_the_face() {
        let params = BodyParams::default();
        let ground = contact_force(Vec2::new(1.0, 0.099), 0.1, &profile(0.3), Vec2::ZERO, &params);
        assert!(ground.force.x > 0.0);
        let face = contact_force(Vec2::new(4.901, 0.15), 0.1, &profile(0.3), Vec2::ZERO, &params);
        assert!(face.force.z > 0.0 && face.force.x < 0.0);
    }

    #[test]
    fn distance_uses_leading_edge() {
        let model = RoverModel::new(MechanismConfig::default(), BodyParams::default()).unwrap();
        let mut state = model.resting_state(0.0).unwrap();
        let front = model.state_wheels(&state).unwrap()[0].x + 0.1;
        let prof = TerrainProfile::new(front, 0.3, 10.0);
        assert!(distance_to_obstacle(&model, &state, &prof).unwrap().abs() < 1e-12);
        state.chassis_x -= 1.3;
        assert!((distance_to_obstacle(&model, &state, &prof).unwrap() - 1.3).abs() < 1e-12);
    }

    #[test]
    fn mass_matrix_is_symmetric_positive_definite() {
        let model = RoverModel::new(MechanismConfig::default(), BodyParams::default()).unwrap();
        let m = model.mass_matrix();
        assert!((m - m.transpose()).amax() < 1e-9);
        assert!(Cholesky::new(*m).is_some());
        assert!((m[(0, 0)] - model.params.total_mass()).abs() < 1e-9);
    }
}
