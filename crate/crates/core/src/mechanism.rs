//! Closed-form kinematics and torsion-spring statics of one side of the
//! five-bar suspension.
//!
//! Frame: chassis frame, `x` forward, `z` up, origin at the chassis center
//! of mass. Control-link angles are measured from the downward vertical,
//! positive counterclockwise, so a positive front angle swings joint C
//! forward.
//!
//! Link numbering follows the usual diagram of the mechanism: links 1 and 2
//! are the wheel-carrying bogies meeting at the middle joint M, link 4 is
//! the front control link (chassis to C), link 3 the rear control link
//! (chassis to D), and the chassis itself is link 5.

use crate::geom::{Pose2, Vec2};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("mechanism cannot close: |C-D| = {separation:.6} m outside [{min:.6}, {max:.6}]")]
    Unreachable { separation: f64, min: f64, max: f64 },
    #[error("control-link angle {angle:.6} rad exceeds limit {limit:.6} rad")]
    JointLimit { angle: f64, limit: f64 },
    #[error("invalid mechanism config: {0}")]
    InvalidConfig(String),
}

/// Geometry, springs and joint limits of the suspension.
///
/// The outer wheel hubs sit on rigid extensions of the bogie links. The
/// extension is described in the link's own frame: `ext_link*` runs along
/// the link (positive away from M) and `drop_link*` runs perpendicular to it,
/// toward the ground side. With `drop = 0` the hub lies on the straight
/// continuation of the link. The defaults put all three wheel centers at the
/// same height when both control links hang vertically.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanismConfig {
    pub chassis_pivot_front: Vec2,
    pub chassis_pivot_rear: Vec2,
    pub len_link1: f64,
    pub len_link2: f64,
    pub len_link3: f64,
    pub len_link4: f64,
    pub ext_link1: f64,
    pub ext_link2: f64,
    pub drop_link1: f64,
    pub drop_link2: f64,
    pub wheel_radius: f64,
    /// N·m/rad
    pub spring_rate_front: f64,
    pub spring_rate_rear: f64,
    pub spring_rest_front: f64,
    pub spring_rest_rear: f64,
    pub joint_limit: f64,
}

/// 37 degrees, the largest commanded control-link deflection.
pub const JOINT_LIMIT_RAD: f64 = 37.0 * std::f64::consts::PI / 180.0;

/// Converts a torsion-spring rate quoted in N·mm/deg to N·m/rad.
pub fn spring_rate_from_nmm_per_deg(rate: f64) -> f64 {
    rate * 1e-3 * 180.0 / std::f64::consts::PI
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            chassis_pivot_front: Vec2::new(0.35, 0.0),
            chassis_pivot_rear: Vec2::new(-0.35, 0.0),
            len_link1: 0.56,
            len_link2: 0.56,
            len_link3: 0.28,
            len_link4: 0.28,
            ext_link1: -0.1222,
            ext_link2: -0.1222,
            drop_link1: 0.5467,
            drop_link2: 0.5467,
            wheel_radius: 0.10,
            spring_rate_front: 30.0,
            spring_rate_rear: 30.0,
            spring_rest_front: 0.0,
            spring_rest_rear: 0.0,
            joint_limit: JOINT_LIMIT_RAD,
        }
    }
}

impl MechanismConfig {
    pub fn validate(&self) -> Result<(), MechanismError> {
        let lengths = [
            ("len_link1", self.len_link1),
            ("len_link2", self.len_link2),
            ("len_link3", self.len_link3),
            ("len_link4", self.len_link4),
            ("wheel_radius", self.wheel_radius),
        ];
        for (name, v) in lengths {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MechanismError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("ext_link1", self.ext_link1),
            ("ext_link2", self.ext_link2),
            ("drop_link1", self.drop_link1),
            ("drop_link2", self.drop_link2),
        ] {
            if !v.is_finite() {
                return Err(MechanismError::InvalidConfig(format!("{name} must be finite")));
            }
        }
        for (name, v) in [
            ("spring_rate_front", self.spring_rate_front),
            ("spring_rate_rear", self.spring_rate_rear),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MechanismError::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.joint_limit > 0.0 && self.joint_limit < std::f64::consts::FRAC_PI_2) {
            return Err(MechanismError::InvalidConfig(format!(
                "joint_limit must be in (0, pi/2), got {}",
                self.joint_limit
            )));
        }
        Ok(())
    }

    /// Lower end of the front control link (joint C) for angle `q4`.
    pub fn joint_c(&self, q4: f64) -> Vec2 {
        self.chassis_pivot_front + Vec2::new(q4.sin(), -q4.cos()) * self.len_link4
    }

    /// Lower end of the rear control link (joint D) for angle `q3`.
    pub fn joint_d(&self, q3: f64) -> Vec2 {
        self.chassis_pivot_rear + Vec2::new(q3.sin(), -q3.cos()) * self.len_link3
    }

    pub fn max_link_length(&self) -> f64 {
        [self.len_link1, self.len_link2, self.len_link3, self.len_link4]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Solved configuration of one side of the suspension, chassis frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechanismPose {
    pub q3: f64,
    pub q4: f64,
    /// Orientation of link 1, direction M -> C.
    pub theta1: f64,
    /// Orientation of link 2, direction M -> D.
    pub theta2: f64,
    pub joint_c: Vec2,
    pub joint_d: Vec2,
    pub joint_m: Vec2,
    pub wheel_front: Vec2,
    pub wheel_mid: Vec2,
    pub wheel_rear: Vec2,
}

impl MechanismPose {
    pub fn wheels(&self) -> [Vec2; 3] {
        [self.wheel_front, self.wheel_mid, self.wheel_rear]
    }
}

/// Solves the loop closure for the given control-link angles, keeping the
/// knee-down branch (M below the C-D segment).
pub fn solve_loop_closure(
    config: &MechanismConfig,
    q3: f64,
    q4: f64,
) -> Result<MechanismPose, MechanismError> {
    for q in [q3, q4] {
        if !(q.abs() <= config.joint_limit) {
            return Err(MechanismError::JointLimit { angle: q, limit: config.joint_limit });
        }
    }
    solve_unchecked(config, q3, q4)
}

/// Loop closure without the joint-limit precondition. The integrator uses
/// this for trial states that may sit marginally past a stop before the
/// clamp is applied.
pub(crate) fn solve_unchecked(
    config: &MechanismConfig,
    q3: f64,
    q4: f64,
) -> Result<MechanismPose, MechanismError> {
    let c = config.joint_c(q4);
    let d = config.joint_d(q3);
    let (l1, l2) = (config.len_link1, config.len_link2);

    let cd = d - c;
    let sep = cd.norm();
    let (min, max) = ((l1 - l2).abs(), l1 + l2);
    if !(sep <= max && sep >= min) || sep == 0.0 {
        return Err(MechanismError::Unreachable { separation: sep, min, max });
    }
    let along = (l1 * l1 - l2 * l2 + sep * sep) / (2.0 * sep);
    let h = (l1 * l1 - along * along).max(0.0).sqrt();
    let e = cd * (1.0 / sep);
    // D sits behind C, so the counterclockwise normal of C->D points down.
    let m = c + e * along + e.perp_ccw() * h;

    let u1 = (c - m) * (1.0 / l1);
    let u2 = (d - m) * (1.0 / l2);
    let wheel_front = c + u1 * config.ext_link1 + u1.perp_cw() * config.drop_link1;
    let wheel_rear = d + u2 * config.ext_link2 + u2.perp_ccw() * config.drop_link2;

    Ok(MechanismPose {
        q3,
        q4,
        theta1: u1.z.atan2(u1.x),
        theta2: u2.z.atan2(u2.x),
        joint_c: c,
        joint_d: d,
        joint_m: m,
        wheel_front,
        wheel_mid: m,
        wheel_rear,
    })
}

/// Wheel centers `[front, mid, rear]` in the world frame.
pub fn wheel_positions(pose: &MechanismPose, chassis_pose: &Pose2) -> [Vec2; 3] {
    pose.wheels().map(|w| chassis_pose.apply(w))
}

/// Restoring torque of a linear torsion spring.
pub fn passive_spring_torque(rate: f64, rest: f64, angle: f64) -> f64 {
    -rate * (angle - rest)
}
