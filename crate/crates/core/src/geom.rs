//! Minimal planar vector type used by the kinematics and contact code.

use std::ops::{Add, Mul, Neg, Sub};

/// A point or vector in the sagittal plane: `x` forward, `z` up, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub z: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, z: 0.0 };

    pub const fn new(x: f64, z: f64) -> Self {
        Self { x, z }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.z)
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        Vec2::new(self.x / n, self.z / n)
    }

    /// Rotated by +90° (counterclockwise).
    pub fn perp_ccw(self) -> Vec2 {
        Vec2::new(-self.z, self.x)
    }

    /// Rotated by -90° (clockwise).
    pub fn perp_cw(self) -> Vec2 {
        Vec2::new(self.z, -self.x)
    }

    pub fn rotated(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.z, s * self.x + c * self.z)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.z + rhs.z)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.z - rhs.z)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.z)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.z * k)
    }
}

/// Planar rigid transform of the chassis frame into the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose2 {
    pub x: f64,
    pub z: f64,
    /// Rotation, positive counterclockwise (nose up).
    pub pitch: f64,
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 { x: 0.0, z: 0.0, pitch: 0.0 };

    pub fn new(x: f64, z: f64, pitch: f64) -> Self {
        Self { x, z, pitch }
    }

    pub fn apply(&self, p: Vec2) -> Vec2 {
        p.rotated(self.pitch) + Vec2::new(self.x, self.z)
    }
}
