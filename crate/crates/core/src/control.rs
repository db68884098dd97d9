//! PID position control of the control-link joints.

/// Gains and limits of one joint controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidGains {
    /// N·m/rad
    pub kp: f64,
    /// N·m/(rad·s)
    pub ki: f64,
    /// N·m·s/rad
    pub kd: f64,
    /// rad·s
    pub integral_limit: f64,
    /// N·m
    pub torque_limit: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self { kp: 60.0, ki: 5.0, kd: 2.0, integral_limit: 0.5, torque_limit: 40.0 }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.kp >= 0.0 && self.ki >= 0.0 && self.kd >= 0.0) {
            return Err(format!("PID gains must be >= 0: {self:?}"));
        }
        if !(self.integral_limit > 0.0 && self.torque_limit > 0.0) {
            return Err(format!("PID limits must be > 0: {self:?}"));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { kp: self.kp * k, ki: self.ki * k, kd: self.kd * k, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
    pub initialized: bool,
}

/// One controller update. Derivative acts on the error and is zero on the
/// first call; the integral is clamped (anti-windup) and the output saturated.
pub fn pid_step(gains: &PidGains, state: &PidState, setpoint: f64, measured: f64, dt: f64) -> (f64, PidState) {
    debug_assert!(dt > 0.0);
    let error = setpoint - measured;
    let integral = (state.integral + error * dt).clamp(-gains.integral_limit, gains.integral_limit);
    let derivative = if state.initialized { (error - state.prev_error) / dt } else { 0.0 };
    let torque = (gains.kp * error + gains.ki * integral + gains.kd * derivative)
        .clamp(-gains.torque_limit, gains.torque_limit);
    (torque, PidState { integral, prev_error: error, initialized: true })
}

/// The two control-link controllers of the planar model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointControllers {
    pub rear: PidState,
    pub front: PidState,
}

impl JointControllers {
    /// Returns `(rear, front)` torques for the given targets and measured angles.
    pub fn update(
        &mut self,
        gains: &PidGains,
        targets: (f64, f64),
        measured: (f64, f64),
        dt: f64,
    ) -> (f64, f64) {
        let (tr, rear) = pid_step(gains, &self.rear, targets.0, measured.0, dt);
        let (tf, front) = pid_step(gains, &self.front, targets.1, measured.1, dt);
        self.rear = rear;
        self.front = front;
        (tr, tf)
    }
}
