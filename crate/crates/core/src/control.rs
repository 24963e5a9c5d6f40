//! Ego longitudinal control: a piecewise-linear target-speed law over the
//! distances to perceived road users, a proportional acceleration command, and
//! third-order (jerk-limited, first-order-lag) vehicle dynamics with AEB
//! deceleration and jerk limits.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Which acceleration command to derive from the target speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccelLaw {
    /// `a* = k (v* - v)`.
    SpeedError,
    /// `a* = k v*`, kept for comparison; it never commands braking.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub cruise_speed: f64,
    /// Control gain, 1/s.
    pub gain: f64,
    /// Powertrain time constant, s.
    pub tau: f64,
    pub brake_max: f64,
    pub jerk_max: f64,
    pub accel_max: f64,
    pub control_period: f64,
    pub accel_law: AccelLaw,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            cruise_speed: 5.0,
            gain: 2.0,
            tau: 0.2,
            brake_max: 10.5,
            jerk_max: 20.0,
            accel_max: 3.0,
            control_period: 0.05,
            accel_law: AccelLaw::SpeedError,
        }
    }
}

impl ControlConfig {
    pub fn with_cruise_speed(v_c: f64) -> Self {
        Self {
            cruise_speed: v_c,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let positive = [
            ("cruise_speed", self.cruise_speed),
            ("gain", self.gain),
            ("tau", self.tau),
            ("brake_max", self.brake_max),
            ("jerk_max", self.jerk_max),
            ("accel_max", self.accel_max),
            ("control_period", self.control_period),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(crate::Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    /// Distance travelled along the path, m.
    pub position: f64,
    pub speed: f64,
    pub accel: f64,
}

impl VehicleState {
    pub fn cruising(speed: f64) -> Self {
        Self {
            position: 0.0,
            speed,
            accel: 0.0,
        }
    }
}

/// Distances from the ego to one perceived road user: along the path from the
/// front bumper, and across it from the ego centerline, both to the nearest
/// point of the object's footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectGap {
    pub longitudinal: f64,
    pub lateral: f64,
}

/// Fraction of the cruise speed allowed by one object.
pub fn speed_factor(gap: &ObjectGap) -> f64 {
    let (dl, dh) = (gap.longitudinal, gap.lateral.abs());
    if dl < 0.0 {
        return 1.0;
    }
    if dh <= 2.5 {
        ((dl - 3.0) / 9.0).clamp(0.0, 1.0)
    } else if dh <= 6.0 {
        ((dl - 1.0) / 6.0).clamp(0.5, 1.0)
    } else {
        1.0
    }
}

/// Target speed under the most restrictive object; `v_c` when none.
pub fn target_speed(gaps: &[ObjectGap], v_c: f64) -> f64 {
    v_c * gaps.iter().map(speed_factor).fold(1.0, f64::min)
}

pub fn target_accel(v_star: f64, state: &VehicleState, cfg: &ControlConfig) -> f64 {
    let raw = match cfg.accel_law {
        AccelLaw::SpeedError => cfg.gain * (v_star - state.speed),
        AccelLaw::Literal => cfg.gain * v_star,
    };
    raw.clamp(-cfg.brake_max, cfg.accel_max)
}

/// Jerk the actuator applies for a command, before integration.
pub fn commanded_jerk(state: &VehicleState, a_star: f64, cfg: &ControlConfig) -> f64 {
    ((a_star - state.accel) / cfg.tau).clamp(-cfg.jerk_max, cfg.jerk_max)
}

/// One step of the jerk-limited lag model. Speed and position integrate the
/// step-averaged acceleration and speed (trapezoidal).
pub fn step_dynamics(state: &VehicleState, a_star: f64, cfg: &ControlConfig, dt: f64) -> VehicleState {
    let jerk = commanded_jerk(state, a_star, cfg);
    let mut accel = (state.accel + jerk * dt).clamp(-cfg.brake_max, cfg.accel_max);
    let speed = (state.speed + 0.5 * (state.accel + accel) * dt).max(0.0);
    let position = state.position + 0.5 * (state.speed + speed) * dt;
    if speed == 0.0 && accel < 0.0 {
        // Standstill: brakes hold, no further deceleration.
        accel = 0.0;
    }
    VehicleState {
        position,
        speed,
        accel,
    }
}

/// Sample the target-speed field over `[0, max_longitudinal] x [0, max_lateral]`
/// as CSV (`dx_l,dx_h,factor,v_star`), longitudinal-major.
pub fn heatmap_csv(v_c: f64, max_longitudinal: f64, max_lateral: f64, step: f64) -> String {
    let mut out = String::from("dx_l,dx_h,factor,v_star\n");
    let nl = (max_longitudinal / step).round() as usize;
    let nh = (max_lateral / step).round() as usize;
    for i in 0..=nl {
        let dl = i as f64 * step;
        for j in 0..=nh {
            let dh = j as f64 * step;
            let f = speed_factor(&ObjectGap {
                longitudinal: dl,
                lateral: dh,
            });
            let _ = writeln!(out, "{dl},{dh},{f},{}", f * v_c);
        }
    }
    out
}
