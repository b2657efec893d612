//! Tracking reward and the MSE evaluation metric.
//!
//! The per-step reward penalizes squared angle error (scaled by alpha),
//! moving against the target direction (1/beta per joint), and pressure
//! effort (scaled by gamma). It is never positive; a perfect, unpressurized
//! track scores exactly zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("reward parameter {0} must be strictly positive, got {1}")]
    BadParam(&'static str, f64),
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RewardParams {
    /// Angle-error scale, deg.
    pub alpha: f64,
    /// Wrong-direction penalty divisor.
    pub beta: f64,
    /// Pressure-effort scale, kPa.
    pub gamma: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams { alpha: 40.0, beta: 1000.0, gamma: 50_000.0 }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(RewardError::BadParam(
                    match name {
                        "alpha" => "alpha",
                        "beta" => "beta",
                        _ => "gamma",
                    },
                    v,
                ));
            }
        }
        Ok(())
    }
}

/// 1 when the joint moves strictly against the target direction
/// (velocity product < 0), else 0. A zero on either side counts as
/// agreement.
pub fn velocity_sign_indicator(vel_dps: f64, target_vel_dps: f64) -> f64 {
    if vel_dps * target_vel_dps < 0.0 {
        1.0
    } else {
        0.0
    }
}

/// r = -sum_i[ (|θ_i - θ̂_i|/alpha)^2 + I_i/beta ] - sum_j (p_j/gamma)^2.
/// Angles in deg, velocities in deg/s, pressures in kPa.
pub fn reward(
    angles_deg: &[f64],
    target_angles_deg: &[f64],
    vels_dps: &[f64],
    target_vels_dps: &[f64],
    pressures_kpa: &[f64],
    params: &RewardParams,
) -> Result<f64, RewardError> {
    params.validate()?;
    let n = angles_deg.len();
    if target_angles_deg.len() != n {
        return Err(RewardError::LengthMismatch {
            what: "target_angles",
            expected: n,
            got: target_angles_deg.len(),
        });
    }
    if vels_dps.len() != n {
        return Err(RewardError::LengthMismatch { what: "vels", expected: n, got: vels_dps.len() });
    }
    if target_vels_dps.len() != n {
        return Err(RewardError::LengthMismatch {
            what: "target_vels",
            expected: n,
            got: target_vels_dps.len(),
        });
    }
    let mut r = 0.0;
    for i in 0..n {
        let e = (angles_deg[i] - target_angles_deg[i]).abs() / params.alpha;
        r -= e * e;
        r -= velocity_sign_indicator(vels_dps[i], target_vels_dps[i]) / params.beta;
    }
    for &p in pressures_kpa {
        let q = p / params.gamma;
        r -= q * q;
    }
    Ok(r)
}

/// Mean squared angle error over an evaluation run, deg^2.
pub fn mse(actual_deg: &[f64], target_deg: &[f64]) -> Result<f64, RewardError> {
    if actual_deg.is_empty() {
        return Err(RewardError::Empty("mse inputs"));
    }
    if actual_deg.len() != target_deg.len() {
        return Err(RewardError::LengthMismatch {
            what: "mse target",
            expected: actual_deg.len(),
            got: target_deg.len(),
        });
    }
    let sum: f64 = actual_deg
        .iter()
        .zip(target_deg)
        .map(|(a, t)| (a - t) * (a - t))
        .sum();
    Ok(sum / actual_deg.len() as f64)
}
