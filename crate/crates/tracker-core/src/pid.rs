//! PID baseline on the antagonistic pair.
//!
//! A single PID acts on the angle error and its output u (kPa) splits
//! antagonistically around a fixed co-contraction bias: flexor gets
//! bias+u, extensor bias-u, both clamped to the valve range. Gains come
//! from relay-free Ziegler-Nichols: raise a proportional-only gain until
//! the step response settles into a sustained oscillation, read off the
//! ultimate gain and period, apply the classic table, then refine with a
//! +-30% grid search scored on a training-style random walk. Tuning runs
//! on a noiseless copy of the plant; the tuned controller is evaluated on
//! whatever plant it is handed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::{Action, Plant, PlantConfig, PlantError, CONTROL_DT};
use crate::trajectory::{gen_random_walk, Trajectory};

#[derive(Debug, Error)]
pub enum PidError {
    #[error("plant not tunable by ZN under bound")]
    NotTunable,
    #[error("bad pid parameter {0}: {1}")]
    BadParam(&'static str, f64),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    /// kPa per degree.
    pub kp: f32,
    /// kPa per degree-second.
    pub ki: f32,
    /// kPa-second per degree.
    pub kd: f32,
}

impl PidGains {
    pub fn validate(&self) -> Result<(), PidError> {
        for (name, v) in [("kp", self.kp), ("ki", self.ki), ("kd", self.kd)] {
            if !v.is_finite() || v < 0.0 {
                return Err(PidError::BadParam(name, v as f64));
            }
        }
        Ok(())
    }
}

/// Classic Ziegler-Nichols PID table from the ultimate gain and period.
pub fn zn_from_ultimate(ku: f32, tu_s: f32) -> PidGains {
    let kp = 0.6 * ku;
    PidGains { kp, ki: kp / (0.5 * tu_s), kd: kp * 0.125 * tu_s }
}

/// Stateful controller: error in, antagonistic pressure pair out.
#[derive(Debug, Clone)]
pub struct PidController {
    pub gains: PidGains,
    /// Co-contraction pressure both muscles idle at, kPa.
    pub bias_kpa: f32,
    p_max_kpa: f32,
    dt_s: f32,
    integral: f32,
    prev_error: Option<f32>,
}

impl PidController {
    pub fn new(gains: PidGains, bias_kpa: f32, p_max_kpa: f32) -> Result<Self, PidError> {
        gains.validate()?;
        if !bias_kpa.is_finite() || bias_kpa < 0.0 || bias_kpa > 0.5 * p_max_kpa {
            return Err(PidError::BadParam("bias_kpa", bias_kpa as f64));
        }
        Ok(PidController {
            gains,
            bias_kpa,
            p_max_kpa,
            dt_s: CONTROL_DT,
            integral: 0.0,
            prev_error: None,
        })
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.prev_error = None;
    }

    /// Raw PID output for one error sample, kPa. The integral is clamped
    /// so its contribution can never exceed the valve range (anti-windup).
    pub fn control(&mut self, error_deg: f32) -> f32 {
        let g = self.gains;
        let i_limit = if g.ki > 0.0 { self.p_max_kpa / g.ki } else { f32::INFINITY };
        self.integral = (self.integral + error_deg * self.dt_s).clamp(-i_limit, i_limit);
        let deriv = match self.prev_error {
            Some(prev) => (error_deg - prev) / self.dt_s,
            None => 0.0,
        };
        self.prev_error = Some(error_deg);
        g.kp * error_deg + g.ki * self.integral + g.kd * deriv
    }

    /// Splits a control signal antagonistically around the bias.
    pub fn map_to_pressures(&self, u_kpa: f32) -> Action {
        Action {
            pressures_kpa: [
                (self.bias_kpa + u_kpa).clamp(0.0, self.p_max_kpa),
                (self.bias_kpa - u_kpa).clamp(0.0, self.p_max_kpa),
            ],
        }
    }

    /// One full control step: error to pressure command.
    pub fn step(&mut self, error_deg: f32) -> Action {
        let u = self.control(error_deg);
        self.map_to_pressures(u)
    }
}

/// Default co-contraction bias as a fraction of the valve range.
pub const PID_BIAS_FRAC: f32 = 0.2;

/// Closed-loop episode: at each step the controller sees the current
/// (noisy) observation and the current target sample, then acts. Returns
/// the true plant angle at each step, sampled when that step's target was
/// current, plus the commands taken.
pub fn run_pid_episode(
    plant: &mut Plant,
    ctrl: &mut PidController,
    targets: &Trajectory,
    t_len: usize,
    seed: u64,
) -> Result<(Vec<f32>, Vec<Action>), PidError> {
    ctrl.reset();
    let mut obs = plant.reset(seed);
    let mut angles = Vec::with_capacity(t_len);
    let mut actions = Vec::with_capacity(t_len);
    for t in 0..t_len {
        angles.push(plant.state().angle_deg);
        let target = targets.angles_deg[t.min(targets.len() - 1)] as f32;
        let action = ctrl.step(target - obs.angle_deg);
        let (next_obs, _) = plant.step(&action)?;
        obs = next_obs;
        actions.push(action);
    }
    Ok((angles, actions))
}

/// Mean squared tracking error of a gain set over one trajectory, on a
/// noiseless plant.
fn score_gains(cfg: &PlantConfig, gains: PidGains, traj: &Trajectory) -> Result<f64, PidError> {
    let quiet = cfg.without_noise();
    let mut plant = Plant::new(quiet)?;
    let mut ctrl = PidController::new(gains, PID_BIAS_FRAC * cfg.p_max(), cfg.p_max())?;
    let (angles, _) = run_pid_episode(&mut plant, &mut ctrl, traj, traj.len(), 0)?;
    let mse = angles
        .iter()
        .enumerate()
        .map(|(t, &a)| {
            let e = a as f64 - traj.angles_deg[t];
            e * e
        })
        .sum::<f64>()
        / angles.len() as f64;
    Ok(mse)
}

/// Detected sustained oscillation: amplitude of the cycle and its period.
struct Oscillation {
    tu_s: f32,
}

/// Runs a proportional-only step response and looks for a sustained
/// oscillation: at least four successive peaks whose amplitudes (relative
/// to the setpoint) stay within a 0.9..1.1 ratio band.
fn detect_oscillation(cfg: &PlantConfig, kp: f32, setpoint_deg: f32) -> Result<Option<Oscillation>, PidError> {
    const STEPS: usize = 300;
    const SKIP: usize = 100;
    const AMP_FLOOR_DEG: f32 = 0.3;

    let mut plant = Plant::new(cfg.clone())?;
    let gains = PidGains { kp, ki: 0.0, kd: 0.0 };
    let mut ctrl = PidController::new(gains, PID_BIAS_FRAC * cfg.p_max(), cfg.p_max())?;
    let mut obs = plant.reset(0);
    let mut trace = Vec::with_capacity(STEPS);
    for _ in 0..STEPS {
        trace.push(plant.state().angle_deg);
        let action = ctrl.step(setpoint_deg - obs.angle_deg);
        let (next_obs, _) = plant.step(&action)?;
        obs = next_obs;
    }

    // peaks of the settled portion
    let mut peak_idx: Vec<usize> = Vec::new();
    let mut peak_amp: Vec<f32> = Vec::new();
    for i in SKIP.max(1)..STEPS - 1 {
        if trace[i] > trace[i - 1] && trace[i] >= trace[i + 1] {
            let amp = trace[i] - setpoint_deg;
            if amp > AMP_FLOOR_DEG {
                peak_idx.push(i);
                peak_amp.push(amp);
            }
        }
    }
    if peak_idx.len() < 4 {
        return Ok(None);
    }
    let last4_amp = &peak_amp[peak_amp.len() - 4..];
    let last4_idx = &peak_idx[peak_idx.len() - 4..];
    for w in last4_amp.windows(2) {
        let ratio = w[1] / w[0];
        if !(0.9..=1.1).contains(&ratio) {
            return Ok(None);
        }
    }
    let mean_gap =
        (last4_idx[3] - last4_idx[0]) as f32 / 3.0 * CONTROL_DT;
    Ok(Some(Oscillation { tu_s: mean_gap }))
}

/// Ziegler-Nichols tuning on a noiseless copy of the plant: escalate a
/// proportional-only gain by 1.3x per trial until the 10-degree step
/// response sustains an oscillation, then apply the classic table.
pub fn ziegler_nichols_tune(cfg: &PlantConfig) -> Result<PidGains, PidError> {
    let quiet = cfg.without_noise();
    let mut kp = 0.5_f32;
    const KP_BOUND: f32 = 5_000.0;
    while kp <= KP_BOUND {
        if let Some(osc) = detect_oscillation(&quiet, kp, 10.0)? {
            return Ok(zn_from_ultimate(kp, osc.tu_s));
        }
        kp *= 1.3;
    }
    Err(PidError::NotTunable)
}

/// Grid refinement: scales each gain by {0.7, 1.0, 1.3} (27 combos) and
/// keeps the set with the lowest tracking MSE on a training-style random
/// walk, scored on a noiseless plant.
pub fn refine_gains(cfg: &PlantConfig, base: PidGains, traj: &Trajectory) -> Result<PidGains, PidError> {
    const SCALES: [f32; 3] = [0.7, 1.0, 1.3];
    let mut best = base;
    let mut best_mse = f64::INFINITY;
    for &sp in &SCALES {
        for &si in &SCALES {
            for &sd in &SCALES {
                let g = PidGains { kp: base.kp * sp, ki: base.ki * si, kd: base.kd * sd };
                let mse = score_gains(cfg, g, traj)?;
                if mse < best_mse {
                    best_mse = mse;
                    best = g;
                }
            }
        }
    }
    Ok(best)
}

/// Full tuning pipeline: Ziegler-Nichols then grid refinement.
pub fn tune_pid(cfg: &PlantConfig) -> Result<PidGains, PidError> {
    let base = ziegler_nichols_tune(cfg)?;
    let traj = gen_random_walk(-25.0, 40.0, 3.0, 200, 4242).map_err(|_| PidError::NotTunable)?;
    refine_gains(cfg, base, &traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::PlantConfig;
    use crate::trajectory::gen_constant_velocity;

    #[test]
    fn zn_table_formulas() {
        let g = zn_from_ultimate(10.0, 2.0);
        assert!((g.kp - 6.0).abs() < 1e-6);
        assert!((g.ki - 6.0).abs() < 1e-6);
        assert!((g.kd - 1.5).abs() < 1e-6);
    }

    #[test]
    fn controller_splits_antagonistically() {
        let g = PidGains { kp: 2.0, ki: 0.0, kd: 0.0 };
        let ctrl = PidController::new(g, 100.0, 500.0).unwrap();
        let a = ctrl.map_to_pressures(30.0);
        assert_eq!(a.pressures_kpa, [130.0, 70.0]);
        // clamped at the valve limits
        let b = ctrl.map_to_pressures(1000.0);
        assert_eq!(b.pressures_kpa, [500.0, 0.0]);
        let c = ctrl.map_to_pressures(-1000.0);
        assert_eq!(c.pressures_kpa, [0.0, 500.0]);
    }

    #[test]
    fn pid_terms_accumulate_as_expected() {
        let g = PidGains { kp: 2.0, ki: 1.0, kd: 0.5 };
        let mut ctrl = PidController::new(g, 100.0, 500.0).unwrap();
        // first step: no derivative, integral = e*dt
        let u1 = ctrl.control(4.0);
        assert!((u1 - (2.0 * 4.0 + 1.0 * 0.4)).abs() < 1e-6);
        // second step: derivative kicks in
        let u2 = ctrl.control(2.0);
        let expect = 2.0 * 2.0 + 1.0 * (0.4 + 0.2) + 0.5 * (2.0 - 4.0) / 0.1;
        assert!((u2 - expect).abs() < 1e-5, "{u2} vs {expect}");
        // reset clears state
        ctrl.reset();
        let u3 = ctrl.control(4.0);
        assert_eq!(u1, u3);
    }

    #[test]
    fn integral_is_clamped() {
        let g = PidGains { kp: 0.0, ki: 2.0, kd: 0.0 };
        let mut ctrl = PidController::new(g, 100.0, 500.0).unwrap();
        for _ in 0..100_000 {
            ctrl.control(100.0);
        }
        let u = ctrl.control(100.0);
        assert!(u <= 500.0 + 1e-3, "integral wind-up escaped the clamp: {u}");
    }

    #[test]
    fn rejects_bad_construction() {
        let g = PidGains { kp: -1.0, ki: 0.0, kd: 0.0 };
        assert!(PidController::new(g, 100.0, 500.0).is_err());
        let ok = PidGains { kp: 1.0, ki: 0.0, kd: 0.0 };
        assert!(PidController::new(ok, 400.0, 500.0).is_err(), "bias above half range");
        assert!(PidController::new(ok, f32::NAN, 500.0).is_err());
    }

    #[test]
    fn zn_finds_oscillation_on_default_plant() {
        let cfg = PlantConfig::default();
        let gains = ziegler_nichols_tune(&cfg).unwrap();
        assert!(gains.kp > 0.0 && gains.ki > 0.0 && gains.kd > 0.0);
        assert!(gains.kp.is_finite());
    }

    #[test]
    fn tuned_gains_stabilize_step() {
        let cfg = PlantConfig::default();
        let gains = tune_pid(&cfg).unwrap();
        let quiet = cfg.without_noise();
        let mut plant = Plant::new(quiet).unwrap();
        let mut ctrl = PidController::new(gains, PID_BIAS_FRAC * cfg.p_max(), cfg.p_max()).unwrap();
        let step_target = Trajectory::from_angles("step10", vec![10.0; 150]);
        let (angles, _) = run_pid_episode(&mut plant, &mut ctrl, &step_target, 150, 0).unwrap();
        let peak = angles.iter().cloned().fold(f32::MIN, f32::max);
        assert!(peak < 16.0, "overshoot beyond 60%: peak {peak}");
        // settled within 5 s and stays settled
        for (t, &a) in angles.iter().enumerate().skip(50) {
            assert!(
                (a - 10.0).abs() < 2.0,
                "not settled at t={}s: angle {a}",
                t as f32 * 0.1
            );
        }
    }

    #[test]
    fn refinement_never_hurts() {
        let cfg = PlantConfig::default();
        let base = ziegler_nichols_tune(&cfg).unwrap();
        let traj = gen_constant_velocity(10.0, -25.0, 40.0, 200).unwrap();
        let refined = refine_gains(&cfg, base, &traj).unwrap();
        let base_mse = score_gains(&cfg, base, &traj).unwrap();
        let refined_mse = score_gains(&cfg, refined, &traj).unwrap();
        assert!(refined_mse <= base_mse + 1e-9);
    }

    #[test]
    fn tracks_a_slow_ramp_reasonably() {
        let cfg = PlantConfig::default();
        let gains = tune_pid(&cfg).unwrap();
        let mut plant = Plant::new(cfg.without_noise()).unwrap();
        let mut ctrl = PidController::new(gains, PID_BIAS_FRAC * cfg.p_max(), cfg.p_max()).unwrap();
        let traj = gen_constant_velocity(5.0, -25.0, 40.0, 200).unwrap();
        let (angles, _) = run_pid_episode(&mut plant, &mut ctrl, &traj, 200, 0).unwrap();
        // skip the initial transient, then demand small error on the ramp
        let mut worst = 0.0f32;
        for t in 30..200 {
            worst = worst.max((angles[t] - traj.angles_deg[t] as f32).abs());
        }
        assert!(worst < 6.0, "ramp tracking error too large: {worst} deg");
    }
}
