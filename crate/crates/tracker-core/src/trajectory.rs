//! Target trajectory generation, storage, and windowing.
//!
//! A trajectory is a sequence of target joint angles (deg) and target
//! angular velocities (deg/s) at the 0.1 s control period. Values are kept
//! in f64 so the velocity/angle consistency identity survives round-trips;
//! windows are produced in f32 for the networks.
//!
//! Velocity convention: forward difference v_t = (a_{t+1} - a_t)/dt, with
//! the final step holding its angle at zero velocity. Stepwise targets are
//! the one exception: they report the applied jump at the jump step itself
//! and zero elsewhere, so a discontinuity is visible exactly where the
//! target moved.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Control period, seconds.
pub const DT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("bad trajectory range [{lo}, {hi}]")]
    BadRange { lo: f64, hi: f64 },
    #[error("bad trajectory parameter: {0}")]
    BadParam(String),
    #[error("trajectory exits range [{lo}, {hi}] at step {step}: {value}")]
    OutOfBounds { step: usize, value: f64, lo: f64, hi: f64 },
    #[error("trajectory io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trajectory file has no data rows")]
    NoData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub name: String,
    pub angles_deg: Vec<f64>,
    pub velocities_dps: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles_deg.is_empty()
    }

    /// Builds a trajectory from raw angles, deriving velocities by forward
    /// difference with the final step held at zero velocity.
    pub fn from_angles(name: &str, angles_deg: Vec<f64>) -> Trajectory {
        let velocities = forward_diff(&angles_deg);
        Trajectory { name: name.to_string(), angles_deg, velocities_dps: velocities }
    }

    /// Flattened preview window `[a_t..a_{t+l-1}, v_t..v_{t+l-1}]`, length
    /// 2l. Indices past the end hold the final angle at zero velocity.
    pub fn window(&self, t: usize, l: usize) -> Vec<f32> {
        assert!(t < self.len(), "window start {} out of range (len {})", t, self.len());
        assert!(l >= 1, "window length must be at least 1");
        let mut out = Vec::with_capacity(2 * l);
        let last = self.len() - 1;
        for k in 0..l {
            let idx = t + k;
            out.push(if idx <= last { self.angles_deg[idx] } else { self.angles_deg[last] } as f32);
        }
        for k in 0..l {
            let idx = t + k;
            out.push(if idx <= last { self.velocities_dps[idx] } else { 0.0 } as f32);
        }
        out
    }

    /// Writes `step,angle_deg,velocity_dps` rows.
    pub fn save_csv(&self, path: &Path) -> Result<(), TrajectoryError> {
        let mut s = String::from("step,angle_deg,velocity_dps\n");
        for (i, (a, v)) in self.angles_deg.iter().zip(&self.velocities_dps).enumerate() {
            s.push_str(&format!("{i},{a},{v}\n"));
        }
        fs::write(path, s)?;
        Ok(())
    }

    /// Reads a file written by `save_csv`. The `name` is taken from the
    /// file stem.
    pub fn load_csv(path: &Path) -> Result<Trajectory, TrajectoryError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(TrajectoryError::NoData)?;
        if header.trim() != "step,angle_deg,velocity_dps" {
            return Err(TrajectoryError::Parse {
                line: 1,
                msg: format!("expected header step,angle_deg,velocity_dps, got {header:?}"),
            });
        }
        let mut angles = Vec::new();
        let mut vels = Vec::new();
        for (i, raw) in lines {
            let line_no = i + 1;
            let row = raw.trim();
            if row.is_empty() {
                continue;
            }
            let mut cols = row.split(',');
            let step: usize = parse_col(cols.next(), line_no, "step")?;
            if step != angles.len() {
                return Err(TrajectoryError::Parse {
                    line: line_no,
                    msg: format!("expected step {}, got {}", angles.len(), step),
                });
            }
            angles.push(parse_col(cols.next(), line_no, "angle_deg")?);
            vels.push(parse_col(cols.next(), line_no, "velocity_dps")?);
            if cols.next().is_some() {
                return Err(TrajectoryError::Parse { line: line_no, msg: "too many columns".into() });
            }
        }
        if angles.is_empty() {
            return Err(TrajectoryError::NoData);
        }
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Trajectory { name, angles_deg: angles, velocities_dps: vels })
    }
}

fn parse_col<T: std::str::FromStr>(
    col: Option<&str>,
    line: usize,
    what: &str,
) -> Result<T, TrajectoryError> {
    let raw = col.ok_or_else(|| TrajectoryError::Parse {
        line,
        msg: format!("missing {what} column"),
    })?;
    raw.trim().parse().map_err(|_| TrajectoryError::Parse {
        line,
        msg: format!("bad {what} value {raw:?}"),
    })
}

fn forward_diff(angles: &[f64]) -> Vec<f64> {
    let n = angles.len();
    let mut v = vec![0.0; n];
    for t in 0..n.saturating_sub(1) {
        v[t] = (angles[t + 1] - angles[t]) / DT;
    }
    v
}

fn check_range(lo: f64, hi: f64) -> Result<(), TrajectoryError> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(TrajectoryError::BadRange { lo, hi });
    }
    Ok(())
}

/// Bounded random walk: starts at 0 (clamped into range), each step adds a
/// uniform draw from ±max_step and clamps to the range.
pub fn gen_random_walk(
    lo: f64,
    hi: f64,
    max_step: f64,
    t_len: usize,
    seed: u64,
) -> Result<Trajectory, TrajectoryError> {
    check_range(lo, hi)?;
    if max_step < 0.0 || !max_step.is_finite() {
        return Err(TrajectoryError::BadParam(format!("max_step must be >= 0, got {max_step}")));
    }
    if t_len == 0 {
        return Err(TrajectoryError::BadParam("t_len must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut angles = Vec::with_capacity(t_len);
    let mut a = 0.0f64.clamp(lo, hi);
    angles.push(a);
    for _ in 1..t_len {
        a = (a + rng.gen_range(-max_step..=max_step)).clamp(lo, hi);
        angles.push(a);
    }
    Ok(Trajectory::from_angles(&format!("walk[{lo},{hi}]"), angles))
}

/// Triangular wave at |speed|: advance until a bound is hit, emit the bound
/// exactly, then reverse. The sign of `speed` picks the initial direction;
/// the start angle is 0 clamped into range.
pub fn gen_constant_velocity(
    speed_dps: f64,
    lo: f64,
    hi: f64,
    t_len: usize,
) -> Result<Trajectory, TrajectoryError> {
    check_range(lo, hi)?;
    if speed_dps == 0.0 || !speed_dps.is_finite() {
        return Err(TrajectoryError::BadParam(format!("speed must be nonzero, got {speed_dps}")));
    }
    if t_len == 0 {
        return Err(TrajectoryError::BadParam("t_len must be >= 1".into()));
    }
    let step = speed_dps.abs() * DT;
    let mut dir = speed_dps.signum();
    let mut a = 0.0f64.clamp(lo, hi);
    let mut angles = Vec::with_capacity(t_len);
    angles.push(a);
    for _ in 1..t_len {
        let next = a + dir * step;
        a = if next >= hi {
            dir = -1.0;
            hi
        } else if next <= lo {
            dir = 1.0;
            lo
        } else {
            next
        };
        angles.push(a);
    }
    Ok(Trajectory::from_angles(&format!("cv[{speed_dps}]"), angles))
}

/// Piecewise-constant target: jumps by `delta` every `period` steps,
/// reversing the jump direction at the range bounds. Velocities are zero
/// except at jump steps, which carry the applied jump over one period.
pub fn gen_stepwise(
    delta: f64,
    period: usize,
    lo: f64,
    hi: f64,
    t_len: usize,
) -> Result<Trajectory, TrajectoryError> {
    check_range(lo, hi)?;
    if period == 0 {
        return Err(TrajectoryError::BadParam("period must be >= 1".into()));
    }
    if !delta.is_finite() {
        return Err(TrajectoryError::BadParam(format!("delta must be finite, got {delta}")));
    }
    if t_len == 0 {
        return Err(TrajectoryError::BadParam("t_len must be >= 1".into()));
    }
    let mut angles = Vec::with_capacity(t_len);
    let mut vels = vec![0.0f64; t_len];
    let mut a = 0.0f64.clamp(lo, hi);
    let mut d = delta;
    angles.push(a);
    for t in 1..t_len {
        if t % period == 0 {
            if a + d > hi || a + d < lo {
                d = -d;
            }
            let next = (a + d).clamp(lo, hi);
            // terminal step always holds at zero velocity, even if it jumps
            if t != t_len - 1 {
                vels[t] = (next - a) / DT;
            }
            a = next;
        }
        angles.push(a);
    }
    Ok(Trajectory {
        name: format!("step[{delta}/{period}]"),
        angles_deg: angles,
        velocities_dps: vels,
    })
}

/// Sinusoid `offset + A sin(2 pi t / period)`; errors if the swing exits
/// the range.
pub fn gen_sinusoid(
    amplitude: f64,
    period_steps: f64,
    offset: f64,
    lo: f64,
    hi: f64,
    t_len: usize,
) -> Result<Trajectory, TrajectoryError> {
    check_range(lo, hi)?;
    if !(amplitude > 0.0) {
        return Err(TrajectoryError::BadParam(format!("amplitude must be > 0, got {amplitude}")));
    }
    if !(period_steps > 0.0) {
        return Err(TrajectoryError::BadParam(format!("period must be > 0, got {period_steps}")));
    }
    if offset + amplitude > hi {
        return Err(TrajectoryError::OutOfBounds { step: 0, value: offset + amplitude, lo, hi });
    }
    if offset - amplitude < lo {
        return Err(TrajectoryError::OutOfBounds { step: 0, value: offset - amplitude, lo, hi });
    }
    let mut angles = Vec::with_capacity(t_len);
    for t in 0..t_len {
        angles.push(offset + amplitude * (2.0 * std::f64::consts::PI * t as f64 / period_steps).sin());
    }
    Ok(Trajectory::from_angles(&format!("sin[{amplitude}/{period_steps}]"), angles))
}

/// Length of every evaluation trajectory.
pub const EVAL_LEN: usize = 200;

/// The fixed evaluation set: four bounded random walks over different
/// sub-ranges, two triangular waves, two stepwise targets, two sinusoids.
/// `lo`/`hi` is the joint's tracked range of motion; the walk sub-ranges
/// are intersected with it.
pub fn eval_suite(lo: f64, hi: f64) -> Result<Vec<Trajectory>, TrajectoryError> {
    check_range(lo, hi)?;
    let walk = |wlo: f64, whi: f64, seed: u64| -> Result<Trajectory, TrajectoryError> {
        gen_random_walk(wlo.max(lo), whi.min(hi), 3.0, EVAL_LEN, seed)
    };
    Ok(vec![
        walk(-25.0, 40.0, 101)?,
        walk(-10.0, 30.0, 102)?,
        walk(0.0, 40.0, 103)?,
        walk(-25.0, 10.0, 104)?,
        gen_constant_velocity(10.0, lo, hi, EVAL_LEN)?,
        gen_constant_velocity(5.0, lo, hi, EVAL_LEN)?,
        gen_stepwise(-5.0, 20, lo, hi, EVAL_LEN)?,
        gen_stepwise(4.0, 20, lo, hi, EVAL_LEN)?,
        gen_sinusoid(20.0, 60.0, 7.5, lo, hi, EVAL_LEN)?,
        gen_sinusoid(15.0, 30.0, 7.5, lo, hi, EVAL_LEN)?,
    ])
}
