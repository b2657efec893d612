//! Held-out evaluation, PID comparison, and open-loop model rollouts.
//!
//! Evaluation always runs the deterministic controller (mode latents,
//! mode actions, no exploration noise) on a noisy plant seeded per
//! trajectory, and scores the true joint angle against the target.
//! Comparisons give the PID controller the identical plant seeds so both
//! controllers face the same initial state and the same sensor noise
//! stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::pid::{run_pid_episode, PidController, PidGains};
use crate::plant::Plant;
use crate::policy::Policy;
use crate::reward::{mse, RewardParams};
use crate::trajectory::Trajectory;
use crate::world_model::{LatentState, WorldModel};

use super::config::Config;
use super::episode::{collect_episode, Episode};
use super::report::TraceRow;
use super::OrchError;

/// Per-trajectory evaluation outcome.
pub struct EvalResult {
    pub name: String,
    pub mse: f64,
    pub episode: Episode,
}

/// Runs the learned controller over a set of trajectories.
pub fn eval_policy(
    cfg: &Config,
    wm: &WorldModel,
    policy: &Policy,
    trajs: &[Trajectory],
    t_len: usize,
    base_seed: u64,
) -> Result<Vec<EvalResult>, OrchError> {
    let params = RewardParams::default();
    let mut out = Vec::with_capacity(trajs.len());
    for (i, traj) in trajs.iter().enumerate() {
        let mut plant = Plant::new(cfg.plant)?;
        // rng is unused on the mode path but required by the signature
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ 0x5eed);
        let ep = collect_episode(
            &mut plant,
            wm,
            policy,
            traj,
            t_len,
            base_seed.wrapping_add(i as u64),
            0.0,
            &mut rng,
            false,
            &params,
        )?;
        out.push(EvalResult { name: traj.name.clone(), mse: ep.tracking_mse(), episode: ep });
    }
    Ok(out)
}

/// Mean of per-trajectory MSEs.
pub fn mean_mse(results: &[EvalResult]) -> f64 {
    results.iter().map(|r| r.mse).sum::<f64>() / results.len() as f64
}

/// One PID episode on the same terms the policy is evaluated on.
pub fn eval_pid_on(
    cfg: &Config,
    gains: PidGains,
    traj: &Trajectory,
    t_len: usize,
    plant_seed: u64,
) -> Result<f64, OrchError> {
    let mut plant = Plant::new(cfg.plant)?;
    let p_max = cfg.plant.p_max();
    let mut ctrl = PidController::new(gains, cfg.pid.bias_frac * p_max, p_max)?;
    let (angles, _) = run_pid_episode(&mut plant, &mut ctrl, traj, t_len, plant_seed)?;
    let targets: Vec<f64> = (0..t_len)
        .map(|t| traj.angles_deg[t.min(traj.len() - 1)])
        .collect();
    let angles64: Vec<f64> = angles.iter().map(|&a| a as f64).collect();
    Ok(mse(&angles64, &targets)?)
}

pub struct CompareRow {
    pub name: String,
    pub tracker_mse: f64,
    pub pid_mse: f64,
}

/// Tracker vs PID on the same trajectories with identical plant seeds.
pub fn compare_controllers(
    cfg: &Config,
    wm: &WorldModel,
    policy: &Policy,
    gains: PidGains,
    trajs: &[Trajectory],
    t_len: usize,
    base_seed: u64,
) -> Result<Vec<CompareRow>, OrchError> {
    let tracker = eval_policy(cfg, wm, policy, trajs, t_len, base_seed)?;
    let mut rows = Vec::with_capacity(trajs.len());
    for (i, (traj, tr)) in trajs.iter().zip(&tracker).enumerate() {
        let pid_mse = eval_pid_on(cfg, gains, traj, t_len, base_seed.wrapping_add(i as u64))?;
        rows.push(CompareRow { name: traj.name.clone(), tracker_mse: tr.mse, pid_mse });
    }
    Ok(rows)
}

/// Open-loop model rollout next to the real plant fed the same actions.
pub struct RolloutResult {
    /// Observed angle the rollout starts from.
    pub initial_model_angle: f32,
    /// True plant angle at the same instant.
    pub initial_plant_angle: f32,
    /// Angle the model imagines after each action.
    pub model_angles: Vec<f32>,
    /// True plant angle after each action.
    pub plant_angles: Vec<f32>,
    /// Target angle at each step.
    pub target_angles: Vec<f64>,
    /// Actions the policy chose inside the dream, kPa pairs.
    pub actions: Vec<[f32; 2]>,
}

/// Rolls the model blind from one real observation — the policy picks
/// actions from imagined latents only — then replays the identical action
/// sequence on the real plant.
pub fn open_loop_versus_plant(
    cfg: &Config,
    wm: &WorldModel,
    policy: &Policy,
    traj: &Trajectory,
    t_len: usize,
    plant_seed: u64,
) -> Result<RolloutResult, OrchError> {
    let mut plant = Plant::new(cfg.plant)?;
    let obs0 = plant.reset(plant_seed);
    let initial_model_angle = obs0.angle_deg;
    let initial_plant_angle = plant.state().angle_deg;
    let mut rng = ChaCha8Rng::seed_from_u64(plant_seed ^ 0xd1ce);
    let mut actions: Vec<[f32; 2]> = Vec::with_capacity(t_len);
    let mut act_err: Option<OrchError> = None;
    let model_angles = wm.open_loop_rollout(
        &obs0,
        traj,
        t_len,
        (cfg.plant.stop_lo_deg, cfg.plant.stop_hi_deg),
        &mut rng,
        |h, z, w| {
            let lat = LatentState { h: h.to_vec(), z: z.to_vec() };
            let mut dummy = ChaCha8Rng::seed_from_u64(0);
            match policy.act(&lat, w, &mut dummy, false) {
                Ok(a) => {
                    let pair = [a[0], a[1]];
                    actions.push(pair);
                    a
                }
                Err(e) => {
                    if act_err.is_none() {
                        act_err = Some(e.into());
                    }
                    actions.push([0.0, 0.0]);
                    vec![0.0; 2]
                }
            }
        },
    )?;
    if let Some(e) = act_err {
        return Err(e);
    }

    let mut plant_angles = Vec::with_capacity(t_len);
    for a in &actions {
        let action = crate::plant::Action { pressures_kpa: *a };
        plant.step(&action)?;
        plant_angles.push(plant.state().angle_deg);
    }
    let target_angles: Vec<f64> =
        (0..t_len).map(|t| traj.angles_deg[t.min(traj.len() - 1)]).collect();
    Ok(RolloutResult {
        initial_model_angle,
        initial_plant_angle,
        model_angles,
        plant_angles,
        target_angles,
        actions,
    })
}

/// Fraction of steps where the model's angle moves the same way the
/// plant's does. Changes smaller than the dead threshold count as "still",
/// and two stills agree.
pub fn direction_agreement(initial_model: f32, initial_plant: f32, r: &RolloutResult) -> f64 {
    const DEAD_DEG: f32 = 0.05;
    let n = r.model_angles.len();
    assert_eq!(n, r.plant_angles.len());
    assert!(n > 0);
    let mut agree = 0usize;
    let mut prev_m = initial_model;
    let mut prev_p = initial_plant;
    for t in 0..n {
        let dm = r.model_angles[t] - prev_m;
        let dp = r.plant_angles[t] - prev_p;
        let sm = if dm.abs() < DEAD_DEG { 0 } else { dm.signum() as i32 };
        let sp = if dp.abs() < DEAD_DEG { 0 } else { dp.signum() as i32 };
        if sm == sp {
            agree += 1;
        }
        prev_m = r.model_angles[t];
        prev_p = r.plant_angles[t];
    }
    agree as f64 / n as f64
}

/// Trace rows (observed state + commands) from a collected episode.
pub fn episode_trace(ep: &Episode) -> Vec<TraceRow> {
    (0..ep.len)
        .map(|i| {
            let o = &ep.obs[i * 4..(i + 1) * 4];
            let a = &ep.actions[i * 2..(i + 1) * 2];
            TraceRow {
                step: i,
                theta_deg: o[0],
                theta_dot_dps: o[1],
                p1_kpa: o[2],
                p2_kpa: o[3],
                a1_kpa: a[0],
                a2_kpa: a[1],
            }
        })
        .collect()
}
