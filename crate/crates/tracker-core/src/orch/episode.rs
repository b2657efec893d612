//! Closed-loop episode collection.
//!
//! One episode tracks one target trajectory for a fixed number of control
//! steps. At step i the controller sees the (noisy) observation and the
//! target window starting at i, acts, and the plant advances. Stored
//! arrays are aligned so position i holds: the observation current at
//! step i, the action taken at step i, the reward scored from that
//! observation against target sample i, and the window seen at step i.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::plant::{Action, Plant, NUM_MUSCLES, OBS_DIM};
use crate::policy::Policy;
use crate::reward::{reward, RewardParams};
use crate::trajectory::Trajectory;
use crate::world_model::{SequenceBatch, WmConfig, WorldModel};

use super::OrchError;

/// One collected episode, length `len` control steps.
#[derive(Debug, Clone)]
pub struct Episode {
    pub len: usize,
    /// Observed state per step, flattened OBS_DIM-wide rows.
    pub obs: Vec<f32>,
    /// Action taken at each step, kPa, flattened NUM_MUSCLES-wide rows.
    pub actions: Vec<f32>,
    /// Reward scored at each step from the observation there.
    pub rewards: Vec<f32>,
    /// Target window seen at each step, flattened 2*window_steps-wide rows.
    pub windows: Vec<f32>,
    /// True (noise-free) plant angle per step, for scoring only.
    pub true_angles: Vec<f32>,
    /// Target samples the episode tracked.
    pub target_angles: Vec<f64>,
    pub target_vels: Vec<f64>,
}

impl Episode {
    /// Mean squared tracking error of the true angle against the target.
    pub fn tracking_mse(&self) -> f64 {
        self.true_angles
            .iter()
            .zip(&self.target_angles)
            .map(|(&a, &t)| {
                let e = a as f64 - t;
                e * e
            })
            .sum::<f64>()
            / self.len as f64
    }

    pub fn reward_mean(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum::<f64>() / self.len as f64
    }

    fn obs_row(&self, i: usize) -> &[f32] {
        &self.obs[i * OBS_DIM..(i + 1) * OBS_DIM]
    }

    fn action_row(&self, i: usize) -> &[f32] {
        &self.actions[i * NUM_MUSCLES..(i + 1) * NUM_MUSCLES]
    }

    fn window_row(&self, i: usize, wd: usize) -> &[f32] {
        &self.windows[i * wd..(i + 1) * wd]
    }
}

/// Runs one episode with the learned controller. `sample` draws stochastic
/// latents and actions (collection); when false both take their mode
/// (evaluation). `explore_std_kpa` adds clipped Gaussian noise on top of
/// the sampled action.
#[allow(clippy::too_many_arguments)]
pub fn collect_episode(
    plant: &mut Plant,
    wm: &WorldModel,
    policy: &Policy,
    traj: &Trajectory,
    t_len: usize,
    plant_seed: u64,
    explore_std_kpa: f32,
    rng: &mut ChaCha8Rng,
    sample: bool,
    reward_params: &RewardParams,
) -> Result<Episode, OrchError> {
    let wd = 2 * wm.cfg.window_steps;
    let p_max = wm.cfg.p_max_kpa;
    let mut ep = Episode {
        len: t_len,
        obs: Vec::with_capacity(t_len * OBS_DIM),
        actions: Vec::with_capacity(t_len * NUM_MUSCLES),
        rewards: Vec::with_capacity(t_len),
        windows: Vec::with_capacity(t_len * wd),
        true_angles: Vec::with_capacity(t_len),
        target_angles: Vec::with_capacity(t_len),
        target_vels: Vec::with_capacity(t_len),
    };

    let mut obs = plant.reset(plant_seed);
    let mut lat = wm.begin();
    let mut prev_action: Option<Vec<f32>> = None;

    for i in 0..t_len {
        let ti = i.min(traj.len() - 1);
        let target_angle = traj.angles_deg[ti];
        let target_vel = traj.velocities_dps[ti];
        let window = traj.window(ti, wm.cfg.window_steps);

        lat = wm.filter_step(&lat, prev_action.as_deref(), &obs, rng, sample)?;
        let mut action_kpa = policy.act(&lat, &window, rng, sample)?;
        if explore_std_kpa > 0.0 {
            for a in &mut action_kpa {
                let n: f32 = rng.sample(StandardNormal);
                *a = (*a + n * explore_std_kpa).clamp(0.0, p_max);
            }
        }

        let r = reward(
            &[obs.angle_deg as f64],
            &[target_angle],
            &[obs.vel_dps as f64],
            &[target_vel],
            &[obs.pressures_kpa[0] as f64, obs.pressures_kpa[1] as f64],
            reward_params,
        )?;

        ep.obs.extend_from_slice(&obs.flatten());
        ep.actions.extend_from_slice(&action_kpa);
        ep.rewards.push(r as f32);
        ep.windows.extend_from_slice(&window);
        ep.true_angles.push(plant.state().angle_deg);
        ep.target_angles.push(target_angle);
        ep.target_vels.push(target_vel);

        if i + 1 < t_len {
            let action = Action { pressures_kpa: [action_kpa[0], action_kpa[1]] };
            let (next_obs, _) = plant.step(&action)?;
            obs = next_obs;
            prev_action = Some(action_kpa);
        }
    }
    Ok(ep)
}

/// Assembles a training batch from (episode, offset) picks. Position i of
/// subsequence j reads episode step offset+i; the previous action and the
/// previous acting window come from one step earlier, with the episode
/// head conventions (zero action, duplicated first window).
pub fn build_batch(
    episodes: &[&Episode],
    offsets: &[usize],
    l: usize,
    cfg: &WmConfig,
) -> SequenceBatch {
    assert_eq!(episodes.len(), offsets.len());
    let b = episodes.len();
    let wd = cfg.window_dim();
    let mut batch = SequenceBatch {
        b,
        l,
        obs: Vec::with_capacity(b * l * cfg.obs_dim),
        prev_action: Vec::with_capacity(b * l * cfg.action_dim),
        reward: Vec::with_capacity(b * l),
        reward_window: Vec::with_capacity(b * l * wd),
        episode_end: vec![0.0; b * l],
    };
    for (ep, &s) in episodes.iter().zip(offsets) {
        assert!(s + l <= ep.len, "subsequence escapes episode");
        for i in 0..l {
            let t = s + i;
            batch.obs.extend_from_slice(ep.obs_row(t));
            if t > 0 {
                batch.prev_action.extend_from_slice(ep.action_row(t - 1));
            } else {
                batch.prev_action.extend_from_slice(&[0.0; NUM_MUSCLES]);
            }
            batch.reward.push(ep.rewards[t]);
            let w = if t > 0 { ep.window_row(t - 1, wd) } else { ep.window_row(0, wd) };
            batch.reward_window.extend_from_slice(w);
        }
    }
    batch
}
