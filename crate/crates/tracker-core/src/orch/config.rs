//! Experiment configuration: one TOML file, strict keys, full defaults.
//!
//! Every section can be omitted; unknown keys anywhere are an error so a
//! typo can't silently fall back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pid::PidGains;
use crate::plant::{PlantConfig, NUM_MUSCLES, OBS_DIM};
use crate::policy::PolicyConfig;
use crate::world_model::WmConfig;

use super::OrchError;

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub plant: PlantConfig,
    pub model: ModelSection,
    pub policy: PolicySection,
    pub pid: PidSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub h_dim: usize,
    pub groups: usize,
    pub classes: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub window_steps: usize,
    pub kl_alpha: f32,
    pub free_nats: f32,
    pub kl_scale: f32,
    pub discount: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        let wm = WmConfig::default();
        ModelSection {
            h_dim: wm.h_dim,
            groups: wm.groups,
            classes: wm.classes,
            embed_dim: wm.embed_dim,
            hidden_dim: wm.hidden_dim,
            window_steps: wm.window_steps,
            kl_alpha: wm.kl_alpha,
            free_nats: wm.free_nats,
            kl_scale: wm.kl_scale,
            discount: wm.discount,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub hidden_dim: usize,
    pub horizon: usize,
    pub lambda: f32,
    pub entropy_scale: f32,
    pub actor_uses_h: bool,
    pub log_std_min: f32,
    pub log_std_max: f32,
}

impl Default for PolicySection {
    fn default() -> Self {
        let p = PolicyConfig::from_wm(&WmConfig::default());
        PolicySection {
            hidden_dim: p.hidden_dim,
            horizon: p.horizon,
            lambda: p.lambda,
            entropy_scale: p.entropy_scale,
            actor_uses_h: p.actor_uses_h,
            log_std_min: p.log_std_min,
            log_std_max: p.log_std_max,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PidSection {
    /// Co-contraction bias as a fraction of the valve range.
    pub bias_frac: f32,
    /// Fixed gains skip tuning when all three are present.
    pub kp: Option<f32>,
    pub ki: Option<f32>,
    pub kd: Option<f32>,
}

impl Default for PidSection {
    fn default() -> Self {
        PidSection { bias_frac: 0.2, kp: None, ki: None, kd: None }
    }
}

impl PidSection {
    pub fn fixed_gains(&self) -> Option<PidGains> {
        match (self.kp, self.ki, self.kd) {
            (Some(kp), Some(ki), Some(kd)) => Some(PidGains { kp, ki, kd }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Episode budget (plateau detection may stop earlier).
    pub episodes: usize,
    pub episode_len: usize,
    /// Episodes collected before learning starts.
    pub warmup_episodes: usize,
    /// Learner cycles (one model update + one policy update) per episode.
    pub learner_cycles: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub buffer_capacity: usize,
    pub lr_model: f32,
    pub lr_actor: f32,
    pub lr_critic: f32,
    /// Episodes with additional Gaussian action noise.
    pub explore_episodes: usize,
    /// Noise std as a fraction of the valve range.
    pub explore_noise_frac: f32,
    /// Held-out evaluation cadence, episodes.
    pub eval_every: usize,
    /// Stop when the best eval MSE improved by less than `plateau_frac`
    /// over the last `plateau_evals` evaluations.
    pub plateau_evals: usize,
    pub plateau_frac: f64,
    /// Imagination starts per policy update.
    pub dream_starts: usize,
    /// Training target distribution: random walks in [traj_lo, traj_hi].
    pub traj_lo: f64,
    pub traj_hi: f64,
    pub traj_max_step: f64,
    /// Worker layout for asynchronous training: 2 = collector + one
    /// learner, 3 = collector + separate model and policy learners.
    pub threads: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            episodes: 300,
            episode_len: 200,
            warmup_episodes: 5,
            learner_cycles: 8,
            batch_size: 16,
            seq_len: 50,
            buffer_capacity: 500,
            lr_model: 4e-4,
            lr_actor: 4e-4,
            lr_critic: 2e-4,
            explore_episodes: 20,
            explore_noise_frac: 0.05,
            eval_every: 25,
            plateau_evals: 5,
            plateau_frac: 0.02,
            dream_starts: 128,
            traj_lo: -25.0,
            traj_hi: 40.0,
            traj_max_step: 3.0,
            threads: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Steps per evaluation episode.
    pub t_len: usize,
    /// Target range the held-out suite is generated in.
    pub lo: f64,
    pub hi: f64,
    /// Base seed for evaluation plant resets.
    pub base_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { t_len: 200, lo: -25.0, hi: 40.0, base_seed: 9000 }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, OrchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OrchError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Config =
            toml::from_str(&text).map_err(|e| OrchError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), OrchError> {
        self.plant.validate().map_err(|e| OrchError::Config(e.to_string()))?;
        self.wm_config().validate().map_err(|e| OrchError::Config(e.to_string()))?;
        self.policy_config().validate().map_err(|e| OrchError::Config(e.to_string()))?;
        let t = &self.train;
        if t.episodes == 0
            || t.episode_len == 0
            || t.batch_size == 0
            || t.seq_len == 0
            || t.buffer_capacity == 0
            || t.dream_starts == 0
            || t.learner_cycles == 0
        {
            return Err(OrchError::Config("train counts must be positive".into()));
        }
        if t.seq_len > t.episode_len {
            return Err(OrchError::Config(format!(
                "seq_len {} exceeds episode_len {}",
                t.seq_len, t.episode_len
            )));
        }
        if !(t.traj_lo < t.traj_hi) || !(self.eval.lo < self.eval.hi) {
            return Err(OrchError::Config("target ranges must satisfy lo < hi".into()));
        }
        if !(2..=3).contains(&t.threads) {
            return Err(OrchError::Config(format!("threads must be 2 or 3, got {}", t.threads)));
        }
        if !(0.0..=0.5).contains(&self.pid.bias_frac) {
            return Err(OrchError::Config(format!(
                "pid bias_frac must lie in [0, 0.5], got {}",
                self.pid.bias_frac
            )));
        }
        if self.eval.t_len == 0 {
            return Err(OrchError::Config("eval t_len must be positive".into()));
        }
        Ok(())
    }

    pub fn wm_config(&self) -> WmConfig {
        let m = &self.model;
        WmConfig {
            h_dim: m.h_dim,
            groups: m.groups,
            classes: m.classes,
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            window_steps: m.window_steps,
            obs_dim: OBS_DIM,
            action_dim: NUM_MUSCLES,
            kl_alpha: m.kl_alpha,
            free_nats: m.free_nats,
            kl_scale: m.kl_scale,
            discount: m.discount,
            p_max_kpa: self.plant.p_max(),
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let p = &self.policy;
        PolicyConfig {
            hidden_dim: p.hidden_dim,
            horizon: p.horizon,
            lambda: p.lambda,
            entropy_scale: p.entropy_scale,
            actor_uses_h: p.actor_uses_h,
            log_std_min: p.log_std_min,
            log_std_max: p.log_std_max,
            ..PolicyConfig::from_wm(&self.wm_config())
        }
    }

    /// Canonical serialized form; the manifest hashes this rather than the
    /// source file so formatting and comments don't change the identity.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
