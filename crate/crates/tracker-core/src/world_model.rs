//! Recurrent state-space world model with trajectory-conditioned reward
//! prediction.
//!
//! The latent state splits into a deterministic part `h` (GRU) and a
//! stochastic part `z` (categorical groups, one-hot per group, sampled
//! straight-through during training). Heads decode observation mean,
//! reward mean (conditioned on the target window the controller saw when
//! acting), and a discount probability.
//!
//! Alignment convention used throughout: position `i` of a training
//! sequence carries the observation arriving at step `i`, the reward
//! computed from that observation, the action taken at step `i-1` (zeros
//! at the sequence head), and the target window the controller saw at step
//! `i-1` (the step-`0` window at the head). The reward head therefore
//! learns r_i | (h_i, z_i, window_{i-1}), matching how imagined rollouts
//! are scored.

use rand_chacha::ChaCha8Rng;

use crate::nn::{Adam, Dense, Gru, Mlp, NnError, ParamStore, Staged, Tape, Tensor, Var};
use crate::nn::{mode_one_hot, sample_one_hot};
use crate::plant::{Observation, OBS_DIM};
use crate::trajectory::Trajectory;

/// Observation normalization scales: angles /40 deg, velocities /100 deg/s,
/// pressures /p_max; everything clamped to +-NORM_CLAMP so collisions with
/// the hard stops cannot blow up the embedding.
pub const ANGLE_SCALE: f32 = 40.0;
pub const VEL_SCALE: f32 = 100.0;
pub const NORM_CLAMP: f32 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WmConfig {
    /// Deterministic state width.
    pub h_dim: usize,
    /// Stochastic state: `groups` categorical groups of `classes` classes.
    pub groups: usize,
    pub classes: usize,
    /// Width of the [z, a] embedding fed to the GRU.
    pub embed_dim: usize,
    /// Hidden width of every head and the posterior/prior nets (two layers).
    pub hidden_dim: usize,
    /// Target window length l (steps of preview the controller sees).
    pub window_steps: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    /// KL balancing weight on the prior side.
    pub kl_alpha: f32,
    /// Per-group KL floor, nats.
    pub free_nats: f32,
    /// Weight of the KL term in the loss.
    pub kl_scale: f32,
    /// Discount the discount head regresses toward on non-terminal steps.
    pub discount: f32,
    /// Pressure normalization scale, kPa.
    pub p_max_kpa: f32,
}

impl Default for WmConfig {
    fn default() -> Self {
        WmConfig {
            h_dim: 128,
            groups: 8,
            classes: 8,
            embed_dim: 128,
            hidden_dim: 128,
            window_steps: 3,
            obs_dim: OBS_DIM,
            action_dim: 2,
            kl_alpha: 0.8,
            free_nats: 1.0,
            kl_scale: 1.0,
            discount: 0.99,
            p_max_kpa: 500.0,
        }
    }
}

impl WmConfig {
    pub fn z_dim(&self) -> usize {
        self.groups * self.classes
    }

    pub fn window_dim(&self) -> usize {
        2 * self.window_steps
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let positive = [
            self.h_dim,
            self.groups,
            self.classes,
            self.embed_dim,
            self.hidden_dim,
            self.window_steps,
            self.obs_dim,
            self.action_dim,
        ];
        if positive.iter().any(|&d| d == 0) {
            return Err(NnError::ShapeMismatch {
                context: "world model config".into(),
                expected: "all dims >= 1".into(),
                got: format!("{self:?}"),
            });
        }
        if !(0.0..=1.0).contains(&self.kl_alpha)
            || self.free_nats < 0.0
            || self.kl_scale < 0.0
            || !(0.0..1.0).contains(&self.discount)
            || !(self.p_max_kpa > 0.0)
        {
            return Err(NnError::NonFinite { context: format!("world model config: {self:?}") });
        }
        Ok(())
    }
}

/// Latent state carried across control steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub h: Vec<f32>,
    pub z: Vec<f32>,
}

impl LatentState {
    /// True when z is exactly one-hot per group.
    pub fn z_is_one_hot(&self, classes: usize) -> bool {
        self.z.len() % classes == 0
            && self.z.chunks(classes).all(|g| {
                g.iter().all(|&v| v == 0.0 || v == 1.0) && g.iter().sum::<f32>() == 1.0
            })
    }
}

/// One training batch of B subsequences of length L, episode-major:
/// index (j, i) lives at row j*l + i.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub b: usize,
    pub l: usize,
    /// Raw observations, b*l*obs_dim.
    pub obs: Vec<f32>,
    /// Action taken one step before each position, raw kPa, b*l*action_dim;
    /// zeros at sequence heads that start an episode.
    pub prev_action: Vec<f32>,
    /// Reward computed from the observation at each position, b*l.
    pub reward: Vec<f32>,
    /// Target window the controller saw one step before each position
    /// (the step-0 window at episode heads), raw units, b*l*window_dim.
    pub reward_window: Vec<f32>,
    /// 1.0 where the episode ended at this position, else 0.0.
    pub episode_end: Vec<f32>,
}

impl SequenceBatch {
    pub fn validate(&self, cfg: &WmConfig) -> Result<(), NnError> {
        let n = self.b * self.l;
        let checks = [
            ("obs", self.obs.len(), n * cfg.obs_dim),
            ("prev_action", self.prev_action.len(), n * cfg.action_dim),
            ("reward", self.reward.len(), n),
            ("reward_window", self.reward_window.len(), n * cfg.window_dim()),
            ("episode_end", self.episode_end.len(), n),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(NnError::ShapeMismatch {
                    context: format!("sequence batch {what}"),
                    expected: want.to_string(),
                    got: got.to_string(),
                });
            }
        }
        let finite = self.obs.iter().chain(&self.prev_action).chain(&self.reward).all(|v| v.is_finite());
        if !finite {
            return Err(NnError::NonFinite { context: "sequence batch".into() });
        }
        Ok(())
    }
}

/// Posterior latents exported from a training step, one row per (sequence,
/// step) pair in time-major order: row = i*b + j.
#[derive(Debug, Clone)]
pub struct Latents {
    pub h: Tensor,
    pub z: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct WmMetrics {
    pub loss: f32,
    /// Negative log-likelihood terms, mean per sequence position.
    pub nll_obs: f32,
    pub nll_reward: f32,
    pub nll_discount: f32,
    /// KL term as it enters the loss (free-nats floor applied), mean per
    /// position.
    pub kl: f32,
    /// Unclamped KL(posterior || prior), mean per position.
    pub kl_raw: f32,
    /// Reconstruction MSE in normalized observation space.
    pub recon_mse: f32,
    pub grad_norm: f32,
    pub clipped: bool,
}

/// Imagined rollout handles on a live tape. Index k of `actions`,
/// `rewards`, `discounts` describes the transition from imagined step k to
/// k+1; `hs`/`zs`/`window_vars` have one extra entry for the final state.
pub struct DreamRollout {
    pub starts: usize,
    pub horizon: usize,
    pub hs: Vec<Var>,
    pub zs: Vec<Var>,
    pub window_vars: Vec<Var>,
    pub actions: Vec<Var>,
    pub rewards: Vec<Var>,
    pub discounts: Vec<Var>,
}

#[derive(Clone)]
pub struct WorldModel {
    pub cfg: WmConfig,
    pub store: ParamStore,
    za_embed: Dense,
    gru: Gru,
    posterior: Mlp,
    prior: Mlp,
    obs_head: Mlp,
    reward_head: Mlp,
    discount_head: Mlp,
}

impl WorldModel {
    pub fn new(cfg: WmConfig, seed: u64) -> Result<Self, NnError> {
        cfg.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (h, z, hid) = (cfg.h_dim, cfg.z_dim(), cfg.hidden_dim);
        let za_embed = Dense::new(&mut store, "za", z + cfg.action_dim, cfg.embed_dim, &mut rng);
        let gru = Gru::new(&mut store, "gru", cfg.embed_dim, h, &mut rng);
        let posterior = Mlp::new(&mut store, "post", &[h + cfg.obs_dim, hid, hid, z], &mut rng);
        let prior = Mlp::new(&mut store, "prior", &[h, hid, hid, z], &mut rng);
        let obs_head = Mlp::new(&mut store, "obs", &[h + z, hid, hid, cfg.obs_dim], &mut rng);
        let reward_head =
            Mlp::new(&mut store, "reward", &[h + z + cfg.window_dim(), hid, hid, 1], &mut rng);
        let discount_head = Mlp::new(&mut store, "discount", &[h + z, hid, hid, 1], &mut rng);
        Ok(WorldModel {
            cfg,
            store,
            za_embed,
            gru,
            posterior,
            prior,
            obs_head,
            reward_head,
            discount_head,
        })
    }

    // ---- tape-level building blocks -------------------------------------

    /// h' = GRU(h, elu(dense([z, a_norm]))). Actions already in [0,1].
    pub(crate) fn step_h_on(&self, t: &mut Tape, p: &Staged, h: Var, z: Var, a_norm: Var) -> Var {
        let za = t.concat_cols(&[z, a_norm]);
        let e = self.za_embed.forward(t, p, za);
        let e = t.elu(e);
        self.gru.step(t, p, h, e)
    }

    pub(crate) fn posterior_logits_on(&self, t: &mut Tape, p: &Staged, h: Var, x_norm: Var) -> Var {
        let hx = t.concat_cols(&[h, x_norm]);
        self.posterior.forward(t, p, hx)
    }

    pub(crate) fn prior_logits_on(&self, t: &mut Tape, p: &Staged, h: Var) -> Var {
        self.prior.forward(t, p, h)
    }

    pub(crate) fn obs_mean_on(&self, t: &mut Tape, p: &Staged, feat: Var) -> Var {
        self.obs_head.forward(t, p, feat)
    }

    pub(crate) fn reward_mean_on(&self, t: &mut Tape, p: &Staged, feat: Var, w_norm: Var) -> Var {
        let rin = t.concat_cols(&[feat, w_norm]);
        self.reward_head.forward(t, p, rin)
    }

    pub(crate) fn discount_logit_on(&self, t: &mut Tape, p: &Staged, feat: Var) -> Var {
        self.discount_head.forward(t, p, feat)
    }

    // ---- eager single-row inference -------------------------------------

    /// Zeroed latent for the start of an episode.
    pub fn begin(&self) -> LatentState {
        LatentState { h: vec![0.0; self.cfg.h_dim], z: vec![0.0; self.cfg.z_dim()] }
    }

    fn expect_len(&self, what: &str, got: usize, want: usize) -> Result<(), NnError> {
        if got != want {
            return Err(NnError::ShapeMismatch {
                context: format!("world model input {what}"),
                expected: want.to_string(),
                got: got.to_string(),
            });
        }
        Ok(())
    }

    /// Deterministic recurrent update from raw kPa actions.
    pub fn recurrent_step(&self, h: &[f32], z: &[f32], action_kpa: &[f32]) -> Result<Vec<f32>, NnError> {
        self.expect_len("h", h.len(), self.cfg.h_dim)?;
        self.expect_len("z", z.len(), self.cfg.z_dim())?;
        self.expect_len("action", action_kpa.len(), self.cfg.action_dim)?;
        let mut t = Tape::new();
        let p = self.store.stage(&mut t);
        let hv = t.input(1, h.len(), h);
        let zv = t.input(1, z.len(), z);
        let a_norm: Vec<f32> = action_kpa
            .iter()
            .map(|&a| (a / self.cfg.p_max_kpa).clamp(0.0, 1.0))
            .collect();
        let av = t.input(1, a_norm.len(), &a_norm);
        let out = self.step_h_on(&mut t, &p, hv, zv, av);
        Ok(t.val(out).to_vec())
    }

    /// Posterior logits over z from the current h and a raw observation.
    pub fn represent(&self, h: &[f32], obs: &Observation) -> Result<Vec<f32>, NnError> {
        self.expect_len("h", h.len(), self.cfg.h_dim)?;
        let x = normalize_obs(&obs.flatten(), self.cfg.p_max_kpa);
        let mut t = Tape::new();
        let p = self.store.stage(&mut t);
        let hv = t.input(1, h.len(), h);
        let xv = t.input(1, x.len(), &x);
        let out = self.posterior_logits_on(&mut t, &p, hv, xv);
        Ok(t.val(out).to_vec())
    }

    /// Prior logits over z from h alone.
    pub fn transition_prior(&self, h: &[f32]) -> Result<Vec<f32>, NnError> {
        self.expect_len("h", h.len(), self.cfg.h_dim)?;
        let mut t = Tape::new();
        let p = self.store.stage(&mut t);
        let hv = t.input(1, h.len(), h);
        let out = self.prior_logits_on(&mut t, &p, hv);
        Ok(t.val(out).to_vec())
    }

    /// Decoded observation mean in raw units.
    pub fn predict_observation(&self, h: &[f32], z: &[f32]) -> Result<Vec<f32>, NnError> {
        self.expect_len("h", h.len(), self.cfg.h_dim)?;
        self.expect_len("z", z.len(), self.cfg.z_dim())?;
        let mut t = Tape::new();
        let p = self.store.stage(&mut t);
        let hv = t.input(1, h.len(), h);
        let zv = t.input(1, z.len(), z);
        let feat = t.concat_cols(&[hv, zv]);
        let out = self.obs_mean_on(&mut t, &p, feat);
        Ok(denormalize_obs(t.val(out), self.cfg.p_max_kpa))
    }

    /// Predicted mean reward given a raw target window.
    pub fn predict_reward(&self, h: &[f32], z: &[f32], window_raw: &[f32]) -> Result<f32, NnError> {
        self.expect_len("h", h.len(), self.cfg.h_dim)?;
        self.expect_len("z", z.len(), self.cfg.z_dim())?;
        self.expect_len("window", window_raw.len(), self.cfg.window_dim())?;
        let w = normalize_window(window_raw);
        let mut t = Tape::new();
        let p = self.store.stage(&mut t);
        let hv = t.input(1, h.len(), h);
        let zv = t.input(1, z.len(), z);
        let wv = t.input(1, w.len(), &w);
        let feat = t.concat_cols(&[hv, zv]);
        let out = self.reward_mean_on(&mut t, &p, feat, wv);
        Ok(t.val(out)[0])
    }

    /// Predicted discount probability in (0,1).
    pub fn predict_discount(&self, h: &[f32], z: &[f32]) -> Result<f32, NnError> {
        self.expect_len("h", h.len(), self.cfg.h_dim)?;
        self.expect_len("z", z.len(), self.cfg.z_dim())?;
        let mut t = Tape::new();
        let p = self.store.stage(&mut t);
        let hv = t.input(1, h.len(), h);
        let zv = t.input(1, z.len(), z);
        let feat = t.concat_cols(&[hv, zv]);
        let logit = self.discount_logit_on(&mut t, &p, feat);
        Ok(1.0 / (1.0 + (-t.val(logit)[0]).exp()))
    }

    /// One closed-loop filtering step: advance h with the previous action
    /// (None at the episode head keeps the zeroed h), then draw z from the
    /// posterior given the live observation. `sample=false` takes the mode.
    pub fn filter_step(
        &self,
        lat: &LatentState,
        prev_action_kpa: Option<&[f32]>,
        obs: &Observation,
        rng: &mut ChaCha8Rng,
        sample: bool,
    ) -> Result<LatentState, NnError> {
        let h = match prev_action_kpa {
            Some(a) => self.recurrent_step(&lat.h, &lat.z, a)?,
            None => lat.h.clone(),
        };
        let logits = self.represent(&h, obs)?;
        let z = if sample {
            sample_one_hot(&logits, self.cfg.classes, rng)
        } else {
            mode_one_hot(&logits, self.cfg.classes)
        };
        Ok(LatentState { h, z })
    }

    // ---- training --------------------------------------------------------

    /// One optimizer step on a sequence batch. Returns metrics and the
    /// posterior latents for imagination starts.
    pub fn update(
        &mut self,
        batch: &SequenceBatch,
        opt: &mut Adam,
        lr: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<(WmMetrics, Latents), NnError> {
        batch.validate(&self.cfg)?;
        let cfg = self.cfg;
        let (b, l) = (batch.b, batch.l);
        let n = (b * l) as f32;

        let mut tape = Tape::new();
        let staged = self.store.stage(&mut tape);

        let mut h = tape.zeros(b, cfg.h_dim);
        let mut z_prev = tape.zeros(b, cfg.z_dim());

        let mut lp_obs_terms = Vec::with_capacity(l);
        let mut lp_reward_terms = Vec::with_capacity(l);
        let mut lp_discount_terms = Vec::with_capacity(l);
        let mut kl_terms = Vec::with_capacity(l);

        let mut h_all = Tensor::zeros(b * l, cfg.h_dim);
        let mut z_all = Tensor::zeros(b * l, cfg.z_dim());
        let mut kl_raw_sum = 0.0f64;
        let mut sq_err_sum = 0.0f64;

        for i in 0..l {
            if i > 0 {
                let a = step_block(&batch.prev_action, b, l, i, cfg.action_dim, |v, _| {
                    (v / cfg.p_max_kpa).clamp(0.0, 1.0)
                });
                let av = tape.input(b, cfg.action_dim, &a);
                h = self.step_h_on(&mut tape, &staged, h, z_prev, av);
            }
            let x_norm = step_block(&batch.obs, b, l, i, cfg.obs_dim, |v, d| {
                normalize_obs_component(v, d, cfg.obs_dim, cfg.p_max_kpa)
            });
            let xv = tape.input(b, cfg.obs_dim, &x_norm);

            let post = self.posterior_logits_on(&mut tape, &staged, h, xv);
            let prior = self.prior_logits_on(&mut tape, &staged, h);
            kl_raw_sum += kl_raw_f64(tape.val(post), tape.val(prior), cfg.classes);
            let kl = tape.kl_balanced(post, prior, cfg.classes, cfg.kl_alpha, cfg.free_nats);
            kl_terms.push(kl);

            let probs = tape.softmax(post, cfg.classes);
            let z = tape.st_one_hot(probs, cfg.classes, rng);

            let feat = tape.concat_cols(&[h, z]);
            let xm = self.obs_mean_on(&mut tape, &staged, feat);
            lp_obs_terms.push(tape.gauss_logprob(xm, &x_norm));
            sq_err_sum += sum_sq_err(tape.val(xm), &x_norm);

            let w_norm = step_block(&batch.reward_window, b, l, i, cfg.window_dim(), |v, d| {
                normalize_window_component(v, d, cfg.window_steps)
            });
            let wv = tape.input(b, cfg.window_dim(), &w_norm);
            let rm = self.reward_mean_on(&mut tape, &staged, feat, wv);
            let r_target = step_block(&batch.reward, b, l, i, 1, |v, _| v);
            lp_reward_terms.push(tape.gauss_logprob(rm, &r_target));

            let dl = self.discount_logit_on(&mut tape, &staged, feat);
            let d_target = step_block(&batch.episode_end, b, l, i, 1, |v, _| cfg.discount * (1.0 - v));
            lp_discount_terms.push(tape.bernoulli_logprob(dl, &d_target));

            copy_rows(&mut h_all, i * b, tape.val(h));
            copy_rows(&mut z_all, i * b, tape.val(z));
            z_prev = z;
        }

        let lp_obs = sum_vars(&mut tape, &lp_obs_terms);
        let lp_reward = sum_vars(&mut tape, &lp_reward_terms);
        let lp_discount = sum_vars(&mut tape, &lp_discount_terms);
        let kl_total = sum_vars(&mut tape, &kl_terms);

        // loss = mean over positions of (-log p(x) - log p(r) - log p(d)
        //        + kl_scale * KL)
        let nll = {
            let o = tape.scale(lp_obs, -1.0);
            let r = tape.scale(lp_reward, -1.0);
            let d = tape.scale(lp_discount, -1.0);
            let or = tape.add(o, r);
            tape.add(or, d)
        };
        let kl_scaled = tape.scale(kl_total, cfg.kl_scale);
        let total = tape.add(nll, kl_scaled);
        let loss = tape.scale(total, 1.0 / n);

        tape.backward(loss)?;
        let stats = opt.step(&mut self.store, &tape, &staged, lr)?;

        let metrics = WmMetrics {
            loss: tape.val(loss)[0],
            nll_obs: -tape.val(lp_obs)[0] / n,
            nll_reward: -tape.val(lp_reward)[0] / n,
            nll_discount: -tape.val(lp_discount)[0] / n,
            kl: tape.val(kl_total)[0] / n,
            kl_raw: (kl_raw_sum / n as f64) as f32,
            recon_mse: (sq_err_sum / (n as f64 * cfg.obs_dim as f64)) as f32,
            grad_norm: stats.grad_norm,
            clipped: stats.clipped,
        };
        Ok((metrics, Latents { h: h_all, z: z_all }))
    }

    /// Rolls the prior forward from the given starts under an action
    /// builder, on the caller's tape. `windows_raw` carries the acting
    /// window for each imagined step, horizon+1 entries (the last one is
    /// for the value bootstrap at the final state). The action builder
    /// receives (tape, h, z, normalized window) and must return actions in
    /// [0,1], shape (starts, action_dim).
    pub fn dream<F>(
        &self,
        tape: &mut Tape,
        p: &Staged,
        start_h: &Tensor,
        start_z: &Tensor,
        windows_raw: &[Tensor],
        horizon: usize,
        rng: &mut ChaCha8Rng,
        mut act: F,
    ) -> DreamRollout
    where
        F: FnMut(&mut Tape, Var, Var, Var) -> Var,
    {
        assert!(horizon >= 1, "dream horizon must be >= 1");
        assert_eq!(windows_raw.len(), horizon + 1, "dream needs horizon+1 window steps");
        let starts = start_h.rows;
        assert_eq!(start_z.rows, starts);

        let window_vars: Vec<Var> = windows_raw
            .iter()
            .map(|w| {
                let norm: Vec<f32> = w
                    .data
                    .iter()
                    .enumerate()
                    .map(|(idx, &v)| normalize_window_component(v, idx % w.cols, self.cfg.window_steps))
                    .collect();
                tape.input(w.rows, w.cols, &norm)
            })
            .collect();

        let mut hs = vec![tape.input(start_h.rows, start_h.cols, &start_h.data)];
        let mut zs = vec![tape.input(start_z.rows, start_z.cols, &start_z.data)];
        let mut actions = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        let mut discounts = Vec::with_capacity(horizon);

        for k in 0..horizon {
            let a = act(tape, hs[k], zs[k], window_vars[k]);
            let h1 = self.step_h_on(tape, p, hs[k], zs[k], a);
            let pl = self.prior_logits_on(tape, p, h1);
            let probs = tape.softmax(pl, self.cfg.classes);
            let z1 = tape.st_one_hot(probs, self.cfg.classes, rng);
            let feat = tape.concat_cols(&[h1, z1]);
            let rm = self.reward_mean_on(tape, p, feat, window_vars[k]);
            let dl = self.discount_logit_on(tape, p, feat);
            let dp = tape.sigmoid(dl);
            hs.push(h1);
            zs.push(z1);
            actions.push(a);
            rewards.push(rm);
            discounts.push(dp);
        }
        DreamRollout { starts, horizon, hs, zs, window_vars, actions, rewards, discounts }
    }

    /// Prior-only rollout from a single real observation: the posterior is
    /// used once at t=0, then the model runs blind, decoding angles from
    /// its own imagined latents. Decoded angles are projected onto the
    /// physically reachable band (hard stops +-20% of the travel).
    pub fn open_loop_rollout<F>(
        &self,
        obs0: &Observation,
        traj: &Trajectory,
        t_len: usize,
        stops_deg: (f32, f32),
        rng: &mut ChaCha8Rng,
        mut act: F,
    ) -> Result<Vec<f32>, NnError>
    where
        F: FnMut(&[f32], &[f32], &[f32]) -> Vec<f32>,
    {
        let margin = 0.2 * (stops_deg.1 - stops_deg.0);
        let (lo, hi) = (stops_deg.0 - margin, stops_deg.1 + margin);
        let mut h = vec![0.0; self.cfg.h_dim];
        let logits = self.represent(&h, obs0)?;
        let mut z = sample_one_hot(&logits, self.cfg.classes, rng);
        let mut angles = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let w = traj.window(t.min(traj.len() - 1), self.cfg.window_steps);
            let a = act(&h, &z, &w);
            h = self.recurrent_step(&h, &z, &a)?;
            let pl = self.transition_prior(&h)?;
            z = sample_one_hot(&pl, self.cfg.classes, rng);
            let decoded = self.predict_observation(&h, &z)?;
            angles.push(decoded[0].clamp(lo, hi));
        }
        Ok(angles)
    }
}

// ---- normalization ------------------------------------------------------

fn normalize_obs_component(v: f32, dim: usize, obs_dim: usize, p_max: f32) -> f32 {
    debug_assert_eq!(obs_dim, OBS_DIM, "normalization assumes angle/vel/p1/p2 layout");
    let scaled = match dim {
        0 => v / ANGLE_SCALE,
        1 => v / VEL_SCALE,
        _ => v / p_max,
    };
    scaled.clamp(-NORM_CLAMP, NORM_CLAMP)
}

fn normalize_window_component(v: f32, dim: usize, window_steps: usize) -> f32 {
    let scaled = if dim < window_steps { v / ANGLE_SCALE } else { v / VEL_SCALE };
    scaled.clamp(-NORM_CLAMP, NORM_CLAMP)
}

/// Normalized network view of a raw observation vector.
pub fn normalize_obs(raw: &[f32], p_max: f32) -> Vec<f32> {
    raw.iter()
        .enumerate()
        .map(|(d, &v)| normalize_obs_component(v, d, OBS_DIM, p_max))
        .collect()
}

/// Normalized network view of a raw target window ([angles..., vels...]).
pub fn normalize_window(raw: &[f32]) -> Vec<f32> {
    let steps = raw.len() / 2;
    raw.iter()
        .enumerate()
        .map(|(d, &v)| normalize_window_component(v, d, steps))
        .collect()
}

/// Inverse of `normalize_obs` (the clamp is not invertible; values at the
/// clamp edge map to the edge of the representable band).
pub fn denormalize_obs(norm: &[f32], p_max: f32) -> Vec<f32> {
    norm.iter()
        .enumerate()
        .map(|(d, &v)| match d {
            0 => v * ANGLE_SCALE,
            1 => v * VEL_SCALE,
            _ => v * p_max,
        })
        .collect()
}

// ---- batch plumbing -------------------------------------------------------

/// Gathers position i of every sequence into a (b, dim) row block,
/// applying `f(value, within-row index)` to each element.
fn step_block<F: Fn(f32, usize) -> f32>(
    data: &[f32],
    b: usize,
    l: usize,
    i: usize,
    dim: usize,
    f: F,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(b * dim);
    for j in 0..b {
        let base = (j * l + i) * dim;
        for d in 0..dim {
            out.push(f(data[base + d], d));
        }
    }
    out
}

fn copy_rows(dst: &mut Tensor, row_start: usize, src: &[f32]) {
    let start = row_start * dst.cols;
    dst.data[start..start + src.len()].copy_from_slice(src);
}

fn sum_vars(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    acc
}

fn sum_sq_err(pred: &[f32], target: &[f32]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = (p - t) as f64;
            d * d
        })
        .sum()
}

/// Exact KL(softmax(post) || softmax(prior)) summed over rows and groups,
/// in f64. Mathematically non-negative; the final clamp absorbs f64
/// rounding at the posterior==prior fixed point.
fn kl_raw_f64(post: &[f32], prior: &[f32], classes: usize) -> f64 {
    let mut total = 0.0f64;
    for (pc, qc) in post.chunks(classes).zip(prior.chunks(classes)) {
        let lp = log_softmax_f64(pc);
        let lq = log_softmax_f64(qc);
        let kl: f64 = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
        total += kl;
    }
    total.max(0.0)
}

fn log_softmax_f64(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f32::MIN, f32::max) as f64;
    let lse = logits.iter().map(|&x| ((x as f64) - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&x| x as f64 - lse).collect()
}
