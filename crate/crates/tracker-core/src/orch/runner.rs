//! Training loops and the train/finetune entry points.
//!
//! The serial loop (`--sync`) interleaves collection and learning in one
//! thread with every random draw taken from a single seeded chain, so a
//! fixed seed reproduces a run bit for bit. The threaded layouts split
//! collection from learning and pace the learners so the total number of
//! update cycles matches the serial schedule: after episode `k` (counting
//! from one) the learners are owed `learner_cycles * (k - warmup + 1)`
//! cycles, and the collector throttles itself when they fall more than two
//! episodes' worth behind.

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::nn::checkpoint::{self, Checkpoint};
use crate::nn::{Adam, AdamConfig, Tensor};
use crate::orch::buffer::ReplayBuffer;
use crate::orch::config::Config;
use crate::orch::episode::collect_episode;
use crate::orch::evalrun::{eval_policy, mean_mse};
use crate::orch::report::{Manifest, MetricsWriter};
use crate::orch::OrchError;
use crate::plant::{plant_perturb, Plant};
use crate::policy::Policy;
use crate::reward::RewardParams;
use crate::trajectory::{eval_suite, gen_random_walk, Trajectory};
use crate::world_model::{Latents, WorldModel, WmMetrics};
use crate::policy::PolicyMetrics;

/// Seeds for the held-out walks used to track progress during training.
/// These are disjoint from the per-episode walk seeds (drawn from the run's
/// seed chain) and from the fixed evaluation suite.
const HELD_OUT_WALK_SEEDS: [u64; 3] = [501, 502, 503];

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub episodes_run: usize,
    /// Mean held-out MSE at each evaluation point, in order.
    pub eval_history: Vec<f64>,
    /// True when the plateau rule ended the run before the episode budget.
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub pre_perturb_mse: f64,
    pub post_perturb_mse: f64,
    pub post_finetune_mse: f64,
    pub episodes_run: usize,
}

/// Best recent eval hasn't beaten the best earlier eval by at least `frac`.
fn plateaued(history: &[f64], window: usize, frac: f64) -> bool {
    if window == 0 || history.len() <= window {
        return false;
    }
    let best = |xs: &[f64]| xs.iter().copied().fold(f64::INFINITY, f64::min);
    let earlier = best(&history[..history.len() - window]);
    let recent = best(&history[history.len() - window..]);
    recent > earlier * (1.0 - frac)
}

/// Cycles the learners are owed once `done` episodes have been collected.
fn cycle_target(done: usize, warmup: usize, cycles: usize) -> usize {
    if done >= warmup.max(1) {
        (done - warmup.max(1) + 1) * cycles
    } else {
        0
    }
}

fn held_out_walks(cfg: &Config) -> Result<Vec<Trajectory>, OrchError> {
    HELD_OUT_WALK_SEEDS
        .iter()
        .map(|&s| {
            Ok(gen_random_walk(
                cfg.train.traj_lo,
                cfg.train.traj_hi,
                cfg.train.traj_max_step,
                cfg.eval.t_len,
                s,
            )?)
        })
        .collect()
}

/// Picks imagination start states from a batch of posterior latents and
/// draws a fresh target window sequence for each: a new random walk with a
/// random offset, previewed one control step further per imagined step.
pub fn dream_inputs(
    lat: &Latents,
    starts: usize,
    horizon: usize,
    window_steps: usize,
    lo: f64,
    hi: f64,
    max_step: f64,
    walk_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor, Vec<Tensor>), OrchError> {
    let rows = lat.h.rows;
    if rows == 0 || starts == 0 {
        return Err(OrchError::Buffer("no latents to start imagination from".into()));
    }
    if walk_len < horizon + 1 {
        return Err(OrchError::Config(format!(
            "episode_len {walk_len} shorter than imagination horizon {horizon} + 1"
        )));
    }
    let wd = 2 * window_steps;
    let mut h0 = Tensor::zeros(starts, lat.h.cols);
    let mut z0 = Tensor::zeros(starts, lat.z.cols);
    let mut windows: Vec<Tensor> = (0..=horizon).map(|_| Tensor::zeros(starts, wd)).collect();
    let max_off = walk_len - 1 - horizon;
    for s in 0..starts {
        let r = rng.gen_range(0..rows);
        let hc = lat.h.cols;
        let zc = lat.z.cols;
        h0.data[s * hc..(s + 1) * hc].copy_from_slice(&lat.h.data[r * hc..(r + 1) * hc]);
        z0.data[s * zc..(s + 1) * zc].copy_from_slice(&lat.z.data[r * zc..(r + 1) * zc]);
        let walk = gen_random_walk(lo, hi, max_step, walk_len, rng.gen())?;
        let off = rng.gen_range(0..=max_off);
        for (k, w) in windows.iter_mut().enumerate() {
            w.data[s * wd..(s + 1) * wd].copy_from_slice(&walk.window(off + k, window_steps));
        }
    }
    Ok((h0, z0, windows))
}

pub fn save_models(path: &Path, wm: &WorldModel, policy: &Policy) -> Result<(), OrchError> {
    checkpoint::save(
        path,
        &[("wm", &wm.store), ("actor", &policy.actor_store), ("critic", &policy.critic_store)],
    )?;
    Ok(())
}

/// Rebuilds models from the config and loads their parameters from a
/// checkpoint; shapes must match the config exactly.
pub fn load_models(cfg: &Config, path: &Path) -> Result<(WorldModel, Policy), OrchError> {
    let mut wm = WorldModel::new(cfg.wm_config(), 0)?;
    let mut policy = Policy::new(cfg.policy_config(), 0)?;
    let ck = Checkpoint::load(path)
        .map_err(|e| OrchError::Io(format!("loading checkpoint {}: {e}", path.display())))?;
    ck.load_into("wm", &mut wm.store)?;
    ck.load_into("actor", &mut policy.actor_store)?;
    ck.load_into("critic", &mut policy.critic_store)?;
    Ok((wm, policy))
}

fn wm_event(m: &WmMetrics, cycle: usize) -> serde_json::Value {
    json!({
        "cycle": cycle,
        "loss": m.loss,
        "nll_obs": m.nll_obs,
        "nll_reward": m.nll_reward,
        "nll_discount": m.nll_discount,
        "kl": m.kl,
        "kl_raw": m.kl_raw,
        "recon_mse": m.recon_mse,
        "grad_norm": m.grad_norm,
    })
}

fn policy_event(m: &PolicyMetrics, cycle: usize) -> serde_json::Value {
    json!({
        "cycle": cycle,
        "actor_loss": m.actor_loss,
        "critic_loss": m.critic_loss,
        "entropy": m.entropy,
        "mean_value": m.mean_value,
        "mean_return": m.mean_return,
        "actor_grad_norm": m.actor_grad_norm,
        "critic_grad_norm": m.critic_grad_norm,
    })
}

/// Everything a training run needs beyond the config itself.
struct TrainPlan {
    budget: usize,
    explore_episodes: usize,
    loop_seed: u64,
}

/// Runs the training loop, serial or threaded, and returns the trained
/// models together with the metrics writer so callers can append run-level
/// events before closing it.
#[allow(clippy::too_many_arguments)]
fn train_core(
    cfg: &Config,
    wm: WorldModel,
    policy: Policy,
    plan: TrainPlan,
    sync: bool,
    metrics: MetricsWriter,
    latest_ckpt: &Path,
) -> Result<(WorldModel, Policy, MetricsWriter, TrainOutcome), OrchError> {
    let mut master = ChaCha8Rng::seed_from_u64(plan.loop_seed);
    let collect_seed: u64 = master.gen();
    let batch_seed: u64 = master.gen();
    let wm_seed: u64 = master.gen();
    let dream_seed: u64 = master.gen();
    let eval_base: u64 = master.gen();

    let eval_trajs = held_out_walks(cfg)?;

    if sync {
        train_serial(
            cfg,
            wm,
            policy,
            plan,
            metrics,
            latest_ckpt,
            &eval_trajs,
            [collect_seed, batch_seed, wm_seed, dream_seed],
            eval_base,
        )
    } else {
        train_threaded(
            cfg,
            wm,
            policy,
            plan,
            metrics,
            latest_ckpt,
            &eval_trajs,
            [collect_seed, batch_seed, wm_seed, dream_seed],
            eval_base,
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn train_serial(
    cfg: &Config,
    mut wm: WorldModel,
    mut policy: Policy,
    plan: TrainPlan,
    mut metrics: MetricsWriter,
    latest_ckpt: &Path,
    eval_trajs: &[Trajectory],
    seeds: [u64; 4],
    eval_base: u64,
) -> Result<(WorldModel, Policy, MetricsWriter, TrainOutcome), OrchError> {
    let t = &cfg.train;
    let [collect_seed, batch_seed, wm_seed, dream_seed] = seeds;
    let mut collect_rng = ChaCha8Rng::seed_from_u64(collect_seed);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(batch_seed);
    let mut wm_rng = ChaCha8Rng::seed_from_u64(wm_seed);
    let mut dream_rng = ChaCha8Rng::seed_from_u64(dream_seed);

    let mut wm_opt = Adam::new(&wm.store, AdamConfig::default());
    let mut actor_opt = Adam::new(&policy.actor_store, AdamConfig::default());
    let mut critic_opt = Adam::new(&policy.critic_store, AdamConfig::default());

    let mut buffer = ReplayBuffer::new(t.buffer_capacity);
    let mut plant = Plant::new(cfg.plant)?;
    let params = RewardParams::default();
    let p_max = cfg.plant.p_max();

    let mut history: Vec<f64> = Vec::new();
    let mut cycle = 0usize;
    let mut episodes_run = 0usize;
    let mut stopped_early = false;

    for ep_idx in 0..plan.budget {
        let traj = gen_random_walk(
            t.traj_lo,
            t.traj_hi,
            t.traj_max_step,
            t.episode_len,
            collect_rng.gen(),
        )?;
        let plant_seed: u64 = collect_rng.gen();
        let explore =
            if ep_idx < plan.explore_episodes { t.explore_noise_frac * p_max } else { 0.0 };
        let ep = collect_episode(
            &mut plant,
            &wm,
            &policy,
            &traj,
            t.episode_len,
            plant_seed,
            explore,
            &mut collect_rng,
            true,
            &params,
        )?;
        let done = ep_idx + 1;
        metrics.event(
            "episode",
            json!({
                "episode": done,
                "reward_mean": ep.reward_mean(),
                "tracking_mse": ep.tracking_mse(),
                "explore_std_kpa": explore,
            }),
        )?;
        buffer.push(ep);
        episodes_run = done;

        if buffer.len() >= t.warmup_episodes.max(1) {
            for _ in 0..t.learner_cycles {
                let batch = buffer.sample(t.batch_size, t.seq_len, &wm.cfg, &mut batch_rng)?;
                let (wmm, lat) = wm.update(&batch, &mut wm_opt, t.lr_model, &mut wm_rng)?;
                metrics.event("model_update", wm_event(&wmm, cycle))?;
                let (h0, z0, windows) = dream_inputs(
                    &lat,
                    t.dream_starts,
                    policy.cfg.horizon,
                    wm.cfg.window_steps,
                    t.traj_lo,
                    t.traj_hi,
                    t.traj_max_step,
                    t.episode_len,
                    &mut dream_rng,
                )?;
                let pm = policy.actor_critic_update(
                    &wm,
                    &h0,
                    &z0,
                    &windows,
                    &mut actor_opt,
                    &mut critic_opt,
                    t.lr_actor,
                    t.lr_critic,
                    &mut dream_rng,
                )?;
                metrics.event("policy_update", policy_event(&pm, cycle))?;
                cycle += 1;
            }
        }

        let eval_now = done >= t.warmup_episodes.max(1)
            && (done % t.eval_every.max(1) == 0 || done == plan.budget);
        if eval_now {
            let results = eval_policy(cfg, &wm, &policy, eval_trajs, cfg.eval.t_len, eval_base)?;
            let m = mean_mse(&results);
            history.push(m);
            metrics.event(
                "eval",
                json!({
                    "episode": done,
                    "mean_mse": m,
                    "per_trajectory": results.iter().map(|r| r.mse).collect::<Vec<_>>(),
                }),
            )?;
            save_models(latest_ckpt, &wm, &policy)?;
            if plateaued(&history, t.plateau_evals, t.plateau_frac) {
                stopped_early = true;
                break;
            }
        }
    }

    let outcome = TrainOutcome { episodes_run, eval_history: history, stopped_early };
    Ok((wm, policy, metrics, outcome))
}

#[allow(clippy::too_many_arguments)]
fn train_threaded(
    cfg: &Config,
    wm: WorldModel,
    policy: Policy,
    plan: TrainPlan,
    metrics: MetricsWriter,
    latest_ckpt: &Path,
    eval_trajs: &[Trajectory],
    seeds: [u64; 4],
    eval_base: u64,
) -> Result<(WorldModel, Policy, MetricsWriter, TrainOutcome), OrchError> {
    let t = &cfg.train;
    let [collect_seed, batch_seed, wm_seed, dream_seed] = seeds;
    let warmup = t.warmup_episodes.max(1);
    let cycles = t.learner_cycles;
    let budget = plan.budget;
    let split_learners = t.threads >= 3;

    let wm_m = Mutex::new(wm);
    let policy_m = Mutex::new(policy);
    let buffer_m = Mutex::new(ReplayBuffer::new(t.buffer_capacity));
    let metrics_m = Mutex::new(metrics);
    let history_m = Mutex::new(Vec::<f64>::new());
    let latents_m = Mutex::new(Option::<Latents>::None);

    let stop = AtomicBool::new(false);
    let collector_done = AtomicBool::new(false);
    let wm_learner_done = AtomicBool::new(false);
    let episodes_done = AtomicUsize::new(0);
    let wm_cycles = AtomicUsize::new(0);
    let ac_cycles = AtomicUsize::new(0);
    let stopped_early = AtomicBool::new(false);

    // Learner progress that gates the collector: the slower of the two
    // counters in the split layout, the single counter otherwise.
    let learner_progress = || {
        if split_learners {
            wm_cycles.load(Ordering::SeqCst).min(ac_cycles.load(Ordering::SeqCst))
        } else {
            ac_cycles.load(Ordering::SeqCst)
        }
    };

    let collector = || -> Result<(), OrchError> {
        let mut collect_rng = ChaCha8Rng::seed_from_u64(collect_seed);
        let mut plant = Plant::new(cfg.plant)?;
        let params = RewardParams::default();
        let p_max = cfg.plant.p_max();
        for ep_idx in 0..budget {
            // Stay at most two episodes' worth of cycles ahead of the
            // learners.
            loop {
                if stop.load(Ordering::SeqCst) {
                    return Ok(());
                }
                let owed = cycle_target(episodes_done.load(Ordering::SeqCst), warmup, cycles);
                if learner_progress() + 2 * cycles >= owed {
                    break;
                }
                thread::sleep(Duration::from_millis(2));
            }
            let traj = gen_random_walk(
                t.traj_lo,
                t.traj_hi,
                t.traj_max_step,
                t.episode_len,
                collect_rng.gen(),
            )?;
            let plant_seed: u64 = collect_rng.gen();
            let explore =
                if ep_idx < plan.explore_episodes { t.explore_noise_frac * p_max } else { 0.0 };
            let (wm_c, policy_c) = {
                let wm_g = wm_m.lock().unwrap();
                let p_g = policy_m.lock().unwrap();
                (wm_g.clone(), p_g.clone())
            };
            let ep = collect_episode(
                &mut plant,
                &wm_c,
                &policy_c,
                &traj,
                t.episode_len,
                plant_seed,
                explore,
                &mut collect_rng,
                true,
                &params,
            )?;
            let done = ep_idx + 1;
            metrics_m.lock().unwrap().event(
                "episode",
                json!({
                    "episode": done,
                    "reward_mean": ep.reward_mean(),
                    "tracking_mse": ep.tracking_mse(),
                    "explore_std_kpa": explore,
                }),
            )?;
            buffer_m.lock().unwrap().push(ep);
            episodes_done.store(done, Ordering::SeqCst);

            let eval_now =
                done >= warmup && (done % t.eval_every.max(1) == 0 || done == budget);
            if eval_now {
                let (wm_c, policy_c) = {
                    let wm_g = wm_m.lock().unwrap();
                    let p_g = policy_m.lock().unwrap();
                    (wm_g.clone(), p_g.clone())
                };
                let results =
                    eval_policy(cfg, &wm_c, &policy_c, eval_trajs, cfg.eval.t_len, eval_base)?;
                let m = mean_mse(&results);
                let plateau = {
                    let mut hist = history_m.lock().unwrap();
                    hist.push(m);
                    plateaued(&hist, t.plateau_evals, t.plateau_frac)
                };
                metrics_m.lock().unwrap().event(
                    "eval",
                    json!({
                        "episode": done,
                        "mean_mse": m,
                        "per_trajectory": results.iter().map(|r| r.mse).collect::<Vec<_>>(),
                    }),
                )?;
                save_models(latest_ckpt, &wm_c, &policy_c)?;
                if plateau {
                    stopped_early.store(true, Ordering::SeqCst);
                    stop.store(true, Ordering::SeqCst);
                    return Ok(());
                }
            }
        }
        Ok(())
    };

    // One world-model update cycle; shared by both learner layouts.
    let wm_cycle = |batch_rng: &mut ChaCha8Rng,
                    wm_rng: &mut ChaCha8Rng,
                    wm_opt: &mut Adam,
                    cycle: usize|
     -> Result<Latents, OrchError> {
        let batch = {
            let buf = buffer_m.lock().unwrap();
            let wm_cfg = wm_m.lock().unwrap().cfg;
            buf.sample(t.batch_size, t.seq_len, &wm_cfg, batch_rng)?
        };
        let (wmm, lat) = {
            let mut wm_g = wm_m.lock().unwrap();
            wm_g.update(&batch, wm_opt, t.lr_model, wm_rng)?
        };
        metrics_m.lock().unwrap().event("model_update", wm_event(&wmm, cycle))?;
        Ok(lat)
    };

    // One actor-critic update cycle from the given start latents.
    let ac_cycle = |lat: &Latents,
                    dream_rng: &mut ChaCha8Rng,
                    actor_opt: &mut Adam,
                    critic_opt: &mut Adam,
                    cycle: usize|
     -> Result<(), OrchError> {
        let wm_c = wm_m.lock().unwrap().clone();
        let horizon = {
            let p_g = policy_m.lock().unwrap();
            p_g.cfg.horizon
        };
        let (h0, z0, windows) = dream_inputs(
            lat,
            t.dream_starts,
            horizon,
            wm_c.cfg.window_steps,
            t.traj_lo,
            t.traj_hi,
            t.traj_max_step,
            t.episode_len,
            dream_rng,
        )?;
        let pm = {
            let mut p_g = policy_m.lock().unwrap();
            p_g.actor_critic_update(
                &wm_c,
                &h0,
                &z0,
                &windows,
                actor_opt,
                critic_opt,
                t.lr_actor,
                t.lr_critic,
                dream_rng,
            )?
        };
        metrics_m.lock().unwrap().event("policy_update", policy_event(&pm, cycle))?;
        Ok(())
    };

    // Combined learner for the two-thread layout.
    let learner_combined = || -> Result<(), OrchError> {
        let mut batch_rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let mut wm_rng = ChaCha8Rng::seed_from_u64(wm_seed);
        let mut dream_rng = ChaCha8Rng::seed_from_u64(dream_seed);
        let mut wm_opt = Adam::new(&wm_m.lock().unwrap().store, AdamConfig::default());
        let (mut actor_opt, mut critic_opt) = {
            let p_g = policy_m.lock().unwrap();
            (
                Adam::new(&p_g.actor_store, AdamConfig::default()),
                Adam::new(&p_g.critic_store, AdamConfig::default()),
            )
        };
        loop {
            if stop.load(Ordering::SeqCst) {
                return Ok(());
            }
            let owed = cycle_target(episodes_done.load(Ordering::SeqCst), warmup, cycles);
            let done_cycles = ac_cycles.load(Ordering::SeqCst);
            if done_cycles >= owed {
                if collector_done.load(Ordering::SeqCst) {
                    return Ok(());
                }
                thread::sleep(Duration::from_millis(2));
                continue;
            }
            let lat = wm_cycle(&mut batch_rng, &mut wm_rng, &mut wm_opt, done_cycles)?;
            ac_cycle(&lat, &mut dream_rng, &mut actor_opt, &mut critic_opt, done_cycles)?;
            ac_cycles.fetch_add(1, Ordering::SeqCst);
        }
    };

    // Model learner for the three-thread layout: updates the world model
    // and publishes the posterior latents for the policy learner.
    let learner_model = || -> Result<(), OrchError> {
        let mut batch_rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let mut wm_rng = ChaCha8Rng::seed_from_u64(wm_seed);
        let mut wm_opt = Adam::new(&wm_m.lock().unwrap().store, AdamConfig::default());
        loop {
            if stop.load(Ordering::SeqCst) {
                return Ok(());
            }
            let owed = cycle_target(episodes_done.load(Ordering::SeqCst), warmup, cycles);
            let done_cycles = wm_cycles.load(Ordering::SeqCst);
            if done_cycles >= owed {
                if collector_done.load(Ordering::SeqCst) {
                    return Ok(());
                }
                thread::sleep(Duration::from_millis(2));
                continue;
            }
            let lat = wm_cycle(&mut batch_rng, &mut wm_rng, &mut wm_opt, done_cycles)?;
            *latents_m.lock().unwrap() = Some(lat);
            wm_cycles.fetch_add(1, Ordering::SeqCst);
        }
    };

    // Policy learner for the three-thread layout: consumes the latest
    // published latents, never running ahead of the model learner.
    let learner_policy = || -> Result<(), OrchError> {
        let mut dream_rng = ChaCha8Rng::seed_from_u64(dream_seed);
        let (mut actor_opt, mut critic_opt) = {
            let p_g = policy_m.lock().unwrap();
            (
                Adam::new(&p_g.actor_store, AdamConfig::default()),
                Adam::new(&p_g.critic_store, AdamConfig::default()),
            )
        };
        loop {
            if stop.load(Ordering::SeqCst) {
                return Ok(());
            }
            let owed = cycle_target(episodes_done.load(Ordering::SeqCst), warmup, cycles)
                .min(wm_cycles.load(Ordering::SeqCst));
            let done_cycles = ac_cycles.load(Ordering::SeqCst);
            if done_cycles >= owed {
                if collector_done.load(Ordering::SeqCst) && wm_learner_done.load(Ordering::SeqCst)
                {
                    return Ok(());
                }
                thread::sleep(Duration::from_millis(2));
                continue;
            }
            let lat = {
                let g = latents_m.lock().unwrap();
                g.clone().expect("model learner published latents before advancing its counter")
            };
            ac_cycle(&lat, &mut dream_rng, &mut actor_opt, &mut critic_opt, done_cycles)?;
            ac_cycles.fetch_add(1, Ordering::SeqCst);
        }
    };

    let run_and_flag = |name: &str, f: &mut dyn FnMut() -> Result<(), OrchError>| {
        let r = f().map_err(|e| OrchError::Io(format!("{name} thread: {e}")));
        if r.is_err() {
            stop.store(true, Ordering::SeqCst);
        }
        r
    };

    let (r_collect, r_learn) = thread::scope(|s| {
        let hc = s.spawn(|| {
            let mut f = collector;
            let r = run_and_flag("collector", &mut f);
            collector_done.store(true, Ordering::SeqCst);
            r
        });
        let hl: Vec<_> = if split_learners {
            vec![
                s.spawn(|| {
                    let mut f = learner_model;
                    let r = run_and_flag("model learner", &mut f);
                    wm_learner_done.store(true, Ordering::SeqCst);
                    r
                }),
                s.spawn(|| {
                    let mut f = learner_policy;
                    run_and_flag("policy learner", &mut f)
                }),
            ]
        } else {
            vec![s.spawn(|| {
                let mut f = learner_combined;
                run_and_flag("learner", &mut f)
            })]
        };
        let rc = hc.join().unwrap_or_else(|_| Err(OrchError::Io("collector panicked".into())));
        let rl: Vec<_> = hl
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(OrchError::Io("learner panicked".into()))))
            .collect();
        (rc, rl)
    });

    r_collect?;
    for r in r_learn {
        r?;
    }

    let wm = wm_m.into_inner().unwrap();
    let policy = policy_m.into_inner().unwrap();
    let metrics = metrics_m.into_inner().unwrap();
    let outcome = TrainOutcome {
        episodes_run: episodes_done.load(Ordering::SeqCst),
        eval_history: history_m.into_inner().unwrap(),
        stopped_early: stopped_early.load(Ordering::SeqCst),
    };
    Ok((wm, policy, metrics, outcome))
}

/// Trains fresh models under `cfg`, writing metrics, checkpoints, and a
/// manifest into `out`.
pub fn run_training(
    cfg: &Config,
    seed: u64,
    sync: bool,
    out: &Path,
) -> Result<TrainOutcome, OrchError> {
    cfg.validate()?;
    std::fs::create_dir_all(out)
        .map_err(|e| OrchError::Io(format!("cannot create {}: {e}", out.display())))?;

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let wm = WorldModel::new(cfg.wm_config(), master.gen())?;
    let policy = Policy::new(cfg.policy_config(), master.gen())?;
    let loop_seed: u64 = master.gen();

    let metrics_path = out.join("metrics.jsonl");
    let metrics = MetricsWriter::create(&metrics_path)?;
    let plan = TrainPlan {
        budget: cfg.train.episodes,
        explore_episodes: cfg.train.explore_episodes,
        loop_seed,
    };
    let (wm, policy, mut metrics, outcome) =
        train_core(cfg, wm, policy, plan, sync, metrics, &out.join("latest.ckpt"))?;
    metrics.event(
        "train_done",
        json!({
            "episodes": outcome.episodes_run,
            "stopped_early": outcome.stopped_early,
            "final_mean_mse": outcome.eval_history.last(),
        }),
    )?;
    metrics.flush()?;
    drop(metrics);

    let ckpt_path = out.join("checkpoint.ckpt");
    save_models(&ckpt_path, &wm, &policy)?;

    let mut manifest = Manifest::new("train", seed, &cfg.canonical_toml());
    manifest.episodes_run = outcome.episodes_run;
    manifest.eval_history = outcome.eval_history.clone();
    manifest.final_mean_mse = outcome.eval_history.last().copied();
    manifest.add_artifact(&ckpt_path)?;
    manifest.add_artifact(&metrics_path)?;
    manifest.save(&out.join("manifest.json"))?;
    Ok(outcome)
}

/// Loads a checkpoint, perturbs the plant, and adapts to it on a quarter of
/// the configured episode budget. Reports tracking MSE on the fixed
/// evaluation suite before the perturbation, after it, and after
/// adaptation.
pub fn run_finetune(
    cfg: &Config,
    seed: u64,
    sync: bool,
    ckpt: &Path,
    perturb: f32,
    out: &Path,
) -> Result<FinetuneOutcome, OrchError> {
    cfg.validate()?;
    std::fs::create_dir_all(out)
        .map_err(|e| OrchError::Io(format!("cannot create {}: {e}", out.display())))?;

    let (wm, policy) = load_models(cfg, ckpt)?;
    let suite = eval_suite(cfg.eval.lo, cfg.eval.hi)?;
    let t_len = cfg.eval.t_len;
    let base = cfg.eval.base_seed;

    let pre = mean_mse(&eval_policy(cfg, &wm, &policy, &suite, t_len, base)?);

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut pcfg = cfg.clone();
    pcfg.plant = plant_perturb(&cfg.plant, perturb, master.gen())?;
    let post = mean_mse(&eval_policy(&pcfg, &wm, &policy, &suite, t_len, base)?);

    let budget = (cfg.train.episodes / 4).max(1);
    let metrics_path = out.join("metrics.jsonl");
    let metrics = MetricsWriter::create(&metrics_path)?;
    let plan = TrainPlan { budget, explore_episodes: 0, loop_seed: master.gen() };
    let (wm, policy, mut metrics, outcome) =
        train_core(&pcfg, wm, policy, plan, sync, metrics, &out.join("latest.ckpt"))?;
    let fin = mean_mse(&eval_policy(&pcfg, &wm, &policy, &suite, t_len, base)?);
    metrics.event(
        "finetune_done",
        json!({
            "episodes": outcome.episodes_run,
            "pre_perturb_mse": pre,
            "post_perturb_mse": post,
            "post_finetune_mse": fin,
        }),
    )?;
    metrics.flush()?;
    drop(metrics);

    let ckpt_path = out.join("checkpoint.ckpt");
    save_models(&ckpt_path, &wm, &policy)?;

    let csv_path = out.join("finetune.csv");
    crate::orch::report::write_table_csv(
        &csv_path,
        &["phase", "mean_mse"],
        &[
            vec!["pre_perturb".into(), format!("{pre}")],
            vec!["post_perturb".into(), format!("{post}")],
            vec!["post_finetune".into(), format!("{fin}")],
        ],
    )?;

    let mut manifest = Manifest::new("finetune", seed, &pcfg.canonical_toml());
    manifest.episodes_run = outcome.episodes_run;
    manifest.eval_history = outcome.eval_history.clone();
    manifest.final_mean_mse = Some(fin);
    manifest.add_artifact(&ckpt_path)?;
    manifest.add_artifact(&metrics_path)?;
    manifest.add_artifact(&csv_path)?;
    manifest.save(&out.join("manifest.json"))?;

    Ok(FinetuneOutcome {
        pre_perturb_mse: pre,
        post_perturb_mse: post,
        post_finetune_mse: fin,
        episodes_run: outcome.episodes_run,
    })
}
