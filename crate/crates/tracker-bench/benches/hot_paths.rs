//! Benchmarks for the three paths that dominate a training run: plant
//! stepping, world-model updates, and imagination-based policy updates.

use std::time::Duration;

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tracker_core::orch::runner::dream_inputs;
use tracker_core::plant::{Action, Plant, PlantConfig};
use tracker_core::policy::{Policy, PolicyConfig};
use tracker_core::nn::{Adam, AdamConfig};
use tracker_core::world_model::{SequenceBatch, WmConfig, WorldModel};

/// A physically plausible random batch at training shapes; model updates
/// cost the same regardless of whether the data came from the plant.
fn synthetic_batch(cfg: &WmConfig, b: usize, l: usize, rng: &mut ChaCha8Rng) -> SequenceBatch {
    let n = b * l;
    let wd = cfg.window_dim();
    let mut batch = SequenceBatch {
        b,
        l,
        obs: Vec::with_capacity(n * cfg.obs_dim),
        prev_action: Vec::with_capacity(n * cfg.action_dim),
        reward: Vec::with_capacity(n),
        reward_window: Vec::with_capacity(n * wd),
        episode_end: vec![0.0; n],
    };
    for _ in 0..n {
        batch.obs.extend_from_slice(&[
            rng.gen_range(-25.0..40.0),
            rng.gen_range(-50.0..50.0),
            rng.gen_range(0.0..cfg.p_max_kpa),
            rng.gen_range(0.0..cfg.p_max_kpa),
        ]);
        for _ in 0..cfg.action_dim {
            batch.prev_action.push(rng.gen_range(0.0..cfg.p_max_kpa));
        }
        batch.reward.push(rng.gen_range(-1.0..1.0));
        for k in 0..wd {
            // First half angles, second half velocities.
            let v = if k < wd / 2 { rng.gen_range(-25.0..40.0) } else { rng.gen_range(-10.0..10.0) };
            batch.reward_window.push(v);
        }
    }
    batch.validate(cfg).expect("synthetic batch is well formed");
    batch
}

fn bench_plant_step(c: &mut Criterion) {
    let mut plant = Plant::new(PlantConfig::default()).unwrap();
    plant.reset(1);
    let action = Action { pressures_kpa: [150.0, 90.0] };
    c.bench_function("plant_control_step", |b| {
        b.iter(|| plant.step(black_box(&action)).unwrap())
    });
}

fn bench_learning(c: &mut Criterion) {
    let wm_cfg = WmConfig::default();
    let mut wm = WorldModel::new(wm_cfg, 1).unwrap();
    let mut policy = Policy::new(PolicyConfig::from_wm(&wm_cfg), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = synthetic_batch(&wm_cfg, 16, 50, &mut rng);

    let mut wm_opt = Adam::new(&wm.store, AdamConfig::default());
    let mut actor_opt = Adam::new(&policy.actor_store, AdamConfig::default());
    let mut critic_opt = Adam::new(&policy.critic_store, AdamConfig::default());

    let mut g = c.benchmark_group("learning");
    g.sample_size(10);
    g.warm_up_time(Duration::from_secs(1));
    g.measurement_time(Duration::from_secs(15));

    g.bench_function("world_model_update_b16_l50", |b| {
        b.iter(|| wm.update(black_box(&batch), &mut wm_opt, 4e-4, &mut rng).unwrap())
    });

    let (_, latents) = wm.update(&batch, &mut wm_opt, 4e-4, &mut rng).unwrap();
    let horizon = policy.cfg.horizon;
    g.bench_function("actor_critic_update_128_starts_h15", |b| {
        b.iter(|| {
            let (h0, z0, windows) = dream_inputs(
                &latents, 128, horizon, wm_cfg.window_steps, -25.0, 40.0, 3.0, 200, &mut rng,
            )
            .unwrap();
            policy
                .actor_critic_update(
                    &wm,
                    black_box(&h0),
                    &z0,
                    &windows,
                    &mut actor_opt,
                    &mut critic_opt,
                    4e-4,
                    2e-4,
                    &mut rng,
                )
                .unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, bench_plant_step, bench_learning);
criterion_main!(benches);
