//! Entry points for the non-training commands: each one loads what it
//! needs, writes its artifacts under the output directory, and returns a
//! small summary the caller can print.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::orch::config::Config;
use crate::orch::evalrun::{
    compare_controllers, direction_agreement, episode_trace, eval_policy, mean_mse,
    open_loop_versus_plant,
};
use crate::orch::report::{write_table_csv, write_trace_csv, Manifest};
use crate::orch::runner::load_models;
use crate::orch::OrchError;
use crate::pid::{tune_pid, PidGains};
use crate::trajectory::{eval_suite, gen_random_walk};

/// File-name-safe version of a trajectory name.
fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

fn ensure_dir(out: &Path) -> Result<(), OrchError> {
    std::fs::create_dir_all(out)
        .map_err(|e| OrchError::Io(format!("cannot create {}: {e}", out.display())))
}

#[derive(Debug, Serialize)]
pub struct EvaluateSummary {
    pub mean_mse: f64,
    pub trajectories: Vec<TrajMse>,
}

#[derive(Debug, Serialize)]
pub struct TrajMse {
    pub name: String,
    pub mse: f64,
}

/// Runs the learned controller over the fixed evaluation suite, writing
/// per-trajectory MSE and full traces. The run seed offsets the plant reset
/// seeds so repeated evaluations can draw fresh noise streams.
pub fn verb_evaluate(
    cfg: &Config,
    seed: u64,
    ckpt: &Path,
    out: &Path,
) -> Result<EvaluateSummary, OrchError> {
    cfg.validate()?;
    ensure_dir(out)?;
    let (wm, policy) = load_models(cfg, ckpt)?;
    let suite = eval_suite(cfg.eval.lo, cfg.eval.hi)?;
    let base = cfg.eval.base_seed.wrapping_add(seed);
    let results = eval_policy(cfg, &wm, &policy, &suite, cfg.eval.t_len, base)?;

    let mut manifest = Manifest::new("evaluate", seed, &cfg.canonical_toml());
    let mse_path = out.join("eval_mse.csv");
    let rows: Vec<Vec<String>> =
        results.iter().map(|r| vec![r.name.clone(), format!("{}", r.mse)]).collect();
    write_table_csv(&mse_path, &["trajectory", "mse_deg2"], &rows)?;
    manifest.add_artifact(&mse_path)?;

    for (i, r) in results.iter().enumerate() {
        let path = out.join(format!("trace_{:02}_{}.csv", i, slug(&r.name)));
        write_trace_csv(&path, &episode_trace(&r.episode))?;
        manifest.add_artifact(&path)?;
    }

    let mean = mean_mse(&results);
    manifest.final_mean_mse = Some(mean);
    manifest.save(&out.join("manifest.json"))?;
    Ok(EvaluateSummary {
        mean_mse: mean,
        trajectories: results
            .into_iter()
            .map(|r| TrajMse { name: r.name, mse: r.mse })
            .collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct CompareSummary {
    pub gains: PidGains,
    pub gains_tuned: bool,
    pub tracker_mean_mse: f64,
    pub pid_mean_mse: f64,
    pub rows: Vec<CompareSummaryRow>,
}

#[derive(Debug, Serialize)]
pub struct CompareSummaryRow {
    pub name: String,
    pub tracker_mse: f64,
    pub pid_mse: f64,
    pub ratio: f64,
}

/// Learned controller vs the PID baseline over the evaluation suite, on
/// identical plants and noise streams. Gains come from the config when all
/// three are set, otherwise from relay tuning on the noiseless plant.
pub fn verb_compare_pid(
    cfg: &Config,
    seed: u64,
    ckpt: &Path,
    out: &Path,
) -> Result<CompareSummary, OrchError> {
    cfg.validate()?;
    ensure_dir(out)?;
    let (wm, policy) = load_models(cfg, ckpt)?;
    let (gains, gains_tuned) = match cfg.pid.fixed_gains() {
        Some(g) => (g, false),
        None => (tune_pid(&cfg.plant)?, true),
    };
    let suite = eval_suite(cfg.eval.lo, cfg.eval.hi)?;
    let base = cfg.eval.base_seed.wrapping_add(seed);
    let rows = compare_controllers(cfg, &wm, &policy, gains, &suite, cfg.eval.t_len, base)?;

    let csv_path = out.join("compare.csv");
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                format!("{}", r.tracker_mse),
                format!("{}", r.pid_mse),
                format!("{}", r.tracker_mse / r.pid_mse),
            ]
        })
        .collect();
    write_table_csv(&csv_path, &["trajectory", "tracker_mse_deg2", "pid_mse_deg2", "ratio"], &table)?;

    let tracker_mean = rows.iter().map(|r| r.tracker_mse).sum::<f64>() / rows.len() as f64;
    let pid_mean = rows.iter().map(|r| r.pid_mse).sum::<f64>() / rows.len() as f64;

    let mut manifest = Manifest::new("compare-pid", seed, &cfg.canonical_toml());
    manifest.add_artifact(&csv_path)?;
    manifest.final_mean_mse = Some(tracker_mean);
    manifest.save(&out.join("manifest.json"))?;

    Ok(CompareSummary {
        gains,
        gains_tuned,
        tracker_mean_mse: tracker_mean,
        pid_mean_mse: pid_mean,
        rows: rows
            .into_iter()
            .map(|r| CompareSummaryRow {
                ratio: r.tracker_mse / r.pid_mse,
                name: r.name,
                tracker_mse: r.tracker_mse,
                pid_mse: r.pid_mse,
            })
            .collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct RolloutSummary {
    pub steps: usize,
    pub direction_agreement: f64,
    pub model_mse_vs_plant: f64,
}

/// Open-loop test: the model imagines a full episode blind from one real
/// observation, then the identical actions run on the real plant. The seed
/// picks the (unseen) target walk and the plant reset.
pub fn verb_rollout(
    cfg: &Config,
    seed: u64,
    ckpt: &Path,
    out: &Path,
) -> Result<RolloutSummary, OrchError> {
    cfg.validate()?;
    ensure_dir(out)?;
    let (wm, policy) = load_models(cfg, ckpt)?;
    let t_len = cfg.eval.t_len;
    let traj = gen_random_walk(
        cfg.eval.lo,
        cfg.eval.hi,
        cfg.train.traj_max_step,
        t_len,
        seed.wrapping_add(777_001),
    )?;
    let r = open_loop_versus_plant(
        cfg,
        &wm,
        &policy,
        &traj,
        t_len,
        cfg.eval.base_seed.wrapping_add(seed),
    )?;
    let agreement = direction_agreement(r.initial_model_angle, r.initial_plant_angle, &r);
    let model_mse = r
        .model_angles
        .iter()
        .zip(&r.plant_angles)
        .map(|(&m, &p)| (m as f64 - p as f64).powi(2))
        .sum::<f64>()
        / r.model_angles.len() as f64;

    let csv_path = out.join("rollout.csv");
    let rows: Vec<Vec<String>> = (0..r.model_angles.len())
        .map(|i| {
            vec![
                format!("{i}"),
                format!("{}", r.model_angles[i]),
                format!("{}", r.plant_angles[i]),
                format!("{}", r.target_angles[i]),
                format!("{}", r.actions[i][0]),
                format!("{}", r.actions[i][1]),
            ]
        })
        .collect();
    write_table_csv(
        &csv_path,
        &["step", "model_angle_deg", "plant_angle_deg", "target_angle_deg", "a1_kpa", "a2_kpa"],
        &rows,
    )?;

    let mut manifest = Manifest::new("rollout-worldmodel", seed, &cfg.canonical_toml());
    manifest.add_artifact(&csv_path)?;
    manifest.save(&out.join("manifest.json"))?;

    Ok(RolloutSummary {
        steps: r.model_angles.len(),
        direction_agreement: agreement,
        model_mse_vs_plant: model_mse,
    })
}

#[derive(Debug, Serialize)]
pub struct GenTrajectoriesSummary {
    pub count: usize,
    pub files: Vec<String>,
}

/// Writes the fixed evaluation suite as CSV files.
pub fn verb_gen_trajectories(
    cfg: &Config,
    seed: u64,
    out: &Path,
) -> Result<GenTrajectoriesSummary, OrchError> {
    cfg.validate()?;
    ensure_dir(out)?;
    let suite = eval_suite(cfg.eval.lo, cfg.eval.hi)?;
    let mut manifest = Manifest::new("gen-trajectories", seed, &cfg.canonical_toml());
    let mut files = Vec::with_capacity(suite.len());
    for (i, traj) in suite.iter().enumerate() {
        let path: PathBuf = out.join(format!("traj_{:02}_{}.csv", i, slug(&traj.name)));
        traj.save_csv(&path)?;
        manifest.add_artifact(&path)?;
        files.push(path.file_name().unwrap().to_string_lossy().into_owned());
    }
    manifest.save(&out.join("manifest.json"))?;
    Ok(GenTrajectoriesSummary { count: files.len(), files })
}

#[derive(Debug, Serialize)]
pub struct TunePidSummary {
    pub gains: PidGains,
}

/// Relay-tunes the PID baseline on the configured (noiseless) plant and
/// writes the gains as JSON.
pub fn verb_tune_pid(cfg: &Config, seed: u64, out: &Path) -> Result<TunePidSummary, OrchError> {
    cfg.validate()?;
    ensure_dir(out)?;
    let gains = tune_pid(&cfg.plant)?;
    let path = out.join("pid_gains.json");
    let text = serde_json::to_string(&gains)
        .map_err(|e| OrchError::Io(format!("serializing gains: {e}")))?;
    std::fs::write(&path, text)
        .map_err(|e| OrchError::Io(format!("writing {}: {e}", path.display())))?;
    let mut manifest = Manifest::new("tune-pid", seed, &cfg.canonical_toml());
    manifest.add_artifact(&path)?;
    manifest.save(&out.join("manifest.json"))?;
    Ok(TunePidSummary { gains })
}
