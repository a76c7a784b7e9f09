//! Browser bindings for three interactive views: comparison-probability
//! curves, the fidelity reward surface, and a small training run.
//!
//! The plain functions return JSON strings and are what the tests call; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use rl2r::data::{generate_world, split_holdout, SyntheticWorldConfig};
use rl2r::quality::{PreferenceTable, ScoreGroup};
use rl2r::reward::{batch_rewards, RewardConfig, RewardKind};
use rl2r::thurstone::{comparative_prob, ThurstoneConfig, Variant};
use rl2r::train::{init_policy, predict, HeldOut, RewardSource, TrainConfig, Trainer};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn group(id: &str, center: f64, spread: f64) -> Result<ScoreGroup, String> {
    ScoreGroup::new(id, vec![center - spread, center, center + spread]).map_err(|e| e.to_string())
}

fn variant_cfg(variant: Variant, gamma: f64) -> ThurstoneConfig {
    ThurstoneConfig {
        gamma,
        variant,
        ..Default::default()
    }
}

/// P(image i beats image j) as the score group of i slides across [1, 5]
/// while j stays centred on 3. Both groups hold three scores at
/// `center - spread`, `center`, `center + spread`; the probability is taken
/// for the middle score.
pub fn comparison_curves(spread_i: f64, spread_j: f64, gamma: f64, points: usize) -> Result<String, String> {
    if points < 2 {
        return Err("need at least 2 points".into());
    }
    let gj = group("j", 3.0, spread_j)?;
    let mut xs = Vec::with_capacity(points);
    let mut curves = [Vec::new(), Vec::new(), Vec::new()];
    let variants = [Variant::MeanAnchored, Variant::ProbabilityAverage, Variant::CaseV];
    for n in 0..points {
        let x = 1.0 + 4.0 * n as f64 / (points - 1) as f64;
        let gi = group("i", x, spread_i)?;
        for (curve, v) in curves.iter_mut().zip(variants) {
            curve.push(comparative_prob(1, &gi, &gj, &variant_cfg(v, gamma)).map_err(|e| e.to_string())?);
        }
        xs.push(x);
    }
    Ok(json!({
        "x": xs,
        "mean_anchored": curves[0],
        "prob_average": curves[1],
        "case_v": curves[2],
    })
    .to_string())
}

fn parse_variant(name: &str) -> Result<Variant, String> {
    name.parse::<Variant>().map_err(|e| e.to_string())
}

/// Fidelity reward of one response of image i, which has the higher MOS,
/// over a grid of (its score, centre of image j's group).
pub fn fidelity_surface(variant: &str, spread: f64, n: usize) -> Result<String, String> {
    if n < 2 {
        return Err("grid needs at least 2 points per side".into());
    }
    let cfg = variant_cfg(parse_variant(variant)?, 1e-8);
    let prefs = PreferenceTable::from_mos(&[2.0, 1.0], 0.0).map_err(|e| e.to_string())?;
    let reward = RewardConfig {
        kind: RewardKind::Fidelity,
        binary_tie_band: 0.1,
    };
    let axis: Vec<f64> = (0..n).map(|k| 1.0 + 4.0 * k as f64 / (n - 1) as f64).collect();
    let mut z = Vec::with_capacity(n);
    for &mean_j in &axis {
        let mut row = Vec::with_capacity(n);
        for &q in &axis {
            let gi = ScoreGroup::new("i", vec![q, 3.0 - spread, 3.0 + spread]).map_err(|e| e.to_string())?;
            let gj = group("j", mean_j, spread)?;
            let r = batch_rewards(&[gi, gj], &prefs, &cfg, &reward).map_err(|e| e.to_string())?;
            row.push(r[0].rewards[0]);
        }
        z.push(row);
    }
    Ok(json!({ "x": axis, "y": axis, "z": z }).to_string())
}

/// A short run on a synthetic world: per-step mean sampled std and
/// held-out SRCC against latent quality per epoch.
pub fn train_run(seed: u64, epochs: usize, variant: &str, reward: &str, n_images: usize) -> Result<String, String> {
    let err = |e: rl2r::Error| e.to_string();
    let world = generate_world(&SyntheticWorldConfig {
        seed,
        n_images,
        ..Default::default()
    })
    .map_err(err)?;
    let latent = world.latent_map();
    let (train, hold) = split_holdout(&world.records, 0.2, seed).map_err(err)?;
    let targets: Vec<f64> = hold.iter().map(|r| latent[&r.image_id]).collect();
    let mut cfg = TrainConfig {
        seed,
        epochs,
        reward: reward.parse::<RewardSource>().map_err(err)?,
        ..Default::default()
    };
    cfg.thurstone.variant = parse_variant(variant)?;
    let init = init_policy(world.latent_weights.len(), seed, 0.5f64.ln(), 0.01);
    let mut trainer = Trainer::new(init, cfg).map_err(err)?;
    let log = trainer
        .train(&train, Some(HeldOut { records: &hold, targets: &targets }))
        .map_err(err)?;
    let pred = predict(&trainer.policy, &hold).map_err(err)?;
    let final_srcc = rl2r::eval::srcc(&pred, &targets).ok();
    Ok(json!({
        "std": log.steps.iter().map(|s| s.mean_score_std).collect::<Vec<_>>(),
        "reward": log.steps.iter().map(|s| s.mean_reward).collect::<Vec<_>>(),
        "epoch_srcc": log.epochs.iter().map(|e| e.heldout_srcc).collect::<Vec<_>>(),
        "final_srcc": final_srcc,
    })
    .to_string())
}

#[wasm_bindgen(js_name = comparisonCurves)]
pub fn comparison_curves_js(spread_i: f64, spread_j: f64, gamma: f64, points: usize) -> Result<String, JsError> {
    comparison_curves(spread_i, spread_j, gamma, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = fidelitySurface)]
pub fn fidelity_surface_js(variant: &str, spread: f64, n: usize) -> Result<String, JsError> {
    fidelity_surface(variant, spread, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = trainRun)]
pub fn train_run_js(seed: u32, epochs: usize, variant: &str, reward: &str, n_images: usize) -> Result<String, JsError> {
    train_run(seed as u64, epochs, variant, reward, n_images).map_err(|e| JsError::new(&e))
}
