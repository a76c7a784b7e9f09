//! Command implementations behind the `rl2r` binary. Each command writes
//! its artifacts plus `config.txt` into one run directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{
    generate_world, load_mos_csv, load_response_groups, load_score_csv, split_holdout,
    write_latent_csv, write_mos_csv,
};
use crate::error::{Error, Result};
use crate::eval::{default_tolerance, gmad_csv, gmad_pairs, metric_report, score_std_curve, std_curve_csv, GmadOutcome, MetricReport};
use crate::policy::{Checkpoint, GaussianScorer, PolicyParams};
use crate::quality::{MosRecord, PreferenceTable};
use crate::reward::{batch_rewards, RewardConfig, RewardKind};
use crate::train::{init_policy, predict, HeldOut, RewardSource, TrainRunLog, Trainer};

/// `out_dir` from the config, or `runs/<unix-seconds>-seed<seed>`.
pub fn resolve_out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        PathBuf::from("runs").join(format!("{secs}-seed{}", cfg.train.seed))
    })
}

fn prepare(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("config.txt"), &cfg.echo())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, &text)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is required for this command")))
}

pub fn load_checkpoint(path: &Path) -> Result<GaussianScorer> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    Ok(GaussianScorer::new(PolicyParams::try_from(ck)?))
}

pub fn save_checkpoint(path: &Path, policy: &GaussianScorer) -> Result<()> {
    write_json(path, &Checkpoint::from(&policy.params))
}

fn latent_lookup(cfg: &RunConfig) -> Result<Option<HashMap<String, f64>>> {
    match &cfg.latent_path {
        Some(p) => Ok(Some(load_score_csv(p)?.into_iter().collect())),
        None => Ok(None),
    }
}

fn targets_for(records: &[MosRecord], map: &HashMap<String, f64>) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            map.get(&r.image_id)
                .copied()
                .ok_or_else(|| Error::Response(format!("no latent value for {}", r.image_id)))
        })
        .collect()
}

/// Synthetic world to `world.csv` plus hidden truth in `latent.csv`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<usize> {
    prepare(cfg, out)?;
    let world = generate_world(&cfg.world)?;
    write_mos_csv(&out.join("world.csv"), &world.records)?;
    write_latent_csv(&out.join("latent.csv"), &world)?;
    Ok(world.records.len())
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub train_images: usize,
    pub heldout_images: usize,
    /// Held-out SRCC against latent quality, when the truth is known.
    pub heldout_srcc: Option<f64>,
    pub heldout_vs_mos: Option<MetricReport>,
}

/// Trains on `world` (or a freshly generated world when none is given).
/// Writes `checkpoint.json`, `run_log.jsonl`, `std_curve.csv`,
/// `epochs.csv` and `summary.json`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(TrainSummary, TrainRunLog)> {
    prepare(cfg, out)?;
    let (records, latent) = match &cfg.world_path {
        Some(p) => (load_mos_csv(p)?, latent_lookup(cfg)?),
        None => {
            let w = generate_world(&cfg.world)?;
            let lat = w.latent_map();
            (w.records, Some(lat))
        }
    };
    let feature_dim = records
        .first()
        .map(|r| r.features.len())
        .ok_or_else(|| Error::Response("world has no images".into()))?;
    let (train, hold) = split_holdout(&records, cfg.holdout_fraction, cfg.train.seed)?;
    let hold_targets = match &latent {
        Some(map) if hold.len() >= 2 => Some(targets_for(&hold, map)?),
        _ => None,
    };

    let mut init = init_policy(feature_dim, cfg.train.seed, cfg.init_log_std, cfg.init_weight_scale);
    init.truncation = cfg.truncation;
    let mut trainer = Trainer::new(init, cfg.train.clone())?;
    let heldout = hold_targets.as_ref().map(|t| HeldOut {
        records: &hold,
        targets: t,
    });
    let log = trainer.train(&train, heldout)?;

    save_checkpoint(&out.join("checkpoint.json"), &trainer.policy)?;
    write(&out.join("run_log.jsonl"), &log.to_jsonl()?)?;
    let curve = if log.steps.is_empty() {
        Vec::new()
    } else {
        score_std_curve(&log)?
    };
    write(&out.join("std_curve.csv"), &std_curve_csv(&curve))?;
    let mut epochs = String::from("epoch,heldout_srcc\n");
    for e in &log.epochs {
        let v = e.heldout_srcc.map_or(String::new(), |s| s.to_string());
        epochs.push_str(&format!("{},{v}\n", e.epoch));
    }
    write(&out.join("epochs.csv"), &epochs)?;

    let (heldout_srcc, heldout_vs_mos) = if hold.len() >= 2 {
        let pred = predict(&trainer.policy, &hold)?;
        let mos: Vec<f64> = hold.iter().map(|r| r.mos).collect();
        (
            hold_targets
                .as_ref()
                .and_then(|t| crate::eval::srcc(&pred, t).ok()),
            metric_report(&pred, &mos).ok(),
        )
    } else {
        (None, None)
    };
    let summary = TrainSummary {
        steps: log.steps.len(),
        train_images: train.len(),
        heldout_images: hold.len(),
        heldout_srcc,
        heldout_vs_mos,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok((summary, log))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub vs_mos: MetricReport,
    pub vs_latent: Option<MetricReport>,
}

/// Scores every image of `world` with the policy mean and correlates
/// against MOS (and latent quality when `latent` is set). Writes
/// `scores.csv`, `metrics.json` and `metrics.csv`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    prepare(cfg, out)?;
    let policy = load_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
    let records = load_mos_csv(required(&cfg.world_path, "world")?)?;
    let pred = predict(&policy, &records)?;
    let mos: Vec<f64> = records.iter().map(|r| r.mos).collect();
    let mut scores = String::from("image_id,score\n");
    for (r, p) in records.iter().zip(&pred) {
        scores.push_str(&format!("{},{p}\n", r.image_id));
    }
    write(&out.join("scores.csv"), &scores)?;
    let vs_mos = metric_report(&pred, &mos)?;
    let vs_latent = match latent_lookup(cfg)? {
        Some(map) => Some(metric_report(&pred, &targets_for(&records, &map)?)?),
        None => None,
    };
    let report = EvalReport { vs_mos, vs_latent };
    write_json(&out.join("metrics.json"), &report)?;
    let mut csv = String::from("target,srcc,plcc,n\n");
    csv.push_str(&format!("mos,{},{},{}\n", vs_mos.srcc, vs_mos.plcc, vs_mos.n));
    if let Some(l) = vs_latent {
        csv.push_str(&format!("latent,{},{},{}\n", l.srcc, l.plcc, l.n));
    }
    write(&out.join("metrics.csv"), &csv)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct GmadReport {
    pub tolerance_a_defends: f64,
    pub tolerance_b_defends: f64,
    pub a_defends: GmadOutcome,
    pub b_defends: GmadOutcome,
}

fn score_map(cfg: &RunConfig, scores: &Option<PathBuf>, ck: &Option<PathBuf>, key: &str) -> Result<BTreeMap<String, f64>> {
    if let Some(p) = scores {
        let rows = load_score_csv(p)?;
        let n = rows.len();
        let map: BTreeMap<String, f64> = rows.into_iter().collect();
        if map.len() != n {
            return Err(Error::Response(format!("{}: duplicate image ids", p.display())));
        }
        return Ok(map);
    }
    let ck = required(ck, key)?;
    let policy = load_checkpoint(ck)?;
    let records = load_mos_csv(required(&cfg.world_path, "world")?)?;
    let pred = predict(&policy, &records)?;
    Ok(records.into_iter().map(|r| r.image_id).zip(pred).collect())
}

/// Both attack directions. Inputs are `scores_a`/`scores_b` CSVs, or
/// `checkpoint`/`checkpoint_b` applied to `world`. Writes `gmad.csv` and
/// `gmad.json`.
pub fn cmd_gmad(cfg: &RunConfig, out: &Path) -> Result<GmadReport> {
    prepare(cfg, out)?;
    let a = score_map(cfg, &cfg.scores_a, &cfg.checkpoint, "checkpoint or scores_a")?;
    let b = score_map(cfg, &cfg.scores_b, &cfg.checkpoint_b, "checkpoint_b or scores_b")?;
    let tol = |m: &BTreeMap<String, f64>| {
        if cfg.gmad_tolerance > 0.0 {
            cfg.gmad_tolerance
        } else {
            default_tolerance(m)
        }
    };
    let (ta, tb) = (tol(&a), tol(&b));
    if !(ta > 0.0 && tb > 0.0) {
        return Err(Error::Numeric(
            "a model scores every image the same; set gmad_tolerance".into(),
        ));
    }
    let report = GmadReport {
        tolerance_a_defends: ta,
        tolerance_b_defends: tb,
        a_defends: gmad_pairs(&a, &b, cfg.n_levels, ta)?,
        b_defends: gmad_pairs(&b, &a, cfg.n_levels, tb)?,
    };
    let mut csv = String::from("defender,level,image_a,image_b,defender_gap,attacker_gap\n");
    csv.push_str(&gmad_csv(&report.a_defends.pairs, "a"));
    csv.push_str(&gmad_csv(&report.b_defends.pairs, "b"));
    write(&out.join("gmad.csv"), &csv)?;
    write_json(&out.join("gmad.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageReward {
    pub image_id: String,
    pub scores: Vec<f64>,
    pub rewards: Vec<f64>,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RewardReport {
    pub images: Vec<ImageReward>,
    pub responses: usize,
    pub clamped: usize,
    pub rejected: usize,
    pub malformed: usize,
}

/// Groups a JSONL response log, then rewards every group against the MOS
/// preferences of the images present. Writes `reward_report.json`.
pub fn cmd_parse_logs(cfg: &RunConfig, out: &Path) -> Result<RewardReport> {
    prepare(cfg, out)?;
    let log = load_response_groups(
        required(&cfg.responses, "responses")?,
        cfg.train.grpo.k_responses,
        cfg.clamp,
    )?;
    let records = load_mos_csv(required(&cfg.world_path, "world")?)?;
    let mos_of: HashMap<&str, f64> = records.iter().map(|r| (r.image_id.as_str(), r.mos)).collect();
    let mos = log
        .groups
        .iter()
        .map(|g| {
            mos_of
                .get(g.image_id.as_str())
                .copied()
                .ok_or_else(|| Error::Response(format!("no MOS for image {}", g.image_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let prefs = PreferenceTable::from_mos(&mos, cfg.train.tie_tol)?;
    let kind = match cfg.train.reward {
        RewardSource::Fidelity => RewardKind::Fidelity,
        RewardSource::Binary => RewardKind::Binary,
        RewardSource::Regression => {
            return Err(Error::Config(
                "parse-logs supports the fidelity and binary rewards".into(),
            ))
        }
    };
    let rc = RewardConfig {
        kind,
        binary_tie_band: cfg.train.binary_tie_band,
    };
    let rewards = batch_rewards(&log.groups, &prefs, &cfg.train.thurstone, &rc)?;
    let images = log
        .groups
        .iter()
        .zip(rewards)
        .map(|(g, r)| ImageReward {
            image_id: g.image_id.clone(),
            scores: g.scores().to_vec(),
            mean_reward: r.rewards.iter().sum::<f64>() / r.rewards.len() as f64,
            rewards: r.rewards,
        })
        .collect();
    let report = RewardReport {
        images,
        responses: log.records.len(),
        clamped: log.clamped,
        rejected: log.rejected,
        malformed: log.malformed,
    };
    write_json(&out.join("reward_report.json"), &report)?;
    Ok(report)
}
