//! Per-response rewards from predicted comparative probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quality::{PreferenceTable, ScoreGroup};
use crate::thurstone::{prepared_prob, PreparedGroup, ThurstoneConfig};

/// The K rewards collected for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardVector {
    pub image_id: String,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    /// Continuous fidelity between true and predicted preference.
    #[default]
    Fidelity,
    /// 0/1 agreement per pair, averaged over partners.
    Binary,
}

impl RewardKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RewardKind::Fidelity => "fidelity",
            RewardKind::Binary => "binary",
        }
    }
}

impl std::str::FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fidelity" => Ok(RewardKind::Fidelity),
            "binary" => Ok(RewardKind::Binary),
            other => Err(Error::Config(format!(
                "unknown reward {other:?} (expected fidelity or binary)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub kind: RewardKind,
    /// Half-width around 0.5 counted as agreement with a tied pair under the
    /// binary reward.
    pub binary_tie_band: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            kind: RewardKind::Fidelity,
            binary_tie_band: 0.1,
        }
    }
}

fn check_prob(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::ProbabilityOutOfRange(p));
    }
    Ok(())
}

fn check_true_pref(p: f64) -> Result<()> {
    if p != 0.0 && p != 0.5 && p != 1.0 {
        return Err(Error::ProbabilityOutOfRange(p));
    }
    Ok(())
}

/// `sqrt(p * q) + sqrt((1 - p) * (1 - q))`.
pub fn fidelity_term(p_true: f64, p_pred: f64) -> Result<f64> {
    check_true_pref(p_true)?;
    check_prob(p_pred)?;
    Ok(fidelity_unchecked(p_true, p_pred))
}

#[inline]
fn fidelity_unchecked(p: f64, q: f64) -> f64 {
    (p * q).sqrt() + ((1.0 - p) * (1.0 - q)).sqrt()
}

/// Whether a predicted probability agrees with the true preference. A
/// prediction of exactly 0.5 never agrees with a strict preference.
pub fn binary_agreement(p_true: f64, p_pred: f64, tie_band: f64) -> Result<f64> {
    check_true_pref(p_true)?;
    check_prob(p_pred)?;
    let agree = if p_true == 1.0 {
        p_pred > 0.5
    } else if p_true == 0.0 {
        p_pred < 0.5
    } else {
        (p_pred - 0.5).abs() <= tie_band
    };
    Ok(if agree { 1.0 } else { 0.0 })
}

fn check_batch(batch: &[ScoreGroup], prefs: &PreferenceTable) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    if prefs.len() != batch.len() {
        return Err(Error::ShapeMismatch(format!(
            "preference table covers {} images, batch has {}",
            prefs.len(),
            batch.len()
        )));
    }
    Ok(())
}

fn single_reward(
    i: usize,
    k: usize,
    prepared: &[PreparedGroup<'_>],
    prefs: &PreferenceTable,
    thurstone: &ThurstoneConfig,
    reward: &RewardConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for j in (0..prepared.len()).filter(|&j| j != i) {
        let p_true = prefs.get(i, j)?;
        let p_pred = prepared_prob(k, &prepared[i], &prepared[j], thurstone);
        total += match reward.kind {
            RewardKind::Fidelity => fidelity_term(p_true, p_pred)?,
            RewardKind::Binary => binary_agreement(p_true, p_pred, reward.binary_tie_band)?,
        };
    }
    Ok(total / (prepared.len() - 1) as f64)
}

fn reward_at(
    i: usize,
    k: usize,
    batch: &[ScoreGroup],
    prefs: &PreferenceTable,
    thurstone: &ThurstoneConfig,
    reward: &RewardConfig,
) -> Result<f64> {
    check_batch(batch, prefs)?;
    thurstone.validate()?;
    let len = batch.get(i).map(ScoreGroup::len).ok_or(Error::IndexOutOfRange {
        index: i,
        len: batch.len(),
    })?;
    if k >= len {
        return Err(Error::IndexOutOfRange { index: k, len });
    }
    let prepared = prepare(batch, thurstone);
    single_reward(i, k, &prepared, prefs, thurstone, reward)
}

fn prepare<'a>(batch: &'a [ScoreGroup], cfg: &ThurstoneConfig) -> Vec<PreparedGroup<'a>> {
    batch
        .iter()
        .map(|g| PreparedGroup::new(g.scores(), cfg.variance))
        .collect()
}

/// Fidelity reward of the k-th response of image `i`, averaged over the
/// B - 1 other images in the batch.
pub fn fidelity_reward(
    i: usize,
    k: usize,
    batch: &[ScoreGroup],
    prefs: &PreferenceTable,
    cfg: &ThurstoneConfig,
) -> Result<f64> {
    reward_at(i, k, batch, prefs, cfg, &RewardConfig::default())
}

pub fn binary_reward(
    i: usize,
    k: usize,
    batch: &[ScoreGroup],
    prefs: &PreferenceTable,
    cfg: &ThurstoneConfig,
    tie_band: f64,
) -> Result<f64> {
    let reward = RewardConfig {
        kind: RewardKind::Binary,
        binary_tie_band: tie_band,
    };
    reward_at(i, k, batch, prefs, cfg, &reward)
}

/// Rewards for every response of every image in the batch.
pub fn batch_rewards(
    batch: &[ScoreGroup],
    prefs: &PreferenceTable,
    thurstone: &ThurstoneConfig,
    reward: &RewardConfig,
) -> Result<Vec<RewardVector>> {
    check_batch(batch, prefs)?;
    thurstone.validate()?;
    let prepared = prepare(batch, thurstone);
    batch
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let rewards = (0..g.len())
                .map(|k| single_reward(i, k, &prepared, prefs, thurstone, reward))
                .collect::<Result<Vec<_>>>()?;
            Ok(RewardVector {
                image_id: g.image_id.clone(),
                rewards,
            })
        })
        .collect()
}
