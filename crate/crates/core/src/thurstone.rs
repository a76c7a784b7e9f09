//! Thurstone comparative probabilities between two groups of sampled scores.
//!
//! Perceived quality is modelled as Gaussian. The probability that image
//! `i` is seen as better than image `j`, given the k-th sampled score of `i`,
//! comes in three flavours:
//!
//! * [`Variant::MeanAnchored`] compares `q_k(i)` against the mean of `j`'s
//!   group, standardized by `sqrt(var_i + var_j + gamma)`.
//! * [`Variant::ProbabilityAverage`] averages the probabilities of `q_k(i)`
//!   beating each individual score of `j`, with the same denominator.
//! * [`Variant::CaseV`] is the probability-average form with both variances
//!   fixed to one (denominator `sqrt(2)`, no `gamma`).
//!
//! Indices `k` are zero-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quality::{slice_stats, ScoreGroup, VarianceMode};

/// Standard normal CDF, `0.5 * erfc(-z / sqrt(2))`.
///
/// `libm::erfc` is accurate to about one ulp, which keeps the absolute
/// error far below 1e-12 on `|z| <= 8` and preserves tail precision.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    MeanAnchored,
    ProbabilityAverage,
    CaseV,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::MeanAnchored => "mean-anchored",
            Variant::ProbabilityAverage => "prob-average",
            Variant::CaseV => "case-v",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-anchored" => Ok(Variant::MeanAnchored),
            "prob-average" => Ok(Variant::ProbabilityAverage),
            "case-v" => Ok(Variant::CaseV),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected mean-anchored, prob-average or case-v)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThurstoneConfig {
    /// Added under the square root so degenerate groups never divide by zero.
    pub gamma: f64,
    pub variant: Variant,
    pub variance: VarianceMode,
}

impl Default for ThurstoneConfig {
    fn default() -> Self {
        ThurstoneConfig {
            gamma: 1e-8,
            variant: Variant::MeanAnchored,
            variance: VarianceMode::Population,
        }
    }
}

impl ThurstoneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be positive and finite, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// A score group together with its cached mean and variance.
#[derive(Debug, Clone)]
pub struct PreparedGroup<'a> {
    pub scores: &'a [f64],
    pub mean: f64,
    pub variance: f64,
}

impl<'a> PreparedGroup<'a> {
    pub fn new(scores: &'a [f64], mode: VarianceMode) -> Self {
        let s = slice_stats(scores, mode);
        PreparedGroup {
            scores,
            mean: s.mean,
            variance: s.variance,
        }
    }
}

/// Probability of the k-th score of `a` beating group `b` under `cfg`.
/// `k` must already be in range.
pub fn prepared_prob(
    k: usize,
    a: &PreparedGroup<'_>,
    b: &PreparedGroup<'_>,
    cfg: &ThurstoneConfig,
) -> f64 {
    let q = a.scores[k];
    match cfg.variant {
        Variant::MeanAnchored => {
            let s = (a.variance + b.variance + cfg.gamma).sqrt();
            std_normal_cdf((q - b.mean) / s)
        }
        Variant::ProbabilityAverage => {
            let s = (a.variance + b.variance + cfg.gamma).sqrt();
            average_over(q, b.scores, s)
        }
        Variant::CaseV => average_over(q, b.scores, std::f64::consts::SQRT_2),
    }
}

fn average_over(q: f64, others: &[f64], s: f64) -> f64 {
    others.iter().map(|&o| std_normal_cdf((q - o) / s)).sum::<f64>() / others.len() as f64
}

fn check_index(k: usize, g: &ScoreGroup) -> Result<()> {
    if k >= g.len() {
        return Err(Error::IndexOutOfRange {
            index: k,
            len: g.len(),
        });
    }
    Ok(())
}

fn with_variant(
    k: usize,
    g_i: &ScoreGroup,
    g_j: &ScoreGroup,
    cfg: &ThurstoneConfig,
    variant: Variant,
) -> Result<f64> {
    check_index(k, g_i)?;
    cfg.validate()?;
    let cfg = ThurstoneConfig { variant, ..*cfg };
    let a = PreparedGroup::new(g_i.scores(), cfg.variance);
    let b = PreparedGroup::new(g_j.scores(), cfg.variance);
    Ok(prepared_prob(k, &a, &b, &cfg))
}

pub fn comparative_prob_mean_anchored(
    k: usize,
    g_i: &ScoreGroup,
    g_j: &ScoreGroup,
    cfg: &ThurstoneConfig,
) -> Result<f64> {
    with_variant(k, g_i, g_j, cfg, Variant::MeanAnchored)
}

pub fn comparative_prob_average(
    k: usize,
    g_i: &ScoreGroup,
    g_j: &ScoreGroup,
    cfg: &ThurstoneConfig,
) -> Result<f64> {
    with_variant(k, g_i, g_j, cfg, Variant::ProbabilityAverage)
}

pub fn comparative_prob_case_v(k: usize, g_i: &ScoreGroup, g_j: &ScoreGroup) -> Result<f64> {
    with_variant(k, g_i, g_j, &ThurstoneConfig::default(), Variant::CaseV)
}

/// Dispatches on `cfg.variant`.
pub fn comparative_prob(
    k: usize,
    g_i: &ScoreGroup,
    g_j: &ScoreGroup,
    cfg: &ThurstoneConfig,
) -> Result<f64> {
    with_variant(k, g_i, g_j, cfg, cfg.variant)
}
