//! Stochastic scoring policies.
//!
//! A policy maps an image's feature vector to a distribution over quality
//! scores in `[1, 5]`. The trainer only talks to policies through
//! [`ScoringPolicy`], which exposes sampling, log-densities and their
//! gradients with respect to a flat parameter vector.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 5.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_RESAMPLE: usize = 100;
const STRICT_RESAMPLE_LIMIT: usize = 100_000;

/// One sampled score with its log-density under the sampling policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledScore {
    pub value: f64,
    pub logprob: f64,
}

/// Common interface of every scoring policy the trainer can optimize.
pub trait ScoringPolicy: Clone {
    fn num_params(&self) -> usize;

    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// Deterministic score used for evaluation.
    fn mean_score(&self, features: &[f64]) -> Result<f64>;

    fn sample<R: Rng + ?Sized>(&self, features: &[f64], rng: &mut R) -> Result<SampledScore>;

    fn logprob(&self, features: &[f64], value: f64) -> Result<f64>;

    /// Gradient of [`ScoringPolicy::logprob`] w.r.t. the flat parameters.
    fn logprob_grad(&self, features: &[f64], value: f64) -> Result<Vec<f64>>;

    /// Spread of the score distribution, used for logging only.
    fn score_std(&self, features: &[f64]) -> Result<f64>;
}

/// Parameters of the feature-linear Gaussian scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub log_std: f64,
}

impl PolicyParams {
    pub fn zeros(feature_dim: usize, log_std: f64) -> Self {
        PolicyParams {
            weights: vec![0.0; feature_dim],
            bias: 0.0,
            log_std,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !w.is_finite()) || !self.bias.is_finite() {
            return Err(Error::NonFinite("policy weights".into()));
        }
        if !self.log_std.is_finite() {
            return Err(Error::NonFinite(format!("log_std {}", self.log_std)));
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub log_std: f64,
    pub feature_dim: usize,
    pub version: u32,
}

impl From<&PolicyParams> for Checkpoint {
    fn from(p: &PolicyParams) -> Self {
        Checkpoint {
            weights: p.weights.clone(),
            bias: p.bias,
            log_std: p.log_std,
            feature_dim: p.weights.len(),
            version: CHECKPOINT_VERSION,
        }
    }
}

impl TryFrom<Checkpoint> for PolicyParams {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                c.version
            )));
        }
        if c.weights.len() != c.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: c.feature_dim,
                got: c.weights.len(),
            });
        }
        let p = PolicyParams {
            weights: c.weights,
            bias: c.bias,
            log_std: c.log_std,
        };
        p.validate()?;
        Ok(p)
    }
}

/// How out-of-range Gaussian draws are brought back into `[1, 5]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Truncation {
    /// Resample up to 100 times, then clamp.
    #[default]
    ResampleThenClamp,
    /// Keep resampling; fail if the support is effectively unreachable.
    Strict,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gaussian scorer with mean `1 + 4 * sigmoid(w . f + b)` and standard
/// deviation `exp(log_std)`.
///
/// The log-density ignores the truncation to `[1, 5]`; at the default spread
/// and mid-range means truncation is rare.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScorer {
    pub params: PolicyParams,
    pub truncation: Truncation,
}

impl GaussianScorer {
    pub fn new(params: PolicyParams) -> Self {
        GaussianScorer {
            params,
            truncation: Truncation::default(),
        }
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.params.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.weights.len(),
                got: features.len(),
            });
        }
        Ok(())
    }

    fn logit(&self, features: &[f64]) -> f64 {
        self.params
            .weights
            .iter()
            .zip(features)
            .map(|(w, f)| w * f)
            .sum::<f64>()
            + self.params.bias
    }

    pub fn std(&self) -> f64 {
        self.params.log_std.exp()
    }
}

impl ScoringPolicy for GaussianScorer {
    fn num_params(&self) -> usize {
        self.params.weights.len() + 2
    }

    /// `[weights..., bias, log_std]`.
    fn params(&self) -> Vec<f64> {
        let mut v = self.params.weights.clone();
        v.push(self.params.bias);
        v.push(self.params.log_std);
        v
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let d = self.params.weights.len();
        let next = PolicyParams {
            weights: params[..d].to_vec(),
            bias: params[d],
            log_std: params[d + 1],
        };
        next.validate()?;
        self.params = next;
        Ok(())
    }

    fn mean_score(&self, features: &[f64]) -> Result<f64> {
        self.check_dim(features)?;
        Ok(SCORE_MIN + (SCORE_MAX - SCORE_MIN) * sigmoid(self.logit(features)))
    }

    fn sample<R: Rng + ?Sized>(&self, features: &[f64], rng: &mut R) -> Result<SampledScore> {
        let mean = self.mean_score(features)?;
        let std = self.std();
        let normal =
            Normal::new(mean, std).map_err(|e| Error::Numeric(format!("normal({mean}, {std}): {e}")))?;
        let limit = match self.truncation {
            Truncation::ResampleThenClamp => MAX_RESAMPLE,
            Truncation::Strict => STRICT_RESAMPLE_LIMIT,
        };
        let mut value = None;
        for _ in 0..limit {
            let v = normal.sample(rng);
            if (SCORE_MIN..=SCORE_MAX).contains(&v) {
                value = Some(v);
                break;
            }
        }
        let value = match (value, self.truncation) {
            (Some(v), _) => v,
            (None, Truncation::ResampleThenClamp) => {
                let v: f64 = normal.sample(rng);
                v.clamp(SCORE_MIN, SCORE_MAX)
            }
            (None, Truncation::Strict) => {
                return Err(Error::Numeric(format!(
                    "no draw inside [1, 5] after {limit} attempts (mean {mean}, std {std})"
                )))
            }
        };
        Ok(SampledScore {
            value,
            logprob: self.logprob(features, value)?,
        })
    }

    fn logprob(&self, features: &[f64], value: f64) -> Result<f64> {
        let mean = self.mean_score(features)?;
        let log_std = self.params.log_std;
        let z = (value - mean) / log_std.exp();
        Ok(-0.5 * LN_2PI - log_std - 0.5 * z * z)
    }

    fn logprob_grad(&self, features: &[f64], value: f64) -> Result<Vec<f64>> {
        self.check_dim(features)?;
        let s = sigmoid(self.logit(features));
        let mean = SCORE_MIN + (SCORE_MAX - SCORE_MIN) * s;
        let var = (2.0 * self.params.log_std).exp();
        let d_mean = (value - mean) / var;
        let d_logit = d_mean * (SCORE_MAX - SCORE_MIN) * s * (1.0 - s);
        let mut g: Vec<f64> = features.iter().map(|f| d_logit * f).collect();
        g.push(d_logit);
        g.push((value - mean) * (value - mean) / var - 1.0);
        Ok(g)
    }

    fn score_std(&self, _features: &[f64]) -> Result<f64> {
        Ok(self.std())
    }
}

/// Softmax distribution over the integer scores 1..=5 that ignores the
/// features. Exists to exercise the trainer against a second policy family.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalScorer {
    pub logits: [f64; 5],
}

impl CategoricalScorer {
    pub fn uniform() -> Self {
        CategoricalScorer { logits: [0.0; 5] }
    }

    pub fn probs(&self) -> [f64; 5] {
        let m = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p = self.logits.map(|l| (l - m).exp());
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= z);
        p
    }

    fn index_of(value: f64) -> Result<usize> {
        let r = value.round();
        if (r - value).abs() > 1e-9 || !(SCORE_MIN..=SCORE_MAX).contains(&r) {
            return Err(Error::Numeric(format!(
                "categorical scorer cannot score value {value}"
            )));
        }
        Ok(r as usize - 1)
    }
}

impl ScoringPolicy for CategoricalScorer {
    fn num_params(&self) -> usize {
        5
    }

    fn params(&self) -> Vec<f64> {
        self.logits.to_vec()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let logits: [f64; 5] = params.try_into().map_err(|_| Error::DimensionMismatch {
            expected: 5,
            got: params.len(),
        })?;
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("categorical logits".into()));
        }
        self.logits = logits;
        Ok(())
    }

    fn mean_score(&self, _features: &[f64]) -> Result<f64> {
        Ok(self
            .probs()
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1) as f64 * p)
            .sum())
    }

    fn sample<R: Rng + ?Sized>(&self, _features: &[f64], rng: &mut R) -> Result<SampledScore> {
        let probs = self.probs();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                idx = i;
                break;
            }
        }
        Ok(SampledScore {
            value: (idx + 1) as f64,
            logprob: probs[idx].ln(),
        })
    }

    fn logprob(&self, _features: &[f64], value: f64) -> Result<f64> {
        Ok(self.probs()[Self::index_of(value)?].ln())
    }

    fn logprob_grad(&self, _features: &[f64], value: f64) -> Result<Vec<f64>> {
        let idx = Self::index_of(value)?;
        let probs = self.probs();
        Ok((0..5)
            .map(|i| if i == idx { 1.0 } else { 0.0 } - probs[i])
            .collect())
    }

    fn score_std(&self, features: &[f64]) -> Result<f64> {
        let mean = self.mean_score(features)?;
        let var: f64 = self
            .probs()
            .iter()
            .enumerate()
            .map(|(i, p)| p * ((i + 1) as f64 - mean).powi(2))
            .sum();
        Ok(var.sqrt())
    }
}

/// Draws a standard normal; shared so simulators and policies agree on the
/// sampling routine.
pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
