//! Group-relative policy optimization: advantages, the KL penalty and the
//! clipped, KL-regularized surrogate objective with its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::ScoringPolicy;
use crate::reward::RewardVector;

/// Degenerate-spread threshold for reward standardization.
pub const ADVANTAGE_EPS: f64 = 1e-12;
pub const KL_RHO_MIN: f64 = 1e-6;
pub const KL_RHO_MAX: f64 = 1e6;

/// When the sampling snapshot is refreshed from the live policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OldPolicyRefresh {
    #[default]
    Epoch,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Clip half-width on the likelihood ratio.
    pub epsilon: f64,
    /// KL penalty coefficient.
    pub beta: f64,
    /// Plain gradient-ascent step size. Large-model fine-tuning uses ~1e-6;
    /// the linear scorer needs a much larger step.
    pub learning_rate: f64,
    /// Responses sampled per image (K).
    pub k_responses: usize,
    pub old_refresh: OldPolicyRefresh,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            epsilon: 0.2,
            beta: 0.04,
            learning_rate: 1e-2,
            k_responses: 6,
            old_refresh: OldPolicyRefresh::Epoch,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.k_responses < 2 {
            return Err(Error::Config(format!(
                "k_responses must be >= 2, got {}",
                self.k_responses
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector {
    pub image_id: String,
    pub advantages: Vec<f64>,
}

/// Standardizes rewards within a group with the population standard
/// deviation. A group whose spread is below [`ADVANTAGE_EPS`] gets all-zero
/// advantages.
pub fn advantages(r: &RewardVector) -> Result<AdvantageVector> {
    Ok(AdvantageVector {
        image_id: r.image_id.clone(),
        advantages: standardize(&r.rewards)?,
    })
}

pub fn standardize(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidGroup(format!(
            "advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < ADVANTAGE_EPS {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlValue {
    pub value: f64,
    /// The density ratio hit the clamp range.
    pub clamped: bool,
}

/// `rho - ln(rho) - 1` with `rho = exp(logprob_ref - logprob_new)` clamped
/// to `[1e-6, 1e6]`.
pub fn kl_approx(logprob_new: f64, logprob_ref: f64) -> f64 {
    kl_approx_checked(logprob_new, logprob_ref).value
}

pub fn kl_approx_checked(logprob_new: f64, logprob_ref: f64) -> KlValue {
    let log_rho = logprob_ref - logprob_new;
    let (lo, hi) = (KL_RHO_MIN.ln(), KL_RHO_MAX.ln());
    // Clamp in log space so exp never overflows.
    let clamped = !(lo..=hi).contains(&log_rho);
    let log_rho = log_rho.clamp(lo, hi);
    KlValue {
        value: exp_minus_linear(log_rho).max(0.0),
        clamped,
    }
}

/// `e^x - x - 1` without cancellation near zero.
fn exp_minus_linear(x: f64) -> f64 {
    if x.abs() >= 0.5 {
        return x.exp_m1() - x;
    }
    let mut term = x * x / 2.0;
    let mut sum = term;
    for n in 3..40 {
        term *= x / n as f64;
        sum += term;
        if term.abs() <= sum.abs() * 1e-17 {
            break;
        }
    }
    sum
}

/// `min(ratio * a, clip(ratio, 1 - eps, 1 + eps) * a)`.
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioTriple {
    pub logprob_new: f64,
    pub logprob_old: f64,
    pub logprob_ref: f64,
}

/// The K responses of one image with their advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseGroup {
    pub triples: Vec<RatioTriple>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveStats {
    pub objective: f64,
    pub kl_mean: f64,
    pub clip_fraction: f64,
    pub kl_clamped: usize,
}

fn check_shapes(groups: &[ResponseGroup]) -> Result<usize> {
    let first = groups
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
    let k = first.triples.len();
    for (i, g) in groups.iter().enumerate() {
        if g.triples.len() != k || g.advantages.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "image {i}: {} triples and {} advantages, expected {k}",
                g.triples.len(),
                g.advantages.len()
            )));
        }
    }
    if k == 0 {
        return Err(Error::ShapeMismatch("groups have no responses".into()));
    }
    Ok(k)
}

fn is_clipped(ratio: f64, advantage: f64, epsilon: f64) -> bool {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    clipped * advantage < ratio * advantage
}

/// The regularized objective averaged over all B * K responses.
pub fn objective(groups: &[ResponseGroup], cfg: &GrpoConfig) -> Result<f64> {
    Ok(objective_stats(groups, cfg)?.objective)
}

pub fn objective_stats(groups: &[ResponseGroup], cfg: &GrpoConfig) -> Result<ObjectiveStats> {
    let k = check_shapes(groups)?;
    let mut total = 0.0;
    let mut kl_total = 0.0;
    let mut clipped = 0usize;
    let mut kl_clamped = 0usize;
    for g in groups {
        for (t, &a) in g.triples.iter().zip(&g.advantages) {
            if !(t.logprob_new.is_finite() && t.logprob_old.is_finite() && t.logprob_ref.is_finite())
            {
                return Err(Error::NonFinite(format!("log-probabilities {t:?}")));
            }
            let ratio = (t.logprob_new - t.logprob_old).exp();
            let kl = kl_approx_checked(t.logprob_new, t.logprob_ref);
            total += clipped_term(ratio, a, cfg.epsilon) - cfg.beta * kl.value;
            kl_total += kl.value;
            clipped += is_clipped(ratio, a, cfg.epsilon) as usize;
            kl_clamped += kl.clamped as usize;
        }
    }
    let n = (groups.len() * k) as f64;
    Ok(ObjectiveStats {
        objective: total / n,
        kl_mean: kl_total / n,
        clip_fraction: clipped as f64 / n,
        kl_clamped,
    })
}

/// Sampled responses for one image, with everything needed to evaluate the
/// surrogate at arbitrary policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub features: Vec<f64>,
    pub values: Vec<f64>,
    pub logprob_old: Vec<f64>,
    pub logprob_ref: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEval {
    pub stats: ObjectiveStats,
    pub grad: Vec<f64>,
}

fn response_groups<P: ScoringPolicy>(policy: &P, rollouts: &[Rollout]) -> Result<Vec<ResponseGroup>> {
    rollouts
        .iter()
        .map(|r| {
            if r.values.len() != r.logprob_old.len()
                || r.values.len() != r.logprob_ref.len()
                || r.values.len() != r.advantages.len()
            {
                return Err(Error::ShapeMismatch("rollout fields differ in length".into()));
            }
            let triples = r
                .values
                .iter()
                .zip(r.logprob_old.iter().zip(&r.logprob_ref))
                .map(|(&v, (&old, &rf))| {
                    Ok(RatioTriple {
                        logprob_new: policy.logprob(&r.features, v)?,
                        logprob_old: old,
                        logprob_ref: rf,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ResponseGroup {
                triples,
                advantages: r.advantages.clone(),
            })
        })
        .collect()
}

/// Objective value of `policy` on fixed rollouts.
pub fn surrogate_value<P: ScoringPolicy>(
    policy: &P,
    rollouts: &[Rollout],
    cfg: &GrpoConfig,
) -> Result<f64> {
    objective(&response_groups(policy, rollouts)?, cfg)
}

/// Objective and its gradient w.r.t. the policy parameters.
///
/// Advantages are constants. Where the clipped branch is strictly smaller
/// the ratio term contributes nothing; otherwise it contributes
/// `a * ratio * grad(logprob)`. The KL term contributes
/// `-beta * (1 - rho) * grad(logprob)` unless `rho` was clamped.
pub fn surrogate<P: ScoringPolicy>(
    policy: &P,
    rollouts: &[Rollout],
    cfg: &GrpoConfig,
) -> Result<SurrogateEval> {
    let groups = response_groups(policy, rollouts)?;
    let stats = objective_stats(&groups, cfg)?;
    let mut grad = vec![0.0; policy.num_params()];
    let n: usize = groups.iter().map(|g| g.triples.len()).sum();
    for (r, g) in rollouts.iter().zip(&groups) {
        for ((t, &a), &v) in g.triples.iter().zip(&g.advantages).zip(&r.values) {
            let ratio = (t.logprob_new - t.logprob_old).exp();
            let mut coef = if is_clipped(ratio, a, cfg.epsilon) {
                0.0
            } else {
                a * ratio
            };
            let kl = kl_approx_checked(t.logprob_new, t.logprob_ref);
            if !kl.clamped {
                let rho = (t.logprob_ref - t.logprob_new).exp();
                coef -= cfg.beta * (1.0 - rho);
            }
            if coef != 0.0 {
                let lg = policy.logprob_grad(&r.features, v)?;
                grad.iter_mut().zip(&lg).for_each(|(g, d)| *g += coef * d);
            }
        }
    }
    grad.iter_mut().for_each(|g| *g /= n as f64);
    Ok(SurrogateEval { stats, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rv(r: &[f64]) -> RewardVector {
        RewardVector {
            image_id: "x".into(),
            rewards: r.to_vec(),
        }
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(advantages(&rv(&[1.0, 1.0, 1.0])).unwrap().advantages, vec![0.0; 3]);
        assert_eq!(advantages(&rv(&[0.0, 1.0])).unwrap().advantages, vec![-1.0, 1.0]);
        let a = advantages(&rv(&[0.2, 0.5, 0.8])).unwrap().advantages;
        let expected = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (x, e) in a.iter().zip(expected) {
            assert!((x - e).abs() < 1e-12);
        }
        assert!(advantages(&rv(&[0.3])).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_approx(-1.3, -1.3), 0.0);
        // rho = exp(ref - new).
        let two = kl_approx(0.0, 2f64.ln());
        assert!((two - 0.306_852_819_440_054_7).abs() < 1e-14);
        let half = kl_approx(0.0, 0.5f64.ln());
        assert!((half - 0.193_147_180_559_945_3).abs() < 1e-14);
        let huge = kl_approx_checked(-1000.0, 0.0);
        assert!(huge.clamped && huge.value.is_finite());
    }

    #[test]
    fn clipped_examples() {
        assert_eq!(clipped_term(1.0, 0.7, 0.2), 0.7);
        assert!((clipped_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_term(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
    }

    fn triple(new: f64, old: f64, rf: f64) -> RatioTriple {
        RatioTriple {
            logprob_new: new,
            logprob_old: old,
            logprob_ref: rf,
        }
    }

    #[test]
    fn objective_stationary_start_is_zero() {
        let groups = vec![
            ResponseGroup {
                triples: vec![triple(-1.0, -1.0, -1.0); 3],
                advantages: vec![0.0; 3],
            };
            2
        ];
        assert_eq!(objective(&groups, &GrpoConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn objective_by_hand() {
        let cfg = GrpoConfig::default();
        let t1 = triple(-0.9, -1.0, -1.2);
        let t2 = triple(-1.5, -1.2, -1.1);
        let groups = vec![ResponseGroup {
            triples: vec![t1, t2],
            advantages: vec![1.0, -1.0],
        }];
        // Response 1: ratio e^0.1 ~ 1.105 inside the band -> 1.105...;
        // response 2: ratio e^-0.3 ~ 0.741 < 0.8 with a < 0 -> min(-0.741, -0.8) = -0.8.
        let kl1 = (-0.3f64).exp() + 0.3 - 1.0;
        let kl2 = (0.4f64).exp() - 0.4 - 1.0;
        let expected = ((0.1f64.exp() - 0.04 * kl1) + (-0.8 - 0.04 * kl2)) / 2.0;
        let got = objective(&groups, &cfg).unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");

        let pure = GrpoConfig { beta: 0.0, ..cfg };
        let got = objective(&groups, &pure).unwrap();
        assert!((got - (0.1f64.exp() - 0.8) / 2.0).abs() < 1e-14);
        let stats = objective_stats(&groups, &cfg).unwrap();
        assert_eq!(stats.clip_fraction, 0.5);
    }

    #[test]
    fn objective_shape_mismatch() {
        let groups = vec![
            ResponseGroup {
                triples: vec![triple(0.0, 0.0, 0.0); 2],
                advantages: vec![0.0; 2],
            },
            ResponseGroup {
                triples: vec![triple(0.0, 0.0, 0.0); 3],
                advantages: vec![0.0; 3],
            },
        ];
        assert!(matches!(
            objective(&groups, &GrpoConfig::default()),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(objective(&[], &GrpoConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        for bad in [
            GrpoConfig { epsilon: 0.0, ..Default::default() },
            GrpoConfig { epsilon: 1.0, ..Default::default() },
            GrpoConfig { beta: -0.1, ..Default::default() },
            GrpoConfig { k_responses: 1, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    proptest! {
        #[test]
        fn advantages_standardized(r in prop::collection::vec(0.0f64..1.0, 2..10)) {
            let a = standardize(&r).unwrap();
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            let spread = r.iter().cloned().fold(f64::MIN, f64::max) - r.iter().cloned().fold(f64::MAX, f64::min);
            if spread > 1e-9 {
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((std - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn kl_nonnegative(a in -30.0f64..30.0, b in -30.0f64..30.0) {
            prop_assert!(kl_approx(a, b) >= 0.0);
            prop_assert_eq!(kl_approx(a, a), 0.0);
        }

        #[test]
        fn clipped_bounds(r in 0.01f64..5.0, a in -3.0f64..3.0, eps in 0.05f64..0.9) {
            let c = clipped_term(r, a, eps);
            let clip = r.clamp(1.0 - eps, 1.0 + eps);
            if a > 0.0 { prop_assert!(c <= r * a + 1e-15); }
            if a < 0.0 { prop_assert!(c <= clip * a + 1e-15); }
            if (1.0 - eps..=1.0 + eps).contains(&r) { prop_assert_eq!(c, r * a); }
        }

        #[test]
        fn objective_order_invariant(
            vals in prop::collection::vec((-3.0f64..0.0, -3.0f64..0.0, -3.0f64..0.0, -2.0f64..2.0), 12),
            rot in 0usize..4,
        ) {
            let cfg = GrpoConfig::default();
            let mut groups: Vec<ResponseGroup> = vals.chunks(3).map(|c| ResponseGroup {
                triples: c.iter().map(|&(n, o, r, _)| triple(n, o, r)).collect(),
                advantages: c.iter().map(|v| v.3).collect(),
            }).collect();
            let base = objective(&groups, &cfg).unwrap();
            groups.rotate_left(rot);
            for g in groups.iter_mut() {
                g.triples.reverse();
                g.advantages.reverse();
            }
            prop_assert!((objective(&groups, &cfg).unwrap() - base).abs() < 1e-12);
        }
    }
}
