//! Training loop: sample K scores per image from the old policy, reward
//! them against MOS-derived preferences, and ascend the GRPO surrogate.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::srcc;
use crate::grpo::{standardize, surrogate, GrpoConfig, OldPolicyRefresh, Rollout};
use crate::policy::{GaussianScorer, PolicyParams, ScoringPolicy, SCORE_MAX, SCORE_MIN};
use crate::quality::{slice_stats, MosRecord, PreferenceTable, ScoreGroup, VarianceMode};
use crate::reward::{batch_rewards, RewardConfig, RewardKind};
use crate::thurstone::ThurstoneConfig;

/// Where per-response rewards come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardSource {
    #[default]
    Fidelity,
    Binary,
    /// Absolute-error reward against MOS linearly rescaled to [1, 5] over
    /// the whole training pool. Baseline for the scale-realignment contrast.
    Regression,
}

impl RewardSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            RewardSource::Fidelity => "fidelity",
            RewardSource::Binary => "binary",
            RewardSource::Regression => "regression",
        }
    }
}

impl std::str::FromStr for RewardSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fidelity" => Ok(RewardSource::Fidelity),
            "binary" => Ok(RewardSource::Binary),
            "regression" => Ok(RewardSource::Regression),
            other => Err(Error::Config(format!(
                "unknown reward {other:?} (expected fidelity, binary or regression)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub grpo: GrpoConfig,
    pub thurstone: ThurstoneConfig,
    pub reward: RewardSource,
    pub binary_tie_band: f64,
    /// MOS differences up to this size count as ties.
    pub tie_tol: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            grpo: GrpoConfig::default(),
            thurstone: ThurstoneConfig::default(),
            reward: RewardSource::Fidelity,
            binary_tie_band: 0.1,
            tie_tol: 0.0,
            batch_size: 8,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.grpo.validate()?;
        self.thurstone.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.tie_tol >= 0.0) {
            return Err(Error::Config("tie_tol must be >= 0".into()));
        }
        if !(0.0..=0.5).contains(&self.binary_tie_band) {
            return Err(Error::Config("binary_tie_band must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

/// One optimizer step, as written to the JSON-lines run log.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub objective: f64,
    pub mean_reward: f64,
    pub mean_score_std: f64,
    pub kl_mean: f64,
    pub clip_fraction: f64,
    pub kl_clamped: usize,
    /// Per-image reward vectors, kept in memory only.
    #[serde(skip)]
    pub rewards: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub heldout_srcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainRunLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainRunLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Every reward of every step, flattened in visiting order.
    pub fn reward_trace(&self) -> Vec<f64> {
        self.steps
            .iter()
            .flat_map(|s| s.rewards.iter().flatten().cloned())
            .collect()
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_EPOCH: u64 = 2 << 56;
const STREAM_SAMPLE: u64 = 3 << 56;

/// Gaussian scorer with small seeded weights, zero bias and the given
/// initial log-std.
pub fn init_policy(feature_dim: usize, seed: u64, init_log_std: f64, weight_scale: f64) -> GaussianScorer {
    let mut rng = rng_stream(seed, STREAM_INIT);
    let weights = (0..feature_dim)
        .map(|_| weight_scale * crate::policy::standard_normal(&mut rng))
        .collect();
    GaussianScorer::new(PolicyParams {
        weights,
        bias: 0.0,
        log_std: init_log_std,
    })
}

/// Shuffled minibatches for one epoch. Every batch draws from a single
/// dataset, so MOS values are only ever compared on their native scale.
/// Trailing chunks smaller than two images are dropped.
pub fn epoch_batches(pool: &[MosRecord], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = rng_stream(seed, STREAM_EPOCH | epoch as u64);
    let mut by_dataset: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in pool.iter().enumerate() {
        by_dataset.entry(r.dataset_id.as_str()).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in by_dataset {
        idx.shuffle(&mut rng);
        batches.extend(
            idx.chunks(batch_size)
                .filter(|c| c.len() >= 2)
                .map(|c| c.to_vec()),
        );
    }
    batches.shuffle(&mut rng);
    batches
}

/// Regression targets: all MOS values of the pool mapped linearly onto
/// [1, 5] with one shared min/max.
pub fn pooled_regression_targets(pool: &[MosRecord]) -> Result<HashMap<String, f64>> {
    let mos: Vec<f64> = pool.iter().map(|r| r.mos).collect();
    let scaled = crate::data::rescale_linear(&mos, SCORE_MIN, SCORE_MAX)?;
    Ok(pool
        .iter()
        .zip(scaled)
        .map(|(r, s)| (r.image_id.clone(), s))
        .collect())
}

/// Inputs to one optimizer step besides the policies.
pub struct StepContext<'a> {
    pub cfg: &'a TrainConfig,
    pub step: usize,
    pub epoch: usize,
    pub regression_targets: Option<&'a HashMap<String, f64>>,
}

/// One GRPO update. Scores are sampled from `old`; the surrogate and its
/// gradient are evaluated at `policy`, which is moved by
/// `learning_rate * gradient`.
pub fn grpo_step<P: ScoringPolicy>(
    policy: &P,
    old: &P,
    reference: &P,
    batch: &[&MosRecord],
    ctx: &StepContext<'_>,
) -> Result<(P, StepLog)> {
    let cfg = ctx.cfg;
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let k = cfg.grpo.k_responses;

    let mut groups = Vec::with_capacity(batch.len());
    let mut logprob_old = Vec::with_capacity(batch.len());
    for (i, rec) in batch.iter().enumerate() {
        rec.validate()?;
        let mut rng = rng_stream(cfg.seed, STREAM_SAMPLE | ((ctx.step as u64) << 20) | i as u64);
        let samples = (0..k)
            .map(|_| old.sample(&rec.features, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        logprob_old.push(samples.iter().map(|s| s.logprob).collect::<Vec<_>>());
        groups.push(ScoreGroup::new(
            rec.image_id.clone(),
            samples.iter().map(|s| s.value).collect(),
        )?);
    }

    let rewards: Vec<Vec<f64>> = match cfg.reward {
        RewardSource::Fidelity | RewardSource::Binary => {
            let mos: Vec<f64> = batch.iter().map(|r| r.mos).collect();
            let prefs = PreferenceTable::from_mos(&mos, cfg.tie_tol)?;
            let kind = if cfg.reward == RewardSource::Fidelity {
                RewardKind::Fidelity
            } else {
                RewardKind::Binary
            };
            let rc = RewardConfig {
                kind,
                binary_tie_band: cfg.binary_tie_band,
            };
            batch_rewards(&groups, &prefs, &cfg.thurstone, &rc)?
                .into_iter()
                .map(|r| r.rewards)
                .collect()
        }
        RewardSource::Regression => {
            let targets = ctx.regression_targets.ok_or_else(|| {
                Error::Config("regression reward needs pooled targets".into())
            })?;
            groups
                .iter()
                .map(|g| {
                    let t = *targets
                        .get(&g.image_id)
                        .ok_or_else(|| Error::Config(format!("no target for {}", g.image_id)))?;
                    Ok(g.scores()
                        .iter()
                        .map(|q| (1.0 - (q - t).abs() / (SCORE_MAX - SCORE_MIN)).max(0.0))
                        .collect())
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let rollouts = batch
        .iter()
        .zip(&groups)
        .zip(logprob_old.into_iter().zip(&rewards))
        .map(|((rec, g), (lp_old, r))| {
            let logprob_ref = g
                .scores()
                .iter()
                .map(|&v| reference.logprob(&rec.features, v))
                .collect::<Result<Vec<_>>>()?;
            Ok(Rollout {
                features: rec.features.clone(),
                values: g.scores().to_vec(),
                logprob_old: lp_old,
                logprob_ref,
                advantages: standardize(r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let eval = surrogate(policy, &rollouts, &cfg.grpo)?;
    let mut next = policy.clone();
    if cfg.grpo.learning_rate != 0.0 {
        let params: Vec<f64> = policy
            .params()
            .iter()
            .zip(&eval.grad)
            .map(|(p, g)| p + cfg.grpo.learning_rate * g)
            .collect();
        next.set_params(&params)
            .map_err(|e| Error::Numeric(format!("step {}: {e}", ctx.step)))?;
    }

    let n_rewards: usize = rewards.iter().map(Vec::len).sum();
    let mean_reward = rewards.iter().flatten().sum::<f64>() / n_rewards as f64;
    let mean_score_std = groups
        .iter()
        .map(|g| slice_stats(g.scores(), VarianceMode::Population).variance.sqrt())
        .sum::<f64>()
        / groups.len() as f64;
    let log = StepLog {
        step: ctx.step,
        epoch: ctx.epoch,
        objective: eval.stats.objective,
        mean_reward,
        mean_score_std,
        kl_mean: eval.stats.kl_mean,
        clip_fraction: eval.stats.clip_fraction,
        kl_clamped: eval.stats.kl_clamped,
        rewards,
    };
    Ok((next, log))
}

/// Held-out images with the ground truth to correlate against.
pub struct HeldOut<'a> {
    pub records: &'a [MosRecord],
    pub targets: &'a [f64],
}

/// Owns the live policy plus its old and reference snapshots.
pub struct Trainer<P: ScoringPolicy> {
    pub policy: P,
    pub old: P,
    pub reference: P,
    pub cfg: TrainConfig,
    step: usize,
}

impl<P: ScoringPolicy> Trainer<P> {
    /// The reference snapshot is frozen at `initial`.
    pub fn new(initial: P, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            old: initial.clone(),
            reference: initial.clone(),
            policy: initial,
            cfg,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn train(&mut self, pool: &[MosRecord], heldout: Option<HeldOut<'_>>) -> Result<TrainRunLog> {
        if pool.len() < 2 {
            return Err(Error::BatchTooSmall(pool.len()));
        }
        let targets = match self.cfg.reward {
            RewardSource::Regression => Some(pooled_regression_targets(pool)?),
            _ => None,
        };
        let mut log = TrainRunLog::default();
        for epoch in 0..self.cfg.epochs {
            if self.cfg.grpo.old_refresh == OldPolicyRefresh::Epoch {
                self.old = self.policy.clone();
            }
            for batch in epoch_batches(pool, self.cfg.batch_size, self.cfg.seed, epoch) {
                if self.cfg.grpo.old_refresh == OldPolicyRefresh::Step {
                    self.old = self.policy.clone();
                }
                let recs: Vec<&MosRecord> = batch.iter().map(|&i| &pool[i]).collect();
                let ctx = StepContext {
                    cfg: &self.cfg,
                    step: self.step,
                    epoch,
                    regression_targets: targets.as_ref(),
                };
                let (next, entry) = grpo_step(&self.policy, &self.old, &self.reference, &recs, &ctx)?;
                self.policy = next;
                log.steps.push(entry);
                self.step += 1;
            }
            let heldout_srcc = match &heldout {
                Some(h) => {
                    let pred = predict(&self.policy, h.records)?;
                    srcc(&pred, h.targets).ok()
                }
                None => None,
            };
            log.epochs.push(EpochLog {
                epoch,
                heldout_srcc,
            });
        }
        Ok(log)
    }
}

/// Deterministic (mean) scores for every record.
pub fn predict<P: ScoringPolicy>(policy: &P, records: &[MosRecord]) -> Result<Vec<f64>> {
    records.iter().map(|r| policy.mean_score(&r.features)).collect()
}
