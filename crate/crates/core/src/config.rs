//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.
//! Every key, its default and its meaning:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 0 | master seed for world, split, init and sampling |
//! | `epochs` | 10 | training epochs |
//! | `batch_size` | 8 | images per step (B) |
//! | `k_responses` | 6 | sampled scores per image (K) |
//! | `epsilon` | 0.2 | ratio clip half-width |
//! | `beta` | 0.04 | KL penalty weight |
//! | `learning_rate` | 0.01 | gradient-ascent step; 1e-6 is the large-model value |
//! | `old_refresh` | epoch | `epoch` or `step` |
//! | `gamma` | 1e-8 | variance floor in the comparison denominator |
//! | `variant` | mean-anchored | `mean-anchored`, `prob-average` or `case-v` |
//! | `variance` | population | `population` or `unbiased` |
//! | `reward` | fidelity | `fidelity`, `binary` or `regression` |
//! | `binary_tie_band` | 0.1 | tie acceptance band for the binary reward |
//! | `tie_tol` | 0 | MOS differences up to this count as ties |
//! | `init_log_std` | ln 0.5 | initial policy log-std |
//! | `init_weight_scale` | 0.01 | std of the initial random weights |
//! | `truncation` | resample-then-clamp | or `strict` |
//! | `n_images` | 200 | synthetic world size |
//! | `feature_dim` | 8 | feature vector length |
//! | `mos_noise_std` | 0.1 | noise added to latent quality before scaling |
//! | `mos_low` / `mos_high` | 1 / 5 | MOS scale |
//! | `logistic_compressor` | false | squash latent through a logistic first |
//! | `dataset_id` | synthetic | dataset tag on generated rows |
//! | `holdout_fraction` | 0.2 | share of images kept out of training |
//! | `clamp` | clamp | `clamp` or `reject` for out-of-range answers |
//! | `n_levels` | 5 | gMAD quality levels |
//! | `gmad_tolerance` | 0 | 0 means 2% of the defender's range |
//! | `world` | | MOS CSV input |
//! | `latent` | | latent-quality sidecar CSV |
//! | `checkpoint` | | policy checkpoint JSON |
//! | `checkpoint_b` | | second checkpoint for gMAD |
//! | `scores_a` / `scores_b` | | score CSVs for gMAD |
//! | `responses` | | JSONL response log |
//! | `out_dir` | | output directory; default `runs/<timestamp>-seed<seed>` |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{ClampPolicy, SyntheticWorldConfig};
use crate::error::{Error, Result};
use crate::grpo::OldPolicyRefresh;
use crate::policy::Truncation;
use crate::quality::VarianceMode;
use crate::thurstone::Variant;
use crate::train::{RewardSource, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub world: SyntheticWorldConfig,
    pub init_log_std: f64,
    pub init_weight_scale: f64,
    pub truncation: Truncation,
    pub holdout_fraction: f64,
    pub clamp: ClampPolicy,
    pub n_levels: usize,
    pub gmad_tolerance: f64,
    pub world_path: Option<PathBuf>,
    pub latent_path: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_b: Option<PathBuf>,
    pub scores_a: Option<PathBuf>,
    pub scores_b: Option<PathBuf>,
    pub responses: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            world: SyntheticWorldConfig::default(),
            init_log_std: 0.5f64.ln(),
            init_weight_scale: 0.01,
            truncation: Truncation::default(),
            holdout_fraction: 0.2,
            clamp: ClampPolicy::Clamp,
            n_levels: 5,
            gmad_tolerance: 0.0,
            world_path: None,
            latent_path: None,
            checkpoint: None,
            checkpoint_b: None,
            scores_a: None,
            scores_b: None,
            responses: None,
            out_dir: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn choice<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == v)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("{key}: {v:?} is not one of {}", names.join(", ")))
        })
}

const REFRESH: &[(&str, OldPolicyRefresh)] = &[
    ("epoch", OldPolicyRefresh::Epoch),
    ("step", OldPolicyRefresh::Step),
];
const VARIANCE: &[(&str, VarianceMode)] = &[
    ("population", VarianceMode::Population),
    ("unbiased", VarianceMode::Unbiased),
];
const TRUNCATION: &[(&str, Truncation)] = &[
    ("resample-then-clamp", Truncation::ResampleThenClamp),
    ("strict", Truncation::Strict),
];
const CLAMP: &[(&str, ClampPolicy)] = &[("clamp", ClampPolicy::Clamp), ("reject", ClampPolicy::Reject)];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], t: &T) -> &'static str {
    options.iter().find(|(_, o)| o == t).map(|(n, _)| *n).unwrap_or("?")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let w = &mut self.world;
        match key {
            "seed" => {
                t.seed = num(key, v)?;
                w.seed = t.seed;
            }
            "epochs" => t.epochs = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "k_responses" => t.grpo.k_responses = num(key, v)?,
            "epsilon" => t.grpo.epsilon = num(key, v)?,
            "beta" => t.grpo.beta = num(key, v)?,
            "learning_rate" => t.grpo.learning_rate = num(key, v)?,
            "old_refresh" => t.grpo.old_refresh = choice(key, v, REFRESH)?,
            "gamma" => t.thurstone.gamma = num(key, v)?,
            "variant" => t.thurstone.variant = v.parse::<Variant>()?,
            "variance" => t.thurstone.variance = choice(key, v, VARIANCE)?,
            "reward" => t.reward = v.parse::<RewardSource>()?,
            "binary_tie_band" => t.binary_tie_band = num(key, v)?,
            "tie_tol" => t.tie_tol = num(key, v)?,
            "init_log_std" => self.init_log_std = num(key, v)?,
            "init_weight_scale" => self.init_weight_scale = num(key, v)?,
            "truncation" => self.truncation = choice(key, v, TRUNCATION)?,
            "n_images" => w.n_images = num(key, v)?,
            "feature_dim" => w.feature_dim = num(key, v)?,
            "mos_noise_std" => w.mos_noise_std = num(key, v)?,
            "mos_low" => w.mos_low = num(key, v)?,
            "mos_high" => w.mos_high = num(key, v)?,
            "logistic_compressor" => w.logistic_compressor = num(key, v)?,
            "dataset_id" => w.dataset_id = v.to_string(),
            "holdout_fraction" => self.holdout_fraction = num(key, v)?,
            "clamp" => self.clamp = choice(key, v, CLAMP)?,
            "n_levels" => self.n_levels = num(key, v)?,
            "gmad_tolerance" => self.gmad_tolerance = num(key, v)?,
            "world" => self.world_path = Some(v.into()),
            "latent" => self.latent_path = Some(v.into()),
            "checkpoint" => self.checkpoint = Some(v.into()),
            "checkpoint_b" => self.checkpoint_b = Some(v.into()),
            "scores_a" => self.scores_a = Some(v.into()),
            "scores_b" => self.scores_b = Some(v.into()),
            "responses" => self.responses = Some(v.into()),
            "out_dir" => self.out_dir = Some(v.into()),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.world.validate()?;
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        if !self.init_log_std.is_finite() || !(self.init_weight_scale >= 0.0) {
            return Err(Error::Config("bad policy initialization".into()));
        }
        if self.n_levels == 0 {
            return Err(Error::Config("n_levels must be >= 1".into()));
        }
        if !(self.gmad_tolerance >= 0.0) {
            return Err(Error::Config("gmad_tolerance must be >= 0".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a form `parse` reads back.
    /// `out_dir` is left out so reruns into different directories echo
    /// identically.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let w = &self.world;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", t.seed.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("k_responses", t.grpo.k_responses.to_string());
        kv("epsilon", t.grpo.epsilon.to_string());
        kv("beta", t.grpo.beta.to_string());
        kv("learning_rate", t.grpo.learning_rate.to_string());
        kv("old_refresh", name_of(REFRESH, &t.grpo.old_refresh).into());
        kv("gamma", t.thurstone.gamma.to_string());
        kv("variant", t.thurstone.variant.as_str().into());
        kv("variance", name_of(VARIANCE, &t.thurstone.variance).into());
        kv("reward", t.reward.as_str().into());
        kv("binary_tie_band", t.binary_tie_band.to_string());
        kv("tie_tol", t.tie_tol.to_string());
        kv("init_log_std", self.init_log_std.to_string());
        kv("init_weight_scale", self.init_weight_scale.to_string());
        kv("truncation", name_of(TRUNCATION, &self.truncation).into());
        kv("n_images", w.n_images.to_string());
        kv("feature_dim", w.feature_dim.to_string());
        kv("mos_noise_std", w.mos_noise_std.to_string());
        kv("mos_low", w.mos_low.to_string());
        kv("mos_high", w.mos_high.to_string());
        kv("logistic_compressor", w.logistic_compressor.to_string());
        kv("dataset_id", w.dataset_id.clone());
        kv("holdout_fraction", self.holdout_fraction.to_string());
        kv("clamp", name_of(CLAMP, &self.clamp).into());
        kv("n_levels", self.n_levels.to_string());
        kv("gmad_tolerance", self.gmad_tolerance.to_string());
        let paths = [
            ("world", &self.world_path),
            ("latent", &self.latent_path),
            ("checkpoint", &self.checkpoint),
            ("checkpoint_b", &self.checkpoint_b),
            ("scores_a", &self.scores_a),
            ("scores_b", &self.scores_b),
            ("responses", &self.responses),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        s
    }
}
