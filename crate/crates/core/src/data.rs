//! Synthetic observer worlds, MOS tables and VLM response logs.
//!
//! Feature vectors stand in for image content. A synthetic world draws
//! features, derives a hidden latent quality from them, and produces MOS
//! values by adding observer noise and mapping onto a dataset-native scale.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{standard_normal, SCORE_MAX, SCORE_MIN};
use crate::quality::{MosRecord, ScoreGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldConfig {
    pub n_images: usize,
    pub feature_dim: usize,
    /// Direction of the hidden quality axis. Empty means "draw a random unit
    /// vector from the seed".
    pub latent_weights: Vec<f64>,
    pub mos_noise_std: f64,
    pub mos_low: f64,
    pub mos_high: f64,
    /// Squash noisy quality through a logistic before mapping to the scale,
    /// mimicking rating saturation at both ends.
    pub logistic_compressor: bool,
    pub dataset_id: String,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            n_images: 200,
            feature_dim: 8,
            latent_weights: Vec::new(),
            mos_noise_std: 0.1,
            mos_low: 1.0,
            mos_high: 5.0,
            logistic_compressor: false,
            dataset_id: "synthetic".into(),
            id_prefix: "img".into(),
            seed: 0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images < 2 {
            return Err(Error::Config(format!(
                "n_images must be >= 2, got {}",
                self.n_images
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if !self.latent_weights.is_empty() && self.latent_weights.len() != self.feature_dim {
            return Err(Error::Config(format!(
                "latent_weights has {} entries, feature_dim is {}",
                self.latent_weights.len(),
                self.feature_dim
            )));
        }
        if !(self.mos_noise_std >= 0.0 && self.mos_noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "mos_noise_std must be >= 0, got {}",
                self.mos_noise_std
            )));
        }
        if !(self.mos_low.is_finite() && self.mos_high.is_finite() && self.mos_high > self.mos_low)
        {
            return Err(Error::Config(format!(
                "MOS scale needs high > low, got [{}, {}]",
                self.mos_low, self.mos_high
            )));
        }
        if self.dataset_id.contains(',') || self.id_prefix.contains(',') {
            return Err(Error::Config("identifiers may not contain commas".into()));
        }
        Ok(())
    }
}

/// Generated MOS table plus the hidden ground truth it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub records: Vec<MosRecord>,
    pub latent: Vec<f64>,
    pub latent_weights: Vec<f64>,
}

impl World {
    pub fn latent_map(&self) -> HashMap<String, f64> {
        self.records
            .iter()
            .zip(&self.latent)
            .map(|(r, l)| (r.image_id.clone(), *l))
            .collect()
    }
}

const WEIGHT_STREAM: u64 = 0x5eed_0001;

pub fn generate_world(cfg: &SyntheticWorldConfig) -> Result<World> {
    cfg.validate()?;
    let latent_weights = if cfg.latent_weights.is_empty() {
        let mut wrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ WEIGHT_STREAM);
        let w: Vec<f64> = (0..cfg.feature_dim).map(|_| standard_normal(&mut wrng)).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.into_iter().map(|x| x / norm).collect()
    } else {
        cfg.latent_weights.clone()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let features: Vec<Vec<f64>> = (0..cfg.n_images)
        .map(|_| (0..cfg.feature_dim).map(|_| standard_normal(&mut rng)).collect())
        .collect();
    let latent: Vec<f64> = features
        .iter()
        .map(|f| f.iter().zip(&latent_weights).map(|(a, b)| a * b).sum())
        .collect();
    let raw: Vec<f64> = latent
        .iter()
        .map(|l| {
            let noisy = l + cfg.mos_noise_std * standard_normal(&mut rng);
            if cfg.logistic_compressor {
                1.0 / (1.0 + (-noisy).exp())
            } else {
                noisy
            }
        })
        .collect();
    let mos = rescale_linear(&raw, cfg.mos_low, cfg.mos_high)?;

    let width = cfg.n_images.to_string().len().max(5);
    let records = features
        .into_iter()
        .zip(mos)
        .enumerate()
        .map(|(i, (features, mos))| MosRecord {
            image_id: format!("{}{:0width$}", cfg.id_prefix, i),
            mos,
            dataset_id: cfg.dataset_id.clone(),
            features,
        })
        .collect();
    Ok(World {
        records,
        latent,
        latent_weights,
    })
}

/// Affine min-max map of `xs` onto `[low, high]`.
pub fn rescale_linear(xs: &[f64], low: f64, high: f64) -> Result<Vec<f64>> {
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(Error::Config(
            "cannot rescale a constant or empty vector".into(),
        ));
    }
    Ok(xs
        .iter()
        .map(|x| low + (high - low) * (x - min) / (max - min))
        .collect())
}

/// Seeded random split into (train, held-out).
pub fn split_holdout(
    records: &[MosRecord],
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<MosRecord>, Vec<MosRecord>)> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::Config(format!(
            "holdout_fraction must lie in [0, 1), got {holdout_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5b1d));
    let n_hold = (records.len() as f64 * holdout_fraction).round() as usize;
    let (hold, train) = idx.split_at(n_hold);
    let mut hold = hold.to_vec();
    let mut train = train.to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    Ok((
        train.iter().map(|&i| records[i].clone()).collect(),
        hold.iter().map(|&i| records[i].clone()).collect(),
    ))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes `image_id,mos,dataset_id,f0..fD-1`.
pub fn write_mos_csv(path: &Path, records: &[MosRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.features.len());
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut header = String::from("image_id,mos,dataset_id");
    for d in 0..dim {
        header.push_str(&format!(",f{d}"));
    }
    writeln!(out, "{header}").map_err(io_err(path))?;
    for r in records {
        if r.features.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.features.len(),
            });
        }
        let mut line = format!("{},{},{}", r.image_id, r.mos, r.dataset_id);
        for f in &r.features {
            line.push_str(&format!(",{f}"));
        }
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn write_latent_csv(path: &Path, world: &World) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(out, "image_id,latent").map_err(io_err(path))?;
    for (r, l) in world.records.iter().zip(&world.latent) {
        writeln!(out, "{},{}", r.image_id, l).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn finite_cell(path: &Path, line: usize, column: &str, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("column {column}: {cell:?} is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(
            path,
            line,
            format!("column {column}: non-finite value {cell:?}"),
        ));
    }
    Ok(v)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    parse_err(path, line, e.to_string())
}

/// Loads a MOS table. Records from different `dataset_id`s are returned in
/// one pool without any rescaling.
pub fn load_mos_csv(path: &Path) -> Result<Vec<MosRecord>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() < 3 || names[..3] != ["image_id", "mos", "dataset_id"] {
        return Err(parse_err(
            path,
            1,
            "header must start with image_id,mos,dataset_id",
        ));
    }
    for (d, name) in names[3..].iter().enumerate() {
        if *name != format!("f{d}") {
            return Err(parse_err(
                path,
                1,
                format!("feature column {d} is named {name:?}, expected \"f{d}\""),
            ));
        }
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let image_id = row[0].to_string();
        if image_id.is_empty() {
            return Err(parse_err(path, line, "empty image_id"));
        }
        let mos = finite_cell(path, line, "mos", &row[1])?;
        let features = (3..row.len())
            .map(|c| finite_cell(path, line, names[c], &row[c]))
            .collect::<Result<Vec<_>>>()?;
        records.push(MosRecord {
            image_id,
            mos,
            dataset_id: row[2].to_string(),
            features,
        });
    }
    Ok(records)
}

/// Loads `image_id,<value>` two-column files (latent sidecars, score maps).
pub fn load_score_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "image_id" {
        return Err(parse_err(path, 1, "expected header image_id,<value>"));
    }
    let column = headers[1].to_string();
    rdr.records()
        .map(|row| {
            let row = row.map_err(|e| csv_error(path, e))?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            Ok((row[0].to_string(), finite_cell(path, line, &column, &row[1])?))
        })
        .collect()
}

/// What to do with answers outside `[1, 5]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClampPolicy {
    #[default]
    Clamp,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParsedScore {
    pub value: f64,
    pub clamped: bool,
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)<answer>(.*?)</answer>").unwrap())
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?").unwrap())
}

/// Extracts the score from the last `<answer>...</answer>` span.
pub fn parse_response(raw: &str, policy: ClampPolicy) -> Result<f64> {
    parse_response_detailed(raw, policy).map(|p| p.value)
}

pub fn parse_response_detailed(raw: &str, policy: ClampPolicy) -> Result<ParsedScore> {
    let span = answer_re()
        .captures_iter(raw)
        .last()
        .map(|c| c.get(1).unwrap().as_str())
        .ok_or_else(|| Error::Response("no <answer></answer> span".into()))?;
    if span.trim().is_empty() {
        return Err(Error::Response("empty <answer> span".into()));
    }
    let token = number_re()
        .find(span)
        .ok_or_else(|| Error::Response(format!("no numeric token in answer {span:?}")))?;
    let value: f64 = token
        .as_str()
        .parse()
        .map_err(|_| Error::Response(format!("bad number {:?}", token.as_str())))?;
    if !value.is_finite() {
        return Err(Error::Response(format!("non-finite score {value}")));
    }
    if (SCORE_MIN..=SCORE_MAX).contains(&value) {
        return Ok(ParsedScore {
            value,
            clamped: false,
        });
    }
    match policy {
        ClampPolicy::Clamp => Ok(ParsedScore {
            value: value.clamp(SCORE_MIN, SCORE_MAX),
            clamped: true,
        }),
        ClampPolicy::Reject => Err(Error::ScoreOutOfRange(value)),
    }
}

/// Formats a score the way the scoring prompt asks the model to answer.
pub fn compose_answer(score: f64, reasoning: &str) -> String {
    format!("<think>{reasoning}</think><answer>{score:.2}</answer>")
}

#[derive(Debug, Deserialize)]
struct ResponseLine {
    image_id: String,
    text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseRecord {
    pub image_id: String,
    pub raw_text: String,
    pub parsed_score: Option<f64>,
}

/// Parsed response log grouped by image, with counters for every response
/// that needed intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseLog {
    pub groups: Vec<ScoreGroup>,
    pub records: Vec<ResponseRecord>,
    pub clamped: usize,
    pub rejected: usize,
    pub malformed: usize,
}

/// Reads a JSON-lines response log and groups the first `k` valid scores of
/// each image. Images are returned in order of first appearance.
pub fn load_response_groups(path: &Path, k: usize, policy: ClampPolicy) -> Result<ResponseLog> {
    if k < 2 {
        return Err(Error::Config(format!("K must be >= 2, got {k}")));
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut order: Vec<String> = Vec::new();
    let mut scores: HashMap<String, Vec<f64>> = HashMap::new();
    let mut records = Vec::new();
    let (mut clamped, mut rejected, mut malformed) = (0, 0, 0);
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ResponseLine = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, n + 1, format!("invalid response record: {e}")))?;
        let parsed = match parse_response_detailed(&rec.text, policy) {
            Ok(p) => {
                clamped += p.clamped as usize;
                Some(p.value)
            }
            Err(Error::ScoreOutOfRange(_)) => {
                rejected += 1;
                None
            }
            Err(_) => {
                malformed += 1;
                None
            }
        };
        let entry = scores.entry(rec.image_id.clone()).or_insert_with(|| {
            order.push(rec.image_id.clone());
            Vec::new()
        });
        if let Some(v) = parsed {
            entry.push(v);
        }
        records.push(ResponseRecord {
            image_id: rec.image_id,
            raw_text: rec.text,
            parsed_score: parsed,
        });
    }
    if records.is_empty() {
        return Err(parse_err(path, 0, "response log is empty"));
    }
    let groups = order
        .into_iter()
        .map(|id| {
            let mut s = scores.remove(&id).unwrap_or_default();
            if s.len() < k {
                return Err(Error::UnderfilledGroup {
                    image_id: id,
                    got: s.len(),
                    need: k,
                });
            }
            s.truncate(k);
            ScoreGroup::new(id, s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResponseLog {
        groups,
        records,
        clamped,
        rejected,
        malformed,
    })
}
