//! Grouped quality scores, MOS records and ground-truth pairwise preferences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The K quality scores sampled for one image under the current policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGroup {
    pub image_id: String,
    scores: Vec<f64>,
}

impl ScoreGroup {
    /// Builds a group, requiring at least two finite scores.
    pub fn new(image_id: impl Into<String>, scores: Vec<f64>) -> Result<Self> {
        let image_id = image_id.into();
        if scores.len() < 2 {
            return Err(Error::InvalidGroup(format!(
                "image {image_id}: need at least 2 scores, got {}",
                scores.len()
            )));
        }
        Self::checked(image_id, scores)
    }

    /// Like [`ScoreGroup::new`] but accepts a single score. Only the
    /// comparison functions tolerate K = 1; statistics still reject it.
    pub fn single_allowed(image_id: impl Into<String>, scores: Vec<f64>) -> Result<Self> {
        let image_id = image_id.into();
        if scores.is_empty() {
            return Err(Error::InvalidGroup(format!("image {image_id}: empty group")));
        }
        Self::checked(image_id, scores)
    }

    fn checked(image_id: String, scores: Vec<f64>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {bad} in group {image_id}")));
        }
        Ok(ScoreGroup { image_id, scores })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Divisor used for the within-group variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// Divide by K.
    #[default]
    Population,
    /// Divide by K - 1.
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    pub variance: f64,
}

/// Mean and population variance of a group.
pub fn group_stats(g: &ScoreGroup) -> Result<GroupStats> {
    group_stats_with(g, VarianceMode::Population)
}

pub fn group_stats_with(g: &ScoreGroup, mode: VarianceMode) -> Result<GroupStats> {
    if g.len() < 2 {
        return Err(Error::InvalidGroup(format!(
            "image {}: statistics need at least 2 scores",
            g.image_id
        )));
    }
    Ok(slice_stats(g.scores(), mode))
}

/// Statistics of a raw slice. A single element has zero variance.
pub(crate) fn slice_stats(xs: &[f64], mode: VarianceMode) -> GroupStats {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    let divisor = match mode {
        VarianceMode::Population => n,
        VarianceMode::Unbiased => (n - 1.0).max(1.0),
    };
    GroupStats {
        mean,
        variance: (ss / divisor).max(0.0),
    }
}

/// One image with its mean opinion score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosRecord {
    pub image_id: String,
    pub mos: f64,
    pub dataset_id: String,
    pub features: Vec<f64>,
}

impl MosRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.mos.is_finite() {
            return Err(Error::NonFinite(format!(
                "MOS {} for image {}",
                self.mos, self.image_id
            )));
        }
        if self.features.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature vector of image {}",
                self.image_id
            )));
        }
        Ok(())
    }
}

/// Ground-truth preference of `mos_i` over `mos_j`: 1, 0.5 (within
/// `tie_tol`) or 0.
pub fn true_preference(mos_i: f64, mos_j: f64, tie_tol: f64) -> Result<f64> {
    if !mos_i.is_finite() || !mos_j.is_finite() || !tie_tol.is_finite() {
        return Err(Error::NonFinite(format!(
            "preference inputs ({mos_i}, {mos_j}, tol {tie_tol})"
        )));
    }
    if tie_tol < 0.0 {
        return Err(Error::Config(format!("tie tolerance must be >= 0, got {tie_tol}")));
    }
    let diff = mos_i - mos_j;
    Ok(if diff.abs() <= tie_tol {
        0.5
    } else if diff > 0.0 {
        1.0
    } else {
        0.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPreference {
    pub i: usize,
    pub j: usize,
    pub p_true: f64,
}

/// Dense B x B table of true preferences for one batch. The diagonal is
/// unset.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTable {
    n: usize,
    values: Vec<Option<f64>>,
}

impl PreferenceTable {
    pub fn from_mos(mos: &[f64], tie_tol: f64) -> Result<Self> {
        let n = mos.len();
        let mut values = vec![None; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    values[i * n + j] = Some(true_preference(mos[i], mos[j], tie_tol)?);
                }
            }
        }
        Ok(PreferenceTable { n, values })
    }

    /// Builds a table from explicit ordered pairs; unspecified pairs stay
    /// missing.
    pub fn from_pairs(n: usize, pairs: &[PairPreference]) -> Result<Self> {
        let mut values = vec![None; n * n];
        for p in pairs {
            if p.i == p.j || p.i >= n || p.j >= n {
                return Err(Error::ShapeMismatch(format!(
                    "invalid pair ({}, {}) for batch of {n}",
                    p.i, p.j
                )));
            }
            if ![0.0, 0.5, 1.0].contains(&p.p_true) {
                return Err(Error::ProbabilityOutOfRange(p.p_true));
            }
            values[p.i * n + p.j] = Some(p.p_true);
        }
        Ok(PreferenceTable { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> Result<f64> {
        if i >= self.n || j >= self.n || i == j {
            return Err(Error::MissingPreference(i, j));
        }
        self.values[i * self.n + j].ok_or(Error::MissingPreference(i, j))
    }

    pub fn pairs(&self) -> impl Iterator<Item = PairPreference> + '_ {
        (0..self.n).flat_map(move |i| {
            (0..self.n).filter_map(move |j| {
                self.values[i * self.n + j].map(|p_true| PairPreference { i, j, p_true })
            })
        })
    }
}
