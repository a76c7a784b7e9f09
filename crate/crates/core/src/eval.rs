//! Rank-correlation metrics, score-spread tracking and gMAD pair search.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::TrainRunLog;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub srcc: f64,
    pub plcc: f64,
    pub n: usize,
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "need at least 2 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(())
}

/// Ranks starting at 1, with tied values sharing the average of their
/// positions.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        // positions start..end (0-based) -> ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric(
            "correlation with a constant vector".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

/// Pearson linear correlation, no nonlinear pre-mapping.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(x, y)
}

pub fn metric_report(pred: &[f64], target: &[f64]) -> Result<MetricReport> {
    Ok(MetricReport {
        srcc: srcc(pred, target)?,
        plcc: plcc(pred, target)?,
        n: pred.len(),
    })
}

/// `(step, mean per-image sampled-score std)` for every logged step.
pub fn score_std_curve(log: &TrainRunLog) -> Result<Vec<(usize, f64)>> {
    if log.steps.is_empty() {
        return Err(Error::InvalidGroup("run log has no steps".into()));
    }
    Ok(log.steps.iter().map(|s| (s.step, s.mean_score_std)).collect())
}

pub fn std_curve_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("step,mean_std\n");
    for (step, std) in curve {
        out.push_str(&format!("{step},{std}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmadPair {
    pub defender_level: usize,
    pub image_a: String,
    pub image_b: String,
    pub defender_gap: f64,
    pub attacker_gap: f64,
}

/// A quality level that produced no pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedLevel {
    pub level: usize,
    pub candidates: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GmadOutcome {
    pub pairs: Vec<GmadPair>,
    pub skipped: Vec<SkippedLevel>,
}

/// Quality level of an item with 1-based fractional rank `rank` among `n`.
///
/// Levels are equal-count quantile bins over the rank position
/// `u = (rank - 1/2) / n`. The upper half is assigned from the top so that
/// negating all scores maps level `b` onto level `levels - 1 - b`.
pub fn quantile_level(rank: f64, n: usize, levels: usize) -> usize {
    let u = (rank - 0.5) / n as f64;
    let l = levels as f64;
    let b = if u <= 0.5 {
        (l * u).floor()
    } else {
        l - 1.0 - (l * (1.0 - u)).floor()
    };
    (b.max(0.0) as usize).min(levels - 1)
}

/// 2% of the defender's score range.
pub fn default_tolerance(defender: &BTreeMap<String, f64>) -> f64 {
    let min = defender.values().cloned().fold(f64::INFINITY, f64::min);
    let max = defender.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    0.02 * (max - min)
}

/// For each defender quality level, the pair the defender scores within
/// `tolerance` of each other that the attacker separates the most.
///
/// Equal attacker gaps go to the lexicographically smallest `(a, b)` id
/// pair. The caller swaps roles for the reverse attack.
pub fn gmad_pairs(
    defender: &BTreeMap<String, f64>,
    attacker: &BTreeMap<String, f64>,
    n_levels: usize,
    tolerance: f64,
) -> Result<GmadOutcome> {
    if n_levels == 0 {
        return Err(Error::Config("n_levels must be >= 1".into()));
    }
    if !(tolerance > 0.0 && tolerance.is_finite()) {
        return Err(Error::Config(format!(
            "tolerance must be positive, got {tolerance}"
        )));
    }
    if defender.len() != attacker.len() || defender.keys().any(|k| !attacker.contains_key(k)) {
        return Err(Error::ShapeMismatch(
            "defender and attacker score different image sets".into(),
        ));
    }
    let ids: Vec<&String> = defender.keys().collect();
    let def: Vec<f64> = defender.values().cloned().collect();
    let att: Vec<f64> = ids.iter().map(|k| attacker[*k]).collect();
    if def.iter().chain(&att).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gMAD scores".into()));
    }

    let ranks = fractional_ranks(&def);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n_levels];
    for (i, r) in ranks.iter().enumerate() {
        bins[quantile_level(*r, def.len(), n_levels)].push(i);
    }

    let mut out = GmadOutcome::default();
    for (level, mut members) in bins.into_iter().enumerate() {
        if members.len() < 2 {
            out.skipped.push(SkippedLevel {
                level,
                candidates: members.len(),
                reason: "fewer than 2 images in level".into(),
            });
            continue;
        }
        members.sort_by(|&a, &b| def[a].total_cmp(&def[b]).then(a.cmp(&b)));
        let mut best: Option<(f64, usize, usize)> = None;
        for (pos, &i) in members.iter().enumerate() {
            for &j in &members[pos + 1..] {
                if def[j] - def[i] > tolerance {
                    break;
                }
                let gap = (att[i] - att[j]).abs();
                let (a, b) = if ids[i] < ids[j] { (i, j) } else { (j, i) };
                let better = match best {
                    None => true,
                    Some((g, ba, bb)) => {
                        gap > g || (gap == g && (ids[a], ids[b]) < (ids[ba], ids[bb]))
                    }
                };
                if better {
                    best = Some((gap, a, b));
                }
            }
        }
        match best {
            Some((gap, a, b)) => out.pairs.push(GmadPair {
                defender_level: level,
                image_a: ids[a].clone(),
                image_b: ids[b].clone(),
                defender_gap: (def[a] - def[b]).abs(),
                attacker_gap: gap,
            }),
            None => out.skipped.push(SkippedLevel {
                level,
                candidates: members.len(),
                reason: "no pair within defender tolerance".into(),
            }),
        }
    }
    Ok(out)
}

pub fn gmad_csv(pairs: &[GmadPair], role: &str) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!(
            "{role},{},{},{},{},{}\n",
            p.defender_level, p.image_a, p.image_b, p.defender_gap, p.attacker_gap
        ));
    }
    out
}
