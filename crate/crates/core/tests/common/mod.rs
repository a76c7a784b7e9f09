//! Brute-force reference implementations. Each one avoids the code path
//! of the library function it checks.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-300 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Largest entrywise difference over the largest entry.
pub fn rel_err_vec(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-300 {
        return 0.0;
    }
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn density(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Upper tail by the Laplace continued fraction, for `x >= 3`.
fn upper_tail(x: f64) -> f64 {
    let mut t = x;
    for k in (1..=600).rev() {
        t = x + k as f64 / t;
    }
    density(x) / t
}

/// Normal CDF: Taylor series in the middle, continued fraction in the
/// tails.
pub fn phi(z: f64) -> f64 {
    if z <= -3.0 {
        return upper_tail(-z);
    }
    if z >= 3.0 {
        return 1.0 - upper_tail(z);
    }
    // 0.5 + density(z) * sum z^(2n+1) / (2n+1)!!
    let mut term = z;
    let mut sum = z;
    let mut n = 0;
    while term.abs() > 1e-18 * sum.abs().max(1e-300) {
        n += 1;
        term *= z * z / (2 * n + 1) as f64;
        sum += term;
    }
    0.5 + density(z) * sum
}

/// Population or unbiased variance via the raw-moment formula.
pub fn moments(xs: &[f64], unbiased: bool) -> (f64, f64) {
    let n = xs.len() as f64;
    let s: f64 = xs.iter().sum();
    let s2: f64 = xs.iter().map(|x| x * x).sum();
    let mean = s / n;
    let ss = (s2 - s * s / n).max(0.0);
    (mean, if unbiased { ss / (n - 1.0) } else { ss / n })
}

pub fn mean_anchored(k: usize, a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let (_, va) = moments(a, false);
    let (mb, vb) = moments(b, false);
    phi((a[k] - mb) / (va + vb + gamma).sqrt())
}

pub fn prob_average(k: usize, a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let (_, va) = moments(a, false);
    let (_, vb) = moments(b, false);
    let s = (va + vb + gamma).sqrt();
    let mut total = 0.0;
    for &q in b {
        total += phi((a[k] - q) / s);
    }
    total / b.len() as f64
}

pub fn case_v(k: usize, a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for &q in b {
        total += phi((a[k] - q) / 2f64.sqrt());
    }
    total / b.len() as f64
}

/// Bhattacharyya coefficient between the two-outcome distributions.
pub fn fidelity(p: f64, q: f64) -> f64 {
    let dp = [p, 1.0 - p];
    let dq = [q, 1.0 - q];
    dp.iter().zip(&dq).map(|(x, y)| x.sqrt() * y.sqrt()).sum()
}

/// `sum_{n>=2} d^n / n!` with `d = ref - new`, clamped like the library.
pub fn kl(new: f64, reference: f64) -> f64 {
    let d = (reference - new).clamp(1e-6f64.ln(), 1e6f64.ln());
    let mut term = 1.0;
    let mut sum = 0.0;
    for n in 1..400 {
        term *= d / n as f64;
        if n >= 2 {
            sum += term;
        }
    }
    sum
}

pub fn clipped(ratio: f64, a: f64, eps: f64) -> f64 {
    if a >= 0.0 {
        a * ratio.min(1.0 + eps)
    } else {
        a * ratio.max(1.0 - eps)
    }
}

/// Welford running mean and population variance.
pub fn advantages(r: &[f64]) -> Vec<f64> {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in r.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let std = (m2 / r.len() as f64).sqrt();
    if std < 1e-12 {
        return vec![0.0; r.len()];
    }
    r.iter().map(|x| (x - mean) / std).collect()
}

/// Rank by counting smaller and equal entries.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Covariance over product of standard deviations, sums taken in
/// compensated form.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = kahan(x.iter().copied()) / n;
    let my = kahan(y.iter().copied()) / n;
    let cov = kahan(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my))) / n;
    let vx = kahan(x.iter().map(|a| (a - mx) * (a - mx))) / n;
    let vy = kahan(y.iter().map(|b| (b - my) * (b - my))) / n;
    cov / (vx * vy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

fn kahan(it: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in it {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

pub fn random_group<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(1.0..5.0)).collect()
}

/// Exhaustive gMAD: every pair in each level, no sorting or early exit.
pub fn gmad_exhaustive(
    ids: &[String],
    def: &[f64],
    att: &[f64],
    n_levels: usize,
    tol: f64,
) -> Vec<(usize, String, String, f64)> {
    let n = def.len();
    let r = ranks(def);
    let level = |i: usize| {
        // Equal-count bins, assigned from whichever end is nearer.
        let u = (r[i] - 0.5) / n as f64;
        let l = n_levels as f64;
        let b = if u <= 0.5 {
            (l * u).floor()
        } else {
            l - 1.0 - (l * (1.0 - u)).floor()
        };
        (b.max(0.0) as usize).min(n_levels - 1)
    };
    let mut out = Vec::new();
    for lv in 0..n_levels {
        let mut best: Option<(f64, String, String)> = None;
        for i in 0..n {
            for j in 0..n {
                if i == j || level(i) != lv || level(j) != lv {
                    continue;
                }
                if (def[i] - def[j]).abs() > tol || ids[i] > ids[j] {
                    continue;
                }
                let gap = (att[i] - att[j]).abs();
                let cand = (gap, ids[i].clone(), ids[j].clone());
                best = match best {
                    None => Some(cand),
                    Some(b) => {
                        if cand.0 > b.0 || (cand.0 == b.0 && (&cand.1, &cand.2) < (&b.1, &b.2)) {
                            Some(cand)
                        } else {
                            Some(b)
                        }
                    }
                };
            }
        }
        if let Some((gap, a, b)) = best {
            out.push((lv, a, b, gap));
        }
    }
    out
}
