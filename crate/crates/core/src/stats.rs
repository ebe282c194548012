//! Hypervolume of 3-objective fronts and the nonparametric tests used to
//! compare search strategies.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::objectives::ObjectiveVector;

pub const DEFAULT_HV_REF: [f64; 3] = [1.0, 1.0, 1.0];

/// Largest number of nonzero differences handled by the exact signed-rank distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;
/// Largest `m * n` handled by the exact rank-sum distribution.
pub const MANN_WHITNEY_EXACT_MAX: usize = 400;

/// Area dominated by 2-D points (minimization) up to `(rx, ry)`.
fn hypervolume_2d(points: &mut [[f64; 2]], rx: f64, ry: f64) -> f64 {
    points.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut area = 0.0;
    let mut best_y = ry;
    for p in points.iter() {
        if p[1] >= best_y {
            continue;
        }
        area += (rx - p[0]) * (best_y - p[1]);
        best_y = p[1];
    }
    area
}

/// Exact hypervolume dominated by `points` and bounded by `reference`.
/// Points that do not strictly dominate the reference contribute nothing.
pub fn hypervolume(points: &[ObjectiveVector], reference: [f64; 3]) -> f64 {
    let mut pts: Vec<[f64; 3]> = points
        .iter()
        .map(|p| p.as_array())
        .filter(|p| p.iter().zip(&reference).all(|(v, r)| v.is_finite() && v < r))
        .collect();
    if pts.is_empty() {
        return 0.0;
    }
    pts.sort_by(|a, b| a[2].total_cmp(&b[2]));
    let mut volume = 0.0;
    let mut slice: Vec<[f64; 2]> = Vec::with_capacity(pts.len());
    for (i, p) in pts.iter().enumerate() {
        slice.push([p[0], p[1]]);
        let next_z = pts.get(i + 1).map_or(reference[2], |q| q[2]);
        let depth = next_z - p[2];
        if depth > 0.0 {
            volume += hypervolume_2d(&mut slice, reference[0], reference[1]) * depth;
        }
    }
    volume
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectLabel {
    Negligible,
    Small,
    Medium,
    Large,
}

impl EffectLabel {
    /// Standard magnitude bands on `max(A12, 1 - A12)`: 0.56, 0.64 and 0.71.
    pub fn from_a12(a12: f64) -> Self {
        let a = a12.max(1.0 - a12);
        if a < 0.56 {
            EffectLabel::Negligible
        } else if a < 0.64 {
            EffectLabel::Small
        } else if a < 0.71 {
            EffectLabel::Medium
        } else {
            EffectLabel::Large
        }
    }

    /// A rank-biserial `r` corresponds to `A12 = (r + 1) / 2`.
    pub fn from_rank_biserial(r: f64) -> Self {
        Self::from_a12((r + 1.0) / 2.0)
    }

    pub fn name(self) -> &'static str {
        match self {
            EffectLabel::Negligible => "negligible",
            EffectLabel::Small => "small",
            EffectLabel::Medium => "medium",
            EffectLabel::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    Exact,
    Normal,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Rank-biserial `r` for paired tests, `A12` for unpaired ones.
    pub effect: f64,
    pub effect_label: EffectLabel,
    pub method: PValueMethod,
    pub n: usize,
}

/// Average ranks (1-based) of `values`, plus the sizes of the tie groups.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn two_sided_normal(stat: f64, mean: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((stat - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

fn tie_term(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t * t * t - t) as f64).sum()
}

/// `(wins - losses) / pairs` where a win is `a > b`.
pub fn rank_biserial(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySample);
    }
    let wins = pairs.iter().filter(|(a, b)| a > b).count() as f64;
    let losses = pairs.iter().filter(|(a, b)| a < b).count() as f64;
    Ok((wins - losses) / pairs.len() as f64)
}

/// Two-sided Wilcoxon signed-rank test on `a - b`. The statistic is
/// `min(W+, W-)`; the effect is the rank-biserial correlation of the pairs.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<TestResult> {
    let r = rank_biserial(pairs)?;
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    let effect_label = EffectLabel::from_rank_biserial(r);
    if n == 0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            effect: r,
            effect_label,
            method: PValueMethod::Degenerate,
            n,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let (p_value, method) = if n <= WILCOXON_EXACT_MAX {
        // doubled ranks are integers even with averaged ties
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        for &d in &doubled {
            for s in (d..=max).rev() {
                counts[s] += counts[s - d];
            }
        }
        let all: f64 = counts.iter().sum();
        let w2 = (w_plus * 2.0).round() as usize;
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
        ((2.0 * lower.min(upper)).min(1.0), PValueMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term(&ties) / 48.0;
        (two_sided_normal(w_plus, mean, var), PValueMethod::Normal)
    };
    Ok(TestResult {
        statistic,
        p_value,
        effect: r,
        effect_label,
        method,
        n,
    })
}

/// `#{a > b} + 0.5 #{a = b}` over all cross pairs.
fn dominance_score(a: &[f64], b: &[f64]) -> f64 {
    let mut score = 0.0;
    for x in a {
        for y in b {
            if x > y {
                score += 1.0;
            } else if x == y {
                score += 0.5;
            }
        }
    }
    score
}

/// `P(a > b) + 0.5 P(a = b)` over all cross pairs, with its magnitude label.
pub fn vargha_delaney(a: &[f64], b: &[f64]) -> Result<(f64, EffectLabel)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let a12 = dominance_score(a, b) / (a.len() * b.len()) as f64;
    Ok((a12, EffectLabel::from_a12(a12)))
}

/// Number of arrangements of `m` and `n` observations giving each value of
/// `U` (count of pairs where the first sample is larger).
fn rank_sum_distribution(m: usize, n: usize) -> Vec<f64> {
    let max = m * n;
    let mut table = vec![vec![vec![0.0f64; max + 1]; n + 1]; m + 1];
    for row in table.iter_mut() {
        row[0][0] = 1.0;
    }
    for cell in table[0].iter_mut() {
        cell[0] = 1.0;
    }
    for i in 1..=m {
        for j in 1..=n {
            for u in 0..=i * j {
                // the largest observation belongs to the first sample and beats all j
                let from_a = if u >= j { table[i - 1][j][u - j] } else { 0.0 };
                let from_b = table[i][j - 1][u];
                table[i][j][u] = from_a + from_b;
            }
        }
    }
    std::mem::take(&mut table[m][n])
}

/// Two-sided Mann-Whitney U test. The statistic is `min(U_a, U_b)`; the
/// effect is `A12(a, b)`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult> {
    let (a12, effect_label) = vargha_delaney(a, b)?;
    let (m, n) = (a.len(), b.len());
    let pairs = (m * n) as f64;
    let u_a = dominance_score(a, b);
    let statistic = u_a.min(pairs - u_a);

    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (_, ties) = average_ranks(&pooled);

    let (p_value, method) = if m * n <= MANN_WHITNEY_EXACT_MAX && ties.is_empty() {
        let dist = rank_sum_distribution(m, n);
        let all: f64 = dist.iter().sum();
        let u = u_a.round() as usize;
        let lower: f64 = dist[..=u].iter().sum::<f64>() / all;
        let upper: f64 = dist[u..].iter().sum::<f64>() / all;
        ((2.0 * lower.min(upper)).min(1.0), PValueMethod::Exact)
    } else {
        let total = (m + n) as f64;
        let mean = pairs / 2.0;
        let var = pairs / 12.0 * ((total + 1.0) - tie_term(&ties) / (total * (total - 1.0)));
        let method = if var <= 0.0 {
            PValueMethod::Degenerate
        } else {
            PValueMethod::Normal
        };
        (two_sided_normal(u_a, mean, var), method)
    };
    Ok(TestResult {
        statistic,
        p_value,
        effect: a12,
        effect_label,
        method,
        n: m + n,
    })
}
