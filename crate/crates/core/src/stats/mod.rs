//! Paired method comparison: Wilcoxon signed-rank test, z-score summaries and opinion-score
//! aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample for which the exact null distribution is enumerated.
pub const EXACT_MAX_N: usize = 12;

/// Per-image differences `a − b` over identically ordered image ids.
pub fn metric_diff(a: &[(String, f64)], b: &[(String, f64)]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::input(format!("score lists differ in length: {} vs {}", a.len(), b.len())));
    }
    a.iter()
        .zip(b)
        .map(|((ia, va), (ib, vb))| {
            if ia != ib {
                Err(Error::input(format!("image ids misaligned: '{ia}' vs '{ib}'")))
            } else {
                Ok(va - vb)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedRankResult {
    /// Non-zero differences ranked.
    pub n: usize,
    #[serde(rename = "W")]
    pub w: f64,
    pub sigma_w: f64,
    pub z: f64,
    /// Two-sided p from the normal approximation.
    pub p_normal: f64,
    /// Two-sided p from the exact null distribution (`n ≤ EXACT_MAX_N`).
    pub p_exact: Option<f64>,
    /// One-sided exact `P(W' ≥ W)`.
    pub p_exact_greater: Option<f64>,
    pub deltas: Vec<f64>,
}

/// Ranks of `values` from 1, with ties sharing the average of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Exact `(two-sided, P(W' ≥ w))` under the sign-flip null for the given ranks.
pub fn exact_p(ranks: &[f64], w: f64) -> (f64, f64) {
    let n = ranks.len();
    let total = 1u64 << n;
    let tol = 1e-9;
    let (mut two, mut greater) = (0u64, 0u64);
    for mask in 0..total {
        let s: f64 = ranks
            .iter()
            .enumerate()
            .map(|(i, r)| if mask >> i & 1 == 1 { *r } else { -r })
            .sum();
        if s.abs() >= w.abs() - tol {
            two += 1;
        }
        if s >= w - tol {
            greater += 1;
        }
    }
    (two as f64 / total as f64, greater as f64 / total as f64)
}

pub fn wilcoxon_signed_rank(deltas: &[f64]) -> Result<SignedRankResult> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::input("differences must be finite"));
    }
    let nz: Vec<f64> = deltas.iter().copied().filter(|&d| d != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::Degenerate("all differences are zero".into()));
    }
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w: f64 = nz.iter().zip(&ranks).map(|(d, r)| d.signum() * r).sum();
    let nf = n as f64;
    let sigma_w = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 6.0).sqrt();
    let z = w / sigma_w;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p_normal = (2.0 * normal.sf(z.abs())).min(1.0);
    let (p_exact, p_exact_greater) = if n <= EXACT_MAX_N {
        let (a, b) = exact_p(&ranks, w);
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    Ok(SignedRankResult {
        n,
        w,
        sigma_w,
        z,
        p_normal,
        p_exact,
        p_exact_greater,
        deltas: deltas.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScoreSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub iqr: f64,
}

/// `(x − mean) / s` with `s` the sample standard deviation.
pub fn zscores(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::Degenerate("z-scores need at least two values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return Err(Error::Degenerate("values have zero variance".into()));
    }
    Ok(values.iter().map(|v| (v - mean) / sd).collect())
}

/// Quantile with linear interpolation between order statistics at position `(n − 1)·p`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Box-plot summary of the z-normalised values.
pub fn zscore_summary(values: &[f64]) -> Result<ZScoreSummary> {
    if values.len() < 4 {
        return Err(Error::input("quartiles need at least four values"));
    }
    let z = zscores(values)?;
    let mut s = z.clone();
    s.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let (q1, q3) = (quantile(&s, 0.25), quantile(&s, 0.75));
    Ok(ZScoreSummary {
        n: z.len(),
        mean,
        std,
        min: s[0],
        q1,
        median: quantile(&s, 0.5),
        q3,
        max: s[s.len() - 1],
        iqr: q3 - q1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator); 0 for a single score.
    pub std: f64,
    pub max: f64,
    pub min: f64,
}

pub fn mos_stats(scores: &[f64]) -> Result<MosStats> {
    if scores.is_empty() {
        return Err(Error::input("empty score group"));
    }
    if let Some(s) = scores.iter().find(|s| !(1.0..=5.0).contains(*s)) {
        return Err(Error::input(format!("opinion score {s} outside [1, 5]")));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = if scores.len() > 1 {
        (scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(MosStats {
        n: scores.len(),
        mean,
        std,
        max: scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        min: scores.iter().cloned().fold(f64::INFINITY, f64::min),
    })
}

/// Aggregates by `(method, question)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MosTable {
    pub groups: BTreeMap<(String, String), MosStats>,
}

/// `records` are `(method, question, score)`.
pub fn mos_aggregate(records: &[(String, String, f64)]) -> Result<MosTable> {
    let mut grouped: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for (m, q, s) in records {
        grouped.entry((m.clone(), q.clone())).or_default().push(*s);
    }
    if grouped.is_empty() {
        return Err(Error::input("no opinion scores"));
    }
    let mut table = MosTable::default();
    for (k, v) in grouped {
        table.groups.insert(k, mos_stats(&v)?);
    }
    Ok(table)
}

#[cfg(test)]
mod tests;
