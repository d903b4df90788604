//! Between-class-variance threshold analysis of sorted probability rows.

use serde::Serialize;

use crate::distribution::{token_stats_with, ProbGrid};
use crate::error::{Error, Result};

/// How class weights ω₀, ω₁ are measured at a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OtsuWeighting {
    /// Fraction of entries in each class (classic Otsu).
    #[default]
    Count,
    /// Fraction of probability mass in each class.
    Mass,
}

impl std::str::FromStr for OtsuWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(OtsuWeighting::Count),
            "mass" => Ok(OtsuWeighting::Mass),
            other => Err(Error::InvalidArgument(format!("unknown Otsu weighting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OtsuReport {
    /// Smallest head probability p₍ᵣ₎.
    pub threshold_prob: f64,
    /// Number of entries in the head class.
    pub threshold_rank: usize,
    /// Sum of the head probabilities.
    pub head_mass: f64,
    pub between_class_variance: f64,
}

/// Between-class variance of splitting `sorted` (descending) into the first
/// `r` and the remaining entries, given the head sum and the total.
#[inline]
fn split_variance(r: usize, k: usize, head: f64, tail: f64, total: f64, weighting: OtsuWeighting) -> f64 {
    let (w0, w1) = match weighting {
        OtsuWeighting::Count => (r as f64 / k as f64, (k - r) as f64 / k as f64),
        OtsuWeighting::Mass => (head / total, tail / total),
    };
    let mu0 = head / r as f64;
    let mu1 = tail / (k - r) as f64;
    let d = mu0 - mu1;
    w0 * w1 * d * d
}

pub(crate) fn sorted_descending(probs: &[f64]) -> Vec<f64> {
    let mut sorted = probs.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    sorted
}

/// Otsu split of an already descending-sorted row.
pub fn otsu_sorted(sorted: &[f64], weighting: OtsuWeighting) -> Result<OtsuReport> {
    let k = sorted.len();
    if k < 2 {
        return Err(Error::ShapeMismatch(format!("Otsu threshold needs K >= 2, got {k}")));
    }
    if sorted[0] == sorted[k - 1] {
        // every split has zero variance
        return Ok(OtsuReport {
            threshold_prob: sorted[0],
            threshold_rank: 1,
            head_mass: sorted[0],
            between_class_variance: 0.0,
        });
    }

    // suffix[r] = sum of sorted[r..], accumulated from the tail
    let mut suffix = vec![0.0; k + 1];
    for r in (0..k).rev() {
        suffix[r] = suffix[r + 1] + sorted[r];
    }
    let mut total = 0.0;
    for &p in sorted {
        total += p;
    }

    let mut head = 0.0;
    let mut best = (1usize, f64::NEG_INFINITY, 0.0);
    for r in 1..k {
        head += sorted[r - 1];
        let var = split_variance(r, k, head, suffix[r], total, weighting);
        if var > best.1 {
            best = (r, var, head);
        }
    }
    let (rank, var, head_mass) = best;
    Ok(OtsuReport { threshold_prob: sorted[rank - 1], threshold_rank: rank, head_mass, between_class_variance: var })
}

/// Variance-maximizing head/tail split of one probability row.
pub fn otsu_threshold(probs: &[f64], weighting: OtsuWeighting) -> Result<OtsuReport> {
    otsu_sorted(&sorted_descending(probs), weighting)
}

/// Corpus means laid out like a probability/Otsu statistics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridReport {
    pub tokens: usize,
    pub weighting: OtsuWeighting,
    pub probability_statistics: ProbabilityBlock,
    pub otsu_statistics: OtsuBlock,
    #[serde(skip)]
    pub per_token: Vec<OtsuReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbabilityBlock {
    pub top1_probability: f64,
    pub top2_probability: f64,
    pub normalized_entropy: f64,
    pub tail_entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OtsuBlock {
    pub threshold_prob: f64,
    pub threshold_rank: f64,
    pub head_mass: f64,
}

impl GridReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-token Otsu reports and probability statistics, averaged over all
/// rows of all grids.
pub fn otsu_report_corpus(grids: &[ProbGrid], weighting: OtsuWeighting) -> Result<GridReport> {
    use rayon::prelude::*;

    let rows: Vec<&[f64]> = grids.iter().flat_map(|g| g.rows()).collect();
    if rows.is_empty() {
        return Err(Error::Empty("no token rows to analyze"));
    }
    let per_row: Vec<_> = rows
        .par_iter()
        .map_init(Vec::new, |scratch, row| {
            let stats = token_stats_with(row, scratch)?;
            let report = otsu_threshold(row, weighting)?;
            Ok::<_, Error>((stats, report))
        })
        .collect::<Result<_>>()?;

    let n = per_row.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| (0..per_row.len()).map(f).sum::<f64>() / n;
    let probability_statistics = ProbabilityBlock {
        top1_probability: mean(&|i| per_row[i].0.top1),
        top2_probability: mean(&|i| per_row[i].0.top2),
        normalized_entropy: mean(&|i| per_row[i].0.norm_entropy),
        tail_entropy: mean(&|i| per_row[i].0.tail_entropy),
    };
    let otsu_statistics = OtsuBlock {
        threshold_prob: mean(&|i| per_row[i].1.threshold_prob),
        threshold_rank: mean(&|i| per_row[i].1.threshold_rank as f64),
        head_mass: mean(&|i| per_row[i].1.head_mass),
    };
    Ok(GridReport {
        tokens: per_row.len(),
        weighting,
        probability_statistics,
        otsu_statistics,
        per_token: per_row.into_iter().map(|(_, r)| r).collect(),
    })
}

pub fn otsu_report_grid(grid: &ProbGrid, weighting: OtsuWeighting) -> Result<GridReport> {
    otsu_report_corpus(std::slice::from_ref(grid), weighting)
}

/// Rank-wise mean of descending-sorted rows, truncated to `top_n` ranks.
pub fn rank_profile(grids: &[ProbGrid], top_n: usize) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; top_n];
    let mut count = 0usize;
    for grid in grids {
        if top_n > grid.vocab() {
            return Err(Error::InvalidArgument(format!("top_n {top_n} exceeds vocabulary {}", grid.vocab())));
        }
        for row in grid.rows() {
            let sorted = sorted_descending(row);
            for (s, &p) in sums.iter_mut().zip(&sorted) {
                *s += p;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("no token rows for rank profile"));
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// `rank,mean_prob` CSV with 1-based ranks.
pub fn rank_profile_csv(profile: &[f64]) -> String {
    let mut out = String::from("rank,mean_prob\n");
    for (i, p) in profile.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, p));
    }
    out
}
