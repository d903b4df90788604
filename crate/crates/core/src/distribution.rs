//! Softmax algebra and per-token / corpus-level distribution statistics.
//!
//! Conventions used throughout: `0 · ln 0 = 0`, argmax ties resolve to the
//! lowest index, and percentiles use the nearest-rank rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Tolerance on row sums for [`ProbGrid`].
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Clamp bounds for the adaptive top-mass support size.
pub const SUPPORT_MIN: usize = 8;
pub const SUPPORT_MAX: usize = 64;

/// N×K unnormalized scores, one row per token position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrid(Matrix);

impl LogitGrid {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::Empty("logit grid has no rows"));
        }
        if values.cols() < 2 {
            return Err(Error::ShapeMismatch(format!("logit grid needs K >= 2, got {}", values.cols())));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("logit grid".into()));
        }
        Ok(LogitGrid(values))
    }

    pub fn tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn vocab(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.0.row_iter()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// N×K matrix whose rows lie on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid(Matrix);

impl ProbGrid {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::Empty("probability grid has no rows"));
        }
        if values.cols() < 2 {
            return Err(Error::ShapeMismatch(format!("probability grid needs K >= 2, got {}", values.cols())));
        }
        for (i, row) in values.row_iter().enumerate() {
            check_simplex(row).map_err(|e| match e {
                Error::InvalidArgument(msg) => Error::InvalidArgument(format!("row {i}: {msg}")),
                other => other,
            })?;
        }
        Ok(ProbGrid(values))
    }

    /// Wraps rows already known to be on the simplex.
    pub(crate) fn from_trusted(values: Matrix) -> Self {
        debug_assert!(values.row_iter().all(|r| check_simplex(r).is_ok()));
        ProbGrid(values)
    }

    pub fn tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn vocab(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.0.row_iter()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

fn check_simplex(row: &[f64]) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidArgument(format!("row sums to {sum}")));
    }
    Ok(())
}

/// Per-token summary of one probability row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TokenStats {
    /// Largest probability (confidence).
    pub top1: f64,
    /// Second-largest probability.
    pub top2: f64,
    /// `top1 - top2`.
    pub margin: f64,
    /// Mass of the `support` most probable entries.
    pub topk_mass: f64,
    /// Entropy of all entries except the argmax, normalized by `ln(K-1)`.
    /// Not renormalized by the tail mass, so flat rows can exceed 1.
    pub tail_entropy: f64,
    /// Shannon entropy over `ln K`.
    pub norm_entropy: f64,
    /// Adaptive support size used for `topk_mass`.
    pub support: usize,
}

impl TokenStats {
    /// The four-column uncertainty feature row.
    pub fn features(&self) -> [f64; 4] {
        [self.top1, self.margin, self.topk_mass, self.tail_entropy]
    }
}

/// Corpus-level target statistics matched by calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetStats {
    pub mean_entropy: f64,
    pub mean_conf: f64,
    pub p95_conf: f64,
    pub p95_entropy: f64,
}

impl TargetStats {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mean_entropy", self.mean_entropy),
            ("mean_conf", self.mean_conf),
            ("p95_conf", self.p95_conf),
            ("p95_entropy", self.p95_entropy),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Writes `softmax(logits / temperature)` into `out` using max subtraction.
pub fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) -> Result<()> {
    check_temperature(temperature)?;
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN logit".into()));
    }
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = ((l - max) / temperature).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax of an empty row"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, temperature, &mut out)?;
    Ok(out)
}

/// Row-wise softmax of a logit grid.
pub fn softmax_grid(logits: &LogitGrid, temperature: f64) -> Result<ProbGrid> {
    let mut out = Matrix::zeros(logits.tokens(), logits.vocab());
    for i in 0..logits.tokens() {
        softmax_into(logits.row(i), temperature, out.row_mut(i))?;
    }
    Ok(ProbGrid::from_trusted(out))
}

fn check_smoothing(epsilon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("smoothing {epsilon} outside [0, 1]")));
    }
    Ok(())
}

/// In-place `p ← (1 − ε) p + ε / K`.
pub fn label_smooth_inplace(probs: &mut [f64], epsilon: f64) -> Result<()> {
    check_smoothing(epsilon)?;
    if epsilon == 0.0 {
        return Ok(());
    }
    let floor = epsilon / probs.len() as f64;
    let keep = 1.0 - epsilon;
    for p in probs.iter_mut() {
        *p = keep * *p + floor;
    }
    Ok(())
}

pub fn label_smooth(probs: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let mut out = probs.to_vec();
    label_smooth_inplace(&mut out, epsilon)?;
    Ok(out)
}

#[inline]
fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().map(|&p| plogp(p)).sum::<f64>()
}

/// Entropy divided by `ln K`, in `[0, 1]`.
pub fn normalized_entropy(probs: &[f64]) -> f64 {
    let k = probs.len();
    if k < 2 {
        return 0.0;
    }
    (entropy(probs) / (k as f64).ln()).clamp(0.0, 1.0)
}

/// Effective support size: rounded perplexity clamped to `[8, min(64, K)]`.
pub fn adaptive_support_size(probs: &[f64]) -> usize {
    let perplexity = entropy(probs).exp();
    let rounded = perplexity.round().max(1.0) as usize;
    rounded.clamp(SUPPORT_MIN, SUPPORT_MAX).min(probs.len())
}

fn top_mass(probs: &[f64], count: usize, scratch: &mut Vec<f64>) -> f64 {
    if count >= probs.len() {
        return probs.iter().sum::<f64>().min(1.0);
    }
    scratch.clear();
    scratch.extend_from_slice(probs);
    scratch.select_nth_unstable_by(count - 1, |a, b| b.total_cmp(a));
    let head = &mut scratch[..count];
    head.sort_unstable_by(|a, b| b.total_cmp(a));
    head.iter().sum::<f64>().min(1.0)
}

/// Confidence, margin, adaptive top-mass and tail-entropy statistics of one row.
pub fn token_stats(probs: &[f64]) -> Result<TokenStats> {
    let mut scratch = Vec::new();
    token_stats_with(probs, &mut scratch)
}

pub(crate) fn token_stats_with(probs: &[f64], scratch: &mut Vec<f64>) -> Result<TokenStats> {
    let k = probs.len();
    if k < 2 {
        return Err(Error::ShapeMismatch(format!("token statistics need K >= 2, got {k}")));
    }
    let star = argmax(probs);
    let top1 = probs[star];
    let top2 = probs.iter().enumerate().filter(|&(i, _)| i != star).map(|(_, &p)| p).fold(f64::NEG_INFINITY, f64::max);

    let mut total = 0.0;
    let mut tail = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        let t = plogp(p);
        total += t;
        if i != star {
            tail += t;
        }
    }
    let norm_entropy = (-total / (k as f64).ln()).clamp(0.0, 1.0);
    // ln(K-1) vanishes at K = 2; the single tail entry is left unnormalized.
    let tail_denominator = if k > 2 { ((k - 1) as f64).ln() } else { 1.0 };
    let tail_entropy = (-tail / tail_denominator).max(0.0);

    let support = (-total).exp().round().max(1.0).clamp(SUPPORT_MIN as f64, SUPPORT_MAX as f64) as usize;
    let support = support.min(k);
    let topk_mass = top_mass(probs, support, scratch).max(top1);

    Ok(TokenStats { top1, top2, margin: (top1 - top2).max(0.0), topk_mass, tail_entropy, norm_entropy, support })
}

/// Index of the nearest-rank percentile in an ascending sort of `n` values:
/// rank `ceil(q · n)` (1-based), clamped to `[1, n]`.
pub fn nearest_rank_index(n: usize, q: f64) -> usize {
    assert!(n > 0, "percentile of an empty sample");
    let rank = (q * n as f64).ceil() as usize;
    rank.clamp(1, n) - 1
}

/// Nearest-rank percentile; sorts `values` in place.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values[nearest_rank_index(values.len(), q)]
}

/// Aggregates per-token confidence and normalized entropy into target
/// statistics.
pub(crate) fn aggregate_stats(entropies: &mut [f64], confidences: &mut [f64]) -> TargetStats {
    let n = entropies.len() as f64;
    let mean_entropy = entropies.iter().sum::<f64>() / n;
    let mean_conf = confidences.iter().sum::<f64>() / n;
    TargetStats {
        mean_entropy,
        mean_conf,
        p95_conf: percentile(confidences, 0.95),
        p95_entropy: percentile(entropies, 0.95),
    }
}

/// Mean and 95th-percentile entropy and confidence over every row of every grid.
pub fn corpus_stats(grids: &[ProbGrid]) -> Result<TargetStats> {
    let n: usize = grids.iter().map(ProbGrid::tokens).sum();
    if n == 0 {
        return Err(Error::Empty("corpus has no tokens"));
    }
    let mut entropies = Vec::with_capacity(n);
    let mut confidences = Vec::with_capacity(n);
    for grid in grids {
        for row in grid.rows() {
            entropies.push(normalized_entropy(row));
            confidences.push(row[argmax(row)]);
        }
    }
    Ok(aggregate_stats(&mut entropies, &mut confidences))
}
