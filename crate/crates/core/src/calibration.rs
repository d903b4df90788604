//! Statistic-matching logit calibration.
//!
//! Logits are transformed per row as `s̃ = a·s + b`, `p = softmax(s̃ / α)`,
//! `p̂ = (1 − ε)·p + ε/K`. The parameters `(a, b, α, ε)` are fitted by a
//! staged gradient-free search that matches four corpus statistics of `p̂`
//! (mean and 95th-percentile normalized entropy and confidence) to a target.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distribution::{aggregate_stats, argmax, LogitGrid, ProbGrid, TargetStats};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor_io::StatsConfig;

/// Below this gain a sweep candidate does not displace the incumbent.
const IMPROVEMENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    /// Logit scale `a`.
    pub scale: f64,
    /// Logit bias `b`.
    pub bias: f64,
    /// Softmax temperature `α`.
    pub temperature: f64,
    /// Label-smoothing weight `ε`.
    pub smoothing: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl CalibrationParams {
    pub const IDENTITY: CalibrationParams =
        CalibrationParams { scale: 1.0, bias: 0.0, temperature: 1.0, smoothing: 0.0 };

    pub fn new(scale: f64, bias: f64, temperature: f64, smoothing: f64) -> Result<Self> {
        let p = CalibrationParams { scale, bias, temperature, smoothing };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {}", self.scale)));
        }
        if !self.bias.is_finite() {
            return Err(Error::InvalidArgument("bias must be finite".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return Err(Error::InvalidArgument(format!("smoothing {} outside [0, 1]", self.smoothing)));
        }
        Ok(())
    }

    /// Calibrated probabilities of one logit row, written into `out`.
    pub fn apply_row(&self, logits: &[f64], out: &mut [f64]) {
        debug_assert_eq!(logits.len(), out.len());
        let k = logits.len() as f64;
        let inv_t = 1.0 / self.temperature;
        let mut max = f64::NEG_INFINITY;
        for (o, &s) in out.iter_mut().zip(logits) {
            let z = (self.scale * s + self.bias) * inv_t;
            *o = z;
            max = max.max(z);
        }
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        let keep = (1.0 - self.smoothing) / sum;
        let floor = self.smoothing / k;
        for o in out.iter_mut() {
            *o = *o * keep + floor;
        }
    }
}

/// Non-negative weights of the four statistic-matching terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct ObjectiveWeights {
    pub mean_entropy: f64,
    pub mean_conf: f64,
    pub p95_conf: f64,
    pub p95_entropy: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights { mean_entropy: 1.0, mean_conf: 0.25, p95_conf: 0.25, p95_entropy: 0.35 }
    }
}

impl From<[f64; 4]> for ObjectiveWeights {
    fn from(w: [f64; 4]) -> Self {
        ObjectiveWeights { mean_entropy: w[0], mean_conf: w[1], p95_conf: w[2], p95_entropy: w[3] }
    }
}

impl From<ObjectiveWeights> for [f64; 4] {
    fn from(w: ObjectiveWeights) -> Self {
        w.as_array()
    }
}

impl ObjectiveWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.mean_entropy, self.mean_conf, self.p95_conf, self.p95_entropy]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig(format!("objective weights must be non-negative, got {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidConfig("objective weights are all zero".into()));
        }
        Ok(())
    }

    /// Weighted squared mismatch between two statistic sets.
    pub fn loss(&self, got: &TargetStats, target: &TargetStats) -> f64 {
        let sq = |a: f64, b: f64| (a - b) * (a - b);
        self.mean_entropy * sq(got.mean_entropy, target.mean_entropy)
            + self.mean_conf * sq(got.mean_conf, target.mean_conf)
            + self.p95_conf * sq(got.p95_conf, target.p95_conf)
            + self.p95_entropy * sq(got.p95_entropy, target.p95_entropy)
    }
}

/// Applies the calibration transform to every row.
pub fn apply_calibration(logits: &LogitGrid, params: &CalibrationParams) -> Result<ProbGrid> {
    params.validate()?;
    let mut out = Matrix::zeros(logits.tokens(), logits.vocab());
    for i in 0..logits.tokens() {
        params.apply_row(logits.row(i), out.row_mut(i));
    }
    Ok(ProbGrid::from_trusted(out))
}

/// (normalized entropy, confidence) of one calibrated row, using `buf` as
/// scratch space.
fn calibrated_row_stats(params: &CalibrationParams, logits: &[f64], buf: &mut Vec<f64>) -> (f64, f64) {
    buf.resize(logits.len(), 0.0);
    params.apply_row(logits, buf);
    let mut h = 0.0;
    for &p in buf.iter() {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    let h = (h / (logits.len() as f64).ln()).clamp(0.0, 1.0);
    (h, buf[argmax(buf)])
}

/// Target statistics of the calibrated corpus, evaluated row-parallel.
///
/// Per-row results are collected in corpus order before reduction, so the
/// output does not depend on the thread count.
pub fn calibrated_stats(corpus: &[LogitGrid], params: &CalibrationParams) -> Result<TargetStats> {
    params.validate()?;
    let rows: Vec<&[f64]> = corpus.iter().flat_map(|g| g.rows()).collect();
    if rows.is_empty() {
        return Err(Error::Empty("calibration corpus has no tokens"));
    }
    let per_row: Vec<(f64, f64)> =
        rows.par_iter().map_init(Vec::new, |buf, row| calibrated_row_stats(params, row, buf)).collect();
    let (mut h, mut c): (Vec<f64>, Vec<f64>) = per_row.into_iter().unzip();
    Ok(aggregate_stats(&mut h, &mut c))
}

fn mean_entropy(corpus: &[LogitGrid], params: &CalibrationParams) -> Result<f64> {
    Ok(calibrated_stats(corpus, params)?.mean_entropy)
}

/// Weighted squared mismatch of the calibrated corpus statistics.
pub fn calibration_objective(
    params: &CalibrationParams,
    corpus: &[LogitGrid],
    target: &TargetStats,
    weights: &ObjectiveWeights,
) -> Result<f64> {
    let got = calibrated_stats(corpus, params)?;
    Ok(weights.loss(&got, target))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BisectionOutcome {
    pub scale: f64,
    pub mean_entropy: f64,
    pub iterations: usize,
    /// False when the target entropy lies outside the range reachable over
    /// the scale interval; `scale` is then the closest endpoint.
    pub bracketed: bool,
}

/// Bisects the logit scale until the calibrated mean entropy is within
/// `tol` of `target_entropy`, holding `(b, α, ε) = (0, 1, 0)`.
pub fn bisect_scale(
    corpus: &[LogitGrid],
    target_entropy: f64,
    range: [f64; 2],
    tol: f64,
    max_iters: usize,
) -> Result<BisectionOutcome> {
    let [mut lo, mut hi] = range;
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::InvalidArgument(format!("scale range [{lo}, {hi}] is inverted")));
    }
    if lo <= 0.0 {
        return Err(Error::InvalidArgument("scale range must be positive".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let at = |a: f64| mean_entropy(corpus, &CalibrationParams { scale: a, ..CalibrationParams::IDENTITY });
    let done = |a: f64, h: f64, iterations: usize, bracketed: bool| BisectionOutcome {
        scale: a,
        mean_entropy: h,
        iterations,
        bracketed,
    };

    let h_lo = at(lo)?;
    if (h_lo - target_entropy).abs() <= tol {
        return Ok(done(lo, h_lo, 0, true));
    }
    let h_hi = at(hi)?;
    if (h_hi - target_entropy).abs() <= tol {
        return Ok(done(hi, h_hi, 0, true));
    }
    // entropy decreases with scale; anything else cannot be bracketed
    let inside = h_lo >= h_hi && target_entropy <= h_lo && target_entropy >= h_hi;
    if !inside {
        return Ok(if (h_lo - target_entropy).abs() < (h_hi - target_entropy).abs() {
            done(lo, h_lo, 0, false)
        } else {
            done(hi, h_hi, 0, false)
        });
    }

    let mut best = if (h_lo - target_entropy).abs() <= (h_hi - target_entropy).abs() { (lo, h_lo) } else { (hi, h_hi) };
    for it in 1..=max_iters {
        let mid = 0.5 * (lo + hi);
        let h = at(mid)?;
        if (h - target_entropy).abs() < (best.1 - target_entropy).abs() {
            best = (mid, h);
        }
        if (h - target_entropy).abs() <= tol {
            return Ok(done(mid, h, it, true));
        }
        if h > target_entropy {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(done(best.0, best.1, max_iters, true))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTrace {
    pub stage: &'static str,
    pub loss: f64,
    pub params: CalibrationParams,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationResult {
    pub params: CalibrationParams,
    pub loss: f64,
    pub target: TargetStats,
    pub achieved: TargetStats,
    pub bisection: BisectionOutcome,
    pub stages: Vec<StageTrace>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 || lo == hi {
        return vec![lo];
    }
    (0..n).map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
}

struct Sweep<'a> {
    corpus: &'a [LogitGrid],
    target: &'a TargetStats,
    weights: &'a ObjectiveWeights,
    refine_rounds: usize,
    refine_points: usize,
}

impl Sweep<'_> {
    /// Grid sweep over one parameter followed by zoom refinement. The
    /// incumbent is kept unless a candidate beats it by more than
    /// [`IMPROVEMENT_EPS`]; among equal candidates the smaller value wins.
    fn run(
        &self,
        incumbent: (CalibrationParams, f64),
        range: [f64; 2],
        points: usize,
        coord: Coordinate,
    ) -> Result<(CalibrationParams, f64, usize)> {
        let (mut best, mut best_loss) = incumbent;
        let mut evaluations = 0;
        let mut grid = linspace(range[0], range[1], points);
        let mut step = if points > 1 { (range[1] - range[0]) / (points - 1) as f64 } else { 0.0 };
        for round in 0..=self.refine_rounds {
            let losses: Vec<Result<(CalibrationParams, f64)>> = grid
                .par_iter()
                .map(|&v| {
                    let cand = coord.with(best, v);
                    let loss = calibration_objective(&cand, self.corpus, self.target, self.weights)?;
                    Ok((cand, loss))
                })
                .collect();
            evaluations += grid.len();
            for r in losses {
                let (cand, loss) = r?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("objective at {cand:?}")));
                }
                if loss < best_loss - IMPROVEMENT_EPS {
                    best = cand;
                    best_loss = loss;
                }
            }
            if round == self.refine_rounds || step == 0.0 {
                break;
            }
            let centre = coord.get(&best).clamp(range[0], range[1]);
            let lo = (centre - step).max(range[0]);
            let hi = (centre + step).min(range[1]);
            grid = linspace(lo, hi, self.refine_points);
            step = (hi - lo) / (self.refine_points - 1) as f64;
        }
        Ok((best, best_loss, evaluations))
    }
}

#[derive(Debug, Clone, Copy)]
enum Coordinate {
    Temperature,
    Smoothing,
    Bias,
}

impl Coordinate {
    fn get(self, p: &CalibrationParams) -> f64 {
        match self {
            Coordinate::Temperature => p.temperature,
            Coordinate::Smoothing => p.smoothing,
            Coordinate::Bias => p.bias,
        }
    }

    fn with(self, mut p: CalibrationParams, v: f64) -> CalibrationParams {
        match self {
            Coordinate::Temperature => p.temperature = v,
            Coordinate::Smoothing => p.smoothing = v,
            Coordinate::Bias => p.bias = v,
        }
        p
    }
}

/// Staged gradient-free calibration search.
///
/// 1. bisect `a` to the target mean entropy with `(b, α, ε) = (0, 1, 0)`;
/// 2. sweep `α`; 3. sweep `ε`; 4. sweep `b`. Each stage keeps all earlier
///    choices fixed and never increases the objective.
pub fn calibrate_search(corpus: &[LogitGrid], target: &TargetStats, config: &StatsConfig) -> Result<CalibrationResult> {
    config.validate()?;
    target.validate()?;
    if corpus.iter().all(|g| g.tokens() == 0) {
        return Err(Error::Empty("calibration corpus has no tokens"));
    }
    let weights = &config.objective_weights;
    let ranges = &config.search_ranges;
    let settings = &config.search;

    let bisection = bisect_scale(
        corpus,
        target.mean_entropy,
        ranges.scale,
        config.entropy_tolerance,
        settings.max_bisection_iters,
    )?;
    let mut params = CalibrationParams { scale: bisection.scale, ..CalibrationParams::IDENTITY };
    let mut loss = calibration_objective(&params, corpus, target, weights)?;
    let mut stages = vec![StageTrace { stage: "scale", loss, params, evaluations: bisection.iterations + 2 }];

    let sweep =
        Sweep { corpus, target, weights, refine_rounds: settings.refine_rounds, refine_points: settings.refine_points };
    let plan = [
        ("temperature", ranges.temperature, settings.temperature_points, Coordinate::Temperature),
        ("smoothing", ranges.smoothing, settings.smoothing_points, Coordinate::Smoothing),
        ("bias", ranges.bias, settings.bias_points, Coordinate::Bias),
    ];
    for (stage, range, points, coord) in plan {
        let (p, l, evaluations) = sweep.run((params, loss), range, points, coord)?;
        params = p;
        loss = l;
        stages.push(StageTrace { stage, loss, params, evaluations });
    }

    Ok(CalibrationResult {
        params,
        loss,
        target: *target,
        achieved: calibrated_stats(corpus, &params)?,
        bisection,
        stages,
    })
}
