use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::params::{DecoderParams, UNCERTAINTY_CHANNELS};

/// Code vectors and uncertainty features already resampled onto the packed
/// latent token grid. This is the input of the code encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSource {
    rows: usize,
    cols: usize,
    codes: Matrix,
    uncertainty: Matrix,
}

impl ConditioningSource {
    /// `codes` and `uncertainty` are row-major over a `rows × cols` grid.
    pub fn new(rows: usize, cols: usize, codes: Matrix, uncertainty: Matrix) -> Result<Self> {
        let n = rows * cols;
        if n == 0 {
            return Err(Error::ShapeMismatch("empty conditioning grid".into()));
        }
        if codes.rows() != n || uncertainty.rows() != n {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} grid needs {n} rows, got codes {} and uncertainty {}",
                codes.rows(),
                uncertainty.rows()
            )));
        }
        if uncertainty.cols() != UNCERTAINTY_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "uncertainty needs {UNCERTAINTY_CHANNELS} columns, got {}",
                uncertainty.cols()
            )));
        }
        if !codes.is_finite() || !uncertainty.is_finite() {
            return Err(Error::NonFinite("conditioning inputs".into()));
        }
        Ok(ConditioningSource { rows, cols, codes, uncertainty })
    }

    /// Resamples a `(V, U)` pair given on a `grid` to the `target` grid.
    /// Codes use nearest neighbour, uncertainty uses bilinear interpolation.
    pub fn resampled(
        codes: &Matrix,
        uncertainty: &Matrix,
        grid: (usize, usize),
        target: (usize, usize),
    ) -> Result<Self> {
        let v = resample_nearest(codes, grid, target)?;
        let u = resample_bilinear(uncertainty, grid, target)?;
        Self::new(target.0, target.1, v, u)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn codes(&self) -> &Matrix {
        &self.codes
    }

    pub fn uncertainty(&self) -> &Matrix {
        &self.uncertainty
    }

    /// Same grid with all-zero inputs.
    pub fn zeros_like(&self) -> Self {
        ConditioningSource {
            rows: self.rows,
            cols: self.cols,
            codes: Matrix::zeros(self.codes.rows(), self.codes.cols()),
            uncertainty: Matrix::zeros(self.uncertainty.rows(), UNCERTAINTY_CHANNELS),
        }
    }
}

/// Encoded per-token conditioning `C = [H_code, U]` on the packed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    rows: usize,
    cols: usize,
    values: Matrix,
}

impl Conditioning {
    pub fn new(rows: usize, cols: usize, values: Matrix) -> Result<Self> {
        if rows * cols == 0 || values.rows() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{rows}x{cols} conditioning grid with {} rows", values.rows())));
        }
        Ok(Conditioning { rows, cols, values })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn zeros_like(&self) -> Self {
        Conditioning { rows: self.rows, cols: self.cols, values: Matrix::zeros(self.values.rows(), self.values.cols()) }
    }
}

fn check_grid(m: &Matrix, grid: (usize, usize), target: (usize, usize)) -> Result<()> {
    if grid.0 * grid.1 == 0 || target.0 * target.1 == 0 {
        return Err(Error::ShapeMismatch("empty resampling grid".into()));
    }
    if m.rows() != grid.0 * grid.1 {
        return Err(Error::ShapeMismatch(format!("{} rows do not form a {}x{} grid", m.rows(), grid.0, grid.1)));
    }
    Ok(())
}

#[inline]
fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    ((i * src) / dst).min(src - 1)
}

/// Nearest-neighbour resize of a row-major grid of feature rows.
pub fn resample_nearest(m: &Matrix, grid: (usize, usize), target: (usize, usize)) -> Result<Matrix> {
    check_grid(m, grid, target)?;
    let mut out = Matrix::zeros(target.0 * target.1, m.cols());
    for y in 0..target.0 {
        let sy = nearest_index(y, grid.0, target.0);
        for x in 0..target.1 {
            let sx = nearest_index(x, grid.1, target.1);
            out.row_mut(y * target.1 + x).copy_from_slice(m.row(sy * grid.1 + sx));
        }
    }
    Ok(out)
}

/// Half-pixel-centre source coordinate and its two taps.
#[inline]
fn bilinear_taps(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resample_bilinear(m: &Matrix, grid: (usize, usize), target: (usize, usize)) -> Result<Matrix> {
    check_grid(m, grid, target)?;
    let w = grid.1;
    let mut out = Matrix::zeros(target.0 * target.1, m.cols());
    for y in 0..target.0 {
        let (y0, y1, fy) = bilinear_taps(y, grid.0, target.0);
        for x in 0..target.1 {
            let (x0, x1, fx) = bilinear_taps(x, grid.1, target.1);
            let taps = [
                (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * w + x1, (1.0 - fy) * fx),
                (y1 * w + x0, fy * (1.0 - fx)),
                (y1 * w + x1, fy * fx),
            ];
            let o = out.row_mut(y * target.1 + x);
            for (src, wt) in taps {
                for (o, &v) in o.iter_mut().zip(m.row(src)) {
                    *o += wt * v;
                }
            }
        }
    }
    Ok(out)
}

fn neighbours(rows: usize, cols: usize, i: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (i / cols, i % cols);
    let up = (y > 0).then(|| i - cols);
    let down = (y + 1 < rows).then(|| i + cols);
    let left = (x > 0).then(|| i - 1);
    let right = (x + 1 < cols).then(|| i + 1);
    [up, down, left, right].into_iter().flatten()
}

/// Mean over the in-bounds 4-neighbourhood of each grid cell; zero for an
/// isolated cell.
pub fn neighbour_mean(m: &Matrix, rows: usize, cols: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let nb: Vec<usize> = neighbours(rows, cols, i).collect();
        if nb.is_empty() {
            continue;
        }
        let inv = 1.0 / nb.len() as f64;
        let o = out.row_mut(i);
        for j in nb {
            for (o, &v) in o.iter_mut().zip(m.row(j)) {
                *o += inv * v;
            }
        }
    }
    out
}

/// Adjoint of [`neighbour_mean`].
fn neighbour_mean_adjoint(g: &Matrix, rows: usize, cols: usize) -> Matrix {
    let mut out = Matrix::zeros(g.rows(), g.cols());
    for i in 0..g.rows() {
        let nb: Vec<usize> = neighbours(rows, cols, i).collect();
        if nb.is_empty() {
            continue;
        }
        let inv = 1.0 / nb.len() as f64;
        for j in nb {
            let src = g.row(i).to_vec();
            for (o, v) in out.row_mut(j).iter_mut().zip(src) {
                *o += inv * v;
            }
        }
    }
    out
}

/// Intermediate values of the code encoder kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct EncoderCache {
    pub mixed: Matrix,
    pub hidden: Matrix,
}

fn check_source(params: &DecoderParams, src: &ConditioningSource) -> Result<()> {
    if src.codes.cols() != params.dims.code_dim {
        return Err(Error::ShapeMismatch(format!(
            "code vectors have width {}, decoder expects {}",
            src.codes.cols(),
            params.dims.code_dim
        )));
    }
    Ok(())
}

pub(crate) fn encode_with_cache(
    params: &DecoderParams,
    src: &ConditioningSource,
) -> Result<(Conditioning, EncoderCache)> {
    check_source(params, src)?;
    let (rows, cols) = src.grid();
    let mut x = src.codes.matmul(&params.code_weight);
    x.add_row_vector(&params.code_bias);
    let mixed = neighbour_mean(&x, rows, cols);
    let mut hidden = mixed.matmul(&params.mix_weight);
    hidden.add_row_vector(&params.mix_bias);
    hidden.add_assign(&x);
    let act = params.activation;
    hidden.map_inplace(|v| act.apply(v));

    let dh = params.dims.code_hidden;
    let mut values = Matrix::zeros(rows * cols, params.dims.cond_width());
    for i in 0..rows * cols {
        let row = values.row_mut(i);
        row[..dh].copy_from_slice(hidden.row(i));
        row[dh..].copy_from_slice(src.uncertainty.row(i));
    }
    Ok((Conditioning::new(rows, cols, values)?, EncoderCache { mixed, hidden }))
}

/// Code encoder: `C = [act(X + mean4(X)·W_mix + b_mix), U]` with
/// `X = V·W_code + b_code`.
pub fn encode_conditioning(params: &DecoderParams, src: &ConditioningSource) -> Result<Conditioning> {
    Ok(encode_with_cache(params, src)?.0)
}

/// Accumulates encoder parameter gradients from `d_cond`, the gradient of the
/// loss with respect to `C`.
pub(crate) fn encoder_backward(
    params: &DecoderParams,
    src: &ConditioningSource,
    cache: &EncoderCache,
    d_cond: &Matrix,
    grads: &mut DecoderParams,
) {
    let (rows, cols) = src.grid();
    let dh = params.dims.code_hidden;
    let act = params.activation;
    let mut d_pre = Matrix::zeros(rows * cols, dh);
    for i in 0..rows * cols {
        for ((o, &g), &h) in d_pre.row_mut(i).iter_mut().zip(&d_cond.row(i)[..dh]).zip(cache.hidden.row(i)) {
            *o = g * act.grad_from_output(h);
        }
    }
    grads.mix_weight.add_assign(&cache.mixed.t_matmul(&d_pre));
    add_into(&mut grads.mix_bias, &d_pre.column_sums());

    let d_mixed = d_pre.matmul_t(&params.mix_weight);
    let mut d_x = neighbour_mean_adjoint(&d_mixed, rows, cols);
    d_x.add_assign(&d_pre);
    grads.code_weight.add_assign(&src.codes.t_matmul(&d_x));
    add_into(&mut grads.code_bias, &d_x.column_sums());
}

pub(crate) fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}
