//! Logit-to-code distributional mapping.
//!
//! A probability grid `P` (N×K) over a codebook `E` (K×D) becomes the
//! expected code vectors `V = P·E` and a four-column uncertainty grid `U`
//! (confidence, margin, adaptive top-mass, tail entropy). Proxy logits for
//! training are cosine similarities between encoder features and codes.

use rayon::prelude::*;

use crate::calibration::{apply_calibration, CalibrationParams};
use crate::distribution::{token_stats_with, LogitGrid, ProbGrid};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

/// K×D table of code vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook(Matrix);

impl Codebook {
    pub fn new(vectors: Matrix) -> Result<Self> {
        if vectors.rows() < 2 || vectors.cols() < 1 {
            return Err(Error::ShapeMismatch(format!(
                "codebook needs K >= 2 and D >= 1, got {}x{}",
                vectors.rows(),
                vectors.cols()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("codebook".into()));
        }
        Ok(Codebook(vectors))
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        self.0.row(k)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    /// Index pairs of identical code vectors. Duplicates are legal but make
    /// the mapping non-injective.
    pub fn duplicate_rows(&self) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.size()).collect();
        order.sort_by(|&a, &b| {
            self.vector(a)
                .iter()
                .zip(self.vector(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        order
            .windows(2)
            .filter(|w| self.vector(w[0]) == self.vector(w[1]))
            .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
            .collect()
    }

    /// `(1/K) Σ e_k`.
    pub fn centroid(&self) -> Vec<f64> {
        let k = self.size() as f64;
        self.0.column_sums().into_iter().map(|s| s / k).collect()
    }
}

fn check_vocab(probs_k: usize, codebook: &Codebook) -> Result<()> {
    if probs_k != codebook.size() {
        return Err(Error::ShapeMismatch(format!(
            "distribution over {probs_k} entries but codebook has {}",
            codebook.size()
        )));
    }
    Ok(())
}

/// Expected code vector per token, `V = P·E`.
pub fn weighted_code_vectors(probs: &ProbGrid, codebook: &Codebook) -> Result<Matrix> {
    check_vocab(probs.vocab(), codebook)?;
    Ok(probs.as_matrix().matmul(codebook.as_matrix()))
}

/// Per-token uncertainty features, N×4.
pub fn uncertainty_grid(probs: &ProbGrid) -> Result<Matrix> {
    let rows: Vec<&[f64]> = probs.rows().collect();
    let feats: Vec<[f64; 4]> = rows
        .par_iter()
        .map_init(Vec::new, |scratch, row| token_stats_with(row, scratch).map(|s| s.features()))
        .collect::<Result<_>>()?;
    Matrix::from_vec(feats.len(), 4, feats.into_iter().flatten().collect())
}

/// Cosine similarity of every feature row against every code vector.
pub fn cosine_pseudo_logits(features: &Matrix, codebook: &Codebook) -> Result<LogitGrid> {
    if features.cols() != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "features have dimension {} but codes have {}",
            features.cols(),
            codebook.dim()
        )));
    }
    let code_norms: Vec<f64> = (0..codebook.size()).map(|k| norm(codebook.vector(k))).collect();
    if let Some(k) = code_norms.iter().position(|&n| n == 0.0) {
        return Err(Error::InvalidArgument(format!("code vector {k} has zero norm")));
    }
    let mut out = Matrix::zeros(features.rows(), codebook.size());
    for i in 0..features.rows() {
        let f = features.row(i);
        let fnorm = norm(f);
        if fnorm == 0.0 || !fnorm.is_finite() {
            return Err(Error::InvalidArgument(format!("feature row {i} has zero or non-finite norm")));
        }
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (dot(f, codebook.vector(k)) / (fnorm * code_norms[k])).clamp(-1.0, 1.0);
        }
    }
    LogitGrid::new(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcdmOutput {
    /// N×D expected code vectors.
    pub codes: Matrix,
    /// N×4 uncertainty features.
    pub uncertainty: Matrix,
}

/// Calibrates logits, then maps the same probability grid to `(V, U)`.
pub fn lcdm_pipeline(logits: &LogitGrid, codebook: &Codebook, params: &CalibrationParams) -> Result<LcdmOutput> {
    check_vocab(logits.vocab(), codebook)?;
    let probs = apply_calibration(logits, params)?;
    Ok(LcdmOutput { codes: weighted_code_vectors(&probs, codebook)?, uncertainty: uncertainty_grid(&probs)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{softmax, token_stats};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_probs(r: &mut impl Rng, rows: usize, k: usize, sharp: f64) -> ProbGrid {
        let mut m = Matrix::zeros(rows, k);
        for i in 0..rows {
            let l: Vec<f64> = (0..k).map(|_| sharp * r.random::<f64>()).collect();
            m.row_mut(i).copy_from_slice(&softmax(&l, 1.0).unwrap());
        }
        ProbGrid::new(m).unwrap()
    }

    fn triple_loop(p: &Matrix, e: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(p.rows(), e.cols());
        for i in 0..p.rows() {
            for d in 0..e.cols() {
                let mut s = 0.0;
                for k in 0..p.cols() {
                    s += p.get(i, k) * e.get(k, d);
                }
                out.set(i, d, s);
            }
        }
        out
    }

    #[test]
    fn point_mass_selects_code() {
        let mut r = rng(1);
        let e = Codebook::new(random_matrix(&mut r, 6, 3)).unwrap();
        let mut p = Matrix::zeros(1, 6);
        p.set(0, 4, 1.0);
        let v = weighted_code_vectors(&ProbGrid::new(p).unwrap(), &e).unwrap();
        assert_eq!(v.row(0), e.vector(4));
    }

    #[test]
    fn midpoint() {
        let e = Codebook::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let p = ProbGrid::new(Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap()).unwrap();
        assert_eq!(weighted_code_vectors(&p, &e).unwrap().row(0), &[0.5, 0.5]);
    }

    #[test]
    fn matches_naive_matmul() {
        let mut r = rng(2);
        let p = random_probs(&mut r, 7, 32, 4.0);
        let e = Codebook::new(random_matrix(&mut r, 32, 5)).unwrap();
        let v = weighted_code_vectors(&p, &e).unwrap();
        let naive = triple_loop(p.as_matrix(), e.as_matrix());
        for (a, b) in v.as_slice().iter().zip(naive.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
        let short = random_probs(&mut r, 2, 31, 1.0);
        assert!(weighted_code_vectors(&short, &e).is_err());
    }

    #[test]
    fn uncertainty_rows() {
        let one_hot = ProbGrid::new(Matrix::from_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]).unwrap()).unwrap();
        let u = uncertainty_grid(&one_hot).unwrap();
        for i in 0..2 {
            assert_eq!(u.row(i), &[1.0, 1.0, 1.0, 0.0]);
        }

        let uniform = ProbGrid::new(Matrix::from_rows(&[vec![1.0 / 3.0; 3]]).unwrap()).unwrap();
        let u = uncertainty_grid(&uniform).unwrap();
        let tail = 2.0 * (1.0 / 3.0) * 3f64.ln() / 2f64.ln();
        assert!((u.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(u.get(0, 1), 0.0);
        assert!((u.get(0, 2) - 1.0).abs() < 1e-15);
        assert!((u.get(0, 3) - tail).abs() < 1e-14);

        let mut r = rng(3);
        let mixed = random_probs(&mut r, 9, 40, 6.0);
        let u = uncertainty_grid(&mixed).unwrap();
        for i in 0..9 {
            let direct = token_stats(mixed.row(i)).unwrap().features();
            for (a, b) in u.row(i).iter().zip(direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_cases() {
        let e = Codebook::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]]).unwrap()).unwrap();
        let f = Matrix::from_rows(&[vec![3.0, 0.0]]).unwrap();
        let s = cosine_pseudo_logits(&f, &e).unwrap();
        assert_eq!(s.row(0)[0], 1.0);
        assert_eq!(s.row(0)[1], 0.0);
        assert!((s.row(0)[2] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);

        assert!(cosine_pseudo_logits(&Matrix::zeros(1, 2), &e).is_err());
        assert!(cosine_pseudo_logits(&Matrix::zeros(1, 3), &e).is_err());
        let zero_code = Codebook::new(Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        assert!(cosine_pseudo_logits(&f, &zero_code).is_err());
    }

    #[test]
    fn cosine_matches_naive() {
        let mut r = rng(4);
        let f = random_matrix(&mut r, 4, 8);
        let e = Codebook::new(random_matrix(&mut r, 16, 8)).unwrap();
        let s = cosine_pseudo_logits(&f, &e).unwrap();
        for i in 0..4 {
            for k in 0..16 {
                let (mut d, mut nf, mut ne) = (0.0, 0.0, 0.0);
                for j in 0..8 {
                    d += f.get(i, j) * e.as_matrix().get(k, j);
                    nf += f.get(i, j).powi(2);
                    ne += e.as_matrix().get(k, j).powi(2);
                }
                assert!((s.row(i)[k] - d / (nf.sqrt() * ne.sqrt())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pipeline_cases() {
        let mut r = rng(5);
        let e = Codebook::new(random_matrix(&mut r, 12, 3)).unwrap();
        let mut l = Matrix::zeros(3, 12);
        for (i, k) in [2usize, 7, 11].into_iter().enumerate() {
            l.set(i, k, 60.0);
        }
        let logits = LogitGrid::new(l).unwrap();
        let out = lcdm_pipeline(&logits, &e, &CalibrationParams::IDENTITY).unwrap();
        for (i, k) in [2usize, 7, 11].into_iter().enumerate() {
            for (a, b) in out.codes.row(i).iter().zip(e.vector(k)) {
                assert!((a - b).abs() < 1e-9);
            }
        }

        let smooth = CalibrationParams::new(1.0, 0.0, 1.0, 1.0).unwrap();
        let out = lcdm_pipeline(&logits, &e, &smooth).unwrap();
        let c = e.centroid();
        for i in 0..3 {
            for (a, b) in out.codes.row(i).iter().zip(&c) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let noisy = LogitGrid::new(random_matrix(&mut r, 5, 12)).unwrap();
        let p = CalibrationParams::new(7.0, 0.02, 0.9, 0.01).unwrap();
        let out = lcdm_pipeline(&noisy, &e, &p).unwrap();
        let probs = apply_calibration(&noisy, &p).unwrap();
        assert_eq!(out.codes, weighted_code_vectors(&probs, &e).unwrap());
        assert_eq!(out.uncertainty, uncertainty_grid(&probs).unwrap());
    }

    #[test]
    fn sharp_limit_reaches_hard_codes() {
        let mut r = rng(6);
        let e = Codebook::new(random_matrix(&mut r, 20, 4)).unwrap();
        // well-separated: the winner leads by at least 0.1
        let mut l = random_matrix(&mut r, 10, 20);
        let mut winners = Vec::new();
        for i in 0..10 {
            let k = r.random_range(0..20);
            l.set(i, k, 1.2);
            winners.push(k);
        }
        let logits = LogitGrid::new(l).unwrap();
        let out = lcdm_pipeline(&logits, &e, &CalibrationParams::new(200.0, 0.0, 1.0, 0.0).unwrap()).unwrap();
        for (i, &k) in winners.iter().enumerate() {
            let d: f64 = out.codes.row(i).iter().zip(e.vector(k)).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(d.sqrt() < 1e-3);
        }
    }

    #[test]
    fn duplicates_reported() {
        let e = Codebook::new(Matrix::from_rows(&[vec![1.0], vec![2.0], vec![1.0]]).unwrap()).unwrap();
        assert_eq!(e.duplicate_rows(), vec![(0, 2)]);
        assert!(Codebook::new(Matrix::zeros(1, 3)).is_err());
    }

    proptest! {
        #[test]
        fn linear_in_probabilities(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
            let mut r = rng(seed);
            let p1 = random_probs(&mut r, 3, 10, 3.0);
            let p2 = random_probs(&mut r, 3, 10, 3.0);
            let e = Codebook::new(random_matrix(&mut r, 10, 4)).unwrap();
            let mix: Vec<f64> = p1.as_matrix().as_slice().iter().zip(p2.as_matrix().as_slice())
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
            let pm = ProbGrid::new(Matrix::from_vec(3, 10, mix).unwrap()).unwrap();
            let v = weighted_code_vectors(&pm, &e).unwrap();
            let v1 = weighted_code_vectors(&p1, &e).unwrap();
            let v2 = weighted_code_vectors(&p2, &e).unwrap();
            for i in 0..v.as_slice().len() {
                let want = lambda * v1.as_slice()[i] + (1.0 - lambda) * v2.as_slice()[i];
                prop_assert!((v.as_slice()[i] - want).abs() < 1e-10);
            }
            // convex-hull bound per coordinate
            for i in 0..3 {
                for d in 0..4 {
                    let col: Vec<f64> = (0..10).map(|k| e.vector(k)[d]).collect();
                    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(v.get(i, d) >= lo - 1e-9 && v.get(i, d) <= hi + 1e-9);
                }
            }
        }

        #[test]
        fn cosine_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut r = rng(seed);
            let f = random_matrix(&mut r, 3, 5);
            let e = Codebook::new(random_matrix(&mut r, 7, 5)).unwrap();
            let mut scaled = f.clone();
            scaled.map_inplace(|v| v * c);
            let a = cosine_pseudo_logits(&f, &e).unwrap();
            let b = cosine_pseudo_logits(&scaled, &e).unwrap();
            for (x, y) in a.as_matrix().as_slice().iter().zip(b.as_matrix().as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
