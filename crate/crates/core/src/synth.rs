//! Seeded synthetic logit corpora.
//!
//! * `sharp`: Gaussian base logits (σ = 3) with one dominant entry placed
//!   above the row maximum by `0.5 + Gumbel` noise. Softmax rows carry a
//!   small head of a few entries over a heavy tail.
//! * `flat`: i.i.d. Gumbel noise of scale 0.05; softmax rows are nearly
//!   uniform.
//! * `cosine`: cosine similarities between features and a random unit-norm
//!   codebook (D = 8), each feature a lightly perturbed copy of one code, so
//!   every row lies in `[-1, 1]` with a single peak close to 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};

use crate::distribution::LogitGrid;
use crate::error::{Error, Result};
use crate::lcdm::{cosine_pseudo_logits, Codebook};
use crate::matrix::Matrix;

pub const SHARP_BASE_SCALE: f64 = 3.0;
pub const SHARP_LEAD: f64 = 0.5;
pub const FLAT_NOISE_SCALE: f64 = 0.05;
pub const COSINE_DIM: usize = 8;
pub const COSINE_JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Sharp,
    Flat,
    Cosine,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sharp" => Ok(SynthKind::Sharp),
            "flat" => Ok(SynthKind::Flat),
            "cosine" => Ok(SynthKind::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown corpus kind {other:?}"))),
        }
    }
}

/// Seeded generator shared by every synthetic source in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn gumbel() -> Gumbel<f64> {
    Gumbel::new(0.0, 1.0).expect("unit Gumbel")
}

/// Random codebook with unit-norm rows.
pub fn unit_codebook(rng: &mut impl Rng, k: usize, d: usize) -> Result<Codebook> {
    let mut m = Matrix::zeros(k, d);
    for i in 0..k {
        let row = m.row_mut(i);
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let n = crate::matrix::norm(row);
            if n > 1e-12 {
                row.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
    }
    Codebook::new(m)
}

pub fn synth_corpus(kind: SynthKind, n: usize, k: usize, seed: u64) -> Result<LogitGrid> {
    if n == 0 || k < 2 {
        return Err(Error::InvalidArgument(format!("synthetic corpus needs n >= 1 and k >= 2, got n={n} k={k}")));
    }
    let mut rng = seeded_rng(seed);
    let grid = match kind {
        SynthKind::Sharp => {
            let mut m = Matrix::zeros(n, k);
            for i in 0..n {
                let row = m.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for v in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = SHARP_BASE_SCALE * z;
                    max = max.max(*v);
                }
                let j = rng.random_range(0..k);
                row[j] = max + SHARP_LEAD + gumbel().sample(&mut rng);
            }
            m
        }
        SynthKind::Flat => {
            let g = gumbel();
            let data = (0..n * k).map(|_| FLAT_NOISE_SCALE * g.sample(&mut rng)).collect();
            Matrix::from_vec(n, k, data)?
        }
        SynthKind::Cosine => {
            let codebook = unit_codebook(&mut rng, k, COSINE_DIM)?;
            let mut features = Matrix::zeros(n, COSINE_DIM);
            for i in 0..n {
                let j = rng.random_range(0..k);
                let code = codebook.vector(j).to_vec();
                for (f, c) in features.row_mut(i).iter_mut().zip(code) {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    *f = c + COSINE_JITTER * noise;
                }
            }
            return cosine_pseudo_logits(&features, &codebook);
        }
    };
    LogitGrid::new(grid)
}
