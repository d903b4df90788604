use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::conditioning::{add_into, encode_with_cache, encoder_backward, Conditioning, ConditioningSource};
use super::latent::{v_pred_loss, LatentGrid};
use super::params::DecoderParams;

/// `[sin(2πt), cos(2πt)]`.
pub fn time_features(t: f64) -> [f64; 2] {
    [(TAU * t).sin(), (TAU * t).cos()]
}

struct ForwardCache {
    packed: Matrix,
    input: Matrix,
    h1: Matrix,
    mean_h1: Vec<f64>,
    mixed: Matrix,
    h2: Matrix,
}

fn check_shapes(params: &DecoderParams, z: &LatentGrid, cond: &Conditioning) -> Result<()> {
    if z.channels() != params.dims.latent_channels {
        return Err(Error::ShapeMismatch(format!(
            "latent has {} channels, decoder expects {}",
            z.channels(),
            params.dims.latent_channels
        )));
    }
    if z.token_grid() != cond.grid() {
        return Err(Error::ShapeMismatch(format!(
            "latent token grid {:?} does not match conditioning grid {:?}",
            z.token_grid(),
            cond.grid()
        )));
    }
    if cond.values().cols() != params.dims.cond_width() {
        return Err(Error::ShapeMismatch(format!(
            "conditioning width {} but decoder expects {}",
            cond.values().cols(),
            params.dims.cond_width()
        )));
    }
    Ok(())
}

fn forward_tokens(
    params: &DecoderParams,
    z: &LatentGrid,
    cond: &Conditioning,
    t: f64,
) -> Result<(Matrix, ForwardCache)> {
    check_shapes(params, z, cond)?;
    if !t.is_finite() {
        return Err(Error::InvalidArgument(format!("time {t} is not finite")));
    }
    let act = params.activation;
    let packed = z.pack();
    let n = packed.rows();

    let mut input = packed.matmul(&params.img_weight);
    input.add_row_vector(&params.img_bias);
    input.add_assign(&cond.values().matmul(&params.cond_weight));
    input.add_row_vector(&params.cond_bias);
    let [s, c] = time_features(t);
    let temb: Vec<f64> =
        params.time_embed.row(0).iter().zip(params.time_embed.row(1)).map(|(a, b)| s * a + c * b).collect();
    input.add_row_vector(&temb);

    let mut h1 = input.matmul(&params.body_weight1);
    h1.add_row_vector(&params.body_bias1);
    h1.map_inplace(|v| act.apply(v));

    let inv_n = 1.0 / n as f64;
    let mean_h1: Vec<f64> = h1.column_sums().into_iter().map(|v| v * inv_n).collect();
    let g = Matrix::from_vec(1, mean_h1.len(), mean_h1.clone())?.matmul(&params.global_weight);
    let mut mixed = h1.clone();
    mixed.add_row_vector(g.as_slice());

    let mut h2 = mixed.matmul(&params.body_weight2);
    h2.add_row_vector(&params.body_bias2);
    h2.map_inplace(|v| act.apply(v));

    let mut out = h2.matmul(&params.out_weight);
    out.add_row_vector(&params.out_bias);
    if !out.is_finite() {
        return Err(Error::NonFinite("decoder output".into()));
    }
    Ok((out, ForwardCache { packed, input, h1, mean_h1, mixed, h2 }))
}

/// Velocity prediction `v̂(z, C, t)` for a latent grid.
pub fn predict_velocity(params: &DecoderParams, z: &LatentGrid, cond: &Conditioning, t: f64) -> Result<LatentGrid> {
    let (out, _) = forward_tokens(params, z, cond, t)?;
    let (h, w, c) = z.shape();
    LatentGrid::unpack(&out, h, w, c)
}

/// One supervised example for the velocity objective.
#[derive(Debug, Clone, Copy)]
pub struct VelocityExample<'a> {
    pub noisy: &'a LatentGrid,
    pub clean: &'a LatentGrid,
    pub noise: &'a LatentGrid,
    pub source: &'a ConditioningSource,
    pub t: f64,
    pub weight: f64,
}

/// Loss of one example, encoding the conditioning from its source.
pub fn example_loss(params: &DecoderParams, ex: &VelocityExample<'_>) -> Result<f64> {
    let (cond, _) = encode_with_cache(params, ex.source)?;
    let v = predict_velocity(params, ex.noisy, &cond, ex.t)?;
    v_pred_loss(&v, ex.noise, ex.clean, ex.weight)
}

/// Loss and analytic gradient of every parameter, code encoder included.
pub fn loss_and_gradients(params: &DecoderParams, ex: &VelocityExample<'_>) -> Result<(f64, DecoderParams)> {
    let (cond, enc_cache) = encode_with_cache(params, ex.source)?;
    let (out, cache) = forward_tokens(params, ex.noisy, &cond, ex.t)?;
    ex.noisy.same_shape(ex.clean)?;
    ex.noisy.same_shape(ex.noise)?;
    if !(ex.weight > 0.0) {
        return Err(Error::InvalidArgument(format!("weight {} must be positive", ex.weight)));
    }
    let act = params.activation;
    let n = out.rows();

    let target = ex.noise.axpby(1.0, ex.clean, -1.0)?.pack();
    let w2 = ex.weight * ex.weight;
    let scale = 2.0 * w2 / (out.rows() * out.cols()) as f64;
    let mut loss = 0.0;
    let mut d_out = Matrix::zeros(out.rows(), out.cols());
    for ((d, &o), &y) in d_out.as_mut_slice().iter_mut().zip(out.as_slice()).zip(target.as_slice()) {
        let r = o - y;
        loss += r * r;
        *d = scale * r;
    }
    loss *= w2 / (out.rows() * out.cols()) as f64;

    let mut g = DecoderParams::zeros(params.dims, params.activation)?;
    g.out_weight = cache.h2.t_matmul(&d_out);
    g.out_bias = d_out.column_sums();

    let mut d_a2 = d_out.matmul_t(&params.out_weight);
    for (d, &h) in d_a2.as_mut_slice().iter_mut().zip(cache.h2.as_slice()) {
        *d *= act.grad_from_output(h);
    }
    g.body_weight2 = cache.mixed.t_matmul(&d_a2);
    g.body_bias2 = d_a2.column_sums();

    let d_mixed = d_a2.matmul_t(&params.body_weight2);
    let d_g = d_mixed.column_sums();
    g.global_weight = Matrix::from_vec(cache.mean_h1.len(), 1, cache.mean_h1.clone())?.matmul(&Matrix::from_vec(
        1,
        d_g.len(),
        d_g.clone(),
    )?);
    let d_mean = Matrix::from_vec(1, d_g.len(), d_g)?.matmul_t(&params.global_weight);
    let inv_n = 1.0 / n as f64;
    let spread: Vec<f64> = d_mean.as_slice().iter().map(|v| v * inv_n).collect();
    let mut d_a1 = d_mixed;
    d_a1.add_row_vector(&spread);
    for (d, &h) in d_a1.as_mut_slice().iter_mut().zip(cache.h1.as_slice()) {
        *d *= act.grad_from_output(h);
    }
    g.body_weight1 = cache.input.t_matmul(&d_a1);
    g.body_bias1 = d_a1.column_sums();

    let d_input = d_a1.matmul_t(&params.body_weight1);
    let d_bias = d_input.column_sums();
    g.img_weight = cache.packed.t_matmul(&d_input);
    g.img_bias = d_bias.clone();
    g.cond_weight = cond.values().t_matmul(&d_input);
    g.cond_bias = d_bias.clone();
    let [s, c] = time_features(ex.t);
    let mut temb = Matrix::zeros(2, d_bias.len());
    add_into(temb.row_mut(0), &d_bias.iter().map(|v| s * v).collect::<Vec<_>>());
    add_into(temb.row_mut(1), &d_bias.iter().map(|v| c * v).collect::<Vec<_>>());
    g.time_embed = temb;

    let d_cond = d_input.matmul_t(&params.cond_weight);
    encoder_backward(params, ex.source, &enc_cache, &d_cond, &mut g);

    if !loss.is_finite() || !g.is_finite() {
        return Err(Error::NonFinite("loss or gradient".into()));
    }
    Ok((loss, g))
}

/// Worst relative error between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares every analytic gradient entry with `(L(θ+h) − L(θ−h)) / 2h`.
/// Relative error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(params: &DecoderParams, ex: &VelocityExample<'_>, h: f64) -> Result<GradCheck> {
    let (_, analytic) = loss_and_gradients(params, ex)?;
    let analytic = analytic.to_flat();
    let base = params.to_flat();
    let mut probe = base.clone();
    let mut out = GradCheck { max_rel_error: 0.0, worst_index: 0, checked: base.len() };
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let up = example_loss(&DecoderParams::from_flat(params.dims, params.activation, &probe)?, ex)?;
        probe[i] = base[i] - h;
        let down = example_loss(&DecoderParams::from_flat(params.dims, params.activation, &probe)?, ex)?;
        probe[i] = base[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst_index = i;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_decoder::latent::add_noise;
    use crate::toy_decoder::params::{Activation, DecoderDims};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    struct Fixture {
        params: DecoderParams,
        clean: LatentGrid,
        noise: LatentGrid,
        noisy: LatentGrid,
        source: ConditioningSource,
        t: f64,
    }

    fn fixture(seed: u64, act: Activation) -> Fixture {
        let mut r = rng(seed);
        let dims = DecoderDims { code_dim: 3, code_hidden: 8, model_dim: 8, latent_channels: 2 };
        let mut params = DecoderParams::init(dims, act, 1.0, &mut r).unwrap();
        for a in params.arrays_mut() {
            for v in a.iter_mut() {
                *v += 0.1 * r.random_range(-1.0..1.0);
            }
        }
        let clean = LatentGrid::gaussian(4, 4, 2, &mut r).unwrap();
        let noise = LatentGrid::gaussian(4, 4, 2, &mut r).unwrap();
        let t = r.random::<f64>();
        let noisy = add_noise(&clean, t, &noise).unwrap();
        let source = ConditioningSource::new(2, 2, random_matrix(&mut r, 4, 3), random_matrix(&mut r, 4, 4)).unwrap();
        Fixture { params, clean, noise, noisy, source, t }
    }

    fn example(f: &Fixture) -> VelocityExample<'_> {
        VelocityExample { noisy: &f.noisy, clean: &f.clean, noise: &f.noise, source: &f.source, t: f.t, weight: 1.0 }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let f = fixture(seed, Activation::Tanh);
            let gc = gradient_check(&f.params, &example(&f), 1e-5).unwrap();
            assert!(gc.max_rel_error < 1e-4, "seed {seed}: {gc:?}");
        }
    }

    #[test]
    fn loss_matches_reported_value() {
        let f = fixture(9, Activation::Tanh);
        let ex = example(&f);
        let (l, _) = loss_and_gradients(&f.params, &ex).unwrap();
        assert_eq!(l, example_loss(&f.params, &ex).unwrap());
    }

    #[test]
    fn identity_mode_is_affine_in_latent() {
        let f = fixture(4, Activation::Identity);
        let (cond, _) = encode_with_cache(&f.params, &f.source).unwrap();
        let v0 = predict_velocity(&f.params, &LatentGrid::zeros(4, 4, 2).unwrap(), &cond, 0.3).unwrap();
        let va = predict_velocity(&f.params, &f.clean, &cond, 0.3).unwrap();
        let vb = predict_velocity(&f.params, &f.noise, &cond, 0.3).unwrap();
        let sum = f.clean.axpby(2.0, &f.noise, -0.5).unwrap();
        let vs = predict_velocity(&f.params, &sum, &cond, 0.3).unwrap();
        // v(2a − b/2) = 2v(a) − v(b)/2 − v(0)/2 for an affine map
        let expected = va.axpby(2.0, &vb, -0.5).unwrap().axpby(1.0, &v0, -0.5).unwrap();
        assert!(vs.mse(&expected).unwrap() < 1e-24);
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let f = fixture(5, Activation::Tanh);
        let (cond, _) = encode_with_cache(&f.params, &f.source).unwrap();
        let z = LatentGrid::zeros(6, 4, 2).unwrap();
        assert!(predict_velocity(&f.params, &z, &cond, 0.5).is_err());
    }
}
