//! Per-channel batch normalization over the (batch, height, width) axes.
//!
//! Training mode normalizes with biased batch statistics and folds them
//! into the running estimates with momentum 0.1; inference mode uses the
//! running estimates only. Scale and shift are learnable (1, C, 1, 1)
//! tensors.

use rayon::prelude::*;

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};
use crate::Result;

/// Batch statistics cached by the training forward pass for its backward.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

fn check_channel_vec<T: Scalar>(name: &str, t: &Tensor<T>, c: usize) -> Result<()> {
    if t.dims() != Dims::new(1, c, 1, 1) {
        return Err(Error::DimMismatch(format!(
            "{name} dims {} do not match {c} channels",
            t.dims()
        )));
    }
    Ok(())
}

fn channel_moments<T: Scalar>(x: &Tensor<T>, c: usize) -> (T, T) {
    let d = x.dims();
    let m = T::from_f64((d.n * d.h * d.w) as f64);
    let mut sum = T::zero();
    for n in 0..d.n {
        for &v in x.plane(n, c) {
            sum += v;
        }
    }
    let mean = sum / m;
    let mut sq = T::zero();
    for n in 0..d.n {
        for &v in x.plane(n, c) {
            let dlt = v - mean;
            sq += dlt * dlt;
        }
    }
    (mean, sq / m)
}

/// Forward pass with batch statistics; updates the running estimates in
/// place and returns the cached moments needed by the backward pass.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor<T>, BnStats<T>)> {
    let d = x.dims();
    check_channel_vec("gamma", gamma, d.c)?;
    check_channel_vec("beta", beta, d.c)?;
    check_channel_vec("running mean", running_mean, d.c)?;
    check_channel_vec("running variance", running_var, d.c)?;
    let epsv = T::from_f64(eps);
    let mom = T::from_f64(momentum);
    let keep = T::one() - mom;

    let mut stats = BnStats { mean: vec![T::zero(); d.c], inv_std: vec![T::zero(); d.c] };
    for c in 0..d.c {
        let (mean, var) = channel_moments(x, c);
        stats.mean[c] = mean;
        stats.inv_std[c] = T::one() / (var + epsv).sqrt();
        let rm = running_mean.data_mut();
        rm[c] = keep * rm[c] + mom * mean;
        let rv = running_var.data_mut();
        rv[c] = keep * rv[c] + mom * var;
    }

    let mut y = Tensor::zeros(d);
    let plane = d.h * d.w;
    y.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pi, yplane)| {
            let (n, c) = (pi / d.c, pi % d.c);
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            let (mean, istd) = (stats.mean[c], stats.inv_std[c]);
            for (o, &v) in yplane.iter_mut().zip(x.plane(n, c)) {
                *o = g * (v - mean) * istd + b;
            }
        });
    y.debug_check_finite("batch norm (train)");
    Ok((y, stats))
}

pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = x.dims();
    check_channel_vec("gamma", gamma, d.c)?;
    check_channel_vec("beta", beta, d.c)?;
    check_channel_vec("running mean", running_mean, d.c)?;
    check_channel_vec("running variance", running_var, d.c)?;
    let epsv = T::from_f64(eps);
    let mut y = Tensor::zeros(d);
    let plane = d.h * d.w;
    y.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pi, yplane)| {
            let (n, c) = (pi / d.c, pi % d.c);
            let g = gamma.data()[c];
            let b = beta.data()[c];
            let mean = running_mean.data()[c];
            let istd = T::one() / (running_var.data()[c] + epsv).sqrt();
            for (o, &v) in yplane.iter_mut().zip(x.plane(n, c)) {
                *o = g * (v - mean) * istd + b;
            }
        });
    y.debug_check_finite("batch norm (infer)");
    Ok(y)
}

/// Gradients of the training forward: (d_input, d_gamma, d_beta).
pub fn batch_norm_backward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BnStats<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = x.dims();
    if dy.dims() != d {
        return Err(Error::DimMismatch(format!(
            "batch norm gradient dims {} do not match input {d}",
            dy.dims()
        )));
    }
    let m = T::from_f64((d.n * d.h * d.w) as f64);
    let mut dgamma = Tensor::zeros(Dims::new(1, d.c, 1, 1));
    let mut dbeta = Tensor::zeros(Dims::new(1, d.c, 1, 1));
    // Per-channel reductions first (sequential per channel for fixed order).
    for c in 0..d.c {
        let (mean, istd) = (stats.mean[c], stats.inv_std[c]);
        let mut sg = T::zero();
        let mut sb = T::zero();
        for n in 0..d.n {
            for (&v, &g) in x.plane(n, c).iter().zip(dy.plane(n, c)) {
                sb += g;
                sg += g * (v - mean) * istd;
            }
        }
        dgamma.data_mut()[c] = sg;
        dbeta.data_mut()[c] = sb;
    }
    let mut dx = Tensor::zeros(d);
    let plane = d.h * d.w;
    dx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pi, dxplane)| {
            let (n, c) = (pi / d.c, pi % d.c);
            let (mean, istd) = (stats.mean[c], stats.inv_std[c]);
            let gam = gamma.data()[c];
            let mean_dy = dbeta.data()[c] / m;
            let mean_dyxhat = dgamma.data()[c] / m;
            for ((o, &v), &g) in dxplane.iter_mut().zip(x.plane(n, c)).zip(dy.plane(n, c)) {
                let xhat = (v - mean) * istd;
                *o = gam * istd * (g - mean_dy - xhat * mean_dyxhat);
            }
        });
    Ok((dx, dgamma, dbeta))
}

/// Gradients of the inference forward, a per-channel affine map.
pub fn batch_norm_backward_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = x.dims();
    if dy.dims() != d {
        return Err(Error::DimMismatch(format!(
            "batch norm gradient dims {} do not match input {d}",
            dy.dims()
        )));
    }
    let epsv = T::from_f64(eps);
    let mut dgamma = Tensor::zeros(Dims::new(1, d.c, 1, 1));
    let mut dbeta = Tensor::zeros(Dims::new(1, d.c, 1, 1));
    let mut dx = Tensor::zeros(d);
    for c in 0..d.c {
        let mean = running_mean.data()[c];
        let istd = T::one() / (running_var.data()[c] + epsv).sqrt();
        let gam = gamma.data()[c];
        let mut sg = T::zero();
        let mut sb = T::zero();
        for n in 0..d.n {
            let xp = x.plane(n, c);
            let gp = dy.plane(n, c);
            let hw = d.h * d.w;
            let start = (n * d.c + c) * hw;
            let dxp = &mut dx.data_mut()[start..start + hw];
            for ((o, &v), &g) in dxp.iter_mut().zip(xp).zip(gp) {
                sb += g;
                sg += g * (v - mean) * istd;
                *o = g * gam * istd;
            }
        }
        dgamma.data_mut()[c] = sg;
        dbeta.data_mut()[c] = sb;
    }
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn ones(c: usize) -> Tensor<f64> {
        Tensor::full(Dims::new(1, c, 1, 1), 1.0)
    }
    fn zeros(c: usize) -> Tensor<f64> {
        Tensor::zeros(Dims::new(1, c, 1, 1))
    }

    #[test]
    fn infer_with_unit_stats_is_identity() {
        let mut rng = Rng::new(2);
        let x: Tensor<f64> = rng.uniform_tensor(Dims::new(2, 3, 4, 4), -2.0, 2.0);
        let y = batch_norm_infer(&x, &ones(3), &zeros(3), &zeros(3), &ones(3), 0.0).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn train_output_is_standardized_per_channel() {
        let mut rng = Rng::new(3);
        let x: Tensor<f64> = rng.uniform_tensor(Dims::new(4, 2, 5, 5), 3.0, 9.0);
        let (mut rm, mut rv) = (zeros(2), ones(2));
        let (y, _) =
            batch_norm_train(&x, &ones(2), &zeros(2), &mut rm, &mut rv, 1e-5, 0.1).unwrap();
        for c in 0..2 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            let m = (4 * 5 * 5) as f64;
            for n in 0..4 {
                for &v in y.plane(n, c) {
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / m;
            let var = sq / m - mean * mean;
            assert!(mean.abs() < 1e-12, "channel mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel variance {var}");
        }
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let x = Tensor::from_vec(Dims::new(1, 1, 1, 2), vec![1.0f64, 3.0]).unwrap();
        let mut rm = Tensor::full(Dims::new(1, 1, 1, 1), 10.0);
        let mut rv = Tensor::full(Dims::new(1, 1, 1, 1), 4.0);
        batch_norm_train(&x, &ones(1), &zeros(1), &mut rm, &mut rv, 1e-5, 0.1).unwrap();
        // batch mean 2, biased batch variance 1
        assert!((rm.data()[0] - (0.9 * 10.0 + 0.1 * 2.0)).abs() < 1e-12);
        assert!((rv.data()[0] - (0.9 * 4.0 + 0.1 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn train_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let dims = Dims::new(3, 2, 2, 2);
        let x: Tensor<f64> = rng.uniform_tensor(dims, -1.0, 1.0);
        let gamma: Tensor<f64> = rng.uniform_tensor(Dims::new(1, 2, 1, 1), 0.5, 1.5);
        let beta: Tensor<f64> = rng.uniform_tensor(Dims::new(1, 2, 1, 1), -0.5, 0.5);
        let dy: Tensor<f64> = rng.uniform_tensor(dims, -1.0, 1.0);
        let run = |x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| {
            let (mut rm, mut rv) = (zeros(2), ones(2));
            let (y, _) = batch_norm_train(x, gamma, beta, &mut rm, &mut rv, 1e-5, 0.1).unwrap();
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (mut rm, mut rv) = (zeros(2), ones(2));
        let (_, stats) =
            batch_norm_train(&x, &gamma, &beta, &mut rm, &mut rv, 1e-5, 0.1).unwrap();
        let (dx, dgamma, dbeta) = batch_norm_backward_train(&x, &gamma, &stats, &dy).unwrap();
        let h = 1e-6;
        for i in [0usize, 5, 11, 23] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (run(&xp, &gamma, &beta) - run(&xm, &gamma, &beta)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6, "dx[{i}]: fd {fd} analytic {}", dx.data()[i]);
        }
        for c in 0..2 {
            let mut gp = gamma.clone();
            gp.data_mut()[c] += h;
            let mut gm = gamma.clone();
            gm.data_mut()[c] -= h;
            let fd = (run(&x, &gp, &beta) - run(&x, &gm, &beta)) / (2.0 * h);
            assert!((fd - dgamma.data()[c]).abs() < 1e-6);
            let mut bp = beta.clone();
            bp.data_mut()[c] += h;
            let mut bm = beta.clone();
            bm.data_mut()[c] -= h;
            let fd = (run(&x, &gamma, &bp) - run(&x, &gamma, &bm)) / (2.0 * h);
            assert!((fd - dbeta.data()[c]).abs() < 1e-6);
        }
    }
}
