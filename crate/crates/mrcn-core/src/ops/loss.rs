//! Channelwise softmax, masked cross-entropy and label extraction.

use rayon::prelude::*;

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};
use crate::Result;

pub const LOG_CLAMP: f64 = 1e-12;

/// Softmax over the channel axis, per pixel, with max subtraction.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.dims();
    let mut y = Tensor::zeros(d);
    let hw = d.h * d.w;
    let batch = d.c * hw;
    let xs = x.data();
    y.data_mut()
        .par_chunks_mut(batch)
        .enumerate()
        .for_each(|(n, yb)| {
            let xb = &xs[n * batch..][..batch];
            for px in 0..hw {
                let mut m = xb[px];
                for c in 1..d.c {
                    let v = xb[c * hw + px];
                    if v > m {
                        m = v;
                    }
                }
                let mut denom = T::zero();
                for c in 0..d.c {
                    let e = (xb[c * hw + px] - m).exp();
                    yb[c * hw + px] = e;
                    denom += e;
                }
                for c in 0..d.c {
                    yb[c * hw + px] /= denom;
                }
            }
        });
    y.debug_check_finite("channel softmax");
    y
}

/// d x of softmax given dy and the forward output y:
/// dx_c = y_c * (dy_c - sum_k dy_k y_k).
pub fn softmax_channels_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(y.dims(), dy.dims());
    let d = y.dims();
    let mut dx = Tensor::zeros(d);
    let hw = d.h * d.w;
    let batch = d.c * hw;
    let ys = y.data();
    let gs = dy.data();
    dx.data_mut()
        .par_chunks_mut(batch)
        .enumerate()
        .for_each(|(n, db)| {
            let yb = &ys[n * batch..][..batch];
            let gb = &gs[n * batch..][..batch];
            for px in 0..hw {
                let mut inner = T::zero();
                for c in 0..d.c {
                    inner += gb[c * hw + px] * yb[c * hw + px];
                }
                for c in 0..d.c {
                    let i = c * hw + px;
                    db[i] = yb[i] * (gb[i] - inner);
                }
            }
        });
    dx
}

fn check_ce_dims<T: Scalar>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<()> {
    let d = probs.dims();
    if target.dims() != d {
        return Err(Error::DimMismatch(format!(
            "target dims {} do not match scores {d}",
            target.dims()
        )));
    }
    if mask.dims() != Dims::new(d.n, 1, d.h, d.w) {
        return Err(Error::DimMismatch(format!(
            "mask dims {} do not match scores {d}",
            mask.dims()
        )));
    }
    Ok(())
}

/// Cross-entropy of softmax outputs against one-hot targets, averaged over
/// the pixels where `mask > 0.5`. Probabilities are clamped at 1e-12 inside
/// the logarithm. With no labeled pixel the loss is zero.
///
/// Returns (loss scalar as a (1,1,1,1) tensor, labeled pixel count).
pub fn masked_cross_entropy<T: Scalar>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<(Tensor<T>, usize)> {
    check_ce_dims(probs, target, mask)?;
    let d = probs.dims();
    let hw = d.h * d.w;
    let clamp = T::from_f64(LOG_CLAMP);
    let half = T::from_f64(0.5);
    let mut count = 0usize;
    let mut acc = T::zero();
    for n in 0..d.n {
        let mplane = mask.plane(n, 0);
        for px in 0..hw {
            if mplane[px] > half {
                count += 1;
                for c in 0..d.c {
                    let t = target.plane(n, c)[px];
                    if t != T::zero() {
                        let p = probs.plane(n, c)[px].max(clamp);
                        acc -= t * p.ln();
                    }
                }
            }
        }
    }
    let loss = if count == 0 { T::zero() } else { acc / T::from_f64(count as f64) };
    Ok((Tensor::full(Dims::new(1, 1, 1, 1), loss), count))
}

/// d probs of [`masked_cross_entropy`] scaled by the upstream scalar.
pub fn masked_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
    count: usize,
    upstream: T,
) -> Result<Tensor<T>> {
    check_ce_dims(probs, target, mask)?;
    let d = probs.dims();
    let mut dp = Tensor::zeros(d);
    if count == 0 {
        return Ok(dp);
    }
    let hw = d.h * d.w;
    let clamp = T::from_f64(LOG_CLAMP);
    let half = T::from_f64(0.5);
    let scale = upstream / T::from_f64(count as f64);
    for n in 0..d.n {
        let mplane = mask.plane(n, 0);
        for c in 0..d.c {
            let tplane = target.plane(n, c);
            let pplane = probs.plane(n, c);
            let hw_total = d.h * d.w;
            let start = (n * d.c + c) * hw_total;
            let dplane = &mut dp.data_mut()[start..start + hw_total];
            for px in 0..hw {
                let t = tplane[px];
                if mplane[px] > half && t != T::zero() && pplane[px] > clamp {
                    dplane[px] = -scale * t / pplane[px];
                }
            }
        }
    }
    Ok(dp)
}

/// Per-pixel argmax over channels; ties resolve to the lowest channel index.
pub fn argmax_map<T: Scalar>(scores: &Tensor<T>) -> Vec<u8> {
    let d = scores.dims();
    let hw = d.h * d.w;
    let mut out = vec![0u8; d.n * hw];
    for n in 0..d.n {
        let dst = &mut out[n * hw..][..hw];
        for (px, slot) in dst.iter_mut().enumerate() {
            let mut best_c = 0usize;
            let mut best = scores.plane(n, 0)[px];
            for c in 1..d.c {
                let v = scores.plane(n, c)[px];
                if v > best {
                    best = v;
                    best_c = c;
                }
            }
            *slot = best_c as u8;
        }
    }
    out
}
