//! Fixed (parameter-free) upsampling: nearest neighbour and bilinear.
//!
//! Bilinear uses half-pixel centre alignment: output pixel `o` samples the
//! input at `(o + 0.5)/f - 0.5`, clamped at the borders.

use rayon::prelude::*;

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::DimMismatch("upsampling factor must be positive".into()));
    }
    Ok(())
}

/// Per output index: left source index, right source index, right weight.
fn bilinear_axis(out_len: usize, factor: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let lo = (i0.max(0.0) as usize).min(in_len - 1);
            let hi = ((i0 as isize + 1).max(0) as usize).min(in_len - 1);
            (lo, hi, frac)
        })
        .collect()
}

pub fn upsample<T: Scalar>(x: &Tensor<T>, factor: usize, mode: UpsampleMode) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let d = x.dims();
    let od = Dims::new(d.n, d.c, d.h * factor, d.w * factor);
    let mut out = Tensor::zeros(od);
    let plane = od.h * od.w;
    let haxis;
    let waxis;
    match mode {
        UpsampleMode::Nearest => {
            haxis = Vec::new();
            waxis = Vec::new();
        }
        UpsampleMode::Bilinear => {
            haxis = bilinear_axis(od.h, factor, d.h);
            waxis = bilinear_axis(od.w, factor, d.w);
        }
    }
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pi, oplane)| {
            let xplane = x.plane(pi / d.c, pi % d.c);
            match mode {
                UpsampleMode::Nearest => {
                    for oh in 0..od.h {
                        let xrow = &xplane[(oh / factor) * d.w..][..d.w];
                        let orow = &mut oplane[oh * od.w..][..od.w];
                        for (ow, o) in orow.iter_mut().enumerate() {
                            *o = xrow[ow / factor];
                        }
                    }
                }
                UpsampleMode::Bilinear => {
                    for (oh, &(h0, h1, fh)) in haxis.iter().enumerate() {
                        let r0 = &xplane[h0 * d.w..][..d.w];
                        let r1 = &xplane[h1 * d.w..][..d.w];
                        let wh1 = T::from_f64(fh);
                        let wh0 = T::from_f64(1.0 - fh);
                        let orow = &mut oplane[oh * od.w..][..od.w];
                        for (ow, &(w0, w1, fw)) in waxis.iter().enumerate() {
                            let ww1 = T::from_f64(fw);
                            let ww0 = T::from_f64(1.0 - fw);
                            orow[ow] = wh0 * (ww0 * r0[w0] + ww1 * r0[w1])
                                + wh1 * (ww0 * r1[w0] + ww1 * r1[w1]);
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub fn upsample_backward<T: Scalar>(
    x_dims: Dims,
    dy: &Tensor<T>,
    factor: usize,
    mode: UpsampleMode,
) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let od = Dims::new(x_dims.n, x_dims.c, x_dims.h * factor, x_dims.w * factor);
    if dy.dims() != od {
        return Err(Error::DimMismatch(format!(
            "upsample gradient dims {} do not match output dims {od}",
            dy.dims()
        )));
    }
    let mut dx = Tensor::zeros(x_dims);
    let plane = x_dims.h * x_dims.w;
    let (haxis, waxis) = match mode {
        UpsampleMode::Nearest => (Vec::new(), Vec::new()),
        UpsampleMode::Bilinear => (
            bilinear_axis(od.h, factor, x_dims.h),
            bilinear_axis(od.w, factor, x_dims.w),
        ),
    };
    dx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pi, dxplane)| {
            let gplane = dy.plane(pi / x_dims.c, pi % x_dims.c);
            match mode {
                UpsampleMode::Nearest => {
                    for oh in 0..od.h {
                        let grow = &gplane[oh * od.w..][..od.w];
                        let drow = &mut dxplane[(oh / factor) * x_dims.w..][..x_dims.w];
                        for (ow, &g) in grow.iter().enumerate() {
                            drow[ow / factor] += g;
                        }
                    }
                }
                UpsampleMode::Bilinear => {
                    for (oh, &(h0, h1, fh)) in haxis.iter().enumerate() {
                        let wh1 = T::from_f64(fh);
                        let wh0 = T::from_f64(1.0 - fh);
                        let grow = &gplane[oh * od.w..][..od.w];
                        for (ow, &(w0, w1, fw)) in waxis.iter().enumerate() {
                            let ww1 = T::from_f64(fw);
                            let ww0 = T::from_f64(1.0 - fw);
                            let g = grow[ow];
                            dxplane[h0 * x_dims.w + w0] += g * wh0 * ww0;
                            dxplane[h0 * x_dims.w + w1] += g * wh0 * ww1;
                            dxplane[h1 * x_dims.w + w0] += g * wh1 * ww0;
                            dxplane[h1 * x_dims.w + w1] += g * wh1 * ww1;
                        }
                    }
                }
            }
        });
    Ok(dx)
}
