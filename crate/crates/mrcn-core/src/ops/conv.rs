//! Direct 2-D convolution and its transpose, with exact adjoint pairing.
//!
//! Shared primitives:
//!   * `gather`:  out[o] = sum src[o*S - Z + p] * w   (convolution)
//!   * `scatter`: out[i*S - Z + p] += src[i] * w      (its adjoint)
//!   * `wgrad`:   correlation of two activations over all positions
//!
//! `conv2d` is gather, its input gradient is scatter; `tconv` is scatter,
//! its input gradient is gather. Weight layout is always
//! (out_channels, in_channels, G, G); the transposed direction swaps the
//! channel axes at lookup time instead of copying.
//!
//! Every output element is produced by exactly one thread with a fixed
//! accumulation order, so results are bit-identical for any thread count.

use rayon::prelude::*;

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};
use crate::Result;

/// floor((h - g + 2z) / s) + 1
pub fn conv_out_dim(h: usize, g: usize, z: usize, s: usize) -> Result<usize> {
    if s == 0 {
        return Err(Error::DimMismatch("stride must be positive".into()));
    }
    if h + 2 * z < g {
        return Err(Error::DimMismatch(format!(
            "kernel {g} exceeds padded extent {} (h={h}, z={z})",
            h + 2 * z
        )));
    }
    Ok((h + 2 * z - g) / s + 1)
}

/// (h - 1) * s + g - 2z
pub fn tconv_out_dim(h: usize, g: usize, z: usize, s: usize) -> Result<usize> {
    if s == 0 {
        return Err(Error::DimMismatch("stride must be positive".into()));
    }
    if h == 0 {
        return Err(Error::DimMismatch("empty input".into()));
    }
    let grown = (h - 1) * s + g;
    if grown <= 2 * z {
        return Err(Error::DimMismatch(format!(
            "crop 2*{z} swallows transposed output of extent {grown}"
        )));
    }
    Ok(grown - 2 * z)
}

#[derive(Debug, Clone, Copy)]
enum WLayout {
    /// weight[co, cs, p, q]
    OutIn,
    /// weight[cs, co, p, q]
    InOut,
}

#[inline(always)]
fn wat<T: Scalar>(w: &Tensor<T>, layout: WLayout, co: usize, cs: usize, p: usize, q: usize) -> T {
    match layout {
        WLayout::OutIn => w.at(co, cs, p, q),
        WLayout::InOut => w.at(cs, co, p, q),
    }
}

/// Indices `o` in `[0, count)` with `0 <= o*s + offset < limit`.
#[inline]
fn valid_range(limit: usize, count: usize, s: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 { 0 } else { ((-offset) as usize).div_ceil(s) };
    let max_pos = limit as isize - 1 - offset;
    if max_pos < 0 {
        return (0, 0);
    }
    let hi = (max_pos as usize / s + 1).min(count);
    (lo.min(hi), hi)
}

/// out[n,co,oh,ow] = bias[co] + sum_{cs,p,q} src[n,cs,oh*s+p-z,ow*s+q-z] * W(co,cs,p,q)
fn gather<T: Scalar>(
    src: &Tensor<T>,
    w: &Tensor<T>,
    layout: WLayout,
    bias: Option<&Tensor<T>>,
    s: usize,
    z: usize,
    out_dims: Dims,
) -> Tensor<T> {
    let sd = src.dims();
    let g = w.dims().h;
    let (oh_n, ow_n) = (out_dims.h, out_dims.w);
    let mut out = Tensor::zeros(out_dims);
    let plane = oh_n * ow_n;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pi, out_plane)| {
            let n = pi / out_dims.c;
            let co = pi % out_dims.c;
            if let Some(b) = bias {
                out_plane.fill(b.data()[co]);
            }
            for cs in 0..sd.c {
                let splane = src.plane(n, cs);
                for p in 0..g {
                    let poff = p as isize - z as isize;
                    let (oh_lo, oh_hi) = valid_range(sd.h, oh_n, s, poff);
                    for q in 0..g {
                        let qoff = q as isize - z as isize;
                        let (ow_lo, ow_hi) = valid_range(sd.w, ow_n, s, qoff);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let wv = wat(w, layout, co, cs, p, q);
                        if s == 1 {
                            let len = ow_hi - ow_lo;
                            for oh in oh_lo..oh_hi {
                                let ih = (oh as isize + poff) as usize;
                                let iw0 = (ow_lo as isize + qoff) as usize;
                                let orow = &mut out_plane[oh * ow_n + ow_lo..][..len];
                                let srow = &splane[ih * sd.w + iw0..][..len];
                                for (o, &x) in orow.iter_mut().zip(srow) {
                                    *o += wv * x;
                                }
                            }
                        } else {
                            for oh in oh_lo..oh_hi {
                                let ih = (oh * s) as isize + poff;
                                let srow = &splane[ih as usize * sd.w..][..sd.w];
                                let orow = &mut out_plane[oh * ow_n..][..ow_n];
                                for ow in ow_lo..ow_hi {
                                    let iw = (ow * s) as isize + qoff;
                                    orow[ow] += wv * srow[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// out[n,co,ih*s+p-z,iw*s+q-z] += src[n,cs,ih,iw] * W(co,cs,p,q); writes
/// falling outside `out_dims` are cropped (the adjoint of zero padding).
fn scatter<T: Scalar>(
    src: &Tensor<T>,
    w: &Tensor<T>,
    layout: WLayout,
    bias: Option<&Tensor<T>>,
    s: usize,
    z: usize,
    out_dims: Dims,
) -> Tensor<T> {
    let sd = src.dims();
    let g = w.dims().h;
    let (oh_n, ow_n) = (out_dims.h, out_dims.w);
    let mut out = Tensor::zeros(out_dims);
    let plane = oh_n * ow_n;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pi, out_plane)| {
            let n = pi / out_dims.c;
            let co = pi % out_dims.c;
            if let Some(b) = bias {
                out_plane.fill(b.data()[co]);
            }
            for cs in 0..sd.c {
                let splane = src.plane(n, cs);
                for p in 0..g {
                    let poff = p as isize - z as isize;
                    let (ih_lo, ih_hi) = valid_range(oh_n, sd.h, s, poff);
                    for q in 0..g {
                        let qoff = q as isize - z as isize;
                        let (iw_lo, iw_hi) = valid_range(ow_n, sd.w, s, qoff);
                        if iw_lo >= iw_hi {
                            continue;
                        }
                        let wv = wat(w, layout, co, cs, p, q);
                        if s == 1 {
                            let len = iw_hi - iw_lo;
                            for ih in ih_lo..ih_hi {
                                let oh = (ih as isize + poff) as usize;
                                let ow0 = (iw_lo as isize + qoff) as usize;
                                let orow = &mut out_plane[oh * ow_n + ow0..][..len];
                                let srow = &splane[ih * sd.w + iw_lo..][..len];
                                for (o, &x) in orow.iter_mut().zip(srow) {
                                    *o += wv * x;
                                }
                            }
                        } else {
                            for ih in ih_lo..ih_hi {
                                let oh = (ih * s) as isize + poff;
                                let orow = &mut out_plane[oh as usize * ow_n..][..ow_n];
                                let srow = &splane[ih * sd.w..][..sd.w];
                                for iw in iw_lo..iw_hi {
                                    let ow = (iw * s) as isize + qoff;
                                    orow[ow as usize] += wv * srow[iw];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// dw[ca,cx,p,q] = sum_{n,oh,ow} a[n,ca,oh,ow] * x[n,cx,oh*s+p-z,ow*s+q-z]
fn wgrad<T: Scalar>(a: &Tensor<T>, x: &Tensor<T>, s: usize, z: usize, g: usize) -> Tensor<T> {
    let ad = a.dims();
    let xd = x.dims();
    let mut dw = Tensor::zeros(Dims::new(ad.c, xd.c, g, g));
    let chunk = xd.c * g * g;
    dw.data_mut()
        .par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(ca, dw_chunk)| {
            for n in 0..ad.n {
                let aplane = a.plane(n, ca);
                for cx in 0..xd.c {
                    let xplane = x.plane(n, cx);
                    for p in 0..g {
                        let poff = p as isize - z as isize;
                        let (oh_lo, oh_hi) = valid_range(xd.h, ad.h, s, poff);
                        for q in 0..g {
                            let qoff = q as isize - z as isize;
                            let (ow_lo, ow_hi) = valid_range(xd.w, ad.w, s, qoff);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let mut acc = T::zero();
                            if s == 1 {
                                // eight independent partial sums keep the
                                // reduction off the FP latency chain
                                let mut lanes = [T::zero(); 8];
                                let len = ow_hi - ow_lo;
                                for oh in oh_lo..oh_hi {
                                    let ih = (oh as isize + poff) as usize;
                                    let iw0 = (ow_lo as isize + qoff) as usize;
                                    let arow = &aplane[oh * ad.w + ow_lo..][..len];
                                    let xrow = &xplane[ih * xd.w + iw0..][..len];
                                    let mut ac = arow.chunks_exact(8);
                                    let mut xc = xrow.chunks_exact(8);
                                    for (a8, x8) in (&mut ac).zip(&mut xc) {
                                        for k in 0..8 {
                                            lanes[k] += a8[k] * x8[k];
                                        }
                                    }
                                    for (&av, &xv) in ac.remainder().iter().zip(xc.remainder()) {
                                        acc += av * xv;
                                    }
                                }
                                for l in lanes {
                                    acc += l;
                                }
                            } else {
                                for oh in oh_lo..oh_hi {
                                    let ih = (oh * s) as isize + poff;
                                    let xrow = &xplane[ih as usize * xd.w..][..xd.w];
                                    let arow = &aplane[oh * ad.w..][..ad.w];
                                    for ow in ow_lo..ow_hi {
                                        let iw = (ow * s) as isize + qoff;
                                        acc += arow[ow] * xrow[iw as usize];
                                    }
                                }
                            }
                            dw_chunk[(cx * g + p) * g + q] += acc;
                        }
                    }
                }
            }
        });
    dw
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let d = dy.dims();
    let mut db = Tensor::zeros(Dims::new(1, d.c, 1, 1));
    for co in 0..d.c {
        let mut acc = T::zero();
        for n in 0..d.n {
            for &v in dy.plane(n, co) {
                acc += v;
            }
        }
        db.data_mut()[co] = acc;
    }
    db
}

fn check_conv_args<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    transposed: bool,
) -> Result<(usize, usize, usize)> {
    let wd = w.dims();
    if wd.h != wd.w {
        return Err(Error::DimMismatch(format!("kernel must be square, got {}", wd)));
    }
    let (k_out, k_in, g) = (wd.n, wd.c, wd.h);
    if x.dims().c != k_in {
        let role = if transposed { "transposed conv" } else { "conv" };
        return Err(Error::DimMismatch(format!(
            "{role} weight expects {k_in} input channels, activation has {} ({} vs {})",
            x.dims().c,
            wd,
            x.dims()
        )));
    }
    if b.dims() != Dims::new(1, k_out, 1, 1) {
        return Err(Error::DimMismatch(format!(
            "bias dims {} do not match {k_out} output channels",
            b.dims()
        )));
    }
    Ok((k_out, k_in, g))
}

/// Strided, zero-padded convolution. Weight (K_out, K_in, G, G), bias (1, K_out, 1, 1).
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (k_out, _, g) = check_conv_args(x, w, b, false)?;
    let xd = x.dims();
    let oh = conv_out_dim(xd.h, g, pad, stride)?;
    let ow = conv_out_dim(xd.w, g, pad, stride)?;
    let y = gather(x, w, WLayout::OutIn, Some(b), stride, pad, Dims::new(xd.n, k_out, oh, ow));
    y.debug_check_finite("conv2d");
    Ok(y)
}

/// Gradients of [`conv2d`]: (d_input, d_weight, d_bias).
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = w.dims().h;
    let dx = scatter(dy, w, WLayout::InOut, None, stride, pad, x.dims());
    let dw = wgrad(dy, x, stride, pad, g);
    let db = bias_grad(dy);
    Ok((dx, dw, db))
}

/// Transposed (fractionally strided) convolution: the exact adjoint of
/// [`conv2d`] with the same stride and padding. Output extent
/// (h-1)*stride + G - 2*pad. Weight (K_out, K_in, G, G) like `conv2d`.
pub fn tconv<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (k_out, _, g) = check_conv_args(x, w, b, true)?;
    let xd = x.dims();
    let oh = tconv_out_dim(xd.h, g, pad, stride)?;
    let ow = tconv_out_dim(xd.w, g, pad, stride)?;
    let y = scatter(x, w, WLayout::OutIn, Some(b), stride, pad, Dims::new(xd.n, k_out, oh, ow));
    y.debug_check_finite("transposed conv");
    Ok(y)
}

/// Gradients of [`tconv`]: (d_input, d_weight, d_bias).
pub fn tconv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = w.dims().h;
    let dx = gather(dy, w, WLayout::InOut, None, stride, pad, x.dims());
    let dwt = wgrad(x, dy, stride, pad, g);
    let dw = transpose01(&dwt);
    let db = bias_grad(dy);
    Ok((dx, dw, db))
}

/// Swaps the first two axes of a rank-4 tensor.
pub fn transpose01<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let d = t.dims();
    let mut out = Tensor::zeros(Dims::new(d.c, d.n, d.h, d.w));
    for a in 0..d.n {
        for b in 0..d.c {
            let src = t.plane(a, b);
            out.plane_mut(b, a).copy_from_slice(src);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bias0<T: Scalar>(k: usize) -> Tensor<T> {
        Tensor::zeros(Dims::new(1, k, 1, 1))
    }

    #[test]
    fn out_dim_formula() {
        assert_eq!(conv_out_dim(8, 3, 1, 2).unwrap(), 4);
        assert_eq!(conv_out_dim(64, 13, 6, 1).unwrap(), 64);
        assert_eq!(conv_out_dim(4, 2, 0, 2).unwrap(), 2);
        assert!(conv_out_dim(2, 5, 1, 1).is_err(), "kernel exceeds padded input");
    }

    #[test]
    fn tconv_out_dim_doubles_quadruples_octuples() {
        assert_eq!(tconv_out_dim(16, 4, 1, 2).unwrap(), 32);
        assert_eq!(tconv_out_dim(16, 8, 2, 4).unwrap(), 64);
        assert_eq!(tconv_out_dim(16, 16, 4, 8).unwrap(), 128);
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let x = Tensor::from_vec(
            Dims::new(1, 1, 3, 3),
            (1..=9).map(|v| v as f32).collect(),
        )
        .unwrap();
        let w = Tensor::full(Dims::new(1, 1, 3, 3), 1.0f32);
        let y = conv2d(&x, &w, &bias0(1), 1, 1).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 1, 3, 3));
        assert_eq!(y.at(0, 0, 1, 1), 45.0);
        // corner sees only the 2x2 block inside the image
        assert_eq!(y.at(0, 0, 0, 0), 1.0 + 2.0 + 4.0 + 5.0);
    }

    #[test]
    fn bias_is_added_once_per_output() {
        let x = Tensor::full(Dims::new(2, 1, 2, 2), 0.0f32);
        let w = Tensor::full(Dims::new(3, 1, 1, 1), 1.0f32);
        let mut b = bias0(3);
        b.data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        for n in 0..2 {
            for (k, expect) in [1.0f32, 2.0, 3.0].iter().enumerate() {
                assert!(y.plane(n, k).iter().all(|v| v == expect));
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f32>::zeros(Dims::new(1, 3, 4, 4));
        let w = Tensor::<f32>::zeros(Dims::new(2, 4, 3, 3));
        assert!(conv2d(&x, &w, &bias0(2), 1, 1).is_err());
    }

    fn dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> T {
        let mut acc = T::zero();
        for (&x, &y) in a.data().iter().zip(b.data()) {
            acc += x * y;
        }
        acc
    }

    // <conv(u), v> == <u, tconv(v)> for shared weights: the two directions
    // are adjoint linear maps.
    #[test]
    fn conv_and_tconv_are_adjoint() {
        let mut rng = crate::rng::Rng::new(77);
        // geometries where (h - g + 2z) divides s exactly, so the transposed
        // direction reproduces the original extent
        for &(h, w_in, g, z, s, ci, co) in &[
            (6usize, 7usize, 3usize, 1usize, 1usize, 2usize, 3usize),
            (8, 8, 4, 1, 2, 3, 2),
            (9, 5, 3, 0, 2, 1, 4),
            (16, 16, 8, 2, 4, 2, 1),
            (7, 10, 5, 2, 3, 2, 2),
        ] {
            let u: Tensor<f64> = rng.uniform_tensor(Dims::new(2, ci, h, w_in), -1.0, 1.0);
            let weight: Tensor<f64> = rng.uniform_tensor(Dims::new(co, ci, g, g), -1.0, 1.0);
            let y = conv2d(&u, &weight, &bias0(co), s, z).unwrap();
            let v: Tensor<f64> = rng.uniform_tensor(y.dims(), -1.0, 1.0);
            // tconv maps v back to u-space using the same weight viewed from
            // the other side (swap in/out channel axes).
            let wt = transpose01(&weight);
            let back = tconv(&v, &wt, &bias0(ci), s, z).unwrap();
            assert_eq!(back.dims(), u.dims());
            let lhs = dot(&y, &v);
            let rhs = dot(&u, &back);
            assert!(
                (lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()),
                "adjoint identity broke: {lhs} vs {rhs} at g={g} s={s} z={z}"
            );
        }
    }

    #[test]
    fn transpose01_swaps_leading_axes() {
        let t = Tensor::from_vec(
            Dims::new(2, 3, 1, 1),
            vec![0.0f32, 1.0, 2.0, 10.0, 11.0, 12.0],
        )
        .unwrap();
        let tt = transpose01(&t);
        assert_eq!(tt.dims(), Dims::new(3, 2, 1, 1));
        assert_eq!(tt.data(), &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0]);
    }
}
