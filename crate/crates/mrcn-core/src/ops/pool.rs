//! 2x2 max pooling with stride 2.

use rayon::prelude::*;

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};
use crate::Result;

fn check_even<T: Scalar>(x: &Tensor<T>) -> Result<Dims> {
    let d = x.dims();
    if d.h % 2 != 0 || d.w % 2 != 0 || d.h == 0 || d.w == 0 {
        return Err(Error::DimMismatch(format!(
            "2x2 max pooling needs positive even extents, got {d}"
        )));
    }
    Ok(Dims::new(d.n, d.c, d.h / 2, d.w / 2))
}

pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let od = check_even(x)?;
    let d = x.dims();
    let mut out = Tensor::zeros(od);
    let plane = od.h * od.w;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pi, oplane)| {
            let xplane = x.plane(pi / d.c, pi % d.c);
            for oh in 0..od.h {
                let r0 = &xplane[(2 * oh) * d.w..][..d.w];
                let r1 = &xplane[(2 * oh + 1) * d.w..][..d.w];
                let orow = &mut oplane[oh * od.w..][..od.w];
                for ow in 0..od.w {
                    let (a, b, c, e) = (r0[2 * ow], r0[2 * ow + 1], r1[2 * ow], r1[2 * ow + 1]);
                    let mut m = a;
                    if b > m {
                        m = b;
                    }
                    if c > m {
                        m = c;
                    }
                    if e > m {
                        m = e;
                    }
                    orow[ow] = m;
                }
            }
        });
    Ok(out)
}

/// Routes each upstream gradient to the first maximal element of its 2x2
/// window in scan order (top-left, top-right, bottom-left, bottom-right),
/// so ties have a deterministic subgradient.
pub fn maxpool2_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let od = check_even(x)?;
    if dy.dims() != od {
        return Err(Error::DimMismatch(format!(
            "pooling gradient dims {} do not match pooled dims {od}",
            dy.dims()
        )));
    }
    let d = x.dims();
    let mut dx = Tensor::zeros(d);
    let plane = d.h * d.w;
    dx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pi, dxplane)| {
            let (n, c) = (pi / d.c, pi % d.c);
            let xplane = x.plane(n, c);
            let gplane = dy.plane(n, c);
            for oh in 0..od.h {
                for ow in 0..od.w {
                    let base = (2 * oh) * d.w + 2 * ow;
                    let cand = [base, base + 1, base + d.w, base + d.w + 1];
                    let mut best = cand[0];
                    for &i in &cand[1..] {
                        if xplane[i] > xplane[best] {
                            best = i;
                        }
                    }
                    dxplane[best] += gplane[oh * od.w + ow];
                }
            }
        });
    Ok(dx)
}
