use std::fmt;

use crate::error::Error;
use crate::scalar::Scalar;
use crate::Result;

/// Dimensions of a rank-4 tensor: batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Dims {
        Dims { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor in NCHW order, n-major row-major:
/// element (n,c,h,w) lives at `((n*C + c)*H + h)*W + w`.
///
/// Tensors are value types; operations return new tensors. The only
/// sanctioned in-place mutation is the optimizer update and gradient
/// accumulation, which go through `data_mut`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: Dims) -> Tensor<T> {
        Tensor { dims, data: vec![T::zero(); dims.numel()] }
    }

    pub fn full(dims: Dims, value: T) -> Tensor<T> {
        Tensor { dims, data: vec![value; dims.numel()] }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Tensor<T>> {
        if data.len() != dims.numel() {
            return Err(Error::DimMismatch(format!(
                "buffer holds {} elements, dims {} need {}",
                data.len(),
                dims,
                dims.numel()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.dims.n && c < self.dims.c && h < self.dims.h && w < self.dims.w);
        ((n * self.dims.c + c) * self.dims.h + h) * self.dims.w + w
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.idx(n, c, h, w);
        self.data[i] = v;
    }

    /// The contiguous H*W slice of one (batch, channel) plane.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.dims.h * self.dims.w;
        let start = (n * self.dims.c + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.dims.h * self.dims.w;
        let start = (n * self.dims.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise sum; dims must match exactly.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(format!(
                "elementwise add of {} and {}",
                self.dims, other.dims
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Tensor { dims: self.dims, data })
    }

    /// Elementwise sum of two or more tensors of identical dims.
    pub fn add_n(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::DimMismatch("add_n of zero tensors".into()))?;
        let mut out = (*first).clone();
        for p in &parts[1..] {
            if p.dims != out.dims {
                return Err(Error::DimMismatch(format!(
                    "elementwise add of {} and {}",
                    out.dims, p.dims
                )));
            }
            for (o, &v) in out.data.iter_mut().zip(&p.data) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Concatenates along the channel axis; n, h, w must agree.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::DimMismatch("concat of zero tensors".into()))?;
        let (n, h, w) = (first.dims.n, first.dims.h, first.dims.w);
        let mut c_total = 0;
        for p in parts {
            if p.dims.n != n || p.dims.h != h || p.dims.w != w {
                return Err(Error::DimMismatch(format!(
                    "channel concat of {} with {}",
                    first.dims, p.dims
                )));
            }
            c_total += p.dims.c;
        }
        let dims = Dims::new(n, c_total, h, w);
        let mut data = Vec::with_capacity(dims.numel());
        for ni in 0..n {
            for p in parts {
                for c in 0..p.dims.c {
                    data.extend_from_slice(p.plane(ni, c));
                }
            }
        }
        Ok(Tensor { dims, data })
    }

    /// Copies channels `[c0, c1)` into a new tensor.
    pub fn slice_channels(&self, c0: usize, c1: usize) -> Result<Tensor<T>> {
        if c0 > c1 || c1 > self.dims.c {
            return Err(Error::DimMismatch(format!(
                "channel slice {}..{} of {}",
                c0, c1, self.dims
            )));
        }
        let dims = Dims::new(self.dims.n, c1 - c0, self.dims.h, self.dims.w);
        let mut data = Vec::with_capacity(dims.numel());
        for n in 0..self.dims.n {
            for c in c0..c1 {
                data.extend_from_slice(self.plane(n, c));
            }
        }
        Ok(Tensor { dims, data })
    }

    /// Sum of all elements, accumulated in declaration order.
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn scale(&self, k: T) -> Tensor<T> {
        self.map(|v| v * k)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug-build invariant: no NaN or Inf leaves an operation.
    #[inline]
    pub fn debug_check_finite(&self, context: &str) {
        debug_assert!(self.is_finite(), "non-finite value produced by {context}");
        let _ = context;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_n_major_row_major() {
        let dims = Dims::new(2, 3, 4, 5);
        let t = Tensor::<f32>::from_vec(dims, (0..dims.numel()).map(|i| i as f32).collect())
            .unwrap();
        assert_eq!(t.idx(0, 0, 0, 0), 0);
        assert_eq!(t.idx(0, 0, 0, 1), 1);
        assert_eq!(t.idx(0, 0, 1, 0), 5);
        assert_eq!(t.idx(0, 1, 0, 0), 20);
        assert_eq!(t.idx(1, 0, 0, 0), 60);
        assert_eq!(t.at(1, 2, 3, 4), ((1 * 3 + 2) * 4 + 3) as f32 * 5.0 + 4.0);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::<f32>::from_vec(Dims::new(1, 1, 2, 2), vec![0.0; 3]);
        assert!(err.is_err(), "3 elements must not satisfy 1x1x2x2");
    }

    #[test]
    fn concat_stacks_channels_in_argument_order() {
        let a = Tensor::<f32>::from_vec(Dims::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_vec(Dims::new(1, 2, 1, 2), vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.dims(), Dims::new(1, 3, 1, 2));
        assert_eq!(cat.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn concat_per_batch_interleaves_batches() {
        let a = Tensor::<f32>::from_vec(Dims::new(2, 1, 1, 1), vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_vec(Dims::new(2, 1, 1, 1), vec![10.0, 20.0]).unwrap();
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.data(), &[1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn concat_rejects_mismatched_spatial_dims() {
        let a = Tensor::<f32>::zeros(Dims::new(1, 1, 2, 2));
        let b = Tensor::<f32>::zeros(Dims::new(1, 1, 2, 3));
        assert!(Tensor::concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn add_rejects_mismatched_dims() {
        let a = Tensor::<f32>::zeros(Dims::new(1, 1, 2, 2));
        let b = Tensor::<f32>::zeros(Dims::new(1, 2, 2, 2));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn three_way_add_matches_chained_adds() {
        let dims = Dims::new(1, 2, 2, 2);
        let a = Tensor::<f64>::full(dims, 1.0);
        let b = Tensor::<f64>::full(dims, 2.0);
        let c = Tensor::<f64>::full(dims, 3.5);
        let once = Tensor::add_n(&[&a, &b, &c]).unwrap();
        let chained = a.add(&b).unwrap().add(&c).unwrap();
        assert_eq!(once, chained);
        assert_eq!(once.at(0, 1, 1, 1), 6.5);
    }

    #[test]
    fn slice_channels_inverts_concat() {
        let a = Tensor::<f32>::from_vec(Dims::new(2, 2, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::from_vec(Dims::new(2, 1, 1, 1), vec![9.0, 8.0]).unwrap();
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.slice_channels(0, 2).unwrap(), a);
        assert_eq!(cat.slice_channels(2, 3).unwrap(), b);
    }
}
