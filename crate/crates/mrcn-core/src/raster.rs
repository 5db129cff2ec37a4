//! Raster file I/O.
//!
//! Single-raster container, little-endian throughout:
//!
//! ```text
//! bytes 0..4   magic "MRAS"
//! byte  4      format version, currently 1
//! byte  5     dtype: 0 = uint8, 1 = float32, 2 = float64
//! byte  6      rank, always 3 (channels, height, width)
//! byte  7      reserved, 0
//! next 3*u32   dims c, h, w
//! rest         payload, row-major, channel-major
//! ```
//!
//! Round-trips are bit-exact for every dtype.

use std::fs;
use std::path::Path;

use crate::error::Error;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{Dims, Tensor};
use crate::Result;

const MAGIC: &[u8; 4] = b"MRAS";
const VERSION: u8 = 1;

/// A uint8 raster, used for class labels (255 = unlabeled).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct U8Raster {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl U8Raster {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<u8>) -> Result<U8Raster> {
        if data.len() != c * h * w {
            return Err(Error::DimMismatch(format!(
                "u8 raster buffer holds {} bytes, dims ({c},{h},{w}) need {}",
                data.len(),
                c * h * w
            )));
        }
        Ok(U8Raster { c, h, w, data })
    }

    #[inline]
    pub fn at(&self, c: usize, h: usize, w: usize) -> u8 {
        self.data[(c * self.h + h) * self.w + w]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }
}

/// One decoded raster file.
#[derive(Debug, Clone, PartialEq)]
pub enum Raster {
    U8(U8Raster),
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Raster {
    /// Wraps a single-batch tensor (n must be 1).
    pub fn from_tensor<T: Scalar>(t: Tensor<T>) -> Result<Raster> {
        if t.dims().n != 1 {
            return Err(Error::DimMismatch(format!(
                "raster files hold one image, got batch dims {}",
                t.dims()
            )));
        }
        Ok(match T::DTYPE {
            Dtype::F32 => {
                let dims = t.dims();
                let data = t.into_data().iter().map(|v| v.as_f32()).collect();
                Raster::F32(Tensor::from_vec(dims, data)?)
            }
            Dtype::F64 => {
                let dims = t.dims();
                let data = t.into_data().iter().map(|v| v.as_f64()).collect();
                Raster::F64(Tensor::from_vec(dims, data)?)
            }
            Dtype::U8 => unreachable!("Scalar is implemented for floats only"),
        })
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Raster::U8(_) => Dtype::U8,
            Raster::F32(_) => Dtype::F32,
            Raster::F64(_) => Dtype::F64,
        }
    }

    /// (channels, height, width)
    pub fn shape(&self) -> (usize, usize, usize) {
        match self {
            Raster::U8(r) => (r.c, r.h, r.w),
            Raster::F32(t) => (t.dims().c, t.dims().h, t.dims().w),
            Raster::F64(t) => (t.dims().c, t.dims().h, t.dims().w),
        }
    }

    pub fn into_f32(self, path: &Path) -> Result<Tensor<f32>> {
        match self {
            Raster::F32(t) => Ok(t),
            other => Err(Error::RasterFormat {
                path: path.to_path_buf(),
                msg: format!("expected float32 raster, found {:?}", other.dtype()),
            }),
        }
    }

    pub fn into_u8(self, path: &Path) -> Result<U8Raster> {
        match self {
            Raster::U8(r) => Ok(r),
            other => Err(Error::RasterFormat {
                path: path.to_path_buf(),
                msg: format!("expected uint8 raster, found {:?}", other.dtype()),
            }),
        }
    }
}

pub fn encode_raster(raster: &Raster) -> Vec<u8> {
    let (c, h, w) = raster.shape();
    let dtype = raster.dtype();
    let mut out = Vec::with_capacity(16 + c * h * w * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(3);
    out.push(0);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match raster {
        Raster::U8(r) => out.extend_from_slice(&r.data),
        Raster::F32(t) => {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Raster::F64(t) => {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
    }
    out
}

pub fn write_raster(path: impl AsRef<Path>, raster: &Raster) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_raster(raster)).map_err(|e| Error::io(path, e))
}

pub fn decode_raster(bytes: &[u8], path: &Path) -> Result<Raster> {
    let fail = |msg: String| Error::RasterFormat { path: path.to_path_buf(), msg };
    if bytes.len() < 8 {
        return Err(fail(format!("file is {} bytes, header needs 8", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[0..4])));
    }
    if bytes[4] != VERSION {
        return Err(fail(format!("unsupported version {}", bytes[4])));
    }
    let dtype = Dtype::from_code(bytes[5])
        .ok_or_else(|| fail(format!("unknown dtype code {}", bytes[5])))?;
    if bytes[6] != 3 {
        return Err(fail(format!("rank {} unsupported, rasters are rank 3", bytes[6])));
    }
    if bytes.len() < 8 + 12 {
        return Err(fail("truncated dims".into()));
    }
    let dim = |i: usize| {
        u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize
    };
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let payload = &bytes[20..];
    let count = c * h * w;
    if payload.len() != count * dtype.size() {
        return Err(fail(format!(
            "payload is {} bytes, dims ({c},{h},{w}) of {dtype:?} need {}",
            payload.len(),
            count * dtype.size()
        )));
    }
    Ok(match dtype {
        Dtype::U8 => Raster::U8(U8Raster::new(c, h, w, payload.to_vec())?),
        Dtype::F32 => {
            let data = payload.chunks_exact(4).map(f32::read_le).collect();
            Raster::F32(Tensor::from_vec(Dims::new(1, c, h, w), data)?)
        }
        Dtype::F64 => {
            let data = payload.chunks_exact(8).map(f64::read_le).collect();
            Raster::F64(Tensor::from_vec(Dims::new(1, c, h, w), data)?)
        }
    })
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_path() -> std::path::PathBuf {
        std::path::PathBuf::from("probe.mras")
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let vals = vec![0.0f32, -0.0, 1.5, f32::MIN_POSITIVE, 1e-40, 0.1, 255.25];
        let t = Tensor::from_vec(Dims::new(1, 1, 1, 7), vals.clone()).unwrap();
        let bytes = encode_raster(&Raster::F32(t));
        let back = decode_raster(&bytes, &probe_path()).unwrap();
        match back {
            Raster::F32(t) => {
                for (a, b) in t.data().iter().zip(&vals) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            _ => panic!("dtype changed in round trip"),
        }
    }

    #[test]
    fn u8_and_f64_round_trip() {
        let lbl = U8Raster::new(1, 2, 3, vec![0, 1, 255, 4, 5, 2]).unwrap();
        let bytes = encode_raster(&Raster::U8(lbl.clone()));
        assert_eq!(decode_raster(&bytes, &probe_path()).unwrap(), Raster::U8(lbl));

        let t = Tensor::from_vec(Dims::new(1, 2, 1, 2), vec![1.0f64, -2.5, 1e-300, 3.125])
            .unwrap();
        let bytes = encode_raster(&Raster::F64(t.clone()));
        assert_eq!(decode_raster(&bytes, &probe_path()).unwrap(), Raster::F64(t));
    }

    #[test]
    fn header_layout_is_frozen() {
        let t = Tensor::from_vec(Dims::new(1, 2, 3, 4), vec![0.0f32; 24]).unwrap();
        let bytes = encode_raster(&Raster::F32(t));
        assert_eq!(&bytes[0..4], b"MRAS");
        assert_eq!(bytes[4], 1, "version");
        assert_eq!(bytes[5], 1, "float32 dtype code");
        assert_eq!(bytes[6], 3, "rank");
        assert_eq!(bytes[7], 0, "reserved");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &4u32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 24 * 4);
    }

    #[test]
    fn rejects_bad_magic_version_dtype_and_truncation() {
        let t = Tensor::from_vec(Dims::new(1, 1, 1, 2), vec![1.0f32, 2.0]).unwrap();
        let good = encode_raster(&Raster::F32(t));

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_raster(&bad, &probe_path()).is_err(), "magic");

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(decode_raster(&bad, &probe_path()).is_err(), "version");

        let mut bad = good.clone();
        bad[5] = 7;
        assert!(decode_raster(&bad, &probe_path()).is_err(), "dtype");

        let bad = &good[..good.len() - 1];
        assert!(decode_raster(bad, &probe_path()).is_err(), "truncated payload");

        assert!(decode_raster(&good[..6], &probe_path()).is_err(), "truncated header");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tile.mras");
        let lbl = U8Raster::new(1, 1, 4, vec![3, 255, 0, 1]).unwrap();
        write_raster(&path, &Raster::U8(lbl.clone())).unwrap();
        assert_eq!(read_raster(&path).unwrap(), Raster::U8(lbl));
    }
}
