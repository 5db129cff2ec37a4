//! Checkpoint files: every named parameter tensor plus a small meta block.
//!
//! Layout (little-endian): magic `MCKP`; u8 version = 1; u32 architecture
//! hash; u32 tensor count; per tensor a u16 name length, the UTF-8 name,
//! u8 rank, rank x u32 dims, then the f32 payload in row-major order;
//! trailing meta block of u32 epoch and f32 best validation accuracy.
//!
//! Tensors are written in name order, so identical stores produce
//! identical bytes. Two reserved name families ride along with the
//! learnable parameters: `meta.arch` (the architecture description, so a
//! checkpoint can be rerun without its config file) and `norm.*` / `y0net.*`
//! records added by the data pipeline and the recurrent trainer.

use std::path::Path;

use crate::arch::{arch_hash, param_layout, ArchSpec, Upsampler, Variant};
use crate::error::Error;
use crate::graph::{ParamKind, ParamStore};
use crate::tensor::{Dims, Tensor};
use crate::Result;

const MAGIC: &[u8; 4] = b"MCKP";
const VERSION: u8 = 1;
pub const ARCH_RECORD: &str = "meta.arch";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub params: ParamStore<f32>,
    pub epoch: u32,
    pub best_val_oa: f32,
}

fn encode_arch(spec: &ArchSpec) -> Tensor<f32> {
    Tensor::from_vec(
        Dims::new(1, 8, 1, 1),
        vec![
            1.0,
            spec.variant.code() as f32,
            spec.patch_m as f32,
            spec.classes as f32,
            spec.bottleneck_hw as f32,
            spec.extra_convs as f32,
            spec.upsampler.code() as f32,
            spec.reuse_r as f32,
        ],
    )
    .expect("fixed-size record")
}

fn decode_arch(t: &Tensor<f32>, path: &Path) -> Result<ArchSpec> {
    let bad = |msg: String| Error::CheckpointFormat { path: path.to_path_buf(), msg };
    let v = t.data();
    if v.len() != 8 || v[0] != 1.0 {
        return Err(bad(format!("unsupported architecture record ({} values)", v.len())));
    }
    let spec = ArchSpec {
        variant: Variant::from_code(v[1] as u8)
            .ok_or_else(|| bad(format!("unknown variant code {}", v[1])))?,
        patch_m: v[2] as usize,
        classes: v[3] as usize,
        bottleneck_hw: v[4] as usize,
        extra_convs: v[5] as usize,
        upsampler: Upsampler::from_code(v[6] as u8)
            .ok_or_else(|| bad(format!("unknown upsampler code {}", v[6])))?,
        reuse_r: v[7] as usize,
    };
    spec.validate()?;
    Ok(spec)
}

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointFormat {
                path: self.path.to_path_buf(),
                msg: format!("truncated at byte {} (wanted {} more)", self.pos, n),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn encode_checkpoint(
    arch: &ArchSpec,
    params: &ParamStore<f32>,
    epoch: u32,
    best_val_oa: f32,
) -> Vec<u8> {
    let arch_record = encode_arch(arch);
    let mut records: Vec<(&str, &Tensor<f32>)> = params
        .iter()
        .filter(|(name, _)| name.as_str() != ARCH_RECORD)
        .map(|(name, e)| (name.as_str(), &e.value))
        .collect();
    records.push((ARCH_RECORD, &arch_record));
    records.sort_by(|a, b| a.0.cmp(b.0));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    push_u32(&mut out, arch_hash(arch));
    push_u32(&mut out, records.len() as u32);
    for (name, t) in records {
        push_u16(&mut out, name.len() as u16);
        out.extend_from_slice(name.as_bytes());
        out.push(4);
        let d = t.dims();
        for v in d.as_array() {
            push_u32(&mut out, v as u32);
        }
        for &v in t.data() {
            push_f32(&mut out, v);
        }
    }
    push_u32(&mut out, epoch);
    push_f32(&mut out, best_val_oa);
    out
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    arch: &ArchSpec,
    params: &ParamStore<f32>,
    epoch: u32,
    best_val_oa: f32,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(arch, params, epoch, best_val_oa))
        .map_err(|e| Error::io(path, e))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| Error::CheckpointFormat { path: path.to_path_buf(), msg };
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let stored_hash = r.u32()?;
    let count = r.u32()? as usize;

    let mut records: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        if rank == 0 || rank > 4 {
            return Err(bad(format!("tensor '{name}' has rank {rank}")));
        }
        let mut raw = [1usize; 4];
        for i in 0..rank {
            raw[4 - rank + i] = r.u32()? as usize;
        }
        let dims = Dims::new(raw[0], raw[1], raw[2], raw[3]);
        let mut data = Vec::with_capacity(dims.numel());
        for _ in 0..dims.numel() {
            data.push(r.f32()?);
        }
        records.push((name, Tensor::from_vec(dims, data).expect("sized above")));
    }
    let epoch = r.u32()?;
    let best_val_oa = r.f32()?;
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let arch_record = records
        .iter()
        .find(|(n, _)| n == ARCH_RECORD)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| bad(format!("missing {ARCH_RECORD} record")))?;
    let arch = decode_arch(&arch_record, path)?;
    if arch_hash(&arch) != stored_hash {
        return Err(Error::ArchHashMismatch { found: stored_hash, expected: arch_hash(&arch) });
    }

    // reassemble a typed store: layout names take their declared kinds,
    // anything else (norm.*, y0net.*, meta.arch) rides along as Stat
    let mut kinds: std::collections::BTreeMap<String, (Dims, ParamKind)> = param_layout(&arch)?
        .into_iter()
        .map(|(n, d, k)| (n, (d, k)))
        .collect();
    let mut params = ParamStore::new();
    for (name, tensor) in records {
        match kinds.remove(&name) {
            Some((dims, kind)) => {
                if dims != tensor.dims() {
                    return Err(Error::ParamMismatch {
                        name,
                        msg: format!("stored dims {} vs architecture {}", tensor.dims(), dims),
                    });
                }
                params.insert(name, kind, tensor);
            }
            None => params.insert(name, ParamKind::Stat, tensor),
        }
    }
    if let Some((name, _)) = kinds.into_iter().next() {
        return Err(Error::CheckpointFormat {
            path: path.to_path_buf(),
            msg: format!("parameter '{name}' required by the architecture is missing"),
        });
    }
    Ok(Checkpoint { arch, params, epoch, best_val_oa })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Stores every value tensor of `donor` into `params` under `prefix` as
/// plain Stat records (used to keep a frozen score-provider network inside
/// the recurrent net's checkpoint).
pub fn embed_prefixed(params: &mut ParamStore<f32>, prefix: &str, donor: &ParamStore<f32>) {
    for (name, e) in donor.iter() {
        if name.as_str() == ARCH_RECORD {
            continue;
        }
        params.insert(format!("{prefix}{name}"), ParamKind::Stat, e.value.clone());
    }
}

/// Rebuilds a typed store from `prefix`-named records, assigning kinds from
/// the given architecture's layout.
pub fn extract_prefixed(
    params: &ParamStore<f32>,
    prefix: &str,
    spec: &ArchSpec,
) -> Result<ParamStore<f32>> {
    let mut out = ParamStore::new();
    for (name, dims, kind) in param_layout(spec)? {
        let full = format!("{prefix}{name}");
        let entry = params.get(&full)?;
        if entry.value.dims() != dims {
            return Err(Error::ParamMismatch {
                name: full,
                msg: format!("stored dims {} vs architecture {}", entry.value.dims(), dims),
            });
        }
        out.insert(name, kind, entry.value.clone());
    }
    // carry any nested stats (e.g. normalization) along
    for (name, e) in params.iter() {
        if let Some(rest) = name.strip_prefix(prefix) {
            if !out.contains(rest) {
                out.insert(rest.to_string(), ParamKind::Stat, e.value.clone());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::init_params;
    use crate::rng::Rng;

    fn small_spec() -> ArchSpec {
        ArchSpec { patch_m: 8, classes: 3, bottleneck_hw: 2, ..ArchSpec::default() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = small_spec();
        let params = init_params::<f32>(&spec, &mut Rng::new(1)).unwrap();
        let bytes = encode_checkpoint(&spec, &params, 17, 0.875);
        let ck = decode_checkpoint(&bytes, Path::new("test.mckp")).unwrap();
        assert_eq!(ck.arch, spec);
        assert_eq!(ck.epoch, 17);
        assert_eq!(ck.best_val_oa, 0.875);
        for (name, e) in params.iter() {
            assert_eq!(ck.params.get(name).unwrap().value, e.value, "{name}");
            assert_eq!(ck.params.get(name).unwrap().kind, e.kind, "{name}");
        }
        // re-encoding the decoded store reproduces the file byte for byte
        let again = encode_checkpoint(&ck.arch, &ck.params, ck.epoch, ck.best_val_oa);
        assert_eq!(bytes, again);
    }

    #[test]
    fn rejects_corruption() {
        let spec = small_spec();
        let params = init_params::<f32>(&spec, &mut Rng::new(2)).unwrap();
        let bytes = encode_checkpoint(&spec, &params, 0, 0.0);
        let p = Path::new("x.mckp");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad, p), Err(Error::CheckpointFormat { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_checkpoint(&bad, p).is_err());

        let truncated = &bytes[..bytes.len() - 3];
        assert!(decode_checkpoint(truncated, p).is_err());

        let mut extended = bytes.clone();
        extended.push(0);
        assert!(decode_checkpoint(&extended, p).is_err());
    }

    #[test]
    fn detects_missing_parameter() {
        let spec = small_spec();
        let mut params = init_params::<f32>(&spec, &mut Rng::new(3)).unwrap();
        params.remove("head.conv.b").unwrap();
        let bytes = encode_checkpoint(&spec, &params, 0, 0.0);
        let err = decode_checkpoint(&bytes, Path::new("x.mckp"));
        match err {
            Err(Error::CheckpointFormat { msg, .. }) => assert!(msg.contains("head.conv.b")),
            other => panic!("expected missing-parameter error, got {other:?}"),
        }
    }

    #[test]
    fn stat_records_ride_along() {
        let spec = small_spec();
        let mut params = init_params::<f32>(&spec, &mut Rng::new(4)).unwrap();
        params.insert(
            "norm.mean",
            ParamKind::Stat,
            Tensor::from_vec(Dims::new(1, 5, 1, 1), vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap(),
        );
        let bytes = encode_checkpoint(&spec, &params, 3, 0.5);
        let ck = decode_checkpoint(&bytes, Path::new("x.mckp")).unwrap();
        let e = ck.params.get("norm.mean").unwrap();
        assert_eq!(e.kind, ParamKind::Stat);
        assert_eq!(e.value.data(), &[0.1, 0.2, 0.3, 0.4, 0.5]);
    }

    #[test]
    fn embedded_network_extracts_back() {
        let base_spec = small_spec();
        let reuse_spec = base_spec.with_reuse(2);
        let mut rng = Rng::new(5);
        let donor = init_params::<f32>(&base_spec, &mut rng).unwrap();
        let mut params = init_params::<f32>(&reuse_spec, &mut rng).unwrap();
        embed_prefixed(&mut params, "y0net.", &donor);

        let bytes = encode_checkpoint(&reuse_spec, &params, 0, 0.0);
        let ck = decode_checkpoint(&bytes, Path::new("x.mckp")).unwrap();
        let extracted = extract_prefixed(&ck.params, "y0net.", &base_spec).unwrap();
        assert_eq!(extracted.len(), donor.len());
        for (name, e) in donor.iter() {
            assert_eq!(extracted.get(name).unwrap().value, e.value, "{name}");
            assert_eq!(extracted.get(name).unwrap().kind, e.kind, "{name}");
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mckp");
        let spec = small_spec();
        let params = init_params::<f32>(&spec, &mut Rng::new(6)).unwrap();
        save_checkpoint(&path, &spec, &params, 42, 0.99).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.epoch, 42);
        assert_eq!(ck.arch, spec);
    }
}
