//! Network builders: four multiresolution fusion variants plus the
//! recurrent unrolled form, all emitting graphs over named parameters.
//!
//! Geometry conventions, for an MS patch side of M (PAN side 4M):
//! the PAN-resolution encoder always pools twice (4M -> M), fusion happens
//! either at PAN resolution (early variants) or at M (late variants), and
//! `bottleneck_hw` fixes how many extra pools follow fusion:
//! p = log2(M / bottleneck_hw). The decoder then runs 2 + p doubling
//! stages back to 4M. For p >= 3 the extra reductions are bare pools
//! right after the first trunk stage, keeping trunk capacity constant
//! while the bottleneck shrinks.

use std::collections::BTreeMap;

use crate::error::Error;
use crate::graph::{Graph, NodeId, OpKind, ParamKind, ParamStore};
use crate::ops::UpsampleMode;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Dims;
use crate::Result;

pub const MS_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    FusenetLow,
    FusenetHigh,
    FusenetSkip,
    NetBilinear,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        Ok(match s {
            "fusenet_low" => Variant::FusenetLow,
            "fusenet_high" => Variant::FusenetHigh,
            "fusenet_skip" => Variant::FusenetSkip,
            "net_bilinear" => Variant::NetBilinear,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown variant '{s}' (expected fusenet_low | fusenet_high | fusenet_skip | net_bilinear)"
                )))
            }
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::FusenetLow => "fusenet_low",
            Variant::FusenetHigh => "fusenet_high",
            Variant::FusenetSkip => "fusenet_skip",
            Variant::NetBilinear => "net_bilinear",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::FusenetLow => 0,
            Variant::FusenetHigh => 1,
            Variant::FusenetSkip => 2,
            Variant::NetBilinear => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Variant> {
        Some(match code {
            0 => Variant::FusenetLow,
            1 => Variant::FusenetHigh,
            2 => Variant::FusenetSkip,
            3 => Variant::NetBilinear,
            _ => return None,
        })
    }

    /// late fusion: separate PAN and MS encoders meeting at MS resolution
    fn fuses_late(self) -> bool {
        matches!(self, Variant::FusenetLow | Variant::FusenetSkip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsampler {
    Transposed,
    NearestThenConv3,
    BilinearThenConv3,
}

impl Upsampler {
    pub fn parse(s: &str) -> Result<Upsampler> {
        Ok(match s {
            "transposed" => Upsampler::Transposed,
            "nearest_then_conv3" => Upsampler::NearestThenConv3,
            "bilinear_then_conv3" => Upsampler::BilinearThenConv3,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown upsampler '{s}' (expected transposed | nearest_then_conv3 | bilinear_then_conv3)"
                )))
            }
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Upsampler::Transposed => "transposed",
            Upsampler::NearestThenConv3 => "nearest_then_conv3",
            Upsampler::BilinearThenConv3 => "bilinear_then_conv3",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Upsampler::Transposed => 0,
            Upsampler::NearestThenConv3 => 1,
            Upsampler::BilinearThenConv3 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Upsampler> {
        Some(match code {
            0 => Upsampler::Transposed,
            1 => Upsampler::NearestThenConv3,
            2 => Upsampler::BilinearThenConv3,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub variant: Variant,
    /// MS patch side; PAN patches are 4x this
    pub patch_m: usize,
    pub classes: usize,
    /// spatial side of the innermost feature map, at MS scale
    pub bottleneck_hw: usize,
    /// extra 3x3 conv blocks inserted before the last pooling
    pub extra_convs: usize,
    pub upsampler: Upsampler,
    /// 0 = feed-forward; r >= 1 unrolls r weight-sharing instances, each
    /// consuming the previous instance's class-score map
    pub reuse_r: usize,
}

impl Default for ArchSpec {
    fn default() -> ArchSpec {
        ArchSpec {
            variant: Variant::FusenetLow,
            patch_m: 16,
            classes: 6,
            bottleneck_hw: 4,
            extra_convs: 0,
            upsampler: Upsampler::Transposed,
            reuse_r: 0,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.classes < 2 {
            return fail(format!("classes = {} but at least 2 are needed", self.classes));
        }
        if self.patch_m < 4 || self.patch_m % 4 != 0 {
            return fail(format!("patch_m = {} must be a positive multiple of 4", self.patch_m));
        }
        if self.bottleneck_hw == 0
            || self.patch_m % self.bottleneck_hw != 0
            || !(self.patch_m / self.bottleneck_hw).is_power_of_two()
        {
            return fail(format!(
                "bottleneck_hw = {} must divide patch_m = {} with a power-of-two ratio",
                self.bottleneck_hw, self.patch_m
            ));
        }
        Ok(())
    }

    /// pools applied after fusion
    pub fn pool_stages(&self) -> usize {
        (self.patch_m / self.bottleneck_hw).trailing_zeros() as usize
    }

    /// PAN extents must be a multiple of this for all pooling stages to
    /// divide evenly
    pub fn divisor(&self) -> usize {
        4 << self.pool_stages()
    }

    /// channels entering the first (large-kernel) convolution
    pub fn first_conv_in(&self) -> usize {
        let base = if self.variant.fuses_late() { 1 } else { 1 + MS_CHANNELS };
        if self.reuse_r > 0 {
            base + self.classes
        } else {
            base
        }
    }

    pub fn first_conv_weight(&self) -> &'static str {
        if self.variant.fuses_late() {
            "enc_pan.conv0.w"
        } else {
            "enc.conv0.w"
        }
    }

    /// same architecture with the recurrence removed
    pub fn base_spec(&self) -> ArchSpec {
        ArchSpec { reuse_r: 0, ..self.clone() }
    }

    pub fn with_reuse(&self, r: usize) -> ArchSpec {
        ArchSpec { reuse_r: r, ..self.clone() }
    }

    /// expected graph input dims for a training patch batch of size n
    pub fn patch_input_dims(&self, n: usize) -> BTreeMap<String, Dims> {
        self.input_dims_for(n, 4 * self.patch_m, 4 * self.patch_m)
    }

    /// expected graph input dims for an arbitrary PAN extent
    pub fn input_dims_for(&self, n: usize, pan_h: usize, pan_w: usize) -> BTreeMap<String, Dims> {
        let mut dims = BTreeMap::new();
        dims.insert("pan".to_string(), Dims::new(n, 1, pan_h, pan_w));
        dims.insert("ms".to_string(), Dims::new(n, MS_CHANNELS, pan_h / 4, pan_w / 4));
        if self.reuse_r > 0 {
            dims.insert("y0".to_string(), Dims::new(n, self.classes, pan_h, pan_w));
        }
        dims
    }

    pub fn loss_input_dims(&self, n: usize, pan_h: usize, pan_w: usize) -> BTreeMap<String, Dims> {
        let mut dims = self.input_dims_for(n, pan_h, pan_w);
        dims.insert("target".to_string(), Dims::new(n, self.classes, pan_h, pan_w));
        dims.insert("mask".to_string(), Dims::new(n, 1, pan_h, pan_w));
        dims
    }

    pub fn canonical_string(&self) -> String {
        format!(
            "v={} m={} c={} b={} e={} u={} r={}",
            self.variant.as_str(),
            self.patch_m,
            self.classes,
            self.bottleneck_hw,
            self.extra_convs,
            self.upsampler.as_str(),
            self.reuse_r
        )
    }
}

/// FNV-1a over the canonical description; stored in checkpoints so a
/// parameter file is never loaded into a different architecture.
pub fn arch_hash(spec: &ArchSpec) -> u32 {
    let mut h: u32 = 0x811c9dc5;
    for b in spec.canonical_string().bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x01000193);
    }
    h
}

/// Records parameter dims/kinds while wiring graph nodes.
struct NetBuilder {
    g: Graph,
    specs: BTreeMap<String, (Dims, ParamKind)>,
}

impl NetBuilder {
    fn new() -> NetBuilder {
        NetBuilder { g: Graph::new(), specs: BTreeMap::new() }
    }

    fn declare(&mut self, name: String, dims: Dims, kind: ParamKind) {
        if let Some((prev, _)) = self.specs.get(&name) {
            assert_eq!(*prev, dims, "parameter '{name}' redeclared with different dims");
            return;
        }
        self.specs.insert(name, (dims, kind));
    }

    fn conv(
        &mut self,
        x: NodeId,
        prefix: &str,
        k_in: usize,
        k_out: usize,
        g: usize,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        self.declare(w.clone(), Dims::new(k_out, k_in, g, g), ParamKind::ConvWeight);
        self.declare(b.clone(), Dims::new(1, k_out, 1, 1), ParamKind::Bias);
        self.g.add(OpKind::Conv { w, b, stride, pad }, vec![x])
    }

    /// learned upsampling by `factor` (kernel 2f, stride f, pad f/2)
    fn tconv(
        &mut self,
        x: NodeId,
        prefix: &str,
        k_in: usize,
        k_out: usize,
        factor: usize,
    ) -> Result<NodeId> {
        let g = 2 * factor;
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        self.declare(w.clone(), Dims::new(k_out, k_in, g, g), ParamKind::ConvWeight);
        self.declare(b.clone(), Dims::new(1, k_out, 1, 1), ParamKind::Bias);
        self.g.add(OpKind::TConv { w, b, stride: factor, pad: factor / 2 }, vec![x])
    }

    fn bn(&mut self, x: NodeId, prefix: &str, channels: usize) -> Result<NodeId> {
        let cd = Dims::new(1, channels, 1, 1);
        let gamma = format!("{prefix}.gamma");
        let beta = format!("{prefix}.beta");
        let rmean = format!("{prefix}.rmean");
        let rvar = format!("{prefix}.rvar");
        self.declare(gamma.clone(), cd, ParamKind::BnScale);
        self.declare(beta.clone(), cd, ParamKind::BnShift);
        self.declare(rmean.clone(), cd, ParamKind::BnRunningMean);
        self.declare(rvar.clone(), cd, ParamKind::BnRunningVar);
        self.g.add(
            OpKind::BatchNorm { gamma, beta, rmean, rvar, eps: 1e-5, momentum: 0.1 },
            vec![x],
        )
    }

    fn elu(&mut self, x: NodeId) -> Result<NodeId> {
        self.g.add(OpKind::Elu, vec![x])
    }

    fn pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.g.add(OpKind::MaxPool2, vec![x])
    }

    fn conv_block(
        &mut self,
        x: NodeId,
        conv_prefix: &str,
        bn_prefix: &str,
        k_in: usize,
        k_out: usize,
        g: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let c = self.conv(x, conv_prefix, k_in, k_out, g, 1, pad)?;
        let n = self.bn(c, bn_prefix, k_out)?;
        self.elu(n)
    }

    fn tconv_block(
        &mut self,
        x: NodeId,
        conv_prefix: &str,
        bn_prefix: &str,
        k_in: usize,
        k_out: usize,
        factor: usize,
    ) -> Result<NodeId> {
        let c = self.tconv(x, conv_prefix, k_in, k_out, factor)?;
        let n = self.bn(c, bn_prefix, k_out)?;
        self.elu(n)
    }

    /// one decoder doubling stage with the configured upsampler
    fn decoder_stage(
        &mut self,
        x: NodeId,
        k: usize,
        k_in: usize,
        k_out: usize,
        upsampler: Upsampler,
    ) -> Result<NodeId> {
        let conv_prefix = format!("dec.up{k}");
        let bn_prefix = format!("dec.bn{k}");
        let pre = match upsampler {
            Upsampler::Transposed => self.tconv(x, &conv_prefix, k_in, k_out, 2)?,
            Upsampler::NearestThenConv3 => {
                let u = self
                    .g
                    .add(OpKind::Upsample { factor: 2, mode: UpsampleMode::Nearest }, vec![x])?;
                self.conv(u, &conv_prefix, k_in, k_out, 3, 1, 1)?
            }
            Upsampler::BilinearThenConv3 => {
                let u = self
                    .g
                    .add(OpKind::Upsample { factor: 2, mode: UpsampleMode::Bilinear }, vec![x])?;
                self.conv(u, &conv_prefix, k_in, k_out, 3, 1, 1)?
            }
        };
        let n = self.bn(pre, &bn_prefix, k_out)?;
        self.elu(n)
    }
}

/// Builds one full instance from the (possibly score-augmented) PAN input
/// and the shared MS feature, returning the softmax scores node.
fn instance(
    b: &mut NetBuilder,
    spec: &ArchSpec,
    first_in: NodeId,
    first_in_ch: usize,
    ms_feature: NodeId,
    tap: bool,
) -> Result<NodeId> {
    let p = spec.pool_stages();
    let set_tap = |b: &mut NetBuilder, name: &str, id: NodeId| {
        if tap {
            b.g.set_named(name, id);
        }
    };

    // encoder to the fused MS-scale feature
    let (fused_trunk_in, trunk_in_ch, pan_encoded) = if spec.variant.fuses_late() {
        let t = b.conv_block(first_in, "enc_pan.conv0", "enc_pan.bn0", first_in_ch, 16, 13, 6)?;
        let t = b.pool(t)?;
        let t = b.conv_block(t, "enc_pan.conv1", "enc_pan.bn1", 16, 32, 7, 3)?;
        let pan_encoded = b.pool(t)?;
        set_tap(b, "pan_encoded", pan_encoded);
        set_tap(b, "ms_projected", ms_feature);
        let fused = b.g.add(OpKind::Concat, vec![pan_encoded, ms_feature])?;
        set_tap(b, "fused", fused);
        (fused, 64, Some(pan_encoded))
    } else {
        // early fusion at PAN resolution; the concat IS the first conv input
        set_tap(b, "fused", first_in);
        let t = b.conv_block(first_in, "enc.conv0", "enc.bn0", first_in_ch, 16, 13, 6)?;
        let t = b.pool(t)?;
        let t = b.conv_block(t, "enc.conv1", "enc.bn1", 16, 32, 7, 3)?;
        let t = b.pool(t)?;
        (t, 32, None)
    };

    // trunk at MS scale and below
    let mut t = b.conv_block(fused_trunk_in, "trunk.conv0", "trunk.bn0", trunk_in_ch, 64, 3, 1)?;
    if p >= 2 {
        for _ in 0..p - 1 {
            t = b.pool(t)?;
        }
    }
    let trunk_mid = t;
    set_tap(b, "trunk_mid", trunk_mid);
    let mut t = b.conv_block(trunk_mid, "trunk.conv1", "trunk.bn1", 64, 128, 3, 1)?;
    for i in 0..spec.extra_convs {
        let cp = format!("trunk.conv{}", 2 + i);
        let bp = format!("trunk.bn{}", 2 + i);
        t = b.conv_block(t, &cp, &bp, 128, 128, 3, 1)?;
    }
    if p >= 1 {
        t = b.pool(t)?;
    }
    set_tap(b, "bottleneck", t);

    // decoder: 2 + p doubling stages back to PAN resolution
    let stages = 2 + p;
    let mut ch_in = 128;
    for k in 0..stages {
        let ch_out = (16usize << (stages - 1 - k)).min(128);
        t = b.decoder_stage(t, k, ch_in, ch_out, spec.upsampler)?;
        ch_in = ch_out;
    }
    set_tap(b, "decoder_out", t);

    // linear class head
    let head = b.conv(t, "head.conv", 16, spec.classes, 1, 1, 0)?;

    let pre_softmax = if spec.variant == Variant::FusenetSkip {
        set_tap(b, "decoder_scores", head);
        let pan_encoded = pan_encoded.expect("skip variant fuses late");
        let mid_factor = 4 << (if p >= 2 { p - 1 } else { 0 });
        let low = b.tconv(pan_encoded, "skip.low", 32, spec.classes, 4)?;
        let mid = b.tconv(trunk_mid, "skip.mid", 64, spec.classes, mid_factor)?;
        set_tap(b, "skip_low_scores", low);
        set_tap(b, "skip_mid_scores", mid);
        b.g.add(OpKind::Add, vec![head, low, mid])?
    } else {
        head
    };
    set_tap(b, "scores_pre", pre_softmax);

    b.g.add(OpKind::Softmax, vec![pre_softmax])
}

fn build(spec: &ArchSpec, with_loss: bool) -> Result<NetBuilder> {
    spec.validate()?;
    let mut b = NetBuilder::new();
    let pan = b.g.input("pan")?;
    let ms = b.g.input("ms")?;

    // MS-side feature shared by all instances (independent of the scores)
    let ms_feature = if spec.variant.fuses_late() {
        // linear projection so both streams meet with equal channel counts
        b.conv(ms, "proj_ms.conv", MS_CHANNELS, 32, 1, 1, 0)?
    } else if spec.variant == Variant::FusenetHigh {
        let t = b.tconv_block(ms, "enc_ms.up0", "enc_ms.bn0", MS_CHANNELS, 16, 2)?;
        let t = b.tconv_block(t, "enc_ms.up1", "enc_ms.bn1", 16, 8, 2)?;
        b.conv(t, "enc_ms.proj", 8, MS_CHANNELS, 1, 1, 0)?
    } else {
        b.g.add(OpKind::Upsample { factor: 4, mode: UpsampleMode::Bilinear }, vec![ms])?
    };

    let first_in_ch = spec.first_conv_in();
    let mut score_nodes = Vec::new();

    if spec.reuse_r == 0 {
        let first_in = if spec.variant.fuses_late() {
            pan
        } else {
            b.g.add(OpKind::Concat, vec![pan, ms_feature])?
        };
        let scores = instance(&mut b, spec, first_in, first_in_ch, ms_feature, true)?;
        score_nodes.push(scores);
    } else {
        let y0 = b.g.input("y0")?;
        let mut prev = y0;
        for r in 0..spec.reuse_r {
            let first_in = if spec.variant.fuses_late() {
                b.g.add(OpKind::Concat, vec![pan, prev])?
            } else {
                b.g.add(OpKind::Concat, vec![pan, ms_feature, prev])?
            };
            let scores = instance(&mut b, spec, first_in, first_in_ch, ms_feature, r == 0)?;
            score_nodes.push(scores);
            prev = scores;
        }
    }

    for &s in &score_nodes {
        b.g.push_instance_scores(s);
    }
    let last = *score_nodes.last().expect("at least one instance");
    b.g.set_output("scores", last);

    if with_loss {
        let target = b.g.input("target")?;
        let mask = b.g.input("mask")?;
        let mut losses = Vec::new();
        for &s in &score_nodes {
            losses.push(b.g.add(OpKind::MaskedCrossEntropy, vec![s, target, mask])?);
        }
        let loss = if losses.len() == 1 {
            losses[0]
        } else {
            b.g.add(OpKind::ScalarMean, losses)?
        };
        b.g.set_output("loss", loss);
    }
    Ok(b)
}

/// Graph without loss nodes, inputs `pan`, `ms` (and `y0` when recurrent).
pub fn build_infer_graph(spec: &ArchSpec) -> Result<Graph> {
    Ok(build(spec, false)?.g)
}

/// Graph ending in the masked cross-entropy loss (mean over instances when
/// recurrent); adds inputs `target` and `mask`.
pub fn build_train_graph(spec: &ArchSpec) -> Result<Graph> {
    Ok(build(spec, true)?.g)
}

/// Name, dims, and kind of every parameter the architecture declares.
pub fn param_layout(spec: &ArchSpec) -> Result<Vec<(String, Dims, ParamKind)>> {
    let b = build(spec, false)?;
    Ok(b.specs.into_iter().map(|(n, (d, k))| (n, d, k)).collect())
}

/// Glorot-uniform weights (bound sqrt(6 / ((k_in + k_out) * G^2))), zero
/// biases, identity batch-norm. Draws iterate parameters in name order, so
/// a given generator state always produces the same initialization.
pub fn init_params<T: Scalar>(spec: &ArchSpec, rng: &mut Rng) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for (name, dims, kind) in param_layout(spec)? {
        let value = match kind {
            ParamKind::ConvWeight => {
                let fan_in = dims.c * dims.h * dims.w;
                let fan_out = dims.n * dims.h * dims.w;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                rng.uniform_tensor(dims, -bound, bound)
            }
            ParamKind::Bias | ParamKind::BnShift | ParamKind::BnRunningMean => {
                crate::tensor::Tensor::zeros(dims)
            }
            ParamKind::BnScale | ParamKind::BnRunningVar => {
                crate::tensor::Tensor::full(dims, T::one())
            }
            ParamKind::Stat => crate::tensor::Tensor::zeros(dims),
        };
        store.insert(name, kind, value);
    }
    Ok(store)
}

/// Copies a trained feed-forward network's values into a recurrent net's
/// store. Every parameter transfers verbatim except the first convolution,
/// whose extra score-map input slices are zeroed so the copied network
/// initially ignores the score channels and reproduces the donor exactly.
pub fn adopt_pretrained<T: Scalar>(
    target: &mut ParamStore<T>,
    base: &ParamStore<T>,
    spec: &ArchSpec,
) -> Result<()> {
    if spec.reuse_r == 0 {
        return Err(Error::InvalidConfig(
            "weight adoption only applies to a recurrent architecture".into(),
        ));
    }
    let first_w = spec.first_conv_weight();
    for (name, entry) in base.iter() {
        if name.starts_with("norm.") || name.starts_with("meta.") {
            continue;
        }
        let t = target.get_mut(name)?;
        if name == first_w {
            let bd = entry.value.dims();
            let td = t.value.dims();
            if td.n != bd.n || td.h != bd.h || td.w != bd.w || td.c <= bd.c {
                return Err(Error::ParamMismatch {
                    name: name.clone(),
                    msg: format!("cannot widen {bd} into {td}"),
                });
            }
            let mut widened = crate::tensor::Tensor::zeros(td);
            for n in 0..bd.n {
                for c in 0..bd.c {
                    widened.plane_mut(n, c).copy_from_slice(entry.value.plane(n, c));
                }
            }
            t.value = widened;
        } else {
            if t.value.dims() != entry.value.dims() {
                return Err(Error::ParamMismatch {
                    name: name.clone(),
                    msg: format!(
                        "donor dims {} vs target {}",
                        entry.value.dims(),
                        t.value.dims()
                    ),
                });
            }
            t.value = entry.value.clone();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Exec;
    use crate::tensor::Tensor;

    fn dims_at(spec: &ArchSpec, tap: &str) -> Dims {
        let g = build_infer_graph(spec).unwrap();
        let params = init_params::<f32>(spec, &mut Rng::new(1)).unwrap();
        let all = g.infer_dims(&params, &spec.patch_input_dims(1)).unwrap();
        all[g.named_id(tap).unwrap_or_else(|| panic!("missing tap {tap}"))]
    }

    #[test]
    fn late_fusion_ledger_m16() {
        let spec = ArchSpec::default();
        assert_eq!(dims_at(&spec, "pan_encoded"), Dims::new(1, 32, 16, 16));
        assert_eq!(dims_at(&spec, "ms_projected"), Dims::new(1, 32, 16, 16));
        assert_eq!(dims_at(&spec, "fused"), Dims::new(1, 64, 16, 16));
        assert_eq!(dims_at(&spec, "trunk_mid"), Dims::new(1, 64, 8, 8));
        assert_eq!(dims_at(&spec, "bottleneck"), Dims::new(1, 128, 4, 4));
        assert_eq!(dims_at(&spec, "decoder_out"), Dims::new(1, 16, 64, 64));
        assert_eq!(dims_at(&spec, "scores_pre"), Dims::new(1, 6, 64, 64));
    }

    #[test]
    fn early_fusion_ledger_m16() {
        let spec = ArchSpec { variant: Variant::FusenetHigh, ..ArchSpec::default() };
        assert_eq!(dims_at(&spec, "fused"), Dims::new(1, 5, 64, 64));
        assert_eq!(dims_at(&spec, "bottleneck"), Dims::new(1, 128, 4, 4));
        assert_eq!(dims_at(&spec, "scores_pre"), Dims::new(1, 6, 64, 64));
        let bil = ArchSpec { variant: Variant::NetBilinear, ..ArchSpec::default() };
        assert_eq!(dims_at(&bil, "fused"), Dims::new(1, 5, 64, 64));
    }

    #[test]
    fn skip_branches_ledger_m16() {
        let spec = ArchSpec { variant: Variant::FusenetSkip, ..ArchSpec::default() };
        assert_eq!(dims_at(&spec, "decoder_scores"), Dims::new(1, 6, 64, 64));
        assert_eq!(dims_at(&spec, "skip_low_scores"), Dims::new(1, 6, 64, 64));
        assert_eq!(dims_at(&spec, "skip_mid_scores"), Dims::new(1, 6, 64, 64));
        assert_eq!(dims_at(&spec, "scores_pre"), Dims::new(1, 6, 64, 64));
    }

    #[test]
    fn extra_convs_change_no_dims() {
        let spec = ArchSpec { extra_convs: 2, ..ArchSpec::default() };
        assert_eq!(dims_at(&spec, "bottleneck"), Dims::new(1, 128, 4, 4));
        assert_eq!(dims_at(&spec, "scores_pre"), Dims::new(1, 6, 64, 64));
        let base = param_layout(&ArchSpec::default()).unwrap().len();
        let extra = param_layout(&spec).unwrap().len();
        assert_eq!(extra, base + 12, "two conv blocks add 2 x (w,b + 4 bn tensors)");
    }

    #[test]
    fn scores_are_probabilities() {
        for variant in [
            Variant::FusenetLow,
            Variant::FusenetHigh,
            Variant::FusenetSkip,
            Variant::NetBilinear,
        ] {
            let spec = ArchSpec { variant, patch_m: 8, classes: 3, bottleneck_hw: 2, ..ArchSpec::default() };
            let g = build_infer_graph(&spec).unwrap();
            let params = init_params::<f32>(&spec, &mut Rng::new(7)).unwrap();
            let mut rng = Rng::new(8);
            let inputs: BTreeMap<String, Tensor<f32>> = [
                ("pan".to_string(), rng.uniform_tensor(Dims::new(1, 1, 32, 32), 0.0, 1.0)),
                ("ms".to_string(), rng.uniform_tensor(Dims::new(1, 4, 8, 8), 0.0, 1.0)),
            ]
            .into();
            let mut exec = Exec::new(&g);
            g.forward_infer(&mut exec, &params, inputs).unwrap();
            let scores = exec.value(g.output_id("scores").unwrap()).unwrap();
            let d = scores.dims();
            assert_eq!(d, Dims::new(1, 3, 32, 32));
            for h in 0..d.h {
                for w in 0..d.w {
                    let sum: f32 = (0..d.c).map(|c| scores.at(0, c, h, w)).sum();
                    assert!((sum - 1.0).abs() < 1e-5, "{variant:?} pixel sum {sum}");
                }
            }
        }
    }

    #[test]
    fn recurrent_param_count_is_r_independent_with_wider_first_conv() {
        let plain = ArchSpec::default();
        let g = build_infer_graph(&plain).unwrap();
        let store = init_params::<f32>(&plain, &mut Rng::new(1)).unwrap();
        g.validate(&store, &plain.patch_input_dims(2)).unwrap();
        let plain_count = store.learnable_count();

        let mut counts = Vec::new();
        for r in 1..=4 {
            let spec = plain.with_reuse(r);
            let store = init_params::<f32>(&spec, &mut Rng::new(1)).unwrap();
            let g = build_infer_graph(&spec).unwrap();
            g.validate(&store, &spec.patch_input_dims(2)).unwrap();
            counts.push(store.learnable_count());
        }
        let expected = plain_count + 13 * 13 * 6 * 16;
        for (i, &c) in counts.iter().enumerate() {
            assert_eq!(c, expected, "r = {}", i + 1);
        }
    }

    #[test]
    fn glorot_bounds_and_spread() {
        let spec = ArchSpec::default();
        let store = init_params::<f64>(&spec, &mut Rng::new(3)).unwrap();
        // 1x1 projection from 4 to 32 channels
        let w = &store.get("proj_ms.conv.w").unwrap().value;
        let bound = (6.0f64 / (4.0 + 32.0)).sqrt();
        assert!((bound - 0.4082).abs() < 1e-4);
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.data().iter().any(|v| v.abs() > bound * 0.5), "draws span the range");

        // first conv: 13x13, 1 -> 16 channels; sample stddev ~ bound/sqrt(3)
        let w = &store.get("enc_pan.conv0.w").unwrap().value;
        let n = w.numel() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let b13 = (6.0f64 / ((1.0 + 16.0) * 169.0)).sqrt();
        let expected_sd = b13 / 3.0f64.sqrt();
        assert!(
            (var.sqrt() - expected_sd).abs() / expected_sd < 0.05,
            "sd {} vs {}",
            var.sqrt(),
            expected_sd
        );
        // biases and batch-norm defaults
        assert!(store.get("head.conv.b").unwrap().value.data().iter().all(|&v| v == 0.0));
        assert!(store.get("trunk.bn0.gamma").unwrap().value.data().iter().all(|&v| v == 1.0));
        assert!(store.get("trunk.bn0.rvar").unwrap().value.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn same_params_run_on_other_extents() {
        let spec = ArchSpec::default();
        let g = build_infer_graph(&spec).unwrap();
        let params = init_params::<f32>(&spec, &mut Rng::new(5)).unwrap();
        // divisor is 16; 80 works without rebuilding anything
        let dims = spec.input_dims_for(1, 80, 96);
        let all = g.infer_dims(&params, &dims).unwrap();
        let scores = all[g.output_id("scores").unwrap()];
        assert_eq!(scores, Dims::new(1, 6, 80, 96));
    }

    #[test]
    fn adoption_reproduces_donor_when_scores_are_zero() {
        let base_spec = ArchSpec { patch_m: 8, classes: 3, bottleneck_hw: 2, ..ArchSpec::default() };
        let reuse_spec = base_spec.with_reuse(2);
        let mut rng = Rng::new(11);
        let base = init_params::<f32>(&base_spec, &mut rng).unwrap();
        let mut target = init_params::<f32>(&reuse_spec, &mut rng).unwrap();
        adopt_pretrained(&mut target, &base, &reuse_spec).unwrap();

        let mut rng = Rng::new(12);
        let pan: Tensor<f32> = rng.uniform_tensor(Dims::new(1, 1, 32, 32), 0.0, 1.0);
        let ms: Tensor<f32> = rng.uniform_tensor(Dims::new(1, 4, 8, 8), 0.0, 1.0);

        let bg = build_infer_graph(&base_spec).unwrap();
        let mut be = Exec::new(&bg);
        bg.forward_infer(
            &mut be,
            &base,
            [("pan".to_string(), pan.clone()), ("ms".to_string(), ms.clone())].into(),
        )
        .unwrap();
        let base_scores = be.value(bg.output_id("scores").unwrap()).unwrap().clone();

        let rg = build_infer_graph(&reuse_spec).unwrap();
        let mut re = Exec::new(&rg);
        rg.forward_infer(
            &mut re,
            &target,
            [
                ("pan".to_string(), pan),
                ("ms".to_string(), ms),
                ("y0".to_string(), Tensor::zeros(Dims::new(1, 3, 32, 32))),
            ]
            .into(),
        )
        .unwrap();
        // with zeroed extra slices, instance 1 sees exactly the donor input
        let first = rg.instance_scores()[0];
        let got = re.value(first).unwrap();
        let worst = got
            .data()
            .iter()
            .zip(base_scores.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-6, "instance 1 diverges from donor by {worst}");
    }

    #[test]
    fn bad_specs_are_rejected() {
        let bad = ArchSpec { bottleneck_hw: 5, ..ArchSpec::default() };
        assert!(bad.validate().is_err());
        let bad = ArchSpec { bottleneck_hw: 0, ..ArchSpec::default() };
        assert!(bad.validate().is_err());
        let bad = ArchSpec { classes: 1, ..ArchSpec::default() };
        assert!(bad.validate().is_err());
        let bad = ArchSpec { patch_m: 10, ..ArchSpec::default() };
        assert!(bad.validate().is_err());
        // 24/6 = 4 is a power of two, so this one is fine
        let ok = ArchSpec { patch_m: 24, bottleneck_hw: 6, ..ArchSpec::default() };
        ok.validate().unwrap();
    }
}
