//! Full-tile prediction: the trained graph runs as an image filter over
//! overlapping windows, each window keeps only its interior (everything at
//! least the receptive-field radius away from the window border), and the
//! interiors are stitched into a full-tile score raster.
//!
//! Window origins stay aligned to the architecture's total downsampling
//! factor so every window sees the same pooling phase as a whole-tile
//! pass; interior values are then bit-identical to the single pass.
//! Pixels closer to the tile edge than the receptive-field radius are
//! taken from the window that touches that edge, i.e. they are predicted
//! with the zero padding a whole-tile pass would also see.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::arch::{build_infer_graph, ArchSpec};
use crate::checkpoint::{extract_prefixed, Checkpoint};
use crate::error::Error;
use crate::graph::{Exec, Graph, NodeId, OpKind, ParamStore};
use crate::ops::UpsampleMode;
use crate::raster::U8Raster;
use crate::tensor::{Dims, Tensor};
use crate::Result;

pub const DEFAULT_WINDOW: usize = 256;

/// One-sided receptive-field radius (PAN pixels) and grid spacing tracked
/// per node while composing layers.
#[derive(Debug, Clone, Copy)]
struct Reach {
    jump: f64,
    radius: f64,
}

/// Composes kernel/stride geometry along the graph and returns the
/// one-sided receptive-field radius of the output in PAN pixels. Kernel
/// extents come from the weight tensors in `params`. `y0_radius` seeds the
/// score-map input for networks whose initial map comes from another
/// network.
fn graph_radius<T: crate::scalar::Scalar>(
    graph: &Graph,
    params: &ParamStore<T>,
    y0_radius: f64,
) -> Result<f64> {
    let merged = |ids: &[NodeId], reach: &[Reach]| -> Reach {
        let mut jump = 0.0f64;
        let mut radius = 0.0f64;
        for &i in ids {
            jump = jump.max(reach[i].jump);
            radius = radius.max(reach[i].radius);
        }
        Reach { jump, radius }
    };
    let mut reach: Vec<Reach> = Vec::with_capacity(graph.nodes().len());
    let mut out = Reach { jump: 1.0, radius: 0.0 };
    for node in graph.nodes() {
        let r = match &node.kind {
            OpKind::Input { name } => match name.as_str() {
                // one MS pixel spans a 4x4 PAN block
                "ms" => Reach { jump: 4.0, radius: 1.5 },
                "y0" => Reach { jump: 1.0, radius: y0_radius },
                _ => Reach { jump: 1.0, radius: 0.0 },
            },
            OpKind::Conv { w, stride, .. } => {
                let kernel = params.value(w)?.dims().h;
                let mut r = merged(&node.inputs, &reach);
                r.radius += (kernel as f64 - 1.0) / 2.0 * r.jump;
                r.jump *= *stride as f64;
                r
            }
            OpKind::MaxPool2 => {
                let mut r = merged(&node.inputs, &reach);
                r.radius += 0.5 * r.jump;
                r.jump *= 2.0;
                r
            }
            OpKind::TConv { w, stride, .. } => {
                let kernel = params.value(w)?.dims().h;
                let mut r = merged(&node.inputs, &reach);
                r.jump /= *stride as f64;
                r.radius += (kernel as f64 - 1.0) / 2.0 * r.jump;
                r
            }
            OpKind::Upsample { factor, mode } => {
                let mut r = merged(&node.inputs, &reach);
                let support = match mode {
                    // interpolation reads the two nearest source pixels
                    UpsampleMode::Bilinear => 1.5,
                    UpsampleMode::Nearest => 0.5,
                };
                r.radius += support * r.jump;
                r.jump /= *factor as f64;
                r
            }
            _ => merged(&node.inputs, &reach),
        };
        reach.push(r);
        out = r;
    }
    Ok(out.radius)
}

/// Receptive-field radius of an architecture in PAN pixels (score-map
/// input, if any, treated as context-free).
pub fn receptive_field(spec: &ArchSpec) -> Result<usize> {
    let graph = build_infer_graph(spec)?;
    let mut dims_only = ParamStore::<f32>::new();
    for (name, dims, kind) in crate::arch::param_layout(spec)? {
        dims_only.insert(name, kind, Tensor::zeros(dims));
    }
    Ok(graph_radius(&graph, &dims_only, 0.0)?.ceil() as usize)
}

fn round_up4(v: usize) -> usize {
    v.div_ceil(4) * 4
}

/// Class of the highest score per pixel (ties take the lowest class).
pub fn argmax_map(scores: &Tensor<f32>) -> U8Raster {
    let d = scores.dims();
    let mut out = vec![0u8; d.h * d.w];
    for h in 0..d.h {
        for w in 0..d.w {
            let mut best = f32::NEG_INFINITY;
            let mut arg = 0usize;
            for c in 0..d.c {
                let v = scores.at(0, c, h, w);
                if v > best {
                    best = v;
                    arg = c;
                }
            }
            out[h * d.w + w] = arg as u8;
        }
    }
    U8Raster::new(1, d.h, d.w, out).expect("sized to fit")
}

fn window_of(src: &Tensor<f32>, h0: usize, w0: usize, hs: usize, ws: usize) -> Tensor<f32> {
    let d = src.dims();
    let mut out = Tensor::zeros(Dims::new(1, d.c, hs, ws));
    for c in 0..d.c {
        let sp = src.plane(0, c);
        let dp = out.plane_mut(0, c);
        for h in 0..hs {
            let so = (h0 + h) * d.w + w0;
            dp[h * ws..(h + 1) * ws].copy_from_slice(&sp[so..so + ws]);
        }
    }
    out
}

/// Start offsets along one axis: multiples of `stride` plus a final window
/// flush with the far edge. `extent` and `window` are both multiples of
/// the alignment, so every origin stays phase-aligned.
fn axis_origins(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        if o + window >= extent {
            out.push(extent - window);
            break;
        }
        out.push(o);
        o += stride;
    }
    out
}

/// A trained network ready to run over whole scenes. Holds the inference
/// graph, its parameters, and (for recurrent models initialized from a
/// feed-forward run) the frozen network that supplies the initial score
/// map per window.
pub struct Predictor {
    spec: ArchSpec,
    graph: Graph,
    params: ParamStore<f32>,
    provider: Option<(ArchSpec, Graph, ParamStore<f32>)>,
    radius: usize,
}

impl Predictor {
    pub fn new(spec: ArchSpec, params: ParamStore<f32>) -> Result<Predictor> {
        spec.validate()?;
        let graph = build_infer_graph(&spec)?;
        let radius = graph_radius(&graph, &params, 0.0)?.ceil() as usize;
        Ok(Predictor { spec, graph, params, provider: None, radius })
    }

    /// Builds from a loaded checkpoint, reviving the embedded score
    /// provider if the checkpoint carries one.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Predictor> {
        let spec = ck.arch.clone();
        spec.validate()?;
        let graph = build_infer_graph(&spec)?;
        let has_provider = ck.params.names().any(|n| n.starts_with("y0net."));
        let provider = if spec.reuse_r > 0 && has_provider {
            let mut base = spec.clone();
            base.reuse_r = 0;
            let params = extract_prefixed(&ck.params, "y0net.", &base)?;
            let pg = build_infer_graph(&base)?;
            Some((base, pg, params))
        } else {
            None
        };
        let y0_radius = match &provider {
            Some((_, pg, pp)) => graph_radius(pg, pp, 0.0)?,
            None => 0.0,
        };
        let radius = graph_radius(&graph, &ck.params, y0_radius)?.ceil() as usize;
        Ok(Predictor { spec, graph, params: ck.params.clone(), provider, radius })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    /// One-sided receptive-field radius in PAN pixels, including the score
    /// provider's context when present.
    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Total downsampling factor; window origins and tile extents must be
    /// multiples of it.
    pub fn divisor(&self) -> usize {
        self.spec.divisor()
    }

    pub fn instance_count(&self) -> usize {
        self.graph.instance_scores().len()
    }

    fn window_scores(&self, pan: &Tensor<f32>, ms: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let mut inputs = BTreeMap::new();
        inputs.insert("pan".to_string(), pan.clone());
        inputs.insert("ms".to_string(), ms.clone());
        if self.spec.reuse_r > 0 {
            let d = pan.dims();
            let y0 = match &self.provider {
                Some((_, pg, pp)) => {
                    let mut exec = Exec::new(pg);
                    let mut pi = BTreeMap::new();
                    pi.insert("pan".to_string(), pan.clone());
                    pi.insert("ms".to_string(), ms.clone());
                    pg.forward_infer(&mut exec, pp, pi)?;
                    exec.value(pg.output_id("scores")?)?.clone()
                }
                None => Tensor::zeros(Dims::new(d.n, self.spec.classes, d.h, d.w)),
            };
            inputs.insert("y0".to_string(), y0);
        }
        let mut exec = Exec::new(&self.graph);
        self.graph.forward_infer(&mut exec, &self.params, inputs)?;
        self.graph
            .instance_scores()
            .iter()
            .map(|&id| Ok(exec.value(id)?.clone()))
            .collect()
    }

    /// Runs the network over a full scene and returns the stitched score
    /// raster of every instance, final prediction last. `pan` is
    /// (1,1,H,W), `ms` its quarter-scale counterpart, both already
    /// normalized. `overlap` of None uses the receptive-field radius
    /// rounded up to a multiple of 4.
    pub fn predict(
        &self,
        pan: &Tensor<f32>,
        ms: &Tensor<f32>,
        window: usize,
        overlap: Option<usize>,
    ) -> Result<Vec<Tensor<f32>>> {
        let d = pan.dims();
        let (h, w) = (d.h, d.w);
        let div = self.divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Data(format!(
                "tile extent {h}x{w} must be a multiple of the network's downsampling factor {div}"
            )));
        }
        if window == 0 || window % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "window {window} must be a positive multiple of {div}"
            )));
        }
        let overlap = match overlap {
            Some(o) => {
                if o < self.radius {
                    return Err(Error::InvalidConfig(format!(
                        "overlap {o} is below the receptive-field radius {}",
                        self.radius
                    )));
                }
                o
            }
            None => round_up4(self.radius),
        };

        let win_h = window.min(h);
        let win_w = window.min(w);
        let stride_for = |win: usize, extent: usize| -> Result<usize> {
            if win >= extent {
                return Ok(1); // single window; stride unused
            }
            if win <= 2 * overlap {
                return Err(Error::InvalidConfig(format!(
                    "window {win} leaves no interior at overlap {overlap}; \
                     raise the window size above the receptive field"
                )));
            }
            let s = (win - 2 * overlap) / div * div;
            if s == 0 {
                return Err(Error::InvalidConfig(format!(
                    "window {win} leaves no aligned stride at overlap {overlap}"
                )));
            }
            Ok(s)
        };
        let origins_h = axis_origins(h, win_h, stride_for(win_h, h)?);
        let origins_w = axis_origins(w, win_w, stride_for(win_w, w)?);

        let mut jobs = Vec::new();
        for &oh in &origins_h {
            for &ow in &origins_w {
                jobs.push((oh, ow));
            }
        }
        let results: Vec<Result<Vec<Tensor<f32>>>> = jobs
            .par_iter()
            .map(|&(oh, ow)| {
                let pan_win = window_of(pan, oh, ow, win_h, win_w);
                let ms_win = window_of(ms, oh / 4, ow / 4, win_h / 4, win_w / 4);
                self.window_scores(&pan_win, &ms_win)
            })
            .collect();

        let instances = self.instance_count();
        let mut stitched =
            vec![Tensor::zeros(Dims::new(1, self.spec.classes, h, w)); instances];
        for ((oh, ow), result) in jobs.into_iter().zip(results) {
            let scores = result?;
            // interior rows/cols, widened to the tile edge where the
            // window touches it
            let h_lo = if oh == 0 { 0 } else { overlap };
            let h_hi = if oh + win_h == h { win_h } else { win_h - overlap };
            let w_lo = if ow == 0 { 0 } else { overlap };
            let w_hi = if ow + win_w == w { win_w } else { win_w - overlap };
            for (dst, src) in stitched.iter_mut().zip(&scores) {
                for c in 0..self.spec.classes {
                    let sp = src.plane(0, c);
                    let dp = dst.plane_mut(0, c);
                    for hh in h_lo..h_hi {
                        let drow = (oh + hh) * w + ow + w_lo;
                        let srow = hh * win_w + w_lo;
                        dp[drow..drow + (w_hi - w_lo)]
                            .copy_from_slice(&sp[srow..srow + (w_hi - w_lo)]);
                    }
                }
            }
        }
        Ok(stitched)
    }

    /// Final-instance scores only.
    pub fn predict_final(
        &self,
        pan: &Tensor<f32>,
        ms: &Tensor<f32>,
        window: usize,
        overlap: Option<usize>,
    ) -> Result<Tensor<f32>> {
        Ok(self.predict(pan, ms, window, overlap)?.pop().expect("at least one instance"))
    }

    /// Stitched scores of every unrolled instance; requires a recurrent
    /// architecture.
    pub fn predict_per_instance(
        &self,
        pan: &Tensor<f32>,
        ms: &Tensor<f32>,
        window: usize,
        overlap: Option<usize>,
    ) -> Result<Vec<Tensor<f32>>> {
        if self.spec.reuse_r == 0 {
            return Err(Error::InvalidConfig(
                "per-instance scores need a recurrent architecture".into(),
            ));
        }
        self.predict(pan, ms, window, overlap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{init_params, Upsampler, Variant};
    use crate::graph::Graph;
    use crate::rng::Rng;

    /// chain of ops fed by the pan input; (kernel, stride) pairs become
    /// conv nodes, kernel 0 becomes a pooling node
    fn manual_reach(layers: &[(usize, usize)]) -> f64 {
        let mut g = Graph::new();
        let mut prev = g.add(OpKind::Input { name: "pan".into() }, vec![]).unwrap();
        let mut params = ParamStore::<f32>::new();
        for (i, &(kernel, stride)) in layers.iter().enumerate() {
            let op = if kernel == 0 {
                OpKind::MaxPool2
            } else {
                let w = format!("c{i}.w");
                let b = format!("c{i}.b");
                params.insert(
                    w.clone(),
                    crate::graph::ParamKind::ConvWeight,
                    Tensor::zeros(Dims::new(1, 1, kernel, kernel)),
                );
                params.insert(
                    b.clone(),
                    crate::graph::ParamKind::Bias,
                    Tensor::zeros(Dims::new(1, 1, 1, 1)),
                );
                OpKind::Conv { w, b, stride, pad: kernel / 2 }
            };
            prev = g.add(op, vec![prev]).unwrap();
        }
        g.set_output("scores", prev);
        graph_radius(&g, &params, 0.0).unwrap()
    }

    #[test]
    fn radius_of_a_single_wide_conv() {
        assert_eq!(manual_reach(&[(13, 1)]), 6.0);
    }

    #[test]
    fn radius_composes_through_pooling() {
        let r = manual_reach(&[(13, 1), (0, 0), (7, 1)]);
        assert_eq!(r.ceil() as usize, 13);
    }

    fn small_spec() -> ArchSpec {
        ArchSpec {
            variant: Variant::FusenetLow,
            patch_m: 4,
            classes: 3,
            bottleneck_hw: 4,
            extra_convs: 0,
            upsampler: Upsampler::Transposed,
            reuse_r: 0,
        }
    }

    fn random_scene(h: usize, w: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = Rng::new(seed);
        let pan = rng.uniform_tensor(Dims::new(1, 1, h, w), 0.0, 1.0);
        let ms = rng.uniform_tensor(Dims::new(1, 4, h / 4, w / 4), 0.0, 1.0);
        (pan, ms)
    }

    #[test]
    fn architecture_radius_is_positive_and_grows_with_unrolling() {
        let spec = small_spec();
        let r1 = receptive_field(&spec).unwrap();
        assert!(r1 > 6, "radius {r1}");
        let mut rec = spec;
        rec.reuse_r = 2;
        let r2 = receptive_field(&rec).unwrap();
        assert!(r2 > r1, "unrolled radius {r2} vs {r1}");
    }

    #[test]
    fn stitched_windows_match_the_whole_tile_pass_exactly() {
        let spec = small_spec();
        let params = init_params::<f32>(&spec, &mut Rng::new(3).fork(1)).unwrap();
        let p = Predictor::new(spec, params).unwrap();
        let (pan, ms) = random_scene(96, 128, 5);

        let whole = p.predict_final(&pan, &ms, 256, None).unwrap();
        assert_eq!(whole.dims(), Dims::new(1, 3, 96, 128));
        for window in [64, 80, 96] {
            let tiled = p.predict_final(&pan, &ms, window, None).unwrap();
            assert_eq!(tiled, whole, "window {window} diverged");
        }
        // a larger overlap changes the tiling but not the values
        let bigger = round_up4(p.radius()) + 4;
        let tiled = p.predict_final(&pan, &ms, 96, Some(bigger)).unwrap();
        assert_eq!(tiled, whole);
    }

    #[test]
    fn interior_predictions_shift_with_the_input() {
        let spec = small_spec();
        let params = init_params::<f32>(&spec, &mut Rng::new(9).fork(1)).unwrap();
        let p = Predictor::new(spec, params).unwrap();
        let (pan, ms) = random_scene(96, 96, 6);

        let a_pan = window_of(&pan, 0, 0, 80, 80);
        let a_ms = window_of(&ms, 0, 0, 20, 20);
        let b_pan = window_of(&pan, 4, 4, 80, 80);
        let b_ms = window_of(&ms, 1, 1, 20, 20);
        let a = p.predict_final(&a_pan, &a_ms, 256, None).unwrap();
        let b = p.predict_final(&b_pan, &b_ms, 256, None).unwrap();

        let r = p.radius();
        for c in 0..3 {
            for h in r..80 - r - 4 {
                for w in r..80 - r - 4 {
                    let va = a.at(0, c, h + 4, w + 4);
                    let vb = b.at(0, c, h, w);
                    assert_eq!(va, vb, "at ({c},{h},{w})");
                }
            }
        }
    }

    #[test]
    fn recurrent_prediction_exposes_every_instance() {
        let mut spec = small_spec();
        spec.reuse_r = 2;
        let params = init_params::<f32>(&spec, &mut Rng::new(4).fork(1)).unwrap();
        let p = Predictor::new(spec, params).unwrap();
        let (pan, ms) = random_scene(32, 32, 7);

        let all = p.predict_per_instance(&pan, &ms, 256, None).unwrap();
        assert_eq!(all.len(), 2);
        let fin = p.predict_final(&pan, &ms, 256, None).unwrap();
        assert_eq!(*all.last().unwrap(), fin);
        for inst in &all {
            for h in 0..32 {
                for w in 0..32 {
                    let s: f32 = (0..3).map(|c| inst.at(0, c, h, w)).sum();
                    assert!((s - 1.0).abs() < 1e-5, "scores sum to {s}");
                }
            }
        }
    }

    #[test]
    fn per_instance_requires_recurrence_and_windows_validate() {
        let spec = small_spec();
        let params = init_params::<f32>(&spec, &mut Rng::new(4).fork(1)).unwrap();
        let p = Predictor::new(spec, params).unwrap();
        let (pan, ms) = random_scene(32, 32, 8);
        assert!(p.predict_per_instance(&pan, &ms, 256, None).is_err());
        // window must be divisor-aligned and large enough to keep interior
        assert!(p.predict_final(&pan, &ms, 30, None).is_err());
        let r = p.radius();
        assert!(p.predict_final(&pan, &ms, 4 * (r / 4), None).is_err());
        // overlap below the radius is rejected
        assert!(p.predict_final(&pan, &ms, 256, Some(r - 1)).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_class_on_ties() {
        let mut s = Tensor::zeros(Dims::new(1, 3, 1, 2));
        s.set(0, 1, 0, 0, 0.7);
        s.set(0, 2, 0, 1, 0.5);
        s.set(0, 0, 0, 1, 0.5);
        let m = argmax_map(&s);
        assert_eq!(m.at(0, 0, 0), 1);
        assert_eq!(m.at(0, 0, 1), 0);
    }
}
