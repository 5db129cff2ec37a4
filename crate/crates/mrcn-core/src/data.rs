//! Scene ingestion, normalization, patch sampling, and the synthetic
//! scene generator.
//!
//! A scene is a co-registered triple: single-band PAN raster, 4-band MS
//! raster at a quarter of the PAN resolution, and a sparse label raster at
//! PAN resolution (255 = unlabeled). Patch windows are anchored on PAN
//! positions divisible by 4 so each MS window is an exact quarter-scale
//! crop; a patch is eligible when its full window fits inside the tile and
//! its center pixel carries a label.

use std::path::Path;

use crate::error::Error;
use crate::metrics::UNLABELED;
use crate::raster::{read_raster, write_raster, Raster, U8Raster};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};
use crate::Result;

pub const MS_BANDS: usize = 4;
/// PAN plus the four MS bands
pub const BANDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Validation,
    Test,
}

impl Role {
    pub fn parse(s: &str) -> Result<Role> {
        Ok(match s {
            "train" => Role::Train,
            "validation" | "val" => Role::Validation,
            "test" => Role::Test,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown scene role '{s}' (expected train | validation | test)"
                )))
            }
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Validation => "validation",
            Role::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub role: Role,
    /// (1, 1, H, W) in [0,1] after normalization
    pub pan: Tensor<f32>,
    /// (1, 4, H/4, W/4)
    pub ms: Tensor<f32>,
    /// (1, H, W) with 255 = unlabeled
    pub labels: U8Raster,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let p = self.pan.dims();
        let m = self.ms.dims();
        if p.n != 1 || p.c != 1 || m.n != 1 || m.c != MS_BANDS {
            return Err(Error::Data(format!(
                "scene '{}': pan {} and ms {} have unexpected channel layout",
                self.name, p, m
            )));
        }
        if p.h != 4 * m.h || p.w != 4 * m.w {
            return Err(Error::Data(format!(
                "scene '{}': pan {}x{} is not 4x the ms extent {}x{}",
                self.name, p.h, p.w, m.h, m.w
            )));
        }
        if self.labels.c != 1 || self.labels.h != p.h || self.labels.w != p.w {
            return Err(Error::Data(format!(
                "scene '{}': labels {:?} do not match pan {}x{}",
                self.name,
                self.labels.shape(),
                p.h,
                p.w
            )));
        }
        Ok(())
    }

    pub fn pan_hw(&self) -> (usize, usize) {
        (self.pan.dims().h, self.pan.dims().w)
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.data.iter().filter(|&&v| v != UNLABELED).count()
    }
}

/// Per-band minima and maxima (PAN first, then the four MS bands), taken
/// over training tiles only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub min: [f32; BANDS],
    pub max: [f32; BANDS],
}

pub fn compute_norm_stats(scenes: &[Scene]) -> Result<NormStats> {
    let mut min = [f32::INFINITY; BANDS];
    let mut max = [f32::NEG_INFINITY; BANDS];
    let mut any = false;
    for scene in scenes.iter().filter(|s| s.role == Role::Train) {
        any = true;
        for &v in scene.pan.data() {
            min[0] = min[0].min(v);
            max[0] = max[0].max(v);
        }
        for b in 0..MS_BANDS {
            for &v in scene.ms.plane(0, b) {
                min[1 + b] = min[1 + b].min(v);
                max[1 + b] = max[1 + b].max(v);
            }
        }
    }
    if !any {
        return Err(Error::Data("no training scenes to derive normalization from".into()));
    }
    for b in 0..BANDS {
        if !(max[b] > min[b]) {
            return Err(Error::Data(format!(
                "band {b} is degenerate: min {} == max {}",
                min[b], max[b]
            )));
        }
    }
    Ok(NormStats { min, max })
}

impl NormStats {
    fn scale_into(data: &mut [f32], min: f32, max: f32) {
        let inv = 1.0 / (max - min);
        for v in data {
            *v = ((*v - min) * inv).clamp(0.0, 1.0);
        }
    }

    pub fn apply(&self, scene: &mut Scene) {
        self.apply_tensors(&mut scene.pan, &mut scene.ms);
    }

    pub fn apply_tensors(&self, pan: &mut Tensor<f32>, ms: &mut Tensor<f32>) {
        Self::scale_into(pan.data_mut(), self.min[0], self.max[0]);
        let d = ms.dims();
        for b in 0..MS_BANDS {
            let (lo, hi) = (self.min[1 + b], self.max[1 + b]);
            let start = b * d.h * d.w;
            Self::scale_into(&mut ms.data_mut()[start..start + d.h * d.w], lo, hi);
        }
    }

    /// Flattens to the two checkpoint stat records.
    pub fn to_tensors(&self) -> (Tensor<f32>, Tensor<f32>) {
        let d = Dims::new(1, BANDS, 1, 1);
        (
            Tensor::from_vec(d, self.min.to_vec()).expect("fixed size"),
            Tensor::from_vec(d, self.max.to_vec()).expect("fixed size"),
        )
    }

    pub fn from_tensors(min: &Tensor<f32>, max: &Tensor<f32>) -> Result<NormStats> {
        if min.numel() != BANDS || max.numel() != BANDS {
            return Err(Error::Data("normalization records must hold 5 values".into()));
        }
        let mut s = NormStats { min: [0.0; BANDS], max: [0.0; BANDS] };
        s.min.copy_from_slice(min.data());
        s.max.copy_from_slice(max.data());
        Ok(s)
    }
}

/// One-hot target and mask for a label window. Unlabeled pixels get a zero
/// target vector and zero mask.
pub fn one_hot_window<T: Scalar>(
    labels: &U8Raster,
    h0: usize,
    w0: usize,
    size: usize,
    classes: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut target = Tensor::zeros(Dims::new(1, classes, size, size));
    let mut mask = Tensor::zeros(Dims::new(1, 1, size, size));
    for h in 0..size {
        for w in 0..size {
            let v = labels.at(0, h0 + h, w0 + w);
            if v == UNLABELED {
                continue;
            }
            if v as usize >= classes {
                return Err(Error::Data(format!(
                    "label {v} at ({},{}) exceeds class count {classes}",
                    h0 + h,
                    w0 + w
                )));
            }
            target.set(0, v as usize, h, w, T::one());
            mask.set(0, 0, h, w, T::one());
        }
    }
    Ok((target, mask))
}

/// PAN-window origin of one training patch (top-left corner, always a
/// multiple of 4 so the MS window is origin/4).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOrigin {
    pub scene: usize,
    pub h0: usize,
    pub w0: usize,
}

/// All 4-aligned window origins whose center pixel is labeled and whose
/// window fits the tile. `m` is the MS patch side (PAN window is 4m).
pub fn eligible_origins(scene: &Scene, m: usize) -> Vec<(usize, usize)> {
    let (h, w) = scene.pan_hw();
    let side = 4 * m;
    let mut out = Vec::new();
    if h < side || w < side {
        return out;
    }
    let center = 2 * m;
    for h0 in (0..=h - side).step_by(4) {
        for w0 in (0..=w - side).step_by(4) {
            if scene.labels.at(0, h0 + center, w0 + center) != UNLABELED {
                out.push((h0, w0));
            }
        }
    }
    out
}

/// Draws `count` patch origins uniformly (with replacement) over the
/// union of eligible origins of all scenes with the given role.
pub fn draw_patch_set(
    scenes: &[Scene],
    role: Role,
    m: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<PatchOrigin>> {
    let mut pool = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        if scene.role != role {
            continue;
        }
        for (h0, w0) in eligible_origins(scene, m) {
            pool.push(PatchOrigin { scene: i, h0, w0 });
        }
    }
    if pool.is_empty() {
        return Err(Error::Data(format!(
            "no eligible {} patches: every candidate window is unlabeled at its center or out of bounds",
            role.as_str()
        )));
    }
    Ok((0..count).map(|_| pool[rng.index(pool.len())]).collect())
}

#[derive(Debug, Clone)]
pub struct PatchBatch<T: Scalar> {
    pub pan: Tensor<T>,
    pub ms: Tensor<T>,
    pub target: Tensor<T>,
    pub mask: Tensor<T>,
}

fn copy_window<T: Scalar>(
    dst: &mut Tensor<T>,
    n: usize,
    src: &Tensor<f32>,
    h0: usize,
    w0: usize,
) {
    let side_h = dst.dims().h;
    let side_w = dst.dims().w;
    let src_w = src.dims().w;
    for c in 0..dst.dims().c {
        let sp = src.plane(0, c);
        let dp = dst.plane_mut(n, c);
        for h in 0..side_h {
            let so = (h0 + h) * src_w + w0;
            for w in 0..side_w {
                dp[h * side_w + w] = T::from_f32(sp[so + w]);
            }
        }
    }
}

/// Gathers the PAN/MS windows and one-hot targets for a list of origins.
pub fn assemble_batch<T: Scalar>(
    scenes: &[Scene],
    origins: &[PatchOrigin],
    m: usize,
    classes: usize,
) -> Result<PatchBatch<T>> {
    let n = origins.len();
    let side = 4 * m;
    let mut pan = Tensor::zeros(Dims::new(n, 1, side, side));
    let mut ms = Tensor::zeros(Dims::new(n, MS_BANDS, m, m));
    let mut target = Tensor::zeros(Dims::new(n, classes, side, side));
    let mut mask = Tensor::zeros(Dims::new(n, 1, side, side));

    for (i, o) in origins.iter().enumerate() {
        let scene = &scenes[o.scene];
        copy_window(&mut pan, i, &scene.pan, o.h0, o.w0);
        copy_window(&mut ms, i, &scene.ms, o.h0 / 4, o.w0 / 4);
        let (t, k) = one_hot_window::<T>(&scene.labels, o.h0, o.w0, side, classes)?;
        for c in 0..classes {
            target.plane_mut(i, c).copy_from_slice(t.plane(0, c));
        }
        mask.plane_mut(i, 0).copy_from_slice(k.plane(0, 0));
    }
    Ok(PatchBatch { pan, ms, target, mask })
}

// --- scene files ---

pub fn scene_paths(dir: &Path, stem: &str) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{stem}_pan.mras")),
        dir.join(format!("{stem}_ms.mras")),
        dir.join(format!("{stem}_lbl.mras")),
    )
}

pub fn load_scene(dir: &Path, stem: &str, role: Role) -> Result<Scene> {
    let (pan_path, ms_path, lbl_path) = scene_paths(dir, stem);
    let pan = read_raster(&pan_path)?.into_f32(&pan_path)?;
    let ms = read_raster(&ms_path)?.into_f32(&ms_path)?;
    let labels = read_raster(&lbl_path)?.into_u8(&lbl_path)?;
    let scene = Scene { name: stem.to_string(), role, pan, ms, labels };
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    let (pan_path, ms_path, lbl_path) = scene_paths(dir, &scene.name);
    write_raster(&pan_path, &Raster::from_tensor(scene.pan.clone())?)?;
    write_raster(&ms_path, &Raster::from_tensor(scene.ms.clone())?)?;
    write_raster(&lbl_path, &Raster::U8(scene.labels.clone()))?;
    Ok(())
}

// --- synthetic scenes ---

/// Fixed per-class spectral signatures (4 MS bands each); classes beyond
/// the table are rejected at validation.
const SIGNATURES: [[f32; 4]; 8] = [
    [0.80, 0.20, 0.20, 0.60],
    [0.20, 0.80, 0.30, 0.40],
    [0.30, 0.30, 0.80, 0.20],
    [0.70, 0.70, 0.25, 0.80],
    [0.25, 0.55, 0.60, 0.70],
    [0.60, 0.35, 0.70, 0.35],
    [0.45, 0.65, 0.45, 0.25],
    [0.75, 0.45, 0.55, 0.50],
];

/// Positive mixing weights folding the four signature bands into PAN.
const PAN_MIX: [f32; 4] = [0.35, 0.30, 0.20, 0.15];

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    /// square PAN tile side, divisible by 4
    pub pan_size: usize,
    pub classes: usize,
    /// cell seeds of the label partition; classes are cycled over them
    pub sites: usize,
    /// fraction of pixels that keep their label (rest become 255)
    pub label_fraction: f64,
    pub ms_noise: f64,
    pub pan_noise: f64,
    /// 0 keeps class signatures distinct; 1 makes paired classes (2k,2k+1)
    /// spectrally identical, distinguishable only by PAN texture
    pub signature_overlap: f64,
    /// fraction of pixels rendered with the paired class's appearance while
    /// keeping their own label (isolated-pixel ambiguity)
    pub speckle: f64,
}

impl Default for SyntheticConfig {
    fn default() -> SyntheticConfig {
        SyntheticConfig {
            pan_size: 256,
            classes: 6,
            sites: 48,
            label_fraction: 0.05,
            ms_noise: 0.02,
            pan_noise: 0.02,
            signature_overlap: 0.35,
            speckle: 0.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.pan_size == 0 || self.pan_size % 4 != 0 {
            return fail(format!("pan_size = {} must be a positive multiple of 4", self.pan_size));
        }
        if self.classes < 2 || self.classes > SIGNATURES.len() {
            return fail(format!(
                "classes = {} outside the supported 2..={}",
                self.classes,
                SIGNATURES.len()
            ));
        }
        if self.sites < self.classes {
            return fail(format!(
                "sites = {} cannot cover {} classes",
                self.sites, self.classes
            ));
        }
        if !(0.0..=1.0).contains(&self.label_fraction)
            || !(0.0..=1.0).contains(&self.signature_overlap)
            || !(0.0..=1.0).contains(&self.speckle)
        {
            return fail("fractions must lie in [0,1]".into());
        }
        Ok(())
    }

    fn signature(&self, class: usize) -> [f32; 4] {
        let own = SIGNATURES[class];
        let partner = self.partner(class);
        if partner == class {
            return own;
        }
        let ov = self.signature_overlap as f32 * 0.5;
        let other = SIGNATURES[partner];
        let mut out = [0.0; 4];
        for b in 0..4 {
            // symmetric pull toward the pair midpoint
            out[b] = own[b] * (1.0 - ov) + other[b] * ov;
        }
        out
    }

    /// classes pair up (0,1), (2,3), ... for overlap and speckle
    fn partner(&self, class: usize) -> usize {
        let p = class ^ 1;
        if p < self.classes {
            p
        } else {
            class
        }
    }
}

/// Renders one scene: Voronoi label partition, spectrally overlapping
/// class signatures with per-class PAN texture frequency, Gaussian band
/// noise, 4x average pooling down to MS resolution, and label
/// sparsification. Fully determined by the generator state.
pub fn synth_scene(
    cfg: &SyntheticConfig,
    name: &str,
    role: Role,
    rng: &mut Rng,
) -> Result<Scene> {
    cfg.validate()?;
    let side = cfg.pan_size;
    let ms_side = side / 4;

    // cell seeds; classes cycle so every class occurs
    let mut sites = Vec::with_capacity(cfg.sites);
    for k in 0..cfg.sites {
        let y = rng.unit() * side as f64;
        let x = rng.unit() * side as f64;
        sites.push((y, x, k % cfg.classes));
    }
    let class_at = |h: usize, w: usize| -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, &(sy, sx, _)) in sites.iter().enumerate() {
            let dy = sy - h as f64;
            let dx = sx - w as f64;
            let d = dy * dy + dx * dx;
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        sites[best].2
    };

    let mut pan = Tensor::zeros(Dims::new(1, 1, side, side));
    let mut ms_full = Tensor::zeros(Dims::new(1, MS_BANDS, side, side));
    let mut labels = vec![UNLABELED; side * side];

    for h in 0..side {
        for w in 0..side {
            let label = class_at(h, w);
            // appearance may come from the paired class (speckle ambiguity)
            let speckled = rng.unit() < cfg.speckle;
            let render = if speckled { cfg.partner(label) } else { label };
            let sig = cfg.signature(render);

            for b in 0..MS_BANDS {
                let noise = rng.normal() * cfg.ms_noise;
                let v = (sig[b] as f64 + noise).clamp(0.0, 1.0);
                ms_full.set(0, b, h, w, v as f32);
            }

            let base: f32 = (0..4).map(|b| PAN_MIX[b] * sig[b]).sum();
            let freq = 0.35 * (render as f64 + 1.0);
            let texture = 0.08
                * (freq * h as f64 + 0.7).sin()
                * (freq * w as f64 + 1.3).cos();
            let noise = rng.normal() * cfg.pan_noise;
            let v = (base as f64 + texture + noise).clamp(0.0, 1.0);
            pan.set(0, 0, h, w, v as f32);

            if rng.unit() < cfg.label_fraction {
                labels[h * side + w] = label as u8;
            }
        }
    }

    // 4x4 block means down to MS resolution
    let mut ms = Tensor::zeros(Dims::new(1, MS_BANDS, ms_side, ms_side));
    for b in 0..MS_BANDS {
        for h in 0..ms_side {
            for w in 0..ms_side {
                let mut acc = 0.0f64;
                for dh in 0..4 {
                    for dw in 0..4 {
                        acc += ms_full.at(0, b, 4 * h + dh, 4 * w + dw) as f64;
                    }
                }
                ms.set(0, b, h, w, (acc / 16.0) as f32);
            }
        }
    }

    let scene = Scene {
        name: name.to_string(),
        role,
        pan,
        ms,
        labels: U8Raster::new(1, side, side, labels)?,
    };
    scene.validate()?;
    Ok(scene)
}

/// Default experiment layout: two training tiles, one validation, two test.
pub const DEFAULT_TILE_ROLES: [(&str, Role); 5] = [
    ("tile0", Role::Train),
    ("tile1", Role::Train),
    ("tile2", Role::Validation),
    ("tile3", Role::Test),
    ("tile4", Role::Test),
];

/// Generates the default five-tile scene set; tile k uses stream k of the
/// given seed.
pub fn synth_scene_set(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<Scene>> {
    DEFAULT_TILE_ROLES
        .iter()
        .enumerate()
        .map(|(i, &(name, role))| {
            let mut rng = Rng::new(seed).fork(100 + i as u64);
            synth_scene(cfg, name, role, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scene(side: usize, labeled: &[(usize, usize, u8)]) -> Scene {
        let mut labels = vec![UNLABELED; side * side];
        for &(h, w, v) in labeled {
            labels[h * side + w] = v;
        }
        let mut pan = Tensor::zeros(Dims::new(1, 1, side, side));
        for (i, v) in pan.data_mut().iter_mut().enumerate() {
            *v = i as f32;
        }
        let mut ms = Tensor::zeros(Dims::new(1, MS_BANDS, side / 4, side / 4));
        for (i, v) in ms.data_mut().iter_mut().enumerate() {
            *v = 1000.0 + i as f32;
        }
        Scene {
            name: "tiny".into(),
            role: Role::Train,
            pan,
            ms,
            labels: U8Raster::new(1, side, side, labels).unwrap(),
        }
    }

    #[test]
    fn one_hot_basics() {
        let mut labels = vec![UNLABELED; 4];
        labels[0] = 2;
        let r = U8Raster::new(1, 2, 2, labels).unwrap();
        let (t, m) = one_hot_window::<f32>(&r, 0, 0, 2, 6).unwrap();
        assert_eq!(t.at(0, 2, 0, 0), 1.0);
        assert_eq!((0..6).map(|c| t.at(0, c, 0, 0)).sum::<f32>(), 1.0);
        assert_eq!(m.at(0, 0, 0, 0), 1.0);
        assert_eq!(m.at(0, 0, 1, 1), 0.0);
        assert_eq!((0..6).map(|c| t.at(0, c, 1, 1)).sum::<f32>(), 0.0);

        let bad = U8Raster::new(1, 1, 1, vec![6]).unwrap();
        assert!(one_hot_window::<f32>(&bad, 0, 0, 1, 6).is_err());
    }

    #[test]
    fn argmax_of_one_hot_recovers_labels() {
        let mut rng = Rng::new(3);
        let mut labels = vec![UNLABELED; 64];
        for v in labels.iter_mut() {
            if rng.unit() < 0.5 {
                *v = rng.index(6) as u8;
            }
        }
        let r = U8Raster::new(1, 8, 8, labels.clone()).unwrap();
        let (t, m) = one_hot_window::<f32>(&r, 0, 0, 8, 6).unwrap();
        for h in 0..8 {
            for w in 0..8 {
                if m.at(0, 0, h, w) == 1.0 {
                    let arg = (0..6).max_by(|&a, &b| {
                        t.at(0, a, h, w).partial_cmp(&t.at(0, b, h, w)).unwrap()
                    });
                    assert_eq!(arg.unwrap() as u8, labels[h * 8 + w]);
                }
            }
        }
    }

    #[test]
    fn single_labeled_pixel_forces_the_center() {
        // eligible centers are 4-aligned; put the only label at one
        let side = 48;
        let m = 4; // PAN window 16
        let scene = tiny_scene(side, &[(24, 20, 1)]);
        let origins = eligible_origins(&scene, m);
        assert_eq!(origins, vec![(24 - 8, 20 - 8)]);
        let mut rng = Rng::new(1);
        let set = draw_patch_set(&[scene], Role::Train, m, 10, &mut rng).unwrap();
        assert!(set.iter().all(|o| (o.h0, o.w0) == (16, 12)));
    }

    #[test]
    fn sampled_centers_are_always_labeled() {
        let cfg = SyntheticConfig { pan_size: 128, ..SyntheticConfig::default() };
        let scene = synth_scene(&cfg, "t", Role::Train, &mut Rng::new(5)).unwrap();
        let m = 8;
        let scenes = [scene];
        let mut rng = Rng::new(6);
        let set = draw_patch_set(&scenes, Role::Train, m, 10_000, &mut rng).unwrap();
        for o in &set {
            assert_eq!(o.h0 % 4, 0);
            assert_eq!(o.w0 % 4, 0);
            let c = scenes[o.scene].labels.at(0, o.h0 + 2 * m, o.w0 + 2 * m);
            assert_ne!(c, UNLABELED);
        }
    }

    #[test]
    fn batch_windows_are_exact_coregistered_crops() {
        let side = 64;
        let m = 8;
        let scene = tiny_scene(side, &[(32, 32, 3)]);
        let scenes = [scene];
        let origins = [PatchOrigin { scene: 0, h0: 16, w0: 16 }];
        let batch = assemble_batch::<f32>(&scenes, &origins, m, 6).unwrap();
        assert_eq!(batch.pan.dims(), Dims::new(1, 1, 32, 32));
        assert_eq!(batch.ms.dims(), Dims::new(1, 4, 8, 8));
        // pan value at source (20, 25) shows up at window (4, 9)
        assert_eq!(batch.pan.at(0, 0, 4, 9), (20 * side + 25) as f32);
        // ms window starts at (4, 4): source (4+2, 4+3) lands at (2, 3)
        let ms_w = side / 4;
        assert_eq!(batch.ms.at(0, 1, 2, 3), 1000.0 + ((ms_w * ms_w) + 6 * ms_w + 7) as f32);
        // the labeled pixel sits at window center (16,16) with class 3
        assert_eq!(batch.mask.at(0, 0, 16, 16), 1.0);
        assert_eq!(batch.target.at(0, 3, 16, 16), 1.0);
    }

    #[test]
    fn normalization_maps_to_unit_range() {
        let mut scene = tiny_scene(16, &[(8, 8, 0)]);
        // band ranges: pan 0..255, ms 1000..1000+63
        let stats = compute_norm_stats(&[scene.clone()]).unwrap();
        assert_eq!(stats.min[0], 0.0);
        assert_eq!(stats.max[0], 255.0);
        stats.apply(&mut scene);
        assert!(scene.pan.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(scene.ms.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // midpoint check: (v - min) / (max - min)
        let v = scene.pan.at(0, 0, 6, 4);
        assert!((v - 100.0 / 255.0).abs() < 1e-6);

        // clamping below the training minimum
        let mut other = tiny_scene(16, &[(8, 8, 0)]);
        other.pan.data_mut()[0] = -50.0;
        stats.apply(&mut other);
        assert_eq!(other.pan.data()[0], 0.0);

        // round trip through stat tensors
        let (lo, hi) = stats.to_tensors();
        let back = NormStats::from_tensors(&lo, &hi).unwrap();
        assert_eq!(back, stats);
    }

    #[test]
    fn degenerate_band_is_rejected() {
        let mut scene = tiny_scene(16, &[(8, 8, 0)]);
        scene.pan.data_mut().fill(7.0);
        assert!(compute_norm_stats(&[scene]).is_err());
    }

    #[test]
    fn synthetic_scene_is_deterministic_and_sparse() {
        let cfg = SyntheticConfig { pan_size: 160, label_fraction: 0.05, ..Default::default() };
        let a = synth_scene(&cfg, "a", Role::Train, &mut Rng::new(9)).unwrap();
        let b = synth_scene(&cfg, "a", Role::Train, &mut Rng::new(9)).unwrap();
        assert_eq!(a.pan, b.pan);
        assert_eq!(a.ms, b.ms);
        assert_eq!(a.labels, b.labels);

        let frac = a.labeled_count() as f64 / (160.0 * 160.0);
        assert!((frac - 0.05).abs() < 0.005, "labeled fraction {frac}");
        assert_eq!(a.pan.dims().h, 4 * a.ms.dims().h);

        // labels only within class range
        assert!(a
            .labels
            .data
            .iter()
            .all(|&v| v == UNLABELED || (v as usize) < cfg.classes));
        // every class appears somewhere in the partition
        let mut seen = vec![false; cfg.classes];
        for &v in a.labels.data.iter().filter(|&&v| v != UNLABELED) {
            seen[v as usize] = true;
        }
        assert!(seen.iter().all(|&s| s), "all classes labeled somewhere");
    }

    #[test]
    fn scene_set_roles_and_distinct_content() {
        let cfg = SyntheticConfig { pan_size: 64, ..Default::default() };
        let scenes = synth_scene_set(&cfg, 4).unwrap();
        assert_eq!(scenes.len(), 5);
        let roles: Vec<Role> = scenes.iter().map(|s| s.role).collect();
        assert_eq!(
            roles,
            vec![Role::Train, Role::Train, Role::Validation, Role::Test, Role::Test]
        );
        assert_ne!(scenes[0].pan, scenes[1].pan, "tiles differ");
    }

    #[test]
    fn scene_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig { pan_size: 32, ..Default::default() };
        let scene = synth_scene(&cfg, "tile9", Role::Test, &mut Rng::new(2)).unwrap();
        save_scene(dir.path(), &scene).unwrap();
        let back = load_scene(dir.path(), "tile9", Role::Test).unwrap();
        assert_eq!(back.pan, scene.pan);
        assert_eq!(back.ms, scene.ms);
        assert_eq!(back.labels, scene.labels);
    }
}
