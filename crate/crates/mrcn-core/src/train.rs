//! Mini-batch SGD with momentum, weight decay on convolution weights, a
//! stepwise learning-rate schedule, and early stopping on validation
//! accuracy.
//!
//! Recurrent models can start from a trained feed-forward checkpoint: the
//! frozen donor supplies the initial score map each batch (`map_init`) and
//! optionally seeds the weights (`map_weights_init`). The donor network is
//! embedded in the saved checkpoint under the `y0net.` prefix so prediction
//! needs no side files.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::arch::{
    adopt_pretrained, build_infer_graph, build_train_graph, init_params, ArchSpec,
};
use crate::checkpoint::{embed_prefixed, load_checkpoint};
use crate::data::{
    assemble_batch, compute_norm_stats, draw_patch_set, NormStats, PatchBatch, PatchOrigin,
    Role, Scene,
};
use crate::error::Error;
use crate::graph::{Exec, Graph, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Dims, Tensor};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// zero initial score map, fresh weights
    Plain,
    /// initial score map from a frozen pretrained network, fresh weights
    MapInit,
    /// score map and weights both taken from the pretrained network
    MapWeightsInit,
}

impl InitMode {
    pub fn parse(s: &str) -> Result<InitMode> {
        Ok(match s {
            "plain" => InitMode::Plain,
            "map_init" => InitMode::MapInit,
            "map_weights_init" => InitMode::MapWeightsInit,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown init mode '{s}' (expected plain | map_init | map_weights_init)"
                )))
            }
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Plain => "plain",
            InitMode::MapInit => "map_init",
            InitMode::MapWeightsInit => "map_weights_init",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub lr_step_epochs: Vec<usize>,
    pub lr_factor: f64,
    /// None picks the architecture default: on for feed-forward nets, off
    /// for recurrent ones
    pub early_stopping: Option<bool>,
    pub seed: u64,
    /// training patches drawn once up front, then shuffled every epoch
    pub train_patches: usize,
    pub val_patches: usize,
    pub init_mode: InitMode,
    pub pretrained: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 240,
            weight_decay: 0.001,
            lr_step_epochs: vec![60, 180],
            lr_factor: 0.1,
            early_stopping: None,
            seed: 42,
            train_patches: 512,
            val_patches: 128,
            init_mode: InitMode::Plain,
            pretrained: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum = {} must lie in [0,1)", self.momentum));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be at least 1".into());
        }
        if self.weight_decay < 0.0 {
            return fail(format!("weight_decay = {} must be non-negative", self.weight_decay));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return fail(format!("lr_factor = {} must lie in (0,1)", self.lr_factor));
        }
        if self.train_patches == 0 || self.val_patches == 0 {
            return fail("train_patches and val_patches must be at least 1".into());
        }
        if self.init_mode != InitMode::Plain && self.pretrained.is_none() {
            return fail(format!(
                "init_mode {} needs a pretrained checkpoint path",
                self.init_mode.as_str()
            ));
        }
        Ok(())
    }

    pub fn early_stopping_for(&self, spec: &ArchSpec) -> bool {
        self.early_stopping.unwrap_or(spec.reuse_r == 0)
    }
}

/// Learning rate in effect for a 0-based epoch: the base rate times
/// lr_factor for every step boundary already reached.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let steps = cfg.lr_step_epochs.iter().filter(|&&s| epoch >= s).count();
    cfg.learning_rate * cfg.lr_factor.powi(steps as i32)
}

/// One momentum step over all learnable parameters; convolution weights
/// get the decay gradient 2λw added. Gradients are zeroed afterwards.
pub fn sgd_momentum_step(
    params: &mut ParamStore<f32>,
    rate: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(rate > 0.0) {
        return Err(Error::InvalidConfig(format!("step rate {rate} must be positive")));
    }
    let rate = rate as f32;
    let alpha = momentum as f32;
    for (_, entry) in params.iter_mut() {
        if !entry.kind.learnable() {
            continue;
        }
        let decay = if entry.kind == ParamKind::ConvWeight {
            2.0 * weight_decay as f32
        } else {
            0.0
        };
        let g = entry.grad.data();
        let v = entry.momentum.data_mut();
        let mut w_new = entry.value.clone();
        let w = w_new.data_mut();
        for i in 0..w.len() {
            let g_eff = g[i] + decay * w[i];
            v[i] = alpha * v[i] - rate * g_eff;
            w[i] += v[i];
        }
        entry.value = w_new;
    }
    params.zero_grads();
    Ok(())
}

/// Pixel accuracy of argmax(scores) against a one-hot target on masked
/// pixels: (correct, labeled).
pub fn masked_accuracy(
    scores: &Tensor<f32>,
    target: &Tensor<f32>,
    mask: &Tensor<f32>,
) -> (u64, u64) {
    let d = scores.dims();
    let mut correct = 0u64;
    let mut labeled = 0u64;
    for n in 0..d.n {
        let mp = mask.plane(n, 0);
        for h in 0..d.h {
            for w in 0..d.w {
                if mp[h * d.w + w] <= 0.5 {
                    continue;
                }
                labeled += 1;
                let mut pred = 0;
                let mut truth = 0;
                let mut best_s = f32::NEG_INFINITY;
                let mut best_t = f32::NEG_INFINITY;
                for c in 0..d.c {
                    let s = scores.at(n, c, h, w);
                    if s > best_s {
                        best_s = s;
                        pred = c;
                    }
                    let t = target.at(n, c, h, w);
                    if t > best_t {
                        best_t = t;
                        truth = c;
                    }
                }
                if pred == truth {
                    correct += 1;
                }
            }
        }
    }
    (correct, labeled)
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_oa: f64,
    pub val_oa: f64,
}

pub fn history_csv(rows: &[EpochStats]) -> String {
    let mut out = String::from("epoch,lr,loss,train_oa,val_oa\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.epoch, r.lr, r.loss, r.train_oa, r.val_oa
        ));
    }
    out
}

#[derive(Debug)]
pub struct FitResult {
    /// trained weights plus embedded normalization stats (and the frozen
    /// score-provider network when one was used)
    pub params: ParamStore<f32>,
    /// 0-based epoch the returned weights come from
    pub epoch: u32,
    pub val_oa: f32,
    pub history: Vec<EpochStats>,
    pub norm: NormStats,
}

/// Frozen feed-forward network that supplies the initial score map for a
/// recurrent model's batches.
struct ScoreProvider {
    graph: Graph,
    params: ParamStore<f32>,
}

impl ScoreProvider {
    fn scores(&self, pan: &Tensor<f32>, ms: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut exec = Exec::new(&self.graph);
        let mut inputs = BTreeMap::new();
        inputs.insert("pan".to_string(), pan.clone());
        inputs.insert("ms".to_string(), ms.clone());
        self.graph.forward_infer(&mut exec, &self.params, inputs)?;
        Ok(exec.value(self.graph.output_id("scores")?)?.clone())
    }
}

fn batch_inputs(
    batch: &PatchBatch<f32>,
    spec: &ArchSpec,
    provider: &Option<ScoreProvider>,
    with_loss: bool,
) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut inputs = BTreeMap::new();
    inputs.insert("pan".to_string(), batch.pan.clone());
    inputs.insert("ms".to_string(), batch.ms.clone());
    if spec.reuse_r > 0 {
        let y0 = match provider {
            Some(p) => p.scores(&batch.pan, &batch.ms)?,
            None => {
                let d = batch.pan.dims();
                Tensor::zeros(Dims::new(d.n, spec.classes, d.h, d.w))
            }
        };
        inputs.insert("y0".to_string(), y0);
    }
    if with_loss {
        inputs.insert("target".to_string(), batch.target.clone());
        inputs.insert("mask".to_string(), batch.mask.clone());
    }
    Ok(inputs)
}

fn load_score_provider(spec: &ArchSpec, cfg: &TrainConfig) -> Result<ScoreProvider> {
    let path = cfg.pretrained.as_ref().expect("validated");
    let ck = load_checkpoint(path)?;
    let mut expected = spec.clone();
    expected.reuse_r = 0;
    if ck.arch != expected {
        return Err(Error::InvalidConfig(format!(
            "pretrained checkpoint architecture ({}) does not match the feed-forward form of the target ({})",
            ck.arch.canonical_string(),
            expected.canonical_string()
        )));
    }
    Ok(ScoreProvider { graph: build_infer_graph(&ck.arch)?, params: ck.params })
}

/// Runs the full training protocol on a scene set and returns the chosen
/// checkpoint state plus the per-epoch history. Single-threaded and fully
/// determined by the config seed.
pub fn fit(
    spec: &ArchSpec,
    mut scenes: Vec<Scene>,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<FitResult> {
    spec.validate()?;
    cfg.validate()?;
    if spec.reuse_r == 0 && cfg.init_mode != InitMode::Plain {
        return Err(Error::InvalidConfig(format!(
            "init_mode {} requires a recurrent architecture (reuse_r >= 1)",
            cfg.init_mode.as_str()
        )));
    }

    let norm = compute_norm_stats(&scenes)?;
    for scene in scenes.iter_mut() {
        norm.apply(scene);
    }

    let provider = if spec.reuse_r > 0 && cfg.init_mode != InitMode::Plain {
        Some(load_score_provider(spec, cfg)?)
    } else {
        None
    };

    let mut params: ParamStore<f32> = init_params(spec, &mut Rng::new(cfg.seed).fork(1))?;
    if cfg.init_mode == InitMode::MapWeightsInit {
        let p = provider.as_ref().expect("map mode has a provider");
        adopt_pretrained(&mut params, &p.params, spec)?;
    }

    let m = spec.patch_m;
    let train_set = draw_patch_set(
        &scenes,
        Role::Train,
        m,
        cfg.train_patches,
        &mut Rng::new(cfg.seed).fork(2),
    )?;
    let val_set = draw_patch_set(
        &scenes,
        Role::Validation,
        m,
        cfg.val_patches,
        &mut Rng::new(cfg.seed).fork(3),
    )?;

    let train_graph = build_train_graph(spec)?;
    let infer_graph = build_infer_graph(spec)?;
    let loss_id = train_graph.output_id("loss")?;
    let train_scores_id = *train_graph.instance_scores().last().expect("has instances");
    let infer_scores_id = infer_graph.output_id("scores")?;

    let early_stop = cfg.early_stopping_for(spec);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut last_val_oa = 0.0f64;

    for epoch in 0..cfg.max_epochs {
        let rate = lr_at_epoch(cfg, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::new(cfg.seed).fork(10_000 + epoch as u64).shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        let mut correct = 0u64;
        let mut labeled = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let origins: Vec<PatchOrigin> = chunk.iter().map(|&i| train_set[i]).collect();
            let batch = assemble_batch::<f32>(&scenes, &origins, m, spec.classes)?;
            let inputs = batch_inputs(&batch, spec, &provider, true)?;
            let mut exec = Exec::new(&train_graph);
            train_graph.forward_train(&mut exec, &mut params, inputs)?;
            let loss = exec.value(loss_id)?.data()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite ({loss}) in epoch {epoch}, batch {batches}"
                )));
            }
            let (c, l) = masked_accuracy(exec.value(train_scores_id)?, &batch.target, &batch.mask);
            correct += c;
            labeled += l;
            train_graph.backward(&mut exec, &mut params)?;
            sgd_momentum_step(&mut params, rate, cfg.momentum, cfg.weight_decay)?;
            loss_sum += loss;
            batches += 1;
        }

        let mut val_correct = 0u64;
        let mut val_labeled = 0u64;
        for chunk in val_set.chunks(cfg.batch_size) {
            let batch = assemble_batch::<f32>(&scenes, chunk, m, spec.classes)?;
            let inputs = batch_inputs(&batch, spec, &provider, false)?;
            let mut exec = Exec::new(&infer_graph);
            infer_graph.forward_infer(&mut exec, &params, inputs)?;
            let (c, l) = masked_accuracy(exec.value(infer_scores_id)?, &batch.target, &batch.mask);
            val_correct += c;
            val_labeled += l;
        }
        let val_oa = val_correct as f64 / val_labeled.max(1) as f64;
        last_val_oa = val_oa;

        let stats = EpochStats {
            epoch,
            lr: rate,
            loss: loss_sum / batches.max(1) as f64,
            train_oa: correct as f64 / labeled.max(1) as f64,
            val_oa,
        };
        progress(&stats);
        history.push(stats);

        if best.as_ref().map_or(true, |(_, oa, _)| val_oa > *oa) {
            best = Some((epoch, val_oa, params.clone()));
        }
    }

    let (epoch, val_oa, mut chosen) = if early_stop {
        best.expect("at least one epoch ran")
    } else {
        (cfg.max_epochs - 1, last_val_oa, params)
    };

    let (lo, hi) = norm.to_tensors();
    chosen.insert("norm.min", ParamKind::Stat, lo);
    chosen.insert("norm.max", ParamKind::Stat, hi);
    if let Some(p) = &provider {
        embed_prefixed(&mut chosen, "y0net.", &p.params);
    }

    Ok(FitResult {
        params: chosen,
        epoch: epoch as u32,
        val_oa: val_oa as f32,
        history,
        norm,
    })
}
