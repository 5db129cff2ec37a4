//! Static data-flow graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order (an edge may only point at an
//! already existing node, so cycles cannot be expressed). Parameters live
//! outside the graph in a [`ParamStore`] and are referenced by name; two
//! nodes naming the same parameter share it, and their gradient
//! contributions sum. That is the whole weight-sharing mechanism used by
//! the recurrent networks.
//!
//! Execution state (cached activations, node gradients, saved batch
//! statistics) sits in a separate [`Exec`] so one graph can serve many
//! concurrent read-only forward passes.

use std::collections::BTreeMap;

use crate::error::Error;
use crate::ops::{self, BnStats, UpsampleMode};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};
use crate::Result;

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub enum OpKind {
    Input { name: String },
    Identity,
    Conv { w: String, b: String, stride: usize, pad: usize },
    TConv { w: String, b: String, stride: usize, pad: usize },
    MaxPool2,
    Upsample { factor: usize, mode: UpsampleMode },
    Elu,
    Rectifier,
    BatchNorm { gamma: String, beta: String, rmean: String, rvar: String, eps: f64, momentum: f64 },
    Softmax,
    Concat,
    Add,
    /// inputs: [softmax scores, one-hot target, mask]; output: scalar loss
    MaskedCrossEntropy,
    /// arithmetic mean of scalar inputs
    ScalarMean,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Input { .. } => "input",
            OpKind::Identity => "identity",
            OpKind::Conv { .. } => "conv",
            OpKind::TConv { .. } => "transposed_conv",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::Upsample { .. } => "fixed_upsample",
            OpKind::Elu => "elu",
            OpKind::Rectifier => "rectifier",
            OpKind::BatchNorm { .. } => "batch_norm",
            OpKind::Softmax => "softmax",
            OpKind::Concat => "concat",
            OpKind::Add => "add",
            OpKind::MaskedCrossEntropy => "masked_cross_entropy",
            OpKind::ScalarMean => "scalar_mean",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            OpKind::Input { .. } => n == 0,
            OpKind::Concat | OpKind::Add | OpKind::ScalarMean => n >= 1,
            OpKind::MaskedCrossEntropy => n == 3,
            _ => n == 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
}

/// What a parameter tensor is, which decides whether the optimizer updates
/// it and whether weight decay applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// convolution / transposed-convolution weights: learnable, decayed
    ConvWeight,
    /// biases: learnable, never decayed
    Bias,
    /// batch-norm scale and shift: learnable, never decayed
    BnScale,
    BnShift,
    /// batch-norm running statistics: updated by forward passes only
    BnRunningMean,
    BnRunningVar,
    /// auxiliary stored tensors (normalization stats, metadata)
    Stat,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::Bias | ParamKind::BnScale | ParamKind::BnShift)
    }

    pub fn decayed(self) -> bool {
        self == ParamKind::ConvWeight
    }

    pub fn code(self) -> u8 {
        match self {
            ParamKind::ConvWeight => 0,
            ParamKind::Bias => 1,
            ParamKind::BnScale => 2,
            ParamKind::BnShift => 3,
            ParamKind::BnRunningMean => 4,
            ParamKind::BnRunningVar => 5,
            ParamKind::Stat => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<ParamKind> {
        Some(match code {
            0 => ParamKind::ConvWeight,
            1 => ParamKind::Bias,
            2 => ParamKind::BnScale,
            3 => ParamKind::BnShift,
            4 => ParamKind::BnRunningMean,
            5 => ParamKind::BnRunningVar,
            6 => ParamKind::Stat,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
    pub kind: ParamKind,
}

/// Named parameter map with deterministic (sorted) iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> ParamStore<T> {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) {
        let dims = value.dims();
        self.entries.insert(
            name.into(),
            ParamEntry { value, grad: Tensor::zeros(dims), momentum: Tensor::zeros(dims), kind },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries.get_mut(name).ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry<T>> {
        self.entries.remove(name)
    }

    /// Number of learnable scalars (weights, biases, batch-norm affine).
    pub fn learnable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind.learnable())
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor<T>) -> Result<()> {
        let entry = self.get_mut(name)?;
        if entry.grad.dims() != g.dims() {
            return Err(Error::ParamMismatch {
                name: name.into(),
                msg: format!("gradient dims {} vs parameter {}", g.dims(), entry.grad.dims()),
            });
        }
        for (a, &b) in entry.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(T::zero());
        }
    }

    /// Converts every tensor to another scalar type (values only; gradients
    /// and momentum reset to zero).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, e) in &self.entries {
            let data = e.value.data().iter().map(|v| U::from_f64(v.as_f64())).collect();
            let value = Tensor::from_vec(e.value.dims(), data).expect("same dims");
            out.insert(name.clone(), e.kind, value);
        }
        out
    }
}

/// Saved per-node context from a forward pass, needed by backward.
enum Saved<T: Scalar> {
    None,
    BnTrain(BnStats<T>),
    BnInfer,
    CeCount(usize),
}

/// Execution state for one forward/backward pass over a graph.
pub struct Exec<T: Scalar> {
    values: Vec<Option<Tensor<T>>>,
    grads: Vec<Option<Tensor<T>>>,
    saved: Vec<Saved<T>>,
}

impl<T: Scalar> Exec<T> {
    pub fn new(graph: &Graph) -> Exec<T> {
        let n = graph.nodes.len();
        Exec {
            values: (0..n).map(|_| None).collect(),
            grads: (0..n).map(|_| None).collect(),
            saved: (0..n).map(|_| Saved::None).collect(),
        }
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.values[id]
            .as_ref()
            .ok_or_else(|| Error::Numeric(format!("node {id} has no cached value; run forward first")))
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id].as_ref()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    /// Documented feature-map taps (for shape reporting and tests).
    named: BTreeMap<String, NodeId>,
    /// Scores output of each recurrent instance, in instance order.
    instance_scores: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn add(&mut self, kind: OpKind, inputs: Vec<NodeId>) -> Result<NodeId> {
        let id = self.nodes.len();
        if !kind.arity_ok(inputs.len()) {
            return Err(Error::ShapeRule {
                node: id,
                op: kind.name().into(),
                msg: format!("{} does not accept {} inputs", kind.name(), inputs.len()),
            });
        }
        for &i in &inputs {
            if i >= id {
                return Err(Error::ShapeRule {
                    node: id,
                    op: kind.name().into(),
                    msg: format!("edge to node {i} would not be topologically ordered"),
                });
            }
        }
        if let OpKind::Input { name } = &kind {
            if self.inputs.contains_key(name) {
                return Err(Error::ShapeRule {
                    node: id,
                    op: "input".into(),
                    msg: format!("duplicate input name '{name}'"),
                });
            }
            self.inputs.insert(name.clone(), id);
        }
        self.nodes.push(Node { kind, inputs });
        Ok(id)
    }

    pub fn input(&mut self, name: &str) -> Result<NodeId> {
        self.add(OpKind::Input { name: name.into() }, vec![])
    }

    pub fn set_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.into(), id);
    }

    pub fn set_named(&mut self, name: &str, id: NodeId) {
        self.named.insert(name.into(), id);
    }

    pub fn push_instance_scores(&mut self, id: NodeId) {
        self.instance_scores.push(id);
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownInput(format!("graph output '{name}'")))
    }

    pub fn input_id(&self, name: &str) -> Result<NodeId> {
        self.inputs
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownInput(name.into()))
    }

    pub fn input_names(&self) -> impl Iterator<Item = &String> {
        self.inputs.keys()
    }

    pub fn named_id(&self, name: &str) -> Option<NodeId> {
        self.named.get(name).copied()
    }

    pub fn named_taps(&self) -> &BTreeMap<String, NodeId> {
        &self.named
    }

    pub fn instance_scores(&self) -> &[NodeId] {
        &self.instance_scores
    }

    /// Every parameter name referenced by the graph, each with the node id
    /// of one referencing node.
    pub fn referenced_params(&self) -> BTreeMap<String, NodeId> {
        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            match &node.kind {
                OpKind::Conv { w, b, .. } | OpKind::TConv { w, b, .. } => {
                    out.entry(w.clone()).or_insert(id);
                    out.entry(b.clone()).or_insert(id);
                }
                OpKind::BatchNorm { gamma, beta, rmean, rvar, .. } => {
                    out.entry(gamma.clone()).or_insert(id);
                    out.entry(beta.clone()).or_insert(id);
                    out.entry(rmean.clone()).or_insert(id);
                    out.entry(rvar.clone()).or_insert(id);
                }
                _ => {}
            }
        }
        out
    }

    /// Training-mode forward pass: batch-norm nodes use batch statistics and
    /// fold them into the running estimates inside `params`.
    pub fn forward_train<T: Scalar>(
        &self,
        exec: &mut Exec<T>,
        params: &mut ParamStore<T>,
        inputs: BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        let mut updates: Vec<(String, Tensor<T>)> = Vec::new();
        self.run_forward(exec, params, inputs, Some(&mut updates))?;
        for (name, value) in updates {
            params.get_mut(&name)?.value = value;
        }
        Ok(())
    }

    /// Inference-mode forward pass; parameters are read-only and batch norm
    /// uses the stored running statistics.
    pub fn forward_infer<T: Scalar>(
        &self,
        exec: &mut Exec<T>,
        params: &ParamStore<T>,
        inputs: BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        self.run_forward(exec, params, inputs, None)
    }

    fn run_forward<T: Scalar>(
        &self,
        exec: &mut Exec<T>,
        params: &ParamStore<T>,
        mut inputs: BTreeMap<String, Tensor<T>>,
        mut bn_updates: Option<&mut Vec<(String, Tensor<T>)>>,
    ) -> Result<()> {
        assert_eq!(exec.values.len(), self.nodes.len(), "Exec built for another graph");
        for (name, _) in inputs.iter() {
            if !self.inputs.contains_key(name) {
                return Err(Error::UnknownInput(format!("'{name}' is not a graph input")));
            }
        }
        for slot in exec.grads.iter_mut() {
            *slot = None;
        }
        for (id, node) in self.nodes.iter().enumerate() {
            let shape_err = |msg: String| Error::ShapeRule {
                node: id,
                op: node.kind.name().into(),
                msg,
            };
            exec.saved[id] = Saved::None;
            let value = match &node.kind {
                OpKind::Input { name } => inputs
                    .remove(name)
                    .ok_or_else(|| Error::UnknownInput(format!("missing input tensor '{name}'")))?,
                OpKind::Identity => exec.value(node.inputs[0])?.clone(),
                OpKind::Conv { w, b, stride, pad } => {
                    let x = exec.value(node.inputs[0])?;
                    ops::conv2d(x, params.value(w)?, params.value(b)?, *stride, *pad)
                        .map_err(|e| shape_err(e.to_string()))?
                }
                OpKind::TConv { w, b, stride, pad } => {
                    let x = exec.value(node.inputs[0])?;
                    ops::tconv(x, params.value(w)?, params.value(b)?, *stride, *pad)
                        .map_err(|e| shape_err(e.to_string()))?
                }
                OpKind::MaxPool2 => ops::maxpool2(exec.value(node.inputs[0])?)
                    .map_err(|e| shape_err(e.to_string()))?,
                OpKind::Upsample { factor, mode } => {
                    ops::upsample(exec.value(node.inputs[0])?, *factor, *mode)
                        .map_err(|e| shape_err(e.to_string()))?
                }
                OpKind::Elu => ops::elu(exec.value(node.inputs[0])?),
                OpKind::Rectifier => ops::rectifier(exec.value(node.inputs[0])?),
                OpKind::BatchNorm { gamma, beta, rmean, rvar, eps, momentum } => {
                    let x = exec.value(node.inputs[0])?;
                    if let Some(updates) = bn_updates.as_deref_mut() {
                        let mut rm = params.value(rmean)?.clone();
                        let mut rv = params.value(rvar)?.clone();
                        let (y, stats) = ops::batch_norm_train(
                            x,
                            params.value(gamma)?,
                            params.value(beta)?,
                            &mut rm,
                            &mut rv,
                            *eps,
                            *momentum,
                        )
                        .map_err(|e| shape_err(e.to_string()))?;
                        updates.push((rmean.clone(), rm));
                        updates.push((rvar.clone(), rv));
                        exec.saved[id] = Saved::BnTrain(stats);
                        y
                    } else {
                        let y = ops::batch_norm_infer(
                            x,
                            params.value(gamma)?,
                            params.value(beta)?,
                            params.value(rmean)?,
                            params.value(rvar)?,
                            *eps,
                        )
                        .map_err(|e| shape_err(e.to_string()))?;
                        exec.saved[id] = Saved::BnInfer;
                        y
                    }
                }
                OpKind::Softmax => ops::softmax_channels(exec.value(node.inputs[0])?),
                OpKind::Concat => {
                    let parts: Vec<&Tensor<T>> = node
                        .inputs
                        .iter()
                        .map(|&i| exec.value(i))
                        .collect::<Result<_>>()?;
                    Tensor::concat_channels(&parts).map_err(|e| shape_err(e.to_string()))?
                }
                OpKind::Add => {
                    let parts: Vec<&Tensor<T>> = node
                        .inputs
                        .iter()
                        .map(|&i| exec.value(i))
                        .collect::<Result<_>>()?;
                    Tensor::add_n(&parts).map_err(|e| shape_err(e.to_string()))?
                }
                OpKind::MaskedCrossEntropy => {
                    let probs = exec.value(node.inputs[0])?;
                    let target = exec.value(node.inputs[1])?;
                    let mask = exec.value(node.inputs[2])?;
                    let (loss, count) = ops::masked_cross_entropy(probs, target, mask)
                        .map_err(|e| shape_err(e.to_string()))?;
                    exec.saved[id] = Saved::CeCount(count);
                    loss
                }
                OpKind::ScalarMean => {
                    let mut acc = T::zero();
                    for &i in &node.inputs {
                        let v = exec.value(i)?;
                        if v.dims() != Dims::new(1, 1, 1, 1) {
                            return Err(shape_err(format!(
                                "scalar mean input {i} has dims {}",
                                v.dims()
                            )));
                        }
                        acc += v.data()[0];
                    }
                    let k = T::from_f64(node.inputs.len() as f64);
                    Tensor::full(Dims::new(1, 1, 1, 1), acc / k)
                }
            };
            exec.values[id] = Some(value);
        }
        Ok(())
    }

    /// Reverse-mode pass from the `loss` output. Parameter gradients are
    /// ADDED to whatever `params` already holds; call
    /// [`ParamStore::zero_grads`] at step start. Node gradients are reset
    /// here. Nodes that do not feed the loss keep a zero (absent) gradient.
    pub fn backward<T: Scalar>(&self, exec: &mut Exec<T>, params: &mut ParamStore<T>) -> Result<()> {
        let loss_id = self.output_id("loss")?;
        for slot in exec.grads.iter_mut() {
            *slot = None;
        }
        exec.grads[loss_id] = Some(Tensor::full(Dims::new(1, 1, 1, 1), T::one()));

        for id in (0..self.nodes.len()).rev() {
            let node = &self.nodes[id];
            if matches!(node.kind, OpKind::Input { .. }) {
                // inputs consume nothing; their accumulated gradient stays
                // readable after the pass
                continue;
            }
            // all consumers sit at higher ids, so this gradient is final
            // and can be moved out instead of cloned
            let Some(dy) = exec.grads[id].take() else { continue };
            match &node.kind {
                OpKind::Input { .. } => {}
                OpKind::Identity => accumulate(&mut exec.grads, node.inputs[0], dy),
                OpKind::Conv { w, b, stride, pad } => {
                    let x = exec.value(node.inputs[0])?;
                    let (dx, dw, db) =
                        ops::conv2d_backward(x, params.value(w)?, &dy, *stride, *pad)?;
                    params.accumulate_grad(w, &dw)?;
                    params.accumulate_grad(b, &db)?;
                    accumulate(&mut exec.grads, node.inputs[0], dx);
                }
                OpKind::TConv { w, b, stride, pad } => {
                    let x = exec.value(node.inputs[0])?;
                    let (dx, dw, db) =
                        ops::tconv_backward(x, params.value(w)?, &dy, *stride, *pad)?;
                    params.accumulate_grad(w, &dw)?;
                    params.accumulate_grad(b, &db)?;
                    accumulate(&mut exec.grads, node.inputs[0], dx);
                }
                OpKind::MaxPool2 => {
                    let x = exec.value(node.inputs[0])?;
                    let dx = ops::maxpool2_backward(x, &dy)?;
                    accumulate(&mut exec.grads, node.inputs[0], dx);
                }
                OpKind::Upsample { factor, mode } => {
                    let x_dims = exec.value(node.inputs[0])?.dims();
                    let dx = ops::upsample_backward(x_dims, &dy, *factor, *mode)?;
                    accumulate(&mut exec.grads, node.inputs[0], dx);
                }
                OpKind::Elu => {
                    let dx = ops::elu_backward(exec.value(node.inputs[0])?, &dy);
                    accumulate(&mut exec.grads, node.inputs[0], dx);
                }
                OpKind::Rectifier => {
                    let dx = ops::rectifier_backward(exec.value(node.inputs[0])?, &dy);
                    accumulate(&mut exec.grads, node.inputs[0], dx);
                }
                OpKind::BatchNorm { gamma, beta, rmean, rvar, eps, .. } => {
                    let x = exec.value(node.inputs[0])?;
                    let (dx, dgamma, dbeta) = match &exec.saved[id] {
                        Saved::BnTrain(stats) => {
                            ops::batch_norm_backward_train(x, params.value(gamma)?, stats, &dy)?
                        }
                        Saved::BnInfer => ops::batch_norm_backward_infer(
                            x,
                            params.value(gamma)?,
                            params.value(rmean)?,
                            params.value(rvar)?,
                            *eps,
                            &dy,
                        )?,
                        _ => {
                            return Err(Error::Numeric(format!(
                                "batch norm node {id} has no saved statistics; run forward first"
                            )))
                        }
                    };
                    params.accumulate_grad(gamma, &dgamma)?;
                    params.accumulate_grad(beta, &dbeta)?;
                    accumulate(&mut exec.grads, node.inputs[0], dx);
                }
                OpKind::Softmax => {
                    let y = exec.value(id)?;
                    let dx = ops::softmax_channels_backward(y, &dy);
                    accumulate(&mut exec.grads, node.inputs[0], dx);
                }
                OpKind::Concat => {
                    let mut c0 = 0;
                    for &i in &node.inputs {
                        let c = exec.value(i)?.dims().c;
                        let part = dy.slice_channels(c0, c0 + c)?;
                        accumulate(&mut exec.grads, i, part);
                        c0 += c;
                    }
                }
                OpKind::Add => {
                    for &i in &node.inputs {
                        accumulate(&mut exec.grads, i, dy.clone());
                    }
                }
                OpKind::MaskedCrossEntropy => {
                    let Saved::CeCount(count) = exec.saved[id] else {
                        return Err(Error::Numeric(format!(
                            "loss node {id} has no saved pixel count; run forward first"
                        )));
                    };
                    let probs = exec.value(node.inputs[0])?;
                    let target = exec.value(node.inputs[1])?;
                    let mask = exec.value(node.inputs[2])?;
                    let dp = ops::masked_cross_entropy_backward(
                        probs,
                        target,
                        mask,
                        count,
                        dy.data()[0],
                    )?;
                    accumulate(&mut exec.grads, node.inputs[0], dp);
                }
                OpKind::ScalarMean => {
                    let share = dy.data()[0] / T::from_f64(node.inputs.len() as f64);
                    for &i in &node.inputs {
                        accumulate(
                            &mut exec.grads,
                            i,
                            Tensor::full(Dims::new(1, 1, 1, 1), share),
                        );
                    }
                }
            }
        }
        Ok(())
    }

    /// Static shape inference: output dims of every node for the given input
    /// dims, validating each op's shape rule against the actual parameter
    /// tensors. Fails with the offending node id.
    pub fn infer_dims<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        input_dims: &BTreeMap<String, Dims>,
    ) -> Result<Vec<Dims>> {
        let mut dims: Vec<Dims> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let shape_err = |msg: String| Error::ShapeRule {
                node: id,
                op: node.kind.name().into(),
                msg,
            };
            let d = match &node.kind {
                OpKind::Input { name } => *input_dims
                    .get(name)
                    .ok_or_else(|| Error::UnknownInput(format!("missing dims for input '{name}'")))?,
                OpKind::Identity | OpKind::Elu | OpKind::Rectifier | OpKind::Softmax => {
                    dims[node.inputs[0]]
                }
                OpKind::Conv { w, stride, pad, .. } => {
                    let x = dims[node.inputs[0]];
                    let wd = params.value(w)?.dims();
                    if x.c != wd.c {
                        return Err(shape_err(format!(
                            "conv expects {} input channels, got {}",
                            wd.c, x.c
                        )));
                    }
                    Dims::new(
                        x.n,
                        wd.n,
                        ops::conv_out_dim(x.h, wd.h, *pad, *stride)
                            .map_err(|e| shape_err(e.to_string()))?,
                        ops::conv_out_dim(x.w, wd.w, *pad, *stride)
                            .map_err(|e| shape_err(e.to_string()))?,
                    )
                }
                OpKind::TConv { w, stride, pad, .. } => {
                    let x = dims[node.inputs[0]];
                    let wd = params.value(w)?.dims();
                    if x.c != wd.c {
                        return Err(shape_err(format!(
                            "transposed conv expects {} input channels, got {}",
                            wd.c, x.c
                        )));
                    }
                    Dims::new(
                        x.n,
                        wd.n,
                        ops::tconv_out_dim(x.h, wd.h, *pad, *stride)
                            .map_err(|e| shape_err(e.to_string()))?,
                        ops::tconv_out_dim(x.w, wd.w, *pad, *stride)
                            .map_err(|e| shape_err(e.to_string()))?,
                    )
                }
                OpKind::MaxPool2 => {
                    let x = dims[node.inputs[0]];
                    if x.h % 2 != 0 || x.w % 2 != 0 || x.h == 0 || x.w == 0 {
                        return Err(shape_err(format!("pooling needs even extents, got {x}")));
                    }
                    Dims::new(x.n, x.c, x.h / 2, x.w / 2)
                }
                OpKind::Upsample { factor, .. } => {
                    let x = dims[node.inputs[0]];
                    Dims::new(x.n, x.c, x.h * factor, x.w * factor)
                }
                OpKind::BatchNorm { gamma, .. } => {
                    let x = dims[node.inputs[0]];
                    let gd = params.value(gamma)?.dims();
                    if gd.c != x.c {
                        return Err(shape_err(format!(
                            "batch norm over {} channels, scale has {}",
                            x.c, gd.c
                        )));
                    }
                    x
                }
                OpKind::Concat => {
                    let first = dims[node.inputs[0]];
                    let mut c = 0;
                    for &i in &node.inputs {
                        let d = dims[i];
                        if (d.n, d.h, d.w) != (first.n, first.h, first.w) {
                            return Err(shape_err(format!("concat of {first} with {d}")));
                        }
                        c += d.c;
                    }
                    Dims::new(first.n, c, first.h, first.w)
                }
                OpKind::Add => {
                    let first = dims[node.inputs[0]];
                    for &i in &node.inputs {
                        if dims[i] != first {
                            return Err(shape_err(format!("add of {first} with {}", dims[i])));
                        }
                    }
                    first
                }
                OpKind::MaskedCrossEntropy => {
                    let p = dims[node.inputs[0]];
                    let t = dims[node.inputs[1]];
                    let m = dims[node.inputs[2]];
                    if t != p || m != Dims::new(p.n, 1, p.h, p.w) {
                        return Err(shape_err(format!(
                            "scores {p}, target {t}, mask {m} are inconsistent"
                        )));
                    }
                    Dims::new(1, 1, 1, 1)
                }
                OpKind::ScalarMean => {
                    for &i in &node.inputs {
                        if dims[i] != Dims::new(1, 1, 1, 1) {
                            return Err(shape_err(format!("non-scalar mean input {}", dims[i])));
                        }
                    }
                    Dims::new(1, 1, 1, 1)
                }
            };
            dims.push(d);
        }
        Ok(dims)
    }

    /// Checks that every referenced parameter exists and every shape rule
    /// holds for the given input dims.
    pub fn validate<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        input_dims: &BTreeMap<String, Dims>,
    ) -> Result<()> {
        for (name, node) in self.referenced_params() {
            if !params.contains(&name) {
                return Err(Error::ShapeRule {
                    node,
                    op: self.nodes[node].kind.name().into(),
                    msg: format!("references unknown parameter '{name}'"),
                });
            }
        }
        self.infer_dims(params, input_dims)?;
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id] {
        slot @ None => *slot = Some(g),
        Some(t) => {
            debug_assert_eq!(t.dims(), g.dims());
            for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}
