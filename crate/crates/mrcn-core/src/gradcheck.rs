//! Finite-difference validation of the reverse-mode gradients.
//!
//! Central differences in f64: for a sampled coordinate v the numeric
//! estimate is (loss(v+h) - loss(v-h)) / 2h and the relative error against
//! the analytic gradient a is |a - n| / (|a| + |n|), skipped when the
//! denominator is below a small guard. Sampled coordinates are drawn
//! deterministically from the provided generator, so a failing run can be
//! replayed exactly.

use std::collections::BTreeMap;

use crate::error::Error;
use crate::graph::{Exec, Graph, OpKind, ParamKind, ParamStore};
use crate::ops::UpsampleMode;
use crate::rng::Rng;
use crate::tensor::{Dims, Tensor};
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct CheckOpts {
    /// central-difference step
    pub step: f64,
    /// largest acceptable relative error
    pub tol: f64,
    /// coordinates sampled per tensor (all of them if the tensor is smaller)
    pub samples: usize,
    /// |analytic| + |numeric| below this are treated as matching zeros
    pub guard: f64,
}

impl Default for CheckOpts {
    fn default() -> CheckOpts {
        CheckOpts { step: 1e-5, tol: 1e-4, samples: 100, guard: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub worst_rel: f64,
    /// coordinate of the worst relative error, e.g. "param head.w[17]"
    pub worst_site: String,
    pub compared: usize,
    pub skipped: usize,
}

impl CheckOutcome {
    pub fn within(&self, tol: f64) -> bool {
        self.worst_rel <= tol
    }

    pub fn ensure(&self, tol: f64) -> Result<()> {
        if self.within(tol) {
            Ok(())
        } else {
            Err(Error::GradCheck(format!(
                "{}: relative error {:.3e} at {} exceeds {:.1e}",
                self.name, self.worst_rel, self.worst_site, tol
            )))
        }
    }
}

fn sample_indices(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut all: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut all);
    all.truncate(k);
    all.sort_unstable();
    all
}

fn eval_loss(
    graph: &Graph,
    params: &mut ParamStore<f64>,
    inputs: &BTreeMap<String, Tensor<f64>>,
) -> Result<f64> {
    let mut exec = Exec::new(graph);
    graph.forward_train(&mut exec, params, inputs.clone())?;
    Ok(exec.value(graph.output_id("loss")?)?.data()[0])
}

/// Compares analytic gradients of every learnable parameter (plus the listed
/// graph inputs) against central differences of the training-mode loss.
pub fn fd_check(
    name: &str,
    graph: &Graph,
    params: &mut ParamStore<f64>,
    inputs: &BTreeMap<String, Tensor<f64>>,
    check_inputs: &[&str],
    opts: CheckOpts,
    rng: &mut Rng,
) -> Result<CheckOutcome> {
    params.zero_grads();
    let mut exec = Exec::new(graph);
    graph.forward_train(&mut exec, params, inputs.clone())?;
    graph.backward(&mut exec, params)?;

    let param_grads: BTreeMap<String, Tensor<f64>> = params
        .iter()
        .filter(|(_, e)| e.kind.learnable())
        .map(|(n, e)| (n.clone(), e.grad.clone()))
        .collect();
    let mut input_grads: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    for &iname in check_inputs {
        let id = graph.input_id(iname)?;
        let g = match exec.grad(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(inputs[iname].dims()),
        };
        input_grads.insert(iname.to_string(), g);
    }

    let mut out = CheckOutcome {
        name: name.into(),
        worst_rel: 0.0,
        worst_site: "(none)".into(),
        compared: 0,
        skipped: 0,
    };
    let record = |site: String, analytic: f64, numeric: f64, out: &mut CheckOutcome| {
        let denom = analytic.abs() + numeric.abs();
        if denom < opts.guard {
            out.skipped += 1;
            return;
        }
        let rel = (analytic - numeric).abs() / denom;
        out.compared += 1;
        if rel > out.worst_rel {
            out.worst_rel = rel;
            out.worst_site = site;
        }
    };

    for (pname, grads) in &param_grads {
        let numel = grads.numel();
        for idx in sample_indices(numel, opts.samples, rng) {
            let orig = params.get(pname)?.value.data()[idx];
            params.get_mut(pname)?.value.data_mut()[idx] = orig + opts.step;
            let plus = eval_loss(graph, params, inputs)?;
            params.get_mut(pname)?.value.data_mut()[idx] = orig - opts.step;
            let minus = eval_loss(graph, params, inputs)?;
            params.get_mut(pname)?.value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            record(format!("param {pname}[{idx}]"), grads.data()[idx], numeric, &mut out);
        }
    }

    for (iname, grads) in &input_grads {
        let numel = grads.numel();
        for idx in sample_indices(numel, opts.samples, rng) {
            let mut perturbed = inputs.clone();
            let orig = perturbed[iname].data()[idx];
            perturbed.get_mut(iname).unwrap().data_mut()[idx] = orig + opts.step;
            let plus = eval_loss(graph, params, &perturbed)?;
            perturbed.get_mut(iname).unwrap().data_mut()[idx] = orig - opts.step;
            let minus = eval_loss(graph, params, &perturbed)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            record(format!("input {iname}[{idx}]"), grads.data()[idx], numeric, &mut out);
        }
    }

    Ok(out)
}

/// One ready-to-check case: a small graph ending in a masked cross-entropy
/// loss, with parameters and inputs drawn from the given seed.
pub struct CheckCase {
    pub name: &'static str,
    pub graph: Graph,
    pub params: ParamStore<f64>,
    pub inputs: BTreeMap<String, Tensor<f64>>,
    pub check_inputs: Vec<&'static str>,
}

struct CaseBuilder {
    graph: Graph,
    params: ParamStore<f64>,
    inputs: BTreeMap<String, Tensor<f64>>,
    rng: Rng,
}

impl CaseBuilder {
    fn new(seed: u64) -> CaseBuilder {
        CaseBuilder {
            graph: Graph::new(),
            params: ParamStore::new(),
            inputs: BTreeMap::new(),
            rng: Rng::new(seed),
        }
    }

    fn input(&mut self, name: &str, dims: Dims) -> usize {
        let id = self.graph.input(name).unwrap();
        self.inputs.insert(name.into(), self.rng.uniform_tensor(dims, -1.0, 1.0));
        id
    }

    fn conv(&mut self, prefix: &str, x: usize, k_out: usize, k_in: usize, g: usize, stride: usize, pad: usize) -> usize {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        self.params.insert(
            &w,
            ParamKind::ConvWeight,
            self.rng.uniform_tensor(Dims::new(k_out, k_in, g, g), -0.5, 0.5),
        );
        self.params.insert(
            &b,
            ParamKind::Bias,
            self.rng.uniform_tensor(Dims::new(1, k_out, 1, 1), -0.1, 0.1),
        );
        self.graph.add(OpKind::Conv { w, b, stride, pad }, vec![x]).unwrap()
    }

    fn tconv(&mut self, prefix: &str, x: usize, k_in: usize, k_out: usize, g: usize, stride: usize, pad: usize) -> usize {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        self.params.insert(
            &w,
            ParamKind::ConvWeight,
            self.rng.uniform_tensor(Dims::new(k_out, k_in, g, g), -0.5, 0.5),
        );
        self.params.insert(
            &b,
            ParamKind::Bias,
            self.rng.uniform_tensor(Dims::new(1, k_out, 1, 1), -0.1, 0.1),
        );
        self.graph.add(OpKind::TConv { w, b, stride, pad }, vec![x]).unwrap()
    }

    fn batch_norm(&mut self, prefix: &str, x: usize, channels: usize) -> usize {
        let cd = Dims::new(1, channels, 1, 1);
        let gamma = format!("{prefix}.gamma");
        let beta = format!("{prefix}.beta");
        let rmean = format!("{prefix}.rmean");
        let rvar = format!("{prefix}.rvar");
        self.params.insert(&gamma, ParamKind::BnScale, self.rng.uniform_tensor(cd, 0.5, 1.5));
        self.params.insert(&beta, ParamKind::BnShift, self.rng.uniform_tensor(cd, -0.3, 0.3));
        self.params.insert(&rmean, ParamKind::BnRunningMean, Tensor::zeros(cd));
        self.params.insert(&rvar, ParamKind::BnRunningVar, Tensor::full(cd, 1.0));
        self.graph
            .add(
                OpKind::BatchNorm { gamma, beta, rmean, rvar, eps: 1e-5, momentum: 0.1 },
                vec![x],
            )
            .unwrap()
    }

    /// masked cross-entropy head over `classes` channels at dims `d`
    fn close(mut self, name: &'static str, pre: usize, d: Dims, classes: usize) -> CheckCase {
        let head = self.conv("head", pre, classes, d.c, 1, 1, 0);
        let sm = self.graph.add(OpKind::Softmax, vec![head]).unwrap();
        let t = self.graph.input("t").unwrap();
        let m = self.graph.input("m").unwrap();
        let loss = self.graph.add(OpKind::MaskedCrossEntropy, vec![sm, t, m]).unwrap();
        self.graph.set_output("loss", loss);

        let mut target = Tensor::zeros(Dims::new(d.n, classes, d.h, d.w));
        let mut mask = Tensor::zeros(Dims::new(d.n, 1, d.h, d.w));
        for n in 0..d.n {
            for h in 0..d.h {
                for w in 0..d.w {
                    let class = self.rng.index(classes);
                    target.set(n, class, h, w, 1.0);
                    let labeled = (n, h, w) == (0, 0, 0) || self.rng.unit() < 0.7;
                    if labeled {
                        mask.set(n, 0, h, w, 1.0);
                    }
                }
            }
        }
        self.inputs.insert("t".into(), target);
        self.inputs.insert("m".into(), mask);
        CheckCase {
            name,
            graph: self.graph,
            params: self.params,
            inputs: self.inputs,
            check_inputs: vec!["x"],
        }
    }
}

/// Builds the per-op check suite. Every case pushes gradients through a
/// softmax cross-entropy head so the op under test sees a realistic
/// non-uniform upstream gradient.
pub fn op_suite(seed: u64) -> Vec<CheckCase> {
    let mut cases = Vec::new();

    {
        let mut b = CaseBuilder::new(seed ^ 0x01);
        let x = b.input("x", Dims::new(2, 3, 8, 8));
        let c = b.conv("op", x, 4, 3, 3, 1, 1);
        cases.push(b.close("conv3x3_same", c, Dims::new(2, 4, 8, 8), 3));
    }
    {
        let mut b = CaseBuilder::new(seed ^ 0x02);
        let x = b.input("x", Dims::new(1, 2, 16, 16));
        let c = b.conv("op", x, 2, 2, 13, 1, 6);
        cases.push(b.close("conv13x13_same", c, Dims::new(1, 2, 16, 16), 2));
    }
    {
        let mut b = CaseBuilder::new(seed ^ 0x03);
        let x = b.input("x", Dims::new(2, 3, 9, 9));
        let c = b.conv("op", x, 4, 3, 3, 2, 0);
        cases.push(b.close("conv3x3_stride2", c, Dims::new(2, 4, 4, 4), 3));
    }
    {
        let mut b = CaseBuilder::new(seed ^ 0x04);
        let x = b.input("x", Dims::new(2, 3, 5, 5));
        let c = b.tconv("op", x, 3, 2, 4, 2, 1);
        cases.push(b.close("tconv_factor2", c, Dims::new(2, 2, 10, 10), 2));
    }
    {
        let mut b = CaseBuilder::new(seed ^ 0x05);
        let x = b.input("x", Dims::new(1, 2, 4, 4));
        let c = b.tconv("op", x, 2, 2, 8, 4, 2);
        cases.push(b.close("tconv_factor4", c, Dims::new(1, 2, 16, 16), 2));
    }
    {
        let mut b = CaseBuilder::new(seed ^ 0x06);
        let x = b.input("x", Dims::new(2, 3, 8, 8));
        let p = b.graph.add(OpKind::MaxPool2, vec![x]).unwrap();
        cases.push(b.close("maxpool2", p, Dims::new(2, 3, 4, 4), 3));
    }
    {
        let mut b = CaseBuilder::new(seed ^ 0x07);
        let x = b.input("x", Dims::new(2, 3, 4, 4));
        let u = b
            .graph
            .add(OpKind::Upsample { factor: 2, mode: UpsampleMode::Nearest }, vec![x])
            .unwrap();
        let c = b.conv("mix", u, 3, 3, 3, 1, 1);
        cases.push(b.close("upsample_nearest", c, Dims::new(2, 3, 8, 8), 3));
    }
    {
        let mut b = CaseBuilder::new(seed ^ 0x08);
        let x = b.input("x", Dims::new(2, 3, 4, 4));
        let u = b
            .graph
            .add(OpKind::Upsample { factor: 4, mode: UpsampleMode::Bilinear }, vec![x])
            .unwrap();
        let c = b.conv("mix", u, 3, 3, 3, 1, 1);
        cases.push(b.close("upsample_bilinear", c, Dims::new(2, 3, 16, 16), 3));
    }
    {
        let mut b = CaseBuilder::new(seed ^ 0x09);
        let x = b.input("x", Dims::new(2, 3, 6, 6));
        let e = b.graph.add(OpKind::Elu, vec![x]).unwrap();
        cases.push(b.close("elu", e, Dims::new(2, 3, 6, 6), 3));
    }
    {
        let mut b = CaseBuilder::new(seed ^ 0x0a);
        let x = b.input("x", Dims::new(2, 3, 6, 6));
        let r = b.graph.add(OpKind::Rectifier, vec![x]).unwrap();
        cases.push(b.close("rectifier", r, Dims::new(2, 3, 6, 6), 3));
    }
    {
        let mut b = CaseBuilder::new(seed ^ 0x0b);
        let x = b.input("x", Dims::new(2, 4, 6, 6));
        let n = b.batch_norm("op", x, 4);
        cases.push(b.close("batch_norm", n, Dims::new(2, 4, 6, 6), 3));
    }
    {
        // the bare head: softmax + masked cross-entropy on a 1x1 conv
        let mut b = CaseBuilder::new(seed ^ 0x0c);
        let x = b.input("x", Dims::new(2, 5, 6, 6));
        cases.push(b.close("softmax_cross_entropy", x, Dims::new(2, 5, 6, 6), 4));
    }
    {
        // concat of two branches, add of two convs, mean of two losses
        let mut b = CaseBuilder::new(seed ^ 0x0d);
        let x = b.input("x", Dims::new(2, 3, 6, 6));
        let left = b.conv("left", x, 2, 3, 3, 1, 1);
        let right = b.conv("right", x, 3, 3, 1, 1, 0);
        let cat = b.graph.add(OpKind::Concat, vec![left, right]).unwrap();
        let a1 = b.conv("a1", cat, 4, 5, 1, 1, 0);
        let a2 = b.conv("a2", cat, 4, 5, 3, 1, 1);
        let sum = b.graph.add(OpKind::Add, vec![a1, a2]).unwrap();
        let sum = b.graph.add(OpKind::Identity, vec![sum]).unwrap();

        let d = Dims::new(2, 4, 6, 6);
        let classes = 3;
        let head1 = b.conv("h1", sum, classes, d.c, 1, 1, 0);
        let sm1 = b.graph.add(OpKind::Softmax, vec![head1]).unwrap();
        let head2 = b.conv("h2", sum, classes, d.c, 1, 1, 0);
        let sm2 = b.graph.add(OpKind::Softmax, vec![head2]).unwrap();
        let t = b.graph.input("t").unwrap();
        let m = b.graph.input("m").unwrap();
        let l1 = b.graph.add(OpKind::MaskedCrossEntropy, vec![sm1, t, m]).unwrap();
        let l2 = b.graph.add(OpKind::MaskedCrossEntropy, vec![sm2, t, m]).unwrap();
        let loss = b.graph.add(OpKind::ScalarMean, vec![l1, l2]).unwrap();
        b.graph.set_output("loss", loss);

        let mut target = Tensor::zeros(Dims::new(d.n, classes, d.h, d.w));
        let mut mask = Tensor::zeros(Dims::new(d.n, 1, d.h, d.w));
        for n in 0..d.n {
            for h in 0..d.h {
                for w in 0..d.w {
                    let class = b.rng.index(classes);
                    target.set(n, class, h, w, 1.0);
                    if (n, h, w) == (0, 0, 0) || b.rng.unit() < 0.7 {
                        mask.set(n, 0, h, w, 1.0);
                    }
                }
            }
        }
        b.inputs.insert("t".into(), target);
        b.inputs.insert("m".into(), mask);
        cases.push(CheckCase {
            name: "concat_add_mean",
            graph: b.graph,
            params: b.params,
            inputs: b.inputs,
            check_inputs: vec!["x"],
        });
    }

    cases
}

/// Runs every suite case and returns the outcomes; errs on the first case
/// whose worst relative error exceeds the tolerance.
pub fn run_op_suite(seed: u64, opts: CheckOpts) -> Result<Vec<CheckOutcome>> {
    let mut outcomes = Vec::new();
    for mut case in op_suite(seed) {
        let mut rng = Rng::new(seed).fork(0x6d63_6b00 + outcomes.len() as u64);
        let outcome = fd_check(
            case.name,
            &case.graph,
            &mut case.params,
            &case.inputs,
            &case.check_inputs,
            opts,
            &mut rng,
        )?;
        outcome.ensure(opts.tol)?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Finite-difference check of a whole architecture's training loss against
/// every learnable parameter and the data inputs.
pub fn net_check(spec: &crate::arch::ArchSpec, opts: CheckOpts, seed: u64) -> Result<CheckOutcome> {
    spec.validate()?;
    let rng = Rng::new(seed);
    let graph = crate::arch::build_train_graph(spec)?;
    let mut params = crate::arch::init_params::<f64>(spec, &mut rng.fork(1))?;

    let mut draw = rng.fork(2);
    let side = 4 * spec.patch_m;
    let classes = spec.classes;
    let mut inputs: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    inputs.insert(
        "pan".into(),
        draw.uniform_tensor(Dims::new(1, 1, side, side), 0.0, 1.0),
    );
    inputs.insert(
        "ms".into(),
        draw.uniform_tensor(Dims::new(1, 4, spec.patch_m, spec.patch_m), 0.0, 1.0),
    );
    let mut check_inputs = vec!["pan", "ms"];
    if spec.reuse_r > 0 {
        inputs.insert(
            "y0".into(),
            draw.uniform_tensor(Dims::new(1, classes, side, side), 0.0, 1.0),
        );
        check_inputs.push("y0");
    }
    let mut target = Tensor::zeros(Dims::new(1, classes, side, side));
    let mut mask = Tensor::zeros(Dims::new(1, 1, side, side));
    for h in 0..side {
        for w in 0..side {
            let class = draw.index(classes);
            let labeled = (h == 0 && w == 0) || draw.unit() < 0.7;
            if labeled {
                target.set(0, class, h, w, 1.0);
                mask.set(0, 0, h, w, 1.0);
            }
        }
    }
    inputs.insert("target".into(), target);
    inputs.insert("mask".into(), mask);

    fd_check(
        &format!("net {}", spec.canonical_string()),
        &graph,
        &mut params,
        &inputs,
        &check_inputs,
        opts,
        &mut rng.fork(3),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_case_passes() {
        let mut case = op_suite(9).into_iter().find(|c| c.name == "conv3x3_same").unwrap();
        let mut rng = Rng::new(10);
        let outcome = fd_check(
            case.name,
            &case.graph,
            &mut case.params,
            &case.inputs,
            &case.check_inputs,
            CheckOpts::default(),
            &mut rng,
        )
        .unwrap();
        assert!(outcome.compared > 50, "compared {}", outcome.compared);
        outcome.ensure(1e-4).unwrap();
    }

    #[test]
    fn batch_norm_case_passes() {
        let mut case = op_suite(9).into_iter().find(|c| c.name == "batch_norm").unwrap();
        let mut rng = Rng::new(11);
        let outcome = fd_check(
            case.name,
            &case.graph,
            &mut case.params,
            &case.inputs,
            &case.check_inputs,
            CheckOpts::default(),
            &mut rng,
        )
        .unwrap();
        outcome.ensure(1e-4).unwrap();
    }

    #[test]
    fn whole_suite_passes_with_reduced_sampling() {
        let opts = CheckOpts { samples: 20, ..CheckOpts::default() };
        let outcomes = run_op_suite(33, opts).unwrap();
        assert_eq!(outcomes.len(), 13);
        for o in &outcomes {
            assert!(o.compared > 0, "{} compared nothing", o.name);
        }
    }

    /// Negative control: corrupting one weight coordinate after backward
    /// must be caught.
    #[test]
    fn detects_a_corrupted_gradient() {
        let mut case = op_suite(9).into_iter().find(|c| c.name == "elu").unwrap();
        // recompute analytic grads, then poison one and rerun the numeric
        // comparison manually through a tiny copy of the fd loop
        case.params.zero_grads();
        let mut exec = Exec::new(&case.graph);
        case.graph.forward_train(&mut exec, &mut case.params, case.inputs.clone()).unwrap();
        case.graph.backward(&mut exec, &mut case.params).unwrap();
        let analytic = case.params.get("head.w").unwrap().grad.data()[0] + 0.5;

        let opts = CheckOpts::default();
        let orig = case.params.get("head.w").unwrap().value.data()[0];
        case.params.get_mut("head.w").unwrap().value.data_mut()[0] = orig + opts.step;
        let plus = eval_loss(&case.graph, &mut case.params, &case.inputs).unwrap();
        case.params.get_mut("head.w").unwrap().value.data_mut()[0] = orig - opts.step;
        let minus = eval_loss(&case.graph, &mut case.params, &case.inputs).unwrap();
        case.params.get_mut("head.w").unwrap().value.data_mut()[0] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs());
        assert!(rel > 1e-4, "poisoned gradient slipped through, rel {rel:.3e}");
    }
}
