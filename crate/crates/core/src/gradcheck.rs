//! Finite-difference gradient checks.
//!
//! Analytic gradients (in `f32` or `f64`) are compared against central
//! differences of an `f64` shadow evaluation of the same graph. The error of
//! one element is `|a - n| / max(|a|, |n|, floor)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::ctc::LabelSeq;
use crate::error::Result;
use crate::model::{local_attention_mask, Mode, SvtrConfig, SvtrModel};
use crate::tensor::{Element, Tensor};

pub const STEP: f64 = 1e-3;
/// Denominator floor for near-zero gradients.
pub const FLOOR: f64 = 1e-2;
pub const TOL_F64: f64 = 1e-4;
pub const TOL_F32: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub dtype: &'static str,
    pub elements: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn tolerance<T: Element>() -> f64 {
    if T::DTYPE == "f64" {
        TOL_F64
    } else {
        TOL_F32
    }
}

type Build<T> = fn(&mut Graph<T>, &[Var]) -> Result<Var>;

/// One differentiable op with input shapes and a builder instantiated for
/// both storage types.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Multi-op chains are held to the f32 bound only.
    pub composite: bool,
    build32: Build<f32>,
    build64: Build<f64>,
}

macro_rules! case {
    ($name:expr, [$($shape:expr),* $(,)?], $f:ident $(, $composite:expr)?) => {
        OpCase {
            name: $name,
            shapes: vec![$($shape.to_vec()),*],
            composite: false $(|| $composite)?,
            build32: $f::<f32>,
            build64: $f::<f64>,
        }
    };
}

/// Reduces a non-scalar output to a scalar with fixed pseudo-random weights
/// so that no gradient cancels by symmetry.
fn weighted_sum<T: Element>(g: &mut Graph<T>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    if shape.iter().product::<usize>() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let w = Tensor::from_fn(&shape, |_| T::from_f64(rng.random_range(-1.0..1.0)));
    let w = g.input(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn b_matmul<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    g.matmul(x[0], x[1])
}
fn b_add<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    g.add(x[0], x[1])
}
fn b_mul<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    g.mul(x[0], x[1])
}
fn b_scale_mean<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    let s = g.scale(x[0], -1.7);
    let m = g.mul(s, x[0])?;
    Ok(g.mean(m))
}
fn b_reshape_permute<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    let r = g.reshape(x[0], &[2, 3, 4])?;
    let p = g.permute(r, &[2, 0, 1])?;
    g.transpose(p, 0, 2)
}
fn b_slice<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    g.slice_last(x[0], 2, 3)
}
fn b_linear<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    g.linear(x[0], x[1], Some(x[2]))
}
fn b_conv<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    g.conv2d(x[0], x[1], Some(x[2]), Conv2dSpec::new((2, 1), (1, 1)))
}
fn b_layernorm<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    g.layernorm(x[0], x[1], x[2], 1e-5)
}
fn b_batchnorm_train<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    let (m, v) = (vec![T::zero(); 3], vec![T::one(); 3]);
    Ok(g.batchnorm2d(x[0], x[1], x[2], &m, &v, true, 1e-5)?.0)
}
fn b_batchnorm_eval<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    let m = vec![T::from_f64(0.1), T::from_f64(-0.2), T::zero()];
    let v = vec![T::from_f64(0.5), T::one(), T::from_f64(2.0)];
    Ok(g.batchnorm2d(x[0], x[1], x[2], &m, &v, false, 1e-5)?.0)
}
fn b_softmax0<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    g.softmax(x[0], 0)
}
fn b_softmax_last<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    g.softmax(x[0], 2)
}
fn b_masked_softmax<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    let mask = local_attention_mask(2, 3, 1, 3)?;
    g.masked_softmax(x[0], Some(Arc::new(mask)))
}
fn b_log_softmax<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    g.log_softmax(x[0])
}
fn b_gelu<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    Ok(g.gelu(x[0]))
}
fn b_dropout<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    g.dropout(x[0], 0.3, true)
}
fn b_mean_pool<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    g.mean_pool_height(x[0])
}
fn b_ctc<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    let lp = g.log_softmax(x[0])?;
    let labels = [LabelSeq::new(vec![1, 2])?, LabelSeq::new(vec![3, 3])?];
    g.ctc_loss(lp, &labels)
}
/// conv → layernorm over channels → linear.
fn b_chain<T: Element>(g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
    let c = g.conv2d(x[0], x[1], Some(x[2]), Conv2dSpec::new((2, 2), (1, 1)))?;
    let s = g.shape(c).to_vec();
    let seq = g.reshape(c, &[s[0], s[1], s[2] * s[3]])?;
    let seq = g.transpose(seq, 1, 2)?;
    let n = g.layernorm(seq, x[3], x[4], 1e-5)?;
    g.linear(n, x[5], Some(x[6]))
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        case!("matmul", [[3, 4], [4, 2]], b_matmul),
        case!("matmul-batched", [[2, 2, 3, 4], [2, 1, 4, 2]], b_matmul),
        case!("add-broadcast", [[2, 3, 4], [4]], b_add),
        case!("mul-broadcast", [[2, 3, 4], [3, 1]], b_mul),
        case!("scale-mean", [[3, 5]], b_scale_mean),
        case!("reshape-permute", [[4, 6]], b_reshape_permute),
        case!("slice", [[2, 3, 6]], b_slice),
        case!("linear", [[2, 3, 4], [4, 5], [5]], b_linear),
        case!("conv2d", [[2, 2, 5, 7], [3, 2, 3, 3], [3]], b_conv),
        case!("layernorm", [[3, 8], [8], [8]], b_layernorm),
        case!("batchnorm2d-train", [[4, 3, 2, 3], [3], [3]], b_batchnorm_train),
        case!("batchnorm2d-eval", [[4, 3, 2, 3], [3], [3]], b_batchnorm_eval),
        case!("softmax-axis0", [[4, 3]], b_softmax0),
        case!("softmax", [[2, 3, 5]], b_softmax_last),
        case!("masked-softmax", [[2, 2, 6, 6]], b_masked_softmax),
        case!("log-softmax", [[3, 5]], b_log_softmax),
        case!("gelu", [[4, 5]], b_gelu),
        case!("dropout", [[4, 5]], b_dropout),
        case!("mean-pool-height", [[2, 3, 4, 5]], b_mean_pool),
        case!("ctc", [[2, 6, 4]], b_ctc),
        case!("conv-layernorm-linear", [[2, 2, 6, 8], [8, 2, 3, 3], [8], [8], [8], [8, 3], [3]], b_chain, true),
    ]
}

fn random_inputs(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0)))
        .collect()
}

const GRAPH_SEED: u64 = 17;

fn loss_value<T: Element>(build: Build<T>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::with_seed(GRAPH_SEED);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.cast())).collect();
    let out = build(&mut g, &vars)?;
    let loss = weighted_sum(&mut g, out)?;
    Ok(g.value(loss).item().as_f64())
}

fn analytic<T: Element>(build: Build<T>, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::with_seed(GRAPH_SEED);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.cast())).collect();
    let out = build(&mut g, &vars)?;
    let loss = weighted_sum(&mut g, out)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| g.grad(v).expect("param grad").iter().map(|x| x.as_f64()).collect())
        .collect())
}

fn check_case<T: Element>(case: &OpCase, build: Build<T>, seed: u64) -> Result<CheckReport> {
    // evaluate at the exact point the analytic pass sees
    let inputs: Vec<Tensor<f64>> = random_inputs(&case.shapes, seed).iter().map(|t| t.cast::<T>().cast()).collect();
    let grads = analytic(build, &inputs)?;
    let mut worst: f64 = 0.0;
    let mut elements = 0;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut probe = inputs.clone();
            let x = probe[k].data()[i];
            probe[k].data_mut()[i] = x + STEP;
            let up = loss_value(case.build64, &probe)?;
            probe[k].data_mut()[i] = x - STEP;
            let down = loss_value(case.build64, &probe)?;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[k][i], numeric));
            elements += 1;
        }
    }
    Ok(CheckReport {
        name: case.name.to_string(),
        dtype: T::DTYPE,
        elements,
        max_rel_err: worst,
        tolerance: tolerance::<T>(),
    })
}

/// Every op case in both precisions.
pub fn check_ops(seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for case in op_cases() {
        if !case.composite {
            out.push(check_case::<f64>(&case, case.build64, seed)?);
        }
        out.push(check_case::<f32>(&case, case.build32, seed)?);
    }
    Ok(out)
}

/// Config of the end-to-end check: the micro model on 16×32 input.
pub fn model_check_config() -> SvtrConfig {
    SvtrConfig {
        input_w: 32,
        max_label_len: 3,
        ..SvtrConfig::micro()
    }
}

struct ModelProblem {
    images: Tensor<f64>,
    labels: Vec<LabelSeq>,
}

fn model_loss<T: Element>(model: &SvtrModel<T>, p: &ModelProblem) -> Result<f64> {
    let mut g = Graph::with_seed(GRAPH_SEED);
    let f = model.forward_mode(&mut g, &p.images.cast(), Mode::Train)?;
    let lp = g.log_softmax(f.logits)?;
    let loss = g.ctc_loss(lp, &p.labels)?;
    Ok(g.value(loss).item().as_f64())
}

/// Training-mode CTC loss of `config` (batch 2) differentiated with respect
/// to every parameter tensor. `per_tensor` caps the elements probed per
/// tensor (evenly spaced); `None` probes all of them.
pub fn check_model(config: &SvtrConfig, seed: u64, per_tensor: Option<usize>) -> Result<Vec<CheckReport>> {
    let model32: SvtrModel<f32> = SvtrModel::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let (h, w) = (config.input_h, config.input_w);
    let images = Tensor::from_fn(&[2, 3, h, w], |_| rng.random_range(0.0..1.0) as f32).cast();
    let max_len = ((config.frames() - 1) / 2).clamp(1, config.max_label_len);
    let labels = (0..2)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            LabelSeq::new((0..len).map(|_| rng.random_range(1..config.charset_size)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let problem = ModelProblem { images, labels };

    let mut g = Graph::with_seed(GRAPH_SEED);
    let f = model32.forward_mode(&mut g, &problem.images.cast(), Mode::Train)?;
    let lp = g.log_softmax(f.logits)?;
    let loss = g.ctc_loss(lp, &problem.labels)?;
    g.backward(loss)?;

    let mut shadow: SvtrModel<f64> = model32.cast();
    let mut reports = Vec::new();
    for (name, var) in &f.params {
        let grad: Vec<f64> = g.grad(*var).expect("param grad").iter().map(|&x| x as f64).collect();
        let n = grad.len();
        let picks: Vec<usize> = match per_tensor {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &picks {
            let x = shadow.store().get(name)?.data()[i];
            shadow.store_mut().get_mut(name)?.data_mut()[i] = x + STEP;
            let up = model_loss(&shadow, &problem)?;
            shadow.store_mut().get_mut(name)?.data_mut()[i] = x - STEP;
            let down = model_loss(&shadow, &problem)?;
            shadow.store_mut().get_mut(name)?.data_mut()[i] = x;
            worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * STEP)));
        }
        reports.push(CheckReport {
            name: name.clone(),
            dtype: "f32",
            elements: picks.len(),
            max_rel_err: worst,
            tolerance: TOL_F32,
        });
    }
    Ok(reports)
}
