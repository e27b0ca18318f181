//! Finite-difference gradient checking.
//!
//! [`RandomComposition`] draws a random stack of one to three layers from the
//! full op set, each with its own parameters, and a random scalar readout.
//! [`check_composition`] compares reverse-mode gradients for the input and
//! every parameter with central differences.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::tape::{BatchNormMode, Padding, Tape, Var};
use crate::tensor::Tensor;

/// Relative error with the denominator floored at `1e-5`, so gradients that
/// are zero up to rounding are compared in absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Central differences of a scalar function with respect to every element of
/// every input.
pub fn finite_difference<F>(f: F, inputs: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = f(&work);
            work[i].data_mut()[j] = orig - h;
            let minus = f(&work);
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

#[derive(Clone, Debug)]
enum Layer {
    Dense,
    DenseTransposed,
    Conv { stride: usize, padding: Padding },
    LeakyRelu(f64),
    Relu,
    Softplus,
    BatchNormTrain,
    BatchNormInfer { mean: Vec<f64>, var: Vec<f64> },
    Dropout { mask: Tensor, rate: f64 },
    L2Normalize,
    MulParam,
    SubParam,
    SqrtOfSquarePlusOne,
    ConcatNorm,
    ConcatRowSum,
    Slice { start: usize, len: usize },
    SelectRows(Vec<usize>),
    ConcatRows,
}

#[derive(Clone, Debug)]
enum Readout {
    WeightedSum(Tensor),
    MeanSquare,
    CrossEntropy(Vec<usize>),
    NormSum,
}

/// A random differentiable function of one input and a list of parameters.
#[derive(Clone, Debug)]
pub struct RandomComposition {
    layers: Vec<Layer>,
    readout: Readout,
    /// Input followed by the parameters, in the order `eval` consumes them.
    pub leaves: Vec<Tensor>,
    pub description: Vec<String>,
}

impl RandomComposition {
    /// `depth` layers on a `[batch, width]` input; every dimension stays at
    /// or below `max_dim`.
    pub fn sample<R: Rng>(rng: &mut R, depth: usize, max_dim: usize) -> Self {
        let batch = rng.gen_range(2..=4.min(max_dim));
        let mut width = rng.gen_range(2..=max_dim);
        let mut rows = batch;
        let mut leaves = vec![Tensor::randn(vec![batch, width], 1.0, rng)];
        let mut layers = Vec::new();
        let mut description = Vec::new();
        for _ in 0..depth {
            let choice = rng.gen_range(0..18);
            let layer = match choice {
                0 => {
                    let out = rng.gen_range(1..=max_dim);
                    leaves.push(Tensor::randn(vec![width, out], 0.5, rng));
                    leaves.push(Tensor::randn(vec![out], 0.5, rng));
                    width = out;
                    Layer::Dense
                }
                1 => {
                    let out = rng.gen_range(1..=max_dim);
                    leaves.push(Tensor::randn(vec![out, width], 0.5, rng));
                    width = out;
                    Layer::DenseTransposed
                }
                2 => {
                    let kernel = rng.gen_range(1..=width.min(5));
                    let stride = rng.gen_range(1..=2);
                    let mut padding = *[Padding::Valid, Padding::Same, Padding::Explicit(1, 2)]
                        .choose(rng)
                        .unwrap();
                    if width + 3 > max_dim {
                        padding = Padding::Valid;
                    }
                    let (pl, pr) = match padding {
                        Padding::Valid => (0, 0),
                        Padding::Same => {
                            let o = width.div_ceil(stride);
                            let t = ((o - 1) * stride + kernel).saturating_sub(width);
                            (t / 2, t - t / 2)
                        }
                        Padding::Explicit(l, r) => (l, r),
                    };
                    let out_len = (width + pl + pr - kernel) / stride + 1;
                    let max_channels = (max_dim / out_len).max(1);
                    let channels = rng.gen_range(1..=max_channels.min(3));
                    leaves.push(Tensor::randn(vec![channels, 1, kernel], 0.5, rng));
                    leaves.push(Tensor::randn(vec![channels], 0.5, rng));
                    width = channels * out_len;
                    Layer::Conv { stride, padding }
                }
                3 => Layer::LeakyRelu(*[0.001, 0.1, 0.3].choose(rng).unwrap()),
                4 => Layer::Relu,
                5 => Layer::Softplus,
                6 => {
                    leaves.push(Tensor::uniform(vec![width], 1.0, rng).map(|v| v + 1.5));
                    leaves.push(Tensor::randn(vec![width], 0.5, rng));
                    Layer::BatchNormTrain
                }
                7 => {
                    leaves.push(Tensor::randn(vec![width], 1.0, rng));
                    leaves.push(Tensor::randn(vec![width], 0.5, rng));
                    Layer::BatchNormInfer {
                        mean: (0..width).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                        var: (0..width).map(|_| rng.gen_range(0.5..2.0)).collect(),
                    }
                }
                8 => {
                    let rate = *[0.1, 0.4].choose(rng).unwrap();
                    let mut mask = Tensor::zeros(vec![rows, width]);
                    for m in mask.data_mut() {
                        *m = if rng.gen::<f64>() < rate { 0.0 } else { 1.0 };
                    }
                    Layer::Dropout { mask, rate }
                }
                9 => Layer::L2Normalize,
                10 => {
                    leaves.push(Tensor::randn(vec![width], 1.0, rng));
                    Layer::MulParam
                }
                11 => {
                    leaves.push(Tensor::randn(vec![width], 1.0, rng));
                    Layer::SubParam
                }
                12 => Layer::SqrtOfSquarePlusOne,
                13 if width < max_dim => {
                    width += 1;
                    Layer::ConcatNorm
                }
                14 if width < max_dim => {
                    width += 1;
                    Layer::ConcatRowSum
                }
                15 if width > 1 => {
                    let len = rng.gen_range(1..width);
                    let start = rng.gen_range(0..=width - len);
                    width = len;
                    Layer::Slice { start, len }
                }
                16 => {
                    let n = rng.gen_range(2..=max_dim.min(6));
                    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..rows)).collect();
                    rows = n;
                    Layer::SelectRows(idx)
                }
                17 if rows * 2 <= max_dim => {
                    rows *= 2;
                    Layer::ConcatRows
                }
                _ => Layer::Softplus,
            };
            description.push(format!("{layer:?}").chars().take(40).collect());
            layers.push(layer);
        }
        let readout = match rng.gen_range(0..4) {
            0 => Readout::WeightedSum(Tensor::randn(vec![rows, width], 1.0, rng)),
            1 => Readout::MeanSquare,
            2 => Readout::CrossEntropy((0..rows).map(|_| rng.gen_range(0..width)).collect()),
            _ => Readout::NormSum,
        };
        description.push(format!("{readout:?}").chars().take(30).collect());
        RandomComposition {
            layers,
            readout,
            leaves,
            description,
        }
    }

    /// Builds the function on `tape` with the given leaf variables.
    pub fn eval<'t>(&self, tape: &'t Tape, leaves: &[Var<'t>]) -> Result<Var<'t>> {
        let mut x = leaves[0];
        let mut next = 1;
        let mut take = || {
            let v = leaves[next];
            next += 1;
            v
        };
        for layer in &self.layers {
            x = match layer {
                Layer::Dense => {
                    let (w, b) = (take(), take());
                    x.matmul(w)?.add(b)?
                }
                Layer::DenseTransposed => x.matmul(take().transpose()?)?,
                Layer::Conv { stride, padding } => {
                    let (w, b) = (take(), take());
                    let s = x.shape();
                    let y = x.reshape(&[s[0], 1, s[1]])?.conv1d(w, Some(b), *stride, *padding)?;
                    let ys = y.shape();
                    y.reshape(&[ys[0], ys[1] * ys[2]])?
                }
                Layer::LeakyRelu(slope) => x.leaky_relu(*slope),
                Layer::Relu => x.relu(),
                Layer::Softplus => x.softplus(),
                Layer::BatchNormTrain => {
                    let (g, b) = (take(), take());
                    x.batch_norm(g, b, &BatchNormMode::Train { epsilon: 1e-3 })?.0
                }
                Layer::BatchNormInfer { mean, var } => {
                    let (g, b) = (take(), take());
                    let mode = BatchNormMode::Infer {
                        mean: mean.clone(),
                        var: var.clone(),
                        epsilon: 1e-5,
                    };
                    x.batch_norm(g, b, &mode)?.0
                }
                Layer::Dropout { mask, rate } => x.dropout(mask, *rate)?,
                Layer::L2Normalize => x.l2_normalize(),
                Layer::MulParam => x.mul(take())?,
                Layer::SubParam => x.sub(take())?,
                Layer::SqrtOfSquarePlusOne => x.square().add_scalar(1.0).sqrt()?,
                Layer::ConcatNorm => tape.concat(&[x, x.euclidean_norm()], 1)?,
                Layer::ConcatRowSum => tape.concat(&[x.sum_last_axis(), x], 1)?,
                Layer::Slice { start, len } => x.slice(1, *start, *len)?,
                Layer::SelectRows(idx) => x.select_rows(idx)?,
                Layer::ConcatRows => tape.concat(&[x, x.scale(0.5)], 0)?,
            };
        }
        Ok(match &self.readout {
            Readout::WeightedSum(w) => x.mul(tape.constant(w.clone()))?.sum(),
            Readout::MeanSquare => x.square().reduce_mean(),
            Readout::CrossEntropy(labels) => x.softmax_cross_entropy(labels)?,
            Readout::NormSum => x.euclidean_norm().sum(),
        })
    }

    pub fn value_at(&self, leaves: &[Tensor]) -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(self.eval(&tape, &vars)?.value().item())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked_elements: usize,
}

/// Compares reverse-mode gradients of every leaf with central differences.
pub fn check_composition(comp: &RandomComposition, h: f64) -> Result<GradCheckReport> {
    let tape = Tape::new();
    let vars: Vec<Var> = comp.leaves.iter().map(|t| tape.param(t.clone())).collect();
    let loss = comp.eval(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let numeric = finite_difference(|l| comp.value_at(l).unwrap(), &comp.leaves, h);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (var, num) in vars.iter().zip(&numeric) {
        let analytic = grads.get_or_zeros(*var);
        for (a, n) in analytic.data().iter().zip(num.data()) {
            max_rel = max_rel.max(relative_error(*a, *n));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        checked_elements: checked,
    })
}
