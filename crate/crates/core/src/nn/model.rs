use fsgan_autodiff::{BatchNormMode, BatchStats, Checkpoint, Gradients, Padding, Tape, Tensor, TensorError, Var};
use rand::Rng;

use super::spec::{Activation, ConvPadding, LayerSpec, ModelSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Dropout active, batch norm on batch statistics.
    Train,
    /// Dropout off, batch norm on running statistics.
    Infer,
}

/// Source of the sampling layer's `eps`.
#[derive(Clone, Debug, PartialEq)]
pub enum Noise {
    Sample,
    /// `eps = 0`: the sampling layer outputs its mean head.
    Zero,
    Fixed(Tensor),
}

/// Options for one forward pass.
#[derive(Clone, Debug)]
pub struct Pass {
    pub mode: RunMode,
    pub noise: Noise,
    /// Keep masks for the dropout layers in order; sampled when `None`.
    pub masks: Option<Vec<Tensor>>,
}

impl Pass {
    pub fn train() -> Self {
        Pass {
            mode: RunMode::Train,
            noise: Noise::Sample,
            masks: None,
        }
    }

    pub fn infer() -> Self {
        Pass {
            mode: RunMode::Infer,
            noise: Noise::Sample,
            masks: None,
        }
    }

    pub fn with_noise(mut self, noise: Noise) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_masks(mut self, masks: Vec<Tensor>) -> Self {
        self.masks = Some(masks);
        self
    }
}

/// What a forward pass drew or measured.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub masks: Vec<Tensor>,
    /// `(layer index, statistics)` for every training-mode batch norm.
    pub batch_stats: Vec<(usize, BatchStats)>,
    pub noise: Option<Tensor>,
}

#[derive(Clone, Debug)]
enum Slot {
    None,
    Dense { w: usize, b: Option<usize> },
    Conv { w: usize, b: Option<usize> },
    Norm { gamma: usize, beta: usize, stats: usize },
    Sampling { mw: usize, mb: usize, vw: usize, vb: usize },
}

/// Parameters of a [`ModelSpec`] plus batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    shapes: Vec<Vec<usize>>,
    params: Vec<Tensor>,
    param_names: Vec<String>,
    /// `(running mean, running var)` per batch-norm layer.
    running: Vec<(Vec<f64>, Vec<f64>)>,
    slots: Vec<Slot>,
}

/// Model parameters placed on a tape.
pub struct Bound<'t> {
    pub vars: Vec<Var<'t>>,
}

impl Bound<'_> {
    /// Gradients of every parameter, zero where the loss does not reach.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    }
}

fn glorot<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, limit, rng)
}

enum Back<'t> {
    Dense(Var<'t>),
    Scale(Tensor),
    Dropout(Tensor, f64),
    Reshape(Vec<usize>),
    Unsupported(&'static str),
}

impl Model {
    /// Glorot-uniform weights, zero biases, unit batch-norm scales.
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut running = Vec::new();
        let mut slots = Vec::new();
        let mut add = |params: &mut Vec<Tensor>, name: String, t: Tensor| {
            params.push(t);
            names.push(name);
            params.len() - 1
        };
        for (i, layer) in spec.layers.iter().enumerate() {
            let input = &shapes[i];
            let kind = layer.kind();
            let slot = match *layer {
                LayerSpec::FullyConnected { units, use_bias } => {
                    let w = add(&mut params, format!("{i}.{kind}.weight"), glorot(vec![input[0], units], input[0], units, rng));
                    let b = use_bias.then(|| add(&mut params, format!("{i}.{kind}.bias"), Tensor::zeros(vec![units])));
                    Slot::Dense { w, b }
                }
                LayerSpec::Conv1d {
                    filters,
                    kernel,
                    use_bias,
                    ..
                } => {
                    let c = input[0];
                    let w = add(
                        &mut params,
                        format!("{i}.{kind}.weight"),
                        glorot(vec![filters, c, kernel], c * kernel, filters * kernel, rng),
                    );
                    let b = use_bias.then(|| add(&mut params, format!("{i}.{kind}.bias"), Tensor::zeros(vec![filters])));
                    Slot::Conv { w, b }
                }
                LayerSpec::BatchNorm { .. } => {
                    let c = input[0];
                    let gamma = add(&mut params, format!("{i}.{kind}.gamma"), Tensor::ones(vec![c]));
                    let beta = add(&mut params, format!("{i}.{kind}.beta"), Tensor::zeros(vec![c]));
                    running.push((vec![0.0; c], vec![1.0; c]));
                    Slot::Norm {
                        gamma,
                        beta,
                        stats: running.len() - 1,
                    }
                }
                LayerSpec::Sampling { latent_dim, .. } => {
                    let d = input[0];
                    let mw = add(&mut params, format!("{i}.{kind}.mean_weight"), glorot(vec![d, latent_dim], d, latent_dim, rng));
                    let mb = add(&mut params, format!("{i}.{kind}.mean_bias"), Tensor::zeros(vec![latent_dim]));
                    let vw = add(&mut params, format!("{i}.{kind}.var_weight"), glorot(vec![d, latent_dim], d, latent_dim, rng));
                    let vb = add(&mut params, format!("{i}.{kind}.var_bias"), Tensor::zeros(vec![latent_dim]));
                    Slot::Sampling { mw, mb, vw, vb }
                }
                _ => Slot::None,
            };
            slots.push(slot);
        }
        Ok(Model {
            spec,
            shapes,
            params,
            param_names: names,
            running,
            slots,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn running_stats(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.running
    }

    /// Places the parameters on `tape`, as differentiable leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn check_input(&self, x: &[usize]) -> Result<()> {
        if x.len() != self.shapes[0].len() + 1 || x[1..] != self.shapes[0][..] || x[0] == 0 {
            return Err(TensorError::mismatch(
                "model input",
                &[&[0usize][..], &self.shapes[0][..]].concat(),
                x,
            )
            .into());
        }
        Ok(())
    }

    fn run<'t, R: Rng + ?Sized>(
        &self,
        bound: &Bound<'t>,
        x: Var<'t>,
        pass: &Pass,
        rng: &mut R,
        mut back: Option<&mut Vec<Back<'t>>>,
    ) -> Result<(Var<'t>, Trace)> {
        self.check_input(&x.shape())?;
        if bound.vars.len() != self.params.len() {
            return Err(Error::Spec(format!("{}: bound parameter count mismatch", self.spec.name)));
        }
        let tape = x.tape();
        let train = pass.mode == RunMode::Train;
        let mut trace = Trace::default();
        let mut dropout_index = 0;
        let mut h = x;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let batch = h.shape()[0];
            let want_back = back.is_some();
            let mut record = |b: Back<'t>| {
                if let Some(list) = back.as_mut() {
                    list.push(b);
                }
            };
            h = match (layer, &self.slots[i]) {
                (LayerSpec::FullyConnected { .. }, Slot::Dense { w, b }) => {
                    record(Back::Dense(bound.vars[*w]));
                    let y = h.matmul(bound.vars[*w])?;
                    match b {
                        Some(b) => y.add(bound.vars[*b])?,
                        None => y,
                    }
                }
                (LayerSpec::Conv1d { stride, padding, .. }, Slot::Conv { w, b }) => {
                    record(Back::Unsupported("conv1d"));
                    let padding = match padding {
                        ConvPadding::Valid => Padding::Valid,
                        ConvPadding::Same => Padding::Same,
                    };
                    h.conv1d(bound.vars[*w], b.map(|b| bound.vars[b]), *stride, padding)?
                }
                (LayerSpec::BatchNorm { epsilon, .. }, Slot::Norm { gamma, beta, stats }) => {
                    record(Back::Unsupported("batch_norm"));
                    let mode = if train {
                        BatchNormMode::Train { epsilon: *epsilon }
                    } else {
                        let (mean, var) = &self.running[*stats];
                        BatchNormMode::Infer {
                            mean: mean.clone(),
                            var: var.clone(),
                            epsilon: *epsilon,
                        }
                    };
                    let (y, st) = h.batch_norm(bound.vars[*gamma], bound.vars[*beta], &mode)?;
                    if let Some(st) = st {
                        trace.batch_stats.push((i, st));
                    }
                    y
                }
                (LayerSpec::Dropout { rate }, _) => {
                    if !train {
                        h
                    } else {
                        let shape = h.shape();
                        let mask = match &pass.masks {
                            Some(m) => m
                                .get(dropout_index)
                                .cloned()
                                .ok_or_else(|| Error::Input(format!("no dropout mask for layer {i}")))?,
                            None => {
                                let mut m = Tensor::zeros(shape);
                                for v in m.data_mut() {
                                    *v = if rng.gen::<f64>() < *rate { 0.0 } else { 1.0 };
                                }
                                m
                            }
                        };
                        dropout_index += 1;
                        let y = h.dropout(&mask, *rate)?;
                        record(Back::Dropout(mask.clone(), *rate));
                        trace.masks.push(mask);
                        y
                    }
                }
                (LayerSpec::Activation(act), _) => {
                    let v = h.value();
                    let slope = match act {
                        Activation::LeakyRelu { slope } => *slope,
                        Activation::Relu => 0.0,
                    };
                    if want_back {
                        record(Back::Scale(v.map(|u| if u > 0.0 { 1.0 } else { slope })));
                    }
                    match act {
                        Activation::LeakyRelu { slope } => h.leaky_relu(*slope),
                        Activation::Relu => h.relu(),
                    }
                }
                (LayerSpec::L2Normalize, _) => {
                    record(Back::Unsupported("l2_normalize"));
                    h.l2_normalize()
                }
                (LayerSpec::Reshape { shape }, _) => {
                    record(Back::Reshape(h.shape()));
                    let mut full = vec![batch];
                    full.extend_from_slice(shape);
                    h.reshape(&full)?
                }
                (LayerSpec::Sampling { latent_dim, slope }, Slot::Sampling { mw, mb, vw, vb }) => {
                    record(Back::Unsupported("sampling"));
                    let mu = h.matmul(bound.vars[*mw])?.add(bound.vars[*mb])?.leaky_relu(*slope);
                    let v = h.matmul(bound.vars[*vw])?.add(bound.vars[*vb])?.leaky_relu(*slope);
                    let eps = match &pass.noise {
                        Noise::Sample => Tensor::randn(vec![batch, *latent_dim], 1.0, rng),
                        Noise::Zero => Tensor::zeros(vec![batch, *latent_dim]),
                        Noise::Fixed(t) => {
                            if t.shape() != [batch, *latent_dim] {
                                return Err(TensorError::mismatch("sampling noise", &[batch, *latent_dim], t.shape()).into());
                            }
                            t.clone()
                        }
                    };
                    let spread = v.softplus().mul(tape.constant(eps.clone()))?;
                    trace.noise = Some(eps);
                    mu.add(spread)?
                }
                _ => unreachable!("slot layout follows the spec"),
            };
        }
        Ok((h, trace))
    }

    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        bound: &Bound<'t>,
        x: Var<'t>,
        pass: &Pass,
        rng: &mut R,
    ) -> Result<(Var<'t>, Trace)> {
        self.run(bound, x, pass, rng, None)
    }

    /// Forward pass plus `d sum(output) / d x`, built as ordinary tape ops so
    /// it can itself be differentiated with respect to the parameters.
    ///
    /// Both use the same dropout masks. Only fully connected, activation,
    /// dropout and reshape layers have a transpose rule.
    pub fn forward_with_input_grad<'t, R: Rng + ?Sized>(
        &self,
        bound: &Bound<'t>,
        x: Var<'t>,
        pass: &Pass,
        rng: &mut R,
    ) -> Result<(Var<'t>, Var<'t>, Trace)> {
        let mut back = Vec::new();
        let (y, trace) = self.run(bound, x, pass, rng, Some(&mut back))?;
        let tape = x.tape();
        let mut g = tape.constant(Tensor::ones(y.shape()));
        for step in back.into_iter().rev() {
            g = match step {
                Back::Dense(w) => g.matmul(w.transpose()?)?,
                Back::Scale(d) => g.mul(tape.constant(d))?,
                Back::Dropout(mask, rate) => g.dropout(&mask, rate)?,
                Back::Reshape(shape) => g.reshape(&shape)?,
                Back::Unsupported(kind) => {
                    return Err(TensorError::UnsupportedSecondOrder(kind.to_string()).into())
                }
            };
        }
        Ok((y, g, trace))
    }

    /// Forward pass on constants; nothing is differentiable.
    pub fn predict<R: Rng + ?Sized>(&self, x: &Tensor, pass: &Pass, rng: &mut R) -> Result<(Tensor, Trace)> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let (y, trace) = self.forward(&bound, tape.constant(x.clone()), pass, rng)?;
        let out = (*y.value()).clone();
        Ok((out, trace))
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, trace: &Trace) {
        for (layer, st) in &trace.batch_stats {
            let (LayerSpec::BatchNorm { momentum, .. }, Slot::Norm { stats, .. }) =
                (&self.spec.layers[*layer], &self.slots[*layer])
            else {
                continue;
            };
            let (mean, var) = &mut self.running[*stats];
            for c in 0..mean.len() {
                mean[c] = momentum * mean[c] + (1.0 - momentum) * st.mean[c];
                var[c] = momentum * var[c] + (1.0 - momentum) * st.var[c];
            }
        }
    }

    /// Stores parameters and running statistics under `prefix.`.
    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        for (name, p) in self.param_names.iter().zip(&self.params) {
            ck.insert(format!("{prefix}.{name}"), p.clone())?;
        }
        for (k, (mean, var)) in self.running.iter().enumerate() {
            ck.insert(format!("{prefix}.running.{k}.mean"), Tensor::vector(mean.clone()))?;
            ck.insert(format!("{prefix}.running.{k}.var"), Tensor::vector(var.clone()))?;
        }
        Ok(())
    }

    /// Rebuilds a model of `spec` from arrays written by [`Model::save_into`].
    pub fn load_from(spec: ModelSpec, ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = Model::new(spec, &mut rng)?;
        for (name, p) in model.param_names.iter().zip(model.params.iter_mut()) {
            let t = ck.require(&format!("{prefix}.{name}"))?;
            if t.shape() != p.shape() {
                return Err(TensorError::mismatch("checkpoint", p.shape(), t.shape()).into());
            }
            *p = t.clone();
        }
        for (k, (mean, var)) in model.running.iter_mut().enumerate() {
            let m = ck.require(&format!("{prefix}.running.{k}.mean"))?;
            let v = ck.require(&format!("{prefix}.running.{k}.var"))?;
            if m.len() != mean.len() || v.len() != var.len() {
                return Err(Error::Spec(format!("{prefix}: running statistics size mismatch")));
            }
            *mean = m.data().to_vec();
            *var = v.data().to_vec();
        }
        Ok(model)
    }
}

/// Row-wise softmax of `[n, k]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = *logits.shape().last().unwrap();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Index of the largest logit in each row; the first one wins ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    logits
        .rows()
        .map(|r| {
            let mut best = 0;
            for (i, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
