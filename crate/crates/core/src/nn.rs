//! Feedforward scoring network with dropout, L2 weight decay and Adam.
//!
//! Layout: `weights[l]` is a row-major `fan_in x fan_out` matrix, so the
//! weight from input unit `i` to output unit `o` is `weights[l][i * fan_out + o]`.
//! Hidden layers use a rectifier; the output layer is linear with one unit.
//! Dropout masks act on hidden-layer outputs. A masked-out unit contributes
//! zero and kept units are not rescaled; deterministic evaluation (no masks)
//! scales hidden outputs by `1 - dropout_rate` instead.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranker;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub dropout_rate: f64,
    pub weight_decay: f64,
}

/// One binary vector per hidden layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMasks {
    pub layers: Vec<Vec<bool>>,
}

impl DropoutMasks {
    pub fn all_ones(params: &NetworkParams) -> Self {
        DropoutMasks {
            layers: params.hidden_sizes().iter().map(|&n| vec![true; n]).collect(),
        }
    }

    pub fn kept(&self) -> usize {
        self.layers.iter().flatten().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradient (or any other quantity) shaped like the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensors {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

pub type Gradients = ParamTensors;

impl ParamTensors {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        ParamTensors {
            weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Flat iterator over weights then biases, layer by layer.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    fn check_finite(&self) -> Result<()> {
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.iter().chain(b).any(|v| !v.is_finite()) {
                return Err(Error::numerical(Some(l), "non-finite gradient"));
            }
        }
        Ok(())
    }
}

impl NetworkParams {
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    /// Sum of squared Frobenius norms of all weight matrices (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        self.weights.iter().flatten().map(|w| w * w).sum()
    }

    /// The weight-decay term `lambda * sum ||W_l||_F^2`.
    pub fn penalty(&self) -> f64 {
        self.weight_decay * self.weight_norm_sq()
    }

    pub fn with_regularization(mut self, dropout_rate: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay {weight_decay} must be a nonnegative number"
            )));
        }
        self.dropout_rate = dropout_rate;
        self.weight_decay = weight_decay;
        Ok(self)
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        check_layer_sizes(&self.layer_sizes)?;
        let n = self.layer_sizes.len() - 1;
        if self.weights.len() != n || self.biases.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} weight layers, found {} weights and {} biases",
                self.weights.len(),
                self.biases.len()
            )));
        }
        for l in 0..n {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            if self.weights[l].len() != fan_in * fan_out || self.biases[l].len() != fan_out {
                return Err(Error::Shape(format!(
                    "layer {l} expected {fan_in}x{fan_out} weights and {fan_out} biases"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }

    /// Apply `f(param, tensor_value)` over every parameter in lockstep.
    fn zip_mut(&mut self, other: &ParamTensors, mut f: impl FnMut(&mut f64, f64)) {
        for (w, g) in self.weights.iter_mut().zip(&other.weights) {
            w.iter_mut().zip(g).for_each(|(p, &v)| f(p, v));
        }
        for (b, g) in self.biases.iter_mut().zip(&other.biases) {
            b.iter_mut().zip(g).for_each(|(p, &v)| f(p, v));
        }
    }
}

fn check_layer_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "need at least an input and an output layer, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.iter().any(|&n| n == 0) {
        return Err(Error::Config(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    if *layer_sizes.last().unwrap() != 1 {
        return Err(Error::Config(format!(
            "final layer must have exactly one unit, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

/// Weights ~ N(0, 1/fan_in), zero biases, no dropout and no weight decay.
pub fn init_network(layer_sizes: &[usize], seed: u64) -> Result<NetworkParams> {
    check_layer_sizes(layer_sizes)?;
    let mut rng = seed::keyed_rng(seed, "init-network", &[]);
    let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
    let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
    for pair in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive scale");
        weights.push((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect());
        biases.push(vec![0.0; fan_out]);
    }
    Ok(NetworkParams {
        layer_sizes: layer_sizes.to_vec(),
        weights,
        biases,
        dropout_rate: 0.0,
        weight_decay: 0.0,
    })
}

/// Each hidden unit is kept independently with probability `1 - dropout_rate`.
pub fn sample_masks<R: rand::Rng + ?Sized>(params: &NetworkParams, rng: &mut R) -> DropoutMasks {
    let keep = 1.0 - params.dropout_rate;
    DropoutMasks {
        layers: params
            .hidden_sizes()
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| params.dropout_rate == 0.0 || rng.random::<f64>() < keep)
                    .collect()
            })
            .collect(),
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Inputs to each weight layer: the features, then each hidden output.
    inputs: Vec<Vec<f64>>,
    pub score: f64,
}

fn check_inputs(params: &NetworkParams, features: &[f64], masks: Option<&DropoutMasks>) -> Result<()> {
    if features.len() != params.input_dim() {
        return Err(Error::Shape(format!(
            "feature length {} does not match input dimension {}",
            features.len(),
            params.input_dim()
        )));
    }
    if let Some(m) = masks {
        let hidden = params.hidden_sizes();
        if m.layers.len() != hidden.len()
            || m.layers.iter().zip(hidden).any(|(layer, &n)| layer.len() != n)
        {
            return Err(Error::Shape(format!(
                "dropout mask shape does not match hidden layers {hidden:?}"
            )));
        }
    }
    Ok(())
}

pub fn forward_trace(
    params: &NetworkParams,
    features: &[f64],
    masks: Option<&DropoutMasks>,
) -> Result<ForwardTrace> {
    check_inputs(params, features, masks)?;
    let n_layers = params.num_layers();
    let scale = 1.0 - params.dropout_rate;
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers - 1);
    inputs.push(features.to_vec());
    for l in 0..n_layers {
        let fan_out = params.layer_sizes[l + 1];
        let input = &inputs[l];
        let w = &params.weights[l];
        let mut z = params.biases[l].clone();
        for (i, &a) in input.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &w[i * fan_out..(i + 1) * fan_out];
            z.iter_mut().zip(row).for_each(|(zo, &wo)| *zo += a * wo);
        }
        if l + 1 == n_layers {
            let score = z[0];
            if !score.is_finite() {
                return Err(Error::numerical(Some(l), "non-finite score"));
            }
            return Ok(ForwardTrace { pre, inputs, score });
        }
        let out: Vec<f64> = match masks {
            Some(m) => z
                .iter()
                .zip(&m.layers[l])
                .map(|(&v, &keep)| if keep { v.max(0.0) } else { 0.0 })
                .collect(),
            None => z.iter().map(|&v| v.max(0.0) * scale).collect(),
        };
        pre.push(z);
        inputs.push(out);
    }
    unreachable!("network has at least one layer")
}

/// Scalar rank score of one feature vector.
pub fn forward(params: &NetworkParams, features: &[f64], masks: Option<&DropoutMasks>) -> Result<f64> {
    forward_trace(params, features, masks).map(|t| t.score)
}

/// Activations of the last hidden layer without dropout (the network's
/// learned embedding). For a network without hidden layers this is the input.
pub fn embed(params: &NetworkParams, features: &[f64]) -> Result<Vec<f64>> {
    let mut trace = forward_trace(params, features, None)?;
    Ok(trace.inputs.pop().expect("at least one layer input"))
}

/// Accumulate `d(score)/d(params) * upstream` into `grads`.
pub fn backward(
    params: &NetworkParams,
    trace: &ForwardTrace,
    masks: Option<&DropoutMasks>,
    upstream: f64,
    grads: &mut Gradients,
) {
    if upstream == 0.0 {
        return;
    }
    let n_layers = params.num_layers();
    let scale = 1.0 - params.dropout_rate;
    // delta holds d(score)/d(pre-activation) of the current layer.
    let mut delta = vec![upstream];
    for l in (0..n_layers).rev() {
        let fan_out = params.layer_sizes[l + 1];
        let input = &trace.inputs[l];
        let gw = &mut grads.weights[l];
        for (i, &a) in input.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &mut gw[i * fan_out..(i + 1) * fan_out];
            row.iter_mut().zip(&delta).for_each(|(g, &d)| *g += a * d);
        }
        grads.biases[l].iter_mut().zip(&delta).for_each(|(g, &d)| *g += d);
        if l == 0 {
            break;
        }
        // Propagate into hidden layer l - 1.
        let w = &params.weights[l];
        let z = &trace.pre[l - 1];
        let next: Vec<f64> = (0..params.layer_sizes[l])
            .map(|i| {
                if z[i] <= 0.0 {
                    return 0.0;
                }
                let gate = match masks {
                    Some(m) if !m.layers[l - 1][i] => return 0.0,
                    Some(_) => 1.0,
                    None => scale,
                };
                let row = &w[i * fan_out..(i + 1) * fan_out];
                gate * row.iter().zip(&delta).map(|(&wo, &d)| wo * d).sum::<f64>()
            })
            .collect();
        delta = next;
    }
}

/// Which objective a batch is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSpec {
    /// Pairwise cross-entropy plus weight decay.
    Rank,
    /// Rank loss plus squared error to absolute labels.
    Multitask,
}

/// One labeled pair with borrowed features, as consumed by the objective.
#[derive(Debug, Clone, Copy)]
pub struct PairExample<'a> {
    pub left: &'a [f64],
    pub right: &'a [f64],
    pub label: f64,
    /// Absolute labels of `(left, right)`, required for [`LossSpec::Multitask`].
    pub targets: Option<(f64, f64)>,
}

/// Dropout masks for both members of one pair during one pass.
#[derive(Debug, Clone)]
pub struct PairMasks {
    pub left: DropoutMasks,
    pub right: DropoutMasks,
}

fn pair_mask<'m>(masks: Option<&'m [PairMasks]>, k: usize) -> (Option<&'m DropoutMasks>, Option<&'m DropoutMasks>) {
    match masks {
        Some(m) => (Some(&m[k].left), Some(&m[k].right)),
        None => (None, None),
    }
}

fn check_batch_masks(batch: &[PairExample], masks: Option<&[PairMasks]>) -> Result<()> {
    match masks {
        Some(m) if m.len() != batch.len() => Err(Error::Shape(format!(
            "{} mask pairs for {} examples",
            m.len(),
            batch.len()
        ))),
        _ => Ok(()),
    }
}

/// Full objective of a batch: data terms plus `lambda * sum ||W||^2`.
pub fn objective(
    params: &NetworkParams,
    batch: &[PairExample],
    masks: Option<&[PairMasks]>,
    loss: LossSpec,
) -> Result<f64> {
    check_batch_masks(batch, masks)?;
    let mut total = 0.0;
    for (k, ex) in batch.iter().enumerate() {
        let (ml, mr) = pair_mask(masks, k);
        let si = forward(params, ex.left, ml)?;
        let sj = forward(params, ex.right, mr)?;
        total += ranker::pair_terms(si, sj, ex.label, ex.targets, loss)?.loss;
    }
    Ok(total + params.penalty())
}

/// Objective value and its gradient with respect to every weight and bias.
/// Both members of a pair share the same parameters; each uses its own masks.
pub fn loss_and_gradients(
    params: &NetworkParams,
    batch: &[PairExample],
    masks: Option<&[PairMasks]>,
    loss: LossSpec,
) -> Result<(f64, Gradients)> {
    check_batch_masks(batch, masks)?;
    let mut grads = Gradients::zeros_like(params);
    let mut total = 0.0;
    for (k, ex) in batch.iter().enumerate() {
        let (ml, mr) = pair_mask(masks, k);
        let ti = forward_trace(params, ex.left, ml)?;
        let tj = forward_trace(params, ex.right, mr)?;
        let terms = ranker::pair_terms(ti.score, tj.score, ex.label, ex.targets, loss)?;
        total += terms.loss;
        backward(params, &ti, ml, terms.d_left, &mut grads);
        backward(params, &tj, mr, terms.d_right, &mut grads);
    }
    let two_lambda = 2.0 * params.weight_decay;
    if two_lambda != 0.0 {
        for (g, w) in grads.weights.iter_mut().zip(&params.weights) {
            g.iter_mut().zip(w).for_each(|(g, &w)| *g += two_lambda * w);
        }
    }
    grads.check_finite()?;
    Ok((total + params.penalty(), grads))
}

pub fn gradients(
    params: &NetworkParams,
    batch: &[PairExample],
    masks: Option<&[PairMasks]>,
    loss: LossSpec,
) -> Result<Gradients> {
    loss_and_gradients(params, batch, masks, loss).map(|(_, g)| g)
}

/// Adam state with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ParamTensors,
    pub second_moment: ParamTensors,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams, learning_rate: f64) -> Self {
        OptimizerState {
            first_moment: ParamTensors::zeros_like(params),
            second_moment: ParamTensors::zeros_like(params),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

pub fn optimizer_step(params: &mut NetworkParams, grads: &Gradients, state: &mut OptimizerState) {
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let update_moments = |m: &mut ParamTensors, decay: f64, f: &dyn Fn(f64) -> f64| {
        let pairs = m.weights.iter_mut().zip(&grads.weights).chain(m.biases.iter_mut().zip(&grads.biases));
        for (mv, gv) in pairs {
            mv.iter_mut().zip(gv).for_each(|(m, &g)| *m = decay * *m + (1.0 - decay) * f(g));
        }
    };
    update_moments(&mut state.first_moment, b1, &|g| g);
    update_moments(&mut state.second_moment, b2, &|g| g * g);

    let t = state.step as i32;
    let step_size = state.learning_rate / (1.0 - b1.powi(t));
    let v_correction = 1.0 - b2.powi(t);
    let eps = state.epsilon;
    // Apply m / (sqrt(v_hat) + eps) elementwise.
    let mut direction = state.first_moment.clone();
    let all = direction
        .weights
        .iter_mut()
        .zip(&state.second_moment.weights)
        .chain(direction.biases.iter_mut().zip(&state.second_moment.biases));
    for (d, v) in all {
        d.iter_mut()
            .zip(v)
            .for_each(|(d, &v)| *d /= (v / v_correction).sqrt() + eps);
    }
    params.zip_mut(&direction, |p, d| *p -= step_size * d);
}
