//! Fully connected feedforward networks with cached forward traces,
//! backpropagation and a scheduled Adam optimizer.
//!
//! Layer 0 is the input layer: its "weighted input" is the network input
//! itself and its activation is the identity. Layer `l >= 1` computes
//! `z_l = W_l p_{l-1} + r_l`, `p_l = act_l(z_l)`. Weight and bias vectors are
//! stored for layers `1..depth`, so `weights[l - 1]` belongs to layer `l`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::binfmt;
use crate::error::{config, shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the cached output `act(x)`.
    #[inline]
    pub fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - out * out,
        }
    }

    fn tag(self) -> u64 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u64) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Tanh),
            other => Err(Error::Format(format!("unknown activation tag {other}"))),
        }
    }
}

/// A feedforward net. `weights[l]` has shape `widths[l + 1] x widths[l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedforwardNet {
    pub widths: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub activations: Vec<Activation>,
}

/// Weighted inputs and outputs of every layer for one input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub weighted_inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
}

impl LayerTrace {
    pub fn output(&self) -> &DVector<f64> {
        self.outputs
            .last()
            .expect("trace has at least the input layer")
    }
}

/// Same as [`LayerTrace`] with one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrace {
    pub weighted_inputs: Vec<DMatrix<f64>>,
    pub outputs: Vec<DMatrix<f64>>,
}

impl BatchTrace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.outputs
            .last()
            .expect("trace has at least the input layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weight_grads: Vec<DMatrix<f64>>,
    pub bias_grads: Vec<DVector<f64>>,
    /// Gradient with respect to the network input.
    pub input_grad: DVector<f64>,
}

/// Parameter gradients summed over a batch, plus per-sample input gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub weight_grads: Vec<DMatrix<f64>>,
    pub bias_grads: Vec<DVector<f64>>,
    pub input_grads: DMatrix<f64>,
}

pub trait ParameterGradients {
    fn weight_grads(&self) -> &[DMatrix<f64>];
    fn bias_grads(&self) -> &[DVector<f64>];
}

impl ParameterGradients for GradientSet {
    fn weight_grads(&self) -> &[DMatrix<f64>] {
        &self.weight_grads
    }
    fn bias_grads(&self) -> &[DVector<f64>] {
        &self.bias_grads
    }
}

impl ParameterGradients for BatchGradients {
    fn weight_grads(&self) -> &[DMatrix<f64>] {
        &self.weight_grads
    }
    fn bias_grads(&self) -> &[DVector<f64>] {
        &self.bias_grads
    }
}

/// Xavier-style init: weights i.i.d. `N(0, 1 / fan_in)`, zero biases.
pub fn init_net<R: Rng + ?Sized>(
    widths: &[usize],
    activations: &[Activation],
    rng: &mut R,
) -> Result<FeedforwardNet> {
    check_layout(widths, activations)?;
    let mut weights = Vec::with_capacity(widths.len() - 1);
    let mut biases = Vec::with_capacity(widths.len() - 1);
    for pair in widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let std = (1.0 / fan_in as f64).sqrt();
        // Filled row by row so the draw order matches the row-major file layout.
        let mut w = DMatrix::zeros(fan_out, fan_in);
        for i in 0..fan_out {
            for j in 0..fan_in {
                let z: f64 = rng.sample(StandardNormal);
                w[(i, j)] = std * z;
            }
        }
        weights.push(w);
        biases.push(DVector::zeros(fan_out));
    }
    Ok(FeedforwardNet {
        widths: widths.to_vec(),
        weights,
        biases,
        activations: activations.to_vec(),
    })
}

fn check_layout(widths: &[usize], activations: &[Activation]) -> Result<()> {
    if widths.len() < 2 {
        return config(format!(
            "a net needs at least 2 layers, got {}",
            widths.len()
        ));
    }
    if widths.contains(&0) {
        return config("layer widths must be positive");
    }
    if activations.len() != widths.len() {
        return config(format!(
            "{} activations for {} layers",
            activations.len(),
            widths.len()
        ));
    }
    if activations[0] != Activation::Identity {
        return config("input layer activation must be the identity");
    }
    Ok(())
}

impl FeedforwardNet {
    /// Hidden activations tanh, input and output layers identity.
    pub fn tanh_hidden(widths: &[usize]) -> Vec<Activation> {
        (0..widths.len())
            .map(|l| {
                if l == 0 || l + 1 == widths.len() {
                    Activation::Identity
                } else {
                    Activation::Tanh
                }
            })
            .collect()
    }

    /// Number of layers including the input layer.
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        check_layout(&self.widths, &self.activations)?;
        if self.weights.len() != self.depth() - 1 || self.biases.len() != self.depth() - 1 {
            return shape("parameter count does not match depth");
        }
        for l in 1..self.depth() {
            let w = &self.weights[l - 1];
            if w.shape() != (self.widths[l], self.widths[l - 1]) {
                return shape(format!("layer {l} weight shape {:?}", w.shape()));
            }
            if self.biases[l - 1].len() != self.widths[l] {
                return shape(format!(
                    "layer {l} bias length {}",
                    self.biases[l - 1].len()
                ));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Output only, without keeping the trace.
    pub fn predict(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        if input.len() != self.input_width() {
            return shape(format!(
                "input length {} != {}",
                input.len(),
                self.input_width()
            ));
        }
        let mut p = input.clone();
        for l in 1..self.depth() {
            let mut z = self.biases[l - 1].clone();
            z.gemv(1.0, &self.weights[l - 1], &p, 1.0);
            let act = self.activations[l];
            z.apply(|v| *v = act.apply(*v));
            p = z;
        }
        Ok(p)
    }

    pub fn write_segment<W: Write>(&self, w: &mut W) -> Result<()> {
        binfmt::write_u64(w, self.depth() as u64)?;
        for &width in &self.widths {
            binfmt::write_u64(w, width as u64)?;
        }
        for act in &self.activations {
            binfmt::write_u64(w, act.tag())?;
        }
        for weight in &self.weights {
            for i in 0..weight.nrows() {
                binfmt::write_f64s(w, weight.row(i).iter().copied())?;
            }
        }
        for b in &self.biases {
            binfmt::write_f64s(w, b.iter().copied())?;
        }
        Ok(())
    }

    pub fn read_segment<R: Read>(r: &mut R) -> Result<Self> {
        let depth = binfmt::read_usize(r, "depth")?;
        if !(2..=4096).contains(&depth) {
            return Err(Error::Format(format!("net depth {depth}")));
        }
        let widths = (0..depth)
            .map(|_| binfmt::read_usize(r, "width"))
            .collect::<Result<Vec<_>>>()?;
        let activations = (0..depth)
            .map(|_| Activation::from_tag(binfmt::read_u64(r)?))
            .collect::<Result<Vec<_>>>()?;
        let mut weights = Vec::with_capacity(depth - 1);
        for pair in widths.windows(2) {
            let vals = binfmt::read_f64s(r, pair[0] * pair[1])?;
            weights.push(DMatrix::from_row_slice(pair[1], pair[0], &vals));
        }
        let mut biases = Vec::with_capacity(depth - 1);
        for &width in &widths[1..] {
            biases.push(DVector::from_vec(binfmt::read_f64s(r, width)?));
        }
        let net = Self {
            widths,
            weights,
            biases,
            activations,
        };
        net.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(net)
    }
}

pub fn forward(net: &FeedforwardNet, input: &DVector<f64>) -> Result<LayerTrace> {
    if input.len() != net.input_width() {
        return shape(format!(
            "input length {} != {}",
            input.len(),
            net.input_width()
        ));
    }
    let mut weighted_inputs = Vec::with_capacity(net.depth());
    let mut outputs = Vec::with_capacity(net.depth());
    weighted_inputs.push(input.clone());
    outputs.push(input.clone());
    for l in 1..net.depth() {
        let mut z = net.biases[l - 1].clone();
        z.gemv(1.0, &net.weights[l - 1], &outputs[l - 1], 1.0);
        let act = net.activations[l];
        let p = z.map(|v| act.apply(v));
        weighted_inputs.push(z);
        outputs.push(p);
    }
    Ok(LayerTrace {
        weighted_inputs,
        outputs,
    })
}

/// Forward pass over a batch stored one sample per column.
pub fn forward_batch(net: &FeedforwardNet, inputs: &DMatrix<f64>) -> Result<BatchTrace> {
    if inputs.nrows() != net.input_width() {
        return shape(format!(
            "input rows {} != {}",
            inputs.nrows(),
            net.input_width()
        ));
    }
    let batch = inputs.ncols();
    let mut weighted_inputs = Vec::with_capacity(net.depth());
    let mut outputs = Vec::with_capacity(net.depth());
    weighted_inputs.push(inputs.clone());
    outputs.push(inputs.clone());
    for l in 1..net.depth() {
        let bias = &net.biases[l - 1];
        let mut z = DMatrix::from_fn(net.widths[l], batch, |i, _| bias[i]);
        z.gemm(1.0, &net.weights[l - 1], &outputs[l - 1], 1.0);
        let act = net.activations[l];
        let p = z.map(|v| act.apply(v));
        weighted_inputs.push(z);
        outputs.push(p);
    }
    Ok(BatchTrace {
        weighted_inputs,
        outputs,
    })
}

/// Backpropagates `output_grad` (the loss gradient with respect to the net
/// output) through the cached trace.
pub fn backprop(
    net: &FeedforwardNet,
    trace: &LayerTrace,
    output_grad: &DVector<f64>,
) -> Result<GradientSet> {
    let depth = net.depth();
    if trace.outputs.len() != depth || output_grad.len() != net.output_width() {
        return shape("trace or output gradient does not match the net");
    }
    let mut weight_grads = vec![DMatrix::zeros(0, 0); depth - 1];
    let mut bias_grads = vec![DVector::zeros(0); depth - 1];

    let last = net.activations[depth - 1];
    let mut delta = output_grad.zip_map(&trace.outputs[depth - 1], |g, p| {
        g * last.derivative_from_output(p)
    });
    for l in (1..depth).rev() {
        weight_grads[l - 1] = &delta * trace.outputs[l - 1].transpose();
        let act = net.activations[l - 1];
        let mut prev = net.weights[l - 1].tr_mul(&delta);
        prev.zip_apply(&trace.outputs[l - 1], |d, p| {
            *d *= act.derivative_from_output(p)
        });
        bias_grads[l - 1] = delta;
        delta = prev;
    }
    Ok(GradientSet {
        weight_grads,
        bias_grads,
        input_grad: delta,
    })
}

/// Batched backpropagation. Parameter gradients are summed over columns, so
/// pass `output_grads` already scaled by `1 / batch` to get averages.
pub fn backprop_batch(
    net: &FeedforwardNet,
    trace: &BatchTrace,
    output_grads: &DMatrix<f64>,
) -> Result<BatchGradients> {
    let depth = net.depth();
    if trace.outputs.len() != depth || output_grads.shape() != trace.output().shape() {
        return shape("trace or output gradients do not match the net");
    }
    let mut weight_grads = vec![DMatrix::zeros(0, 0); depth - 1];
    let mut bias_grads = vec![DVector::zeros(0); depth - 1];

    let last = net.activations[depth - 1];
    let mut delta = output_grads.zip_map(&trace.outputs[depth - 1], |g, p| {
        g * last.derivative_from_output(p)
    });
    for l in (1..depth).rev() {
        let prev_out = &trace.outputs[l - 1];
        let mut wg = DMatrix::zeros(net.widths[l], net.widths[l - 1]);
        wg.gemm(1.0, &delta, &prev_out.transpose(), 0.0);
        weight_grads[l - 1] = wg;
        bias_grads[l - 1] = row_sums(&delta);
        let act = net.activations[l - 1];
        let mut prev = net.weights[l - 1].tr_mul(&delta);
        if act != Activation::Identity {
            prev.zip_apply(prev_out, |d, p| *d *= act.derivative_from_output(p));
        }
        delta = prev;
    }
    Ok(BatchGradients {
        weight_grads,
        bias_grads,
        input_grads: delta,
    })
}

/// Sums each row in ascending column order.
pub(crate) fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.nrows());
    for col in m.column_iter() {
        out += col;
    }
    out
}

/// Adam hyperparameters plus the diminishing step-size schedule
/// `max(eta_min, eta_init / sqrt(t))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub eta_init: f64,
    pub eta_min: f64,
}

impl AdamConfig {
    pub fn with_steps(eta_init: f64, eta_min: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            eta_init,
            eta_min,
        }
    }

    pub fn step_scale(&self, t: u64) -> f64 {
        self.eta_min.max(self.eta_init / (t as f64).sqrt())
    }
}

/// First and second moment accumulators for a list of flat parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moments: Vec<Vec<f64>>,
    pub second_moments: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, group_lens: &[usize]) -> Self {
        Self {
            config,
            first_moments: group_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second_moments: group_lens.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
        }
    }

    /// Groups ordered as all weight matrices, then all bias vectors.
    pub fn for_net(config: AdamConfig, net: &FeedforwardNet) -> Self {
        let lens: Vec<usize> = net
            .weights
            .iter()
            .map(|w| w.len())
            .chain(net.biases.iter().map(|b| b.len()))
            .collect();
        Self::new(config, &lens)
    }

    /// One update of every group. Fails without touching anything if a
    /// gradient entry is not finite or `t` does not advance.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], t: u64) -> Result<()> {
        if t == 0 || t <= self.step_count {
            return Err(Error::State(format!(
                "Adam step {t} does not follow step {}",
                self.step_count
            )));
        }
        if params.len() != self.first_moments.len() || grads.len() != params.len() {
            return shape("parameter groups do not match the optimizer state");
        }
        for (g, m) in grads.iter().zip(&self.first_moments) {
            if g.len() != m.len() {
                return shape("gradient group length mismatch");
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    iteration: t,
                    reason: "non-finite gradient".into(),
                });
            }
        }
        let c = self.config;
        let scale = c.step_scale(t);
        let bias1 = 1.0 - c.beta1.powf(t as f64);
        let bias2 = 1.0 - c.beta2.powf(t as f64);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moments.iter_mut())
            .zip(self.second_moments.iter_mut())
        {
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= scale * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        self.step_count = t;
        Ok(())
    }
}

/// Adam update of every weight and bias of `net`.
pub fn adam_step<G: ParameterGradients>(
    state: &mut AdamState,
    net: &mut FeedforwardNet,
    grads: &G,
    t: u64,
) -> Result<()> {
    if grads.weight_grads().len() != net.weights.len()
        || grads.bias_grads().len() != net.biases.len()
    {
        return shape("gradient set does not match the net");
    }
    let grad_slices: Vec<&[f64]> = grads
        .weight_grads()
        .iter()
        .map(|g| g.as_slice())
        .chain(grads.bias_grads().iter().map(|g| g.as_slice()))
        .collect();
    let FeedforwardNet {
        weights, biases, ..
    } = net;
    let mut param_slices: Vec<&mut [f64]> = weights
        .iter_mut()
        .map(|w| w.as_mut_slice())
        .chain(biases.iter_mut().map(|b| b.as_mut_slice()))
        .collect();
    state.update(&mut param_slices, &grad_slices, t)
}
