//! Dense multilayer network whose connections are individually gated.
//!
//! Weights are stored row-major as `(out, in)`; a batch is `(rows, features)`.
//! Every weight has exactly one gate logit. Biases are never gated.
//! Gates are addressed globally: layer `k` owns the contiguous range
//! `offsets[k]..offsets[k + 1]` of a [`GateSample`], in the row-major order of
//! that layer's weight matrix.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{self, GateSample, Rng, Temperature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_size: usize,
    pub output_size: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_size: usize, output_size: usize, activation: Activation) -> Self {
        Self {
            input_size,
            output_size,
            activation,
        }
    }

    pub fn gate_count(&self) -> usize {
        self.input_size * self.output_size
    }

    /// ReLU hidden layers and an identity output layer for the given widths,
    /// e.g. `[784, 300, 100, 10]`.
    pub fn chain(widths: &[usize]) -> Result<Vec<LayerSpec>> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs at least an input and an output width, got {widths:?}"
            )));
        }
        let last = widths.len() - 2;
        Ok(widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let act = if k == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                LayerSpec::new(w[0], w[1], act)
            })
            .collect())
    }
}

/// Checks sizes and chaining; the last layer must be identity.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("network has no layers".into()));
    }
    for (k, s) in specs.iter().enumerate() {
        if s.input_size == 0 || s.output_size == 0 {
            return Err(Error::Config(format!("layer {k} has a zero size")));
        }
    }
    for (k, pair) in specs.windows(2).enumerate() {
        if pair[0].output_size != pair[1].input_size {
            return Err(Error::shape(
                "layer chain",
                format!("layer {} input {}", k + 1, pair[0].output_size),
                pair[1].input_size,
            ));
        }
    }
    if specs.last().map(|s| s.activation) != Some(Activation::Identity) {
        return Err(Error::Config(
            "the output layer must use the identity activation".into(),
        ));
    }
    Ok(())
}

/// Start offset of every layer's gates plus the total, `len = layers + 1`.
pub fn gate_offsets(specs: &[LayerSpec]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(specs.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for s in specs {
        acc += s.gate_count();
        offsets.push(acc);
    }
    offsets
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedLayer {
    pub spec: LayerSpec,
    /// `(out, in)`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// Gate logits, same shape as `weights`.
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedNetwork {
    pub layers: Vec<GatedLayer>,
    pub temperature: Temperature,
    offsets: Vec<usize>,
}

/// Intermediate values of one forward pass. Borrowing the gates and the input
/// ties the tape to exactly the sample that produced it.
#[derive(Debug)]
pub struct ForwardTape<'a> {
    pub input: ArrayView2<'a, f64>,
    pub gates: &'a GateSample,
    /// `W ⊙ hard` per layer.
    pub effective: Vec<Array2<f64>>,
    pub pre_activations: Vec<Array2<f64>>,
    pub activations: Vec<Array2<f64>>,
}

impl ForwardTape<'_> {
    pub fn outputs(&self) -> &Array2<f64> {
        self.activations.last().expect("tape has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

impl Gradients {
    pub fn zeros_like(net: &GatedNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                    logits: Array2::zeros(l.logits.raw_dim()),
                })
                .collect(),
        }
    }

    /// Largest absolute entry across all gradient tensors.
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).chain(l.logits.iter()))
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

impl GatedNetwork {
    /// Builds a network with He-uniform weights
    /// (`U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`), zero biases, and every gate
    /// logit set to `logit(init_retain_prob)`. Weights are drawn layer by
    /// layer in row-major order.
    pub fn new(specs: &[LayerSpec], init_retain_prob: f64, temperature: Temperature, rng: &mut Rng) -> Result<Self> {
        validate_specs(specs)?;
        if !(init_retain_prob > 0.0 && init_retain_prob < 1.0) {
            return Err(Error::Config(format!(
                "init_retain_prob must lie in (0, 1), got {init_retain_prob}"
            )));
        }
        let phi0 = gates::logit(init_retain_prob);
        let layers = specs
            .iter()
            .map(|&spec| {
                let limit = (6.0 / spec.input_size as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((spec.output_size, spec.input_size), || {
                    rng.uniform_range(-limit, limit)
                });
                GatedLayer {
                    spec,
                    weights,
                    bias: Array1::zeros(spec.output_size),
                    logits: Array2::from_elem((spec.output_size, spec.input_size), phi0),
                }
            })
            .collect();
        Ok(Self {
            layers,
            temperature,
            offsets: gate_offsets(specs),
        })
    }

    /// Reassembles a network from stored parts, checking every shape.
    pub fn from_layers(layers: Vec<GatedLayer>, temperature: Temperature) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_specs(&specs)?;
        for l in &layers {
            let shape = (l.spec.output_size, l.spec.input_size);
            if l.weights.dim() != shape || l.logits.dim() != shape || l.bias.len() != shape.0 {
                return Err(Error::shape(
                    "layer parameters",
                    format!("{shape:?}"),
                    format!("{:?}/{:?}/{}", l.weights.dim(), l.logits.dim(), l.bias.len()),
                ));
            }
        }
        Ok(Self {
            layers,
            temperature,
            offsets: gate_offsets(&specs),
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].spec.input_size
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output_size
    }

    /// Total number of gateable connections.
    pub fn gate_count(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// All gate logits, flattened in global gate order.
    pub fn flat_logits(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.gate_count());
        for l in &self.layers {
            out.extend(l.logits.iter().copied());
        }
        out
    }

    pub fn gate_params(&self) -> gates::GateParams {
        gates::GateParams::new(self.flat_logits(), self.temperature)
    }

    pub fn set_all_logits(&mut self, value: f64) {
        for l in &mut self.layers {
            l.logits.fill(value);
        }
    }

    /// Draws a fresh gate sample for every connection at the current
    /// temperature.
    pub fn sample_gates(&self, rng: &mut Rng) -> GateSample {
        let mut logits = Vec::with_capacity(self.gate_count());
        for l in &self.layers {
            logits.extend(l.logits.iter().copied());
        }
        gates::sample_gates(&logits, self.temperature, rng)
    }

    /// `mask_i = 1` iff `sigmoid(φ_i) >= 0.5`, i.e. iff `φ_i >= 0`.
    pub fn deterministic_gates(&self) -> Vec<bool> {
        self.layers
            .iter()
            .flat_map(|l| l.logits.iter().map(|&p| p >= 0.0))
            .collect()
    }

    fn check_gates(&self, gates: &GateSample) -> Result<()> {
        if gates.len() != self.gate_count() {
            return Err(Error::shape("gate sample", self.gate_count(), gates.len()));
        }
        Ok(())
    }

    fn layer_gates<'g>(&self, values: &'g [f64], k: usize) -> ArrayView2<'g, f64> {
        let spec = self.layers[k].spec;
        ArrayView2::from_shape(
            (spec.output_size, spec.input_size),
            &values[self.offsets[k]..self.offsets[k + 1]],
        )
        .expect("gate offsets agree with layer shapes")
    }

    /// Gated forward pass: each layer computes `act(h (W ⊙ g)^T + b)` with
    /// the hard gate values. Returns last-layer scores (before softmax or
    /// sigmoid) and the tape for [`GatedNetwork::backward`].
    pub fn forward<'a>(&self, gates: &'a GateSample, x: ArrayView2<'a, f64>) -> Result<(Array2<f64>, ForwardTape<'a>)> {
        self.check_gates(gates)?;
        if x.ncols() != self.input_size() {
            return Err(Error::shape("forward input width", self.input_size(), x.ncols()));
        }
        let mut effective = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut activations: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let eff = &layer.weights * &self.layer_gates(&gates.hard, k);
            let h = if k == 0 { x } else { activations[k - 1].view() };
            let z = dense(h, &eff, &layer.bias);
            let act = layer.spec.activation;
            let a = z.mapv(|v| act.apply(v));
            effective.push(eff);
            pre_activations.push(z);
            activations.push(a);
        }
        let out = activations.last().unwrap().clone();
        Ok((
            out,
            ForwardTape {
                input: x,
                gates,
                effective,
                pre_activations,
                activations,
            },
        ))
    }

    /// Forward pass that keeps no tape.
    pub fn predict(&self, gates: &GateSample, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_gates(gates)?;
        if x.ncols() != self.input_size() {
            return Err(Error::shape("forward input width", self.input_size(), x.ncols()));
        }
        let mut h: Option<Array2<f64>> = None;
        for (k, layer) in self.layers.iter().enumerate() {
            let eff = &layer.weights * &self.layer_gates(&gates.hard, k);
            let input = h.as_ref().map(|a| a.view()).unwrap_or(x);
            let act = layer.spec.activation;
            let mut z = dense(input, &eff, &layer.bias);
            z.mapv_inplace(|v| act.apply(v));
            h = Some(z);
        }
        Ok(h.unwrap())
    }

    /// Reverse pass for `dL/d outputs`.
    pub fn backward(&self, tape: &ForwardTape<'_>, d_outputs: ArrayView2<'_, f64>) -> Result<Gradients> {
        self.backward_with_gate_grad(tape, d_outputs, 0.0)
    }

    /// Reverse pass with an extra gradient `gate_grad` added to `dL/dg` for
    /// every gate (the derivative of a loss term on the mean gate value).
    ///
    /// Per connection, with `E = W ⊙ hard`:
    /// `dW = dE ⊙ hard`, `dL/dg = dE ⊙ W + gate_grad`, and
    /// `dφ = dL/dg · d soft / d φ` (straight-through).
    pub fn backward_with_gate_grad(
        &self,
        tape: &ForwardTape<'_>,
        d_outputs: ArrayView2<'_, f64>,
        gate_grad: f64,
    ) -> Result<Gradients> {
        self.check_gates(tape.gates)?;
        if tape.effective.len() != self.layers.len() {
            return Err(Error::shape("tape layers", self.layers.len(), tape.effective.len()));
        }
        let out_shape = tape.outputs().dim();
        if d_outputs.dim() != out_shape {
            return Err(Error::shape(
                "output gradient",
                format!("{out_shape:?}"),
                format!("{:?}", d_outputs.dim()),
            ));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if tape.effective[k].dim() != layer.weights.dim() {
                return Err(Error::shape(
                    "stale tape",
                    format!("{:?}", layer.weights.dim()),
                    format!("{:?}", tape.effective[k].dim()),
                ));
            }
        }

        let gates = tape.gates;
        let tau = gates.tau;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = d_outputs.to_owned();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let mut dz = upstream;
            if layer.spec.activation == Activation::Relu {
                Zip::from(&mut dz).and(&tape.pre_activations[k]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let h = if k == 0 {
                tape.input
            } else {
                tape.activations[k - 1].view()
            };
            let d_eff = dz.t().dot(&h);
            let db = dz.sum_axis(Axis(0));

            let hard = self.layer_gates(&gates.hard, k);
            let dw = &d_eff * &hard;
            let dlogits = if gates.pinned {
                Array2::zeros(layer.logits.raw_dim())
            } else {
                let xi = self.layer_gates(&gates.xi, k);
                let xp = self.layer_gates(&gates.xi_prime, k);
                let mut dl = Array2::zeros(layer.logits.raw_dim());
                Zip::from(&mut dl)
                    .and(&d_eff)
                    .and(&layer.weights)
                    .and(&layer.logits)
                    .and(&xi)
                    .and(&xp)
                    .for_each(|out, &de, &w, &phi, &a, &b| {
                        *out = (de * w + gate_grad) * gates::soft_gate_grad(phi, tau, a, b);
                    });
                dl
            };

            upstream = if k > 0 {
                dz.dot(&tape.effective[k])
            } else {
                Array2::zeros((0, 0))
            };
            grads.push(LayerGradients {
                weights: dw,
                bias: db,
                logits: dlogits,
            });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }
}

/// `h W^T + b` for `h: (rows, in)`, `W: (out, in)`.
pub(crate) fn dense(h: ArrayView2<'_, f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut z = h.dot(&w.t());
    z += b;
    z
}
