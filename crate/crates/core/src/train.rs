//! Loss, temperature schedule, training loop and finalization.
//!
//! The objective per mini-batch is
//! `prediction + α · |mean(g) − D_target|`, where `g` are the straight-through
//! gates of the same sample that gated the forward pass.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::gates::{DensityMode, GateSample, Rng, Temperature};
use crate::network::{dense, Activation, GatedNetwork, LayerSpec};
use crate::optim::{Optimizer, OptimizerKind};

/// Stream ids derived from [`TrainConfig::seed`].
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const GATES: u64 = 2;
    pub const BASELINE_MASK: u64 = 3;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over rows of softmax cross-entropy.
    SoftmaxXent,
    /// Mean over rows and labels of sigmoid binary cross-entropy.
    SigmoidBce,
}

impl LossKind {
    pub fn for_targets(targets: &Targets) -> Self {
        match targets {
            Targets::Classes { .. } => LossKind::SoftmaxXent,
            Targets::Binary(_) => LossKind::SigmoidBce,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::target_density")]
    pub target_density: f64,
    #[serde(default = "defaults::tau_start")]
    pub tau_start: f64,
    #[serde(default = "defaults::tau_end")]
    pub tau_end: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// Learning rate for gate logits; `None` uses `learning_rate`.
    #[serde(default)]
    pub gate_learning_rate: Option<f64>,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    /// `None` picks from the dataset targets.
    #[serde(default)]
    pub loss: Option<LossKind>,
    /// Epochs of weight-only training on the finalized mask.
    #[serde(default)]
    pub finetune_epochs: usize,
    /// Evaluate training accuracy at the end of every epoch.
    #[serde(default = "defaults::yes")]
    pub eval_train: bool,
}

mod defaults {
    pub fn alpha() -> f64 {
        10.0
    }
    pub fn target_density() -> f64 {
        0.1
    }
    pub fn tau_start() -> f64 {
        2.0
    }
    pub fn tau_end() -> f64 {
        0.5
    }
    pub fn epochs() -> usize {
        20
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn yes() -> bool {
        true
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: defaults::alpha(),
            target_density: defaults::target_density(),
            tau_start: defaults::tau_start(),
            tau_end: defaults::tau_end(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            gate_learning_rate: None,
            optimizer: OptimizerKind::default(),
            seed: 0,
            loss: None,
            finetune_epochs: 0,
            eval_train: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.target_density > 0.0 && self.target_density <= 1.0) {
            return bad(format!(
                "target_density must lie in (0, 1], got {}",
                self.target_density
            ));
        }
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end && self.tau_start.is_finite()) {
            return bad(format!(
                "temperatures need tau_start >= tau_end > 0, got {} and {}",
                self.tau_start, self.tau_end
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        let positive = |v: f64| v > 0.0;
        if !positive(self.learning_rate) || self.gate_learning_rate.is_some_and(|g| !positive(g)) {
            return bad("learning rates must be positive".into());
        }
        Ok(())
    }

    pub fn gate_lr(&self) -> f64 {
        self.gate_learning_rate.unwrap_or(self.learning_rate)
    }
}

/// Geometric interpolation `τ_start · (τ_end / τ_start)^(step / total)`.
pub fn temperature_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return cfg.tau_start;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    cfg.tau_start * (cfg.tau_end / cfg.tau_start).powf(frac)
}

/// Prediction loss and its gradient w.r.t. the output scores.
pub fn prediction_loss(outputs: ArrayView2<'_, f64>, targets: &Targets, kind: LossKind) -> Result<(f64, Array2<f64>)> {
    if outputs.nrows() != targets.len() {
        return Err(Error::shape("loss batch rows", targets.len(), outputs.nrows()));
    }
    if outputs.ncols() != targets.output_width() {
        return Err(Error::shape(
            "loss output width",
            targets.output_width(),
            outputs.ncols(),
        ));
    }
    let rows = outputs.nrows().max(1) as f64;
    match (kind, targets) {
        (LossKind::SoftmaxXent, Targets::Classes { labels, .. }) => {
            let mut grad = Array2::zeros(outputs.raw_dim());
            let mut loss = 0.0;
            for (r, (z, mut g)) in outputs.outer_iter().zip(grad.outer_iter_mut()).enumerate() {
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
                let log_sum = max + sum.ln();
                loss += log_sum - z[labels[r]];
                for (c, gv) in g.iter_mut().enumerate() {
                    let p = (z[c] - log_sum).exp();
                    *gv = (p - f64::from(u8::from(c == labels[r]))) / rows;
                }
            }
            Ok((loss / rows, grad))
        }
        (LossKind::SigmoidBce, Targets::Binary(y)) => {
            let n = (outputs.len()).max(1) as f64;
            let mut grad = Array2::zeros(outputs.raw_dim());
            let mut loss = 0.0;
            ndarray::Zip::from(&mut grad).and(outputs).and(y).for_each(|g, &z, &t| {
                loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                *g = (crate::gates::sigmoid(z) - t) / n;
            });
            Ok((loss / n, grad))
        }
        (kind, _) => Err(Error::Config(format!("loss {kind:?} does not fit these targets"))),
    }
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub prediction: f64,
    pub sparsity: f64,
    pub total: f64,
    pub d_outputs: Array2<f64>,
    /// `d sparsity / d g_i`, identical for every gate.
    pub gate_grad: f64,
}

/// `prediction + α · |mean(hard) − D_target|`, with the subgradient of `|·|`
/// at zero taken as zero.
pub fn total_loss(
    outputs: ArrayView2<'_, f64>,
    targets: &Targets,
    gates: &GateSample,
    cfg: &TrainConfig,
    kind: LossKind,
) -> Result<LossParts> {
    let (prediction, d_outputs) = prediction_loss(outputs, targets, kind)?;
    let (sparsity, gate_grad) = sparsity_term(gates, cfg.alpha, cfg.target_density);
    Ok(LossParts {
        prediction,
        sparsity,
        total: prediction + sparsity,
        d_outputs,
        gate_grad,
    })
}

pub fn sparsity_term(gates: &GateSample, alpha: f64, target_density: f64) -> (f64, f64) {
    if gates.is_empty() {
        return (0.0, 0.0);
    }
    let gap = gates.density(DensityMode::Hard) - target_density;
    let sign = if gap > 0.0 {
        1.0
    } else if gap < 0.0 {
        -1.0
    } else {
        0.0
    };
    (alpha * gap.abs(), alpha * sign / gates.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub prediction_loss: f64,
    pub sparsity_loss: f64,
    pub total_loss: f64,
    pub soft_density: f64,
    pub hard_density: f64,
    pub tau: f64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: f64,
    /// Density of the deterministic mask at the end of the epoch.
    pub mask_density: f64,
    pub layer_densities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub gate_count: usize,
    pub retained_count: usize,
    pub pruned_density: f64,
    pub test_accuracy: f64,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,prediction_loss,sparsity_loss,total_loss,soft_density,hard_density,tau,train_accuracy,test_accuracy,mask_density,layer_densities";

    /// One header line plus one line per epoch. Layer densities are joined
    /// with `;`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let layers: Vec<String> = e.layer_densities.iter().map(|d| format!("{d}")).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.prediction_loss,
                e.sparsity_loss,
                e.total_loss,
                e.soft_density,
                e.hard_density,
                e.tau,
                e.train_accuracy.map(|a| a.to_string()).unwrap_or_default(),
                e.test_accuracy,
                e.mask_density,
                layers.join(";")
            ));
        }
        out
    }
}

/// Anything that maps a feature batch to output scores without sampling.
pub trait Predictor {
    fn input_size(&self) -> usize;
    fn scores(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedLayer {
    pub spec: LayerSpec,
    /// `W ⊙ mask`, `(out, in)`.
    pub weights: Array2<f64>,
    pub bias: ndarray::Array1<f64>,
    pub mask: Array2<bool>,
}

/// Fixed sparse network; its forward pass involves no randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedNetwork {
    pub layers: Vec<PrunedLayer>,
}

impl PrunedNetwork {
    /// Applies `mask` (global gate order) to `net`'s weights.
    pub fn from_mask(net: &GatedNetwork, mask: &[bool]) -> Result<Self> {
        if mask.len() != net.gate_count() {
            return Err(Error::shape("mask length", net.gate_count(), mask.len()));
        }
        let offsets = net.offsets();
        let layers = net
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let shape = l.weights.raw_dim();
                let m =
                    Array2::from_shape_vec(shape, mask[offsets[k]..offsets[k + 1]].to_vec()).expect("offsets agree");
                let mf = m.mapv(|b| if b { 1.0 } else { 0.0 });
                PrunedLayer {
                    spec: l.spec,
                    weights: &l.weights * &mf,
                    bias: l.bias.clone(),
                    mask: m,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn gate_count(&self) -> usize {
        self.layers.iter().map(|l| l.mask.len()).sum()
    }

    pub fn retained_count(&self) -> usize {
        self.layers.iter().map(|l| l.mask.iter().filter(|&&m| m).count()).sum()
    }

    pub fn density(&self) -> f64 {
        self.retained_count() as f64 / self.gate_count().max(1) as f64
    }

    pub fn layer_densities(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| l.mask.iter().filter(|&&m| m).count() as f64 / l.mask.len() as f64)
            .collect()
    }

    pub fn flat_mask(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|l| l.mask.iter().copied()).collect()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.output_size)
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_size() {
            return Err(Error::shape("forward input width", self.input_size(), x.ncols()));
        }
        let mut h: Option<Array2<f64>> = None;
        for layer in &self.layers {
            let input = h.as_ref().map(|a| a.view()).unwrap_or(x);
            let mut z = dense(input, &layer.weights, &layer.bias);
            if layer.spec.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = Some(z);
        }
        Ok(h.expect("at least one layer"))
    }
}

impl Predictor for PrunedNetwork {
    fn input_size(&self) -> usize {
        self.layers[0].spec.input_size
    }

    fn scores(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward(x)
    }
}

/// A gated network evaluated with a fixed gate sample (for example its
/// deterministic mask).
pub struct GatedPredictor<'a> {
    pub net: &'a GatedNetwork,
    pub gates: GateSample,
}

impl<'a> GatedPredictor<'a> {
    pub fn deterministic(net: &'a GatedNetwork) -> Self {
        Self {
            net,
            gates: GateSample::pinned(&net.deterministic_gates()),
        }
    }
}

impl Predictor for GatedPredictor<'_> {
    fn input_size(&self) -> usize {
        self.net.input_size()
    }

    fn scores(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.net.predict(&self.gates, x)
    }
}

/// Mask `sigmoid(φ) >= 0.5` applied to the weights.
pub fn finalize(net: &GatedNetwork) -> PrunedNetwork {
    PrunedNetwork::from_mask(net, &net.deterministic_gates()).expect("mask derived from the same network")
}

const EVAL_CHUNK: usize = 2048;

/// Fraction of correct predictions: argmax match for class targets, and the
/// per-label `score > 0` (sigmoid > 0.5) match rate for binary targets.
pub fn evaluate(model: &impl Predictor, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.n_features() != model.input_size() {
        return Err(Error::shape(
            "evaluation feature width",
            model.input_size(),
            dataset.n_features(),
        ));
    }
    let n = dataset.len();
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let x = dataset.features.slice(ndarray::s![start..end, ..]);
        let scores = model.scores(x)?;
        match &dataset.targets {
            Targets::Classes { labels, n_classes } => {
                if scores.ncols() != *n_classes {
                    return Err(Error::shape("evaluation output width", n_classes, scores.ncols()));
                }
                for (r, row) in scores.outer_iter().enumerate() {
                    correct += usize::from(argmax(row.iter().copied()) == labels[start + r]);
                }
                total += end - start;
            }
            Targets::Binary(y) => {
                if scores.ncols() != y.ncols() {
                    return Err(Error::shape("evaluation output width", y.ncols(), scores.ncols()));
                }
                let ys = y.slice(ndarray::s![start..end, ..]);
                ndarray::Zip::from(&scores).and(&ys).for_each(|&z, &t| {
                    correct += usize::from((z > 0.0) == (t > 0.5));
                });
                total += scores.len();
            }
        }
        start = end;
    }
    Ok(correct as f64 / total as f64)
}

/// First index of the maximum.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum GateMode<'m> {
    Learned,
    Pinned(&'m [bool]),
}

fn check_compat(net: &GatedNetwork, ds: &Dataset, kind: LossKind) -> Result<()> {
    if ds.n_features() != net.input_size() {
        return Err(Error::shape("dataset feature width", net.input_size(), ds.n_features()));
    }
    if ds.targets.output_width() != net.output_size() {
        return Err(Error::shape(
            "dataset output width",
            net.output_size(),
            ds.targets.output_width(),
        ));
    }
    if LossKind::for_targets(&ds.targets) != kind {
        return Err(Error::Config(format!("loss {kind:?} does not fit the dataset targets")));
    }
    Ok(())
}

/// Joint training of weights, biases and gate logits. Each mini-batch draws
/// one gate sample, runs the gated forward pass, and takes one optimizer
/// step on the combined loss. Deterministic for a given config and data.
pub fn fit(net: &mut GatedNetwork, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    run(net, train, test, cfg, GateMode::Learned)
}

pub(crate) fn run(
    net: &mut GatedNetwork,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mode: GateMode<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let kind = cfg.loss.unwrap_or_else(|| LossKind::for_targets(&train.targets));
    check_compat(net, train, kind)?;
    check_compat(net, test, kind)?;
    if let GateMode::Pinned(mask) = mode {
        if mask.len() != net.gate_count() {
            return Err(Error::shape("mask length", net.gate_count(), mask.len()));
        }
    }

    let root = Rng::new(cfg.seed);
    let mut shuffle_rng = root.fork(streams::SHUFFLE);
    let mut gate_rng = root.fork(streams::GATES);
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.gate_lr(), net);

    let n = train.len();
    let batches = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches;
    let pinned = match mode {
        GateMode::Pinned(mask) => Some(GateSample::pinned(mask)),
        GateMode::Learned => None,
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut sums = [0.0f64; 5];
        let mut tau = cfg.tau_start;
        for (batch, rows) in order.chunks(cfg.batch_size).enumerate() {
            tau = temperature_at(step, total_steps, cfg);
            net.temperature = Temperature::new(tau)?;
            let x = train.features.select(Axis(0), rows);
            let y = train.targets.select(rows);
            let sampled;
            let gates = match &pinned {
                Some(g) => g,
                None => {
                    sampled = net.sample_gates(&mut gate_rng);
                    &sampled
                }
            };
            let (out, tape) = net.forward(gates, x.view())?;
            let parts = total_loss(out.view(), &y, gates, cfg, kind)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFinite { epoch, batch });
            }
            let grads = net.backward_with_gate_grad(&tape, parts.d_outputs.view(), parts.gate_grad)?;
            drop(tape);
            optimizer.step(net, &grads, pinned.is_none());

            sums[0] += parts.prediction;
            sums[1] += parts.sparsity;
            sums[2] += parts.total;
            sums[3] += gates.density(DensityMode::Soft);
            sums[4] += gates.density(DensityMode::Hard);
            step += 1;
        }

        let mask_owned;
        let mask: &[bool] = match mode {
            GateMode::Pinned(m) => m,
            GateMode::Learned => {
                mask_owned = net.deterministic_gates();
                &mask_owned
            }
        };
        let pruned = PrunedNetwork::from_mask(net, mask)?;
        let b = batches as f64;
        records.push(EpochRecord {
            epoch,
            prediction_loss: sums[0] / b,
            sparsity_loss: sums[1] / b,
            total_loss: sums[2] / b,
            soft_density: sums[3] / b,
            hard_density: sums[4] / b,
            tau,
            train_accuracy: if cfg.eval_train {
                Some(evaluate(&pruned, train)?)
            } else {
                None
            },
            test_accuracy: evaluate(&pruned, test)?,
            mask_density: pruned.density(),
            layer_densities: pruned.layer_densities(),
        });
    }

    let last = records.last().expect("epochs > 0");
    let final_mask = match mode {
        GateMode::Pinned(m) => m.to_vec(),
        GateMode::Learned => net.deterministic_gates(),
    };
    let retained = final_mask.iter().filter(|&&m| m).count();
    Ok(TrainReport {
        test_accuracy: last.test_accuracy,
        gate_count: net.gate_count(),
        retained_count: retained,
        pruned_density: retained as f64 / net.gate_count() as f64,
        epochs: records,
    })
}

/// [`fit`], then [`finalize`], then `cfg.finetune_epochs` of weight-only
/// training on the finalized mask (if any).
pub fn fit_and_finalize(
    net: &mut GatedNetwork,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<(PrunedNetwork, TrainReport)> {
    let mut report = fit(net, train, test, cfg)?;
    if cfg.finetune_epochs > 0 {
        let mask = net.deterministic_gates();
        let ft_cfg = TrainConfig {
            epochs: cfg.finetune_epochs,
            ..cfg.clone()
        };
        let ft = run(net, train, test, &ft_cfg, GateMode::Pinned(&mask))?;
        let offset = report.epochs.len();
        report.epochs.extend(ft.epochs.into_iter().map(|mut e| {
            e.epoch += offset;
            e
        }));
        report.test_accuracy = ft.test_accuracy;
    }
    Ok((finalize(net), report))
}
