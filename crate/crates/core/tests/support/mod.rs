//! Test-side oracles written with plain loops, independent of the library's
//! ndarray code paths.

#![allow(dead_code)]

use gumbel_prune::data::Targets;
use gumbel_prune::network::GatedLayer;
use gumbel_prune::train::{self, LossKind, PrunedNetwork, TrainConfig};
use gumbel_prune::{Activation, GateSample, GatedNetwork, LayerSpec, Rng, Temperature};
use ndarray::{Array1, Array2};

pub fn sigmoid_ref(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The gate value as a function of `φ` under frozen noise: the realized hard
/// value at `φ0`, shifted by the change of the relaxed value. Its derivative
/// is the straight-through derivative, its value at `φ0` is the hard gate.
pub fn surrogate_gate(phi: f64, phi0: f64, hard0: f64, xi: f64, xp: f64, tau: f64) -> f64 {
    hard0 + sigmoid_ref((phi + xi - xp) / tau) - sigmoid_ref((phi0 + xi - xp) / tau)
}

/// A gated network with one frozen gate sample.
#[derive(Clone)]
pub struct Frozen {
    pub acts: Vec<Activation>,
    /// Per layer `[out][in]`.
    pub w: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<f64>>,
    pub phi: Vec<Vec<Vec<f64>>>,
    pub phi0: Vec<Vec<Vec<f64>>>,
    pub hard0: Vec<Vec<Vec<f64>>>,
    pub xi: Vec<Vec<Vec<f64>>>,
    pub xp: Vec<Vec<Vec<f64>>>,
    pub tau: f64,
}

fn unflatten(flat: &[f64], net: &GatedNetwork) -> Vec<Vec<Vec<f64>>> {
    let mut at = 0;
    net.layers
        .iter()
        .map(|l| {
            (0..l.spec.output_size)
                .map(|_| {
                    let row = flat[at..at + l.spec.input_size].to_vec();
                    at += l.spec.input_size;
                    row
                })
                .collect()
        })
        .collect()
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

impl Frozen {
    pub fn new(net: &GatedNetwork, gates: &GateSample) -> Self {
        let phi: Vec<_> = net.layers.iter().map(|l| rows(&l.logits)).collect();
        Self {
            acts: net.layers.iter().map(|l| l.spec.activation).collect(),
            w: net.layers.iter().map(|l| rows(&l.weights)).collect(),
            b: net.layers.iter().map(|l| l.bias.to_vec()).collect(),
            phi0: phi.clone(),
            phi,
            hard0: unflatten(&gates.hard, net),
            xi: unflatten(&gates.xi, net),
            xp: unflatten(&gates.xi_prime, net),
            tau: gates.tau.get(),
        }
    }

    pub fn gate(&self, k: usize, o: usize, i: usize) -> f64 {
        surrogate_gate(
            self.phi[k][o][i],
            self.phi0[k][o][i],
            self.hard0[k][o][i],
            self.xi[k][o][i],
            self.xp[k][o][i],
            self.tau,
        )
    }

    /// Returns outputs and all hidden pre-activations.
    pub fn forward(&self, x: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut pre_all = Vec::new();
        let mut out = Vec::new();
        for row in x {
            let mut h = row.clone();
            for k in 0..self.w.len() {
                let mut next = Vec::with_capacity(self.w[k].len());
                for o in 0..self.w[k].len() {
                    let mut z = self.b[k][o];
                    for (i, hv) in h.iter().enumerate() {
                        z += hv * self.w[k][o][i] * self.gate(k, o, i);
                    }
                    next.push(match self.acts[k] {
                        Activation::Relu => {
                            pre_all.push(z);
                            if z > 0.0 {
                                z
                            } else {
                                0.0
                            }
                        }
                        Activation::Identity => z,
                    });
                }
                h = next;
            }
            out.push(h);
        }
        (out, pre_all)
    }

    pub fn loss(&self, x: &[Vec<f64>], t: &Targets, alpha: f64, target_density: f64) -> f64 {
        let (z, _) = self.forward(x);
        let pred = match t {
            Targets::Classes { labels, .. } => {
                let mut s = 0.0;
                for (r, zr) in z.iter().enumerate() {
                    let denom: f64 = zr.iter().map(|v| v.exp()).sum();
                    s += -(zr[labels[r]].exp() / denom).ln();
                }
                s / z.len() as f64
            }
            Targets::Binary(y) => {
                let mut s = 0.0;
                let mut n = 0.0;
                for (r, zr) in z.iter().enumerate() {
                    for (c, &v) in zr.iter().enumerate() {
                        let p = sigmoid_ref(v);
                        let t = y[[r, c]];
                        s -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
                        n += 1.0;
                    }
                }
                s / n
            }
        };
        let mut total = 0.0;
        let mut count = 0.0;
        for k in 0..self.w.len() {
            for o in 0..self.w[k].len() {
                for i in 0..self.w[k][o].len() {
                    total += self.gate(k, o, i);
                    count += 1.0;
                }
            }
        }
        pred + alpha * (total / count - target_density).abs()
    }
}

/// Which parameter a finite difference perturbs.
#[derive(Debug, Clone, Copy)]
pub enum Param {
    W(usize, usize, usize),
    B(usize, usize),
    Phi(usize, usize, usize),
}

impl Frozen {
    fn slot(&mut self, p: Param) -> &mut f64 {
        match p {
            Param::W(k, o, i) => &mut self.w[k][o][i],
            Param::B(k, o) => &mut self.b[k][o],
            Param::Phi(k, o, i) => &mut self.phi[k][o][i],
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut v = Vec::new();
        for k in 0..self.w.len() {
            for o in 0..self.w[k].len() {
                for i in 0..self.w[k][o].len() {
                    v.push(Param::W(k, o, i));
                    v.push(Param::Phi(k, o, i));
                }
                v.push(Param::B(k, o));
            }
        }
        v
    }

    /// Five-point central difference.
    pub fn numeric_grad(&self, p: Param, h: f64, f: impl Fn(&Frozen) -> f64) -> f64 {
        let at = |delta: f64| {
            let mut c = self.clone();
            *c.slot(p) += delta;
            f(&c)
        };
        (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
    }
}

pub struct GradCheck {
    pub max_rel: f64,
    pub max_abs: f64,
    pub n_params: usize,
    pub loss_gap: f64,
}

/// Denominator floor for relative errors; components smaller than this are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// Margin that hidden pre-activations must keep from the ReLU kink so the
/// finite differences never straddle it.
const KINK_MARGIN: f64 = 1e-2;
const FD_STEP: f64 = 1e-4;

/// Builds a random small gated network (2–3 layers, widths 1..=8), draws a
/// gate sample, and compares the library's gradients against finite
/// differences of the oracle loss. Returns `None` when the draw lands near
/// a ReLU kink or the density kink (the caller redraws).
pub fn gradcheck_once(seed: u64) -> Option<GradCheck> {
    let mut rng = Rng::new(seed);
    let n_layers = 2 + rng.below(2);
    let widths: Vec<usize> = (0..=n_layers).map(|_| 1 + rng.below(8)).collect();
    let specs = LayerSpec::chain(&widths).unwrap();
    let tau = rng.uniform_range(0.5, 2.0);
    let mut net = GatedNetwork::new(&specs, 0.5, Temperature::new(tau).unwrap(), &mut rng).unwrap();
    for l in &mut net.layers {
        l.logits.mapv_inplace(|_| rng.uniform_range(-3.0, 3.0));
        l.bias.mapv_inplace(|_| rng.uniform_range(-0.5, 0.5));
    }
    let gates = net.sample_gates(&mut rng);

    let batch = 4;
    let p = widths[0];
    let q = *widths.last().unwrap();
    let x = Array2::from_shape_simple_fn((batch, p), || rng.uniform_range(-1.0, 1.0));
    let (targets, kind) = if rng.below(2) == 0 {
        let labels = (0..batch).map(|_| rng.below(q)).collect();
        (Targets::Classes { labels, n_classes: q }, LossKind::SoftmaxXent)
    } else {
        let y = Array2::from_shape_simple_fn((batch, q), || rng.below(2) as f64);
        (Targets::Binary(y), LossKind::SigmoidBce)
    };
    let alpha = rng.uniform_range(0.0, 5.0);
    let density0 = gates.hard.iter().sum::<f64>() / gates.len() as f64;
    let target_density = rng.uniform_range(0.01, 1.0);
    if (density0 - target_density).abs() < 0.05 {
        return None;
    }

    let frozen = Frozen::new(&net, &gates);
    let xr: Vec<Vec<f64>> = x.outer_iter().map(|r| r.to_vec()).collect();
    let (_, pre) = frozen.forward(&xr);
    if pre.iter().any(|z| z.abs() < KINK_MARGIN) {
        return None;
    }

    let cfg = TrainConfig {
        alpha,
        target_density,
        ..Default::default()
    };
    let (out, tape) = net.forward(&gates, x.view()).unwrap();
    let parts = train::total_loss(out.view(), &targets, &gates, &cfg, kind).unwrap();
    let grads = net
        .backward_with_gate_grad(&tape, parts.d_outputs.view(), parts.gate_grad)
        .unwrap();

    let f = |c: &Frozen| c.loss(&xr, &targets, alpha, target_density);
    let loss_gap = (f(&frozen) - parts.total).abs();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let params = frozen.params();
    for &prm in &params {
        let analytic = match prm {
            Param::W(k, o, i) => grads.layers[k].weights[[o, i]],
            Param::B(k, o) => grads.layers[k].bias[o],
            Param::Phi(k, o, i) => grads.layers[k].logits[[o, i]],
        };
        let numeric = frozen.numeric_grad(prm, FD_STEP, f);
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Some(GradCheck {
        max_rel,
        max_abs,
        n_params: params.len(),
        loss_gap,
    })
}

/// Random pruned network with standard-normal-ish weights and a Bernoulli
/// mask of the given density.
pub fn random_pruned(widths: &[usize], density: f64, rng: &mut Rng) -> PrunedNetwork {
    let specs = LayerSpec::chain(widths).unwrap();
    let layers = specs
        .iter()
        .map(|&spec| {
            let weights = Array2::from_shape_simple_fn((spec.output_size, spec.input_size), || rng.normal());
            let logits = Array2::from_shape_simple_fn((spec.output_size, spec.input_size), || {
                if rng.uniform() < density {
                    1.0
                } else {
                    -1.0
                }
            });
            GatedLayer {
                spec,
                weights,
                bias: Array1::zeros(spec.output_size),
                logits,
            }
        })
        .collect();
    let net = GatedNetwork::from_layers(layers, Temperature::new(1.0).unwrap()).unwrap();
    train::finalize(&net)
}

/// Per-layer adjacency `[layer][out][in]` of retained connections.
pub fn adjacency(p: &PrunedNetwork) -> Vec<Vec<Vec<bool>>> {
    p.layers
        .iter()
        .map(|l| l.mask.outer_iter().map(|r| r.to_vec()).collect())
        .collect()
}

/// Inputs with a retained path to `output`, found by exhaustive forward DFS
/// from every input.
pub fn reachable_inputs(p: &PrunedNetwork, output: usize) -> Vec<bool> {
    let adj = adjacency(p);
    let n_in = p.layers[0].spec.input_size;
    fn dfs(adj: &[Vec<Vec<bool>>], layer: usize, node: usize, target: usize) -> bool {
        if layer == adj.len() {
            return node == target;
        }
        (0..adj[layer].len()).any(|o| adj[layer][o][node] && dfs(adj, layer + 1, o, target))
    }
    (0..n_in).map(|i| dfs(&adj, 0, i, output)).collect()
}

/// True when every hidden node lying on some retained path into `output`
/// has at least one retained incoming connection, i.e. no importance mass
/// leaks into a dead end on the way back to the inputs.
pub fn fully_rooted(p: &PrunedNetwork, output: usize) -> bool {
    let adj = adjacency(p);
    let depth = adj.len();
    // feeds[l][j]: node j of layer l has a retained path to `output`
    let mut feeds: Vec<Vec<bool>> = vec![vec![]; depth + 1];
    feeds[depth] = (0..p.layers[depth - 1].spec.output_size).map(|o| o == output).collect();
    for l in (0..depth).rev() {
        let width = p.layers[l].spec.input_size;
        feeds[l] = (0..width)
            .map(|j| (0..adj[l].len()).any(|o| adj[l][o][j] && feeds[l + 1][o]))
            .collect();
    }
    for l in 1..depth {
        for j in 0..feeds[l].len() {
            let has_in = adj[l - 1][j].iter().any(|&m| m);
            if feeds[l][j] && !has_in {
                return false;
            }
        }
    }
    // the output itself needs an incoming edge for a non-zero column
    adj[depth - 1][output].iter().any(|&m| m)
}

/// `I` by explicit path enumeration: sum over every input→output path of
/// the product of per-layer shares `|w| / Σ|w_col|`.
pub fn path_sum_importance(p: &PrunedNetwork) -> Array2<f64> {
    let n_in = p.layers[0].spec.input_size;
    let n_out = p.layers.last().unwrap().spec.output_size;
    let share = |k: usize, o: usize, i: usize| {
        let w = &p.layers[k].weights;
        let col: f64 = w.row(o).iter().map(|v| v.abs()).sum();
        if col > 0.0 {
            w[[o, i]].abs() / col
        } else {
            0.0
        }
    };
    fn walk(
        layer: usize,
        node: usize,
        acc: f64,
        depth: usize,
        share: &dyn Fn(usize, usize, usize) -> f64,
        widths: &[usize],
        out: &mut [f64],
    ) {
        if layer == depth {
            out[node] += acc;
            return;
        }
        for o in 0..widths[layer + 1] {
            let s = share(layer, o, node);
            if s != 0.0 {
                walk(layer + 1, o, acc * s, depth, share, widths, out);
            }
        }
    }
    let mut widths = vec![n_in];
    widths.extend(p.layers.iter().map(|l| l.spec.output_size));
    let mut imp = Array2::zeros((n_in, n_out));
    for i in 0..n_in {
        let mut row = vec![0.0; n_out];
        walk(0, i, 1.0, p.layers.len(), &share, &widths, &mut row);
        for (o, v) in row.into_iter().enumerate() {
            imp[[i, o]] = v;
        }
    }
    imp
}
