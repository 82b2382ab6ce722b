//! First-order updates over `{W, b, φ}`.

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::network::{GatedNetwork, Gradients};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<D: ndarray::Dimension> {
    m: ndarray::Array<f64, D>,
    v: ndarray::Array<f64, D>,
}

impl<D: ndarray::Dimension> Moments<D> {
    fn zeros(dim: D) -> Self {
        Self {
            m: ndarray::Array::zeros(dim.clone()),
            v: ndarray::Array::zeros(dim),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerMoments {
    weights: Moments<ndarray::Ix2>,
    bias: Moments<ndarray::Ix1>,
    logits: Moments<ndarray::Ix2>,
}

/// Optimizer state for one network. Gate logits may use their own learning
/// rate.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    gate_lr: f64,
    step: u64,
    moments: Vec<LayerMoments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, gate_lr: f64, net: &GatedNetwork) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam { .. } => net
                .layers
                .iter()
                .map(|l| LayerMoments {
                    weights: Moments::zeros(l.weights.raw_dim()),
                    bias: Moments::zeros(l.bias.raw_dim()),
                    logits: Moments::zeros(l.logits.raw_dim()),
                })
                .collect(),
        };
        Self {
            kind,
            lr,
            gate_lr,
            step: 0,
            moments,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. With `update_logits == false` the gate logits are
    /// left bit-identical.
    pub fn step(&mut self, net: &mut GatedNetwork, grads: &Gradients, update_logits: bool) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
                    layer.weights.scaled_add(-self.lr, &g.weights);
                    layer.bias.scaled_add(-self.lr, &g.bias);
                    if update_logits {
                        layer.logits.scaled_add(-self.gate_lr, &g.logits);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let adam = AdamCoeffs {
                    beta1,
                    beta2,
                    eps,
                    c1,
                    c2,
                };
                for ((layer, g), mo) in net.layers.iter_mut().zip(&grads.layers).zip(&mut self.moments) {
                    adam.update2(&mut layer.weights, &g.weights, &mut mo.weights, self.lr);
                    adam.update1(&mut layer.bias, &g.bias, &mut mo.bias, self.lr);
                    if update_logits {
                        adam.update2(&mut layer.logits, &g.logits, &mut mo.logits, self.gate_lr);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct AdamCoeffs {
    beta1: f64,
    beta2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
}

impl AdamCoeffs {
    #[inline]
    fn apply(&self, p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64) {
        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        let m_hat = *m / self.c1;
        let v_hat = *v / self.c2;
        *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
    }

    fn update2(&self, p: &mut Array2<f64>, g: &Array2<f64>, mo: &mut Moments<ndarray::Ix2>, lr: f64) {
        Zip::from(p)
            .and(g)
            .and(&mut mo.m)
            .and(&mut mo.v)
            .for_each(|p, &g, m, v| self.apply(p, g, m, v, lr));
    }

    fn update1(&self, p: &mut Array1<f64>, g: &Array1<f64>, mo: &mut Moments<ndarray::Ix1>, lr: f64) {
        Zip::from(p)
            .and(g)
            .and(&mut mo.m)
            .and(&mut mo.v)
            .for_each(|p, &g, m, v| self.apply(p, g, m, v, lr));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::{Rng, Temperature};
    use crate::network::{GatedNetwork, LayerSpec};

    fn net() -> GatedNetwork {
        let specs = LayerSpec::chain(&[2, 1]).unwrap();
        GatedNetwork::new(&specs, 0.5, Temperature::new(1.0).unwrap(), &mut Rng::new(0)).unwrap()
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut n = net();
        let before = n.layers[0].weights.clone();
        let mut g = Gradients::zeros_like(&n);
        g.layers[0].weights.fill(0.37);
        g.layers[0].logits.fill(-2.0);
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.01, 0.1, &n);
        opt.step(&mut n, &g, true);
        // bias-corrected first step is lr * g / (|g| + eps) ≈ lr * sign(g)
        for (a, b) in n.layers[0].weights.iter().zip(before.iter()) {
            assert!(((b - a) - 0.01).abs() < 1e-9);
        }
        assert!(n.layers[0].logits.iter().all(|&p| (p - 0.1).abs() < 1e-9));
    }

    #[test]
    fn frozen_logits_are_untouched() {
        let mut n = net();
        let before = n.layers[0].logits.clone();
        let mut g = Gradients::zeros_like(&n);
        g.layers[0].logits.fill(5.0);
        for kind in [OptimizerKind::Sgd, OptimizerKind::default()] {
            let mut opt = Optimizer::new(kind, 0.1, 0.1, &n);
            opt.step(&mut n, &g, false);
            assert_eq!(n.layers[0].logits, before);
        }
    }

    #[test]
    fn sgd_step() {
        let mut n = net();
        let w0 = n.layers[0].weights.clone();
        let mut g = Gradients::zeros_like(&n);
        g.layers[0].weights.fill(2.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, 0.5, &n);
        opt.step(&mut n, &g, true);
        assert_eq!(n.layers[0].weights, w0 - 1.0);
        assert_eq!(opt.steps_taken(), 1);
    }
}
