//! Random pruning at a matched global density.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gates::Rng;
use crate::network::GatedNetwork;
use crate::train::{self, GateMode, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomMaskSpec {
    pub density: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomMask {
    pub mask: Vec<bool>,
    /// Set when `floor(density · d)` was 0 and one connection was kept anyway.
    pub forced_minimum: bool,
}

/// Keeps exactly `floor(density · d)` of the `d` gates (at least one),
/// chosen uniformly without replacement over the whole network.
pub fn random_mask(gate_count: usize, spec: RandomMaskSpec) -> Result<RandomMask> {
    if !(spec.density > 0.0 && spec.density <= 1.0) {
        return Err(Error::Config(format!(
            "mask density must lie in (0, 1], got {}",
            spec.density
        )));
    }
    if gate_count == 0 {
        return Err(Error::Config("network has no gates".into()));
    }
    let wanted = (spec.density * gate_count as f64).floor() as usize;
    let keep = wanted.clamp(1, gate_count);
    let mut positions: Vec<usize> = (0..gate_count).collect();
    let mut rng = Rng::new(spec.seed);
    // partial Fisher-Yates: the first `keep` slots are a uniform subset
    for i in 0..keep {
        let j = i + rng.below(gate_count - i);
        positions.swap(i, j);
    }
    let mut mask = vec![false; gate_count];
    for &p in &positions[..keep] {
        mask[p] = true;
    }
    Ok(RandomMask {
        mask,
        forced_minimum: wanted == 0,
    })
}

/// Trains weights and biases with the gates pinned to `mask`. Gate logits
/// are never touched.
pub fn train_fixed_mask(
    net: &mut GatedNetwork,
    mask: &[bool],
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train::run(net, train_set, test_set, cfg, GateMode::Pinned(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_cardinality() {
        let m = random_mask(10, RandomMaskSpec { density: 0.3, seed: 1 }).unwrap();
        assert_eq!(m.mask.iter().filter(|&&b| b).count(), 3);
        assert!(!m.forced_minimum);
        let m = random_mask(10, RandomMaskSpec { density: 1.0, seed: 1 }).unwrap();
        assert!(m.mask.iter().all(|&b| b));
    }

    #[test]
    fn forces_one_connection() {
        let m = random_mask(10, RandomMaskSpec { density: 0.05, seed: 2 }).unwrap();
        assert_eq!(m.mask.iter().filter(|&&b| b).count(), 1);
        assert!(m.forced_minimum);
        assert!(random_mask(10, RandomMaskSpec { density: 0.0, seed: 2 }).is_err());
        assert!(random_mask(10, RandomMaskSpec { density: 1.5, seed: 2 }).is_err());
    }

    #[test]
    fn positions_are_uniform() {
        let mut freq = [0usize; 10];
        let draws = 10_000;
        for seed in 0..draws {
            let m = random_mask(10, RandomMaskSpec { density: 0.3, seed }).unwrap();
            for (f, &b) in freq.iter_mut().zip(&m.mask) {
                *f += usize::from(b);
            }
        }
        for f in freq {
            let rate = f as f64 / draws as f64;
            assert!((rate - 0.3).abs() < 0.02, "{rate}");
        }
    }
}
