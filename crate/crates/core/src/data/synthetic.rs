use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::gates::Rng;

/// Feature/label wiring of a synthetic task. Features are `U(-1, 1)` and
/// every label is a linear threshold over its relevant features:
///
/// | scenario     | p | labels                                   | unused   |
/// |--------------|---|------------------------------------------|----------|
/// | independence | 6 | `y1 = [x1 + x2 > 0]`, `y2 = [x3 + x4 > 0]` | x5, x6   |
/// | sharing      | 5 | `y1 = [x1 + x2 > 0]`, `y2 = [x2 + x3 > 0]` | x4, x5   |
/// | irrelevance  | 4 | `y = [x1 > 0]`                           | x2..x4   |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Independence,
    Sharing,
    Irrelevance,
}

impl Scenario {
    pub fn n_features(self) -> usize {
        match self {
            Scenario::Independence => 6,
            Scenario::Sharing => 5,
            Scenario::Irrelevance => 4,
        }
    }

    /// Zero-based relevant feature indices per label.
    pub fn relevant(self) -> Vec<Vec<usize>> {
        match self {
            Scenario::Independence => vec![vec![0, 1], vec![2, 3]],
            Scenario::Sharing => vec![vec![0, 1], vec![1, 2]],
            Scenario::Irrelevance => vec![vec![0]],
        }
    }

    /// Zero-based features no label depends on.
    pub fn unused(self) -> Vec<usize> {
        let used: Vec<usize> = self.relevant().concat();
        (0..self.n_features()).filter(|i| !used.contains(i)).collect()
    }

    pub fn n_labels(self) -> usize {
        self.relevant().len()
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independence" => Ok(Scenario::Independence),
            "sharing" => Ok(Scenario::Sharing),
            "irrelevance" => Ok(Scenario::Irrelevance),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub scenario: Scenario,
    pub n: usize,
    /// Std-dev of Gaussian noise added to each label's decision margin.
    #[serde(default)]
    pub noise_std: f64,
    pub seed: u64,
}

/// Per row: draw the `p` features in order, then one standard normal per
/// label scaled by `noise_std`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::Config(format!(
            "noise_std must be non-negative, got {}",
            spec.noise_std
        )));
    }
    let p = spec.scenario.n_features();
    let rules = spec.scenario.relevant();
    let mut rng = Rng::new(spec.seed);
    let mut x = Array2::zeros((spec.n, p));
    let mut y = Array2::zeros((spec.n, rules.len()));
    for r in 0..spec.n {
        for c in 0..p {
            x[[r, c]] = rng.uniform_range(-1.0, 1.0);
        }
        for (k, rule) in rules.iter().enumerate() {
            let margin: f64 = rule.iter().map(|&c| x[[r, c]]).sum();
            let noise = spec.noise_std * rng.normal();
            y[[r, k]] = if margin + noise > 0.0 { 1.0 } else { 0.0 };
        }
    }
    let name = format!("{:?}", spec.scenario).to_lowercase();
    Dataset::new(x, Targets::Binary(y), format!("synthetic:{name}:seed={}", spec.seed))
}
