//! One configured run: build the network, train it with learned gates or a
//! random fixed mask, and finalize.

use serde::{Deserialize, Serialize};

use crate::baseline::{self, RandomMaskSpec};
use crate::data::Dataset;
use crate::error::Result;
use crate::gates::{Rng, Temperature};
use crate::network::GatedNetwork;
use crate::persist::ExperimentConfig;
use crate::train::{self, streams, PrunedNetwork, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Gates learned jointly with the weights.
    Gumbel,
    /// Uniform random mask at the same density, weights trained only.
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gumbel => "gumbel",
            Method::Random => "random",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub method: Method,
    pub density: f64,
    pub seed: u64,
    pub net: GatedNetwork,
    pub pruned: PrunedNetwork,
    pub report: TrainReport,
    /// Effective training settings (density and seed applied).
    pub train: TrainConfig,
    /// Random masks only: the requested density rounded down to zero
    /// connections and one was kept anyway.
    pub forced_minimum: bool,
}

/// Seed of the random mask used by a run seeded with `seed`.
pub fn mask_seed(seed: u64) -> u64 {
    Rng::new(seed).fork(streams::BASELINE_MASK).next_u64()
}

/// Fresh network for `cfg`, initialized from the `INIT` stream of `seed`.
pub fn init_network(cfg: &ExperimentConfig, seed: u64) -> Result<GatedNetwork> {
    let specs = cfg.layer_specs()?;
    let mut rng = Rng::new(seed).fork(streams::INIT);
    GatedNetwork::new(
        &specs,
        cfg.init_retain_prob,
        Temperature::new(cfg.train.tau_start)?,
        &mut rng,
    )
}

/// Trains one network. For [`Method::Gumbel`], `density` becomes the target
/// density; for [`Method::Random`] it is the mask density.
pub fn run(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    method: Method,
    density: f64,
    seed: u64,
) -> Result<RunOutcome> {
    let mut net = init_network(cfg, seed)?;
    let tc = TrainConfig {
        target_density: density,
        seed,
        ..cfg.train.clone()
    };
    let (pruned, report, forced_minimum) = match method {
        Method::Gumbel => {
            let (pruned, report) = train::fit_and_finalize(&mut net, train_set, test_set, &tc)?;
            (pruned, report, false)
        }
        Method::Random => {
            let mask = baseline::random_mask(
                net.gate_count(),
                RandomMaskSpec {
                    density,
                    seed: mask_seed(seed),
                },
            )?;
            let budget = TrainConfig {
                epochs: tc.epochs + tc.finetune_epochs,
                ..tc.clone()
            };
            let report = baseline::train_fixed_mask(&mut net, &mask.mask, train_set, test_set, &budget)?;
            let pruned = PrunedNetwork::from_mask(&net, &mask.mask)?;
            (pruned, report, mask.forced_minimum)
        }
    };
    Ok(RunOutcome {
        method,
        density,
        seed,
        net,
        pruned,
        report,
        train: tc,
        forced_minimum,
    })
}
