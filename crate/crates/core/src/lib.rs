//! Differentiable connection pruning with binary Gumbel-Softmax gates.
//!
//! Every weight of a dense network gets a learnable retention logit. Each
//! training step samples hard 0/1 gates with a straight-through Gumbel-Softmax
//! relaxation, multiplies them into the weights, and descends on
//! `prediction loss + α · |mean gate − target density|` for weights, biases
//! and logits together. Finalization keeps connections whose retention
//! probability is at least one half, and the resulting sparse topology is
//! read directly for feature importance, input→output pathways and
//! structural symmetry.
//!
//! ```
//! use gumbel_prune::{data, train, GatedNetwork, LayerSpec, Rng, Temperature, TrainConfig};
//!
//! let ds = data::gen_synthetic(&data::SyntheticSpec {
//!     scenario: data::Scenario::Irrelevance,
//!     n: 400,
//!     noise_std: 0.0,
//!     seed: 1,
//! })?;
//! let (tr, te) = data::split(&ds, 0.25, 2)?;
//! let specs = LayerSpec::chain(&[4, 4, 1])?;
//! let mut net = GatedNetwork::new(&specs, 0.5, Temperature::new(2.0)?, &mut Rng::new(0))?;
//! let cfg = TrainConfig { epochs: 2, target_density: 0.3, ..Default::default() };
//! let report = train::fit(&mut net, &tr, &te, &cfg)?;
//! let pruned = train::finalize(&net);
//! assert_eq!(report.retained_count, pruned.retained_count());
//! # Ok::<(), gumbel_prune::Error>(())
//! ```

pub mod baseline;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gates;
pub mod interpret;
pub mod network;
pub mod optim;
pub mod persist;
pub mod train;

pub use baseline::{random_mask, train_fixed_mask, RandomMask, RandomMaskSpec};
pub use data::{Dataset, Targets};
pub use error::{Error, Result};
pub use experiment::{Method, RunOutcome};
pub use gates::{DensityMode, GateParams, GateSample, Rng, Temperature};
pub use interpret::{PathwayGraph, SymmetryPartition};
pub use network::{Activation, ForwardTape, GatedNetwork, Gradients, LayerSpec};
pub use optim::OptimizerKind;
pub use persist::{Checkpoint, ExperimentConfig, PrunedArtifact};
pub use train::{LossKind, PrunedNetwork, TrainConfig, TrainReport};
