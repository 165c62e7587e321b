//! Federated learning of stochastic binary masks over frozen signed-constant
//! generator weights.
//!
//! The numeric building blocks are generic over [`Real`]; the federation
//! driver runs in `f64`. The aliases below fix the scalar for callers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod artifact;
pub mod config;
pub mod data;
pub mod dp;
pub mod error;
pub mod federation;
pub mod masking;
pub mod mmd;
pub mod net;
pub mod partition;
pub mod rng;
pub mod scalar;

pub use aggregation::{
    DistanceMetric, HybridConfig, HybridPath, MadaConfig, MadaSpace, UplinkPayload,
};
pub use artifact::{ModelArtifact, StorageReport};
pub use config::{BackwardMode, DownlinkMode, EvalSpec, FederationConfig};
pub use dp::{PrivacySpec, RdpAccountant};
pub use error::{Error, Result};
pub use federation::{run_federation, RoundMetrics, RunOutput, RunSummary, Simulation};
pub use masking::{BinaryMask, SelectionMode};
pub use net::{Activation, GeneratorArch, LayerSpec};
pub use partition::PartitionStrategy;
pub use scalar::Real;

pub type Scores = masking::ScoreState<f64>;
pub type Probs = masking::BernoulliParams<f64>;
pub type Batch = net::SampleBatch<f64>;
pub type Weights = net::SignedConstantWeights<f64>;
pub type Dataset = data::ToyDataset<f64>;
pub type Global = aggregation::GlobalState<f64>;
