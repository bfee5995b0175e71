//! Cluster significance testing against a unimodal null.
//!
//! Given an `n x p` data matrix and a two-way split, [`run_unpci`] asks
//! whether the split is tighter than what a single unimodal multivariate
//! distribution with the same marginals and covariance would produce.

pub mod clustering;
pub mod covariance;
pub mod data;
pub mod error;
pub mod kde;
pub mod rng;
pub mod simulate;
pub mod theory;
pub mod unpci;

pub use clustering::{cluster, cluster_index, CiVariant, ClusterMethod, Clustering};
pub use covariance::{CovarianceMethod, CovarianceModel, GraphicalLasso};
pub use data::{center, scale_unit_variance, subset_features, DataMatrix, ScaledMatrix};
pub use error::{Error, Result};
pub use kde::{critical_bandwidth, CriticalBandwidth, KdeModel};
pub use unpci::{run_unpci, UnpciConfig, UnpciResult};
