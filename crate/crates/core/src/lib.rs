//! Coreset selection for instruction-tuning data.
//!
//! Samples are represented by unit-norm multimodal activation features from a
//! small reference model. The engine clusters them with spherical k-means,
//! scores each cluster by how similar its centroid is to the others
//! (a transferability proxy) and by how dense it is, turns those scores into
//! a per-cluster budget, and fills each budget with the members whose kernel
//! mean embedding best matches the cluster.
//!
//! Modules, in pipeline order:
//!
//! | module | role |
//! |---|---|
//! | [`features`] | token activations to multimodal feature vectors |
//! | [`feature_store`] | `.feat` binary + manifest JSON |
//! | [`cluster`] | spherical k-means and the `.clusters` file |
//! | [`scoring`] | proxy, density, budget distribution, loss-table analysis |
//! | [`sampling`] | greedy MMD², nearest-centroid and random selection |
//! | [`synth`] | planted-cluster datasets and selection metrics |
//! | [`pipeline`] | stage runners used by the `coincide` binary |

pub mod cluster;
pub mod error;
pub mod feature_store;
pub mod features;
pub mod numeric;
pub mod pipeline;
pub mod sampling;
pub mod scoring;
pub mod synth;

pub use error::{Error, Result};
