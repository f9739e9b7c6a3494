//! Context dependency analysis of vision-transformer patch tokens through a
//! BatchTopK sparse autoencoder: embedding files, SAE training, shifted crop
//! pairs, grid earth mover's distance, feature scores, ablation and probing.

pub mod cds;
pub mod emd;
pub mod error;
pub mod partition;
pub mod probe;
pub mod rng;
pub mod sae;
pub mod scc;
pub mod store;
pub mod synthetic;

pub use error::{Error, Result};
