//! Group-representative label map estimation from multiple noisy,
//! partially masked subject label maps.
//!
//! A latent group map `X` (a K-level Potts field) is observed through `M`
//! subject maps `Y_i`. Each subject carries a binary Ising mask `H_i`: where
//! `H_i(s) = 0` the group label propagates (optionally mislabeled with
//! probability `epsilon`), elsewhere the subject shows a draw from `pi`.
//!
//! - [`lattice`]: voxel lattice, 8-neighborhoods, Potts potential, text formats
//! - [`mrf`]: Gibbs simulation and pseudo-likelihood inverse temperatures
//! - [`forward`]: hyperpriors, Model I / Model II observation, datasets
//! - [`infer`]: coordinate-ascent MAP (ICM) and mean-field variational Bayes
//! - [`preproc`]: component distances, clustering and thresholding upstream of inference
//! - [`bench`]: misclassification metric, experiment grid and summaries

pub mod bench;
pub mod error;
pub mod forward;
pub mod infer;
pub mod lattice;
pub mod mrf;
pub mod preproc;
pub mod seed;

pub use error::{Error, Result};
pub use forward::{Dataset, Model, ModelParams};
pub use lattice::{BinaryMask, LabelMap, LatticeDims};
