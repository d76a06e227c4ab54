//! User-assisted single-image reflection separation with a Gaussian mixture
//! patch prior.
//!
//! An observed patch `y = x1 + x2` of two natural-image patches has an exact
//! posterior over `x1` that is itself a mixture with one component per
//! ordered pair of prior components. The crate builds that posterior,
//! proposes its highest-weight means as candidate local decompositions, and
//! propagates selected candidates to a full-image separation by minimizing
//! the negative expected patch log likelihood plus annotation penalties.

pub mod bench;
pub mod error;
pub mod gmm;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod patch;
pub mod pipeline;
pub mod posterior;
pub mod render;
pub mod separation;
pub mod session;

pub use error::{Error, Result};
pub use gmm::{GmmPrior, TrainConfig};
pub use patch::{extract_patches, Image, Patch, PATCH_DIM, PATCH_SIDE};
pub use posterior::{CandidateSet, PairCaching, PairTable, PosteriorGmm};
pub use separation::{Annotations, ComponentAnnotation, FilterAnnotation, SeparationConfig, SeparationResult};
