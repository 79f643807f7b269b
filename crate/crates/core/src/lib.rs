//! Image-aware fusion of partial crowd annotations for binary segmentation.
//!
//! The latent labeling is modeled as a pairwise Markov random field whose
//! observations are worker annotations (through per-worker confusion
//! matrices) and an optional grey-level image (through a shaded Gaussian
//! mixture). Parameters are learned with a persistent-chain stochastic EM
//! and the final segmentation is the marginal posterior mode.

pub mod em;
pub mod error;
pub mod experiment;
pub mod gibbs;
pub mod grid;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod mrf;
pub mod phantom;
pub mod protocol;
pub mod raster;
pub mod staple;

pub use em::{learn, ConfusionMatrix, LearnConfig, TrainedModel};
pub use error::{Error, Result};
pub use gibbs::{ChainState, MarginalField, Posterior};
pub use grid::{Annotation, Dims, EdgeClassSet, ImageGrid, LabelGrid, Mask};
pub use inference::{fuse, mpm_decision, FusionConfig, FusionResult, IstapleConfig, Method};
pub use mrf::{AppearanceParams, MrfModel, PriorParams, ShadingField};
pub use raster::{Point, Polygon};
pub use staple::{run_staple, StapleConfig, StapleResult};
