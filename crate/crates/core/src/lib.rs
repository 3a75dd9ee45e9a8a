//! Atlas-prior conditional random field for volumetric segmentation.
//!
//! A locally connected CRF fuses per-voxel appearance scores from any
//! segmenter with a probabilistic atlas (prior potential, dilated stencil)
//! and an intensity-aware smoothness term. Inference is an unrolled
//! mean-field loop whose messages are spatially-varying convolutions, so the
//! whole module is differentiable and trainable jointly with the segmenter.

mod conv;

pub mod atlas;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod meanfield;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod perturb;
pub mod pipeline;
pub mod potentials;
pub mod toy;
pub mod train;
pub mod unary;
pub mod vol1;
pub mod volume;

pub use error::{Error, Result};
pub use meanfield::{ablate, mean_field_infer, mean_field_iterates, message_passing, Ablation, CamInput, CamParams};
pub use oracle::brute_force_infer;
pub use potentials::{Compatibility, Connectivity, KernelField, PriorWeights, SmoothWeights};
pub use volume::{argmax_labels, one_hot, softmax_channels, AtlasPair, Dims, LabelMap, ProbVolume, ScalarVolume};
