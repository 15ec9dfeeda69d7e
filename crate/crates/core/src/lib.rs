//! Patch-based volumetric lesion segmentation toolkit.
//!
//! The crate covers the whole train/infer loop of a patch-based 3D segmenter,
//! at desk scale:
//!
//! - [`volume`]: dense 3D volumes, the FPVOL file format, channel stacking,
//!   z-score normalization and flip augmentation.
//! - [`patch`]: patch grids with overlap, extraction, Gaussian importance maps
//!   and weighted fusion (sliding-window inference).
//! - [`loss`]: BCE, dice, soft dice and Tversky losses with analytic gradients.
//! - [`focused`]: the hard-patch curriculum. Per-patch losses are split into
//!   easy/hard by Otsu's criterion, the hardest tail is dropped and the rest is
//!   oversampled in the next epoch.
//! - [`train`]: a three-parameter voxelwise logistic model, SGD/Adam/AdamW and
//!   the validation-dice-driven learning-rate schedule.
//! - [`metrics`]: dice, connected-component false positive / false negative
//!   volumes and the aggregate score.
//! - [`inference`]: ensembling, thresholding and binary morphology.
//! - [`data`]: synthetic PET/CT phantoms and model-wise validation splits.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod cli;
pub mod data;
mod error;
pub mod focused;
pub mod inference;
pub mod loss;
pub mod metrics;
pub mod patch;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{MultiChannelVolume, Shape, Spacing, Volume3D, VolumeKind};

/// Version tag of the on-disk volume format.
pub const FPVOL_FORMAT_VERSION: &str = "FPVOL001";
