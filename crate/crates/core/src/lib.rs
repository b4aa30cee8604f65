//! Lesion segmentation toolkit for heterogeneous, longitudinal MS datasets.
//!
//! The crate covers everything around the segmentation network itself:
//!
//! * [`volume`]: 3D grids, NIfTI-1 I/O, connected components, morphology,
//!   blurring and resampling.
//! * [`manifest`]: dataset manifests describing which images and labels each
//!   subject provides.
//! * [`assembly`]: the four-channel model input with substitution rules and
//!   the sliding temporal window.
//! * [`losses`]: Dice, longitudinal, volumetric and spatial constraint losses
//!   with analytic gradients, and the curriculum-weighted total.
//! * [`lesionmix`]: lesion populating and inpainting with lesion-load control.
//! * [`metrics`]: Dice, lesion-wise detection F1, timepoint inversion and
//!   volume-trajectory correlation.
//! * [`phantom`]: synthetic brain-like phantoms with controlled lesion dynamics.
//! * [`toytrain`]: a per-voxel linear segmenter trained on the full objective.

pub mod assembly;
pub mod error;
pub mod lesionmix;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod toytrain;
pub mod volume;

pub use error::{Error, Result};
