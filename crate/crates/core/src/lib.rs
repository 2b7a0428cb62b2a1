//! opendet — a self-contained multi-view 3D object detection pipeline on
//! synthetic scenes.
//!
//! The pipeline predicts a per-pixel surface depth map, refines it into
//! per-pixel object depth and 2D object centers by temporal offset sampling,
//! encodes the resulting 3D object centers as a positional embedding for a
//! set-prediction transformer decoder, and trains end-to-end with Hungarian
//! assignment and a depth-aware focal loss.
//!
//! Modules map onto pipeline stages:
//! - [`geom`] — pinhole camera transforms between pixel, camera, and world
//!   (lidar) frames, plus perception-range normalization.
//! - [`autodiff`] — a minimal reverse-mode tape over dense f64 tensors; every
//!   gradient is verifiable against central finite differences.
//! - [`depthnet`] — pixel-wise and object-wise depth encoders.
//! - [`posembed`] — ray-aware, point-aware, and object-wise position
//!   embeddings sharing one output dimension.
//! - [`decoder`] — transformer decoder with learnable queries, Hungarian
//!   matching, depth-aware focal loss, and the total loss.
//! - [`synthscene`] — deterministic scene generator and renderer producing
//!   surface-depth and center-depth supervision.
//! - [`evalmetrics`] — depth error, translation error, distance-bucketed
//!   reports, and center-distance average precision.
//! - [`cli`] — run configuration, manifests, and the command entry points
//!   used by the `opendet` binary.

pub mod autodiff;
pub mod cli;
pub(crate) mod threads;
pub mod decoder;
pub mod depthnet;
pub mod evalmetrics;
pub mod geom;
pub mod model;
pub mod posembed;
pub mod synthscene;

pub use geom::{CamPoint, CameraParams, LidarPoint, PerceptionRange, PixelPoint};
