//! Learns pixel segmentation models from polyline ground-truth labels whose
//! locations are wrong.
//!
//! Polyline annotations (streamlines, roads) routinely carry geometric
//! registration errors: the shape is right but sits a few meters off the true
//! object. Training a segmentation model directly on such labels bakes the
//! misalignment into the model. This crate treats the true label locations as
//! latent variables and alternates between scoring candidate placements under
//! the current model (E-step) and retraining the model on the selected
//! placements (M-step), together with everything needed to run that loop end
//! to end on synthetic scenes with known truth:
//!
//! - [`geom`]: polar-grid location-error priors, polyline chunking, and
//!   perpendicular-shift candidate generation.
//! - [`raster`]: buffered rasterization, window extraction, augmentation.
//! - [`model`]: a small fully-convolutional pixel classifier with soft-dice
//!   loss, plateau LR schedule, and finite-difference gradient checking.
//! - [`em`]: candidate likelihoods, Bayes posteriors, label selection, and
//!   the full EM loop.
//! - [`synth`]: synthetic scene generation with controllable corruption.
//! - [`eval`]: confusion/precision/recall/F1 metrics, label-distance
//!   measures, and hyper-parameter sweeps.
//! - [`io`]: the GRID1 raster format, polyline JSON, SEGM1 checkpoints, PGM
//!   previews, and CSV exports.

pub mod em;
pub mod error;
pub mod eval;
pub mod geom;
pub mod io;
pub mod model;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
