//! Desk-scale radar/camera leaf-wetness pipeline.
//!
//! The crate covers the whole chain end to end:
//!
//! 1. [`radar`] — FMCW waveform model and wavenumber bookkeeping.
//! 2. [`scene`] — point-scatterer scenes and raw SAR data synthesis over a
//!    two-axis planar scan, with bistatic phase compensation and
//!    breeze-motion perturbation.
//! 3. [`recon`] — depth-sliced image reconstruction in the wavenumber
//!    domain, plus a brute-force backprojection oracle for verification.
//! 4. [`fusion`] — masking fusion of a normalized SAR slice with an RGB
//!    image, a small convolutional feature extractor, global average
//!    pooling, and class activation maps.
//! 5. [`encoder`] — depth-aware positional encoding, multi-head attention
//!    over the depth sequence, the classifier head, and binary
//!    cross-entropy with exact gradients.
//! 6. [`model`] / [`params`] — the assembled network with hand-written
//!    reverse-mode gradients for every trainable tensor.
//! 7. [`dataset`] / [`train`] — synthetic scene generation, augmentation,
//!    two-phase training, and repeated stratified k-fold evaluation.
//! 8. [`io`] — binary tensor files, PGM/PPM images, scene text files, and
//!    run configuration parsing.
//!
//! Everything is double precision and deterministic: fixed seeds give
//! bit-identical cubes, images, checkpoints, and metrics regardless of
//! thread count.

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod io;
pub mod model;
pub mod params;
pub mod radar;
pub mod raster;
pub mod recon;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
