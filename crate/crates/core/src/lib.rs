//! Dual-energy CT multi-organ segmentation toolkit.
//!
//! The pieces, bottom to top:
//!
//! * [`volume`] — volumetric grids (scalar, label, mask) and MetaImage I/O.
//! * [`preproc`] — dual-energy blending, body masking, normalization,
//!   resolution and ROI manipulation.
//! * [`autodiff`] — a small reverse-mode differentiation engine with the
//!   layer primitives a 3D U-Net needs, plus optimizers.
//! * [`unet`] / [`checkpoint`] — the configurable 3D U-Net and its on-disk
//!   parameter format.
//! * [`cascade`] — two-stage coarse-to-fine training and inference.
//! * [`phantom`] — synthetic dual-energy abdominal phantoms with ground
//!   truth, standing in for clinical data.
//! * [`eval`] — Dice metric, fold planning, cross-validation and
//!   alpha-study drivers, report emission.

pub mod autodiff;
pub mod cascade;
pub mod checkpoint;
pub mod eval;
pub mod phantom;
pub mod preproc;
pub mod unet;
pub mod volume;

mod error;

pub use error::{Error, Result};

/// Deterministic seed derivation: mixes a textual tag into a base seed
/// (FNV-1a). Shared by every component that needs per-role sub-seeds so
/// that identical (base, tag) pairs always agree across entry points.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
