//! Physics- and semantics-guided underwater image enhancement.
//!
//! The network lights up a raw image with learned multi-scale illumination
//! maps, aligns a frozen text embedding with the image, and restores the
//! lit-up image with two text-guided encoder–decoders whose outputs are summed
//! and squashed into `(0, 1)`.

pub mod archive;
pub mod data;
pub mod error;
pub mod hash;
pub mod illumination;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod restorer;
pub mod text_align;

pub use error::{Error, Result};
pub use image::ImageTensor;
