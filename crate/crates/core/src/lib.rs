//! Tamper-resistant metadata embedding for chart images.
//!
//! `chartmark` hides a short link inside a chart raster with an invertible
//! steganography network and recovers it after the image has been smudged,
//! watermarked, cropped or recompressed. The pieces, in pipeline order:
//!
//! * [`payload`] — link framing, BCH error correction, binary data image.
//! * [`rdt`] — repetitive data tiling / averaging for redundancy.
//! * [`iib`] — patch tokenizer plus an invertible token broadcast matrix.
//! * [`flow`] — token affine coupling blocks shared between embed and
//!   decode, and the feature enhancement network on the decode path.
//! * [`anchor`] — a constant anchor image co-embedded through a
//!   convolutional coupling flow; its decoded crop pattern localizes crops.
//! * [`crop`] — gradient-descent template matching that recovers crop
//!   parameters from the anchor estimate and pads images back into frame.
//! * [`tamper`] — seeded tampering / distortion simulation for training
//!   and evaluation.
//! * [`train`] / [`eval`] — joint optimization and the metric grids.
//! * [`pipeline`] — the user-facing embed / decode / detect operations.

pub mod anchor;
pub mod charts;
pub mod checkpoint;
pub mod config;
pub mod crop;
pub mod error;
pub mod eval;
pub mod flow;
pub mod iib;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod payload;
pub mod pipeline;
pub mod rdt;
pub mod tamper;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
