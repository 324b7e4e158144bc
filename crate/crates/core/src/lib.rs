//! Desk-scale 3D-aware multi-class image-to-image translation.
//!
//! The pipeline has two stages. First a style-conditioned neural field GAN is
//! trained unconditionally, then its weights are transplanted into a
//! multi-class variant with two mapping networks and a per-class
//! discriminator head. Second, the trained parts are re-wired into a
//! translation system: the discriminator trunk becomes an encoder, a U-net
//! adaptor learns (from generated data only) to map encoder features back to
//! the field's feature maps, and the frozen generator renders the result.
//! A view-consistency evaluation suite (temporal loss, per-video perceptual
//! diversity, their ratio, and a Fréchet feature distance) measures the
//! outcome.
//!
//! All numerics run on an eager f64 tape ([`tape`]) whose backward pass is
//! itself built from tape operations, so gradient penalties that need
//! second-order derivatives work without special cases.

pub mod adaptor;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gan;
pub mod kernels;
pub mod translate;
pub mod transplant;
pub mod video;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod renderer;
pub mod rng;
pub mod runner;
pub mod synth;
pub mod tape;

pub use error::{Error, Result};
