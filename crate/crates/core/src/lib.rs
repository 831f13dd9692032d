#![no_std]
//! Decoupled one-pass open-vocabulary segmentation at desk scale.
//!
//! A miniature ViT encoder with patch severance, a class-agnostic mask
//! proposal network, classification-anchor heatmap decoders and
//! pooling-based zero-shot segment classification, all built on a small
//! reverse-mode tensor library. The crate is `no_std` and needs only
//! `alloc`; file formats, timing and the CLI live in the `deop` crate.

extern crate alloc;

pub mod cal;
pub mod classify;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod numcore;
pub mod pipeline;
pub mod proposals;
pub mod synth;

pub use error::{Error, Result};
pub use numcore::{Graph, ParamId, ParamStore, Tape, Tensor, Var};
