//! Spiking feature-pyramid object detection on event-camera streams.
//!
//! This crate holds the compute core: event synthesis and frame-stack
//! encoding, leaky integrate-and-fire / adaptive-threshold neuron dynamics
//! with a Dspike surrogate gradient, a small reverse-mode tensor engine,
//! the SpikeFPN backbone/pyramid/head graph, anchor-based detection
//! post-processing with mAP scoring, the AdamW training loop, and
//! spike-driven operation and energy accounting.
//!
//! Everything here is `no_std`-compatible (alloc required). File formats,
//! the CLI, and thread-pool setup live in the companion `spikefpn` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autograd;
pub mod cost;
pub mod detection;
pub mod encoding;
pub mod error;
pub mod event;
pub mod network;
pub mod rng;
pub mod spiking;
pub mod synth;
pub mod tensor;
pub mod training;

mod par;

pub use error::{Error, Result};
pub use tensor::Tensor;
