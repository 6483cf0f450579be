//! Rotation-equivariant neural networks for jet flavor tagging, built on a
//! small tape-based reverse-mode autodiff engine.
//!
//! The crate provides three feature representations that transform under
//! rotations as scalars, 3-vectors, and order-2 tensors, together with layers
//! that are equivariant under the full rotation group SO(3) or under the
//! subgroup of rotations about a per-event jet axis. On top of the layers sit
//! two permutation-invariant particle-cloud architectures (a scalar-only
//! baseline and an equivariant variant), a synthetic heavy-flavor jet
//! generator for benchmarking, and classifier metrics (ROC area, background
//! rejection).
//!
//! The crate is `no_std`-compatible (with `alloc`); the `std` feature (on by
//! default) only switches scalar math to the platform intrinsics and enables
//! `std::error::Error` impls. File formats, the CLI, and training workflows
//! live in the companion `equijet-cli` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod channels;
pub mod datagen;
pub mod geometry;
pub mod layers;
mod math;
pub mod metrics;
pub mod models;
pub mod verify;

pub use channels::{Mask, RepChannels};
pub use datagen::{GenConfig, JetEvent, Track};
pub use geometry::{Mat3, Rotation, Vec3};
pub use models::{build_model, Model, ModelClass, ModelConfig};
