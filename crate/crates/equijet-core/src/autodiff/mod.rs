//! Tape-based reverse-mode differentiation over the fixed op set of the
//! layer, channel, and model modules, plus the training loss and optimizer.
//!
//! The engine is deliberately closed: a [`Tape`] records applications of the
//! known ops during the forward pass and [`Tape::backward`] replays them in
//! exact reverse order once, accumulating parameter gradients into a
//! [`ParamStore`]. There is no general expression-graph API — the
//! architectures here are fixed, and a closed set keeps every derivative
//! individually testable against finite differences.

mod adam;
mod fdcheck;
mod loss;
mod store;
mod tape;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use fdcheck::{finite_diff_check, FD_SCALE_FLOOR};
pub use loss::cross_entropy_loss;
pub use store::{ParamStore, ParamStoreBuilder, ParamView, Segment};
pub use tape::{AffineViews, AxisId, MaskId, NodeId, So2Views, Tape, TapeError};
