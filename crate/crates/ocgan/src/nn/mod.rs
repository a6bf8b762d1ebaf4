//! Minimal neural-network toolkit: named-parameter store, layers with
//! hand-written forward/backward passes, and Adam.
//!
//! There is no autodiff graph. Each training phase composes forward passes
//! explicitly, keeps the returned caches, and drives the matching backward
//! passes in reverse order, accumulating gradients into a [`GradStore`].
//! Gradient correctness is pinned down by central-finite-difference tests
//! on an `f64` instantiation of the same code.

mod adam;
mod batchnorm;
mod conv;
mod dense;
mod net;
mod store;

pub use adam::Adam;
pub use conv::ConvGeom;
pub use net::{mean_all, squeeze_logits, LayerSpec, Mode, Net, NetPass};
pub use store::{GradStore, ParameterStore};
