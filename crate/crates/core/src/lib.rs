//! Shadow-aware adversarial image composition.
//!
//! The crate covers the numerical core of a two-branch compositing
//! generator: spherical-harmonics illumination, a guided feature filter, a
//! homography-based spatial transformer that moves a harmonized local patch
//! back into its background, Wasserstein critics and their training loop, and
//! an analytic synthetic-scene generator that provides ground-truth shadows.
//!
//! All arithmetic is `f64`. Differentiation runs on a small reverse-mode
//! [`Tape`] whose gradients are checked against central differences with
//! [`gradcheck`].

pub mod error;
pub mod gradcheck;
pub mod guided_filter;
pub mod illumination;
pub mod networks;
pub mod ops;
pub mod stm;
pub mod synth_data;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_at, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
