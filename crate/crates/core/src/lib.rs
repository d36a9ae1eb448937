//! Alternately-updated clique networks on a small reverse-mode autodiff core.
//!
//! The crate is `no_std` (with `alloc`) when built without the default
//! `std` feature. The `parallel` feature splits convolutions across the
//! rayon pool without changing results.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analyzer;
pub mod autograd;
pub mod clique;
pub mod error;
pub mod layers;
pub mod network;
pub mod param;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Activation, Gradients, Graph, Mode, PoolMode, Var};
pub use error::{Error, Result};
pub use param::{ParamGroup, ParamId, ParamKind, ParamStore, Parameter, RunningStats, StatsId};
pub use scalar::Scalar;
pub use tensor::Tensor;
