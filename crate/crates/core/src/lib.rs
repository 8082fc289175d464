//! Core numerics for two-stage convolution-to-transformer distillation.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Everything here is pure computation: a small reverse-mode tensor
//! engine ([`graph`], [`ops`]), multi-head self-attention and its
//! convolutional variant with a quadratic relative position score
//! ([`attention`]), the student transformer and BN-CNN teacher ([`models`]),
//! the distillation losses and stage schedule ([`distill`]), data-free image
//! synthesis ([`inversion`]) and analysis metrics ([`metrics`]).
//!
//! IO, configuration files, datasets and the CLI live in the companion
//! `dearkd` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod distill;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod inversion;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;

pub use element::{DType, Element};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use rng::RngStream;
pub use tensor::Tensor;
