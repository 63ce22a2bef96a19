//! Core library for steepest descent under matrix operator norms.
//!
//! The crate provides the pieces needed to study and run width-aware
//! normalized-gradient optimizers:
//!
//! - [`linalg`]: dense `f64` matrices and vectors, a one-sided Jacobi SVD,
//!   and a seeded power-iteration spectral-norm estimator.
//! - [`norms`]: vector `p`-norms and `(p, mean)` norms, exact operator norms
//!   for the computable families, the network block norm, and a brute-force
//!   operator-norm estimator used as a test oracle.
//! - [`geometry`]: closed-form steepest-descent directions (sign, column,
//!   row, spectral), duality-gap certificates, a Newton-Schulz matrix sign,
//!   and the width-aware scaling rules per parameter role.
//! - [`network`]: a K-layer tanh feedforward network with exact gradients,
//!   exact directional derivatives, and exact directional Hessians.
//! - [`optimizer`]: geometry-aware steepest-descent steps with momentum,
//!   plus SignSGD, AdamW, and Muon baselines and the warmup/cosine schedule.
//!
//! Everything is deterministic: identical inputs and seeds produce
//! bit-identical outputs. The crate is `no_std`-compatible (with `alloc`);
//! IO, file formats, and the experiment harness live in the companion
//! `opnorm-lab` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod geometry;
pub mod linalg;
pub mod network;
pub mod norms;
pub mod optimizer;

pub use geometry::{GeometryFamily, GeometrySpec, ParamRole, RoleKind};
pub use linalg::{Matrix, SvdResult, Vector};
pub use network::{ForwardTrace, ModelParams, Perturbation};
pub use norms::{OperatorNormSpec, VectorNormSpec};
pub use optimizer::{Method, OptimizerConfig, OptimizerState};
