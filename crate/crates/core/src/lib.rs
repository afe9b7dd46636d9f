//! Curvature-basis analysis and editing of neural network weights.
//!
//! The crate trains small models on synthetic data with planted
//! memorization, collects Kronecker-factored curvature statistics for their
//! MLP projections, decomposes each weight matrix in the resulting
//! eigenbasis, and removes the components that carry little curvature mass.
//! Alternative edits (SVD truncation and a trained sparse mask) and the
//! memorization / coherence metrics used to compare them live alongside.

pub mod container;
pub mod datagen;
pub mod editing;
pub mod evalmem;
pub mod io;
pub mod kfac;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod spectral;
