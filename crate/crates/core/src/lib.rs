//! Numerical laboratory for top-K sparse softmax gated Gaussian mixtures of experts.
//!
//! * [`model`]: mixing measures, the sparse gate, conditional densities, sampling.
//! * [`partition`]: input-space regions induced by the gate.
//! * [`voronoi`]: Voronoi cells, the D1/D2/D3 losses and Hellinger distances.
//! * [`polysys`]: the polynomial system behind the slow over-specified rates.
//! * [`em`]: maximum-likelihood fitting by EM.
//! * [`experiments`]: replicated sample-size sweeps, slope fits, CSV/SVG output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod em;
pub mod error;
pub mod experiments;
mod kv;
pub mod model;
pub mod partition;
pub mod polysys;
pub mod rng;
pub mod voronoi;

pub use error::{Assumption, Error, Result};
pub use model::{Component, Dataset, ExpertParams, Family, GateOutput, GateParams, MixingMeasure, UniformBox};
