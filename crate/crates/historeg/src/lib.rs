//! Registration of 2D histology sections to MRI slices.
//!
//! The toolkit pairs a learned two-stage backend (an affine stage followed by
//! a thin-plate-spline stage, both predicted by a correlation-based matching
//! network) with an iterative intensity baseline (gradient-descent affine on
//! masks, then B-spline free-form refinement driven by mutual information).
//! Everything downstream of the backends (warping, metrics, reports) is
//! backend-agnostic.
//!
//! Modules follow the data path: [`preprocess`] turns raw cases into square
//! canvases, [`synth`] builds self-supervised training pairs, [`net`] and
//! [`train`] define and fit the matching network, [`pipeline`] runs
//! registration proper, [`metrics`] scores it, and [`baseline`] provides the
//! iterative reference implementation. [`cli`] wires the stages into the
//! `historeg` binary.

pub mod baseline;
pub mod cli;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod geometry;
pub mod image;
pub mod manifest;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod preprocess;
pub mod render;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
