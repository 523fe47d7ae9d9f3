//! Spatial transforms on the normalized square domain.
//!
//! All transforms map points of `[-1, 1]^2` (x along columns, y along rows)
//! from the fixed-image frame to the moving-image frame; images are warped
//! backward by sampling the moving image at the mapped position. Pixel and
//! normalized coordinates are related through pixel centers: column `c` of a
//! width-`w` raster sits at `x = 2 (c + 0.5) / w - 1`.
//!
//! Learned stages are parameterized around the identity: a parameter vector
//! `theta` scaled by a small `alpha` perturbs the identity map, so `theta = 0`
//! is exactly the identity. The affine stage uses 6 parameters, the
//! thin-plate-spline stage 72 (x then y displacements of a fixed 6x6 control
//! lattice spanning the domain).

mod affine;
mod ffd;
mod grid;
mod serialize;
mod tps;
mod warp;

pub use affine::AffineMap;
pub use ffd::FfdField;
pub use grid::{deformed_grid_image, min_jacobian_det, DeformedGrid};
pub use tps::{tps_influence, TpsMap, TPS_GRID_SIDE};
pub use warp::{
    norm_to_px, px_to_norm, sample_bilinear, sample_bilinear_grad, warp_image, warp_mask,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AFFINE_PARAM_COUNT: usize = 6;
pub const TPS_CTRL_COUNT: usize = TPS_GRID_SIDE * TPS_GRID_SIDE;
pub const TPS_PARAM_COUNT: usize = 2 * TPS_CTRL_COUNT;

/// Identity-anchoring scale applied to learned parameters.
pub const DEFAULT_ALPHA: f64 = 0.1;

/// Which of the two learned stages a parameter vector belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Affine,
    Tps,
}

impl StageKind {
    pub fn param_count(self) -> usize {
        match self {
            StageKind::Affine => AFFINE_PARAM_COUNT,
            StageKind::Tps => TPS_PARAM_COUNT,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Affine => "affine",
            StageKind::Tps => "tps",
        }
    }
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Stage parameter vector together with its identity-anchoring scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub kind: StageKind,
    pub alpha: f64,
    pub values: Vec<f64>,
}

impl Theta {
    pub fn new(kind: StageKind, alpha: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != kind.param_count() {
            return Err(Error::ParamLen {
                kind: kind.name(),
                expected: kind.param_count(),
                got: values.len(),
            });
        }
        if !alpha.is_finite() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stage parameter vector".into()));
        }
        Ok(Self { kind, alpha, values })
    }

    pub fn identity(kind: StageKind, alpha: f64) -> Self {
        Self {
            kind,
            alpha,
            values: vec![0.0; kind.param_count()],
        }
    }
}

/// A point map on the normalized domain. `Composite` applies its stages in
/// function-composition order: `stages[0]` is outermost, the last stage is
/// applied to the input point first.
#[derive(Clone, Debug)]
pub enum Transform2D {
    Affine(AffineMap),
    Tps(TpsMap),
    Ffd(FfdField),
    Composite(Vec<Transform2D>),
}

impl Transform2D {
    pub fn identity() -> Self {
        Transform2D::Affine(AffineMap::identity())
    }

    pub fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        match self {
            Transform2D::Affine(a) => a.eval(p),
            Transform2D::Tps(t) => t.eval(p),
            Transform2D::Ffd(f) => f.eval(p),
            Transform2D::Composite(stages) => {
                stages.iter().rev().fold(p, |q, stage| stage.eval(q))
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Transform2D::Affine(_) => "affine",
            Transform2D::Tps(_) => "tps",
            Transform2D::Ffd(_) => "ffd",
            Transform2D::Composite(_) => "composite",
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        serialize::to_json_string(self)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serialize::from_json_str(s)
    }
}

/// Builds the stage transform for a parameter vector.
pub fn transform_from_theta(theta: &Theta) -> Result<Transform2D> {
    match theta.kind {
        StageKind::Affine => Ok(Transform2D::Affine(AffineMap::from_theta(theta)?)),
        StageKind::Tps => Ok(Transform2D::Tps(TpsMap::from_theta(theta)?)),
    }
}

/// `compose(outer, inner)` maps `p` to `outer(inner(p))`: warping one image
/// through the composite equals warping through `inner`'s stage first and
/// resampling that result through `outer`, but with a single interpolation of
/// the original image. Nested composites are flattened.
pub fn compose(outer: Transform2D, inner: Transform2D) -> Transform2D {
    let mut stages = Vec::new();
    let push = |t: Transform2D, stages: &mut Vec<Transform2D>| match t {
        Transform2D::Composite(inner_stages) => stages.extend(inner_stages),
        other => stages.push(other),
    };
    push(outer, &mut stages);
    push(inner, &mut stages);
    Transform2D::Composite(stages)
}
