//! JSON form of [`Transform2D`].
//!
//! Parameters round-trip bit-exactly at double precision: values are written
//! with the shortest representation that reparses to the same bits, and the
//! spline is re-solved from its stored control points and displacements on
//! load, which is deterministic.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{AffineMap, FfdField, StageKind, Theta, TpsMap, Transform2D};

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum TransformRepr {
    Affine {
        alpha: f64,
        theta: Vec<f64>,
    },
    Tps {
        alpha: f64,
        theta: Vec<f64>,
        control_points: Vec<[f64; 2]>,
    },
    Ffd {
        grid: [usize; 2],
        dx: Vec<f64>,
        dy: Vec<f64>,
    },
    Composite {
        stages: Vec<TransformRepr>,
    },
}

fn to_repr(t: &Transform2D) -> TransformRepr {
    match t {
        Transform2D::Affine(a) => TransformRepr::Affine {
            alpha: a.alpha(),
            theta: a.theta().to_vec(),
        },
        Transform2D::Tps(s) => TransformRepr::Tps {
            alpha: s.alpha(),
            theta: s.theta().to_vec(),
            control_points: s.points().to_vec(),
        },
        Transform2D::Ffd(f) => {
            let (nx, ny) = f.grid();
            TransformRepr::Ffd {
                grid: [nx, ny],
                dx: f.dx().iter().copied().collect(),
                dy: f.dy().iter().copied().collect(),
            }
        }
        Transform2D::Composite(stages) => TransformRepr::Composite {
            stages: stages.iter().map(to_repr).collect(),
        },
    }
}

fn from_repr(repr: TransformRepr) -> Result<Transform2D> {
    match repr {
        TransformRepr::Affine { alpha, theta } => {
            let theta = Theta::new(StageKind::Affine, alpha, theta)?;
            Ok(Transform2D::Affine(AffineMap::from_theta(&theta)?))
        }
        TransformRepr::Tps {
            alpha,
            theta,
            control_points,
        } => Ok(Transform2D::Tps(TpsMap::from_points_and_theta(
            control_points,
            alpha,
            theta,
        )?)),
        TransformRepr::Ffd { grid, dx, dy } => {
            let [nx, ny] = grid;
            let shape = (ny + 3, nx + 3);
            let expect = shape.0 * shape.1;
            if dx.len() != expect || dy.len() != expect {
                return Err(Error::ShapeMismatch(format!(
                    "ffd lattice for grid {nx}x{ny} needs {expect} entries per axis, got {} and {}",
                    dx.len(),
                    dy.len()
                )));
            }
            let dx = Array2::from_shape_vec(shape, dx).expect("length checked above");
            let dy = Array2::from_shape_vec(shape, dy).expect("length checked above");
            Ok(Transform2D::Ffd(FfdField::new(nx, ny, dx, dy)?))
        }
        TransformRepr::Composite { stages } => Ok(Transform2D::Composite(
            stages.into_iter().map(from_repr).collect::<Result<_>>()?,
        )),
    }
}

pub(super) fn to_json_string(t: &Transform2D) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&to_repr(t))
        .map_err(|e| Error::Format { path: "<transform>".into(), message: e.to_string() })?;
    s.push('\n');
    Ok(s)
}

pub(super) fn from_json_str(s: &str) -> Result<Transform2D> {
    let repr: TransformRepr = serde_json::from_str(s)
        .map_err(|e| Error::Format { path: "<transform>".into(), message: e.to_string() })?;
    from_repr(repr)
}
