//! Thin-plate-spline stage: exact interpolation through a fixed control
//! lattice, parameterized by control-point displacements.

use std::sync::OnceLock;

use nalgebra::{DMatrix, Dyn};
use ndarray::Array2;

use crate::error::{Error, Result};

use super::{StageKind, Theta, TPS_CTRL_COUNT};

/// Side length of the control lattice; points sit on a regular grid over
/// `[-1, 1]^2` including the boundary, enumerated row-major so index
/// `k = row * side + col` holds the point
/// `(-1 + 2 col / (side - 1), -1 + 2 row / (side - 1))`.
pub const TPS_GRID_SIDE: usize = 6;

/// Radial kernel `U(r) = r^2 log(r^2)` expressed in the squared distance,
/// with the removable singularity at zero filled in.
fn kernel(r2: f64) -> f64 {
    if r2 > 0.0 {
        r2 * r2.ln()
    } else {
        0.0
    }
}

pub(crate) fn lattice_points() -> Vec<[f64; 2]> {
    let step = 2.0 / (TPS_GRID_SIDE - 1) as f64;
    let mut pts = Vec::with_capacity(TPS_CTRL_COUNT);
    for row in 0..TPS_GRID_SIDE {
        for col in 0..TPS_GRID_SIDE {
            pts.push([-1.0 + step * col as f64, -1.0 + step * row as f64]);
        }
    }
    pts
}

/// Interpolation system `[[K, P], [P^T, 0]]` where `K[i][j]` is the kernel of
/// the distance between control points and `P` carries the affine monomials
/// `[1, x, y]`. The zero block enforces the side conditions that make the
/// bending energy finite.
fn system_matrix(points: &[[f64; 2]]) -> DMatrix<f64> {
    let n = points.len();
    let mut m = DMatrix::<f64>::zeros(n + 3, n + 3);
    for i in 0..n {
        for j in 0..n {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            m[(i, j)] = kernel(dx * dx + dy * dy);
        }
        m[(i, n)] = 1.0;
        m[(i, n + 1)] = points[i][0];
        m[(i, n + 2)] = points[i][1];
        m[(n, i)] = 1.0;
        m[(n + 1, i)] = points[i][0];
        m[(n + 2, i)] = points[i][1];
    }
    m
}

struct LatticeSystem {
    points: Vec<[f64; 2]>,
    lu: nalgebra::LU<f64, Dyn, Dyn>,
    inverse: DMatrix<f64>,
}

static LATTICE: OnceLock<Option<LatticeSystem>> = OnceLock::new();

fn lattice_system() -> Result<&'static LatticeSystem> {
    LATTICE
        .get_or_init(|| {
            let points = lattice_points();
            let m = system_matrix(&points);
            let lu = m.clone().lu();
            let inverse = m.try_inverse()?;
            Some(LatticeSystem { points, lu, inverse })
        })
        .as_ref()
        .ok_or_else(|| Error::Solve("control lattice interpolation system is singular".into()))
}

fn solve_targets(
    points: &[[f64; 2]],
    lu: &nalgebra::LU<f64, Dyn, Dyn>,
    tx: &[f64],
    ty: &[f64],
) -> Result<(Vec<f64>, [f64; 3], Vec<f64>, [f64; 3])> {
    let n = points.len();
    let mut rhs = DMatrix::<f64>::zeros(n + 3, 2);
    for k in 0..n {
        rhs[(k, 0)] = tx[k];
        rhs[(k, 1)] = ty[k];
    }
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Solve("thin-plate-spline system is singular".into()))?;
    let wx: Vec<f64> = (0..n).map(|k| sol[(k, 0)]).collect();
    let wy: Vec<f64> = (0..n).map(|k| sol[(k, 1)]).collect();
    let ax = [sol[(n, 0)], sol[(n + 1, 0)], sol[(n + 2, 0)]];
    let ay = [sol[(n, 1)], sol[(n + 1, 1)], sol[(n + 2, 1)]];
    Ok((wx, ax, wy, ay))
}

/// Thin-plate-spline map interpolating `p_k -> p_k + alpha * (theta_x[k],
/// theta_y[k])` over the control points, affine part plus weighted kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsMap {
    alpha: f64,
    theta: Vec<f64>,
    points: Vec<[f64; 2]>,
    wx: Vec<f64>,
    ax: [f64; 3],
    wy: Vec<f64>,
    ay: [f64; 3],
}

impl TpsMap {
    /// Builds the spline for the standard lattice. The factorized system for
    /// that lattice is cached process-wide.
    pub fn from_theta(theta: &Theta) -> Result<Self> {
        debug_assert_eq!(theta.kind, StageKind::Tps);
        let theta = Theta::new(theta.kind, theta.alpha, theta.values.clone())?;
        let sys = lattice_system()?;
        Self::build(sys.points.clone(), &sys.lu, theta.alpha, theta.values)
    }

    /// Builds the spline for an explicit set of control points, as stored in
    /// serialized transforms. `theta` holds x displacements for every point
    /// followed by y displacements.
    pub fn from_points_and_theta(
        points: Vec<[f64; 2]>,
        alpha: f64,
        theta: Vec<f64>,
    ) -> Result<Self> {
        if theta.len() != 2 * points.len() {
            return Err(Error::ParamLen {
                kind: "tps",
                expected: 2 * points.len(),
                got: theta.len(),
            });
        }
        if !alpha.is_finite()
            || theta.iter().any(|v| !v.is_finite())
            || points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite())
        {
            return Err(Error::NonFinite("thin-plate-spline parameters".into()));
        }
        let lu = system_matrix(&points).lu();
        Self::build(points, &lu, alpha, theta)
    }

    fn build(
        points: Vec<[f64; 2]>,
        lu: &nalgebra::LU<f64, Dyn, Dyn>,
        alpha: f64,
        theta: Vec<f64>,
    ) -> Result<Self> {
        let n = points.len();
        let tx: Vec<f64> = (0..n).map(|k| points[k][0] + alpha * theta[k]).collect();
        let ty: Vec<f64> = (0..n).map(|k| points[k][1] + alpha * theta[n + k]).collect();
        let (wx, ax, wy, ay) = solve_targets(&points, lu, &tx, &ty)?;
        Ok(Self {
            alpha,
            theta,
            points,
            wx,
            ax,
            wy,
            ay,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        let mut x = self.ax[0] + self.ax[1] * p[0] + self.ax[2] * p[1];
        let mut y = self.ay[0] + self.ay[1] * p[0] + self.ay[2] * p[1];
        for (k, q) in self.points.iter().enumerate() {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            let u = kernel(dx * dx + dy * dy);
            x += self.wx[k] * u;
            y += self.wy[k] * u;
        }
        [x, y]
    }
}

/// Sensitivity of the interpolated map to control-point target displacements
/// on the standard lattice: entry `[e][k]` is the change of either output
/// coordinate at `eval_points[e]` per unit displacement of control point `k`
/// along that same coordinate. The map is linear in the targets, so warping
/// grids and loss gradients reduce to this one matrix per canvas shape.
pub fn tps_influence(eval_points: &[[f64; 2]]) -> Result<Array2<f64>> {
    let sys = lattice_system()?;
    let n = sys.points.len();
    let mut out = Array2::zeros((eval_points.len(), n));
    let mut basis = vec![0.0; n + 3];
    for (e, p) in eval_points.iter().enumerate() {
        for (k, q) in sys.points.iter().enumerate() {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            basis[k] = kernel(dx * dx + dy * dy);
        }
        basis[n] = 1.0;
        basis[n + 1] = p[0];
        basis[n + 2] = p[1];
        for k in 0..n {
            let mut acc = 0.0;
            for (j, &b) in basis.iter().enumerate() {
                acc += b * sys.inverse[(j, k)];
            }
            out[(e, k)] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{transform_from_theta, Transform2D, DEFAULT_ALPHA, TPS_PARAM_COUNT};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn lattice_spans_the_domain_inclusive() {
        let pts = lattice_points();
        assert_eq!(pts.len(), 36);
        assert_eq!(pts[0], [-1.0, -1.0]);
        assert_eq!(pts[5], [1.0, -1.0]);
        assert_eq!(pts[30], [-1.0, 1.0]);
        assert_eq!(pts[35], [1.0, 1.0]);
        assert!((pts[7][0] - -0.6).abs() < 1e-15 && (pts[7][1] - -0.6).abs() < 1e-15);
    }

    #[test]
    fn interpolation_conditions_hold_for_random_displacements() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let theta: Vec<f64> = (0..TPS_PARAM_COUNT).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Theta::new(StageKind::Tps, DEFAULT_ALPHA, theta.clone()).unwrap();
        let tps = TpsMap::from_theta(&t).unwrap();
        for (k, p) in lattice_points().iter().enumerate() {
            let q = tps.eval(*p);
            let want = [
                p[0] + DEFAULT_ALPHA * theta[k],
                p[1] + DEFAULT_ALPHA * theta[36 + k],
            ];
            assert!(
                (q[0] - want[0]).abs() < 1e-6 && (q[1] - want[1]).abs() < 1e-6,
                "control {k}: {q:?} vs {want:?}"
            );
        }
    }

    #[test]
    fn single_corner_displacement_moves_the_corner() {
        let mut theta = vec![0.0; TPS_PARAM_COUNT];
        theta[0] = 0.05;
        let t = Theta::new(StageKind::Tps, 1.0, theta).unwrap();
        let tps = TpsMap::from_theta(&t).unwrap();
        let q = tps.eval([-1.0, -1.0]);
        assert!((q[0] - -0.95).abs() < 1e-6 && (q[1] - -1.0).abs() < 1e-6, "{q:?}");
    }

    #[test]
    fn duplicate_control_points_are_reported_singular() {
        let points = vec![[0.0, 0.0], [0.0, 0.0], [0.5, 0.5], [-0.5, 0.25]];
        let theta = vec![0.01; 8];
        let err = TpsMap::from_points_and_theta(points, 1.0, theta).unwrap_err();
        assert!(matches!(err, Error::Solve(_)), "{err}");
    }

    #[test]
    fn influence_matrix_reproduces_the_solved_map() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let theta: Vec<f64> = (0..TPS_PARAM_COUNT).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = transform_from_theta(
            &Theta::new(StageKind::Tps, DEFAULT_ALPHA, theta.clone()).unwrap(),
        )
        .unwrap();
        let eval_pts: Vec<[f64; 2]> = (0..25)
            .map(|i| {
                [
                    -0.9 + 0.45 * (i % 5) as f64,
                    -0.9 + 0.45 * (i / 5) as f64,
                ]
            })
            .collect();
        let infl = tps_influence(&eval_pts).unwrap();
        for (e, p) in eval_pts.iter().enumerate() {
            let mut x = p[0];
            let mut y = p[1];
            for k in 0..36 {
                x += DEFAULT_ALPHA * infl[(e, k)] * theta[k];
                y += DEFAULT_ALPHA * infl[(e, k)] * theta[36 + k];
            }
            let q = match &t {
                Transform2D::Tps(m) => m.eval(*p),
                _ => unreachable!(),
            };
            assert!(
                (x - q[0]).abs() < 1e-9 && (y - q[1]).abs() < 1e-9,
                "point {e}: influence ({x}, {y}) vs solve {q:?}"
            );
        }
    }
}
