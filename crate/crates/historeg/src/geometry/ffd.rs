//! Free-form deformation on a uniform cubic B-spline control grid, used by
//! the iterative baseline's deformable stage.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Uniform cubic B-spline basis on `t` in `[0, 1)`.
pub(crate) fn bspline_basis(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        (1.0 - 3.0 * t + 3.0 * t2 - t3) / 6.0,
        (4.0 - 6.0 * t2 + 3.0 * t3) / 6.0,
        (1.0 + 3.0 * t + 3.0 * t2 - 3.0 * t3) / 6.0,
        t3 / 6.0,
    ]
}

/// Displacement field `u(p)` spanned by an `(ny + 3) x (nx + 3)` lattice of
/// control displacements over `[-1, 1]^2`, evaluated as `p + u(p)`. A zero
/// lattice is exactly the identity. The map clamps its cell lookup at the
/// domain border, extending the border displacement outward continuously.
#[derive(Clone, Debug, PartialEq)]
pub struct FfdField {
    nx: usize,
    ny: usize,
    dx: Array2<f64>,
    dy: Array2<f64>,
}

impl FfdField {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            dx: Array2::zeros((ny + 3, nx + 3)),
            dy: Array2::zeros((ny + 3, nx + 3)),
        }
    }

    pub fn new(nx: usize, ny: usize, dx: Array2<f64>, dy: Array2<f64>) -> Result<Self> {
        if dx.dim() != (ny + 3, nx + 3) || dy.dim() != (ny + 3, nx + 3) {
            return Err(Error::ShapeMismatch(format!(
                "control lattice for a {nx}x{ny} cell grid must be {}x{}, got {:?} and {:?}",
                nx + 3,
                ny + 3,
                dx.dim(),
                dy.dim()
            )));
        }
        Ok(Self { nx, ny, dx, dy })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn dx(&self) -> &Array2<f64> {
        &self.dx
    }

    pub fn dy(&self) -> &Array2<f64> {
        &self.dy
    }

    pub fn dx_mut(&mut self) -> &mut Array2<f64> {
        &mut self.dx
    }

    pub fn dy_mut(&mut self) -> &mut Array2<f64> {
        &mut self.dy
    }

    /// Cell index and basis weights along one axis with `n` cells.
    fn axis(coord: f64, n: usize) -> (usize, [f64; 4]) {
        let s = (coord + 1.0) * 0.5 * n as f64;
        let s = s.clamp(0.0, n as f64 - 1e-9);
        let cell = s.floor() as usize;
        (cell, bspline_basis(s - cell as f64))
    }

    /// Sixteen active control entries and their weights at `p`, as
    /// `(lattice_row, lattice_col, weight)`.
    pub(crate) fn support(&self, p: [f64; 2]) -> [(usize, usize, f64); 16] {
        let (cx, bx) = Self::axis(p[0], self.nx);
        let (cy, by) = Self::axis(p[1], self.ny);
        let mut out = [(0usize, 0usize, 0.0f64); 16];
        let mut i = 0;
        for (m, wy) in by.iter().enumerate() {
            for (l, wx) in bx.iter().enumerate() {
                out[i] = (cy + m, cx + l, wy * wx);
                i += 1;
            }
        }
        out
    }

    pub fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        let mut ux = 0.0;
        let mut uy = 0.0;
        for (r, c, w) in self.support(p) {
            ux += w * self.dx[(r, c)];
            uy += w * self.dy[(r, c)];
        }
        [p[0] + ux, p[1] + uy]
    }
}
