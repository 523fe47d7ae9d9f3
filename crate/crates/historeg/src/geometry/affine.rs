//! Identity-anchored affine map.

use crate::error::Result;

use super::{StageKind, Theta};

/// Affine map `p -> M p + t` built from 6 parameters around the identity:
///
/// ```text
/// M = | 1 + a*t0    a*t1 |      t = | a*t2 |
///     |     a*t3  1 + a*t4 |        | a*t5 |
/// ```
///
/// where `a` is the anchoring scale, so a zero parameter vector is exactly
/// the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    alpha: f64,
    theta: [f64; 6],
}

impl AffineMap {
    pub fn from_theta(theta: &Theta) -> Result<Self> {
        debug_assert_eq!(theta.kind, StageKind::Affine);
        let t = Theta::new(theta.kind, theta.alpha, theta.values.clone())?;
        let mut arr = [0.0; 6];
        arr.copy_from_slice(&t.values);
        Ok(Self {
            alpha: t.alpha,
            theta: arr,
        })
    }

    pub fn identity() -> Self {
        Self {
            alpha: super::DEFAULT_ALPHA,
            theta: [0.0; 6],
        }
    }

    /// Direct construction from matrix and translation, expressed through the
    /// anchored parameterization with `alpha = 1`.
    pub fn from_matrix(m: [[f64; 2]; 2], t: [f64; 2]) -> Self {
        Self {
            alpha: 1.0,
            theta: [m[0][0] - 1.0, m[0][1], t[0], m[1][0], m[1][1] - 1.0, t[1]],
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn theta(&self) -> &[f64; 6] {
        &self.theta
    }

    /// `(M, t)` with the anchoring scale folded in.
    pub fn matrix(&self) -> ([[f64; 2]; 2], [f64; 2]) {
        let a = self.alpha;
        (
            [
                [1.0 + a * self.theta[0], a * self.theta[1]],
                [a * self.theta[3], 1.0 + a * self.theta[4]],
            ],
            [a * self.theta[2], a * self.theta[5]],
        )
    }

    pub fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        let (m, t) = self.matrix();
        [
            m[0][0] * p[0] + m[0][1] * p[1] + t[0],
            m[1][0] * p[0] + m[1][1] * p[1] + t[1],
        ]
    }

    pub fn det(&self) -> f64 {
        let (m, _) = self.matrix();
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }
}
