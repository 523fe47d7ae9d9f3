//! Deformation diagnostics: Jacobian probing and deformed grid renderings.

use crate::image::Image2D;

use super::{warp_image, Transform2D};

/// Minimum finite-difference Jacobian determinant over an `n x n` probe grid
/// of the interior of the domain. A positive minimum means the map does not
/// fold at the probed scale.
pub fn min_jacobian_det(transform: &Transform2D, n: usize, step: f64) -> f64 {
    let mut min_det = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            let x = -1.0 + 2.0 * (j as f64 + 0.5) / n as f64;
            let y = -1.0 + 2.0 * (i as f64 + 0.5) / n as f64;
            let xp = transform.eval([x + step, y]);
            let xm = transform.eval([x - step, y]);
            let yp = transform.eval([x, y + step]);
            let ym = transform.eval([x, y - step]);
            let j00 = (xp[0] - xm[0]) / (2.0 * step);
            let j10 = (xp[1] - xm[1]) / (2.0 * step);
            let j01 = (yp[0] - ym[0]) / (2.0 * step);
            let j11 = (yp[1] - ym[1]) / (2.0 * step);
            let det = j00 * j11 - j01 * j10;
            min_det = min_det.min(det);
        }
    }
    min_det
}

pub struct DeformedGrid {
    pub image: Image2D,
    pub min_jacobian_det: f64,
}

/// Renders a regular line grid warped by `transform` (white background, black
/// lines every `cell_px` pixels) and reports the minimum probed Jacobian
/// determinant alongside.
pub fn deformed_grid_image(
    transform: &Transform2D,
    shape: (usize, usize),
    cell_px: usize,
) -> DeformedGrid {
    let cell = cell_px.max(2);
    let base = Image2D::from_fn(shape.0, shape.1, |r, c| {
        if r % cell == 0 || c % cell == 0 || r == shape.0 - 1 || c == shape.1 - 1 {
            0.0
        } else {
            255.0
        }
    });
    DeformedGrid {
        image: warp_image(&base, transform, shape),
        min_jacobian_det: min_jacobian_det(transform, 48, 1e-3),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{transform_from_theta, StageKind, Theta};

    #[test]
    fn identity_jacobian_is_one() {
        let det = min_jacobian_det(&Transform2D::identity(), 48, 1e-3);
        assert!((det - 1.0).abs() < 1e-3, "{det}");
    }

    #[test]
    fn uniform_scale_jacobian_is_one_point_two_one() {
        let theta = Theta::new(StageKind::Affine, 0.1, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
            .unwrap();
        let t = transform_from_theta(&theta).unwrap();
        let det = min_jacobian_det(&t, 48, 1e-3);
        assert!((det - 1.21).abs() < 1e-3, "{det}");
    }

    #[test]
    fn deformed_grid_of_identity_keeps_straight_lines() {
        let g = deformed_grid_image(&Transform2D::identity(), (64, 64), 8);
        assert!((g.min_jacobian_det - 1.0).abs() < 1e-3);
        assert_eq!(g.image.at(0, 5), 0.0);
        assert_eq!(g.image.at(4, 5), 255.0);
    }
}
