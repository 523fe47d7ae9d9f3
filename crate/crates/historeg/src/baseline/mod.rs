//! Classical iterative registration backend: gradient descent over the six
//! identity-anchored affine parameters driven by mask overlap, followed by a
//! free-form B-spline refinement that climbs a mutual information objective
//! with early stopping. The learned pipeline is compared against this.

pub mod mi;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    compose, norm_to_px, px_to_norm, sample_bilinear_grad, transform_from_theta, warp_image,
    FfdField, StageKind, Theta, Transform2D, DEFAULT_ALPHA,
};
use crate::image::Image2D;
use crate::train::ssd_loss_grad;

/// Knobs for both iterative stages. `step_size` is the accepted move length
/// in parameter space per iteration (the affine stage additionally halves it
/// whenever a trial move would increase the loss); the early stop fields
/// apply to the deformable stage only.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct IterativeConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub mi_bins: usize,
    pub ffd_grid: (usize, usize),
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            max_iters: 300,
            mi_bins: 32,
            ffd_grid: (8, 8),
            early_stop_patience: 10,
            early_stop_min_delta: 1e-4,
        }
    }
}

impl IterativeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_size <= 0.0 || !self.step_size.is_finite() {
            return Err(Error::Config(format!(
                "iterative step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("iterative max_iters must be positive".into()));
        }
        if self.mi_bins < 8 {
            return Err(Error::Config(format!(
                "mutual information needs at least 8 bins, got {}",
                self.mi_bins
            )));
        }
        if self.ffd_grid.0 == 0 || self.ffd_grid.1 == 0 {
            return Err(Error::Config(format!(
                "deformation grid must be positive, got {:?}",
                self.ffd_grid
            )));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early stop patience must be positive".into()));
        }
        if self.early_stop_min_delta <= 0.0 || !self.early_stop_min_delta.is_finite() {
            return Err(Error::Config(format!(
                "early stop min_delta must be positive, got {}",
                self.early_stop_min_delta
            )));
        }
        Ok(())
    }
}

fn unit_scale(img: &Image2D) -> Image2D {
    let (h, w) = img.shape();
    Image2D::from_fn(h, w, |r, c| img.at(r, c) / 255.0)
}

/// Gradient descent on the six affine parameters, returning the accepted
/// loss sequence alongside the best parameters. Moves go along the
/// normalized gradient; a move that would increase the loss halves the step
/// instead and counts as an iteration, so accepted losses never increase.
pub(crate) fn affine_descent(
    moving: &Image2D,
    fixed: &Image2D,
    cfg: &IterativeConfig,
) -> Result<(Theta, Vec<f64>)> {
    let mut values = vec![0.0; StageKind::Affine.param_count()];
    let mut theta = Theta::new(StageKind::Affine, DEFAULT_ALPHA, values.clone())?;
    let (mut loss, mut grad) = ssd_loss_grad(moving, fixed, &theta)?;
    if !loss.is_finite() {
        return Err(Error::Optimization("affine descent started non-finite".into()));
    }
    let mut accepted = vec![loss];
    let mut step = cfg.step_size;
    for _ in 0..cfg.max_iters {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-14 || step < 1e-12 {
            break;
        }
        let trial_values: Vec<f64> = values
            .iter()
            .zip(&grad)
            .map(|(v, g)| v - step * g / gnorm)
            .collect();
        let trial = Theta::new(StageKind::Affine, DEFAULT_ALPHA, trial_values.clone())?;
        let (trial_loss, trial_grad) = ssd_loss_grad(moving, fixed, &trial)?;
        if !trial_loss.is_finite() {
            return Err(Error::Optimization("affine descent diverged".into()));
        }
        if trial_loss < loss {
            values = trial_values;
            theta = trial;
            loss = trial_loss;
            grad = trial_grad;
            accepted.push(loss);
        } else {
            step *= 0.5;
        }
    }
    Ok((theta, accepted))
}

/// Registers two mask rasters (soft 0..=255 coverage works best; hard masks
/// leave the descent without a usable gradient away from the boundary) by
/// minimizing the sum of squared differences over an affine map.
pub fn affine_register_masks(
    moving_mask: &Image2D,
    fixed_mask: &Image2D,
    cfg: &IterativeConfig,
) -> Result<Transform2D> {
    cfg.validate()?;
    if moving_mask.shape() != fixed_mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mask canvases differ: {:?} vs {:?}",
            moving_mask.shape(),
            fixed_mask.shape()
        )));
    }
    let moving = unit_scale(moving_mask);
    let fixed = unit_scale(fixed_mask);
    let (theta, _) = affine_descent(&moving, &fixed, cfg)?;
    transform_from_theta(&theta)
}

/// What the deformable optimizer did: how many iterations ran, where the
/// best score landed, and its value.
#[derive(Clone, Copy, Debug)]
pub struct FfdTrace {
    pub iters_run: usize,
    pub best_iter: usize,
    pub best_mi: f64,
}

struct FfdEval {
    mi: f64,
    warped: Image2D,
    dcol: Vec<f64>,
    drow: Vec<f64>,
}

/// Warps `prewarped` through the field (reusing precomputed per-pixel
/// lattice supports) and returns the mutual information against `fixed`
/// together with the spatial sample gradients.
fn ffd_eval(
    prewarped: &Image2D,
    fixed: &Image2D,
    field: &FfdField,
    points: &[[f64; 2]],
    supports: &[[(usize, usize, f64); 16]],
    bins: usize,
) -> Result<FfdEval> {
    let shape = fixed.shape();
    let (h, w) = shape;
    let mut warped = Image2D::zeros(h, w);
    let mut dcol = vec![0.0; h * w];
    let mut drow = vec![0.0; h * w];
    for (i, (p, sup)) in points.iter().zip(supports).enumerate() {
        let mut ux = 0.0;
        let mut uy = 0.0;
        for &(lr, lc, wgt) in sup {
            ux += wgt * field.dx()[(lr, lc)];
            uy += wgt * field.dy()[(lr, lc)];
        }
        let (col, row) = norm_to_px([p[0] + ux, p[1] + uy], shape);
        let (v, dc, dr) = sample_bilinear_grad(prewarped.data(), col, row);
        warped.data_mut()[(i / w, i % w)] = v;
        dcol[i] = dc;
        drow[i] = dr;
    }
    let mi = mi::mutual_information(fixed, &warped, bins)?;
    if !mi.is_finite() {
        return Err(Error::Optimization("mutual information went non-finite".into()));
    }
    Ok(FfdEval {
        mi,
        warped,
        dcol,
        drow,
    })
}

/// Climbs mutual information between `fixed` and the deformed `prewarped`
/// image over a zero-initialized B-spline control lattice. Moves along the
/// normalized gradient are accepted only when they raise the score (the step
/// halves otherwise), so the accepted sequence is monotone; `patience`
/// iterations without a gain of at least `min_delta` stop the loop.
pub(crate) fn refine_ffd(
    prewarped: &Image2D,
    fixed: &Image2D,
    cfg: &IterativeConfig,
) -> Result<(FfdField, FfdTrace)> {
    let shape = fixed.shape();
    let (h, w) = shape;
    let (gx, gy) = cfg.ffd_grid;
    let mut field = FfdField::zeros(gx, gy);

    // The sample positions never move, only the control values do, so the
    // sixteen active lattice weights per pixel can be computed once.
    let mut supports = Vec::with_capacity(h * w);
    let mut points = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let p = px_to_norm(c as f64, r as f64, shape);
            supports.push(field.support(p));
            points.push(p);
        }
    }

    let mut eval = ffd_eval(prewarped, fixed, &field, &points, &supports, cfg.mi_bins)?;
    let mut best_mi = eval.mi;
    let mut best_iter = 0;
    let mut since_best = 0;
    let mut iters_run = 0;
    let mut step = cfg.step_size;
    let half_w = w as f64 / 2.0;
    let half_h = h as f64 / 2.0;

    for it in 0..cfg.max_iters {
        iters_run = it + 1;
        let (_, dmi) = mi::mi_and_grad_wrt_moving(fixed, &eval.warped, cfg.mi_bins)?;
        let mut grad_dx: Array2<f64> = Array2::zeros(field.dx().dim());
        let mut grad_dy: Array2<f64> = Array2::zeros(field.dy().dim());
        for (i, sup) in supports.iter().enumerate() {
            let g = dmi[(i / w, i % w)];
            if g == 0.0 {
                continue;
            }
            let gx_px = g * eval.dcol[i] * half_w;
            let gy_px = g * eval.drow[i] * half_h;
            for &(lr, lc, wgt) in sup {
                grad_dx[(lr, lc)] += wgt * gx_px;
                grad_dy[(lr, lc)] += wgt * gy_px;
            }
        }
        let gnorm = (grad_dx.iter().map(|g| g * g).sum::<f64>()
            + grad_dy.iter().map(|g| g * g).sum::<f64>())
        .sqrt();
        if gnorm < 1e-12 || step < 1e-10 {
            break;
        }

        let scale = step / gnorm;
        let mut trial = field.clone();
        trial
            .dx_mut()
            .zip_mut_with(&grad_dx, |d, g| *d += scale * g);
        trial
            .dy_mut()
            .zip_mut_with(&grad_dy, |d, g| *d += scale * g);
        let trial_eval = ffd_eval(prewarped, fixed, &trial, &points, &supports, cfg.mi_bins)?;
        if trial_eval.mi > eval.mi {
            field = trial;
            eval = trial_eval;
        } else {
            step *= 0.5;
        }

        if eval.mi > best_mi + cfg.early_stop_min_delta {
            best_mi = eval.mi;
            best_iter = it;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }

    Ok((
        field,
        FfdTrace {
            iters_run,
            best_iter,
            best_mi,
        },
    ))
}

/// Deformable refinement on top of `init`: the moving image is resampled
/// through `init` once, a B-spline displacement field is optimized against
/// `fixed` by mutual information ascent, and the result composes with `init`
/// so one final interpolation of the original moving image applies both.
pub fn deformable_register_mi(
    moving: &Image2D,
    fixed: &Image2D,
    init: &Transform2D,
    cfg: &IterativeConfig,
) -> Result<Transform2D> {
    deformable_register_mi_traced(moving, fixed, init, cfg).map(|(t, _)| t)
}

/// [`deformable_register_mi`] plus the optimizer trace.
pub fn deformable_register_mi_traced(
    moving: &Image2D,
    fixed: &Image2D,
    init: &Transform2D,
    cfg: &IterativeConfig,
) -> Result<(Transform2D, FfdTrace)> {
    cfg.validate()?;
    let prewarped = warp_image(moving, init, fixed.shape());
    let (fmin, fmax) = fixed.min_max();
    let (mmin, mmax) = prewarped.min_max();
    if fmax - fmin < 1e-12 || mmax - mmin < 1e-12 {
        return Err(Error::Degenerate(
            "constant image has a degenerate intensity histogram".into(),
        ));
    }
    let (field, trace) = refine_ffd(&prewarped, fixed, cfg)?;
    Ok((compose(init.clone(), Transform2D::Ffd(field)), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{warp_mask, AffineMap};
    use crate::image::Mask2D;
    use crate::metrics::dice;

    fn soft_ellipse(shape: (usize, usize), center_px: (f64, f64), radii_px: (f64, f64)) -> Image2D {
        let (h, w) = shape;
        Image2D::from_fn(h, w, |r, c| {
            let dx = (c as f64 - center_px.0) / radii_px.0;
            let dy = (r as f64 - center_px.1) / radii_px.1;
            let d = dx.hypot(dy);
            // Smooth edge a few pixels wide so the overlap loss has a
            // usable gradient everywhere near the boundary.
            let edge = (d - 1.0) * radii_px.0.min(radii_px.1) / 2.5;
            255.0 / (1.0 + edge.exp())
        })
    }

    fn binarize(img: &Image2D) -> Mask2D {
        let (h, w) = img.shape();
        Mask2D::from_fn(h, w, |r, c| img.at(r, c) > 127.5)
    }

    fn mean_probe_displacement_px(t: &Transform2D, shape: (usize, usize)) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for r in 0..5 {
            for c in 0..5 {
                let col = (c as f64 + 0.5) / 5.0 * shape.1 as f64;
                let row = (r as f64 + 0.5) / 5.0 * shape.0 as f64;
                let p = px_to_norm(col, row, shape);
                let q = t.eval(p);
                let (qc, qr) = norm_to_px(q, shape);
                total += (qc - col).hypot(qr - row);
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn aligned_masks_keep_the_transform_near_identity() {
        let mask = soft_ellipse((96, 96), (48.0, 48.0), (30.0, 22.0));
        let cfg = IterativeConfig {
            max_iters: 60,
            ..IterativeConfig::default()
        };
        let t = affine_register_masks(&mask, &mask, &cfg).unwrap();
        let d = mean_probe_displacement_px(&t, (96, 96));
        assert!(d <= 0.5, "mean probe displacement {d} px");
    }

    #[test]
    fn known_shift_is_recovered_within_a_pixel() {
        let shape = (120, 120);
        let fixed = soft_ellipse(shape, (60.0, 60.0), (38.0, 30.0));
        let moving = soft_ellipse(shape, (66.0, 56.0), (38.0, 30.0));
        let t = affine_register_masks(&moving, &fixed, &IterativeConfig::default()).unwrap();
        // The aligning map must carry fixed-raster points onto the shifted
        // content, i.e. displace by about (+6, -4) pixels.
        let p = px_to_norm(60.0, 60.0, shape);
        let (qc, qr) = norm_to_px(t.eval(p), shape);
        assert!(
            (qc - 66.0).abs() <= 1.0 && (qr - 56.0).abs() <= 1.0,
            "recovered center ({qc:.2}, {qr:.2})"
        );
        let warped = warp_mask(&binarize(&moving), &t, shape);
        let overlap = dice(&warped, &binarize(&fixed)).unwrap();
        assert!(overlap >= 0.98, "dice {overlap}");
    }

    #[test]
    fn accepted_losses_never_increase() {
        let fixed = soft_ellipse((80, 80), (40.0, 40.0), (26.0, 20.0));
        let moving = soft_ellipse((80, 80), (43.0, 38.0), (24.0, 21.0));
        let cfg = IterativeConfig {
            max_iters: 80,
            ..IterativeConfig::default()
        };
        let (_, losses) = affine_descent(
            &unit_scale(&moving),
            &unit_scale(&fixed),
            &cfg,
        )
        .unwrap();
        assert!(losses.len() > 1, "descent never accepted a step");
        for pair in losses.windows(2) {
            assert!(pair[1] <= pair[0], "loss increased: {pair:?}");
        }
    }

    #[test]
    fn self_registration_stays_put() {
        let img = Image2D::from_fn(64, 64, |r, c| {
            let x = c as f64 / 63.0;
            let y = r as f64 / 63.0;
            127.5 + 80.0 * (6.0 * x).sin() * (5.0 * y).cos() + 40.0 * (9.0 * x * y).sin()
        });
        let cfg = IterativeConfig {
            max_iters: 40,
            ..IterativeConfig::default()
        };
        let t = deformable_register_mi(&img, &img, &Transform2D::identity(), &cfg).unwrap();
        let d = mean_probe_displacement_px(&t, (64, 64));
        assert!(d <= 1.0, "mean displacement {d} px");
    }

    #[test]
    fn early_stopping_bounds_the_iteration_count() {
        let fixed = soft_ellipse((64, 64), (32.0, 32.0), (20.0, 16.0));
        let moving = soft_ellipse((64, 64), (34.0, 31.0), (20.0, 16.0));
        let cfg = IterativeConfig {
            max_iters: 200,
            ..IterativeConfig::default()
        };
        let (_, trace) = refine_ffd(&moving, &fixed, &cfg).unwrap();
        assert!(trace.best_mi.is_finite());
        assert!(trace.iters_run <= cfg.max_iters);
        assert!(
            trace.iters_run - 1 - trace.best_iter <= cfg.early_stop_patience,
            "ran {} iters, best at {}",
            trace.iters_run,
            trace.best_iter
        );
    }

    #[test]
    fn deformable_stage_never_loses_overlap() {
        // The fixed side is a warp of the moving canvas (the profile the
        // synthetic training pairs use), so intensity alignment and mask
        // alignment point the same way.
        let shape = (96, 96);
        let mask_at = |x: f64, y: f64| {
            let dx = (x - 48.0) / 30.0;
            let dy = (y - 48.0) / 24.0;
            let edge = (dx.hypot(dy) - 1.0) * 24.0 / 2.5;
            255.0 / (1.0 + edge.exp())
        };
        let tex_at = |x: f64, y: f64| {
            let t = 0.5 + 0.5 * ((x * 0.29).sin() * (y * 0.23).cos());
            mask_at(x, y) * (0.7 + 0.3 * t)
        };
        let moving = Image2D::from_fn(96, 96, |r, c| tex_at(c as f64, r as f64));
        let moving_mask = Image2D::from_fn(96, 96, |r, c| mask_at(c as f64, r as f64));
        let tau = {
            let (s, rot) = (1.03, 0.05f64);
            let aff = AffineMap::from_matrix(
                [
                    [s * rot.cos(), -s * rot.sin()],
                    [s * rot.sin(), s * rot.cos()],
                ],
                [0.03, -0.02],
            );
            let theta: Vec<f64> = (0..72).map(|k| 0.3 * (1.3 * k as f64).sin()).collect();
            let tps = Theta::new(StageKind::Tps, DEFAULT_ALPHA, theta).unwrap();
            compose(
                Transform2D::Affine(aff),
                transform_from_theta(&tps).unwrap(),
            )
        };
        let fixed = warp_image(&moving, &tau, shape);
        let fixed_mask = warp_image(&moving_mask, &tau, shape);
        let init = affine_register_masks(&moving_mask, &fixed_mask, &IterativeConfig::default())
            .unwrap();
        let pre = dice(
            &warp_mask(&binarize(&moving_mask), &init, shape),
            &binarize(&fixed_mask),
        )
        .unwrap();
        let cfg = IterativeConfig {
            max_iters: 60,
            ..IterativeConfig::default()
        };
        let composed = deformable_register_mi(&moving, &fixed, &init, &cfg).unwrap();
        let post = dice(
            &warp_mask(&binarize(&moving_mask), &composed, shape),
            &binarize(&fixed_mask),
        )
        .unwrap();
        assert!(
            post >= pre - 1e-9,
            "overlap dropped from {pre:.4} to {post:.4}"
        );
    }

    #[test]
    fn constant_images_are_rejected() {
        let flat = Image2D::from_fn(32, 32, |_, _| 40.0);
        let textured = Image2D::from_fn(32, 32, |r, c| ((r * 7 + c * 3) % 211) as f64);
        let err = deformable_register_mi(
            &flat,
            &textured,
            &Transform2D::identity(),
            &IterativeConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)), "{err}");
    }

    #[test]
    fn config_bounds_are_enforced() {
        let mut cfg = IterativeConfig::default();
        cfg.mi_bins = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = IterativeConfig::default();
        cfg.step_size = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(IterativeConfig::default().validate().is_ok());
    }
}

