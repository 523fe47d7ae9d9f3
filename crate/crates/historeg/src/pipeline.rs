//! Two-stage learned inference and transform application.
//!
//! Registration runs on the preprocessed canvases: the affine network reads
//! the mask pair, the spline network reads the intensity pair with the
//! moving side pre-warped by the affine estimate, and the two stages compose
//! into one map. Because every transform lives on the normalized domain, the
//! same composite applies to the native-resolution images through the stored
//! case geometry, with a single interpolation of the original raster.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::geometry::{
    compose, sample_bilinear, transform_from_theta, StageKind, Theta, Transform2D, DEFAULT_ALPHA,
};
use crate::image::{Image2D, Mask2D};
use crate::net::MatchNet;
use crate::preprocess::{CaseGeometry, PreprocessedCase};

/// Everything one registration produces: the stage transforms, their
/// composition, the warped moving canvas (for overlays), the warped native
/// image and labels in fixed-frame geometry, and timing counters. Both
/// backends fill the same shape; `deformable` is the thin-plate stage for
/// the learned path and the B-spline field for the iterative one.
#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub affine: Transform2D,
    pub deformable: Transform2D,
    pub composite: Transform2D,
    pub warped_moving_canvas: Image2D,
    pub warped_hist: Image2D,
    pub warped_labels: BTreeMap<String, Mask2D>,
    /// Network forward passes (always 2 for the learned path, 0 for the
    /// iterative baseline).
    pub n_forward_passes: usize,
    /// Optimizer iterations (0 for the learned path).
    pub iter_count: usize,
    pub affine_time_s: f64,
    pub deformable_time_s: f64,
    pub wall_time_s: f64,
}

fn canvas_tensor(img: &Image2D) -> Array4<f64> {
    let (h, w) = img.shape();
    let mut t = Array4::zeros((1, 1, h, w));
    for ((r, c), &v) in img.data().indexed_iter() {
        t[(0, 0, r, c)] = v / 255.0;
    }
    t
}

fn check_model(net: &MatchNet, kind: StageKind, canvas: usize) -> Result<()> {
    if net.kind != kind {
        return Err(Error::StageMismatch {
            expected: kind.name().to_string(),
            found: net.kind.name().to_string(),
        });
    }
    if net.canvas != canvas {
        return Err(Error::Config(format!(
            "model expects a {} canvas, case uses {}",
            net.canvas, canvas
        )));
    }
    Ok(())
}

/// One forward pass: predicts the stage parameters for a canvas pair.
fn predict_theta(net: &MatchNet, moving: &Image2D, fixed: &Image2D) -> Result<Theta> {
    let out = net.forward_eval(&canvas_tensor(moving), &canvas_tensor(fixed));
    let row: Vec<f64> = out.row(0).iter().copied().collect();
    Theta::new(net.kind, DEFAULT_ALPHA, row)
}

/// Maps a fixed-frame native mm position through the composite into the
/// moving (oriented) native frame, in mm.
pub fn map_mm(composite: &Transform2D, geom: &CaseGeometry, p_mm: [f64; 2]) -> [f64; 2] {
    let q = composite.eval(geom.fixed.norm_from_mm(p_mm));
    geom.moving.mm_from_norm(q)
}

/// Resamples the oriented native moving image into the fixed native frame
/// through the composite, bilinear, in one pass.
pub fn warp_native(moving: &Image2D, composite: &Transform2D, geom: &CaseGeometry) -> Result<Image2D> {
    if moving.shape() != geom.moving.shape {
        return Err(Error::ShapeMismatch(format!(
            "moving image is {:?}, case geometry says {:?}",
            moving.shape(),
            geom.moving.shape
        )));
    }
    let (h, w) = geom.fixed.shape;
    let mut out = Image2D::zeros(h, w).with_spacing(geom.fixed.spacing_mm);
    for r in 0..h {
        for c in 0..w {
            let p = geom.fixed.norm_from_px((c as f64, r as f64));
            let q = composite.eval(p);
            let (mc, mr) = geom.moving.px_from_norm(q);
            out.data_mut()[(r, c)] = sample_bilinear(moving.data(), mc, mr);
        }
    }
    Ok(out)
}

/// Maps binary labels from the oriented moving native frame into the fixed
/// native frame, nearest neighbor, so outputs stay binary.
pub fn map_labels(
    labels: &BTreeMap<String, Mask2D>,
    composite: &Transform2D,
    geom: &CaseGeometry,
) -> Result<BTreeMap<String, Mask2D>> {
    let (h, w) = geom.fixed.shape;
    let (mh, mw) = geom.moving.shape;
    let mut out = BTreeMap::new();
    for (name, label) in labels {
        if label.shape() != geom.moving.shape {
            return Err(Error::ShapeMismatch(format!(
                "label '{name}' is {:?}, case geometry says {:?}",
                label.shape(),
                geom.moving.shape
            )));
        }
        let warped = Mask2D::from_fn(h, w, |r, c| {
            let p = geom.fixed.norm_from_px((c as f64, r as f64));
            let q = composite.eval(p);
            let (mc, mr) = geom.moving.px_from_norm(q);
            let (mc, mr) = (mc.round(), mr.round());
            mc >= 0.0
                && mr >= 0.0
                && (mc as usize) < mw
                && (mr as usize) < mh
                && label.get(mr as usize, mc as usize)
        })
        .with_spacing(geom.fixed.spacing_mm);
        out.insert(name.clone(), warped);
    }
    Ok(out)
}

/// Zeroes every pixel outside the fixed-frame mask; pixels inside pass
/// through unchanged.
pub fn postprocess(warped: &Image2D, fixed_mask: &Mask2D) -> Result<Image2D> {
    if warped.shape() != fixed_mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "postprocess needs matching shapes, got {:?} and {:?}",
            warped.shape(),
            fixed_mask.shape()
        )));
    }
    let (h, w) = warped.shape();
    let mut out = warped.clone();
    for r in 0..h {
        for c in 0..w {
            if !fixed_mask.get(r, c) {
                out.data_mut()[(r, c)] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Runs the two-stage registration for one preprocessed case and applies the
/// composite to the oriented native moving image and labels.
///
/// Exactly two network forward passes happen: the affine stage on the soft
/// mask canvases, then the spline stage on the intensity canvases with the
/// moving side warped by the affine estimate. The native outputs each come
/// from a single interpolation through the composite.
pub fn register_pair(
    prep: &PreprocessedCase,
    moving_native: &Image2D,
    labels_native: &BTreeMap<String, Mask2D>,
    affine_net: &MatchNet,
    tps_net: &MatchNet,
) -> Result<RegistrationResult> {
    let start = Instant::now();
    let canvas = prep.geom.canvas;
    check_model(affine_net, StageKind::Affine, canvas)?;
    check_model(tps_net, StageKind::Tps, canvas)?;
    if prep.moving_mask().is_empty() || prep.fixed_mask().is_empty() {
        return Err(Error::EmptyMask("registration needs both masks".into()));
    }

    let t0 = Instant::now();
    let theta_aff = predict_theta(affine_net, &prep.moving_mask_soft, &prep.fixed_mask_soft)?;
    let affine = transform_from_theta(&theta_aff)?;
    let affine_time_s = t0.elapsed().as_secs_f64();

    let shape = (canvas, canvas);
    let prewarped = crate::geometry::warp_image(&prep.moving, &affine, shape);

    let t1 = Instant::now();
    let theta_tps = predict_theta(tps_net, &prewarped, &prep.fixed)?;
    let tps = transform_from_theta(&theta_tps)?;
    let deformable_time_s = t1.elapsed().as_secs_f64();

    let composite = compose(affine.clone(), tps.clone());
    let warped_moving_canvas = crate::geometry::warp_image(&prep.moving, &composite, shape);
    let warped_hist = warp_native(moving_native, &composite, &prep.geom)?;
    let warped_labels = map_labels(labels_native, &composite, &prep.geom)?;

    Ok(RegistrationResult {
        affine,
        deformable: tps,
        composite,
        warped_moving_canvas,
        warped_hist,
        warped_labels,
        n_forward_passes: 2,
        iter_count: 0,
        affine_time_s,
        deformable_time_s,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Same contract as [`register_pair`] driven by the iterative backend:
/// gradient descent on the mask canvases for the affine stage, mutual
/// information ascent over a B-spline field for the deformable stage.
pub fn register_pair_baseline(
    prep: &PreprocessedCase,
    moving_native: &Image2D,
    labels_native: &BTreeMap<String, Mask2D>,
    cfg: &crate::baseline::IterativeConfig,
) -> Result<RegistrationResult> {
    let start = Instant::now();
    if prep.moving_mask().is_empty() || prep.fixed_mask().is_empty() {
        return Err(Error::EmptyMask("registration needs both masks".into()));
    }

    let t0 = Instant::now();
    let affine = crate::baseline::affine_register_masks(
        &prep.moving_mask_soft,
        &prep.fixed_mask_soft,
        cfg,
    )?;
    let affine_time_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let (composite, trace) = crate::baseline::deformable_register_mi_traced(
        &prep.moving,
        &prep.fixed,
        &affine,
        cfg,
    )?;
    let deformable_time_s = t1.elapsed().as_secs_f64();

    let deformable = match &composite {
        Transform2D::Composite(stages) => stages.last().cloned().unwrap_or_else(Transform2D::identity),
        other => other.clone(),
    };
    let shape = (prep.geom.canvas, prep.geom.canvas);
    let warped_moving_canvas = crate::geometry::warp_image(&prep.moving, &composite, shape);
    let warped_hist = warp_native(moving_native, &composite, &prep.geom)?;
    let warped_labels = map_labels(labels_native, &composite, &prep.geom)?;

    Ok(RegistrationResult {
        affine,
        deformable,
        composite,
        warped_moving_canvas,
        warped_hist,
        warped_labels,
        n_forward_passes: 0,
        iter_count: trace.iters_run,
        affine_time_s,
        deformable_time_s,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
