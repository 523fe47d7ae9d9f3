//! Self-supervised training of the matching network.
//!
//! The loss never sees the generating parameters: for each synthetic pair
//! the network predicts parameters, the moving image is warped by them, and
//! the summed squared intensity difference against the target drives the
//! gradient. The warp is linear in the thin-plate parameters and affine in
//! the affine ones, so the gradient through the resampler has a closed
//! form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    norm_to_px, px_to_norm, sample_bilinear_grad, tps_influence, AffineMap, StageKind, Theta,
    TPS_CTRL_COUNT,
};
use crate::image::Image2D;
use crate::net::{MatchNet, Param};
use crate::synth::TrainingTuple;

/// Adam with bias correction. The caller supplies the learning rate per
/// step, which is how the epoch decay schedule reaches it.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }
}

impl Adam {
    pub fn step(&mut self, params: &mut [(String, &mut Param)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (_, p) in params.iter_mut() {
            ndarray::Zip::from(&mut p.m)
                .and(&p.grad)
                .for_each(|m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            ndarray::Zip::from(&mut p.v)
                .and(&p.grad)
                .for_each(|v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            ndarray::Zip::from(&mut p.value)
                .and(&p.m)
                .and(&p.v)
                .for_each(|w, &m, &v| {
                    *w -= lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                });
        }
    }
}

type InfluenceCache = Mutex<BTreeMap<(usize, usize), Arc<Array2<f64>>>>;
static GRID_INFLUENCE: OnceLock<InfluenceCache> = OnceLock::new();

/// Sensitivity of the thin-plate map to its parameters, evaluated at every
/// pixel center of the given raster, cached per shape.
fn grid_influence(shape: (usize, usize)) -> Result<Arc<Array2<f64>>> {
    let cache = GRID_INFLUENCE.get_or_init(|| Mutex::new(BTreeMap::new()));
    let mut guard = cache.lock().unwrap_or_else(|p| p.into_inner());
    if let Some(found) = guard.get(&shape) {
        return Ok(found.clone());
    }
    let (h, w) = shape;
    let mut pts = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            pts.push(px_to_norm(c as f64, r as f64, shape));
        }
    }
    let infl = Arc::new(tps_influence(&pts)?);
    guard.insert(shape, infl.clone());
    Ok(infl)
}

fn ssd_inner(
    moving: &Image2D,
    fixed: &Image2D,
    theta: &Theta,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    if moving.shape() != fixed.shape() {
        return Err(Error::ShapeMismatch(format!(
            "loss needs matching shapes, got {:?} and {:?}",
            moving.shape(),
            fixed.shape()
        )));
    }
    let shape = moving.shape();
    let (h, w) = shape;
    let alpha = theta.alpha;
    let data = moving.data();

    enum Map<'a> {
        Affine(AffineMap),
        Tps(&'a Array2<f64>),
    }
    let infl = match theta.kind {
        StageKind::Affine => None,
        StageKind::Tps => Some(grid_influence(shape)?),
    };
    let map = match (&infl, theta.kind) {
        (_, StageKind::Affine) => Map::Affine(AffineMap::from_theta(theta)?),
        (Some(a), StageKind::Tps) => Map::Tps(a.as_ref()),
        (None, StageKind::Tps) => unreachable!(),
    };

    let mut loss = 0.0;
    for r in 0..h {
        for c in 0..w {
            let p = px_to_norm(c as f64, r as f64, shape);
            let q = match &map {
                Map::Affine(a) => a.eval(p),
                Map::Tps(a) => {
                    let row = a.row(r * w + c);
                    let mut dx = 0.0;
                    let mut dy = 0.0;
                    for k in 0..TPS_CTRL_COUNT {
                        dx += row[k] * theta.values[k];
                        dy += row[k] * theta.values[TPS_CTRL_COUNT + k];
                    }
                    [p[0] + alpha * dx, p[1] + alpha * dy]
                }
            };
            let (col, row_px) = norm_to_px(q, shape);
            let (v, d_col, d_row) = sample_bilinear_grad(data, col, row_px);
            let resid = fixed.at(r, c) - v;
            loss += resid * resid;
            if let Some(g) = grad.as_deref_mut() {
                let g_qx = -2.0 * resid * d_col * w as f64 * 0.5;
                let g_qy = -2.0 * resid * d_row * h as f64 * 0.5;
                match &map {
                    Map::Affine(_) => {
                        g[0] += alpha * g_qx * p[0];
                        g[1] += alpha * g_qx * p[1];
                        g[2] += alpha * g_qx;
                        g[3] += alpha * g_qy * p[0];
                        g[4] += alpha * g_qy * p[1];
                        g[5] += alpha * g_qy;
                    }
                    Map::Tps(a) => {
                        let arow = a.row(r * w + c);
                        for k in 0..TPS_CTRL_COUNT {
                            g[k] += alpha * g_qx * arow[k];
                            g[TPS_CTRL_COUNT + k] += alpha * g_qy * arow[k];
                        }
                    }
                }
            }
        }
    }
    Ok(loss)
}

/// Sum of squared differences between the target and the moving image
/// resampled through the parameterized map.
pub fn ssd_loss(moving: &Image2D, fixed: &Image2D, theta: &Theta) -> Result<f64> {
    ssd_inner(moving, fixed, theta, None)
}

/// Loss plus its analytic gradient in the parameters.
pub fn ssd_loss_grad(moving: &Image2D, fixed: &Image2D, theta: &Theta) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; theta.kind.param_count()];
    let loss = ssd_inner(moving, fixed, theta, Some(&mut grad))?;
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            lr_decay: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-pair loss over the training pass; absent for the pre-training
    /// row.
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: StageKind,
    pub canvas: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub wall_time_s: f64,
}

fn batch_tensor(tuples: &[&TrainingTuple], side: usize, moving: bool) -> Array4<f64> {
    let n = tuples.len();
    let mut out = Array4::zeros((n, 1, side, side));
    for (i, t) in tuples.iter().enumerate() {
        let img = if moving { &t.moving } else { &t.fixed };
        for r in 0..side {
            for c in 0..side {
                out[(i, 0, r, c)] = img.at(r, c) / 255.0;
            }
        }
    }
    out
}

fn scaled(img: &Image2D) -> Image2D {
    Image2D::new(img.data() / 255.0, img.spacing_mm())
}

fn mean_eval_loss(net: &MatchNet, tuples: &[&TrainingTuple], side: usize) -> Result<Option<f64>> {
    if tuples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for chunk in tuples.chunks(16) {
        let ma = batch_tensor(chunk, side, true);
        let mb = batch_tensor(chunk, side, false);
        let theta = net.forward_eval(&ma, &mb);
        for (i, t) in chunk.iter().enumerate() {
            let th = Theta::new(net.kind, crate::geometry::DEFAULT_ALPHA, theta.row(i).to_vec())?;
            total += ssd_loss(&scaled(&t.moving), &scaled(&t.fixed), &th)?;
        }
    }
    Ok(Some(total / tuples.len() as f64))
}

/// Splits tuple indices by source image: the last tenth of the sorted image
/// list (at least one image, when there are two or more) validates, the rest
/// train.
pub fn split_by_image(tuples: &[TrainingTuple]) -> (Vec<usize>, Vec<usize>) {
    let mut image_ids: Vec<usize> = tuples.iter().map(|t| t.image_idx).collect();
    image_ids.sort_unstable();
    image_ids.dedup();
    let n_val_images = if image_ids.len() >= 2 {
        (image_ids.len() / 10).max(1)
    } else {
        0
    };
    let val_set: Vec<usize> = image_ids[image_ids.len() - n_val_images..].to_vec();
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (i, t) in tuples.iter().enumerate() {
        if val_set.contains(&t.image_idx) {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    (train_idx, val_idx)
}

/// Trains one stage on synthetic tuples and returns the network state of
/// the epoch with the lowest validation loss (the final state when no
/// validation split exists).
pub fn train_stage(
    tuples: &[TrainingTuple],
    kind: StageKind,
    cfg: &TrainConfig,
) -> Result<(MatchNet, TrainReport)> {
    if tuples.is_empty() {
        return Err(Error::Config("cannot train on an empty tuple set".into()));
    }
    let side = tuples[0].moving.height();
    for t in tuples {
        if t.moving.shape() != (side, side) || t.fixed.shape() != (side, side) {
            return Err(Error::ShapeMismatch(
                "training tuples must share one square canvas".into(),
            ));
        }
        if t.theta_gt.kind != kind {
            return Err(Error::StageMismatch {
                expected: kind.name().to_string(),
                found: t.theta_gt.kind.name().to_string(),
            });
        }
    }

    let start = Instant::now();
    let (train_idx, val_idx) = split_by_image(tuples);
    let train_refs = |order: &[usize]| -> Vec<&TrainingTuple> {
        order.iter().map(|&i| &tuples[i]).collect()
    };
    let val_refs: Vec<&TrainingTuple> = val_idx.iter().map(|&i| &tuples[i]).collect();

    let mut net = MatchNet::new(kind, side, cfg.seed)?;
    let mut opt = Adam::default();
    let mut records = Vec::new();

    // Pre-training validation: the zeroed head predicts the identity.
    let val0 = mean_eval_loss(&net, &val_refs, side)?;
    records.push(EpochRecord {
        epoch: 0,
        lr: 0.0,
        train_loss: None,
        val_loss: val0,
    });
    let mut best: (usize, Option<f64>, MatchNet) = (0, val0, net.clone());

    let mut order: Vec<usize> = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32 - 1);
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut n_seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs = train_refs(chunk);
            let ma = batch_tensor(&refs, side, true);
            let mb = batch_tensor(&refs, side, false);
            net.zero_grads();
            let theta = net.forward_train(&ma, &mb);
            let n = refs.len();
            let mut dtheta = Array2::zeros((n, kind.param_count()));
            for (i, t) in refs.iter().enumerate() {
                let th = Theta::new(kind, crate::geometry::DEFAULT_ALPHA, theta.row(i).to_vec())?;
                let (loss, grad) =
                    ssd_loss_grad(&scaled(&t.moving), &scaled(&t.fixed), &th)?;
                epoch_loss += loss;
                n_seen += 1;
                for (j, g) in grad.iter().enumerate() {
                    dtheta[(i, j)] = g / n as f64;
                }
            }
            net.backward(&dtheta);
            let mut params = net.params_mut();
            opt.step(&mut params, lr);
        }

        let train_loss = if n_seen > 0 {
            Some(epoch_loss / n_seen as f64)
        } else {
            None
        };
        let val_loss = mean_eval_loss(&net, &val_refs, side)?;
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        let improved = match (val_loss, best.1) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            // Without validation data keep the latest state.
            (None, _) => true,
        };
        if improved {
            best = (epoch, val_loss, net.clone());
        }
    }

    let report = TrainReport {
        stage: kind,
        canvas: side,
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        best_epoch: best.0,
        best_val_loss: best.1,
        epochs: records,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((best.2, report))
}

pub fn write_train_report(path: &Path, report: &TrainReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// One row per epoch: `epoch,lr,train_loss,val_loss`; missing values are
/// left empty.
pub fn write_loss_csv(path: &Path, report: &TrainReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut wtr = csv::Writer::from_path(path).map_err(|e| {
        Error::Format { path: path.to_path_buf(), message: e.to_string() }
    })?;
    wtr.write_record(["epoch", "lr", "train_loss", "val_loss"])
        .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for rec in &report.epochs {
        wtr.write_record([
            rec.epoch.to_string(),
            rec.lr.to_string(),
            fmt(rec.train_loss),
            fmt(rec.val_loss),
        ])
        .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{transform_from_theta, DEFAULT_ALPHA};
    use crate::synth::{make_training_set, TransformBounds};
    use rand::Rng;

    fn smooth_image(n: usize, phase: f64) -> Image2D {
        Image2D::from_fn(n, n, |r, c| {
            let x = c as f64 / n as f64;
            let y = r as f64 / n as f64;
            127.5
                + 80.0 * ((6.1 * x + 2.3 * y + phase).sin())
                + 40.0 * ((3.7 * y - 1.9 * x).cos())
        })
    }

    #[test]
    fn identity_parameters_give_near_zero_self_loss() {
        let img = smooth_image(16, 0.3);
        for kind in [StageKind::Affine, StageKind::Tps] {
            let theta = Theta::identity(kind, DEFAULT_ALPHA);
            let loss = ssd_loss(&img, &img, &theta).unwrap();
            assert!(loss < 1e-15, "{kind}: {loss:.3e}");
        }
    }

    #[test]
    fn influence_path_agrees_with_the_spline_solver() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let theta = Theta::new(
            StageKind::Tps,
            DEFAULT_ALPHA,
            (0..72).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let shape = (12, 10);
        let map = transform_from_theta(&theta).unwrap();
        let infl = grid_influence(shape).unwrap();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let p = px_to_norm(c as f64, r as f64, shape);
                let row = infl.row(r * shape.1 + c);
                let mut dx = 0.0;
                let mut dy = 0.0;
                for k in 0..TPS_CTRL_COUNT {
                    dx += row[k] * theta.values[k];
                    dy += row[k] * theta.values[TPS_CTRL_COUNT + k];
                }
                let q = [p[0] + DEFAULT_ALPHA * dx, p[1] + DEFAULT_ALPHA * dy];
                let want = map.eval(p);
                assert!((q[0] - want[0]).abs() < 1e-9 && (q[1] - want[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let moving = smooth_image(12, 0.0);
        let fixed = smooth_image(12, 0.7);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for kind in [StageKind::Affine, StageKind::Tps] {
            let theta = Theta::new(
                kind,
                DEFAULT_ALPHA,
                (0..kind.param_count())
                    .map(|_| rng.gen_range(-0.37..0.37))
                    .collect(),
            )
            .unwrap();
            let (_, grad) = ssd_loss_grad(&moving, &fixed, &theta).unwrap();
            let eps = 1e-6;
            let picks: Vec<usize> = match kind {
                StageKind::Affine => vec![0, 2, 5],
                StageKind::Tps => vec![0, 17, 40, 71],
            };
            for j in picks {
                let mut tp = theta.clone();
                tp.values[j] += eps;
                let mut tm = theta.clone();
                tm.values[j] -= eps;
                let fd = (ssd_loss(&moving, &fixed, &tp).unwrap()
                    - ssd_loss(&moving, &fixed, &tm).unwrap())
                    / (2.0 * eps);
                let denom = fd.abs().max(grad[j].abs()).max(1e-6);
                assert!(
                    ((grad[j] - fd) / denom).abs() < 1e-4,
                    "{kind} param {j}: analytic {} vs fd {fd}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic_deterministically() {
        let run = || {
            let mut p = Param::new(ndarray::arr1(&[4.0, -3.0]).into_dyn());
            let mut opt = Adam::default();
            for _ in 0..800 {
                let g = p.value.mapv(|w| 2.0 * w);
                p.grad.assign(&g);
                let mut params = vec![("p".to_string(), &mut p)];
                opt.step(&mut params, 0.05);
            }
            (p.value[[0]], p.value[[1]])
        };
        let (a, b) = run();
        let (a2, b2) = run();
        assert!(a.abs() < 1e-3 && b.abs() < 1e-3, "({a}, {b})");
        assert_eq!(a.to_bits(), a2.to_bits());
        assert_eq!(b.to_bits(), b2.to_bits());
    }

    #[test]
    fn split_reserves_the_last_image_for_validation() {
        let imgs: Vec<Image2D> = (0..5).map(|i| smooth_image(24, i as f64)).collect();
        let tuples = make_training_set(
            &imgs,
            StageKind::Affine,
            3,
            &TransformBounds::default(),
            DEFAULT_ALPHA,
            1,
        )
        .unwrap();
        let (train, val) = split_by_image(&tuples);
        assert_eq!(train.len(), 12);
        assert_eq!(val.len(), 3);
        assert!(val.iter().all(|&i| tuples[i].image_idx == 4));
    }

    #[test]
    fn one_epoch_of_training_runs_and_reports() {
        let imgs = [smooth_image(120, 0.1), smooth_image(120, 1.9)];
        let tuples = make_training_set(
            &imgs,
            StageKind::Affine,
            2,
            &TransformBounds::default(),
            DEFAULT_ALPHA,
            3,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let (net, report) = train_stage(&tuples, StageKind::Affine, &cfg).unwrap();
        assert_eq!(net.kind, StageKind::Affine);
        assert_eq!(report.epochs.len(), 2);
        assert!(report.epochs[0].val_loss.is_some());
        assert!(report.epochs[1].train_loss.unwrap().is_finite());
        assert_eq!(report.n_train + report.n_val, 4);

        let dir = tempfile::tempdir().unwrap();
        write_train_report(&dir.path().join("report.json"), &report).unwrap();
        write_loss_csv(&dir.path().join("loss.csv"), &report).unwrap();
        let text = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert!(text.starts_with("epoch,lr,train_loss,val_loss\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn wrong_stage_tuples_are_refused() {
        let imgs = [smooth_image(24, 0.5)];
        let tuples = make_training_set(
            &imgs,
            StageKind::Tps,
            1,
            &TransformBounds::default(),
            DEFAULT_ALPHA,
            4,
        )
        .unwrap();
        let err = train_stage(&tuples, StageKind::Affine, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::StageMismatch { .. }));
    }
}
