//! Synthetic training pairs: draw a random transform inside known bounds,
//! warp a source canvas with it, and keep the generating parameters as the
//! regression target.
//!
//! Every tuple's random stream is keyed by (run seed, source image index,
//! draw index), so a set can be regenerated or extended without disturbing
//! existing tuples.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_from_theta, warp_image, StageKind, Theta, TPS_CTRL_COUNT};
use crate::image::Image2D;

/// Sampling ranges for the generator. Angles in degrees, shifts and
/// deformations as fractions of the half-extent of the normalized domain
/// (so 0.05 means up to 0.1 in `[-1, 1]` units).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformBounds {
    pub rot_deg: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub shear: f64,
    pub shift_frac: f64,
    pub tps_disp_frac: f64,
}

impl Default for TransformBounds {
    fn default() -> Self {
        Self {
            rot_deg: 10.0,
            scale_lo: 0.8,
            scale_hi: 1.2,
            shear: 0.05,
            shift_frac: 0.05,
            tps_disp_frac: 0.05,
        }
    }
}

/// Factored affine draw. The matrix is built as rotation * shear * scale,
/// with a single upper-triangular shear coefficient so the factorization
/// stays unique and the draw can be recovered for range checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineDraw {
    pub rot_deg: f64,
    pub shear: f64,
    pub scale: (f64, f64),
    pub shift: (f64, f64),
}

impl AffineDraw {
    pub fn matrix(&self) -> ([[f64; 2]; 2], [f64; 2]) {
        let a = self.rot_deg.to_radians();
        let (sin, cos) = (a.sin(), a.cos());
        let (sx, sy) = self.scale;
        let s = self.shear;
        // R * [[sx, s*sy], [0, sy]]
        let m = [
            [cos * sx, cos * s * sy - sin * sy],
            [sin * sx, sin * s * sy + cos * sy],
        ];
        (m, [self.shift.0, self.shift.1])
    }
}

/// Recovers the factored form from a matrix built by `AffineDraw::matrix`.
/// Returns an error when the matrix is singular or reflects.
pub fn decompose_affine(m: [[f64; 2]; 2]) -> Result<(f64, f64, f64, f64)> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det <= 1e-12 {
        return Err(Error::Degenerate(format!(
            "affine decomposition needs a positive determinant, got {det:.3e}"
        )));
    }
    let sx = m[0][0].hypot(m[1][0]);
    let rot = m[1][0].atan2(m[0][0]);
    let (sin, cos) = (rot.sin(), rot.cos());
    // Rotate back: R^T * m = [[sx, shear*sy], [0, sy]].
    let r01 = cos * m[0][1] + sin * m[1][1];
    let r11 = -sin * m[0][1] + cos * m[1][1];
    let sy = r11;
    let shear = r01 / sy;
    Ok((rot.to_degrees(), shear, sx, sy))
}

pub fn sample_affine_draw<R: Rng>(bounds: &TransformBounds, rng: &mut R) -> AffineDraw {
    AffineDraw {
        rot_deg: rng.gen_range(-bounds.rot_deg..=bounds.rot_deg),
        shear: rng.gen_range(-bounds.shear..=bounds.shear),
        scale: (
            rng.gen_range(bounds.scale_lo..=bounds.scale_hi),
            rng.gen_range(bounds.scale_lo..=bounds.scale_hi),
        ),
        shift: (
            rng.gen_range(-2.0 * bounds.shift_frac..=2.0 * bounds.shift_frac),
            rng.gen_range(-2.0 * bounds.shift_frac..=2.0 * bounds.shift_frac),
        ),
    }
}

/// Parameters encoding the drawn affine map under the model's scaling: the
/// map theta produces is exactly the drawn matrix and shift.
pub fn theta_from_affine_draw(draw: &AffineDraw, alpha: f64) -> Result<Theta> {
    let (m, t) = draw.matrix();
    let values = vec![
        (m[0][0] - 1.0) / alpha,
        m[0][1] / alpha,
        t[0] / alpha,
        m[1][0] / alpha,
        (m[1][1] - 1.0) / alpha,
        t[1] / alpha,
    ];
    Theta::new(StageKind::Affine, alpha, values)
}

pub fn sample_affine_theta<R: Rng>(
    bounds: &TransformBounds,
    alpha: f64,
    rng: &mut R,
) -> Result<Theta> {
    theta_from_affine_draw(&sample_affine_draw(bounds, rng), alpha)
}

/// Control-point displacements drawn uniformly, then divided by the model
/// scaling so the produced map moves each point by at most
/// `2 * tps_disp_frac` along each axis.
pub fn sample_tps_theta<R: Rng>(
    bounds: &TransformBounds,
    alpha: f64,
    rng: &mut R,
) -> Result<Theta> {
    let lim = 2.0 * bounds.tps_disp_frac;
    let values = (0..2 * TPS_CTRL_COUNT)
        .map(|_| rng.gen_range(-lim..=lim) / alpha)
        .collect();
    Theta::new(StageKind::Tps, alpha, values)
}

/// Independent stream for one tuple, keyed so regeneration is stable per
/// tuple rather than per run.
pub fn tuple_rng(seed: u64, image_idx: usize, draw_idx: usize) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(image_idx as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(draw_idx as u64).to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

#[derive(Clone, Debug)]
pub struct TrainingTuple {
    pub moving: Image2D,
    pub fixed: Image2D,
    pub theta_gt: Theta,
    pub image_idx: usize,
    pub draw_idx: usize,
}

/// Draws `n_per_image` tuples from each source canvas. Sources are snapped
/// to 16-bit storage precision first, so the warped-target identity survives
/// a disk round trip; the target is the warp of the tuple's own moving
/// image, bit for bit.
pub fn make_training_set(
    images: &[Image2D],
    kind: StageKind,
    n_per_image: usize,
    bounds: &TransformBounds,
    alpha: f64,
    seed: u64,
) -> Result<Vec<TrainingTuple>> {
    let mut out = Vec::with_capacity(images.len() * n_per_image);
    for (image_idx, src) in images.iter().enumerate() {
        let moving = src.quantize16();
        for draw_idx in 0..n_per_image {
            let mut rng = tuple_rng(seed, image_idx, draw_idx);
            let theta_gt = match kind {
                StageKind::Affine => sample_affine_theta(bounds, alpha, &mut rng)?,
                StageKind::Tps => sample_tps_theta(bounds, alpha, &mut rng)?,
            };
            let map = transform_from_theta(&theta_gt)?;
            let fixed = warp_image(&moving, &map, moving.shape());
            out.push(TrainingTuple {
                moving: moving.clone(),
                fixed,
                theta_gt,
                image_idx,
                draw_idx,
            });
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TupleRecord {
    moving: String,
    fixed: String,
    image_idx: usize,
    draw_idx: usize,
    theta: Theta,
}

#[derive(Serialize, Deserialize)]
struct SetIndex {
    kind: StageKind,
    alpha: f64,
    seed: u64,
    tuples: Vec<TupleRecord>,
}

/// Writes moving/fixed pairs as 16-bit PNGs plus an `index.json` carrying
/// the parameters.
pub fn write_training_set(
    dir: &Path,
    set: &[TrainingTuple],
    kind: StageKind,
    alpha: f64,
    seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(set.len());
    for t in set {
        let stem = format!("{:04}_{:04}", t.image_idx, t.draw_idx);
        let moving_name = format!("{stem}_moving.png");
        let fixed_name = format!("{stem}_fixed.png");
        t.moving.save_png16(&dir.join(&moving_name))?;
        t.fixed.save_png16(&dir.join(&fixed_name))?;
        records.push(TupleRecord {
            moving: moving_name,
            fixed: fixed_name,
            image_idx: t.image_idx,
            draw_idx: t.draw_idx,
            theta: t.theta_gt.clone(),
        });
    }
    let index = SetIndex {
        kind,
        alpha,
        seed,
        tuples: records,
    };
    let path = dir.join("index.json");
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::Format { path: path.clone(), message: e.to_string() })?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads a set written by `write_training_set`. The returned kind is the
/// stage the set was generated for.
pub fn load_training_set(dir: &Path) -> Result<(Vec<TrainingTuple>, StageKind)> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: SetIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Format { path: path.clone(), message: e.to_string() })?;
    let mut out = Vec::with_capacity(index.tuples.len());
    for rec in index.tuples {
        let moving = Image2D::load_gray(&dir.join(&rec.moving))?;
        let fixed = Image2D::load_gray(&dir.join(&rec.fixed))?;
        out.push(TrainingTuple {
            moving,
            fixed,
            theta_gt: rec.theta,
            image_idx: rec.image_idx,
            draw_idx: rec.draw_idx,
        });
    }
    Ok((out, index.kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DEFAULT_ALPHA;
    use rand::SeedableRng;

    #[test]
    fn affine_draws_decompose_back_inside_the_bounds() {
        let bounds = TransformBounds::default();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..500 {
            let draw = sample_affine_draw(&bounds, &mut rng);
            let (m, t) = draw.matrix();
            let (rot, shear, sx, sy) = decompose_affine(m).unwrap();
            assert!(rot.abs() <= bounds.rot_deg + 1e-9, "rot {rot}");
            assert!(shear.abs() <= bounds.shear + 1e-9, "shear {shear}");
            for s in [sx, sy] {
                assert!(s >= bounds.scale_lo - 1e-9 && s <= bounds.scale_hi + 1e-9, "scale {s}");
            }
            for v in t {
                assert!(v.abs() <= 2.0 * bounds.shift_frac + 1e-9, "shift {v}");
            }
            // And the recovery is near exact, not just in range.
            assert!((rot - draw.rot_deg).abs() < 1e-9);
            assert!((shear - draw.shear).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_theta_reproduces_the_drawn_map() {
        let bounds = TransformBounds::default();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for _ in 0..50 {
            let draw = sample_affine_draw(&bounds, &mut rng);
            let theta = theta_from_affine_draw(&draw, DEFAULT_ALPHA).unwrap();
            let map = transform_from_theta(&theta).unwrap();
            let (m, t) = draw.matrix();
            for p in [[-0.7, 0.3], [0.0, 0.0], [0.9, -0.9]] {
                let got = map.eval(p);
                let want = [
                    m[0][0] * p[0] + m[0][1] * p[1] + t[0],
                    m[1][0] * p[0] + m[1][1] * p[1] + t[1],
                ];
                assert!((got[0] - want[0]).abs() < 1e-12);
                assert!((got[1] - want[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tps_control_displacements_respect_the_bound() {
        let bounds = TransformBounds::default();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..200 {
            let theta = sample_tps_theta(&bounds, DEFAULT_ALPHA, &mut rng).unwrap();
            for v in &theta.values {
                assert!((v * DEFAULT_ALPHA).abs() <= 2.0 * bounds.tps_disp_frac + 1e-12);
            }
        }
    }

    #[test]
    fn tuple_rng_is_keyed_by_image_and_draw() {
        let bounds = TransformBounds::default();
        let a: Vec<f64> = sample_affine_theta(&bounds, 0.1, &mut tuple_rng(7, 3, 5))
            .unwrap()
            .values;
        let b: Vec<f64> = sample_affine_theta(&bounds, 0.1, &mut tuple_rng(7, 3, 5))
            .unwrap()
            .values;
        let c: Vec<f64> = sample_affine_theta(&bounds, 0.1, &mut tuple_rng(7, 3, 6))
            .unwrap()
            .values;
        let d: Vec<f64> = sample_affine_theta(&bounds, 0.1, &mut tuple_rng(8, 3, 5))
            .unwrap()
            .values;
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    fn gradient_canvas(seed: u64, n: usize) -> Image2D {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Image2D::from_fn(n, n, |r, c| {
            (r as f64 + 2.0 * c as f64) % 251.0 + rng.gen_range(0.0..4.0)
        })
    }

    #[test]
    fn tuple_target_is_the_warp_of_its_own_moving_image() {
        let images = [gradient_canvas(1, 48), gradient_canvas(2, 48)];
        let set = make_training_set(
            &images,
            StageKind::Tps,
            3,
            &TransformBounds::default(),
            DEFAULT_ALPHA,
            99,
        )
        .unwrap();
        assert_eq!(set.len(), 6);
        for t in &set {
            let map = transform_from_theta(&t.theta_gt).unwrap();
            let again = warp_image(&t.moving, &map, t.moving.shape());
            assert_eq!(again.data(), t.fixed.data());
        }
    }

    #[test]
    fn training_set_survives_a_disk_round_trip() {
        let images = [gradient_canvas(3, 40)];
        let set = make_training_set(
            &images,
            StageKind::Affine,
            4,
            &TransformBounds::default(),
            DEFAULT_ALPHA,
            5,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_training_set(dir.path(), &set, StageKind::Affine, DEFAULT_ALPHA, 5).unwrap();
        let (loaded, kind) = load_training_set(dir.path()).unwrap();
        assert_eq!(kind, StageKind::Affine);
        assert_eq!(loaded.len(), set.len());
        for (a, b) in set.iter().zip(&loaded) {
            assert_eq!(a.theta_gt.values, b.theta_gt.values);
            // Sources were pre-quantized, so PNG storage is lossless here.
            assert_eq!(a.moving.data(), b.moving.data());
            // The stored target re-quantizes to exactly what load returns.
            assert_eq!(a.fixed.quantize16().data(), b.fixed.data());
            // And re-warping the loaded moving image with the stored
            // parameters reproduces the stored target after quantization.
            let map = transform_from_theta(&b.theta_gt).unwrap();
            let re = warp_image(&b.moving, &map, b.moving.shape());
            assert_eq!(re.quantize16().data(), b.fixed.data());
        }
    }
}
