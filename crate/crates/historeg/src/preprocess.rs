//! Turns raw case images into the square canvases the registration backends
//! consume, and records the coordinate bookkeeping needed to carry transforms
//! back to native resolution.
//!
//! Per case: orient the histology side (rotation, then horizontal flip), crop
//! each side to its own mask bounding box, min-max normalize intensities to
//! 0..=255, multiply by the mask, and resample to the canvas. Masks travel
//! the same path with nearest-neighbor orientation and bilinear canvas
//! resampling; landmarks are carried through the orientation exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::sample_bilinear;
use crate::image::{Image2D, Mask2D};
use ndarray::Array2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OrientationConfig {
    /// Rotation in degrees, counterclockwise in the displayed image,
    /// `[-180, 180]`. Multiples of 90 are exact index permutations (the
    /// raster transposes for odd multiples); other angles resample about the
    /// image center at unchanged shape.
    pub rotation_deg: f64,
    /// Horizontal flip, applied after the rotation.
    pub hflip: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPair {
    /// Point on the MRI slice, mm.
    pub mri_mm: [f64; 2],
    /// Corresponding point on the histology section, mm.
    pub hist_mm: [f64; 2],
}

/// One histology section and its MRI slice, with masks, optional labels on
/// either side, and landmark correspondences.
#[derive(Clone, Debug)]
pub struct CasePair {
    pub hist_image: Image2D,
    pub hist_mask: Mask2D,
    pub mri_slice: Image2D,
    pub mri_mask: Mask2D,
    pub labels: BTreeMap<String, Mask2D>,
    pub mri_labels: BTreeMap<String, Mask2D>,
    pub landmarks: Vec<LandmarkPair>,
    pub orientation: OrientationConfig,
}

fn right_angle_turns(rotation_deg: f64) -> Option<i64> {
    let q = rotation_deg / 90.0;
    let k = q.round();
    if (q - k).abs() < 1e-9 {
        Some((k as i64).rem_euclid(4))
    } else {
        None
    }
}

fn rot90_ccw<T: Copy>(data: &Array2<T>) -> Array2<T> {
    let (h, w) = data.dim();
    Array2::from_shape_fn((w, h), |(r, c)| data[(c, w - 1 - r)])
}

fn hflip<T: Copy>(data: &Array2<T>) -> Array2<T> {
    let (h, w) = data.dim();
    Array2::from_shape_fn((h, w), |(r, c)| data[(r, w - 1 - c)])
}

fn rotate_resample(data: &Array2<f64>, deg: f64, nearest: bool) -> Array2<f64> {
    let (h, w) = data.dim();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let a = deg.to_radians();
    let (sin, cos) = (a.sin(), a.cos());
    Array2::from_shape_fn((h, w), |(r, c)| {
        let x = c as f64 - cx;
        let y = r as f64 - cy;
        let sc = cx + cos * x - sin * y;
        let sr = cy + sin * x + cos * y;
        if nearest {
            let rr = sr.round() as i64;
            let cc = sc.round() as i64;
            if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                data[(rr as usize, cc as usize)]
            } else {
                0.0
            }
        } else {
            sample_bilinear(data, sc, sr)
        }
    })
}

fn orient_array(data: &Array2<f64>, cfg: &OrientationConfig, nearest: bool) -> Array2<f64> {
    let rotated = match right_angle_turns(cfg.rotation_deg) {
        Some(k) => {
            let mut out = data.clone();
            for _ in 0..k {
                out = rot90_ccw(&out);
            }
            out
        }
        None => rotate_resample(data, cfg.rotation_deg, nearest),
    };
    if cfg.hflip {
        hflip(&rotated)
    } else {
        rotated
    }
}

/// Raster shape after orientation: odd quarter turns transpose it.
pub fn oriented_shape(shape: (usize, usize), cfg: &OrientationConfig) -> (usize, usize) {
    match right_angle_turns(cfg.rotation_deg) {
        Some(k) if k % 2 == 1 => (shape.1, shape.0),
        _ => shape,
    }
}

/// Spacing after orientation, pitches swapping with the axes.
pub fn oriented_spacing(spacing: (f64, f64), cfg: &OrientationConfig) -> (f64, f64) {
    match right_angle_turns(cfg.rotation_deg) {
        Some(k) if k % 2 == 1 => (spacing.1, spacing.0),
        _ => spacing,
    }
}

/// Rotation (bilinear, zero padding, about the image center) followed by an
/// optional horizontal flip. Quarter turns take the exact permutation path.
pub fn apply_orientation(img: &Image2D, cfg: &OrientationConfig) -> Image2D {
    let data = orient_array(img.data(), cfg, false);
    Image2D::new(data, oriented_spacing(img.spacing_mm(), cfg))
}

/// Mask variant: nearest neighbor, so binary stays binary.
pub fn apply_orientation_mask(mask: &Mask2D, cfg: &OrientationConfig) -> Mask2D {
    let as_f = mask.data().mapv(|v| if v { 1.0 } else { 0.0 });
    let data = orient_array(&as_f, cfg, true);
    Mask2D::new(data.mapv(|v| v > 0.5), oriented_spacing(mask.spacing_mm(), cfg))
}

/// Maps a pixel position `(col, row)` through the same orientation the image
/// content takes, for carrying landmarks along.
pub fn orient_point_px(
    p: (f64, f64),
    shape: (usize, usize),
    cfg: &OrientationConfig,
) -> (f64, f64) {
    let (h, w) = shape;
    let (mut c, mut r) = p;
    let mut cur_w = w as f64;
    match right_angle_turns(cfg.rotation_deg) {
        Some(k) => {
            let mut cur_h = h as f64;
            for _ in 0..k {
                // Content at input (r, c) lands at (c', r') = (r, w - 1 - c).
                let (nc, nr) = (r, cur_w - 1.0 - c);
                c = nc;
                r = nr;
                std::mem::swap(&mut cur_w, &mut cur_h);
            }
        }
        None => {
            let cx = (w as f64 - 1.0) / 2.0;
            let cy = (h as f64 - 1.0) / 2.0;
            let a = cfg.rotation_deg.to_radians();
            let (x, y) = (c - cx, r - cy);
            // Inverse of the sampling map in rotate_resample.
            c = cx + a.cos() * x + a.sin() * y;
            r = cy - a.sin() * x + a.cos() * y;
        }
    }
    if cfg.hflip {
        c = cur_w - 1.0 - c;
    }
    (c, r)
}

/// Maps a landmark given in mm through the orientation.
pub fn orient_point_mm(
    p_mm: [f64; 2],
    shape: (usize, usize),
    spacing: (f64, f64),
    cfg: &OrientationConfig,
) -> [f64; 2] {
    let px = (p_mm[0] / spacing.0 - 0.5, p_mm[1] / spacing.1 - 0.5);
    let (c, r) = orient_point_px(px, shape, cfg);
    let sp = oriented_spacing(spacing, cfg);
    [(c + 0.5) * sp.0, (r + 0.5) * sp.1]
}

/// Inclusive-origin crop window: rows `r0 .. r0 + h`, cols `c0 .. c0 + w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub r0: usize,
    pub c0: usize,
    pub h: usize,
    pub w: usize,
}

/// Bounding box of the mask foreground grown by `margin` pixels and clamped
/// to the raster. Errors on an all-background mask.
pub fn crop_to_mask_bbox(
    img: &Image2D,
    mask: &Mask2D,
    margin: usize,
) -> Result<(Image2D, CropBox)> {
    if img.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "crop needs matching image and mask, got {:?} and {:?}",
            img.shape(),
            mask.shape()
        )));
    }
    let (h, w) = mask.shape();
    let mut rmin = usize::MAX;
    let mut rmax = 0usize;
    let mut cmin = usize::MAX;
    let mut cmax = 0usize;
    for ((r, c), &v) in mask.data().indexed_iter() {
        if v {
            rmin = rmin.min(r);
            rmax = rmax.max(r);
            cmin = cmin.min(c);
            cmax = cmax.max(c);
        }
    }
    if rmin == usize::MAX {
        return Err(Error::EmptyMask("crop of an all-background mask".into()));
    }
    let r0 = rmin.saturating_sub(margin);
    let c0 = cmin.saturating_sub(margin);
    let r1 = (rmax + margin + 1).min(h);
    let c1 = (cmax + margin + 1).min(w);
    let bbox = CropBox {
        r0,
        c0,
        h: r1 - r0,
        w: c1 - c0,
    };
    let view = img
        .data()
        .slice(ndarray::s![r0..r1, c0..c1])
        .to_owned();
    Ok((Image2D::new(view, img.spacing_mm()), bbox))
}

pub fn crop_mask(mask: &Mask2D, bbox: &CropBox) -> Mask2D {
    let view = mask
        .data()
        .slice(ndarray::s![bbox.r0..bbox.r0 + bbox.h, bbox.c0..bbox.c0 + bbox.w])
        .to_owned();
    Mask2D::new(view, mask.spacing_mm())
}

/// Min-max rescale to 0..=255 in real arithmetic; a constant image maps to
/// all zeros.
pub fn normalize_intensity(img: &Image2D) -> Image2D {
    let (lo, hi) = img.min_max();
    let data = if hi > lo {
        img.data().mapv(|v| (v - lo) / (hi - lo) * 255.0)
    } else {
        Array2::zeros(img.shape())
    };
    Image2D::new(data, img.spacing_mm())
}

/// Bilinear resample to `out_shape` through pixel-center alignment of the two
/// rasters; a 2x reduction equals 2x2 box averaging exactly.
pub fn resample_bilinear(img: &Image2D, out_shape: (usize, usize)) -> Image2D {
    let (ih, iw) = img.shape();
    let data = img.data();
    let out = Array2::from_shape_fn(out_shape, |(r, c)| {
        let sc = (c as f64 + 0.5) * iw as f64 / out_shape.1 as f64 - 0.5;
        let sr = (r as f64 + 0.5) * ih as f64 / out_shape.0 as f64 - 0.5;
        sample_bilinear(data, sc, sr)
    });
    Image2D::new(out, img.spacing_mm())
}

/// Zeroes everything outside the mask, then resamples to a square canvas.
pub fn mask_and_resample(img: &Image2D, mask: &Mask2D, canvas: usize) -> Result<Image2D> {
    if img.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mask_and_resample needs matching shapes, got {:?} and {:?}",
            img.shape(),
            mask.shape()
        )));
    }
    let masked = Image2D::new(
        ndarray::Zip::from(img.data())
            .and(mask.data())
            .map_collect(|&v, &m| if m { v } else { 0.0 }),
        img.spacing_mm(),
    );
    Ok(resample_bilinear(&masked, (canvas, canvas)))
}

/// Native-raster bookkeeping for one side of a case.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameGeom {
    /// Oriented native raster shape `(h, w)`.
    pub shape: (usize, usize),
    /// Oriented spacing `(sx, sy)` in mm per pixel.
    pub spacing_mm: (f64, f64),
    /// Crop window inside the oriented native raster; the crop rectangle is
    /// what the normalized `[-1, 1]^2` canvas domain spans.
    pub crop: CropBox,
}

impl FrameGeom {
    /// Normalized canvas coordinates of a native-frame mm position.
    pub fn norm_from_mm(&self, p_mm: [f64; 2]) -> [f64; 2] {
        let c = p_mm[0] / self.spacing_mm.0 - 0.5;
        let r = p_mm[1] / self.spacing_mm.1 - 0.5;
        [
            2.0 * (c - self.crop.c0 as f64 + 0.5) / self.crop.w as f64 - 1.0,
            2.0 * (r - self.crop.r0 as f64 + 0.5) / self.crop.h as f64 - 1.0,
        ]
    }

    /// Native-frame mm position of normalized canvas coordinates.
    pub fn mm_from_norm(&self, p: [f64; 2]) -> [f64; 2] {
        let c = (p[0] + 1.0) * 0.5 * self.crop.w as f64 - 0.5 + self.crop.c0 as f64;
        let r = (p[1] + 1.0) * 0.5 * self.crop.h as f64 - 0.5 + self.crop.r0 as f64;
        [(c + 0.5) * self.spacing_mm.0, (r + 0.5) * self.spacing_mm.1]
    }

    /// Fractional native pixel `(col, row)` of normalized coordinates.
    pub fn px_from_norm(&self, p: [f64; 2]) -> (f64, f64) {
        (
            (p[0] + 1.0) * 0.5 * self.crop.w as f64 - 0.5 + self.crop.c0 as f64,
            (p[1] + 1.0) * 0.5 * self.crop.h as f64 - 0.5 + self.crop.r0 as f64,
        )
    }

    /// Normalized coordinates of a fractional native pixel `(col, row)`.
    pub fn norm_from_px(&self, px: (f64, f64)) -> [f64; 2] {
        [
            2.0 * (px.0 - self.crop.c0 as f64 + 0.5) / self.crop.w as f64 - 1.0,
            2.0 * (px.1 - self.crop.r0 as f64 + 0.5) / self.crop.h as f64 - 1.0,
        ]
    }
}

/// Bookkeeping for a preprocessed case: everything needed to apply a
/// canvas-domain transform at native resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseGeometry {
    pub canvas: usize,
    pub moving: FrameGeom,
    pub fixed: FrameGeom,
    pub orientation: OrientationConfig,
}

/// Canvases ready for registration. Mask canvases are 0/255 scaled and
/// bilinear-resampled, so their edges are soft; `fixed_mask` /
/// `moving_mask` binarize at half scale.
#[derive(Clone, Debug)]
pub struct PreprocessedCase {
    pub moving: Image2D,
    pub fixed: Image2D,
    pub moving_mask_soft: Image2D,
    pub fixed_mask_soft: Image2D,
    pub landmarks: Vec<LandmarkPair>,
    pub geom: CaseGeometry,
}

impl PreprocessedCase {
    pub fn moving_mask(&self) -> Mask2D {
        Mask2D::from_image(&self.moving_mask_soft, 127.5)
    }

    pub fn fixed_mask(&self) -> Mask2D {
        Mask2D::from_image(&self.fixed_mask_soft, 127.5)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub canvas: usize,
    pub crop_margin_px: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            canvas: 240,
            crop_margin_px: 4,
        }
    }
}

/// Full preprocessing for one case. Histology is the moving side, the MRI
/// slice the fixed side; landmarks come out with the histology coordinate
/// oriented to match the oriented image.
pub fn preprocess_case(case: &CasePair, cfg: &PreprocessConfig) -> Result<PreprocessedCase> {
    let hist = apply_orientation(&case.hist_image, &case.orientation);
    let hist_mask = apply_orientation_mask(&case.hist_mask, &case.orientation);
    let in_shape = case.hist_image.shape();
    let landmarks: Vec<LandmarkPair> = case
        .landmarks
        .iter()
        .map(|lm| LandmarkPair {
            mri_mm: lm.mri_mm,
            hist_mm: orient_point_mm(
                lm.hist_mm,
                in_shape,
                case.hist_image.spacing_mm(),
                &case.orientation,
            ),
        })
        .collect();

    let (hist_crop, hist_box) = crop_to_mask_bbox(&hist, &hist_mask, cfg.crop_margin_px)?;
    let hist_mask_crop = crop_mask(&hist_mask, &hist_box);
    let (mri_crop, mri_box) = crop_to_mask_bbox(&case.mri_slice, &case.mri_mask, cfg.crop_margin_px)?;
    let mri_mask_crop = crop_mask(&case.mri_mask, &mri_box);

    let hist_norm = normalize_intensity(&hist_crop);
    let mri_norm = normalize_intensity(&mri_crop);

    let moving = mask_and_resample(&hist_norm, &hist_mask_crop, cfg.canvas)?;
    let fixed = mask_and_resample(&mri_norm, &mri_mask_crop, cfg.canvas)?;
    let moving_mask_soft = resample_bilinear(&hist_mask_crop.to_image(), (cfg.canvas, cfg.canvas));
    let fixed_mask_soft = resample_bilinear(&mri_mask_crop.to_image(), (cfg.canvas, cfg.canvas));

    let geom = CaseGeometry {
        canvas: cfg.canvas,
        moving: FrameGeom {
            shape: hist.shape(),
            spacing_mm: hist.spacing_mm(),
            crop: hist_box,
        },
        fixed: FrameGeom {
            shape: case.mri_slice.shape(),
            spacing_mm: case.mri_slice.spacing_mm(),
            crop: mri_box,
        },
        orientation: case.orientation,
    };
    Ok(PreprocessedCase {
        moving,
        fixed,
        moving_mask_soft,
        fixed_mask_soft,
        landmarks,
        geom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image2D {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Image2D::from_fn(h, w, |_, _| rng.gen_range(0.0..255.0))
    }

    #[test]
    fn quarter_turn_matches_the_permutation_oracle() {
        let img = random_image(1, 10, 20);
        let cfg = OrientationConfig {
            rotation_deg: 90.0,
            hflip: false,
        };
        let out = apply_orientation(&img, &cfg);
        assert_eq!(out.shape(), (20, 10));
        for r in 0..20 {
            for c in 0..10 {
                assert_eq!(out.at(r, c), img.at(c, 20 - 1 - r), "({r},{c})");
            }
        }
    }

    #[test]
    fn double_hflip_restores_the_image_exactly() {
        let img = random_image(2, 7, 13);
        let cfg = OrientationConfig {
            rotation_deg: 0.0,
            hflip: true,
        };
        let once = apply_orientation(&img, &cfg);
        let twice = apply_orientation(&once, &cfg);
        assert_eq!(twice.data(), img.data());
    }

    #[test]
    fn negative_quarter_turn_is_three_positive_turns() {
        let img = random_image(3, 6, 9);
        let neg = apply_orientation(
            &img,
            &OrientationConfig {
                rotation_deg: -90.0,
                hflip: false,
            },
        );
        let mut three = img.clone();
        for _ in 0..3 {
            three = apply_orientation(
                &three,
                &OrientationConfig {
                    rotation_deg: 90.0,
                    hflip: false,
                },
            );
        }
        assert_eq!(neg.data(), three.data());
    }

    #[test]
    fn landmark_follows_a_bright_pixel_through_rotation() {
        let mut img = Image2D::zeros(40, 40);
        img.data_mut()[(11, 29)] = 255.0;
        for cfg in [
            OrientationConfig { rotation_deg: 90.0, hflip: true },
            OrientationConfig { rotation_deg: 37.0, hflip: false },
            OrientationConfig { rotation_deg: -120.5, hflip: true },
        ] {
            let out = apply_orientation(&img, &cfg);
            let (c, r) = orient_point_px((29.0, 11.0), img.shape(), &cfg);
            let v = sample_bilinear(out.data(), c, r);
            assert!(v > 60.0, "{cfg:?}: sampled {v} at ({c:.2},{r:.2})");
        }
    }

    #[test]
    fn landmark_mm_round_trips_through_quarter_turn_spacing_swap() {
        let shape = (10, 20);
        let spacing = (0.5, 2.0);
        let cfg = OrientationConfig { rotation_deg: 90.0, hflip: false };
        // Pixel (col 4, row 3) has mm (2.25, 7.0); after one turn it lands at
        // (col 3, row 15) with swapped spacing (2.0, 0.5).
        let p = orient_point_mm([2.25, 7.0], shape, spacing, &cfg);
        assert!((p[0] - 3.5 * 2.0).abs() < 1e-12);
        assert!((p[1] - 15.5 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn crop_finds_the_padded_bounding_box() {
        let img = random_image(4, 30, 30);
        let mask = Mask2D::from_fn(30, 30, |r, c| (8..12).contains(&r) && (20..25).contains(&c));
        let (cropped, bbox) = crop_to_mask_bbox(&img, &mask, 2).unwrap();
        assert_eq!(bbox, CropBox { r0: 6, c0: 18, h: 8, w: 9 });
        assert_eq!(cropped.shape(), (8, 9));
        assert_eq!(cropped.at(0, 0), img.at(6, 18));
        assert_eq!(cropped.at(7, 8), img.at(13, 26));
    }

    #[test]
    fn crop_clamps_margin_at_the_raster_edge() {
        let img = random_image(5, 10, 10);
        let mask = Mask2D::from_fn(10, 10, |r, c| r < 2 && c < 2);
        let (_, bbox) = crop_to_mask_bbox(&img, &mask, 5).unwrap();
        assert_eq!((bbox.r0, bbox.c0), (0, 0));
        assert_eq!((bbox.h, bbox.w), (7, 7));
    }

    #[test]
    fn crop_of_empty_mask_is_an_error() {
        let img = random_image(6, 8, 8);
        let mask = Mask2D::from_fn(8, 8, |_, _| false);
        assert!(matches!(
            crop_to_mask_bbox(&img, &mask, 0),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn normalize_stretches_the_range_linearly_to_full_scale() {
        let img = Image2D::from_fn(1, 128, |_, c| 10.0 + 0.5 * c as f64);
        let out = normalize_intensity(&img);
        for c in 0..128 {
            let want = c as f64 / 127.0 * 255.0;
            assert!((out.at(0, c) - want).abs() < 1e-10, "{c}");
        }
        assert_eq!(out.at(0, 0), 0.0);
        assert_eq!(out.at(0, 127), 255.0);
    }

    #[test]
    fn normalize_maps_constant_images_to_zero() {
        let img = Image2D::from_fn(4, 4, |_, _| 42.0);
        let out = normalize_intensity(&img);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_x_downsampling_equals_box_averaging() {
        let img = random_image(7, 480, 480);
        let out = resample_bilinear(&img, (240, 240));
        for r in (0..240).step_by(17) {
            for c in (0..240).step_by(13) {
                let want = (img.at(2 * r, 2 * c)
                    + img.at(2 * r, 2 * c + 1)
                    + img.at(2 * r + 1, 2 * c)
                    + img.at(2 * r + 1, 2 * c + 1))
                    / 4.0;
                assert!((out.at(r, c) - want).abs() < 1e-6, "({r},{c})");
            }
        }
    }

    #[test]
    fn mask_and_resample_zeroes_background() {
        let img = Image2D::from_fn(40, 40, |_, _| 200.0);
        let mask = Mask2D::from_fn(40, 40, |r, c| r >= 10 && r < 30 && c >= 10 && c < 30);
        let out = mask_and_resample(&img, &mask, 40).unwrap();
        assert_eq!(out.at(0, 0), 0.0);
        assert_eq!(out.at(20, 20), 200.0);
    }

    #[test]
    fn frame_geometry_mm_norm_round_trip() {
        let g = FrameGeom {
            shape: (200, 180),
            spacing_mm: (0.25, 0.5),
            crop: CropBox { r0: 20, c0: 30, h: 120, w: 100 },
        };
        for p in [[12.0, 25.0], [30.0, 40.0], [20.5, 33.25]] {
            let n = g.norm_from_mm(p);
            let back = g.mm_from_norm(n);
            assert!((back[0] - p[0]).abs() < 1e-10 && (back[1] - p[1]).abs() < 1e-10);
        }
        // The crop center sits at the domain origin.
        let center_mm = g.mm_from_norm([0.0, 0.0]);
        let n = g.norm_from_mm(center_mm);
        assert!(n[0].abs() < 1e-12 && n[1].abs() < 1e-12);
    }
}
