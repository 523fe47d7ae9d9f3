//! Synthetic dataset generator: small phantom cases with a gland-like shape,
//! two label structures, landmark correspondences, and deliberately different
//! intensity profiles per modality. Everything derives from one seed, so the
//! emitted files are byte-stable. Used by the smoke pipeline and the CLI
//! `fixtures` command; not a substitute for clinical data.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::image::{Image2D, Mask2D};
use crate::manifest::{DatasetManifest, LandmarkEntry, SliceEntry};
use crate::preprocess::{orient_point_mm, orient_point_px, OrientationConfig};

const HIST_SPACING: f64 = 0.25;
const MRI_SPACING: f64 = 0.5;
/// Canonical (oriented) histology raster; stored files transpose this when
/// the orientation hint includes an odd quarter turn.
const HIST_SHAPE: (usize, usize) = (144, 160);
const MRI_SHAPE: (usize, usize) = (96, 96);

/// All parameters of one phantom slice: anatomy in the canonical histology
/// frame, the histology-from-MRI correspondence map, and the stored-file
/// orientation.
#[derive(Clone, Debug)]
pub struct SliceSpec {
    center: [f64; 2],
    radii: [f64; 2],
    boundary_phase: [f64; 2],
    texture_phase: [f64; 2],
    urethra_center: [f64; 2],
    tumor_center: [f64; 2],
    map_rot_rad: f64,
    map_scale: f64,
    map_shift: [f64; 2],
    mri_center: [f64; 2],
    wobble_amp_mm: f64,
    wobble_freq: [f64; 2],
    pub orientation: OrientationConfig,
}

fn slice_rng(seed: u64, patient: usize, slice: usize) -> ChaCha12Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((patient as u64) << 24)
        .wrapping_add(slice as u64 + 1);
    ChaCha12Rng::seed_from_u64(mixed)
}

/// Derives the full parameter set of one slice from the run seed. Every third
/// slice gets a quarter-turn or half-turn-plus-flip orientation hint so the
/// orientation path is exercised.
pub fn slice_spec(seed: u64, patient: usize, slice: usize) -> SliceSpec {
    let mut rng = slice_rng(seed, patient, slice);
    let extent = [
        HIST_SHAPE.1 as f64 * HIST_SPACING,
        HIST_SHAPE.0 as f64 * HIST_SPACING,
    ];
    let center = [
        extent[0] / 2.0 + rng.gen_range(-2.0..2.0),
        extent[1] / 2.0 + rng.gen_range(-2.0..2.0),
    ];
    let radii = [rng.gen_range(10.0..12.5), rng.gen_range(8.0..10.5)];
    let ur_angle = rng.gen_range(0.0..TAU);
    let tu_angle = rng.gen_range(0.0..TAU);
    let orientation = match slice % 3 {
        1 => OrientationConfig { rotation_deg: 90.0, hflip: false },
        2 => OrientationConfig { rotation_deg: 180.0, hflip: true },
        _ => OrientationConfig::default(),
    };
    SliceSpec {
        center,
        radii,
        boundary_phase: [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)],
        texture_phase: [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)],
        urethra_center: [
            center[0] + 0.2 * radii[0] * ur_angle.cos(),
            center[1] + 0.2 * radii[1] * ur_angle.sin(),
        ],
        tumor_center: [
            center[0] + 0.55 * radii[0] * tu_angle.cos(),
            center[1] + 0.55 * radii[1] * tu_angle.sin(),
        ],
        map_rot_rad: rng.gen_range(-8.0f64..8.0).to_radians(),
        map_scale: rng.gen_range(0.95..1.05),
        map_shift: [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
        mri_center: [
            MRI_SHAPE.1 as f64 * MRI_SPACING / 2.0,
            MRI_SHAPE.0 as f64 * MRI_SPACING / 2.0,
        ],
        wobble_amp_mm: rng.gen_range(0.1..0.4),
        wobble_freq: [rng.gen_range(0.02..0.05), rng.gen_range(0.02..0.05)],
        orientation,
    }
}

impl SliceSpec {
    fn polar(&self, p_mm: [f64; 2]) -> (f64, f64) {
        let ex = (p_mm[0] - self.center[0]) / self.radii[0];
        let ey = (p_mm[1] - self.center[1]) / self.radii[1];
        (ex.hypot(ey), ey.atan2(ex))
    }

    fn boundary(&self, phi: f64) -> f64 {
        1.0 + 0.07 * (3.0 * phi + self.boundary_phase[0]).sin()
            + 0.04 * (5.0 * phi + self.boundary_phase[1]).cos()
    }

    pub fn mask_at(&self, p_mm: [f64; 2]) -> bool {
        let (rho, phi) = self.polar(p_mm);
        rho <= self.boundary(phi)
    }

    pub fn urethra_at(&self, p_mm: [f64; 2]) -> bool {
        let dx = p_mm[0] - self.urethra_center[0];
        let dy = p_mm[1] - self.urethra_center[1];
        dx.hypot(dy) <= 1.3
    }

    fn tumor_at(&self, p_mm: [f64; 2]) -> bool {
        let dx = p_mm[0] - self.tumor_center[0];
        let dy = p_mm[1] - self.tumor_center[1];
        dx.hypot(dy) <= 3.2 && self.mask_at(p_mm)
    }

    /// Histology intensity, canonical frame. Stained-section look: bright
    /// background, mid-gray gland with a few millimeter-scale structures, a
    /// dark urethra lumen, and a slightly brighter tumor focus.
    pub fn hist_at(&self, p_mm: [f64; 2]) -> f64 {
        let [x, y] = p_mm;
        if !self.mask_at(p_mm) {
            return 232.0 - 0.2 * x;
        }
        if self.urethra_at(p_mm) {
            return 40.0;
        }
        let (rho, _) = self.polar(p_mm);
        let coarse = (TAU * x / 7.0 + self.texture_phase[0]).sin()
            * (TAU * y / 9.0 + self.texture_phase[1]).cos();
        let grain = (TAU * x / 1.3).sin() * (TAU * y / 1.1).sin();
        let mut v = 140.0 + 55.0 * coarse + 12.0 * grain - 25.0 * rho * rho;
        if self.tumor_at(p_mm) {
            v += 45.0;
        }
        v.clamp(0.0, 255.0)
    }

    /// Maps an MRI-frame point to its corresponding canonical histology-frame
    /// point: similarity map plus a small smooth wobble.
    pub fn hist_mm_from_mri_mm(&self, p_mri: [f64; 2]) -> [f64; 2] {
        let u = [p_mri[0] - self.mri_center[0], p_mri[1] - self.mri_center[1]];
        let (s, c) = self.map_rot_rad.sin_cos();
        let k = self.map_scale;
        let wob = [
            self.wobble_amp_mm * (TAU * (p_mri[0] * self.wobble_freq[0] + p_mri[1] * 0.013)).sin(),
            self.wobble_amp_mm * (TAU * (p_mri[1] * self.wobble_freq[1] - p_mri[0] * 0.011)).cos(),
        ];
        [
            self.center[0] + self.map_shift[0] + k * (c * u[0] - s * u[1]) + wob[0],
            self.center[1] + self.map_shift[1] + k * (s * u[0] + c * u[1]) + wob[1],
        ]
    }

    /// Inverse of [`SliceSpec::hist_mm_from_mri_mm`] by damped fixed-point
    /// iteration; the wobble is far below the similarity part, so a dozen
    /// steps reach well under e-9 mm.
    pub fn mri_mm_from_hist_mm(&self, p_hist: [f64; 2]) -> Result<[f64; 2]> {
        let (s, c) = self.map_rot_rad.sin_cos();
        let k = self.map_scale;
        let mut p = self.mri_center;
        for _ in 0..25 {
            let f = self.hist_mm_from_mri_mm(p);
            let r = [p_hist[0] - f[0], p_hist[1] - f[1]];
            p[0] += (c * r[0] + s * r[1]) / k;
            p[1] += (-s * r[0] + c * r[1]) / k;
        }
        let f = self.hist_mm_from_mri_mm(p);
        let res = (p_hist[0] - f[0]).hypot(p_hist[1] - f[1]);
        if res > 1e-9 {
            return Err(Error::Solve(format!(
                "fixture map inversion stalled at {res:.3e} mm"
            )));
        }
        Ok(p)
    }

    /// MRI intensity: roughly inverted contrast relative to histology with
    /// its own shading, so intensity equality across modalities never holds.
    pub fn mri_at(&self, p_mri: [f64; 2]) -> f64 {
        let p_hist = self.hist_mm_from_mri_mm(p_mri);
        if !self.mask_at(p_hist) {
            return 12.0 + 0.1 * p_mri[0];
        }
        let (rho, _) = self.polar(p_hist);
        let v = 225.0 - 0.62 * self.hist_at(p_hist) - 18.0 * rho;
        v.clamp(0.0, 255.0)
    }
}

fn mm_of_px(r: usize, c: usize, spacing: f64) -> [f64; 2] {
    [(c as f64 + 0.5) * spacing, (r as f64 + 0.5) * spacing]
}

/// Stored-file raster for the histology side: evaluates the canonical-frame
/// function at the oriented position of every stored pixel, so applying the
/// manifest orientation hint recovers the canonical raster exactly for
/// quarter-turn hints.
fn render_stored_hist(spec: &SliceSpec, f: impl Fn([f64; 2]) -> f64) -> Image2D {
    let stored_shape = match spec.orientation.rotation_deg.rem_euclid(180.0) {
        d if (d - 90.0).abs() < 1e-9 => (HIST_SHAPE.1, HIST_SHAPE.0),
        _ => HIST_SHAPE,
    };
    Image2D::from_fn(stored_shape.0, stored_shape.1, |r, c| {
        let (oc, or) = orient_point_px((c as f64, r as f64), stored_shape, &spec.orientation);
        f(mm_of_px(or.round() as usize, oc.round() as usize, HIST_SPACING))
    })
    .with_spacing((HIST_SPACING, HIST_SPACING))
}

fn landmarks_for(spec: &SliceSpec, stored_shape: (usize, usize)) -> Result<Vec<LandmarkEntry>> {
    let mut out = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            let r = ((0.2 + 0.2 * i as f64) * stored_shape.0 as f64).round();
            let c = ((0.2 + 0.2 * j as f64) * stored_shape.1 as f64).round();
            let stored_mm = [(c + 0.5) * HIST_SPACING, (r + 0.5) * HIST_SPACING];
            let canon = orient_point_mm(
                stored_mm,
                stored_shape,
                (HIST_SPACING, HIST_SPACING),
                &spec.orientation,
            );
            let (rho, phi) = spec.polar(canon);
            if rho > 0.75 * spec.boundary(phi) {
                continue;
            }
            out.push(LandmarkEntry {
                p_mri_mm: spec.mri_mm_from_hist_mm(canon)?,
                p_hist_mm: stored_mm,
            });
            if out.len() == 6 {
                return Ok(out);
            }
        }
    }
    Ok(out)
}

/// Writes a complete phantom dataset under `dir`: per-slice PNGs in
/// `p{patient}/s{slice}/` plus a `manifest.json` with relative paths.
/// Returns the manifest as written.
pub fn generate_fixtures(
    dir: &Path,
    n_patients: usize,
    slices_per_patient: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::default();
    for patient in 0..n_patients {
        for slice in 0..slices_per_patient {
            let spec = slice_spec(seed, patient, slice);
            let rel = format!("p{patient:02}/s{slice}");
            let slice_dir = dir.join(&rel);
            std::fs::create_dir_all(&slice_dir).map_err(|e| Error::io(&slice_dir, e))?;

            let hist = render_stored_hist(&spec, |p| spec.hist_at(p));
            let stored_shape = hist.shape();
            hist.save_png8(slice_dir.join("hist.png"))?;
            let as_mask = |img: Image2D| Mask2D::from_image(&img, 127.5);
            as_mask(render_stored_hist(&spec, |p| {
                if spec.mask_at(p) { 255.0 } else { 0.0 }
            }))
            .save_png8(slice_dir.join("hist_mask.png"))?;
            as_mask(render_stored_hist(&spec, |p| {
                if spec.urethra_at(p) && spec.mask_at(p) { 255.0 } else { 0.0 }
            }))
            .save_png8(slice_dir.join("urethra.png"))?;
            as_mask(render_stored_hist(&spec, |p| {
                if spec.tumor_at(p) { 255.0 } else { 0.0 }
            }))
            .save_png8(slice_dir.join("tumor.png"))?;

            let mri = Image2D::from_fn(MRI_SHAPE.0, MRI_SHAPE.1, |r, c| {
                spec.mri_at(mm_of_px(r, c, MRI_SPACING))
            })
            .with_spacing((MRI_SPACING, MRI_SPACING));
            mri.save_png8(slice_dir.join("mri.png"))?;
            Mask2D::from_fn(MRI_SHAPE.0, MRI_SHAPE.1, |r, c| {
                spec.mask_at(spec.hist_mm_from_mri_mm(mm_of_px(r, c, MRI_SPACING)))
            })
            .save_png8(slice_dir.join("mri_mask.png"))?;
            Mask2D::from_fn(MRI_SHAPE.0, MRI_SHAPE.1, |r, c| {
                let p = spec.hist_mm_from_mri_mm(mm_of_px(r, c, MRI_SPACING));
                spec.urethra_at(p) && spec.mask_at(p)
            })
            .save_png8(slice_dir.join("urethra_mri.png"))?;

            manifest.slices.push(SliceEntry {
                patient_id: format!("p{patient:02}"),
                slice_id: format!("s{slice}"),
                hist_path: format!("{rel}/hist.png").into(),
                mri_path: format!("{rel}/mri.png").into(),
                hist_mask_path: format!("{rel}/hist_mask.png").into(),
                mri_mask_path: format!("{rel}/mri_mask.png").into(),
                label_paths: BTreeMap::from([
                    ("tumor".to_string(), format!("{rel}/tumor.png").into()),
                    ("urethra".to_string(), format!("{rel}/urethra.png").into()),
                ]),
                mri_label_paths: BTreeMap::from([(
                    "urethra".to_string(),
                    format!("{rel}/urethra_mri.png").into(),
                )]),
                landmarks: landmarks_for(&spec, stored_shape)?,
                rotation_deg: spec.orientation.rotation_deg,
                hflip: spec.orientation.hflip,
                mri_spacing_mm: (MRI_SPACING, MRI_SPACING),
                hist_spacing_mm: (HIST_SPACING, HIST_SPACING),
            });
        }
    }
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{apply_orientation, preprocess_case, PreprocessConfig};

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_fixtures(a.path(), 1, 3, 11).unwrap();
        generate_fixtures(b.path(), 1, 3, 11).unwrap();
        for rel in ["manifest.json", "p00/s1/hist.png", "p00/s2/mri_mask.png"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn cases_load_and_preprocess_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        generate_fixtures(dir.path(), 2, 3, 5).unwrap();
        let manifest = DatasetManifest::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest.slices.len(), 6);
        let cfg = PreprocessConfig { canvas: 120, crop_margin_px: 4 };
        for entry in &manifest.slices {
            let case = entry.load_case().unwrap();
            assert!(!case.landmarks.is_empty(), "{}", entry.key());
            let prep = preprocess_case(&case, &cfg).unwrap();
            assert_eq!(prep.fixed.shape(), (120, 120));
            assert!(!prep.moving_mask().is_empty());
        }
    }

    #[test]
    fn orientation_hint_exactly_undoes_the_stored_rotation() {
        let spec = slice_spec(3, 0, 1);
        assert_eq!(spec.orientation.rotation_deg, 90.0);
        let stored = render_stored_hist(&spec, |p| spec.hist_at(p));
        assert_eq!(stored.shape(), (HIST_SHAPE.1, HIST_SHAPE.0));
        let oriented = apply_orientation(&stored, &spec.orientation);
        let canonical = Image2D::from_fn(HIST_SHAPE.0, HIST_SHAPE.1, |r, c| {
            spec.hist_at(mm_of_px(r, c, HIST_SPACING))
        });
        assert_eq!(oriented.data(), canonical.data());
    }

    #[test]
    fn landmark_pairs_satisfy_the_generating_map() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_fixtures(dir.path(), 2, 3, 9).unwrap();
        for (idx, entry) in manifest.slices.iter().enumerate() {
            let spec = slice_spec(9, idx / 3, idx % 3);
            let stored_shape = if entry.rotation_deg.rem_euclid(180.0) == 90.0 {
                (HIST_SHAPE.1, HIST_SHAPE.0)
            } else {
                HIST_SHAPE
            };
            for lm in &entry.landmarks {
                let canon = orient_point_mm(
                    lm.p_hist_mm,
                    stored_shape,
                    (HIST_SPACING, HIST_SPACING),
                    &spec.orientation,
                );
                let mapped = spec.hist_mm_from_mri_mm(lm.p_mri_mm);
                let err = (mapped[0] - canon[0]).hypot(mapped[1] - canon[1]);
                assert!(err < 1e-8, "slice {} landmark err {err}", entry.key());
            }
        }
    }

    #[test]
    fn modalities_disagree_in_intensity_but_share_the_anatomy() {
        let spec = slice_spec(1, 0, 0);
        let p_mri = spec
            .mri_mm_from_hist_mm(spec.center)
            .unwrap();
        assert!(spec.mask_at(spec.hist_mm_from_mri_mm(p_mri)));
        let mut diff = 0.0;
        let mut n = 0.0;
        for r in 0..MRI_SHAPE.0 {
            for c in 0..MRI_SHAPE.1 {
                let p = mm_of_px(r, c, MRI_SPACING);
                let h = spec.hist_mm_from_mri_mm(p);
                if spec.mask_at(h) {
                    diff += (spec.mri_at(p) - spec.hist_at(h)).abs();
                    n += 1.0;
                }
            }
        }
        assert!(diff / n > 30.0, "modalities look identical: {}", diff / n);
    }
}
