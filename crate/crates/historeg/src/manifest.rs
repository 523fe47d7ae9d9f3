//! Dataset manifest: a JSON listing of corresponding histology/MRI slice
//! pairs with per-slice file paths, spacings, orientation hints, and landmark
//! correspondences in native mm coordinates. Paths may be relative to the
//! manifest file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image2D, Mask2D};
use crate::preprocess::{CasePair, LandmarkPair, OrientationConfig};

/// One landmark correspondence as stored in the manifest, mm of each native
/// image space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkEntry {
    pub p_mri_mm: [f64; 2],
    pub p_hist_mm: [f64; 2],
}

/// One corresponding slice pair. `label_paths` carries histology-side label
/// masks by name; `mri_label_paths` the MRI-side counterparts where drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub patient_id: String,
    pub slice_id: String,
    pub hist_path: PathBuf,
    pub mri_path: PathBuf,
    pub hist_mask_path: PathBuf,
    pub mri_mask_path: PathBuf,
    #[serde(default)]
    pub label_paths: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub mri_label_paths: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub landmarks: Vec<LandmarkEntry>,
    /// Histology orientation fix, degrees counterclockwise.
    #[serde(default)]
    pub rotation_deg: f64,
    /// Horizontal flip of the histology section, applied after rotation.
    #[serde(default)]
    pub hflip: bool,
    pub mri_spacing_mm: (f64, f64),
    pub hist_spacing_mm: (f64, f64),
}

impl SliceEntry {
    /// Stable identifier used for artifact file names.
    pub fn key(&self) -> String {
        format!("{}_{}", self.patient_id, self.slice_id)
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.hist_path,
            &mut self.mri_path,
            &mut self.hist_mask_path,
            &mut self.mri_mask_path,
        ] {
            resolve_path(p, base);
        }
        for p in self.label_paths.values_mut() {
            resolve_path(p, base);
        }
        for p in self.mri_label_paths.values_mut() {
            resolve_path(p, base);
        }
    }

    /// Loads all referenced files into an in-memory case, applying the
    /// manifest spacings. Orientation is recorded, not applied; the
    /// preprocessing stage owns that step.
    pub fn load_case(&self) -> Result<CasePair> {
        let hist_image =
            Image2D::load_gray(existing(&self.hist_path)?)?.with_spacing(self.hist_spacing_mm);
        let hist_mask =
            Mask2D::load(existing(&self.hist_mask_path)?)?.with_spacing(self.hist_spacing_mm);
        let mri_slice =
            Image2D::load_gray(existing(&self.mri_path)?)?.with_spacing(self.mri_spacing_mm);
        let mri_mask =
            Mask2D::load(existing(&self.mri_mask_path)?)?.with_spacing(self.mri_spacing_mm);
        let mut labels = BTreeMap::new();
        for (name, path) in &self.label_paths {
            labels.insert(
                name.clone(),
                Mask2D::load(existing(path)?)?.with_spacing(self.hist_spacing_mm),
            );
        }
        let mut mri_labels = BTreeMap::new();
        for (name, path) in &self.mri_label_paths {
            mri_labels.insert(
                name.clone(),
                Mask2D::load(existing(path)?)?.with_spacing(self.mri_spacing_mm),
            );
        }
        Ok(CasePair {
            hist_image,
            hist_mask,
            mri_slice,
            mri_mask,
            labels,
            mri_labels,
            landmarks: self
                .landmarks
                .iter()
                .map(|l| LandmarkPair { mri_mm: l.p_mri_mm, hist_mm: l.p_hist_mm })
                .collect(),
            orientation: OrientationConfig {
                rotation_deg: self.rotation_deg,
                hflip: self.hflip,
            },
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub slices: Vec<SliceEntry>,
}

impl DatasetManifest {
    /// Parses and validates a manifest file. Relative paths inside are
    /// resolved against the manifest's directory. Referenced files are not
    /// opened here; per-slice loading reports those errors.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        manifest.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        for entry in &mut manifest.slices {
            entry.resolve(base);
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(path, e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut keys = BTreeSet::new();
        for entry in &self.slices {
            for id in [&entry.patient_id, &entry.slice_id] {
                if id.is_empty()
                    || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
                {
                    return Err(Error::Manifest(format!(
                        "identifier {id:?} must be non-empty [A-Za-z0-9_-]"
                    )));
                }
            }
            let key = entry.key();
            if !keys.insert(key.clone()) {
                return Err(Error::Manifest(format!("duplicate slice {key}")));
            }
            for (what, s) in [
                ("mri_spacing_mm", entry.mri_spacing_mm),
                ("hist_spacing_mm", entry.hist_spacing_mm),
            ] {
                if !(s.0 > 0.0 && s.1 > 0.0 && s.0.is_finite() && s.1.is_finite()) {
                    return Err(Error::Manifest(format!(
                        "slice {}: {what} must be positive, got {s:?}",
                        entry.key()
                    )));
                }
            }
            if !entry.rotation_deg.is_finite() {
                return Err(Error::Manifest(format!(
                    "slice {}: rotation_deg must be finite",
                    entry.key()
                )));
            }
            for l in &entry.landmarks {
                if l.p_mri_mm.iter().chain(&l.p_hist_mm).any(|v| !v.is_finite()) {
                    return Err(Error::Manifest(format!(
                        "slice {}: non-finite landmark",
                        entry.key()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn resolve_path(p: &mut PathBuf, base: &Path) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn existing(p: &Path) -> Result<&Path> {
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::MissingInput(p.to_path_buf()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(dir: &Path) -> SliceEntry {
        SliceEntry {
            patient_id: "p01".into(),
            slice_id: "s3".into(),
            hist_path: dir.join("hist.png"),
            mri_path: dir.join("mri.png"),
            hist_mask_path: dir.join("hist_mask.png"),
            mri_mask_path: dir.join("mri_mask.png"),
            label_paths: BTreeMap::from([("tumor".to_string(), dir.join("tumor.png"))]),
            mri_label_paths: BTreeMap::new(),
            landmarks: vec![LandmarkEntry {
                p_mri_mm: [4.0, 5.5],
                p_hist_mm: [1.25, 2.0],
            }],
            rotation_deg: 90.0,
            hflip: true,
            mri_spacing_mm: (0.5, 0.5),
            hist_spacing_mm: (0.25, 0.25),
        }
    }

    fn write_images(dir: &Path) {
        let img = Image2D::from_fn(12, 10, |r, c| (10 * r + c) as f64);
        img.save_png8(dir.join("hist.png")).unwrap();
        img.save_png8(dir.join("mri.png")).unwrap();
        let mask = Mask2D::from_fn(12, 10, |r, c| r > 2 && c > 1);
        mask.save_png8(dir.join("hist_mask.png")).unwrap();
        mask.save_png8(dir.join("mri_mask.png")).unwrap();
        Mask2D::from_fn(12, 10, |r, c| r > 5 && c > 4)
            .save_png8(dir.join("tumor.png"))
            .unwrap();
    }

    #[test]
    fn round_trips_through_json_and_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = entry(Path::new(""));
        e.hist_path = PathBuf::from("images/hist.png");
        let manifest = DatasetManifest { slices: vec![e] };
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();

        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded.slices.len(), 1);
        assert_eq!(loaded.slices[0].hist_path, dir.path().join("images/hist.png"));
        assert_eq!(loaded.slices[0].key(), "p01_s3");
        assert_eq!(loaded.slices[0].landmarks, manifest.slices[0].landmarks);

        let again = dir.path().join("again.json");
        loaded.save(&again).unwrap();
        let reloaded = DatasetManifest::load(&again).unwrap();
        assert_eq!(reloaded, loaded);
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, "{\"slices\": []}\n").unwrap();
        assert!(DatasetManifest::load(&path).unwrap().slices.is_empty());
    }

    #[test]
    fn rejects_bad_spacing_duplicates_and_odd_identifiers() {
        let base = Path::new("/tmp");
        let mut bad_spacing = entry(base);
        bad_spacing.mri_spacing_mm = (0.0, 0.5);
        let m = DatasetManifest { slices: vec![bad_spacing] };
        assert!(matches!(m.validate(), Err(Error::Manifest(_))));

        let m = DatasetManifest { slices: vec![entry(base), entry(base)] };
        assert!(matches!(m.validate(), Err(Error::Manifest(_))));

        let mut bad_id = entry(base);
        bad_id.slice_id = "a/b".into();
        let m = DatasetManifest { slices: vec![bad_id] };
        assert!(matches!(m.validate(), Err(Error::Manifest(_))));
    }

    #[test]
    fn loads_a_case_with_spacings_labels_and_orientation() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path());
        let case = entry(dir.path()).load_case().unwrap();
        assert_eq!(case.hist_image.shape(), (12, 10));
        assert_eq!(case.hist_image.spacing_mm(), (0.25, 0.25));
        assert_eq!(case.mri_slice.spacing_mm(), (0.5, 0.5));
        assert_eq!(case.labels["tumor"].count(), 6 * 5);
        assert!(case.mri_labels.is_empty());
        assert_eq!(case.orientation.rotation_deg, 90.0);
        assert!(case.orientation.hflip);
        assert_eq!(case.landmarks[0].hist_mm, [1.25, 2.0]);
        assert!(!case.hist_mask.is_empty());
    }

    #[test]
    fn missing_file_is_reported_with_its_path() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path());
        let mut e = entry(dir.path());
        e.mri_path = dir.path().join("absent.png");
        match e.load_case() {
            Err(Error::MissingInput(p)) => assert!(p.ends_with("absent.png")),
            other => panic!("expected missing input, got {other:?}"),
        }
    }
}
