//! Overlap, boundary-distance, and landmark metrics, plus per-patient
//! aggregation and report serialization.
//!
//! The per-mask computations run as plain serial loops in a fixed order so
//! results are reproducible to the bit and comparable against brute-force
//! re-derivations with `==`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask2D;

/// Dice overlap `2 |A and B| / (|A| + |B|)`. Masks must share the raster;
/// an all-background mask on either side is an error rather than a sentinel.
pub fn dice(a: &Mask2D, b: &Mask2D) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "dice needs equal rasters, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut inter = 0usize;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        na += *x as usize;
        nb += *y as usize;
        inter += (*x && *y) as usize;
    }
    if na == 0 || nb == 0 {
        return Err(Error::EmptyMask("dice of an all-background mask".into()));
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Foreground pixels with at least one background 4-neighbor; positions
/// outside the raster count as background, so edge pixels of a foreground
/// region are boundary.
pub fn boundary_points(mask: &Mask2D) -> Vec<(usize, usize)> {
    let (h, w) = mask.shape();
    let data = mask.data();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !data[(r, c)] {
                continue;
            }
            let bg = (r == 0 || !data[(r - 1, c)])
                || (r + 1 == h || !data[(r + 1, c)])
                || (c == 0 || !data[(r, c - 1)])
                || (c + 1 == w || !data[(r, c + 1)]);
            if bg {
                out.push((r, c));
            }
        }
    }
    out
}

fn directed_hausdorff_sq(
    from: &[(usize, usize)],
    to: &[(usize, usize)],
    spacing: (f64, f64),
) -> f64 {
    let mut worst = 0.0f64;
    for &(ra, ca) in from {
        let mut best = f64::INFINITY;
        for &(rb, cb) in to {
            let dx = (ca as f64 - cb as f64) * spacing.0;
            let dy = (ra as f64 - rb as f64) * spacing.1;
            let d2 = dx * dx + dy * dy;
            if d2 < best {
                best = d2;
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst
}

/// Symmetric Hausdorff distance between mask boundaries in mm, using pixel
/// centers as point coordinates. Requires matching rasters and spacing.
pub fn hausdorff_mm(a: &Mask2D, b: &Mask2D) -> Result<f64> {
    if a.shape() != b.shape() || a.spacing_mm() != b.spacing_mm() {
        return Err(Error::ShapeMismatch(format!(
            "hausdorff needs one raster, got {:?} @ {:?} and {:?} @ {:?}",
            a.shape(),
            a.spacing_mm(),
            b.shape(),
            b.spacing_mm()
        )));
    }
    let ba = boundary_points(a);
    let bb = boundary_points(b);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::EmptyMask("hausdorff of an all-background mask".into()));
    }
    let spacing = a.spacing_mm();
    let fwd = directed_hausdorff_sq(&ba, &bb, spacing);
    let bwd = directed_hausdorff_sq(&bb, &ba, spacing);
    Ok(fwd.max(bwd).sqrt())
}

/// Mean distance in mm between moving-side landmarks and their fixed-side
/// partners mapped through `map`. An empty landmark list is an error.
pub fn landmark_error_mm(
    pairs: &[([f64; 2], [f64; 2])],
    map: impl Fn([f64; 2]) -> [f64; 2],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric(
            "landmark error over zero landmarks".into(),
        ));
    }
    let mut sum = 0.0;
    for &(fixed_mm, moving_mm) in pairs {
        let q = map(fixed_mm);
        let dx = moving_mm[0] - q[0];
        let dy = moving_mm[1] - q[1];
        sum += (dx * dx + dy * dy).sqrt();
    }
    Ok(sum / pairs.len() as f64)
}

/// Per-slice metric values; `None` marks a metric that was unavailable for
/// the slice (no landmarks, no urethra label) rather than a failure.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceScores {
    pub patient_id: String,
    pub slice_id: String,
    pub dice: Option<f64>,
    pub hausdorff_mm: Option<f64>,
    pub urethra_dev_mm: Option<f64>,
    pub landmark_err_mm: Option<f64>,
    pub time_s: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatientScores {
    pub patient_id: String,
    pub n_slices: usize,
    pub dice: Option<f64>,
    pub hausdorff_mm: Option<f64>,
    pub urethra_dev_mm: Option<f64>,
    pub landmark_err_mm: Option<f64>,
    pub time_s: Option<f64>,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Per-patient scores: the mean of each metric over the patient's slices,
/// with missing per-slice values excluded from that metric's mean. Patients
/// appear in first-seen slice order.
pub fn aggregate_patients(slices: &[SliceScores]) -> Vec<PatientScores> {
    let mut order: Vec<&str> = Vec::new();
    for s in slices {
        if !order.contains(&s.patient_id.as_str()) {
            order.push(&s.patient_id);
        }
    }
    order
        .into_iter()
        .map(|pid| {
            let rows: Vec<&SliceScores> =
                slices.iter().filter(|s| s.patient_id == pid).collect();
            PatientScores {
                patient_id: pid.to_string(),
                n_slices: rows.len(),
                dice: mean_present(rows.iter().map(|r| r.dice)),
                hausdorff_mm: mean_present(rows.iter().map(|r| r.hausdorff_mm)),
                urethra_dev_mm: mean_present(rows.iter().map(|r| r.urethra_dev_mm)),
                landmark_err_mm: mean_present(rows.iter().map(|r| r.landmark_err_mm)),
                time_s: mean_present(rows.iter().map(|r| r.time_s)),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn stat(values: impl Iterator<Item = Option<f64>>) -> Option<MetricStat> {
    let vs: Vec<f64> = values.flatten().collect();
    if vs.is_empty() {
        return None;
    }
    let n = vs.len();
    let mean = vs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        vs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Some(MetricStat {
        mean,
        std: var.sqrt(),
        n,
    })
}

/// Cohort summary: overlap and distance metrics as mean and standard
/// deviation across patients, runtime across slices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub backend: String,
    pub n_patients: usize,
    pub n_slices: usize,
    pub dice: Option<MetricStat>,
    pub hausdorff_mm: Option<MetricStat>,
    pub urethra_dev_mm: Option<MetricStat>,
    pub landmark_err_mm: Option<MetricStat>,
    pub time_s: Option<MetricStat>,
}

pub fn summarize(backend: &str, slices: &[SliceScores], patients: &[PatientScores]) -> Summary {
    Summary {
        backend: backend.to_string(),
        n_patients: patients.len(),
        n_slices: slices.len(),
        dice: stat(patients.iter().map(|p| p.dice)),
        hausdorff_mm: stat(patients.iter().map(|p| p.hausdorff_mm)),
        urethra_dev_mm: stat(patients.iter().map(|p| p.urethra_dev_mm)),
        landmark_err_mm: stat(patients.iter().map(|p| p.landmark_err_mm)),
        time_s: stat(slices.iter().map(|s| s.time_s)),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes slice rows followed by patient rows. Values use the shortest
/// representation that reparses to the same double, so the file is
/// byte-stable across reruns.
pub fn write_metrics_csv(
    path: impl AsRef<Path>,
    slices: &[SliceScores],
    patients: &[PatientScores],
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record([
        "level",
        "patient_id",
        "slice_id",
        "dice",
        "hausdorff_mm",
        "urethra_dev_mm",
        "landmark_err_mm",
        "time_s",
    ])
    .map_err(|e| Error::format(path, e.to_string()))?;
    for s in slices {
        w.write_record([
            "slice",
            &s.patient_id,
            &s.slice_id,
            &cell(s.dice),
            &cell(s.hausdorff_mm),
            &cell(s.urethra_dev_mm),
            &cell(s.landmark_err_mm),
            &cell(s.time_s),
        ])
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    for p in patients {
        w.write_record([
            "patient",
            &p.patient_id,
            "",
            &cell(p.dice),
            &cell(p.hausdorff_mm),
            &cell(p.urethra_dev_mm),
            &cell(p.landmark_err_mm),
            &cell(p.time_s),
        ])
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_summary_json(path: impl AsRef<Path>, summary: &Summary) -> Result<()> {
    let path = path.as_ref();
    let mut body = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::format(path, e.to_string()))?;
    body.push('\n');
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, r0: usize, c0: usize, side: usize) -> Mask2D {
        Mask2D::from_fn(h, w, |r, c| {
            r >= r0 && r < r0 + side && c >= c0 && c < c0 + side
        })
    }

    #[test]
    fn dice_of_identical_masks_is_one() {
        let a = square(20, 20, 4, 4, 10);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }


    #[test]
    fn dice_of_half_overlapping_squares_is_half() {
        let a = square(20, 20, 0, 0, 10);
        let b = square(20, 20, 0, 5, 10);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn dice_is_symmetric() {
        let a = square(16, 16, 2, 3, 7);
        let b = square(16, 16, 5, 1, 6);
        assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
    }

    #[test]
    fn dice_errors_on_empty_mask() {
        let a = square(8, 8, 1, 1, 3);
        let empty = Mask2D::from_fn(8, 8, |_, _| false);
        assert!(matches!(dice(&a, &empty), Err(Error::EmptyMask(_))));
        assert!(matches!(dice(&empty, &a), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn boundary_excludes_interior_and_includes_raster_edge() {
        let solid = square(5, 5, 1, 1, 3);
        let b = boundary_points(&solid);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
        let full = Mask2D::from_fn(4, 4, |_, _| true);
        let bf = boundary_points(&full);
        assert_eq!(bf.len(), 12);
        assert!(!bf.contains(&(1, 1)));
        assert!(bf.contains(&(0, 0)));
    }

    #[test]
    fn hausdorff_of_offset_pixels_is_the_offset() {
        let a = square(10, 10, 4, 2, 1);
        let b = square(10, 10, 4, 5, 1);
        assert_eq!(hausdorff_mm(&a, &b).unwrap(), 3.0);
    }

    #[test]
    fn hausdorff_uses_anisotropic_spacing() {
        let a = square(10, 10, 2, 4, 1).with_spacing((1.0, 2.0));
        let b = square(10, 10, 5, 4, 1).with_spacing((1.0, 2.0));
        assert_eq!(hausdorff_mm(&a, &b).unwrap(), 6.0);
    }

    #[test]
    fn hausdorff_is_symmetric() {
        let a = square(32, 32, 3, 3, 12);
        let b = square(32, 32, 10, 14, 9);
        assert_eq!(hausdorff_mm(&a, &b).unwrap(), hausdorff_mm(&b, &a).unwrap());
    }

    #[test]
    fn landmark_error_identity_offset_three_four_is_five() {
        let pairs = vec![([10.0, 20.0], [13.0, 24.0])];
        let e = landmark_error_mm(&pairs, |p| p).unwrap();
        assert_eq!(e, 5.0);
    }

    #[test]
    fn landmark_error_without_landmarks_is_an_error() {
        assert!(landmark_error_mm(&[], |p| p).is_err());
    }

    #[test]
    fn patient_aggregation_skips_missing_values() {
        let slices = vec![
            SliceScores {
                patient_id: "p1".into(),
                slice_id: "s1".into(),
                dice: Some(0.9),
                hausdorff_mm: Some(2.0),
                urethra_dev_mm: None,
                landmark_err_mm: Some(1.0),
                time_s: Some(0.5),
            },
            SliceScores {
                patient_id: "p1".into(),
                slice_id: "s2".into(),
                dice: Some(0.7),
                hausdorff_mm: None,
                urethra_dev_mm: None,
                landmark_err_mm: Some(3.0),
                time_s: Some(1.5),
            },
        ];
        let pats = aggregate_patients(&slices);
        assert_eq!(pats.len(), 1);
        let p = &pats[0];
        assert_eq!(p.n_slices, 2);
        assert_eq!(p.dice.unwrap(), 0.8);
        assert_eq!(p.hausdorff_mm.unwrap(), 2.0);
        assert!(p.urethra_dev_mm.is_none());
        assert_eq!(p.landmark_err_mm.unwrap(), 2.0);
    }

    #[test]
    fn summary_uses_sample_std_across_patients() {
        let slices: Vec<SliceScores> = ["a", "b"]
            .iter()
            .enumerate()
            .map(|(i, pid)| SliceScores {
                patient_id: pid.to_string(),
                slice_id: format!("s{i}"),
                dice: Some(0.8 + 0.2 * i as f64),
                hausdorff_mm: None,
                urethra_dev_mm: None,
                landmark_err_mm: None,
                time_s: Some(1.0),
            })
            .collect();
        let pats = aggregate_patients(&slices);
        let s = summarize("test", &slices, &pats);
        let d = s.dice.unwrap();
        assert!((d.mean - 0.9).abs() < 1e-12);
        assert!((d.std - (0.02f64).sqrt()).abs() < 1e-12);
        assert_eq!(d.n, 2);
        assert_eq!(s.time_s.unwrap().n, 2);
    }
}
