//! Histogram mutual information with linear (partial volume) binning and
//! its analytic gradient with respect to one image's intensities.
//!
//! Intensities on the 0..=255 scale map to `bins - 1` as the top bin
//! coordinate; each value splits its mass linearly between the two
//! enclosing bins, which is what makes the measure differentiable.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::Image2D;

fn bin_split(v: f64, bins: usize) -> (usize, usize, f64) {
    let top = (bins - 1) as f64;
    let b = (v.clamp(0.0, 255.0) / 255.0) * top;
    let lo = (b.floor() as usize).min(bins - 1);
    let hi = (lo + 1).min(bins - 1);
    (lo, hi, b - lo as f64)
}

struct Histograms {
    joint: Array2<f64>,
    fixed_marginal: Vec<f64>,
    moving_marginal: Vec<f64>,
    n: f64,
}

fn histograms(fixed: &Image2D, moving: &Image2D, bins: usize) -> Result<Histograms> {
    if fixed.shape() != moving.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mutual information needs matching shapes, got {:?} and {:?}",
            fixed.shape(),
            moving.shape()
        )));
    }
    if bins < 2 {
        return Err(Error::Config(format!("mutual information needs >= 2 bins, got {bins}")));
    }
    let mut joint = Array2::zeros((bins, bins));
    for (&fv, &mv) in fixed.data().iter().zip(moving.data().iter()) {
        let (fl, fh, ff) = bin_split(fv, bins);
        let (ml, mh, mf) = bin_split(mv, bins);
        joint[(fl, ml)] += (1.0 - ff) * (1.0 - mf);
        joint[(fl, mh)] += (1.0 - ff) * mf;
        joint[(fh, ml)] += ff * (1.0 - mf);
        joint[(fh, mh)] += ff * mf;
    }
    let n = fixed.data().len() as f64;
    let fixed_marginal: Vec<f64> = (0..bins).map(|a| joint.row(a).sum()).collect();
    let moving_marginal: Vec<f64> = (0..bins).map(|b| joint.column(b).sum()).collect();
    Ok(Histograms {
        joint,
        fixed_marginal,
        moving_marginal,
        n,
    })
}

/// Mutual information in nats between two equally shaped images.
pub fn mutual_information(fixed: &Image2D, moving: &Image2D, bins: usize) -> Result<f64> {
    let h = histograms(fixed, moving, bins)?;
    let mut mi = 0.0;
    for a in 0..bins {
        for b in 0..bins {
            let pab = h.joint[(a, b)] / h.n;
            if pab > 0.0 {
                let pa = h.fixed_marginal[a] / h.n;
                let pb = h.moving_marginal[b] / h.n;
                mi += pab * (pab / (pa * pb)).ln();
            }
        }
    }
    Ok(mi)
}

/// Mutual information and its derivative with respect to each pixel of the
/// moving image.
pub fn mi_and_grad_wrt_moving(
    fixed: &Image2D,
    moving: &Image2D,
    bins: usize,
) -> Result<(f64, Array2<f64>)> {
    let h = histograms(fixed, moving, bins)?;
    let mut mi = 0.0;
    // d MI / d H[a, b], up to terms constant in b which cancel because the
    // per-pixel bin weights always sum to one.
    let mut dmi_dh = Array2::zeros((bins, bins));
    let floor = 0.5 / h.n;
    for a in 0..bins {
        for b in 0..bins {
            let pab = h.joint[(a, b)] / h.n;
            let pa = h.fixed_marginal[a] / h.n;
            let pb = h.moving_marginal[b] / h.n;
            dmi_dh[(a, b)] = if pab > 0.0 {
                let ratio = pab / (pa * pb);
                mi += pab * ratio.ln();
                ratio.ln() / h.n
            } else if pa > 0.0 && pb > 0.0 {
                // Mass entering an empty joint bin between occupied
                // marginals spreads the histogram; the true one-sided slope
                // diverges, so floor the count at half a sample instead.
                (floor / (pa * pb)).ln() / h.n
            } else if pa > 0.0 {
                // An empty column: a new perfectly predictive pairing.
                -pa.ln() / h.n
            } else if pb > 0.0 {
                -pb.ln() / h.n
            } else {
                0.0
            };
        }
    }
    let top = (bins - 1) as f64;
    let mut grad = Array2::zeros(fixed.shape());
    for ((r, c), &mv) in moving.data().indexed_iter() {
        let fv = fixed.at(r, c);
        let (fl, fh, ff) = bin_split(fv, bins);
        let (ml, mh, _) = bin_split(mv, bins);
        if ml == mh {
            continue;
        }
        // dw_lo/dv = -top/255, dw_hi/dv = +top/255
        let dv = top / 255.0;
        let mut g = 0.0;
        g += (1.0 - ff) * (dmi_dh[(fl, mh)] - dmi_dh[(fl, ml)]);
        g += ff * (dmi_dh[(fh, mh)] - dmi_dh[(fh, ml)]);
        grad[(r, c)] = g * dv;
    }
    Ok((mi, grad))
}
