//! Dense correlation between two feature maps, the similarity interface
//! between the shared extractor and the regression head.
//!
//! For target features `fb` and source features `fa` on an h-by-w grid, the
//! output at position (i, j) stacks the inner products of `fb(i, j)` with
//! `fa` at every position, ordered column-major: channel `k` corresponds to
//! source position `(row, col) = (k mod h, k / h)`. Negative responses are
//! clipped and the channel vector at each position is scaled to unit length
//! (all-zero vectors stay zero).

use ndarray::{Array2, Array4, Axis};

/// Per-position channelwise L2 normalization.
pub fn l2norm_channels(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = x.clone();
    for ni in 0..n {
        for r in 0..h {
            for cc in 0..w {
                let mut sq = 0.0;
                for ci in 0..c {
                    let v = x[(ni, ci, r, cc)];
                    sq += v * v;
                }
                if sq > 0.0 {
                    let inv = 1.0 / sq.sqrt();
                    for ci in 0..c {
                        out[(ni, ci, r, cc)] *= inv;
                    }
                }
            }
        }
    }
    out
}

/// Backward pass for [`l2norm_channels`] given the forward input.
pub fn l2norm_channels_backward(x: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut dx = Array4::zeros(x.dim());
    for ni in 0..n {
        for r in 0..h {
            for cc in 0..w {
                let mut sq = 0.0;
                for ci in 0..c {
                    let v = x[(ni, ci, r, cc)];
                    sq += v * v;
                }
                if sq == 0.0 {
                    continue;
                }
                let norm = sq.sqrt();
                let mut dot = 0.0;
                for ci in 0..c {
                    dot += dy[(ni, ci, r, cc)] * x[(ni, ci, r, cc)];
                }
                for ci in 0..c {
                    let xi = x[(ni, ci, r, cc)];
                    dx[(ni, ci, r, cc)] = dy[(ni, ci, r, cc)] / norm - xi * dot / (sq * norm);
                }
            }
        }
    }
    dx
}

/// Correlation volume: output channel count is h*w of the input maps.
/// `fa` holds source features, `fb` target features; both must share shape.
pub fn correlate(fa: &Array4<f64>, fb: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = fa.dim();
    assert_eq!(fa.dim(), fb.dim(), "correlation needs matching feature shapes");
    let mut out = Array4::zeros((n, h * w, h, w));
    for ni in 0..n {
        // Flatten each map once per sample: rows are positions, cols channels.
        let mut fa_mat = Array2::zeros((h * w, c));
        for ci in 0..c {
            for r in 0..h {
                for cc in 0..w {
                    // column-major position index
                    fa_mat[(cc * h + r, ci)] = fa[(ni, ci, r, cc)];
                }
            }
        }
        let mut fb_mat = Array2::zeros((h * w, c));
        for ci in 0..c {
            for r in 0..h {
                for cc in 0..w {
                    fb_mat[(r * w + cc, ci)] = fb[(ni, ci, r, cc)];
                }
            }
        }
        // (target positions) x (source positions)
        let sim = fb_mat.dot(&fa_mat.t());
        for r in 0..h {
            for cc in 0..w {
                for k in 0..h * w {
                    out[(ni, k, r, cc)] = sim[(r * w + cc, k)];
                }
            }
        }
    }
    out
}

/// Backward pass for [`correlate`]: returns (dfa, dfb).
pub fn correlate_backward(
    fa: &Array4<f64>,
    fb: &Array4<f64>,
    dy: &Array4<f64>,
) -> (Array4<f64>, Array4<f64>) {
    let (n, c, h, w) = fa.dim();
    let mut dfa = Array4::zeros(fa.dim());
    let mut dfb = Array4::zeros(fb.dim());
    for ni in 0..n {
        for r in 0..h {
            for cc in 0..w {
                for k in 0..h * w {
                    let g = dy[(ni, k, r, cc)];
                    if g == 0.0 {
                        continue;
                    }
                    let (sr, sc) = (k % h, k / h);
                    for ci in 0..c {
                        dfb[(ni, ci, r, cc)] += g * fa[(ni, ci, sr, sc)];
                        dfa[(ni, ci, sr, sc)] += g * fb[(ni, ci, r, cc)];
                    }
                }
            }
        }
    }
    (dfa, dfb)
}

/// Mean absolute response per output channel, a cheap fingerprint used by
/// tests to confirm channel ordering.
pub fn channel_means(x: &Array4<f64>) -> Vec<f64> {
    x.axis_iter(Axis(1))
        .map(|ch| ch.mapv(f64::abs).mean().unwrap_or(0.0))
        .collect()
}
