//! Report figures drawn into plain RGB rasters: loss curves, metric box
//! plots, fixed/warped overlays, and deformed-grid snapshots. Everything is
//! rendered with integer primitives and a built-in 5x7 font so that figure
//! bytes are stable across runs and platforms.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::DeformedGrid;
use crate::image::{Image2D, Mask2D};

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
const AXIS: Rgb = [60, 60, 60];
const GRID_LINE: Rgb = [225, 225, 225];

/// Colors assigned to plot series and label contours, in order.
pub const SERIES_COLORS: [Rgb; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

/// RGB raster with clipping draw primitives. Coordinates are (x, y) with the
/// origin at the top-left corner, x to the right, y downward.
pub struct Canvas {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, bg: Rgb) -> Self {
        let mut data = vec![0u8; width * height * 3];
        for px in data.chunks_exact_mut(3) {
            px.copy_from_slice(&bg);
        }
        Canvas { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn set(&mut self, x: i64, y: i64, color: Rgb) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: Rgb) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, color);
            }
        }
    }

    pub fn rect_outline(&mut self, x: i64, y: i64, w: i64, h: i64, color: Rgb) {
        if w <= 0 || h <= 0 {
            return;
        }
        self.line(x, y, x + w - 1, y, color);
        self.line(x, y + h - 1, x + w - 1, y + h - 1, color);
        self.line(x, y, x, y + h - 1, color);
        self.line(x + w - 1, y, x + w - 1, y + h - 1, color);
    }

    /// Bresenham segment, endpoints included.
    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb) {
        let (mut x, mut y) = (x0, y0);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Draws `text` with the built-in font, top-left corner at (x, y).
    /// Uppercase input is lowered; glyphs outside the font advance blank.
    pub fn text(&mut self, x: i64, y: i64, text: &str, color: Rgb) {
        let mut cx = x;
        for ch in text.chars() {
            let g = glyph(ch.to_ascii_lowercase());
            for (row, bits) in g.iter().enumerate() {
                for col in 0..5 {
                    if bits & (1 << (4 - col)) != 0 {
                        self.set(cx + col as i64, y + row as i64, color);
                    }
                }
            }
            cx += 6;
        }
    }

    /// Copies a grayscale image into the canvas with its top-left at (x, y),
    /// clamping intensities to the displayable 0..=255 range.
    pub fn blit_gray(&mut self, x: i64, y: i64, img: &Image2D) {
        for r in 0..img.height() {
            for c in 0..img.width() {
                let v = img.at(r, c).clamp(0.0, 255.0).round() as u8;
                self.set(x + c as i64, y + r as i64, [v, v, v]);
            }
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf: image::RgbImage = image::ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.clone(),
        )
        .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::ImageFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Pixel width of `text` as drawn by [`Canvas::text`].
pub fn text_width(text: &str) -> i64 {
    let n = text.chars().count() as i64;
    if n == 0 {
        0
    } else {
        n * 6 - 1
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 10000.0 || a < 0.01 {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

struct Axes {
    x0: i64,
    y0: i64,
    w: i64,
    h: i64,
    vmin: f64,
    vmax: f64,
}

impl Axes {
    fn y_px(&self, v: f64) -> i64 {
        let t = (v - self.vmin) / (self.vmax - self.vmin);
        self.y0 + self.h - 1 - (t * (self.h - 1) as f64).round() as i64
    }

    /// Horizontal gridlines plus left-edge tick labels at four levels.
    fn draw_value_axis(&self, canvas: &mut Canvas) {
        for k in 0..4 {
            let v = self.vmin + (self.vmax - self.vmin) * k as f64 / 3.0;
            let y = self.y_px(v);
            canvas.line(self.x0, y, self.x0 + self.w - 1, y, GRID_LINE);
            let label = fmt_tick(v);
            canvas.text(self.x0 - 6 - text_width(&label), y - 3, &label, AXIS);
        }
        canvas.rect_outline(self.x0, self.y0, self.w, self.h, AXIS);
    }
}

fn value_range(values: impl Iterator<Item = f64>) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut any = false;
    for v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("figure data".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
        any = true;
    }
    if !any {
        return Err(Error::Config("figure has no data points".into()));
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.05;
        return Ok((lo - pad, hi + pad));
    }
    let pad = (hi - lo) * 0.05;
    Ok((lo - pad, hi + pad))
}

/// Line chart of one or more per-epoch series sharing an x axis, with a
/// legend naming each series. Epochs run 0..len-1 left to right.
pub fn loss_curve_png(
    path: impl AsRef<Path>,
    title: &str,
    series: &[(String, Vec<f64>)],
) -> Result<()> {
    let (vmin, vmax) = value_range(series.iter().flat_map(|(_, v)| v.iter().copied()))?;
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);

    let mut canvas = Canvas::new(560, 360, WHITE);
    let ax = Axes { x0: 64, y0: 28, w: 480, h: 280, vmin, vmax };
    ax.draw_value_axis(&mut canvas);
    canvas.text(ax.x0, 10, title, BLACK);

    let x_px = |i: usize| {
        if n <= 1 {
            ax.x0 + ax.w / 2
        } else {
            ax.x0 + ((ax.w - 1) as f64 * i as f64 / (n - 1) as f64).round() as i64
        }
    };
    for k in 0..4 {
        let i = ((n.max(1) - 1) as f64 * k as f64 / 3.0).round() as usize;
        let x = x_px(i);
        let label = format!("{i}");
        canvas.line(x, ax.y0 + ax.h - 1, x, ax.y0 + ax.h + 3, AXIS);
        canvas.text(x - text_width(&label) / 2, ax.y0 + ax.h + 7, &label, AXIS);
    }
    canvas.text(ax.x0 + ax.w / 2 - text_width("epoch") / 2, 340, "epoch", AXIS);

    for (si, (name, values)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        for i in 1..values.len() {
            canvas.line(
                x_px(i - 1),
                ax.y_px(values[i - 1]),
                x_px(i),
                ax.y_px(values[i]),
                color,
            );
        }
        if values.len() == 1 {
            canvas.fill_rect(x_px(0) - 1, ax.y_px(values[0]) - 1, 3, 3, color);
        }
        let ly = ax.y0 + 6 + 12 * si as i64;
        canvas.fill_rect(ax.x0 + ax.w - 70, ly, 8, 8, color);
        canvas.text(ax.x0 + ax.w - 58, ly, name, BLACK);
    }
    canvas.save_png(path)
}

/// Five-number summary used by the box plots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quartiles by linear interpolation over the sorted sample at positions
/// p * (n - 1). Errors when the sample is empty or contains non-finite values.
pub fn box_stats(samples: &[f64]) -> Result<BoxStats> {
    if samples.is_empty() {
        return Err(Error::Config("box stats of an empty sample".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("box stats input".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let t = p * (sorted.len() - 1) as f64;
        let i = t.floor() as usize;
        let frac = t - i as f64;
        if i + 1 < sorted.len() {
            sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
        } else {
            sorted[i]
        }
    };
    Ok(BoxStats {
        min: sorted[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: *sorted.last().unwrap(),
    })
}

/// Box-and-whisker chart with one box per named group. Whiskers span the full
/// sample range.
pub fn box_plot_png(
    path: impl AsRef<Path>,
    title: &str,
    groups: &[(String, Vec<f64>)],
) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::Config("box plot with no groups".into()));
    }
    let stats: Vec<BoxStats> = groups
        .iter()
        .map(|(name, v)| {
            box_stats(v).map_err(|e| Error::Config(format!("group {name}: {e}")))
        })
        .collect::<Result<_>>()?;
    let (vmin, vmax) = value_range(groups.iter().flat_map(|(_, v)| v.iter().copied()))?;

    let slot = 96i64;
    let width = (80 + slot * groups.len() as i64 + 16) as usize;
    let mut canvas = Canvas::new(width, 360, WHITE);
    let ax = Axes { x0: 64, y0: 28, w: slot * groups.len() as i64 + 16, h: 280, vmin, vmax };
    ax.draw_value_axis(&mut canvas);
    canvas.text(ax.x0, 10, title, BLACK);

    for (gi, ((name, _), st)) in groups.iter().zip(&stats).enumerate() {
        let color = SERIES_COLORS[gi % SERIES_COLORS.len()];
        let cx = ax.x0 + 8 + slot * gi as i64 + slot / 2;
        let half = 18i64;
        let (y_min, y_max) = (ax.y_px(st.min), ax.y_px(st.max));
        let (y_q1, y_q3) = (ax.y_px(st.q1), ax.y_px(st.q3));
        let y_med = ax.y_px(st.median);
        canvas.line(cx, y_max, cx, y_q3, AXIS);
        canvas.line(cx, y_q1, cx, y_min, AXIS);
        canvas.line(cx - half / 2, y_max, cx + half / 2, y_max, AXIS);
        canvas.line(cx - half / 2, y_min, cx + half / 2, y_min, AXIS);
        canvas.rect_outline(cx - half, y_q3, 2 * half + 1, y_q1 - y_q3 + 1, color);
        canvas.line(cx - half, y_med, cx + half, y_med, color);
        canvas.line(cx - half, y_med + 1, cx + half, y_med + 1, color);
        canvas.text(cx - text_width(name) / 2, ax.y0 + ax.h + 10, name, BLACK);
    }
    canvas.save_png(path)
}

fn is_contour(mask: &Mask2D, r: usize, c: usize) -> bool {
    if !mask.get(r, c) {
        return false;
    }
    let (h, w) = mask.shape();
    r == 0
        || c == 0
        || r == h - 1
        || c == w - 1
        || !mask.get(r - 1, c)
        || !mask.get(r + 1, c)
        || !mask.get(r, c - 1)
        || !mask.get(r, c + 1)
}

fn draw_contours(canvas: &mut Canvas, x: i64, y: i64, mask: &Mask2D, color: Rgb) {
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if is_contour(mask, r, c) {
                canvas.set(x + c as i64, y + r as i64, color);
            }
        }
    }
}

/// Three-panel comparison: fixed image, warped moving image, and a blend with
/// fixed in magenta and warped in green. Label contours are drawn over the
/// warped and blend panels in the series palette order.
pub fn overlay_png(
    path: impl AsRef<Path>,
    fixed: &Image2D,
    warped: &Image2D,
    labels: &BTreeMap<String, Mask2D>,
) -> Result<()> {
    if fixed.shape() != warped.shape() {
        return Err(Error::ShapeMismatch(format!(
            "overlay panels {:?} vs {:?}",
            fixed.shape(),
            warped.shape()
        )));
    }
    for (name, mask) in labels {
        if mask.shape() != fixed.shape() {
            return Err(Error::ShapeMismatch(format!(
                "overlay label {name} {:?} vs {:?}",
                mask.shape(),
                fixed.shape()
            )));
        }
    }
    let (h, w) = fixed.shape();
    let gutter = 4i64;
    let caption = 14i64;
    let mut canvas = Canvas::new(3 * w + 2 * gutter as usize, h + caption as usize, WHITE);

    canvas.blit_gray(0, 0, fixed);
    let x1 = w as i64 + gutter;
    canvas.blit_gray(x1, 0, warped);
    let x2 = 2 * (w as i64 + gutter);
    for r in 0..h {
        for c in 0..w {
            let f = fixed.at(r, c).clamp(0.0, 255.0).round() as u8;
            let m = warped.at(r, c).clamp(0.0, 255.0).round() as u8;
            canvas.set(x2 + c as i64, r as i64, [f, m, f]);
        }
    }
    for (li, mask) in labels.values().enumerate() {
        let color = SERIES_COLORS[li % SERIES_COLORS.len()];
        draw_contours(&mut canvas, x1, 0, mask, color);
        draw_contours(&mut canvas, x2, 0, mask, color);
    }
    let cy = h as i64 + 3;
    for (x, label) in [(0, "fixed"), (x1, "warped"), (x2, "blend")] {
        canvas.text(x + w as i64 / 2 - text_width(label) / 2, cy, label, BLACK);
    }
    canvas.save_png(path)
}

/// Deformed-grid snapshot with the probed minimum Jacobian determinant
/// stamped under the raster.
pub fn grid_figure_png(path: impl AsRef<Path>, grid: &DeformedGrid) -> Result<()> {
    let (h, w) = grid.image.shape();
    let strip = 14i64;
    let mut canvas = Canvas::new(w, h + strip as usize, WHITE);
    canvas.blit_gray(0, 0, &grid.image);
    let label = format!("min jacobian det {}", fmt_tick(grid.min_jacobian_det));
    canvas.text(2, h as i64 + 3, &label, BLACK);
    canvas.save_png(path)
}

/// 5x7 glyph rows, low 5 bits used, row 0 on top. Unknown characters map to
/// a blank cell.
fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        'a' => [0b00000, 0b00000, 0b01110, 0b00001, 0b01111, 0b10001, 0b01111],
        'b' => [0b10000, 0b10000, 0b10110, 0b11001, 0b10001, 0b10001, 0b11110],
        'c' => [0b00000, 0b00000, 0b01110, 0b10000, 0b10000, 0b10001, 0b01110],
        'd' => [0b00001, 0b00001, 0b01101, 0b10011, 0b10001, 0b10001, 0b01111],
        'e' => [0b00000, 0b00000, 0b01110, 0b10001, 0b11111, 0b10000, 0b01110],
        'f' => [0b00110, 0b01001, 0b01000, 0b11100, 0b01000, 0b01000, 0b01000],
        'g' => [0b00000, 0b01111, 0b10001, 0b10001, 0b01111, 0b00001, 0b01110],
        'h' => [0b10000, 0b10000, 0b10110, 0b11001, 0b10001, 0b10001, 0b10001],
        'i' => [0b00100, 0b00000, 0b01100, 0b00100, 0b00100, 0b00100, 0b01110],
        'j' => [0b00010, 0b00000, 0b00110, 0b00010, 0b00010, 0b10010, 0b01100],
        'k' => [0b10000, 0b10000, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010],
        'l' => [0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'm' => [0b00000, 0b00000, 0b11010, 0b10101, 0b10101, 0b10101, 0b10101],
        'n' => [0b00000, 0b00000, 0b10110, 0b11001, 0b10001, 0b10001, 0b10001],
        'o' => [0b00000, 0b00000, 0b01110, 0b10001, 0b10001, 0b10001, 0b01110],
        'p' => [0b00000, 0b00000, 0b11110, 0b10001, 0b11110, 0b10000, 0b10000],
        'q' => [0b00000, 0b00000, 0b01111, 0b10001, 0b01111, 0b00001, 0b00001],
        'r' => [0b00000, 0b00000, 0b10110, 0b11001, 0b10000, 0b10000, 0b10000],
        's' => [0b00000, 0b00000, 0b01111, 0b10000, 0b01110, 0b00001, 0b11110],
        't' => [0b01000, 0b01000, 0b11100, 0b01000, 0b01000, 0b01001, 0b00110],
        'u' => [0b00000, 0b00000, 0b10001, 0b10001, 0b10001, 0b10011, 0b01101],
        'v' => [0b00000, 0b00000, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'w' => [0b00000, 0b00000, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
        'x' => [0b00000, 0b00000, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001],
        'y' => [0b00000, 0b00000, 0b10001, 0b10001, 0b01111, 0b00001, 0b01110],
        'z' => [0b00000, 0b00000, 0b11111, 0b00010, 0b00100, 0b01000, 0b11111],
        '.' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b01100],
        ',' => [0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b00100, 0b01000],
        '-' => [0b00000, 0b00000, 0b00000, 0b01110, 0b00000, 0b00000, 0b00000],
        '+' => [0b00000, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0b00000],
        ':' => [0b00000, 0b01100, 0b01100, 0b00000, 0b01100, 0b01100, 0b00000],
        '/' => [0b00001, 0b00010, 0b00010, 0b00100, 0b01000, 0b01000, 0b10000],
        '%' => [0b11001, 0b11010, 0b00010, 0b00100, 0b01000, 0b01011, 0b10011],
        '(' => [0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010],
        ')' => [0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000],
        '=' => [0b00000, 0b00000, 0b11111, 0b00000, 0b11111, 0b00000, 0b00000],
        _ => [0; 7],
    }
}
