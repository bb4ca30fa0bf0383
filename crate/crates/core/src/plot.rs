//! Self-contained PNG rendering for diagnostics and training curves.
//!
//! Charts are drawn pixel by pixel into RGB buffers: bar histograms, line
//! curves, and raw image dumps. Tick labels use a built-in 3x5 glyph set so
//! the output has no font dependency; anything richer than a quick visual
//! readout belongs in the JSON sidecars that accompany every plot.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canvas size shared by every chart.
const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
/// Margins around the plotting area (left, right, top, bottom). The left
/// and bottom margins leave room for tick labels.
const MARGIN_L: u32 = 56;
const MARGIN_R: u32 = 16;
const MARGIN_T: u32 = 16;
const MARGIN_B: u32 = 36;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);

/// Binned values over a fixed range. `counts[i]` covers
/// `[lo + i*w, lo + (i+1)*w)` with `w = (hi - lo) / counts.len()`; values at
/// exactly `hi` fall into the last bin so the range is fully closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Bin `values` into `bins` equal-width buckets over `range`. Values
    /// outside the range are clamped into the end bins so every input is
    /// counted exactly once.
    pub fn build(values: &[f64], bins: usize, range: (f64, f64)) -> Histogram {
        let (lo, hi) = range;
        let bins = bins.max(1);
        let mut counts = vec![0u64; bins];
        let width = (hi - lo).max(f64::MIN_POSITIVE);
        for &v in values {
            let raw = ((v - lo) / width * bins as f64).floor();
            let bin = (raw.max(0.0) as usize).min(bins - 1);
            counts[bin] += 1;
        }
        Histogram { lo, hi, counts }
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Common (min, max) across several value series, padded so single-point
/// or empty data still yields a usable non-degenerate range.
pub fn shared_range<'a>(series: impl Iterator<Item = &'a [f64]>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for &v in s {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn save(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

/// Write an arbitrary RGB buffer (used for heatmap overlays).
pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    save(path, img)
}

/// Render a bar histogram. The y axis is counts from zero; x ticks mark the
/// range endpoints and midpoint.
pub fn save_histogram(path: &Path, hist: &Histogram, color: [u8; 3]) -> Result<()> {
    let mut img = blank();
    let (x0, y0, x1, y1) = plot_area();
    let max_count = hist.counts.iter().copied().max().unwrap_or(0).max(1);
    let n = hist.counts.len() as u32;
    for (i, &c) in hist.counts.iter().enumerate() {
        let bx0 = x0 + (i as u32 * (x1 - x0)) / n;
        let bx1 = x0 + ((i as u32 + 1) * (x1 - x0)) / n;
        let h = ((c as f64 / max_count as f64) * (y1 - y0) as f64).round() as u32;
        for x in bx0..bx1.saturating_sub(1).max(bx0 + 1) {
            for y in (y1 - h)..y1 {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
    draw_axes(&mut img);
    draw_x_ticks(&mut img, hist.lo, hist.hi);
    draw_y_ticks(&mut img, 0.0, max_count as f64);
    save(path, &img)
}

/// Render a polyline of (x, y) samples; used for loss curves. Points are
/// connected in input order.
pub fn save_curve(path: &Path, xs: &[f64], ys: &[f64], color: [u8; 3]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!(
            "curve needs matching coordinate lengths, got {} x and {} y",
            xs.len(),
            ys.len()
        )));
    }
    let mut img = blank();
    let (x0, y0, x1, y1) = plot_area();
    let (xlo, xhi) = shared_range(std::iter::once(xs));
    let (ylo, yhi) = shared_range(std::iter::once(ys));
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = x0 as f64 + (x - xlo) / (xhi - xlo) * (x1 - x0) as f64;
        let py = y1 as f64 - (y - ylo) / (yhi - ylo) * (y1 - y0) as f64;
        (px.round() as i64, py.round() as i64)
    };
    let pts: Vec<(i64, i64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(&x, &y)| to_px(x, y))
        .collect();
    for w in pts.windows(2) {
        draw_line(&mut img, w[0], w[1], Rgb(color));
    }
    draw_axes(&mut img);
    draw_x_ticks(&mut img, xlo, xhi);
    draw_y_ticks(&mut img, ylo, yhi);
    save(path, &img)
}

fn blank() -> RgbImage {
    RgbImage::from_pixel(WIDTH, HEIGHT, BG)
}

fn plot_area() -> (u32, u32, u32, u32) {
    (MARGIN_L, MARGIN_T, WIDTH - MARGIN_R, HEIGHT - MARGIN_B)
}

fn draw_axes(img: &mut RgbImage) {
    let (x0, y0, x1, y1) = plot_area();
    for x in x0..=x1 {
        img.put_pixel(x, y1, AXIS);
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, AXIS);
    }
}

fn draw_x_ticks(img: &mut RgbImage, lo: f64, hi: f64) {
    let (x0, _, x1, y1) = plot_area();
    for (frac, v) in [(0.0, lo), (0.5, 0.5 * (lo + hi)), (1.0, hi)] {
        let x = x0 + ((x1 - x0) as f64 * frac).round() as u32;
        for dy in 1..=4 {
            img.put_pixel(x, y1 + dy, AXIS);
        }
        let label = fmt_tick(v);
        let w = text_width(&label);
        draw_text(img, x.saturating_sub(w / 2) as i64, (y1 + 8) as i64, &label);
    }
}

fn draw_y_ticks(img: &mut RgbImage, lo: f64, hi: f64) {
    let (x0, y0, _, y1) = plot_area();
    for (frac, v) in [(0.0, lo), (0.5, 0.5 * (lo + hi)), (1.0, hi)] {
        let y = y1 - ((y1 - y0) as f64 * frac).round() as u32;
        for dx in 1..=4 {
            img.put_pixel(x0 - dx, y, AXIS);
        }
        let label = fmt_tick(v);
        let w = text_width(&label);
        draw_text(
            img,
            x0 as i64 - 6 - w as i64,
            y as i64 - 3,
            &label,
        );
    }
}

/// Short numeric label: fixed-point for moderate magnitudes, scientific
/// for the rest, integers without a fraction.
pub fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if !(0.01..10000.0).contains(&a) {
        return format!("{v:.1e}");
    }
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    // Bresenham over the clipped plot area.
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == b.0 && y == b.1 {
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

/// 3x5 glyphs for the characters tick labels can contain. Each entry is
/// five rows of three bits, most significant bit leftmost.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        _ => return None,
    })
}

const GLYPH_STEP: u32 = 4;

fn text_width(s: &str) -> u32 {
    s.chars().count() as u32 * GLYPH_STEP
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, s: &str) {
    let mut cx = x;
    for c in s.chars() {
        if let Some(rows) = glyph(c) {
            for (ry, row) in rows.iter().enumerate() {
                for rx in 0..3 {
                    if row & (0b100 >> rx) != 0 {
                        let px = cx + rx as i64;
                        let py = y + ry as i64;
                        if (0..WIDTH as i64).contains(&px) && (0..HEIGHT as i64).contains(&py) {
                            img.put_pixel(px as u32, py as u32, AXIS);
                        }
                    }
                }
            }
        }
        cx += GLYPH_STEP as i64;
    }
}
