//! PNG renderings: heatmaps and 1D profile plots.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::grid::Grid;

const INFERNO: [[f64; 3]; 6] = [
    [0.0, 0.0, 4.0],
    [66.0, 10.0, 104.0],
    [147.0, 38.0, 103.0],
    [221.0, 81.0, 58.0],
    [252.0, 165.0, 10.0],
    [252.0, 255.0, 164.0],
];

/// Fully saturated colour for `hue` in `[0, 1)`.
pub fn hue_to_rgb(hue: f64) -> [u8; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Maps `t` in `[0, 1]` onto a perceptually ordered dark-to-bright ramp.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (INFERNO.len() - 1) as f64;
    let i = (pos.floor() as usize).min(INFERNO.len() - 2);
    let f = pos - i as f64;
    let mut out = [0u8; 3];
    for k in 0..3 {
        out[k] = (INFERNO[i][k] * (1.0 - f) + INFERNO[i + 1][k] * f).round() as u8;
    }
    out
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Renders a grid as a min-max normalised heatmap, each cell drawn as a
/// `scale`×`scale` block.
pub fn heatmap_image(grid: &Grid<f64>, scale: u32) -> RgbImage {
    let scale = scale.max(1);
    let (lo, hi) = min_max(grid.iter().copied());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (rows, cols) = grid.dims();
    RgbImage::from_fn(cols as u32 * scale, rows as u32 * scale, |x, y| {
        let v = grid.at((y / scale) as usize, (x / scale) as usize);
        Rgb(colormap((v - lo) / span))
    })
}

pub fn write_heatmap(grid: &Grid<f64>, scale: u32, path: &Path) -> Result<()> {
    heatmap_image(grid, scale).save(path)?;
    Ok(())
}

/// Line plot of a profile with shaded intervals and marked points.
pub struct ProfilePlot<'a> {
    pub values: &'a [f64],
    /// `(position, value)` pairs drawn as square markers.
    pub markers: &'a [(f64, f64)],
    /// `(start, end)` index ranges shaded behind the curve.
    pub intervals: &'a [(f64, f64)],
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 240;
const MARGIN: u32 = 16;

impl ProfilePlot<'_> {
    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
        let n = self.values.len().max(2);
        let (lo, hi) = min_max(self.values.iter().copied());
        let span = if hi > lo { hi - lo } else { 1.0 };
        let inner_w = (PLOT_W - 2 * MARGIN) as f64;
        let inner_h = (PLOT_H - 2 * MARGIN) as f64;
        let to_x = |i: f64| MARGIN as f64 + i / (n - 1) as f64 * inner_w;
        let to_y = |v: f64| {
            let v = if v.is_finite() { v } else { lo };
            MARGIN as f64 + (1.0 - (v - lo) / span) * inner_h
        };

        for &(start, end) in self.intervals {
            let (x0, x1) = (to_x(start).round() as u32, to_x(end).round() as u32);
            for x in x0..=x1.min(PLOT_W - 1) {
                for y in MARGIN..PLOT_H - MARGIN {
                    img.put_pixel(x, y, Rgb([215, 232, 250]));
                }
            }
        }
        // axes
        for x in MARGIN..PLOT_W - MARGIN {
            img.put_pixel(x, PLOT_H - MARGIN, Rgb([0, 0, 0]));
        }
        for y in MARGIN..=PLOT_H - MARGIN {
            img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
        }
        for (i, pair) in self.values.windows(2).enumerate() {
            draw_segment(
                &mut img,
                (to_x(i as f64), to_y(pair[0])),
                (to_x(i as f64 + 1.0), to_y(pair[1])),
                Rgb([31, 90, 180]),
            );
        }
        for &(pos, value) in self.markers {
            let (cx, cy) = (to_x(pos).round() as i64, to_y(value).round() as i64);
            for dy in -2..=2 {
                for dx in -2..=2 {
                    let (x, y) = (cx + dx, cy + dy);
                    if x >= 0 && y >= 0 && (x as u32) < PLOT_W && (y as u32) < PLOT_H {
                        img.put_pixel(x as u32, y as u32, Rgb([200, 30, 30]));
                    }
                }
            }
        }
        img
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.render().save(path)?;
        Ok(())
    }
}

fn draw_segment(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        let (x, y) = (x.round() as i64, y.round() as i64);
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}
