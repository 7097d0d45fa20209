//! Raster plots: heatmaps of mels and attention maps, and line charts of
//! intensity curves.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use ndarray::Array2;

const ANCHORS: [[f32; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Perceptually ordered dark-to-bright color for `v` in `[0, 1]`.
pub fn colormap(v: f32) -> Rgb<u8> {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let pos = v * (ANCHORS.len() - 1) as f32;
    let i = (pos.floor() as usize).min(ANCHORS.len() - 2);
    let f = pos - i as f32;
    let mix = |c: usize| (ANCHORS[i][c] * (1.0 - f) + ANCHORS[i + 1][c] * f).round() as u8;
    Rgb([mix(0), mix(1), mix(2)])
}

/// Heatmap of `values` with rows on the x axis and columns on the y axis
/// (column 0 at the bottom), each cell `scale` pixels square.
pub fn heatmap(values: &Array2<f32>, scale: u32) -> RgbImage {
    let (rows, cols) = values.dim();
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f32::INFINITY, f32::min);
    let hi = finite.fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let scale = scale.max(1);
    let mut img = RgbImage::new((rows.max(1) as u32) * scale, (cols.max(1) as u32) * scale);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let r = (x / scale) as usize;
        let c = cols.saturating_sub(1 + (y / scale) as usize);
        if r < rows && c < cols {
            *px = colormap((values[[r, c]] - lo) / span);
        }
    }
    img
}

pub const PALETTE: [Rgb<u8>; 8] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([127, 127, 127]),
];

/// One polyline of a chart.
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: Rgb<u8>,
}

/// Line chart on a white canvas with a frame and horizontal gridlines at
/// every 0.1 of `y_range`. Series colors are the only legend.
pub fn line_chart(series: &[Series], y_range: (f64, f64), width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 24.0f32;
    let (w, h) = (width as f32 - 2.0 * margin, height as f32 - 2.0 * margin);
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let x_lo = xs.clone().fold(f64::INFINITY, f64::min);
    let x_hi = xs.fold(f64::NEG_INFINITY, f64::max);
    let x_span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let y_span = if y_range.1 > y_range.0 { y_range.1 - y_range.0 } else { 1.0 };
    let to_px = |(x, y): (f64, f64)| {
        (
            margin + ((x - x_lo) / x_span) as f32 * w,
            margin + (1.0 - ((y - y_range.0) / y_span).clamp(0.0, 1.0) as f32) * h,
        )
    };
    let grid = Rgb([225, 225, 225]);
    for k in 0..=10 {
        let y = margin + h * k as f32 / 10.0;
        draw_line_segment_mut(&mut img, (margin, y), (margin + w, y), grid);
    }
    draw_hollow_rect_mut(
        &mut img,
        Rect::at(margin as i32, margin as i32).of_size(w.max(1.0) as u32 + 1, h.max(1.0) as u32 + 1),
        Rgb([0, 0, 0]),
    );
    for s in series {
        let pts: Vec<(f32, f32)> = s.points.iter().map(|&p| to_px(p)).collect();
        for pair in pts.windows(2) {
            draw_line_segment_mut(&mut img, pair[0], pair[1], s.color);
        }
        for &(x, y) in &pts {
            draw_filled_circle_mut(&mut img, (x.round() as i32, y.round() as i32), 3, s.color);
        }
    }
    img
}

/// Stacks images vertically with a white gap.
pub fn stack(images: &[RgbImage], gap: u32) -> RgbImage {
    let width = images.iter().map(|i| i.width()).max().unwrap_or(1);
    let height = images.iter().map(|i| i.height()).sum::<u32>() + gap * images.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(width, height.max(1), Rgb([255, 255, 255]));
    let mut y = 0i64;
    for img in images {
        image::imageops::overlay(&mut out, img, 0, y);
        y += (img.height() + gap) as i64;
    }
    out
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
