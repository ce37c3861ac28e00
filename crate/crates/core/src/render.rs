//! Spectrogram images: a viridis-like colormap, a labeled dB colorbar, and
//! grid montages.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::frontend::LogMelSpectrogram;

const VIRIDIS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

/// Color for `v ∈ [0, 1]` (clamped); luminance increases with `v`.
pub fn colormap(v: f64) -> Rgb<u8> {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let pos = v * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let w = pos - i as f64;
    let mix = |c: usize| (VIRIDIS[i][c] as f64 * (1.0 - w) + VIRIDIS[i + 1][c] as f64 * w).round() as u8;
    Rgb([mix(0), mix(1), mix(2)])
}

/// One cell per (frame, bin), scaled up by `px`; the highest bin is the top row.
pub fn render_spectrogram(s: &LogMelSpectrogram, lo: f64, hi: f64, px: u32) -> RgbImage {
    let (f, t) = (s.bins() as u32, s.frames() as u32);
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(t * px, f * px, |x, y| {
        let bin = (f - 1 - y / px) as usize;
        colormap((s.get(bin, (x / px) as usize) - lo) / span)
    })
}

// 3×5 glyphs for colorbar labels
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '-' => [0, 0, 7, 0, 0],
        'd' => [1, 1, 7, 5, 7],
        'B' => [6, 5, 6, 5, 6],
        ' ' => [0; 5],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, color: Rgb<u8>) {
    let mut x = x0;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..3 {
                    if row & (4 >> dx) != 0 {
                        let (px, py) = (x + dx, y0 + dy as u32);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, color);
                        }
                    }
                }
            }
        }
        x += 4;
    }
}

/// Spectrogram with a vertical colorbar labeled with `hi` and `lo` in dB.
pub fn render_with_colorbar(s: &LogMelSpectrogram, lo: f64, hi: f64, px: u32) -> RgbImage {
    let body = render_spectrogram(s, lo, hi, px);
    let labels = [format!("{} dB", hi.round() as i64), format!("{} dB", lo.round() as i64)];
    let label_w = labels.iter().map(|l| l.len() as u32 * 4).max().unwrap_or(0);
    let (bar_x, bar_w, pad) = (body.width() + 4, 6u32, 8u32);
    let h = body.height().max(40) + 2 * pad;
    let w = bar_x + bar_w + 3 + label_w + 2;
    let white = Rgb([255, 255, 255]);
    let mut img = RgbImage::from_pixel(w, h, white);
    image::imageops::replace(&mut img, &body, 0, pad as i64);
    let bar_h = h - 2 * pad;
    for y in 0..bar_h {
        let c = colormap(1.0 - y as f64 / (bar_h - 1).max(1) as f64);
        for x in 0..bar_w {
            img.put_pixel(bar_x + x, pad + y, c);
        }
    }
    let black = Rgb([0, 0, 0]);
    draw_text(&mut img, bar_x + bar_w + 3, pad, &labels[0], black);
    draw_text(&mut img, bar_x + bar_w + 3, pad + bar_h - 5, &labels[1], black);
    img
}

/// Cells laid out row by row with a 2-pixel gap; `highlight[r]` frames the
/// chosen cell of row `r` in red.
pub fn montage(cells: &[Vec<RgbImage>], highlight: Option<&[usize]>) -> RgbImage {
    let cw = cells.iter().flatten().map(|c| c.width()).max().unwrap_or(1);
    let ch = cells.iter().flatten().map(|c| c.height()).max().unwrap_or(1);
    let cols = cells.iter().map(Vec::len).max().unwrap_or(1) as u32;
    let gap = 2;
    let mut img = RgbImage::from_pixel(
        cols * (cw + gap) + gap,
        cells.len() as u32 * (ch + gap) + gap,
        Rgb([255, 255, 255]),
    );
    for (r, row) in cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let (x, y) = (gap + c as u32 * (cw + gap), gap + r as u32 * (ch + gap));
            image::imageops::replace(&mut img, cell, x as i64, y as i64);
            if highlight.is_some_and(|h| h.get(r) == Some(&c)) {
                let red = Rgb([220, 30, 30]);
                for i in 0..cell.width() {
                    img.put_pixel(x + i, y, red);
                    img.put_pixel(x + i, y + cell.height() - 1, red);
                }
                for j in 0..cell.height() {
                    img.put_pixel(x, y + j, red);
                    img.put_pixel(x + cell.width() - 1, y + j, red);
                }
            }
        }
    }
    img
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}
