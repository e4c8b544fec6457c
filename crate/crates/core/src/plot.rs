//! PNG renderings of the report figures. Every figure also has a CSV twin
//! written by its producing module; the images carry no text.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::stats::{Histogram, PlaneScan, UncertaintyHistograms};

/// Pixels between panels.
const GAP: u32 = 2;
/// Screen pixels per image pixel in grids.
const ZOOM: u32 = 3;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const HIT_COLOR: Rgb<u8> = Rgb([31, 119, 180]);
const MISS_COLOR: Rgb<u8> = Rgb([214, 39, 40]);

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Blue for negative, white at zero, red for positive; `v` on `[−1, 1]`.
pub fn diverging(v: f64) -> Rgb<u8> {
    let v = v.clamp(-1.0, 1.0);
    let fade = byte(1.0 - v.abs());
    if v >= 0.0 {
        Rgb([255, fade, fade])
    } else {
        Rgb([fade, fade, 255])
    }
}

/// Dark to light through blue and yellow; `v` on `[0, 1]`.
pub fn sequential(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    Rgb([byte(1.5 * v - 0.5), byte(0.2 + 0.75 * v), byte(0.5 + 0.6 * v - 0.9 * v * v)])
}

fn channel_first(row: &[f64], shape: ImageShape, y: usize, x: usize, c: usize) -> f64 {
    row[c * shape.height * shape.width + y * shape.width + x]
}

fn draw_image(img: &mut RgbImage, row: &[f64], shape: ImageShape, ox: u32, oy: u32, signed: bool) {
    for y in 0..shape.height {
        for x in 0..shape.width {
            let color = if signed {
                let mean = (0..shape.channels)
                    .map(|c| channel_first(row, shape, y, x, c))
                    .sum::<f64>()
                    / shape.channels as f64;
                diverging(mean)
            } else if shape.channels == 3 {
                Rgb([0, 1, 2].map(|c| byte(channel_first(row, shape, y, x, c))))
            } else {
                let g = byte(channel_first(row, shape, y, x, 0));
                Rgb([g, g, g])
            };
            for dy in 0..ZOOM {
                for dx in 0..ZOOM {
                    img.put_pixel(ox + x as u32 * ZOOM + dx, oy + y as u32 * ZOOM + dy, color);
                }
            }
        }
    }
}

/// Pixel size of an `rows × 3` panel grid.
pub fn triptych_size(rows: usize, shape: ImageShape) -> (u32, u32) {
    let (pw, ph) = (shape.width as u32 * ZOOM, shape.height as u32 * ZOOM);
    (3 * pw + 4 * GAP, rows as u32 * ph + (rows as u32 + 1) * GAP)
}

/// One row per entry: two images in `[0, 1]` and a signed difference on a
/// fixed `[−1, 1]` diverging scale.
pub fn triptych_grid(rows: &[[Vec<f64>; 3]], shape: ImageShape, path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyGroup("no rows to draw".into()));
    }
    let (w, h) = triptych_size(rows.len(), shape);
    let mut img = RgbImage::from_pixel(w, h, BACKGROUND);
    let (pw, ph) = (shape.width as u32 * ZOOM, shape.height as u32 * ZOOM);
    for (r, panels) in rows.iter().enumerate() {
        for (p, data) in panels.iter().enumerate() {
            if data.len() != shape.len() {
                return Err(Error::shape(shape.len(), data.len()));
            }
            let ox = GAP + p as u32 * (pw + GAP);
            let oy = GAP + r as u32 * (ph + GAP);
            draw_image(&mut img, data, shape, ox, oy, p == 2);
        }
    }
    save(&img, path)
}

/// Plain image grid, `cols` per row.
pub fn image_grid(images: &[Vec<f64>], shape: ImageShape, cols: usize, path: &Path) -> Result<()> {
    if images.is_empty() || cols == 0 {
        return Err(Error::EmptyGroup("no images to draw".into()));
    }
    let rows = images.len().div_ceil(cols);
    let (pw, ph) = (shape.width as u32 * ZOOM, shape.height as u32 * ZOOM);
    let w = cols as u32 * (pw + GAP) + GAP;
    let h = rows as u32 * (ph + GAP) + GAP;
    let mut img = RgbImage::from_pixel(w, h, BACKGROUND);
    for (k, data) in images.iter().enumerate() {
        let (r, c) = ((k / cols) as u32, (k % cols) as u32);
        draw_image(&mut img, data, shape, GAP + c * (pw + GAP), GAP + r * (ph + GAP), false);
    }
    save(&img, path)
}

const HIST_W: u32 = 240;
const HIST_H: u32 = 160;

fn draw_overlay(img: &mut RgbImage, ox: u32, pair: &[Histogram; 2]) {
    // Normalized to densities so groups of different sizes compare.
    let dens: Vec<Vec<f64>> = pair
        .iter()
        .map(|h| {
            let total = h.counts.iter().sum::<usize>().max(1) as f64;
            h.counts.iter().map(|&c| c as f64 / total).collect()
        })
        .collect();
    let peak = dens.iter().flatten().fold(0.0f64, |m, &v| m.max(v)).max(1e-12);
    let bins = pair[0].counts.len().max(1) as u32;
    let bw = HIST_W / bins;
    for (g, color) in [(0, HIT_COLOR), (1, MISS_COLOR)] {
        for (b, &d) in dens[g].iter().enumerate() {
            let height = ((d / peak) * (HIST_H - 4) as f64).round() as u32;
            // Hit bars fill the left half of each bin, miss bars the right half.
            let x0 = ox + b as u32 * bw + g as u32 * (bw / 2);
            for x in x0..x0 + (bw / 2).max(1) {
                for y in (HIST_H - height)..HIST_H {
                    img.put_pixel(x, y + GAP, color);
                }
            }
        }
    }
}

/// Side-by-side panels: max-probability and entropy, hit in blue, miss in red.
pub fn histogram_figure(h: &UncertaintyHistograms, path: &Path) -> Result<()> {
    let w = 2 * HIST_W + 3 * GAP;
    let mut img = RgbImage::from_pixel(w, HIST_H + 2 * GAP, BACKGROUND);
    draw_overlay(&mut img, GAP, &h.max_prob);
    draw_overlay(&mut img, 2 * GAP + HIST_W, &h.entropy);
    save(&img, path)
}

/// Plane-scan heatmap of classifier max probability, with lattice cells the
/// prober calls *miss* darkened. Row `i` of the scan is drawn bottom-up.
pub fn plane_figure(scan: &PlaneScan, path: &Path) -> Result<()> {
    let n = scan.grid_n as u32;
    let cell = (480 / n.max(1)).max(1);
    let mut img = RgbImage::from_pixel(n * cell, n * cell, BACKGROUND);
    for i in 0..scan.grid_n {
        for j in 0..scan.grid_n {
            let p = scan.at(i, j);
            let mut c = sequential(p.max_prob);
            if !p.verdict.is_hit() {
                c = Rgb(c.0.map(|v| v / 2));
            }
            let (x0, y0) = (i as u32 * cell, (n - 1 - j as u32) * cell);
            for dx in 0..cell {
                for dy in 0..cell {
                    img.put_pixel(x0 + dx, y0 + dy, c);
                }
            }
        }
    }
    save(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diverging_endpoints() {
        assert_eq!(diverging(0.0), Rgb([255, 255, 255]));
        assert_eq!(diverging(1.0), Rgb([255, 0, 0]));
        assert_eq!(diverging(-1.0), Rgb([0, 0, 255]));
        assert_eq!(diverging(7.0), diverging(1.0));
    }

    #[test]
    fn triptych_layout() {
        let shape = ImageShape::new(4, 5, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let rows = vec![[vec![0.5; 20], vec![0.2; 20], vec![-0.3; 20]]; 3];
        triptych_grid(&rows, shape, &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), triptych_size(3, shape));
        assert_eq!(triptych_size(3, shape), (3 * 15 + 8, 3 * 12 + 8));
    }
}
