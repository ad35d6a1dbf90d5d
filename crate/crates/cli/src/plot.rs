//! PNG rendering of prediction panels and IoU curves.

use std::path::Path;

use anyhow::Result;
use image::{GrayImage, Luma, Rgb, RgbImage};

const GAP: u32 = 2;

/// Rows of `[L, H, W]` stacks in `[0, 1]`, one tile per lead time.
pub fn panel(rows: &[&[f32]], leads: usize, size: usize, path: &Path) -> Result<()> {
    let s = size as u32;
    let w = leads as u32 * (s + GAP) - GAP;
    let h = rows.len() as u32 * (s + GAP) - GAP;
    let mut img = GrayImage::from_pixel(w, h, Luma([128]));
    for (r, data) in rows.iter().enumerate() {
        for l in 0..leads {
            let (ox, oy) = (l as u32 * (s + GAP), r as u32 * (s + GAP));
            for y in 0..size {
                for x in 0..size {
                    let v = data[(l * size + y) * size + x].clamp(0.0, 1.0);
                    img.put_pixel(ox + x as u32, oy + y as u32, Luma([(v * 255.0).round() as u8]));
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

const WIDTH: u32 = 640;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 30;

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for i in 0..=n {
        let x = x0 + (x1 - x0) * i / n;
        let y = y0 + (y1 - y0) * i / n;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// IoU (0..1 on the y axis) against lead index, one colored curve per series.
pub fn curves(series: &[(&[f64], [u8; 3])], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (x0, x1) = (MARGIN as i64, (WIDTH - MARGIN) as i64);
    let (ytop, ybot) = (MARGIN as i64, (HEIGHT - MARGIN) as i64);
    for q in 0..=4 {
        let y = ybot - (ybot - ytop) * q / 4;
        line(&mut img, (x0, y), (x1, y), Rgb([225, 225, 225]));
    }
    line(&mut img, (x0, ybot), (x1, ybot), Rgb([0, 0, 0]));
    line(&mut img, (x0, ytop), (x0, ybot), Rgb([0, 0, 0]));
    for (values, color) in series {
        let n = values.len().max(2) as i64 - 1;
        let pt = |i: usize| {
            let v = values[i].clamp(0.0, 1.0);
            (x0 + (x1 - x0) * i as i64 / n, ybot - ((ybot - ytop) as f64 * v).round() as i64)
        };
        for i in 1..values.len() {
            line(&mut img, pt(i - 1), pt(i), Rgb(*color));
        }
    }
    img.save(path)?;
    Ok(())
}
