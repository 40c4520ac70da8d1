//! Static PNG rendering: projection-map panels and line charts.

use std::path::Path;

use image::{Rgb, RgbImage};
use octa_vq::volume::ProjectionMap;
use octa_vq::{Error, Result};

const PANEL_SCALE: u32 = 4;
const GAP: u32 = 4;
const CHART_W: u32 = 640;
const CHART_H: u32 = 360;
const MARGIN: u32 = 24;
const COLORS: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// Maps side by side, each min-max normalized for display and upscaled.
pub fn map_panels(maps: &[&ProjectionMap], path: &Path) -> Result<()> {
    let [l, w] = maps
        .first()
        .map(|m| m.dims())
        .ok_or_else(|| Error::Config("no maps to draw".into()))?;
    if maps.iter().any(|m| m.dims() != [l, w]) {
        return Err(Error::Shape("panel maps differ in size".into()));
    }
    let (ph, pw) = (l as u32 * PANEL_SCALE, w as u32 * PANEL_SCALE);
    let n = maps.len() as u32;
    let mut img = RgbImage::from_pixel(n * pw + (n - 1) * GAP, ph, Rgb([255, 255, 255]));
    for (k, m) in maps.iter().enumerate() {
        let vals = m.display_normalized();
        let x0 = k as u32 * (pw + GAP);
        for y in 0..ph {
            for x in 0..pw {
                let v = vals[(y / PANEL_SCALE) as usize * w + (x / PANEL_SCALE) as usize];
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel(x0 + x, y, Rgb([g, g, g]));
            }
        }
    }
    save(&img, path)
}

/// One polyline per series on shared axes. Non-finite points are skipped.
pub fn line_chart(series: &[&[(f64, f64)]], path: &Path) -> Result<()> {
    let pts = || {
        series
            .iter()
            .flat_map(|s| s.iter())
            .filter(|p| p.0.is_finite() && p.1.is_finite())
    };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(Error::Validation("no finite points to plot".into()));
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let mut img = RgbImage::from_pixel(CHART_W, CHART_H, Rgb([255, 255, 255]));
    let (left, right, top, bottom) = (
        MARGIN as f64,
        (CHART_W - MARGIN) as f64,
        MARGIN as f64,
        (CHART_H - MARGIN) as f64,
    );
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (left, bottom), (right, bottom), axis);
    draw_line(&mut img, (left, top), (left, bottom), axis);
    let to_px = |(x, y): (f64, f64)| {
        (
            left + (x - x0) / (x1 - x0) * (right - left),
            bottom - (y - y0) / (y1 - y0) * (bottom - top),
        )
    };
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(COLORS[k % COLORS.len()]);
        let mut prev: Option<(f64, f64)> = None;
        for &p in s.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            let q = to_px(p);
            match prev {
                Some(a) => draw_line(&mut img, a, q, color),
                None => put(&mut img, q.0, q.1, color),
            }
            prev = Some(q);
        }
    }
    save(&img, path)
}

fn put(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), c);
    }
}
