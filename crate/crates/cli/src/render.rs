//! Overlay and loss-curve rasterization.

use image::{Rgb, RgbImage};

const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [0, 128, 128],
    [170, 110, 40],
    [128, 0, 0],
    [0, 0, 128],
];

/// Stable colour for a class key (FNV-1a over the lower-cased name), so the
/// same class gets the same colour in every picture.
pub fn class_color(key: &str) -> Rgb<u8> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.to_lowercase().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Rgb(PALETTE[(h % PALETTE.len() as u64) as usize])
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Filled disc with a one-pixel white rim so dots stay visible on any stain.
pub fn dot(img: &mut RgbImage, u: f64, v: f64, radius: f64, c: Rgb<u8>) {
    let r = radius.ceil() as i64 + 1;
    let (cu, cv) = (u.round() as i64, v.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            let d = ((dx * dx + dy * dy) as f64).sqrt();
            if d <= radius {
                put(img, cu + dx, cv + dy, c);
            } else if d <= radius + 1.0 {
                put(img, cu + dx, cv + dy, Rgb([255, 255, 255]));
            }
        }
    }
}

pub fn overlay(base: &RgbImage, points: &[(f64, f64, Rgb<u8>)], radius: f64) -> RgbImage {
    let mut img = base.clone();
    for &(u, v, c) in points {
        dot(&mut img, u, v, radius, c);
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
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

/// Plots each series on a shared log10 y axis. Series are (x, y) with y > 0;
/// non-positive values are skipped.
pub fn curve_plot(series: &[(&[(f64, f64)], Rgb<u8>)], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 30i64;
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (margin, margin), (margin, margin + h), axis);
    line(&mut img, (margin, margin + h), (margin + w, margin + h), axis);

    let pts = series.iter().flat_map(|(s, _)| s.iter()).filter(|p| p.1 > 0.0);
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y.log10());
        y_hi = y_hi.max(y.log10());
    }
    if !x_lo.is_finite() {
        return img;
    }
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let (xs, ys) = (span(x_lo, x_hi), span(y_lo, y_hi));
    // light grid line at every power of ten
    let mut decade = y_lo.floor();
    while decade <= y_hi {
        if decade >= y_lo {
            let py = margin + h - ((decade - y_lo) / ys * h as f64).round() as i64;
            line(&mut img, (margin + 1, py), (margin + w, py), Rgb([220, 220, 220]));
        }
        decade += 1.0;
    }
    for (s, c) in series {
        let mut prev = None;
        for &(x, y) in s.iter().filter(|p| p.1 > 0.0) {
            let px = margin + ((x - x_lo) / xs * w as f64).round() as i64;
            let py = margin + h - ((y.log10() - y_lo) / ys * h as f64).round() as i64;
            if let Some(p) = prev {
                line(&mut img, p, (px, py), *c);
            }
            prev = Some((px, py));
        }
    }
    img
}
