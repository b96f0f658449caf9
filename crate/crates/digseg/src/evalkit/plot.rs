//! Minimal PNG line charts for the ablation harness. Hand-rolled on top of
//! the image crate (no font stack dependency): 5x7 bitmap glyphs, axes with
//! ticks, one polyline per series and a legend.

use image::{Rgb, RgbImage};

use crate::error::Result;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const SERIES_COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_lowercase() {
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x06, 0x06],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x06, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00],
        '/' => [0x01, 0x02, 0x04, 0x04, 0x04, 0x08, 0x10],
        ':' => [0x00, 0x06, 0x06, 0x00, 0x06, 0x06, 0x00],
        '%' => [0x19, 0x1a, 0x02, 0x04, 0x08, 0x0b, 0x13],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        'a' => [0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'b' => [0x1e, 0x11, 0x11, 0x1e, 0x11, 0x11, 0x1e],
        'c' => [0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e],
        'd' => [0x1e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1e],
        'e' => [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x1f],
        'f' => [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x10],
        'g' => [0x0e, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0f],
        'h' => [0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'i' => [0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e],
        'j' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0c],
        'k' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'l' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1f],
        'm' => [0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11],
        'n' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'o' => [0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'p' => [0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10],
        'q' => [0x0e, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0d],
        'r' => [0x1e, 0x11, 0x11, 0x1e, 0x14, 0x12, 0x11],
        's' => [0x0f, 0x10, 0x10, 0x0e, 0x01, 0x01, 0x1e],
        't' => [0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'u' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'v' => [0x11, 0x11, 0x11, 0x11, 0x0a, 0x0a, 0x04],
        'w' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1b, 0x11],
        'x' => [0x11, 0x11, 0x0a, 0x04, 0x0a, 0x11, 0x11],
        'y' => [0x11, 0x11, 0x0a, 0x04, 0x04, 0x04, 0x04],
        'z' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1f],
        _ => [0x00; 7],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let g = glyph(ch);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) != 0 {
                    let (px, py) = (cx + col as i64, y + row as i64);
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height()
                    {
                        img.put_pixel(px as u32, py as u32, Rgb(color));
                    }
                }
            }
        }
        cx += 6;
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        for (dx, dy) in [(0i64, 0i64), (0, 1), (1, 0)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, Rgb(color));
            }
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(0.001..10_000.0).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Render a line chart with one polyline per series.
pub fn line_chart(
    path: &std::path::Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    let (w, h) = (720u32, 480u32);
    let (ml, mr, mt, mb) = (70.0, 20.0, 30.0, 50.0);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (mut y0, mut y1) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    // A little headroom on y.
    let pad = (y1 - y0) * 0.08;
    y0 -= pad;
    y1 += pad;

    let plot_w = w as f64 - ml - mr;
    let plot_h = h as f64 - mt - mb;
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (
            ml + (x - x0) / (x1 - x0) * plot_w,
            (h as f64 - mb) - (y - y0) / (y1 - y0) * plot_h,
        )
    };

    let black = [0u8, 0, 0];
    let gray = [200u8, 200, 200];
    // Axes box and ticks.
    draw_line(&mut img, (ml, mt), (ml, h as f64 - mb), black);
    draw_line(&mut img, (ml, h as f64 - mb), (w as f64 - mr, h as f64 - mb), black);
    for i in 0..=5 {
        let fx = x0 + (x1 - x0) * i as f64 / 5.0;
        let (px, _) = to_px(fx, y0);
        draw_line(&mut img, (px, h as f64 - mb), (px, mt), gray);
        draw_text(&mut img, px as i64 - 10, (h as f64 - mb) as i64 + 8, &fmt_tick(fx), black);
        let fy = y0 + (y1 - y0) * i as f64 / 5.0;
        let (_, py) = to_px(x0, fy);
        draw_line(&mut img, (ml, py), (w as f64 - mr, py), gray);
        draw_text(&mut img, 8, py as i64 - 3, &fmt_tick(fy), black);
    }
    draw_text(&mut img, (w / 2) as i64 - 3 * title.len() as i64, 10, title, black);
    draw_text(
        &mut img,
        (w / 2) as i64 - 3 * x_label.len() as i64,
        (h - 16) as i64,
        x_label,
        black,
    );
    draw_text(&mut img, 8, (mt as i64) - 12, y_label, black);

    for (si, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for pair in pts.windows(2) {
            draw_line(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), color);
        }
        for p in &pts {
            let (px, py) = to_px(p.0, p.1);
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    if dx * dx + dy * dy <= 4 {
                        let (qx, qy) = (px as i64 + dx, py as i64 + dy);
                        if qx >= 0 && qy >= 0 && (qx as u32) < w && (qy as u32) < h {
                            img.put_pixel(qx as u32, qy as u32, Rgb(color));
                        }
                    }
                }
            }
        }
        // Legend entry.
        let ly = mt as i64 + 14 * si as i64;
        let lx = (w as f64 - mr) as i64 - 150;
        for dx in 0..10 {
            for dy in 0..3 {
                img.put_pixel((lx + dx) as u32, (ly + 3 + dy) as u32, Rgb(color));
            }
        }
        draw_text(&mut img, lx + 14, ly, &s.label, black);
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_a_chart_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.png");
        line_chart(
            &path,
            "miou vs ensemble",
            "ensemble",
            "miou",
            &[
                Series { label: "trailing".into(), points: vec![(1.0, 0.5), (2.0, 0.6), (4.0, 0.62)] },
                Series { label: "leading".into(), points: vec![(1.0, 0.2), (2.0, 0.4), (4.0, 0.5)] },
            ],
        )
        .unwrap();
        let img = image::open(&path).unwrap().into_rgb8();
        assert_eq!(img.dimensions(), (720, 480));
        // Some non-white pixels must exist.
        assert!(img.pixels().any(|p| p.0 != [255, 255, 255]));
    }
}
