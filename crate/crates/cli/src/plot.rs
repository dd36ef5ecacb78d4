//! Static PNG charts and overlays drawn straight into pixel buffers.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use diffinspect::{Error, Result};

pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [0, 0, 0],
];

/// 3x5 bitmap glyphs, one row string per line, `#` set.
fn glyph(c: char) -> Option<[&'static str; 5]> {
    Some(match c.to_ascii_uppercase() {
        '0' => ["###", "#.#", "#.#", "#.#", "###"],
        '1' => [".#.", "##.", ".#.", ".#.", "###"],
        '2' => ["###", "..#", "###", "#..", "###"],
        '3' => ["###", "..#", ".##", "..#", "###"],
        '4' => ["#.#", "#.#", "###", "..#", "..#"],
        '5' => ["###", "#..", "###", "..#", "###"],
        '6' => ["###", "#..", "###", "#.#", "###"],
        '7' => ["###", "..#", ".#.", ".#.", ".#."],
        '8' => ["###", "#.#", "###", "#.#", "###"],
        '9' => ["###", "#.#", "###", "..#", "###"],
        'A' => [".#.", "#.#", "###", "#.#", "#.#"],
        'B' => ["##.", "#.#", "##.", "#.#", "##."],
        'C' => [".##", "#..", "#..", "#..", ".##"],
        'D' => ["##.", "#.#", "#.#", "#.#", "##."],
        'E' => ["###", "#..", "##.", "#..", "###"],
        'F' => ["###", "#..", "##.", "#..", "#.."],
        'G' => [".##", "#..", "#.#", "#.#", ".##"],
        'H' => ["#.#", "#.#", "###", "#.#", "#.#"],
        'I' => ["###", ".#.", ".#.", ".#.", "###"],
        'J' => ["..#", "..#", "..#", "#.#", ".#."],
        'K' => ["#.#", "#.#", "##.", "#.#", "#.#"],
        'L' => ["#..", "#..", "#..", "#..", "###"],
        'M' => ["#.#", "###", "###", "#.#", "#.#"],
        'N' => ["##.", "#.#", "#.#", "#.#", "#.#"],
        'O' => [".#.", "#.#", "#.#", "#.#", ".#."],
        'P' => ["##.", "#.#", "##.", "#..", "#.."],
        'Q' => [".#.", "#.#", "#.#", "##.", ".##"],
        'R' => ["##.", "#.#", "##.", "#.#", "#.#"],
        'S' => [".##", "#..", ".#.", "..#", "##."],
        'T' => ["###", ".#.", ".#.", ".#.", ".#."],
        'U' => ["#.#", "#.#", "#.#", "#.#", "###"],
        'V' => ["#.#", "#.#", "#.#", "#.#", ".#."],
        'W' => ["#.#", "#.#", "###", "###", "#.#"],
        'X' => ["#.#", "#.#", ".#.", "#.#", "#.#"],
        'Y' => ["#.#", "#.#", ".#.", ".#.", ".#."],
        'Z' => ["###", "..#", ".#.", "#..", "###"],
        '.' => ["...", "...", "...", "...", ".#."],
        ':' => ["...", ".#.", "...", ".#.", "..."],
        '-' => ["...", "...", "###", "...", "..."],
        '/' => ["..#", "..#", ".#.", "#..", "#.."],
        '_' => ["...", "...", "...", "...", "###"],
        ' ' => ["...", "...", "...", "...", "..."],
        _ => return None,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

/// Draws `text` with its top-left corner at `(x, y)`; each glyph pixel becomes a `scale`-sized square.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: i64, c: [u8; 3]) {
    for (i, ch) in text.chars().enumerate() {
        let Some(rows) = glyph(ch).or_else(|| glyph(' ')) else {
            continue;
        };
        let ox = x + i as i64 * 4 * scale;
        for (r, row) in rows.iter().enumerate() {
            for (col, b) in row.bytes().enumerate() {
                if b == b'#' {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            put(img, ox + col as i64 * scale + dx, y + r as i64 * scale + dy, c);
                        }
                    }
                }
            }
        }
    }
}

pub fn text_width(text: &str, scale: i64) -> i64 {
    text.chars().count() as i64 * 4 * scale
}

/// Bresenham segment, `thick` pixels wide.
pub fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), thick: i64, c: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for ox in 0..thick {
            for oy in 0..thick {
                put(img, x + ox - thick / 2, y + oy - thick / 2, c);
            }
        }
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

pub fn draw_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
    draw_line(img, (x0, y0), (x1, y0), 1, c);
    draw_line(img, (x1, y0), (x1, y1), 1, c);
    draw_line(img, (x1, y1), (x0, y1), 1, c);
    draw_line(img, (x0, y1), (x0, y0), 1, c);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// One panel: a title, axis labels and any number of series sharing the axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Panels stacked vertically; the JSON twin of the image carries the same data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub panels: Vec<Panel>,
}

const W: u32 = 640;
const PANEL_H: u32 = 360;
const MARGIN_L: i64 = 70;
const MARGIN_R: i64 = 170;
const MARGIN_T: i64 = 30;
const MARGIN_B: i64 = 40;

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.05;
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn render_panel(img: &mut RgbImage, top: i64, p: &Panel) {
    let (x_lo, x_hi) = span(p.series.iter().flat_map(|s| s.points.iter().map(|q| q.0)));
    let (y_lo, y_hi) = span(p.series.iter().flat_map(|s| s.points.iter().map(|q| q.1)));
    let (left, right) = (MARGIN_L, W as i64 - MARGIN_R);
    let (ptop, bottom) = (top + MARGIN_T, top + PANEL_H as i64 - MARGIN_B);
    let px = |x: f64| left + ((x - x_lo) / (x_hi - x_lo) * (right - left) as f64).round() as i64;
    let py = |y: f64| bottom - ((y - y_lo) / (y_hi - y_lo) * (bottom - ptop) as f64).round() as i64;
    let black = [0, 0, 0];
    let grey = [200, 200, 200];

    draw_text(img, left, top + 8, &p.title, 2, black);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let y = y_lo + f * (y_hi - y_lo);
        let yy = py(y);
        draw_line(img, (left, yy), (right, yy), 1, grey);
        let label = fmt_tick(y);
        draw_text(img, left - 6 - text_width(&label, 1), yy - 2, &label, 1, black);
        let x = x_lo + f * (x_hi - x_lo);
        let xx = px(x);
        let label = fmt_tick(x);
        draw_text(img, xx - text_width(&label, 1) / 2, bottom + 6, &label, 1, black);
    }
    draw_line(img, (left, bottom), (right, bottom), 1, black);
    draw_line(img, (left, ptop), (left, bottom), 1, black);
    draw_text(
        img,
        (left + right) / 2 - text_width(&p.x_label, 1) / 2,
        bottom + 18,
        &p.x_label,
        1,
        black,
    );
    draw_text(img, 4, ptop - 12, &p.y_label, 1, black);

    for (i, s) in p.series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|q| q.0.is_finite() && q.1.is_finite())
            .map(|&(x, y)| (px(x), py(y)))
            .collect();
        for w in pts.windows(2) {
            draw_line(img, w[0], w[1], 2, c);
        }
        for &(x, y) in &pts {
            for dx in -2..=2 {
                for dy in -2..=2 {
                    put(img, x + dx, y + dy, c);
                }
            }
        }
        let ly = ptop + 4 + i as i64 * 14;
        for dx in 0..12 {
            for dy in 0..5 {
                put(img, right + 12 + dx, ly + dy, c);
            }
        }
        draw_text(img, right + 28, ly, &s.name, 1, black);
    }
}

impl Chart {
    pub fn render(&self) -> RgbImage {
        let h = PANEL_H * self.panels.len().max(1) as u32;
        let mut img = RgbImage::from_pixel(W, h, Rgb([255, 255, 255]));
        for (i, p) in self.panels.iter().enumerate() {
            render_panel(&mut img, i as i64 * PANEL_H as i64, p);
        }
        img
    }

    /// Writes `path` (PNG) and its JSON twin next to it; returns the twin's path.
    pub fn save(&self, path: &Path) -> Result<std::path::PathBuf> {
        save_png(&self.render(), path)?;
        let json_path = path.with_extension("json");
        let text = serde_json::to_string_pretty(self).expect("chart serializes");
        std::fs::write(&json_path, text).map_err(|e| crate::config::io(&json_path, e))?;
        Ok(json_path)
    }
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| crate::config::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}
