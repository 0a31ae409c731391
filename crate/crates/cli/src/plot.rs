//! Small raster plots (line chart, bar chart, heat map) written as PNG.
//!
//! Text uses a built-in 3x5 pixel font, so rendering needs no system fonts
//! and is identical on every machine.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::CliError;

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GRID: Rgb = [220, 220, 220];
pub const PALETTE: [Rgb; 6] = [
    [0, 0, 0],
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
];

const SCALE: usize = 2;
const GLYPH_W: usize = 3 * SCALE + SCALE;

fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
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
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        '.' => [0, 0, 0, 0, 2],
        ',' => [0, 0, 0, 2, 4],
        '-' => [0, 0, 7, 0, 0],
        '_' => [0, 0, 0, 0, 7],
        '+' => [0, 2, 7, 2, 0],
        '=' => [0, 7, 0, 7, 0],
        ':' => [0, 2, 0, 2, 0],
        '/' => [1, 1, 2, 4, 4],
        '(' => [1, 2, 2, 2, 1],
        ')' => [4, 2, 2, 2, 4],
        '%' => [5, 1, 2, 4, 5],
        _ => [0; 5],
    }
}

pub fn text_width(s: &str) -> usize {
    s.chars().count() * GLYPH_W
}

pub struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: WHITE.repeat(width * height),
        }
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.pixels[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0.min(y1)..y0.max(y1) {
            for x in x0.min(x1)..x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    /// Bresenham line, `thick` pixels wide.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb, thick: i64) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.fill_rect(x, y, x + thick, y + thick, c);
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

    pub fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb) {
        for (k, ch) in s.chars().enumerate() {
            let ox = x + (k * GLYPH_W) as i64;
            for (row, bits) in glyph(ch).iter().enumerate() {
                for col in 0..3 {
                    if bits & (4 >> col) != 0 {
                        let px = ox + (col * SCALE) as i64;
                        let py = y + (row * SCALE) as i64;
                        self.fill_rect(px, py, px + SCALE as i64, py + SCALE as i64, c);
                    }
                }
            }
        }
    }

    /// Writes an 8-bit RGB PNG; `text` goes into tEXt chunks.
    pub fn save(&self, path: &Path, text: &[(&str, &str)]) -> Result<(), CliError> {
        let fail = |e: &dyn std::fmt::Display| CliError::runtime(format!("cannot write {}: {e}", path.display()));
        let file = File::create(path).map_err(|e| fail(&e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v.to_string()).map_err(|e| fail(&e))?;
        }
        let mut w = enc.write_header().map_err(|e| fail(&e))?;
        w.write_image_data(&self.pixels).map_err(|e| fail(&e))?;
        w.finish().map_err(|e| fail(&e))
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

struct Frame {
    left: i64,
    top: i64,
    right: i64,
    bottom: i64,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn y(&self, v: f64) -> i64 {
        let t = if self.hi > self.lo { (v - self.lo) / (self.hi - self.lo) } else { 0.5 };
        self.bottom - (t.clamp(0.0, 1.0) * (self.bottom - self.top) as f64).round() as i64
    }

    fn draw_axes(&self, c: &mut Canvas) {
        for k in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * k as f64 / 4.0;
            let y = self.y(v);
            c.line((self.left, y), (self.right, y), GRID, 1);
            let label = fmt_tick(v);
            c.text(self.left - 6 - text_width(&label) as i64, y - 5, &label, BLACK);
        }
        c.line((self.left, self.top), (self.left, self.bottom), BLACK, 1);
        c.line((self.left, self.bottom), (self.right, self.bottom), BLACK, 1);
    }
}

/// One line per series over a shared x axis (step index).
pub fn line_chart(title: &str, series: &[(&str, &[f64])]) -> Canvas {
    let (w, h) = (800, 480);
    let mut c = Canvas::new(w, h);
    let values = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo.min(0.0), hi.max(lo + 1e-9)) } else { (0.0, 1.0) };
    let f = Frame {
        left: 90,
        top: 50,
        right: w as i64 - 20,
        bottom: h as i64 - 50,
        lo,
        hi,
    };
    c.text(f.left, 16, title, BLACK);
    f.draw_axes(&mut c);
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let x = |i: usize| {
        if n <= 1 {
            f.left
        } else {
            f.left + (i as i64 * (f.right - f.left)) / (n as i64 - 1)
        }
    };
    for (k, (name, v)) in series.iter().enumerate() {
        let col = PALETTE[k % PALETTE.len()];
        for i in 1..v.len() {
            if v[i - 1].is_finite() && v[i].is_finite() {
                c.line((x(i - 1), f.y(v[i - 1])), (x(i), f.y(v[i])), col, 2);
            }
        }
        let lx = f.left + 10 + (k as i64) * 120;
        c.fill_rect(lx, h as i64 - 28, lx + 16, h as i64 - 22, col);
        c.text(lx + 22, h as i64 - 30, name, BLACK);
    }
    let steps = format!("{n} STEPS");
    c.text(f.right - text_width(&steps) as i64, h as i64 - 30, &steps, BLACK);
    c
}

/// Vertical bars on a fixed `[0, max]` scale; `None` values draw as a gap
/// marked `X`.
pub fn bar_chart(title: &str, bars: &[(String, Option<f64>)], max: f64) -> Canvas {
    let slot = 90usize;
    let w = (120 + slot * bars.len()).max(400);
    let h = 420;
    let mut c = Canvas::new(w, h);
    let f = Frame {
        left: 70,
        top: 50,
        right: w as i64 - 20,
        bottom: h as i64 - 80,
        lo: 0.0,
        hi: max,
    };
    c.text(f.left, 16, title, BLACK);
    f.draw_axes(&mut c);
    for (k, (label, v)) in bars.iter().enumerate() {
        let x0 = f.left + 10 + (k * slot) as i64;
        let x1 = x0 + slot as i64 - 20;
        match v {
            Some(v) => {
                c.fill_rect(x0, f.y(*v), x1, f.bottom, PALETTE[1]);
                let s = fmt_tick(*v);
                c.text(x0, f.y(*v) - 14, &s, BLACK);
            }
            None => c.text(x0 + 20, f.bottom - 14, "X", PALETTE[2]),
        }
        // Long labels wrap onto a second line.
        let per_line = (slot - 4) / GLYPH_W;
        let chars: Vec<char> = label.chars().collect();
        for (line, chunk) in chars.chunks(per_line.max(1)).take(3).enumerate() {
            let s: String = chunk.iter().collect();
            c.text(x0 - 6, f.bottom + 8 + (line as i64) * 14, &s, BLACK);
        }
    }
    c
}

fn ramp(t: f64) -> Rgb {
    // Dark blue through teal to yellow.
    let stops: [(f64, Rgb); 3] = [(0.0, [49, 54, 149]), (0.5, [53, 183, 121]), (1.0, [253, 231, 37])];
    let t = t.clamp(0.0, 1.0);
    let (a, b) = if t <= 0.5 { (stops[0], stops[1]) } else { (stops[1], stops[2]) };
    let u = (t - a.0) / (b.0 - a.0);
    let mix = |i: usize| (a.1[i] as f64 + u * (b.1[i] as f64 - a.1[i] as f64)).round() as u8;
    [mix(0), mix(1), mix(2)]
}

/// Grid of cells colored by value in `[0, max]`; `None` cells are gray.
pub fn heatmap(title: &str, rows: &[String], cols: &[String], cells: &[Vec<Option<f64>>], max: f64) -> Canvas {
    let cell = 90usize;
    let label_w = rows.iter().map(|r| text_width(r)).max().unwrap_or(0).max(60) + 20;
    let w = label_w + cell * cols.len() + 20;
    let h = 70 + cell * rows.len() + 20;
    let mut c = Canvas::new(w.max(300), h);
    c.text(10, 12, title, BLACK);
    for (j, name) in cols.iter().enumerate() {
        let x = (label_w + j * cell) as i64;
        let short: String = name.chars().take((cell - 4) / GLYPH_W).collect();
        c.text(x + 4, 44, &short, BLACK);
    }
    for (i, name) in rows.iter().enumerate() {
        let y = (70 + i * cell) as i64;
        c.text(10, y + cell as i64 / 2 - 5, name, BLACK);
        for (j, v) in cells[i].iter().enumerate() {
            let x = (label_w + j * cell) as i64;
            let (fill, s) = match v {
                Some(v) => (ramp(v / max), fmt_tick(*v)),
                None => ([180, 180, 180], "N/A".to_string()),
            };
            c.fill_rect(x + 1, y + 1, x + cell as i64 - 1, y + cell as i64 - 1, fill);
            let ink = if v.is_some_and(|v| v / max > 0.6) { BLACK } else { WHITE };
            c.text(
                x + (cell as i64 - text_width(&s) as i64) / 2,
                y + cell as i64 / 2 - 5,
                &s,
                ink,
            );
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_draws_inside_canvas() {
        let mut c = Canvas::new(40, 20);
        c.text(1, 1, "A1", BLACK);
        c.text(100, 100, "off", BLACK);
        assert!(c.pixels.chunks(3).any(|p| p == BLACK));
    }

    #[test]
    fn line_chart_handles_empty_and_flat_series() {
        let flat = [1.0, 1.0, 1.0];
        line_chart("x", &[]);
        line_chart("x", &[("a", &flat), ("b", &[])]);
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), [49, 54, 149]);
        assert_eq!(ramp(1.0), [253, 231, 37]);
    }
}
