//! Minimal chart rendering for evaluation artifacts: line charts for
//! sweeps and training curves, bar charts for per-condition means and
//! validator scores. Pure rasterisation into an [`ImageTensor`], written
//! as PNG — byte-identical across reruns.

use std::path::Path;

use ndarray::Array3;

use crate::data::save_png;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Color(pub f32, pub f32, pub f32);

pub const BLACK: Color = Color(0.0, 0.0, 0.0);
pub const WHITE: Color = Color(1.0, 1.0, 1.0);
pub const GRID: Color = Color(0.85, 0.85, 0.85);

/// Series colours, in assignment order.
pub const PALETTE: [Color; 6] = [
    Color(0.12, 0.47, 0.71),
    Color(1.00, 0.50, 0.05),
    Color(0.17, 0.63, 0.17),
    Color(0.84, 0.15, 0.16),
    Color(0.58, 0.40, 0.74),
    Color(0.55, 0.34, 0.29),
];

// ---------------------------------------------------------------------------
// 5×7 bitmap font
// ---------------------------------------------------------------------------

/// Glyph rows, top to bottom; bit 4 is the leftmost column. Lowercase
/// maps onto uppercase; unknown characters render as a hollow box.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '/' => [0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ' ' => [0x00; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

pub const GLYPH_W: usize = 6; // 5 px + 1 px spacing
pub const GLYPH_H: usize = 7;

// ---------------------------------------------------------------------------
// Canvas
// ---------------------------------------------------------------------------

/// Raster surface in unit-interval RGB.
pub struct Canvas {
    data: Array3<f32>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Canvas {
        Canvas { data: Array3::from_elem((height, width, 3), 1.0) }
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn set(&mut self, x: i64, y: i64, color: Color) {
        if x < 0 || y < 0 || x as usize >= self.width() || y as usize >= self.height() {
            return;
        }
        let (x, y) = (x as usize, y as usize);
        self.data[[y, x, 0]] = color.0;
        self.data[[y, x, 1]] = color.1;
        self.data[[y, x, 2]] = color.2;
    }

    pub fn hline(&mut self, x0: i64, x1: i64, y: i64, color: Color) {
        for x in x0.min(x1)..=x0.max(x1) {
            self.set(x, y, color);
        }
    }

    pub fn vline(&mut self, x: i64, y0: i64, y1: i64, color: Color) {
        for y in y0.min(y1)..=y0.max(y1) {
            self.set(x, y, color);
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, color: Color) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.set(x, y, color);
            }
        }
    }

    /// Bresenham segment.
    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Color) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, color);
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

    /// A filled marker around a point.
    pub fn marker(&mut self, x: i64, y: i64, color: Color) {
        self.fill_rect(x - 1, y - 1, 3, 3, color);
    }

    pub fn text(&mut self, x: i64, y: i64, s: &str, color: Color) {
        for (i, c) in s.chars().enumerate() {
            let rows = glyph(c);
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..5 {
                    if bits & (1 << (4 - rx)) != 0 {
                        self.set(x + (i * GLYPH_W + rx) as i64, y + ry as i64, color);
                    }
                }
            }
        }
    }

    /// Right-aligned text ending just before `x`.
    pub fn text_right(&mut self, x: i64, y: i64, s: &str, color: Color) {
        self.text(x - (s.chars().count() * GLYPH_W) as i64, y, s, color);
    }

    pub fn text_centered(&mut self, cx: i64, y: i64, s: &str, color: Color) {
        self.text(cx - (s.chars().count() * GLYPH_W) as i64 / 2, y, s, color);
    }

    pub fn into_image(self) -> Result<ImageTensor> {
        ImageTensor::new(self.data)
    }

    pub fn save(self, path: &Path) -> Result<()> {
        save_png(&self.into_image()?, path)
    }
}

// ---------------------------------------------------------------------------
// Axes and layout
// ---------------------------------------------------------------------------

const MARGIN_L: i64 = 64;
const MARGIN_R: i64 = 16;
const MARGIN_T: i64 = 28;
const MARGIN_B: i64 = 52;

fn format_tick(v: f64) -> String {
    let a = v.abs();
    if a >= 1000.0 {
        format!("{v:.0}")
    } else if a >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

/// Pad a data range so flat data still spans something.
fn padded_range(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let span = hi - lo;
    if span <= f64::EPSILON {
        let pad = if lo.abs() > f64::EPSILON { lo.abs() * 0.1 } else { 1.0 };
        (lo - pad, hi + pad)
    } else {
        (lo - span * 0.05, hi + span * 0.05)
    }
}

struct Frame {
    x0: i64,
    y0: i64, // top of the plot area
    w: i64,
    h: i64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> i64 {
        self.x0 + ((x - self.xr.0) / (self.xr.1 - self.xr.0) * self.w as f64).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        self.y0 + self.h
            - ((y - self.yr.0) / (self.yr.1 - self.yr.0) * self.h as f64).round() as i64
    }
}

fn draw_frame(
    c: &mut Canvas,
    title: &str,
    x_label: &str,
    y_label: &str,
    xr: (f64, f64),
    yr: (f64, f64),
    x_ticks: bool,
) -> Frame {
    let f = Frame {
        x0: MARGIN_L,
        y0: MARGIN_T,
        w: c.width() as i64 - MARGIN_L - MARGIN_R,
        h: c.height() as i64 - MARGIN_T - MARGIN_B,
        xr,
        yr,
    };
    let cw = c.width() as i64;
    c.text_centered(cw / 2, 8, title, BLACK);
    c.text_centered(f.x0 + f.w / 2, f.y0 + f.h + 34, x_label, BLACK);
    c.text(4, 8, y_label, BLACK);

    for i in 0..=4 {
        let vy = yr.0 + (yr.1 - yr.0) * i as f64 / 4.0;
        let py = f.py(vy);
        c.hline(f.x0, f.x0 + f.w, py, GRID);
        c.text_right(f.x0 - 4, py - 3, &format_tick(vy), BLACK);
    }
    if x_ticks {
        for i in 0..=4 {
            let vx = xr.0 + (xr.1 - xr.0) * i as f64 / 4.0;
            let px = f.px(vx);
            c.vline(px, f.y0 + f.h, f.y0 + f.h + 3, BLACK);
            c.text_centered(px, f.y0 + f.h + 8, &format_tick(vx), BLACK);
        }
    }
    c.hline(f.x0, f.x0 + f.w, f.y0 + f.h, BLACK);
    c.vline(f.x0, f.y0, f.y0 + f.h, BLACK);
    f
}

fn draw_legend(c: &mut Canvas, frame: &Frame, names: &[&str]) {
    let mut y = frame.y0 + 4;
    for (i, name) in names.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = frame.x0 + frame.w - (name.chars().count() * GLYPH_W) as i64 - 24;
        c.fill_rect(x, y + 1, 12, 5, color);
        c.text(x + 16, y, name, BLACK);
        y += GLYPH_H as i64 + 3;
    }
}

// ---------------------------------------------------------------------------
// Charts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Series {
        Series { name: name.into(), points }
    }
}

/// Multi-series line chart with markers and a legend.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    path: &Path,
) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Parameter("line chart needs at least one point".into()));
    }
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut xlo, mut xhi, mut ylo, mut yhi) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Parameter("non-finite chart point".into()));
        }
        xlo = xlo.min(x);
        xhi = xhi.max(x);
        ylo = ylo.min(y);
        yhi = yhi.max(y);
    }
    let xr = padded_range(xlo, xhi);
    let yr = padded_range(ylo, yhi);

    let mut c = Canvas::new(640, 420);
    let frame = draw_frame(&mut c, title, x_label, y_label, xr, yr, true);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in &s.points {
            let p = (frame.px(x), frame.py(y));
            if let Some(q) = prev {
                c.line(q.0, q.1, p.0, p.1, color);
            }
            c.marker(p.0, p.1, color);
            prev = Some(p);
        }
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    draw_legend(&mut c, &frame, &names);
    c.save(path)
}

/// Simple categorical bar chart.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)], path: &Path) -> Result<()> {
    let series: Vec<(String, Vec<f64>)> =
        vec![("".to_string(), bars.iter().map(|(_, v)| *v).collect())];
    let groups: Vec<String> = bars.iter().map(|(n, _)| n.clone()).collect();
    grouped_bar_chart(title, y_label, &groups, &series, path)
}

/// Grouped bar chart: one cluster per group, one bar per series inside
/// each cluster.
pub fn grouped_bar_chart(
    title: &str,
    y_label: &str,
    groups: &[String],
    series: &[(String, Vec<f64>)],
    path: &Path,
) -> Result<()> {
    if groups.is_empty() || series.is_empty() {
        return Err(Error::Parameter("bar chart needs groups and series".into()));
    }
    for (name, vals) in series {
        if vals.len() != groups.len() {
            return Err(Error::dimension(
                format!("bar series {name:?}"),
                groups.len().to_string(),
                vals.len().to_string(),
            ));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite bar value in {name:?}")));
        }
    }
    let lo = series
        .iter()
        .flat_map(|(_, v)| v.iter())
        .fold(0.0f64, |a, &b| a.min(b));
    let hi = series
        .iter()
        .flat_map(|(_, v)| v.iter())
        .fold(0.0f64, |a, &b| a.max(b));
    let yr = padded_range(lo, hi.max(lo + f64::EPSILON));

    let mut c = Canvas::new(640, 420);
    let frame = draw_frame(&mut c, title, "", y_label, (0.0, groups.len() as f64), yr, false);

    let cluster_w = frame.w as f64 / groups.len() as f64;
    let bar_w = ((cluster_w * 0.8) / series.len() as f64).max(1.0);
    let base = frame.py(0.0f64.clamp(yr.0, yr.1));
    for (gi, group) in groups.iter().enumerate() {
        let left = frame.x0 as f64 + gi as f64 * cluster_w + cluster_w * 0.1;
        for (si, (_, vals)) in series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            let x = (left + si as f64 * bar_w).round() as i64;
            let top = frame.py(vals[gi].clamp(yr.0, yr.1));
            let (y0, y1) = (top.min(base), top.max(base));
            c.fill_rect(x, y0, bar_w.round().max(1.0) as i64 - 1, (y1 - y0).max(1), color);
        }
        let cx = frame.x0 + ((gi as f64 + 0.5) * cluster_w) as i64;
        // Two-row staggering keeps longer labels legible.
        let row = (gi % 2) as i64;
        c.text_centered(cx, frame.y0 + frame.h + 8 + row * (GLYPH_H as i64 + 2), group, BLACK);
    }
    if series.len() > 1 {
        let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
        draw_legend(&mut c, &frame, &names);
    }
    c.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_marks_pixels() {
        let mut c = Canvas::new(100, 20);
        c.text(2, 2, "A1.", BLACK);
        let img = c.into_image().unwrap();
        let dark: usize = img
            .data()
            .indexed_iter()
            .filter(|(_, &v)| v < 0.5)
            .count();
        assert!(dark > 20, "only {dark} dark subpixels");
        // Out-of-bounds drawing is a no-op, not a panic.
        let mut c = Canvas::new(10, 10);
        c.text(-100, -100, "X", BLACK);
        c.set(5000, 5000, BLACK);
    }

    #[test]
    fn line_chart_writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.png");
        let series = vec![
            Series::new("a", vec![(0.0, 1.0), (1.0, 3.0), (2.0, 2.0)]),
            Series::new("b", vec![(0.0, 2.0), (2.0, 0.5)]),
        ];
        line_chart("test chart", "x", "y", &series, &path).unwrap();
        let img = crate::data::load_image(&path, None).unwrap();
        assert_eq!((img.height(), img.width()), (420, 640));

        // Deterministic bytes across reruns.
        let path2 = dir.path().join("chart2.png");
        line_chart("test chart", "x", "y", &series, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        assert!(line_chart("t", "x", "y", &[], &path).is_err());
        assert!(line_chart(
            "t",
            "x",
            "y",
            &[Series::new("bad", vec![(0.0, f64::NAN)])],
            &path
        )
        .is_err());
    }

    #[test]
    fn flat_series_does_not_collapse_the_axis() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.png");
        let series = vec![Series::new("flat", vec![(0.0, 5.0), (1.0, 5.0)])];
        line_chart("flat", "x", "y", &series, &path).unwrap();
        assert!(path.exists());
    }

    #[test]
    fn bar_charts_render_groups() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bars.png");
        let groups: Vec<String> = ["none", "blur", "hybrid"].iter().map(|s| s.to_string()).collect();
        let series = vec![
            ("vaccinated".to_string(), vec![0.9, 0.8, 0.6]),
            ("clean".to_string(), vec![0.3, 0.25, 0.2]),
        ];
        grouped_bar_chart("ssim by condition", "ssim", &groups, &series, &path).unwrap();
        assert!(path.exists());

        bar_chart("accuracy", "acc", &[("mlp".to_string(), 0.95)], &dir.path().join("b2.png"))
            .unwrap();

        // Mismatched series length is rejected.
        let bad = vec![("s".to_string(), vec![1.0])];
        assert!(grouped_bar_chart("t", "y", &groups, &bad, &path).is_err());
    }

    #[test]
    fn tick_format_scales_with_magnitude() {
        assert_eq!(format_tick(0.25), "0.25");
        assert_eq!(format_tick(12.34), "12.3");
        assert_eq!(format_tick(4321.0), "4321");
        assert_eq!(format_tick(-0.5), "-0.50");
    }
}
