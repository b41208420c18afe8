//! Static chart rendering for score reports and stage logs.
//!
//! Everything is drawn directly into an RGB image: axes with tick labels,
//! polyline series, grouped bars, and a small legend, using the built-in
//! 5x7 font. Output is deterministic for fixed inputs.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

use crate::font::{glyph, GLYPH_H, GLYPH_W};

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

pub struct Chart {
    img: RgbImage,
    // plot area in pixels
    left: u32,
    top: u32,
    right: u32,
    bottom: u32,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Chart {
    pub fn new(width: u32, height: u32, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
        let (left, top, right, bottom) = (56, 28, width - 14, height - 34);
        // frame
        for x in left..=right {
            img.put_pixel(x, bottom, Rgb([0, 0, 0]));
            img.put_pixel(x, top, Rgb([200, 200, 200]));
        }
        for y in top..=bottom {
            img.put_pixel(left, y, Rgb([0, 0, 0]));
            img.put_pixel(right, y, Rgb([200, 200, 200]));
        }
        Self { img, left, top, right, bottom, x_range, y_range }
    }

    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        let fx = if (x1 - x0).abs() < 1e-12 { 0.5 } else { (x - x0) / (x1 - x0) };
        let fy = if (y1 - y0).abs() < 1e-12 { 0.5 } else { (y - y0) / (y1 - y0) };
        let px = self.left as f64 + fx * (self.right - self.left) as f64;
        let py = self.bottom as f64 - fy * (self.bottom - self.top) as f64;
        (px.round() as i64, py.round() as i64)
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    pub fn text(&mut self, x: i64, y: i64, s: &str, color: [u8; 3]) {
        let mut cx = x;
        for c in s.chars() {
            let rows = glyph(c);
            for (ry, row) in rows.iter().enumerate() {
                for bit in 0..GLYPH_W {
                    if row & (1 << (GLYPH_W - 1 - bit)) != 0 {
                        self.put(cx + bit as i64, y + ry as i64, color);
                    }
                }
            }
            cx += GLYPH_W as i64 + 1;
        }
    }

    pub fn line_px(&mut self, mut x0: i64, mut y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, color);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], color: [u8; 3]) {
        for w in points.windows(2) {
            let (x0, y0) = self.to_px(w[0].0, w[0].1);
            let (x1, y1) = self.to_px(w[1].0, w[1].1);
            self.line_px(x0, y0, x1, y1, color);
            // thicken slightly for visibility
            self.line_px(x0, y0 + 1, x1, y1 + 1, color);
        }
        for &(x, y) in points {
            let (px, py) = self.to_px(x, y);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    self.put(px + dx, py + dy, color);
                }
            }
        }
    }

    pub fn bar(&mut self, x_center: f64, width_frac: f64, value: f64, color: [u8; 3]) {
        let (x0, _) = self.to_px(x_center - width_frac / 2.0, 0.0);
        let (x1, _) = self.to_px(x_center + width_frac / 2.0, 0.0);
        let (_, y_top) = self.to_px(x_center, value);
        let (_, y_base) = self.to_px(x_center, self.y_range.0.max(0.0));
        for x in x0..=x1 {
            for y in y_top.min(y_base)..=y_base.max(y_top) {
                self.put(x, y, color);
            }
        }
    }

    pub fn x_ticks(&mut self, ticks: &[(f64, String)]) {
        for (value, label) in ticks {
            let (px, _) = self.to_px(*value, 0.0);
            let by = self.bottom as i64;
            self.line_px(px, by, px, by + 3, [0, 0, 0]);
            let w = (label.len() * (GLYPH_W + 1)) as i64;
            self.text(px - w / 2, by + 6, label, [0, 0, 0]);
        }
    }

    pub fn y_ticks(&mut self, n: usize, fmt_decimals: usize) {
        let (y0, y1) = self.y_range;
        for i in 0..=n {
            let v = y0 + (y1 - y0) * i as f64 / n as f64;
            let (_, py) = self.to_px(self.x_range.0, v);
            self.line_px(self.left as i64 - 3, py, self.left as i64, py, [0, 0, 0]);
            let label = format!("{v:.fmt_decimals$}");
            let w = (label.len() * (GLYPH_W + 1)) as i64;
            self.text(self.left as i64 - 5 - w, py - (GLYPH_H as i64) / 2, &label, [0, 0, 0]);
            if i > 0 && i < n {
                for x in (self.left + 1..self.right).step_by(3) {
                    self.put(x as i64, py, [230, 230, 230]);
                }
            }
        }
    }

    pub fn title(&mut self, s: &str) {
        self.text(self.left as i64, 8, s, [0, 0, 0]);
    }

    pub fn legend(&mut self, entries: &[(String, [u8; 3])]) {
        let mut y = self.top as i64 + 6;
        let x = self.left as i64 + 8;
        for (label, color) in entries {
            for dx in 0..12 {
                self.put(x + dx, y + 3, *color);
                self.put(x + dx, y + 4, *color);
            }
            self.text(x + 16, y, label, [0, 0, 0]);
            y += GLYPH_H as i64 + 4;
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        self.img
            .save(path)
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// A labeled report loaded for plotting.
pub struct LabeledReport {
    pub label: String,
    pub report: syncast_core::metrics::ScoreReport,
}

/// Per-lead-time curves of one metric for several reports.
pub fn lead_time_chart(
    reports: &[LabeledReport],
    metric: &str,
    out: &Path,
) -> Result<()> {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut max_lead = 1.0_f64;
    let mut max_y = 0.0_f64;
    for lr in reports {
        let Some(per_lead) = &lr.report.per_lead_time else { continue };
        let pts: Vec<(f64, f64)> = per_lead
            .iter()
            .filter_map(|l| {
                let v = match metric {
                    "csi" => l.csi_m,
                    "far" => l.far_m,
                    _ => None,
                };
                v.map(|v| (l.lead as f64 + 1.0, v))
            })
            .collect();
        for &(x, y) in &pts {
            max_lead = max_lead.max(x);
            max_y = max_y.max(y);
        }
        series.push((lr.label.clone(), pts));
    }
    let y_top = (max_y * 1.15).clamp(0.1, 1.0);
    let mut chart = Chart::new(640, 420, (1.0, max_lead.max(2.0)), (0.0, y_top));
    chart.title(&format!("{} BY LEAD TIME", metric.to_ascii_uppercase()));
    chart.y_ticks(5, 2);
    let ticks: Vec<(f64, String)> = (1..=max_lead as usize).map(|k| (k as f64, k.to_string())).collect();
    chart.x_ticks(&ticks);
    let mut legend = Vec::new();
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart.polyline(pts, color);
        legend.push((label.clone(), color));
    }
    chart.legend(&legend);
    chart.save(out)
}

/// Grouped bars comparing aggregate CSI-M and FAR-M across reports.
pub fn comparison_chart(reports: &[LabeledReport], out: &Path) -> Result<()> {
    let n = reports.len().max(1);
    let mut chart = Chart::new(640, 420, (0.0, n as f64), (0.0, 1.0));
    chart.title("CSI-M AND FAR-M BY POLICY");
    chart.y_ticks(5, 2);
    let mut ticks = Vec::new();
    for (i, lr) in reports.iter().enumerate() {
        let x = i as f64 + 0.5;
        if let Some(v) = lr.report.csi_m {
            chart.bar(x - 0.17, 0.28, v, PALETTE[0]);
        }
        if let Some(v) = lr.report.far_m {
            chart.bar(x + 0.17, 0.28, v, PALETTE[1]);
        }
        ticks.push((x, lr.label.clone()));
    }
    chart.x_ticks(&ticks);
    chart.legend(&[("CSI-M".to_string(), PALETTE[0]), ("FAR-M".to_string(), PALETTE[1])]);
    chart.save(out)
}

/// Loss and implicit-accuracy curves from one or more stage logs.
pub fn stage_log_chart(logs: &[(String, Vec<syncast_core::align::StageLogRecord>)], out: &Path) -> Result<()> {
    let mut max_step = 1.0_f64;
    let mut max_loss = 0.0_f64;
    for (_, records) in logs {
        for r in records {
            max_step = max_step.max(r.step as f64 + 1.0);
            max_loss = max_loss.max(r.total);
        }
    }
    let mut chart = Chart::new(640, 420, (0.0, max_step), (0.0, (max_loss * 1.2).max(1.0)));
    chart.title("ALIGNMENT LOSS (LINES) AND ACCURACY (DOTS)");
    chart.y_ticks(5, 2);
    let n_ticks = 6.min(max_step as usize);
    let ticks: Vec<(f64, String)> = (0..=n_ticks)
        .map(|i| {
            let v = (max_step * i as f64 / n_ticks as f64).round();
            (v, format!("{v:.0}"))
        })
        .collect();
    chart.x_ticks(&ticks);
    let mut legend = Vec::new();
    for (i, (label, records)) in logs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.step as f64 + 1.0, r.total)).collect();
        chart.polyline(&pts, color);
        // implicit accuracy on the same [0,1]-ish scale, drawn as dots
        for r in records {
            let (px, py) = chart.to_px(r.step as f64 + 1.0, r.implicit_accuracy);
            chart.put(px, py, color);
            chart.put(px + 1, py, color);
        }
        legend.push((label.clone(), color));
    }
    chart.legend(&legend);
    chart.save(out)
}

/// Renders one sampled sequence as a horizontal frame strip (grayscale).
pub fn frame_strip(frames: &ndarray::Array4<f64>, out: &Path) -> Result<()> {
    let (_, t, h, w) = frames.dim();
    let gap = 2u32;
    let img_w = (t as u32) * (w as u32 + gap);
    let mut img = RgbImage::from_pixel(img_w, h as u32, Rgb([255, 255, 255]));
    for k in 0..t {
        for y in 0..h {
            for x in 0..w {
                let v = (frames[[0, k, y, x]].clamp(0.0, 1.0) * 255.0) as u8;
                // invert so heavy rain is dark
                let p = 255 - v;
                img.put_pixel(k as u32 * (w as u32 + gap) + x as u32, y as u32, Rgb([p, p, p]));
            }
        }
    }
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    img.save(out).with_context(|| format!("writing {}", out.display()))
}
