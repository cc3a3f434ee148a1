//! Report rendering: PNG plots drawn directly into RGB buffers plus a
//! machine-readable `summary.json`.
//!
//! Files written into the output directory:
//! - `summary.json`: always.
//! - `loss_curves.png`, `aem_by_epoch.png`: when the history has records.
//! - `head_gaze_scatter.png`: when a sample set is given (yaw and pitch panels).
//! - `confusion.png`: when the report carries a confusion matrix.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{SampleSet, Side};
use crate::eval::MetricsReport;
use crate::train::TrainHistory;

pub const SUMMARY_NAME: &str = "summary.json";
pub const LOSS_PLOT: &str = "loss_curves.png";
pub const AEM_PLOT: &str = "aem_by_epoch.png";
pub const SCATTER_PLOT: &str = "head_gaze_scatter.png";
pub const CONFUSION_PLOT: &str = "confusion.png";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, ReportError>;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [Rgb<u8>; 4] = [Rgb([31, 119, 180]), Rgb([214, 39, 40]), Rgb([44, 160, 44]), Rgb([148, 103, 189])];

// 3x5 glyphs, one row per entry, high bit on the left.
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
        '.' => [0, 0, 0, 0, 2],
        'e' => [0, 7, 7, 4, 7],
        _ => return None,
    })
}

/// A plot panel: pixel rectangle plus data ranges.
#[derive(Debug, Clone, Copy)]
struct Panel {
    x0: i64,
    y0: i64,
    w: i64,
    h: i64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Panel {
    fn px(&self, x: f64, y: f64) -> (i64, i64) {
        let fx = (x - self.xr.0) / (self.xr.1 - self.xr.0);
        let fy = (y - self.yr.0) / (self.yr.1 - self.yr.0);
        (self.x0 + (fx * self.w as f64).round() as i64, self.y0 + self.h - (fy * self.h as f64).round() as i64)
    }
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Self {
            img: RgbImage::from_pixel(w, h, WHITE),
        }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, c: Rgb<u8>) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.put(x, y, c);
            }
        }
    }

    fn line(&mut self, a: (i64, i64), b: (i64, i64), c: Rgb<u8>, dashed: bool) {
        let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
        for i in 0..=steps {
            if dashed && (i / 4) % 2 == 1 {
                continue;
            }
            let t = i as f64 / steps as f64;
            let x = a.0 as f64 + t * (b.0 - a.0) as f64;
            let y = a.1 as f64 + t * (b.1 - a.1) as f64;
            self.put(x.round() as i64, y.round() as i64, c);
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb<u8>) {
        for (i, ch) in s.chars().enumerate() {
            if let Some(rows) = glyph(ch) {
                for (dy, bits) in rows.iter().enumerate() {
                    for dx in 0..3 {
                        if bits >> (2 - dx) & 1 == 1 {
                            self.put(x + 4 * i as i64 + dx, y + dy as i64, c);
                        }
                    }
                }
            }
        }
    }

    fn text_width(s: &str) -> i64 {
        4 * s.chars().count() as i64
    }

    fn axes(&mut self, p: &Panel) {
        for (k, t) in ticks(p.xr).into_iter().enumerate() {
            let (x, _) = p.px(t, p.yr.0);
            self.line((x, p.y0), (x, p.y0 + p.h), GRID, false);
            if k % 2 == 0 {
                let s = fmt_tick(t);
                self.text(x - Canvas::text_width(&s) / 2, p.y0 + p.h + 4, &s, BLACK);
            }
        }
        for (k, t) in ticks(p.yr).into_iter().enumerate() {
            let (_, y) = p.px(p.xr.0, t);
            self.line((p.x0, y), (p.x0 + p.w, y), GRID, false);
            if k % 2 == 0 {
                let s = fmt_tick(t);
                self.text(p.x0 - Canvas::text_width(&s) - 3, y - 2, &s, BLACK);
            }
        }
        self.line((p.x0, p.y0), (p.x0, p.y0 + p.h), BLACK, false);
        self.line((p.x0, p.y0 + p.h), (p.x0 + p.w, p.y0 + p.h), BLACK, false);
    }

    fn polyline(&mut self, p: &Panel, pts: &[(f64, f64)], c: Rgb<u8>) {
        for w in pts.windows(2) {
            self.line(p.px(w[0].0, w[0].1), p.px(w[1].0, w[1].1), c, false);
        }
        if let [only] = pts {
            let (x, y) = p.px(only.0, only.1);
            self.rect(x - 1, y - 1, 3, 3, c);
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|e| ReportError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn fmt_tick(t: f64) -> String {
    if t == 0.0 {
        return "0".into();
    }
    let a = t.abs();
    if (1e-2..1e4).contains(&a) {
        let s = format!("{t:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{t:.0e}")
    }
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f < 1.5 {
        1.0
    } else if f < 3.5 {
        2.0
    } else if f < 7.5 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

/// A range on tick boundaries that contains `[lo, hi]`.
pub fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    let (lo, hi) = if hi - lo < 1e-9 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
    let step = nice_step(hi - lo);
    ((lo / step).floor() * step, (hi / step).ceil() * step)
}

fn ticks(r: (f64, f64)) -> Vec<f64> {
    let step = nice_step(r.1 - r.0);
    let first = (r.0 / step).ceil() as i64;
    let last = (r.1 / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn series_range(series: &[Vec<(f64, f64)>]) -> Option<((f64, f64), (f64, f64))> {
    let pts: Vec<&(f64, f64)> = series.iter().flatten().collect();
    if pts.is_empty() {
        return None;
    }
    let fold = |f: fn(&(f64, f64)) -> f64| {
        pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(f(p)), hi.max(f(p))))
    };
    let x = fold(|p| p.0);
    let y = fold(|p| p.1);
    Some((nice_range(x.0, x.1), nice_range(y.0.min(0.0), y.1)))
}

fn curve_plot(series: &[Vec<(f64, f64)>], boundaries: &[usize], path: &Path) -> Result<()> {
    let Some((xr, yr)) = series_range(series) else {
        return Ok(());
    };
    let mut c = Canvas::new(640, 400);
    let p = Panel {
        x0: 60,
        y0: 30,
        w: 550,
        h: 320,
        xr,
        yr,
    };
    c.axes(&p);
    for &b in boundaries {
        let (x, _) = p.px(b as f64, yr.0);
        c.line((x, p.y0), (x, p.y0 + p.h), BLACK, true);
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        c.polyline(&p, s, color);
        // Legend swatch: series order is documented in the summary.
        c.rect(p.x0 + p.w - 60, 8 + 10 * i as i64, 20, 4, color);
    }
    c.save(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterExtent {
    pub head_yaw: (f64, f64),
    pub gaze_yaw: (f64, f64),
    pub head_pitch: (f64, f64),
    pub gaze_pitch: (f64, f64),
}

/// Head (x) against gaze (y) for yaw and pitch, both eyes plotted.
fn scatter_plot(set: &SampleSet, path: &Path) -> Result<Option<ScatterExtent>> {
    if set.is_empty() {
        return Ok(None);
    }
    let mut yaw = Vec::new();
    let mut pitch = Vec::new();
    for s in set.iter() {
        for side in Side::BOTH {
            let g = s.gaze(side);
            yaw.push((s.head.yaw, g.yaw));
            pitch.push((s.head.pitch, g.pitch));
        }
    }
    let range = |v: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| {
        let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(f(p)), hi.max(f(p))));
        nice_range(lo, hi)
    };
    let extent = ScatterExtent {
        head_yaw: range(&yaw, |p| p.0),
        gaze_yaw: range(&yaw, |p| p.1),
        head_pitch: range(&pitch, |p| p.0),
        gaze_pitch: range(&pitch, |p| p.1),
    };
    let mut c = Canvas::new(840, 420);
    let panels = [
        (
            Panel {
                x0: 60,
                y0: 30,
                w: 340,
                h: 340,
                xr: extent.head_yaw,
                yr: extent.gaze_yaw,
            },
            &yaw,
        ),
        (
            Panel {
                x0: 470,
                y0: 30,
                w: 340,
                h: 340,
                xr: extent.head_pitch,
                yr: extent.gaze_pitch,
            },
            &pitch,
        ),
    ];
    for (i, (p, pts)) in panels.iter().enumerate() {
        c.axes(p);
        for &(x, y) in pts.iter() {
            let (px, py) = p.px(x, y);
            c.put(px, py, PALETTE[i]);
        }
    }
    c.save(path)?;
    Ok(Some(extent))
}

fn heat(v: f64) -> Rgb<u8> {
    let t = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    Rgb([lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0)])
}

fn confusion_plot(rows: &[Vec<f64>], zero_support: &[usize], path: &Path) -> Result<()> {
    let k = rows.len() as i64;
    let cell = 40;
    let (x0, y0) = (40, 20);
    let mut c = Canvas::new((x0 + k * cell + 20) as u32, (y0 + k * cell + 30) as u32);
    for (i, row) in rows.iter().enumerate() {
        let missing = zero_support.contains(&(i + 1));
        for (j, &v) in row.iter().enumerate() {
            let (x, y) = (x0 + j as i64 * cell, y0 + i as i64 * cell);
            c.rect(x, y, cell, cell, heat(v));
            if missing {
                c.line((x, y), (x + cell - 1, y + cell - 1), BLACK, false);
            } else {
                let s = format!("{:.2}", v);
                let fg = if v > 0.5 { WHITE } else { BLACK };
                c.text(x + (cell - Canvas::text_width(&s)) / 2, y + cell / 2 - 2, &s, fg);
            }
        }
        let label = (i + 1).to_string();
        c.text(x0 - 12, y0 + i as i64 * cell + cell / 2 - 2, &label, BLACK);
        c.text(x0 + i as i64 * cell + cell / 2 - 2, y0 + k * cell + 6, &label, BLACK);
    }
    c.save(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub epochs: usize,
    pub stages: Vec<String>,
    pub stage_boundaries: Vec<usize>,
    pub final_train_loss: Option<f64>,
    pub final_val_aem: Option<f64>,
    pub best_val_aem: Option<f64>,
    pub baseline_aem: Option<f64>,
    pub warnings: Vec<String>,
    pub seconds: f64,
}

pub const SUMMARY_FORMAT: &str = "headgaze-summary";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub version: u32,
    pub metrics: Option<MetricsReport>,
    pub history: Option<HistorySummary>,
    pub scatter_extent: Option<ScatterExtent>,
    /// Curve series in legend order, per plot file.
    pub legends: Vec<(String, Vec<String>)>,
    pub files: Vec<String>,
}

fn summarize(h: &TrainHistory) -> HistorySummary {
    let last = h.last();
    HistorySummary {
        epochs: h.records.len(),
        stages: h.stages(),
        stage_boundaries: h.stage_boundaries(),
        final_train_loss: last.map(|r| r.train_loss),
        final_val_aem: last.and_then(|r| r.val_aem),
        best_val_aem: h.records.iter().filter_map(|r| r.val_aem).reduce(f64::min),
        baseline_aem: h.baseline_aem,
        warnings: h.warnings.clone(),
        seconds: h.records.iter().map(|r| r.seconds).sum(),
    }
}

fn series(h: &TrainHistory, f: impl Fn(&crate::train::EpochRecord) -> Option<f64>) -> Vec<(f64, f64)> {
    h.records.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect()
}

/// Writes the plots that apply plus `summary.json`; returns the written paths
/// in order. On failure every file written so far is removed.
pub fn render_reports(
    report: Option<&MetricsReport>,
    history: Option<&TrainHistory>,
    set: Option<&SampleSet>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let result = render_into(report, history, set, out_dir, &mut written);
    if result.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
    }
    result.map(|_| written)
}

fn render_into(
    report: Option<&MetricsReport>,
    history: Option<&TrainHistory>,
    set: Option<&SampleSet>,
    out_dir: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| ReportError::Io {
        path: out_dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut legends = Vec::new();
    if let Some(h) = history.filter(|h| !h.records.is_empty()) {
        let bounds = h.stage_boundaries();
        let named: Vec<(&str, Vec<(f64, f64)>)> = vec![
            ("train_loss", series(h, |r| Some(r.train_loss))),
            ("val_gaze_loss", series(h, |r| r.val_gaze_loss)),
            ("val_head_loss", series(h, |r| r.val_head_loss)),
        ];
        let named: Vec<_> = named.into_iter().filter(|(_, s)| !s.is_empty()).collect();
        let p = out_dir.join(LOSS_PLOT);
        curve_plot(&named.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>(), &bounds, &p)?;
        written.push(p);
        legends.push((LOSS_PLOT.to_string(), named.iter().map(|(n, _)| n.to_string()).collect()));

        let named: Vec<(&str, Vec<(f64, f64)>)> = vec![
            ("train_aem", series(h, |r| r.train_aem)),
            ("val_aem", series(h, |r| r.val_aem)),
            ("val_head_aem", series(h, |r| r.val_head_aem)),
            ("val_landmark_px", series(h, |r| r.val_landmark_px)),
        ];
        let named: Vec<_> = named.into_iter().filter(|(_, s)| !s.is_empty()).collect();
        if !named.is_empty() {
            let p = out_dir.join(AEM_PLOT);
            curve_plot(&named.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>(), &bounds, &p)?;
            written.push(p);
            legends.push((AEM_PLOT.to_string(), named.iter().map(|(n, _)| n.to_string()).collect()));
        }
    }
    let mut scatter_extent = None;
    if let Some(s) = set {
        let p = out_dir.join(SCATTER_PLOT);
        scatter_extent = scatter_plot(s, &p)?;
        if scatter_extent.is_some() {
            written.push(p);
        }
    }
    if let Some(c) = report.and_then(|r| r.confusion.as_ref()) {
        let p = out_dir.join(CONFUSION_PLOT);
        confusion_plot(&c.rows, &c.zero_support, &p)?;
        written.push(p);
    }
    let mut files: Vec<String> = written
        .iter()
        .map(|p| p.file_name().expect("joined file name").to_string_lossy().into_owned())
        .collect();
    files.push(SUMMARY_NAME.into());
    let summary = Summary {
        format: SUMMARY_FORMAT.into(),
        version: 1,
        metrics: report.cloned(),
        history: history.map(summarize),
        scatter_extent,
        legends,
        files,
    };
    let p = out_dir.join(SUMMARY_NAME);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&p, text + "\n").map_err(|e| ReportError::Io {
        path: p.clone(),
        message: e.to_string(),
    })?;
    written.push(p);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nice_range_contains_input() {
        for (lo, hi) in [(-61.3, 59.9), (0.0, 1e-3), (3.0, 3.0), (-0.2, 1234.0)] {
            let (a, b) = nice_range(lo, hi);
            assert!(a <= lo && b >= hi, "{lo} {hi} -> {a} {b}");
        }
    }

    #[test]
    fn tick_labels_use_known_glyphs() {
        for t in [0.0, -60.0, 0.25, 1e-5, 12345.0] {
            assert!(fmt_tick(t).chars().all(|c| glyph(c).is_some()), "{}", fmt_tick(t));
        }
    }
}
