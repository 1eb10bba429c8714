//! Merged metrics CSV, curve plots and the per-run output directory.
//!
//! Plots are drawn pixel by pixel with no text, so the PNG bytes depend only
//! on the CSV contents.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::Serialize;

use super::config::ExperimentConfig;
use super::metrics::{read_metrics_csv, write_merged_csv, write_metrics_csv, MetricsRecord};
use super::train::{train_with, EvalData, TrainData, TrainHooks, TrainOutcome};
use crate::error::{Error, Result};

const PANEL_W: u32 = 360;
const PANEL_H: u32 = 220;
const MARGIN: u32 = 16;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

/// Files written by [`report`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportFiles {
    pub metrics_csv: PathBuf,
    pub loss_plot: PathBuf,
    pub divergence_plot: PathBuf,
}

struct Series {
    color: Rgb<u8>,
    points: Vec<(f64, f64)>,
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for (ox, oy) in [(0, 0), (0, 1)] {
            let (px, py) = (x + ox, y + oy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, c);
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

/// Draws one panel with its top-left corner at `(ox, oy)`. Axes are
/// auto-ranged over every finite point; four horizontal grid lines.
fn draw_panel(img: &mut RgbImage, ox: u32, oy: u32, series: &[Series]) {
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (x0, x1, y0, y1) = pts().fold((f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY), |a, p| {
        (a.0.min(p.0), a.1.max(p.0), a.2.min(p.1), a.3.max(p.1))
    });
    let (left, top) = (ox + MARGIN, oy + MARGIN);
    let (w, h) = (PANEL_W - 2 * MARGIN, PANEL_H - 2 * MARGIN);
    for k in 0..=4 {
        let y = top + h * k / 4;
        for x in left..=left + w {
            img.put_pixel(x, y, GRID);
        }
    }
    for y in top..=top + h {
        img.put_pixel(left, y, AXIS);
    }
    for x in left..=left + w {
        img.put_pixel(x, top + h, AXIS);
    }
    if !x0.is_finite() {
        return;
    }
    let (xr, yr) = ((x1 - x0).max(1e-12), (y1 - y0).max(1e-12));
    let pad = 0.05 * yr;
    let map = |p: (f64, f64)| {
        let u = (p.0 - x0) / xr;
        let v = (p.1 - (y0 - pad)) / (yr + 2.0 * pad);
        ((left as f64 + u * w as f64).round() as i64, ((top + h) as f64 - v * h as f64).round() as i64)
    };
    for s in series {
        let pts: Vec<_> = s.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).map(map).collect();
        if let [only] = pts[..] {
            draw_line(img, only, only, s.color);
        }
        for pair in pts.windows(2) {
            draw_line(img, pair[0], pair[1], s.color);
        }
    }
}

/// Renders a grid of panels, one per `field`, one line per run.
fn render(runs: &[(String, Vec<MetricsRecord>)], fields: &[fn(&MetricsRecord) -> Option<f64>]) -> RgbImage {
    let cols = fields.len().min(2) as u32;
    let rows = (fields.len() as u32).div_ceil(cols);
    let mut img = RgbImage::from_pixel(PANEL_W * cols, PANEL_H * rows, BG);
    for (i, f) in fields.iter().enumerate() {
        let series: Vec<Series> = runs
            .iter()
            .enumerate()
            .map(|(r, (_, hist))| Series {
                color: Rgb(PALETTE[r % PALETTE.len()]),
                points: hist.iter().filter_map(|m| f(m).map(|v| (m.iter as f64, v))).collect(),
            })
            .collect();
        let (c, r) = (i as u32 % cols, i as u32 / cols);
        draw_panel(&mut img, c * PANEL_W, r * PANEL_H, &series);
    }
    img
}

pub fn loss_plot(runs: &[(String, Vec<MetricsRecord>)]) -> RgbImage {
    render(
        runs,
        &[
            |m| m.l_all,
            |m| m.losses.det,
            |m| m.losses.local.or(m.losses.mid),
            |m| m.losses.s_mid.or(m.losses.s_global),
        ],
    )
}

pub fn divergence_plot(runs: &[(String, Vec<MetricsRecord>)]) -> RgbImage {
    render(runs, &[|m| m.dh_f2, |m| m.score])
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    fs::write(path, png_bytes(img)?).map_err(|e| Error::io(path, e))
}

/// In-memory form of a report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportBytes {
    pub metrics_csv: String,
    pub loss_png: Vec<u8>,
    pub divergence_png: Vec<u8>,
}

pub fn render_report(runs: &[(String, Vec<MetricsRecord>)]) -> Result<ReportBytes> {
    if runs.is_empty() {
        return Err(Error::EmptyDataset("no runs to report".into()));
    }
    let mut csv = Vec::new();
    write_merged_csv(&mut csv, runs)?;
    Ok(ReportBytes {
        metrics_csv: String::from_utf8(csv).expect("csv is utf-8"),
        loss_png: png_bytes(&loss_plot(runs))?,
        divergence_png: png_bytes(&divergence_plot(runs))?,
    })
}

/// Writes `metrics.csv` (run-tagged), `loss.png` and `divergence.png` into
/// `dir`. Runs keep the given order; their colors follow it.
pub fn report(runs: &[(String, Vec<MetricsRecord>)], dir: &Path) -> Result<ReportFiles> {
    let bytes = render_report(runs)?;
    create_dir(dir)?;
    let files = ReportFiles {
        metrics_csv: dir.join("metrics.csv"),
        loss_plot: dir.join("loss.png"),
        divergence_plot: dir.join("divergence.png"),
    };
    for (path, data) in [
        (&files.metrics_csv, bytes.metrics_csv.as_bytes()),
        (&files.loss_plot, &bytes.loss_png[..]),
        (&files.divergence_plot, &bytes.divergence_png[..]),
    ] {
        fs::write(path, data).map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}

/// Reads metrics CSVs (plain or run-tagged) into runs. Untagged files are
/// named after their file stem; tagged rows keep their run id.
pub fn load_runs(paths: &[PathBuf]) -> Result<Vec<(String, Vec<MetricsRecord>)>> {
    let mut named = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        named.push((stem, text));
    }
    parse_runs(&named)
}

/// [`load_runs`] over `(name, csv text)` pairs.
pub fn parse_runs(files: &[(String, String)]) -> Result<Vec<(String, Vec<MetricsRecord>)>> {
    let mut runs: Vec<(String, Vec<MetricsRecord>)> = Vec::new();
    for (name, text) in files {
        for (run, rec) in read_metrics_csv(text.as_bytes())? {
            let id = run.unwrap_or_else(|| name.clone());
            match runs.iter_mut().find(|(r, _)| *r == id) {
                Some((_, h)) => h.push(rec),
                None => runs.push((id, vec![rec])),
            }
        }
    }
    Ok(runs)
}

/// Files written by [`run_experiment`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub metrics_csv: PathBuf,
    pub timing_csv: PathBuf,
    pub weights: PathBuf,
    pub loss_plot: PathBuf,
    pub divergence_plot: PathBuf,
}

pub fn write_timing_csv(path: &Path, timing: &[(usize, f64)]) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    wr.write_record(["iter", "seconds"])?;
    for (it, s) in timing {
        wr.write_record([it.to_string(), format!("{s:.3}")])?;
    }
    wr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Trains and writes `config.toml`, `metrics.csv`, `timing.csv`,
/// `weights.{bin,json}` and the two plots into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, data: &TrainData, eval: &EvalData, dir: &Path, hooks: &TrainHooks) -> Result<(TrainOutcome, RunFiles)> {
    cfg.validate()?;
    create_dir(dir)?;
    let config = dir.join("config.toml");
    fs::write(&config, cfg.to_toml()?).map_err(|e| Error::io(&config, e))?;
    let hooks = TrainHooks {
        snapshot_dir: Some(hooks.snapshot_dir.unwrap_or(dir)),
        progress: hooks.progress,
    };
    let out = train_with(cfg, data, eval, &hooks)?;

    let metrics_csv = dir.join("metrics.csv");
    let f = fs::File::create(&metrics_csv).map_err(|e| Error::io(&metrics_csv, e))?;
    write_metrics_csv(f, &out.history)?;
    let timing_csv = dir.join("timing.csv");
    write_timing_csv(&timing_csv, &out.timing)?;
    let (weights, _) = out.params.save(&dir.join("weights"))?;
    let runs = [(cfg.name.clone(), out.history.clone())];
    let loss = dir.join("loss.png");
    let divergence = dir.join("divergence.png");
    save_png(&loss_plot(&runs), &loss)?;
    save_png(&divergence_plot(&runs), &divergence)?;
    Ok((
        out,
        RunFiles {
            dir: dir.to_path_buf(),
            config,
            metrics_csv,
            timing_csv,
            weights,
            loss_plot: loss,
            divergence_plot: divergence,
        },
    ))
}
