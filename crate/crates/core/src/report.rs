//! Run artifacts: metrics JSON, the training-curve CSV, the correlation
//! export and PNG plots drawn with a small rasterizer.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datasets::write_json;
use crate::error::{Result, ScidaError};
use crate::lwc::CorrelationMatrix;
use crate::trainer::{AblationTable, TrainLog};

pub const CURVE_COLUMNS: [&str; 9] = ["epoch", "wfl", "dis", "selfcorr", "churn", "op", "or", "of1", "of2"];

/// Everything a report needs, persisted by `train` as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub categories: Vec<String>,
    pub log: TrainLog,
    pub correlation: Option<CorrelationMatrix>,
}

impl RunSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ScidaError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per epoch; metric cells are empty when no evaluation labels exist.
pub fn curve_csv(log: &TrainLog) -> String {
    let mut out = CURVE_COLUMNS.join(",");
    out.push('\n');
    for r in &log.epochs {
        let m = r.all.as_ref();
        let row = [
            r.epoch.to_string(),
            r.wfl.to_string(),
            cell(r.dis),
            cell(r.selfcorr),
            r.churn.to_string(),
            cell(m.map(|m| m.op)),
            cell(m.map(|m| m.or)),
            cell(m.map(|m| m.of1)),
            cell(m.map(|m| m.of2)),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| ScidaError::io(path, e))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    Ok(img.save(path)?)
}

/// Writes the report files into `out_dir` (created if needed).
pub fn emit_report(run: &RunSummary, out_dir: &Path) -> Result<()> {
    if run.log.epochs.is_empty() {
        return Err(ScidaError::Empty("report of a run with no epochs".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| ScidaError::io(out_dir, e))?;
    let last = run.log.last().expect("non-empty");
    let metrics = serde_json::json!({
        "config_hash": run.log.config_hash,
        "log_hash": run.log.hash(),
        "stop": run.log.stop,
        "epochs": run.log.epochs.len(),
        "final": { "all": last.all, "top3": last.top3 },
        "per_epoch": run.log.epochs,
    });
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    write_json(&out_dir.join("config.json"), &run.config)?;
    write_text(&out_dir.join("curve.csv"), &curve_csv(&run.log))?;

    let series = |name: &str, f: &dyn Fn(&crate::trainer::EpochRecord) -> Option<f64>| Series {
        name: name.to_string(),
        points: run.log.epochs.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect(),
    };
    let panels = [
        series("wfl", &|r| Some(r.wfl)),
        series("dis", &|r| r.dis),
        series("selfcorr", &|r| r.selfcorr),
        series("churn", &|r| Some(r.churn)),
        series("of1", &|r| r.all.as_ref().map(|m| m.of1)),
    ];
    save_png(&line_panels(&panels), &out_dir.join("curve.png"))?;

    if let Some(m) = &run.correlation {
        m.write_counts_csv(&out_dir.join("correlation_counts.csv"), &run.categories)?;
        m.write_normalized_json(&out_dir.join("correlation.json"), &run.categories)?;
        save_png(&heatmap(&m.normalized), &out_dir.join("correlation.png"))?;
    }
    Ok(())
}

/// Writes `ablation.csv`, `ablation.json` and an OF1-vs-delta plot.
pub fn emit_ablation(table: &AblationTable, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| ScidaError::io(out_dir, e))?;
    write_text(&out_dir.join("ablation.csv"), &table.to_csv())?;
    write_json(&out_dir.join("ablation.json"), table)?;
    let of1 = Series {
        name: "of1".into(),
        points: table
            .rows
            .iter()
            .filter_map(|r| r.all.as_ref().map(|m| (r.delta, m.of1)))
            .collect(),
    };
    save_png(&line_panels(&[of1]), &out_dir.join("ablation.png"))
}

/// A named polyline in data coordinates.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PANEL_W: u32 = 480;
const PANEL_H: u32 = 160;
const MARGIN: u32 = 12;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([90, 90, 90]);
const PALETTE: [Rgb<u8>; 5] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 as f64 + t * (x1 - x0) as f64;
        let y = y0 as f64 + t * (y1 - y0) as f64;
        put(img, x.round() as i64, y.round() as i64, c);
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One auto-scaled panel per series, stacked vertically. A series with a
/// single point is drawn as a small square.
pub fn line_panels(series: &[Series]) -> RgbImage {
    let n = series.len().max(1) as u32;
    let mut img = RgbImage::from_pixel(PANEL_W, PANEL_H * n, WHITE);
    let xs = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    for (i, s) in series.iter().enumerate() {
        let top = i as i64 * PANEL_H as i64;
        let (l, r) = (MARGIN as i64, (PANEL_W - MARGIN) as i64);
        let (t, b) = (top + MARGIN as i64, top + (PANEL_H - MARGIN) as i64);
        line(&mut img, (l, b), (r, b), AXIS);
        line(&mut img, (l, t), (l, b), AXIS);
        let ys = range(s.points.iter().map(|p| p.1));
        let to_px = |(x, y): (f64, f64)| {
            let px = l as f64 + (x - xs.0) / (xs.1 - xs.0) * (r - l) as f64;
            let py = b as f64 - (y - ys.0) / (ys.1 - ys.0) * (b - t) as f64;
            (px.round() as i64, py.round() as i64)
        };
        let color = PALETTE[i % PALETTE.len()];
        let px: Vec<_> = s.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).map(to_px).collect();
        for w in px.windows(2) {
            line(&mut img, w[0], w[1], color);
        }
        for &(x, y) in &px {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    put(&mut img, x + dx, y + dy, color);
                }
            }
        }
    }
    img
}

/// K×K heatmap of values in [0, 1]; white is 0, dark blue is 1.
pub fn heatmap(m: &[Vec<f64>]) -> RgbImage {
    let k = m.len().max(1) as u32;
    let cell = (512 / k).clamp(4, 48);
    let mut img = RgbImage::from_pixel(cell * k, cell * k, WHITE);
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            let shade = |full: f64| (255.0 - v * (255.0 - full)).round() as u8;
            let c = Rgb([shade(8.0), shade(48.0), shade(107.0)]);
            for y in 0..cell {
                for x in 0..cell {
                    img.put_pixel(j as u32 * cell + x, i as u32 * cell + y, c);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_panel_draws_something() {
        let img = line_panels(&[Series {
            name: "x".into(),
            points: vec![(1.0, 0.3)],
        }]);
        assert!(img.pixels().any(|p| *p == PALETTE[0]));
    }

    #[test]
    fn heatmap_extremes() {
        let img = heatmap(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(*img.get_pixel(0, 0), WHITE);
        let c = img.width() - 1;
        assert_eq!(*img.get_pixel(c, 0), Rgb([8, 48, 107]));
    }
}
