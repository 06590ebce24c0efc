//! Static bar charts of detection metrics.
//!
//! One PNG per metric. Bars follow the report's entry order and use a fixed
//! colour per scorer (see [`scorer_colour`]). The vertical axis spans
//! `[-1, 1]` with a grey line at zero, so FR/SR bars rise from the middle.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::metrics::EvaluationReport;
use crate::scoring::ScorerId;

const WIDTH: u32 = 320;
const HEIGHT: u32 = 200;
const MARGIN: u32 = 10;

pub fn scorer_colour(s: ScorerId) -> [u8; 3] {
    match s {
        ScorerId::Msp => [31, 119, 180],
        ScorerId::NegEntropy => [255, 127, 14],
        ScorerId::NegEnergy => [44, 160, 44],
        ScorerId::Gde => [148, 103, 189],
        ScorerId::Decider => [214, 39, 40],
    }
}

/// Renders one bar per `(scorer, value)`; values are clamped to `[-1, 1]`.
pub fn bar_chart(values: &[(ScorerId, f64)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let plot_h = HEIGHT - 2 * MARGIN;
    let zero_y = MARGIN + plot_h / 2;
    let y_of = |v: f64| -> u32 {
        let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
        (zero_y as f64 - v * (plot_h / 2) as f64).round() as u32
    };
    let n = values.len().max(1) as u32;
    let slot = (WIDTH - 2 * MARGIN) / n;
    let bar_w = (slot * 2 / 3).max(1);
    for (i, (scorer, v)) in values.iter().enumerate() {
        let x0 = MARGIN + i as u32 * slot + (slot - bar_w) / 2;
        let (top, bottom) = {
            let y = y_of(*v);
            (y.min(zero_y), y.max(zero_y))
        };
        let colour = Rgb(scorer_colour(*scorer));
        for x in x0..x0 + bar_w {
            for y in top..=bottom {
                img.put_pixel(x, y, colour);
            }
        }
    }
    for x in MARGIN..WIDTH - MARGIN {
        img.put_pixel(x, zero_y, Rgb([128, 128, 128]));
    }
    img
}

/// Writes `fr.png`, `sr.png` and `mcc.png` into `dir` and returns their paths.
pub fn write_metric_plots(report: &EvaluationReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, pick) in [
        ("fr", (|e: &crate::metrics::ScorerMetrics| e.fr) as fn(&crate::metrics::ScorerMetrics) -> f64),
        ("sr", |e| e.sr),
        ("mcc", |e| e.mcc),
    ] {
        let values: Vec<(ScorerId, f64)> = report.entries.iter().map(|e| (e.scorer, pick(e))).collect();
        let path = dir.join(format!("{name}.png"));
        bar_chart(&values).save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
