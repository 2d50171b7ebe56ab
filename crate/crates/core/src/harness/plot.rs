//! Scatter plots of record fields, annotated with their Pearson value.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::evaluator::{correlation, CorrelationKind, RecordField, TrialRecord};

/// Field pairs drawn by [`emit_plots`].
pub const PLOT_PAIRS: [(RecordField, RecordField); 7] = [
    (RecordField::Flops, RecordField::ZenScore),
    (RecordField::Flops, RecordField::Params),
    (RecordField::Params, RecordField::ZenScore),
    (RecordField::Flops, RecordField::StandaloneAccuracy),
    (RecordField::Params, RecordField::StandaloneAccuracy),
    (RecordField::ZenScore, RecordField::StandaloneAccuracy),
    (RecordField::SupernetAccuracy, RecordField::StandaloneAccuracy),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotSummary {
    pub written: Vec<PathBuf>,
    /// One line per pair that was not drawn.
    pub skipped: Vec<String>,
}

/// Pearson on the 0–100 scale as printed on a plot.
pub fn pearson_label(xs: &[f64], ys: &[f64]) -> Result<String> {
    let p = correlation(xs, ys, CorrelationKind::Pearson)?;
    Ok(format!("Pearson {:.1}", 100.0 * p))
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

fn draw(path: &Path, x: RecordField, y: RecordField, pts: &[(f64, f64)], label: &str) -> Result<()> {
    let fail = |e: String| Error::Image {
        path: path.to_path_buf(),
        message: e,
    };
    let (xlo, xhi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ylo, yhi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let (xlo, xhi) = padded(xlo, xhi);
    let (ylo, yhi) = padded(ylo, yhi);
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fail(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{x} vs {y} ({label})"), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(xlo..xhi, ylo..yhi)
        .map_err(|e| fail(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(x.name())
        .y_desc(y.name())
        .draw()
        .map_err(|e| fail(e.to_string()))?;
    chart
        .draw_series(pts.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))
        .map_err(|e| fail(e.to_string()))?;
    root.present().map_err(|e| fail(e.to_string()))?;
    Ok(())
}

/// Write one SVG scatter per field pair into `dir`. Pairs with fewer than
/// three usable records, or a constant field, are skipped with a note.
pub fn emit_plots(records: &[TrialRecord], dir: &Path) -> Result<PlotSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut summary = PlotSummary::default();
    for (x, y) in PLOT_PAIRS {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.failed.is_none())
            .filter_map(|r| Some((r.get(x)?, r.get(y)?)))
            .collect();
        if pts.len() < 3 {
            summary
                .skipped
                .push(format!("{x} vs {y}: {} usable records, need 3", pts.len()));
            continue;
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
        let label = match pearson_label(&xs, &ys) {
            Ok(l) => l,
            Err(e) => {
                summary.skipped.push(format!("{x} vs {y}: {e}"));
                continue;
            }
        };
        let path = dir.join(format!("{x}_vs_{y}.svg"));
        draw(&path, x, y, &pts, &label)?;
        summary.written.push(path);
    }
    let notes = dir.join("skipped.txt");
    if summary.skipped.is_empty() {
        let _ = fs::remove_file(&notes);
    } else {
        fs::write(&notes, summary.skipped.join("\n") + "\n").map_err(|e| Error::io(&notes, e))?;
    }
    Ok(summary)
}
