//! SVG line chart of per-slice diagonal and final-row MRR.

use std::path::Path;

use plotters::prelude::*;

use super::RunReport;
use crate::error::{Error, Result};

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Format {
        what: "plot",
        detail: e.to_string(),
    }
}

/// Blue: `R[s][s]` (just after learning slice `s`). Red: `R[n][s]` (after
/// the last session). Values in percentage points.
pub fn plot_report(report: &RunReport, path: &Path) -> Result<()> {
    let n = report.diagonal.len();
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(0f64..(n.max(2) - 1) as f64, 0f64..100f64)
        .map_err(plot_err)?;
    let series = |v: &[f64]| -> Vec<(f64, f64)> {
        v.iter().enumerate().map(|(s, m)| (s as f64, m * 100.0)).collect()
    };
    chart
        .draw_series(LineSeries::new(series(&report.diagonal), BLUE.stroke_width(2)))
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(series(&report.final_row), RED.stroke_width(2)))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
