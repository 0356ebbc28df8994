//! SVG plots of sweep results.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

use crate::error::{CliError, CliResult};

const SIZE: (u32, u32) = (800, 500);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn err(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(format!("plot: {e}"))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// One line per series of `(rate_bps, delay_s)` points on log-log axes.
pub fn delay_vs_rate(path: &Path, series: &BTreeMap<String, Vec<(f64, f64)>>) -> CliResult<()> {
    let points = || series.values().flatten();
    if points().next().is_none() {
        return Err(CliError::Internal("plot: no sweep rows to draw".into()));
    }
    let (x0, x1) = bounds(points().map(|p| p.0));
    let (y0, y1) = bounds(points().map(|p| p.1));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("End-to-end delay vs. channel rate", ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(45)
        .y_label_area_size(60)
        .build_cartesian_2d((x0 * 0.9..x1 * 1.1).log_scale(), (y0 * 0.9..y1 * 1.1).log_scale())
        .map_err(err)?;
    chart.configure_mesh().x_desc("rate [bit/s]").y_desc("delay [s]").draw().map_err(err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(err)?;
    root.present().map_err(err)
}

/// Scatter of `(payload_bytes, top1 %)` per labelled group.
pub fn size_vs_accuracy(path: &Path, groups: &BTreeMap<String, Vec<(f64, f64)>>) -> CliResult<()> {
    let points = || groups.values().flatten();
    if points().next().is_none() {
        return Err(CliError::Internal("plot: no models to draw".into()));
    }
    let (x0, x1) = bounds(points().map(|p| p.0));
    let (y0, y1) = bounds(points().map(|p| p.1));
    let pad = ((y1 - y0) * 0.1).max(1.0);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Transferred data size vs. accuracy", ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(45)
        .y_label_area_size(60)
        .build_cartesian_2d((x0 * 0.8..x1 * 1.25).log_scale(), (y0 - pad)..(y1 + pad))
        .map_err(err)?;
    chart.configure_mesh().x_desc("payload [bytes]").y_desc("top-1 [%]").draw().map_err(err)?;
    for (i, (name, pts)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        chart.draw_series(LineSeries::new(sorted.iter().copied(), color.stroke_width(1))).map_err(err)?;
        chart
            .draw_series(sorted.iter().map(|&p| Circle::new(p, 4, color.filled())))
            .map_err(err)?
            .label(name.as_str())
            .legend(move |(x, y)| Circle::new((x + 8, y), 4, color.filled()));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(err)?;
    root.present().map_err(err)
}
