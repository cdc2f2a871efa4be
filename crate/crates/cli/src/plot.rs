//! Robustness curves as PNG line charts (one per degradation kind and metric).

use std::path::Path;

use plotters::prelude::*;

/// Draws `points` (level, value) as a polyline with markers on a fixed
/// `[0, 1]` value axis. No text is rendered, so no font backend is needed;
/// the file name identifies the series.
pub fn line_chart(path: &Path, points: &[(u32, f64)]) -> anyhow::Result<()> {
    let root = BitMapBackend::new(path, (480, 320)).into_drawing_area();
    root.fill(&WHITE)?;
    let (lo, hi) = points
        .iter()
        .fold((u32::MAX, 0u32), |(lo, hi), &(l, _)| (lo.min(l), hi.max(l)));
    let (lo, hi) = if points.is_empty() { (0, 1) } else { (lo, hi.max(lo + 1)) };
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .build_cartesian_2d(f64::from(lo)..f64::from(hi), 0.0..1.0)?;
    chart
        .configure_mesh()
        .x_labels(0)
        .y_labels(0)
        .light_line_style(WHITE)
        .draw()?;
    let series: Vec<(f64, f64)> = points.iter().map(|&(l, v)| (f64::from(l), v)).collect();
    chart.draw_series(LineSeries::new(series.clone(), BLUE.stroke_width(2)))?;
    chart.draw_series(series.into_iter().map(|p| Circle::new(p, 3, BLUE.filled())))?;
    root.present()?;
    Ok(())
}
