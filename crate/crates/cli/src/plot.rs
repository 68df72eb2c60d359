//! Static SVG charts.

use std::path::Path;

use plotters::prelude::*;

use crate::CliError;

const SIZE: (u32, u32) = (640, 440);

fn plot_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("plotting {}: {e}", path.display()))
}

/// Padded range covering `values`.
fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Area coordinates coloured by geo-cluster, with centroids as crosses.
pub fn cluster_scatter(
    path: &Path,
    points: &[(f64, f64)],
    assignment: &[usize],
    centroids: &[[f64; 2]],
) -> Result<(), CliError> {
    let err = |e| plot_err(path, e);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let lons = points
        .iter()
        .map(|p| p.1)
        .chain(centroids.iter().map(|c| c[1]));
    let lats = points
        .iter()
        .map(|p| p.0)
        .chain(centroids.iter().map(|c| c[0]));
    let (x0, x1) = span(lons);
    let (y0, y1) = span(lats);
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("Geo-clusters (K = {})", centroids.len()),
            ("sans-serif", 18),
        )
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("longitude")
        .y_desc("latitude")
        .draw()
        .map_err(err)?;
    chart
        .draw_series(
            points
                .iter()
                .zip(assignment)
                .map(|(&(lat, lon), &c)| Circle::new((lon, lat), 3, Palette99::pick(c).filled())),
        )
        .map_err(err)?;
    chart
        .draw_series(
            centroids
                .iter()
                .map(|c| Cross::new((c[1], c[0]), 6, BLACK.stroke_width(2))),
        )
        .map_err(err)?;
    root.present().map_err(err)
}

/// Bar chart of integer-keyed counts.
pub fn bars(
    path: &Path,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    counts: &[(usize, usize)],
) -> Result<(), CliError> {
    let err = |e| plot_err(path, e);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let lo = counts.iter().map(|c| c.0).min().unwrap_or(0) as f64 - 0.5;
    let hi = counts.iter().map(|c| c.0).max().unwrap_or(0) as f64 + 0.5;
    let top = counts.iter().map(|c| c.1).max().unwrap_or(1).max(1) as f64 * 1.08;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(lo..hi, 0.0..top)
        .map_err(err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(err)?;
    chart
        .draw_series(counts.iter().map(|&(x, n)| {
            let x = x as f64;
            Rectangle::new(
                [(x - 0.4, 0.0), (x + 0.4, n as f64)],
                BLUE.mix(0.7).filled(),
            )
        }))
        .map_err(err)?;
    root.present().map_err(err)
}

/// Line chart with one labelled series per entry.
pub fn lines(
    path: &Path,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> Result<(), CliError> {
    let err = |e| plot_err(path, e);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let (x0, x1) = span(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = span(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(err)?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i);
        chart
            .draw_series(LineSeries::new(
                points.iter().copied(),
                color.stroke_width(2),
            ))
            .map_err(err)?
            .label(*name)
            .legend(move |(x, y)| {
                PathElement::new([(x, y), (x + 16, y)], Palette99::pick(i).stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}
