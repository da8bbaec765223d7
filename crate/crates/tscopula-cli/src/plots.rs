//! Static SVG figures: line charts, forecast fan charts, density heatmaps
//! with contour overlays.

use std::path::Path;

use anyhow::{Context, Result};
use ndarray::Array2;
use plotters::prelude::*;

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Simple multi-line chart.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> Result<()> {
    let root = SVGBackend::new(path, (860, 560)).into_drawing_area();
    root.fill(&WHITE)?;
    let (x0, x1) = finite_range(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.0)));
    let (y0, y1) = finite_range(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(&root)
        .margin(18)
        .caption(title, ("sans-serif", 22))
        .x_label_area_size(42)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()?;
    let palette = [&BLUE, &RED, &GREEN, &MAGENTA, &CYAN, &BLACK];
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = palette[i % palette.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().cloned(), color))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw()?;
    root.present().context("writing svg")?;
    Ok(())
}

/// Forecast fan chart for one series: observed context, ground truth in the
/// prediction region, and sample quantile bands (5-95% and 25-75%) with the
/// median.
#[allow(clippy::too_many_arguments)]
pub fn fan_chart(
    path: &Path,
    title: &str,
    observed: &[(f64, f64)],
    truth: &[(f64, f64)],
    band_t: &[f64],
    q05: &[f64],
    q25: &[f64],
    q50: &[f64],
    q75: &[f64],
    q95: &[f64],
) -> Result<()> {
    let root = SVGBackend::new(path, (860, 560)).into_drawing_area();
    root.fill(&WHITE)?;
    let xs = observed.iter().map(|p| p.0).chain(band_t.iter().cloned());
    let (x0, x1) = finite_range(xs);
    let ys = observed
        .iter()
        .chain(truth.iter())
        .map(|p| p.1)
        .chain(q05.iter().cloned())
        .chain(q95.iter().cloned());
    let (y0, y1) = finite_range(ys);
    let mut chart = ChartBuilder::on(&root)
        .margin(18)
        .caption(title, ("sans-serif", 22))
        .x_label_area_size(42)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc("time").y_desc("value").draw()?;

    let band = |lo: &[f64], hi: &[f64]| -> Vec<(f64, f64)> {
        band_t
            .iter()
            .zip(lo)
            .map(|(&t, &v)| (t, v))
            .chain(band_t.iter().zip(hi).rev().map(|(&t, &v)| (t, v)))
            .collect()
    };
    chart.draw_series(std::iter::once(Polygon::new(band(q05, q95), BLUE.mix(0.15))))?;
    chart.draw_series(std::iter::once(Polygon::new(band(q25, q75), BLUE.mix(0.30))))?;
    chart.draw_series(LineSeries::new(
        band_t.iter().zip(q50).map(|(&t, &v)| (t, v)),
        &BLUE,
    ))?;
    chart.draw_series(
        observed.iter().map(|&(t, v)| Circle::new((t, v), 2, BLACK.filled())),
    )?;
    chart.draw_series(truth.iter().map(|&(t, v)| Circle::new((t, v), 2, RED.filled())))?;
    root.present().context("writing svg")?;
    Ok(())
}

fn heat_color(t: f64) -> RGBColor {
    // white -> orange -> dark red ramp
    let t = t.clamp(0.0, 1.0);
    let r = 255.0 - 103.0 * t;
    let g = 245.0 * (1.0 - t);
    let b = 235.0 * (1.0 - t).powi(2);
    RGBColor(r as u8, g as u8, b as u8)
}

/// Marching-squares iso-lines of a grid. `grid[[i, j]]` is the value at
/// (xs[i], ys[j]). Returns line segments in data coordinates.
fn iso_segments(grid: &Array2<f64>, xs: &[f64], ys: &[f64], level: f64) -> Vec<((f64, f64), (f64, f64))> {
    let mut segments = Vec::new();
    let interp = |a: f64, b: f64, va: f64, vb: f64| -> f64 {
        if (vb - va).abs() < 1e-300 {
            0.5 * (a + b)
        } else {
            a + (level - va) / (vb - va) * (b - a)
        }
    };
    for i in 0..grid.nrows() - 1 {
        for j in 0..grid.ncols() - 1 {
            let v = [
                grid[[i, j]],
                grid[[i + 1, j]],
                grid[[i + 1, j + 1]],
                grid[[i, j + 1]],
            ];
            let above: Vec<bool> = v.iter().map(|&x| x >= level).collect();
            // edge points: bottom (0-1), right (1-2), top (3-2), left (0-3)
            let mut pts = Vec::new();
            if above[0] != above[1] {
                pts.push((interp(xs[i], xs[i + 1], v[0], v[1]), ys[j]));
            }
            if above[1] != above[2] {
                pts.push((xs[i + 1], interp(ys[j], ys[j + 1], v[1], v[2])));
            }
            if above[3] != above[2] {
                pts.push((interp(xs[i], xs[i + 1], v[3], v[2]), ys[j + 1]));
            }
            if above[0] != above[3] {
                pts.push((xs[i], interp(ys[j], ys[j + 1], v[0], v[3])));
            }
            if pts.len() == 2 {
                segments.push((pts[0], pts[1]));
            } else if pts.len() == 4 {
                segments.push((pts[0], pts[1]));
                segments.push((pts[2], pts[3]));
            }
        }
    }
    segments
}

/// Heatmap of a reference density with contour overlays of a second
/// (learned) density on the same grid.
pub fn density_overlay(
    path: &Path,
    title: &str,
    xs: &[f64],
    ys: &[f64],
    reference: &Array2<f64>,
    overlay: &Array2<f64>,
    n_levels: usize,
) -> Result<()> {
    let root = SVGBackend::new(path, (720, 640)).into_drawing_area();
    root.fill(&WHITE)?;
    let (x0, x1) = (xs[0], *xs.last().unwrap());
    let (y0, y1) = (ys[0], *ys.last().unwrap());
    let mut chart = ChartBuilder::on(&root)
        .margin(18)
        .caption(title, ("sans-serif", 22))
        .x_label_area_size(42)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().disable_mesh().draw()?;

    let ref_max = reference.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut cells = Vec::new();
    for i in 0..xs.len() - 1 {
        for j in 0..ys.len() - 1 {
            let v = reference[[i, j]] / ref_max;
            cells.push(Rectangle::new(
                [(xs[i], ys[j]), (xs[i + 1], ys[j + 1])],
                heat_color(v.sqrt()).filled(),
            ));
        }
    }
    chart.draw_series(cells)?;

    let ov_max = overlay.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    for l in 1..=n_levels {
        let level = ov_max * l as f64 / (n_levels + 1) as f64;
        let segs = iso_segments(overlay, xs, ys, level);
        chart.draw_series(
            segs.into_iter()
                .map(|(a, b)| PathElement::new(vec![a, b], RGBColor(40, 40, 140))),
        )?;
    }
    root.present().context("writing svg")?;
    Ok(())
}
