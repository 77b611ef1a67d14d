//! Static SVG figures: loss curves, CMC curves and metric bar charts.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{format_error, Result};

const SIZE: (u32, u32) = (720, 440);

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

fn fail(path: &Path) -> impl Fn(String) -> crate::Error + '_ {
    move |m| format_error(path, format!("cannot draw plot: {m}"))
}

/// Loss against optimizer step.
pub fn loss_curve(points: &[(u64, f64)], path: &Path) -> Result<()> {
    let err = fail(path);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let x_max = points.last().map_or(1, |p| p.0.max(1)) as f64;
    let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let (lo, hi) = padded(lo, hi);
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..x_max, lo..hi)
        .map_err(|e| err(e.to_string()))?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(|e| err(e.to_string()))?;
    chart
        .draw_series(LineSeries::new(points.iter().map(|&(s, l)| (s as f64, l)), &BLUE))
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

/// CMC curve; `cmc[k]` is the hit rate within the top `k + 1`.
pub fn cmc_curve(cmc: &[f64], path: &Path) -> Result<()> {
    let err = fail(path);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let ranks = cmc.len().clamp(1, 50);
    let mut chart = ChartBuilder::on(&root)
        .caption("CMC", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(1f64..ranks.max(2) as f64, 0f64..1.02f64)
        .map_err(|e| err(e.to_string()))?;
    chart.configure_mesh().x_desc("rank").y_desc("matching rate").draw().map_err(|e| err(e.to_string()))?;
    chart
        .draw_series(LineSeries::new(cmc.iter().take(ranks).enumerate().map(|(i, &v)| ((i + 1) as f64, v)), &RED))
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

/// One bar per labelled value, for comparing metrics across runs or
/// ablation settings.
pub fn bar_chart(title: &str, bars: &[(String, f64)], path: &Path) -> Result<()> {
    let err = fail(path);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let top = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-6) * 1.1;
    let n = bars.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..n as f64, 0f64..top)
        .map_err(|e| err(e.to_string()))?;
    let label = |x: &f64| {
        let i = x.floor() as usize;
        if (x - i as f64 - 0.5).abs() < 1e-9 {
            bars.get(i).map_or(String::new(), |b| b.0.clone())
        } else {
            String::new()
        }
    };
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(2 * n + 1)
        .x_label_formatter(&label)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    chart
        .draw_series(
            bars.iter()
                .enumerate()
                .map(|(i, b)| Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, b.1)], BLUE.mix(0.7).filled())),
        )
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}
