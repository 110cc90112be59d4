//! SVG plots. Text is emitted as SVG `<text>`, so no fonts are needed.

use std::path::Path;

use anyhow::{anyhow, Result};
use ffad_core::evaluator::RocPoint;
use ffad_core::frames::LabelSeries;
use ffad_core::losses::LossBreakdown;
use ffad_core::scorer::ScoreSeries;
use plotters::prelude::*;

const SIZE: (u32, u32) = (900, 420);

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e}")
}

/// Regular score over frame index with abnormal frames shaded.
pub fn score_curve(path: &Path, series: &ScoreSeries, labels: &LabelSeries) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let start = series.frame_offset as f64;
    let end = (series.frame_offset + series.len()) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("regular score, video {}", series.video_id), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(44)
        .build_cartesian_2d(start..end, 0.0..1.05)
        .map_err(err)?;
    chart.configure_mesh().x_desc("frame").y_desc("S").draw().map_err(err)?;
    let shade = RGBColor(240, 160, 160).mix(0.5).filled();
    chart
        .draw_series(labels.labels.iter().enumerate().filter(|(_, &l)| l == 1).map(|(i, _)| {
            let x = start + i as f64;
            Rectangle::new([(x, 0.0), (x + 1.0, 1.05)], shade)
        }))
        .map_err(err)?;
    chart
        .draw_series(LineSeries::new(
            series.s.iter().enumerate().map(|(i, &s)| (start + i as f64 + 0.5, s)),
            &BLUE,
        ))
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

pub fn roc(path: &Path, curve: &[RocPoint], auc: f64) -> Result<()> {
    let root = SVGBackend::new(path, (480, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("ROC, AUC = {auc:.4}"), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(40)
        .build_cartesian_2d(0.0..1.0, 0.0..1.0)
        .map_err(err)?;
    chart.configure_mesh().x_desc("false positive rate").y_desc("true positive rate").draw().map_err(err)?;
    chart
        .draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], &BLACK.mix(0.3)))
        .map_err(err)?;
    chart
        .draw_series(LineSeries::new(curve.iter().map(|p| (p.fpr, p.tpr)), &RED))
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Generator objective per step, raw and smoothed.
pub fn loss_curve(path: &Path, records: &[(u64, LossBreakdown)], smoothed: &[f64]) -> Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let (first, last) = (records[0].0 as f64, records[records.len() - 1].0 as f64 + 1.0);
    let top = records.iter().map(|(_, b)| b.total_g).fold(0.0, f64::max).max(1e-6) * 1.05;
    let mut chart = ChartBuilder::on(&root)
        .caption("generator objective", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(56)
        .build_cartesian_2d(first..last, 0.0..top)
        .map_err(err)?;
    chart.configure_mesh().x_desc("step").draw().map_err(err)?;
    chart
        .draw_series(LineSeries::new(records.iter().map(|(s, b)| (*s as f64, b.total_g)), &BLUE.mix(0.3)))
        .map_err(err)?;
    chart
        .draw_series(LineSeries::new(records.iter().zip(smoothed).map(|((s, _), &m)| (*s as f64, m)), &BLUE))
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}
