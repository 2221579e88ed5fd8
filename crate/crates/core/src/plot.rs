//! SVG charts of the training loss and of an evaluation report.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::train::EpochLog;

const SIZE: (u32, u32) = (800, 480);

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// Total and per-head epoch-mean losses against the epoch index.
pub fn plot_loss_curve(log: &[EpochLog], out: &Path) -> Result<()> {
    if log.is_empty() {
        return Err(Error::Plot("loss log has no epochs".into()));
    }
    let series: [(&str, fn(&EpochLog) -> f64, RGBColor); 4] = [
        ("total", |e| e.mean.total, BLACK),
        ("detection", |e| e.mean.det, BLUE),
        ("prediction", |e| e.mean.pred, RED),
        ("refinement", |e| e.mean.refine, GREEN),
    ];
    let y_max = log.iter().map(|e| e.mean.total).fold(0.0, f64::max).max(1e-6) * 1.05;
    let x_max = log.last().map(|e| e.epoch).unwrap_or(0).max(1) as f64;
    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0f64..x_max, 0f64..y_max)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").y_desc("loss").draw().map_err(plot_err)?;
    for (name, f, color) in series {
        chart
            .draw_series(LineSeries::new(log.iter().map(|e| (e.epoch as f64, f(e))), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// One bar per scalar metric of the report; NaN values are drawn as 0.
pub fn plot_metric_bars(report: &MetricReport, out: &Path) -> Result<()> {
    let values = report.scalars();
    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("evaluation", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d((0..values.len()).into_segmented(), 0f64..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => values.get(*i).map(|(n, _)| n.to_string()).unwrap_or_default(),
            _ => String::new(),
        })
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(values.iter().enumerate().map(|(i, (_, v))| {
            let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            let mut bar = Rectangle::new([(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), v)], BLUE.mix(0.7).filled());
            bar.set_margin(0, 0, 12, 12);
            bar
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::LossTerms;

    fn log(n: usize) -> Vec<EpochLog> {
        (0..n)
            .map(|i| EpochLog {
                epoch: i,
                lr: 0.005,
                steps: 3,
                seconds: 1.0,
                mean: LossTerms { total: 10.0 / (i + 1) as f64, det: 1.0, pred: 2.0, refine: 0.5, ..Default::default() },
            })
            .collect()
    }

    #[test]
    fn loss_curve_has_one_point_per_epoch_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.svg");
        plot_loss_curve(&log(7), &p).unwrap();
        let a = std::fs::read_to_string(&p).unwrap();
        plot_loss_curve(&log(7), &p).unwrap();
        assert_eq!(a, std::fs::read_to_string(&p).unwrap());
        let total_path = a.lines().find(|l| l.contains("<polyline") && l.contains("stroke=\"#000000\" stroke-width=\"2\"")).unwrap();
        let points = total_path.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(points.split_whitespace().count(), 7);
        assert!(plot_loss_curve(&[], &p).is_err());
    }

    #[test]
    fn metric_bars_cover_every_scalar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bars.svg");
        let report = MetricReport {
            miou: 0.5,
            per_class_iou: vec![Some(0.5)],
            ap_p_50: 0.7,
            ap_p_vol: 0.6,
            pcp_50: 0.4,
            ap_r_vol: 0.65,
            map_bbox: 0.9,
            thresholds: vec![0.5],
            ap_p_per_threshold: vec![0.7],
            num_images: 1,
            num_instances: 1,
        };
        plot_metric_bars(&report, &p).unwrap();
        let svg = std::fs::read_to_string(&p).unwrap();
        for (name, _) in report.scalars() {
            assert!(svg.contains(name), "{name} missing");
        }
        assert_eq!(svg.matches("<rect").count() - 1, report.scalars().len());
    }
}
