//! Renders a telemetry log as an SVG review sheet: horizontal track, depth
//! and heading against their setpoints, and thruster commands.

use std::ops::Range;
use std::path::Path;

use gnc_core::dof::DofId;
use gnc_core::runner::{read_log, LogError, TelemetryRecord};
use plotters::coord::Shift;
use plotters::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("log has no records")]
    Empty,
    #[error("drawing: {0}")]
    Draw(String),
}

fn draw_err<E: std::fmt::Display>(e: E) -> PlotError {
    PlotError::Draw(e.to_string())
}

/// Padded range covering every value, never empty.
fn span(values: impl Iterator<Item = f64>) -> Range<f64> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return -1.0..1.0;
    }
    let pad = ((hi - lo) * 0.05).max(0.05);
    (lo - pad)..(hi + pad)
}

struct Series {
    label: String,
    color: RGBColor,
    points: Vec<(f64, f64)>,
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(214, 39, 40),
    RGBColor(31, 119, 180),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn panel(area: &DrawingArea<SVGBackend<'_>, Shift>, title: &str, x_label: &str, series: &[Series]) -> Result<(), PlotError> {
    let xs = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(xs, ys)
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc(x_label).draw().map_err(draw_err)?;
    for s in series {
        let color = s.color;
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    Ok(())
}

fn channel(records: &[TelemetryRecord], dof: DofId) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter_map(|r| r.setpoint.get(&dof).map(|v| (r.time, *v)))
        .collect()
}

/// Writes the review sheet for the log text to `out`. Returns the number
/// of records plotted.
pub fn plot_log(text: &str, out: &Path) -> Result<usize, PlotError> {
    let (header, records) = read_log(text)?;
    if records.is_empty() {
        return Err(PlotError::Empty);
    }
    let root = SVGBackend::new(out, (1400, 1000)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let areas = root.split_evenly((2, 2));

    let track = |f: fn(&TelemetryRecord) -> [f64; 3]| records.iter().map(f).map(|p| (p[0], p[1])).collect();
    panel(
        &areas[0],
        "Horizontal track",
        "x (m)",
        &[
            Series {
                label: "truth".into(),
                color: PALETTE[0],
                points: track(|r| r.truth.position),
            },
            Series {
                label: "odometry".into(),
                color: PALETTE[1],
                points: track(|r| r.odometry.position),
            },
        ],
    )?;
    panel(
        &areas[1],
        "Depth",
        "time (s)",
        &[
            Series {
                label: "depth".into(),
                color: PALETTE[0],
                points: records.iter().map(|r| (r.time, r.truth.depth)).collect(),
            },
            Series {
                label: "setpoint".into(),
                color: PALETTE[1],
                points: channel(&records, DofId::Depth),
            },
        ],
    )?;
    panel(
        &areas[2],
        "Heading",
        "time (s)",
        &[
            Series {
                label: "yaw".into(),
                color: PALETTE[0],
                points: records.iter().map(|r| (r.time, r.truth.rpy[2])).collect(),
            },
            Series {
                label: "setpoint".into(),
                color: PALETTE[1],
                points: channel(&records, DofId::Yaw),
            },
        ],
    )?;
    let commands: Vec<Series> = header
        .thrusters
        .iter()
        .enumerate()
        .map(|(k, id)| Series {
            label: id.clone(),
            color: PALETTE[k % PALETTE.len()],
            points: records
                .iter()
                .filter_map(|r| r.thrusters.get(k).map(|t| (r.time, t.command)))
                .collect(),
        })
        .collect();
    panel(&areas[3], "Thruster commands", "time (s)", &commands)?;
    root.present().map_err(draw_err)?;
    Ok(records.len())
}
