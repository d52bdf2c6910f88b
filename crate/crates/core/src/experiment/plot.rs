use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;

use super::evaluate::{trace_file, EvaluationReport, ScenarioKind, SummaryRow};
use super::{require, ExperimentConfig, Layout};
use crate::env::EpisodeTrace;
use crate::error::{Error, Result};

const WIDTH: u32 = 960;
const PANEL_HEIGHT: u32 = 240;

/// One y column of a learning-curve CSV against its iteration column.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveSeries {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// What was drawn, for callers that check plots without parsing SVG.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlotSummary {
    pub path: PathBuf,
    pub title: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub series: Vec<String>,
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn range_of(values: impl Iterator<Item = f64>) -> Range<f64> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        0.0..1.0
    } else {
        lo..hi
    }
}

fn padded(r: Range<f64>) -> Range<f64> {
    let pad = ((r.end - r.start) * 0.05).max(1e-6);
    r.start - pad..r.end + pad
}

/// Reads `y_column` against `x_column` from a CSV with headers.
pub fn read_curve(path: &Path, x_column: &str, y_column: &str) -> Result<CurveSeries> {
    require(path)?;
    let malformed = |line: u64, message: String| Error::MalformedCsv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| malformed(1, format!("missing column `{name}`")))
    };
    let (xi, yi) = (column(x_column)?, column(y_column)?);
    let mut series = CurveSeries {
        label: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        x: Vec::new(),
        y: Vec::new(),
    };
    for (k, record) in reader.records().enumerate() {
        let line = k as u64 + 2;
        let record = record.map_err(|e| malformed(line, e.to_string()))?;
        let field = |i: usize| -> Result<f64> {
            let text = record.get(i).unwrap_or("");
            text.trim()
                .parse()
                .map_err(|_| malformed(line, format!("`{text}` is not a number")))
        };
        series.x.push(field(xi)?);
        series.y.push(field(yi)?);
    }
    if series.x.is_empty() {
        return Err(malformed(1, "no data rows".into()));
    }
    Ok(series)
}

/// Learning curves: the ES runs as a mean line inside a min/max band, with
/// the PPO curve appended after the last ES iteration.
pub fn plot_learning_curves(es_runs: &[CurveSeries], ppo: Option<&CurveSeries>, path: &Path) -> Result<PlotSummary> {
    let first = es_runs
        .first()
        .ok_or_else(|| Error::Plot("no learning curves to plot".into()))?;
    let n = es_runs.iter().map(|c| c.x.len()).min().unwrap_or(0);
    if n == 0 {
        return Err(Error::Plot("empty learning curve".into()));
    }
    let xs = &first.x[..n];
    let column = |i: usize| es_runs.iter().map(move |c| c.y[i]);
    let mean: Vec<f64> = (0..n).map(|i| column(i).sum::<f64>() / es_runs.len() as f64).collect();
    let low: Vec<f64> = (0..n).map(|i| column(i).fold(f64::INFINITY, f64::min)).collect();
    let high: Vec<f64> = (0..n).map(|i| column(i).fold(f64::NEG_INFINITY, f64::max)).collect();
    let offset = xs[n - 1] + 1.0;
    let ppo_points: Vec<(f64, f64)> = ppo
        .map(|c| c.x.iter().zip(&c.y).map(|(x, y)| (x + offset, *y)).collect())
        .unwrap_or_default();

    let x_range = range_of(xs.iter().copied().chain(ppo_points.iter().map(|p| p.0)));
    let y_range = range_of(
        low.iter()
            .chain(&high)
            .copied()
            .chain(ppo_points.iter().map(|p| p.1))
            .filter(|v| *v > 0.0),
    );
    let log_y = y_range.start > 0.0 && y_range.end / y_range.start > 100.0;
    let title = "Evaluation cost per iteration".to_string();
    let mut series = vec![format!("es (mean of {})", es_runs.len())];
    if ppo.is_some() {
        series.push("ppo".into());
    }

    let root = SVGBackend::new(path, (WIDTH, 2 * PANEL_HEIGHT)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let x_axis = x_range.start..x_range.end.max(x_range.start + 1.0);
    let mut builder = ChartBuilder::on(&root);
    builder
        .caption(&title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(70);
    let band: Vec<(f64, f64)> = xs
        .iter()
        .zip(&high)
        .map(|(x, y)| (*x, *y))
        .chain(xs.iter().zip(&low).rev().map(|(x, y)| (*x, *y)))
        .collect();
    let mean_line: Vec<(f64, f64)> = xs.iter().copied().zip(mean.iter().copied()).collect();
    macro_rules! draw {
        ($chart:expr) => {{
            let mut chart = $chart;
            chart
                .configure_mesh()
                .x_desc("iteration")
                .y_desc("cost")
                .draw()
                .map_err(plot_err)?;
            if es_runs.len() > 1 {
                chart
                    .draw_series(std::iter::once(Polygon::new(band.clone(), BLUE.mix(0.2).filled())))
                    .map_err(plot_err)?;
            }
            chart
                .draw_series(LineSeries::new(mean_line.clone(), &BLUE))
                .map_err(plot_err)?
                .label(series[0].clone())
                .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE));
            if !ppo_points.is_empty() {
                chart
                    .draw_series(LineSeries::new(ppo_points.clone(), &RED))
                    .map_err(plot_err)?
                    .label("ppo")
                    .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED));
            }
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(plot_err)?;
        }};
    }
    if log_y {
        draw!(builder
            .build_cartesian_2d(x_axis, (y_range.start..y_range.end).log_scale())
            .map_err(plot_err)?);
    } else {
        draw!(builder
            .build_cartesian_2d(x_axis, padded(y_range.clone()))
            .map_err(plot_err)?);
    }
    root.present().map_err(plot_err)?;
    Ok(PlotSummary {
        path: path.to_path_buf(),
        title,
        x_range: (x_range.start, x_range.end),
        y_range: (y_range.start, y_range.end),
        series,
    })
}

const ZONE_COLORS: [RGBColor; 5] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
];

fn zone_color(i: usize) -> RGBColor {
    ZONE_COLORS[i % ZONE_COLORS.len()]
}

/// Four stacked panels comparing a DR day with the same day without the
/// event: zone temperatures, zone flows, supply-air temperature, and power
/// against the limit profile.
pub fn plot_dr_day(dr: &EpisodeTrace, reference: &EpisodeTrace, dt_hours: f64, path: &Path) -> Result<PlotSummary> {
    if dr.rows.is_empty() || reference.rows.is_empty() {
        return Err(Error::Plot("empty trace".into()));
    }
    let hours = |t: &EpisodeTrace| -> Vec<f64> { t.rows.iter().map(|r| r.step as f64 * dt_hours).collect() };
    let (h_dr, h_ref) = (hours(dr), hours(reference));
    let x_range = range_of(h_dr.iter().chain(&h_ref).copied());
    let x_axis = x_range.start..(x_range.end + dt_hours);
    let zones = dr.zone_count;
    let title = "DR day against the same day without an event".to_string();

    let root = SVGBackend::new(path, (WIDTH, 4 * PANEL_HEIGHT)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let root = root.titled(&title, ("sans-serif", 20)).map_err(plot_err)?;
    let panels = root.split_evenly((4, 1));

    type Getter = fn(&crate::env::TraceRow, usize) -> f64;
    let temp: Getter = |r, i| r.temps[i];
    let flow: Getter = |r, i| r.command.mdot[i];
    let panel = |area: &DrawingArea<SVGBackend, plotters::coord::Shift>, label: &str, get: Getter, count: usize| -> Result<()> {
        let y = range_of(
            dr.rows
                .iter()
                .chain(&reference.rows)
                .flat_map(|r| (0..count).map(move |i| get(r, i))),
        );
        let mut chart = ChartBuilder::on(area)
            .margin(8)
            .x_label_area_size(25)
            .y_label_area_size(60)
            .build_cartesian_2d(x_axis.clone(), padded(y))
            .map_err(plot_err)?;
        chart.configure_mesh().y_desc(label).draw().map_err(plot_err)?;
        for i in 0..count {
            let c = zone_color(i);
            chart
                .draw_series(LineSeries::new(h_dr.iter().zip(&dr.rows).map(|(x, r)| (*x, get(r, i))), c.stroke_width(2)))
                .map_err(plot_err)?;
            chart
                .draw_series(LineSeries::new(h_ref.iter().zip(&reference.rows).map(|(x, r)| (*x, get(r, i))), c.mix(0.4)))
                .map_err(plot_err)?;
        }
        Ok(())
    };
    panel(&panels[0], "zone temperature (C)", temp, zones)?;
    panel(&panels[1], "zone flow (kg/s)", flow, zones)?;
    panel(&panels[2], "supply air (C)", |r, _| r.command.t_da, 1)?;

    let p_range = range_of(
        dr.rows
            .iter()
            .chain(&reference.rows)
            .flat_map(|r| [r.power_kw, r.p_limit]),
    );
    let mut chart = ChartBuilder::on(&panels[3])
        .margin(8)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(x_axis.clone(), padded(p_range.clone()))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("hour")
        .y_desc("power (kW)")
        .draw()
        .map_err(plot_err)?;
    let limit_profile: Vec<(f64, f64)> = h_dr
        .iter()
        .zip(&dr.rows)
        .flat_map(|(x, r)| [(*x, r.p_limit), (*x + dt_hours, r.p_limit)])
        .collect();
    chart
        .draw_series(LineSeries::new(limit_profile, BLACK.stroke_width(2)))
        .map_err(plot_err)?
        .label("limit")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK));
    chart
        .draw_series(LineSeries::new(h_dr.iter().zip(&dr.rows).map(|(x, r)| (*x, r.power_kw)), RED.stroke_width(2)))
        .map_err(plot_err)?
        .label("power, DR")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED));
    chart
        .draw_series(LineSeries::new(h_ref.iter().zip(&reference.rows).map(|(x, r)| (*x, r.power_kw)), RED.mix(0.4)))
        .map_err(plot_err)?
        .label("power, no event")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED.mix(0.4)));
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(PlotSummary {
        path: path.to_path_buf(),
        title,
        x_range: (x_range.start, x_range.end),
        y_range: (p_range.start, p_range.end),
        series: vec!["power limit".into(), "power".into(), "zone temperature".into(), "zone flow".into(), "supply air".into()],
    })
}

/// Grouped bars of mean cost per controller, one bar per scenario group.
pub fn plot_cost_bars(summary: &[SummaryRow], path: &Path) -> Result<PlotSummary> {
    let groups = [ScenarioKind::NonDr.label(), ScenarioKind::Dr.label()];
    let rows: Vec<&SummaryRow> = summary.iter().filter(|s| groups.contains(&s.scenario.as_str())).collect();
    if rows.is_empty() {
        return Err(Error::Plot("no summary rows to plot".into()));
    }
    let mut controllers: Vec<&str> = Vec::new();
    for r in &rows {
        if !controllers.contains(&r.controller.as_str()) {
            controllers.push(&r.controller);
        }
    }
    let y_max = rows.iter().map(|r| r.mean_cost).fold(0.0, f64::max).max(1e-9) * 1.1;
    let title = "Mean episode cost by controller".to_string();
    let names: Vec<String> = controllers.iter().map(|s| s.to_string()).collect();

    let root = SVGBackend::new(path, (WIDTH, 2 * PANEL_HEIGHT)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = controllers.len() as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(&title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(70)
        .build_cartesian_2d(-0.5..n - 0.5, 0.0..y_max)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(controllers.len())
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                names.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("mean cost")
        .draw()
        .map_err(plot_err)?;
    let colors = [BLUE, RED];
    for (g, (group, color)) in groups.iter().zip(colors).enumerate() {
        let bars = rows.iter().filter(|r| r.scenario == *group).filter_map(|r| {
            let i = controllers.iter().position(|c| *c == r.controller)? as f64;
            let left = i - 0.4 + 0.4 * g as f64;
            Some(Rectangle::new([(left, 0.0), (left + 0.38, r.mean_cost)], color.filled()))
        });
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(*group)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(PlotSummary {
        path: path.to_path_buf(),
        title,
        x_range: (0.0, n - 1.0),
        y_range: (0.0, y_max),
        series: groups.iter().map(|g| g.to_string()).collect(),
    })
}

fn es_curve_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("es_curve") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Preferred controller for the DR-day plot: the fine-tuned policy when it
/// was evaluated, otherwise the first one listed.
fn dr_controller(report: &EvaluationReport) -> Option<&str> {
    report
        .controllers
        .iter()
        .find(|c| c.as_str() == "ppo")
        .or_else(|| report.controllers.first())
        .map(String::as_str)
}

/// Renders every plot from the artifacts under `layout`. All inputs are read
/// and checked before any file is written.
pub fn report(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PlotSummary>> {
    let out = layout.output_dir();
    require(&layout.es_curve())?;
    let es_runs = es_curve_files(&out)?
        .iter()
        .map(|p| read_curve(p, "iteration", "eval_cost"))
        .collect::<Result<Vec<_>>>()?;
    let ppo = if layout.ppo_curve().exists() {
        Some(read_curve(&layout.ppo_curve(), "iteration", "eval_cost_deterministic")?)
    } else {
        None
    };

    let report_path = layout.report_json();
    require(&report_path)?;
    let text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let evaluation: EvaluationReport = serde_json::from_str(&text)?;
    let controller = dr_controller(&evaluation).ok_or_else(|| Error::Plot("report lists no controllers".into()))?;
    let day = evaluation
        .rows
        .iter()
        .find(|r| r.controller == controller)
        .map(|r| r.day)
        .ok_or_else(|| Error::Plot(format!("no rows for controller `{controller}`")))?;
    let traces = layout.trace_dir();
    let load = |kind| {
        let p = traces.join(trace_file(controller, day, kind));
        require(&p)?;
        EpisodeTrace::read_csv(&p)
    };
    let dr = load(ScenarioKind::Dr)?;
    let reference = load(ScenarioKind::NonDr)?;
    let dt = cfg.scenario.dt;

    let dir = layout.plot_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(vec![
        plot_learning_curves(&es_runs, ppo.as_ref(), &dir.join("learning_curve.svg"))?,
        plot_dr_day(&dr, &reference, dt, &dir.join("dr_day.svg"))?,
        plot_cost_bars(&evaluation.summary, &dir.join("cost_bars.svg"))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn curve_x_range_matches_the_csv() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "es_curve.csv", "iteration,eval_cost\n0,100\n1,80\n2,50\n3,40\n");
        let c = read_curve(&csv, "iteration", "eval_cost").unwrap();
        let out = dir.path().join("lc.svg");
        let s = plot_learning_curves(std::slice::from_ref(&c), None, &out).unwrap();
        assert_eq!(s.x_range, (0.0, 3.0));
        assert_eq!(c.x, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(fs::read_to_string(out).unwrap().starts_with("<svg"));
    }

    #[test]
    fn malformed_row_reports_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "c.csv", "iteration,eval_cost\n0,1\n1,abc\n");
        match read_curve(&csv, "iteration", "eval_cost") {
            Err(Error::MalformedCsv { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_curve_is_rejected_without_output() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "c.csv", "iteration,eval_cost\n");
        assert!(read_curve(&csv, "iteration", "eval_cost").is_err());
        let out = dir.path().join("lc.svg");
        assert!(plot_learning_curves(&[], None, &out).is_err());
        assert!(!out.exists());
        assert!(plot_cost_bars(&[], &out).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn missing_column_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "c.csv", "iteration,cost\n0,1\n");
        assert!(matches!(
            read_curve(&csv, "iteration", "eval_cost"),
            Err(Error::MalformedCsv { line: 1, .. })
        ));
    }

    #[test]
    fn band_spans_several_runs_and_ppo_extends_the_axis() {
        let dir = tempfile::tempdir().unwrap();
        let run = |k: f64| CurveSeries {
            label: "r".into(),
            x: (0..10).map(f64::from).collect(),
            y: (0..10).map(|i| 100.0 / (1.0 + i as f64) + k).collect(),
        };
        let ppo = CurveSeries {
            label: "p".into(),
            x: (0..5).map(f64::from).collect(),
            y: vec![12.0; 5],
        };
        let s = plot_learning_curves(&[run(0.0), run(5.0)], Some(&ppo), &dir.path().join("a.svg")).unwrap();
        assert_eq!(s.x_range, (0.0, 14.0));
        assert_eq!(s.series.len(), 2);
    }
}
