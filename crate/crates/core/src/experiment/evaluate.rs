use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{factory_for, require, ControllerName, ExperimentConfig, Layout};
use crate::env::{comfort_band, describe_event, DrEvent, Episode, EpisodeTrace, ScenarioConfig};
use crate::error::{Error, Result};
use crate::mpc::{MpcConfig, MpcController, MpcVariant};
use crate::nn::{Checkpoint, CheckpointKind, GaussianPolicy, Mlp};
use crate::rom::HvacCommand;

pub const REPORT_FORMAT_VERSION: u32 = 1;
/// Supply-air temperature held by the rule-based controller.
pub const RULE_BASED_T_DA: f64 = 13.0;
/// Overshoot above the limit that counts as a violated step.
const VIOLATION_MARGIN_KW: f64 = 1.0;

/// A loaded controller ready to drive episodes.
#[derive(Clone, Debug)]
pub enum Controller {
    Deterministic(Mlp),
    /// Acts with the mean of the distribution.
    Gaussian(GaussianPolicy),
    Mpc(MpcConfig),
    /// Mid flows while occupied, minimum flows otherwise.
    RuleBased,
}

impl Controller {
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        require(path)?;
        let ck = Checkpoint::load(path)?;
        match ck.kind() {
            CheckpointKind::Deterministic => Ok(Controller::Deterministic(ck.to_mlp()?)),
            CheckpointKind::GaussianPolicy => Ok(Controller::Gaussian(ck.to_policy()?)),
            CheckpointKind::Value => Err(Error::Checkpoint(format!(
                "{} holds a value network, not a policy",
                path.display()
            ))),
        }
    }

    pub fn load(name: &ControllerName, cfg: &ExperimentConfig, layout: &Layout) -> Result<Self> {
        let mpc = |variant| Controller::Mpc(MpcConfig { variant, ..cfg.mpc.clone() });
        let loaded = match name {
            ControllerName::Ppo => Controller::from_checkpoint(&layout.ppo_policy()),
            ControllerName::Es => Controller::from_checkpoint(&layout.es_policy()),
            ControllerName::Checkpoint(p) => Controller::from_checkpoint(p),
            ControllerName::MpcLin => Ok(mpc(MpcVariant::Lin)),
            ControllerName::MpcRom => Ok(mpc(MpcVariant::Rom)),
            ControllerName::RuleBased => Ok(Controller::RuleBased),
        };
        loaded.map_err(|e| Error::Controller {
            name: name.to_string(),
            source: Box::new(e),
        })
    }

    /// Drives `episode` to its end and returns its cost.
    pub fn run(&self, episode: &mut Episode) -> Result<f64> {
        match self {
            Controller::Deterministic(net) => episode.run(|s| net.forward(s.as_slice())),
            Controller::Gaussian(policy) => episode.run(|s| policy.mean_action(s.as_slice())),
            Controller::Mpc(config) => MpcController::new(config.clone())?.run_episode(episode),
            Controller::RuleBased => {
                while !episode.is_done() {
                    let cmd = rule_based_command(episode);
                    episode.step_command(&cmd)?;
                }
                Ok(episode.total_cost())
            }
        }
    }
}

fn rule_based_command(episode: &Episode) -> HvacCommand {
    let model = episode.model();
    let occupied = episode
        .config()
        .is_occupied(episode.current_step(), episode.is_weekday());
    HvacCommand {
        mdot: model
            .mdot_bounds
            .iter()
            .map(|b| if occupied { b.mid() } else { b.min })
            .collect(),
        t_da: model.t_da_bounds.clamp(RULE_BASED_T_DA),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    NonDr,
    Dr,
}

impl ScenarioKind {
    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::NonDr => "non-dr",
            ScenarioKind::Dr => "dr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvaluationJob {
    pub controller: usize,
    pub day: usize,
    pub scenario: ScenarioKind,
}

/// Controller-major job order; each day runs without and then with the event.
pub fn evaluation_jobs(controllers: usize, days: &[usize]) -> Vec<EvaluationJob> {
    (0..controllers)
        .flat_map(|controller| {
            days.iter().flat_map(move |&day| {
                [ScenarioKind::NonDr, ScenarioKind::Dr].map(|scenario| EvaluationJob {
                    controller,
                    day,
                    scenario,
                })
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub total_cost: f64,
    pub discomfort: f64,
    pub energy_kwh: f64,
    pub violation: f64,
    pub max_exceedance_kw: f64,
    pub exceedance_minutes: f64,
    /// Event steps whose power exceeds the limit by more than 1 kW.
    pub event_steps_over_1kw: usize,
    pub degree_hours: f64,
}

pub fn trace_metrics(
    trace: &EpisodeTrace,
    event: Option<&DrEvent>,
    config: &ScenarioConfig,
    is_weekday: bool,
) -> TraceMetrics {
    let mut m = TraceMetrics {
        total_cost: trace.total_cost(),
        ..TraceMetrics::default()
    };
    for row in &trace.rows {
        m.discomfort += row.costs.discomfort;
        m.energy_kwh += row.costs.energy_kwh;
        m.violation += row.costs.violation;
        let over = row.power_kw - row.p_limit;
        m.max_exceedance_kw = m.max_exceedance_kw.max(over);
        if over > 0.0 {
            m.exceedance_minutes += config.dt * 60.0;
        }
        if over > VIOLATION_MARGIN_KW && event.is_some_and(|e| e.contains(row.step)) {
            m.event_steps_over_1kw += 1;
        }
        let band = comfort_band(row.step, is_weekday, config);
        let excursion: f64 = row
            .temps
            .iter()
            .map(|&t| (t - band.upper).max(band.lower - t).max(0.0))
            .sum();
        m.degree_hours += excursion * config.dt;
    }
    m
}

/// Largest drop of any zone temperature below the reference trajectory over
/// the `window` steps up to and including `event_start`.
pub fn precooling(dr: &EpisodeTrace, reference: &EpisodeTrace, event_start: usize, window: usize) -> f64 {
    let lo = event_start.saturating_sub(window);
    (lo..=event_start)
        .filter_map(|s| Some((dr.rows.get(s)?, reference.rows.get(s)?)))
        .flat_map(|(a, b)| a.temps.iter().zip(&b.temps).map(|(x, y)| y - x))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub controller: String,
    pub day: usize,
    pub scenario: ScenarioKind,
    #[serde(flatten)]
    pub metrics: TraceMetrics,
    /// DR rows only.
    pub precool_drop_c: Option<f64>,
    pub precooled: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub controller: String,
    /// `non-dr`, `dr` or `all`.
    pub scenario: String,
    pub episodes: usize,
    pub mean_cost: f64,
    pub mean_discomfort: f64,
    pub mean_energy_kwh: f64,
    pub mean_violation: f64,
    pub max_exceedance_kw: f64,
    pub precool_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format_version: u32,
    pub dr_event: DrEvent,
    pub dr_description: String,
    pub controllers: Vec<String>,
    pub rows: Vec<EvaluationRow>,
    pub summary: Vec<SummaryRow>,
}

impl EvaluationReport {
    /// Mean cost of `controller`, over one scenario or over all rows.
    pub fn mean_cost(&self, controller: &str, scenario: Option<ScenarioKind>) -> Option<f64> {
        let label = scenario.map_or("all", ScenarioKind::label);
        self.summary
            .iter()
            .find(|s| s.controller == controller && s.scenario == label)
            .map(|s| s.mean_cost)
    }

    pub fn rows_for<'a>(&'a self, controller: &'a str) -> impl Iterator<Item = &'a EvaluationRow> + 'a {
        self.rows.iter().filter(move |r| r.controller == controller)
    }

    fn summarize(controllers: &[String], rows: &[EvaluationRow]) -> Vec<SummaryRow> {
        let mut out = Vec::new();
        for c in controllers {
            for scenario in ["non-dr", "dr", "all"] {
                let group: Vec<&EvaluationRow> = rows
                    .iter()
                    .filter(|r| &r.controller == c && (scenario == "all" || r.scenario.label() == scenario))
                    .collect();
                let n = group.len();
                if n == 0 {
                    continue;
                }
                let mean = |f: fn(&TraceMetrics) -> f64| group.iter().map(|r| f(&r.metrics)).sum::<f64>() / n as f64;
                let flags: Vec<bool> = group.iter().filter_map(|r| r.precooled).collect();
                out.push(SummaryRow {
                    controller: c.clone(),
                    scenario: scenario.into(),
                    episodes: n,
                    mean_cost: mean(|m| m.total_cost),
                    mean_discomfort: mean(|m| m.discomfort),
                    mean_energy_kwh: mean(|m| m.energy_kwh),
                    mean_violation: mean(|m| m.violation),
                    max_exceedance_kw: group
                        .iter()
                        .map(|r| r.metrics.max_exceedance_kw)
                        .fold(f64::NEG_INFINITY, f64::max),
                    precool_rate: (!flags.is_empty())
                        .then(|| flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64),
                });
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "controller",
            "day",
            "scenario",
            "total_cost",
            "discomfort",
            "energy_kwh",
            "violation",
            "max_exceedance_kw",
            "exceedance_minutes",
            "event_steps_over_1kw",
            "degree_hours",
            "precool_drop_c",
            "precooled",
        ])?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.rows {
            let m = &r.metrics;
            w.write_record([
                r.controller.clone(),
                r.day.to_string(),
                r.scenario.label().into(),
                m.total_cost.to_string(),
                m.discomfort.to_string(),
                m.energy_kwh.to_string(),
                m.violation.to_string(),
                m.max_exceedance_kw.to_string(),
                m.exceedance_minutes.to_string(),
                m.event_steps_over_1kw.to_string(),
                m.degree_hours.to_string(),
                opt(r.precool_drop_c.map(|x| x.to_string())),
                opt(r.precooled.map(|x| x.to_string())),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "controller",
            "scenario",
            "episodes",
            "mean_cost",
            "mean_discomfort",
            "mean_energy_kwh",
            "mean_violation",
            "max_exceedance_kw",
            "precool_rate",
        ])?;
        for s in &self.summary {
            w.write_record([
                s.controller.clone(),
                s.scenario.clone(),
                s.episodes.to_string(),
                s.mean_cost.to_string(),
                s.mean_discomfort.to_string(),
                s.mean_energy_kwh.to_string(),
                s.mean_violation.to_string(),
                s.max_exceedance_kw.to_string(),
                s.precool_rate.map(|x| x.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn file_stem(controller: &str) -> String {
    controller
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub(crate) fn trace_file(controller: &str, day: usize, scenario: ScenarioKind) -> String {
    format!("{}_day{:02}_{}.csv", file_stem(controller), day, scenario.label())
}

/// Runs every configured controller on the test days, with and without the
/// configured DR event, and writes the report, summary and traces.
pub fn evaluate(cfg: &ExperimentConfig, layout: &Layout) -> Result<EvaluationReport> {
    let settings = &cfg.evaluation;
    let factory = factory_for(cfg, layout, &layout.test_csv())?;
    let names = settings
        .controllers
        .iter()
        .map(|s| s.parse::<ControllerName>())
        .collect::<Result<Vec<_>>>()?;
    if names.is_empty() {
        return Err(Error::InvalidConfig("no controllers to evaluate".into()));
    }
    let controllers = names
        .iter()
        .map(|n| Controller::load(n, cfg, layout))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = names.iter().map(|n| n.to_string()).collect();

    let days: Vec<usize> = if settings.days.is_empty() {
        (0..factory.day_count()).collect()
    } else {
        settings.days.clone()
    };
    if let Some(&d) = days.iter().find(|&&d| d >= factory.day_count()) {
        return Err(Error::InvalidConfig(format!(
            "evaluation day {d} beyond {} test days",
            factory.day_count()
        )));
    }
    let sc = factory.config();
    let event = DrEvent::from_chi(settings.dr_chi, sc.step_of_hour(settings.dr_start_hour), sc.dt);
    if event.end_step() > sc.horizon {
        return Err(Error::InvalidConfig(format!(
            "DR event ending at step {} runs past the {}-step day",
            event.end_step(),
            sc.horizon
        )));
    }

    let jobs = evaluation_jobs(controllers.len(), &days);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.es.worker_count)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let run = |job: &EvaluationJob| -> Result<(EpisodeTrace, TraceMetrics)> {
        let ev = (job.scenario == ScenarioKind::Dr).then_some(event);
        let mut episode = factory.make_with(job.day, ev)?.with_trace();
        let weekday = episode.is_weekday();
        controllers[job.controller].run(&mut episode)?;
        let trace = episode.into_trace().expect("trace requested");
        let metrics = trace_metrics(
            &trace,
            (job.scenario == ScenarioKind::Dr).then_some(&event),
            sc,
            weekday,
        );
        Ok((trace, metrics))
    };
    let results = pool.install(|| jobs.par_iter().map(run).collect::<Vec<_>>());
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let window = (settings.precool_window_hours * sc.steps_per_hour()).round() as usize;
    let mut rows = Vec::with_capacity(jobs.len());
    for (k, (job, (trace, metrics))) in jobs.iter().zip(&results).enumerate() {
        let (drop, flag) = match job.scenario {
            ScenarioKind::NonDr => (None, None),
            ScenarioKind::Dr => {
                let reference = &results[k - 1].0;
                let d = precooling(trace, reference, event.start_step, window);
                (Some(d), Some(d >= settings.precool_threshold))
            }
        };
        rows.push(EvaluationRow {
            controller: labels[job.controller].clone(),
            day: job.day,
            scenario: job.scenario,
            metrics: *metrics,
            precool_drop_c: drop,
            precooled: flag,
        });
    }

    let report = EvaluationReport {
        format_version: REPORT_FORMAT_VERSION,
        dr_description: describe_event(&event, sc.dt),
        dr_event: event,
        summary: EvaluationReport::summarize(&labels, &rows),
        controllers: labels,
        rows,
    };

    layout.prepare(&layout.output_dir(), cfg)?;
    report.write_csv(&layout.report_csv())?;
    report.write_summary_csv(&layout.summary_csv())?;
    let json_path = layout.report_json();
    fs::write(&json_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json_path, e))?;
    if settings.write_traces {
        let dir = layout.trace_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (job, (trace, _)) in jobs.iter().zip(&results) {
            trace.write_csv(&dir.join(trace_file(&report.controllers[job.controller], job.day, job.scenario)))?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{CostBreakdown, TraceRow, Weights};
    use proptest::prelude::*;

    fn row(step: usize, temps: Vec<f64>, power: f64, limit: f64) -> TraceRow {
        TraceRow {
            step,
            temps,
            command: HvacCommand { mdot: vec![1.0], t_da: 13.0 },
            power_kw: power,
            p_limit: limit,
            weights: Weights([0.7, 0.2, 0.1]),
            reward: -1.0,
            costs: CostBreakdown {
                discomfort: 0.5,
                energy_kwh: 2.0,
                violation: 0.0,
            },
            solver: None,
        }
    }

    fn trace(rows: Vec<TraceRow>) -> EpisodeTrace {
        EpisodeTrace { zone_count: 1, rows }
    }

    #[test]
    fn jobs_pair_each_day_without_then_with_event() {
        let jobs = evaluation_jobs(2, &[3, 5]);
        assert_eq!(jobs.len(), 8);
        assert_eq!(jobs[0], EvaluationJob { controller: 0, day: 3, scenario: ScenarioKind::NonDr });
        assert_eq!(jobs[1], EvaluationJob { controller: 0, day: 3, scenario: ScenarioKind::Dr });
        assert_eq!(jobs[7], EvaluationJob { controller: 1, day: 5, scenario: ScenarioKind::Dr });
    }

    #[test]
    fn exceedance_counts_only_event_steps_beyond_margin() {
        let cfg = ScenarioConfig::default();
        let event = DrEvent::from_chi(0.3, 2, cfg.dt);
        let rows = vec![
            row(0, vec![23.0], 90.0, 80.0),
            row(1, vec![23.0], 50.0, 80.0),
            row(2, vec![23.0], 36.5, 36.0),
            row(3, vec![23.0], 38.0, 36.0),
            row(4, vec![23.0], 40.0, 36.0),
        ];
        let m = trace_metrics(&trace(rows), Some(&event), &cfg, true);
        assert_eq!(m.event_steps_over_1kw, 2);
        assert_eq!(m.max_exceedance_kw, 10.0);
        assert!((m.exceedance_minutes - 20.0).abs() < 1e-9);
        assert!((m.total_cost - 5.0).abs() < 1e-12);
        assert!((m.energy_kwh - 10.0).abs() < 1e-12);
    }

    #[test]
    fn degree_hours_follow_the_band() {
        let cfg = ScenarioConfig::default();
        let noon = cfg.step_of_hour(12.0);
        let band = comfort_band(noon, true, &cfg);
        let rows = vec![row(noon, vec![band.upper + 1.5], 10.0, 80.0)];
        let m = trace_metrics(&trace(rows), None, &cfg, true);
        assert!((m.degree_hours - 1.5 * cfg.dt).abs() < 1e-12);
        assert_eq!(m.event_steps_over_1kw, 0);
    }

    #[test]
    fn precooling_measures_the_window_before_the_event() {
        let base = trace((0..10).map(|s| row(s, vec![24.0], 10.0, 80.0)).collect());
        let mut dr = base.clone();
        dr.rows[2].temps[0] = 23.0;
        dr.rows[7].temps[0] = 22.0;
        assert!((precooling(&dr, &base, 5, 2) - 0.0).abs() < 1e-12);
        assert!((precooling(&dr, &base, 5, 3) - 1.0).abs() < 1e-12);
        assert!((precooling(&dr, &base, 8, 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rule_based_respects_occupancy() {
        let model = crate::rom::BuildingModel::five_zone_reference();
        let cfg = ScenarioConfig::default();
        let exo = crate::rom::generate_synthetic_exogenous(&crate::rom::WeatherConfig::default(), 1, 3);
        let factory = crate::env::EnvFactory::new(model.clone(), cfg.clone(), vec![exo]).unwrap();
        let mut ep = factory.make_with(0, None).unwrap().with_trace();
        Controller::RuleBased.run(&mut ep).unwrap();
        let t = ep.into_trace().unwrap();
        for r in &t.rows {
            let occupied = cfg.is_occupied(r.step, true);
            let expect = if occupied { model.mdot_bounds[0].mid() } else { model.mdot_bounds[0].min };
            assert_eq!(r.command.mdot[0], expect);
            assert_eq!(r.command.t_da, RULE_BASED_T_DA);
        }
    }

    proptest! {
        #[test]
        fn identical_traces_never_precool(temps in proptest::collection::vec(15.0f64..30.0, 1..40), start in 0usize..40) {
            let t = trace(temps.iter().enumerate().map(|(s, &x)| row(s, vec![x], 1.0, 80.0)).collect());
            prop_assert_eq!(precooling(&t, &t, start, 48), 0.0);
        }

        #[test]
        fn summary_mean_matches_rows(costs in proptest::collection::vec(0.0f64..1e4, 1..12)) {
            let rows: Vec<EvaluationRow> = costs
                .iter()
                .enumerate()
                .map(|(i, &c)| EvaluationRow {
                    controller: "x".into(),
                    day: i,
                    scenario: if i % 2 == 0 { ScenarioKind::NonDr } else { ScenarioKind::Dr },
                    metrics: TraceMetrics { total_cost: c, ..TraceMetrics::default() },
                    precool_drop_c: None,
                    precooled: None,
                })
                .collect();
            let s = EvaluationReport::summarize(&["x".into()], &rows);
            let all = s.iter().find(|r| r.scenario == "all").unwrap();
            let mean = costs.iter().sum::<f64>() / costs.len() as f64;
            prop_assert!((all.mean_cost - mean).abs() <= 1e-9 * mean.max(1.0));
            prop_assert_eq!(all.episodes, costs.len());
        }
    }
}
