use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_state, comfort_band, denormalize_action, discomfort, reward, sample_dr_event,
    violation_penalty, CostBreakdown, DrEvent, EnvState, ScenarioConfig, StateInputs, Weights,
};
use crate::error::{Error, Result};
use crate::rom::{hvac_power, interval_energy, BuildingModel, ExogenousRecord, HvacCommand, ThermalHistory};

/// Result of one control step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: EnvState,
    pub reward: f64,
    pub costs: CostBreakdown,
    pub power_kw: f64,
    pub p_limit: f64,
    pub weights: Weights,
    pub command: HvacCommand,
    pub done: bool,
}

/// Optimizer bookkeeping attached to a trace row by model-based controllers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub solve_ms: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// One logged step. `temps` are the zone temperatures at the start of the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub temps: Vec<f64>,
    pub command: HvacCommand,
    pub power_kw: f64,
    pub p_limit: f64,
    pub weights: Weights,
    pub reward: f64,
    pub costs: CostBreakdown,
    pub solver: Option<SolverStats>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub zone_count: usize,
    pub rows: Vec<TraceRow>,
}

impl EpisodeTrace {
    pub fn header(zone_count: usize, with_solver: bool) -> Vec<String> {
        let mut h = vec!["step".to_string()];
        h.extend((1..=zone_count).map(|i| format!("t_zone_{i}")));
        h.extend((1..=zone_count).map(|i| format!("mdot_{i}")));
        for c in [
            "t_da", "power_kw", "p_limit_kw", "w_comfort", "w_energy", "w_limit", "reward",
            "discomfort", "energy_kwh", "violation",
        ] {
            h.push(c.into());
        }
        if with_solver {
            h.extend(["solve_ms", "iterations", "converged"].map(String::from));
        }
        h
    }

    fn has_solver(&self) -> bool {
        self.rows.iter().any(|r| r.solver.is_some())
    }

    /// Undiscounted episode cost.
    pub fn total_cost(&self) -> f64 {
        -self.rows.iter().map(|r| r.reward).sum::<f64>()
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let solver = self.has_solver();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::header(self.zone_count, solver))?;
        for r in &self.rows {
            let mut row = vec![r.step.to_string()];
            row.extend(r.temps.iter().map(f64::to_string));
            row.extend(r.command.mdot.iter().map(f64::to_string));
            row.extend(
                [
                    r.command.t_da,
                    r.power_kw,
                    r.p_limit,
                    r.weights.0[0],
                    r.weights.0[1],
                    r.weights.0[2],
                    r.reward,
                    r.costs.discomfort,
                    r.costs.energy_kwh,
                    r.costs.violation,
                ]
                .iter()
                .map(f64::to_string),
            );
            if solver {
                let s = r.solver.unwrap_or_default();
                row.push(s.solve_ms.to_string());
                row.push(s.iterations.to_string());
                row.push(u8::from(s.converged).to_string());
            }
            w.write_record(&row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Dataset(format!("csv flush: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Dataset(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text).map_err(|e| match e {
            Error::MalformedCsv { line, message, .. } => Error::MalformedCsv {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let malformed = |line: u64, message: String| Error::MalformedCsv {
            path: "<memory>".into(),
            line,
            message,
        };
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        let cols = header.len();
        let (n, solver) = if cols >= 14 && (cols - 14) % 2 == 0 && header.get(cols - 1) == Some("converged") {
            ((cols - 14) / 2, true)
        } else if cols >= 11 && (cols - 11) % 2 == 0 {
            ((cols - 11) / 2, false)
        } else {
            return Err(malformed(1, format!("unexpected column count {cols}")));
        };
        if header.iter().ne(Self::header(n, solver).iter().map(String::as_str)) {
            return Err(malformed(1, "header does not match trace schema".into()));
        }
        let mut trace = EpisodeTrace {
            zone_count: n,
            rows: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() != cols {
                return Err(malformed(line, format!("expected {cols} fields, got {}", rec.len())));
            }
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| malformed(line, format!("column `{}` is not a number", &header[k])))
            };
            let int = |k: usize| -> Result<usize> {
                rec[k]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| malformed(line, format!("column `{}` is not an integer", &header[k])))
            };
            let block = |off: usize| -> Result<Vec<f64>> { (off..off + n).map(num).collect() };
            let base = 1 + 2 * n;
            trace.rows.push(TraceRow {
                step: int(0)?,
                temps: block(1)?,
                command: HvacCommand {
                    mdot: block(1 + n)?,
                    t_da: num(base)?,
                },
                power_kw: num(base + 1)?,
                p_limit: num(base + 2)?,
                weights: Weights([num(base + 3)?, num(base + 4)?, num(base + 5)?]),
                reward: num(base + 6)?,
                costs: CostBreakdown {
                    discomfort: num(base + 7)?,
                    energy_kwh: num(base + 8)?,
                    violation: num(base + 9)?,
                },
                solver: if solver {
                    Some(SolverStats {
                        solve_ms: num(base + 10)?,
                        iterations: int(base + 11)?,
                        converged: int(base + 12)? != 0,
                    })
                } else {
                    None
                },
            });
        }
        if trace.rows.is_empty() {
            return Err(malformed(1, "no data rows".into()));
        }
        Ok(trace)
    }
}

/// One day of building operation under a fixed (possibly absent) DR event.
#[derive(Clone, Debug)]
pub struct Episode {
    model: Arc<BuildingModel>,
    config: Arc<ScenarioConfig>,
    day: Arc<[ExogenousRecord]>,
    event: Option<DrEvent>,
    history: ThermalHistory,
    step: usize,
    /// Outdoor temperatures with `k_history - 1` leading copies of the first value.
    t_out_padded: Vec<f64>,
    /// Power limit per step, extended past the horizon with the normal limit.
    limits: Vec<f64>,
    costs: CostBreakdown,
    total_cost: f64,
    discounted_return: f64,
    trace: Option<EpisodeTrace>,
}

impl Episode {
    pub fn new(
        model: Arc<BuildingModel>,
        config: Arc<ScenarioConfig>,
        day: Arc<[ExogenousRecord]>,
        event: Option<DrEvent>,
    ) -> Result<Self> {
        if day.len() < config.horizon {
            return Err(Error::DataTooShort {
                needed: config.horizon,
                available: day.len(),
            });
        }
        if (model.dt - config.dt).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "building dt {} differs from scenario dt {}",
                model.dt, config.dt
            )));
        }
        let n = model.zone_count();
        if let Some(bad) = day.iter().find(|r| r.q_solar.len() != n || r.q_int.len() != n) {
            return Err(Error::Dataset(format!(
                "exogenous record {} does not match a {n}-zone building",
                bad.step_index
            )));
        }
        if let Some(e) = &event {
            if e.end_step() > config.horizon {
                return Err(Error::InvalidConfig(format!(
                    "event ending at step {} exceeds the horizon",
                    e.end_step()
                )));
            }
        }
        let mut t_out_padded = vec![day[0].t_out; config.k_history - 1];
        t_out_padded.extend(day[..config.horizon].iter().map(|r| r.t_out));
        let limits = (0..config.horizon + config.k_forecast)
            .map(|t| match &event {
                Some(e) if e.contains(t) => e.power_limit,
                _ => config.p_limit_normal,
            })
            .collect();

        let initial = vec![config.initial_temp; n];
        let idle = HvacCommand {
            mdot: model.mdot_bounds.iter().map(|b| b.min).collect(),
            t_da: model.t_da_bounds.max,
        };
        let history = ThermalHistory::steady(model.history_depth(), initial, &idle, &day[0]);
        Ok(Episode {
            model,
            config,
            day,
            event,
            history,
            step: 0,
            t_out_padded,
            limits,
            costs: CostBreakdown::default(),
            total_cost: 0.0,
            discounted_return: 0.0,
            trace: None,
        })
    }

    /// New episode whose DR event is drawn from `seed`.
    pub fn reset(
        model: Arc<BuildingModel>,
        config: Arc<ScenarioConfig>,
        day: Arc<[ExogenousRecord]>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let event = sample_dr_event(&mut rng, &config);
        Self::new(model, config, day, event)
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(EpisodeTrace {
            zone_count: self.model.zone_count(),
            rows: Vec::new(),
        });
        self
    }

    pub fn model(&self) -> &BuildingModel {
        &self.model
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn day(&self) -> &[ExogenousRecord] {
        &self.day
    }

    pub fn event(&self) -> Option<&DrEvent> {
        self.event.as_ref()
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.horizon
    }

    pub fn temps(&self) -> &[f64] {
        self.history.current()
    }

    pub fn history(&self) -> &ThermalHistory {
        &self.history
    }

    pub fn is_weekday(&self) -> bool {
        self.day[0].is_weekday
    }

    pub fn in_dr(&self, step: usize) -> bool {
        self.event.as_ref().is_some_and(|e| e.contains(step))
    }

    /// Power limit at `step`, kW. Steps past the horizon use the normal limit.
    pub fn p_limit(&self, step: usize) -> f64 {
        self.limits
            .get(step)
            .copied()
            .unwrap_or(self.config.p_limit_normal)
    }

    pub fn weights_at(&self, step: usize) -> Weights {
        if self.in_dr(step) {
            self.config.weights_dr
        } else {
            self.config.weights_normal
        }
    }

    pub fn exogenous(&self, step: usize) -> &ExogenousRecord {
        &self.day[step.min(self.day.len() - 1)]
    }

    /// Sum of the unweighted cost terms so far.
    pub fn cumulative_costs(&self) -> CostBreakdown {
        self.costs
    }

    /// Undiscounted cost accumulated so far (negated return).
    pub fn total_cost(&self) -> f64 {
        self.total_cost
    }

    pub fn discounted_return(&self) -> f64 {
        self.discounted_return
    }

    pub fn trace(&self) -> Option<&EpisodeTrace> {
        self.trace.as_ref()
    }

    pub fn into_trace(self) -> Option<EpisodeTrace> {
        self.trace
    }

    /// Attaches solver statistics to the most recent trace row.
    pub fn annotate_last(&mut self, stats: SolverStats) {
        if let Some(row) = self.trace.as_mut().and_then(|t| t.rows.last_mut()) {
            row.solver = Some(stats);
        }
    }

    pub fn state(&self) -> Result<EnvState> {
        let t = self.step;
        let k = self.config.k_history;
        let end = (t + k).min(self.t_out_padded.len());
        let f = self.config.k_forecast;
        let limits: Vec<f64> = (t..t + f).map(|s| self.p_limit(s)).collect();
        build_state(
            &StateInputs {
                temps: self.history.current(),
                t_out_history: &self.t_out_padded[end - k..end],
                is_weekday: self.is_weekday(),
                step: t,
                p_limits: &limits,
                weights: self.weights_at(t),
            },
            &self.config,
        )
    }

    /// Runs the remaining steps with `policy` mapping states to raw actions
    /// and returns the undiscounted episode cost.
    pub fn run<F>(&mut self, mut policy: F) -> Result<f64>
    where
        F: FnMut(&EnvState) -> Result<Vec<f64>>,
    {
        let mut state = self.state()?;
        while !self.is_done() {
            let action = policy(&state)?;
            state = self.step(&action)?.next_state;
        }
        Ok(self.total_cost)
    }

    /// Applies a raw policy output.
    pub fn step(&mut self, raw_action: &[f64]) -> Result<StepOutcome> {
        let cmd = denormalize_action(raw_action, &self.model)?;
        self.step_command(&cmd)
    }

    /// Applies an actuator command, which must lie inside the building's bounds.
    pub fn step_command(&mut self, cmd: &HvacCommand) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::EpisodeDone { steps: self.step });
        }
        self.model.check_command(cmd)?;
        let t = self.step;
        let exo = &self.day[t];
        // metered power cannot go negative
        let power_kw = hvac_power(cmd, exo.t_out, &self.model.power).max(0.0);
        let p_limit = self.p_limit(t);
        let weights = self.weights_at(t);
        let start_temps = self.history.current().to_vec();
        let next = self.history.advance(&self.model, cmd, exo)?;
        let band = comfort_band(t + 1, exo.is_weekday, &self.config);
        let costs = CostBreakdown {
            discomfort: next.iter().map(|x| discomfort(*x, band)).sum(),
            energy_kwh: interval_energy(power_kw, self.config.dt),
            violation: violation_penalty(power_kw, p_limit),
        };
        let r = reward(&weights, &self.config.kappa, &costs);
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("reward at step {t}")));
        }
        self.costs += costs;
        self.total_cost -= r;
        self.discounted_return += self.config.discount.powi(t as i32) * r;
        self.step += 1;
        if let Some(trace) = self.trace.as_mut() {
            trace.rows.push(TraceRow {
                step: t,
                temps: start_temps,
                command: cmd.clone(),
                power_kw,
                p_limit,
                weights,
                reward: r,
                costs,
                solver: None,
            });
        }
        Ok(StepOutcome {
            next_state: self.state()?,
            reward: r,
            costs,
            power_kw,
            p_limit,
            weights,
            command: cmd.clone(),
            done: self.is_done(),
        })
    }
}

/// Creates episodes over a fixed pool of days.
#[derive(Clone, Debug)]
pub struct EnvFactory {
    model: Arc<BuildingModel>,
    config: Arc<ScenarioConfig>,
    days: Vec<Arc<[ExogenousRecord]>>,
}

impl EnvFactory {
    pub fn new(model: BuildingModel, config: ScenarioConfig, days: Vec<Vec<ExogenousRecord>>) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        if days.is_empty() {
            return Err(Error::Dataset("no days to build episodes from".into()));
        }
        if let Some(short) = days.iter().find(|d| d.len() < config.horizon) {
            return Err(Error::DataTooShort {
                needed: config.horizon,
                available: short.len(),
            });
        }
        Ok(EnvFactory {
            model: Arc::new(model),
            config: Arc::new(config),
            days: days.into_iter().map(Arc::from).collect(),
        })
    }

    pub fn model(&self) -> &BuildingModel {
        &self.model
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn day_count(&self) -> usize {
        self.days.len()
    }

    pub fn day(&self, index: usize) -> &[ExogenousRecord] {
        &self.days[index]
    }

    /// Episode on a day and with an event both drawn from `seed`.
    pub fn make(&self, seed: u64) -> Result<Episode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let day = rng.gen_range(0..self.days.len());
        let event = sample_dr_event(&mut rng, &self.config);
        self.make_with(day, event)
    }

    pub fn make_with(&self, day: usize, event: Option<DrEvent>) -> Result<Episode> {
        let d = self.days.get(day).ok_or_else(|| {
            Error::InvalidConfig(format!("day {day} out of range 0..{}", self.days.len()))
        })?;
        Episode::new(self.model.clone(), self.config.clone(), d.clone(), event)
    }
}

/// Renders a short human-readable summary of an event.
pub fn describe_event(e: &DrEvent, dt_hours: f64) -> String {
    let mut s = String::new();
    let start = e.start_step as f64 * dt_hours * 60.0;
    let end = e.end_minute(dt_hours);
    let hm = |m: f64| format!("{:02}:{:02}", (m / 60.0).floor() as u32, (m % 60.0).round() as u32);
    let _ = write!(s, "{}-{} at {} kW", hm(start), hm(end), e.power_limit);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rom::{generate_synthetic_exogenous, WeatherConfig};

    fn factory(days: usize) -> EnvFactory {
        let recs = generate_synthetic_exogenous(&WeatherConfig::default(), days, 1);
        let days = recs.chunks(288).map(|c| c.to_vec()).collect();
        EnvFactory::new(BuildingModel::five_zone_reference(), ScenarioConfig::default(), days).unwrap()
    }

    #[test]
    fn full_episode_has_288_steps() {
        let f = factory(2);
        let mut ep = f.make(3).unwrap();
        let mut n = 0;
        loop {
            let out = ep.step(&[0.0; 6]).unwrap();
            n += 1;
            assert_eq!(out.next_state.len(), 108);
            if out.done {
                break;
            }
        }
        assert_eq!(n, 288);
        assert!(matches!(ep.step(&[0.0; 6]), Err(Error::EpisodeDone { steps: 288 })));
    }

    #[test]
    fn reward_matches_external_recomputation() {
        let f = factory(1);
        let ev = DrEvent::from_chi(0.3, 168, 1.0 / 12.0);
        let mut ep = f.make_with(0, Some(ev)).unwrap();
        let cfg = f.config().clone();
        let mut total = 0.0;
        for t in 0..288 {
            let raw = [((t % 7) as f64 - 3.0) * 0.4; 6];
            let out = ep.step(&raw).unwrap();
            let w = if ev.contains(t) { cfg.weights_dr } else { cfg.weights_normal };
            let c = out.costs;
            let r = -(w.0[0] * c.discomfort + w.0[1] * c.energy_kwh + w.0[2] * c.violation);
            assert!((out.reward - r).abs() < 1e-12);
            assert!(out.reward <= 0.0);
            assert_eq!(out.reward == 0.0, c.discomfort == 0.0 && c.energy_kwh * w.0[1] == 0.0 && c.violation == 0.0);
            total -= out.reward;
            if ev.contains(t) {
                assert_eq!(out.weights.0, [0.5, 0.0, 0.5]);
            }
            if ev.contains(t + 1) {
                assert_eq!(out.next_state.weights(), &[0.5, 0.0, 0.5]);
            }
        }
        assert!((ep.total_cost() - total).abs() < 1e-9);
    }

    #[test]
    fn reset_is_deterministic() {
        let f = factory(1);
        let day: Arc<[ExogenousRecord]> = Arc::from(f.day(0).to_vec());
        let m = Arc::new(f.model().clone());
        let c = Arc::new(f.config().clone());
        let a = Episode::reset(m.clone(), c.clone(), day.clone(), 17).unwrap();
        let b = Episode::reset(m, c, day, 17).unwrap();
        assert_eq!(a.state().unwrap(), b.state().unwrap());
        assert_eq!(a.event(), b.event());
    }

    #[test]
    fn forecast_window_reveals_event_four_hours_ahead() {
        let f = factory(1);
        let ev = DrEvent::from_chi(0.3, 168, 1.0 / 12.0);
        let mut ep = f.make_with(0, Some(ev)).unwrap();
        let s0 = ep.state().unwrap();
        assert!(s0.p_limit_forecast().iter().all(|p| *p == 1.0));
        for _ in 0..(168 - 47) {
            ep.step(&[0.0; 6]).unwrap();
        }
        let s = ep.state().unwrap();
        let fc = s.p_limit_forecast();
        assert_eq!(fc[47], 36.0 / 80.0);
        assert!(fc[..47].iter().all(|p| *p == 1.0));

        let none = f.make_with(0, None).unwrap();
        assert!(none.state().unwrap().p_limit_forecast().iter().all(|p| *p == 1.0));
    }

    #[test]
    fn history_is_padded_with_first_value() {
        let f = factory(1);
        let ep = f.make_with(0, None).unwrap();
        let s = ep.state().unwrap();
        let first = (f.day(0)[0].t_out - 23.0) / 10.0;
        assert!(s.t_out_history().iter().all(|t| *t == first));
        assert_eq!(s.zone_temps(), &[0.1; 5]);
    }

    #[test]
    fn short_day_errors() {
        let f = factory(1);
        let short: Arc<[ExogenousRecord]> = Arc::from(f.day(0)[..100].to_vec());
        let r = Episode::new(Arc::new(f.model().clone()), Arc::new(f.config().clone()), short, None);
        assert!(matches!(r, Err(Error::DataTooShort { needed: 288, available: 100 })));
    }

    #[test]
    fn trace_round_trips_through_csv() {
        let f = factory(1);
        let mut ep = f.make_with(0, Some(DrEvent::from_chi(0.5, 150, 1.0 / 12.0))).unwrap().with_trace();
        for _ in 0..20 {
            ep.step(&[0.3, -0.2, 0.1, 0.0, 0.5, -1.0]).unwrap();
        }
        ep.annotate_last(SolverStats { solve_ms: 1.5, iterations: 7, converged: true });
        let trace = ep.trace().unwrap().clone();
        let back = EpisodeTrace::from_csv_str(&trace.to_csv_string().unwrap()).unwrap();
        assert_eq!(back.rows.len(), 20);
        assert_eq!(back.rows[19].solver.unwrap().iterations, 7);
        assert_eq!(back.rows[3].temps, trace.rows[3].temps);
        assert_eq!(back.rows[3].solver, Some(SolverStats::default()));
        assert!((back.total_cost() - ep.total_cost()).abs() < 1e-9);
    }

    #[test]
    fn event_description() {
        let e = DrEvent::from_chi(0.3, 168, 1.0 / 12.0);
        assert_eq!(describe_event(&e, 1.0 / 12.0), "14:00-16:36 at 36 kW");
    }
}
