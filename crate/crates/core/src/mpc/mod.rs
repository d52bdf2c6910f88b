//! Receding-horizon controllers over the building model with perfect
//! forecasts.
//!
//! Both variants minimise the environment's stage costs over `horizon` steps
//! with box-constrained commands. `Lin` expands the dynamics and the power
//! curve to first order around the warm-start plan and solves the resulting
//! convex problem once. `Rom` repeats that solve around the updated plan,
//! accepting each move only when it lowers the nonlinear cost, until the plan
//! stops changing.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::{
    comfort_band, discomfort, violation_penalty, ComfortBand, CostBreakdown, Episode, SolverStats, Weights,
};
use crate::error::{Error, Result};
use crate::rom::{
    hvac_power, interval_energy, step_temperature, BuildingModel, ExogenousRecord, Feature, HvacCommand,
    ThermalHistory,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MpcVariant {
    Lin,
    Rom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Projected-gradient iterations per convex solve.
    pub max_iterations: usize,
    /// Largest per-variable move, in box-normalised units, still counted as progress.
    pub tolerance: f64,
    pub variant: MpcVariant,
    /// Outer re-linearisations of the `Rom` variant.
    pub sqp_iterations: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 12,
            max_iterations: 400,
            tolerance: 1e-7,
            variant: MpcVariant::Lin,
            sqp_iterations: 20,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.max_iterations == 0 || self.sqp_iterations == 0 {
            return Err(Error::InvalidConfig(
                "MPC horizon and iteration limits must be positive".into(),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig("MPC tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// `T_next = a T + b u + offset` around one operating point, `u = (mdot, t_da)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl LinearizedDynamics {
    pub fn apply(&self, temps: &[f64], cmd: &HvacCommand) -> Vec<f64> {
        let t = DVector::from_column_slice(temps);
        let u = DVector::from_vec(cmd.to_vec());
        (&self.a * t + &self.b * u + &self.offset).iter().copied().collect()
    }
}

/// Partial derivatives of one model step with respect to the temperatures
/// and commands at every lag (index 0 = current step).
struct StepJacobian {
    temps: Vec<DMatrix<f64>>,
    cmds: Vec<DMatrix<f64>>,
}

fn step_jacobian(model: &BuildingModel, history: &ThermalHistory, cmd: &HvacCommand) -> Result<StepJacobian> {
    let n = model.zone_count();
    let depth = model.history_depth();
    if history.len() < depth {
        return Err(Error::InsufficientHistory {
            needed: depth,
            available: history.len(),
        });
    }
    let mut jt = vec![DMatrix::zeros(n, n); depth];
    let mut jc = vec![DMatrix::zeros(n, n + 1); depth];
    for (i, zone) in model.zones.iter().enumerate() {
        for (lag, a) in zone.a_coeffs.iter().enumerate() {
            jt[lag][(i, i)] += a;
        }
        for (lag, weights) in zone.b_coeffs.iter().enumerate() {
            let temps = history.temps_at(lag).expect("depth checked");
            let c = if lag == 0 {
                cmd
            } else {
                &history
                    .input_at(lag)
                    .ok_or(Error::InsufficientHistory {
                        needed: depth,
                        available: history.len(),
                    })?
                    .0
            };
            for (w, f) in weights.iter().zip(&zone.features) {
                match *f {
                    Feature::DeliveredCooling => {
                        let k = w * model.c_p;
                        jt[lag][(i, i)] += k * c.mdot[i];
                        jc[lag][(i, i)] += k * (temps[i] - c.t_da);
                        jc[lag][(i, n)] -= k * c.mdot[i];
                    }
                    Feature::ZoneTemp(z) => jt[lag][(i, z)] += w,
                    Feature::OutdoorTemp | Feature::SolarGain | Feature::InternalGain => {}
                }
            }
        }
    }
    Ok(StepJacobian { temps: jt, cmds: jc })
}

/// First-order expansion of the model step at the current temperatures,
/// `cmd` and `exo`. Older lags are folded into the offset.
pub fn linearize_dynamics(
    model: &BuildingModel,
    history: &ThermalHistory,
    cmd: &HvacCommand,
    exo: &ExogenousRecord,
) -> Result<LinearizedDynamics> {
    let next = step_temperature(model, history, cmd, exo)?;
    let jac = step_jacobian(model, history, cmd)?;
    let a = jac.temps[0].clone();
    let b = jac.cmds[0].clone();
    let t = DVector::from_column_slice(history.current());
    let u = DVector::from_vec(cmd.to_vec());
    let offset = DVector::from_vec(next) - &a * t - &b * u;
    Ok(LinearizedDynamics { a, b, offset })
}

/// What the controller knows about one future step.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastStep {
    pub exo: ExogenousRecord,
    pub p_limit: f64,
    pub weights: Weights,
    /// Band applied to the temperatures reached at the end of the step.
    pub band: ComfortBand,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub steps: Vec<ForecastStep>,
    pub kappa: [f64; 3],
    pub dt: f64,
}

impl Forecast {
    /// Perfect forecast of the next `horizon` steps of `episode`, cut at the
    /// end of the day.
    pub fn from_episode(episode: &Episode, horizon: usize) -> Self {
        let cfg = episode.config();
        let t0 = episode.current_step();
        let end = (t0 + horizon).min(cfg.horizon);
        let steps = (t0..end)
            .map(|t| ForecastStep {
                exo: episode.exogenous(t).clone(),
                p_limit: episode.p_limit(t),
                weights: episode.weights_at(t),
                band: comfort_band(t + 1, episode.is_weekday(), cfg),
            })
            .collect();
        Forecast {
            steps,
            kappa: cfg.kappa,
            dt: cfg.dt,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn stage_costs(step: &ForecastStep, dt: f64, next_temps: &[f64], raw_power: f64) -> CostBreakdown {
    let power = raw_power.max(0.0);
    CostBreakdown {
        discomfort: next_temps.iter().map(|t| discomfort(*t, step.band)).sum(),
        energy_kwh: interval_energy(power, dt),
        violation: violation_penalty(power, step.p_limit),
    }
}

/// Moreau envelope of the one-sided excursion cost `0 | d | d^2` and its
/// slope. `mu = 0` gives the exact cost with a one-sided slope.
fn excursion_envelope(d: f64, mu: f64) -> (f64, f64) {
    let exact = |y: f64| if y <= 0.0 { 0.0 } else { y.max(y * y) };
    if mu == 0.0 {
        let slope = if d <= 0.0 {
            0.0
        } else if d > 1.0 {
            2.0 * d
        } else {
            1.0
        };
        return (exact(d), slope);
    }
    let prox = if d <= 0.0 {
        d
    } else if d <= mu {
        0.0
    } else if d <= 1.0 + mu {
        d - mu
    } else if d <= 1.0 + 2.0 * mu {
        1.0
    } else {
        d / (1.0 + 2.0 * mu)
    };
    let r = d - prox;
    (exact(prox) + r * r / (2.0 * mu), r / mu)
}

/// Discomfort of `t` in `band` smoothed with parameter `mu`, and its slope.
fn smoothed_discomfort(t: f64, band: ComfortBand, mu: f64) -> (f64, f64) {
    let (hi, s_hi) = excursion_envelope(t - band.upper, mu);
    let (lo, s_lo) = excursion_envelope(band.lower - t, mu);
    (hi + lo, s_hi - s_lo)
}

/// Cost of `plan` under the nonlinear model, identical to what the
/// environment would charge.
pub fn plan_cost(
    model: &BuildingModel,
    history: &ThermalHistory,
    forecast: &Forecast,
    plan: &[HvacCommand],
) -> Result<f64> {
    let mut h = history.clone();
    let mut total = 0.0;
    for (cmd, step) in plan.iter().zip(&forecast.steps) {
        let p = hvac_power(cmd, step.exo.t_out, &model.power);
        let next = h.advance(model, cmd, &step.exo)?;
        total += step.weights.dot(&stage_costs(step, forecast.dt, &next, p), &forecast.kappa);
    }
    Ok(total)
}

/// Convex surrogate of the horizon problem expanded around a nominal plan.
#[derive(Clone, Debug)]
pub struct HorizonSurrogate {
    zones: usize,
    horizon: usize,
    nominal: Vec<f64>,
    /// Nominal temperatures after each step.
    temps: Vec<DVector<f64>>,
    /// Sensitivity of the temperatures after each step to the whole plan.
    sens: Vec<DMatrix<f64>>,
    power: Vec<f64>,
    power_grad: Vec<Vec<f64>>,
    steps: Vec<ForecastStep>,
    kappa: [f64; 3],
    dt: f64,
}

impl HorizonSurrogate {
    pub fn build(
        model: &BuildingModel,
        history: &ThermalHistory,
        forecast: &Forecast,
        plan: &[HvacCommand],
    ) -> Result<Self> {
        let n = model.zone_count();
        let m = n + 1;
        let h = plan.len();
        if forecast.len() < h {
            return Err(Error::DimensionMismatch {
                context: "forecast steps",
                expected: h,
                got: forecast.len(),
            });
        }
        let mut hist = history.clone();
        let mut sens: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, h * m)];
        let mut temps = Vec::with_capacity(h);
        let mut power = Vec::with_capacity(h);
        let mut power_grad = Vec::with_capacity(h);
        for (k, (cmd, step)) in plan.iter().zip(&forecast.steps).enumerate() {
            let jac = step_jacobian(model, &hist, cmd)?;
            let mut s = DMatrix::zeros(n, h * m);
            for (lag, (jt, jc)) in jac.temps.iter().zip(&jac.cmds).enumerate() {
                if lag > k {
                    break;
                }
                s += jt * &sens[k - lag];
                let col = (k - lag) * m;
                let mut block = s.columns_mut(col, m);
                block += jc;
            }
            sens.push(s);

            let pm = &model.power;
            let flow = cmd.total_flow();
            power.push(hvac_power(cmd, step.exo.t_out, pm));
            let mut g = vec![pm.a * (step.exo.t_out - cmd.t_da) + 3.0 * pm.b * flow * flow; m];
            g[n] = -pm.a * flow;
            power_grad.push(g);

            let next = hist.advance(model, cmd, &step.exo)?;
            temps.push(DVector::from_vec(next));
        }
        sens.remove(0);
        Ok(HorizonSurrogate {
            zones: n,
            horizon: h,
            nominal: plan.iter().flat_map(HvacCommand::to_vec).collect(),
            temps,
            sens,
            power,
            power_grad,
            steps: forecast.steps[..h].to_vec(),
            kappa: forecast.kappa,
            dt: forecast.dt,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Surrogate cost of the flattened plan `u`, adding its gradient into `grad`.
    pub fn cost_grad(&self, u: &[f64], grad: Option<&mut [f64]>) -> f64 {
        self.cost_grad_smoothed(u, grad, 0.0)
    }

    /// As [`Self::cost_grad`] with the discomfort kinks smoothed by `mu`.
    fn cost_grad_smoothed(&self, u: &[f64], mut grad: Option<&mut [f64]>, mu: f64) -> f64 {
        let m = self.zones + 1;
        let du = DVector::from_iterator(u.len(), u.iter().zip(&self.nominal).map(|(a, b)| a - b));
        let mut total = 0.0;
        for k in 0..self.horizon {
            let step = &self.steps[k];
            let t = &self.temps[k] + &self.sens[k] * &du;
            let uk = &du.as_slice()[k * m..(k + 1) * m];
            let p = self.power[k] + self.power_grad[k].iter().zip(uk).map(|(g, d)| g * d).sum::<f64>();
            let w = step.weights.0;
            let mut costs = stage_costs(step, self.dt, t.as_slice(), p);
            if mu > 0.0 {
                costs.discomfort = t.iter().map(|x| smoothed_discomfort(*x, step.band, mu).0).sum();
            }
            total += step.weights.dot(&costs, &self.kappa);
            if let Some(g) = grad.as_deref_mut() {
                let wd = w[0] * self.kappa[0];
                if wd != 0.0 {
                    let dt_temp = DVector::from_iterator(
                        self.zones,
                        t.iter().map(|x| wd * smoothed_discomfort(*x, step.band, mu).1),
                    );
                    let contrib = self.sens[k].tr_mul(&dt_temp);
                    g.iter_mut().zip(contrib.iter()).for_each(|(a, b)| *a += b);
                }
                let pc = p.max(0.0);
                let mut dp = 0.0;
                if p > 0.0 {
                    dp += w[1] * self.kappa[1] * self.dt;
                    if pc >= step.p_limit {
                        dp += w[2] * self.kappa[2] * 2.0 * (pc - step.p_limit);
                    }
                }
                if dp != 0.0 {
                    for (gi, pg) in g[k * m..(k + 1) * m].iter_mut().zip(&self.power_grad[k]) {
                        *gi += dp * pg;
                    }
                }
            }
        }
        total
    }

    pub fn cost(&self, plan: &[HvacCommand]) -> f64 {
        let u: Vec<f64> = plan.iter().flat_map(HvacCommand::to_vec).collect();
        self.cost_grad(&u, None)
    }
}

/// Result of one horizon solve.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonPlan {
    pub commands: Vec<HvacCommand>,
    /// Objective of the variant's own model: the surrogate for `Lin`, the
    /// nonlinear cost for `Rom`.
    pub predicted_cost: f64,
    pub nonlinear_cost: f64,
    pub iterations: usize,
    /// False when an iteration cap stopped the solve.
    pub converged: bool,
    /// Surrogate cost after every accepted inner iteration of the last convex solve.
    pub cost_history: Vec<f64>,
}

struct Box {
    lo: Vec<f64>,
    width: Vec<f64>,
}

impl Box {
    fn new(model: &BuildingModel, h: usize) -> Self {
        let lo: Vec<f64> = model.lower_bounds().repeat(h);
        let hi: Vec<f64> = model.upper_bounds().repeat(h);
        let width = hi.iter().zip(&lo).map(|(a, b)| a - b).collect();
        Box { lo, width }
    }

    fn normalize(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.lo)
            .zip(&self.width)
            .map(|((x, l), w)| ((x - l) / w).clamp(0.0, 1.0))
            .collect()
    }

    fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.lo).zip(&self.width).map(|((x, l), w)| l + x * w).collect()
    }
}

struct InnerResult {
    z: Vec<f64>,
    cost: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

/// Smoothing levels of the discomfort kinks, solved in turn.
const SMOOTHING: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];

/// Projected gradient on the box-normalised plan. Trial steps come from the
/// Barzilai-Borwein rule and are halved until the quadratic upper bound holds,
/// so the smoothed objective never increases.
fn projected_gradient(sur: &HorizonSurrogate, bx: &Box, z0: Vec<f64>, mu: f64, cfg: &MpcConfig) -> InnerResult {
    let eval = |z: &[f64]| -> (f64, Vec<f64>) {
        let u = bx.denormalize(z);
        let mut g = vec![0.0; u.len()];
        let f = sur.cost_grad_smoothed(&u, Some(&mut g), mu);
        g.iter_mut().zip(&bx.width).for_each(|(gi, w)| *gi *= w);
        (f, g)
    };
    let done = |z, cost, iterations, converged, history| InnerResult {
        z,
        cost,
        iterations,
        converged,
        history,
    };
    let mut z = z0;
    let (mut f, mut g) = eval(&z);
    let mut history = vec![f];
    let mut step = 1.0;
    for it in 0..cfg.max_iterations {
        let mut accepted = None;
        while step > 1e-14 {
            let z_new: Vec<f64> = z.iter().zip(&g).map(|(x, gi)| (x - step * gi).clamp(0.0, 1.0)).collect();
            let d: Vec<f64> = z_new.iter().zip(&z).map(|(a, b)| a - b).collect();
            if d.iter().all(|v| *v == 0.0) {
                return done(z, f, it, true, history);
            }
            let f_new = sur.cost_grad_smoothed(&bx.denormalize(&z_new), None, mu);
            let lin: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let quad: f64 = d.iter().map(|v| v * v).sum::<f64>() / (2.0 * step);
            if f_new <= f + lin + quad {
                accepted = Some((z_new, d));
                break;
            }
            step *= 0.5;
        }
        let Some((z_new, d)) = accepted else {
            return done(z, f, it, true, history);
        };
        let moved = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        z = z_new;
        let (f_new, g_new) = eval(&z);
        let sy: f64 = d.iter().zip(g_new.iter().zip(&g)).map(|(di, (a, b))| di * (a - b)).sum();
        let ss: f64 = d.iter().map(|v| v * v).sum();
        step = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { (step * 2.0).min(1e10) };
        f = f_new;
        g = g_new;
        history.push(f);
        if moved < cfg.tolerance {
            return done(z, f, it + 1, true, history);
        }
    }
    done(z, f, cfg.max_iterations, false, history)
}

/// Runs the smoothing continuation and returns the final stage with its
/// cost replaced by the exact surrogate cost.
fn solve_surrogate(sur: &HorizonSurrogate, bx: &Box, z0: Vec<f64>, cfg: &MpcConfig) -> InnerResult {
    let mut z = z0;
    let mut iterations = 0;
    let mut last = None;
    for mu in SMOOTHING {
        let r = projected_gradient(sur, bx, z, mu, cfg);
        iterations += r.iterations;
        z = r.z.clone();
        last = Some(r);
    }
    let mut r = last.expect("at least one smoothing level");
    r.iterations = iterations;
    r.cost = sur.cost_grad(&bx.denormalize(&r.z), None);
    r
}

fn unflatten(u: &[f64], m: usize) -> Vec<HvacCommand> {
    u.chunks(m).map(HvacCommand::from_slice).collect()
}

/// Plans `config.horizon` commands from `warm_start` (box midpoint when absent).
pub fn solve_horizon(
    model: &BuildingModel,
    history: &ThermalHistory,
    forecast: &Forecast,
    config: &MpcConfig,
    warm_start: Option<&[HvacCommand]>,
) -> Result<HorizonPlan> {
    config.validate()?;
    let h = config.horizon;
    if forecast.len() < h {
        return Err(Error::InvalidConfig(format!(
            "forecast covers {} steps, horizon needs {h}",
            forecast.len()
        )));
    }
    let m = model.action_dim();
    let bx = Box::new(model, h);
    let mut plan: Vec<HvacCommand> = match warm_start {
        Some(w) if w.len() >= h => w[..h].iter().map(|c| model.clamp_command(c)).collect(),
        Some(_) => {
            return Err(Error::DimensionMismatch {
                context: "warm-start plan",
                expected: h,
                got: warm_start.map_or(0, <[_]>::len),
            })
        }
        None => {
            let mid: Vec<f64> = model
                .lower_bounds()
                .iter()
                .zip(model.upper_bounds())
                .map(|(l, u)| 0.5 * (l + u))
                .collect();
            vec![HvacCommand::from_slice(&mid); h]
        }
    };

    let outer = match config.variant {
        MpcVariant::Lin => 1,
        MpcVariant::Rom => config.sqp_iterations,
    };
    let mut iterations = 0;
    let mut converged = false;
    let mut predicted = 0.0;
    let mut history_costs = Vec::new();
    let mut current_true = plan_cost(model, history, forecast, &plan)?;
    for _ in 0..outer {
        let sur = HorizonSurrogate::build(model, history, forecast, &plan)?;
        let z0 = bx.normalize(&plan.iter().flat_map(HvacCommand::to_vec).collect::<Vec<_>>());
        let inner = solve_surrogate(&sur, &bx, z0.clone(), config);
        iterations += inner.iterations;
        history_costs = inner.history;
        let candidate = unflatten(&bx.denormalize(&inner.z), m);
        match config.variant {
            MpcVariant::Lin => {
                plan = candidate;
                predicted = inner.cost;
                converged = inner.converged;
            }
            MpcVariant::Rom => {
                let dir: Vec<f64> = inner.z.iter().zip(&z0).map(|(a, b)| a - b).collect();
                let mut alpha = 1.0;
                let mut moved = 0.0;
                while alpha > 1e-4 {
                    let z: Vec<f64> = z0.iter().zip(&dir).map(|(a, d)| a + alpha * d).collect();
                    let trial = unflatten(&bx.denormalize(&z), m);
                    let c = plan_cost(model, history, forecast, &trial)?;
                    if c <= current_true {
                        moved = alpha * dir.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                        plan = trial;
                        current_true = c;
                        break;
                    }
                    alpha *= 0.5;
                }
                predicted = current_true;
                converged = inner.converged;
                if moved < config.tolerance.max(1e-9) * 10.0 {
                    break;
                }
            }
        }
    }
    let nonlinear_cost = plan_cost(model, history, forecast, &plan)?;
    if matches!(config.variant, MpcVariant::Rom) {
        predicted = nonlinear_cost;
    }
    Ok(HorizonPlan {
        commands: plan,
        predicted_cost: predicted,
        nonlinear_cost,
        iterations,
        converged,
        cost_history: history_costs,
    })
}

/// Receding-horizon controller that warm-starts every solve from the
/// previous plan shifted by one step.
#[derive(Clone, Debug)]
pub struct MpcController {
    pub config: MpcConfig,
    plan: Option<Vec<HvacCommand>>,
}

impl MpcController {
    pub fn new(config: MpcConfig) -> Result<Self> {
        config.validate()?;
        Ok(MpcController { config, plan: None })
    }

    pub fn reset(&mut self) {
        self.plan = None;
    }

    /// Solves over `forecast` (at most `horizon` steps are used) and returns
    /// the first command.
    pub fn step(
        &mut self,
        model: &BuildingModel,
        history: &ThermalHistory,
        forecast: &Forecast,
    ) -> Result<(HvacCommand, SolverStats)> {
        let h = self.config.horizon.min(forecast.len());
        if h == 0 {
            return Err(Error::InvalidConfig("empty forecast".into()));
        }
        let cfg = MpcConfig { horizon: h, ..self.config.clone() };
        let warm = self.plan.take().map(|mut p| {
            p.truncate(h);
            while p.len() < h {
                let last = p.last().cloned().expect("plan is never empty");
                p.push(last);
            }
            p
        });
        let started = Instant::now();
        let plan = solve_horizon(model, history, forecast, &cfg, warm.as_deref())?;
        let stats = SolverStats {
            solve_ms: started.elapsed().as_secs_f64() * 1e3,
            iterations: plan.iterations,
            converged: plan.converged,
        };
        let first = plan.commands[0].clone();
        let mut shifted = plan.commands;
        shifted.remove(0);
        if !shifted.is_empty() {
            self.plan = Some(shifted);
        }
        Ok((first, stats))
    }

    /// Drives `episode` to its end and returns its undiscounted cost. Solver
    /// statistics are attached to the trace when one is recorded.
    pub fn run_episode(&mut self, episode: &mut Episode) -> Result<f64> {
        self.reset();
        while !episode.is_done() {
            let forecast = Forecast::from_episode(episode, self.config.horizon);
            let (cmd, stats) = self.step(episode.model(), episode.history(), &forecast)?;
            if !stats.converged {
                log::debug!("MPC solve at step {} hit its iteration cap", episode.current_step());
            }
            episode.step_command(&cmd)?;
            episode.annotate_last(stats);
        }
        Ok(episode.total_cost())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ScenarioConfig;
    use crate::rom::{Bounds, PowerModel, ZoneArxModel, MODEL_FORMAT_VERSION};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exo(n: usize, t_out: f64) -> ExogenousRecord {
        ExogenousRecord {
            step_index: 0,
            t_out,
            q_solar: vec![2.0; n],
            q_int: vec![3.0; n],
            is_weekday: true,
        }
    }

    fn two_lag_model() -> BuildingModel {
        let mut m = BuildingModel::five_zone_reference();
        for z in &mut m.zones {
            z.a_coeffs = vec![0.9, 0.08];
            let first = z.b_coeffs[0].clone();
            z.b_coeffs.push(first.iter().map(|w| 0.5 * w).collect());
        }
        m
    }

    fn history_with(model: &BuildingModel, previous: Vec<f64>, current: Vec<f64>, t_out: f64) -> ThermalHistory {
        let n = model.zone_count();
        let cmd = HvacCommand { mdot: vec![1.0; n], t_da: 12.0 };
        let mut h = ThermalHistory::steady(model.history_depth(), previous, &cmd, &exo(n, t_out));
        h.push(cmd, exo(n, t_out), current);
        h
    }

    fn history_for(model: &BuildingModel, temps: Vec<f64>, t_out: f64) -> ThermalHistory {
        let warmer = temps.iter().map(|t| t + 0.3).collect();
        history_with(model, temps, warmer, t_out)
    }

    #[test]
    fn jacobians_match_finite_differences() {
        for model in [BuildingModel::five_zone_reference(), two_lag_model()] {
            let n = model.zone_count();
            let hist = history_for(&model, vec![24.0, 25.0, 23.5, 26.0, 24.5], 31.0);
            let cmd = HvacCommand { mdot: vec![0.5, 1.0, 1.5, 2.0, 2.5], t_da: 13.0 };
            let e = exo(n, 31.0);
            let lin = linearize_dynamics(&model, &hist, &cmd, &e).unwrap();
            let h = 1e-6;
            for j in 0..=n {
                let mut up = cmd.to_vec();
                let mut dn = cmd.to_vec();
                up[j] += h;
                dn[j] -= h;
                let fu = step_temperature(&model, &hist, &HvacCommand::from_slice(&up), &e).unwrap();
                let fd = step_temperature(&model, &hist, &HvacCommand::from_slice(&dn), &e).unwrap();
                for i in 0..n {
                    let num = (fu[i] - fd[i]) / (2.0 * h);
                    let an = lin.b[(i, j)];
                    assert!((num - an).abs() <= 1e-6 * num.abs().max(an.abs()).max(1e-3), "b[{i},{j}] {num} {an}");
                }
            }
            for j in 0..n {
                let shift = |d: f64| {
                    let mut t = hist.current().to_vec();
                    t[j] += d;
                    let hh = history_with(&model, hist.temps_at(1).unwrap_or(hist.current()).to_vec(), t, 31.0);
                    step_temperature(&model, &hh, &cmd, &e).unwrap()
                };
                let (fu, fd) = (shift(h), shift(-h));
                for i in 0..n {
                    let num = (fu[i] - fd[i]) / (2.0 * h);
                    let an = lin.a[(i, j)];
                    assert!((num - an).abs() <= 1e-6 * num.abs().max(an.abs()).max(1e-3), "a[{i},{j}] {num} {an}");
                }
            }
        }
    }

    #[test]
    fn zero_flow_has_no_supply_temperature_effect() {
        let model = BuildingModel::five_zone_reference();
        let hist = history_for(&model, vec![24.0; 5], 30.0);
        let cmd = HvacCommand { mdot: vec![0.0; 5], t_da: 12.0 };
        let lin = linearize_dynamics(&model, &hist, &cmd, &exo(5, 30.0)).unwrap();
        assert!(lin.b.column(5).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn expansion_point_is_reproduced() {
        let model = two_lag_model();
        let hist = history_for(&model, vec![24.0, 25.0, 23.5, 26.0, 24.5], 31.0);
        let cmd = HvacCommand { mdot: vec![0.7; 5], t_da: 14.0 };
        let e = exo(5, 31.0);
        let lin = linearize_dynamics(&model, &hist, &cmd, &e).unwrap();
        let exact = step_temperature(&model, &hist, &cmd, &e).unwrap();
        for (a, b) in lin.apply(hist.current(), &cmd).iter().zip(&exact) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn flat_forecast(n: usize, h: usize, t_out: f64, p_limit: f64, band: ComfortBand, w: [f64; 3]) -> Forecast {
        Forecast {
            steps: (0..h)
                .map(|_| ForecastStep { exo: exo(n, t_out), p_limit, weights: Weights(w), band })
                .collect(),
            kappa: [1.0; 3],
            dt: 1.0 / 12.0,
        }
    }

    #[test]
    fn horizon_sensitivities_match_finite_differences() {
        let model = two_lag_model();
        let hist = history_for(&model, vec![24.0, 25.0, 23.5, 26.0, 24.5], 31.0);
        let band = ComfortBand { lower: 23.0, upper: 25.0 };
        let fc = flat_forecast(5, 4, 31.0, 20.0, band, [0.5, 0.2, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan: Vec<HvacCommand> = (0..4)
            .map(|_| HvacCommand { mdot: (0..5).map(|_| rng.gen_range(0.4..2.0)).collect(), t_da: rng.gen_range(11.0..15.0) })
            .collect();
        let sur = HorizonSurrogate::build(&model, &hist, &fc, &plan).unwrap();
        let u: Vec<f64> = plan.iter().flat_map(HvacCommand::to_vec).collect();
        assert!((sur.cost(&plan) - plan_cost(&model, &hist, &fc, &plan).unwrap()).abs() < 1e-9);
        let mut g = vec![0.0; u.len()];
        sur.cost_grad(&u, Some(&mut g));
        let truth = |v: &[f64]| plan_cost(&model, &hist, &fc, &unflatten(v, 6)).unwrap();
        let h = 1e-6;
        for j in 0..u.len() {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += h;
            dn[j] -= h;
            let num = (truth(&up) - truth(&dn)) / (2.0 * h);
            assert!((num - g[j]).abs() <= 1e-5 * num.abs().max(1.0), "{j}: {num} vs {}", g[j]);
        }
    }

    fn one_zone(rng: &mut impl Rng) -> BuildingModel {
        BuildingModel {
            format_version: MODEL_FORMAT_VERSION,
            zones: vec![ZoneArxModel {
                zone_id: 0,
                a_coeffs: vec![rng.gen_range(0.85..0.99)],
                b_coeffs: vec![vec![rng.gen_range(0.005..0.05), -rng.gen_range(0.02..0.12), rng.gen_range(0.0..0.05)]],
                features: vec![Feature::OutdoorTemp, Feature::DeliveredCooling, Feature::SolarGain],
            }],
            power: PowerModel::default(),
            c_p: 1.0,
            c_p_unit: "kWh/(kg*K)".into(),
            t_da_bounds: Bounds { min: 10.0, max: 16.0 },
            mdot_bounds: vec![Bounds { min: 0.22, max: 2.2 }],
            dt: 1.0 / 12.0,
        }
    }

    fn grid_best(cost: impl Fn(&HvacCommand) -> f64) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..=198 {
            let mdot = 0.22 + 0.01 * i as f64;
            for j in 0..=600 {
                let c = HvacCommand { mdot: vec![mdot], t_da: 10.0 + 0.01 * j as f64 };
                best = best.min(cost(&c));
            }
        }
        best
    }

    fn toy_instance(seed: u64) -> (BuildingModel, ThermalHistory, Forecast) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = one_zone(&mut rng);
        let hist = ThermalHistory::new(1, vec![rng.gen_range(22.0..30.0)]);
        let lower = rng.gen_range(21.0..24.0);
        let band = ComfortBand { lower, upper: lower + rng.gen_range(1.0..4.0) };
        let w0 = rng.gen_range(0.1..0.8);
        let w1 = rng.gen_range(0.0..1.0 - w0);
        let fc = flat_forecast(1, 1, rng.gen_range(24.0..36.0), rng.gen_range(5.0..40.0), band, [w0, w1, 1.0 - w0 - w1]);
        (model, hist, fc)
    }

    #[test]
    fn rom_solve_matches_grid_oracle() {
        let cfg = MpcConfig { horizon: 1, variant: MpcVariant::Rom, ..MpcConfig::default() };
        for seed in 0..20 {
            let (model, hist, fc) = toy_instance(seed);
            let plan = solve_horizon(&model, &hist, &fc, &cfg, None).unwrap();
            let best = grid_best(|c| plan_cost(&model, &hist, &fc, std::slice::from_ref(c)).unwrap());
            assert!(plan.nonlinear_cost <= best + 1e-3, "seed {seed}: {} vs grid {best}", plan.nonlinear_cost);
        }
    }

    #[test]
    fn lin_solve_matches_grid_oracle_on_its_surrogate() {
        let cfg = MpcConfig { horizon: 1, ..MpcConfig::default() };
        for seed in 100..110 {
            let (model, hist, fc) = toy_instance(seed);
            let mid = [HvacCommand { mdot: vec![1.21], t_da: 13.0 }];
            let sur = HorizonSurrogate::build(&model, &hist, &fc, &mid).unwrap();
            let plan = solve_horizon(&model, &hist, &fc, &cfg, Some(&mid)).unwrap();
            let best = grid_best(|c| sur.cost(std::slice::from_ref(c)));
            assert!(plan.predicted_cost <= best + 1e-3, "seed {seed}: {} vs grid {best}", plan.predicted_cost);
        }
    }

    #[test]
    fn inner_iterations_never_increase_cost() {
        let model = BuildingModel::five_zone_reference();
        let hist = history_for(&model, vec![26.0, 25.5, 24.0, 27.0, 25.0], 33.0);
        let band = ComfortBand { lower: 23.0, upper: 25.0 };
        let fc = flat_forecast(5, 12, 33.0, 36.0, band, [0.5, 0.0, 0.5]);
        let plan = solve_horizon(&model, &hist, &fc, &MpcConfig::default(), None).unwrap();
        assert!(plan.cost_history.windows(2).all(|w| w[1] <= w[0]));
        for c in &plan.commands {
            model.check_command(c).unwrap();
        }
    }

    #[test]
    fn loose_band_and_limit_give_minimum_energy() {
        let model = BuildingModel::five_zone_reference();
        let hist = history_for(&model, vec![24.0; 5], 30.0);
        let band = ComfortBand { lower: -1e9, upper: 1e9 };
        let fc = flat_forecast(5, 12, 30.0, 1e9, band, [0.7, 0.2, 0.1]);
        for variant in [MpcVariant::Lin, MpcVariant::Rom] {
            let plan = solve_horizon(&model, &hist, &fc, &MpcConfig { variant, ..MpcConfig::default() }, None).unwrap();
            for c in &plan.commands {
                for (f, b) in c.mdot.iter().zip(&model.mdot_bounds) {
                    assert!((f - b.min).abs() < 1e-6, "{variant:?} flow {f}");
                }
                assert!((c.t_da - model.t_da_bounds.max).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn binding_limit_is_respected() {
        let model = BuildingModel::five_zone_reference();
        let hist = history_for(&model, vec![24.5; 5], 32.0);
        let band = ComfortBand { lower: 23.0, upper: 25.0 };
        let fc = flat_forecast(5, 12, 32.0, 30.0, band, [0.5, 0.0, 0.5]);
        let cfg = MpcConfig { variant: MpcVariant::Rom, ..MpcConfig::default() };
        let plan = solve_horizon(&model, &hist, &fc, &cfg, None).unwrap();
        for (c, s) in plan.commands.iter().zip(&fc.steps) {
            let p = hvac_power(c, s.exo.t_out, &model.power);
            assert!(p <= s.p_limit + 0.5, "power {p}");
        }
    }

    #[test]
    fn controller_settles_under_stationary_conditions() {
        let model = BuildingModel::five_zone_reference();
        let cfg = ScenarioConfig::default();
        let mut hist = ThermalHistory::new(1, vec![24.0; 5]);
        let band = cfg.comfort_occupied;
        let fc = flat_forecast(5, 12, 30.0, 80.0, band, cfg.weights_normal.0);
        let mut ctl = MpcController::new(MpcConfig::default()).unwrap();
        let mut prev: Option<HvacCommand> = None;
        for k in 0..20 {
            let (cmd, _) = ctl.step(&model, &hist, &fc).unwrap();
            if let (Some(p), true) = (&prev, k >= 10) {
                let d: f64 = p.to_vec().iter().zip(cmd.to_vec()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d < 1e-3, "step {k}: {d}");
            }
            hist.advance(&model, &cmd, &fc.steps[0].exo).unwrap();
            prev = Some(cmd);
        }
    }

    #[test]
    fn solver_is_deterministic_and_checks_forecast_length() {
        let model = BuildingModel::five_zone_reference();
        let hist = history_for(&model, vec![25.5; 5], 31.0);
        let band = ComfortBand { lower: 23.0, upper: 25.0 };
        let fc = flat_forecast(5, 12, 31.0, 50.0, band, [0.7, 0.2, 0.1]);
        let a = solve_horizon(&model, &hist, &fc, &MpcConfig::default(), None).unwrap();
        let b = solve_horizon(&model, &hist, &fc, &MpcConfig::default(), None).unwrap();
        assert_eq!(a, b);
        let short = flat_forecast(5, 5, 31.0, 50.0, band, [0.7, 0.2, 0.1]);
        assert!(solve_horizon(&model, &hist, &short, &MpcConfig::default(), None).is_err());
    }
}
