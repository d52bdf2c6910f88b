use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::{Normalization, ScenarioConfig, Weights};
use crate::error::{Error, Result};
use crate::rom::{BuildingModel, HvacCommand};

/// Segment sizes of the observation vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub zones: usize,
    pub k_history: usize,
    pub k_forecast: usize,
}

impl StateLayout {
    pub const CALENDAR: usize = 3;
    pub const WEIGHTS: usize = 3;

    pub fn new(zones: usize, config: &ScenarioConfig) -> Self {
        StateLayout {
            zones,
            k_history: config.k_history,
            k_forecast: config.k_forecast,
        }
    }

    pub fn dim(&self) -> usize {
        self.zones + self.k_history + Self::CALENDAR + self.k_forecast + 1 + Self::WEIGHTS
    }

    fn history_start(&self) -> usize {
        self.zones
    }

    fn calendar_start(&self) -> usize {
        self.history_start() + self.k_history
    }

    fn forecast_start(&self) -> usize {
        self.calendar_start() + Self::CALENDAR
    }

    fn step_index(&self) -> usize {
        self.forecast_start() + self.k_forecast
    }

    fn weights_start(&self) -> usize {
        self.step_index() + 1
    }
}

/// Normalized observation: zone temperatures, outdoor-temperature history,
/// `[weekday, sin, cos]` of the time of day, power-limit lookahead, day
/// progress and objective weights, in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    layout: StateLayout,
    values: Vec<f64>,
}

impl EnvState {
    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zone_temps(&self) -> &[f64] {
        &self.values[..self.layout.zones]
    }

    pub fn t_out_history(&self) -> &[f64] {
        &self.values[self.layout.history_start()..self.layout.calendar_start()]
    }

    pub fn calendar(&self) -> &[f64] {
        &self.values[self.layout.calendar_start()..self.layout.forecast_start()]
    }

    pub fn p_limit_forecast(&self) -> &[f64] {
        &self.values[self.layout.forecast_start()..self.layout.step_index()]
    }

    pub fn step_frac(&self) -> f64 {
        self.values[self.layout.step_index()]
    }

    pub fn weights(&self) -> &[f64] {
        &self.values[self.layout.weights_start()..]
    }
}

/// Raw, unnormalized inputs of [`build_state`].
#[derive(Clone, Copy, Debug)]
pub struct StateInputs<'a> {
    pub temps: &'a [f64],
    /// Outdoor temperatures ending at the current step, oldest first.
    pub t_out_history: &'a [f64],
    pub is_weekday: bool,
    pub step: usize,
    /// Power limits starting at the current step, kW.
    pub p_limits: &'a [f64],
    pub weights: Weights,
}

/// `(sin, cos)` of a fraction of a full turn, exact at quarter turns.
fn turn_sin_cos(frac: f64) -> (f64, f64) {
    let x = 4.0 * frac.rem_euclid(1.0);
    let quadrant = x.floor();
    let (s, c) = ((x - quadrant) * FRAC_PI_2).sin_cos();
    let (s, c) = match quadrant as u8 {
        0 => (s, c),
        1 => (c, -s),
        2 => (-s, -c),
        _ => (-c, s),
    };
    // adding zero clears negative zeros
    (s + 0.0, c + 0.0)
}

pub fn build_state(inputs: &StateInputs<'_>, config: &ScenarioConfig) -> Result<EnvState> {
    let layout = StateLayout::new(inputs.temps.len(), config);
    if inputs.t_out_history.len() < layout.k_history {
        return Err(Error::DimensionMismatch {
            context: "outdoor temperature history",
            expected: layout.k_history,
            got: inputs.t_out_history.len(),
        });
    }
    if inputs.p_limits.len() < layout.k_forecast {
        return Err(Error::DimensionMismatch {
            context: "power limit forecast",
            expected: layout.k_forecast,
            got: inputs.p_limits.len(),
        });
    }
    let norm: &Normalization = &config.normalization;
    let mut v = Vec::with_capacity(layout.dim());
    v.extend(inputs.temps.iter().map(|t| norm.temp(*t)));
    let hist = &inputs.t_out_history[inputs.t_out_history.len() - layout.k_history..];
    v.extend(hist.iter().map(|t| norm.temp(*t)));
    let (s, c) = turn_sin_cos(config.hour_of_step(inputs.step) / 24.0);
    v.push(if inputs.is_weekday { 1.0 } else { 0.0 });
    v.push(s);
    v.push(c);
    v.extend(inputs.p_limits[..layout.k_forecast].iter().map(|p| norm.power(*p)));
    v.push(inputs.step as f64 / config.horizon as f64);
    v.extend(inputs.weights.0);
    debug_assert_eq!(v.len(), layout.dim());
    Ok(EnvState { layout, values: v })
}

/// Squashes a raw action through `tanh` onto the actuator box, ordered
/// `[mdot_1, .., mdot_N, t_da]`.
pub fn denormalize_action(raw: &[f64], model: &BuildingModel) -> Result<HvacCommand> {
    let n = model.zone_count();
    if raw.len() != n + 1 {
        return Err(Error::DimensionMismatch {
            context: "raw action",
            expected: n + 1,
            got: raw.len(),
        });
    }
    if raw.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("raw action".into()));
    }
    let squash = |x: f64, lo: f64, hi: f64| {
        let s = 0.5 * (1.0 + x.tanh());
        (lo * (1.0 - s) + hi * s).clamp(lo, hi)
    };
    Ok(HvacCommand {
        mdot: raw[..n]
            .iter()
            .zip(&model.mdot_bounds)
            .map(|(x, b)| squash(*x, b.min, b.max))
            .collect(),
        t_da: squash(raw[n], model.t_da_bounds.min, model.t_da_bounds.max),
    })
}
