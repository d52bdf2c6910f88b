//! Reduced-order multi-zone thermal model.
//!
//! Each zone follows an ARX recursion
//!
//! ```text
//! T[t+1] = sum_j a_j * T[t+1-j] + sum_j b_j . u[t+1-j]
//! ```
//!
//! where the input vector `u` is assembled from the zone's [`Feature`] list:
//! outdoor temperature, delivered cooling `C_p * mdot * (T_zone - T_da)`,
//! solar gain, internal gain and the temperatures of other zones. The
//! delivered-cooling feature is bilinear in the control (`mdot * T_da`), which
//! is the only nonlinearity of the model with respect to the HVAC command.
//!
//! The module also carries the HVAC power model, system identification
//! ([`sysid`]), a synthetic weather/occupancy generator ([`synth`]) and the
//! operation-data CSV format ([`dataset`]).

pub mod dataset;
pub mod synth;
pub mod sysid;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::OperationDataset;
pub use synth::{generate_synthetic_exogenous, simulate_operation, ExcitationConfig, WeatherConfig};
pub use sysid::{feature_select, fit_arx, ArxFit, ArxSpec};

/// Version tag written into serialized building models.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// One entry of a zone's ARX input vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Feature {
    OutdoorTemp,
    DeliveredCooling,
    SolarGain,
    InternalGain,
    /// Temperature of another zone (0-based index).
    ZoneTemp(usize),
}

impl Feature {
    /// Every input a zone can draw from, excluding its own temperature.
    pub fn candidates(zone: usize, zone_count: usize) -> Vec<Feature> {
        let mut out = vec![
            Feature::OutdoorTemp,
            Feature::DeliveredCooling,
            Feature::SolarGain,
            Feature::InternalGain,
        ];
        out.extend((0..zone_count).filter(|&j| j != zone).map(Feature::ZoneTemp));
        out
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feature::OutdoorTemp => write!(f, "t_out"),
            Feature::DeliveredCooling => write!(f, "q_hvac"),
            Feature::SolarGain => write!(f, "q_solar"),
            Feature::InternalGain => write!(f, "q_int"),
            Feature::ZoneTemp(j) => write!(f, "t_zone_{}", j + 1),
        }
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t_out" => Ok(Feature::OutdoorTemp),
            "q_hvac" => Ok(Feature::DeliveredCooling),
            "q_solar" => Ok(Feature::SolarGain),
            "q_int" => Ok(Feature::InternalGain),
            other => other
                .strip_prefix("t_zone_")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(|n| Feature::ZoneTemp(n - 1))
                .ok_or_else(|| Error::InvalidConfig(format!("unknown feature `{other}`"))),
        }
    }
}

impl From<Feature> for String {
    fn from(f: Feature) -> String {
        f.to_string()
    }
}

impl TryFrom<String> for Feature {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// ARX model of a single zone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoneArxModel {
    pub zone_id: usize,
    /// Autoregressive coefficients, lag 1 first.
    pub a_coeffs: Vec<f64>,
    /// One weight vector per input lag (lag 1 first), aligned with `features`.
    pub b_coeffs: Vec<Vec<f64>>,
    pub features: Vec<Feature>,
}

impl ZoneArxModel {
    pub fn n_a(&self) -> usize {
        self.a_coeffs.len()
    }

    pub fn n_b(&self) -> usize {
        self.b_coeffs.len()
    }

    fn validate(&self, zone_count: usize) -> Result<()> {
        if self.a_coeffs.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "zone {}: n_a must be at least 1",
                self.zone_id
            )));
        }
        for (lag, b) in self.b_coeffs.iter().enumerate() {
            if b.len() != self.features.len() {
                return Err(Error::InvalidConfig(format!(
                    "zone {}: b lag {} has {} weights for {} features",
                    self.zone_id,
                    lag + 1,
                    b.len(),
                    self.features.len()
                )));
            }
        }
        for f in &self.features {
            if let Feature::ZoneTemp(j) = *f {
                if j == self.zone_id {
                    return Err(Error::InvalidConfig(format!(
                        "zone {}: own temperature listed as exogenous feature",
                        self.zone_id
                    )));
                }
                if j >= zone_count {
                    return Err(Error::InvalidConfig(format!(
                        "zone {}: feature {f} refers to a missing zone",
                        self.zone_id
                    )));
                }
            }
        }
        let all_finite = self.a_coeffs.iter().chain(self.b_coeffs.iter().flatten());
        if !all_finite.into_iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("zone {} coefficients", self.zone_id)));
        }
        Ok(())
    }
}

/// Closed interval used for actuator limits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub const fn new(min: f64, max: f64) -> Self {
        Bounds { min, max }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.min, self.max)
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }
}

/// Chiller plus fan power: `a (T_out - T_da) sum(mdot) + b sum(mdot)^3 + c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        PowerModel {
            a: 1.0,
            b: 0.0076,
            c: 4.8865,
        }
    }
}

/// One control action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HvacCommand {
    /// Per-zone supply air mass flow, kg/s.
    pub mdot: Vec<f64>,
    /// Discharge air temperature, deg C.
    pub t_da: f64,
}

impl HvacCommand {
    pub fn total_flow(&self) -> f64 {
        self.mdot.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.t_da.is_finite() && self.mdot.iter().all(|m| m.is_finite())
    }

    /// Flat `[mdot_1, .., mdot_N, t_da]` form.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.mdot.clone();
        v.push(self.t_da);
        v
    }

    pub fn from_slice(u: &[f64]) -> Self {
        let (t_da, mdot) = u.split_last().expect("command vector is never empty");
        HvacCommand {
            mdot: mdot.to_vec(),
            t_da: *t_da,
        }
    }
}

/// Non-controllable inputs for one control step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExogenousRecord {
    pub step_index: usize,
    pub t_out: f64,
    pub q_solar: Vec<f64>,
    pub q_int: Vec<f64>,
    pub is_weekday: bool,
}

/// N-zone building: ARX zones, power model and actuator bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildingModel {
    pub format_version: u32,
    pub zones: Vec<ZoneArxModel>,
    pub power: PowerModel,
    pub c_p: f64,
    /// Unit string carried alongside `c_p`; the model treats `c_p` as a plain scale.
    pub c_p_unit: String,
    pub t_da_bounds: Bounds,
    pub mdot_bounds: Vec<Bounds>,
    /// Control interval, hours.
    pub dt: f64,
}

/// Discharge air temperature limits of the five-zone case, deg C.
pub const DEFAULT_T_DA_BOUNDS: Bounds = Bounds::new(10.0, 16.0);
/// Perimeter-zone flow limits, kg/s.
pub const PERIMETER_MDOT_BOUNDS: Bounds = Bounds::new(0.22, 2.2);
/// Core-zone flow limits, kg/s.
pub const CORE_MDOT_BOUNDS: Bounds = Bounds::new(0.32, 3.2);

/// Flow bounds for an N-zone building whose last zone is the core.
pub fn default_mdot_bounds(zone_count: usize) -> Vec<Bounds> {
    (0..zone_count)
        .map(|i| {
            if zone_count > 1 && i == zone_count - 1 {
                CORE_MDOT_BOUNDS
            } else {
                PERIMETER_MDOT_BOUNDS
            }
        })
        .collect()
}

impl BuildingModel {
    pub fn zone_count(&self) -> usize {
        self.zones.len()
    }

    pub fn action_dim(&self) -> usize {
        self.zones.len() + 1
    }

    /// Depth of temperature history the recursion needs.
    pub fn history_depth(&self) -> usize {
        self.zones
            .iter()
            .map(|z| z.n_a().max(z.n_b()))
            .max()
            .unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.zones.len();
        if n == 0 {
            return Err(Error::InvalidConfig("building needs at least one zone".into()));
        }
        if self.mdot_bounds.len() != n {
            return Err(Error::DimensionMismatch {
                context: "mdot bounds",
                expected: n,
                got: self.mdot_bounds.len(),
            });
        }
        if self.t_da_bounds.min >= self.t_da_bounds.max {
            return Err(Error::InvalidConfig("t_da bounds must satisfy min < max".into()));
        }
        for (i, b) in self.mdot_bounds.iter().enumerate() {
            if !(b.min > 0.0 && b.min < b.max) {
                return Err(Error::InvalidConfig(format!(
                    "zone {i}: flow bounds must satisfy 0 < min < max"
                )));
            }
        }
        if !(self.power.b > 0.0) || self.power.c < 0.0 {
            return Err(Error::InvalidConfig(
                "power model needs b > 0 and c >= 0".into(),
            ));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("dt must be positive".into()));
        }
        for (i, z) in self.zones.iter().enumerate() {
            if z.zone_id != i {
                return Err(Error::InvalidConfig(format!(
                    "zone at position {i} has zone_id {}",
                    z.zone_id
                )));
            }
            z.validate(n)?;
        }
        Ok(())
    }

    /// Errors if `cmd` has the wrong shape, is non-finite or leaves the actuator box.
    pub fn check_command(&self, cmd: &HvacCommand) -> Result<()> {
        if cmd.mdot.len() != self.zone_count() {
            return Err(Error::DimensionMismatch {
                context: "command flows",
                expected: self.zone_count(),
                got: cmd.mdot.len(),
            });
        }
        if !cmd.is_finite() {
            return Err(Error::NonFinite("HVAC command".into()));
        }
        if !self.t_da_bounds.contains(cmd.t_da) {
            return Err(Error::InvalidConfig(format!(
                "t_da {} outside [{}, {}]",
                cmd.t_da, self.t_da_bounds.min, self.t_da_bounds.max
            )));
        }
        for (i, (m, b)) in cmd.mdot.iter().zip(&self.mdot_bounds).enumerate() {
            if !b.contains(*m) {
                return Err(Error::InvalidConfig(format!(
                    "zone {i}: flow {m} outside [{}, {}]",
                    b.min, b.max
                )));
            }
        }
        Ok(())
    }

    /// Projects a command onto the actuator box.
    pub fn clamp_command(&self, cmd: &HvacCommand) -> HvacCommand {
        HvacCommand {
            mdot: cmd
                .mdot
                .iter()
                .zip(&self.mdot_bounds)
                .map(|(m, b)| b.clamp(*m))
                .collect(),
            t_da: self.t_da_bounds.clamp(cmd.t_da),
        }
    }

    /// Lower corner of the actuator box flattened as `[mdot.., t_da]`.
    pub fn lower_bounds(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.mdot_bounds.iter().map(|b| b.min).collect();
        v.push(self.t_da_bounds.min);
        v
    }

    pub fn upper_bounds(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.mdot_bounds.iter().map(|b| b.max).collect();
        v.push(self.t_da_bounds.max);
        v
    }

    /// Value of `feature` for `zone` given the zone temperatures, command and
    /// exogenous inputs of one step.
    pub fn feature_value(
        &self,
        zone: usize,
        feature: Feature,
        temps: &[f64],
        cmd: &HvacCommand,
        exo: &ExogenousRecord,
    ) -> f64 {
        match feature {
            Feature::OutdoorTemp => exo.t_out,
            Feature::DeliveredCooling => {
                delivered_cooling(cmd.mdot[zone], cmd.t_da, temps[zone], self.c_p)
            }
            Feature::SolarGain => exo.q_solar[zone],
            Feature::InternalGain => exo.q_int[zone],
            Feature::ZoneTemp(j) => temps[j],
        }
    }

    /// The five-zone office used throughout the examples and tests.
    ///
    /// Zones 1-4 are perimeter zones (south, east, north, west) coupled to the
    /// core zone 5; the core sees internal gains only and couples to all
    /// perimeter zones. Coefficient sums on temperature-like terms equal one so
    /// the free-floating equilibrium is a weighted mean of outdoor and
    /// neighbouring temperatures.
    pub fn five_zone_reference() -> Self {
        let perimeter = |zone_id: usize| ZoneArxModel {
            zone_id,
            a_coeffs: vec![0.988],
            b_coeffs: vec![vec![0.002, -0.006, 0.006, 0.006, 0.010]],
            features: vec![
                Feature::OutdoorTemp,
                Feature::DeliveredCooling,
                Feature::SolarGain,
                Feature::InternalGain,
                Feature::ZoneTemp(4),
            ],
        };
        let core = ZoneArxModel {
            zone_id: 4,
            a_coeffs: vec![0.988],
            b_coeffs: vec![vec![-0.006, 0.008, 0.003, 0.003, 0.003, 0.003]],
            features: vec![
                Feature::DeliveredCooling,
                Feature::InternalGain,
                Feature::ZoneTemp(0),
                Feature::ZoneTemp(1),
                Feature::ZoneTemp(2),
                Feature::ZoneTemp(3),
            ],
        };
        BuildingModel {
            format_version: MODEL_FORMAT_VERSION,
            zones: vec![perimeter(0), perimeter(1), perimeter(2), perimeter(3), core],
            power: PowerModel::default(),
            c_p: 1.0,
            c_p_unit: "kWh/(kg*K)".into(),
            t_da_bounds: DEFAULT_T_DA_BOUNDS,
            mdot_bounds: default_mdot_bounds(5),
            dt: 1.0 / 12.0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: BuildingModel = serde_json::from_str(text)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported building model format version {}",
                model.format_version
            )));
        }
        model.validate()?;
        Ok(model)
    }
}

/// HVAC electrical power, kW.
pub fn hvac_power(cmd: &HvacCommand, t_out: f64, power: &PowerModel) -> f64 {
    let flow = cmd.total_flow();
    power.a * (t_out - cmd.t_da) * flow + power.b * flow.powi(3) + power.c
}

/// Energy over one interval, kWh.
pub fn interval_energy(power_kw: f64, dt_hours: f64) -> f64 {
    power_kw * dt_hours
}

/// `C_p * mdot * (T_zone - T_da)`; positive when the zone is warmer than the supply air.
pub fn delivered_cooling(mdot: f64, t_da: f64, t_zone: f64, c_p: f64) -> f64 {
    c_p * mdot * (t_zone - t_da)
}

/// Zone temperatures plus the inputs applied at each remembered step.
///
/// Frames are stored oldest first. The newest frame holds the current
/// temperatures and no input yet; older frames carry the command and
/// exogenous record that were applied from them.
#[derive(Clone, Debug)]
pub struct ThermalHistory {
    depth: usize,
    frames: VecDeque<Frame>,
}

#[derive(Clone, Debug)]
struct Frame {
    temps: Vec<f64>,
    input: Option<(HvacCommand, ExogenousRecord)>,
}

impl ThermalHistory {
    /// History holding only the current temperatures.
    pub fn new(depth: usize, temps: Vec<f64>) -> Self {
        let mut frames = VecDeque::with_capacity(depth.max(1));
        frames.push_back(Frame { temps, input: None });
        ThermalHistory {
            depth: depth.max(1),
            frames,
        }
    }

    /// History pre-filled as if the building had sat at `temps` under `cmd`
    /// and `exo` for the whole window.
    pub fn steady(depth: usize, temps: Vec<f64>, cmd: &HvacCommand, exo: &ExogenousRecord) -> Self {
        let depth = depth.max(1);
        let mut frames = VecDeque::with_capacity(depth);
        for _ in 0..depth - 1 {
            frames.push_back(Frame {
                temps: temps.clone(),
                input: Some((cmd.clone(), exo.clone())),
            });
        }
        frames.push_back(Frame { temps, input: None });
        ThermalHistory { depth, frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Current zone temperatures.
    pub fn current(&self) -> &[f64] {
        &self.frames.back().expect("history is never empty").temps
    }

    /// Temperatures `lag` steps back (0 = current).
    pub fn temps_at(&self, lag: usize) -> Option<&[f64]> {
        let n = self.frames.len();
        (lag < n).then(|| self.frames[n - 1 - lag].temps.as_slice())
    }

    /// Command and exogenous record applied from the frame `lag` steps back.
    pub fn input_at(&self, lag: usize) -> Option<&(HvacCommand, ExogenousRecord)> {
        let n = self.frames.len();
        if lag >= n {
            return None;
        }
        self.frames[n - 1 - lag].input.as_ref()
    }

    /// Records the step's inputs and appends the resulting temperatures.
    pub fn push(&mut self, cmd: HvacCommand, exo: ExogenousRecord, next: Vec<f64>) {
        if let Some(last) = self.frames.back_mut() {
            last.input = Some((cmd, exo));
        }
        self.frames.push_back(Frame {
            temps: next,
            input: None,
        });
        while self.frames.len() > self.depth {
            self.frames.pop_front();
        }
    }

    /// Steps the model and records the result.
    pub fn advance(
        &mut self,
        model: &BuildingModel,
        cmd: &HvacCommand,
        exo: &ExogenousRecord,
    ) -> Result<Vec<f64>> {
        let next = step_temperature(model, self, cmd, exo)?;
        self.push(cmd.clone(), exo.clone(), next.clone());
        Ok(next)
    }
}

/// Next-step zone temperatures.
///
/// `cmd` and `exo` are the inputs applied during the current step; older
/// lags are read from `history`.
pub fn step_temperature(
    model: &BuildingModel,
    history: &ThermalHistory,
    cmd: &HvacCommand,
    exo: &ExogenousRecord,
) -> Result<Vec<f64>> {
    let n = model.zone_count();
    if cmd.mdot.len() != n {
        return Err(Error::DimensionMismatch {
            context: "command flows",
            expected: n,
            got: cmd.mdot.len(),
        });
    }
    if exo.q_solar.len() != n || exo.q_int.len() != n {
        return Err(Error::DimensionMismatch {
            context: "exogenous gains",
            expected: n,
            got: exo.q_solar.len().min(exo.q_int.len()),
        });
    }
    let needed = model.history_depth();
    if history.len() < needed {
        return Err(Error::InsufficientHistory {
            needed,
            available: history.len(),
        });
    }
    if history.current().len() != n {
        return Err(Error::DimensionMismatch {
            context: "zone temperatures",
            expected: n,
            got: history.current().len(),
        });
    }

    let mut next = Vec::with_capacity(n);
    for (i, zone) in model.zones.iter().enumerate() {
        let mut t = 0.0;
        for (j, a) in zone.a_coeffs.iter().enumerate() {
            t += a * history.temps_at(j).expect("depth checked")[i];
        }
        for (j, b) in zone.b_coeffs.iter().enumerate() {
            let temps = history.temps_at(j).expect("depth checked");
            let (c, e) = if j == 0 {
                (cmd, exo)
            } else {
                let (c, e) = history.input_at(j).ok_or(Error::InsufficientHistory {
                    needed,
                    available: history.len(),
                })?;
                (c, e)
            };
            for (w, f) in b.iter().zip(&zone.features) {
                t += w * model.feature_value(i, *f, temps, c, e);
            }
        }
        next.push(t);
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exo(n: usize, t_out: f64) -> ExogenousRecord {
        ExogenousRecord {
            step_index: 0,
            t_out,
            q_solar: vec![1.0; n],
            q_int: vec![2.0; n],
            is_weekday: true,
        }
    }

    #[test]
    fn power_examples() {
        let p = PowerModel::default();
        let idle = HvacCommand {
            mdot: vec![0.0; 5],
            t_da: 12.0,
        };
        assert_eq!(hvac_power(&idle, 33.0, &p), 4.8865);

        let ten = HvacCommand {
            mdot: vec![2.0; 5],
            t_da: 20.0,
        };
        assert!((hvac_power(&ten, 20.0, &p) - 12.4865).abs() < 1e-12);

        let min_flows = HvacCommand {
            mdot: vec![0.22, 0.22, 0.22, 0.22, 0.32],
            t_da: 12.0,
        };
        let expected = 18.0 * 1.2 + 0.0076 * 1.728 + 4.8865;
        assert!((hvac_power(&min_flows, 30.0, &p) - expected).abs() < 1e-12);
        assert!((expected - 26.4996328).abs() < 1e-6);
    }

    #[test]
    fn energy_and_cooling_examples() {
        assert_eq!(interval_energy(0.0, 1.0 / 12.0), 0.0);
        assert!((interval_energy(12.0, 1.0 / 12.0) - 1.0).abs() < 1e-15);
        assert!((interval_energy(4.8865, 1.0 / 12.0) - 0.40720833).abs() < 1e-8);
        assert_eq!(delivered_cooling(0.0, 12.0, 24.0, 1.0), 0.0);
        assert_eq!(delivered_cooling(1.3, 21.0, 21.0, 1.0), 0.0);
        assert_eq!(delivered_cooling(1.0, 12.0, 24.0, 1.0), 12.0);
    }

    #[test]
    fn reference_model_is_valid_and_round_trips() {
        let m = BuildingModel::five_zone_reference();
        m.validate().unwrap();
        let back = BuildingModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn persistence_model_holds_temperature() {
        let mut m = BuildingModel::five_zone_reference();
        for z in &mut m.zones {
            z.a_coeffs = vec![1.0];
            for b in &mut z.b_coeffs {
                b.iter_mut().for_each(|w| *w = 0.0);
            }
        }
        let hist = ThermalHistory::new(1, vec![24.0; 5]);
        let cmd = HvacCommand {
            mdot: vec![1.0; 5],
            t_da: 12.0,
        };
        let next = step_temperature(&m, &hist, &cmd, &exo(5, 30.0)).unwrap();
        assert_eq!(next, vec![24.0; 5]);
    }

    #[test]
    fn insufficient_history_is_an_error() {
        let mut m = BuildingModel::five_zone_reference();
        m.zones[2].a_coeffs = vec![0.5, 0.4];
        let hist = ThermalHistory::new(2, vec![24.0; 5]);
        let cmd = HvacCommand {
            mdot: vec![1.0; 5],
            t_da: 12.0,
        };
        let err = step_temperature(&m, &hist, &cmd, &exo(5, 30.0)).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientHistory {
                needed: 2,
                available: 1
            }
        ));
    }

    #[test]
    fn command_checks() {
        let m = BuildingModel::five_zone_reference();
        let ok = HvacCommand {
            mdot: vec![0.22, 1.0, 2.2, 0.5, 3.2],
            t_da: 10.0,
        };
        m.check_command(&ok).unwrap();
        let bad = HvacCommand {
            mdot: vec![0.1, 1.0, 2.2, 0.5, 3.2],
            t_da: 10.0,
        };
        assert!(m.check_command(&bad).is_err());
        let clamped = m.clamp_command(&bad);
        m.check_command(&clamped).unwrap();
        let nan = HvacCommand {
            mdot: vec![1.0; 5],
            t_da: f64::NAN,
        };
        assert!(matches!(m.check_command(&nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn feature_names_round_trip() {
        for f in Feature::candidates(0, 5) {
            assert_eq!(f.to_string().parse::<Feature>().unwrap(), f);
        }
        assert!("t_zone_0".parse::<Feature>().is_err());
        assert!("humidity".parse::<Feature>().is_err());
    }

    #[test]
    fn own_temperature_feature_rejected() {
        let mut m = BuildingModel::five_zone_reference();
        m.zones[1].features[4] = Feature::ZoneTemp(1);
        assert!(m.validate().is_err());
    }
}
