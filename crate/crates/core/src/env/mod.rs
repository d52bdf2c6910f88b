//! Episodic building-control task: comfort schedule, demand-response events,
//! multi-objective reward and the step/reset engine.
//!
//! One episode is one day of `horizon` control steps. At every step the agent
//! sees a [`EnvState`], emits a raw action that is squashed onto the actuator
//! box, and receives
//!
//! ```text
//! r = -(w_comfort * k1 * sum_i D_i + w_energy * k2 * E + w_limit * k3 * V)
//! ```
//!
//! where `D` is the comfort excursion cost, `E` the interval energy and `V`
//! the squared power-limit overshoot. During a demand-response event the
//! weights switch to their DR values and the power limit drops.

mod episode;
mod state;

use serde::{Deserialize, Serialize};
use rand::Rng;

use crate::error::{Error, Result};

pub use episode::{describe_event, EnvFactory, Episode, EpisodeTrace, SolverStats, StepOutcome, TraceRow};
pub use state::{build_state, denormalize_action, EnvState, StateInputs, StateLayout};

/// Closed temperature interval without comfort cost, deg C.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComfortBand {
    pub lower: f64,
    pub upper: f64,
}

impl ComfortBand {
    pub const fn new(lower: f64, upper: f64) -> Self {
        ComfortBand { lower, upper }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.lower && t <= self.upper
    }
}

/// Objective weights `[comfort, energy, power limit]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights(pub [f64; 3]);

impl Weights {
    pub fn dot(&self, costs: &CostBreakdown, kappa: &[f64; 3]) -> f64 {
        self.0[0] * kappa[0] * costs.discomfort
            + self.0[1] * kappa[1] * costs.energy_kwh
            + self.0[2] * kappa[2] * costs.violation
    }

    fn check(&self, name: &str) -> Result<()> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "{name} must be non-negative and sum to 1, got {:?}",
                self.0
            )));
        }
        Ok(())
    }
}

/// Affine scalings applied to state entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Normalization {
    pub temp_offset: f64,
    pub temp_scale: f64,
    pub power_scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            temp_offset: 23.0,
            temp_scale: 10.0,
            power_scale: 80.0,
        }
    }
}

impl Normalization {
    pub fn temp(&self, t: f64) -> f64 {
        (t - self.temp_offset) / self.temp_scale
    }

    pub fn power(&self, p: f64) -> f64 {
        p / self.power_scale
    }
}

/// Episode configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Steps per episode.
    pub horizon: usize,
    /// Control interval, hours.
    pub dt: f64,
    /// Outdoor-temperature steps in the state, current step included.
    pub k_history: usize,
    /// Power-limit steps in the state, current step included.
    pub k_forecast: usize,
    pub weights_normal: Weights,
    pub weights_dr: Weights,
    pub kappa: [f64; 3],
    /// Power limit outside events, kW.
    pub p_limit_normal: f64,
    pub dr_probability: f64,
    /// Hours `[first, last]` between which an event may start.
    pub dr_window: [f64; 2],
    pub comfort_occupied: ComfortBand,
    pub comfort_unoccupied: ComfortBand,
    pub occupied_start_hour: f64,
    pub occupied_end_hour: f64,
    /// Zone temperature at reset, deg C.
    pub initial_temp: f64,
    pub discount: f64,
    pub normalization: Normalization,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            horizon: 288,
            dt: 1.0 / 12.0,
            k_history: 48,
            k_forecast: 48,
            weights_normal: Weights([0.7, 0.2, 0.1]),
            weights_dr: Weights([0.5, 0.0, 0.5]),
            kappa: [1.0, 1.0, 1.0],
            p_limit_normal: 80.0,
            dr_probability: 0.5,
            dr_window: [11.0, 18.0],
            comfort_occupied: ComfortBand::new(23.0, 25.0),
            comfort_unoccupied: ComfortBand::new(22.0, 28.0),
            occupied_start_hour: 7.0,
            occupied_end_hour: 19.0,
            initial_temp: 24.0,
            discount: 0.99,
            normalization: Normalization::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.horizon == 0 || !(self.dt > 0.0) {
            return bad("horizon and dt must be positive");
        }
        if ((self.horizon as f64) * self.dt - 24.0).abs() > 1e-9 {
            return bad("horizon * dt must cover 24 hours");
        }
        if self.k_history == 0 || self.k_forecast == 0 {
            return bad("state windows must hold at least one step");
        }
        self.weights_normal.check("weights_normal")?;
        self.weights_dr.check("weights_dr")?;
        if self.kappa.iter().any(|k| !(*k >= 0.0)) {
            return bad("kappa must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.dr_probability) {
            return bad("dr_probability must lie in [0, 1]");
        }
        let [w0, w1] = self.dr_window;
        if !(0.0 <= w0 && w0 <= w1 && w1 < 24.0) {
            return bad("dr_window must be an ordered pair of hours within the day");
        }
        if self.latest_start_step() + DrEvent::max_duration_steps(self.dt) > self.horizon {
            return bad("longest possible event would run past the end of the day");
        }
        for b in [self.comfort_occupied, self.comfort_unoccupied] {
            if !(b.lower < b.upper) {
                return bad("comfort bands need lower < upper");
            }
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(self.p_limit_normal > 0.0) {
            return bad("normal power limit must be positive");
        }
        Ok(())
    }

    pub fn steps_per_hour(&self) -> f64 {
        1.0 / self.dt
    }

    /// Step index of an hour of day, rounded to the nearest step.
    pub fn step_of_hour(&self, hour: f64) -> usize {
        (hour * self.steps_per_hour()).round() as usize
    }

    pub fn earliest_start_step(&self) -> usize {
        (self.dr_window[0] * self.steps_per_hour() - 1e-9).ceil() as usize
    }

    pub fn latest_start_step(&self) -> usize {
        (self.dr_window[1] * self.steps_per_hour() + 1e-9).floor() as usize
    }

    /// Hour of day at the start of `step` (wraps past midnight).
    pub fn hour_of_step(&self, step: usize) -> f64 {
        (step % self.horizon) as f64 * 24.0 / self.horizon as f64
    }

    pub fn is_occupied(&self, step: usize, is_weekday: bool) -> bool {
        let h = self.hour_of_step(step);
        is_weekday && h >= self.occupied_start_hour && h < self.occupied_end_hour
    }
}

/// A demand-response event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrEvent {
    pub start_step: usize,
    /// Nominal event length, minutes.
    pub duration_minutes: f64,
    /// Control steps touched by the event.
    pub duration_steps: usize,
    /// Power limit during the event, kW.
    pub power_limit: f64,
    /// Uniform draw the event was derived from.
    pub chi: f64,
}

impl DrEvent {
    const BASE_MINUTES: f64 = 120.0;
    const BASE_LIMIT_KW: f64 = 30.0;
    const LIMIT_SPAN_KW: f64 = 20.0;

    /// Event with length `120 (chi + 1)` minutes and limit `30 + 20 chi` kW.
    ///
    /// A step belongs to the event when any part of it overlaps the nominal
    /// interval, so a 156-minute event covers 32 five-minute steps.
    pub fn from_chi(chi: f64, start_step: usize, dt_hours: f64) -> Self {
        let duration_minutes = Self::BASE_MINUTES * (chi + 1.0);
        let step_minutes = dt_hours * 60.0;
        DrEvent {
            start_step,
            duration_minutes,
            duration_steps: (duration_minutes / step_minutes - 1e-9).ceil() as usize,
            power_limit: Self::BASE_LIMIT_KW + Self::LIMIT_SPAN_KW * chi,
            chi,
        }
    }

    fn max_duration_steps(dt_hours: f64) -> usize {
        Self::from_chi(1.0, 0, dt_hours).duration_steps
    }

    /// First step after the event.
    pub fn end_step(&self) -> usize {
        self.start_step + self.duration_steps
    }

    pub fn contains(&self, step: usize) -> bool {
        step >= self.start_step && step < self.end_step()
    }

    /// Nominal end, minutes after midnight.
    pub fn end_minute(&self, dt_hours: f64) -> f64 {
        self.start_step as f64 * dt_hours * 60.0 + self.duration_minutes
    }
}

/// Draws an optional event: with probability `dr_probability`, `chi ~ U(0, 1)`
/// and a start step uniform over the window's step marks.
pub fn sample_dr_event<R: Rng + ?Sized>(rng: &mut R, config: &ScenarioConfig) -> Option<DrEvent> {
    if rng.gen::<f64>() >= config.dr_probability {
        return None;
    }
    let chi = rng.gen::<f64>();
    let start = rng.gen_range(config.earliest_start_step()..=config.latest_start_step());
    Some(DrEvent::from_chi(chi, start, config.dt))
}

/// Comfort cost of one zone: zero inside the band, `max(d, d^2)` for an excursion `d`.
pub fn discomfort(t_zone: f64, band: ComfortBand) -> f64 {
    let d = if t_zone > band.upper {
        t_zone - band.upper
    } else if t_zone < band.lower {
        band.lower - t_zone
    } else {
        0.0
    };
    d.max(d * d)
}

/// Squared overshoot of `power` above `p_limit`.
pub fn violation_penalty(power: f64, p_limit: f64) -> f64 {
    if power >= p_limit {
        (power - p_limit).powi(2)
    } else {
        0.0
    }
}

/// The three unweighted cost terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// Sum of zone discomfort costs.
    pub discomfort: f64,
    pub energy_kwh: f64,
    pub violation: f64,
}

impl std::ops::AddAssign for CostBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.discomfort += o.discomfort;
        self.energy_kwh += o.energy_kwh;
        self.violation += o.violation;
    }
}

pub fn reward(weights: &Weights, kappa: &[f64; 3], costs: &CostBreakdown) -> f64 {
    -weights.dot(costs, kappa)
}

/// Comfort band in force at `step` of a day.
pub fn comfort_band(step: usize, is_weekday: bool, config: &ScenarioConfig) -> ComfortBand {
    if config.is_occupied(step, is_weekday) {
        config.comfort_occupied
    } else {
        config.comfort_unoccupied
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn discomfort_examples() {
        let band = ComfortBand::new(23.0, 25.0);
        assert_eq!(discomfort(24.0, band), 0.0);
        assert_eq!(discomfort(25.5, band), 0.5);
        assert_eq!(discomfort(27.0, band), 4.0);
        assert_eq!(discomfort(22.0, band), 1.0);
    }

    #[test]
    fn violation_examples() {
        assert_eq!(violation_penalty(30.0, 36.0), 0.0);
        assert_eq!(violation_penalty(36.0, 36.0), 0.0);
        assert_eq!(violation_penalty(40.0, 36.0), 16.0);
    }

    #[test]
    fn reward_examples() {
        let k = [1.0; 3];
        assert_eq!(reward(&Weights([0.7, 0.2, 0.1]), &k, &CostBreakdown::default()), 0.0);
        let r = reward(
            &Weights([0.7, 0.2, 0.1]),
            &k,
            &CostBreakdown { discomfort: 2.0, energy_kwh: 3.0, violation: 0.0 },
        );
        assert!((r + 2.0).abs() < 1e-12);
        let r = reward(
            &Weights([0.5, 0.0, 0.5]),
            &k,
            &CostBreakdown { discomfort: 2.0, energy_kwh: 100.0, violation: 4.0 },
        );
        assert_eq!(r, -3.0);
    }

    #[test]
    fn event_from_chi() {
        let dt = 1.0 / 12.0;
        let e = DrEvent::from_chi(0.3, 14 * 12, dt);
        assert_eq!(e.duration_minutes, 156.0);
        assert_eq!(e.power_limit, 36.0);
        assert_eq!(e.end_minute(dt), 16.0 * 60.0 + 36.0);
        assert_eq!(e.duration_steps, 32);

        let lo = DrEvent::from_chi(0.0, 132, dt);
        assert_eq!((lo.duration_minutes, lo.power_limit, lo.duration_steps), (120.0, 30.0, 24));
        let hi = DrEvent::from_chi(1.0, 132, dt);
        assert_eq!((hi.duration_minutes, hi.power_limit, hi.duration_steps), (240.0, 50.0, 48));
    }

    #[test]
    fn comfort_schedule() {
        let cfg = ScenarioConfig::default();
        assert_eq!(comfort_band(144, true, &cfg), ComfortBand::new(23.0, 25.0));
        assert_eq!(comfort_band(36, true, &cfg), ComfortBand::new(22.0, 28.0));
        assert_eq!(comfort_band(144, false, &cfg), ComfortBand::new(22.0, 28.0));
        assert_eq!(comfort_band(84, true, &cfg), ComfortBand::new(23.0, 25.0));
        assert_eq!(comfort_band(228, true, &cfg), ComfortBand::new(22.0, 28.0));
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.earliest_start_step(), 132);
        assert_eq!(cfg.latest_start_step(), 216);
    }

    #[test]
    fn bad_weights_rejected() {
        let cfg = ScenarioConfig {
            weights_dr: Weights([0.5, 0.5, 0.5]),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn event_frequency_and_chi_mean() {
        let cfg = ScenarioConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let events: Vec<_> = (0..10_000).map(|_| sample_dr_event(&mut rng, &cfg)).collect();
        let hits: Vec<_> = events.iter().flatten().collect();
        let freq = hits.len() as f64 / 10_000.0;
        let chi_mean = hits.iter().map(|e| e.chi).sum::<f64>() / hits.len() as f64;
        assert!((0.48..=0.52).contains(&freq), "frequency {freq}");
        assert!((0.48..=0.52).contains(&chi_mean), "chi mean {chi_mean}");
    }

    proptest! {
        #[test]
        fn sampled_events_respect_window_and_linear_relation(seed in any::<u64>()) {
            let cfg = ScenarioConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if let Some(e) = sample_dr_event(&mut rng, &cfg) {
                prop_assert!((0.0..1.0).contains(&e.chi));
                let hour = e.start_step as f64 * cfg.dt;
                prop_assert!((11.0..=18.0).contains(&hour));
                prop_assert!(e.end_step() <= cfg.horizon);
                let implied = 120.0 + 6.0 * (e.power_limit - 30.0);
                prop_assert!((e.duration_minutes - implied).abs() < 1e-9);
                let step_min = cfg.dt * 60.0;
                prop_assert!(e.duration_steps as f64 * step_min >= e.duration_minutes - 1e-9);
                prop_assert!((e.duration_steps as f64 - 1.0) * step_min < e.duration_minutes);
            }
        }

        #[test]
        fn discomfort_is_nonnegative_and_continuous(t in 10.0f64..40.0, lo in 18.0f64..26.0, w in 0.5f64..8.0) {
            let band = ComfortBand::new(lo, lo + w);
            let d = discomfort(t, band);
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d == 0.0, band.contains(t));
            let eps = 1e-7;
            prop_assert!((discomfort(band.upper + eps, band)).abs() < 1e-6);
            prop_assert!((discomfort(band.lower - eps, band)).abs() < 1e-6);
        }
    }
}
