use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::ScenarioConfig;
use crate::error::{Error, Result};
use crate::es::EsConfig;
use crate::mpc::MpcConfig;
use crate::nn::{MlpSpec, WarmStartConfig, DEFAULT_HIDDEN};
use crate::ppo::PpoConfig;
use crate::rom::{ExcitationConfig, WeatherConfig};
use crate::seed;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Artifact directories, relative to the output root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub model: PathBuf,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "data".into(),
            model: "model".into(),
            checkpoints: "checkpoints".into(),
            outputs: "outputs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RomSettings {
    pub n_a: usize,
    pub n_b: usize,
    /// Greedy feature selection; when off every candidate input is used.
    pub feature_selection: bool,
}

impl Default for RomSettings {
    fn default() -> Self {
        RomSettings {
            n_a: 1,
            n_b: 1,
            feature_selection: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSettings {
    pub hidden: Vec<usize>,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        NetworkSettings {
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl NetworkSettings {
    pub fn spec(&self, input: usize, output: usize) -> MlpSpec {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input);
        sizes.extend(&self.hidden);
        sizes.push(output);
        MlpSpec::new(sizes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    /// Controller names: `ppo`, `es`, `mpc-lin`, `mpc-rom`, `rule-based` or
    /// `rl:<checkpoint path>`.
    pub controllers: Vec<String>,
    pub dr_chi: f64,
    pub dr_start_hour: f64,
    /// Test-day indices to run; empty means every test day.
    pub days: Vec<usize>,
    /// Minimum drop below the non-DR trajectory that counts as pre-cooling.
    pub precool_threshold: f64,
    /// Length of the look-back window before the event start.
    pub precool_window_hours: f64,
    pub write_traces: bool,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        EvaluationSettings {
            controllers: ["ppo", "es", "mpc-lin", "mpc-rom", "rule-based"]
                .map(String::from)
                .to_vec(),
            dr_chi: 0.3,
            dr_start_hour: 14.0,
            days: Vec::new(),
            precool_threshold: 0.3,
            precool_window_hours: 4.0,
            write_traces: true,
        }
    }
}

/// Everything a pipeline run needs. Component seeds are derived from `seed`
/// by [`ExperimentConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub weather: WeatherConfig,
    pub excitation: ExcitationConfig,
    pub train_days: usize,
    pub test_days: usize,
    pub rom: RomSettings,
    pub scenario: ScenarioConfig,
    pub network: NetworkSettings,
    pub es: EsConfig,
    /// ES iterations between `es_latest.json` snapshots.
    pub checkpoint_every: usize,
    pub warm_start: WarmStartConfig,
    pub ppo: PpoConfig,
    pub mpc: MpcConfig,
    pub evaluation: EvaluationSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            format_version: CONFIG_FORMAT_VERSION,
            seed: 0,
            paths: Paths::default(),
            weather: WeatherConfig::default(),
            excitation: ExcitationConfig::default(),
            train_days: 31,
            test_days: 10,
            rom: RomSettings::default(),
            scenario: ScenarioConfig::default(),
            network: NetworkSettings::default(),
            es: EsConfig::default(),
            checkpoint_every: 10,
            warm_start: WarmStartConfig::default(),
            ppo: PpoConfig::default(),
            mpc: MpcConfig::default(),
            evaluation: EvaluationSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config JSON: {e}")))?;
        if cfg.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config format version {} (expected {CONFIG_FORMAT_VERSION})",
                cfg.format_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies command-line overrides, derives every component seed from the
    /// root seed and validates the result.
    pub fn resolve(mut self, seed_override: Option<u64>, workers: Option<usize>) -> Result<Self> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        if let Some(w) = workers {
            self.es.worker_count = w;
            self.ppo.worker_count = w;
        }
        self.es.seed = seed::substream(self.seed, "es");
        self.ppo.seed = seed::substream(self.seed, "ppo");
        self.warm_start.value_seed = seed::substream(self.seed, "value-init");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.train_days == 0 || self.test_days == 0 {
            return bad("train_days and test_days must be positive".into());
        }
        if self.weather.steps_per_day != self.scenario.horizon {
            return bad(format!(
                "weather has {} steps per day but episodes last {}",
                self.weather.steps_per_day, self.scenario.horizon
            ));
        }
        if self.rom.n_a == 0 || self.rom.n_b == 0 {
            return bad("ARX orders must be at least 1".into());
        }
        if self.network.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.evaluation.dr_chi) {
            return bad(format!("dr_chi {} outside [0, 1]", self.evaluation.dr_chi));
        }
        if !(self.evaluation.precool_window_hours >= 0.0) || !(self.evaluation.precool_threshold > 0.0) {
            return bad("pre-cooling window and threshold must be non-negative and positive".into());
        }
        if let Some(&d) = self.evaluation.days.iter().find(|&&d| d >= self.test_days) {
            return bad(format!("evaluation day {d} beyond {} test days", self.test_days));
        }
        for name in &self.evaluation.controllers {
            name.parse::<super::ControllerName>()?;
        }
        self.scenario.validate()?;
        self.es.validate()?;
        self.ppo.validate()?;
        self.mpc.validate()?;
        Ok(())
    }
}

/// Concrete artifact locations under one output root.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub root: PathBuf,
    pub paths: Paths,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>, paths: &Paths) -> Self {
        Layout {
            root: root.into(),
            paths: paths.clone(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join(&self.paths.data)
    }
    pub fn model_dir(&self) -> PathBuf {
        self.root.join(&self.paths.model)
    }
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join(&self.paths.checkpoints)
    }
    pub fn output_dir(&self) -> PathBuf {
        self.root.join(&self.paths.outputs)
    }

    pub fn train_csv(&self) -> PathBuf {
        self.data_dir().join("train.csv")
    }
    pub fn test_csv(&self) -> PathBuf {
        self.data_dir().join("test.csv")
    }
    pub fn model_json(&self) -> PathBuf {
        self.model_dir().join("building.json")
    }
    pub fn fit_report(&self) -> PathBuf {
        self.model_dir().join("fit_report.csv")
    }
    pub fn es_policy(&self) -> PathBuf {
        self.checkpoint_dir().join("es_policy.json")
    }
    pub fn es_latest(&self) -> PathBuf {
        self.checkpoint_dir().join("es_latest.json")
    }
    pub fn ppo_policy(&self) -> PathBuf {
        self.checkpoint_dir().join("ppo_policy.json")
    }
    pub fn ppo_value(&self) -> PathBuf {
        self.checkpoint_dir().join("ppo_value.json")
    }
    pub fn es_curve(&self) -> PathBuf {
        self.output_dir().join("es_curve.csv")
    }
    pub fn ppo_curve(&self) -> PathBuf {
        self.output_dir().join("ppo_curve.csv")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.output_dir().join("report.csv")
    }
    pub fn report_json(&self) -> PathBuf {
        self.output_dir().join("report.json")
    }
    pub fn summary_csv(&self) -> PathBuf {
        self.output_dir().join("summary.csv")
    }
    pub fn trace_dir(&self) -> PathBuf {
        self.output_dir().join("traces")
    }
    pub fn plot_dir(&self) -> PathBuf {
        self.output_dir().join("plots")
    }

    /// Creates `dir` and writes the resolved configuration next to its
    /// artifacts.
    pub fn prepare(&self, dir: &Path, config: &ExperimentConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let echo = dir.join("config.json");
        fs::write(&echo, config.to_json()?).map_err(|e| Error::io(&echo, e))
    }
}

/// Fails with `MissingArtifact` when a prerequisite file is absent.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_after_resolution() {
        let cfg = ExperimentConfig::default().resolve(None, None).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.es.seed, seed::substream(0, "es"));
        assert_ne!(cfg.es.seed, cfg.ppo.seed);
    }

    #[test]
    fn overrides_apply_before_derivation() {
        let cfg = ExperimentConfig::default().resolve(Some(9), Some(3)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.es.worker_count, 3);
        assert_eq!(cfg.ppo.worker_count, 3);
        assert_eq!(cfg.ppo.seed, seed::substream(9, "ppo"));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"seed": 4, "es": {"iterations": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.es.iterations, 3);
        assert_eq!(cfg.es.population_size, EsConfig::default().population_size);
        assert_eq!(cfg.test_days, 10);
    }

    #[test]
    fn unknown_version_and_bad_fields_are_usage_errors() {
        let e = ExperimentConfig::from_json(r#"{"format_version": 7}"#).unwrap_err();
        assert!(e.is_usage());
        let e = ExperimentConfig::from_json(r#"{"seed": "x"}"#).unwrap_err();
        assert!(e.is_usage());
    }

    #[test]
    fn misspelled_keys_are_rejected() {
        let e = ExperimentConfig::from_json(r#"{"ppo": {"epochs": 3}}"#).unwrap_err();
        assert!(e.is_usage());
        assert!(e.to_string().contains("epochs"));
    }

    #[test]
    fn validation_rejects_unknown_controller() {
        let mut cfg = ExperimentConfig::default();
        cfg.evaluation.controllers.push("oracle".into());
        assert!(matches!(cfg.resolve(None, None), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn validation_rejects_zero_workers() {
        let e = ExperimentConfig::default().resolve(None, Some(0)).unwrap_err();
        assert!(e.is_usage());
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let cfg = ExperimentConfig::default().resolve(Some(5), None).unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_config_file_is_reported() {
        let e = ExperimentConfig::load(Path::new("/nonexistent/cfg.json")).unwrap_err();
        assert!(matches!(e, Error::MissingArtifact(_)));
    }
}
