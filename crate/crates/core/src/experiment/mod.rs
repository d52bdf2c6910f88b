//! The pipeline behind the command-line tool: data generation, model
//! identification, two-stage training, evaluation and plotting. Every
//! command reads and writes artifacts under a [`Layout`].

mod config;
mod evaluate;
mod plot;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::json;

pub use config::{
    require, EvaluationSettings, ExperimentConfig, Layout, NetworkSettings, Paths, RomSettings,
    CONFIG_FORMAT_VERSION,
};
pub use evaluate::{
    evaluate, evaluation_jobs, precooling, trace_metrics, Controller, EvaluationJob, EvaluationReport,
    EvaluationRow, ScenarioKind, SummaryRow, TraceMetrics, RULE_BASED_T_DA,
};
pub use plot::{
    plot_cost_bars, plot_dr_day, plot_learning_curves, read_curve, report, CurveSeries, PlotSummary,
};

use crate::env::{EnvFactory, StateLayout};
use crate::error::{Error, Result};
use crate::es::{self, train_es, PolicyFitness};
use crate::nn::{transfer_warm_start, Checkpoint, CheckpointKind, Mlp};
use crate::ppo::{self, train_ppo};
use crate::rom::{
    feature_select, fit_arx, generate_synthetic_exogenous, simulate_operation, ArxSpec, BuildingModel,
    ExogenousRecord, Feature, OperationDataset,
};
use crate::seed;

/// A controller selectable for evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ControllerName {
    Ppo,
    Es,
    MpcLin,
    MpcRom,
    RuleBased,
    /// Any policy checkpoint on disk.
    Checkpoint(PathBuf),
}

impl FromStr for ControllerName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo" => Ok(ControllerName::Ppo),
            "es" => Ok(ControllerName::Es),
            "mpc-lin" => Ok(ControllerName::MpcLin),
            "mpc-rom" => Ok(ControllerName::MpcRom),
            "rule-based" => Ok(ControllerName::RuleBased),
            other => match other.strip_prefix("rl:") {
                Some(p) if !p.is_empty() => Ok(ControllerName::Checkpoint(p.into())),
                _ => Err(Error::InvalidConfig(format!("unknown controller `{other}`"))),
            },
        }
    }
}

impl fmt::Display for ControllerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControllerName::Ppo => write!(f, "ppo"),
            ControllerName::Es => write!(f, "es"),
            ControllerName::MpcLin => write!(f, "mpc-lin"),
            ControllerName::MpcRom => write!(f, "mpc-rom"),
            ControllerName::RuleBased => write!(f, "rule-based"),
            ControllerName::Checkpoint(p) => write!(f, "rl:{}", p.display()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Es,
    Ppo,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenDataSummary {
    pub train_rows: usize,
    pub test_rows: usize,
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZoneFit {
    pub zone: usize,
    pub features: Vec<Feature>,
    pub rmse: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitSummary {
    pub zones: Vec<ZoneFit>,
    pub model_json: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageResult {
    pub initial_eval_cost: f64,
    pub final_eval_cost: f64,
    pub iterations: usize,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainSummary {
    pub es: Option<StageResult>,
    pub ppo: Option<StageResult>,
}

fn weather_days(cfg: &ExperimentConfig, days: usize, first_day: usize, label: &str) -> Vec<ExogenousRecord> {
    let weather = crate::rom::WeatherConfig {
        first_weekday: (cfg.weather.first_weekday + first_day) % 7,
        ..cfg.weather.clone()
    };
    generate_synthetic_exogenous(&weather, days, seed::substream(cfg.seed, label))
}

/// Synthesizes training and test operation logs by exciting the reference
/// building under generated weather. The test calendar continues where the
/// training one ends.
pub fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<GenDataSummary> {
    let truth = BuildingModel::five_zone_reference();
    if cfg.weather.zone_count != truth.zone_count() {
        return Err(Error::InvalidConfig(format!(
            "weather describes {} zones, the reference building has {}",
            cfg.weather.zone_count,
            truth.zone_count()
        )));
    }
    let dir = layout.data_dir();
    layout.prepare(&dir, cfg)?;
    let train_exo = weather_days(cfg, cfg.train_days, 0, "weather-train");
    let test_exo = weather_days(cfg, cfg.test_days, cfg.train_days, "weather-test");
    let train = simulate_operation(&truth, &train_exo, &cfg.excitation, seed::substream(cfg.seed, "excitation-train"))?;
    let test = simulate_operation(&truth, &test_exo, &cfg.excitation, seed::substream(cfg.seed, "excitation-test"))?;
    train.write_csv(&layout.train_csv())?;
    test.write_csv(&layout.test_csv())?;
    log::info!("wrote {} training and {} test rows", train.len(), test.len());
    Ok(GenDataSummary {
        train_rows: train.len(),
        test_rows: test.len(),
        train_csv: layout.train_csv(),
        test_csv: layout.test_csv(),
    })
}

fn read_dataset(path: &Path, dt: f64) -> Result<OperationDataset> {
    require(path)?;
    OperationDataset::read_csv(path, dt)
}

/// Identifies one ARX model per zone from the training log.
pub fn fit_rom(cfg: &ExperimentConfig, layout: &Layout) -> Result<FitSummary> {
    let data = read_dataset(&layout.train_csv(), cfg.scenario.dt)?;
    let template = BuildingModel::five_zone_reference();
    if data.zone_count != template.zone_count() {
        return Err(Error::Dataset(format!(
            "training data has {} zones, expected {}",
            data.zone_count,
            template.zone_count()
        )));
    }
    let n = data.zone_count;
    let mut zones = Vec::with_capacity(n);
    let mut fits = Vec::with_capacity(n);
    for zone in 0..n {
        let candidates = Feature::candidates(zone, n);
        let base = ArxSpec {
            c_p: template.c_p,
            ..ArxSpec::new(cfg.rom.n_a, cfg.rom.n_b, Vec::new())
        };
        let features = if cfg.rom.feature_selection {
            feature_select(&data, zone, &base, &candidates)?
        } else {
            candidates
        };
        let fit = fit_arx(&data, zone, &ArxSpec { features: features.clone(), ..base })?;
        log::info!("zone {}: {} features, rmse {:.4}", zone + 1, features.len(), fit.rmse);
        fits.push(ZoneFit {
            zone,
            features,
            rmse: fit.rmse,
            samples: fit.samples,
        });
        zones.push(fit.model);
    }
    let model = BuildingModel {
        zones,
        dt: cfg.scenario.dt,
        ..template
    };
    model.validate()?;

    let dir = layout.model_dir();
    layout.prepare(&dir, cfg)?;
    let path = layout.model_json();
    fs::write(&path, model.to_json()?).map_err(|e| Error::io(&path, e))?;
    let report = layout.fit_report();
    let mut w = csv::Writer::from_path(&report)?;
    w.write_record(["zone", "features", "rmse", "samples"])?;
    for f in &fits {
        let names: Vec<String> = f.features.iter().map(|x| x.to_string()).collect();
        w.write_record([
            (f.zone + 1).to_string(),
            names.join(" "),
            format!("{:.6e}", f.rmse),
            f.samples.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&report, e))?;
    Ok(FitSummary {
        zones: fits,
        model_json: path,
    })
}

pub fn load_model(layout: &Layout) -> Result<BuildingModel> {
    let path = layout.model_json();
    require(&path)?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let model = BuildingModel::from_json(&text)?;
    model.validate()?;
    Ok(model)
}

/// Episode factory over the days of the CSV at `path`, driven by the
/// identified model.
pub fn factory_for(cfg: &ExperimentConfig, layout: &Layout, path: &Path) -> Result<EnvFactory> {
    let model = load_model(layout)?;
    let data = read_dataset(path, cfg.scenario.dt)?;
    let days = data.days(cfg.scenario.horizon);
    EnvFactory::new(model, cfg.scenario.clone(), days)
}

fn load_checkpoint(path: &Path, kind: CheckpointKind) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.kind() != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} network, expected {:?}",
            path.display(),
            ck.kind(),
            kind
        )));
    }
    Ok(ck)
}

fn train_es_stage(cfg: &ExperimentConfig, layout: &Layout, factory: &EnvFactory) -> Result<StageResult> {
    let input = StateLayout::new(factory.model().zone_count(), &cfg.scenario).dim();
    let spec = cfg.network.spec(input, factory.model().action_dim());
    let net = Mlp::init(spec.clone(), seed::substream(cfg.seed, "policy-init"))?;
    let fitness = PolicyFitness {
        spec: spec.clone(),
        factory: factory.clone(),
    };
    let norm = cfg.scenario.normalization;
    let latest = layout.es_latest();
    let every = cfg.checkpoint_every;
    let outcome = train_es(net.params().to_vec(), &cfg.es, &fitness, |r, theta| {
        log::info!(
            "es iteration {}: mean {:.2}, eval {:.2}",
            r.iteration,
            r.mean_cost,
            r.eval_cost
        );
        if (r.iteration + 1) % every == 0 {
            let snap = Mlp::from_params(spec.clone(), theta.to_vec())?;
            Checkpoint::from_mlp(&snap, CheckpointKind::Deterministic, norm)
                .with_meta(json!({ "stage": "es", "iteration": r.iteration }))
                .save(&latest)?;
        }
        Ok(())
    })?;
    let trained = Mlp::from_params(spec, outcome.params)?;
    let path = layout.es_policy();
    Checkpoint::from_mlp(&trained, CheckpointKind::Deterministic, norm)
        .with_meta(json!({
            "stage": "es",
            "seed": cfg.seed,
            "final_eval_cost": outcome.final_eval_cost,
            "es": cfg.es,
        }))
        .save(&path)?;
    es::write_curve(&layout.es_curve(), &outcome.curve)?;
    Ok(StageResult {
        initial_eval_cost: outcome.curve.first().map_or(outcome.final_eval_cost, |r| r.eval_cost),
        final_eval_cost: outcome.final_eval_cost,
        iterations: outcome.curve.len(),
        checkpoint: path,
        curve: layout.es_curve(),
    })
}

fn train_ppo_stage(cfg: &ExperimentConfig, layout: &Layout, factory: &EnvFactory) -> Result<StageResult> {
    let source = load_checkpoint(&layout.es_policy(), CheckpointKind::Deterministic)?;
    let es_net = source.to_mlp()?;
    let spec = es_net.spec().clone();
    let (policy, value) = transfer_warm_start(
        &es_net,
        &spec.with_output(2 * spec.output_dim()),
        &spec.with_output(1),
        &cfg.warm_start,
    )?;
    let outcome = train_ppo(policy, value, &cfg.ppo, factory, &cfg.es.eval_seeds(), |r, _, _| {
        log::info!(
            "ppo iteration {}: eval {:.2}, sigma {:.4}",
            r.iteration,
            r.eval_cost_deterministic,
            r.mean_sigma
        );
        Ok(())
    })?;
    let norm = cfg.scenario.normalization;
    let meta = json!({
        "stage": "ppo",
        "seed": cfg.seed,
        "final_eval_cost": outcome.final_eval_cost,
        "ppo": cfg.ppo,
        "warm_start": cfg.warm_start,
    });
    let path = layout.ppo_policy();
    Checkpoint::from_policy(&outcome.policy, norm)
        .with_meta(meta.clone())
        .save(&path)?;
    Checkpoint::from_mlp(&outcome.value, CheckpointKind::Value, norm)
        .with_meta(meta)
        .save(&layout.ppo_value())?;
    ppo::write_curve(&layout.ppo_curve(), &outcome.curve)?;
    Ok(StageResult {
        initial_eval_cost: outcome
            .curve
            .first()
            .map_or(outcome.final_eval_cost, |r| r.eval_cost_deterministic),
        final_eval_cost: outcome.final_eval_cost,
        iterations: outcome.curve.len(),
        checkpoint: path,
        curve: layout.ppo_curve(),
    })
}

/// Runs the requested training stages on the training days.
pub fn train(cfg: &ExperimentConfig, layout: &Layout, stage: Stage) -> Result<TrainSummary> {
    if stage == Stage::Ppo {
        require(&layout.es_policy())?;
    }
    let factory = factory_for(cfg, layout, &layout.train_csv())?;
    layout.prepare(&layout.checkpoint_dir(), cfg)?;
    layout.prepare(&layout.output_dir(), cfg)?;
    let mut summary = TrainSummary::default();
    if matches!(stage, Stage::Es | Stage::Both) {
        summary.es = Some(train_es_stage(cfg, layout, &factory)?);
    }
    if matches!(stage, Stage::Ppo | Stage::Both) {
        summary.ppo = Some(train_ppo_stage(cfg, layout, &factory)?);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn controller_names_round_trip() {
        for s in ["ppo", "es", "mpc-lin", "mpc-rom", "rule-based", "rl:ck/a.json"] {
            assert_eq!(s.parse::<ControllerName>().unwrap().to_string(), s);
        }
        assert!("rl:".parse::<ControllerName>().is_err());
        assert!("mpc".parse::<ControllerName>().is_err());
    }
}
