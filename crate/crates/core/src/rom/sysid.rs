//! Least-squares ARX identification and greedy feature selection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{delivered_cooling, ExogenousRecord, Feature, HvacCommand, OperationDataset, ZoneArxModel};
use crate::error::{Error, Result};

/// Condition number of the normal matrix above which a ridge term is added.
pub const RIDGE_CONDITION_LIMIT: f64 = 1e10;
/// Ridge weight used when the normal matrix is ill-conditioned.
pub const RIDGE_LAMBDA: f64 = 1e-8;
/// Relative validation-RMSE gain a feature must bring to be selected.
pub const SELECTION_MIN_GAIN: f64 = 0.01;
/// Fraction of rows used for fitting during feature selection.
pub const SELECTION_TRAIN_FRACTION: f64 = 0.8;

/// Structure of a zone model to identify.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArxSpec {
    pub n_a: usize,
    pub n_b: usize,
    pub features: Vec<Feature>,
    pub c_p: f64,
}

impl ArxSpec {
    pub fn new(n_a: usize, n_b: usize, features: Vec<Feature>) -> Self {
        ArxSpec {
            n_a,
            n_b,
            features,
            c_p: 1.0,
        }
    }

    fn coefficient_count(&self) -> usize {
        self.n_a + self.n_b * self.features.len()
    }
}

/// Identified zone model and its one-step-ahead fit quality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArxFit {
    pub model: ZoneArxModel,
    pub rmse: f64,
    pub samples: usize,
}

fn feature_at(
    zone: usize,
    feature: Feature,
    temps: &[f64],
    cmd: &HvacCommand,
    exo: &ExogenousRecord,
    c_p: f64,
) -> f64 {
    match feature {
        Feature::OutdoorTemp => exo.t_out,
        Feature::DeliveredCooling => delivered_cooling(cmd.mdot[zone], cmd.t_da, temps[zone], c_p),
        Feature::SolarGain => exo.q_solar[zone],
        Feature::InternalGain => exo.q_int[zone],
        Feature::ZoneTemp(j) => temps[j],
    }
}

struct Design {
    rows: Vec<Vec<f64>>,
    targets: Vec<f64>,
    /// Dataset index of each target temperature.
    target_index: Vec<usize>,
    names: Vec<String>,
}

fn design(data: &OperationDataset, zone: usize, spec: &ArxSpec) -> Result<Design> {
    if zone >= data.zone_count {
        return Err(Error::InvalidConfig(format!(
            "zone {zone} not in a {}-zone dataset",
            data.zone_count
        )));
    }
    if spec.n_a == 0 {
        return Err(Error::InvalidConfig("n_a must be at least 1".into()));
    }
    for f in &spec.features {
        match *f {
            Feature::ZoneTemp(j) if j == zone => {
                return Err(Error::InvalidConfig(
                    "own zone temperature cannot be an exogenous feature".into(),
                ))
            }
            Feature::ZoneTemp(j) if j >= data.zone_count => {
                return Err(Error::InvalidConfig(format!("feature {f} not in dataset")))
            }
            _ => {}
        }
    }
    let depth = spec.n_a.max(spec.n_b);
    let mut names: Vec<String> = (1..=spec.n_a)
        .map(|j| format!("t_zone_{}[lag {j}]", zone + 1))
        .collect();
    for j in 1..=spec.n_b {
        names.extend(spec.features.iter().map(|f| format!("{f}[lag {j}]")));
    }

    let mut d = Design {
        rows: Vec::new(),
        targets: Vec::new(),
        target_index: Vec::new(),
        names,
    };
    if data.len() <= depth {
        return Ok(d);
    }
    for k in (depth - 1)..(data.len() - 1) {
        let mut row = Vec::with_capacity(spec.coefficient_count());
        for j in 0..spec.n_a {
            row.push(data.temps[k - j][zone]);
        }
        for j in 0..spec.n_b {
            let t = k - j;
            for f in &spec.features {
                row.push(feature_at(
                    zone,
                    *f,
                    &data.temps[t],
                    &data.commands[t],
                    &data.exogenous[t],
                    spec.c_p,
                ));
            }
        }
        d.rows.push(row);
        d.targets.push(data.temps[k + 1][zone]);
        d.target_index.push(k + 1);
    }
    Ok(d)
}

/// Columns that are (numerically) linear combinations of earlier columns.
fn degenerate_columns(rows: &[Vec<f64>], cols: usize) -> Vec<usize> {
    let m = rows.len();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut bad = Vec::new();
    for c in 0..cols {
        let mut v: Vec<f64> = rows.iter().map(|r| r[c]).collect();
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // two passes of modified Gram-Schmidt for stability
        for _ in 0..2 {
            for q in &basis {
                let p: f64 = (0..m).map(|i| q[i] * v[i]).sum();
                for i in 0..m {
                    v[i] -= p * q[i];
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 == 0.0 || norm <= 1e-9 * norm0 {
            bad.push(c);
        } else {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    bad
}

fn least_squares(d: &Design, zone: usize) -> Result<Vec<f64>> {
    let p = d.names.len();
    let m = d.rows.len();
    if m <= p {
        return Err(Error::Dataset(format!(
            "zone {zone}: {m} regression rows for {p} coefficients"
        )));
    }
    let bad = degenerate_columns(&d.rows, p);
    if !bad.is_empty() {
        return Err(Error::RankDeficient {
            zone,
            columns: bad.into_iter().map(|c| d.names[c].clone()).collect(),
        });
    }

    let x = DMatrix::from_fn(m, p, |i, j| d.rows[i][j]);
    let y = DVector::from_column_slice(&d.targets);
    let mut gram = x.transpose() * &x;
    let rhs = x.transpose() * y;

    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || max / min > RIDGE_CONDITION_LIMIT {
        log::debug!("zone {zone}: normal matrix condition {:.3e}, adding ridge", max / min);
        for i in 0..p {
            gram[(i, i)] += RIDGE_LAMBDA;
        }
    }
    let chol = gram.cholesky().ok_or_else(|| Error::RankDeficient {
        zone,
        columns: d.names.clone(),
    })?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

fn predict(row: &[f64], coeffs: &[f64]) -> f64 {
    row.iter().zip(coeffs).map(|(x, c)| x * c).sum()
}

fn rmse_over(d: &Design, coeffs: &[f64], keep: impl Fn(usize) -> bool) -> f64 {
    let (sum, count) = d
        .rows
        .iter()
        .zip(&d.targets)
        .zip(&d.target_index)
        .filter(|(_, &idx)| keep(idx))
        .fold((0.0, 0usize), |(s, c), ((row, y), _)| {
            let e = y - predict(row, coeffs);
            (s + e * e, c + 1)
        });
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

fn into_model(zone: usize, spec: &ArxSpec, coeffs: &[f64]) -> ZoneArxModel {
    let nf = spec.features.len();
    ZoneArxModel {
        zone_id: zone,
        a_coeffs: coeffs[..spec.n_a].to_vec(),
        b_coeffs: (0..spec.n_b)
            .map(|j| coeffs[spec.n_a + j * nf..spec.n_a + (j + 1) * nf].to_vec())
            .collect(),
        features: spec.features.clone(),
    }
}

/// Fits one zone's ARX coefficients by least squares on one-step-ahead error.
pub fn fit_arx(data: &OperationDataset, zone: usize, spec: &ArxSpec) -> Result<ArxFit> {
    let d = design(data, zone, spec)?;
    let coeffs = least_squares(&d, zone)?;
    let rmse = rmse_over(&d, &coeffs, |_| true);
    Ok(ArxFit {
        model: into_model(zone, spec, &coeffs),
        rmse,
        samples: d.rows.len(),
    })
}

/// Greedy forward selection of input features on a chronological 80/20 split.
///
/// Starts from the autoregressive-only model and repeatedly adds the candidate
/// with the lowest validation RMSE while it improves the current RMSE by at
/// least 1 %. The result keeps the order of `candidates`.
pub fn feature_select(
    data: &OperationDataset,
    zone: usize,
    template: &ArxSpec,
    candidates: &[Feature],
) -> Result<Vec<Feature>> {
    if data.is_empty() {
        return Err(Error::Dataset("feature selection on an empty dataset".into()));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidate features".into()));
    }
    let split = (data.len() as f64 * SELECTION_TRAIN_FRACTION).floor() as usize;

    let score = |features: &[Feature]| -> Option<f64> {
        let spec = ArxSpec {
            features: features.to_vec(),
            ..template.clone()
        };
        let d = design(data, zone, &spec).ok()?;
        let train = Design {
            rows: Vec::new(),
            targets: Vec::new(),
            target_index: Vec::new(),
            names: d.names.clone(),
        };
        let train = d
            .rows
            .iter()
            .zip(&d.targets)
            .zip(&d.target_index)
            .filter(|(_, &idx)| idx < split)
            .fold(train, |mut t, ((r, y), idx)| {
                t.rows.push(r.clone());
                t.targets.push(*y);
                t.target_index.push(*idx);
                t
            });
        let coeffs = least_squares(&train, zone).ok()?;
        Some(rmse_over(&d, &coeffs, |idx| idx >= split))
    };

    let mut selected: Vec<Feature> = Vec::new();
    let mut current = score(&selected)
        .ok_or_else(|| Error::Dataset(format!("zone {zone}: autoregressive baseline cannot be fit")))?;
    loop {
        let best = candidates
            .iter()
            .filter(|f| !selected.contains(f))
            .filter_map(|f| {
                let mut trial = selected.clone();
                trial.push(*f);
                score(&trial).map(|s| (*f, s))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((f, s)) if current > 1e-12 && (current - s) >= SELECTION_MIN_GAIN * current => {
                selected.push(f);
                current = s;
            }
            _ => break,
        }
    }
    Ok(candidates
        .iter()
        .filter(|f| selected.contains(f))
        .copied()
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rom::{BuildingModel, ThermalHistory};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Simulates `model` under random excitation, optionally with equation noise.
    fn simulate(model: &BuildingModel, steps: usize, noise: f64, seed: u64) -> OperationDataset {
        let n = model.zone_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weather = crate::rom::generate_synthetic_exogenous(
            &crate::rom::WeatherConfig::default(),
            steps / 288 + 1,
            seed,
        );
        let mut hist = ThermalHistory::steady(
            model.history_depth(),
            vec![24.0; n],
            &HvacCommand {
                mdot: model.mdot_bounds.iter().map(|b| b.mid()).collect(),
                t_da: 13.0,
            },
            &weather[0],
        );
        let mut ds = OperationDataset {
            dt: model.dt,
            zone_count: n,
            exogenous: Vec::new(),
            temps: Vec::new(),
            commands: Vec::new(),
        };
        for exo in weather.iter().take(steps).cloned() {
            let cmd = HvacCommand {
                mdot: model
                    .mdot_bounds
                    .iter()
                    .map(|b| rng.gen_range(b.min..=b.max))
                    .collect(),
                t_da: rng.gen_range(10.0..=16.0),
            };
            ds.temps.push(hist.current().to_vec());
            ds.exogenous.push(exo.clone());
            ds.commands.push(cmd.clone());
            let mut next = crate::rom::step_temperature(model, &hist, &cmd, &exo).unwrap();
            for t in &mut next {
                *t += noise * rng.sample::<f64, _>(StandardNormal);
            }
            hist.push(cmd, exo, next);
        }
        ds
    }

    #[test]
    fn noiseless_fit_recovers_planted_coefficients() {
        let model = BuildingModel::five_zone_reference();
        let ds = simulate(&model, 2000, 0.0, 3);
        for zone in 0..5 {
            let truth = &model.zones[zone];
            let spec = ArxSpec::new(1, 1, truth.features.clone());
            let fit = fit_arx(&ds, zone, &spec).unwrap();
            for (a, b) in fit.model.a_coeffs.iter().zip(&truth.a_coeffs) {
                assert!((a - b).abs() <= 1e-6, "zone {zone} a: {a} vs {b}");
            }
            for (a, b) in fit.model.b_coeffs[0].iter().zip(&truth.b_coeffs[0]) {
                assert!((a - b).abs() <= 1e-6, "zone {zone} b: {a} vs {b}");
            }
            assert!(fit.rmse < 1e-9);
        }
    }

    #[test]
    fn noisy_fit_is_close_and_rmse_matches_noise() {
        let model = BuildingModel::five_zone_reference();
        let sigma = 0.01;
        let ds = simulate(&model, 288 * 20, sigma, 5);
        let truth = &model.zones[3];
        let fit = fit_arx(&ds, 3, &ArxSpec::new(1, 1, truth.features.clone())).unwrap();
        for (a, b) in fit.model.a_coeffs.iter().zip(&truth.a_coeffs) {
            assert!((a - b).abs() < 0.05);
        }
        for (a, b) in fit.model.b_coeffs[0].iter().zip(&truth.b_coeffs[0]) {
            assert!((a - b).abs() < 0.05);
        }
        assert!((fit.rmse - sigma).abs() < 0.1 * sigma, "rmse {}", fit.rmse);
    }

    #[test]
    fn constant_temperatures_are_rank_deficient() {
        let model = BuildingModel::five_zone_reference();
        let mut ds = simulate(&model, 500, 0.0, 9);
        for t in &mut ds.temps {
            t.iter_mut().for_each(|x| *x = 24.0);
        }
        let spec = ArxSpec::new(1, 1, vec![Feature::OutdoorTemp, Feature::ZoneTemp(4)]);
        match fit_arx(&ds, 0, &spec) {
            Err(Error::RankDeficient { columns, .. }) => {
                assert_eq!(columns, vec!["t_zone_5[lag 1]".to_string()]);
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn higher_order_models_recover_too() {
        let mut model = BuildingModel::five_zone_reference();
        for z in &mut model.zones {
            z.a_coeffs = vec![0.7, 0.288];
            let b = z.b_coeffs[0].clone();
            z.b_coeffs = vec![b.iter().map(|w| w * 0.6).collect(), b.iter().map(|w| w * 0.4).collect()];
        }
        let ds = simulate(&model, 1500, 0.0, 4);
        let truth = &model.zones[1];
        let fit = fit_arx(&ds, 1, &ArxSpec::new(2, 2, truth.features.clone())).unwrap();
        for (x, y) in fit.model.a_coeffs.iter().zip(&truth.a_coeffs) {
            assert!((x - y).abs() < 1e-6);
        }
        for (bx, by) in fit.model.b_coeffs.iter().zip(&truth.b_coeffs) {
            for (x, y) in bx.iter().zip(by) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn selection_finds_only_planted_outdoor_input() {
        let mut model = BuildingModel::five_zone_reference();
        for z in &mut model.zones {
            z.a_coeffs = vec![0.9];
            z.features = vec![Feature::OutdoorTemp];
            z.b_coeffs = vec![vec![0.1]];
        }
        let ds = simulate(&model, 288 * 6, 0.01, 12);
        let picked = feature_select(
            &ds,
            2,
            &ArxSpec::new(1, 1, vec![]),
            &Feature::candidates(2, 5),
        )
        .unwrap();
        assert_eq!(picked, vec![Feature::OutdoorTemp]);
    }

    #[test]
    fn selection_keeps_all_strong_inputs() {
        let mut model = BuildingModel::five_zone_reference();
        for z in &mut model.zones {
            z.a_coeffs = vec![0.8];
            z.features = vec![
                Feature::OutdoorTemp,
                Feature::DeliveredCooling,
                Feature::SolarGain,
                Feature::InternalGain,
            ];
            z.b_coeffs = vec![vec![0.2, -0.1, 0.3, 0.3]];
        }
        // ten days so the validation tail holds weekdays
        let ds = simulate(&model, 288 * 10, 0.01, 13);
        let cands = vec![
            Feature::OutdoorTemp,
            Feature::DeliveredCooling,
            Feature::SolarGain,
            Feature::InternalGain,
        ];
        let picked = feature_select(&ds, 0, &ArxSpec::new(1, 1, vec![]), &cands).unwrap();
        assert_eq!(picked, cands);
    }

    #[test]
    fn single_candidate_base_case() {
        let mut model = BuildingModel::five_zone_reference();
        for z in &mut model.zones {
            z.a_coeffs = vec![0.9];
            z.features = vec![Feature::OutdoorTemp];
            z.b_coeffs = vec![vec![0.1]];
        }
        let ds = simulate(&model, 288 * 4, 0.01, 14);
        let template = ArxSpec::new(1, 1, vec![]);
        let useful = feature_select(&ds, 0, &template, &[Feature::OutdoorTemp]).unwrap();
        assert_eq!(useful, vec![Feature::OutdoorTemp]);
        for z in &mut model.zones {
            z.a_coeffs = vec![1.0];
            z.features = vec![];
            z.b_coeffs = vec![vec![]];
        }
        let ds = simulate(&model, 288 * 4, 0.01, 15);
        let useless = feature_select(&ds, 0, &template, &[Feature::InternalGain]).unwrap();
        assert!(useless.is_empty());
    }

    #[test]
    fn selection_on_empty_data_errors() {
        let ds = OperationDataset {
            dt: 1.0 / 12.0,
            zone_count: 5,
            exogenous: vec![],
            temps: vec![],
            commands: vec![],
        };
        assert!(feature_select(&ds, 0, &ArxSpec::new(1, 1, vec![]), &[Feature::OutdoorTemp]).is_err());
    }
}
