//! Evolution-strategies policy search.
//!
//! Each iteration draws `population_size / 2` Gaussian directions, scores the
//! antithetic pairs `theta +/- sigma * eps` on a shared set of episodes,
//! converts the scores to centred ranks and moves `theta` along
//!
//! ```text
//! g = 1 / (n sigma) * sum_k shaped_k * sign_k * eps_k
//! ```
//!
//! with a plain gradient-ascent step.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::EnvFactory;
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpSpec};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsConfig {
    /// Members per iteration, two per direction.
    pub population_size: usize,
    pub perturbation_std: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Episodes averaged into one member's cost.
    pub episodes_per_fitness: usize,
    /// Fixed episodes scoring the unperturbed policy every iteration.
    pub eval_episodes: usize,
    pub worker_count: usize,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        EsConfig {
            population_size: 64,
            perturbation_std: 0.02,
            learning_rate: 1e-2,
            iterations: 150,
            episodes_per_fitness: 2,
            eval_episodes: 16,
            worker_count: 8,
            seed: 0,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 || !self.population_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig("population size must be even and at least 2".into()));
        }
        if !(self.perturbation_std > 0.0) {
            return Err(Error::InvalidConfig("perturbation std must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be non-negative".into()));
        }
        if self.episodes_per_fitness == 0 || self.eval_episodes == 0 || self.worker_count == 0 {
            return Err(Error::InvalidConfig(
                "episode counts and worker count must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Seeds of the fixed evaluation episodes.
    pub fn eval_seeds(&self) -> Vec<u64> {
        let s = seed::substream(self.seed, "es-eval");
        (0..self.eval_episodes as u64).map(|i| seed::indexed(s, i)).collect()
    }

    fn iteration_seed(&self, iteration: usize) -> u64 {
        seed::indexed(seed::substream(self.seed, "es-noise"), iteration as u64)
    }

    fn episode_seeds(&self, iteration: usize) -> Vec<u64> {
        let s = seed::indexed(seed::substream(self.seed, "es-episodes"), iteration as u64);
        (0..self.episodes_per_fitness as u64).map(|i| seed::indexed(s, i)).collect()
    }
}

/// Scores a flat parameter vector on a list of episode seeds; lower is better.
pub trait FitnessFn: Sync {
    fn cost(&self, params: &[f64], seeds: &[u64]) -> Result<f64>;
}

/// Mean undiscounted cost of the deterministic policy `net` over the
/// episodes `factory` builds from `seeds`.
pub fn evaluate_fitness(net: &Mlp, factory: &EnvFactory, seeds: &[u64]) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("fitness needs at least one episode".into()));
    }
    let mut total = 0.0;
    for &s in seeds {
        let mut ep = factory.make(s)?;
        total += ep.run(|state| net.forward(state.as_slice()))?;
    }
    Ok(total / seeds.len() as f64)
}

/// Building-control fitness of a deterministic policy network.
#[derive(Clone, Debug)]
pub struct PolicyFitness {
    pub spec: MlpSpec,
    pub factory: EnvFactory,
}

impl FitnessFn for PolicyFitness {
    fn cost(&self, params: &[f64], seeds: &[u64]) -> Result<f64> {
        let net = Mlp::from_params(self.spec.clone(), params.to_vec())?;
        evaluate_fitness(&net, &self.factory, seeds)
    }
}

/// Antithetic directions of one iteration. Member `2i` is `theta + sigma eps_i`,
/// member `2i + 1` is `theta - sigma eps_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub directions: Vec<Vec<f64>>,
    pub sigma: f64,
}

impl Population {
    pub fn size(&self) -> usize {
        2 * self.directions.len()
    }

    pub fn sign(member: usize) -> f64 {
        if member.is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }

    pub fn member(&self, theta: &[f64], k: usize) -> Vec<f64> {
        let eps = &self.directions[k / 2];
        let s = Self::sign(k) * self.sigma;
        theta.iter().zip(eps).map(|(t, e)| t + s * e).collect()
    }
}

pub fn perturb_population(theta: &[f64], config: &EsConfig, iteration_seed: u64) -> Population {
    let directions = (0..config.population_size / 2)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::indexed(iteration_seed, i as u64));
            StandardNormal.sample_iter(&mut rng).take(theta.len()).collect()
        })
        .collect();
    Population {
        directions,
        sigma: config.perturbation_std,
    }
}

/// Centred ranks in `[-0.5, 0.5]`; tied values share their average rank.
pub fn centered_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks.iter().map(|r| r / (n - 1) as f64 - 0.5).collect()
}

/// Rank-shaped gradient estimate; `fitnesses` are to be maximized.
pub fn es_gradient(fitnesses: &[f64], population: &Population) -> Result<Vec<f64>> {
    let n = population.size();
    if fitnesses.len() != n {
        return Err(Error::DimensionMismatch {
            context: "population fitnesses",
            expected: n,
            got: fitnesses.len(),
        });
    }
    let shaped = centered_ranks(fitnesses);
    let dim = population.directions.first().map_or(0, Vec::len);
    let mut g = vec![0.0; dim];
    let scale = 1.0 / (n as f64 * population.sigma);
    for (i, eps) in population.directions.iter().enumerate() {
        let w = (shaped[2 * i] - shaped[2 * i + 1]) * scale;
        if w == 0.0 {
            continue;
        }
        for (gj, e) in g.iter_mut().zip(eps) {
            *gj += w * e;
        }
    }
    Ok(g)
}

/// One learning-curve row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub iteration: usize,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub min_cost: f64,
    /// Cost of the unperturbed policy on the fixed evaluation episodes.
    pub eval_cost: f64,
    pub wall_seconds: f64,
}

impl FitnessReport {
    pub const HEADER: [&'static str; 6] =
        ["iteration", "mean_cost", "std_cost", "min_cost", "eval_cost", "wall_seconds"];
}

pub fn write_curve(path: &Path, rows: &[FitnessReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(FitnessReport::HEADER)?;
    for r in rows {
        w.write_record(&[
            r.iteration.to_string(),
            r.mean_cost.to_string(),
            r.std_cost.to_string(),
            r.min_cost.to_string(),
            r.eval_cost.to_string(),
            format!("{:.3}", r.wall_seconds),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Dataset(format!("csv flush: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EsOutcome {
    pub params: Vec<f64>,
    pub curve: Vec<FitnessReport>,
    /// Evaluation cost of the returned parameters.
    pub final_eval_cost: f64,
}

fn guarded_cost<F: FitnessFn>(fitness: &F, params: &[f64], seeds: &[u64]) -> std::result::Result<f64, String> {
    match catch_unwind(AssertUnwindSafe(|| fitness.cost(params, seeds))) {
        Ok(Ok(c)) if c.is_finite() => Ok(c),
        Ok(Ok(c)) => Err(format!("non-finite cost {c}")),
        Ok(Err(e)) => Err(e.to_string()),
        Err(panic) => Err(panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "worker panicked".into())),
    }
}

/// Runs the search from `theta`. `observer` sees every report with the
/// parameters that were evaluated, before they are updated.
pub fn train_es<F, O>(theta: Vec<f64>, config: &EsConfig, fitness: &F, mut observer: O) -> Result<EsOutcome>
where
    F: FitnessFn,
    O: FnMut(&FitnessReport, &[f64]) -> Result<()>,
{
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.worker_count)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let eval_seeds = config.eval_seeds();
    let started = Instant::now();
    let mut theta = theta;
    let mut curve = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let pop = perturb_population(&theta, config, config.iteration_seed(it));
        let seeds = config.episode_seeds(it);
        let run = |k: usize| guarded_cost(fitness, &pop.member(&theta, k), &seeds);
        let first: Vec<_> = pool.install(|| (0..pop.size()).into_par_iter().map(run).collect());
        let mut costs = Vec::with_capacity(pop.size());
        for (k, r) in first.into_iter().enumerate() {
            let c = match r {
                Ok(c) => c,
                Err(msg) => {
                    log::warn!("iteration {it}, member {k}: {msg}; retrying once");
                    run(k).map_err(|message| Error::Worker {
                        iteration: it,
                        member: k,
                        message,
                    })?
                }
            };
            costs.push(c);
        }
        let eval_cost = guarded_cost(fitness, &theta, &eval_seeds).map_err(|message| Error::Worker {
            iteration: it,
            member: usize::MAX,
            message,
        })?;

        let n = costs.len() as f64;
        let mean = costs.iter().sum::<f64>() / n;
        let std = (costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt();
        let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let report = FitnessReport {
            iteration: it,
            mean_cost: mean,
            std_cost: std,
            min_cost: min,
            eval_cost,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "es iteration {it}: mean {mean:.3} min {min:.3} eval {eval_cost:.3}"
        );
        observer(&report, &theta)?;
        curve.push(report);

        let fitnesses: Vec<f64> = costs.iter().map(|c| -c).collect();
        let g = es_gradient(&fitnesses, &pop)?;
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t += config.learning_rate * gi;
        }
    }

    let final_eval_cost = guarded_cost(fitness, &theta, &eval_seeds).map_err(|message| Error::Worker {
        iteration: config.iterations,
        member: usize::MAX,
        message,
    })?;
    Ok(EsOutcome {
        params: theta,
        curve,
        final_eval_cost,
    })
}
