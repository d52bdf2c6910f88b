//! Clipped-surrogate policy optimization used to fine-tune a warm-started
//! Gaussian policy.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::EnvFactory;
use crate::error::{Error, Result};
use crate::nn::{Adam, GaussianPolicy, Mlp};
use crate::seed;

/// Samples per parallel gradient chunk; fixed so the reduction order does not
/// depend on the worker count.
const GRAD_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f64,
    /// Adam step size of the critic.
    pub value_learning_rate: f64,
    pub clip_ratio: f64,
    pub gae_lambda: f64,
    pub discount: f64,
    pub epochs_per_batch: usize,
    pub minibatch_size: usize,
    pub rollout_episodes_per_iteration: usize,
    pub entropy_coefficient: f64,
    pub value_loss_coefficient: f64,
    /// Global-norm gradient clip per network; non-positive disables it.
    pub max_grad_norm: f64,
    pub iterations: usize,
    pub worker_count: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            learning_rate: 5e-6,
            value_learning_rate: 1e-3,
            clip_ratio: 0.2,
            gae_lambda: 0.95,
            discount: 0.99,
            epochs_per_batch: 10,
            minibatch_size: 288,
            rollout_episodes_per_iteration: 16,
            entropy_coefficient: 0.0,
            value_loss_coefficient: 0.5,
            max_grad_norm: 0.5,
            iterations: 50,
            worker_count: 8,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad("clip ratio must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("GAE lambda must lie in [0, 1]");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(self.learning_rate >= 0.0 && self.value_learning_rate >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if self.epochs_per_batch == 0
            || self.minibatch_size == 0
            || self.rollout_episodes_per_iteration == 0
            || self.worker_count == 0
        {
            return bad("epochs, minibatch size, rollout episodes and workers must be positive");
        }
        Ok(())
    }
}

/// Transitions of whole episodes, stored back to back.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub states: Vec<Vec<f64>>,
    /// Pre-squash actions as sampled.
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// Exclusive end index of every episode.
    pub episode_ends: Vec<usize>,
    pub mean_sigma: f64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rewards.len();
        for (context, got) in [
            ("batch states", self.states.len()),
            ("batch actions", self.actions.len()),
            ("batch log-probs", self.log_probs.len()),
            ("batch values", self.values.len()),
        ] {
            if got != n {
                return Err(Error::DimensionMismatch { context, expected: n, got });
            }
        }
        let ordered = self.episode_ends.windows(2).all(|w| w[0] < w[1]);
        if !ordered || self.episode_ends.last().copied().unwrap_or(0) != n {
            return Err(Error::Dataset("episode boundaries do not cover the batch".into()));
        }
        Ok(())
    }

    pub fn episode_ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let starts = std::iter::once(0).chain(self.episode_ends.iter().copied());
        starts.zip(self.episode_ends.iter().copied()).map(|(a, b)| a..b)
    }

    /// Undiscounted cost of each episode.
    pub fn episode_costs(&self) -> Vec<f64> {
        self.episode_ranges()
            .map(|r| -self.rewards[r].iter().sum::<f64>())
            .collect()
    }

    fn append(&mut self, other: RolloutBatch) {
        let offset = self.len();
        self.states.extend(other.states);
        self.actions.extend(other.actions);
        self.rewards.extend(other.rewards);
        self.log_probs.extend(other.log_probs);
        self.values.extend(other.values);
        self.episode_ends
            .extend(other.episode_ends.into_iter().map(|e| e + offset));
    }
}

fn rollout_episode(
    policy: &GaussianPolicy,
    value: &Mlp,
    factory: &EnvFactory,
    env_seed: u64,
    action_seed: u64,
) -> Result<(RolloutBatch, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
    let mut ep = factory.make(env_seed)?;
    let mut batch = RolloutBatch::default();
    let mut sigma_sum = 0.0;
    let mut state = ep.state()?;
    while !ep.is_done() {
        let s = state.as_slice();
        let (action, log_prob) = policy.sample_action(s, &mut rng)?;
        sigma_sum += policy.evaluate(s)?.sigma.iter().sum::<f64>();
        let v = value.forward(s)?[0];
        let out = ep.step(&action)?;
        batch.states.push(s.to_vec());
        batch.actions.push(action);
        batch.rewards.push(out.reward);
        batch.log_probs.push(log_prob);
        batch.values.push(v);
        state = out.next_state;
    }
    batch.episode_ends.push(batch.len());
    Ok((batch, sigma_sum))
}

/// Samples `rollout_episodes_per_iteration` episodes with the stochastic
/// policy, in parallel on the current rayon pool.
pub fn collect_rollouts(
    policy: &GaussianPolicy,
    value: &Mlp,
    factory: &EnvFactory,
    config: &PpoConfig,
    seed: u64,
) -> Result<RolloutBatch> {
    let env_stream = seed::substream(seed, "episodes");
    let action_stream = seed::substream(seed, "actions");
    let parts: Vec<Result<(RolloutBatch, f64)>> = (0..config.rollout_episodes_per_iteration as u64)
        .into_par_iter()
        .map(|e| {
            rollout_episode(
                policy,
                value,
                factory,
                seed::indexed(env_stream, e),
                seed::indexed(action_stream, e),
            )
        })
        .collect();
    let mut batch = RolloutBatch::default();
    let mut sigma_sum = 0.0;
    for part in parts {
        let (b, s) = part?;
        batch.append(b);
        sigma_sum += s;
    }
    batch.mean_sigma = sigma_sum / (batch.len() * policy.action_dim()).max(1) as f64;
    Ok(batch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gae {
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

/// Generalized advantage estimates with a zero bootstrap after the last step
/// of every episode. Advantages are returned unnormalized.
pub fn compute_gae(batch: &RolloutBatch, discount: f64, lambda: f64) -> Gae {
    let n = batch.len();
    let mut advantages = vec![0.0; n];
    for range in batch.episode_ranges() {
        let mut next_value = 0.0;
        let mut next_adv = 0.0;
        for t in range.rev() {
            let delta = batch.rewards[t] + discount * next_value - batch.values[t];
            next_adv = delta + discount * lambda * next_adv;
            advantages[t] = next_adv;
            next_value = batch.values[t];
        }
    }
    let value_targets = advantages.iter().zip(&batch.values).map(|(a, v)| a + v).collect();
    Gae {
        advantages,
        value_targets,
    }
}

/// Shifts to zero mean and, unless degenerate, scales to unit variance.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
    for a in adv {
        *a = (*a - mean) * scale;
    }
}

/// One training sample of a minibatch.
#[derive(Clone, Copy, Debug)]
pub struct PpoSample<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub old_log_prob: f64,
    pub advantage: f64,
    pub value_target: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoLoss {
    pub total: f64,
    pub policy_loss: f64,
    /// Mean squared error of the critic, before its coefficient.
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub policy_grad: Vec<f64>,
    pub value_grad: Vec<f64>,
}

struct Partial {
    policy: f64,
    value: f64,
    entropy: f64,
    clipped: usize,
    policy_grad: Vec<f64>,
    value_grad: Vec<f64>,
}

fn chunk_loss(policy: &GaussianPolicy, value: &Mlp, chunk: &[PpoSample], config: &PpoConfig) -> Result<Partial> {
    let eps = config.clip_ratio;
    let mut p = Partial {
        policy: 0.0,
        value: 0.0,
        entropy: 0.0,
        clipped: 0,
        policy_grad: vec![0.0; policy.net.param_count()],
        value_grad: vec![0.0; value.param_count()],
    };
    for s in chunk {
        let cache = policy.net.forward_cached(s.state)?;
        let (log_prob, mut upstream) = policy.log_prob_output_grad(cache.output(), s.action);
        let ratio = (log_prob - s.old_log_prob).exp();
        let clipped_ratio = ratio.clamp(1.0 - eps, 1.0 + eps);
        let plain = ratio * s.advantage;
        let clipped = clipped_ratio * s.advantage;
        p.policy -= plain.min(clipped);
        if clipped_ratio != ratio {
            p.clipped += 1;
        }
        let d_logp = if plain <= clipped { -plain } else { 0.0 };
        upstream.iter_mut().for_each(|g| *g *= d_logp);
        if config.entropy_coefficient != 0.0 {
            let (h, gh) = policy.entropy_output_grad(cache.output());
            p.entropy += h;
            for (u, g) in upstream.iter_mut().zip(gh) {
                *u -= config.entropy_coefficient * g;
            }
        } else {
            p.entropy += policy.entropy_output_grad(cache.output()).0;
        }
        policy.net.backward_accumulate(&cache, &upstream, &mut p.policy_grad)?;

        let vcache = value.forward_cached(s.state)?;
        let err = vcache.output()[0] - s.value_target;
        p.value += err * err;
        value.backward_accumulate(&vcache, &[2.0 * config.value_loss_coefficient * err], &mut p.value_grad)?;
    }
    Ok(p)
}

/// Clipped surrogate plus critic regression and entropy bonus, with exact
/// gradients for both networks.
pub fn ppo_loss(policy: &GaussianPolicy, value: &Mlp, samples: &[PpoSample], config: &PpoConfig) -> Result<PpoLoss> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("empty minibatch".into()));
    }
    let parts: Vec<Result<Partial>> = samples
        .par_chunks(GRAD_CHUNK)
        .map(|c| chunk_loss(policy, value, c, config))
        .collect();
    let mut acc: Option<Partial> = None;
    for part in parts {
        let part = part?;
        match &mut acc {
            None => acc = Some(part),
            Some(a) => {
                a.policy += part.policy;
                a.value += part.value;
                a.entropy += part.entropy;
                a.clipped += part.clipped;
                a.policy_grad.iter_mut().zip(&part.policy_grad).for_each(|(x, y)| *x += y);
                a.value_grad.iter_mut().zip(&part.value_grad).for_each(|(x, y)| *x += y);
            }
        }
    }
    let mut a = acc.expect("non-empty minibatch");
    let inv = 1.0 / samples.len() as f64;
    a.policy_grad.iter_mut().chain(a.value_grad.iter_mut()).for_each(|g| *g *= inv);
    let policy_loss = a.policy * inv;
    let value_loss = a.value * inv;
    let entropy = a.entropy * inv;
    let total = policy_loss + config.value_loss_coefficient * value_loss - config.entropy_coefficient * entropy;
    if !total.is_finite() || a.policy_grad.iter().chain(&a.value_grad).any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "ppo loss (policy {policy_loss}, value {value_loss})"
        )));
    }
    Ok(PpoLoss {
        total,
        policy_loss,
        value_loss,
        entropy,
        clip_fraction: a.clipped as f64 * inv,
        policy_grad: a.policy_grad,
        value_grad: a.value_grad,
    })
}

/// Rescales `grad` to global norm `max_norm` when it is larger.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Mean cost of the mean-action policy, episodes evaluated on the current
/// rayon pool and reduced in seed order.
pub fn evaluate_policy(policy: &GaussianPolicy, factory: &EnvFactory, seeds: &[u64]) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("evaluation needs at least one episode".into()));
    }
    let costs: Vec<Result<f64>> = seeds
        .par_iter()
        .map(|&s| factory.make(s)?.run(|st| policy.mean_action(st.as_slice())))
        .collect();
    let mut total = 0.0;
    for c in costs {
        total += c?;
    }
    Ok(total / seeds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoReport {
    pub iteration: usize,
    /// Mean-action cost before this iteration's update.
    pub eval_cost_deterministic: f64,
    /// Mean undiscounted return of the sampled episodes.
    pub mean_batch_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_sigma: f64,
    pub wall_seconds: f64,
}

impl PpoReport {
    pub const HEADER: [&'static str; 7] = [
        "iteration",
        "eval_cost_deterministic",
        "mean_batch_reward",
        "policy_loss",
        "value_loss",
        "mean_sigma",
        "wall_seconds",
    ];
}

pub fn write_curve(path: &Path, rows: &[PpoReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PpoReport::HEADER)?;
    for r in rows {
        w.write_record(&[
            r.iteration.to_string(),
            r.eval_cost_deterministic.to_string(),
            r.mean_batch_reward.to_string(),
            r.policy_loss.to_string(),
            r.value_loss.to_string(),
            r.mean_sigma.to_string(),
            format!("{:.3}", r.wall_seconds),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Dataset(format!("csv flush: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoOutcome {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub curve: Vec<PpoReport>,
    pub final_eval_cost: f64,
}

fn guard(iteration: usize, cost: f64, start: f64) -> Result<()> {
    if !cost.is_finite() || (start > 0.0 && cost > 3.0 * start) {
        return Err(Error::Diverged { iteration, cost, start });
    }
    Ok(())
}

/// Fine-tunes `policy` and `value`. The mean-action policy is scored on
/// `eval_seeds` before every iteration and once after the last one.
pub fn train_ppo<O>(
    policy: GaussianPolicy,
    value: Mlp,
    config: &PpoConfig,
    factory: &EnvFactory,
    eval_seeds: &[u64],
    mut observer: O,
) -> Result<PpoOutcome>
where
    O: FnMut(&PpoReport, &GaussianPolicy, &Mlp) -> Result<()>,
{
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.worker_count)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let mut policy = policy;
    let mut value = value;
    let mut policy_opt = Adam::new(policy.net.param_count(), config.learning_rate);
    let mut value_opt = Adam::new(value.param_count(), config.value_learning_rate);
    let rollout_stream = seed::substream(config.seed, "ppo-rollouts");
    let shuffle_stream = seed::substream(config.seed, "ppo-shuffle");
    let started = Instant::now();
    let mut curve = Vec::with_capacity(config.iterations);
    let mut start_cost = None;

    for it in 0..config.iterations {
        let eval = pool.install(|| evaluate_policy(&policy, factory, eval_seeds))?;
        let start = *start_cost.get_or_insert(eval);
        guard(it, eval, start)?;

        let batch = pool.install(|| {
            collect_rollouts(&policy, &value, factory, config, seed::indexed(rollout_stream, it as u64))
        })?;
        let mut gae = compute_gae(&batch, config.discount, config.gae_lambda);
        normalize_advantages(&mut gae.advantages);
        let samples: Vec<PpoSample> = (0..batch.len())
            .map(|i| PpoSample {
                state: &batch.states[i],
                action: &batch.actions[i],
                old_log_prob: batch.log_probs[i],
                advantage: gae.advantages[i],
                value_target: gae.value_targets[i],
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed::indexed(shuffle_stream, it as u64));
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let (mut policy_loss, mut value_loss, mut updates) = (0.0, 0.0, 0usize);
        for _ in 0..config.epochs_per_batch {
            order.shuffle(&mut rng);
            for idx in order.chunks(config.minibatch_size) {
                let mb: Vec<PpoSample> = idx.iter().map(|&i| samples[i]).collect();
                let mut loss = pool.install(|| ppo_loss(&policy, &value, &mb, config))?;
                clip_grad_norm(&mut loss.policy_grad, config.max_grad_norm);
                clip_grad_norm(&mut loss.value_grad, config.max_grad_norm);
                policy_opt.step(policy.net.params_mut(), &loss.policy_grad);
                value_opt.step(value.params_mut(), &loss.value_grad);
                policy_loss += loss.policy_loss;
                value_loss += loss.value_loss;
                updates += 1;
            }
        }

        let episode_costs = batch.episode_costs();
        let report = PpoReport {
            iteration: it,
            eval_cost_deterministic: eval,
            mean_batch_reward: -episode_costs.iter().sum::<f64>() / episode_costs.len() as f64,
            policy_loss: policy_loss / updates as f64,
            value_loss: value_loss / updates as f64,
            mean_sigma: batch.mean_sigma,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "ppo iteration {it}: eval {eval:.3} batch reward {:.3} sigma {:.4}",
            report.mean_batch_reward,
            report.mean_sigma
        );
        observer(&report, &policy, &value)?;
        curve.push(report);
    }

    let final_eval_cost = pool.install(|| evaluate_policy(&policy, factory, eval_seeds))?;
    if let Some(start) = start_cost {
        guard(config.iterations, final_eval_cost, start)?;
    }
    Ok(PpoOutcome {
        policy,
        value,
        curve,
        final_eval_cost,
    })
}
