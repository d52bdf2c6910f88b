use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Mlp, MlpSpec};
use crate::error::{Error, Result};

/// `ln(1 + e^x)`, overflow-free.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(mean: &[f64], sigma: &[f64], action: &[f64]) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    mean.iter()
        .zip(sigma)
        .zip(action)
        .map(|((m, s), a)| {
            let z = (a - m) / s;
            -0.5 * z * z - s.ln() - half_log_2pi
        })
        .sum()
}

/// Diagonal Gaussian policy. The network emits `action_dim` means followed by
/// `action_dim` pre-activations `p` with `sigma = softplus(p) + floor`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub sigma_floor: f64,
}

/// Quantities of one policy evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    pre_sigma: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(net: Mlp, sigma_floor: f64) -> Result<Self> {
        let out = net.spec().output_dim();
        if !out.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "policy network needs an even output width, got {out}"
            )));
        }
        if !(sigma_floor >= 0.0) {
            return Err(Error::InvalidConfig("sigma floor must be non-negative".into()));
        }
        Ok(GaussianPolicy { net, sigma_floor })
    }

    pub fn action_dim(&self) -> usize {
        self.net.spec().output_dim() / 2
    }

    /// Splits a raw network output into mean and sigma.
    pub fn split(&self, output: &[f64]) -> PolicyOutput {
        let d = self.action_dim();
        PolicyOutput {
            mean: output[..d].to_vec(),
            sigma: output[d..].iter().map(|p| softplus(*p) + self.sigma_floor).collect(),
            pre_sigma: output[d..].to_vec(),
        }
    }

    pub fn evaluate(&self, state: &[f64]) -> Result<PolicyOutput> {
        Ok(self.split(&self.net.forward(state)?))
    }

    /// Deterministic action.
    pub fn mean_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.net.forward(state)?;
        out.truncate(self.action_dim());
        Ok(out)
    }

    /// Draws `mean + sigma * z` and returns it with its log-density.
    pub fn sample_action<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let p = self.evaluate(state)?;
        let a: Vec<f64> = p
            .mean
            .iter()
            .zip(&p.sigma)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = gaussian_log_prob(&p.mean, &p.sigma, &a);
        Ok((a, lp))
    }

    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let p = self.evaluate(state)?;
        if action.len() != p.mean.len() {
            return Err(Error::DimensionMismatch {
                context: "policy action",
                expected: p.mean.len(),
                got: action.len(),
            });
        }
        Ok(gaussian_log_prob(&p.mean, &p.sigma, action))
    }

    /// Log-density of `action` and its gradient with respect to the raw
    /// network output.
    pub fn log_prob_output_grad(&self, output: &[f64], action: &[f64]) -> (f64, Vec<f64>) {
        let p = self.split(output);
        let d = self.action_dim();
        let mut grad = vec![0.0; 2 * d];
        for i in 0..d {
            let s = p.sigma[i];
            let diff = action[i] - p.mean[i];
            grad[i] = diff / (s * s);
            let dsigma = -1.0 / s + diff * diff / (s * s * s);
            grad[d + i] = dsigma * sigmoid(p.pre_sigma[i]);
        }
        (gaussian_log_prob(&p.mean, &p.sigma, action), grad)
    }

    /// Entropy of the action distribution and its gradient with respect to
    /// the raw network output.
    pub fn entropy_output_grad(&self, output: &[f64]) -> (f64, Vec<f64>) {
        let p = self.split(output);
        let d = self.action_dim();
        let c = 0.5 * (1.0 + (2.0 * PI).ln());
        let mut grad = vec![0.0; 2 * d];
        let mut h = 0.0;
        for i in 0..d {
            h += p.sigma[i].ln() + c;
            grad[d + i] = sigmoid(p.pre_sigma[i]) / p.sigma[i];
        }
        (h, grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmStartConfig {
    /// Exploration spread right after the transfer, in raw action units.
    pub sigma_init: f64,
    pub sigma_floor: f64,
    /// Seed of the value network's fresh output layer.
    pub value_seed: u64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        WarmStartConfig {
            sigma_init: 0.1,
            sigma_floor: 1e-3,
            value_seed: 0,
        }
    }
}

fn same_hidden(a: &MlpSpec, b: &MlpSpec) -> bool {
    let n = a.layer_sizes.len();
    n == b.layer_sizes.len()
        && a.layer_sizes[..n - 1] == b.layer_sizes[..n - 1]
        && a.hidden_activation == b.hidden_activation
        && a.output_activation == b.output_activation
}

/// Builds the stage-two actor and critic from a trained deterministic policy.
///
/// The actor keeps every layer of `es_net`; its output layer gains
/// `action_dim` sigma rows with zero weights and a bias giving `sigma_init`.
/// The critic keeps every layer except the output, which is freshly drawn.
pub fn transfer_warm_start(
    es_net: &Mlp,
    policy_spec: &MlpSpec,
    value_spec: &MlpSpec,
    config: &WarmStartConfig,
) -> Result<(GaussianPolicy, Mlp)> {
    let d = es_net.spec().output_dim();
    if policy_spec.output_dim() != 2 * d || !same_hidden(es_net.spec(), policy_spec) {
        return Err(Error::InvalidConfig(format!(
            "policy spec {:?} is not the source {:?} with {} outputs",
            policy_spec.layer_sizes,
            es_net.spec().layer_sizes,
            2 * d
        )));
    }
    if value_spec.output_dim() != 1 || !same_hidden(es_net.spec(), value_spec) {
        return Err(Error::InvalidConfig(format!(
            "value spec {:?} is not the source {:?} with one output",
            value_spec.layer_sizes,
            es_net.spec().layer_sizes
        )));
    }
    if !(config.sigma_init > config.sigma_floor) {
        return Err(Error::InvalidConfig("initial sigma must exceed the sigma floor".into()));
    }

    let src = es_net.params();
    let src_last = *es_net.layout().layers.last().expect("validated spec");
    let shared = src_last.weights;

    let mut actor = Mlp::zeros(policy_spec.clone())?;
    let last = *actor.layout().layers.last().expect("validated spec");
    let pre_sigma = softplus_inverse(config.sigma_init - config.sigma_floor);
    {
        let p = actor.params_mut();
        p[..shared].copy_from_slice(&src[..shared]);
        let mean_rows = d * last.n_in;
        p[last.weights..last.weights + mean_rows].copy_from_slice(&src[src_last.weights..src_last.bias]);
        p[last.bias..last.bias + d].copy_from_slice(&src[src_last.bias..src_last.bias + d]);
        for b in &mut p[last.bias + d..last.bias + 2 * d] {
            *b = pre_sigma;
        }
    }

    let mut critic = Mlp::zeros(value_spec.clone())?;
    critic.params_mut()[..shared].copy_from_slice(&src[..shared]);
    let head = *critic.layout().layers.last().expect("validated spec");
    critic.init_layer(&head, &mut ChaCha8Rng::seed_from_u64(config.value_seed));

    Ok((GaussianPolicy::new(actor, config.sigma_floor)?, critic))
}
