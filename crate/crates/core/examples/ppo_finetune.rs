//! A few clipped-surrogate iterations on a small building policy, warm-started
//! from a random deterministic network.

use gridhvac::env::{EnvFactory, ScenarioConfig, StateLayout};
use gridhvac::nn::{transfer_warm_start, Mlp, MlpSpec, WarmStartConfig};
use gridhvac::ppo::{train_ppo, PpoConfig};
use gridhvac::rom::{generate_synthetic_exogenous, BuildingModel, WeatherConfig};

fn main() -> gridhvac::Result<()> {
    let model = BuildingModel::five_zone_reference();
    let cfg = ScenarioConfig::default();
    let days = generate_synthetic_exogenous(&WeatherConfig::default(), 2, 5)
        .chunks(cfg.horizon)
        .map(<[_]>::to_vec)
        .collect();
    let factory = EnvFactory::new(model.clone(), cfg.clone(), days)?;
    let input = StateLayout::new(model.zone_count(), &cfg).dim();
    let spec = MlpSpec::new(vec![input, 32, 16, model.action_dim()]);
    let det = Mlp::init(spec.clone(), 11)?;
    let (policy, value) =
        transfer_warm_start(&det, &spec.with_output(2 * model.action_dim()), &spec.with_output(1), &WarmStartConfig::default())?;
    let config = PpoConfig {
        learning_rate: 1e-4,
        iterations: 3,
        rollout_episodes_per_iteration: 2,
        epochs_per_batch: 2,
        worker_count: 2,
        ..PpoConfig::default()
    };
    let outcome = train_ppo(policy, value, &config, &factory, &[0, 1], |r, _, _| {
        println!(
            "iteration {}: eval {:.1}, policy loss {:.4}, value loss {:.1}",
            r.iteration, r.eval_cost_deterministic, r.policy_loss, r.value_loss
        );
        Ok(())
    })?;
    println!("final eval {:.1}", outcome.final_eval_cost);
    Ok(())
}
