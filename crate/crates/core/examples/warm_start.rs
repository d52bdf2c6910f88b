//! Builds the stochastic actor and the critic from a deterministic policy and
//! checks that the actor's mean reproduces the original output.

use gridhvac::nn::{transfer_warm_start, Mlp, MlpSpec, WarmStartConfig};

fn main() -> gridhvac::Result<()> {
    let spec = MlpSpec::new(vec![10, 32, 16, 4]);
    let det = Mlp::init(spec.clone(), 3)?;
    let (actor, critic) =
        transfer_warm_start(&det, &spec.with_output(8), &spec.with_output(1), &WarmStartConfig::default())?;
    let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
    let out = actor.evaluate(&x)?;
    println!("deterministic {:?}", det.forward(&x)?);
    println!("actor mean    {:?}", out.mean);
    println!("actor sigma   {:?}", out.sigma);
    println!("critic value  {:?}", critic.forward(&x)?);
    Ok(())
}
