//! Receding-horizon control through the afternoon of a demand-response day
//! using the linearised plant model.

use gridhvac::env::{DrEvent, EnvFactory, ScenarioConfig};
use gridhvac::mpc::{Forecast, MpcConfig, MpcController, MpcVariant};
use gridhvac::rom::{generate_synthetic_exogenous, BuildingModel, WeatherConfig};

fn main() -> gridhvac::Result<()> {
    let model = BuildingModel::five_zone_reference();
    let cfg = ScenarioConfig::default();
    let day = generate_synthetic_exogenous(&WeatherConfig::default(), 1, 9);
    let factory = EnvFactory::new(model, cfg.clone(), vec![day])?;
    let event = DrEvent::from_chi(0.3, cfg.step_of_hour(14.0), cfg.dt);
    let mut ep = factory.make_with(0, Some(event))?;
    let mut mpc = MpcController::new(MpcConfig {
        variant: MpcVariant::Lin,
        horizon: 6,
        ..MpcConfig::default()
    })?;
    while ep.current_step() < cfg.step_of_hour(17.0) {
        let forecast = Forecast::from_episode(&ep, 6);
        let (cmd, stats) = mpc.step(ep.model(), ep.history(), &forecast)?;
        let out = ep.step_command(&cmd)?;
        if ep.current_step() >= cfg.step_of_hour(13.0) && ep.current_step() % 6 == 0 {
            println!(
                "{:5.2} h  limit {:5.1} kW  power {:5.1} kW  T_da {:4.1}  {} iterations",
                cfg.hour_of_step(ep.current_step()),
                ep.p_limit(ep.current_step() - 1),
                out.power_kw,
                cmd.t_da,
                stats.iterations
            );
        }
    }
    Ok(())
}
