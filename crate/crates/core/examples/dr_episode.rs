//! Runs one day with a demand-response event under a constant mid-range
//! action and prints the cost breakdown.

use gridhvac::env::{describe_event, DrEvent, EnvFactory, ScenarioConfig};
use gridhvac::rom::{generate_synthetic_exogenous, BuildingModel, WeatherConfig};

fn main() -> gridhvac::Result<()> {
    let model = BuildingModel::five_zone_reference();
    let cfg = ScenarioConfig::default();
    let day = generate_synthetic_exogenous(&WeatherConfig::default(), 1, 7);
    let factory = EnvFactory::new(model.clone(), cfg.clone(), vec![day])?;
    let event = DrEvent::from_chi(0.3, cfg.step_of_hour(14.0), cfg.dt);
    println!("{}", describe_event(&event, cfg.dt));

    let mut ep = factory.make_with(0, Some(event))?;
    println!("state dimension {}", ep.state()?.len());
    let action = vec![0.0; model.action_dim()];
    let cost = ep.run(|_| Ok(action.clone()))?;
    let parts = ep.cumulative_costs();
    println!(
        "cost {cost:.2}: discomfort {:.2}, energy {:.2} kWh, violation {:.2}",
        parts.discomfort, parts.energy_kwh, parts.violation
    );
    Ok(())
}
