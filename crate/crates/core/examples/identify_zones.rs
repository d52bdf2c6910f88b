//! Simulates a week of excited operation on the reference building and
//! identifies every zone model from it.

use gridhvac::rom::{
    feature_select, fit_arx, generate_synthetic_exogenous, simulate_operation, ArxSpec, BuildingModel,
    ExcitationConfig, Feature, WeatherConfig,
};

fn main() -> gridhvac::Result<()> {
    let truth = BuildingModel::five_zone_reference();
    let weather = generate_synthetic_exogenous(&WeatherConfig::default(), 7, 1);
    let data = simulate_operation(&truth, &weather, &ExcitationConfig::default(), 2)?;
    let n = truth.zone_count();
    for zone in 0..n {
        let candidates = Feature::candidates(zone, n);
        let template = ArxSpec::new(1, 1, candidates.clone());
        let chosen = feature_select(&data, zone, &template, &candidates)?;
        let fit = fit_arx(&data, zone, &ArxSpec::new(1, 1, chosen.clone()))?;
        println!("zone {zone}: rmse {:.2e} over {} samples, features {chosen:?}", fit.rmse, fit.samples);
    }
    Ok(())
}
