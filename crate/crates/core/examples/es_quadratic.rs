//! Evolution strategies on a shifted quadratic.

use gridhvac::es::{train_es, EsConfig, FitnessFn};

struct Bowl(Vec<f64>);

impl FitnessFn for Bowl {
    fn cost(&self, params: &[f64], _seeds: &[u64]) -> gridhvac::Result<f64> {
        Ok(params.iter().zip(&self.0).map(|(p, c)| (p - c).powi(2)).sum())
    }
}

fn main() -> gridhvac::Result<()> {
    let bowl = Bowl(vec![1.0, -2.0, 0.5, 3.0]);
    let config = EsConfig {
        population_size: 32,
        perturbation_std: 0.1,
        learning_rate: 0.05,
        iterations: 200,
        worker_count: 2,
        ..EsConfig::default()
    };
    let outcome = train_es(vec![0.0; 4], &config, &bowl, |r, _| {
        if r.iteration % 50 == 0 {
            println!("iteration {:3}: cost {:.4}", r.iteration, r.eval_cost);
        }
        Ok(())
    })?;
    println!("final cost {:.2e}, params {:?}", outcome.final_eval_cost, outcome.params);
    Ok(())
}
