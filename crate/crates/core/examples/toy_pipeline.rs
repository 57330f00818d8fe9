//! Trains and evaluates every arm of a pipeline config.
//!
//! cargo run --release -p sd2-core --example toy_pipeline -- configs/toy_pipeline.json

use sd2::bench::pipeline::{evaluate_pipeline, train_pipeline, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).ok_or("usage: toy_pipeline <config.json>")?;
    let cfg: PipelineConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let models = train_pipeline(&cfg, &mut |line| eprintln!("{line}"))?;
    let (results, _) = evaluate_pipeline(&cfg, &models)?;
    for r in &results {
        let taus: Vec<String> = r.tau_per_seed.iter().map(|t| format!("{t:.3}")).collect();
        let mean = r.tau_per_seed.iter().sum::<f64>() / r.tau_per_seed.len() as f64;
        println!("{:<14} tau {mean:.3} [{}]", r.name, taus.join(", "));
    }
    Ok(())
}
