//! Run the loop with each sampler on the same synthetic data and print the
//! per-round test accuracies and selected class counts.
//!
//! cargo run --release -p bayesrank --example compare_samplers -- [seed]

use std::time::Instant;

use bayesrank::data::{split_groupwise, synth_generate};
use bayesrank::{run_loop, Sampler, Settings, SimulatedOracle, SynthConfig};

fn main() -> bayesrank::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let synth = SynthConfig { seed, ..Default::default() };
    let data = synth_generate(&synth)?;
    let split = split_groupwise(&data.dataset, [0.6, 0.2, 0.2], seed)?;
    for sampler in [Sampler::Ubs, Sampler::Random, Sampler::Coreset] {
        let mut settings = Settings::default();
        settings.loop_config.seed = seed;
        settings.loop_config.sampler = sampler;
        settings.train.seed = seed;
        settings.overall_test_repeats = 10;
        let start = Instant::now();
        let mut oracle = SimulatedOracle::new(&data.dataset);
        let state = run_loop(&data.dataset, split.clone().into(), &mut oracle, settings, None)?;
        println!("== {sampler:?} ({:.1}s)", start.elapsed().as_secs_f64());
        for r in &state.metrics_by_round {
            let eval = r.eval.as_ref().unwrap();
            let var: Vec<String> = r.pool_uncertainty.values().map(|q| format!("{:.2e}", q.mean)).collect();
            println!(
                "round {} pairs {:4} overall {:.3} neigh {:?} sel {:?} var {:?} best_epoch {}",
                r.round,
                r.labeled_pairs,
                eval.overall_accuracy.unwrap_or(f64::NAN),
                eval.neighboring.values().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
                r.selected_class_counts,
                var,
                r.train.best_epoch,
            );
        }
    }
    Ok(())
}
