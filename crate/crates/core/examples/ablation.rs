//! Prints a module-toggle ablation on the default synthetic spec.
//!
//! cargo run --release -p semalign --example ablation

use semalign::harness::{
    expand_grid, run_experiment_grid, ExperimentConfig, GridAxis, GridOptions, SynthSpec,
};

fn main() -> semalign::Result<()> {
    let cfg = ExperimentConfig::default();
    let spec = SynthSpec::default();
    let modules = ["linear", "ssc", "ssc+sam", "ssc+mff", "ssc+mff+sam"]
        .iter()
        .map(|s| s.parse())
        .collect::<semalign::Result<Vec<_>>>()?;
    let cells = expand_grid(&cfg, &spec, &[GridAxis::Modules(modules)])?;
    let start = std::time::Instant::now();
    let results = run_experiment_grid(&cells, &cfg.seeds, &GridOptions::default(), None)?;
    print!("{}", results.summary_csv());
    eprintln!("elapsed {:?}", start.elapsed());
    Ok(())
}
