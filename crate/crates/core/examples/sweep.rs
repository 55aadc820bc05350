//! Runs a two-recipe sweep over a deliberately tiny configuration, then runs
//! it again to show that finished runs are resumed, not repeated.
//!
//! cargo run --example sweep -- [root]

use ssr_core::harness::{sweep, EvalRecipe, EvalTask, ExperimentConfig, SweepOptions};
use ssr_core::modelkit::ToyConfig;

fn main() -> ssr_core::Result<()> {
    let root = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("ssr-sweep-example").display().to_string());
    let mut base = ExperimentConfig { train_size: 32, pretrain_gate: 0.0, ..ExperimentConfig::default() };
    base.world.pretrain_size = 64;
    base.world.test_size = 16;
    base.model = ToyConfig { width: 16, heads: 2, layers: 1, ..ToyConfig::default() };
    base.pretrain.epochs = 2;
    let configs: Vec<ExperimentConfig> = [EvalRecipe::Ssr, EvalRecipe::SftDimt]
        .into_iter()
        .map(|recipe| ExperimentConfig { recipe, ..base.clone() })
        .collect();
    for pass in 1..=2 {
        let summary = sweep(&configs, &SweepOptions::new(&root))?;
        println!("pass {pass}: {} reports, {} resumed", summary.reports.len(), summary.resumed.len());
        for r in &summary.reports {
            println!("  {:9} seed {} translation CA {:.3}", r.config.recipe.as_str(), r.seed, r.ca(EvalTask::Dimt).unwrap_or(f64::NAN));
        }
    }
    Ok(())
}
