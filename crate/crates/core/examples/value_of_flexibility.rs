//! Flexible (NN-FVI greedy) against inflexible capacity on the case-study
//! instance at the two corners of the discount / salvage grid.
//!
//! cargo run --release --example value_of_flexibility

use nnfvi::fvi::FviConfig;
use nnfvi::mcd::{Engine, McdConfig};
use nnfvi::mcip::{sweep_cell, McipInstance, SweepConfig};
use nnfvi::neural::{TrainConfig, TrainMethod};

fn main() -> nnfvi::Result<()> {
    env_logger::init();
    let inst = McipInstance::case_study();
    let cfg = SweepConfig {
        paths: 500,
        fvi: FviConfig {
            state_samples: 600,
            train: TrainConfig { method: TrainMethod::LevenbergMarquardt, max_epochs: 1000, ..TrainConfig::default() },
            selection: McdConfig { engine: Engine::BruteForce, ..McdConfig::default() },
            ..FviConfig::default()
        },
        ..SweepConfig::default()
    };
    println!("discount  salvage  inflexible K  inflexible ENPV   flexible ENPV   improvement");
    for (discount, ratio) in [(0.862, 0.0), (0.99, 0.99)] {
        let row = sweep_cell(&inst, discount, ratio, &cfg)?;
        println!(
            "{discount:>8}  {ratio:>7}  {:>12?}  {:>8.3} ± {:.3}  {:>8.3} ± {:.3}  {:>6.1}%",
            row.inflexible_capacity,
            row.inflexible_enpv,
            row.inflexible_se,
            row.flexible_enpv,
            row.flexible_se,
            row.improvement_pct
        );
    }
    Ok(())
}
