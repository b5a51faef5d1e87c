//! NN-FVI on the tiny capacity instance, compared with exact lattice DP.
//!
//! cargo run --release --example fvi_tiny_mcip

use std::time::Instant;

use nnfvi::fvi::{exact_dp, run_nnfvi, FviConfig};
use nnfvi::mcip::{build_mcip_mdp, McipInstance, McipLattice};

fn main() -> nnfvi::Result<()> {
    env_logger::init();
    let inst = McipInstance::tiny();
    let spec = build_mcip_mdp(&inst)?;

    let start = Instant::now();
    let dp = exact_dp(&McipLattice::new(&inst)?)?;
    let exact = dp.value(1, &spec.initial_state).expect("initial state is on the lattice");
    println!("exact DP   V1 = {exact:.4}  ({:.2?})", start.elapsed());

    let start = Instant::now();
    let values = run_nnfvi(&spec, &FviConfig::default())?;
    println!(
        "NN-FVI     V1 = {:.4}  action {:?}  ({:.2?})",
        values.initial_value,
        values.initial_action,
        start.elapsed()
    );
    for fit in &values.fits {
        println!("  period {}: training loss {:.4e}, mean target {:.3}", fit.period, fit.loss, fit.target_mean);
    }
    println!("relative error {:.2}%", 100.0 * (values.initial_value - exact).abs() / exact.abs());
    println!("exact first action {:?}", dp.action(1, &spec.initial_state).expect("on lattice"));
    Ok(())
}
