//! One-step action selection on a random 3-dimensional box: enumeration,
//! the integer L-shaped method and multi-cut decomposition, with the MCD
//! bound trace.
//!
//! cargo run --release --example mcd_vs_bruteforce

use std::time::Instant;

use nnfvi::mcd::{random_instance, select_action, Engine, McdConfig, RandomInstanceConfig, SelectionProblem};

fn main() -> nnfvi::Result<()> {
    let inst = random_instance(11, &RandomInstanceConfig { upper: vec![4, 4, 4], neurons: 12, scenarios: 6, ..Default::default() })?;
    let ctx = inst.context()?;
    let problem = SelectionProblem { ctx: &ctx, reward: &inst.reward, discount: inst.spec.discount };

    let mut mcd_trace = None;
    for engine in [Engine::BruteForce, Engine::LShaped, Engine::Mcd] {
        let start = Instant::now();
        let r = select_action(&problem, &McdConfig { engine, ..McdConfig::default() }, None)?;
        println!(
            "{engine:>8}: action {:?} objective {:.6} after {} iterations ({:.1?})",
            r.action,
            r.objective,
            r.iterations,
            start.elapsed()
        );
        if engine == Engine::Mcd {
            mcd_trace = Some(r.trace);
        }
    }
    println!("\nMCD bounds per iteration:");
    for row in mcd_trace.unwrap_or_default() {
        println!("  {:>3}  lower {:>10.6}  upper {:>10.6}  anchor {:?}", row.iteration, row.lower_bound, row.upper_bound, row.action);
    }
    Ok(())
}
