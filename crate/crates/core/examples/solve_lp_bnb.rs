//! The bundled dense simplex and branch-and-bound on textbook problems.
//!
//! cargo run --release --example solve_lp_bnb

use nnfvi::bnb::{solve_milp, MilpProblem};
use nnfvi::simplex::{solve_lp, LpProblem, RowSense, Sense};

fn main() -> nnfvi::Result<()> {
    // max 3x + 5y  s.t.  x <= 4,  2y <= 12,  3x + 2y <= 18
    let mut lp = LpProblem::new(Sense::Maximize, vec![3.0, 5.0]);
    lp.add_row(vec![1.0, 0.0], RowSense::Le, 4.0)
        .add_row(vec![0.0, 2.0], RowSense::Le, 12.0)
        .add_row(vec![3.0, 2.0], RowSense::Le, 18.0);
    let s = solve_lp(&lp)?;
    println!("LP: {:?} objective {} at {:?}", s.status, s.objective, s.x);
    println!("    row duals {:?}, {} pivots", s.duals, s.pivots.len());

    // 0/1 knapsack: values 10, 13, 7, 8; weights 5, 7, 4, 3; capacity 12
    let mut lp = LpProblem::new(Sense::Maximize, vec![10.0, 13.0, 7.0, 8.0]);
    lp.add_row(vec![5.0, 7.0, 4.0, 3.0], RowSense::Le, 12.0);
    for k in 0..4 {
        lp.set_bounds(k, 0.0, 1.0);
    }
    let m = solve_milp(&MilpProblem { lp, binaries: (0..4).collect() })?;
    println!("MILP: {:?} objective {} at {:?} after {} nodes", m.status, m.objective, m.x, m.nodes);
    Ok(())
}
