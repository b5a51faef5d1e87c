//! Best-first branch-and-bound for LPs with binary variables.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{solve_lp, LpProblem, LpStatus, Sense};

#[derive(Clone, Debug, PartialEq)]
pub struct MilpProblem {
    pub lp: LpProblem,
    /// Indices of variables restricted to {0, 1}.
    pub binaries: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilpOptions {
    /// Nodes whose bound does not beat the incumbent by more than this are pruned.
    pub abs_tol: f64,
    pub integrality_tol: f64,
    pub node_limit: usize,
}

impl Default for MilpOptions {
    fn default() -> Self {
        Self { abs_tol: 1e-6, integrality_tol: 1e-6, node_limit: 100_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MilpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    /// Stopped at the node limit; `x` is the best incumbent, if any.
    NodeLimit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilpSolution {
    pub status: MilpStatus,
    pub objective: f64,
    pub x: Vec<f64>,
    /// Proven bound on the optimum, in the problem's sense.
    pub bound: f64,
    /// LP relaxations solved, root included.
    pub nodes: usize,
    /// Global bound after each processed node.
    pub bound_trace: Vec<f64>,
}

struct Node {
    /// relaxation value, oriented so that larger is better
    score: f64,
    id: usize,
    fixed: Vec<(usize, f64)>,
    x: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.id.cmp(&self.id))
    }
}

/// The LP with the given variables fixed and substituted out.
struct Restricted {
    lp: LpProblem,
    kept: Vec<usize>,
    constant: f64,
}

fn restrict(p: &LpProblem, fixed: &[(usize, f64)]) -> Restricted {
    let n = p.num_vars();
    let mut value = vec![None; n];
    for &(j, v) in fixed {
        value[j] = Some(v);
    }
    let kept: Vec<usize> = (0..n).filter(|&j| value[j].is_none()).collect();
    let constant: f64 = fixed.iter().map(|&(j, v)| p.objective[j] * v).sum();
    let mut lp = LpProblem::new(p.sense, kept.iter().map(|&j| p.objective[j]).collect());
    for (k, &j) in kept.iter().enumerate() {
        lp.set_bounds(k, p.lower[j], p.upper[j]);
    }
    for i in 0..p.num_rows() {
        let shift: f64 = fixed.iter().map(|&(j, v)| p.rows[i][j] * v).sum();
        lp.add_row(kept.iter().map(|&j| p.rows[i][j]).collect(), p.row_senses[i], p.rhs[i] - shift);
    }
    Restricted { lp, kept, constant }
}

const UNBOUNDED: &str = "unbounded relaxation";

pub fn solve_milp(p: &MilpProblem) -> Result<MilpSolution> {
    solve_milp_with(p, &MilpOptions::default())
}

pub fn solve_milp_with(p: &MilpProblem, opts: &MilpOptions) -> Result<MilpSolution> {
    p.lp.validate()?;
    let n = p.lp.num_vars();
    if let Some(&j) = p.binaries.iter().find(|&&j| j >= n) {
        return Err(Error::Milp(format!("binary index {j} out of range for {n} variables")));
    }
    let mut lp = p.lp.clone();
    for &j in &p.binaries {
        lp.lower[j] = lp.lower[j].max(0.0);
        lp.upper[j] = lp.upper[j].min(1.0);
    }
    let orient = match lp.sense {
        Sense::Maximize => 1.0,
        Sense::Minimize => -1.0,
    };

    let nodes = std::cell::Cell::new(0usize);
    let relax = |fixed: &[(usize, f64)]| -> Result<Option<(f64, Vec<f64>)>> {
        nodes.set(nodes.get() + 1);
        let r = restrict(&lp, fixed);
        let s = solve_lp(&r.lp)?;
        match s.status {
            LpStatus::Infeasible => Ok(None),
            LpStatus::Unbounded => Err(Error::Milp(UNBOUNDED.into())),
            LpStatus::Optimal => {
                let mut x = vec![0.0; n];
                for &(j, v) in fixed {
                    x[j] = v;
                }
                for (k, &j) in r.kept.iter().enumerate() {
                    x[j] = s.x[k];
                }
                Ok(Some((s.objective + r.constant, x)))
            }
        }
    };

    let root = match relax(&[]) {
        Err(Error::Milp(msg)) if msg == UNBOUNDED => {
            return Ok(MilpSolution {
                status: MilpStatus::Unbounded,
                objective: orient * f64::INFINITY,
                x: Vec::new(),
                bound: orient * f64::INFINITY,
                nodes: 1,
                bound_trace: Vec::new(),
            })
        }
        other => other?,
    };
    let Some((root_value, root_x)) = root else {
        return Ok(MilpSolution {
            status: MilpStatus::Infeasible,
            objective: f64::NAN,
            x: Vec::new(),
            bound: orient * f64::NEG_INFINITY,
            nodes: 1,
            bound_trace: Vec::new(),
        });
    };

    let fractional = |x: &[f64]| -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for &j in &p.binaries {
            let dist = (x[j] - x[j].round()).abs();
            if dist > opts.integrality_tol {
                let closeness = (x[j] - 0.5).abs();
                if best.is_none_or(|(b, c)| closeness < c - 1e-12 || (closeness <= c + 1e-12 && j < b)) {
                    best = Some((j, closeness));
                }
            }
        }
        best.map(|(j, _)| j)
    };
    let snap = |mut x: Vec<f64>| -> Vec<f64> {
        for &j in &p.binaries {
            x[j] = x[j].round();
        }
        x
    };

    let mut incumbent: Option<(f64, Vec<f64>)> = None;
    let mut heap = BinaryHeap::new();
    let mut next_id = 0usize;
    let mut trace = Vec::new();
    if fractional(&root_x).is_none() {
        incumbent = Some((orient * root_value, snap(root_x)));
    } else {
        heap.push(Node { score: orient * root_value, id: next_id, fixed: Vec::new(), x: root_x });
        next_id += 1;
    }

    // best relaxation value discarded only because of `abs_tol`
    let mut pruned = f64::NEG_INFINITY;
    let mut hit_limit = false;
    while let Some(node) = heap.pop() {
        if incumbent.as_ref().is_some_and(|(v, _)| node.score <= v + opts.abs_tol) {
            pruned = pruned.max(node.score);
            heap.clear();
            break;
        }
        if nodes.get() + 2 > opts.node_limit {
            heap.push(node);
            hit_limit = true;
            break;
        }
        let j = fractional(&node.x).expect("queued nodes are fractional");
        for v in [0.0, 1.0] {
            let mut fixed = node.fixed.clone();
            fixed.push((j, v));
            let Some((value, x)) = relax(&fixed)? else { continue };
            let score = orient * value;
            if incumbent.as_ref().is_some_and(|(best, _)| score <= best + opts.abs_tol) {
                pruned = pruned.max(score);
                continue;
            }
            if fractional(&x).is_none() {
                incumbent = Some((score, snap(x)));
            } else {
                heap.push(Node { score, id: next_id, fixed, x });
                next_id += 1;
            }
        }
        let open = heap.peek().map_or(f64::NEG_INFINITY, |n| n.score);
        let best = incumbent.as_ref().map_or(f64::NEG_INFINITY, |(v, _)| *v);
        trace.push(orient * open.max(best).max(pruned));
    }

    let open = heap.peek().map_or(f64::NEG_INFINITY, |n| n.score).max(pruned);
    let nodes = nodes.get();
    Ok(match incumbent {
        Some((score, x)) => MilpSolution {
            status: if hit_limit { MilpStatus::NodeLimit } else { MilpStatus::Optimal },
            objective: orient * score,
            bound: orient * open.max(score),
            x,
            nodes,
            bound_trace: trace,
        },
        None if hit_limit => MilpSolution {
            status: MilpStatus::NodeLimit,
            objective: f64::NAN,
            x: Vec::new(),
            bound: orient * open,
            nodes,
            bound_trace: trace,
        },
        None => MilpSolution {
            status: MilpStatus::Infeasible,
            objective: f64::NAN,
            x: Vec::new(),
            bound: orient * f64::NEG_INFINITY,
            nodes,
            bound_trace: trace,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::simplex::RowSense;
    use rand::Rng;

    fn random_binary_program(rng: &mut crate::rng::SimRng, k: usize) -> MilpProblem {
        let mut lp = LpProblem::new(Sense::Maximize, (0..k).map(|_| rng.random_range(-2.0..5.0)).collect());
        for _ in 0..rng.random_range(1..4) {
            let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..4.0)).collect();
            let cap = 0.4 * row.iter().sum::<f64>();
            lp.add_row(row, RowSense::Le, cap);
        }
        MilpProblem { lp, binaries: (0..k).collect() }
    }

    fn enumerate(p: &MilpProblem) -> Option<f64> {
        let k = p.binaries.len();
        (0u32..1 << k)
            .filter_map(|mask| {
                let x: Vec<f64> = (0..k).map(|b| f64::from((mask >> b) & 1)).collect();
                (p.lp.max_violation(&x) <= 1e-12).then(|| p.lp.evaluate(&x))
            })
            .reduce(f64::max)
    }

    #[test]
    fn matches_enumeration_on_knapsacks() {
        let mut rng = substream(31, &[]);
        for _ in 0..40 {
            let k = rng.random_range(2..=10);
            let p = random_binary_program(&mut rng, k);
            let s = solve_milp(&p).unwrap();
            let oracle = enumerate(&p).unwrap();
            assert_eq!(s.status, MilpStatus::Optimal);
            assert!((s.objective - oracle).abs() <= 1e-8, "{} vs {oracle}", s.objective);
            assert!(s.bound >= s.objective - 1e-12 && s.bound <= s.objective + 1e-6);
        }
    }

    #[test]
    fn integral_root_needs_one_node() {
        let mut lp = LpProblem::new(Sense::Maximize, vec![1.0, 1.0]);
        lp.add_row(vec![1.0, 0.0], RowSense::Le, 1.0);
        let s = solve_milp(&MilpProblem { lp, binaries: vec![0, 1] }).unwrap();
        assert_eq!(s.nodes, 1);
        assert_eq!(s.x, vec![1.0, 1.0]);
    }

    #[test]
    fn infeasible_binaries() {
        let mut lp = LpProblem::new(Sense::Maximize, vec![1.0]);
        lp.add_row(vec![1.0], RowSense::Eq, 0.5);
        let s = solve_milp(&MilpProblem { lp, binaries: vec![0] }).unwrap();
        assert_eq!(s.status, MilpStatus::Infeasible);
    }

    #[test]
    fn bound_trace_is_monotone() {
        let mut rng = substream(32, &[]);
        for _ in 0..20 {
            let p = random_binary_program(&mut rng, 10);
            let s = solve_milp(&p).unwrap();
            for w in s.bound_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9);
            }
        }
    }

    #[test]
    fn minimisation_with_continuous_part() {
        // min 3y - x  s.t. x <= 4y, x <= 2.5, y binary
        let mut lp = LpProblem::new(Sense::Minimize, vec![-1.0, 3.0]);
        lp.add_row(vec![1.0, -4.0], RowSense::Le, 0.0);
        lp.set_bounds(0, 0.0, 2.5);
        let s = solve_milp(&MilpProblem { lp, binaries: vec![1] }).unwrap();
        assert!((s.objective - 0.0).abs() < 1e-9, "{s:?}");
    }

    #[test]
    fn node_limit_reports_incumbent_and_bound() {
        let mut rng = substream(33, &[]);
        let p = random_binary_program(&mut rng, 12);
        let s = solve_milp_with(&p, &MilpOptions { node_limit: 3, ..Default::default() }).unwrap();
        let oracle = enumerate(&p).unwrap();
        assert!(s.bound >= oracle - 1e-9);
        if s.status == MilpStatus::NodeLimit && !s.x.is_empty() {
            assert!(s.objective <= oracle + 1e-9);
        }
    }
}
