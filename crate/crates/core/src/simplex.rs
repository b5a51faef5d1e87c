//! Dense two-phase primal simplex with Bland's anti-cycling rule.
//!
//! Intended for the small LPs of this crate (tens to a few hundred rows):
//! operating-profit allocations and branch-and-bound relaxations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEASIBILITY_TOL: f64 = 1e-9;
pub const OPTIMALITY_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 100;
const MAX_PIVOTS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Maximize,
    Minimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowSense {
    Le,
    Eq,
    Ge,
}

/// `opt cᵀx  s.t.  A x (≤ | = | ≥) b,  lower <= x <= upper`.
///
/// Bounds may be infinite; new variables default to `[0, +∞)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LpProblem {
    pub sense: Sense,
    pub objective: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub row_senses: Vec<RowSense>,
    pub rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LpProblem {
    pub fn new(sense: Sense, objective: Vec<f64>) -> Self {
        let n = objective.len();
        Self {
            sense,
            objective,
            rows: Vec::new(),
            row_senses: Vec::new(),
            rhs: Vec::new(),
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn add_row(&mut self, coefs: Vec<f64>, sense: RowSense, rhs: f64) -> &mut Self {
        self.rows.push(coefs);
        self.row_senses.push(sense);
        self.rhs.push(rhs);
        self
    }

    pub fn set_bounds(&mut self, var: usize, lower: f64, upper: f64) -> &mut Self {
        self.lower[var] = lower;
        self.upper[var] = upper;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.lower.len().min(self.upper.len()) });
        }
        if self.row_senses.len() != self.rows.len() || self.rhs.len() != self.rows.len() {
            return Err(Error::DimensionMismatch { expected: self.rows.len(), got: self.rhs.len() });
        }
        if let Some(r) = self.rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch { expected: n, got: r.len() });
        }
        let finite = self.objective.iter().chain(self.rows.iter().flatten()).chain(&self.rhs).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("LP data must be finite".into()));
        }
        for j in 0..n {
            let (lo, hi) = (self.lower[j], self.upper[j]);
            if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return Err(Error::InvalidInput(format!("variable {j} has bounds [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Objective value of `x` in the problem's own sense.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest violation of any row or bound by `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for ((row, sense), b) in self.rows.iter().zip(&self.row_senses).zip(&self.rhs) {
            let lhs: f64 = row.iter().zip(x).map(|(a, v)| a * v).sum();
            let v = match sense {
                RowSense::Le => lhs - b,
                RowSense::Ge => b - lhs,
                RowSense::Eq => (lhs - b).abs(),
            };
            worst = worst.max(v);
        }
        for (j, &v) in x.iter().enumerate() {
            worst = worst.max(self.lower[j] - v).max(v - self.upper[j]);
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Solution of an [`LpProblem`].
///
/// `duals[i]` is the rate of change of the optimal objective with `rhs[i]`;
/// `reduced_costs[j] = c_j − Σ_i duals[i]·A_ij`. Both are empty unless the
/// status is optimal.
#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub objective: f64,
    pub x: Vec<f64>,
    pub duals: Vec<f64>,
    pub reduced_costs: Vec<f64>,
    /// `(entering, leaving)` column pairs, in order.
    pub pivots: Vec<(usize, usize)>,
}

impl LpSolution {
    fn without_point(status: LpStatus, pivots: Vec<(usize, usize)>) -> Self {
        let objective = match status {
            LpStatus::Unbounded => f64::INFINITY,
            _ => f64::NAN,
        };
        Self { status, objective, x: Vec::new(), duals: Vec::new(), reduced_costs: Vec::new(), pivots }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

/// How an original variable is expressed through non-negative columns.
#[derive(Clone, Copy, Debug)]
enum VarMap {
    /// `x = offset + y`
    Shift { col: usize, offset: f64 },
    /// `x = offset − y`
    Mirror { col: usize, offset: f64 },
    /// `x = y⁺ − y⁻`
    Free { pos: usize, neg: usize },
}

struct Tableau {
    m: usize,
    width: usize,
    /// `m` rows of `width + 1` entries, the last being the right-hand side.
    t: Vec<f64>,
    /// original standard-form rows, kept for refactorization
    original: Vec<f64>,
    basis: Vec<usize>,
    obj: Vec<f64>,
    cost: Vec<f64>,
    pivots: Vec<(usize, usize)>,
    since_refactor: usize,
}

impl Tableau {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * (self.width + 1) + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.width)
    }

    fn set_cost(&mut self, cost: Vec<f64>) {
        self.cost = cost;
        self.recompute_objective();
    }

    /// `obj_j = c_Bᵀ B⁻¹ A_j − c_j`; the last entry is the current objective.
    fn recompute_objective(&mut self) {
        let w = self.width + 1;
        let mut obj = vec![0.0; w];
        for j in 0..self.width {
            obj[j] = -self.cost[j];
        }
        for i in 0..self.m {
            let cb = self.cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.t[i * w..(i + 1) * w];
                for (o, v) in obj.iter_mut().zip(row) {
                    *o += cb * v;
                }
            }
        }
        self.obj = obj;
    }

    fn pivot(&mut self, row: usize, col: usize) -> Result<()> {
        let w = self.width + 1;
        let p = self.t[row * w + col];
        let leaving = self.basis[row];
        for v in &mut self.t[row * w..(row + 1) * w] {
            *v /= p;
        }
        let pivot_row: Vec<f64> = self.t[row * w..(row + 1) * w].to_vec();
        for i in 0..self.m {
            if i == row {
                continue;
            }
            let f = self.t[i * w + col];
            if f != 0.0 {
                for (v, pr) in self.t[i * w..(i + 1) * w].iter_mut().zip(&pivot_row) {
                    *v -= f * pr;
                }
                self.t[i * w + col] = 0.0;
            }
        }
        let f = self.obj[col];
        if f != 0.0 {
            for (v, pr) in self.obj.iter_mut().zip(&pivot_row) {
                *v -= f * pr;
            }
            self.obj[col] = 0.0;
        }
        self.basis[row] = col;
        self.pivots.push((col, leaving));
        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_EVERY {
            self.refactor()?;
        }
        if self.pivots.len() > MAX_PIVOTS {
            return Err(Error::Lp(format!("pivot limit {MAX_PIVOTS} exceeded")));
        }
        Ok(())
    }

    /// Rebuilds `B⁻¹[A | b]` from the original rows by Gaussian elimination
    /// on the current basis columns.
    fn refactor(&mut self) -> Result<()> {
        self.since_refactor = 0;
        let (m, w) = (self.m, self.width + 1);
        let mut t = self.original.clone();
        for k in 0..m {
            let col = self.basis[k];
            let (r, best) = (k..m)
                .map(|i| (i, t[i * w + col].abs()))
                .fold((k, -1.0), |acc, v| if v.1 > acc.1 { v } else { acc });
            if best < 1e-11 {
                return Err(Error::Lp("numerically singular basis after refactorization".into()));
            }
            if r != k {
                for j in 0..w {
                    t.swap(r * w + j, k * w + j);
                }
            }
            let p = t[k * w + col];
            for j in 0..w {
                t[k * w + j] /= p;
            }
            for i in 0..m {
                if i != k {
                    let f = t[i * w + col];
                    if f != 0.0 {
                        for j in 0..w {
                            t[i * w + j] -= f * t[k * w + j];
                        }
                    }
                }
            }
        }
        self.t = t;
        self.recompute_objective();
        Ok(())
    }

    /// Runs primal simplex iterations with Bland's rule over `allowed`
    /// entering columns. Returns false on unboundedness.
    fn optimize(&mut self, allowed: &[bool]) -> Result<bool> {
        loop {
            let Some(col) = (0..self.width).find(|&j| allowed[j] && self.obj[j] < -OPTIMALITY_TOL) else {
                return Ok(true);
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let a = self.at(i, col);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i).max(0.0) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((r, best)) => {
                            if ratio < best - 1e-12 || (ratio <= best + 1e-12 && self.basis[i] < self.basis[r]) {
                                Some((i, ratio))
                            } else {
                                Some((r, best))
                            }
                        }
                    };
                }
            }
            match leave {
                None => return Ok(false),
                Some((row, _)) => self.pivot(row, col)?,
            }
        }
    }
}

/// Solves `p`. Deterministic: identical input gives an identical pivot log.
pub fn solve_lp(p: &LpProblem) -> Result<LpSolution> {
    p.validate()?;
    let n = p.num_vars();
    let flip = match p.sense {
        Sense::Maximize => 1.0,
        Sense::Minimize => -1.0,
    };

    // variables -> non-negative columns
    let mut maps = Vec::with_capacity(n);
    let mut ncols = 0;
    let mut bound_rows: Vec<(usize, f64)> = Vec::new();
    for j in 0..n {
        let (lo, hi) = (p.lower[j], p.upper[j]);
        if lo.is_finite() {
            maps.push(VarMap::Shift { col: ncols, offset: lo });
            if hi.is_finite() {
                bound_rows.push((ncols, hi - lo));
            }
            ncols += 1;
        } else if hi.is_finite() {
            maps.push(VarMap::Mirror { col: ncols, offset: hi });
            ncols += 1;
        } else {
            maps.push(VarMap::Free { pos: ncols, neg: ncols + 1 });
            ncols += 2;
        }
    }

    // standard-form rows
    let m_orig = p.num_rows();
    let m = m_orig + bound_rows.len();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut senses = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    for i in 0..m_orig {
        let mut r = vec![0.0; ncols];
        let mut b = p.rhs[i];
        for (j, &a) in p.rows[i].iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            match maps[j] {
                VarMap::Shift { col, offset } => {
                    r[col] += a;
                    b -= a * offset;
                }
                VarMap::Mirror { col, offset } => {
                    r[col] -= a;
                    b -= a * offset;
                }
                VarMap::Free { pos, neg } => {
                    r[pos] += a;
                    r[neg] -= a;
                }
            }
        }
        rows.push(r);
        senses.push(p.row_senses[i]);
        rhs.push(b);
    }
    for &(col, width) in &bound_rows {
        let mut r = vec![0.0; ncols];
        r[col] = 1.0;
        rows.push(r);
        senses.push(RowSense::Le);
        rhs.push(width);
    }
    let mut row_sign = vec![1.0; m];
    for i in 0..m {
        if rhs[i] < 0.0 {
            row_sign[i] = -1.0;
            rhs[i] = -rhs[i];
            for v in &mut rows[i] {
                *v = -*v;
            }
            senses[i] = match senses[i] {
                RowSense::Le => RowSense::Ge,
                RowSense::Ge => RowSense::Le,
                RowSense::Eq => RowSense::Eq,
            };
        }
    }

    // slack / surplus and artificial columns
    let n_slack = senses.iter().filter(|s| **s != RowSense::Eq).count();
    let n_art = senses.iter().filter(|s| **s != RowSense::Le).count();
    let width = ncols + n_slack + n_art;
    let w = width + 1;
    let mut t = vec![0.0; m * w];
    let mut basis = vec![0; m];
    let mut unit_col = vec![0; m];
    let mut is_art = vec![false; width];
    let (mut next_slack, mut next_art) = (ncols, ncols + n_slack);
    for i in 0..m {
        t[i * w..i * w + ncols].copy_from_slice(&rows[i]);
        t[i * w + width] = rhs[i];
        match senses[i] {
            RowSense::Le => {
                t[i * w + next_slack] = 1.0;
                basis[i] = next_slack;
                unit_col[i] = next_slack;
                next_slack += 1;
            }
            RowSense::Ge => {
                t[i * w + next_slack] = -1.0;
                next_slack += 1;
                t[i * w + next_art] = 1.0;
                basis[i] = next_art;
                unit_col[i] = next_art;
                is_art[next_art] = true;
                next_art += 1;
            }
            RowSense::Eq => {
                t[i * w + next_art] = 1.0;
                basis[i] = next_art;
                unit_col[i] = next_art;
                is_art[next_art] = true;
                next_art += 1;
            }
        }
    }

    let mut tab = Tableau {
        m,
        width,
        original: t.clone(),
        t,
        basis,
        obj: Vec::new(),
        cost: Vec::new(),
        pivots: Vec::new(),
        since_refactor: 0,
    };

    // phase 1: maximise −Σ artificials
    if n_art > 0 {
        tab.set_cost(is_art.iter().map(|&a| if a { -1.0 } else { 0.0 }).collect());
        let all = vec![true; width];
        tab.optimize(&all)?;
        let scale = 1.0 + rhs.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if tab.obj[width] < -FEASIBILITY_TOL * scale {
            return Ok(LpSolution::without_point(LpStatus::Infeasible, tab.pivots));
        }
        // drive zero-level artificials out of the basis where possible
        for i in 0..m {
            if is_art[tab.basis[i]] {
                if let Some(j) = (0..width).find(|&j| !is_art[j] && tab.at(i, j).abs() > PIVOT_TOL) {
                    tab.pivot(i, j)?;
                }
            }
        }
    }

    // phase 2
    let mut cost = vec![0.0; width];
    for j in 0..n {
        let c = flip * p.objective[j];
        match maps[j] {
            VarMap::Shift { col, .. } => cost[col] = c,
            VarMap::Mirror { col, .. } => cost[col] = -c,
            VarMap::Free { pos, neg } => {
                cost[pos] = c;
                cost[neg] = -c;
            }
        }
    }
    tab.set_cost(cost);
    let allowed: Vec<bool> = is_art.iter().map(|a| !a).collect();
    if !tab.optimize(&allowed)? {
        return Ok(LpSolution::without_point(LpStatus::Unbounded, tab.pivots));
    }

    let mut y = vec![0.0; width];
    for i in 0..m {
        y[tab.basis[i]] = tab.rhs(i).max(0.0);
    }
    let x: Vec<f64> = maps
        .iter()
        .map(|mp| match *mp {
            VarMap::Shift { col, offset } => offset + y[col],
            VarMap::Mirror { col, offset } => offset - y[col],
            VarMap::Free { pos, neg } => y[pos] - y[neg],
        })
        .collect();
    let duals: Vec<f64> = (0..m_orig).map(|i| flip * row_sign[i] * tab.obj[unit_col[i]]).collect();
    let reduced_costs = (0..n)
        .map(|j| p.objective[j] - (0..m_orig).map(|i| duals[i] * p.rows[i][j]).sum::<f64>())
        .collect();
    Ok(LpSolution {
        status: LpStatus::Optimal,
        objective: p.evaluate(&x),
        x,
        duals,
        reduced_costs,
        pivots: tab.pivots,
    })
}
