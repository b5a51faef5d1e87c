//! Multi-facility capacity investment.
//!
//! Each period, demand `d` from `I` customers is allocated to `N`
//! facilities with installed capacity `K`, earning the operating profit
//!
//! ```text
//! Q_t(K, d) = max Σ_in r̂_int·z_in − Σ_i b_it·(d_i − Σ_n z_in)
//!             s.t. Σ_i z_in <= K_n,  Σ_n z_in <= d_i,  z >= 0.
//! ```
//!
//! Capacity is then adjusted to `K'` at cost `Σ_n max(q⁻·Δ_n, q⁺·Δ_n)`
//! with `Δ = K' − K`; all capacity is salvaged after the last period. The
//! MDP state is `(K, d)` and the action is `K'`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnb::{solve_milp, MilpProblem, MilpStatus};
use crate::cuts::{BinaryEncoding, LinearCut};
use crate::error::{Error, Result};
use crate::fvi::{run_nnfvi, DiscreteMdp, FviConfig, GreedyPolicy, Policy};
use crate::mcd::{PiecewiseReward, StageReward};
use crate::mdp::{ActionBox, MdpSpec};
use crate::rng::substream;
use crate::simplex::{solve_lp, LpProblem, LpStatus, RowSense, Sense};

/// How next-period demand is drawn. Customers are independent; each has a
/// sorted list of demand levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DemandModel {
    /// Each period draws level `k` of customer `i` with `probabilities[i][k]`.
    IidLattice { levels: Vec<Vec<f64>>, probabilities: Vec<Vec<f64>> },
    /// The level index of each customer moves by `steps[k]` with
    /// `step_probabilities[k]`, truncated at both ends.
    RandomWalk { levels: Vec<Vec<f64>>, steps: Vec<i64>, step_probabilities: Vec<f64> },
}

fn inverse_cdf(probabilities: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl DemandModel {
    pub fn levels(&self) -> &[Vec<f64>] {
        match self {
            DemandModel::IidLattice { levels, .. } | DemandModel::RandomWalk { levels, .. } => levels,
        }
    }

    pub fn customers(&self) -> usize {
        self.levels().len()
    }

    /// Largest demand level of each customer.
    pub fn max_demand(&self) -> Vec<f64> {
        self.levels().iter().map(|l| l.iter().copied().fold(0.0, f64::max)).collect()
    }

    fn level_index(&self, i: usize, d: f64) -> usize {
        let levels = &self.levels()[i];
        levels
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - d).abs().total_cmp(&(b.1 - d).abs()))
            .map(|(k, _)| k)
            .unwrap_or(0)
    }

    /// Distribution of customer `i`'s next level index given demand `d_i`.
    fn marginal(&self, i: usize, d: f64) -> Vec<(usize, f64)> {
        match self {
            DemandModel::IidLattice { probabilities, .. } => {
                probabilities[i].iter().copied().enumerate().filter(|(_, p)| *p > 0.0).collect()
            }
            DemandModel::RandomWalk { levels, steps, step_probabilities } => {
                let last = levels[i].len() as i64 - 1;
                let from = self.level_index(i, d) as i64;
                let mut out: Vec<(usize, f64)> = Vec::new();
                for (&s, &p) in steps.iter().zip(step_probabilities) {
                    if p <= 0.0 {
                        continue;
                    }
                    let k = (from + s).clamp(0, last) as usize;
                    match out.iter_mut().find(|(j, _)| *j == k) {
                        Some(entry) => entry.1 += p,
                        None => out.push((k, p)),
                    }
                }
                out.sort_by_key(|e| e.0);
                out
            }
        }
    }

    /// Next demand from uniforms `u ∈ [0, 1)^I` by inverse transform.
    pub fn next(&self, d: &[f64], u: &[f64]) -> Vec<f64> {
        (0..self.customers())
            .map(|i| {
                let marginal = self.marginal(i, d[i]);
                let probs: Vec<f64> = marginal.iter().map(|e| e.1).collect();
                self.levels()[i][marginal[inverse_cdf(&probs, u[i])].0]
            })
            .collect()
    }

    /// All `(probability, next demand)` outcomes from `d`.
    pub fn kernel(&self, d: &[f64]) -> Vec<(f64, Vec<f64>)> {
        let mut out = vec![(1.0, Vec::new())];
        for i in 0..self.customers() {
            let marginal = self.marginal(i, d[i]);
            out = out
                .into_iter()
                .flat_map(|(p, prefix)| {
                    marginal.iter().map(move |&(k, q)| {
                        let mut next: Vec<f64> = prefix.clone();
                        next.push(self.levels()[i][k]);
                        (p * q, next)
                    })
                })
                .collect();
        }
        out
    }

    /// Every demand vector on the lattice, lexicographic in level index.
    pub fn lattice(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new()];
        for levels in self.levels() {
            out = out
                .into_iter()
                .flat_map(|prefix: Vec<f64>| {
                    levels.iter().map(move |&v| {
                        let mut next = prefix.clone();
                        next.push(v);
                        next
                    })
                })
                .collect();
        }
        out
    }

    pub fn lattice_size(&self) -> u128 {
        self.levels().iter().map(|l| l.len() as u128).product()
    }

    pub fn on_lattice(&self, d: &[f64]) -> bool {
        d.len() == self.customers() && d.iter().zip(self.levels()).all(|(v, l)| l.contains(v))
    }

    fn validate(&self) -> Result<()> {
        let levels = self.levels();
        for (i, l) in levels.iter().enumerate() {
            if l.is_empty() || l.iter().any(|v| !v.is_finite() || *v < 0.0) || l.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidInput(format!(
                    "demand levels of customer {i} must be non-negative, finite and strictly increasing"
                )));
            }
        }
        let check_row = |row: &[f64], what: &str| -> Result<()> {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("{what} must be non-negative and sum to 1 (sum {sum})")));
            }
            Ok(())
        };
        match self {
            DemandModel::IidLattice { probabilities, .. } => {
                if probabilities.len() != levels.len() {
                    return Err(Error::DimensionMismatch { expected: levels.len(), got: probabilities.len() });
                }
                for (p, l) in probabilities.iter().zip(levels) {
                    if p.len() != l.len() {
                        return Err(Error::DimensionMismatch { expected: l.len(), got: p.len() });
                    }
                    check_row(p, "demand probabilities")?;
                }
            }
            DemandModel::RandomWalk { steps, step_probabilities, .. } => {
                if steps.len() != step_probabilities.len() {
                    return Err(Error::DimensionMismatch { expected: steps.len(), got: step_probabilities.len() });
                }
                check_row(step_probabilities, "step probabilities")?;
            }
        }
        Ok(())
    }
}

/// Instance data; indices are `[t][i][n]`, `[t][i]` and `[t][n]` with `t`
/// running over periods `1..=T` stored from 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McipInstance {
    pub customers: usize,
    pub facilities: usize,
    pub horizon: usize,
    pub discount: f64,
    /// Unit revenue `r̂[t][i][n]` of serving customer `i` from facility `n`.
    pub revenue: Vec<Vec<Vec<f64>>>,
    /// Unit penalty `b[t][i]` for unmet demand.
    pub penalty: Vec<Vec<f64>>,
    /// Unit expansion cost `q⁺[t][n]`.
    pub expansion_cost: Vec<Vec<f64>>,
    /// Unit salvage value `q⁻[t][n]`.
    pub salvage_value: Vec<Vec<f64>>,
    pub initial_capacity: Vec<i64>,
    pub capacity_limit: Vec<i64>,
    pub demand: DemandModel,
    pub initial_demand: Vec<f64>,
}

impl McipInstance {
    pub fn validate(&self) -> Result<()> {
        let (i, n, t) = (self.customers, self.facilities, self.horizon);
        if i == 0 || n == 0 || t == 0 {
            return Err(Error::InvalidInput("customers, facilities and horizon must be positive".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::InvalidInput(format!("discount {} outside (0, 1]", self.discount)));
        }
        let shape_ok = self.revenue.len() == t
            && self.revenue.iter().all(|r| r.len() == i && r.iter().all(|row| row.len() == n))
            && self.penalty.len() == t
            && self.penalty.iter().all(|r| r.len() == i)
            && self.expansion_cost.len() == t
            && self.expansion_cost.iter().all(|r| r.len() == n)
            && self.salvage_value.len() == t
            && self.salvage_value.iter().all(|r| r.len() == n)
            && self.initial_capacity.len() == n
            && self.capacity_limit.len() == n
            && self.initial_demand.len() == i
            && self.demand.customers() == i;
        if !shape_ok {
            return Err(Error::InvalidInput(format!("array shapes do not match I = {i}, N = {n}, T = {t}")));
        }
        let all = self
            .revenue
            .iter()
            .flatten()
            .flatten()
            .chain(self.penalty.iter().flatten())
            .chain(self.expansion_cost.iter().flatten())
            .chain(self.salvage_value.iter().flatten());
        if all.clone().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("revenues, penalties and costs must be finite and non-negative".into()));
        }
        for (tt, (plus, minus)) in self.expansion_cost.iter().zip(&self.salvage_value).enumerate() {
            if let Some(k) = (0..n).find(|&k| plus[k] < minus[k]) {
                return Err(Error::InvalidInput(format!(
                    "period {}: salvage value {} exceeds expansion cost {} at facility {k}",
                    tt + 1,
                    minus[k],
                    plus[k]
                )));
            }
        }
        ActionBox::new(self.capacity_limit.clone())?.check(&self.initial_capacity)?;
        self.demand.validate()?;
        if !self.demand.on_lattice(&self.initial_demand) {
            return Err(Error::InvalidInput("initial demand must be a lattice point of the demand model".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let inst: Self = serde_json::from_str(text)?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn capacity_box(&self) -> ActionBox {
        ActionBox::new(self.capacity_limit.clone()).expect("validated")
    }

    /// Copy with `q⁻ = ratio·q⁺` in every period.
    pub fn with_salvage_ratio(&self, ratio: f64) -> Self {
        let mut out = self.clone();
        out.salvage_value =
            self.expansion_cost.iter().map(|row| row.iter().map(|q| ratio * q).collect()).collect();
        out
    }

    pub fn with_discount(&self, discount: f64) -> Self {
        Self { discount, ..self.clone() }
    }

    /// `Σ_n max_t q⁺·K^max + Σ_i max_{t,n} (r̂ + b)·D^max`, a bound on `|r_t|`.
    pub fn reward_bound(&self) -> f64 {
        let dmax = self.demand.max_demand();
        let capacity: f64 = (0..self.facilities)
            .map(|n| {
                let q = self.expansion_cost.iter().map(|r| r[n]).fold(0.0, f64::max);
                q * self.capacity_limit[n] as f64
            })
            .sum();
        let operating: f64 = (0..self.customers)
            .map(|i| {
                let worst = (0..self.horizon)
                    .flat_map(|t| (0..self.facilities).map(move |n| (t, n)))
                    .map(|(t, n)| self.revenue[t][i][n] + self.penalty[t][i])
                    .fold(0.0, f64::max);
                worst * dmax[i]
            })
            .sum();
        capacity + operating
    }

    /// A small seeded instance: `I` customers with three demand levels each,
    /// `N` facilities, horizon `T`.
    pub fn synthetic(seed: u64, cfg: &SyntheticConfig) -> Result<Self> {
        let mut rng = substream(seed, &[0x3c1f]);
        let (i, n, t) = (cfg.customers, cfg.facilities, cfg.horizon);
        let revenue = (0..t)
            .map(|_| (0..i).map(|_| (0..n).map(|_| rng.random_range(1.0..3.0)).collect()).collect())
            .collect();
        let penalty = (0..t).map(|_| (0..i).map(|_| rng.random_range(0.2..1.0)).collect()).collect();
        let expansion: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let expansion_cost: Vec<Vec<f64>> = vec![expansion; t];
        let levels: Vec<Vec<f64>> = (0..i)
            .map(|_| {
                let base = rng.random_range(0..=2) as f64;
                let step = rng.random_range(1..=2) as f64;
                (0..cfg.demand_levels).map(|k| base + k as f64 * step).collect()
            })
            .collect();
        let demand = if cfg.markov {
            DemandModel::RandomWalk { levels: levels.clone(), steps: vec![-1, 0, 1], step_probabilities: vec![0.25, 0.4, 0.35] }
        } else {
            let probabilities = (0..i).map(|_| vec![1.0 / cfg.demand_levels as f64; cfg.demand_levels]).collect();
            DemandModel::IidLattice { levels: levels.clone(), probabilities }
        };
        let inst = Self {
            customers: i,
            facilities: n,
            horizon: t,
            discount: cfg.discount,
            revenue,
            penalty,
            salvage_value: expansion_cost.iter().map(|r| r.iter().map(|q| q * cfg.salvage_ratio).collect()).collect(),
            expansion_cost,
            initial_capacity: vec![0; n],
            capacity_limit: vec![cfg.capacity_limit; n],
            initial_demand: levels.iter().map(|l| l[l.len() / 2]).collect(),
            demand,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// The instance used for the NN-FVI versus exact DP comparison:
    /// `I = N = 2`, `T = 3`, `K^max = (3, 3)`, three demand levels.
    pub fn tiny() -> Self {
        let inst = Self {
            customers: 2,
            facilities: 2,
            horizon: 3,
            discount: 0.9,
            revenue: vec![vec![vec![3.0, 2.5], vec![2.0, 3.5]]; 3],
            penalty: vec![vec![0.5, 0.5]; 3],
            expansion_cost: vec![vec![1.5, 1.8]; 3],
            salvage_value: vec![vec![0.9, 1.0]; 3],
            initial_capacity: vec![1, 1],
            capacity_limit: vec![3, 3],
            demand: DemandModel::RandomWalk {
                levels: vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]],
                steps: vec![-1, 0, 1],
                step_probabilities: vec![0.25, 0.35, 0.4],
            },
            initial_demand: vec![2.0, 2.0],
        };
        inst.validate().expect("tiny instance is valid");
        inst
    }

    /// The sensitivity-analysis instance: two customers whose demand starts
    /// low and either drifts up by two levels or down by one each period,
    /// so deferring expansion has value.
    pub fn case_study() -> Self {
        let horizon = 5;
        let levels: Vec<f64> = (0..9).map(f64::from).collect();
        let inst = Self {
            customers: 2,
            facilities: 2,
            horizon,
            discount: 0.9,
            revenue: vec![vec![vec![4.0, 3.0], vec![3.0, 4.4]]; horizon],
            penalty: vec![vec![1.0, 1.0]; horizon],
            expansion_cost: vec![vec![5.0, 5.5]; horizon],
            salvage_value: vec![vec![0.0, 0.0]; horizon],
            initial_capacity: vec![0, 0],
            capacity_limit: vec![8, 8],
            demand: DemandModel::RandomWalk {
                levels: vec![levels.clone(), levels],
                steps: vec![-1, 0, 2],
                step_probabilities: vec![0.3, 0.3, 0.4],
            },
            initial_demand: vec![1.0, 1.0],
        };
        inst.validate().expect("case-study instance is valid");
        inst
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub customers: usize,
    pub facilities: usize,
    pub horizon: usize,
    pub capacity_limit: i64,
    pub demand_levels: usize,
    pub markov: bool,
    pub discount: f64,
    pub salvage_ratio: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            customers: 2,
            facilities: 2,
            horizon: 3,
            capacity_limit: 3,
            demand_levels: 3,
            markov: true,
            discount: 0.9,
            salvage_ratio: 0.5,
        }
    }
}

/// Optimal operating profit and allocation `z[i][n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatingProfit {
    pub value: f64,
    pub allocation: Vec<Vec<f64>>,
}

/// Solves the allocation LP of `period` (1-based). `capacity` may be
/// fractional.
pub fn operating_profit(inst: &McipInstance, period: usize, capacity: &[f64], demand: &[f64]) -> Result<OperatingProfit> {
    let (ni, nn) = (inst.customers, inst.facilities);
    if capacity.len() != nn || demand.len() != ni {
        return Err(Error::DimensionMismatch { expected: nn + ni, got: capacity.len() + demand.len() });
    }
    if !(1..=inst.horizon).contains(&period) {
        return Err(Error::InvalidInput(format!("period {period} outside 1..={}", inst.horizon)));
    }
    let t = period - 1;
    let col = |i: usize, n: usize| i * nn + n;
    let mut objective = vec![0.0; ni * nn];
    for i in 0..ni {
        for n in 0..nn {
            objective[col(i, n)] = inst.revenue[t][i][n] + inst.penalty[t][i];
        }
    }
    let mut lp = LpProblem::new(Sense::Maximize, objective);
    for n in 0..nn {
        let mut row = vec![0.0; ni * nn];
        for i in 0..ni {
            row[col(i, n)] = 1.0;
        }
        lp.add_row(row, RowSense::Le, capacity[n]);
    }
    for i in 0..ni {
        let mut row = vec![0.0; ni * nn];
        for n in 0..nn {
            row[col(i, n)] = 1.0;
        }
        lp.add_row(row, RowSense::Le, demand[i]);
    }
    let s = solve_lp(&lp)?;
    if s.status != LpStatus::Optimal {
        return Err(Error::Lp(format!("allocation LP reported {:?}", s.status)));
    }
    let unmet: f64 = (0..ni).map(|i| inst.penalty[t][i] * demand[i]).sum();
    Ok(OperatingProfit {
        value: s.objective - unmet,
        allocation: (0..ni).map(|i| s.x[i * nn..(i + 1) * nn].to_vec()).collect(),
    })
}

/// `Σ_n max(q⁻·Δ_n, q⁺·Δ_n)` for moving from `from` to `to`.
pub fn adjustment_cost(inst: &McipInstance, period: usize, from: &[f64], to: &[f64]) -> f64 {
    let t = period - 1;
    (0..inst.facilities)
        .map(|n| {
            let delta = to[n] - from[n];
            (inst.salvage_value[t][n] * delta).max(inst.expansion_cost[t][n] * delta)
        })
        .sum()
}

/// `r_t((K, d), K')`; in the last period `K'` is replaced by zero.
pub fn mcip_reward(inst: &McipInstance, period: usize, capacity: &[f64], demand: &[f64], action: &[i64]) -> Result<f64> {
    let q = operating_profit(inst, period, capacity, demand)?.value;
    let next: Vec<f64> = if period == inst.horizon { vec![0.0; inst.facilities] } else { action.iter().map(|&v| v as f64).collect() };
    Ok(q - adjustment_cost(inst, period, capacity, &next))
}

/// The stage reward at `(K, d)` with the operating profit solved once.
pub fn stage_reward(inst: &McipInstance, period: usize, capacity: &[f64], demand: &[f64]) -> Result<StageReward> {
    let q = operating_profit(inst, period, capacity, demand)?.value;
    Ok(stage_reward_from_profit(inst, period, capacity, q))
}

fn stage_reward_from_profit(inst: &McipInstance, period: usize, capacity: &[f64], profit: f64) -> StageReward {
    let t = period - 1;
    let nn = inst.facilities;
    let convex_terms = (0..nn)
        .map(|n| {
            [inst.salvage_value[t][n], inst.expansion_cost[t][n]]
                .into_iter()
                .map(|q| {
                    let mut coefs = vec![0.0; nn];
                    coefs[n] = q;
                    LinearCut { coefs, constant: -q * capacity[n] }
                })
                .collect()
        })
        .collect();
    StageReward::PiecewiseLinear(PiecewiseReward { constant: profit, linear: vec![0.0; nn], convex_terms })
}

/// The MDP with state `(K, d)`, action `K'`, `A(x, ξ) = (0, next demand)`
/// and `B = [I_N; 0]`. States for training are sampled on the lattice:
/// integer capacities and demand levels, uniformly.
pub fn build_mcip_mdp(inst: &McipInstance) -> Result<MdpSpec> {
    inst.validate()?;
    let inst = Arc::new(inst.clone());
    let (ni, nn) = (inst.customers, inst.facilities);
    let dmax = inst.demand.max_demand();
    let mut bounds: Vec<(f64, f64)> = inst.capacity_limit.iter().map(|&k| (0.0, k as f64)).collect();
    bounds.extend(dmax.iter().map(|&d| (0.0, d)));
    let mut x1: Vec<f64> = inst.initial_capacity.iter().map(|&k| k as f64).collect();
    x1.extend(&inst.initial_demand);

    let offset = {
        let inst = Arc::clone(&inst);
        move |x: &[f64], xi: &[f64]| {
            let mut out = vec![0.0; nn];
            out.extend(inst.demand.next(&x[nn..], xi));
            out
        }
    };
    let linear = move |_: &[f64], _: &[f64]| DMatrix::from_fn(nn + ni, nn, |r, c| if r == c { 1.0 } else { 0.0 });
    let reward = {
        let inst = Arc::clone(&inst);
        move |period: usize, x: &[f64]| {
            let (k, d) = x.split_at(nn);
            let q = operating_profit(&inst, period, k, d)
                .expect("allocation LP is feasible at z = 0 and bounded by demand")
                .value;
            stage_reward_from_profit(&inst, period, k, q)
        }
    };
    let sampler = {
        let inst = Arc::clone(&inst);
        move |rng: &mut crate::rng::SimRng| {
            let mut x: Vec<f64> = inst.capacity_limit.iter().map(|&k| rng.random_range(0..=k) as f64).collect();
            x.extend(inst.demand.levels().iter().map(|l| l[rng.random_range(0..l.len())]));
            x
        }
    };
    Ok(MdpSpec::new(inst.horizon, inst.discount, bounds, inst.capacity_box(), x1)?
        .with_terminal_action_box(ActionBox::singleton(nn))
        .with_noise(move |rng| (0..ni).map(|_| rng.random::<f64>()).collect())
        .with_transition(offset, linear)
        .with_reward(inst.reward_bound(), reward)
        .with_state_sampler(sampler))
}

/// The instance as a finite MDP over integer capacities and demand levels,
/// with operating profits precomputed.
pub struct McipLattice {
    inst: McipInstance,
    profits: HashMap<(usize, Vec<u64>), f64>,
}

fn key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

impl McipLattice {
    pub fn new(inst: &McipInstance) -> Result<Self> {
        inst.validate()?;
        let count = inst.capacity_box().count().saturating_mul(inst.demand.lattice_size());
        if count > crate::fvi::MAX_LATTICE_STATES {
            let states = usize::try_from(count).unwrap_or(usize::MAX);
            let actions = usize::try_from(inst.capacity_box().count()).unwrap_or(usize::MAX);
            let estimate = (count as f64).powi(2) * actions as f64 * inst.horizon as f64;
            return Err(Error::LatticeTooLarge { states, actions, periods: inst.horizon, estimate });
        }
        let states = lattice_states(inst);
        let mut jobs = Vec::new();
        for t in 1..=inst.horizon {
            for x in &states {
                jobs.push((t, x.clone()));
            }
        }
        let nn = inst.facilities;
        let profits = jobs
            .par_iter()
            .map(|(t, x)| operating_profit(inst, *t, &x[..nn], &x[nn..]).map(|p| ((*t, key(x)), p.value)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { inst: inst.clone(), profits })
    }

    pub fn instance(&self) -> &McipInstance {
        &self.inst
    }

    pub fn profit(&self, period: usize, x: &[f64]) -> f64 {
        self.profits[&(period, key(x))]
    }
}

fn lattice_states(inst: &McipInstance) -> Vec<Vec<f64>> {
    let demands = inst.demand.lattice();
    inst.capacity_box()
        .iter()
        .flat_map(|k| {
            demands.iter().map(move |d| {
                let mut x: Vec<f64> = k.iter().map(|&v| v as f64).collect();
                x.extend(d);
                x
            })
        })
        .collect()
}

impl DiscreteMdp for McipLattice {
    fn horizon(&self) -> usize {
        self.inst.horizon
    }

    fn discount(&self) -> f64 {
        self.inst.discount
    }

    fn state_count(&self, _: usize) -> u128 {
        self.inst.capacity_box().count() * self.inst.demand.lattice_size()
    }

    fn states(&self, _: usize) -> Vec<Vec<f64>> {
        lattice_states(&self.inst)
    }

    fn actions(&self, period: usize, _: &[f64]) -> Vec<Vec<i64>> {
        if period == self.inst.horizon {
            vec![vec![0; self.inst.facilities]]
        } else {
            self.inst.capacity_box().iter().collect()
        }
    }

    fn reward(&self, period: usize, x: &[f64], a: &[i64]) -> f64 {
        let nn = self.inst.facilities;
        let to: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        self.profit(period, x) - adjustment_cost(&self.inst, period, &x[..nn], &to)
    }

    fn transitions(&self, _: usize, x: &[f64], a: &[i64]) -> Vec<(f64, Vec<f64>)> {
        let nn = self.inst.facilities;
        self.inst
            .demand
            .kernel(&x[nn..])
            .into_iter()
            .map(|(p, d)| {
                let mut y: Vec<f64> = a.iter().map(|&v| v as f64).collect();
                y.extend(d);
                (p, y)
            })
            .collect()
    }
}

/// The value recursion over real-valued capacity `K ∈ [0, K^max]`,
/// evaluated top-down with memoisation on integer capacities.
pub struct ExtendedValues<'a> {
    inst: &'a McipInstance,
    memo: Mutex<HashMap<(usize, Vec<u64>), f64>>,
}

impl<'a> ExtendedValues<'a> {
    pub fn new(inst: &'a McipInstance) -> Self {
        Self { inst, memo: Mutex::new(HashMap::new()) }
    }

    /// `V̄_t(K, d)`.
    pub fn value(&self, period: usize, capacity: &[f64], demand: &[f64]) -> Result<f64> {
        let inst = self.inst;
        let mut x = capacity.to_vec();
        x.extend(demand);
        let integral = capacity.iter().all(|v| v.fract() == 0.0);
        if integral {
            if let Some(v) = self.memo.lock().expect("memo lock").get(&(period, key(&x))) {
                return Ok(*v);
            }
        }
        let q = operating_profit(inst, period, capacity, demand)?.value;
        let value = if period == inst.horizon {
            q - adjustment_cost(inst, period, capacity, &vec![0.0; inst.facilities])
        } else {
            let kernel = inst.demand.kernel(demand);
            let mut best = f64::NEG_INFINITY;
            for next in inst.capacity_box().iter() {
                let next: Vec<f64> = next.iter().map(|&v| v as f64).collect();
                let mut expected = 0.0;
                for (p, d) in &kernel {
                    expected += p * self.value(period + 1, &next, d)?;
                }
                best = best.max(q - adjustment_cost(inst, period, capacity, &next) + inst.discount * expected);
            }
            best
        };
        if integral {
            self.memo.lock().expect("memo lock").insert((period, key(&x)), value);
        }
        Ok(value)
    }
}

/// Demand sequences `d_1..d_T`, `d_1` being the known initial demand.
pub type DemandPath = Vec<Vec<f64>>;

/// `count` demand paths; path `p` uses its own stream of `(seed, p)`.
pub fn sample_demand_paths(inst: &McipInstance, count: usize, seed: u64) -> Vec<DemandPath> {
    (0..count)
        .map(|p| {
            let mut rng = substream(seed, &[0xd3, p as u64]);
            let mut path = vec![inst.initial_demand.clone()];
            for _ in 1..inst.horizon {
                let u: Vec<f64> = (0..inst.customers).map(|_| rng.random::<f64>()).collect();
                let next = inst.demand.next(path.last().expect("non-empty"), &u);
                path.push(next);
            }
            path
        })
        .collect()
}

/// Mean and standard error of per-path discounted returns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnpvStats {
    pub mean: f64,
    pub std_error: f64,
    pub values: Vec<f64>,
}

impl EnpvStats {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std_error: (var / n).sqrt(), values }
    }

    /// Statistics of `self − other`, path by path.
    pub fn paired_difference(&self, other: &EnpvStats) -> EnpvStats {
        Self::from_values(self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect())
    }
}

/// Rolls `policy` along each path and returns `Σ_t γ^{t−1} r_t` statistics.
/// The last-period action is forced to zero.
pub fn simulate_policy(inst: &McipInstance, policy: &dyn Policy, paths: &[DemandPath]) -> Result<EnpvStats> {
    if paths.is_empty() {
        return Err(Error::InvalidInput("simulation needs at least one path".into()));
    }
    let nn = inst.facilities;
    let values = paths
        .par_iter()
        .map(|path| {
            let mut capacity: Vec<f64> = inst.initial_capacity.iter().map(|&k| k as f64).collect();
            let mut total = 0.0;
            for t in 1..=inst.horizon {
                let d = &path[t - 1];
                let action = if t == inst.horizon {
                    vec![0; nn]
                } else {
                    let mut x = capacity.clone();
                    x.extend(d);
                    let a = policy.act(t, &x)?;
                    inst.capacity_box().check(&a)?;
                    a
                };
                total += inst.discount.powi(t as i32 - 1) * mcip_reward(inst, t, &capacity, d, &action)?;
                capacity = action.iter().map(|&v| v as f64).collect();
            }
            Ok(total)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EnpvStats::from_values(values))
}

/// Keeps one capacity vector from the end of period 1 until the final
/// salvage.
pub struct FixedCapacityPolicy {
    pub capacity: Vec<i64>,
}

impl Policy for FixedCapacityPolicy {
    fn act(&self, _: usize, _: &[f64]) -> Result<Vec<i64>> {
        Ok(self.capacity.clone())
    }
}

/// Caches the decisions of another policy per `(period, state)`.
pub struct CachedPolicy<P> {
    inner: P,
    cache: Mutex<HashMap<(usize, Vec<u64>), Vec<i64>>>,
}

impl<P: Policy> CachedPolicy<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, cache: Mutex::new(HashMap::new()) }
    }
}

impl<P: Policy> Policy for CachedPolicy<P> {
    fn act(&self, period: usize, x: &[f64]) -> Result<Vec<i64>> {
        let k = (period, key(x));
        if let Some(a) = self.cache.lock().expect("cache lock").get(&k) {
            return Ok(a.clone());
        }
        let a = self.inner.act(period, x)?;
        self.cache.lock().expect("cache lock").insert(k, a.clone());
        Ok(a)
    }
}

/// Largest deterministic-equivalent MILP [`inflexible_two_stage`] builds.
pub const MAX_INFLEXIBLE_COLUMNS: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InflexiblePlan {
    pub capacity: Vec<i64>,
    /// Scenario-average NPV of the plan.
    pub in_sample_value: f64,
}

/// Best single capacity vector, installed at the end of period 1 and held
/// until the final salvage, against the average of `scenarios`. Solved as
/// one MILP with binary-encoded capacity and per-scenario allocations.
pub fn inflexible_two_stage(inst: &McipInstance, scenarios: &[DemandPath]) -> Result<InflexiblePlan> {
    inst.validate()?;
    if scenarios.is_empty() {
        return Err(Error::InvalidInput("inflexible plan needs at least one scenario".into()));
    }
    let (ni, nn, horizon) = (inst.customers, inst.facilities, inst.horizon);
    let k0: Vec<f64> = inst.initial_capacity.iter().map(|&k| k as f64).collect();
    let first = operating_profit(inst, 1, &k0, &inst.initial_demand)?.value;
    if horizon == 1 {
        let value = first - adjustment_cost(inst, 1, &k0, &vec![0.0; nn]);
        return Ok(InflexiblePlan { capacity: vec![0; nn], in_sample_value: value });
    }

    let enc = BinaryEncoding::new(&inst.capacity_box());
    let nb = enc.len();
    let tau = nb;
    let z0 = nb + nn;
    let periods = horizon - 1;
    let zcount = scenarios.len() * periods * ni * nn;
    let ncols = z0 + zcount;
    if ncols > MAX_INFLEXIBLE_COLUMNS {
        return Err(Error::SizeCap(format!(
            "inflexible MILP would have {ncols} columns (limit {MAX_INFLEXIBLE_COLUMNS}); use fewer scenarios"
        )));
    }
    let zcol = |s: usize, p: usize, i: usize, n: usize| z0 + ((s * periods + p) * ni + i) * nn + n;
    let weight = 1.0 / scenarios.len() as f64;
    let bit_weights = enc.weights();

    let mut objective = vec![0.0; ncols];
    let salvage_discount = inst.discount.powi(horizon as i32 - 1);
    for (k, &(n, scale)) in bit_weights.iter().enumerate() {
        objective[k] = salvage_discount * inst.salvage_value[horizon - 1][n] * scale;
    }
    for n in 0..nn {
        objective[tau + n] = -1.0;
    }
    let mut constant = first;
    for (s, path) in scenarios.iter().enumerate() {
        if path.len() != horizon {
            return Err(Error::DimensionMismatch { expected: horizon, got: path.len() });
        }
        for p in 0..periods {
            let t = p + 1;
            let discount = inst.discount.powi(t as i32);
            for i in 0..ni {
                constant -= weight * discount * inst.penalty[t][i] * path[t][i];
                for n in 0..nn {
                    objective[zcol(s, p, i, n)] = weight * discount * (inst.revenue[t][i][n] + inst.penalty[t][i]);
                }
            }
        }
    }
    let mut lp = LpProblem::new(Sense::Maximize, objective);
    for k in 0..nb {
        lp.set_bounds(k, 0.0, 1.0);
    }
    for n in 0..nn {
        lp.set_bounds(tau + n, f64::NEG_INFINITY, f64::INFINITY);
    }
    let capacity_row = |n: usize, scale: f64, row: &mut Vec<f64>| {
        for (k, &(m, w)) in bit_weights.iter().enumerate() {
            if m == n {
                row[k] = scale * w;
            }
        }
    };
    for n in 0..nn {
        if enc.needs_bound_row(n) {
            let mut row = vec![0.0; ncols];
            capacity_row(n, 1.0, &mut row);
            lp.add_row(row, RowSense::Le, inst.capacity_limit[n] as f64);
        }
        for q in [inst.salvage_value[0][n], inst.expansion_cost[0][n]] {
            let mut row = vec![0.0; ncols];
            capacity_row(n, q, &mut row);
            row[tau + n] = -1.0;
            lp.add_row(row, RowSense::Le, q * k0[n]);
        }
    }
    for (s, path) in scenarios.iter().enumerate() {
        for p in 0..periods {
            for n in 0..nn {
                let mut row = vec![0.0; ncols];
                capacity_row(n, -1.0, &mut row);
                for i in 0..ni {
                    row[zcol(s, p, i, n)] = 1.0;
                }
                lp.add_row(row, RowSense::Le, 0.0);
            }
            for i in 0..ni {
                let mut row = vec![0.0; ncols];
                for n in 0..nn {
                    row[zcol(s, p, i, n)] = 1.0;
                }
                lp.add_row(row, RowSense::Le, path[p + 1][i]);
            }
        }
    }
    let solution = solve_milp(&MilpProblem { lp, binaries: (0..nb).collect() })?;
    if solution.status != MilpStatus::Optimal {
        return Err(Error::Milp(format!("inflexible MILP ended with {:?}", solution.status)));
    }
    Ok(InflexiblePlan { capacity: enc.decode(&solution.x[..nb]), in_sample_value: solution.objective + constant })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub discounts: Vec<f64>,
    pub salvage_ratios: Vec<f64>,
    pub fvi: FviConfig,
    /// Out-of-sample paths shared by both designs in every cell.
    pub paths: usize,
    /// In-sample scenarios of the inflexible MILP.
    pub scenarios: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            discounts: vec![0.862, 0.923, 0.99],
            salvage_ratios: vec![0.0, 0.25, 0.5, 0.75, 0.99],
            fvi: FviConfig::default(),
            paths: 1000,
            scenarios: 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub discount: f64,
    pub salvage_ratio: f64,
    pub inflexible_capacity: Vec<i64>,
    pub inflexible_enpv: f64,
    pub inflexible_se: f64,
    pub flexible_enpv: f64,
    pub flexible_se: f64,
    pub vof: f64,
    pub vof_se: f64,
    /// `100·VoF / |inflexible ENPV|`.
    pub improvement_pct: f64,
}

/// One sweep cell: flexible (NN-FVI greedy) against inflexible, on the same
/// demand paths.
pub fn sweep_cell(inst: &McipInstance, discount: f64, ratio: f64, cfg: &SweepConfig) -> Result<SweepRow> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidInput(format!("salvage ratio {ratio} outside [0, 1]")));
    }
    let cell = inst.with_discount(discount).with_salvage_ratio(ratio);
    let paths = sample_demand_paths(&cell, cfg.paths, cfg.seed);
    let scenarios = sample_demand_paths(&cell, cfg.scenarios, cfg.seed ^ 0x5ce7_a210);

    let spec = build_mcip_mdp(&cell)?;
    let values = run_nnfvi(&spec, &FviConfig { seed: cfg.seed, ..cfg.fvi.clone() })?;
    let flexible = simulate_policy(&cell, &CachedPolicy::new(GreedyPolicy::new(&spec, &values)), &paths)?;

    let plan = inflexible_two_stage(&cell, &scenarios)?;
    let inflexible = simulate_policy(&cell, &FixedCapacityPolicy { capacity: plan.capacity.clone() }, &paths)?;
    let vof = flexible.paired_difference(&inflexible);
    Ok(SweepRow {
        discount,
        salvage_ratio: ratio,
        inflexible_capacity: plan.capacity,
        inflexible_enpv: inflexible.mean,
        inflexible_se: inflexible.std_error,
        flexible_enpv: flexible.mean,
        flexible_se: flexible.std_error,
        vof: vof.mean,
        vof_se: vof.std_error,
        improvement_pct: 100.0 * vof.mean / inflexible.mean.abs().max(1e-12),
    })
}

/// Every `(discount, ratio)` cell, discounts outermost.
pub fn sensitivity_sweep(inst: &McipInstance, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &g in &cfg.discounts {
        for &r in &cfg.salvage_ratios {
            log::info!("sweep cell discount {g}, salvage ratio {r}");
            rows.push(sweep_cell(inst, g, r, cfg)?);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fvi::exact_dp;

    fn random_instance(seed: u64) -> McipInstance {
        McipInstance::synthetic(seed, &SyntheticConfig { customers: 3, facilities: 2, ..Default::default() }).unwrap()
    }

    #[test]
    fn zero_capacity_means_full_penalty() {
        let inst = random_instance(1);
        let d = [2.0, 1.0, 3.0];
        let p = operating_profit(&inst, 1, &[0.0, 0.0], &d).unwrap();
        let expected: f64 = (0..3).map(|i| -inst.penalty[0][i] * d[i]).sum();
        assert!((p.value - expected).abs() < 1e-12);
        assert!(p.allocation.iter().flatten().all(|z| z.abs() < 1e-12));
    }

    #[test]
    fn ample_capacity_serves_everyone_at_best_facility() {
        let inst = random_instance(2);
        let d = [2.0, 1.0, 3.0];
        let p = operating_profit(&inst, 2, &[6.0, 6.0], &d).unwrap();
        let expected: f64 = (0..3).map(|i| inst.revenue[1][i].iter().copied().fold(0.0, f64::max) * d[i]).sum();
        assert!((p.value - expected).abs() < 1e-9);
    }

    #[test]
    fn allocation_matches_vertex_enumeration() {
        let inst = random_instance(3);
        let mut rng = substream(3, &[]);
        for _ in 0..10 {
            let k = [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
            let d = [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
            let lp = operating_profit(&inst, 1, &k, &d).unwrap();
            // the LP is a transportation polytope; enumerate allocations on a fine grid of vertices
            let oracle = brute_allocation(&inst, &k, &d);
            assert!((lp.value - oracle).abs() < 1e-8, "{} vs {oracle}", lp.value);
        }
    }

    /// Greedy-free oracle: every basis of the 5-row, 6-column allocation LP.
    fn brute_allocation(inst: &McipInstance, k: &[f64], d: &[f64]) -> f64 {
        let (ni, nn) = (3, 2);
        let nvars = ni * nn;
        let mut planes: Vec<(Vec<f64>, f64, bool)> = Vec::new();
        for n in 0..nn {
            let mut r = vec![0.0; nvars];
            for i in 0..ni {
                r[i * nn + n] = 1.0;
            }
            planes.push((r, k[n], true));
        }
        for i in 0..ni {
            let mut r = vec![0.0; nvars];
            for n in 0..nn {
                r[i * nn + n] = 1.0;
            }
            planes.push((r, d[i], true));
        }
        for j in 0..nvars {
            let mut r = vec![0.0; nvars];
            r[j] = 1.0;
            planes.push((r, 0.0, false));
        }
        let mut best = f64::NEG_INFINITY;
        let m = planes.len();
        for mask in 0u32..(1 << m) {
            if mask.count_ones() as usize != nvars {
                continue;
            }
            let chosen: Vec<&(Vec<f64>, f64, bool)> = (0..m).filter(|b| mask >> b & 1 == 1).map(|b| &planes[b]).collect();
            let Some(z) = solve_square(&chosen) else { continue };
            let feasible = z.iter().all(|v| *v >= -1e-9)
                && planes.iter().filter(|p| p.2).all(|p| p.0.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() <= p.1 + 1e-9);
            if feasible {
                let v: f64 = (0..ni)
                    .flat_map(|i| (0..nn).map(move |n| (i, n)))
                    .map(|(i, n)| (inst.revenue[0][i][n] + inst.penalty[0][i]) * z[i * nn + n])
                    .sum::<f64>()
                    - (0..ni).map(|i| inst.penalty[0][i] * d[i]).sum::<f64>();
                best = best.max(v);
            }
        }
        best
    }

    fn solve_square(rows: &[&(Vec<f64>, f64, bool)]) -> Option<Vec<f64>> {
        let n = rows.len();
        let mut a: Vec<Vec<f64>> = rows.iter().map(|(r, b, _)| r.iter().copied().chain([*b]).collect()).collect();
        for c in 0..n {
            let p = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))?;
            if a[p][c].abs() < 1e-10 {
                return None;
            }
            a.swap(p, c);
            for r in 0..n {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for j in c..=n {
                        a[r][j] -= f * a[c][j];
                    }
                }
            }
        }
        Some((0..n).map(|i| a[i][n] / a[i][i]).collect())
    }

    #[test]
    fn reward_adjustment_branches() {
        let inst = random_instance(4);
        let (k, d) = ([1.0, 2.0], [1.0, 2.0, 1.0]);
        let q = operating_profit(&inst, 1, &k, &d).unwrap().value;
        assert_eq!(mcip_reward(&inst, 1, &k, &d, &[1, 2]).unwrap(), q);
        let up = mcip_reward(&inst, 1, &k, &d, &[3, 3]).unwrap();
        assert!((up - (q - 2.0 * inst.expansion_cost[0][0] - inst.expansion_cost[0][1])).abs() < 1e-12);
        let down = mcip_reward(&inst, 1, &k, &d, &[0, 0]).unwrap();
        assert!((down - (q + inst.salvage_value[0][0] + 2.0 * inst.salvage_value[0][1])).abs() < 1e-12);
        // last period salvages everything whatever the action
        let last = mcip_reward(&inst, 3, &k, &d, &[3, 3]).unwrap();
        let q3 = operating_profit(&inst, 3, &k, &d).unwrap().value;
        assert!((last - (q3 + inst.salvage_value[2][0] + 2.0 * inst.salvage_value[2][1])).abs() < 1e-12);
    }

    #[test]
    fn pieces_match_direct_reward() {
        let inst = random_instance(5);
        let spec = build_mcip_mdp(&inst).unwrap();
        let mut rng = substream(5, &[]);
        for _ in 0..20 {
            let x = spec.sample_state(&mut rng);
            let t = rng.random_range(1..inst.horizon);
            let r = spec.stage_reward(t, &x);
            for a in inst.capacity_box().iter() {
                let direct = mcip_reward(&inst, t, &x[..2], &x[2..], &a).unwrap();
                assert!((r.evaluate(&a) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transition_structure() {
        let inst = random_instance(6);
        let spec = build_mcip_mdp(&inst).unwrap();
        let x = [2.0, 1.0, inst.initial_demand[0], inst.initial_demand[1], inst.initial_demand[2]];
        let xi = [0.3, 0.6, 0.9];
        let b = spec.linear(&x, &xi);
        for r in 0..5 {
            for c in 0..2 {
                assert_eq!(b[(r, c)], if r == c { 1.0 } else { 0.0 });
            }
        }
        let next = spec.affine_transition(&x, &[2, 1], &xi).unwrap();
        assert_eq!(&next[..2], &[2.0, 1.0]);
        assert_eq!(&next[2..], inst.demand.next(&x[2..], &xi).as_slice());
        assert_eq!(spec.action_box_at(inst.horizon).count(), 1);
    }

    #[test]
    fn sampled_paths_follow_the_model() {
        let inst = random_instance(7);
        let paths = sample_demand_paths(&inst, 3, 9);
        for (p, path) in paths.iter().enumerate() {
            let mut rng = substream(9, &[0xd3, p as u64]);
            let mut d = inst.initial_demand.clone();
            assert_eq!(path[0], d);
            for step in &path[1..] {
                let u: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
                d = inst.demand.next(&d, &u);
                assert_eq!(step, &d);
            }
        }
    }

    #[test]
    fn kernel_rows_sum_to_one_and_match_sampling_frequencies() {
        let inst = McipInstance::tiny();
        for d in inst.demand.lattice() {
            let kernel = inst.demand.kernel(&d);
            let total: f64 = kernel.iter().map(|e| e.0).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let d = [1.0, 3.0];
        let kernel = inst.demand.kernel(&d);
        let mut rng = substream(10, &[]);
        let n = 20_000;
        let mut counts: HashMap<Vec<u64>, usize> = HashMap::new();
        for _ in 0..n {
            let u = [rng.random::<f64>(), rng.random::<f64>()];
            *counts.entry(key(&inst.demand.next(&d, &u))).or_default() += 1;
        }
        for (p, next) in kernel {
            let freq = counts.get(&key(&next)).copied().unwrap_or(0) as f64 / n as f64;
            assert!((freq - p).abs() < 0.015, "{next:?}: {freq} vs {p}");
        }
    }

    #[test]
    fn lattice_dp_equals_extended_recursion() {
        let inst = McipInstance::tiny();
        let dp = exact_dp(&McipLattice::new(&inst).unwrap()).unwrap();
        let ext = ExtendedValues::new(&inst);
        for t in 1..=inst.horizon {
            for x in lattice_states(&inst) {
                assert_eq!(dp.value(t, &x).unwrap(), ext.value(t, &x[..2], &x[2..]).unwrap());
            }
        }
    }

    #[test]
    fn terminal_value_is_concave_in_capacity() {
        let inst = McipInstance::tiny();
        let ext = ExtendedValues::new(&inst);
        let mut rng = substream(11, &[]);
        for _ in 0..200 {
            let d = inst.demand.lattice()[rng.random_range(0..9)].clone();
            let k1 = [rng.random_range(0.0..=3.0), rng.random_range(0.0..=3.0)];
            let k2 = [rng.random_range(0.0..=3.0), rng.random_range(0.0..=3.0)];
            let mid = [(k1[0] + k2[0]) / 2.0, (k1[1] + k2[1]) / 2.0];
            let t = inst.horizon;
            let lhs = ext.value(t, &mid, &d).unwrap();
            let rhs = 0.5 * ext.value(t, &k1, &d).unwrap() + 0.5 * ext.value(t, &k2, &d).unwrap();
            assert!(lhs >= rhs - 1e-8);
        }
    }

    #[test]
    fn zero_capacity_policy_has_closed_form_enpv() {
        let mut inst = random_instance(12);
        let probabilities = vec![vec![0.2, 0.5, 0.3]; 3];
        inst.demand = DemandModel::IidLattice { levels: inst.demand.levels().to_vec(), probabilities: probabilities.clone() };
        inst.validate().unwrap();
        let paths = sample_demand_paths(&inst, 2000, 1);
        let stats = simulate_policy(&inst, &FixedCapacityPolicy { capacity: vec![0, 0] }, &paths).unwrap();
        let mut expected = -(0..3).map(|i| inst.penalty[0][i] * inst.initial_demand[i]).sum::<f64>();
        for t in 1..inst.horizon {
            let mean: f64 = (0..3)
                .map(|i| {
                    let ed: f64 = inst.demand.levels()[i].iter().zip(&probabilities[i]).map(|(l, p)| l * p).sum();
                    inst.penalty[t][i] * ed
                })
                .sum();
            expected -= inst.discount.powi(t as i32) * mean;
        }
        assert!((stats.mean - expected).abs() < 4.0 * stats.std_error, "{} vs {expected}", stats.mean);
    }

    #[test]
    fn deterministic_demand_hand_rollout() {
        let mut inst = random_instance(13);
        inst.horizon = 2;
        inst.revenue.truncate(2);
        inst.penalty.truncate(2);
        inst.expansion_cost.truncate(2);
        inst.salvage_value.truncate(2);
        inst.demand = DemandModel::IidLattice {
            levels: inst.demand.levels().to_vec(),
            probabilities: inst.demand.levels().iter().map(|l| (0..l.len()).map(|k| if k == 1 { 1.0 } else { 0.0 }).collect()).collect(),
        };
        inst.validate().unwrap();
        let paths = sample_demand_paths(&inst, 1, 0);
        let stats = simulate_policy(&inst, &FixedCapacityPolicy { capacity: vec![2, 1] }, &paths).unwrap();
        let k0 = [0.0, 0.0];
        let r1 = mcip_reward(&inst, 1, &k0, &paths[0][0], &[2, 1]).unwrap();
        let r2 = mcip_reward(&inst, 2, &[2.0, 1.0], &paths[0][1], &[0, 0]).unwrap();
        assert!((stats.mean - (r1 + inst.discount * r2)).abs() < 1e-12);
    }

    #[test]
    fn standard_error_scales_with_paths() {
        let inst = random_instance(14);
        let policy = FixedCapacityPolicy { capacity: vec![1, 1] };
        let small = simulate_policy(&inst, &policy, &sample_demand_paths(&inst, 100, 2)).unwrap();
        let large = simulate_policy(&inst, &policy, &sample_demand_paths(&inst, 10_000, 3)).unwrap();
        let ratio = small.std_error / large.std_error;
        assert!((ratio / 10.0 - 1.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn inflexible_single_period_matches_dp() {
        let mut inst = McipInstance::tiny();
        inst.horizon = 1;
        inst.revenue.truncate(1);
        inst.penalty.truncate(1);
        inst.expansion_cost.truncate(1);
        inst.salvage_value.truncate(1);
        let plan = inflexible_two_stage(&inst, &sample_demand_paths(&inst, 1, 0)).unwrap();
        let dp = exact_dp(&McipLattice::new(&inst).unwrap()).unwrap();
        let mut x1: Vec<f64> = inst.initial_capacity.iter().map(|&k| k as f64).collect();
        x1.extend(&inst.initial_demand);
        assert!((plan.in_sample_value - dp.value(1, &x1).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn inflexible_plan_matches_enumeration() {
        let inst = McipInstance::tiny();
        let scenarios = sample_demand_paths(&inst, 6, 4);
        let plan = inflexible_two_stage(&inst, &scenarios).unwrap();
        let mut best = f64::NEG_INFINITY;
        for k in inst.capacity_box().iter() {
            let v = simulate_policy(&inst, &FixedCapacityPolicy { capacity: k }, &scenarios).unwrap().mean;
            best = best.max(v);
        }
        assert!((plan.in_sample_value - best).abs() < 1e-6, "{} vs {best}", plan.in_sample_value);
        let own = simulate_policy(&inst, &FixedCapacityPolicy { capacity: plan.capacity.clone() }, &scenarios).unwrap();
        assert!((own.mean - plan.in_sample_value).abs() < 1e-6);
    }

    #[test]
    fn prohibitive_expansion_keeps_initial_capacity() {
        let mut inst = McipInstance::tiny();
        inst.expansion_cost = vec![vec![1e6, 1e6]; 3];
        inst.revenue = vec![vec![vec![50.0, 50.0], vec![50.0, 50.0]]; 3];
        let plan = inflexible_two_stage(&inst, &sample_demand_paths(&inst, 4, 1)).unwrap();
        assert_eq!(plan.capacity, inst.initial_capacity);
    }

    #[test]
    fn instance_json_round_trip_and_validation() {
        let inst = McipInstance::case_study();
        assert_eq!(McipInstance::from_json(&inst.to_json().unwrap()).unwrap(), inst);
        let mut bad = inst.clone();
        bad.salvage_value[0][0] = 10.0;
        assert!(bad.validate().is_err());
        let mut bad = inst;
        bad.initial_demand = vec![2.5, 2.0];
        assert!(bad.validate().is_err());
    }
}
