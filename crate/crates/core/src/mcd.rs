//! One-step action selection: `max_a r(a) + γ·(recourse(a) + w0)`.
//!
//! Three engines share one interface:
//!
//! - [`Engine::Mcd`] alternates between evaluating an anchor action and
//!   solving a first-stage MILP over binary-encoded actions, adding integer
//!   optimality cuts and combined (gradient + positive-neuron) cuts.
//! - [`Engine::LShaped`] is the same loop with integer optimality cuts only.
//! - [`Engine::BruteForce`] enumerates the action box.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bnb::{solve_milp_with, MilpOptions, MilpProblem, MilpStatus};
use crate::cuts::{BinaryEncoding, CutPool, IntegerOptimalityCut, LinearCut, RecourseContext};
use crate::error::{Error, Result};
use crate::mdp::{ActionBox, MdpSpec, DEFAULT_ENUMERATION_CAP};
use crate::neural::ReluNet;
use crate::rng::{substream, SimRng};
use crate::simplex::{LpProblem, RowSense, Sense};

/// `r(a) = constant + linear·a − Σ_k max_p piece_kp(a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseReward {
    pub constant: f64,
    /// Empty means all zero.
    pub linear: Vec<f64>,
    /// Convex costs, each the maximum of its pieces.
    pub convex_terms: Vec<Vec<LinearCut>>,
}

impl PiecewiseReward {
    pub fn evaluate(&self, a: &[i64]) -> f64 {
        let lin: f64 = self.linear.iter().zip(a).map(|(c, &v)| c * v as f64).sum();
        let cost: f64 = self
            .convex_terms
            .iter()
            .map(|pieces| pieces.iter().map(|p| p.eval(a)).fold(f64::NEG_INFINITY, f64::max))
            .sum();
        self.constant + lin - cost
    }

    /// Drops duplicate pieces and folds single-piece terms into the linear part.
    pub fn normalized(&self, dims: usize) -> PiecewiseReward {
        let mut linear = if self.linear.is_empty() { vec![0.0; dims] } else { self.linear.clone() };
        let mut constant = self.constant;
        let mut convex_terms = Vec::new();
        for pieces in &self.convex_terms {
            let mut unique: Vec<LinearCut> = Vec::new();
            for p in pieces {
                if !unique.contains(p) {
                    unique.push(p.clone());
                }
            }
            match unique.len() {
                0 => {}
                1 => {
                    for (l, c) in linear.iter_mut().zip(&unique[0].coefs) {
                        *l -= c;
                    }
                    constant -= unique[0].constant;
                }
                _ => convex_terms.push(unique),
            }
        }
        PiecewiseReward { constant, linear, convex_terms }
    }
}

type RewardCallback = dyn Fn(&[i64]) -> f64 + Send + Sync;

/// The stage reward at a fixed state, as a function of the action.
#[derive(Clone)]
pub enum StageReward {
    /// Usable by every engine.
    PiecewiseLinear(PiecewiseReward),
    /// Opaque; brute force only.
    Callback(Arc<RewardCallback>),
}

impl fmt::Debug for StageReward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageReward::PiecewiseLinear(p) => f.debug_tuple("PiecewiseLinear").field(p).finish(),
            StageReward::Callback(_) => f.write_str("Callback(..)"),
        }
    }
}

impl StageReward {
    pub fn constant(c: f64) -> Self {
        StageReward::PiecewiseLinear(PiecewiseReward { constant: c, linear: Vec::new(), convex_terms: Vec::new() })
    }

    pub fn callback(f: impl Fn(&[i64]) -> f64 + Send + Sync + 'static) -> Self {
        StageReward::Callback(Arc::new(f))
    }

    pub fn evaluate(&self, a: &[i64]) -> f64 {
        match self {
            StageReward::PiecewiseLinear(p) => p.evaluate(a),
            StageReward::Callback(f) => f(a),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Engine {
    #[serde(rename = "mcd")]
    Mcd,
    #[serde(rename = "brute")]
    BruteForce,
    #[serde(rename = "lshaped")]
    LShaped,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Mcd => "mcd",
            Engine::BruteForce => "brute",
            Engine::LShaped => "lshaped",
        })
    }
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcd" => Ok(Engine::Mcd),
            "brute" => Ok(Engine::BruteForce),
            "lshaped" => Ok(Engine::LShaped),
            other => Err(Error::InvalidInput(format!("unknown engine '{other}' (expected brute, mcd or lshaped)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McdConfig {
    pub max_iterations: usize,
    /// Stop once `(V_ub − V_lb) / max(|V_ub|, 1e-6)` drops below this.
    pub rel_gap: f64,
    pub engine: Engine,
    pub enumeration_cap: u128,
}

impl Default for McdConfig {
    fn default() -> Self {
        Self { max_iterations: 100, rel_gap: 0.0035, engine: Engine::Mcd, enumeration_cap: DEFAULT_ENUMERATION_CAP }
    }
}

impl McdConfig {
    /// Runs until optimality is proven: no gap tolerance, and enough
    /// iterations to visit every action of `action_box`.
    pub fn exact(engine: Engine, action_box: &ActionBox) -> Self {
        let iters = usize::try_from(action_box.count().saturating_add(1)).unwrap_or(usize::MAX);
        Self { max_iterations: iters, rel_gap: 0.0, engine, ..Default::default() }
    }

    /// The stopping rule as a label, e.g. `0.35%/100 steps`.
    pub fn stop_label(&self) -> String {
        let percent = format!("{:.6}", self.rel_gap * 100.0);
        let percent = percent.trim_end_matches('0').trim_end_matches('.');
        format!("{percent}%/{} steps", self.max_iterations)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput("max_iterations must be at least 1".into()));
        }
        if !(self.rel_gap >= 0.0) {
            return Err(Error::InvalidInput(format!("relative gap {} must be non-negative", self.rel_gap)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub action: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub action: Vec<i64>,
    /// Objective of `action`, the final lower bound.
    pub objective: f64,
    pub upper_bound: f64,
    /// Actions evaluated.
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
    pub engine: Engine,
}

/// `max_a r(a) + γ·(recourse(a) + w0)` at one state.
#[derive(Clone, Copy, Debug)]
pub struct SelectionProblem<'a> {
    pub ctx: &'a RecourseContext,
    pub reward: &'a StageReward,
    pub discount: f64,
}

impl SelectionProblem<'_> {
    pub fn objective(&self, a: &[i64]) -> f64 {
        self.reward.evaluate(a) + self.discount * (self.ctx.recourse_value(a) + self.ctx.output_bias())
    }

    pub fn action_box(&self) -> ActionBox {
        ActionBox::new(self.ctx.action_upper().to_vec()).expect("context holds a valid box")
    }
}

/// Problem FP together with its variable layout.
#[derive(Clone, Debug)]
pub struct FirstStage {
    pub milp: MilpProblem,
    /// Column of the recourse estimate `η`.
    pub eta: usize,
    /// Added to the MILP objective to get the selection objective.
    pub constant: f64,
}

/// Coefficients over the bits of an expression linear in the action.
fn over_bits(enc: &BinaryEncoding, coefs: &[f64]) -> Vec<f64> {
    enc.weights().into_iter().map(|(n, scale)| coefs[n] * scale).collect()
}

/// Assembles the first-stage MILP: maximise `r(a) + γη + γw0` over bits
/// `α`, with `η <= η̄`, one row per integer and combined cut, bit-range rows
/// `Σ 2^l α <= ā`, and one auxiliary per convex reward term.
pub fn build_first_stage(
    enc: &BinaryEncoding,
    pool: &CutPool,
    reward: &PiecewiseReward,
    discount: f64,
    output_bias: f64,
) -> Result<FirstStage> {
    let dims = enc.dims();
    let reward = reward.normalized(dims);
    if reward.linear.len() != dims {
        return Err(Error::DimensionMismatch { expected: dims, got: reward.linear.len() });
    }
    for cut in pool.combined.iter().chain(reward.convex_terms.iter().flatten()) {
        if cut.coefs.len() != dims {
            return Err(Error::DimensionMismatch { expected: dims, got: cut.coefs.len() });
        }
    }
    let nb = enc.len();
    let eta = nb;
    let aux = nb + 1;
    let n = aux + reward.convex_terms.len();

    let mut objective = vec![0.0; n];
    objective[..nb].copy_from_slice(&over_bits(enc, &reward.linear));
    objective[eta] = discount;
    for k in 0..reward.convex_terms.len() {
        objective[aux + k] = -1.0;
    }
    let mut lp = LpProblem::new(Sense::Maximize, objective);
    for j in 0..nb {
        lp.set_bounds(j, 0.0, 1.0);
    }
    lp.set_bounds(eta, f64::NEG_INFINITY, pool.upper);
    for k in 0..reward.convex_terms.len() {
        lp.set_bounds(aux + k, f64::NEG_INFINITY, f64::INFINITY);
    }

    for dim in 0..dims {
        if enc.needs_bound_row(dim) {
            let mut row = vec![0.0; n];
            for l in 0..enc.bits(dim) {
                row[enc.index(dim, l)] = (1u64 << l) as f64;
            }
            lp.add_row(row, RowSense::Le, enc.upper()[dim] as f64);
        }
    }
    for cut in &pool.integer {
        let spread = cut.upper - cut.anchor_value;
        let mut row = vec![0.0; n];
        row[eta] = 1.0;
        for &k in &cut.ones {
            row[k] = spread;
        }
        for &k in &cut.zeros {
            row[k] = -spread;
        }
        lp.add_row(row, RowSense::Le, cut.anchor_value + spread * cut.ones.len() as f64);
    }
    for cut in &pool.combined {
        let mut row = vec![0.0; n];
        row[eta] = 1.0;
        for (k, v) in over_bits(enc, &cut.coefs).into_iter().enumerate() {
            row[k] = -v;
        }
        lp.add_row(row, RowSense::Le, cut.constant);
    }
    for (k, pieces) in reward.convex_terms.iter().enumerate() {
        for piece in pieces {
            let mut row = vec![0.0; n];
            row[..nb].copy_from_slice(&over_bits(enc, &piece.coefs));
            row[aux + k] = -1.0;
            lp.add_row(row, RowSense::Le, -piece.constant);
        }
    }
    Ok(FirstStage {
        milp: MilpProblem { lp, binaries: (0..nb).collect() },
        eta,
        constant: reward.constant + discount * output_bias,
    })
}

/// Dispatches on `config.engine`. `initial` defaults to the zero action.
pub fn select_action(p: &SelectionProblem<'_>, config: &McdConfig, initial: Option<&[i64]>) -> Result<SelectionResult> {
    match config.engine {
        Engine::BruteForce => select_action_bruteforce(p, config.enumeration_cap),
        Engine::Mcd => select_action_mcd(p, config, initial),
        Engine::LShaped => select_action_lshaped(p, config, initial),
    }
}

/// Exhaustive search; ties go to the lexicographically smallest action.
pub fn select_action_bruteforce(p: &SelectionProblem<'_>, cap: u128) -> Result<SelectionResult> {
    let action_box = p.action_box();
    let count = action_box.count();
    if count > cap {
        return Err(Error::EnumerationCap { count, cap });
    }
    let mut best: Option<(Vec<i64>, f64)> = None;
    for a in action_box.iter() {
        let v = p.objective(&a);
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((a, v));
        }
    }
    let (action, objective) = best.expect("action box is never empty");
    Ok(SelectionResult {
        trace: vec![TraceRow { iteration: 1, lower_bound: objective, upper_bound: objective, action: action.clone() }],
        action,
        objective,
        upper_bound: objective,
        iterations: usize::try_from(count).unwrap_or(usize::MAX),
        engine: Engine::BruteForce,
    })
}

pub fn select_action_mcd(p: &SelectionProblem<'_>, config: &McdConfig, initial: Option<&[i64]>) -> Result<SelectionResult> {
    decompose(p, config, initial, true)
}

pub fn select_action_lshaped(
    p: &SelectionProblem<'_>,
    config: &McdConfig,
    initial: Option<&[i64]>,
) -> Result<SelectionResult> {
    decompose(p, config, initial, false)
}

const FP_OPTIONS: MilpOptions = MilpOptions { abs_tol: 1e-9, integrality_tol: 1e-6, node_limit: 100_000 };

fn decompose(
    p: &SelectionProblem<'_>,
    config: &McdConfig,
    initial: Option<&[i64]>,
    combined: bool,
) -> Result<SelectionResult> {
    config.validate()?;
    let engine = if combined { Engine::Mcd } else { Engine::LShaped };
    let StageReward::PiecewiseLinear(reward) = p.reward else {
        return Err(Error::InvalidInput(format!("engine {engine} needs a piecewise-linear stage reward")));
    };
    let action_box = p.action_box();
    let mut anchor = match initial {
        Some(a) => {
            action_box.check(a)?;
            a.to_vec()
        }
        None => action_box.zero(),
    };
    let enc = BinaryEncoding::new(&action_box);
    let positive = combined.then(|| p.ctx.positive_cut());
    let mut pool = CutPool { upper: p.ctx.recourse_upper_bound(), positive: positive.clone(), ..Default::default() };

    let mut best: Option<(Vec<i64>, f64)> = None;
    let mut upper = f64::INFINITY;
    let mut visited = std::collections::HashSet::new();
    let mut trace = Vec::new();
    for m in 1..=config.max_iterations {
        let recourse = p.ctx.recourse_value(&anchor);
        let value = p.objective(&anchor);
        if best.as_ref().is_none_or(|(_, b)| value > *b) {
            best = Some((anchor.clone(), value));
        }
        let lower = best.as_ref().map(|b| b.1).expect("set above");
        visited.insert(anchor.clone());
        pool.integer.push(IntegerOptimalityCut::new(&enc, &anchor, recourse, pool.upper)?);
        if let Some(pos) = &positive {
            pool.combined.push(p.ctx.gradient_cut(&anchor).add(pos));
        }

        let fp = build_first_stage(&enc, &pool, reward, p.discount, p.ctx.output_bias())?;
        let solved = match solve_milp_with(&fp.milp, &FP_OPTIONS) {
            Ok(s) if s.status == MilpStatus::Optimal => s,
            outcome => {
                log::warn!("first-stage MILP failed ({outcome:?}); falling back to brute force");
                let mut r = select_action_bruteforce(p, config.enumeration_cap)?;
                r.engine = engine;
                return Ok(r);
            }
        };
        upper = upper.min(solved.bound + fp.constant);
        trace.push(TraceRow { iteration: m, lower_bound: lower, upper_bound: upper, action: anchor.clone() });

        let next = enc.decode(&solved.x[..enc.len()]);
        let gap = (upper - lower) / upper.abs().max(1e-6);
        if gap < config.rel_gap || visited.contains(&next) {
            break;
        }
        anchor = next;
    }
    let (action, objective) = best.expect("at least one iteration");
    Ok(SelectionResult { action, objective, upper_bound: upper, iterations: trace.len(), trace, engine })
}

/// Writes `(instance, engine, iteration, lower, upper, action)` rows.
pub fn write_trace_csv<W: Write>(out: &mut csv::Writer<W>, instance: usize, result: &SelectionResult) -> Result<()> {
    for row in &result.trace {
        let action = row.action.iter().map(i64::to_string).collect::<Vec<_>>().join(" ");
        out.write_record([
            instance.to_string(),
            result.engine.to_string(),
            row.iteration.to_string(),
            format!("{:.10}", row.lower_bound),
            format!("{:.10}", row.upper_bound),
            action,
        ])?;
    }
    Ok(())
}

/// Shape of a synthetic selection instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomInstanceConfig {
    pub upper: Vec<i64>,
    pub neurons: usize,
    pub scenarios: usize,
    /// Extra state dimensions beyond the action dimension.
    pub extra_state_dims: usize,
    pub discount: f64,
}

impl Default for RandomInstanceConfig {
    fn default() -> Self {
        Self { upper: vec![3, 3], neurons: 8, scenarios: 4, extra_state_dims: 2, discount: 0.9 }
    }
}

/// A seeded one-step selection problem: a random network, affine
/// transitions with noise-dependent slopes, and an adjustment-cost reward.
#[derive(Clone, Debug)]
pub struct RandomInstance {
    pub spec: MdpSpec,
    pub action_box: ActionBox,
    pub net: ReluNet,
    pub state: Vec<f64>,
    pub noises: Vec<Vec<f64>>,
    pub reward: StageReward,
}

impl RandomInstance {
    pub fn context(&self) -> Result<RecourseContext> {
        RecourseContext::new(&self.spec, &self.action_box, &self.net, &self.state, &self.noises)
    }
}

pub fn random_instance(seed: u64, cfg: &RandomInstanceConfig) -> Result<RandomInstance> {
    let action_box = ActionBox::new(cfg.upper.clone())?;
    if cfg.neurons == 0 || cfg.scenarios == 0 {
        return Err(Error::InvalidInput("random instances need neurons and scenarios".into()));
    }
    let n2 = action_box.dims();
    let n1 = n2 + cfg.extra_state_dims;
    let mut rng = substream(seed, &[0x5e1ec7]);
    let uniform = |rng: &mut SimRng, lo: f64, hi: f64| rng.random_range(lo..hi);

    let scale = 1.0 / (n1 as f64).sqrt();
    let u: Vec<Vec<f64>> = (0..cfg.neurons).map(|_| (0..n1).map(|_| uniform(&mut rng, -1.0, 1.0) * scale).collect()).collect();
    let u0 = (0..cfg.neurons).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
    let w = (0..cfg.neurons).map(|_| uniform(&mut rng, -1.5, 1.5)).collect();
    let net = ReluNet::new(n1, u, u0, w, uniform(&mut rng, -1.0, 1.0))?;

    let base = DMatrix::from_fn(n1, n2, |_, _| uniform(&mut rng, -1.0, 1.0));
    let state: Vec<f64> = (0..n1).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
    let linear_coefs: Vec<f64> = (0..n2).map(|_| uniform(&mut rng, -0.5, 0.5)).collect();
    let mut convex_terms = Vec::with_capacity(n2);
    for n in 0..n2 {
        let reference = rng.random_range(0..=cfg.upper[n]) as f64;
        let expand = uniform(&mut rng, 0.1, 0.6);
        let salvage = expand * uniform(&mut rng, 0.0, 1.0);
        let mut e = vec![0.0; n2];
        e[n] = 1.0;
        convex_terms.push(vec![
            LinearCut { coefs: e.iter().map(|v| v * salvage).collect(), constant: -salvage * reference },
            LinearCut { coefs: e.iter().map(|v| v * expand).collect(), constant: -expand * reference },
        ]);
    }
    let reward = StageReward::PiecewiseLinear(PiecewiseReward { constant: 0.0, linear: linear_coefs, convex_terms });
    let reward_bound = {
        let p = match &reward {
            StageReward::PiecewiseLinear(p) => p,
            StageReward::Callback(_) => unreachable!(),
        };
        action_box.iter().map(|a| p.evaluate(&a).abs()).fold(0.0, f64::max)
    };

    let noise_dim = n1;
    let spec = MdpSpec::new(2, cfg.discount, vec![(-1e6, 1e6); n1], action_box.clone(), state.clone())?
        .with_noise(move |rng| (0..noise_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .with_transition(
            |x, xi| x.iter().zip(xi).map(|(a, b)| 0.5 * a + 0.5 * b).collect(),
            move |_, xi| &base * (1.0 + 0.25 * xi[0]),
        )
        .with_reward(reward_bound, {
            let reward = reward.clone();
            move |_, _| reward.clone()
        });
    let mut noise_rng = substream(seed, &[0x5e1ec7, 1]);
    let noises = (0..cfg.scenarios).map(|_| spec.sample_noise(&mut noise_rng)).collect();
    Ok(RandomInstance { spec, action_box, net, state, noises, reward })
}
