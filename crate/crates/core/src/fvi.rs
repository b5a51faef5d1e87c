//! Backward fitted value iteration with ReLU value networks, and exact
//! backward induction on finite lattices as a reference.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cuts::RecourseContext;
use crate::error::{Error, Result};
use crate::mcd::{select_action, McdConfig, SelectionProblem, SelectionResult};
use crate::mdp::MdpSpec;
use crate::neural::{fit, ReluNet, RegressionSet, TrainConfig};
use crate::rng::{hash_state, substream};

const TAG_STATES: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_FIT: u64 = 3;
const TAG_POLICY: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FviConfig {
    /// States sampled per period (`S1`).
    pub state_samples: usize,
    /// Noise draws per state for the expectation (`S2`).
    pub transition_samples: usize,
    /// Hidden neurons per value network (`J`).
    pub neurons: usize,
    pub train: TrainConfig,
    pub selection: McdConfig,
    pub seed: u64,
}

impl Default for FviConfig {
    fn default() -> Self {
        Self {
            state_samples: 200,
            transition_samples: 20,
            neurons: 20,
            train: TrainConfig::default(),
            selection: McdConfig::default(),
            seed: 0,
        }
    }
}

impl FviConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_samples == 0 || self.transition_samples == 0 || self.neurons == 0 {
            return Err(Error::InvalidInput("state_samples, transition_samples and neurons must be positive".into()));
        }
        self.train.validate()?;
        self.selection.validate()
    }
}

/// Per-period training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodFit {
    pub period: usize,
    pub loss: f64,
    pub target_mean: f64,
    /// Targets outside `±Σ γ^k r_max`; expected to be zero.
    pub out_of_bounds: usize,
}

/// Trained networks for periods `2..=T` and the estimate of `V_1(x_1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedValueSet {
    /// `nets[k]` approximates the value of period `k + 2`.
    pub nets: Vec<ReluNet>,
    pub fits: Vec<PeriodFit>,
    pub initial_value: f64,
    pub initial_action: Vec<i64>,
    pub config: FviConfig,
}

impl FittedValueSet {
    /// The network of `period`, for `2 <= period <= T`.
    pub fn net(&self, period: usize) -> Option<&ReluNet> {
        period.checked_sub(2).and_then(|k| self.nets.get(k))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// `max_a r_t(x, a) + (γ/S2) Σ_s Ṽ_{t+1}(f(x, a, ξ_s))`; the recourse term is
/// dropped when `next` is `None` (the last period).
pub fn bellman_target(
    spec: &MdpSpec,
    next: Option<&ReluNet>,
    period: usize,
    x: &[f64],
    noises: &[Vec<f64>],
    selection: &McdConfig,
) -> Result<SelectionResult> {
    let action_box = spec.action_box_at(period);
    let ctx = match next {
        Some(net) if period < spec.horizon => RecourseContext::new(spec, action_box, net, x, noises)?,
        _ => RecourseContext::terminal(action_box),
    };
    let reward = spec.stage_reward(period, x);
    let problem = SelectionProblem { ctx: &ctx, reward: &reward, discount: spec.discount };
    select_action(&problem, selection, None)
}

/// `Σ_{k=0}^{T−t} γ^k r_max`, the bound on any value of period `t`.
pub fn value_bound(spec: &MdpSpec, period: usize) -> f64 {
    (0..=spec.horizon - period).map(|k| spec.discount.powi(k as i32) * spec.reward_bound).sum()
}

fn noises_for(spec: &MdpSpec, seed: u64, tags: &[u64], count: usize) -> Vec<Vec<f64>> {
    let mut rng = substream(seed, tags);
    (0..count).map(|_| spec.sample_noise(&mut rng)).collect()
}

/// Runs fitted value iteration backward from `T` to 2, then evaluates the
/// period-1 Bellman target at the initial state with fresh noise draws.
pub fn run_nnfvi(spec: &MdpSpec, config: &FviConfig) -> Result<FittedValueSet> {
    config.validate()?;
    let horizon = spec.horizon;
    let mut nets: Vec<Option<ReluNet>> = vec![None; horizon + 2];
    let mut fits = Vec::new();
    for t in (2..=horizon).rev() {
        let mut rng = substream(config.seed, &[t as u64, TAG_STATES]);
        let samples = spec.sample_states(t, config.state_samples, &mut rng);
        let next = nets[t + 1].as_ref();
        let targets: Vec<f64> = samples
            .par_iter()
            .enumerate()
            .map(|(s, sample)| {
                let noises = noises_for(spec, config.seed, &[t as u64, s as u64, TAG_NOISE], config.transition_samples);
                bellman_target(spec, next, t, &sample.state, &noises, &config.selection).map(|r| r.objective)
            })
            .collect::<Result<_>>()?;
        let bound = value_bound(spec, t);
        let out_of_bounds = targets.iter().filter(|v| v.abs() > bound * (1.0 + 1e-9) + 1e-9).count();
        if out_of_bounds > 0 {
            log::warn!("period {t}: {out_of_bounds} targets exceed the value bound {bound}");
        }
        let target_mean = targets.iter().sum::<f64>() / targets.len() as f64;
        let outcome = RegressionSet::new(samples.into_iter().map(|s| s.state).collect(), targets)
            .and_then(|data| fit(&data, config.neurons, &config.train, &mut substream(config.seed, &[t as u64, TAG_FIT])))
            .map_err(|e| Error::PeriodTraining { period: t, source: Box::new(e) })?;
        log::info!("period {t}: training loss {:.6e}", outcome.loss);
        fits.push(PeriodFit { period: t, loss: outcome.loss, target_mean, out_of_bounds });
        nets[t] = Some(outcome.net);
    }
    let noises = noises_for(spec, config.seed, &[1, 0, TAG_NOISE], config.transition_samples);
    let first = bellman_target(spec, nets[2].as_ref(), 1, &spec.initial_state, &noises, &config.selection)?;
    fits.reverse();
    Ok(FittedValueSet {
        nets: nets.into_iter().skip(2).take(horizon.saturating_sub(1)).map(|n| n.expect("trained")).collect(),
        fits,
        initial_value: first.objective,
        initial_action: first.action,
        config: config.clone(),
    })
}

/// Chooses an action at `(period, state)`.
pub trait Policy: Sync {
    fn act(&self, period: usize, x: &[f64]) -> Result<Vec<i64>>;
}

/// The one-step lookahead policy of a fitted value set. Noise draws are
/// keyed by `(seed, period, state)`, so the same state always gets the same
/// action.
pub struct GreedyPolicy<'a> {
    pub spec: &'a MdpSpec,
    pub values: &'a FittedValueSet,
    pub selection: McdConfig,
    pub transition_samples: usize,
    pub seed: u64,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(spec: &'a MdpSpec, values: &'a FittedValueSet) -> Self {
        Self {
            spec,
            values,
            selection: values.config.selection,
            transition_samples: values.config.transition_samples,
            seed: values.config.seed,
        }
    }

    pub fn decide(&self, period: usize, x: &[f64]) -> Result<SelectionResult> {
        let noises = noises_for(self.spec, self.seed, &[period as u64, hash_state(x), TAG_POLICY], self.transition_samples);
        bellman_target(self.spec, self.values.net(period + 1), period, x, &noises, &self.selection)
    }
}

impl Policy for GreedyPolicy<'_> {
    fn act(&self, period: usize, x: &[f64]) -> Result<Vec<i64>> {
        Ok(self.decide(period, x)?.action)
    }
}

/// A finite-horizon MDP with finitely many states, actions and outcomes.
pub trait DiscreteMdp: Sync {
    fn horizon(&self) -> usize;
    fn discount(&self) -> f64;
    /// Number of states of `period`, computed without enumerating them.
    fn state_count(&self, period: usize) -> u128;
    fn states(&self, period: usize) -> Vec<Vec<f64>>;
    fn actions(&self, period: usize, x: &[f64]) -> Vec<Vec<i64>>;
    fn reward(&self, period: usize, x: &[f64], a: &[i64]) -> f64;
    /// `(probability, next state)` pairs; probabilities sum to one.
    fn transitions(&self, period: usize, x: &[f64], a: &[i64]) -> Vec<(f64, Vec<f64>)>;
}

/// Largest per-period state count [`exact_dp`] accepts.
pub const MAX_LATTICE_STATES: u128 = 1_000_000;

fn state_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeriodTable {
    pub period: usize,
    pub states: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub actions: Vec<Vec<i64>>,
    index: HashMap<Vec<u64>, usize>,
}

impl PeriodTable {
    pub fn lookup(&self, x: &[f64]) -> Option<usize> {
        self.index.get(&state_key(x)).copied()
    }

    pub fn value(&self, x: &[f64]) -> Option<f64> {
        self.lookup(x).map(|i| self.values[i])
    }
}

/// Exact values and greedy actions, `tables[t − 1]` for period `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DpTables {
    pub tables: Vec<PeriodTable>,
}

impl DpTables {
    pub fn value(&self, period: usize, x: &[f64]) -> Option<f64> {
        self.tables.get(period.checked_sub(1)?)?.value(x)
    }

    pub fn action(&self, period: usize, x: &[f64]) -> Option<&[i64]> {
        let table = self.tables.get(period.checked_sub(1)?)?;
        table.lookup(x).map(|i| table.actions[i].as_slice())
    }

    /// Rows `period, state..., value, action...`.
    pub fn write_csv<W: Write>(&self, out: &mut csv::Writer<W>) -> Result<()> {
        for table in &self.tables {
            for ((x, v), a) in table.states.iter().zip(&table.values).zip(&table.actions) {
                let mut row = vec![table.period.to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                row.push(format!("{v:.10}"));
                row.extend(a.iter().map(|v| v.to_string()));
                out.write_record(&row)?;
            }
        }
        Ok(())
    }
}

impl Policy for DpTables {
    fn act(&self, period: usize, x: &[f64]) -> Result<Vec<i64>> {
        self.action(period, x)
            .map(<[i64]>::to_vec)
            .ok_or_else(|| Error::InvalidInput(format!("state {x:?} is not on the period-{period} lattice")))
    }
}

/// Backward induction over every period's lattice.
pub fn exact_dp<M: DiscreteMdp + ?Sized>(m: &M) -> Result<DpTables> {
    let horizon = m.horizon();
    for t in 1..=horizon {
        let count = m.state_count(t);
        if count > MAX_LATTICE_STATES {
            let states = usize::try_from(count).unwrap_or(usize::MAX);
            let probe = m.states(1.min(horizon)).first().cloned().unwrap_or_default();
            let actions = m.actions(t, &probe).len();
            let estimate = (count as f64).powi(2) * actions as f64 * horizon as f64;
            return Err(Error::LatticeTooLarge { states, actions, periods: horizon, estimate });
        }
    }
    let mut tables: Vec<PeriodTable> = Vec::with_capacity(horizon);
    for t in (1..=horizon).rev() {
        let states = m.states(t);
        let next = tables.last();
        let solved: Vec<(f64, Vec<i64>)> = states
            .par_iter()
            .map(|x| {
                let mut best: Option<(f64, Vec<i64>)> = None;
                for a in m.actions(t, x) {
                    let mut v = m.reward(t, x, &a);
                    if let Some(next) = next {
                        let mut expected = 0.0;
                        for (p, y) in m.transitions(t, x, &a) {
                            let value = next.value(&y).ok_or_else(|| {
                                Error::InvalidInput(format!("period {t}: successor {y:?} is not on the lattice"))
                            })?;
                            expected += p * value;
                        }
                        v += m.discount() * expected;
                    }
                    if best.as_ref().is_none_or(|(b, _)| v > *b) {
                        best = Some((v, a));
                    }
                }
                best.ok_or_else(|| Error::InvalidInput(format!("period {t}: state without actions")))
            })
            .collect::<Result<_>>()?;
        let index = states.iter().enumerate().map(|(i, x)| (state_key(x), i)).collect();
        let (values, actions) = solved.into_iter().unzip();
        tables.push(PeriodTable { period: t, states, values, actions, index });
    }
    tables.reverse();
    Ok(DpTables { tables })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcd::{Engine, PiecewiseReward, StageReward};
    use crate::mdp::ActionBox;
    use nalgebra::DMatrix;
    use rand::Rng;

    /// Scalar stock `x`, action = next stock in `0..=3`, noisy linear reward.
    fn toy_spec(horizon: usize, discount: f64) -> MdpSpec {
        MdpSpec::new(horizon, discount, vec![(0.0, 3.0), (0.0, 1.0)], ActionBox::new(vec![3]).unwrap(), vec![1.0, 0.5])
            .unwrap()
            .with_noise(|rng| vec![0.0, rng.random_range(0.0..1.0)])
            .with_transition(|_, xi| vec![0.0, xi[1]], |_, _| DMatrix::from_row_slice(2, 1, &[1.0, 0.0]))
            .with_reward(4.0, |_, x| {
                let (stock, price) = (x[0], x[1]);
                StageReward::PiecewiseLinear(PiecewiseReward {
                    constant: price * stock,
                    linear: vec![-0.4],
                    convex_terms: vec![vec![
                        crate::cuts::LinearCut { coefs: vec![0.1], constant: -0.1 * stock },
                        crate::cuts::LinearCut { coefs: vec![0.3], constant: -0.3 * stock },
                    ]],
                })
            })
    }

    fn quick_config(engine: Engine) -> FviConfig {
        FviConfig {
            state_samples: 40,
            transition_samples: 5,
            neurons: 4,
            train: TrainConfig { restarts: 2, max_epochs: 500, ..Default::default() },
            selection: McdConfig { engine, ..McdConfig::exact(engine, &ActionBox::new(vec![3]).unwrap()) },
            seed: 11,
        }
    }

    #[test]
    fn single_period_is_reward_maximum() {
        let spec = toy_spec(1, 0.9);
        let out = run_nnfvi(&spec, &quick_config(Engine::BruteForce)).unwrap();
        assert!(out.nets.is_empty());
        let best = (0..=3).map(|a| spec.reward(1, &spec.initial_state, &[a])).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.initial_value, best);
    }

    #[test]
    fn constant_reward_gives_geometric_sum() {
        let spec = toy_spec(4, 0.8).with_reward(2.0, |_, _| StageReward::constant(2.0));
        let out = run_nnfvi(&spec, &quick_config(Engine::Mcd)).unwrap();
        let oracle: f64 = (0..4).map(|k| 2.0 * 0.8f64.powi(k)).sum();
        assert!((out.initial_value - oracle).abs() < 1e-6, "{} vs {oracle}", out.initial_value);
    }

    #[test]
    fn zero_discount_drops_recourse() {
        let spec = toy_spec(3, 0.0);
        let net = ReluNet::new(2, vec![vec![1.0, 1.0]], vec![0.0], vec![5.0], 1.0).unwrap();
        let x = [2.0, 0.3];
        let cfg = McdConfig::exact(Engine::Mcd, &ActionBox::new(vec![3]).unwrap());
        let with = bellman_target(&spec, Some(&net), 1, &x, &[vec![0.0, 0.5]], &cfg).unwrap();
        let without = bellman_target(&spec, None, 1, &x, &[vec![0.0, 0.5]], &cfg).unwrap();
        assert_eq!(with.objective, without.objective);
    }

    #[test]
    fn engines_agree_on_targets() {
        let spec = toy_spec(3, 0.9);
        let mut rng = substream(3, &[]);
        let net = ReluNet::new(
            2,
            (0..6).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
            (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..6).map(|_| rng.random_range(-2.0..2.0)).collect(),
            0.3,
        )
        .unwrap();
        let b = ActionBox::new(vec![3]).unwrap();
        for _ in 0..20 {
            let x = spec.sample_state(&mut rng);
            let noises: Vec<_> = (0..4).map(|_| spec.sample_noise(&mut rng)).collect();
            let brute = bellman_target(&spec, Some(&net), 2, &x, &noises, &McdConfig::exact(Engine::BruteForce, &b)).unwrap();
            let mcd = bellman_target(&spec, Some(&net), 2, &x, &noises, &McdConfig::exact(Engine::Mcd, &b)).unwrap();
            assert!((brute.objective - mcd.objective).abs() <= 1e-6);
        }
    }

    #[test]
    fn reproducible_and_serializable() {
        let spec = toy_spec(3, 0.9);
        let a = run_nnfvi(&spec, &quick_config(Engine::Mcd)).unwrap();
        let b = run_nnfvi(&spec, &quick_config(Engine::Mcd)).unwrap();
        assert_eq!(a.initial_value.to_bits(), b.initial_value.to_bits());
        assert_eq!(a.nets.len(), 2);
        let back = FittedValueSet::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(a.fits.iter().all(|f| f.out_of_bounds == 0));
    }

    #[test]
    fn training_failure_names_period() {
        let spec = toy_spec(2, 0.9);
        let mut cfg = quick_config(Engine::BruteForce);
        cfg.train.step_shrink = 2.0;
        assert!(run_nnfvi(&spec, &cfg).is_err());
        cfg.train.step_shrink = 0.5;
        let spec = spec.with_reward(1.0, |_, _| StageReward::constant(f64::NAN));
        match run_nnfvi(&spec, &cfg) {
            Err(Error::PeriodTraining { period: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn greedy_policy_is_deterministic() {
        let spec = toy_spec(3, 0.9);
        let values = run_nnfvi(&spec, &quick_config(Engine::Mcd)).unwrap();
        let policy = GreedyPolicy::new(&spec, &values);
        let x = [2.0, 0.25];
        assert_eq!(policy.act(1, &x).unwrap(), policy.act(1, &x).unwrap());
        let last = policy.act(3, &x).unwrap();
        let best = (0..=3i64)
            .max_by(|&a, &b| spec.reward(3, &x, &[a]).total_cmp(&spec.reward(3, &x, &[b])).then(b.cmp(&a)))
            .unwrap();
        assert_eq!(last, vec![best]);
    }

    /// Inventory toy on `{0..3}`: deterministic or two-point noisy price.
    struct Toy {
        horizon: usize,
        prices: Vec<(f64, f64)>,
    }

    impl DiscreteMdp for Toy {
        fn horizon(&self) -> usize {
            self.horizon
        }
        fn discount(&self) -> f64 {
            0.9
        }
        fn state_count(&self, _: usize) -> u128 {
            4 * self.prices.len() as u128
        }
        fn states(&self, _: usize) -> Vec<Vec<f64>> {
            (0..4).flat_map(|k| self.prices.iter().map(move |&(p, _)| vec![k as f64, p])).collect()
        }
        fn actions(&self, _: usize, _: &[f64]) -> Vec<Vec<i64>> {
            (0..4).map(|a| vec![a]).collect()
        }
        fn reward(&self, t: usize, x: &[f64], a: &[i64]) -> f64 {
            let sold = x[0].min(1.0 + t as f64);
            x[1] * sold - 0.4 * a[0] as f64 - 0.2 * (a[0] as f64 - x[0]).abs()
        }
        fn transitions(&self, _: usize, _: &[f64], a: &[i64]) -> Vec<(f64, Vec<f64>)> {
            self.prices.iter().map(|&(p, q)| (q, vec![a[0] as f64, p])).collect()
        }
    }

    #[test]
    fn terminal_table_is_reward_maximum() {
        let toy = Toy { horizon: 1, prices: vec![(1.0, 0.5), (2.0, 0.5)] };
        let dp = exact_dp(&toy).unwrap();
        for x in toy.states(1) {
            let best = (0..4).map(|a| toy.reward(1, &x, &[a])).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(dp.value(1, &x).unwrap(), best);
        }
    }

    #[test]
    fn deterministic_kernel_matches_sequence_enumeration() {
        let toy = Toy { horizon: 2, prices: vec![(1.5, 1.0)] };
        let dp = exact_dp(&toy).unwrap();
        for x in toy.states(1) {
            let mut best = f64::NEG_INFINITY;
            for a1 in 0..4 {
                for a2 in 0..4 {
                    let v = toy.reward(1, &x, &[a1]) + 0.9 * toy.reward(2, &[a1 as f64, 1.5], &[a2]);
                    best = best.max(v);
                }
            }
            assert!((dp.value(1, &x).unwrap() - best).abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_lattice_is_refused() {
        struct Huge;
        impl DiscreteMdp for Huge {
            fn horizon(&self) -> usize {
                2
            }
            fn discount(&self) -> f64 {
                1.0
            }
            fn state_count(&self, _: usize) -> u128 {
                MAX_LATTICE_STATES + 1
            }
            fn states(&self, _: usize) -> Vec<Vec<f64>> {
                vec![vec![0.0]]
            }
            fn actions(&self, _: usize, _: &[f64]) -> Vec<Vec<i64>> {
                vec![vec![0]]
            }
            fn reward(&self, _: usize, _: &[f64], _: &[i64]) -> f64 {
                0.0
            }
            fn transitions(&self, _: usize, _: &[f64], _: &[i64]) -> Vec<(f64, Vec<f64>)> {
                Vec::new()
            }
        }
        let err = exact_dp(&Huge).unwrap_err();
        assert!(err.to_string().contains("O(|X|^2 x |K| x T)"));
        assert!(err.to_string().contains("1000001 states"));
    }

    #[test]
    fn dp_csv_has_one_row_per_state() {
        let toy = Toy { horizon: 2, prices: vec![(1.0, 0.5), (2.0, 0.5)] };
        let dp = exact_dp(&toy).unwrap();
        let mut w = csv::Writer::from_writer(Vec::new());
        dp.write_csv(&mut w).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().count(), 16);
    }
}
