//! Finite-horizon MDPs with transitions affine in an integer action.
//!
//! A state `x` is a real vector inside a box, an action `a` is an integer
//! vector with `0 <= a <= ā`, and the next state is
//! `f(x, a, ξ) = A(x, ξ) + B(x, ξ)·a` for a random draw `ξ`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcd::StageReward;
use crate::rng::SimRng;

pub type Action = Vec<i64>;
pub type Noise = Vec<f64>;

/// Default limit on the number of actions [`enumerate_actions`] will list.
pub const DEFAULT_ENUMERATION_CAP: u128 = 10_000_000;

/// The integer action box `{a ∈ Z^n : 0 <= a <= ā}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<i64>", into = "Vec<i64>")]
pub struct ActionBox {
    upper: Vec<i64>,
}

impl TryFrom<Vec<i64>> for ActionBox {
    type Error = Error;

    fn try_from(upper: Vec<i64>) -> Result<Self> {
        Self::new(upper)
    }
}

impl From<ActionBox> for Vec<i64> {
    fn from(b: ActionBox) -> Self {
        b.upper
    }
}

impl ActionBox {
    pub fn new(upper: Vec<i64>) -> Result<Self> {
        if upper.is_empty() {
            return Err(Error::InvalidInput("action box needs at least one dimension".into()));
        }
        if let Some(n) = upper.iter().position(|&u| u < 0) {
            return Err(Error::InvalidInput(format!(
                "action upper bound {} in dimension {n} is negative",
                upper[n]
            )));
        }
        Ok(Self { upper })
    }

    /// The box `{0}` in `dims` dimensions.
    pub fn singleton(dims: usize) -> Self {
        Self { upper: vec![0; dims.max(1)] }
    }

    pub fn dims(&self) -> usize {
        self.upper.len()
    }

    pub fn upper(&self) -> &[i64] {
        &self.upper
    }

    /// Number of actions `∏(ā_n + 1)`, saturating.
    pub fn count(&self) -> u128 {
        self.upper
            .iter()
            .fold(1u128, |acc, &u| acc.saturating_mul(u as u128 + 1))
    }

    pub fn zero(&self) -> Action {
        vec![0; self.dims()]
    }

    pub fn contains(&self, a: &[i64]) -> bool {
        self.check(a).is_ok()
    }

    /// Rejects actions outside the box, naming the first violated bound.
    pub fn check(&self, a: &[i64]) -> Result<()> {
        if a.len() != self.dims() {
            return Err(Error::DimensionMismatch { expected: self.dims(), got: a.len() });
        }
        for (dim, (&value, &bound)) in a.iter().zip(&self.upper).enumerate() {
            if value < 0 || value > bound {
                return Err(Error::InfeasibleAction { dim, value, bound });
            }
        }
        Ok(())
    }

    /// Lexicographic iterator over all actions (last component fastest).
    pub fn iter(&self) -> ActionIter<'_> {
        ActionIter { upper: &self.upper, next: Some(self.zero()) }
    }
}

impl fmt::Display for ActionBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[0, {:?}]", self.upper)
    }
}

pub struct ActionIter<'a> {
    upper: &'a [i64],
    next: Option<Action>,
}

impl Iterator for ActionIter<'_> {
    type Item = Action;

    fn next(&mut self) -> Option<Action> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut pos = succ.len();
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            if succ[pos] < self.upper[pos] {
                succ[pos] += 1;
                self.next = Some(succ);
                break;
            }
            succ[pos] = 0;
        }
        Some(current)
    }
}

/// Lists every action of the box in lexicographic order.
pub fn enumerate_actions(action_box: &ActionBox, cap: u128) -> Result<Vec<Action>> {
    let count = action_box.count();
    if count > cap {
        return Err(Error::EnumerationCap { count, cap });
    }
    Ok(action_box.iter().collect())
}

/// A sampled state for period `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSample {
    pub period: usize,
    pub state: Vec<f64>,
}

type NoiseFn = dyn Fn(&mut SimRng) -> Noise + Send + Sync;
type OffsetFn = dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync;
type LinearFn = dyn Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync;
type RewardFn = dyn Fn(usize, &[f64]) -> StageReward + Send + Sync;
type StateSamplerFn = dyn Fn(&mut SimRng) -> Vec<f64> + Send + Sync;

/// A finite-horizon MDP with affine-in-action transitions.
///
/// Periods are numbered `1..=horizon`. The reward is supplied per
/// `(period, state)` as a [`StageReward`], a function of the action that the
/// action-selection engines can either evaluate or linearise.
#[derive(Clone)]
pub struct MdpSpec {
    pub horizon: usize,
    pub discount: f64,
    pub state_bounds: Vec<(f64, f64)>,
    pub action_box: ActionBox,
    /// Replaces `action_box` in the last period when set.
    pub terminal_action_box: Option<ActionBox>,
    pub initial_state: Vec<f64>,
    /// Declared bound `r_max` on `|r_t(x, a)|`.
    pub reward_bound: f64,
    noise: Arc<NoiseFn>,
    offset: Arc<OffsetFn>,
    linear: Arc<LinearFn>,
    reward: Arc<RewardFn>,
    state_sampler: Option<Arc<StateSamplerFn>>,
}

impl fmt::Debug for MdpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MdpSpec")
            .field("horizon", &self.horizon)
            .field("discount", &self.discount)
            .field("state_bounds", &self.state_bounds)
            .field("action_box", &self.action_box)
            .field("terminal_action_box", &self.terminal_action_box)
            .field("initial_state", &self.initial_state)
            .field("reward_bound", &self.reward_bound)
            .finish_non_exhaustive()
    }
}

impl MdpSpec {
    /// Builds a spec; transitions default to `A = x` clamped, `B = 0`, and the
    /// reward to zero. Use the `with_*` methods to fill in the model.
    pub fn new(
        horizon: usize,
        discount: f64,
        state_bounds: Vec<(f64, f64)>,
        action_box: ActionBox,
        initial_state: Vec<f64>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidInput("horizon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&discount) {
            return Err(Error::InvalidInput(format!("discount {discount} outside [0, 1]")));
        }
        if let Some((lo, hi)) = state_bounds.iter().find(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::InvalidInput(format!("bad state interval [{lo}, {hi}]")));
        }
        if initial_state.len() != state_bounds.len() {
            return Err(Error::DimensionMismatch { expected: state_bounds.len(), got: initial_state.len() });
        }
        let n2 = action_box.dims();
        Ok(Self {
            horizon,
            discount,
            state_bounds,
            action_box,
            terminal_action_box: None,
            initial_state,
            reward_bound: 0.0,
            noise: Arc::new(|_| Vec::new()),
            offset: Arc::new(|x, _| x.to_vec()),
            linear: Arc::new(move |x, _| DMatrix::zeros(x.len(), n2)),
            reward: Arc::new(|_, _| StageReward::constant(0.0)),
            state_sampler: None,
        })
    }

    pub fn with_noise(mut self, f: impl Fn(&mut SimRng) -> Noise + Send + Sync + 'static) -> Self {
        self.noise = Arc::new(f);
        self
    }

    /// Sets `A(x, ξ)` and `B(x, ξ)`.
    pub fn with_transition(
        mut self,
        offset: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        linear: impl Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.offset = Arc::new(offset);
        self.linear = Arc::new(linear);
        self
    }

    pub fn with_reward(
        mut self,
        reward_bound: f64,
        f: impl Fn(usize, &[f64]) -> StageReward + Send + Sync + 'static,
    ) -> Self {
        self.reward_bound = reward_bound;
        self.reward = Arc::new(f);
        self
    }

    pub fn with_terminal_action_box(mut self, b: ActionBox) -> Self {
        self.terminal_action_box = Some(b);
        self
    }

    /// Replaces the default uniform state distribution.
    pub fn with_state_sampler(mut self, f: impl Fn(&mut SimRng) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.state_sampler = Some(Arc::new(f));
        self
    }

    pub fn state_dim(&self) -> usize {
        self.state_bounds.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_box.dims()
    }

    pub fn action_box_at(&self, period: usize) -> &ActionBox {
        match &self.terminal_action_box {
            Some(b) if period == self.horizon => b,
            _ => &self.action_box,
        }
    }

    pub fn sample_noise(&self, rng: &mut SimRng) -> Noise {
        (self.noise)(rng)
    }

    /// `A(x, ξ)`.
    pub fn offset(&self, x: &[f64], noise: &[f64]) -> Vec<f64> {
        (self.offset)(x, noise)
    }

    /// `B(x, ξ)`, an `N1 × N2` matrix.
    pub fn linear(&self, x: &[f64], noise: &[f64]) -> DMatrix<f64> {
        (self.linear)(x, noise)
    }

    pub fn stage_reward(&self, period: usize, x: &[f64]) -> StageReward {
        (self.reward)(period, x)
    }

    pub fn reward(&self, period: usize, x: &[f64], a: &[i64]) -> f64 {
        self.stage_reward(period, x).evaluate(a)
    }

    /// `A + B·a` without clamping to the state bounds.
    pub fn transition_unclamped(&self, x: &[f64], a: &[f64], noise: &[f64]) -> Vec<f64> {
        let offset = self.offset(x, noise);
        let b = self.linear(x, noise);
        offset
            .iter()
            .enumerate()
            .map(|(i, &o)| o + (0..b.ncols()).map(|n| b[(i, n)] * a[n]).sum::<f64>())
            .collect()
    }

    /// The next state `A(x, ξ) + B(x, ξ)·a`, clamped to the state bounds.
    pub fn affine_transition(&self, x: &[f64], a: &[i64], noise: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch { expected: self.state_dim(), got: x.len() });
        }
        self.action_box.check(a)?;
        let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let mut next = self.transition_unclamped(x, &af, noise);
        self.clamp(&mut next);
        Ok(next)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, &(lo, hi)) in x.iter_mut().zip(&self.state_bounds) {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn sample_state(&self, rng: &mut SimRng) -> Vec<f64> {
        match &self.state_sampler {
            Some(f) => f(rng),
            None => self
                .state_bounds
                .iter()
                .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
                .collect(),
        }
    }

    /// Draws `count` i.i.d. states for `period`.
    pub fn sample_states(&self, period: usize, count: usize, rng: &mut SimRng) -> Vec<StateSample> {
        (0..count)
            .map(|_| StateSample { period, state: self.sample_state(rng) })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_spec() -> MdpSpec {
        // N1 = 2, N2 = 2: A = (x0 + ξ, x1), B = [[1, 2], [-1, 0.5]]
        MdpSpec::new(3, 0.9, vec![(-100.0, 100.0); 2], ActionBox::new(vec![3, 3]).unwrap(), vec![0.0, 0.0])
            .unwrap()
            .with_noise(|rng| vec![rng.random_range(-1.0..1.0)])
            .with_transition(
                |x, xi| vec![x[0] + xi[0], x[1]],
                |_, _| DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]),
            )
    }

    #[test]
    fn zero_linear_part_returns_offset() {
        let spec = MdpSpec::new(1, 0.5, vec![(0.0, 10.0)], ActionBox::new(vec![4]).unwrap(), vec![1.0])
            .unwrap()
            .with_transition(|x, _| vec![x[0] + 1.0], |_, _| DMatrix::zeros(1, 1));
        for a in 0..=4 {
            assert_eq!(spec.affine_transition(&[2.0], &[a], &[]).unwrap(), vec![3.0]);
        }
    }

    #[test]
    fn zero_action_returns_offset() {
        let spec = toy_spec();
        let x = [1.5, -2.0];
        let xi = [0.25];
        assert_eq!(spec.affine_transition(&x, &[0, 0], &xi).unwrap(), spec.offset(&x, &xi));
    }

    #[test]
    fn matches_hand_expansion() {
        let spec = toy_spec();
        let mut rng = substream(11, &[]);
        for _ in 0..50 {
            let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let xi = spec.sample_noise(&mut rng);
            let a = [rng.random_range(0..=3), rng.random_range(0..=3)];
            let got = spec.affine_transition(&x, &a, &xi).unwrap();
            let want = [
                x[0] + xi[0] + a[0] as f64 + 2.0 * a[1] as f64,
                x[1] - a[0] as f64 + 0.5 * a[1] as f64,
            ];
            assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_action_names_bound() {
        let spec = toy_spec();
        let err = spec.affine_transition(&[0.0, 0.0], &[1, 4], &[0.0]).unwrap_err();
        match err {
            Error::InfeasibleAction { dim, value, bound } => assert_eq!((dim, value, bound), (1, 4, 3)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(spec.affine_transition(&[0.0, 0.0], &[-1, 0], &[0.0]).is_err());
    }

    #[test]
    fn transitions_are_clamped() {
        let spec = MdpSpec::new(1, 0.5, vec![(0.0, 1.0)], ActionBox::new(vec![5]).unwrap(), vec![0.0])
            .unwrap()
            .with_transition(|x, _| x.to_vec(), |_, _| DMatrix::from_element(1, 1, 1.0));
        assert_eq!(spec.affine_transition(&[0.5], &[5], &[]).unwrap(), vec![1.0]);
    }

    #[test]
    fn enumeration_small_boxes() {
        let b = ActionBox::new(vec![1, 1]).unwrap();
        assert_eq!(
            enumerate_actions(&b, DEFAULT_ENUMERATION_CAP).unwrap(),
            vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]
        );
        let b = ActionBox::new(vec![0, 0, 0]).unwrap();
        assert_eq!(enumerate_actions(&b, DEFAULT_ENUMERATION_CAP).unwrap(), vec![vec![0, 0, 0]]);
    }

    #[test]
    fn five_facilities_of_ten_levels() {
        let b = ActionBox::new(vec![9; 5]).unwrap();
        assert_eq!(b.count(), 100_000);
        assert_eq!(enumerate_actions(&b, DEFAULT_ENUMERATION_CAP).unwrap().len(), 100_000);
    }

    #[test]
    fn enumeration_cap_refuses() {
        let b = ActionBox::new(vec![9; 8]).unwrap();
        let err = enumerate_actions(&b, DEFAULT_ENUMERATION_CAP).unwrap_err();
        assert!(matches!(err, Error::EnumerationCap { count: 100_000_000, .. }));
        assert!(err.to_string().contains("mcd"));
    }

    #[test]
    fn degenerate_bounds_give_single_point() {
        let spec = MdpSpec::new(1, 0.5, vec![(2.5, 2.5); 3], ActionBox::singleton(1), vec![2.5; 3]).unwrap();
        let mut rng = substream(0, &[]);
        let s = spec.sample_states(4, 1, &mut rng);
        assert_eq!(s, vec![StateSample { period: 4, state: vec![2.5; 3] }]);
    }

    #[test]
    fn sampling_is_seeded() {
        let spec = toy_spec();
        let a = spec.sample_states(1, 20, &mut substream(5, &[1]));
        let b = spec.sample_states(1, 20, &mut substream(5, &[1]));
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_sampling_mean() {
        let spec = MdpSpec::new(1, 0.5, vec![(0.0, 1.0); 2], ActionBox::singleton(1), vec![0.0; 2]).unwrap();
        let s = spec.sample_states(1, 10_000, &mut substream(99, &[]));
        for d in 0..2 {
            let mean = s.iter().map(|v| v.state[d]).sum::<f64>() / s.len() as f64;
            assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        }
    }

    #[test]
    fn reward_bound_holds_on_random_inputs() {
        let spec = toy_spec().with_reward(10.0, |_, x| {
            let base = (x[0].sin() * 3.0).clamp(-3.0, 3.0);
            StageReward::callback(move |a| base + a.iter().map(|&v| v as f64).sum::<f64>())
        });
        let mut rng = substream(3, &[]);
        for _ in 0..10_000 {
            let t = rng.random_range(1..=spec.horizon);
            let x = spec.sample_state(&mut rng);
            let a = [rng.random_range(0..=3), rng.random_range(0..=3)];
            assert!(spec.reward(t, &x, &a).abs() <= spec.reward_bound);
        }
    }

    proptest! {
        #[test]
        fn transition_is_affine_in_action(
            x0 in -5.0..5.0f64, x1 in -5.0..5.0f64, xi in -1.0..1.0f64,
            a in proptest::collection::vec(0.0..3.0f64, 2),
            b in proptest::collection::vec(0.0..3.0f64, 2),
            lambda in 0.0..1.0f64,
        ) {
            let spec = toy_spec();
            let x = [x0, x1];
            let mix: Vec<f64> = a.iter().zip(&b).map(|(p, q)| lambda * p + (1.0 - lambda) * q).collect();
            let fm = spec.transition_unclamped(&x, &mix, &[xi]);
            let fa = spec.transition_unclamped(&x, &a, &[xi]);
            let fb = spec.transition_unclamped(&x, &b, &[xi]);
            for i in 0..2 {
                let want = lambda * fa[i] + (1.0 - lambda) * fb[i];
                prop_assert!((fm[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }

        #[test]
        fn enumeration_is_complete(upper in proptest::collection::vec(0i64..4, 1..4)) {
            let b = ActionBox::new(upper).unwrap();
            let all = enumerate_actions(&b, DEFAULT_ENUMERATION_CAP).unwrap();
            prop_assert_eq!(all.len() as u128, b.count());
            prop_assert!(all.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(all.iter().all(|a| b.contains(a)));
        }
    }
}
