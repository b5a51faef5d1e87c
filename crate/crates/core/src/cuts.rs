//! Recourse over a ReLU network and the cuts that over-estimate it.
//!
//! For a fixed state and `S2` noise draws, neuron `j` under scenario `s` has
//! preactivation `Γ1_js·a + Γ2_js`, affine in the action. The recourse is
//! `(1/S2) Σ_s Σ_j w_j·max(Γ1_js·a + Γ2_js, 0)`. Negative-weight neurons
//! contribute a concave piece bounded by tangents (gradient cuts);
//! positive-weight neurons are bounded by chords over the action box
//! (positive-neuron cuts). Integer optimality cuts close the remaining gap at
//! visited actions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ActionBox, MdpSpec};
use crate::neural::ReluNet;

/// `coefs·a + constant`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearCut {
    pub coefs: Vec<f64>,
    pub constant: f64,
}

impl LinearCut {
    pub fn zero(dims: usize) -> Self {
        Self { coefs: vec![0.0; dims], constant: 0.0 }
    }

    pub fn eval(&self, a: &[i64]) -> f64 {
        self.constant + self.coefs.iter().zip(a).map(|(c, &v)| c * v as f64).sum::<f64>()
    }

    pub fn eval_real(&self, a: &[f64]) -> f64 {
        self.constant + self.coefs.iter().zip(a).map(|(c, v)| c * v).sum::<f64>()
    }

    pub fn add(&self, other: &LinearCut) -> LinearCut {
        LinearCut {
            coefs: self.coefs.iter().zip(&other.coefs).map(|(a, b)| a + b).collect(),
            constant: self.constant + other.constant,
        }
    }

    fn add_scaled(&mut self, scale: f64, coefs: &[f64], constant: f64) {
        for (c, g) in self.coefs.iter_mut().zip(coefs) {
            *c += scale * g;
        }
        self.constant += scale * constant;
    }
}

/// Which output-weight sign class of neurons to include.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeuronClass {
    /// `w_j <= 0`: concave contributions.
    Negative,
    /// `w_j > 0`: convex contributions.
    Positive,
    All,
}

impl NeuronClass {
    fn admits(self, w: f64) -> bool {
        match self {
            NeuronClass::Negative => w <= 0.0,
            NeuronClass::Positive => w > 0.0,
            NeuronClass::All => true,
        }
    }
}

/// Per-scenario, per-neuron affine preactivations at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct RecourseContext {
    upper: Vec<i64>,
    weights: Vec<f64>,
    output_bias: f64,
    /// `[s][j]` action coefficients `u_jᵀB(x, ξ_s)`
    slopes: Vec<Vec<Vec<f64>>>,
    /// `[s][j]` offsets `u_jᵀA(x, ξ_s) + u0_j`
    offsets: Vec<Vec<f64>>,
}

const AFFINITY_TOL: f64 = 1e-8;

impl RecourseContext {
    /// Builds the context for `net` at state `x`, using `action_box` as the
    /// action range and `noises` as the scenario draws.
    ///
    /// Re-evaluates the network on clamped transitions at the box corners
    /// `0` and `ā`; if clamping has broken affinity the context is refused.
    pub fn new(spec: &MdpSpec, action_box: &ActionBox, net: &ReluNet, x: &[f64], noises: &[Vec<f64>]) -> Result<Self> {
        if net.inputs() != spec.state_dim() {
            return Err(Error::DimensionMismatch { expected: spec.state_dim(), got: net.inputs() });
        }
        if noises.is_empty() {
            return Err(Error::InvalidInput("recourse needs at least one noise draw".into()));
        }
        let n2 = action_box.dims();
        let (u, u0) = (net.input_weights(), net.input_biases());
        let mut slopes = Vec::with_capacity(noises.len());
        let mut offsets = Vec::with_capacity(noises.len());
        for xi in noises {
            let a = spec.offset(x, xi);
            let b = spec.linear(x, xi);
            if b.nrows() != spec.state_dim() || b.ncols() != n2 {
                return Err(Error::DimensionMismatch { expected: n2, got: b.ncols() });
            }
            let mut sl = Vec::with_capacity(net.neurons());
            let mut of = Vec::with_capacity(net.neurons());
            for j in 0..net.neurons() {
                sl.push((0..n2).map(|n| (0..spec.state_dim()).map(|i| u[j][i] * b[(i, n)]).sum()).collect());
                of.push(u[j].iter().zip(&a).map(|(p, q)| p * q).sum::<f64>() + u0[j]);
            }
            slopes.push(sl);
            offsets.push(of);
        }
        let ctx = Self {
            upper: action_box.upper().to_vec(),
            weights: net.output_weights().to_vec(),
            output_bias: net.output_bias(),
            slopes,
            offsets,
        };
        for corner in [action_box.zero(), action_box.upper().to_vec()] {
            for (s, xi) in noises.iter().enumerate() {
                let af: Vec<f64> = corner.iter().map(|&v| v as f64).collect();
                let mut next = spec.transition_unclamped(x, &af, xi);
                spec.clamp(&mut next);
                for j in 0..net.neurons() {
                    let deviation = (net.preactivation(j, &next) - ctx.preactivation(s, j, &corner)).abs();
                    if deviation > AFFINITY_TOL * (1.0 + ctx.offsets[s][j].abs()) {
                        return Err(Error::NotAffine { deviation });
                    }
                }
            }
        }
        Ok(ctx)
    }

    /// A context from explicit affine forms, `slopes[s][j]` and `offsets[s][j]`.
    pub fn from_affine_forms(
        upper: Vec<i64>,
        weights: Vec<f64>,
        output_bias: f64,
        slopes: Vec<Vec<Vec<f64>>>,
        offsets: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let j = weights.len();
        if slopes.len() != offsets.len() || slopes.is_empty() && j > 0 {
            return Err(Error::InvalidInput("one slope and offset table per scenario required".into()));
        }
        for (sl, of) in slopes.iter().zip(&offsets) {
            if sl.len() != j || of.len() != j {
                return Err(Error::DimensionMismatch { expected: j, got: sl.len().min(of.len()) });
            }
            if let Some(row) = sl.iter().find(|r| r.len() != upper.len()) {
                return Err(Error::DimensionMismatch { expected: upper.len(), got: row.len() });
            }
        }
        ActionBox::new(upper.clone())?;
        Ok(Self { upper, weights, output_bias, slopes, offsets })
    }

    /// The context of the last period: no network, zero recourse.
    pub fn terminal(action_box: &ActionBox) -> Self {
        Self {
            upper: action_box.upper().to_vec(),
            weights: Vec::new(),
            output_bias: 0.0,
            slopes: vec![Vec::new()],
            offsets: vec![Vec::new()],
        }
    }

    pub fn action_upper(&self) -> &[i64] {
        &self.upper
    }

    pub fn dims(&self) -> usize {
        self.upper.len()
    }

    pub fn scenarios(&self) -> usize {
        self.slopes.len()
    }

    pub fn neurons(&self) -> usize {
        self.weights.len()
    }

    pub fn output_weights(&self) -> &[f64] {
        &self.weights
    }

    /// `w0` of the next-period network; zero for the terminal context.
    pub fn output_bias(&self) -> f64 {
        self.output_bias
    }

    pub fn slope(&self, s: usize, j: usize) -> &[f64] {
        &self.slopes[s][j]
    }

    pub fn offset(&self, s: usize, j: usize) -> f64 {
        self.offsets[s][j]
    }

    pub fn preactivation(&self, s: usize, j: usize, a: &[i64]) -> f64 {
        self.offsets[s][j] + self.slopes[s][j].iter().zip(a).map(|(g, &v)| g * v as f64).sum::<f64>()
    }

    /// Minimum and maximum preactivation of neuron `j` under scenario `s`
    /// over the action box.
    pub fn preactivation_range(&self, s: usize, j: usize) -> (f64, f64) {
        let c = self.offsets[s][j];
        let (mut lo, mut hi) = (c, c);
        for (g, &u) in self.slopes[s][j].iter().zip(&self.upper) {
            let span = g * u as f64;
            if span < 0.0 {
                lo += span;
            } else {
                hi += span;
            }
        }
        (lo, hi)
    }

    /// `(1/S2) Σ_s Σ_j w_j·max(preactivation, 0)`, without `w0`.
    pub fn recourse_value(&self, a: &[i64]) -> f64 {
        self.partial_recourse(a, NeuronClass::All)
    }

    pub fn partial_recourse(&self, a: &[i64], class: NeuronClass) -> f64 {
        let mut total = 0.0;
        for s in 0..self.scenarios() {
            for (j, &w) in self.weights.iter().enumerate() {
                if class.admits(w) {
                    total += w * self.preactivation(s, j, a).max(0.0);
                }
            }
        }
        total / self.scenarios() as f64
    }

    /// Tangent cut on the negative-weight neurons at `anchor`; exact there.
    pub fn gradient_cut(&self, anchor: &[i64]) -> LinearCut {
        let mut cut = LinearCut::zero(self.dims());
        let scale = 1.0 / self.scenarios() as f64;
        for s in 0..self.scenarios() {
            for (j, &w) in self.weights.iter().enumerate() {
                if w <= 0.0 && self.preactivation(s, j, anchor) > 0.0 {
                    cut.add_scaled(scale * w, &self.slopes[s][j], self.offsets[s][j]);
                }
            }
        }
        cut
    }

    /// Ratio `max / Σ|Γ1|·ā` used by the chord of a neuron whose
    /// preactivation changes sign over the box; `None` otherwise.
    pub fn mixed_ratio(&self, s: usize, j: usize) -> Option<f64> {
        let (lo, hi) = self.preactivation_range(s, j);
        let width = self.range_width(s, j);
        (width > 0.0 && lo <= 0.0 && hi >= 0.0).then(|| hi / width)
    }

    fn range_width(&self, s: usize, j: usize) -> f64 {
        self.slopes[s][j].iter().zip(&self.upper).map(|(g, &u)| g.abs() * u as f64).sum()
    }

    /// Line over-estimating `max(preactivation, 0)` of neuron `j` under
    /// scenario `s` on the whole box; not scaled by `w_j`.
    pub fn neuron_chord(&self, s: usize, j: usize) -> LinearCut {
        let (lo, hi) = self.preactivation_range(s, j);
        let g = &self.slopes[s][j];
        let c = self.offsets[s][j];
        if self.range_width(s, j) == 0.0 {
            return LinearCut { coefs: vec![0.0; self.dims()], constant: c.max(0.0) };
        }
        if lo > 0.0 {
            return LinearCut { coefs: g.clone(), constant: c };
        }
        if hi < 0.0 {
            return LinearCut::zero(self.dims());
        }
        let ratio = self.mixed_ratio(s, j).expect("mixed case");
        // ratio·(preactivation − lo), with lo − c the negative part of the slope span
        LinearCut { coefs: g.iter().map(|v| ratio * v).collect(), constant: -ratio * (lo - c) }
    }

    /// Chord cut on the positive-weight neurons; independent of any anchor.
    pub fn positive_cut(&self) -> LinearCut {
        let mut cut = LinearCut::zero(self.dims());
        let scale = 1.0 / self.scenarios() as f64;
        for s in 0..self.scenarios() {
            for (j, &w) in self.weights.iter().enumerate() {
                if w > 0.0 {
                    let chord = self.neuron_chord(s, j);
                    cut.add_scaled(scale * w, &chord.coefs, chord.constant);
                }
            }
        }
        cut
    }

    /// Gradient cut at `anchor` plus the positive-neuron cut.
    pub fn combined_cut(&self, anchor: &[i64]) -> LinearCut {
        self.gradient_cut(anchor).add(&self.positive_cut())
    }

    /// Upper bound on the recourse over the box: every positive neuron at
    /// its own maximum, negative neurons at zero.
    pub fn recourse_upper_bound(&self) -> f64 {
        let mut total = 0.0;
        for s in 0..self.scenarios() {
            for (j, &w) in self.weights.iter().enumerate() {
                if w > 0.0 {
                    total += w * self.preactivation_range(s, j).1.max(0.0);
                }
            }
        }
        total / self.scenarios() as f64
    }
}

/// Binary expansion `a_n = Σ_l 2^l·α_nl` with bits `l ∈ {0..=L_n}`, `L_n`
/// the smallest integer with `ā_n <= 2^L_n`; dimensions with `ā_n = 0` get
/// no bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryEncoding {
    upper: Vec<i64>,
    bits: Vec<usize>,
    offsets: Vec<usize>,
}

impl BinaryEncoding {
    pub fn new(action_box: &ActionBox) -> Self {
        let upper = action_box.upper().to_vec();
        let bits: Vec<usize> = upper
            .iter()
            .map(|&u| if u == 0 { 0 } else { (u as u64).next_power_of_two().trailing_zeros() as usize + 1 })
            .collect();
        let mut offsets = Vec::with_capacity(bits.len());
        let mut total = 0;
        for &b in &bits {
            offsets.push(total);
            total += b;
        }
        Self { upper, bits, offsets }
    }

    /// Total number of bits.
    pub fn len(&self) -> usize {
        self.bits.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.bits.len()
    }

    pub fn upper(&self) -> &[i64] {
        &self.upper
    }

    /// Number of bits of dimension `n`, i.e. `L_n + 1` (or 0).
    pub fn bits(&self, n: usize) -> usize {
        self.bits[n]
    }

    /// Index of bit `l` of dimension `n` in the flat bit vector.
    pub fn index(&self, n: usize, l: usize) -> usize {
        self.offsets[n] + l
    }

    /// `(dimension, 2^l)` for each flat bit index.
    pub fn weights(&self) -> Vec<(usize, f64)> {
        (0..self.dims()).flat_map(|n| (0..self.bits[n]).map(move |l| (n, (1u64 << l) as f64))).collect()
    }

    /// Whether the bit range of dimension `n` can exceed `ā_n`.
    pub fn needs_bound_row(&self, n: usize) -> bool {
        self.bits[n] > 0 && (1i64 << self.bits[n]) - 1 > self.upper[n]
    }

    pub fn encode(&self, a: &[i64]) -> Vec<u8> {
        let mut out = vec![0u8; self.len()];
        for n in 0..self.dims() {
            for l in 0..self.bits[n] {
                out[self.offsets[n] + l] = ((a[n] >> l) & 1) as u8;
            }
        }
        out
    }

    /// Decodes a bit vector, rounding each entry to 0 or 1.
    pub fn decode(&self, alpha: &[f64]) -> Vec<i64> {
        (0..self.dims())
            .map(|n| (0..self.bits[n]).map(|l| (alpha[self.offsets[n] + l].round() as i64) << l).sum())
            .collect()
    }
}

/// Bits set and unset in the encoding of `anchor`.
pub fn zeta_terms(enc: &BinaryEncoding, anchor: &[i64]) -> (Vec<usize>, Vec<usize>) {
    let bits = enc.encode(anchor);
    let ones = (0..bits.len()).filter(|&k| bits[k] == 1).collect();
    let zeros = (0..bits.len()).filter(|&k| bits[k] == 0).collect();
    (ones, zeros)
}

/// `η <= v(anchor) + ζ(a)·(η̄ − v(anchor))` with `ζ` the Hamming distance
/// between the encodings of `a` and the anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegerOptimalityCut {
    pub anchor: Vec<i64>,
    pub anchor_value: f64,
    pub ones: Vec<usize>,
    pub zeros: Vec<usize>,
    pub upper: f64,
}

impl IntegerOptimalityCut {
    pub fn new(enc: &BinaryEncoding, anchor: &[i64], anchor_value: f64, upper: f64) -> Result<Self> {
        if upper < anchor_value - 1e-9 * anchor_value.abs().max(1.0) {
            return Err(Error::CutBound { upper, anchor: anchor_value });
        }
        let (ones, zeros) = zeta_terms(enc, anchor);
        Ok(Self { anchor: anchor.to_vec(), anchor_value, ones, zeros, upper: upper.max(anchor_value) })
    }

    pub fn zeta(&self, alpha: &[f64]) -> f64 {
        let on: f64 = self.ones.iter().map(|&k| alpha[k]).sum();
        let off: f64 = self.zeros.iter().map(|&k| alpha[k]).sum();
        self.ones.len() as f64 - (on - off)
    }

    pub fn rhs(&self, enc: &BinaryEncoding, a: &[i64]) -> f64 {
        let alpha: Vec<f64> = enc.encode(a).into_iter().map(f64::from).collect();
        self.anchor_value + self.zeta(&alpha) * (self.upper - self.anchor_value)
    }
}

/// Cuts accumulated during one action selection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CutPool {
    pub upper: f64,
    pub positive: Option<LinearCut>,
    pub combined: Vec<LinearCut>,
    pub integer: Vec<IntegerOptimalityCut>,
}
