//! Two-layer ReLU value approximators.
//!
//! `Ṽ(x) = Σ_j w_j·max(u_jᵀx + u0_j, 0) + w0`, trained by minimising the
//! regularised mean squared error
//! `(1/S)·Σ_s (Ṽ(x_s) − y_s)² + (β/2)·‖θ‖²` over all weights `θ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, SimRng};

/// A single-hidden-layer ReLU network with scalar output.
///
/// Serialized as `{"N1", "J", "u", "u0", "w", "w0"}` with `u` a `J × N1`
/// array of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetRecord", into = "NetRecord")]
pub struct ReluNet {
    inputs: usize,
    u: Vec<Vec<f64>>,
    u0: Vec<f64>,
    w: Vec<f64>,
    w0: f64,
}

#[derive(Serialize, Deserialize)]
struct NetRecord {
    #[serde(rename = "N1")]
    n1: usize,
    #[serde(rename = "J")]
    j: usize,
    u: Vec<Vec<f64>>,
    u0: Vec<f64>,
    w: Vec<f64>,
    w0: f64,
}

impl TryFrom<NetRecord> for ReluNet {
    type Error = Error;

    fn try_from(r: NetRecord) -> Result<Self> {
        if r.u.len() != r.j {
            return Err(Error::DimensionMismatch { expected: r.j, got: r.u.len() });
        }
        ReluNet::new(r.n1, r.u, r.u0, r.w, r.w0)
    }
}

impl From<ReluNet> for NetRecord {
    fn from(n: ReluNet) -> Self {
        NetRecord { n1: n.inputs, j: n.w.len(), u: n.u, u0: n.u0, w: n.w, w0: n.w0 }
    }
}

impl ReluNet {
    pub fn new(inputs: usize, u: Vec<Vec<f64>>, u0: Vec<f64>, w: Vec<f64>, w0: f64) -> Result<Self> {
        let j = w.len();
        if j == 0 {
            return Err(Error::InvalidInput("network needs at least one neuron".into()));
        }
        if u.len() != j || u0.len() != j {
            return Err(Error::DimensionMismatch { expected: j, got: u.len().min(u0.len()) });
        }
        if let Some(row) = u.iter().find(|row| row.len() != inputs) {
            return Err(Error::DimensionMismatch { expected: inputs, got: row.len() });
        }
        let finite = u.iter().flatten().chain(&u0).chain(&w).all(|v| v.is_finite()) && w0.is_finite();
        if !finite {
            return Err(Error::InvalidInput("network weights must be finite".into()));
        }
        Ok(Self { inputs, u, u0, w, w0 })
    }

    /// A net whose output is the constant `w0` everywhere.
    pub fn constant(inputs: usize, neurons: usize, w0: f64) -> Self {
        Self {
            inputs,
            u: vec![vec![0.0; inputs]; neurons.max(1)],
            u0: vec![0.0; neurons.max(1)],
            w: vec![0.0; neurons.max(1)],
            w0,
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn neurons(&self) -> usize {
        self.w.len()
    }

    pub fn input_weights(&self) -> &[Vec<f64>] {
        &self.u
    }

    pub fn input_biases(&self) -> &[f64] {
        &self.u0
    }

    pub fn output_weights(&self) -> &[f64] {
        &self.w
    }

    pub fn output_bias(&self) -> f64 {
        self.w0
    }

    /// Preactivation `u_jᵀx + u0_j` of neuron `j`.
    #[inline]
    pub fn preactivation(&self, j: usize, x: &[f64]) -> f64 {
        self.u[j].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.u0[j]
    }

    /// Network output; panics in debug builds on a dimension mismatch.
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.inputs);
        (0..self.neurons())
            .map(|j| self.w[j] * self.preactivation(j, x).max(0.0))
            .sum::<f64>()
            + self.w0
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.inputs {
            return Err(Error::DimensionMismatch { expected: self.inputs, got: x.len() });
        }
        Ok(self.eval(x))
    }

    /// Number of adjustable weights: `J·(N1 + 2) + 1`.
    pub fn param_count(&self) -> usize {
        self.neurons() * (self.inputs + 2) + 1
    }

    /// Weights flattened as `[u (row-major), u0, w, w0]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend(self.u.iter().flatten());
        p.extend(&self.u0);
        p.extend(&self.w);
        p.push(self.w0);
        p
    }

    /// Inverse of [`ReluNet::params`] for a net of the same shape.
    pub fn with_params(&self, p: &[f64]) -> Self {
        assert_eq!(p.len(), self.param_count());
        let (j, n) = (self.neurons(), self.inputs);
        let u = p[..j * n].chunks(n.max(1)).take(j).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let u = if n == 0 { vec![Vec::new(); j] } else { u };
        Self {
            inputs: n,
            u,
            u0: p[j * n..j * n + j].to_vec(),
            w: p[j * n + j..j * n + 2 * j].to_vec(),
            w0: p[j * n + 2 * j],
        }
    }
}

/// Sampled states paired with their Bellman targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSet {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl RegressionSet {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidInput("regression set is empty".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch { expected: inputs.len(), got: targets.len() });
        }
        let dim = inputs[0].len();
        if let Some(x) = inputs.iter().find(|x| x.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
        }
        if !inputs.iter().flatten().chain(&targets).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("regression data must be finite".into()));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

/// Regularised mean squared error of `net` on `data`.
pub fn loss(net: &ReluNet, data: &RegressionSet, beta: f64) -> f64 {
    let mse = data
        .inputs
        .iter()
        .zip(&data.targets)
        .map(|(x, y)| (net.eval(x) - y).powi(2))
        .sum::<f64>()
        / data.len() as f64;
    let reg = net.params().iter().map(|v| v * v).sum::<f64>();
    mse + 0.5 * beta * reg
}

/// Exact gradient of [`loss`] in the [`ReluNet::params`] layout, with the
/// ReLU derivative taken as 0 at a zero preactivation.
pub fn gradient(net: &ReluNet, data: &RegressionSet, beta: f64) -> Vec<f64> {
    loss_and_gradient(net, data, beta).1
}

fn loss_and_gradient(net: &ReluNet, data: &RegressionSet, beta: f64) -> (f64, Vec<f64>) {
    let (j_count, n) = (net.neurons(), net.inputs);
    let mut g = vec![0.0; net.param_count()];
    let (gu, rest) = g.split_at_mut(j_count * n);
    let (gu0, rest) = rest.split_at_mut(j_count);
    let (gw, gw0) = rest.split_at_mut(j_count);
    let scale = 2.0 / data.len() as f64;
    let mut sse = 0.0;
    let mut z = vec![0.0; j_count];
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        let mut out = net.w0;
        for j in 0..j_count {
            z[j] = net.preactivation(j, x);
            out += net.w[j] * z[j].max(0.0);
        }
        let r = out - y;
        sse += r * r;
        let rs = r * scale;
        gw0[0] += rs;
        for j in 0..j_count {
            if z[j] > 0.0 {
                gw[j] += rs * z[j];
                let back = rs * net.w[j];
                gu0[j] += back;
                for (k, xk) in x.iter().enumerate() {
                    gu[j * n + k] += back * xk;
                }
            }
        }
    }
    let params = net.params();
    let mut reg = 0.0;
    for (gi, pi) in g.iter_mut().zip(&params) {
        *gi += beta * pi;
        reg += pi * pi;
    }
    (sse / data.len() as f64 + 0.5 * beta * reg, g)
}

/// Indices of neurons with positive output weight and the rest (`w_j <= 0`).
pub fn split_neurons(net: &ReluNet) -> (Vec<usize>, Vec<usize>) {
    (0..net.neurons()).partition(|&j| net.w[j] > 0.0)
}

/// Minimizer used by [`fit`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    /// Full-batch gradient descent with a grow-on-success, shrink-on-failure step.
    #[default]
    GradientDescent,
    /// Damped Gauss–Newton on the squared residuals; far fewer, costlier
    /// iterations.
    LevenbergMarquardt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: TrainMethod,
    /// Ridge weight β on all parameters.
    pub beta: f64,
    pub restarts: usize,
    /// Iteration cap; one iteration is one trial step of either method.
    pub max_epochs: usize,
    /// Initial step of the adaptive gradient descent, in standardized units.
    pub initial_step: f64,
    pub step_growth: f64,
    pub step_shrink: f64,
    /// Stop when the loss improves by less than this fraction over 100
    /// gradient steps or 10 damped Gauss–Newton steps.
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: TrainMethod::GradientDescent,
            beta: 1e-6,
            restarts: 5,
            max_epochs: 4000,
            initial_step: 0.05,
            step_growth: 1.1,
            step_shrink: 0.5,
            tolerance: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidInput(format!("beta = {} must be non-negative", self.beta)));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidInput("restarts must be positive".into()));
        }
        if !(self.step_growth >= 1.0 && self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return Err(Error::InvalidInput("step growth must be >= 1 and shrink in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Result of [`fit`]: the best net and the final loss of every restart
/// (`NaN` marks a discarded restart).
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub net: ReluNet,
    pub loss: f64,
    pub restart_losses: Vec<f64>,
}

/// Affine standardization of inputs and targets. Training iterates on
/// standardized weights `p`, mapped to raw weights by a fixed linear map;
/// the loss itself is always the raw objective.
struct Standardizer {
    x_mean: Vec<f64>,
    x_scale: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
}

impl Standardizer {
    fn new(data: &RegressionSet) -> Self {
        let s = data.len() as f64;
        let d = data.dim();
        let mut x_mean = vec![0.0; d];
        for x in &data.inputs {
            for k in 0..d {
                x_mean[k] += x[k] / s;
            }
        }
        let x_scale = (0..d)
            .map(|k| {
                let var = data.inputs.iter().map(|x| (x[k] - x_mean[k]).powi(2)).sum::<f64>() / s;
                if var.sqrt() > 1e-12 * (1.0 + x_mean[k].abs()) { var.sqrt() } else { 1.0 }
            })
            .collect();
        let y_mean = data.targets.iter().sum::<f64>() / s;
        let y_var = data.targets.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / s;
        let y_scale = if y_var.sqrt() > 1e-12 * (1.0 + y_mean.abs()) { y_var.sqrt() } else { 1.0 };
        Self { x_mean, x_scale, y_mean, y_scale }
    }

    fn to_raw(&self, shape: &ReluNet, p: &[f64]) -> ReluNet {
        let std = shape.with_params(p);
        let n = std.inputs;
        let mut u = std.u.clone();
        let mut u0 = std.u0.clone();
        for j in 0..std.neurons() {
            for k in 0..n {
                u[j][k] = std.u[j][k] / self.x_scale[k];
                u0[j] -= std.u[j][k] * self.x_mean[k] / self.x_scale[k];
            }
        }
        let w = std.w.iter().map(|v| v * self.y_scale).collect();
        let w0 = std.w0 * self.y_scale + self.y_mean;
        ReluNet { inputs: n, u, u0, w, w0 }
    }

    /// Pulls a raw-weight gradient back to standardized weights.
    fn pull_back(&self, net: &ReluNet, g_raw: &[f64]) -> Vec<f64> {
        let (j_count, n) = (net.neurons(), net.inputs);
        let mut g = g_raw.to_vec();
        for j in 0..j_count {
            let g_u0 = g_raw[j_count * n + j];
            for k in 0..n {
                g[j * n + k] = g_raw[j * n + k] / self.x_scale[k] - g_u0 * self.x_mean[k] / self.x_scale[k];
            }
        }
        for v in &mut g[j_count * n + j_count..] {
            *v *= self.y_scale;
        }
        g
    }
}

fn initial_params(data: &RegressionSet, std: &Standardizer, neurons: usize, rng: &mut SimRng) -> Vec<f64> {
    let n = data.dim();
    let spread = 3f64.sqrt() / (n.max(1) as f64).sqrt();
    let mut u = vec![0.0; neurons * n];
    let mut u0 = vec![0.0; neurons];
    for j in 0..neurons {
        for k in 0..n {
            u[j * n + k] = rng.random_range(-spread..=spread);
        }
        // place the kink inside the data's preactivation range
        let (lo, hi) = data.inputs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            let z: f64 = (0..n).map(|k| u[j * n + k] * (x[k] - std.x_mean[k]) / std.x_scale[k]).sum();
            (lo.min(z), hi.max(z))
        });
        u0[j] = if hi > lo { -rng.random_range(lo..=hi) } else { -lo };
    }
    let w_spread = 1.0 / (neurons as f64).sqrt();
    let w: Vec<f64> = (0..neurons).map(|_| rng.random_range(-w_spread..=w_spread)).collect();
    let mut p = u;
    p.extend(u0);
    p.extend(w);
    p.push(0.0);
    p
}

fn train_once(data: &RegressionSet, std: &Standardizer, shape: &ReluNet, config: &TrainConfig, rng: &mut SimRng) -> (ReluNet, f64) {
    let p = initial_params(data, std, shape.neurons(), rng);
    match config.method {
        TrainMethod::GradientDescent => descend(data, std, shape, config, p),
        TrainMethod::LevenbergMarquardt => levenberg_marquardt(data, std, shape, config, p),
    }
}

fn descend(data: &RegressionSet, std: &Standardizer, shape: &ReluNet, config: &TrainConfig, mut p: Vec<f64>) -> (ReluNet, f64) {
    let mut net = std.to_raw(shape, &p);
    let (mut current, g_raw) = loss_and_gradient(&net, data, config.beta);
    let mut g = std.pull_back(&net, &g_raw);
    // standardized loss is O(1); scale the step to the raw objective
    let mut step = config.initial_step / (std.y_scale * std.y_scale);
    let mut checkpoint = current;
    for epoch in 1..=config.max_epochs {
        let trial: Vec<f64> = p.iter().zip(&g).map(|(pi, gi)| pi - step * gi).collect();
        let trial_net = std.to_raw(shape, &trial);
        let (trial_loss, trial_g) = loss_and_gradient(&trial_net, data, config.beta);
        if trial_loss.is_finite() && trial_loss < current {
            p = trial;
            net = trial_net;
            current = trial_loss;
            g = std.pull_back(&net, &trial_g);
            step *= config.step_growth;
        } else {
            step *= config.step_shrink;
        }
        if !current.is_finite() || step < 1e-300 {
            break;
        }
        if epoch % 100 == 0 {
            if checkpoint - current <= config.tolerance * checkpoint.abs().max(1e-300) {
                break;
            }
            checkpoint = current;
        }
    }
    (net, current)
}

/// Jacobian of the standardized net's output with respect to its
/// parameters, one row per standardized input.
fn standardized_jacobian(net: &ReluNet, xs: &[Vec<f64>]) -> DMatrix<f64> {
    let (j_count, n) = (net.neurons(), net.inputs);
    let mut jac = DMatrix::zeros(xs.len(), net.param_count());
    for (i, x) in xs.iter().enumerate() {
        for j in 0..j_count {
            let z = net.preactivation(j, x);
            if z > 0.0 {
                for (k, xk) in x.iter().enumerate() {
                    jac[(i, j * n + k)] = net.w[j] * xk;
                }
                jac[(i, j_count * n + j)] = net.w[j];
                jac[(i, j_count * (n + 1) + j)] = z;
            }
        }
        jac[(i, j_count * (n + 2))] = 1.0;
    }
    jac
}

fn levenberg_marquardt(
    data: &RegressionSet,
    std: &Standardizer,
    shape: &ReluNet,
    config: &TrainConfig,
    mut p: Vec<f64>,
) -> (ReluNet, f64) {
    let xs: Vec<Vec<f64>> = data
        .inputs
        .iter()
        .map(|x| x.iter().enumerate().map(|(k, v)| (v - std.x_mean[k]) / std.x_scale[k]).collect())
        .collect();
    let mut net = std.to_raw(shape, &p);
    let (mut current, g_raw) = loss_and_gradient(&net, data, config.beta);
    let mut g = std.pull_back(&net, &g_raw);
    let curvature = 2.0 * std.y_scale * std.y_scale / data.len() as f64;
    let mut damping = 1e-3;
    let mut checkpoint = current;
    for iteration in 1..=config.max_epochs {
        let jac = standardized_jacobian(&shape.with_params(&p), &xs);
        let h = jac.tr_mul(&jac) * curvature;
        let floor = 1e-9 * h.trace().max(1e-300) / h.nrows() as f64;
        let rhs = DVector::from_column_slice(&g);
        let mut accepted = false;
        while damping < 1e12 {
            let mut a = h.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += damping * (h[(i, i)] + floor);
            }
            let Some(chol) = a.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let delta = chol.solve(&rhs);
            let trial: Vec<f64> = p.iter().zip(delta.iter()).map(|(pi, di)| pi - di).collect();
            let trial_net = std.to_raw(shape, &trial);
            let (trial_loss, trial_g) = loss_and_gradient(&trial_net, data, config.beta);
            if trial_loss.is_finite() && trial_loss < current {
                p = trial;
                net = trial_net;
                current = trial_loss;
                g = std.pull_back(&net, &trial_g);
                damping = (damping / 10.0).max(1e-12);
                accepted = true;
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            break;
        }
        if iteration % 10 == 0 {
            if checkpoint - current <= config.tolerance * checkpoint.abs().max(1e-300) {
                break;
            }
            checkpoint = current;
        }
    }
    (net, current)
}

/// Fits a `neurons`-wide ReLU net to `data`, keeping the best of
/// `config.restarts` independent initialisations.
///
/// Restart `k` uses a random stream that depends only on the caller's `rng`
/// state and `k`, so the first `k` restarts are the same for any restart count.
pub fn fit(data: &RegressionSet, neurons: usize, config: &TrainConfig, rng: &mut SimRng) -> Result<FitOutcome> {
    config.validate()?;
    if neurons == 0 {
        return Err(Error::InvalidInput("network needs at least one neuron".into()));
    }
    let std = Standardizer::new(data);
    let shape = ReluNet::constant(data.dim(), neurons, 0.0);
    let base: u64 = rng.random();
    let runs: Vec<(ReluNet, f64)> = (0..config.restarts)
        .into_par_iter()
        .map(|k| train_once(data, &std, &shape, config, &mut substream(base, &[k as u64])))
        .collect();

    let restart_losses: Vec<f64> = runs
        .iter()
        .enumerate()
        .map(|(k, (_, l))| {
            if l.is_finite() {
                *l
            } else {
                log::warn!("restart {k} produced a non-finite loss and was discarded");
                f64::NAN
            }
        })
        .collect();

    let mut best: Option<(ReluNet, f64)> = None;
    for (net, l) in runs {
        if l.is_finite() && best.as_ref().is_none_or(|(_, b)| l < *b) {
            best = Some((net, l));
        }
    }
    let (mut net, mut best_loss) = best.ok_or_else(|| Error::Training("every restart diverged".into()))?;

    let baseline = ReluNet::constant(data.dim(), neurons, std.y_mean);
    let baseline_loss = loss(&baseline, data, config.beta);
    if baseline_loss < best_loss {
        net = baseline;
        best_loss = baseline_loss;
    }
    Ok(FitOutcome { net, loss: best_loss, restart_losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_net(rng: &mut SimRng, n: usize, j: usize) -> ReluNet {
        let u = (0..j).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let u0 = (0..j).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = (0..j).map(|_| rng.random_range(-2.0..2.0)).collect();
        ReluNet::new(n, u, u0, w, rng.random_range(-1.0..1.0)).unwrap()
    }

    fn random_data(rng: &mut SimRng, n: usize, s: usize) -> RegressionSet {
        let xs: Vec<Vec<f64>> = (0..s).map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let ys = (0..s).map(|_| rng.random_range(-3.0..3.0)).collect();
        RegressionSet::new(xs, ys).unwrap()
    }

    #[test]
    fn single_neuron_by_hand() {
        let net = ReluNet::new(2, vec![vec![1.0, 0.0]], vec![-1.0], vec![2.0], 3.0).unwrap();
        assert_eq!(net.forward(&[2.0, 5.0]).unwrap(), 5.0);
    }

    #[test]
    fn dead_output_layer_returns_bias() {
        let mut rng = substream(1, &[]);
        let net = random_net(&mut rng, 3, 5);
        let mut p = net.params();
        let (j, n) = (5, 3);
        for v in &mut p[j * n + j..j * n + 2 * j] {
            *v = 0.0;
        }
        let dead = net.with_params(&p);
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            assert_eq!(dead.forward(&x).unwrap(), dead.output_bias());
        }
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = substream(2, &[]);
        for _ in 0..20 {
            let net = random_net(&mut rng, 4, 7);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut want = net.w0;
            for j in 0..7 {
                let mut z = net.u0[j];
                for k in 0..4 {
                    z += net.u[j][k] * x[k];
                }
                if z > 0.0 {
                    want += net.w[j] * z;
                }
            }
            assert!((net.forward(&x).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let net = ReluNet::constant(2, 1, 0.0);
        assert!(matches!(net.forward(&[1.0]), Err(Error::DimensionMismatch { expected: 2, got: 1 })));
    }

    #[test]
    fn loss_special_cases() {
        let mut rng = substream(3, &[]);
        let net = random_net(&mut rng, 2, 4);
        let xs: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let ys = xs.iter().map(|x| net.eval(x)).collect();
        assert!(loss(&net, &RegressionSet::new(xs.clone(), ys).unwrap(), 0.0).abs() < 1e-24);

        let zero = ReluNet::constant(2, 4, 0.0);
        let c = 1.7;
        let data = RegressionSet::new(xs, vec![c; 10]).unwrap();
        assert!((loss(&zero, &data, 0.0) - c * c).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_term_by_term_sum() {
        let mut rng = substream(4, &[]);
        let net = random_net(&mut rng, 3, 5);
        let data = random_data(&mut rng, 3, 17);
        let beta = 0.3;
        let mut acc = 0.0;
        for s in 0..data.len() {
            let r = net.eval(&data.inputs()[s]) - data.targets()[s];
            acc += r * r;
        }
        acc /= data.len() as f64;
        let mut sq = net.w0 * net.w0;
        for j in 0..5 {
            sq += net.w[j] * net.w[j] + net.u0[j] * net.u0[j];
            for k in 0..3 {
                sq += net.u[j][k] * net.u[j][k];
            }
        }
        acc += beta / 2.0 * sq;
        assert!((loss(&net, &data, beta) - acc).abs() < 1e-12);
    }

    #[test]
    fn regularizer_only_gradient() {
        let mut rng = substream(5, &[]);
        let net = random_net(&mut rng, 2, 3);
        let xs: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let ys = xs.iter().map(|x| net.eval(x)).collect();
        let data = RegressionSet::new(xs, ys).unwrap();
        let beta = 0.25;
        let g = gradient(&net, &data, beta);
        for (gi, pi) in g.iter().zip(net.params()) {
            assert!((gi - beta * pi).abs() < 1e-12);
        }
    }

    #[test]
    fn dead_neuron_has_zero_input_gradient() {
        let net = ReluNet::new(2, vec![vec![1.0, 1.0]], vec![-10.0], vec![3.0], 0.5).unwrap();
        let data = RegressionSet::new(vec![vec![1.0, 2.0]], vec![4.0]).unwrap();
        let g = gradient(&net, &data, 0.0);
        assert_eq!(&g[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(g[3], 0.0); // w gradient is zero too: activation is 0
        assert!(g[4] != 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = substream(6, &[]);
        let mut checked = 0;
        while checked < 20 {
            let net = random_net(&mut rng, 3, 6);
            let data = random_data(&mut rng, 3, 12);
            let near_kink = data
                .inputs()
                .iter()
                .any(|x| (0..6).any(|j| net.preactivation(j, x).abs() < 1e-3));
            if near_kink {
                continue;
            }
            checked += 1;
            let beta = 0.1;
            let g = gradient(&net, &data, beta);
            let p = net.params();
            let h = 1e-5;
            for i in 0..p.len() {
                let mut hi = p.clone();
                hi[i] += h;
                let mut lo = p.clone();
                lo[i] -= h;
                let fd = (loss(&net.with_params(&hi), &data, beta) - loss(&net.with_params(&lo), &data, beta)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0), "param {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn split_sign_rule() {
        let net = ReluNet::new(1, vec![vec![1.0]; 3], vec![0.0; 3], vec![1.0, -1.0, 0.0], 0.0).unwrap();
        assert_eq!(split_neurons(&net), (vec![0], vec![1, 2]));
        let pos = ReluNet::new(1, vec![vec![1.0]; 2], vec![0.0; 2], vec![0.5, 2.0], 0.0).unwrap();
        assert!(split_neurons(&pos).1.is_empty());
    }

    #[test]
    fn split_is_a_partition() {
        let mut rng = substream(7, &[]);
        for _ in 0..20 {
            let net = random_net(&mut rng, 2, 9);
            let (p, m) = split_neurons(&net);
            let mut all: Vec<usize> = p.iter().chain(&m).copied().collect();
            all.sort();
            assert_eq!(all, (0..9).collect::<Vec<_>>());
            assert!(p.iter().all(|&j| net.w[j] > 0.0) && m.iter().all(|&j| net.w[j] <= 0.0));
        }
    }

    #[test]
    fn forward_is_piecewise_linear_on_segments() {
        let mut rng = substream(8, &[]);
        for _ in 0..20 {
            let j = 6;
            let net = random_net(&mut rng, 2, j);
            let a: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let vals: Vec<f64> = (0..1000)
                .map(|i| {
                    let t = i as f64 / 999.0;
                    net.eval(&[a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])])
                })
                .collect();
            let mut clusters = 0;
            let mut prev = false;
            for i in 1..999 {
                let kink = (vals[i + 1] - 2.0 * vals[i] + vals[i - 1]).abs() > 1e-9;
                if kink && !prev {
                    clusters += 1;
                }
                prev = kink;
            }
            assert!(clusters <= j, "{clusters} breakpoints");
        }
    }

    #[test]
    fn serde_schema_round_trip() {
        let net = ReluNet::new(2, vec![vec![1.0, 2.0]], vec![0.5], vec![-1.0], 3.0).unwrap();
        let json = serde_json::to_value(&net).unwrap();
        assert_eq!(json["N1"], 2);
        assert_eq!(json["J"], 1);
        let back: ReluNet = serde_json::from_value(json).unwrap();
        assert_eq!(back, net);
        let bad = r#"{"N1":2,"J":2,"u":[[1,2]],"u0":[0],"w":[1],"w0":0}"#;
        assert!(serde_json::from_str::<ReluNet>(bad).is_err());
    }

    #[test]
    fn recovers_planted_single_neuron() {
        let mut rng = substream(9, &[]);
        let target = ReluNet::new(2, vec![vec![1.5, -0.7]], vec![0.3], vec![2.0], -1.0).unwrap();
        let xs: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let ys = xs.iter().map(|x| target.eval(x)).collect();
        let data = RegressionSet::new(xs, ys).unwrap();
        let cfg = TrainConfig { beta: 0.0, ..TrainConfig::default() };
        for j in [1, 4] {
            let out = fit(&data, j, &cfg, &mut substream(10, &[j as u64])).unwrap();
            assert!(out.loss <= 1e-4, "J = {j}: loss {}", out.loss);
        }
    }

    #[test]
    fn levenberg_marquardt_recovers_planted_net() {
        let mut rng = substream(19, &[]);
        let target = ReluNet::new(2, vec![vec![1.5, -0.7], vec![-0.4, 1.1]], vec![0.3, -0.2], vec![2.0, -1.2], -1.0).unwrap();
        let xs: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let ys = xs.iter().map(|x| target.eval(x)).collect();
        let data = RegressionSet::new(xs, ys).unwrap();
        let cfg = TrainConfig { method: TrainMethod::LevenbergMarquardt, beta: 0.0, max_epochs: 500, ..TrainConfig::default() };
        let out = fit(&data, 4, &cfg, &mut substream(20, &[])).unwrap();
        assert!(out.loss <= 1e-6, "loss {}", out.loss);
    }

    #[test]
    fn standardized_jacobian_matches_finite_differences() {
        let mut rng = substream(21, &[]);
        let net = ReluNet::new(
            3,
            (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            0.2,
        )
        .unwrap();
        let xs: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let jac = standardized_jacobian(&net, &xs);
        let p = net.params();
        let h = 1e-6;
        for k in 0..p.len() {
            let mut up = p.clone();
            up[k] += h;
            let mut down = p.clone();
            down[k] -= h;
            let (a, b) = (net.with_params(&up), net.with_params(&down));
            for (i, x) in xs.iter().enumerate() {
                let fd = (a.eval(x) - b.eval(x)) / (2.0 * h);
                assert!((fd - jac[(i, k)]).abs() < 1e-6, "param {k}, row {i}: {fd} vs {}", jac[(i, k)]);
            }
        }
    }

    #[test]
    fn constant_targets() {
        let mut rng = substream(11, &[]);
        let xs: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(0.0..5.0)]).collect();
        let data = RegressionSet::new(xs.clone(), vec![42.0; 50]).unwrap();
        let out = fit(&data, 3, &TrainConfig::default(), &mut rng).unwrap();
        for x in &xs {
            assert!((out.net.eval(x) - 42.0).abs() < 1e-3);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = substream(12, &[]);
        let data = random_data(&mut rng, 2, 40);
        let cfg = TrainConfig { max_epochs: 300, ..TrainConfig::default() };
        let a = fit(&data, 5, &cfg, &mut substream(13, &[])).unwrap();
        let b = fit(&data, 5, &cfg, &mut substream(13, &[])).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }

    #[test]
    fn fit_beats_constant_and_is_monotone_in_restarts() {
        let mut rng = substream(14, &[]);
        let data = random_data(&mut rng, 2, 40);
        let mean = data.targets().iter().sum::<f64>() / 40.0;
        let baseline = loss(&ReluNet::constant(2, 4, mean), &data, 1e-6);
        let mut prev = f64::INFINITY;
        for k in 1..=4 {
            let cfg = TrainConfig { restarts: k, max_epochs: 300, ..TrainConfig::default() };
            let out = fit(&data, 4, &cfg, &mut substream(15, &[])).unwrap();
            assert!(out.loss <= baseline + 1e-12);
            assert!(out.loss <= prev);
            prev = out.loss;
        }
    }

    #[test]
    fn rejects_bad_config() {
        let data = RegressionSet::new(vec![vec![0.0]], vec![1.0]).unwrap();
        let cfg = TrainConfig { beta: -1.0, ..TrainConfig::default() };
        assert!(fit(&data, 2, &cfg, &mut substream(0, &[])).is_err());
        assert!(RegressionSet::new(vec![], vec![]).is_err());
    }
}
