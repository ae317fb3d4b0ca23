//! Multiplicative Bellman operators on strictly positive vectors.
//!
//! A [`PositiveValueVector`] stands for `e^V`. It stores a weight vector `w`
//! together with a log-scale accumulator, so the represented vector is
//! `e^{log_scale}·w`; repeated operator applications fold large or tiny
//! magnitudes into the accumulator instead of overflowing.

use crate::error::{Error, Result};
use crate::model::{DeterministicPolicy, MdpModel};
use crate::transform::TransformedMdp;

const FOLD_HI: f64 = 1e100;
const FOLD_LO: f64 = 1e-100;

#[derive(Debug, Clone, PartialEq)]
pub struct PositiveValueVector {
    w: Vec<f64>,
    log_scale: f64,
}

impl PositiveValueVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        Self::with_log_scale(w, 0.0)
    }

    pub fn with_log_scale(w: Vec<f64>, log_scale: f64) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::param("value vector is empty"));
        }
        if let Some((i, x)) = w.iter().enumerate().find(|(_, x)| !(x.is_finite() && **x > 0.0)) {
            return Err(Error::param(format!(
                "value vector entry {i} = {x} is not strictly positive"
            )));
        }
        if !log_scale.is_finite() {
            return Err(Error::param("log scale must be finite"));
        }
        Ok(Self { w, log_scale })
    }

    /// `1/n` in every entry.
    pub fn uniform(n: usize) -> Self {
        Self {
            w: vec![1.0 / n as f64; n],
            log_scale: 0.0,
        }
    }

    /// `e^{V}` from log-values `V`.
    pub fn from_log_values(v: &[f64]) -> Result<Self> {
        let shift = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self::with_log_scale(v.iter().map(|x| (x - shift).exp()).collect(), shift)
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    /// Log-values `V(i) = log_scale + ln w_i`.
    pub fn log_values(&self) -> Vec<f64> {
        self.w.iter().map(|x| self.log_scale + x.ln()).collect()
    }

    /// The represented vector `e^{log_scale}·w` (may overflow for large scales).
    pub fn represented(&self) -> Vec<f64> {
        let s = self.log_scale.exp();
        self.w.iter().map(|x| s * x).collect()
    }

    /// Represents `c·v` for `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        assert!(c > 0.0 && c.is_finite(), "scale factor must be positive");
        Self {
            w: self.w.clone(),
            log_scale: self.log_scale + c.ln(),
        }
    }

    pub fn min_weight(&self) -> f64 {
        self.w.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_weight(&self) -> f64 {
        self.w.iter().cloned().fold(0.0, f64::max)
    }

    fn fold(mut self) -> Self {
        let max = self.max_weight();
        if max > FOLD_HI || max < FOLD_LO {
            for x in self.w.iter_mut() {
                *x /= max;
            }
            self.log_scale += max.ln();
        }
        self
    }
}

/// Rescales to unit sum and resets the log scale.
pub fn normalize(v: &PositiveValueVector) -> PositiveValueVector {
    let sum: f64 = v.w.iter().sum();
    PositiveValueVector {
        w: v.w.iter().map(|x| x / sum).collect(),
        log_scale: 0.0,
    }
}

/// Dense nonnegative `n × n` matrix with entries `e^{α·d_f(i)}·Q_f(j|i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedTransitionMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl WeightedTransitionMatrix {
    pub fn from_row_major(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n || n == 0 {
            return Err(Error::Shape(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                entries.len()
            )));
        }
        if entries.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::param("weighted matrix entries must be finite and nonnegative"));
        }
        Ok(Self { n, entries })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.entries
            .chunks(self.n)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Weighted kernel of a policy on the transformed model.
pub fn weighted_matrix(tmdp: &TransformedMdp, policy: &DeterministicPolicy) -> WeightedTransitionMatrix {
    let n = tmdp.n_states();
    let alpha = tmdp.alpha();
    let mut entries = Vec::with_capacity(n * n);
    for (i, &a) in policy.actions().iter().enumerate() {
        let weight = (alpha * tmdp.d(i, a)).exp();
        entries.extend(tmdp.row(i, a).iter().map(|q| weight * q));
    }
    WeightedTransitionMatrix { n, entries }
}

/// Weighted kernel `diag(e^{α·c_f})·P_f` of the untransformed model.
pub fn original_weighted_matrix(
    model: &MdpModel,
    alpha: f64,
    policy: &DeterministicPolicy,
) -> WeightedTransitionMatrix {
    let n = model.n_states();
    let mut entries = Vec::with_capacity(n * n);
    for (i, &a) in policy.actions().iter().enumerate() {
        let weight = (alpha * model.cost(i, a)).exp();
        entries.extend(model.row(i, a).iter().map(|p| weight * p));
    }
    WeightedTransitionMatrix { n, entries }
}

fn action_value(tmdp: &TransformedMdp, s: usize, a: usize, w: &[f64]) -> f64 {
    let expected: f64 = tmdp.row(s, a).iter().zip(w).map(|(q, x)| q * x).sum();
    (tmdp.alpha() * tmdp.d(s, a)).exp() * expected
}

/// `(T_f w)` on raw weights, without folding.
pub(crate) fn policy_step_raw(tmdp: &TransformedMdp, policy: &DeterministicPolicy, w: &[f64]) -> Vec<f64> {
    policy
        .actions()
        .iter()
        .enumerate()
        .map(|(s, &a)| action_value(tmdp, s, a, w))
        .collect()
}

/// Per-state action values `(T_a w)(s)` for every action.
pub(crate) fn all_action_values(tmdp: &TransformedMdp, w: &[f64]) -> Vec<Vec<f64>> {
    (0..tmdp.n_states())
        .map(|s| (0..tmdp.n_actions()).map(|a| action_value(tmdp, s, a, w)).collect())
        .collect()
}

/// Tie-breaking rule for the greedy minimization: among actions whose value
/// lies within `rel_tol` (relative) of the minimum, pick the lowest index.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TieBreak {
    pub rel_tol: f64,
}

impl Default for TieBreak {
    fn default() -> Self {
        Self { rel_tol: 1e-12 }
    }
}

impl TieBreak {
    pub(crate) fn select(&self, values: &[f64]) -> (usize, f64) {
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let threshold = min + self.rel_tol * min.abs();
        let action = values.iter().position(|&v| v <= threshold).unwrap_or(0);
        (action, min)
    }
}

/// `(T w, greedy policy)` on raw weights.
pub(crate) fn optimal_step_raw(
    tmdp: &TransformedMdp,
    w: &[f64],
    tie_break: TieBreak,
) -> (Vec<f64>, DeterministicPolicy) {
    let mut out = Vec::with_capacity(w.len());
    let mut actions = Vec::with_capacity(w.len());
    for values in all_action_values(tmdp, w) {
        let (a, min) = tie_break.select(&values);
        out.push(min);
        actions.push(a);
    }
    (out, DeterministicPolicy::new(actions))
}

/// `T_f v`.
pub fn apply_policy_operator(
    tmdp: &TransformedMdp,
    policy: &DeterministicPolicy,
    v: &PositiveValueVector,
) -> PositiveValueVector {
    PositiveValueVector {
        w: policy_step_raw(tmdp, policy, &v.w),
        log_scale: v.log_scale,
    }
    .fold()
}

/// `T v` together with the minimizing (tie-broken) policy.
pub fn apply_optimal_operator(
    tmdp: &TransformedMdp,
    v: &PositiveValueVector,
    tie_break: TieBreak,
) -> (PositiveValueVector, DeterministicPolicy) {
    let (w, policy) = optimal_step_raw(tmdp, &v.w, tie_break);
    let out = PositiveValueVector {
        w,
        log_scale: v.log_scale,
    }
    .fold();
    (out, policy)
}

/// Per-state ratios `g = (T v)/v` with their max `u` and min `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsTriple {
    pub g: Vec<f64>,
    pub u: f64,
    pub l: f64,
}

impl BoundsTriple {
    pub(crate) fn from_ratios(g: Vec<f64>) -> Self {
        let u = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let l = g.iter().cloned().fold(f64::INFINITY, f64::min);
        Self { g, u, l }
    }

    pub(crate) fn from_step(tv: &[f64], v: &[f64]) -> Self {
        Self::from_ratios(tv.iter().zip(v).map(|(a, b)| a / b).collect())
    }
}

pub fn bounds_triple(tmdp: &TransformedMdp, v: &PositiveValueVector) -> BoundsTriple {
    let (tv, _) = optimal_step_raw(tmdp, &v.w, TieBreak::default());
    BoundsTriple::from_step(&tv, &v.w)
}
