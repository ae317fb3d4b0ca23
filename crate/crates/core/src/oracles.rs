//! Ground-truth computations used to check the iterative solvers: Perron
//! eigenpairs by power iteration, exhaustive policy enumeration, the exact
//! finite-horizon log moment generating function, and relative value
//! iteration in log space.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{DeterministicPolicy, MdpModel};
use crate::operators::{
    original_weighted_matrix, weighted_matrix, PositiveValueVector, WeightedTransitionMatrix,
};
use crate::transform::TransformedMdp;

/// Power iteration settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerronConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PerronConfig {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation {
    /// Log of the Perron eigenvalue.
    pub lambda_tilde: f64,
    /// Perron right eigenvector, unit sum.
    pub value: PositiveValueVector,
    /// `‖M v − e^λ v‖_∞ / ‖v‖_∞`.
    pub residual: f64,
    pub iterations: usize,
}

/// Power iteration from the uniform vector.
///
/// Stops once both the residual and the Collatz-Wielandt bracket
/// `max_i (Mv)_i/v_i − min_i (Mv)_i/v_i` (relative to the eigenvalue) are
/// within `tol`. The bracket always contains the spectral radius, so the
/// second condition pins the eigenvalue itself, not just the direction.
pub fn perron_eigenpair(
    m: &WeightedTransitionMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<PolicyEvaluation> {
    let n = m.dim();
    let mut v = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let y = m.mul_vec(&v);
        let rho: f64 = y.iter().sum();
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::Precondition(
                "matrix has no positive finite Perron root".into(),
            ));
        }
        let vmax = v.iter().cloned().fold(0.0, f64::max);
        residual = y
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - rho * b).abs())
            .fold(0.0, f64::max)
            / vmax;
        let (lo, hi) = y
            .iter()
            .zip(&v)
            .map(|(a, b)| a / b)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r), hi.max(r))
            });
        if residual <= tol && hi - lo <= tol * rho {
            return Ok(PolicyEvaluation {
                lambda_tilde: rho.ln(),
                value: PositiveValueVector::new(v)?,
                residual,
                iterations: it,
            });
        }
        v = y.into_iter().map(|x| x / rho).collect();
        if v.iter().any(|&x| x <= 0.0) {
            // zero entries can only persist on reducible matrices
            if it > n {
                return Err(Error::Precondition(
                    "power iterate has zero entries; matrix is not irreducible".into(),
                ));
            }
            v.iter_mut().for_each(|x| *x = x.max(f64::MIN_POSITIVE));
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Perron eigenpair of the policy's weighted kernel on the transformed model.
pub fn evaluate_policy(
    tmdp: &TransformedMdp,
    policy: &DeterministicPolicy,
    config: &PerronConfig,
) -> Result<PolicyEvaluation> {
    policy.check(tmdp.n_states(), tmdp.n_actions())?;
    perron_eigenpair(&weighted_matrix(tmdp, policy), config.tol, config.max_iter)
}

/// Perron eigenpair of `diag(e^{α c_f}) P_f` on the untransformed model.
pub fn evaluate_policy_original(
    model: &MdpModel,
    alpha: f64,
    policy: &DeterministicPolicy,
    config: &PerronConfig,
) -> Result<PolicyEvaluation> {
    policy.check(model.n_states(), model.n_actions())?;
    perron_eigenpair(
        &original_weighted_matrix(model, alpha, policy),
        config.tol,
        config.max_iter,
    )
}

/// Tolerance defining membership in the optimal policy set.
pub const ARGMIN_TOL: f64 = 1e-10;

pub const DEFAULT_POLICY_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub optimal_lambda_tilde: f64,
    /// Policies within [`ARGMIN_TOL`] of the minimum, in mixed-radix order.
    pub optimal_policies: Vec<DeterministicPolicy>,
    /// Every policy with its log-eigenvalue, in mixed-radix order.
    pub per_policy: Vec<(DeterministicPolicy, f64)>,
    /// Perron eigenvector of the first optimal policy.
    pub optimal_value: PositiveValueVector,
}

impl BruteForceResult {
    pub fn is_optimal(&self, policy: &DeterministicPolicy) -> bool {
        self.optimal_policies.contains(policy)
    }

    pub fn lambda_of(&self, policy: &DeterministicPolicy) -> Option<f64> {
        self.per_policy
            .iter()
            .find(|(f, _)| f == policy)
            .map(|(_, l)| *l)
    }

    /// `e^{Λ̃*}`.
    pub fn optimal_growth(&self) -> f64 {
        self.optimal_lambda_tilde.exp()
    }
}

fn enumerate_with<F>(n: usize, m: usize, cap: u64, eval: F) -> Result<BruteForceResult>
where
    F: Fn(&DeterministicPolicy) -> Result<PolicyEvaluation> + Sync,
{
    let count = DeterministicPolicy::count(n, m).unwrap_or(u128::MAX);
    if count > cap as u128 {
        return Err(Error::SizeCap {
            policies: count,
            cap,
        });
    }
    let evaluated: Vec<(DeterministicPolicy, PolicyEvaluation)> = (0..count)
        .into_par_iter()
        .map(|idx| {
            let f = DeterministicPolicy::from_index(idx, n, m);
            eval(&f).map(|e| (f, e))
        })
        .collect::<Result<_>>()?;
    let best = evaluated
        .iter()
        .map(|(_, e)| e.lambda_tilde)
        .fold(f64::INFINITY, f64::min);
    let optimal_policies: Vec<DeterministicPolicy> = evaluated
        .iter()
        .filter(|(_, e)| e.lambda_tilde <= best + ARGMIN_TOL)
        .map(|(f, _)| f.clone())
        .collect();
    let optimal_value = evaluated
        .iter()
        .find(|(f, _)| *f == optimal_policies[0])
        .map(|(_, e)| e.value.clone())
        .expect("optimal policy is among the evaluated ones");
    Ok(BruteForceResult {
        optimal_lambda_tilde: best,
        optimal_policies,
        per_policy: evaluated
            .into_iter()
            .map(|(f, e)| (f, e.lambda_tilde))
            .collect(),
        optimal_value,
    })
}

/// Evaluates every deterministic policy of the transformed model.
pub fn brute_force_optimal(
    tmdp: &TransformedMdp,
    config: &PerronConfig,
    cap: u64,
) -> Result<BruteForceResult> {
    enumerate_with(tmdp.n_states(), tmdp.n_actions(), cap, |f| {
        evaluate_policy(tmdp, f, config)
    })
}

/// Evaluates every deterministic policy of the untransformed model.
pub fn brute_force_original(
    model: &MdpModel,
    alpha: f64,
    config: &PerronConfig,
    cap: u64,
) -> Result<BruteForceResult> {
    model.ensure_valid()?;
    enumerate_with(model.n_states(), model.n_actions(), cap, |f| {
        evaluate_policy_original(model, alpha, f, config)
    })
}

/// `(1/t)·ln E[exp(α Σ_{k<t} c_f(s_k)) | s_0]`, computed exactly by `t`
/// applications of `z ↦ diag(e^{α c_f}) P_f z` starting from `z = 𝟙`.
pub fn finite_horizon_log_mgf(
    model: &MdpModel,
    policy: &DeterministicPolicy,
    alpha: f64,
    horizon: usize,
    start: usize,
) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::param("horizon must be at least 1"));
    }
    policy.check(model.n_states(), model.n_actions())?;
    if start >= model.n_states() {
        return Err(Error::param(format!("start state {start} out of range")));
    }
    let m = original_weighted_matrix(model, alpha, policy);
    let mut z = vec![1.0; model.n_states()];
    let mut log_acc = 0.0;
    for _ in 0..horizon {
        z = m.mul_vec(&z);
        let max = z.iter().cloned().fold(0.0, f64::max);
        if !(1e-100..=1e100).contains(&max) {
            z.iter_mut().for_each(|x| *x /= max);
            log_acc += max.ln();
        }
    }
    Ok((log_acc + z[start].ln()) / horizon as f64)
}

/// `max v − min v`.
pub fn span(v: &[f64]) -> f64 {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    hi - lo
}

/// Relative value iteration trace.
///
/// Iterate `k` is stored as `offsets[k] + relative[k]`, with `relative[k]`
/// shifted to have minimum zero; spans and increments are computed from the
/// shifted parts so they stay accurate as the iterates grow linearly in `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RviTrace {
    pub offsets: Vec<f64>,
    pub relative: Vec<Vec<f64>>,
    /// `sp(g_k − g_{k−1})` for `k = 1..=iters`.
    pub increment_span: Vec<f64>,
}

impl RviTrace {
    /// Number of iterations performed (index 0 is the initial vector).
    pub fn iterations(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn iterate(&self, k: usize) -> Vec<f64> {
        self.relative[k].iter().map(|x| x + self.offsets[k]).collect()
    }

    /// `g_k − g_{k−1}`.
    pub fn increment(&self, k: usize) -> Vec<f64> {
        let shift = self.offsets[k] - self.offsets[k - 1];
        self.relative[k]
            .iter()
            .zip(&self.relative[k - 1])
            .map(|(a, b)| shift + (a - b))
            .collect()
    }

    /// `sp(g_k − h_k)` against another trace.
    pub fn span_gap(&self, other: &RviTrace, k: usize) -> f64 {
        let diff: Vec<f64> = self.relative[k]
            .iter()
            .zip(&other.relative[k])
            .map(|(a, b)| a - b)
            .collect();
        span(&diff)
    }
}

/// `g_k(i) = min_a { α d(i,a) + ln Σ_j Q(j|i,a) e^{g_{k−1}(j)} }`.
pub fn relative_value_iteration(tmdp: &TransformedMdp, init: &[f64], iters: usize) -> Result<RviTrace> {
    let n = tmdp.n_states();
    if init.len() != n || init.iter().any(|x| !x.is_finite()) {
        return Err(Error::param("initial vector must be finite with one entry per state"));
    }
    let shift0 = init.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut offsets = vec![shift0];
    let mut relative = vec![init.iter().map(|x| x - shift0).collect::<Vec<_>>()];
    let mut increment_span = Vec::with_capacity(iters);
    for _ in 0..iters {
        let prev = relative.last().unwrap();
        let top = prev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp_prev: Vec<f64> = prev.iter().map(|x| (x - top).exp()).collect();
        let next: Vec<f64> = (0..n)
            .map(|i| {
                (0..tmdp.n_actions())
                    .map(|a| {
                        let s: f64 = tmdp.row(i, a).iter().zip(&exp_prev).map(|(q, e)| q * e).sum();
                        tmdp.alpha() * tmdp.d(i, a) + s.ln()
                    })
                    .fold(f64::INFINITY, f64::min)
                    + top
            })
            .collect();
        let shift = next.iter().cloned().fold(f64::INFINITY, f64::min);
        let rel: Vec<f64> = next.iter().map(|x| x - shift).collect();
        let inc: Vec<f64> = rel.iter().zip(prev).map(|(a, b)| a - b).collect();
        increment_span.push(span(&inc));
        offsets.push(offsets.last().unwrap() + shift);
        relative.push(rel);
    }
    Ok(RviTrace {
        offsets,
        relative,
        increment_span,
    })
}

/// `sp(g_k − h_k)` for `k = 0..=iters`, where `g` and `h` follow the
/// relative value iteration recursion from `g0` and `h0`.
///
/// Instead of subtracting two separately rounded iterates, the difference
/// `δ = h − g` is propagated directly: for the action minimizing the `g`
/// step, `h_{k+1}(i) − g_{k+1}(i)` is a weighted log-mean-exp of `δ_k`,
/// which is evaluated with `ln_1p`/`exp_m1` after shifting `δ` to minimum
/// zero. Rounding is then relative to the span itself, so the sequence stays
/// meaningful far below the resolution of the iterates.
pub fn span_of_difference(tmdp: &TransformedMdp, g0: &[f64], h0: &[f64], iters: usize) -> Result<Vec<f64>> {
    let n = tmdp.n_states();
    if g0.len() != n || h0.len() != n || g0.iter().chain(h0).any(|x| !x.is_finite()) {
        return Err(Error::param("initial vectors must be finite with one entry per state"));
    }
    let shift_min = |v: Vec<f64>| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        v.into_iter().map(|x| x - lo).collect::<Vec<_>>()
    };
    let mut g = shift_min(g0.to_vec());
    let mut delta = shift_min(h0.iter().zip(g0).map(|(h, g)| h - g).collect());
    let mut spans = Vec::with_capacity(iters + 1);
    spans.push(span(&delta));
    let m = tmdp.n_actions();
    for _ in 0..iters {
        let top = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = g.iter().map(|x| (x - top).exp()).collect();
        let em1: Vec<f64> = delta.iter().map(|d| d.exp_m1()).collect();
        let mut g_next = Vec::with_capacity(n);
        let mut d_next = Vec::with_capacity(n);
        for i in 0..n {
            let mut base = Vec::with_capacity(m);
            let mut lme = Vec::with_capacity(m);
            for a in 0..m {
                let w: Vec<f64> = tmdp.row(i, a).iter().zip(&e).map(|(q, x)| q * x).collect();
                let s: f64 = w.iter().sum();
                base.push(tmdp.alpha() * tmdp.d(i, a) + s.ln());
                let mean: f64 = w.iter().zip(&em1).map(|(wj, x)| wj / s * x).sum();
                lme.push(mean.ln_1p());
            }
            let best = base.iter().cloned().fold(f64::INFINITY, f64::min);
            g_next.push(best + top);
            d_next.push(
                base.iter()
                    .zip(&lme)
                    .map(|(b, l)| (b - best) + l)
                    .fold(f64::INFINITY, f64::min),
            );
        }
        g = shift_min(g_next);
        delta = shift_min(d_next);
        spans.push(span(&delta));
    }
    Ok(spans)
}
