//! Approximate modified policy iteration: the improvement step may return any
//! policy within a factor `ε` of greedy, and each evaluated iterate is
//! perturbed componentwise by a factor in `[δ₁, δ₂]`. Errors are injected
//! synthetically from a seeded generator so tests can dial them exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DeterministicPolicy;
use crate::mpi::{
    policy_lambdas, q_measure_min, run_core, sandwich_with_factor, window_products, ApproxDriver,
    MpiConfig, MpiTrace, SandwichReport,
};
use crate::operators::{
    all_action_values, normalize, optimal_step_raw, PositiveValueVector, TieBreak,
};
use crate::oracles::{BruteForceResult, PerronConfig};
use crate::transform::{PositivityCertificate, TransformedMdp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxConfig {
    pub epsilon: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub rng_seed: u64,
    /// Window length for the performance bound; derived from the trace when absent.
    pub n_window: Option<usize>,
}

impl ApproxConfig {
    /// No injected error.
    pub fn exact(rng_seed: u64) -> Self {
        Self {
            epsilon: 1.0,
            delta1: 1.0,
            delta2: 1.0,
            rng_seed,
            n_window: None,
        }
    }

    pub fn new(epsilon: f64, delta1: f64, delta2: f64, rng_seed: u64) -> Result<Self> {
        let c = Self {
            epsilon,
            delta1,
            delta2,
            rng_seed,
            n_window: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 1.0 && self.epsilon.is_finite()) {
            return Err(Error::param(format!("epsilon must be >= 1, got {}", self.epsilon)));
        }
        if !(self.delta1 > 0.0 && self.delta1 <= 1.0) {
            return Err(Error::param(format!("delta1 must lie in (0, 1], got {}", self.delta1)));
        }
        if !(self.delta2 >= 1.0 && self.delta2.is_finite()) {
            return Err(Error::param(format!("delta2 must be >= 1, got {}", self.delta2)));
        }
        if self.n_window == Some(0) {
            return Err(Error::param("n_window must be positive"));
        }
        Ok(())
    }
}

/// Starts from the greedy policy and, per state with probability ½, tries a
/// uniformly drawn other action, keeping it if its ratio to the optimal
/// value stays within `epsilon`. Returns the policy and its largest ratio.
pub(crate) fn improve_from_greedy(
    tmdp: &TransformedMdp,
    w: &[f64],
    tv: &[f64],
    greedy: DeterministicPolicy,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> (DeterministicPolicy, f64) {
    let values = all_action_values(tmdp, w);
    let m = tmdp.n_actions();
    let mut actions = greedy.actions().to_vec();
    if epsilon > 1.0 && m > 1 {
        for (s, a) in actions.iter_mut().enumerate() {
            if rng.random_bool(0.5) {
                let mut alt = rng.random_range(0..m - 1);
                if alt >= *a {
                    alt += 1;
                }
                if values[s][alt] / tv[s] <= epsilon {
                    *a = alt;
                }
            }
        }
    }
    let ratio = actions
        .iter()
        .enumerate()
        .map(|(s, &a)| values[s][a] / tv[s])
        .fold(f64::NEG_INFINITY, f64::max);
    (DeterministicPolicy::new(actions), ratio)
}

/// An `epsilon`-approximate improvement policy at `h`.
pub fn approx_improvement(
    tmdp: &TransformedMdp,
    h: &PositiveValueVector,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> DeterministicPolicy {
    let (tv, greedy) = optimal_step_raw(tmdp, h.weights(), TieBreak::default());
    improve_from_greedy(tmdp, h.weights(), &tv, greedy, epsilon, rng).0
}

pub(crate) fn perturb_with_stats(
    h_prime: &PositiveValueVector,
    delta1: f64,
    delta2: f64,
    rng: &mut ChaCha8Rng,
) -> (PositiveValueVector, f64, f64) {
    let w: Vec<f64> = h_prime
        .weights()
        .iter()
        .map(|x| {
            let r = if delta1 == delta2 {
                delta1
            } else {
                rng.random_range(delta1..=delta2)
            };
            x / r
        })
        .collect();
    let (lo, hi) = h_prime
        .weights()
        .iter()
        .zip(&w)
        .map(|(a, b)| a / b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
    let out = PositiveValueVector::with_log_scale(w, h_prime.log_scale())
        .expect("dividing positive entries by positive factors stays positive");
    (out, lo, hi)
}

/// `e^{h'}(i) / r_i` with `r_i ~ U[delta1, delta2]` drawn independently.
pub fn approx_evaluation_perturb(
    h_prime: &PositiveValueVector,
    delta1: f64,
    delta2: f64,
    rng: &mut ChaCha8Rng,
) -> PositiveValueVector {
    perturb_with_stats(h_prime, delta1, delta2, rng).0
}

/// Runs the approximate algorithm. With `ε = δ₁ = δ₂ = 1` the trace is
/// identical to [`crate::mpi::run_mpi`].
pub fn run_approx_mpi(
    tmdp: &TransformedMdp,
    config: &MpiConfig,
    approx: &ApproxConfig,
    init: &PositiveValueVector,
) -> Result<MpiTrace> {
    approx.validate()?;
    let driver = ApproxDriver {
        config: approx,
        rng: ChaCha8Rng::seed_from_u64(approx.rng_seed),
    };
    run_core(tmdp, config, init, Some(driver))
}

/// Checks `l_k ≤ e^{Λ̃*} ≤ e^{Λ̃_{f_{k+1}}} ≤ ε·u_k` at every record.
pub fn check_approx_sandwich(
    trace: &MpiTrace,
    tmdp: &TransformedMdp,
    brute: &BruteForceResult,
    epsilon: f64,
) -> Result<SandwichReport> {
    sandwich_with_factor(trace, tmdp, brute, epsilon)
}

/// Smallest `w` such that every `w` consecutive applied depths in the trace
/// sum to at least `horizon`.
pub fn trace_window(trace: &MpiTrace, horizon: u64) -> Option<usize> {
    let applied: Vec<u64> = trace.records[..trace.records.len().saturating_sub(1)]
        .iter()
        .map(|r| u64::from(r.depth))
        .collect();
    (1..=applied.len()).find(|&w| applied.windows(w).all(|win| win.iter().sum::<u64>() >= horizon))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundPoint {
    pub k: usize,
    pub rhs: f64,
    pub lhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApproxBoundReport {
    pub n_window: usize,
    pub gamma: f64,
    pub sigma: f64,
    pub gamma_prime: f64,
    /// `γ′ < 1`; otherwise the bound makes no claim.
    pub applicable: bool,
    /// `σ·e^{Λ̃*}/(1−γ′)`.
    pub asymptotic_band: f64,
    pub per_iteration_bound: Vec<BoundPoint>,
}

impl ApproxBoundReport {
    pub fn holds(&self) -> bool {
        !self.applicable || self.per_iteration_bound.iter().all(|p| p.holds)
    }
}

pub const BOUND_SLACK: f64 = 1e-9;

/// Evaluates the performance bound
/// `e^{Λ̃_{f_{k+1}}} − e^{Λ̃*} ≤ γ′^{k/n}(ε u₀ − e^{Λ̃*}) + σ e^{Λ̃*}/(1−γ′)`
/// at every `k` divisible by the window `n`, with `γ` the smallest window
/// contraction coefficient observed along the trace.
pub fn theorem_bound(
    trace: &MpiTrace,
    tmdp: &TransformedMdp,
    brute: &BruteForceResult,
    approx: &ApproxConfig,
    cert: &PositivityCertificate,
) -> Result<ApproxBoundReport> {
    let horizon = cert.horizon();
    let records = &trace.records;
    let w = match approx.n_window {
        Some(w) => w,
        None => trace_window(trace, horizon).ok_or_else(|| {
            Error::DiagnosticUnavailable(format!(
                "no window of the trace covers {horizon} evaluation steps"
            ))
        })?,
    };
    let gamma = if tmdp.n_states() == 1 {
        1.0
    } else {
        let products = window_products(records, tmdp, horizon, |end| (end >= w).then_some(w));
        let g = products
            .iter()
            .filter(|(_, p)| p.k == w)
            .map(|(end, p)| q_measure_min(&p.weighted, records[end - w].value_normalized.weights()))
            .fold(f64::INFINITY, f64::min);
        if !g.is_finite() {
            return Err(Error::DiagnosticUnavailable(format!(
                "trace has fewer than {} records",
                w + 1
            )));
        }
        g
    };
    let growth = (approx.delta2 * approx.epsilon / approx.delta1).powi(w as i32);
    let sigma = growth * (1.0 + (approx.epsilon - 1.0) * gamma) - 1.0;
    let gamma_prime = growth * (1.0 - gamma);
    let applicable = gamma_prime < 1.0;
    let star = brute.optimal_growth();
    let asymptotic_band = sigma * star / (1.0 - gamma_prime);
    let lambdas = policy_lambdas(trace, tmdp, &PerronConfig::default())?;
    let u0 = records[0].u;
    let per_iteration_bound = (0..records.len())
        .step_by(w)
        .map(|k| {
            let lhs = lambdas[k].exp() - star;
            let rhs = gamma_prime.powi((k / w) as i32) * (u0 * approx.epsilon - star) + asymptotic_band;
            BoundPoint {
                k,
                rhs,
                lhs,
                holds: lhs <= rhs + BOUND_SLACK,
            }
        })
        .collect();
    Ok(ApproxBoundReport {
        n_window: w,
        gamma,
        sigma,
        gamma_prime,
        applicable,
        asymptotic_band,
        per_iteration_bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FloorWindow {
    pub end: usize,
    pub k_window: usize,
    pub steps: u64,
    /// Minimum entry of the window's kernel product.
    pub lambda_h: f64,
    /// `e^{α(d̲−d̄)Σm}·λ_H/n`.
    pub tau: f64,
    /// `τ/δ₂`.
    pub floor: f64,
    /// `(δ₁/δ₂)^{k−1}·τ/δ₂`, which also accounts for the perturbations
    /// applied inside the window.
    pub floor_within_window: f64,
    pub value_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundednessReport {
    /// `min_{k,i} e^{h_k(i)}`.
    pub observed: f64,
    pub windows: Vec<FloorWindow>,
}

impl BoundednessReport {
    /// Strict positivity and every windowed value above `τ/δ₂`.
    pub fn holds(&self) -> bool {
        self.observed > 0.0 && self.windows.iter().all(|w| w.value_min >= w.floor)
    }

    pub fn holds_within_window(&self) -> bool {
        self.observed > 0.0 && self.windows.iter().all(|w| w.value_min >= w.floor_within_window)
    }
}

/// Observed minimum of the iterates against the constructive floor.
pub fn boundedness_floor(
    trace: &MpiTrace,
    tmdp: &TransformedMdp,
    approx: &ApproxConfig,
    cert: &PositivityCertificate,
) -> BoundednessReport {
    let n = tmdp.n_states() as f64;
    let (d_lo, d_hi) = tmdp.d_bounds();
    let alpha = tmdp.alpha();
    let windows = window_products(&trace.records, tmdp, cert.horizon(), |_| None)
        .into_iter()
        .map(|(end, p)| {
            let lambda_h = p.kernel.iter().cloned().fold(f64::INFINITY, f64::min);
            let tau = (alpha * (d_lo - d_hi) * p.steps as f64).exp() * lambda_h / n;
            let floor = tau / approx.delta2;
            FloorWindow {
                end,
                k_window: p.k,
                steps: p.steps,
                lambda_h,
                tau,
                floor,
                floor_within_window: (approx.delta1 / approx.delta2).powi(p.k as i32 - 1) * floor,
                value_min: trace.records[end].value_normalized.min_weight(),
            }
        })
        .collect();
    BoundednessReport {
        observed: trace.beta_observed,
        windows,
    }
}

/// Independent recomputation of the injected-error contracts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractReport {
    pub improvement_ratio_min: f64,
    pub improvement_ratio_max: f64,
    pub eval_ratio_min: f64,
    pub eval_ratio_max: f64,
    /// Indices of records breaking either contract.
    pub violations: Vec<usize>,
}

impl ContractReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

const CONTRACT_REL_SLACK: f64 = 1e-12;

/// Re-derives every improvement ratio `(T_f e^h)/(T e^h)` and every
/// evaluation ratio `e^{h'}/e^{h}` from the stored iterates and checks them
/// against `[1, ε]` and `[δ₁, δ₂]` componentwise.
pub fn verify_contracts(
    trace: &MpiTrace,
    tmdp: &TransformedMdp,
    approx: &ApproxConfig,
) -> Result<ContractReport> {
    let mut report = ContractReport {
        improvement_ratio_min: f64::INFINITY,
        improvement_ratio_max: f64::NEG_INFINITY,
        eval_ratio_min: f64::INFINITY,
        eval_ratio_max: f64::NEG_INFINITY,
        violations: Vec::new(),
    };
    let recs = &trace.records;
    for (k, r) in recs.iter().enumerate() {
        let h = r.value_normalized.weights();
        let values = all_action_values(tmdp, h);
        let mut bad = false;
        for (s, vals) in values.iter().enumerate() {
            let best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let ratio = vals[r.policy.action(s)] / best;
            report.improvement_ratio_min = report.improvement_ratio_min.min(ratio);
            report.improvement_ratio_max = report.improvement_ratio_max.max(ratio);
            bad |= ratio > approx.epsilon * (1.0 + CONTRACT_REL_SLACK);
        }
        if let Some(next) = recs.get(k + 1) {
            let mut evaluated = r.value_normalized.clone();
            for _ in 0..r.depth {
                evaluated = crate::operators::apply_policy_operator(tmdp, &r.policy, &evaluated);
            }
            let h_prime = normalize(&evaluated);
            let hn = next.value_normalized.represented();
            for (a, b) in h_prime.represented().iter().zip(&hn) {
                let ratio = a / b;
                report.eval_ratio_min = report.eval_ratio_min.min(ratio);
                report.eval_ratio_max = report.eval_ratio_max.max(ratio);
                bad |= ratio < approx.delta1 * (1.0 - CONTRACT_REL_SLACK)
                    || ratio > approx.delta2 * (1.0 + CONTRACT_REL_SLACK);
            }
        }
        if bad {
            report.violations.push(k);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_random, MdpModel, RiskParams};
    use crate::mpi::run_mpi;
    use crate::oracles::{brute_force_optimal, DEFAULT_POLICY_CAP};
    use crate::transform::{positivity_horizon, transform};

    fn fixture(seed: u64, n: usize, m: usize) -> TransformedMdp {
        let model = generate_random(seed, n, m, (0.0, 1.0)).unwrap();
        transform(&model, &RiskParams::new(1.0, 0.5).unwrap()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ApproxConfig::new(0.9, 1.0, 1.0, 0).is_err());
        assert!(ApproxConfig::new(1.0, 1.1, 1.2, 0).is_err());
        assert!(ApproxConfig::new(1.0, 0.9, 0.95, 0).is_err());
        assert!(ApproxConfig::new(1.05, 0.9, 1.1, 0).is_ok());
    }

    #[test]
    fn zero_error_matches_exact_bitwise() {
        let t = fixture(7, 4, 3);
        let c = MpiConfig::constant(3);
        let init = PositiveValueVector::uniform(4);
        let exact = run_mpi(&t, &c, &init).unwrap();
        let approx = run_approx_mpi(&t, &c, &ApproxConfig::exact(99), &init).unwrap();
        assert_eq!(exact.records.len(), approx.records.len());
        for (a, b) in exact.records.iter().zip(&approx.records) {
            assert_eq!(a.policy, b.policy);
            assert_eq!(a.value_normalized, b.value_normalized);
            assert_eq!(a.u, b.u);
            assert_eq!(a.l, b.l);
        }
    }

    #[test]
    fn perturbation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = PositiveValueVector::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(approx_evaluation_perturb(&h, 1.0, 1.0, &mut rng), h);
        let halved = approx_evaluation_perturb(&h, 2.0, 2.0, &mut rng);
        assert_eq!(halved.weights(), &[0.125, 0.375]);
        let (_, lo, hi) = perturb_with_stats(&h, 0.9, 1.1, &mut rng);
        assert!(lo >= 0.9 * (1.0 - 1e-15) && hi <= 1.1 * (1.0 + 1e-15));
    }

    #[test]
    fn improvement_respects_epsilon() {
        let t = fixture(8, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = PositiveValueVector::uniform(5);
        let (tv, greedy) = optimal_step_raw(&t, h.weights(), TieBreak::default());
        assert_eq!(approx_improvement(&t, &h, 1.0, &mut rng), greedy);
        for _ in 0..20 {
            let f = approx_improvement(&t, &h, 1.05, &mut rng);
            let vals = all_action_values(&t, h.weights());
            for s in 0..5 {
                let r = vals[s][f.action(s)] / tv[s];
                assert!((1.0..=1.05).contains(&r));
            }
        }
    }

    #[test]
    fn single_action_is_unique_policy() {
        let t = fixture(9, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = approx_improvement(&t, &PositiveValueVector::uniform(3), 2.0, &mut rng);
        assert_eq!(f, DeterministicPolicy::constant(3, 0));
    }

    #[test]
    fn scalar_model_floor() {
        let model = MdpModel::new(1, 2, vec![1.0, 1.0], vec![0.2, 0.4]).unwrap();
        let t = transform(&model, &RiskParams::new(1.0, 0.5).unwrap()).unwrap();
        let a = ApproxConfig::new(1.1, 0.8, 1.25, 4).unwrap();
        let trace = run_approx_mpi(&t, &MpiConfig::default(), &a, &PositiveValueVector::uniform(1)).unwrap();
        assert!(trace.converged);
        let cert = positivity_horizon(&t, 100);
        let report = boundedness_floor(&trace, &t, &a, &cert);
        assert!(report.observed >= 1.0 / 1.25);
    }

    #[test]
    fn seeded_run_satisfies_checks() {
        let t = fixture(12, 4, 2);
        let a = ApproxConfig::new(1.02, 0.99, 1.01, 5).unwrap();
        let c = MpiConfig::constant(5).with_diagnostics(true);
        let mut c = c;
        c.max_outer = 200;
        let trace = run_approx_mpi(&t, &c, &a, &PositiveValueVector::uniform(4)).unwrap();
        let brute = brute_force_optimal(&t, &PerronConfig::default(), DEFAULT_POLICY_CAP).unwrap();
        assert!(check_approx_sandwich(&trace, &t, &brute, a.epsilon).unwrap().ok());
        assert!(verify_contracts(&trace, &t, &a).unwrap().ok());
        let cert = positivity_horizon(&t, 1000);
        let bound = theorem_bound(&trace, &t, &brute, &a, &cert).unwrap();
        assert!(bound.holds(), "{bound:?}");
        assert!(boundedness_floor(&trace, &t, &a, &cert).holds());
    }
}
