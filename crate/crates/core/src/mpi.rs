//! Risk-sensitive modified policy iteration with per-iteration tracing and
//! the invariant checks that go with it.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{self, ApproxConfig};
use crate::error::{Error, Result};
use crate::model::{DeterministicPolicy, MdpModel, RiskParams};
use crate::operators::{
    apply_policy_operator, normalize, optimal_step_raw, weighted_matrix, BoundsTriple,
    PositiveValueVector, TieBreak,
};
use crate::oracles::{evaluate_policy, BruteForceResult, PerronConfig};
use crate::transform::{invert_cost, matmul, transform, PositivityCertificate, TransformedMdp};

/// Tolerance on `Σ init = 1`.
pub const INIT_SUM_TOL: f64 = 1e-12;

/// Partial-evaluation depths `m_k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MSchedule {
    Constant(u32),
    /// `m_k = cycle[k mod len]`.
    Cycle(Vec<u32>),
}

impl MSchedule {
    pub fn depth(&self, k: usize) -> u32 {
        match self {
            MSchedule::Constant(m) => *m,
            MSchedule::Cycle(c) => c[k % c.len()],
        }
    }

    /// Largest depth the schedule ever produces.
    pub fn max_depth(&self) -> u32 {
        match self {
            MSchedule::Constant(m) => *m,
            MSchedule::Cycle(c) => c.iter().copied().max().unwrap_or(0),
        }
    }

    /// Smallest `w` such that any `w` consecutive depths sum to at least `r`.
    pub fn window_for(&self, r: u64) -> usize {
        match self {
            MSchedule::Constant(m) => r.div_ceil(u64::from(*m)).max(1) as usize,
            MSchedule::Cycle(c) => {
                let len = c.len();
                (1..)
                    .find(|&w| {
                        (0..len).all(|start| {
                            (0..w).map(|j| u64::from(c[(start + j) % len])).sum::<u64>() >= r
                        })
                    })
                    .unwrap()
            }
        }
    }

    fn check(&self, cap: u32) -> Result<()> {
        let depths: &[u32] = match self {
            MSchedule::Constant(m) => std::slice::from_ref(m),
            MSchedule::Cycle(c) => c,
        };
        if depths.is_empty() {
            return Err(Error::param("depth cycle is empty"));
        }
        if let Some(m) = depths.iter().find(|&&m| m == 0 || m > cap) {
            return Err(Error::param(format!(
                "evaluation depth {m} outside [1, {cap}]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpiConfig {
    pub schedule: MSchedule,
    /// Upper bound `C` on every depth.
    pub m_cap: u32,
    pub tol: f64,
    pub max_outer: usize,
    pub tie_break: TieBreak,
    /// Evaluate every iterate's policy exactly (slow).
    pub diagnostics: bool,
    pub perron: PerronConfig,
}

impl Default for MpiConfig {
    fn default() -> Self {
        Self::constant(5)
    }
}

impl MpiConfig {
    /// Constant depth `m` with `C = m`.
    pub fn constant(m: u32) -> Self {
        Self {
            schedule: MSchedule::Constant(m),
            m_cap: m,
            tol: 1e-10,
            max_outer: 10_000,
            tie_break: TieBreak::default(),
            diagnostics: false,
            perron: PerronConfig::default(),
        }
    }

    /// Cyclic schedule with `C` set to its largest entry.
    pub fn cycle(depths: Vec<u32>) -> Self {
        let cap = depths.iter().copied().max().unwrap_or(1);
        Self {
            schedule: MSchedule::Cycle(depths),
            m_cap: cap,
            ..Self::constant(1)
        }
    }

    pub fn with_diagnostics(mut self, on: bool) -> Self {
        self.diagnostics = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.check(self.m_cap)?;
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::param("tol must be positive"));
        }
        if self.max_outer == 0 {
            return Err(Error::param("max_outer must be at least 1"));
        }
        Ok(())
    }
}

/// Error-injection statistics of one approximate iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproxStats {
    /// `max_i (T_f e^h)(i) / (T e^h)(i)` for the chosen policy.
    pub epsilon_ratio_max: f64,
    /// Range of `e^{h'}(i)/e^{h_{k+1}}(i)`; absent on the final iteration.
    pub eval_ratio_min: Option<f64>,
    pub eval_ratio_max: Option<f64>,
}

/// Record `n`: quantities at the iterate `V'_n` and the step taken from it.
#[derive(Debug, Clone, PartialEq)]
pub struct MpiIterationRecord {
    pub index: usize,
    /// Improvement policy `f_{n+1}` chosen at `V'_n`.
    pub policy: DeterministicPolicy,
    /// `(T e^{V'_n})/e^{V'_n}`.
    pub g: Vec<f64>,
    pub u: f64,
    pub l: f64,
    /// `e^{V'_n}`.
    pub value_normalized: PositiveValueVector,
    /// `m_n`, the number of evaluation steps applied after this record.
    pub depth: u32,
    pub policy_lambda_tilde: Option<f64>,
    pub approx: Option<ApproxStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpiTrace {
    pub records: Vec<MpiIterationRecord>,
    pub converged: bool,
    pub final_policy: DeterministicPolicy,
    /// `ln((u+l)/2)` at the last record.
    pub final_lambda_tilde: f64,
    /// `(u−l)/2` at the last record; `e^{Λ̃*}` lies within this of `(u+l)/2`.
    pub half_width: f64,
    pub beta_observed: f64,
}

impl MpiTrace {
    pub fn last(&self) -> &MpiIterationRecord {
        self.records.last().expect("trace is never empty")
    }
}

/// Greedy policy at `v`.
pub fn greedy_improvement(
    tmdp: &TransformedMdp,
    v: &PositiveValueVector,
    tie_break: TieBreak,
) -> DeterministicPolicy {
    optimal_step_raw(tmdp, v.weights(), tie_break).1
}

/// `T_f^{m} v`.
pub fn partial_evaluation(
    tmdp: &TransformedMdp,
    policy: &DeterministicPolicy,
    v: &PositiveValueVector,
    m: u32,
) -> Result<PositiveValueVector> {
    if m == 0 {
        return Err(Error::param("evaluation depth must be at least 1"));
    }
    policy.check(tmdp.n_states(), tmdp.n_actions())?;
    let mut out = apply_policy_operator(tmdp, policy, v);
    for _ in 1..m {
        out = apply_policy_operator(tmdp, policy, &out);
    }
    Ok(out)
}

pub(crate) struct ApproxDriver<'a> {
    pub config: &'a ApproxConfig,
    pub rng: ChaCha8Rng,
}

pub(crate) fn check_init(init: &PositiveValueVector, n: usize) -> Result<()> {
    if init.len() != n {
        return Err(Error::param(format!(
            "initial vector has {} entries, expected {n}",
            init.len()
        )));
    }
    let sum: f64 = init.represented().iter().sum();
    if (sum - 1.0).abs() > INIT_SUM_TOL {
        return Err(Error::param(format!(
            "initial vector must sum to 1 (sum = {sum})"
        )));
    }
    Ok(())
}

pub(crate) fn run_core(
    tmdp: &TransformedMdp,
    config: &MpiConfig,
    init: &PositiveValueVector,
    mut approx: Option<ApproxDriver<'_>>,
) -> Result<MpiTrace> {
    config.validate()?;
    check_init(init, tmdp.n_states())?;
    let mut lambda_cache: HashMap<DeterministicPolicy, f64> = HashMap::new();
    let mut records = Vec::new();
    let mut v = normalize(init);
    let mut converged = false;
    for k in 0..config.max_outer {
        let (tv, greedy) = optimal_step_raw(tmdp, v.weights(), config.tie_break);
        let bounds = BoundsTriple::from_step(&tv, v.weights());
        let (policy, epsilon_ratio_max) = match approx.as_mut() {
            Some(d) => {
                let (f, r) =
                    approx::improve_from_greedy(tmdp, v.weights(), &tv, greedy, d.config.epsilon, &mut d.rng);
                (f, Some(r))
            }
            None => (greedy, None),
        };
        let policy_lambda_tilde = if config.diagnostics {
            let lt = match lambda_cache.get(&policy) {
                Some(&x) => x,
                None => {
                    let x = evaluate_policy(tmdp, &policy, &config.perron)?.lambda_tilde;
                    lambda_cache.insert(policy.clone(), x);
                    x
                }
            };
            Some(lt)
        } else {
            None
        };
        let depth = config.schedule.depth(k);
        let done = bounds.u - bounds.l <= config.tol;
        let mut record = MpiIterationRecord {
            index: k,
            policy,
            g: bounds.g,
            u: bounds.u,
            l: bounds.l,
            value_normalized: v.clone(),
            depth,
            policy_lambda_tilde,
            approx: epsilon_ratio_max.map(|r| ApproxStats {
                epsilon_ratio_max: r,
                eval_ratio_min: None,
                eval_ratio_max: None,
            }),
        };
        if done {
            converged = true;
            records.push(record);
            break;
        }
        let evaluated = partial_evaluation(tmdp, &record.policy, &v, depth)?;
        let h_prime = normalize(&evaluated);
        v = match approx.as_mut() {
            Some(d) => {
                let (h, lo, hi) = approx::perturb_with_stats(&h_prime, d.config.delta1, d.config.delta2, &mut d.rng);
                if let Some(stats) = record.approx.as_mut() {
                    stats.eval_ratio_min = Some(lo);
                    stats.eval_ratio_max = Some(hi);
                }
                h
            }
            None => h_prime,
        };
        records.push(record);
    }
    let last = records.last().expect("max_outer >= 1");
    let beta_observed = records
        .iter()
        .map(|r| r.value_normalized.min_weight())
        .fold(f64::INFINITY, f64::min);
    Ok(MpiTrace {
        final_policy: last.policy.clone(),
        final_lambda_tilde: (0.5 * (last.u + last.l)).ln(),
        half_width: 0.5 * (last.u - last.l),
        beta_observed,
        converged,
        records,
    })
}

/// Runs modified policy iteration from a unit-sum positive `init`.
pub fn run_mpi(
    tmdp: &TransformedMdp,
    config: &MpiConfig,
    init: &PositiveValueVector,
) -> Result<MpiTrace> {
    run_core(tmdp, config, init, None)
}

pub(crate) fn policy_lambdas(
    trace: &MpiTrace,
    tmdp: &TransformedMdp,
    perron: &PerronConfig,
) -> Result<Vec<f64>> {
    let mut cache: HashMap<&DeterministicPolicy, f64> = HashMap::new();
    trace
        .records
        .iter()
        .map(|r| match r.policy_lambda_tilde {
            Some(x) => Ok(x),
            None => {
                if let Some(&x) = cache.get(&r.policy) {
                    return Ok(x);
                }
                let x = evaluate_policy(tmdp, &r.policy, perron)?.lambda_tilde;
                cache.insert(&r.policy, x);
                Ok(x)
            }
        })
        .collect()
}

/// Which link of the sandwich chain failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SandwichLink {
    /// `l_n ≤ e^{Λ̃*}`
    LowerBound,
    /// `e^{Λ̃*} ≤ e^{Λ̃_f}`
    Optimality,
    /// `e^{Λ̃_f} ≤ u_n` (times `ε` for approximate runs)
    UpperBound,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichViolation {
    pub index: usize,
    pub link: SandwichLink,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SandwichReport {
    pub checked: usize,
    pub violations: Vec<SandwichViolation>,
}

impl SandwichReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub const SANDWICH_SLACK: f64 = 1e-10;

pub(crate) fn sandwich_with_factor(
    trace: &MpiTrace,
    tmdp: &TransformedMdp,
    brute: &BruteForceResult,
    upper_factor: f64,
) -> Result<SandwichReport> {
    let star = brute.optimal_growth();
    let lambdas = policy_lambdas(trace, tmdp, &PerronConfig::default())?;
    let mut report = SandwichReport::default();
    for (r, lt) in trace.records.iter().zip(lambdas) {
        let ef = lt.exp();
        let links = [
            (SandwichLink::LowerBound, r.l, star),
            (SandwichLink::Optimality, star, ef),
            (SandwichLink::UpperBound, ef, r.u * upper_factor),
        ];
        for (link, lhs, rhs) in links {
            if lhs > rhs + SANDWICH_SLACK {
                report.violations.push(SandwichViolation {
                    index: r.index,
                    link,
                    lhs,
                    rhs,
                });
            }
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Checks `l_n ≤ e^{Λ̃*} ≤ e^{Λ̃_{f_{n+1}}} ≤ u_n` at every record.
///
/// Records without a stored policy eigenvalue are evaluated on the fly.
pub fn check_sandwich(
    trace: &MpiTrace,
    tmdp: &TransformedMdp,
    brute: &BruteForceResult,
) -> Result<SandwichReport> {
    sandwich_with_factor(trace, tmdp, brute, 1.0)
}

/// One window `[n−k, n)` of the trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowDiagnostic {
    /// Record whose bound is checked.
    pub end: usize,
    pub k_window: usize,
    /// `Σ m` over the window.
    pub steps: u64,
    /// `min q(j|i)`.
    pub gamma: f64,
    pub rate_bound: f64,
    /// Minimum entry of the product of the window's transition kernels.
    pub h_min_entry: f64,
    /// `u_n − e^{Λ̃*}`.
    pub lhs: f64,
    /// `(1−γ)(u_{n−k} − e^{Λ̃*})`.
    pub rhs: f64,
    pub holds: bool,
    /// `min_i e^{V'_n(i)}`.
    pub value_min: f64,
    /// `e^{kαd̲}·ε_H / (n·e^{kCαd̄})`.
    pub beta_floor: f64,
    /// `e^{α(d̲−d̄)Σm}·ε_H / n`, valid for any sign of the costs.
    pub beta_floor_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionDiagnostic {
    pub horizon: u64,
    pub windows: Vec<WindowDiagnostic>,
    /// Smallest `γ` over all windows.
    pub gamma: f64,
}

impl ContractionDiagnostic {
    pub fn all_hold(&self) -> bool {
        self.windows.iter().all(|w| w.holds)
    }

    pub fn floor_holds(&self) -> bool {
        self.windows.iter().all(|w| w.value_min >= w.beta_floor)
    }
}

pub const CONTRACTION_SLACK: f64 = 1e-10;

/// Kernel products accumulated over a trace window.
pub(crate) struct WindowProduct {
    pub k: usize,
    pub steps: u64,
    /// `H`, rescaled to unit max entry.
    pub weighted: Vec<f64>,
    /// Product of the unweighted kernels.
    pub kernel: Vec<f64>,
}

fn matrix_power(base: &[f64], m: u32, n: usize, rescale: bool) -> Vec<f64> {
    let mut out = base.to_vec();
    for _ in 1..m {
        out = matmul(&out, base, n);
        if rescale {
            rescale_max(&mut out);
        }
    }
    out
}

fn rescale_max(a: &mut [f64]) {
    let max = a.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        a.iter_mut().for_each(|x| *x /= max);
    }
}

/// For every record `n`, the shortest window ending at `n` whose depths sum
/// to at least `horizon`, together with its kernel products.
pub(crate) fn window_products(
    records: &[MpiIterationRecord],
    tmdp: &TransformedMdp,
    horizon: u64,
    mut pick: impl FnMut(usize) -> Option<usize>,
) -> Vec<(usize, WindowProduct)> {
    let n = tmdp.n_states();
    let mut powers: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; records.len()];
    let mut out = Vec::new();
    for end in 1..records.len() {
        let k = match pick(end) {
            Some(k) => k,
            None => {
                let mut sum = 0u64;
                let mut found = None;
                for k in 1..=end {
                    sum += u64::from(records[end - k].depth);
                    if sum >= horizon {
                        found = Some(k);
                        break;
                    }
                }
                match found {
                    Some(k) => k,
                    None => continue,
                }
            }
        };
        if k == 0 || k > end {
            continue;
        }
        let mut weighted: Option<Vec<f64>> = None;
        let mut kernel: Option<Vec<f64>> = None;
        let mut steps = 0u64;
        for j in (end - k..end).rev() {
            let r = &records[j];
            steps += u64::from(r.depth);
            let (wp, qp) = powers[j].get_or_insert_with(|| {
                let mut w = weighted_matrix(tmdp, &r.policy).entries().to_vec();
                rescale_max(&mut w);
                let q = tmdp.policy_kernel(&r.policy);
                (matrix_power(&w, r.depth, n, true), matrix_power(&q, r.depth, n, false))
            });
            weighted = Some(match weighted {
                None => wp.clone(),
                Some(h) => {
                    let mut p = matmul(&h, wp, n);
                    rescale_max(&mut p);
                    p
                }
            });
            kernel = Some(match kernel {
                None => qp.clone(),
                Some(h) => matmul(&h, qp, n),
            });
        }
        out.push((
            end,
            WindowProduct {
                k,
                steps,
                weighted: weighted.unwrap(),
                kernel: kernel.unwrap(),
            },
        ));
    }
    out
}

/// `min_{i,j} H(i,j)v(j) / Σ_l H(i,l)v(l)`.
pub(crate) fn q_measure_min(h: &[f64], v: &[f64]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let row = &h[i * n..(i + 1) * n];
            let total: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
            row.iter()
                .zip(v)
                .map(|(a, b)| a * b / total)
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Window-by-window check of the geometric contraction of `u_n` toward
/// `e^{Λ̃*}`, plus the matching lower bound on the value entries.
pub fn contraction_diagnostic(
    trace: &MpiTrace,
    tmdp: &TransformedMdp,
    cert: &PositivityCertificate,
    brute: &BruteForceResult,
    m_cap: u32,
) -> Result<ContractionDiagnostic> {
    let horizon = cert.horizon();
    let star = brute.optimal_growth();
    let n = tmdp.n_states();
    let alpha = tmdp.alpha();
    let (d_lo, d_hi) = tmdp.d_bounds();
    let records = &trace.records;
    let windows: Vec<WindowDiagnostic> = window_products(records, tmdp, horizon, |_| None)
        .into_iter()
        .map(|(end, w)| {
            let start = end - w.k;
            let gamma = q_measure_min(&w.weighted, records[start].value_normalized.weights());
            let lhs = records[end].u - star;
            let rhs = (1.0 - gamma) * (records[start].u - star);
            let eps_h = w.kernel.iter().cloned().fold(f64::INFINITY, f64::min);
            let kf = w.k as f64;
            WindowDiagnostic {
                end,
                k_window: w.k,
                steps: w.steps,
                gamma,
                rate_bound: 1.0 - gamma,
                h_min_entry: eps_h,
                lhs,
                rhs,
                holds: lhs <= rhs + CONTRACTION_SLACK,
                value_min: records[end].value_normalized.min_weight(),
                beta_floor: (kf * alpha * d_lo - kf * f64::from(m_cap) * alpha * d_hi).exp() * eps_h
                    / n as f64,
                beta_floor_steps: (alpha * (d_lo - d_hi) * w.steps as f64).exp() * eps_h / n as f64,
            }
        })
        .collect();
    if windows.is_empty() {
        return Err(Error::DiagnosticUnavailable(format!(
            "no window of the trace covers {horizon} evaluation steps"
        )));
    }
    let gamma = windows.iter().map(|w| w.gamma).fold(f64::INFINITY, f64::min);
    Ok(ContractionDiagnostic {
        horizon,
        windows,
        gamma,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub policy: DeterministicPolicy,
    pub lambda_tilde_star_estimate: f64,
    pub lambda_star_estimate: f64,
    pub half_width: f64,
    pub trace: MpiTrace,
}

/// Transforms, runs from the uniform vector, and maps the cost back.
pub fn solve(model: &MdpModel, params: &RiskParams, config: &MpiConfig) -> Result<SolveResult> {
    let tmdp = transform(model, params)?;
    let trace = run_mpi(&tmdp, config, &PositiveValueVector::uniform(tmdp.n_states()))?;
    Ok(SolveResult {
        policy: trace.final_policy.clone(),
        lambda_tilde_star_estimate: trace.final_lambda_tilde,
        lambda_star_estimate: invert_cost(trace.final_lambda_tilde, params.kappa())?,
        half_width: trace.half_width,
        trace,
    })
}
