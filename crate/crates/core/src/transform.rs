//! Aperiodicity transformation of an MDP at fixed `(alpha, kappa)`.
//!
//! Costs become `d = (1/α)·ln((1−κ)e^{αc} + κ)` and each transition row is
//! mixed with a self-loop of weight `κ / ((1−κ)e^{αc} + κ)`, so every policy
//! kernel of the transformed model has a strictly positive diagonal. The
//! optimal policies coincide with those of the original model, and the
//! optimal costs are related by [`forward_cost`] / [`invert_cost`].

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::model::{renormalize, DeterministicPolicy, MdpModel, RiskParams};
use crate::operators::{apply_optimal_operator, PositiveValueVector, TieBreak};

/// Largest admissible `α·cost_hi` before `e^{αc}` is considered unsafe.
pub const MAX_EXPONENT: f64 = 700.0;

/// Largest state count for which [`positivity_horizon`] runs the exact
/// adversarial search; larger models fall back to the action-intersection kernel.
pub const EXACT_HORIZON_MAX_STATES: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformedMdp {
    n_states: usize,
    n_actions: usize,
    q: Vec<f64>,
    d: Vec<f64>,
    alpha: f64,
    kappa: f64,
    source_cost_hi: f64,
    d_lo: f64,
    d_hi: f64,
    source_digest: String,
}

impl TransformedMdp {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    /// Transformed transition distribution `Q[s][a][·]`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.q[start..start + self.n_states]
    }

    pub fn d(&self, s: usize, a: usize) -> f64 {
        self.d[s * self.n_actions + a]
    }

    /// `(min, max)` of the transformed cost over all state-action pairs.
    pub fn d_bounds(&self) -> (f64, f64) {
        (self.d_lo, self.d_hi)
    }

    pub fn transition_flat(&self) -> &[f64] {
        &self.q
    }

    pub fn cost_flat(&self) -> &[f64] {
        &self.d
    }

    /// Guaranteed lower bound on every self-loop probability `Q[i][a][i]`.
    pub fn self_loop_floor(&self) -> f64 {
        let k = self.kappa;
        k / ((1.0 - k) * (self.alpha * self.source_cost_hi).exp() + k)
    }

    /// Stochastic kernel `Q_f`, row-major `n × n`.
    pub fn policy_kernel(&self, policy: &DeterministicPolicy) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_states * self.n_states);
        for (s, &a) in policy.actions().iter().enumerate() {
            out.extend_from_slice(self.row(s, a));
        }
        out
    }
}

/// Applies the aperiodicity transformation.
pub fn transform(model: &MdpModel, params: &RiskParams) -> Result<TransformedMdp> {
    model.ensure_valid()?;
    let alpha = params.alpha();
    let kappa = params.kappa();
    if alpha * model.cost_hi() > MAX_EXPONENT {
        return Err(Error::param(format!(
            "alpha * cost_hi = {} exceeds {MAX_EXPONENT}; rescale the costs or reduce alpha",
            alpha * model.cost_hi()
        )));
    }
    let n = model.n_states();
    let m = model.n_actions();
    let mut q = Vec::with_capacity(n * m * n);
    let mut d = Vec::with_capacity(n * m);
    for s in 0..n {
        for a in 0..m {
            let c = model.cost(s, a);
            let weight = (1.0 - kappa) * (alpha * c).exp();
            let denom = weight + kappa;
            d.push(forward_cost(alpha * c, kappa) / alpha);
            let start = q.len();
            q.extend(model.row(s, a).iter().enumerate().map(|(t, &p)| {
                let self_loop = if t == s { kappa } else { 0.0 };
                (weight * p + self_loop) / denom
            }));
            renormalize(&mut q[start..]);
        }
    }
    let d_lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let d_hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(TransformedMdp {
        n_states: n,
        n_actions: m,
        q,
        d,
        alpha,
        kappa,
        source_cost_hi: model.cost_hi(),
        d_lo,
        d_hi,
        source_digest: model.digest(),
    })
}

/// Maps an original optimal cost to the transformed one:
/// `ln((1−κ)e^{Λ} + κ)`.
pub fn forward_cost(lambda_star: f64, kappa: f64) -> f64 {
    // (1−κ)e^x + κ = 1 + (1−κ)(e^x − 1)
    ((1.0 - kappa) * lambda_star.exp_m1()).ln_1p()
}

/// Inverse of [`forward_cost`]: `ln((e^{Λ̃} − κ)/(1 − κ))`.
///
/// Fails when `e^{Λ̃} − κ < 1e-15`, which no consistent transformed cost can
/// produce.
pub fn invert_cost(lambda_tilde: f64, kappa: f64) -> Result<f64> {
    // e^y − κ = (1 − κ) + (e^y − 1)
    let excess = (1.0 - kappa) + lambda_tilde.exp_m1();
    if !(excess >= 1e-15) {
        return Err(Error::Domain(format!(
            "e^lambda_tilde = {} is below kappa = {kappa}",
            lambda_tilde.exp()
        )));
    }
    Ok((lambda_tilde.exp_m1() / (1.0 - kappa)).ln_1p())
}

/// Positivity horizon of the transformed kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct PositivityCertificate {
    /// Analytic bound `(n−1)·m^n + 1`, saturating at `u64::MAX`.
    pub r_bound: u64,
    /// Smallest `r` such that every product of `r` policy kernels is
    /// entrywise positive, when found within the search cap.
    pub r_empirical: Option<u64>,
    /// Minimum entry of `Q_g^r` for the greedy policy `g` at the uniform
    /// vector, with `r = r_empirical`.
    pub witness_min_entry: Option<f64>,
}

impl PositivityCertificate {
    /// Horizon used by the window-based diagnostics.
    pub fn horizon(&self) -> u64 {
        self.r_empirical.unwrap_or(self.r_bound)
    }
}

pub fn analytic_horizon_bound(n_states: usize, n_actions: usize) -> u64 {
    let pow = (n_actions as u64).checked_pow(n_states as u32);
    pow.and_then(|p| p.checked_mul(n_states as u64 - 1))
        .and_then(|x| x.checked_add(1))
        .unwrap_or(u64::MAX)
}

/// Computes the positivity horizon certificate.
///
/// For up to [`EXACT_HORIZON_MAX_STATES`] states the search is exact: from each
/// start state it tracks the set of reachable states while an adversary picks
/// one action per state at every step, and reports the worst-case number of
/// steps until the set is full. The positive diagonal makes reachable sets
/// grow monotonically, so a set that can map to itself never fills. Larger
/// models use the Boolean powers of the action-intersection kernel, which
/// certifies positivity for every policy sequence but may overestimate `r`.
pub fn positivity_horizon(tmdp: &TransformedMdp, search_cap: u64) -> PositivityCertificate {
    let n = tmdp.n_states;
    let m = tmdp.n_actions;
    let r_bound = analytic_horizon_bound(n, m);
    let worst = if n <= EXACT_HORIZON_MAX_STATES {
        exact_worst_case_horizon(tmdp)
    } else {
        intersection_horizon(tmdp, search_cap)
    };
    let r_empirical = worst.filter(|&r| r <= search_cap.max(1)).map(|r| r.max(1));
    let witness_min_entry = r_empirical.map(|r| {
        let uniform = PositiveValueVector::uniform(n);
        let (_, greedy) = apply_optimal_operator(tmdp, &uniform, TieBreak::default());
        let kernel = tmdp.policy_kernel(&greedy);
        let mut product = kernel.clone();
        for _ in 1..r {
            product = matmul(&product, &kernel, n);
        }
        product.iter().cloned().fold(f64::INFINITY, f64::min)
    });
    PositivityCertificate {
        r_bound,
        r_empirical,
        witness_min_entry,
    }
}

fn support_masks(tmdp: &TransformedMdp) -> Vec<Vec<u64>> {
    let n = tmdp.n_states;
    (0..n)
        .map(|s| {
            (0..tmdp.n_actions)
                .map(|a| {
                    tmdp.row(s, a)
                        .iter()
                        .enumerate()
                        .filter(|(_, &p)| p > 0.0)
                        .fold(0u64, |mask, (t, _)| mask | (1 << t))
                })
                .collect()
        })
        .collect()
}

fn exact_worst_case_horizon(tmdp: &TransformedMdp) -> Option<u64> {
    let n = tmdp.n_states;
    let full: u64 = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let supports = support_masks(tmdp);
    let mut memo: HashMap<u64, Option<u64>> = HashMap::new();
    let mut worst = 0u64;
    for s in 0..n {
        let steps = steps_to_full(1u64 << s, full, &supports, &mut memo)?;
        worst = worst.max(steps);
    }
    Some(worst)
}

/// Worst-case number of steps until `set` becomes `full`, `None` if never.
fn steps_to_full(
    set: u64,
    full: u64,
    supports: &[Vec<u64>],
    memo: &mut HashMap<u64, Option<u64>>,
) -> Option<u64> {
    if set == full {
        return Some(0);
    }
    if let Some(&cached) = memo.get(&set) {
        return cached;
    }
    let mut unions: HashSet<u64> = HashSet::from([0]);
    for (state, masks) in supports.iter().enumerate() {
        if set & (1 << state) == 0 {
            continue;
        }
        unions = unions
            .iter()
            .flat_map(|&u| masks.iter().map(move |&mask| u | mask))
            .collect();
    }
    let result = if unions.contains(&set) {
        None
    } else {
        let mut worst = 0u64;
        let mut stuck = false;
        for &next in &unions {
            match steps_to_full(next, full, supports, memo) {
                Some(k) => worst = worst.max(k),
                None => {
                    stuck = true;
                    break;
                }
            }
        }
        if stuck {
            None
        } else {
            Some(worst + 1)
        }
    };
    memo.insert(set, result);
    result
}

fn intersection_horizon(tmdp: &TransformedMdp, search_cap: u64) -> Option<u64> {
    let n = tmdp.n_states;
    let kernel: Vec<bool> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (0..tmdp.n_actions).all(|a| tmdp.row(i, a)[j] > 0.0))
        .collect();
    let mut power = kernel.clone();
    for r in 1..=search_cap {
        if power.iter().all(|&b| b) {
            return Some(r);
        }
        power = bool_matmul(&power, &kernel, n);
    }
    None
}

pub(crate) fn bool_matmul(a: &[bool], b: &[bool], n: usize) -> Vec<bool> {
    let mut out = vec![false; n * n];
    for i in 0..n {
        for k in 0..n {
            if a[i * n + k] {
                for j in 0..n {
                    out[i * n + j] |= b[k * n + j];
                }
            }
        }
    }
    out
}

pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let x = a[i * n + k];
            if x != 0.0 {
                for j in 0..n {
                    out[i * n + j] += x * b[k * n + j];
                }
            }
        }
    }
    out
}
