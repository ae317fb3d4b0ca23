//! Finite MDP data model: transition tensor, cost matrix, policies, and the
//! risk-neutral baselines (stationary distribution, average cost).
//!
//! Transition probabilities are stored flat in `[s][a][s']` order and costs in
//! `[s][a]` order. A model can be constructed with any finite-or-not values;
//! [`MdpModel::validate`] reports every violated invariant, and the solver
//! entry points refuse models whose report is non-empty.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Row-sum tolerance applied to input models.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Mixing weight applied by [`generate_random`].
pub const GENERATOR_MIXING: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct MdpModel {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    cost: Vec<f64>,
    cost_lo: f64,
    cost_hi: f64,
    labels: Option<Vec<String>>,
}

impl MdpModel {
    /// Builds a model from flat `[s][a][s']` transitions and `[s][a]` costs.
    ///
    /// Only shapes are checked here. The cost bounds are taken as the min and
    /// max of the finite cost entries.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        cost: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Shape(format!(
                "need at least one state and one action, got n_states={n_states}, n_actions={n_actions}"
            )));
        }
        let expected = n_states
            .checked_mul(n_actions)
            .and_then(|x| x.checked_mul(n_states))
            .ok_or_else(|| Error::Shape("model dimensions overflow".into()))?;
        if transition.len() != expected {
            return Err(Error::Shape(format!(
                "transition has {} entries, expected {expected}",
                transition.len()
            )));
        }
        if cost.len() != n_states * n_actions {
            return Err(Error::Shape(format!(
                "cost has {} entries, expected {}",
                cost.len(),
                n_states * n_actions
            )));
        }
        let (cost_lo, cost_hi) = finite_bounds(&cost);
        Ok(Self {
            n_states,
            n_actions,
            transition,
            cost,
            cost_lo,
            cost_hi,
            labels: None,
        })
    }

    /// Builds a model from nested `transition[s][a][s']` and `cost[s][a]`.
    pub fn from_nested(transition: &[Vec<Vec<f64>>], cost: &[Vec<f64>]) -> Result<Self> {
        let n = transition.len();
        if n == 0 {
            return Err(Error::Shape("transition tensor is empty".into()));
        }
        let m = transition[0].len();
        if cost.len() != n {
            return Err(Error::Shape(format!(
                "cost has {} rows, expected {n}",
                cost.len()
            )));
        }
        let mut flat_p = Vec::with_capacity(n * m * n);
        for (s, per_state) in transition.iter().enumerate() {
            if per_state.len() != m {
                return Err(Error::Shape(format!(
                    "state {s} has {} actions, expected {m}",
                    per_state.len()
                )));
            }
            for (a, row) in per_state.iter().enumerate() {
                if row.len() != n {
                    return Err(Error::Shape(format!(
                        "transition row (s={s}, a={a}) has {} entries, expected {n}",
                        row.len()
                    )));
                }
                flat_p.extend_from_slice(row);
            }
        }
        let mut flat_c = Vec::with_capacity(n * m);
        for (s, row) in cost.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Shape(format!(
                    "cost row {s} has {} entries, expected {m}",
                    row.len()
                )));
            }
            flat_c.extend_from_slice(row);
        }
        Self::new(n, m, flat_p, flat_c)
    }

    /// Overrides the derived cost bounds. [`MdpModel::validate`] reports costs
    /// falling outside them.
    pub fn with_cost_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.cost_lo = lo;
        self.cost_hi = hi;
        self
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_states {
            return Err(Error::Shape(format!(
                "{} labels for {} states",
                labels.len(),
                self.n_states
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn cost_lo(&self) -> f64 {
        self.cost_lo
    }

    pub fn cost_hi(&self) -> f64 {
        self.cost_hi
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Transition distribution `P[s][a][·]`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a)[next]
    }

    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost[s * self.n_actions + a]
    }

    pub fn transition_flat(&self) -> &[f64] {
        &self.transition
    }

    pub fn cost_flat(&self) -> &[f64] {
        &self.cost
    }

    /// Lists every violated invariant. An empty report means the model is valid.
    pub fn validate(&self) -> ValidationReport {
        let mut issues = Vec::new();
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.row(s, a);
                let mut finite = true;
                for (t, &p) in row.iter().enumerate() {
                    if !p.is_finite() {
                        finite = false;
                        issues.push(ValidationIssue::NonFiniteProbability {
                            state: s,
                            action: a,
                            next: t,
                            value: p,
                        });
                    } else if p < 0.0 {
                        issues.push(ValidationIssue::NegativeProbability {
                            state: s,
                            action: a,
                            next: t,
                            value: p,
                        });
                    }
                }
                if finite {
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        issues.push(ValidationIssue::RowSum {
                            state: s,
                            action: a,
                            sum,
                            deficit: 1.0 - sum,
                        });
                    }
                }
                let c = self.cost(s, a);
                if !c.is_finite() {
                    issues.push(ValidationIssue::NonFiniteCost {
                        state: s,
                        action: a,
                        value: c,
                    });
                } else if c < self.cost_lo || c > self.cost_hi {
                    issues.push(ValidationIssue::CostOutOfBounds {
                        state: s,
                        action: a,
                        value: c,
                        lo: self.cost_lo,
                        hi: self.cost_hi,
                    });
                }
            }
        }
        ValidationReport { issues }
    }

    /// Returns `Err(InvalidModel)` unless the validation report is empty.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidModel(report))
        }
    }

    /// Transition matrix `P_f` of a policy, row-major `n × n`.
    pub fn policy_matrix(&self, policy: &DeterministicPolicy) -> Vec<f64> {
        let n = self.n_states;
        let mut out = Vec::with_capacity(n * n);
        for (s, &a) in policy.actions().iter().enumerate() {
            out.extend_from_slice(self.row(s, a));
        }
        out
    }

    /// SHA-256 over dimensions, transitions, and costs (bit patterns).
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.n_states as u64).to_le_bytes());
        hasher.update((self.n_actions as u64).to_le_bytes());
        for x in self.transition.iter().chain(self.cost.iter()) {
            hasher.update(x.to_bits().to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn finite_bounds(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &c in values.iter().filter(|c| c.is_finite()) {
        lo = lo.min(c);
        hi = hi.max(c);
    }
    if lo > hi {
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    RowSum {
        state: usize,
        action: usize,
        sum: f64,
        deficit: f64,
    },
    NegativeProbability {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },
    NonFiniteProbability {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },
    NonFiniteCost {
        state: usize,
        action: usize,
        value: f64,
    },
    CostOutOfBounds {
        state: usize,
        action: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ValidationIssue::RowSum {
                state,
                action,
                sum,
                deficit,
            } => write!(
                f,
                "transition row (s={state}, a={action}) sums to {sum} (deficit {deficit:e})"
            ),
            ValidationIssue::NegativeProbability {
                state,
                action,
                next,
                value,
            } => write!(
                f,
                "negative probability {value} at (s={state}, a={action}, s'={next})"
            ),
            ValidationIssue::NonFiniteProbability {
                state,
                action,
                next,
                value,
            } => write!(
                f,
                "non-finite probability {value} at (s={state}, a={action}, s'={next})"
            ),
            ValidationIssue::NonFiniteCost {
                state,
                action,
                value,
            } => write!(f, "non-finite cost {value} at (s={state}, a={action})"),
            ValidationIssue::CostOutOfBounds {
                state,
                action,
                value,
                lo,
                hi,
            } => write!(
                f,
                "cost {value} at (s={state}, a={action}) outside [{lo}, {hi}]"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return write!(f, "model is valid");
        }
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  {issue}")?;
        }
        Ok(())
    }
}

/// Risk factor `alpha > 0` and aperiodicity weight `kappa ∈ (0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskParams {
    alpha: f64,
    kappa: f64,
}

impl RiskParams {
    pub const DEFAULT_KAPPA: f64 = 0.5;

    pub fn new(alpha: f64, kappa: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::param(format!("alpha must be positive, got {alpha}")));
        }
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(Error::param(format!("kappa must lie in (0, 1), got {kappa}")));
        }
        Ok(Self { alpha, kappa })
    }

    pub fn with_default_kappa(alpha: f64) -> Result<Self> {
        Self::new(alpha, Self::DEFAULT_KAPPA)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }
}

/// A stationary deterministic policy: one action index per state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeterministicPolicy(Vec<usize>);

impl DeterministicPolicy {
    pub fn new(actions: Vec<usize>) -> Self {
        Self(actions)
    }

    pub fn constant(n_states: usize, action: usize) -> Self {
        Self(vec![action; n_states])
    }

    pub fn actions(&self) -> &[usize] {
        &self.0
    }

    pub fn action(&self, state: usize) -> usize {
        self.0[state]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks length and action range against a model's dimensions.
    pub fn check(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.0.len() != n_states {
            return Err(Error::param(format!(
                "policy has {} entries, model has {n_states} states",
                self.0.len()
            )));
        }
        if let Some((s, &a)) = self.0.iter().enumerate().find(|(_, &a)| a >= n_actions) {
            return Err(Error::param(format!(
                "policy action {a} at state {s} out of range (n_actions = {n_actions})"
            )));
        }
        Ok(())
    }

    /// Parses dash-joined action indices, e.g. `"0-2-1"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let actions = spec
            .trim()
            .split('-')
            .map(|tok| {
                tok.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::param(format!("malformed policy spec {spec:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self(actions))
    }

    /// Number of deterministic policies, `n_actions^n_states`, or `None` on overflow.
    pub fn count(n_states: usize, n_actions: usize) -> Option<u128> {
        (n_actions as u128).checked_pow(n_states as u32)
    }

    /// Policy at position `index` in mixed-radix order (state 0 most significant).
    pub fn from_index(mut index: u128, n_states: usize, n_actions: usize) -> Self {
        let mut actions = vec![0; n_states];
        for slot in actions.iter_mut().rev() {
            *slot = (index % n_actions as u128) as usize;
            index /= n_actions as u128;
        }
        Self(actions)
    }

    pub fn index(&self, n_actions: usize) -> u128 {
        self.0
            .iter()
            .fold(0u128, |acc, &a| acc * n_actions as u128 + a as u128)
    }
}

impl fmt::Display for DeterministicPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution(Vec<f64>);

impl StationaryDistribution {
    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Mixes every row with the uniform kernel: `(1 − ε)·P + ε·(1/n)·𝟙𝟙ᵀ`.
pub fn apply_mixing(model: &MdpModel, epsilon_mix: f64) -> Result<MdpModel> {
    if !(epsilon_mix > 0.0 && epsilon_mix < 1.0) {
        return Err(Error::param(format!(
            "epsilon_mix must lie in (0, 1), got {epsilon_mix}"
        )));
    }
    let n = model.n_states;
    let floor = epsilon_mix / n as f64;
    let mut transition = model.transition.clone();
    for row in transition.chunks_mut(n) {
        for p in row.iter_mut() {
            *p = (1.0 - epsilon_mix) * *p + floor;
        }
        renormalize(row);
    }
    Ok(MdpModel {
        transition,
        ..model.clone()
    })
}

pub(crate) fn renormalize(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    if sum != 1.0 {
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
}

/// Seeded random model: Dirichlet(1) transition rows mixed with weight
/// [`GENERATOR_MIXING`], costs uniform in `[lo, hi)`.
pub fn generate_random(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    cost_range: (f64, f64),
) -> Result<MdpModel> {
    let (lo, hi) = cost_range;
    if n_states == 0 || n_actions == 0 {
        return Err(Error::param("n_states and n_actions must be positive"));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::param(format!("cost range [{lo}, {hi}] is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let draws: Vec<f64> = (0..n_states).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = draws.iter().sum();
        transition.extend(draws.iter().map(|x| x / total));
    }
    let cost = (0..n_states * n_actions)
        .map(|_| rng.random_range(lo..hi))
        .collect();
    let raw = MdpModel::new(n_states, n_actions, transition, cost)?;
    apply_mixing(&raw, GENERATOR_MIXING)
}

/// Support-graph test: the chain `P_f` is irreducible and aperiodic.
pub fn check_policy_irreducible_aperiodic(model: &MdpModel, policy: &DeterministicPolicy) -> bool {
    let n = model.n_states;
    let p = model.policy_matrix(policy);
    let adjacency: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| p[i * n + j] > 0.0).collect())
        .collect();
    is_irreducible_aperiodic(&adjacency)
}

/// Irreducible iff every state reaches and is reached from state 0; the
/// period is the gcd of `level(u) + 1 − level(v)` over all edges, where
/// `level` is the BFS depth from state 0.
pub(crate) fn is_irreducible_aperiodic(adjacency: &[Vec<usize>]) -> bool {
    let n = adjacency.len();
    let level = bfs_levels(adjacency, 0);
    if level.iter().any(Option::is_none) {
        return false;
    }
    let mut reverse = vec![Vec::new(); n];
    for (u, outs) in adjacency.iter().enumerate() {
        for &v in outs {
            reverse[v].push(u);
        }
    }
    if bfs_levels(&reverse, 0).iter().any(Option::is_none) {
        return false;
    }
    let mut period = 0usize;
    for (u, outs) in adjacency.iter().enumerate() {
        let lu = level[u].unwrap();
        for &v in outs {
            let lv = level[v].unwrap();
            period = gcd(period, (lu + 1).abs_diff(lv));
        }
    }
    period == 1
}

fn bfs_levels(adjacency: &[Vec<usize>], root: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; adjacency.len()];
    level[root] = Some(0);
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        let next = level[u].unwrap() + 1;
        for &v in &adjacency[u] {
            if level[v].is_none() {
                level[v] = Some(next);
                queue.push_back(v);
            }
        }
    }
    level
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Stationary distribution residual target.
pub const STATIONARY_TOL: f64 = 1e-12;

/// Solves `πᵀ P_f = πᵀ`, `Σπ = 1` by LU on the bordered balance system,
/// polishing with power steps if the residual is above [`STATIONARY_TOL`].
pub fn stationary_distribution(
    model: &MdpModel,
    policy: &DeterministicPolicy,
) -> Result<StationaryDistribution> {
    policy.check(model.n_states, model.n_actions)?;
    if !check_policy_irreducible_aperiodic(model, policy) {
        return Err(Error::Precondition(format!(
            "chain under policy {policy} is not irreducible and aperiodic"
        )));
    }
    let n = model.n_states;
    let p = model.policy_matrix(policy);
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // row j of (Pᵀ − I)
            a[(j, i)] = p[i * n + j] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let solved = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Precondition("balance equations are singular".into()))?;
    let mut pi: Vec<f64> = solved.iter().map(|&x| x.max(0.0)).collect();
    renormalize(&mut pi);
    for _ in 0..1000 {
        let next = left_multiply(&pi, &p, n);
        let residual = pi
            .iter()
            .zip(&next)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if residual <= STATIONARY_TOL {
            break;
        }
        pi = next;
        renormalize(&mut pi);
    }
    Ok(StationaryDistribution(pi))
}

pub(crate) fn left_multiply(pi: &[f64], p: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, &w) in pi.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += w * p[i * n + j];
        }
    }
    out
}

/// `J_f = Σ_s π(s)·c(s, f(s))`.
pub fn risk_neutral_average_cost(model: &MdpModel, policy: &DeterministicPolicy) -> Result<f64> {
    let pi = stationary_distribution(model, policy)?;
    Ok(pi
        .probabilities()
        .iter()
        .enumerate()
        .map(|(s, &w)| w * model.cost(s, policy.action(s)))
        .sum())
}
