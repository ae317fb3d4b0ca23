#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsmpi::model::{generate_random, DeterministicPolicy, MdpModel, RiskParams};
use rsmpi::operators::weighted_matrix;
use rsmpi::transform::TransformedMdp;

/// Spectral radius from the full complex spectrum (Schur decomposition),
/// independent of the crate's power iteration.
pub fn spectral_radius(n: usize, row_major: &[f64]) -> f64 {
    DMatrix::from_row_slice(n, n, row_major)
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Optimal log growth rate and argmin set by full enumeration with the
/// Schur-based eigenvalue oracle.
pub fn schur_optimum(tmdp: &TransformedMdp, tol: f64) -> (f64, Vec<DeterministicPolicy>) {
    let (n, m) = (tmdp.n_states(), tmdp.n_actions());
    let count = (m as u128).pow(n as u32);
    let vals: Vec<(DeterministicPolicy, f64)> = (0..count)
        .map(|i| {
            let f = DeterministicPolicy::from_index(i, n, m);
            let w = weighted_matrix(tmdp, &f);
            let l = spectral_radius(n, w.entries()).ln();
            (f, l)
        })
        .collect();
    let best = vals.iter().map(|(_, l)| *l).fold(f64::INFINITY, f64::min);
    let set = vals
        .into_iter()
        .filter(|(_, l)| *l <= best + tol)
        .map(|(f, _)| f)
        .collect();
    (best, set)
}

/// Same as [`schur_optimum`] on `diag(e^{αc_f})P_f`.
pub fn schur_optimum_original(model: &MdpModel, alpha: f64, tol: f64) -> (f64, Vec<DeterministicPolicy>) {
    let (n, m) = (model.n_states(), model.n_actions());
    let count = (m as u128).pow(n as u32);
    let vals: Vec<(DeterministicPolicy, f64)> = (0..count)
        .map(|i| {
            let f = DeterministicPolicy::from_index(i, n, m);
            let mut a = Vec::with_capacity(n * n);
            for s in 0..n {
                let w = (alpha * model.cost(s, f.action(s))).exp();
                a.extend(model.row(s, f.action(s)).iter().map(|p| w * p));
            }
            (f, spectral_radius(n, &a).ln())
        })
        .collect();
    let best = vals.iter().map(|(_, l)| *l).fold(f64::INFINITY, f64::min);
    let set = vals
        .into_iter()
        .filter(|(_, l)| *l <= best + tol)
        .map(|(f, _)| f)
        .collect();
    (best, set)
}

/// The dense instance grid: `n ∈ {2..5}`, `m ∈ {2, 3}`, `α ∈ {0.5, 1, 2}`.
pub fn dense_instance(seed: u64) -> (MdpModel, RiskParams) {
    let n = 2 + (seed % 4) as usize;
    let m = 2 + ((seed / 4) % 2) as usize;
    let alpha = [0.5, 1.0, 2.0][(seed % 3) as usize];
    let model = generate_random(1000 + seed, n, m, (0.0, 1.0)).unwrap();
    (model, RiskParams::new(alpha, 0.5).unwrap())
}

/// Sparse model: every action moves `s → s+1` with probability 0.6 and to
/// one random state with 0.4. The cycle keeps every policy irreducible while
/// making products of few kernels have zero entries.
pub fn sparse_cycle_model(seed: u64, n: usize, m: usize) -> MdpModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![0.0; n * m * n];
    let mut c = Vec::with_capacity(n * m);
    for s in 0..n {
        for a in 0..m {
            let row = &mut p[(s * m + a) * n..(s * m + a + 1) * n];
            row[(s + 1) % n] += 0.6;
            row[rng.random_range(0..n)] += 0.4;
            c.push(rng.random_range(0.0..1.0));
        }
    }
    MdpModel::new(n, m, p, c).unwrap()
}
