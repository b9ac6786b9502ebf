//! Entropic optimal transport by log-domain Sinkhorn iterations.
//!
//! Solves `min <T, C> - ε H(T)` subject to `T 1 = μ`, `Tᵀ 1 = ν`, with
//! `H(T) = -Σ T log T`. Potentials `f`, `g` give `T_ij = exp((f_i + g_j - C_ij) / ε)`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once both marginals are met to this ∞-norm error.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub plan: Vec<f64>,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub epsilon: f64,
    pub iters_used: usize,
    pub marginal_error: f64,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.cols + j]
    }

    pub fn converged(&self, tol: f64) -> bool {
        self.marginal_error < tol
    }

    /// `<T, C>`.
    pub fn cost(&self, cost: &[f64]) -> f64 {
        self.plan.iter().zip(cost).map(|(t, c)| t * c).sum()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn marginal_error(plan: &[f64], rows: usize, cols: usize, mu: &[f64], nu: &[f64]) -> f64 {
    let mut err: f64 = 0.0;
    for i in 0..rows {
        let s: f64 = plan[i * cols..(i + 1) * cols].iter().sum();
        err = err.max((s - mu[i]).abs());
    }
    for j in 0..cols {
        let s: f64 = (0..rows).map(|i| plan[i * cols + j]).sum();
        err = err.max((s - nu[j]).abs());
    }
    err
}

fn check_marginal(name: &str, m: &[f64]) -> Result<()> {
    if m.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} must be strictly positive")));
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Solves the regularised transport problem for a row-major `rows × cols` cost.
pub fn sinkhorn(cost: &[f64], rows: usize, cols: usize, mu: &[f64], nu: &[f64], config: &SinkhornConfig) -> Result<TransportPlan> {
    if rows == 0 || cols == 0 {
        return Err(Error::Degenerate(format!("empty {rows}x{cols} transport problem")));
    }
    if cost.len() != rows * cols || mu.len() != rows || nu.len() != cols {
        return Err(Error::shape("sinkhorn", format!("cost {} for {rows}x{cols}", cost.len())));
    }
    if let Some(bad) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!("sinkhorn cost entry {bad}")));
    }
    if !(config.epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    check_marginal("mu", mu)?;
    check_marginal("nu", nu)?;

    let eps = config.epsilon;
    let log_mu: Vec<f64> = mu.iter().map(|v| v.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; rows];
    let mut g = vec![0.0; cols];
    let mut plan = vec![0.0; rows * cols];
    let mut iters = 0;
    let mut err = f64::INFINITY;
    while iters < config.max_iters {
        iters += 1;
        for i in 0..rows {
            let row = &cost[i * cols..(i + 1) * cols];
            f[i] = eps * log_mu[i] - eps * log_sum_exp((0..cols).map(|j| (g[j] - row[j]) / eps));
        }
        for j in 0..cols {
            g[j] = eps * log_nu[j] - eps * log_sum_exp((0..rows).map(|i| (f[i] - cost[i * cols + j]) / eps));
        }
        for i in 0..rows {
            for j in 0..cols {
                plan[i * cols + j] = ((f[i] + g[j] - cost[i * cols + j]) / eps).exp();
            }
        }
        err = marginal_error(&plan, rows, cols, mu, nu);
        if err < config.tol {
            break;
        }
    }
    Ok(TransportPlan {
        rows,
        cols,
        plan,
        mu: mu.to_vec(),
        nu: nu.to_vec(),
        epsilon: eps,
        iters_used: iters,
        marginal_error: err,
    })
}

/// Uniform marginals `1/n`.
pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Plain multiplicative scaling run to a fixed point.
    fn reference(cost: &[f64], rows: usize, cols: usize, mu: &[f64], nu: &[f64], eps: f64) -> Vec<f64> {
        let k: Vec<f64> = cost.iter().map(|c| (-c / eps).exp()).collect();
        let mut u = vec![1.0; rows];
        let mut v = vec![1.0; cols];
        for _ in 0..100_000 {
            let prev = u.clone();
            for i in 0..rows {
                u[i] = mu[i] / (0..cols).map(|j| k[i * cols + j] * v[j]).sum::<f64>();
            }
            for j in 0..cols {
                v[j] = nu[j] / (0..rows).map(|i| k[i * cols + j] * u[i]).sum::<f64>();
            }
            if u.iter().zip(&prev).all(|(a, b)| (a - b).abs() <= 1e-15 * a.abs()) {
                break;
            }
        }
        (0..rows * cols).map(|p| u[p / cols] * k[p] * v[p % cols]).collect()
    }

    fn tight() -> SinkhornConfig {
        SinkhornConfig {
            epsilon: 0.05,
            max_iters: 20_000,
            tol: 1e-13,
        }
    }

    #[test]
    fn constant_cost_is_independent_coupling() {
        let mu = [0.2, 0.5, 0.3];
        let nu = [0.6, 0.4];
        let t = sinkhorn(&[0.7; 6], 3, 2, &mu, &nu, &SinkhornConfig::default()).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((t.get(i, j) - mu[i] * nu[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn two_by_two_prefers_diagonal_and_matches_reference() {
        let cost = [0.0, 1.0, 1.0, 0.0];
        let mu = uniform(2);
        let t = sinkhorn(&cost, 2, 2, &mu, &mu, &tight()).unwrap();
        assert!(t.get(0, 0) > t.get(0, 1));
        let r = reference(&cost, 2, 2, &mu, &mu, 0.05);
        for (a, b) in t.plan.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn single_cell_is_forced() {
        let t = sinkhorn(&[0.3], 1, 1, &[1.0], &[1.0], &SinkhornConfig::default()).unwrap();
        assert!((t.plan[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = SinkhornConfig::default();
        assert!(matches!(sinkhorn(&[], 0, 2, &[], &[0.5, 0.5], &cfg), Err(Error::Degenerate(_))));
        assert!(sinkhorn(&[f64::NAN, 0.0], 1, 2, &[1.0], &[0.5, 0.5], &cfg).is_err());
        assert!(sinkhorn(&[0.0, 0.0], 1, 2, &[1.0], &[0.7, 0.7], &cfg).is_err());
    }

    /// Exhaustive LP optimum over the vertices of the uniform 3×3 transport polytope
    /// (scaled permutation matrices).
    fn lp_optimum(cost: &[f64; 9]) -> f64 {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        perms
            .iter()
            .map(|p| (0..3).map(|i| cost[i * 3 + p[i]]).sum::<f64>() / 3.0)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn shrinking_epsilon_approaches_lp_optimum() {
        let instances = [
            [0.1, 0.9, 0.4, 0.7, 0.2, 0.8, 0.3, 0.6, 0.05],
            [0.5, 0.5, 0.1, 0.2, 0.9, 0.6, 0.8, 0.3, 0.4],
            [1.0, 0.0, 0.5, 0.25, 0.75, 0.0, 0.6, 0.35, 0.9],
        ];
        let mu = uniform(3);
        for cost in &instances {
            let opt = lp_optimum(cost);
            let mut prev = f64::INFINITY;
            for eps in [1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01] {
                let cfg = SinkhornConfig {
                    epsilon: eps,
                    max_iters: 100_000,
                    tol: 1e-12,
                };
                let t = sinkhorn(cost, 3, 3, &mu, &mu, &cfg).unwrap();
                let c = t.cost(cost);
                assert!(c >= opt - 1e-9);
                assert!(c <= prev + 1e-12, "eps {eps}: {c} > {prev}");
                prev = c;
            }
            assert!(prev - opt < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn converged_plans_meet_marginals(
            rows in 1usize..=6,
            cols in 1usize..=5,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.0..2.0)).collect();
            let raw_mu: Vec<f64> = (0..rows).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = raw_mu.iter().sum();
            let mu: Vec<f64> = raw_mu.iter().map(|v| v / s).collect();
            let nu = uniform(cols);
            let cfg = SinkhornConfig { max_iters: 10_000, ..SinkhornConfig::default() };
            let t = sinkhorn(&cost, rows, cols, &mu, &nu, &cfg).unwrap();
            prop_assert!(t.converged(1e-6));
            prop_assert!(t.plan.iter().all(|&v| v >= 0.0));
            prop_assert!((t.plan.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
