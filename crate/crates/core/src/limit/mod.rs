//! Large-system-limit engine: SINR fixed points, iterative power allocation,
//! asymptotic rates and per-BS Lagrange multipliers.

mod fixed_point;
mod lambda;
mod powers;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ClusterProblem;

pub(crate) use fixed_point::tail_log_det;
pub use fixed_point::{
    asymptotic_log_det, group_rates, sinr_profile, solve_sinr_fixed_point, write_sinr_csv,
};
pub use lambda::{grad_lambda_numeric, optimize_lambda, LambdaMode, LambdaSolution};
pub(crate) use powers::optimize_sorted;
pub use powers::{
    optimize_powers_alg1, optimize_powers_from, optimize_powers_with, weighted_avg_sum_rate,
    weighted_avg_sum_rate_from, AsymptoticOracle, PowerSolution, StageOracle, StageTable,
    SumRateSolution, TraceRow,
};

/// Solver tolerances and iteration caps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative residual of the SINR fixed point.
    pub fp_tol: f64,
    /// Settling threshold of the power iteration, relative to the budget.
    pub kkt_tol: f64,
    /// Sup-norm target on the multiplier gradient, relative to the objective
    /// once it exceeds 1.
    pub grad_tol: f64,
    /// Slack for quantities that must be nonnegative.
    pub num_tol: f64,
    pub max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            fp_tol: 1e-10,
            kkt_tol: 1e-8,
            grad_tol: 1e-6,
            num_tol: 1e-9,
            max_iter: 10_000,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0 && x < 1.0;
        if !(pos(self.fp_tol) && pos(self.kkt_tol) && pos(self.grad_tol) && pos(self.num_tol)) {
            return Err(Error::invalid("tolerances must lie in (0, 1)"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        Ok(())
    }
}

/// Nonnegative per-group weights with their increasing sort order.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    w: Vec<f64>,
    order: Vec<usize>,
}

impl Weights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::invalid("weights must be non-empty"));
        }
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        let mut order: Vec<usize> = (0..w.len()).collect();
        // Stable: equal weights keep index order.
        order.sort_by(|&a, &b| w[a].total_cmp(&w[b]));
        Ok(Weights { w, order })
    }

    pub fn uniform(n: usize) -> Self {
        Weights::new(vec![1.0; n]).expect("ones are valid weights")
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// `order()[k]` is the group decoded at stage `k` (weights increasing).
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Increments `W_{π_k} − W_{π_{k−1}}` along the sort order, with `W_{π_0} = 0`.
    pub fn deltas(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.order
            .iter()
            .map(|&k| {
                let d = self.w[k] - prev;
                prev = self.w[k];
                d
            })
            .collect()
    }

    pub fn max(&self) -> f64 {
        self.w[*self.order.last().expect("non-empty")]
    }
}

/// Per-BS multipliers of the per-BS power constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualVars {
    lambda: Vec<f64>,
}

impl DualVars {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if lambda.is_empty() || lambda.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::invalid(
                "every lambda must be finite and strictly positive",
            ));
        }
        Ok(DualVars { lambda })
    }

    /// All multipliers equal to one: the sum-power relaxation.
    pub fn ones(b: usize) -> Self {
        DualVars {
            lambda: vec![1.0; b],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.lambda
    }

    /// Rescaled so the multipliers average to one.
    pub fn normalized(&self) -> Self {
        let mean = self.lambda.iter().sum::<f64>() / self.lambda.len() as f64;
        DualVars {
            lambda: self.lambda.iter().map(|l| l / mean).collect(),
        }
    }

    /// Uplink budget `Σ λ_m P_m`.
    pub fn budget(&self, bs_powers: &[f64]) -> f64 {
        self.lambda.iter().zip(bs_powers).map(|(l, p)| l * p).sum()
    }
}

/// Dual-uplink group powers and the budget they share.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation {
    pub q: Vec<f64>,
    pub budget: f64,
}

impl PowerAllocation {
    pub fn new(q: Vec<f64>, budget: f64) -> Result<Self> {
        if q.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid(
                "group powers must be finite and nonnegative",
            ));
        }
        if !(budget.is_finite() && budget >= 0.0) {
            return Err(Error::invalid(
                "power budget must be finite and nonnegative",
            ));
        }
        Ok(PowerAllocation { q, budget })
    }

    pub fn uniform(n: usize, budget: f64) -> Self {
        PowerAllocation {
            q: vec![budget / n as f64; n],
            budget,
        }
    }

    pub fn zeros(n: usize) -> Self {
        PowerAllocation {
            q: vec![0.0; n],
            budget: 0.0,
        }
    }
}

/// Asymptotic SINRs of every decoding stage.
///
/// Rows and columns are positions in the decoding order: `gamma[k][i]` is the
/// SINR at stage `k` of the group decoded at position `k + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SinrProfile {
    pub order: Vec<usize>,
    pub gamma: Vec<Vec<f64>>,
    /// Largest relative fixed-point residual over all stages.
    pub residual: f64,
}

impl SinrProfile {
    /// SINR of the group at position `j` when decoding starts at position `k`.
    pub fn sinr(&self, k: usize, j: usize) -> f64 {
        self.gamma[k][j - k]
    }

    /// Per-component MMSE `1/(1 + Γ)`.
    pub fn mmse(&self, k: usize, j: usize) -> f64 {
        1.0 / (1.0 + self.sinr(k, j))
    }
}

/// Per-user ergodic rates of each group, indexed by group.
#[derive(Debug, Clone, PartialEq)]
pub struct RatePoint {
    pub r: Vec<f64>,
}

impl RatePoint {
    pub fn weighted_sum(&self, w: &[f64]) -> f64 {
        self.r.iter().zip(w).map(|(r, w)| r * w).sum()
    }
}

/// Cluster data in decoding order: `g[m * a + j] = β²_{m,π_j}/λ_m`.
#[derive(Debug, Clone)]
pub(crate) struct SortedGains {
    pub gamma: f64,
    pub b: usize,
    pub a: usize,
    pub order: Vec<usize>,
    pub g: Vec<f64>,
}

impl SortedGains {
    pub fn new(problem: &ClusterProblem, duals: &DualVars, order: &[usize]) -> Result<Self> {
        let (b, a) = (problem.n_bs(), problem.n_groups());
        if duals.values().len() != b {
            return Err(Error::invalid(format!(
                "expected {b} multipliers, got {}",
                duals.values().len()
            )));
        }
        if order.len() != a {
            return Err(Error::invalid(format!(
                "expected {a} weights, got {}",
                order.len()
            )));
        }
        let mut g = Vec::with_capacity(a * b);
        for (m, lam) in duals.values().iter().enumerate() {
            g.extend(order.iter().map(|&k| problem.beta(m, k).powi(2) / lam));
        }
        Ok(SortedGains {
            gamma: problem.gamma(),
            b,
            a,
            order: order.to_vec(),
            g,
        })
    }

    /// Powers of `alloc` in decoding order.
    pub fn sorted_powers(&self, alloc: &PowerAllocation) -> Result<Vec<f64>> {
        if alloc.q.len() != self.a {
            return Err(Error::invalid(format!(
                "expected {} group powers, got {}",
                self.a,
                alloc.q.len()
            )));
        }
        Ok(self.order.iter().map(|&k| alloc.q[k]).collect())
    }

    /// Scatters a decoding-order vector back to group indices.
    pub fn unsort(&self, sorted: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.a];
        for (pos, &k) in self.order.iter().enumerate() {
            out[k] = sorted[pos];
        }
        out
    }
}
