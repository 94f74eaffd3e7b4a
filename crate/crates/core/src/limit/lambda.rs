use serde::{Deserialize, Serialize};

use super::{
    weighted_avg_sum_rate_from, DualVars, PowerAllocation, SumRateSolution, Tolerances, Weights,
};
use crate::error::{Error, Result};
use crate::geometry::{detect_symmetric_blocks, ClusterProblem, DEFAULT_SYMMETRY_TOLERANCE};

/// How the per-BS multipliers are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// `λ = 1`, valid when the cluster splits into strongly symmetric blocks
    /// with block-constant weights.
    SymmetricShortcut,
    /// Minimize `G_W(λ)` by gradient descent on central differences.
    GradientDescent,
    /// `λ = 1` regardless: the sum-power upper bound.
    SumPowerRelax,
    /// Symmetric shortcut when it applies, gradient descent otherwise.
    #[default]
    Auto,
}

/// Multipliers chosen by [`optimize_lambda`] and the sum-rate solve at them.
#[derive(Debug, Clone)]
pub struct LambdaSolution {
    pub duals: DualVars,
    pub solution: SumRateSolution,
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// Default central-difference step.
pub const DEFAULT_GRAD_EPS: f64 = 1e-4;

const LS_ALPHA: f64 = 0.3;
const LS_BETA: f64 = 0.5;
const LS_STEP0: f64 = 0.1;

fn scaled_start(
    base: &SumRateSolution,
    duals: &DualVars,
    problem: &ClusterProblem,
) -> PowerAllocation {
    let budget = duals.budget(problem.bs_powers());
    let old = base.powers.allocation.budget;
    let s = if old > 0.0 { budget / old } else { 1.0 };
    PowerAllocation {
        q: base.powers.allocation.q.iter().map(|q| q * s).collect(),
        budget,
    }
}

fn gradient_at(
    problem: &ClusterProblem,
    weights: &Weights,
    base: &SumRateSolution,
    eps: f64,
    tol: &Tolerances,
) -> Result<Vec<f64>> {
    let lam = base.duals.values();
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    if lam.iter().any(|l| eps >= *l) {
        return Err(Error::invalid(format!(
            "eps {eps} must be below the smallest multiplier"
        )));
    }
    let mut grad = Vec::with_capacity(lam.len());
    for m in 0..lam.len() {
        let eval = |sign: f64| -> Result<f64> {
            let mut l = lam.to_vec();
            l[m] += sign * eps;
            let d = DualVars::new(l)?;
            let init = scaled_start(base, &d, problem);
            Ok(weighted_avg_sum_rate_from(problem, weights, &d, Some(&init), tol)?.value)
        };
        let plus = eval(1.0)?;
        let minus = eval(-1.0)?;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Central-difference gradient of `G_W` with respect to each `λ_m`.
pub fn grad_lambda_numeric(
    problem: &ClusterProblem,
    weights: &Weights,
    duals: &DualVars,
    eps: f64,
    tol: &Tolerances,
) -> Result<Vec<f64>> {
    if duals.values().iter().any(|l| eps >= *l) {
        return Err(Error::invalid(format!(
            "eps {eps} must be below the smallest multiplier"
        )));
    }
    let base = weighted_avg_sum_rate_from(problem, weights, duals, None, tol)?;
    gradient_at(problem, weights, &base, eps, tol)
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Why the symmetric shortcut does not apply, if it does not.
fn symmetry_failure(problem: &ClusterProblem, weights: &Weights) -> Option<String> {
    let Some(blocks) = detect_symmetric_blocks(problem, DEFAULT_SYMMETRY_TOLERANCE) else {
        return Some(format!(
            "no partition of {} groups into strongly symmetric blocks of size {} with equal BS powers",
            problem.n_groups(),
            problem.n_bs()
        ));
    };
    let w = weights.values();
    for blk in &blocks {
        let w0 = w[blk[0]];
        if blk
            .iter()
            .any(|&k| (w[k] - w0).abs() > 1e-12 * w0.abs().max(1e-300))
        {
            return Some(format!("weights differ within block {blk:?}"));
        }
    }
    None
}

/// Chooses the multipliers according to `mode` and returns the sum-rate
/// solution at them. `init` warm-starts the first power iteration.
pub fn optimize_lambda(
    problem: &ClusterProblem,
    weights: &Weights,
    mode: LambdaMode,
    init: Option<&PowerAllocation>,
    tol: &Tolerances,
) -> Result<LambdaSolution> {
    let b = problem.n_bs();
    let fixed = |duals: DualVars| -> Result<LambdaSolution> {
        let solution = weighted_avg_sum_rate_from(problem, weights, &duals, init, tol)?;
        Ok(LambdaSolution {
            duals,
            solution,
            gradient_norm: 0.0,
            iterations: 0,
        })
    };
    match mode {
        LambdaMode::SumPowerRelax => fixed(DualVars::ones(b)),
        LambdaMode::SymmetricShortcut => match symmetry_failure(problem, weights) {
            None => fixed(DualVars::ones(b)),
            Some(why) => Err(Error::NotSymmetric(why)),
        },
        LambdaMode::Auto if b == 1 || symmetry_failure(problem, weights).is_none() => {
            fixed(DualVars::ones(b))
        }
        LambdaMode::GradientDescent if b == 1 => fixed(DualVars::ones(b)),
        LambdaMode::Auto | LambdaMode::GradientDescent => descend(problem, weights, init, tol),
    }
}

fn descend(
    problem: &ClusterProblem,
    weights: &Weights,
    init: Option<&PowerAllocation>,
    tol: &Tolerances,
) -> Result<LambdaSolution> {
    let b = problem.n_bs();
    let eps = DEFAULT_GRAD_EPS;
    let mut cur = weighted_avg_sum_rate_from(problem, weights, &DualVars::ones(b), init, tol)?;
    let mut grad = gradient_at(problem, weights, &cur, eps, tol)?;
    let mut iterations = 0;
    let mut step = LS_STEP0;
    // Finite-difference noise grows with the objective; an absolute target
    // is out of reach for large weights.
    let target = |s: &SumRateSolution| tol.grad_tol * s.value.abs().max(1.0);
    while sup(&grad) > target(&cur) {
        if iterations >= tol.max_iter {
            return Err(Error::NoConvergence {
                what: "multiplier descent",
                iterations,
                residual: sup(&grad),
            });
        }
        iterations += 1;
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let lam = cur.duals.values().to_vec();
        // Small weights flatten `G`; let the trial step grow back after
        // each accepted one instead of restarting from a fixed length.
        let mut t = step / LS_BETA;
        let mut moved = None;
        for _ in 0..60 {
            let raw: Vec<f64> = lam.iter().zip(&grad).map(|(l, g)| l - t * g).collect();
            if raw.iter().all(|x| *x > 0.0) {
                let d = DualVars::new(raw)?.normalized();
                // Keep room for the next central difference.
                if d.values().iter().all(|x| *x > 2.0 * eps) {
                    let init = scaled_start(&cur, &d, problem);
                    let s = weighted_avg_sum_rate_from(problem, weights, &d, Some(&init), tol)?;
                    if s.value <= cur.value - LS_ALPHA * t * g2 {
                        step = t;
                        moved = Some(s);
                        break;
                    }
                }
            }
            t *= LS_BETA;
        }
        match moved {
            Some(s) => {
                cur = s;
                grad = gradient_at(problem, weights, &cur, eps, tol)?;
            }
            // No sufficient decrease left at this resolution.
            None => {
                return Err(Error::NoConvergence {
                    what: "multiplier descent",
                    iterations,
                    residual: sup(&grad),
                })
            }
        }
    }
    Ok(LambdaSolution {
        duals: cur.duals.clone(),
        gradient_norm: sup(&grad),
        solution: cur,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    fn symmetric_example() -> ClusterProblem {
        let (a, b, c, d, e, f) = (0.9, 0.7, 0.2, 0.3, 0.4, 0.1);
        ClusterProblem::new(
            4.0,
            &[vec![a, b, b, a, f, e, d, c], vec![f, e, d, c, a, b, b, a]],
            vec![10.0, 10.0],
        )
        .unwrap()
    }

    #[test]
    fn single_bs_gradient_vanishes() {
        let p = ClusterProblem::new(2.0, &[vec![0.8, 0.3, 0.5]], vec![4.0]).unwrap();
        let w = Weights::new(vec![1.0, 2.0, 1.5]).unwrap();
        let g = grad_lambda_numeric(&p, &w, &DualVars::ones(1), 1e-4, &tol()).unwrap();
        assert!(g[0].abs() < 1e-8, "{g:?}");
        for mode in [
            LambdaMode::SymmetricShortcut,
            LambdaMode::GradientDescent,
            LambdaMode::SumPowerRelax,
            LambdaMode::Auto,
        ] {
            let s = optimize_lambda(&p, &w, mode, None, &tol()).unwrap();
            assert_eq!(s.duals.values(), &[1.0]);
        }
    }

    #[test]
    fn eps_must_stay_below_lambda() {
        let p = ClusterProblem::new(2.0, &[vec![0.8], vec![0.3]], vec![4.0, 4.0]).unwrap();
        let d = DualVars::new(vec![0.5, 1.5]).unwrap();
        assert!(grad_lambda_numeric(&p, &Weights::uniform(1), &d, 0.5, &tol()).is_err());
    }

    #[test]
    fn symmetric_example_has_flat_gradient() {
        let p = symmetric_example();
        let w = Weights::new(vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = grad_lambda_numeric(&p, &w, &DualVars::ones(2), 1e-4, &tol()).unwrap();
        assert!(sup(&g) <= 1e-6, "{g:?}");
        let s = optimize_lambda(&p, &w, LambdaMode::SymmetricShortcut, None, &tol()).unwrap();
        assert_eq!(s.duals.values(), &[1.0, 1.0]);
    }

    #[test]
    fn shortcut_rejects_asymmetry() {
        let p = symmetric_example();
        let w = Weights::new(vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 5.0]).unwrap();
        match optimize_lambda(&p, &w, LambdaMode::SymmetricShortcut, None, &tol()) {
            Err(Error::NotSymmetric(msg)) => assert!(msg.contains("[3, 7]"), "{msg}"),
            other => panic!("expected NotSymmetric, got {other:?}"),
        }
    }

    #[test]
    fn descent_never_increases_the_dual() {
        let p = ClusterProblem::new(
            1.0,
            &[vec![0.9, 0.8, 0.1], vec![0.2, 0.3, 0.7]],
            vec![1.0, 8.0],
        )
        .unwrap();
        let w = Weights::new(vec![1.0, 1.2, 0.8]).unwrap();
        let at_one = weighted_avg_sum_rate_from(&p, &w, &DualVars::ones(2), None, &tol()).unwrap();
        let s = optimize_lambda(&p, &w, LambdaMode::GradientDescent, None, &tol()).unwrap();
        assert!(s.solution.value <= at_one.value + 1e-12);
        let mean: f64 = s.duals.values().iter().sum::<f64>() / 2.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(s.gradient_norm <= 1e-6);
    }
}
