use std::io::Write;

use faer::linalg::solvers::Solve;
use faer::Mat;

use super::{DualVars, PowerAllocation, RatePoint, SinrProfile, SortedGains, Tolerances, Weights};
use crate::error::{Error, Result};
use crate::fmt::g12;
use crate::geometry::ClusterProblem;

/// Solution of one decoding stage: the coupled `(u, v)` system restricted to
/// positions `k..A`.
#[derive(Debug, Clone)]
pub(crate) struct StageSolution {
    /// Per-BS variables `u_m`.
    pub u: Vec<f64>,
    /// `Γ` for positions `k..A`.
    pub sinr: Vec<f64>,
    /// SINR per unit power, `γ Σ_m g_mj u_m`, for positions `k..A`.
    pub eta: Vec<f64>,
    pub log_det: f64,
    pub residual: f64,
}

/// Solves `u_m = 1/(1 + Σ_ℓ a_mℓ v_ℓ)`, `v_ℓ = 1/(1 + γ Σ_m a_mℓ u_m)` over the
/// stage columns `k..A`, where `a_mℓ = g_mℓ Q_ℓ`.
///
/// Newton on the `B` unknowns `u`, safeguarded by backtracking on the
/// residual and by plain substitution when backtracking fails. Substitution
/// is monotone from `u = 1`, which is also the cold start.
pub(crate) fn solve_stage(
    sg: &SortedGains,
    q: &[f64],
    k: usize,
    warm: Option<&[f64]>,
    tol: &Tolerances,
) -> Result<StageSolution> {
    let (b, a, gamma) = (sg.b, sg.a, sg.gamma);
    let cols = k..a;
    let coef = |m: usize, l: usize| sg.g[m * a + l] * q[l];

    let mut u: Vec<f64> = match warm {
        Some(w) if w.len() == b && w.iter().all(|x| *x > 0.0 && *x <= 1.0) => w.to_vec(),
        _ => vec![1.0; b],
    };
    let mut v = vec![0.0; a];
    let mut phi = vec![0.0; b];

    // Evaluates v(u), Φ(u) and the relative residual max |u − Φ|/u.
    let eval = |u: &[f64], v: &mut [f64], phi: &mut [f64]| -> f64 {
        for l in cols.clone() {
            let s: f64 = (0..b).map(|m| coef(m, l) * u[m]).sum();
            v[l] = 1.0 / (1.0 + gamma * s);
        }
        let mut res: f64 = 0.0;
        for m in 0..b {
            let s: f64 = cols.clone().map(|l| coef(m, l) * v[l]).sum();
            phi[m] = 1.0 / (1.0 + s);
            res = res.max((u[m] - phi[m]).abs() / u[m]);
        }
        res
    };

    let target = (tol.fp_tol * 1e-4).max(4.0 * f64::EPSILON);
    let mut res = eval(&u, &mut v, &mut phi);
    let mut iter = 0;
    while res > target {
        iter += 1;
        if iter > tol.max_iter {
            return Err(Error::NoConvergence {
                what: "SINR fixed point",
                iterations: tol.max_iter,
                residual: res,
            });
        }
        let step = newton_step(sg, q, k, &u, &v, &phi);
        let mut accepted = false;
        if let Some(delta) = step {
            let mut t = 1.0;
            for _ in 0..30 {
                let trial: Vec<f64> = u.iter().zip(&delta).map(|(x, d)| x + t * d).collect();
                if trial.iter().all(|x| *x > 0.0 && *x <= 1.0) {
                    let (mut tv, mut tp) = (v.clone(), phi.clone());
                    let tres = eval(&trial, &mut tv, &mut tp);
                    if tres < res {
                        u = trial;
                        v = tv;
                        phi = tp;
                        res = tres;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
        }
        if !accepted {
            let before = res;
            u.copy_from_slice(&phi);
            res = eval(&u, &mut v, &mut phi);
            // Stuck at rounding level on both routes.
            if res >= before && res <= tol.fp_tol {
                break;
            }
        }
    }
    if res > tol.fp_tol {
        return Err(Error::NoConvergence {
            what: "SINR fixed point",
            iterations: iter,
            residual: res,
        });
    }

    let eta: Vec<f64> = cols
        .clone()
        .map(|l| gamma * (0..b).map(|m| sg.g[m * a + l] * u[m]).sum::<f64>())
        .collect();
    let sinr: Vec<f64> = cols.clone().zip(&eta).map(|(l, e)| q[l] * e).collect();

    // Three-term log-det expression at the fixed point.
    let mut log_det: f64 = sinr.iter().map(|s| s.ln_1p()).sum();
    for (m, um) in u.iter().enumerate() {
        let s: f64 = cols.clone().map(|l| coef(m, l) / (1.0 + sinr[l - k])).sum();
        log_det += gamma * s.ln_1p();
        let cross: f64 = cols
            .clone()
            .map(|l| coef(m, l) * um / (1.0 + sinr[l - k]))
            .sum();
        log_det -= gamma * cross;
    }

    // Residual of the SINR equation itself, relative per component.
    let mut residual: f64 = 0.0;
    for (i, l) in cols.clone().enumerate() {
        let rhs: f64 = gamma
            * (0..b)
                .map(|m| {
                    let den: f64 = cols.clone().map(|p| coef(m, p) / (1.0 + sinr[p - k])).sum();
                    coef(m, l) / (1.0 + den)
                })
                .sum::<f64>();
        let r = if sinr[i] > 0.0 {
            (sinr[i] - rhs).abs() / sinr[i]
        } else {
            rhs.abs()
        };
        residual = residual.max(r);
    }
    if residual > tol.fp_tol {
        return Err(Error::NoConvergence {
            what: "SINR fixed point",
            iterations: iter,
            residual,
        });
    }
    Ok(StageSolution {
        u,
        sinr,
        eta,
        log_det,
        residual,
    })
}

/// Newton direction for `F(u) = u − Φ(u)`; `None` if the Jacobian is singular.
fn newton_step(
    sg: &SortedGains,
    q: &[f64],
    k: usize,
    u: &[f64],
    v: &[f64],
    phi: &[f64],
) -> Option<Vec<f64>> {
    let (b, a, gamma) = (sg.b, sg.a, sg.gamma);
    let coef = |m: usize, l: usize| sg.g[m * a + l] * q[l];
    // J = I − γ diag(Φ²) M, M_{mn} = Σ_ℓ a_mℓ a_nℓ v_ℓ².
    let jac = Mat::<f64>::from_fn(b, b, |m, n| {
        let s: f64 = (k..a).map(|l| coef(m, l) * coef(n, l) * v[l] * v[l]).sum();
        let d = if m == n { 1.0 } else { 0.0 };
        d - gamma * phi[m] * phi[m] * s
    });
    let rhs = Mat::<f64>::from_fn(b, 1, |m, _| phi[m] - u[m]);
    let delta = if b == 1 {
        let j = jac[(0, 0)];
        if j == 0.0 {
            return None;
        }
        vec![rhs[(0, 0)] / j]
    } else {
        let sol = jac.partial_piv_lu().solve(&rhs);
        (0..b).map(|m| sol[(m, 0)]).collect()
    };
    delta.iter().all(|d| d.is_finite()).then_some(delta)
}

/// Solves every stage from the last to the first, warm-starting each from the
/// next one.
pub(crate) fn solve_all_stages(
    sg: &SortedGains,
    q: &[f64],
    warm: Option<&[Vec<f64>]>,
    tol: &Tolerances,
) -> Result<Vec<StageSolution>> {
    let mut out: Vec<Option<StageSolution>> = vec![None; sg.a];
    for k in (0..sg.a).rev() {
        let start = match (warm, out.get(k + 1).and_then(Option::as_ref)) {
            (Some(w), _) => Some(w[k].as_slice()),
            (None, Some(next)) => Some(next.u.as_slice()),
            (None, None) => None,
        };
        out[k] = Some(solve_stage(sg, q, k, start, tol)?);
    }
    Ok(out
        .into_iter()
        .map(|s| s.expect("every stage solved"))
        .collect())
}

fn check_lengths(problem: &ClusterProblem, powers: &PowerAllocation) -> Result<()> {
    if powers.q.len() != problem.n_groups() {
        return Err(Error::invalid(format!(
            "expected {} group powers, got {}",
            problem.n_groups(),
            powers.q.len()
        )));
    }
    Ok(())
}

fn check_stage(problem: &ClusterProblem, stage: usize) -> Result<()> {
    if stage >= problem.n_groups() {
        return Err(Error::invalid(format!(
            "stage {stage} out of range for {} groups",
            problem.n_groups()
        )));
    }
    Ok(())
}

/// SINRs `Γ^{(j)}` of decoding stage `stage` (0-based position in the order
/// of `weights`), for positions `stage..A`.
pub fn solve_sinr_fixed_point(
    problem: &ClusterProblem,
    powers: &PowerAllocation,
    duals: &DualVars,
    weights: &Weights,
    stage: usize,
    tol: &Tolerances,
) -> Result<Vec<f64>> {
    check_lengths(problem, powers)?;
    check_stage(problem, stage)?;
    let sg = SortedGains::new(problem, duals, weights.order())?;
    let q = sg.sorted_powers(powers)?;
    Ok(solve_stage(&sg, &q, stage, None, tol)?.sinr)
}

/// All stages of the SINR system at once.
pub fn sinr_profile(
    problem: &ClusterProblem,
    powers: &PowerAllocation,
    duals: &DualVars,
    weights: &Weights,
    tol: &Tolerances,
) -> Result<SinrProfile> {
    check_lengths(problem, powers)?;
    let sg = SortedGains::new(problem, duals, weights.order())?;
    let q = sg.sorted_powers(powers)?;
    let stages = solve_all_stages(&sg, &q, None, tol)?;
    Ok(SinrProfile {
        order: sg.order.clone(),
        residual: stages.iter().map(|s| s.residual).fold(0.0, f64::max),
        gamma: stages.into_iter().map(|s| s.sinr).collect(),
    })
}

/// Large-system limit of `(1/N) log|I + Σ_{ℓ ≥ stage} H̄ H̄ᴴ Q|` in nats.
pub fn asymptotic_log_det(
    problem: &ClusterProblem,
    powers: &PowerAllocation,
    duals: &DualVars,
    weights: &Weights,
    stage: usize,
    tol: &Tolerances,
) -> Result<f64> {
    check_lengths(problem, powers)?;
    check_stage(problem, stage)?;
    let sg = SortedGains::new(problem, duals, weights.order())?;
    let q = sg.sorted_powers(powers)?;
    Ok(solve_stage(&sg, &q, stage, None, tol)?.log_det)
}

/// Log-det of the groups in `tail` alone, decoded last, at the given powers.
pub(crate) fn tail_log_det(
    problem: &ClusterProblem,
    powers: &PowerAllocation,
    duals: &DualVars,
    tail: &[usize],
    tol: &Tolerances,
) -> Result<f64> {
    check_lengths(problem, powers)?;
    let a = problem.n_groups();
    if tail.is_empty() {
        return Ok(0.0);
    }
    let mut in_tail = vec![false; a];
    for &k in tail {
        in_tail[k] = true;
    }
    let order: Vec<usize> = (0..a)
        .filter(|&k| !in_tail[k])
        .chain(tail.iter().copied())
        .collect();
    let sg = SortedGains::new(problem, duals, &order)?;
    let q = sg.sorted_powers(powers)?;
    Ok(solve_stage(&sg, &q, a - tail.len(), None, tol)?.log_det)
}

/// Per-user rates as differences of consecutive stage log-dets.
pub(crate) fn rates_from_stages(
    sg: &SortedGains,
    stages: &[StageSolution],
    tol: &Tolerances,
) -> Result<RatePoint> {
    let mut sorted = Vec::with_capacity(sg.a);
    for k in 0..sg.a {
        let next = stages.get(k + 1).map_or(0.0, |s| s.log_det);
        let r = stages[k].log_det - next;
        if r < -tol.num_tol {
            return Err(Error::Numerical(format!(
                "negative rate {r:.3e} at decoding position {k}"
            )));
        }
        sorted.push(r.max(0.0));
    }
    Ok(RatePoint {
        r: sg.unsort(&sorted),
    })
}

/// Per-user ergodic rate of every group for the given powers and order.
pub fn group_rates(
    problem: &ClusterProblem,
    powers: &PowerAllocation,
    duals: &DualVars,
    weights: &Weights,
    tol: &Tolerances,
) -> Result<RatePoint> {
    check_lengths(problem, powers)?;
    let sg = SortedGains::new(problem, duals, weights.order())?;
    let q = sg.sorted_powers(powers)?;
    let stages = solve_all_stages(&sg, &q, None, tol)?;
    rates_from_stages(&sg, &stages, tol)
}

/// Dumps a profile as `k,j,group,sinr,mmse` rows (decoding positions).
pub fn write_sinr_csv<W: Write>(profile: &SinrProfile, mut out: W) -> std::io::Result<()> {
    writeln!(out, "k,j,group,sinr,mmse")?;
    for (k, row) in profile.gamma.iter().enumerate() {
        for (i, s) in row.iter().enumerate() {
            let j = k + i;
            writeln!(
                out,
                "{k},{j},{},{},{}",
                profile.order[j],
                g12(*s),
                g12(1.0 / (1.0 + s))
            )?;
        }
    }
    Ok(())
}
