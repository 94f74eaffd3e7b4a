use std::io::Write;

use super::fixed_point::{rates_from_stages, solve_all_stages, StageSolution};
use super::{DualVars, PowerAllocation, RatePoint, SortedGains, Tolerances, Weights};
use crate::error::{Error, Result};
use crate::fmt::g12;
use crate::geometry::ClusterProblem;

/// Per-stage quantities the power iteration needs, indexed by decoding
/// position: entry `[k][j − k]` refers to the group at position `j` when
/// decoding starts at position `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTable {
    /// `1 − mmse`.
    pub gain: Vec<Vec<f64>>,
    /// Derivative of the stage log-det with respect to the group's power:
    /// `(1 − mmse)/Q_j` for powered groups, the SINR per unit power for
    /// unpowered ones.
    pub marginal: Vec<Vec<f64>>,
}

/// Source of MMSE statistics for the power iteration, either the
/// large-system limit or a sample average over channel draws.
pub trait StageOracle {
    /// Number of decoding positions.
    fn positions(&self) -> usize;

    /// Evaluates every stage at powers `q` given in decoding order.
    fn evaluate(&mut self, q: &[f64]) -> Result<StageTable>;
}

/// One iterate of the power update, in decoding positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub position: usize,
    pub q: f64,
    /// Sup-norm change of this iterate relative to the budget.
    pub residual: f64,
}

/// Outcome of the power iteration.
#[derive(Debug, Clone)]
pub struct PowerSolution {
    pub allocation: PowerAllocation,
    pub iterations: usize,
    pub restarts: usize,
    /// `max_j |Q·num_j/den − Q_j| / Q` at the returned powers.
    pub kkt_residual: f64,
    /// Largest `marginal/ξ − 1` over unpowered groups (≤ 0 when optimal).
    pub zero_set_violation: f64,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

impl PowerSolution {
    /// Writes the iteration trace as `iter,j,Q_j,residual` rows.
    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iter,j,Q_j,residual")?;
        for r in &self.trace {
            writeln!(
                out,
                "{},{},{},{}",
                r.iter,
                r.position,
                g12(r.q),
                g12(r.residual)
            )?;
        }
        Ok(())
    }
}

/// Sorted-position result of [`optimize_powers_with`].
#[derive(Debug, Clone)]
pub(crate) struct SortedPowers {
    pub q: Vec<f64>,
    pub iterations: usize,
    pub restarts: usize,
    pub kkt_residual: f64,
    pub zero_set_violation: f64,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

/// Iterations without settling after which slow groups are extrapolated:
/// the weakest group heading to zero is switched off, otherwise every
/// active group jumps to its extrapolated limit.
const STALL_ITERS: usize = 500;

/// Aitken limit of `prev → cur → next`; `next` itself when the last two
/// steps are not a geometric contraction.
fn aitken(prev: f64, cur: f64, next: f64) -> f64 {
    let (d1, d2) = (cur - prev, next - cur);
    let r = d2 / d1;
    if d1 != 0.0 && r > 0.0 && r < 1.0 {
        next + d2 * r / (1.0 - r)
    } else {
        next
    }
}

/// Multiplicative KKT iteration shared by the asymptotic and Monte Carlo
/// paths.
///
/// `deltas` are the weight increments in decoding order, `init` optional
/// starting powers in decoding order. Groups with zero weight start and stay
/// unpowered. Active groups are updated by `Q_j ← Q·num_j/den`; a group whose
/// power decays below `kkt_tol·Q`, or whose extrapolated limit is zero once
/// progress stalls, is switched off, and once the active set
/// settles every unpowered group is tested against the multiplier
/// `ξ = den/Q` and the worst violator is switched back on. Both moves
/// warm-restart from the current powers.
///
/// Never fails on slow convergence: `converged` is false and the best
/// iterate (smallest KKT residual) is returned instead.
pub(crate) fn optimize_sorted<O: StageOracle + ?Sized>(
    oracle: &mut O,
    deltas: &[f64],
    budget: f64,
    init: Option<&[f64]>,
    tol: &Tolerances,
    record_trace: bool,
) -> Result<SortedPowers> {
    let a = oracle.positions();
    if deltas.len() != a {
        return Err(Error::invalid(
            "weight increments do not match the group count",
        ));
    }
    if !(budget.is_finite() && budget > 0.0) {
        return Err(Error::invalid("power budget must be positive"));
    }
    // Cumulative increment up to position j is the weight at j.
    let mut cum = Vec::with_capacity(a);
    let mut acc = 0.0;
    for d in deltas {
        acc += d;
        cum.push(acc);
    }
    let weighted: Vec<bool> = cum.iter().map(|w| *w > 0.0).collect();
    if !weighted.iter().any(|w| *w) {
        return Err(Error::invalid("all weights are zero"));
    }

    let mut active: Vec<bool> = match init {
        Some(q0) if q0.len() == a => weighted
            .iter()
            .zip(q0)
            .map(|(w, q)| *w && *q > 0.0)
            .collect(),
        _ => weighted.clone(),
    };
    if !active.iter().any(|x| *x) {
        active = weighted.clone();
    }
    let mut q: Vec<f64> = match init {
        Some(q0) if q0.len() == a => active
            .iter()
            .zip(q0)
            .map(|(on, q)| if *on { *q } else { 0.0 })
            .collect(),
        _ => vec![0.0; a],
    };
    if !(q.iter().sum::<f64>() > 0.0) {
        let n = active.iter().filter(|x| **x).count() as f64;
        q = active
            .iter()
            .map(|on| if *on { budget / n } else { 0.0 })
            .collect();
    }
    normalize(&mut q, budget);

    let max_restarts = 4 * a + 4;
    let mut restarts = 0;
    let mut since_restart = 0;
    let mut trace = Vec::new();
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    // Previous iterate, cleared whenever the sequence is restarted.
    let mut prev: Option<Vec<f64>> = None;

    for iter in 0..tol.max_iter {
        let table = oracle.evaluate(&q)?;
        let mut num = vec![0.0; a];
        for j in 0..a {
            if active[j] {
                num[j] = (0..=j).map(|k| deltas[k] * table.gain[k][j - k]).sum();
            }
        }
        let den: f64 = num.iter().sum();
        if !(den > 0.0) {
            return Err(Error::Numerical("no active group can carry power".into()));
        }
        let xi = den / budget;
        let next: Vec<f64> = num.iter().map(|n| budget * n / den).collect();
        // Stationarity ratio of each active group; a group still decaying
        // towards zero keeps this large until it is switched off.
        let change = (0..a)
            .filter(|&j| active[j])
            .map(|j| {
                if q[j] > 0.0 {
                    (next[j] / q[j] - 1.0).abs()
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max);
        let marginal =
            |j: usize| -> f64 { (0..=j).map(|k| deltas[k] * table.marginal[k][j - k]).sum() };
        let violation = (0..a)
            .filter(|&j| weighted[j] && !active[j])
            .map(|j| marginal(j) / xi - 1.0)
            .fold(f64::NEG_INFINITY, f64::max);

        if best.as_ref().map_or(true, |(r, _, _)| change < *r) {
            best = Some((change, violation, q.clone()));
        }
        if record_trace {
            trace.extend(q.iter().enumerate().map(|(j, v)| TraceRow {
                iter,
                position: j,
                q: *v,
                residual: change,
            }));
        }

        if change <= tol.kkt_tol {
            if violation <= tol.kkt_tol || restarts >= max_restarts {
                return Ok(SortedPowers {
                    q,
                    iterations: iter + 1,
                    restarts,
                    kkt_residual: change,
                    zero_set_violation: violation.max(-1.0),
                    converged: violation <= tol.kkt_tol,
                    trace,
                });
            }
            // Reactivate the worst violator (lowest position on ties).
            let mut pick = None;
            let mut worst = f64::NEG_INFINITY;
            for j in (0..a).filter(|&j| weighted[j] && !active[j]) {
                let v = marginal(j) / xi;
                if v > worst {
                    worst = v;
                    pick = Some(j);
                }
            }
            let j = pick.expect("a violator exists");
            active[j] = true;
            let n = active.iter().filter(|x| **x).count() as f64;
            for x in q.iter_mut() {
                *x *= 1.0 - 1.0 / n;
            }
            q[j] = budget / n;
            normalize(&mut q, budget);
            restarts += 1;
            since_restart = 0;
            prev = None;
            continue;
        }

        // Groups decaying to zero: switch off the one with the lowest
        // marginal (lowest position on ties).
        since_restart += 1;
        let limits: Option<Vec<f64>> = match &prev {
            Some(p) if since_restart >= STALL_ITERS => {
                Some((0..a).map(|j| aitken(p[j], q[j], next[j])).collect())
            }
            _ => None,
        };
        let mut drop = None;
        let mut lowest = f64::INFINITY;
        for j in (0..a).filter(|&j| active[j]) {
            let decaying = next[j] < q[j];
            let tiny = next[j] <= tol.kkt_tol * budget;
            let vanishing = limits.as_ref().is_some_and(|l| l[j] <= 1e-3 * next[j]);
            if decaying && (tiny || vanishing) {
                let m = if q[j] > 0.0 { num[j] / q[j] } else { 0.0 };
                if m < lowest {
                    lowest = m;
                    drop = Some(j);
                }
            }
        }
        prev = Some(std::mem::replace(&mut q, next));
        if let Some(j) = drop {
            if active.iter().filter(|x| **x).count() > 1 && restarts < max_restarts {
                active[j] = false;
                q[j] = 0.0;
                normalize(&mut q, budget);
                restarts += 1;
                since_restart = 0;
                prev = None;
            }
        } else if let Some(l) = limits {
            for j in (0..a).filter(|&j| active[j]) {
                q[j] = l[j].max(0.5 * q[j]);
            }
            normalize(&mut q, budget);
            since_restart = 0;
            prev = None;
        }
    }

    let (residual, violation, q) = best.expect("at least one iteration");
    Ok(SortedPowers {
        q,
        iterations: tol.max_iter,
        restarts,
        kkt_residual: residual,
        zero_set_violation: violation.max(-1.0),
        converged: false,
        trace,
    })
}

fn normalize(q: &mut [f64], budget: f64) {
    let s: f64 = q.iter().sum();
    if s > 0.0 {
        for x in q.iter_mut() {
            *x *= budget / s;
        }
    }
}

/// Large-system oracle: solves the SINR fixed point of every stage,
/// warm-starting from the previous evaluation.
pub struct AsymptoticOracle {
    sg: SortedGains,
    tol: Tolerances,
    last: Option<Vec<StageSolution>>,
}

impl AsymptoticOracle {
    pub fn new(
        problem: &ClusterProblem,
        duals: &DualVars,
        weights: &Weights,
        tol: &Tolerances,
    ) -> Result<Self> {
        Ok(AsymptoticOracle {
            sg: SortedGains::new(problem, duals, weights.order())?,
            tol: *tol,
            last: None,
        })
    }

    pub(crate) fn gains(&self) -> &SortedGains {
        &self.sg
    }

    pub(crate) fn solve(&mut self, q: &[f64]) -> Result<&[StageSolution]> {
        let warm: Option<Vec<Vec<f64>>> = self
            .last
            .as_ref()
            .map(|s| s.iter().map(|x| x.u.clone()).collect());
        let stages = solve_all_stages(&self.sg, q, warm.as_deref(), &self.tol)?;
        self.last = Some(stages);
        Ok(self.last.as_deref().expect("just stored"))
    }
}

impl StageOracle for AsymptoticOracle {
    fn positions(&self) -> usize {
        self.sg.a
    }

    fn evaluate(&mut self, q: &[f64]) -> Result<StageTable> {
        let stages = self.solve(q)?;
        let mut gain = Vec::with_capacity(stages.len());
        let mut marginal = Vec::with_capacity(stages.len());
        for s in stages {
            gain.push(s.sinr.iter().map(|g| g / (1.0 + g)).collect());
            marginal.push(
                s.sinr
                    .iter()
                    .zip(&s.eta)
                    .map(|(g, e)| e / (1.0 + g))
                    .collect(),
            );
        }
        Ok(StageTable { gain, marginal })
    }
}

fn into_solution(order: &[usize], sp: SortedPowers, budget: f64) -> PowerSolution {
    let trace = sp
        .trace
        .into_iter()
        .map(|r| TraceRow {
            position: order[r.position],
            ..r
        })
        .collect();
    let mut q = vec![0.0; order.len()];
    for (pos, &k) in order.iter().enumerate() {
        q[k] = sp.q[pos];
    }
    PowerSolution {
        allocation: PowerAllocation { q, budget },
        iterations: sp.iterations,
        restarts: sp.restarts,
        kkt_residual: sp.kkt_residual,
        zero_set_violation: sp.zero_set_violation,
        converged: sp.converged,
        trace,
    }
}

/// Runs the shared power iteration against any oracle. `init` and the
/// result are indexed by group; the trace is indexed by group too.
pub fn optimize_powers_with<O: StageOracle + ?Sized>(
    oracle: &mut O,
    weights: &Weights,
    budget: f64,
    init: Option<&PowerAllocation>,
    tol: &Tolerances,
    record_trace: bool,
) -> Result<PowerSolution> {
    let order = weights.order();
    let init_sorted: Option<Vec<f64>> = init.map(|p| order.iter().map(|&k| p.q[k]).collect());
    let sp = optimize_sorted(
        oracle,
        &weights.deltas(),
        budget,
        init_sorted.as_deref(),
        tol,
        record_trace,
    )?;
    Ok(into_solution(order, sp, budget))
}

/// Optimal dual-uplink powers for weights `weights` under multipliers
/// `duals`, in the large-system limit.
pub fn optimize_powers_alg1(
    problem: &ClusterProblem,
    weights: &Weights,
    duals: &DualVars,
    tol: &Tolerances,
) -> Result<PowerSolution> {
    optimize_powers_from(problem, weights, duals, None, tol)
}

/// As [`optimize_powers_alg1`], starting from `init` (rescaled to the budget).
pub fn optimize_powers_from(
    problem: &ClusterProblem,
    weights: &Weights,
    duals: &DualVars,
    init: Option<&PowerAllocation>,
    tol: &Tolerances,
) -> Result<PowerSolution> {
    Ok(solve_sum_rate(problem, weights, duals, init, tol, false)?.powers)
}

/// Weighted average sum rate at the optimal powers.
#[derive(Debug, Clone)]
pub struct SumRateSolution {
    /// `Σ_k W_k R_k`.
    pub value: f64,
    pub rates: RatePoint,
    pub powers: PowerSolution,
    pub duals: DualVars,
}

/// `G_W(λ)`: maximal weighted sum of asymptotic rates under budget
/// `Σ λ_m P_m`.
pub fn weighted_avg_sum_rate(
    problem: &ClusterProblem,
    weights: &Weights,
    duals: &DualVars,
    tol: &Tolerances,
) -> Result<SumRateSolution> {
    weighted_avg_sum_rate_from(problem, weights, duals, None, tol)
}

/// As [`weighted_avg_sum_rate`], warm-started from `init`.
pub fn weighted_avg_sum_rate_from(
    problem: &ClusterProblem,
    weights: &Weights,
    duals: &DualVars,
    init: Option<&PowerAllocation>,
    tol: &Tolerances,
) -> Result<SumRateSolution> {
    solve_sum_rate(problem, weights, duals, init, tol, true)
}

fn solve_sum_rate(
    problem: &ClusterProblem,
    weights: &Weights,
    duals: &DualVars,
    init: Option<&PowerAllocation>,
    tol: &Tolerances,
    zero_weights_ok: bool,
) -> Result<SumRateSolution> {
    if weights.len() != problem.n_groups() {
        return Err(Error::invalid(format!(
            "expected {} weights, got {}",
            problem.n_groups(),
            weights.len()
        )));
    }
    let budget = duals.budget(problem.bs_powers());
    let mut oracle = AsymptoticOracle::new(problem, duals, weights, tol)?;
    if weights.max() == 0.0 && zero_weights_ok {
        let a = problem.n_groups();
        return Ok(SumRateSolution {
            value: 0.0,
            rates: RatePoint { r: vec![0.0; a] },
            powers: PowerSolution {
                allocation: PowerAllocation::zeros(a),
                iterations: 0,
                restarts: 0,
                kkt_residual: 0.0,
                zero_set_violation: 0.0,
                converged: true,
                trace: Vec::new(),
            },
            duals: duals.clone(),
        });
    }
    let init_sorted: Option<Vec<f64>> = init
        .filter(|p| p.q.len() == problem.n_groups())
        .map(|p| weights.order().iter().map(|&k| p.q[k]).collect());
    let deltas = weights.deltas();
    let sp = optimize_sorted(
        &mut oracle,
        &deltas,
        budget,
        init_sorted.as_deref(),
        tol,
        false,
    )?;
    if !sp.converged {
        return Err(Error::NoConvergence {
            what: "power iteration",
            iterations: sp.iterations,
            residual: sp.kkt_residual.max(sp.zero_set_violation),
        });
    }
    // The last evaluation was at the returned powers unless the iteration
    // ended on a best-iterate fallback; re-solve to be sure.
    let stages = oracle.solve(&sp.q)?.to_vec();
    let sg = oracle.gains().clone();
    let rates = rates_from_stages(&sg, &stages, tol)?;
    let value: f64 = deltas.iter().zip(&stages).map(|(d, s)| d * s.log_det).sum();
    Ok(SumRateSolution {
        value,
        rates,
        powers: into_solution(&sg.order, sp, budget),
        duals: duals.clone(),
    })
}
