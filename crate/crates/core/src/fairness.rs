//! Network utility maximization over the asymptotic ergodic rate region by
//! dual decomposition: a projected subgradient method on the group weights
//! with a backtracking line search on the dual function.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::g12;
use crate::geometry::{
    cluster_problem, detect_symmetric_blocks, ClusterProblem, Scenario, DEFAULT_SYMMETRY_TOLERANCE,
};
use faer::linalg::solvers::Solve;
use faer::Mat;

use crate::limit::{
    optimize_lambda, tail_log_det, DualVars, LambdaMode, PowerAllocation, RatePoint, Tolerances,
    Weights,
};

/// Fairness criterion applied to the per-group rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Utility {
    /// Proportional fairness, `Σ ln R_k`.
    Pfs,
    /// Hard (max-min) fairness, `min R_k`.
    Hfs,
    /// `Σ R_k^{1−α}/(1−α)`, `Σ ln R_k` at `α = 1`.
    AlphaFair { alpha: f64 },
}

impl Utility {
    pub fn validate(&self) -> Result<()> {
        if let Utility::AlphaFair { alpha } = *self {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::invalid(format!(
                    "alpha must be positive and finite, got {alpha}"
                )));
            }
        }
        Ok(())
    }

    fn is_log(&self) -> bool {
        match *self {
            Utility::Pfs => true,
            Utility::AlphaFair { alpha } => alpha == 1.0,
            Utility::Hfs => false,
        }
    }

    fn is_hfs(&self) -> bool {
        matches!(self, Utility::Hfs)
    }

    /// `max_r g(r) − Σ W_k r_k`, the utility part of the dual function.
    fn conjugate(&self, w: &[f64]) -> Result<f64> {
        match *self {
            Utility::Hfs => Ok(0.0),
            Utility::Pfs | Utility::AlphaFair { alpha: _ } if self.is_log() => {
                check_positive_weights(w)?;
                Ok(w.iter().map(|x| -x.ln() - 1.0).sum())
            }
            Utility::Pfs => unreachable!("log utility handled above"),
            Utility::AlphaFair { alpha } => {
                check_positive_weights(w)?;
                let e = (alpha - 1.0) / alpha;
                Ok(w.iter().map(|x| x.powf(e)).sum::<f64>() * alpha / (1.0 - alpha))
            }
        }
    }
}

fn check_positive_weights(w: &[f64]) -> Result<()> {
    match w.iter().position(|x| *x <= 0.0) {
        Some(k) => Err(Error::DualUnbounded(format!("weight of group {k} is zero"))),
        None => Ok(()),
    }
}

/// Lower bound on weights under pfs and alpha-fair utilities.
pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-8;

/// Outer-loop settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairnessOptions {
    /// Stop when `‖R − r‖∞ ≤ conv_tol · mean(R)`.
    pub conv_tol: f64,
    pub max_outer: usize,
    pub w_floor: f64,
    pub lambda_mode: LambdaMode,
    pub tolerances: Tolerances,
}

impl Default for FairnessOptions {
    fn default() -> Self {
        FairnessOptions {
            conv_tol: 1e-4,
            max_outer: 2000,
            w_floor: DEFAULT_WEIGHT_FLOOR,
            lambda_mode: LambdaMode::Auto,
            tolerances: Tolerances::default(),
        }
    }
}

impl FairnessOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.conv_tol.is_finite() && self.conv_tol > 0.0) {
            return Err(Error::invalid("conv_tol must be positive"));
        }
        if self.max_outer == 0 {
            return Err(Error::invalid("max_outer must be at least 1"));
        }
        if !(self.w_floor.is_finite() && self.w_floor > 0.0) {
            return Err(Error::invalid("w_floor must be positive"));
        }
        self.tolerances.validate()
    }
}

/// Optimal auxiliary rates `r⋆(W)` of the utility subproblem.
///
/// Under hard fairness the common value is the mean of the current inner
/// rates `inner`, which is what the projected update needs; the other
/// utilities ignore `inner`.
pub fn inner_r_star(utility: &Utility, weights: &[f64], inner: &[f64]) -> Result<Vec<f64>> {
    utility.validate()?;
    match *utility {
        Utility::Hfs => {
            if inner.len() != weights.len() || inner.is_empty() {
                return Err(Error::invalid("inner rates must match the weights"));
            }
            let mean = inner.iter().sum::<f64>() / inner.len() as f64;
            Ok(vec![mean; weights.len()])
        }
        Utility::Pfs => {
            check_positive_weights(weights)?;
            Ok(weights.iter().map(|w| 1.0 / w).collect())
        }
        Utility::AlphaFair { alpha } => {
            check_positive_weights(weights)?;
            Ok(weights.iter().map(|w| w.powf(-1.0 / alpha)).collect())
        }
    }
}

/// `R⋆ − r⋆`, a subgradient of the dual function at the current weights.
pub fn subgradient(inner: &[f64], aux: &[f64]) -> Result<Vec<f64>> {
    if inner.len() != aux.len() {
        return Err(Error::invalid("rate vectors differ in length"));
    }
    Ok(inner.iter().zip(aux).map(|(r, a)| r - a).collect())
}

/// Euclidean projection onto `{W ≥ 0, Σ W = 1}` by sorting.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (i, x) in s.iter().enumerate() {
        acc += x;
        let t = (acc - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// `W − μ·s`, projected onto the feasible weight set of `utility`.
pub fn update_weights(
    weights: &[f64],
    subgrad: &[f64],
    step: f64,
    utility: &Utility,
    w_floor: f64,
) -> Result<Weights> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::invalid("step must be positive"));
    }
    if weights.len() != subgrad.len() {
        return Err(Error::invalid("weights and subgradient differ in length"));
    }
    let raw: Vec<f64> = weights
        .iter()
        .zip(subgrad)
        .map(|(w, s)| w - step * s)
        .collect();
    let projected = if utility.is_hfs() {
        project_simplex(&raw)
    } else {
        raw.iter().map(|w| w.max(w_floor)).collect()
    };
    Weights::new(projected)
}

/// Utility of a rate vector.
pub fn utility_value(utility: &Utility, rates: &[f64]) -> Result<f64> {
    utility.validate()?;
    if rates.is_empty() {
        return Err(Error::invalid("no rates"));
    }
    let positive = || -> Result<()> {
        match rates.iter().position(|r| *r <= 0.0) {
            Some(k) => Err(Error::Numerical(format!(
                "utility is -inf: group {k} has zero rate"
            ))),
            None => Ok(()),
        }
    };
    match *utility {
        Utility::Hfs => Ok(rates.iter().copied().fold(f64::INFINITY, f64::min)),
        Utility::Pfs | Utility::AlphaFair { alpha: _ } if utility.is_log() => {
            positive()?;
            Ok(rates.iter().map(|r| r.ln()).sum())
        }
        Utility::Pfs => unreachable!("log utility handled above"),
        Utility::AlphaFair { alpha } => {
            if alpha > 1.0 {
                positive()?;
            }
            Ok(rates.iter().map(|r| r.powf(1.0 - alpha)).sum::<f64>() / (1.0 - alpha))
        }
    }
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessTraceRow {
    pub n: usize,
    /// `g(R(n))`, `-inf` when a rate is zero under a log utility.
    pub utility: f64,
    /// Dual function `G(W(n))`.
    pub dual: f64,
    /// `G(W(n)) − g(R(n))`.
    pub gap: f64,
    pub subgrad_norm: f64,
    /// Step taken from `W(n)`; zero on the last row.
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct FairnessResult {
    pub weights: Weights,
    pub rates: RatePoint,
    pub aux_rates: Vec<f64>,
    pub duals: DualVars,
    pub powers: PowerAllocation,
    pub utility_value: f64,
    pub dual_value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Strongly symmetric blocks the weights were tied over.
    pub blocks: Option<Vec<Vec<usize>>>,
    /// Groups sharing one weight whose equal rates come from time-sharing
    /// decoding orders within the group set.
    pub tied_classes: Vec<Vec<usize>>,
    /// Points whose mixture gives `rates`, when no single point does and
    /// the tie structure could not be solved exactly; then
    /// `weights` are the utility gradient at `rates` and `powers`/`duals`
    /// belong to the last point queried.
    pub time_sharing: Vec<TimeShare>,
    pub trace: Vec<FairnessTraceRow>,
}

impl FairnessResult {
    /// `‖R − r‖∞`.
    pub fn stationarity(&self) -> f64 {
        self.rates
            .r
            .iter()
            .zip(&self.aux_rates)
            .map(|(r, a)| (r - a).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone)]
struct Eval {
    weights: Weights,
    rates: Vec<f64>,
    powers: PowerAllocation,
    duals: DualVars,
    /// `max_R W·R` over the region.
    value: f64,
    dual_value: f64,
}

fn tie(w: &mut [f64], blocks: Option<&[Vec<usize>]>) {
    for blk in blocks.unwrap_or(&[]) {
        let first = w[blk[0]];
        if blk.iter().any(|&k| w[k] != first) {
            let mean = blk.iter().map(|&k| w[k]).sum::<f64>() / blk.len() as f64;
            for &k in blk {
                w[k] = mean;
            }
        }
    }
}

/// Time-sharing over decoding orders inside each block.
fn average_within(r: &mut [f64], blocks: Option<&[Vec<usize>]>) {
    for blk in blocks.unwrap_or(&[]) {
        let mean = blk.iter().map(|&k| r[k]).sum::<f64>() / blk.len() as f64;
        for &k in blk {
            r[k] = mean;
        }
    }
}

fn evaluate(
    problem: &ClusterProblem,
    utility: &Utility,
    weights: Weights,
    blocks: Option<&[Vec<usize>]>,
    warm: Option<&PowerAllocation>,
    opts: &FairnessOptions,
) -> Result<Eval> {
    let ls = optimize_lambda(problem, &weights, opts.lambda_mode, warm, &opts.tolerances)?;
    let mut rates = ls.solution.rates.r.clone();
    average_within(&mut rates, blocks);
    let value = ls.solution.value;
    let dual_value = utility.conjugate(weights.values())? + value;
    Ok(Eval {
        weights,
        rates,
        powers: ls.solution.powers.allocation.clone(),
        duals: ls.duals,
        value,
        dual_value,
    })
}

/// One weighted-sum-rate point of a time-sharing solution.
#[derive(Debug, Clone)]
pub struct TimeShare {
    pub fraction: f64,
    pub weights: Weights,
    pub rates: Vec<f64>,
    pub powers: PowerAllocation,
    pub duals: DualVars,
}

/// `∇g(R)` for the smooth utilities.
fn utility_gradient(utility: &Utility, r: &[f64]) -> Vec<f64> {
    match *utility {
        Utility::Pfs => r.iter().map(|x| 1.0 / x).collect(),
        Utility::AlphaFair { alpha } => r.iter().map(|x| x.powf(-alpha)).collect(),
        Utility::Hfs => unreachable!("hard fairness has no gradient"),
    }
}

fn mix(cols: &[Eval], theta: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; cols[0].rates.len()];
    for (c, t) in cols.iter().zip(theta) {
        for (x, y) in r.iter_mut().zip(&c.rates) {
            *x += t * y;
        }
    }
    r
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximizes `g(Σ θ_i R_i)` over the simplex by projected gradient ascent
/// until the Frank-Wolfe gap is below `rel_tol · ∇g·R̄`. `None` when no
/// mixture has all rates positive.
fn best_mixture(utility: &Utility, cols: &[Eval], warm: &[f64], rel_tol: f64) -> Option<Vec<f64>> {
    let m = cols.len();
    let value = |theta: &[f64]| -> f64 {
        let r = mix(cols, theta);
        if r.iter().any(|x| *x <= 0.0) {
            return f64::NEG_INFINITY;
        }
        utility_value(utility, &r).unwrap_or(f64::NEG_INFINITY)
    };
    let mut theta = warm.to_vec();
    theta.resize(m, 0.0);
    if value(&theta) == f64::NEG_INFINITY {
        theta = vec![1.0 / m as f64; m];
        if value(&theta) == f64::NEG_INFINITY {
            return None;
        }
    }
    let mut f = value(&theta);
    let mut t = 1.0;
    for _ in 0..20_000 {
        let r = mix(cols, &theta);
        let gr = utility_gradient(utility, &r);
        let grad: Vec<f64> = cols.iter().map(|c| dot(&gr, &c.rates)).collect();
        let at = dot(&grad, &theta);
        let top = grad.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top - at <= rel_tol * at.abs() {
            break;
        }
        t *= 4.0;
        let mut moved = false;
        for _ in 0..80 {
            let raw: Vec<f64> = theta.iter().zip(&grad).map(|(x, g)| x + t * g).collect();
            let cand = project_simplex(&raw);
            let fc = value(&cand);
            let ascent: f64 = grad
                .iter()
                .zip(cand.iter().zip(&theta))
                .map(|(g, (c, o))| g * (c - o))
                .sum();
            if fc >= f + 1e-4 * ascent && ascent > 0.0 {
                theta = cand;
                f = fc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Some(theta)
}

/// Best time-sharing of `cols` under hard fairness and the weights that
/// certify it: the LP `max t` s.t. `Σ θ_i R_i ≥ t`, `θ` on the simplex, and
/// its dual `min s` s.t. `W·R_i ≤ s`, `W` on the simplex.
fn max_min_mixture(cols: &[Eval]) -> Option<(Vec<f64>, Vec<f64>)> {
    use microlp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};
    let a = cols[0].rates.len();

    let mut primal = Problem::new(OptimizationDirection::Maximize);
    let theta: Vec<_> = cols
        .iter()
        .map(|_| primal.add_var(0.0, (0.0, f64::INFINITY)))
        .collect();
    let t = primal.add_var(1.0, (0.0, f64::INFINITY));
    for k in 0..a {
        let mut e = LinearExpr::empty();
        for (v, c) in theta.iter().zip(cols) {
            e.add(*v, c.rates[k]);
        }
        e.add(t, -1.0);
        primal.add_constraint(e, ComparisonOp::Ge, 0.0);
    }
    primal.add_constraint(
        theta.iter().map(|v| (*v, 1.0)).collect::<Vec<_>>(),
        ComparisonOp::Eq,
        1.0,
    );
    let sol = primal.solve().ok()?;
    let mut th: Vec<f64> = theta.iter().map(|v| sol.var_value(*v).max(0.0)).collect();
    let s: f64 = th.iter().sum();
    th.iter_mut().for_each(|x| *x /= s);

    let mut dual = Problem::new(OptimizationDirection::Minimize);
    let w: Vec<_> = (0..a)
        .map(|_| dual.add_var(0.0, (0.0, f64::INFINITY)))
        .collect();
    let s = dual.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));
    for c in cols {
        let mut e = LinearExpr::empty();
        for (v, r) in w.iter().zip(&c.rates) {
            e.add(*v, *r);
        }
        e.add(s, -1.0);
        dual.add_constraint(e, ComparisonOp::Le, 0.0);
    }
    dual.add_constraint(
        w.iter().map(|v| (*v, 1.0)).collect::<Vec<_>>(),
        ComparisonOp::Eq,
        1.0,
    );
    let sol = dual.solve().ok()?;
    let mut wv: Vec<f64> = w.iter().map(|v| sol.var_value(*v).max(0.0)).collect();
    let s: f64 = wv.iter().sum();
    wv.iter_mut().for_each(|x| *x /= s);
    Some((th, wv))
}

/// Outcome of the time-sharing phase.
struct Mixed {
    weights: Vec<f64>,
    rates: Vec<f64>,
    last: Eval,
    dual_value: f64,
    gap: f64,
    shares: Vec<TimeShare>,
    converged: bool,
}

/// Column generation over the weighted-sum-rate points seen so far: find
/// the best time-sharing `R̄` of the known points together with weights
/// `W̄` that support it (`∇g(R̄)` for smooth utilities, the LP dual under
/// hard fairness), query the region at `W̄`, and stop once the duality gap
/// `G(W̄) − g(R̄)` is at most `conv_tol · W̄·R̄`. The gap bounds how far
/// `g(R̄)` is below the optimum.
#[allow(clippy::too_many_arguments)]
fn time_share(
    problem: &ClusterProblem,
    utility: &Utility,
    cols: &mut Vec<Eval>,
    blocks: Option<&[Vec<usize>]>,
    opts: &FairnessOptions,
    n: &mut usize,
    trace: &mut Vec<FairnessTraceRow>,
) -> Result<Option<Mixed>> {
    let mut theta: Vec<f64> = Vec::new();
    let mut out = None;
    while *n < opts.max_outer {
        let (th, w_bar) = if utility.is_hfs() {
            match max_min_mixture(cols) {
                Some(x) => x,
                None => return Ok(out),
            }
        } else {
            let Some(th) = best_mixture(utility, cols, &theta, 0.01 * opts.conv_tol) else {
                return Ok(out);
            };
            let grad = utility_gradient(utility, &mix(cols, &th));
            (th, grad)
        };
        theta = th;
        let rbar = mix(cols, &theta);
        // The oracle only sees weight ratios.
        let scale = w_bar.iter().sum::<f64>() / w_bar.len() as f64;
        let mut w: Vec<f64> = w_bar.iter().map(|g| g / scale).collect();
        tie(&mut w, blocks);
        let warm = cols.last().map(|c| c.powers.clone());
        let e = evaluate(
            problem,
            utility,
            Weights::new(w)?,
            blocks,
            warm.as_ref(),
            opts,
        )?;
        let g = utility_value(utility, &rbar).unwrap_or(f64::NEG_INFINITY);
        let dual_value = utility.conjugate(&w_bar)? + e.value * scale;
        let gap = dual_value - g;
        let base = dot(&w_bar, &rbar);
        trace.push(FairnessTraceRow {
            n: *n,
            utility: g,
            dual: dual_value,
            gap,
            subgrad_norm: gap / base,
            step: 0.0,
        });
        let converged = gap <= opts.conv_tol * base;
        let shares = cols
            .iter()
            .zip(&theta)
            .filter(|(_, t)| **t > 0.0)
            .map(|(c, t)| TimeShare {
                fraction: *t,
                weights: c.weights.clone(),
                rates: c.rates.clone(),
                powers: c.powers.clone(),
                duals: c.duals.clone(),
            })
            .collect();
        out = Some(Mixed {
            weights: w_bar,
            rates: rbar,
            last: e.clone(),
            dual_value,
            gap,
            shares,
            converged,
        });
        if converged {
            break;
        }
        cols.push(e);
        *n += 1;
    }
    Ok(out)
}

/// Neighbouring weights within this relative gap form one tie class.
const TIE_GAP: f64 = 1e-3;
/// Largest tie class whose subset rate bounds are enumerated.
const MAX_TIE_CLASS: usize = 14;
/// Target and acceptance level of the class-weight residual (log scale).
const TIE_TOL: f64 = 1e-11;
const TIE_ACCEPT: f64 = 1e-8;

/// Groups with (nearly) equal weights, classes in increasing weight order.
fn tie_classes(w: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[a].total_cmp(&w[b]));
    let mut out: Vec<Vec<usize>> = Vec::new();
    for k in idx {
        match out.last_mut() {
            Some(c) if w[k] <= w[*c.last().expect("non-empty")] * (1.0 + TIE_GAP) => c.push(k),
            _ => out.push(vec![k]),
        }
    }
    for c in &mut out {
        c.sort_unstable();
    }
    out
}

struct Refined {
    weights: Vec<f64>,
    rates: Vec<f64>,
    last: Eval,
    classes: Vec<Vec<usize>>,
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
}

/// Exact form of a time-sharing optimum. At the optimum, groups whose
/// weights tie share one weight and, since every utility here is symmetric
/// in the rates, one rate: the class sum divided by the class size, reached
/// by time-sharing decoding orders within the class. The class weights then
/// solve a smooth system in `f_c(w)`, the class sum rate at exactly tied
/// weights: `w_c = g'(f_c/|c|)` for smooth utilities, equal class rates
/// under hard fairness. Newton solves it to oracle precision. The point is
/// kept only if the equal split lies in each class rate polytope, i.e.
/// every subset `S` of a class can carry `|S|/|c|` of the class sum when
/// decoded last within it.
fn refine_ties(
    problem: &ClusterProblem,
    utility: &Utility,
    start: &[f64],
    warm: &PowerAllocation,
    blocks: Option<&[Vec<usize>]>,
    opts: &FairnessOptions,
) -> Result<Option<Refined>> {
    let a = start.len();
    if start.iter().any(|w| !(*w > 0.0)) {
        return Ok(None);
    }
    let classes = tie_classes(start);
    if classes.len() == a || classes.iter().any(|c| c.len() > MAX_TIE_CLASS) {
        return Ok(None);
    }
    let r = classes.len();
    let hfs = utility.is_hfs();
    let expand = |y: &[f64]| -> Vec<f64> {
        let mut w = vec![0.0; a];
        for (c, yc) in classes.iter().zip(y) {
            for &k in c {
                w[k] = yc.exp();
            }
        }
        if hfs {
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
        }
        w
    };
    let ordered = |y: &[f64]| y.windows(2).all(|p| p[0] < p[1]);
    let class_rate =
        |e: &Eval, c: &[usize]| c.iter().map(|&k| e.rates[k]).sum::<f64>() / c.len() as f64;
    let run = |y: &[f64]| -> Result<(Eval, Vec<f64>)> {
        let e = evaluate(
            problem,
            utility,
            Weights::new(expand(y))?,
            blocks,
            Some(warm),
            opts,
        )?;
        let rc: Vec<f64> = classes.iter().map(|c| class_rate(&e, c)).collect();
        if rc.iter().any(|x| !(*x > 0.0)) {
            return Ok((e, vec![f64::INFINITY; r]));
        }
        let g = if hfs {
            // Weights are scale free here; pin the first class.
            (0..r)
                .map(|c| if c == 0 { y[0] } else { (rc[c] / rc[0]).ln() })
                .collect()
        } else {
            (0..r)
                .map(|c| y[c] - utility_gradient(utility, &[rc[c]])[0].ln())
                .collect()
        };
        Ok((e, g))
    };

    let mut y: Vec<f64> = classes
        .iter()
        .map(|c| (c.iter().map(|&k| start[k]).sum::<f64>() / c.len() as f64).ln())
        .collect();
    if hfs {
        let y0 = y[0];
        y.iter_mut().for_each(|v| *v -= y0);
    }
    let (mut e, mut g) = run(&y)?;
    for _ in 0..40 {
        if sup(&g) <= TIE_TOL {
            break;
        }
        let h = 1e-6;
        let mut jac = Mat::<f64>::zeros(r, r);
        for j in 0..r {
            let mut yj = y.clone();
            yj[j] += h;
            let step = if ordered(&yj) {
                h
            } else {
                yj[j] -= 2.0 * h;
                -h
            };
            let (_, gj) = run(&yj)?;
            for i in 0..r {
                jac[(i, j)] = (gj[i] - g[i]) / step;
            }
        }
        let rhs = Mat::<f64>::from_fn(r, 1, |i, _| -g[i]);
        let d = jac.partial_piv_lu().solve(&rhs);
        if (0..r).any(|i| !d[(i, 0)].is_finite()) {
            break;
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = (0..r).map(|i| y[i] + t * d[(i, 0)]).collect();
            if ordered(&cand) {
                let (ec, gc) = run(&cand)?;
                if sup(&gc) < sup(&g) {
                    y = cand;
                    e = ec;
                    g = gc;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if !(sup(&g) <= TIE_ACCEPT) {
        return Ok(None);
    }

    let mut rates = vec![0.0; a];
    for c in &classes {
        let rc = class_rate(&e, c);
        for &k in c {
            rates[k] = rc;
        }
    }
    let tol = &opts.tolerances;
    let mut after: Vec<usize> = Vec::new();
    for c in classes.iter().rev() {
        if c.len() > 1 {
            let base = tail_log_det(problem, &e.powers, &e.duals, &after, tol)?;
            let share = rates[c[0]];
            for mask in 1..(1u32 << c.len()) - 1 {
                let mut tail: Vec<usize> = (0..c.len())
                    .filter(|i| mask >> i & 1 == 1)
                    .map(|i| c[i])
                    .collect();
                let size = tail.len() as f64;
                tail.extend(&after);
                let cap = tail_log_det(problem, &e.powers, &e.duals, &tail, tol)? - base;
                if cap < size * share - tol.num_tol * (1.0 + size * share) {
                    return Ok(None);
                }
            }
        }
        after.extend(c);
    }
    Ok(Some(Refined {
        weights: expand(&y),
        rates,
        last: e,
        classes: classes.into_iter().filter(|c| c.len() > 1).collect(),
    }))
}

/// Utility-optimal rates of one cluster.
///
/// Runs the projected subgradient method on the weights with a backtracking
/// line search. Near-tied weights make single weighted-sum-rate points jump
/// between decoding orders, which shows up as a stalling line search; after
/// five stalls the solver switches to time-sharing over the points already
/// evaluated and, when the tie structure can be solved exactly, finishes
/// with the exact tied point.
pub fn solve_fairness(
    problem: &ClusterProblem,
    utility: &Utility,
    opts: &FairnessOptions,
) -> Result<FairnessResult> {
    utility.validate()?;
    opts.validate()?;
    let a = problem.n_groups();
    let blocks = if problem.n_bs() > 1 {
        detect_symmetric_blocks(problem, DEFAULT_SYMMETRY_TOLERANCE)
    } else {
        None
    };
    if opts.lambda_mode == LambdaMode::SymmetricShortcut && problem.n_bs() > 1 && blocks.is_none() {
        return Err(Error::NotSymmetric(format!(
            "no partition of {a} groups into strongly symmetric blocks of size {} with equal BS powers",
            problem.n_bs()
        )));
    }
    let blocks_ref = blocks.as_deref();

    let w0 = if utility.is_hfs() {
        1.0 / a as f64
    } else {
        1.0
    };
    let mut cur = evaluate(
        problem,
        utility,
        Weights::new(vec![w0; a])?,
        blocks_ref,
        None,
        opts,
    )?;
    let mut cols = vec![cur.clone()];
    let mut trace = Vec::new();
    let mut best: Option<(f64, Eval)> = None;
    let mut stalls = 0;
    let mut converged = false;
    let mut n = 0;

    loop {
        let aux = inner_r_star(utility, cur.weights.values(), &cur.rates)?;
        let s = subgradient(&cur.rates, &aux)?;
        let norm = s.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
        let g = utility_value(utility, &cur.rates).unwrap_or(f64::NEG_INFINITY);
        let gap = cur.dual_value - g;
        trace.push(FairnessTraceRow {
            n,
            utility: g,
            dual: cur.dual_value,
            gap,
            subgrad_norm: norm,
            step: 0.0,
        });
        if best.as_ref().map_or(true, |(bg, _)| gap < *bg) {
            best = Some((gap, cur.clone()));
        }
        let mean = cur.rates.iter().sum::<f64>() / a as f64;
        if norm <= opts.conv_tol * mean {
            converged = true;
            break;
        }
        if n + 1 >= opts.max_outer || stalls >= 5 {
            break;
        }

        let mut mu = 0.5 / norm;
        let mut next: Option<(Eval, f64)> = None;
        for _ in 0..40 {
            let mut w = update_weights(cur.weights.values(), &s, mu, utility, opts.w_floor)?
                .values()
                .to_vec();
            tie(&mut w, blocks_ref);
            let dir: f64 = s
                .iter()
                .zip(cur.weights.values().iter().zip(&w))
                .map(|(si, (o, x))| si * (x - o))
                .sum();
            if dir >= 0.0 {
                break;
            }
            let cand = evaluate(
                problem,
                utility,
                Weights::new(w)?,
                blocks_ref,
                Some(&cur.powers),
                opts,
            )?;
            cols.push(cand.clone());
            if cand.dual_value <= cur.dual_value + 1e-4 * dir {
                next = Some((cand, mu));
                break;
            }
            mu *= 0.5;
        }
        // A stalled line search stays put and counts the stall.
        match next {
            Some((e, mu)) => {
                trace.last_mut().expect("row pushed").step = mu;
                cur = e;
            }
            None => stalls += 1,
        }
        n += 1;
    }

    if !converged && n + 1 < opts.max_outer {
        n += 1;
        if let Some(m) = time_share(
            problem, utility, &mut cols, blocks_ref, opts, &mut n, &mut trace,
        )? {
            let refined = refine_ties(
                problem,
                utility,
                &m.weights,
                &m.last.powers,
                blocks_ref,
                opts,
            )?;
            if let Some(t) = refined {
                let g = utility_value(utility, &t.rates)?;
                let dual_value = utility.conjugate(&t.weights)? + t.last.value;
                let base = dot(&t.weights, &t.rates);
                let gap = dual_value - g;
                if gap <= m.gap.max(opts.conv_tol * base) {
                    n += 1;
                    trace.push(FairnessTraceRow {
                        n,
                        utility: g,
                        dual: dual_value,
                        gap,
                        subgrad_norm: gap / base,
                        step: 0.0,
                    });
                    return Ok(FairnessResult {
                        aux_rates: inner_r_star(utility, &t.weights, &t.rates)?,
                        weights: Weights::new(t.weights)?,
                        rates: RatePoint { r: t.rates },
                        duals: t.last.duals,
                        powers: t.last.powers,
                        utility_value: g,
                        dual_value,
                        converged: gap <= opts.conv_tol * base,
                        iterations: n + 1,
                        blocks,
                        tied_classes: t.classes,
                        time_sharing: Vec::new(),
                        trace,
                    });
                }
            }
            let utility_value = utility_value(utility, &m.rates).unwrap_or(f64::NEG_INFINITY);
            return Ok(FairnessResult {
                aux_rates: inner_r_star(utility, &m.weights, &m.rates)?,
                weights: Weights::new(m.weights)?,
                rates: RatePoint { r: m.rates },
                duals: m.last.duals,
                powers: m.last.powers,
                utility_value,
                dual_value: m.dual_value,
                converged: m.converged,
                iterations: n + 1,
                blocks,
                tied_classes: Vec::new(),
                time_sharing: m.shares,
                trace,
            });
        }
    }

    let final_eval = match best {
        Some((_, e)) if !converged => e,
        _ => cur,
    };
    let aux = inner_r_star(utility, final_eval.weights.values(), &final_eval.rates)?;
    let utility_value = utility_value(utility, &final_eval.rates).unwrap_or(f64::NEG_INFINITY);
    Ok(FairnessResult {
        weights: final_eval.weights,
        rates: RatePoint {
            r: final_eval.rates,
        },
        aux_rates: aux,
        duals: final_eval.duals,
        powers: final_eval.powers,
        utility_value,
        dual_value: final_eval.dual_value,
        converged,
        iterations: n + 1,
        blocks,
        tied_classes: Vec::new(),
        time_sharing: Vec::new(),
        trace,
    })
}

/// Solves every cluster of `scenario` independently.
pub fn solve_scenario_fairness(
    scenario: &Scenario,
    utility: &Utility,
    opts: &FairnessOptions,
) -> Result<Vec<(ClusterProblem, FairnessResult)>> {
    let gains = scenario.gains()?;
    let problems = (0..scenario.n_clusters())
        .map(|c| cluster_problem(scenario, &gains, c))
        .collect::<Result<Vec<_>>>()?;
    problems
        .into_par_iter()
        .map(|p| solve_fairness(&p, utility, opts).map(|r| (p, r)))
        .collect()
}

/// Utility of the concatenated rates of all clusters.
pub fn system_utility(
    utility: &Utility,
    results: &[(ClusterProblem, FairnessResult)],
) -> Result<f64> {
    let all: Vec<f64> = results
        .iter()
        .flat_map(|(_, r)| r.rates.r.iter().copied())
        .collect();
    utility_value(utility, &all)
}

/// Writes the outer-loop trace as `cluster,n,utility,gap,step` rows.
pub fn write_trace_csv<W: Write>(
    results: &[(ClusterProblem, FairnessResult)],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "cluster,n,utility,gap,step")?;
    for (c, (_, r)) in results.iter().enumerate() {
        for row in &r.trace {
            writeln!(
                out,
                "{c},{},{},{},{}",
                row.n,
                g12(row.utility),
                g12(row.gap),
                g12(row.step)
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfs_r_star_is_reciprocal() {
        let r = inner_r_star(&Utility::Pfs, &[2.0, 4.0], &[0.0, 0.0]).unwrap();
        assert_eq!(r, vec![0.5, 0.25]);
        let r = inner_r_star(&Utility::Pfs, &[1.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(r, vec![1.0; 3]);
        assert!(matches!(
            inner_r_star(&Utility::Pfs, &[1.0, 0.0], &[1.0, 1.0]),
            Err(Error::DualUnbounded(_))
        ));
    }

    #[test]
    fn hfs_r_star_is_mean_of_inner_rates() {
        let r = inner_r_star(&Utility::Hfs, &[0.2, 0.3, 0.5], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r, vec![2.0; 3]);
    }

    #[test]
    fn alpha_fair_r_star() {
        let r = inner_r_star(&Utility::AlphaFair { alpha: 2.0 }, &[4.0], &[0.0]).unwrap();
        assert_eq!(r, vec![0.5]);
        assert!(Utility::AlphaFair { alpha: 0.0 }.validate().is_err());
    }

    #[test]
    fn subgradient_examples() {
        assert_eq!(
            subgradient(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            subgradient(&[1.0, 2.0], &[2.0, 1.0]).unwrap(),
            vec![-1.0, 1.0]
        );
        let w = [0.5, 0.25];
        let aux = inner_r_star(&Utility::Pfs, &w, &[0.0; 2]).unwrap();
        assert_eq!(subgradient(&[2.0, 4.0], &aux).unwrap(), vec![0.0, 0.0]);
        assert!(subgradient(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn weight_update_examples() {
        let w = update_weights(&[1.0, 1.0], &[0.2, -0.2], 1.0, &Utility::Pfs, 1e-8).unwrap();
        assert!((w.values()[0] - 0.8).abs() < 1e-15 && (w.values()[1] - 1.2).abs() < 1e-15);
        let w = update_weights(&[1.0, 1.0], &[0.0, 0.0], 0.3, &Utility::Pfs, 1e-8).unwrap();
        assert_eq!(w.values(), &[1.0, 1.0]);
        let w = update_weights(&[1.0, 1.0], &[5.0, 0.0], 1.0, &Utility::Pfs, 1e-8).unwrap();
        assert_eq!(w.values()[0], 1e-8);
        let w = update_weights(
            &[0.5, 0.3, 0.2],
            &[0.4, -1.0, 2.0],
            0.7,
            &Utility::Hfs,
            1e-8,
        )
        .unwrap();
        assert!((w.values().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w.values().iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn simplex_projection_cases() {
        assert_eq!(project_simplex(&[0.2, 0.3, 0.5]), vec![0.2, 0.3, 0.5]);
        assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        let p = project_simplex(&[1.0, 1.0, 1.0]);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn tie_classes_split_on_relative_gaps() {
        let w = [0.5, 1.0, 1.0000001, 0.5000002, 2.0, 1.01];
        assert_eq!(
            tie_classes(&w),
            vec![vec![0, 3], vec![1, 2], vec![5], vec![4]]
        );
    }

    #[test]
    fn utility_values() {
        let e = std::f64::consts::E;
        assert!((utility_value(&Utility::Pfs, &[1.0, e]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(utility_value(&Utility::Hfs, &[3.0, 1.0, 2.0]).unwrap(), 1.0);
        let r = [0.3, 1.7, 2.2];
        assert_eq!(
            utility_value(&Utility::AlphaFair { alpha: 1.0 }, &r).unwrap(),
            utility_value(&Utility::Pfs, &r).unwrap()
        );
        assert!(utility_value(&Utility::Pfs, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn conjugates() {
        assert_eq!(Utility::Pfs.conjugate(&[1.0, 1.0]).unwrap(), -2.0);
        // α = 2: max_r (−1/r − W r) = −2√W.
        let c = Utility::AlphaFair { alpha: 2.0 }.conjugate(&[4.0]).unwrap();
        assert!((c + 4.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pfs_equalizes() {
        let p =
            ClusterProblem::new(2.0, &[vec![0.9, 0.4], vec![0.4, 0.9]], vec![5.0, 5.0]).unwrap();
        let r = solve_fairness(&p, &Utility::Pfs, &FairnessOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.weights.values()[0], r.weights.values()[1]);
        assert_eq!(r.rates.r[0], r.rates.r[1]);
        for (w, rate) in r.weights.values().iter().zip(&r.rates.r) {
            assert!((w * rate - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn hfs_equalizes_rates() {
        let p = ClusterProblem::new(1.0, &[vec![0.9, 0.5, 0.2]], vec![10.0]).unwrap();
        let r = solve_fairness(&p, &Utility::Hfs, &FairnessOptions::default()).unwrap();
        assert!(r.converged);
        let (lo, hi) = r
            .rates
            .r
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(l, h), x| (l.min(*x), h.max(*x)));
        let mean = r.rates.r.iter().sum::<f64>() / 3.0;
        assert!(hi - lo <= 1e-3 * mean, "{:?}", r.rates.r);
        assert!((r.weights.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for row in &r.trace {
            assert!(row.gap >= -1e-9, "{row:?}");
        }
    }
}
