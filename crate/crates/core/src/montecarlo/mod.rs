//! Finite-dimensional oracle: Rayleigh channel draws, exact dual-MAC rates and
//! per-stage MMSEs, sample-average power optimization, and the slot-by-slot
//! queue-driven scheduler.
//!
//! Every stage of a draw comes from one Cholesky factor. Columns of the
//! composite channel are stored in reverse decoding order, so the set decoded
//! from position `k` onwards is a leading block of `I + XᴴX`; its log-det and
//! the diagonal of its inverse are read off prefixes of `L` and `L⁻¹`.

mod scheduler;

use std::io::Write;

use faer::linalg::matmul::matmul;
use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::{c64, Accum, Mat, Par, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fmt::g12;
use crate::geometry::ClusterProblem;
use crate::limit::{
    optimize_powers_with, DualVars, PowerAllocation, PowerSolution, SortedGains, StageOracle,
    StageTable, Tolerances, Weights,
};

pub use scheduler::{
    dynamic_scheduler, max_single_group_rate, SchedulerConfig, SchedulerResult, SlotRecord,
    VirtualQueues,
};

/// One realization of all small-scale fading blocks of a cluster.
#[derive(Debug, Clone)]
pub struct ChannelDraw {
    pub n: usize,
    /// Antennas per BS, `γN`.
    pub antennas: usize,
    pub n_bs: usize,
    pub n_groups: usize,
    pub seed: u64,
    pub trial: u64,
    /// `antennas × n` blocks indexed `m * n_groups + k`, entries `CN(0, 1)`.
    blocks: Vec<Mat<c64>>,
}

impl ChannelDraw {
    pub fn block(&self, m: usize, k: usize) -> &Mat<c64> {
        &self.blocks[m * self.n_groups + k]
    }
}

/// `γN` as an integer, or an error when it is not one.
pub fn antennas_per_bs(gamma: f64, n: usize) -> Result<usize> {
    let x = gamma * n as f64;
    let r = x.round();
    if r < 1.0 || (x - r).abs() > 1e-9 * x.max(1.0) {
        return Err(Error::invalid(format!(
            "gamma·N = {x} is not a positive integer"
        )));
    }
    Ok(r as usize)
}

/// Draws the blocks of trial `trial` from the stream `trial` of the
/// ChaCha8 generator seeded with `seed`.
pub fn draw_channel(
    problem: &ClusterProblem,
    n: usize,
    seed: u64,
    trial: u64,
) -> Result<ChannelDraw> {
    if n == 0 {
        return Err(Error::invalid("N must be at least 1"));
    }
    let antennas = antennas_per_bs(problem.gamma(), n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let (b, a) = (problem.n_bs(), problem.n_groups());
    let mut blocks = Vec::with_capacity(a * b);
    for _ in 0..a * b {
        let mut h = Mat::<c64>::zeros(antennas, n);
        for j in 0..n {
            for i in 0..antennas {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                h[(i, j)] = c64::new(re * scale, im * scale);
            }
        }
        blocks.push(h);
    }
    Ok(ChannelDraw {
        n,
        antennas,
        n_bs: b,
        n_groups: a,
        seed,
        trial,
        blocks,
    })
}

/// Unpowered composite channel with one column block per decoding position:
/// block `j` stacks `√(β²_{m,π_j}/(λ_m N)) H_{m,π_j}` over `m`.
fn group_columns(draw: &ChannelDraw, sg: &SortedGains) -> Mat<c64> {
    let (n, ant) = (draw.n, draw.antennas);
    let mut h = Mat::<c64>::zeros(ant * sg.b, n * sg.a);
    for (pos, &k) in sg.order.iter().enumerate() {
        for m in 0..sg.b {
            let amp = (sg.g[m * sg.a + pos] / n as f64).sqrt();
            let blk = draw.block(m, k);
            for c in 0..n {
                for r in 0..ant {
                    h[(m * ant + r, pos * n + c)] = blk[(r, c)] * amp;
                }
            }
        }
    }
    h
}

/// What [`analyze`] should compute beyond the rates.
#[derive(Clone, Copy)]
struct Want {
    mmse: bool,
    eta: bool,
}

/// Exact per-stage quantities of one draw, indexed by decoding position.
struct Analysis {
    /// Mean per-column rate of each unit, in nats.
    rates: Vec<f64>,
    /// `mmse[k][j − k]`.
    mmse: Vec<Vec<f64>>,
    /// Unit-power SINR `[k][j − k]`, filled only for unpowered units.
    eta: Vec<Vec<f64>>,
}

/// `h` holds `units` column blocks of width `width` in decoding order; `p`
/// is the power of each unit.
fn analyze(h: &Mat<c64>, width: usize, p: &[f64], want: Want) -> Result<Analysis> {
    let units = p.len();
    let ncol = units * width;
    let rows = h.nrows();
    // Reverse decoding order: unit at position j sits at block units−1−j.
    let rev = |j: usize| units - 1 - j;
    let mut x = Mat::<c64>::zeros(rows, ncol);
    for (j, pj) in p.iter().enumerate() {
        let s = pj.sqrt();
        if s == 0.0 {
            continue;
        }
        for c in 0..width {
            let (src, dst) = (j * width + c, rev(j) * width + c);
            for r in 0..rows {
                x[(r, dst)] = h[(r, src)] * s;
            }
        }
    }
    let mut gram = Mat::<c64>::identity(ncol, ncol);
    matmul(
        gram.as_mut(),
        Accum::Add,
        x.adjoint(),
        x.as_ref(),
        c64::new(1.0, 0.0),
        Par::Seq,
    );
    let llt = gram
        .llt(Side::Lower)
        .map_err(|_| Error::NotPositiveDefinite("I + XᴴX"))?;
    let l = llt.L();

    let rates: Vec<f64> = (0..units)
        .map(|j| {
            let start = rev(j) * width;
            2.0 * (start..start + width)
                .map(|i| l[(i, i)].re.ln())
                .sum::<f64>()
                / width as f64
        })
        .collect();

    let mut linv = None;
    let mut mmse = Vec::new();
    if want.mmse {
        let mut inv = Mat::<c64>::identity(ncol, ncol);
        solve_lower_triangular_in_place(l, inv.as_mut(), Par::Seq);
        mmse = (0..units).map(|k| vec![0.0; units - k]).collect();
        for j in 0..units {
            let start = rev(j) * width;
            for i in start..start + width {
                // Running Σ_{r ≥ i} |L⁻¹_{ri}|², read at every prefix end.
                let mut acc = 0.0;
                let mut r = i;
                for k in (0..=j).rev() {
                    let end = (units - k) * width;
                    while r < end {
                        acc += inv[(r, i)].norm_sqr();
                        r += 1;
                    }
                    mmse[k][j - k] += acc / width as f64;
                }
            }
        }
        linv = Some(inv);
    }

    let mut eta: Vec<Vec<f64>> = (0..units).map(|k| vec![0.0; units - k]).collect();
    if want.eta {
        for j in (0..units).filter(|&j| p[j] == 0.0) {
            let hj = h.subcols(j * width, width);
            let energy: f64 = (0..width)
                .map(|c| (0..rows).map(|r| hj[(r, c)].norm_sqr()).sum::<f64>())
                .sum();
            let mut w = Mat::<c64>::zeros(ncol, width);
            matmul(
                w.as_mut(),
                Accum::Replace,
                x.adjoint(),
                hj,
                c64::new(1.0, 0.0),
                Par::Seq,
            );
            match &linv {
                Some(inv) => {
                    let mut tmp = Mat::<c64>::zeros(ncol, width);
                    matmul(
                        tmp.as_mut(),
                        Accum::Replace,
                        inv.as_ref(),
                        w.as_ref(),
                        c64::new(1.0, 0.0),
                        Par::Seq,
                    );
                    w = tmp;
                }
                None => solve_lower_triangular_in_place(l, w.as_mut(), Par::Seq),
            }
            let mut acc = 0.0;
            let mut r = 0;
            for k in (0..=j).rev() {
                let end = (units - k) * width;
                while r < end {
                    acc += (0..width).map(|c| w[(r, c)].norm_sqr()).sum::<f64>();
                    r += 1;
                }
                eta[k][j - k] = ((energy - acc) / width as f64).max(0.0);
            }
        }
    }
    Ok(Analysis { rates, mmse, eta })
}

fn stage_table(an: &Analysis, p: &[f64]) -> StageTable {
    let units = p.len();
    let mut gain = Vec::with_capacity(units);
    let mut marginal = Vec::with_capacity(units);
    for k in 0..units {
        let g: Vec<f64> = an.mmse[k].iter().map(|m| (1.0 - m).max(0.0)).collect();
        let d = g
            .iter()
            .enumerate()
            .map(|(i, gi)| {
                let j = k + i;
                if p[j] > 0.0 {
                    gi / p[j]
                } else {
                    an.eta[k][i]
                }
            })
            .collect();
        gain.push(g);
        marginal.push(d);
    }
    StageTable { gain, marginal }
}

fn sorted_setup(
    problem: &ClusterProblem,
    powers: &PowerAllocation,
    duals: &DualVars,
    weights: &Weights,
) -> Result<(SortedGains, Vec<f64>)> {
    let sg = SortedGains::new(problem, duals, weights.order())?;
    let q = sg.sorted_powers(powers)?;
    Ok((sg, q))
}

fn check_draw(draw: &ChannelDraw, problem: &ClusterProblem) -> Result<()> {
    if draw.n_bs != problem.n_bs() || draw.n_groups != problem.n_groups() {
        return Err(Error::invalid("draw does not match the cluster dimensions"));
    }
    Ok(())
}

/// Instantaneous per-user rate of every group (nats), decoding in the order
/// of `weights`.
pub fn dual_mac_group_rates(
    draw: &ChannelDraw,
    problem: &ClusterProblem,
    powers: &PowerAllocation,
    duals: &DualVars,
    weights: &Weights,
) -> Result<Vec<f64>> {
    check_draw(draw, problem)?;
    let (sg, q) = sorted_setup(problem, powers, duals, weights)?;
    let h = group_columns(draw, &sg);
    let an = analyze(
        &h,
        draw.n,
        &q,
        Want {
            mmse: false,
            eta: false,
        },
    )?;
    Ok(sg.unsort(&an.rates))
}

/// Per-component MMSE of the group at decoding position `target` when
/// decoding starts at position `stage`.
#[allow(clippy::too_many_arguments)]
pub fn mc_mmse(
    draw: &ChannelDraw,
    problem: &ClusterProblem,
    powers: &PowerAllocation,
    duals: &DualVars,
    weights: &Weights,
    stage: usize,
    target: usize,
) -> Result<f64> {
    check_draw(draw, problem)?;
    if stage > target || target >= problem.n_groups() {
        return Err(Error::invalid("need stage <= target < A"));
    }
    let (sg, q) = sorted_setup(problem, powers, duals, weights)?;
    let h = group_columns(draw, &sg);
    let an = analyze(
        &h,
        draw.n,
        &q,
        Want {
            mmse: true,
            eta: false,
        },
    )?;
    Ok(an.mmse[stage][target - stage])
}

/// Mean MMSE table `[k][j − k]` over `trials` draws (decoding positions).
#[allow(clippy::too_many_arguments)]
pub fn mc_mmse_table(
    problem: &ClusterProblem,
    powers: &PowerAllocation,
    duals: &DualVars,
    weights: &Weights,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let (sg, q) = sorted_setup(problem, powers, duals, weights)?;
    let per: Vec<Vec<Vec<f64>>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let draw = draw_channel(problem, n, seed, t)?;
            let h = group_columns(&draw, &sg);
            Ok(analyze(
                &h,
                n,
                &q,
                Want {
                    mmse: true,
                    eta: false,
                },
            )?
            .mmse)
        })
        .collect::<Result<_>>()?;
    let mut mean: Vec<Vec<f64>> = per[0].iter().map(|r| vec![0.0; r.len()]).collect();
    for t in &per {
        for (row, tr) in mean.iter_mut().zip(t) {
            for (m, x) in row.iter_mut().zip(tr) {
                *m += x;
            }
        }
    }
    for row in &mut mean {
        for m in row.iter_mut() {
            *m /= trials as f64;
        }
    }
    Ok(mean)
}

/// Sample-average oracle over a fixed set of draws.
pub struct MonteCarloOracle {
    width: usize,
    columns: Vec<Mat<c64>>,
}

impl MonteCarloOracle {
    pub fn new(
        problem: &ClusterProblem,
        duals: &DualVars,
        weights: &Weights,
        n: usize,
        trials: usize,
        seed: u64,
    ) -> Result<Self> {
        if trials == 0 {
            return Err(Error::invalid("trials must be at least 1"));
        }
        let sg = SortedGains::new(problem, duals, weights.order())?;
        let columns = (0..trials as u64)
            .into_par_iter()
            .map(|t| Ok(group_columns(&draw_channel(problem, n, seed, t)?, &sg)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MonteCarloOracle { width: n, columns })
    }
}

impl StageOracle for MonteCarloOracle {
    fn positions(&self) -> usize {
        self.columns[0].ncols() / self.width
    }

    fn evaluate(&mut self, q: &[f64]) -> Result<StageTable> {
        let width = self.width;
        let per = self
            .columns
            .par_iter()
            .map(|h| {
                analyze(
                    h,
                    width,
                    q,
                    Want {
                        mmse: true,
                        eta: true,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let units = q.len();
        let mut mmse: Vec<Vec<f64>> = (0..units).map(|k| vec![0.0; units - k]).collect();
        let mut eta = mmse.clone();
        for an in &per {
            for k in 0..units {
                for i in 0..units - k {
                    mmse[k][i] += an.mmse[k][i];
                    eta[k][i] += an.eta[k][i];
                }
            }
        }
        let t = per.len() as f64;
        for k in 0..units {
            for i in 0..units - k {
                mmse[k][i] /= t;
                eta[k][i] /= t;
            }
        }
        let mean = Analysis {
            rates: Vec::new(),
            mmse,
            eta,
        };
        Ok(stage_table(&mean, q))
    }
}

/// Powers maximizing the sample-average weighted sum rate over `trials`
/// draws of size `n`. Not settling within the iteration cap is reported
/// through `converged`, not as an error.
#[allow(clippy::too_many_arguments)]
pub fn finite_n_power_opt(
    problem: &ClusterProblem,
    weights: &Weights,
    duals: &DualVars,
    n: usize,
    trials: usize,
    seed: u64,
    tol: &Tolerances,
) -> Result<PowerSolution> {
    let mut oracle = MonteCarloOracle::new(problem, duals, weights, n, trials, seed)?;
    let budget = duals.budget(problem.bs_powers());
    optimize_powers_with(&mut oracle, weights, budget, None, tol, false)
}

/// Sample mean and standard error of per-group rates.
#[derive(Debug, Clone)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    /// `per_trial[t][k]`.
    pub per_trial: Vec<Vec<f64>>,
}

impl McEstimate {
    /// Writes `trial,group,rate` rows.
    pub fn write_csv<W: Write>(&self, mut out: W, scale: f64) -> std::io::Result<()> {
        writeln!(out, "trial,group,rate")?;
        for (t, row) in self.per_trial.iter().enumerate() {
            for (k, r) in row.iter().enumerate() {
                writeln!(out, "{t},{k},{}", g12(r * scale))?;
            }
        }
        Ok(())
    }
}

/// Ergodic per-group rates estimated over `trials` independent draws.
#[allow(clippy::too_many_arguments)]
pub fn mc_ergodic_rates(
    problem: &ClusterProblem,
    powers: &PowerAllocation,
    duals: &DualVars,
    weights: &Weights,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<McEstimate> {
    if trials < 2 {
        return Err(Error::invalid(
            "need at least 2 trials for a standard error",
        ));
    }
    let (sg, q) = sorted_setup(problem, powers, duals, weights)?;
    let per_trial = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let draw = draw_channel(problem, n, seed, t)?;
            let h = group_columns(&draw, &sg);
            let an = analyze(
                &h,
                n,
                &q,
                Want {
                    mmse: false,
                    eta: false,
                },
            )?;
            Ok(sg.unsort(&an.rates))
        })
        .collect::<Result<Vec<_>>>()?;
    let a = problem.n_groups();
    let t = trials as f64;
    let mut mean = vec![0.0; a];
    for row in &per_trial {
        for (m, r) in mean.iter_mut().zip(row) {
            *m += r;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t);
    let mut var = vec![0.0; a];
    for row in &per_trial {
        for k in 0..a {
            var[k] += (row[k] - mean[k]).powi(2);
        }
    }
    let std_err = var.iter().map(|v| (v / (t - 1.0) / t).sqrt()).collect();
    Ok(McEstimate {
        mean,
        std_err,
        per_trial,
    })
}
