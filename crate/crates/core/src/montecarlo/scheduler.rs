use std::io::Write;

use faer::{c64, Mat};

use super::{analyze, draw_channel, stage_table, ChannelDraw, Want};
use crate::error::{Error, Result};
use crate::fairness::Utility;
use crate::fmt::g12;
use crate::geometry::ClusterProblem;
use crate::limit::{
    group_rates, optimize_sorted, DualVars, PowerAllocation, StageOracle, StageTable, Tolerances,
    Weights,
};

/// Backlogs `U_{k,i}` of every user, stored `k * n + i`.
#[derive(Debug, Clone)]
pub struct VirtualQueues {
    n: usize,
    u: Vec<f64>,
    v: f64,
    a_max: f64,
}

impl VirtualQueues {
    pub fn new(groups: usize, n: usize, v: f64, a_max: f64) -> Result<Self> {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(format!("V must be positive, got {v}")));
        }
        if !(a_max.is_finite() && a_max >= 0.0) {
            return Err(Error::invalid(format!(
                "A_max must be nonnegative, got {a_max}"
            )));
        }
        Ok(VirtualQueues {
            n,
            u: vec![0.0; groups * n],
            v,
            a_max,
        })
    }

    pub fn backlog(&self) -> &[f64] {
        &self.u
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.u[k * self.n + i]
    }

    /// Maximizer of `V g(a) − Σ a U` over `0 ≤ a ≤ A_max`.
    pub fn arrivals(&self, utility: &Utility) -> Vec<f64> {
        let (v, cap) = (self.v, self.a_max);
        match *utility {
            // Any excess over the smallest arrival costs backlog without
            // raising the minimum, so all arrivals are equal.
            Utility::Hfs => {
                let total: f64 = self.u.iter().sum();
                let a = if v > total { cap } else { 0.0 };
                vec![a; self.u.len()]
            }
            Utility::Pfs => self
                .u
                .iter()
                .map(|&u| if u > 0.0 { cap.min(v / u) } else { cap })
                .collect(),
            Utility::AlphaFair { alpha } => self
                .u
                .iter()
                .map(|&u| {
                    if u > 0.0 {
                        cap.min((v / u).powf(1.0 / alpha))
                    } else {
                        cap
                    }
                })
                .collect(),
        }
    }

    /// `U ← [U − r]₊ + a`.
    pub fn update(&mut self, rates: &[f64], arrivals: &[f64]) {
        for ((u, r), a) in self.u.iter_mut().zip(rates).zip(arrivals) {
            *u = (*u - r).max(0.0) + a;
        }
    }
}

/// Parameters of one scheduler run.
#[derive(Debug, Clone)]
pub struct SchedulerConfig {
    pub n: usize,
    pub horizon: usize,
    pub v: f64,
    pub a_max: f64,
    pub seed: u64,
    pub record_trace: bool,
}

impl SchedulerConfig {
    /// `A_max` twice the largest single-group rate, `V = 100·A_max`.
    pub fn with_defaults(
        problem: &ClusterProblem,
        n: usize,
        horizon: usize,
        seed: u64,
        tol: &Tolerances,
    ) -> Result<Self> {
        let a_max = 2.0 * max_single_group_rate(problem, tol)?;
        Ok(SchedulerConfig {
            n,
            horizon,
            v: 100.0 * a_max,
            a_max,
            seed,
            record_trace: false,
        })
    }
}

/// Largest large-system rate any one group reaches when it alone gets the
/// whole sum-power budget.
pub fn max_single_group_rate(problem: &ClusterProblem, tol: &Tolerances) -> Result<f64> {
    let a = problem.n_groups();
    let duals = DualVars::ones(problem.n_bs());
    let budget = duals.budget(problem.bs_powers());
    let mut best = 0.0f64;
    for k in 0..a {
        let mut q = vec![0.0; a];
        q[k] = budget;
        let r = group_rates(
            problem,
            &PowerAllocation::new(q, budget)?,
            &duals,
            &Weights::uniform(a),
            tol,
        )?;
        best = best.max(r.r[k]);
    }
    Ok(best)
}

/// One user in one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotRecord {
    pub t: usize,
    pub k: usize,
    pub i: usize,
    /// Backlog before the slot.
    pub u: f64,
    pub inst_rate: f64,
    pub avg_rate: f64,
}

#[derive(Debug, Clone)]
pub struct SchedulerResult {
    /// Time-average rate of each user, `[k][i]`, in nats.
    pub time_avg: Vec<Vec<f64>>,
    pub queues: VirtualQueues,
    /// Slots whose power iteration hit the cap before settling.
    pub unsettled_slots: usize,
    pub trace: Vec<SlotRecord>,
}

impl SchedulerResult {
    /// Mean over the users of each group.
    pub fn group_rates(&self) -> Vec<f64> {
        self.time_avg
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect()
    }

    /// Writes `t,k,i,U,inst_rate,avg_rate` rows, rates multiplied by `scale`.
    pub fn write_trace_csv<W: Write>(&self, mut out: W, scale: f64) -> std::io::Result<()> {
        writeln!(out, "t,k,i,U,inst_rate,avg_rate")?;
        for r in &self.trace {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.t,
                r.k,
                r.i,
                g12(r.u),
                g12(r.inst_rate * scale),
                g12(r.avg_rate * scale)
            )?;
        }
        Ok(())
    }
}

/// One column per user in decoding order: user `order[p] = k*n + i` gets
/// `√(β²_{m,k}/N) H_{m,k}[:, i]` stacked over `m`.
fn user_columns(draw: &ChannelDraw, problem: &ClusterProblem, order: &[usize]) -> Mat<c64> {
    let (n, ant, b) = (draw.n, draw.antennas, draw.n_bs);
    let mut h = Mat::<c64>::zeros(ant * b, order.len());
    for (pos, &user) in order.iter().enumerate() {
        let (k, i) = (user / n, user % n);
        for m in 0..b {
            let amp = problem.beta(m, k) / (n as f64).sqrt();
            let blk = draw.block(m, k);
            for r in 0..ant {
                h[(m * ant + r, pos)] = blk[(r, i)] * amp;
            }
        }
    }
    h
}

struct SlotOracle<'a> {
    h: &'a Mat<c64>,
}

impl StageOracle for SlotOracle<'_> {
    fn positions(&self) -> usize {
        self.h.ncols()
    }

    fn evaluate(&mut self, q: &[f64]) -> Result<StageTable> {
        let an = analyze(
            self.h,
            1,
            q,
            Want {
                mmse: true,
                eta: true,
            },
        )?;
        Ok(stage_table(&an, q))
    }
}

fn weighted(w: &[f64], r: &[f64]) -> f64 {
    w.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Instantaneous per-user rates (decoding order) maximizing `Σ w r` on one
/// draw under sum power, never worse than equal power. Returns the rates and
/// whether the power iteration settled.
fn slot_rates(
    h: &Mat<c64>,
    sorted_w: &[f64],
    deltas: &[f64],
    budget: f64,
    tol: &Tolerances,
) -> Result<(Vec<f64>, bool)> {
    let units = h.ncols();
    let flat = vec![budget / units as f64; units];
    let base = analyze(
        h,
        1,
        &flat,
        Want {
            mmse: false,
            eta: false,
        },
    )?
    .rates;
    let sp = optimize_sorted(&mut SlotOracle { h }, deltas, budget, None, tol, false)?;
    let opt = analyze(
        h,
        1,
        &sp.q,
        Want {
            mmse: false,
            eta: false,
        },
    )?
    .rates;
    if weighted(sorted_w, &opt) >= weighted(sorted_w, &base) {
        Ok((opt, sp.converged))
    } else {
        Ok((base, sp.converged))
    }
}

/// Queue-driven scheduler under sum power: each slot draws a fresh channel,
/// serves the instantaneous weighted sum rate with the backlogs as weights,
/// then feeds the queues with the arrivals favoured by `utility`.
pub fn dynamic_scheduler(
    problem: &ClusterProblem,
    utility: &Utility,
    cfg: &SchedulerConfig,
    tol: &Tolerances,
) -> Result<SchedulerResult> {
    utility.validate()?;
    if cfg.horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let (a, n) = (problem.n_groups(), cfg.n);
    let users = a * n;
    let budget = n as f64 * problem.bs_powers().iter().sum::<f64>();
    let mut queues = VirtualQueues::new(a, n, cfg.v, cfg.a_max)?;
    let mut total = vec![0.0; users];
    let mut unsettled_slots = 0;
    let mut trace = Vec::new();
    for t in 0..cfg.horizon {
        let draw = draw_channel(problem, n, cfg.seed, t as u64)?;
        let u = queues.backlog().to_vec();
        let weights = if u.iter().all(|x| *x == 0.0) {
            Weights::uniform(users)
        } else {
            Weights::new(u.clone())?
        };
        let order = weights.order();
        let h = user_columns(&draw, problem, order);
        let sorted_w: Vec<f64> = order.iter().map(|&x| weights.values()[x]).collect();
        let (sorted_r, settled) = slot_rates(&h, &sorted_w, &weights.deltas(), budget, tol)?;
        if !settled {
            unsettled_slots += 1;
        }
        let mut rates = vec![0.0; users];
        for (pos, &x) in order.iter().enumerate() {
            rates[x] = sorted_r[pos];
        }
        for (s, r) in total.iter_mut().zip(&rates) {
            *s += r;
        }
        if cfg.record_trace {
            let steps = (t + 1) as f64;
            for x in 0..users {
                trace.push(SlotRecord {
                    t,
                    k: x / n,
                    i: x % n,
                    u: u[x],
                    inst_rate: rates[x],
                    avg_rate: total[x] / steps,
                });
            }
        }
        let arrivals = queues.arrivals(utility);
        queues.update(&rates, &arrivals);
    }
    let steps = cfg.horizon as f64;
    let time_avg = (0..a)
        .map(|k| (0..n).map(|i| total[k * n + i] / steps).collect())
        .collect();
    Ok(SchedulerResult {
        time_avg,
        queues,
        unsettled_slots,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montecarlo::dual_mac_group_rates;

    fn two_groups() -> ClusterProblem {
        ClusterProblem::new(1.0, &[vec![1.0, 0.6], vec![0.4, 0.9]], vec![2.0, 2.0]).unwrap()
    }

    #[test]
    fn queues_never_go_negative() {
        let mut q = VirtualQueues::new(1, 2, 10.0, 1.0).unwrap();
        q.update(&[5.0, 0.5], &[0.0, 0.25]);
        assert_eq!(q.backlog(), &[0.0, 0.25]);
    }

    #[test]
    fn closed_form_arrivals() {
        let mut q = VirtualQueues::new(1, 3, 4.0, 3.0).unwrap();
        q.update(&[0.0; 3], &[0.0, 1.0, 8.0]);
        assert_eq!(q.arrivals(&Utility::Pfs), vec![3.0, 3.0, 0.5]);
        assert_eq!(
            q.arrivals(&Utility::AlphaFair { alpha: 2.0 }),
            vec![3.0, 2.0, 0.5f64.sqrt()]
        );
        assert_eq!(q.arrivals(&Utility::Hfs), vec![0.0; 3]);
        let q = VirtualQueues::new(1, 3, 4.0, 3.0).unwrap();
        assert_eq!(q.arrivals(&Utility::Hfs), vec![3.0; 3]);
    }

    #[test]
    fn hfs_arrivals_beat_every_sampled_box_point() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut q = VirtualQueues::new(1, 4, rng.random_range(0.5..10.0), 2.0).unwrap();
            let backlog: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..4.0)).collect();
            q.update(&[0.0; 4], &backlog);
            let objective = |a: &[f64]| {
                q.v * a.iter().copied().fold(f64::INFINITY, f64::min)
                    - a.iter().zip(q.backlog()).map(|(x, u)| x * u).sum::<f64>()
            };
            let best = objective(&q.arrivals(&Utility::Hfs));
            for _ in 0..200 {
                let a: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..=2.0)).collect();
                assert!(objective(&a) <= best + 1e-12);
            }
        }
    }

    #[test]
    fn one_slot_applies_the_queue_update() {
        let p = two_groups();
        let cfg = SchedulerConfig {
            n: 2,
            horizon: 1,
            v: 5.0,
            a_max: 0.7,
            seed: 3,
            record_trace: true,
        };
        let res = dynamic_scheduler(&p, &Utility::Pfs, &cfg, &Tolerances::default()).unwrap();
        // Empty queues: uniform weights, every arrival is A_max.
        for r in &res.trace {
            let after = res.queues.get(r.k, r.i);
            assert_eq!(after, (0.0 - r.inst_rate).max(0.0) + 0.7);
        }
    }

    #[test]
    fn zero_arrivals_drain_the_queues() {
        let cfg = SchedulerConfig {
            n: 1,
            horizon: 5,
            v: 1.0,
            a_max: 0.0,
            seed: 1,
            record_trace: true,
        };
        let res =
            dynamic_scheduler(&two_groups(), &Utility::Pfs, &cfg, &Tolerances::default()).unwrap();
        assert!(res.queues.backlog().iter().all(|u| *u == 0.0));
        assert!(res.trace.iter().all(|r| r.u == 0.0));
    }

    #[test]
    fn uniform_slot_matches_equal_power_group_rates() {
        // With uniform weights the sum rate is maximal at any split, and the
        // equal-power baseline is kept unless the iteration strictly helps.
        let p = two_groups();
        let draw = draw_channel(&p, 1, 9, 0).unwrap();
        let w = Weights::uniform(2);
        let h = user_columns(&draw, &p, w.order());
        let (r, _) = slot_rates(&h, &[1.0, 1.0], &w.deltas(), 4.0, &Tolerances::default()).unwrap();
        let eq = dual_mac_group_rates(
            &draw,
            &p,
            &PowerAllocation::uniform(2, 4.0),
            &DualVars::ones(2),
            &w,
        )
        .unwrap();
        let sum: f64 = r.iter().sum();
        assert!(sum >= eq.iter().sum::<f64>() - 1e-12);
    }

    #[test]
    fn single_group_rate_is_full_budget_log_det() {
        let p = ClusterProblem::new(1.0, &[vec![1.0]], vec![1.0]).unwrap();
        // (√5 − 1)/2 fixed point: 2 ln(1 + Γ) − Γ/(1 + Γ).
        let g: f64 = (5f64.sqrt() - 1.0) / 2.0;
        let want = 2.0 * (1.0 + g).ln() - g / (1.0 + g);
        let got = max_single_group_rate(&p, &Tolerances::default()).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn trace_is_reproducible() {
        let cfg = SchedulerConfig {
            n: 1,
            horizon: 20,
            v: 50.0,
            a_max: 1.0,
            seed: 8,
            record_trace: true,
        };
        let a =
            dynamic_scheduler(&two_groups(), &Utility::Pfs, &cfg, &Tolerances::default()).unwrap();
        let b =
            dynamic_scheduler(&two_groups(), &Utility::Pfs, &cfg, &Tolerances::default()).unwrap();
        assert_eq!(a.trace, b.trace);
        let mut buf = Vec::new();
        a.write_trace_csv(&mut buf, 1.0).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 20 * 2);
    }
}
