//! Batch front-end: runs a validated [`RunConfig`] and writes its artifacts,
//! and merges finished runs into gnuplot data files.
//!
//! Every run directory holds `rates.csv` (`cluster,group,rate`),
//! `groups.csv`, `convergence.csv` and `summary.json`, plus task-specific
//! files. Exit codes: 2 config error, 3 non-convergence, 4 I/O failure,
//! 1 anything else.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{LogBase, RunConfig, ScenarioSpec, Task};
use crate::error::{Error, Result};
use crate::fairness::{self, solve_scenario_fairness, utility_value};
use crate::fmt::g12;
use crate::geometry::{cluster_problem, ClusterProblem, Scenario};
use crate::limit::{
    optimize_lambda, optimize_powers_with, AsymptoticOracle, LambdaSolution, PowerSolution, Weights,
};
use crate::montecarlo::{
    dynamic_scheduler, mc_ergodic_rates, McEstimate, SchedulerConfig, SchedulerResult,
};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NO_CONVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::NoConvergence { .. } => EXIT_NO_CONVERGENCE,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_OTHER,
    }
}

/// What a finished run reports.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub summary: Value,
    pub converged: bool,
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Seed of cluster `c`; cluster 0 uses the run seed itself.
fn cluster_seed(seed: u64, c: usize) -> u64 {
    seed.wrapping_add((c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

struct Context<'a> {
    cfg: &'a RunConfig,
    scenario: Scenario,
    problems: Vec<ClusterProblem>,
    out: &'a Path,
    unit: f64,
}

impl Context<'_> {
    fn groups(&self, c: usize) -> &[usize] {
        &self.scenario.clusters[c].groups
    }

    fn weights(&self, c: usize) -> Result<Weights> {
        match &self.cfg.weights {
            Some(w) => Weights::new(self.groups(c).iter().map(|&g| w[g]).collect()),
            None => Ok(Weights::uniform(self.groups(c).len())),
        }
    }

    fn seed(&self) -> u64 {
        self.cfg
            .seed
            .expect("validated: Monte Carlo tasks carry a seed")
    }

    /// Rates in nats indexed `[cluster][local group]` → `rates.csv`.
    fn write_rates(&self, rates: &[Vec<f64>]) -> Result<()> {
        write_file(&self.out.join("rates.csv"), |w| {
            writeln!(w, "cluster,group,rate")?;
            for (c, r) in rates.iter().enumerate() {
                for (k, x) in r.iter().enumerate() {
                    writeln!(w, "{c},{},{}", self.groups(c)[k], g12(x / self.unit))?;
                }
            }
            Ok(())
        })
    }

    fn write_groups(&self) -> Result<()> {
        let s = &self.scenario;
        let linear = matches!(self.cfg.scenario_spec()?, ScenarioSpec::Linear { .. });
        write_file(&self.out.join("groups.csv"), |w| {
            writeln!(w, "group,cluster,x_km,y_km,position_km")?;
            for g in 0..s.n_groups() {
                let c = s.cluster_of_group(g).expect("validated partition");
                match s.group_positions.get(g) {
                    Some(p) => {
                        let pos = if linear {
                            p[0]
                        } else {
                            s.clusters[c]
                                .bs
                                .iter()
                                .map(|&m| s.wrapped_distance(*p, s.bs_positions[m]))
                                .fold(f64::INFINITY, f64::min)
                        };
                        writeln!(w, "{g},{c},{},{},{}", g12(p[0]), g12(p[1]), g12(pos))?
                    }
                    None => writeln!(w, "{g},{c},,,{g}")?,
                }
            }
            Ok(())
        })
    }

    fn scaled_utility(&self, rates: &[Vec<f64>]) -> Value {
        let all: Vec<f64> = rates.iter().flatten().map(|r| r / self.unit).collect();
        utility_value(&self.cfg.utility, &all).map_or(Value::Null, Value::from)
    }

    /// Per-group values of cluster `c` keyed by global group index.
    fn global(&self, c: usize, local: &[f64]) -> Value {
        let map: serde_json::Map<String, Value> = local
            .iter()
            .enumerate()
            .map(|(k, x)| (self.groups(c)[k].to_string(), Value::from(*x)))
            .collect();
        Value::Object(map)
    }
}

/// Runs `cfg`, writing into `out`. Nothing is created when the config is
/// invalid. Non-convergence is reported as an error after all artifacts are
/// written.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let start = Instant::now();
    let scenario = cfg.validate()?;
    let gains = scenario.gains()?;
    let problems = (0..scenario.n_clusters())
        .map(|c| cluster_problem(&scenario, &gains, c))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ctx = Context {
        cfg,
        scenario,
        problems,
        out,
        unit: cfg.log_base.divisor(),
    };
    if cfg.task != Task::Sweep {
        ctx.write_groups()?;
    }
    let (mut summary, converged) = match cfg.task {
        Task::SolveFairness => solve_fairness_task(&ctx)?,
        Task::SumRate => sum_rate_task(&ctx, false)?,
        Task::ValidateMc => sum_rate_task(&ctx, true)?,
        Task::DynamicSim => dynamic_task(&ctx)?,
        Task::Sweep => sweep_task(&ctx)?,
    };
    summary["artifact_version"] = json!(env!("CARGO_PKG_VERSION"));
    summary["task"] = serde_json::to_value(cfg.task).expect("plain enum");
    summary["rate_unit"] = json!(cfg.log_base.label());
    summary["converged"] = json!(converged);
    summary["wall_time_s"] = json!(start.elapsed().as_secs_f64());
    summary["config"] = serde_json::to_value(cfg).expect("config serializes");
    let path = out.join("summary.json");
    write_file(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        writeln!(w)
    })?;
    if !converged {
        return Err(Error::NoConvergence {
            what: "run",
            iterations: 0,
            residual: f64::NAN,
        });
    }
    Ok(RunOutcome {
        out_dir: out.to_path_buf(),
        summary,
        converged,
    })
}

fn solve_fairness_task(ctx: &Context) -> Result<(Value, bool)> {
    let results =
        solve_scenario_fairness(&ctx.scenario, &ctx.cfg.utility, &ctx.cfg.fairness_options())?;
    let rates: Vec<Vec<f64>> = results.iter().map(|(_, r)| r.rates.r.clone()).collect();
    ctx.write_rates(&rates)?;
    write_file(&ctx.out.join("convergence.csv"), |w| {
        fairness::write_trace_csv(&results, w)
    })?;
    let clusters: Vec<Value> = results
        .iter()
        .enumerate()
        .map(|(c, (_, r))| {
            json!({
                "cluster": c,
                "lambda": r.duals.values(),
                "q": ctx.global(c, &r.powers.q),
                "weights": ctx.global(c, r.weights.values()),
                "iterations": r.iterations,
                "converged": r.converged,
                "stationarity": r.stationarity(),
                "dual_value": r.dual_value,
                "utility": r.utility_value,
                "symmetric_blocks": r.blocks,
                "time_shared_groups": r
                    .tied_classes
                    .iter()
                    .map(|cl| cl.iter().map(|&k| ctx.groups(c)[k]).collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
                "time_sharing_points": r.time_sharing.len(),
            })
        })
        .collect();
    let converged = results.iter().all(|(_, r)| r.converged);
    Ok((
        json!({ "utility": ctx.scaled_utility(&rates), "clusters": clusters }),
        converged,
    ))
}

struct SumRatePart {
    lambda: LambdaSolution,
    trace: PowerSolution,
    mc: Option<McEstimate>,
}

fn sum_rate_task(ctx: &Context, monte_carlo: bool) -> Result<(Value, bool)> {
    let tol = ctx.cfg.tolerances();
    let parts = (0..ctx.problems.len())
        .into_par_iter()
        .map(|c| -> Result<SumRatePart> {
            let p = &ctx.problems[c];
            let w = ctx.weights(c)?;
            let lambda = optimize_lambda(p, &w, ctx.cfg.lambda_mode, None, &tol)?;
            let duals = &lambda.duals;
            let budget = duals.budget(p.bs_powers());
            let trace = if w.max() > 0.0 {
                let mut oracle = AsymptoticOracle::new(p, duals, &w, &tol)?;
                optimize_powers_with(&mut oracle, &w, budget, None, &tol, true)?
            } else {
                lambda.solution.powers.clone()
            };
            let mc = if monte_carlo {
                let mc = &ctx.cfg.monte_carlo;
                Some(mc_ergodic_rates(
                    p,
                    &lambda.solution.powers.allocation,
                    duals,
                    &w,
                    mc.n,
                    mc.trials,
                    cluster_seed(ctx.seed(), c),
                )?)
            } else {
                None
            };
            Ok(SumRatePart { lambda, trace, mc })
        })
        .collect::<Result<Vec<_>>>()?;

    let rates: Vec<Vec<f64>> = parts
        .iter()
        .map(|s| s.lambda.solution.rates.r.clone())
        .collect();
    ctx.write_rates(&rates)?;
    write_file(&ctx.out.join("convergence.csv"), |w| {
        writeln!(w, "cluster,iter,j,Q_j,residual")?;
        for (c, s) in parts.iter().enumerate() {
            for r in &s.trace.trace {
                writeln!(
                    w,
                    "{c},{},{},{},{}",
                    r.iter,
                    ctx.groups(c)[r.position],
                    g12(r.q),
                    g12(r.residual)
                )?;
            }
        }
        Ok(())
    })?;
    if monte_carlo {
        write_file(&ctx.out.join("mc_vs_asymptotic.csv"), |w| {
            writeln!(w, "cluster,group,asymptotic,monte_carlo,std_err,rel_err")?;
            for (c, s) in parts.iter().enumerate() {
                let mc = s.mc.as_ref().expect("requested");
                for (k, asym) in rates[c].iter().enumerate() {
                    let rel = if *asym > 0.0 {
                        (mc.mean[k] - asym).abs() / asym
                    } else {
                        (mc.mean[k] - asym).abs()
                    };
                    writeln!(
                        w,
                        "{c},{},{},{},{},{}",
                        ctx.groups(c)[k],
                        g12(asym / ctx.unit),
                        g12(mc.mean[k] / ctx.unit),
                        g12(mc.std_err[k] / ctx.unit),
                        g12(rel)
                    )?;
                }
            }
            Ok(())
        })?;
        write_file(&ctx.out.join("mc_trials.csv"), |w| {
            writeln!(w, "trial,group,rate")?;
            for (c, s) in parts.iter().enumerate() {
                for (t, row) in
                    s.mc.as_ref()
                        .expect("requested")
                        .per_trial
                        .iter()
                        .enumerate()
                {
                    for (k, r) in row.iter().enumerate() {
                        writeln!(w, "{t},{},{}", ctx.groups(c)[k], g12(r / ctx.unit))?;
                    }
                }
            }
            Ok(())
        })?;
    }
    let clusters: Vec<Value> = parts
        .iter()
        .enumerate()
        .map(|(c, s)| {
            let sol = &s.lambda.solution;
            json!({
                "cluster": c,
                "weighted_sum_rate": sol.value / ctx.unit,
                "lambda": s.lambda.duals.values(),
                "q": ctx.global(c, &sol.powers.allocation.q),
                "kkt_residual": sol.powers.kkt_residual,
                "zero_set_violation": sol.powers.zero_set_violation,
                "lambda_gradient_norm": s.lambda.gradient_norm,
                "lambda_iterations": s.lambda.iterations,
            })
        })
        .collect();
    Ok((
        json!({ "utility": ctx.scaled_utility(&rates), "clusters": clusters }),
        true,
    ))
}

fn dynamic_task(ctx: &Context) -> Result<(Value, bool)> {
    let tol = ctx.cfg.tolerances();
    let mc = &ctx.cfg.monte_carlo;
    let runs = (0..ctx.problems.len())
        .into_par_iter()
        .map(|c| -> Result<(SchedulerConfig, SchedulerResult)> {
            let p = &ctx.problems[c];
            let seed = cluster_seed(ctx.seed(), c);
            let mut sc = SchedulerConfig::with_defaults(p, mc.n, mc.horizon, seed, &tol)?;
            if let Some(a) = mc.a_max {
                sc.a_max = a;
                sc.v = 100.0 * a;
            }
            if let Some(v) = mc.v {
                sc.v = v;
            }
            // V = 100·A_max collapses to zero with zero arrivals.
            if !(sc.v > 0.0) {
                sc.v = 1.0;
            }
            sc.record_trace = true;
            let res = dynamic_scheduler(p, &ctx.cfg.utility, &sc, &tol)?;
            Ok((sc, res))
        })
        .collect::<Result<Vec<_>>>()?;
    let rates: Vec<Vec<f64>> = runs.iter().map(|(_, r)| r.group_rates()).collect();
    ctx.write_rates(&rates)?;
    write_file(&ctx.out.join("scheduler.csv"), |w| {
        writeln!(w, "t,k,i,U,inst_rate,avg_rate")?;
        for (c, (_, res)) in runs.iter().enumerate() {
            for r in &res.trace {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    r.t,
                    ctx.groups(c)[r.k],
                    r.i,
                    g12(r.u),
                    g12(r.inst_rate / ctx.unit),
                    g12(r.avg_rate / ctx.unit)
                )?;
            }
        }
        Ok(())
    })?;
    write_file(&ctx.out.join("convergence.csv"), |w| {
        writeln!(w, "cluster,t,mean_backlog")?;
        for (c, (sc, res)) in runs.iter().enumerate() {
            let users = res.trace.len() / sc.horizon;
            for (t, chunk) in res.trace.chunks(users).enumerate() {
                let mean = chunk.iter().map(|r| r.u).sum::<f64>() / users as f64;
                writeln!(w, "{c},{t},{}", g12(mean))?;
            }
        }
        Ok(())
    })?;
    let clusters: Vec<Value> = runs
        .iter()
        .enumerate()
        .map(|(c, (sc, res))| {
            json!({
                "cluster": c,
                "v": sc.v,
                "a_max": sc.a_max / ctx.unit,
                "seed": sc.seed,
                "unsettled_slots": res.unsettled_slots,
                "max_final_backlog": res.queues.backlog().iter().copied().fold(0.0, f64::max),
            })
        })
        .collect();
    Ok((
        json!({ "utility": ctx.scaled_utility(&rates), "clusters": clusters }),
        true,
    ))
}

fn sweep_task(ctx: &Context) -> Result<(Value, bool)> {
    let spec = ctx.cfg.sweep.as_ref().expect("validated");
    let points = (0..spec.values.len())
        .into_par_iter()
        .map(|i| {
            let dir = format!("point_{i:03}");
            let sub = ctx.cfg.sweep_point(i)?;
            let res = run(&sub, &ctx.out.join(&dir));
            Ok((dir, res))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut converged = true;
    let mut rows = Vec::new();
    write_file(&ctx.out.join("index.csv"), |w| {
        writeln!(w, "point,{},dir,status,utility", spec.parameter)?;
        for (i, (dir, res)) in points.iter().enumerate() {
            let (status, utility) = match res {
                Ok(o) => ("ok", o.summary["utility"].as_f64()),
                Err(e) => {
                    converged = false;
                    (
                        if exit_code(e) == EXIT_NO_CONVERGENCE {
                            "not_converged"
                        } else {
                            "failed"
                        },
                        None,
                    )
                }
            };
            let u = utility.map(g12).unwrap_or_default();
            writeln!(w, "{i},{},{dir},{status},{u}", g12(spec.values[i]))?;
            rows.push(json!({ "point": i, "value": spec.values[i], "dir": dir, "status": status, "utility": utility }));
        }
        Ok(())
    })?;
    // Hard failures other than non-convergence abort the sweep.
    for (_, res) in &points {
        if let Err(e) = res {
            if exit_code(e) != EXIT_NO_CONVERGENCE {
                return Err(Error::Numerical(format!("sweep point failed: {e}")));
            }
        }
    }
    Ok((json!({ "points": rows }), converged))
}

struct RunData {
    label: String,
    positions: Vec<f64>,
    rates: Vec<f64>,
    utility: Vec<(usize, usize, f64)>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_rows(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let text = read(path)?;
    let mut lines = text.lines();
    let got = lines.next().unwrap_or_default();
    if got != header {
        return Err(Error::invalid(format!(
            "{}: expected header `{header}`, found `{got}`",
            path.display()
        )));
    }
    Ok(lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect())
}

fn num<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::invalid(format!("{}: cannot parse `{s}`", path.display())))
}

fn load_run(dir: &Path) -> Result<RunData> {
    let gpath = dir.join("groups.csv");
    let positions = parse_rows(&gpath, "group,cluster,x_km,y_km,position_km")?
        .iter()
        .map(|r| num(&gpath, &r[4]))
        .collect::<Result<Vec<f64>>>()?;
    let rpath = dir.join("rates.csv");
    let mut rates = vec![f64::NAN; positions.len()];
    for r in parse_rows(&rpath, "cluster,group,rate")? {
        let g: usize = num(&rpath, &r[1])?;
        let slot = rates.get_mut(g).ok_or_else(|| {
            Error::invalid(format!("{}: group {g} out of range", rpath.display()))
        })?;
        *slot = num(&rpath, &r[2])?;
    }
    let cpath = dir.join("convergence.csv");
    let mut utility = Vec::new();
    if read(&cpath)?.starts_with("cluster,n,utility,gap,step") {
        for r in parse_rows(&cpath, "cluster,n,utility,gap,step")? {
            utility.push((
                num(&cpath, &r[0])?,
                num(&cpath, &r[1])?,
                num(&cpath, &r[2])?,
            ));
        }
    }
    let label = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunData {
        label,
        positions,
        rates,
        utility,
    })
}

/// Merges run directories into `rate_vs_position.dat` (position, then one
/// rate column per run) and `utility_vs_iter.dat` (one block per run and
/// cluster), both written into `out`.
pub fn emit_plot_data(dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if dirs.is_empty() {
        return Err(Error::invalid("no run directories given"));
    }
    let runs = dirs
        .iter()
        .map(|d| load_run(d))
        .collect::<Result<Vec<_>>>()?;
    let n = runs[0].rates.len();
    if let Some(r) = runs.iter().find(|r| r.rates.len() != n) {
        return Err(Error::invalid(format!(
            "run `{}` has {} groups, `{}` has {n}",
            r.label,
            r.rates.len(),
            runs[0].label
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rate_path = out.join("rate_vs_position.dat");
    write_file(&rate_path, |w| {
        write!(w, "# position_km")?;
        for r in &runs {
            write!(w, " {}", r.label)?;
        }
        writeln!(w)?;
        for g in 0..n {
            write!(w, "{}", g12(runs[0].positions[g]))?;
            for r in &runs {
                write!(w, " {}", g12(r.rates[g]))?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    let util_path = out.join("utility_vs_iter.dat");
    write_file(&util_path, |w| {
        writeln!(w, "# iteration utility")?;
        for r in &runs {
            let mut last = None;
            // Iterates with a zero rate have utility −∞; gnuplot cannot draw them.
            for (c, it, u) in r.utility.iter().filter(|(_, _, u)| u.is_finite()) {
                if last != Some(*c) {
                    if last.is_some() {
                        writeln!(w, "\n")?;
                    }
                    writeln!(w, "# run {} cluster {c}", r.label)?;
                    last = Some(*c);
                }
                writeln!(w, "{it} {}", g12(*u))?;
            }
            if last.is_some() {
                writeln!(w, "\n")?;
            }
        }
        Ok(())
    })?;
    Ok(vec![rate_path, util_path])
}

/// Log base of a finished run, read from its summary.
pub fn run_unit(dir: &Path) -> Result<LogBase> {
    let path = dir.join("summary.json");
    let v: Value = serde_json::from_str(&read(&path)?)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    match v["rate_unit"].as_str() {
        Some("bits") => Ok(LogBase::Bits),
        Some("nats") => Ok(LogBase::Nats),
        _ => Err(Error::invalid(format!("{}: no rate_unit", path.display()))),
    }
}
