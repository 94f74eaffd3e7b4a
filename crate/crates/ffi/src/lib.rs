//! C ABI over the cellrate solvers.
//!
//! Every entry point returns an `int` status (`CR_OK` on success) and writes
//! results through caller-provided pointers. Objects cross the boundary as
//! opaque handles released by their matching `*_free`. On failure the
//! message is kept per thread and read back with [`cr_last_error_message`].
//! Panics never unwind into C; they surface as `CR_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use cellrate::fairness::{solve_fairness, FairnessOptions, FairnessResult, Utility};
use cellrate::geometry::ClusterProblem;
use cellrate::limit::{
    optimize_lambda, DualVars, LambdaMode, PowerAllocation, Tolerances, Weights,
};
use cellrate::montecarlo::mc_ergodic_rates;
use cellrate::Error;

pub const CR_OK: c_int = 0;
/// A required pointer argument was null.
pub const CR_ERR_NULL: c_int = 1;
pub const CR_ERR_INVALID: c_int = 2;
pub const CR_ERR_NO_CONVERGENCE: c_int = 3;
pub const CR_ERR_NUMERICAL: c_int = 4;
pub const CR_ERR_CONFIG: c_int = 5;
pub const CR_ERR_IO: c_int = 6;
/// The output buffer is shorter than the result.
pub const CR_ERR_BUFFER: c_int = 7;
pub const CR_ERR_PANIC: c_int = 8;

pub const CR_UTILITY_PFS: c_int = 0;
pub const CR_UTILITY_HFS: c_int = 1;
pub const CR_UTILITY_ALPHA_FAIR: c_int = 2;

pub const CR_LAMBDA_AUTO: c_int = 0;
pub const CR_LAMBDA_SYMMETRIC_SHORTCUT: c_int = 1;
pub const CR_LAMBDA_GRADIENT_DESCENT: c_int = 2;
pub const CR_LAMBDA_SUM_POWER_RELAX: c_int = 3;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    // Interior NULs would truncate the C string; replace them.
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure {
    code: c_int,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_)
            | Error::Scenario(_)
            | Error::NotSymmetric(_)
            | Error::DualUnbounded(_) => CR_ERR_INVALID,
            Error::NoConvergence { .. } => CR_ERR_NO_CONVERGENCE,
            Error::Numerical(_) | Error::NotPositiveDefinite(_) => CR_ERR_NUMERICAL,
            Error::Config(_) => CR_ERR_CONFIG,
            Error::Io { .. } => CR_ERR_IO,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: c_int, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CR_OK
        }
        Ok(Err(e)) => {
            set_last_error(e.message);
            e.code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            CR_ERR_PANIC
        }
    }
}

/// # Safety
/// `p` is null or points to `n` readable values.
unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(CR_ERR_NULL, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` is null or points to `n` writable values.
unsafe fn write_out(p: *mut f64, n: usize, src: &[f64], what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(fail(CR_ERR_NULL, format!("{what} is null")));
    }
    if n < src.len() {
        return Err(fail(
            CR_ERR_BUFFER,
            format!("{what} holds {n} values, {} needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), p, src.len());
    Ok(())
}

fn nonnull<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(CR_ERR_NULL, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn lambda_mode(mode: c_int) -> Result<LambdaMode, Failure> {
    Ok(match mode {
        CR_LAMBDA_AUTO => LambdaMode::Auto,
        CR_LAMBDA_SYMMETRIC_SHORTCUT => LambdaMode::SymmetricShortcut,
        CR_LAMBDA_GRADIENT_DESCENT => LambdaMode::GradientDescent,
        CR_LAMBDA_SUM_POWER_RELAX => LambdaMode::SumPowerRelax,
        m => return Err(fail(CR_ERR_INVALID, format!("unknown lambda mode {m}"))),
    })
}

/// Length in bytes of the last error message on this thread, including the
/// terminating NUL; 0 when the last call succeeded.
#[no_mangle]
pub extern "C" fn cr_last_error_length() -> usize {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(0, |s| s.as_bytes_with_nul().len())
    })
}

/// Copies the last error message on this thread into `buf` (NUL
/// terminated, truncated to `len` bytes). Returns the full length including
/// the NUL, so a return value above `len` means truncation.
///
/// # Safety
/// `buf` is null or points to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cr_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// One cluster: effective gains, antenna ratio and per-BS powers.
pub struct CrProblem(ClusterProblem);

/// Builds a cluster from row-major `beta` (`n_bs × n_groups`), `gamma`
/// antennas per user and `bs_powers` (`n_bs`).
///
/// # Safety
/// `beta` holds `n_bs * n_groups` values, `bs_powers` holds `n_bs`, `out`
/// is writable.
#[no_mangle]
pub unsafe extern "C" fn cr_problem_new(
    gamma: f64,
    n_bs: usize,
    n_groups: usize,
    beta: *const f64,
    bs_powers: *const f64,
    out: *mut *mut CrProblem,
) -> c_int {
    guard(|| {
        nonnull(out, "out")?;
        *out = ptr::null_mut();
        let len = n_bs
            .checked_mul(n_groups)
            .ok_or_else(|| fail(CR_ERR_INVALID, "n_bs * n_groups overflows"))?;
        let beta = slice(beta, len, "beta")?;
        let powers = slice(bs_powers, n_bs, "bs_powers")?;
        let rows: Vec<Vec<f64>> = beta.chunks(n_groups.max(1)).map(<[f64]>::to_vec).collect();
        let p = ClusterProblem::new(gamma, &rows, powers.to_vec())?;
        *out = Box::into_raw(Box::new(CrProblem(p)));
        Ok(())
    })
}

/// Releases a cluster; null is ignored.
///
/// # Safety
/// `p` is null or came from [`cr_problem_new`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cr_problem_free(p: *mut CrProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// # Safety
/// `p` is a live handle; `n_bs` and `n_groups` are writable.
#[no_mangle]
pub unsafe extern "C" fn cr_problem_dims(
    p: *const CrProblem,
    n_bs: *mut usize,
    n_groups: *mut usize,
) -> c_int {
    guard(|| {
        nonnull(p, "problem")?;
        nonnull(n_bs, "n_bs")?;
        nonnull(n_groups, "n_groups")?;
        *n_bs = (*p).0.n_bs();
        *n_groups = (*p).0.n_groups();
        Ok(())
    })
}

/// Maximal weighted sum of asymptotic per-group rates (nats per antenna)
/// for `weights` (`n_groups`), with multipliers chosen by `lambda_mode`.
/// Writes `rates` and group `powers` (`n_groups` each), `duals` (`n_bs`)
/// and the weighted sum to `value`. Any output pointer except `value` may
/// be null to skip it.
///
/// # Safety
/// `p` is a live handle; non-null pointers hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cr_weighted_sum_rate(
    p: *const CrProblem,
    weights: *const f64,
    lambda_mode_: c_int,
    rates: *mut f64,
    powers: *mut f64,
    duals: *mut f64,
    value: *mut f64,
) -> c_int {
    guard(|| {
        nonnull(p, "problem")?;
        nonnull(value, "value")?;
        let prob = &(*p).0;
        let (a, b) = (prob.n_groups(), prob.n_bs());
        let w = Weights::new(slice(weights, a, "weights")?.to_vec())?;
        let sol = optimize_lambda(
            prob,
            &w,
            lambda_mode(lambda_mode_)?,
            None,
            &Tolerances::default(),
        )?;
        if !rates.is_null() {
            write_out(rates, a, &sol.solution.rates.r, "rates")?;
        }
        if !powers.is_null() {
            write_out(powers, a, &sol.solution.powers.allocation.q, "powers")?;
        }
        if !duals.is_null() {
            write_out(duals, b, sol.duals.values(), "duals")?;
        }
        *value = sol.solution.value;
        Ok(())
    })
}

/// Outer-loop settings; start from [`cr_fairness_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CrFairnessOptions {
    /// One of the `CR_UTILITY_*` constants.
    pub utility: c_int,
    /// Exponent for `CR_UTILITY_ALPHA_FAIR`; ignored otherwise.
    pub alpha: f64,
    pub conv_tol: f64,
    pub max_outer: usize,
    /// One of the `CR_LAMBDA_*` constants.
    pub lambda_mode: c_int,
}

#[no_mangle]
pub extern "C" fn cr_fairness_options_default() -> CrFairnessOptions {
    let d = FairnessOptions::default();
    CrFairnessOptions {
        utility: CR_UTILITY_PFS,
        alpha: 1.0,
        conv_tol: d.conv_tol,
        max_outer: d.max_outer,
        lambda_mode: CR_LAMBDA_AUTO,
    }
}

/// Fairness-optimal operating point of one cluster.
pub struct CrFairness(FairnessResult);

/// Solves the fairness problem on `p`. A run that stops at `max_outer`
/// still succeeds; check `converged` in [`cr_fairness_summary`].
///
/// # Safety
/// `p` is a live handle, `opts` and `out` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cr_solve_fairness(
    p: *const CrProblem,
    opts: *const CrFairnessOptions,
    out: *mut *mut CrFairness,
) -> c_int {
    guard(|| {
        nonnull(out, "out")?;
        *out = ptr::null_mut();
        nonnull(p, "problem")?;
        nonnull(opts, "opts")?;
        let o = *opts;
        let utility = match o.utility {
            CR_UTILITY_PFS => Utility::Pfs,
            CR_UTILITY_HFS => Utility::Hfs,
            CR_UTILITY_ALPHA_FAIR => Utility::AlphaFair { alpha: o.alpha },
            u => return Err(fail(CR_ERR_INVALID, format!("unknown utility {u}"))),
        };
        let options = FairnessOptions {
            conv_tol: o.conv_tol,
            max_outer: o.max_outer,
            lambda_mode: lambda_mode(o.lambda_mode)?,
            ..FairnessOptions::default()
        };
        let r = solve_fairness(&(*p).0, &utility, &options)?;
        *out = Box::into_raw(Box::new(CrFairness(r)));
        Ok(())
    })
}

/// # Safety
/// `r` is null or came from [`cr_solve_fairness`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cr_fairness_free(r: *mut CrFairness) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Scalar outcome of a fairness solve. Null outputs are skipped.
///
/// # Safety
/// `r` is a live handle; non-null outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn cr_fairness_summary(
    r: *const CrFairness,
    utility: *mut f64,
    dual: *mut f64,
    converged: *mut c_int,
    iterations: *mut usize,
) -> c_int {
    guard(|| {
        nonnull(r, "result")?;
        let r = &(*r).0;
        if !utility.is_null() {
            *utility = r.utility_value;
        }
        if !dual.is_null() {
            *dual = r.dual_value;
        }
        if !converged.is_null() {
            *converged = c_int::from(r.converged);
        }
        if !iterations.is_null() {
            *iterations = r.iterations;
        }
        Ok(())
    })
}

/// Per-group rates (nats per antenna) into `buf` of `len` values.
///
/// # Safety
/// `r` is a live handle and `buf` holds `len` values.
#[no_mangle]
pub unsafe extern "C" fn cr_fairness_rates(
    r: *const CrFairness,
    buf: *mut f64,
    len: usize,
) -> c_int {
    guard(|| {
        nonnull(r, "result")?;
        write_out(buf, len, &(*r).0.rates.r, "buf")
    })
}

/// Per-group dual weights into `buf` of `len` values.
///
/// # Safety
/// `r` is a live handle and `buf` holds `len` values.
#[no_mangle]
pub unsafe extern "C" fn cr_fairness_weights(
    r: *const CrFairness,
    buf: *mut f64,
    len: usize,
) -> c_int {
    guard(|| {
        nonnull(r, "result")?;
        write_out(buf, len, (*r).0.weights.values(), "buf")
    })
}

/// Monte Carlo ergodic per-group rates at `n` antennas per user for the
/// given group `powers` (`n_groups`), `duals` (`n_bs`) and `weights`
/// (`n_groups`, fixing the decoding order). Writes `mean` and `std_err`
/// (`n_groups` each; `std_err` may be null).
///
/// # Safety
/// `p` is a live handle; non-null pointers hold the stated lengths.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cr_mc_ergodic_rates(
    p: *const CrProblem,
    powers: *const f64,
    duals: *const f64,
    weights: *const f64,
    n: usize,
    trials: usize,
    seed: u64,
    mean: *mut f64,
    std_err: *mut f64,
) -> c_int {
    guard(|| {
        nonnull(p, "problem")?;
        let prob = &(*p).0;
        let (a, b) = (prob.n_groups(), prob.n_bs());
        let duals = DualVars::new(slice(duals, b, "duals")?.to_vec())?;
        let q = slice(powers, a, "powers")?.to_vec();
        let budget = duals.budget(prob.bs_powers());
        let alloc = PowerAllocation::new(q, budget)?;
        let w = Weights::new(slice(weights, a, "weights")?.to_vec())?;
        let est = mc_ergodic_rates(prob, &alloc, &duals, &w, n, trials, seed)?;
        write_out(mean, a, &est.mean, "mean")?;
        if !std_err.is_null() {
            write_out(std_err, a, &est.std_err, "std_err")?;
        }
        Ok(())
    })
}

/// Runs the JSON config at `config_path`, writing outputs to `out_dir`
/// (null: the config's `output`, else `cellrate-out`).
///
/// # Safety
/// `config_path` and a non-null `out_dir` are NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn cr_run_config(
    config_path: *const c_char,
    out_dir: *const c_char,
) -> c_int {
    guard(|| {
        nonnull(config_path, "config_path")?;
        let utf8 = |s: *const c_char| {
            CStr::from_ptr(s)
                .to_str()
                .map_err(|_| fail(CR_ERR_INVALID, "path is not UTF-8"))
        };
        let cfg = cellrate::config::RunConfig::load(Path::new(utf8(config_path)?))?;
        let out = if out_dir.is_null() {
            cfg.output
                .clone()
                .unwrap_or_else(|| PathBuf::from("cellrate-out"))
        } else {
            PathBuf::from(utf8(out_dir)?)
        };
        cellrate::cli::run(&cfg, &out)?;
        Ok(())
    })
}
