use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use cellrate_ffi::*;

fn last_error() -> String {
    let n = cr_last_error_length();
    let mut buf = vec![0 as c_char; n.max(1)];
    let full = unsafe { cr_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(full, n);
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_string_lossy()
        .into_owned()
}

/// Two BSs, two groups, each group strong at its own BS.
fn mirrored() -> *mut CrProblem {
    let beta = [1.0, 0.3, 0.3, 1.0];
    let powers = [10.0, 10.0];
    let mut p = ptr::null_mut();
    let rc = unsafe { cr_problem_new(1.0, 2, 2, beta.as_ptr(), powers.as_ptr(), &mut p) };
    assert_eq!(rc, CR_OK, "{}", last_error());
    p
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(cr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported_not_dereferenced() {
    let beta = [1.0];
    let mut p = ptr::null_mut();
    let rc = unsafe { cr_problem_new(1.0, 1, 1, beta.as_ptr(), ptr::null(), &mut p) };
    assert_eq!(rc, CR_ERR_NULL);
    assert!(p.is_null());
    assert!(last_error().contains("bs_powers"));

    let rc = unsafe { cr_problem_dims(ptr::null(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(rc, CR_ERR_NULL);
    let rc = unsafe { cr_problem_new(1.0, 1, 1, beta.as_ptr(), beta.as_ptr(), ptr::null_mut()) };
    assert_eq!(rc, CR_ERR_NULL);
    unsafe {
        cr_problem_free(ptr::null_mut());
        cr_fairness_free(ptr::null_mut());
    }
}

#[test]
fn invalid_inputs_map_to_invalid_and_success_clears_the_error() {
    let beta = [1.0];
    let powers = [1.0];
    let mut p = ptr::null_mut();
    let rc = unsafe { cr_problem_new(-1.0, 1, 1, beta.as_ptr(), powers.as_ptr(), &mut p) };
    assert_eq!(rc, CR_ERR_INVALID);
    assert!(last_error().contains("gamma"), "{}", last_error());

    let rc = unsafe { cr_problem_new(1.0, 1, 1, beta.as_ptr(), powers.as_ptr(), &mut p) };
    assert_eq!(rc, CR_OK);
    assert_eq!(cr_last_error_length(), 0);
    let (mut b, mut a) = (0, 0);
    assert_eq!(unsafe { cr_problem_dims(p, &mut b, &mut a) }, CR_OK);
    assert_eq!((b, a), (1, 1));
    unsafe { cr_problem_free(p) };
}

#[test]
fn long_messages_truncate_with_a_terminator() {
    let beta = [1.0];
    let mut p = ptr::null_mut();
    unsafe { cr_problem_new(f64::NAN, 1, 1, beta.as_ptr(), beta.as_ptr(), &mut p) };
    let full = cr_last_error_length();
    assert!(full > 8);
    let mut buf = [0x55 as c_char; 8];
    let n = unsafe { cr_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, full);
    assert_eq!(buf[7], 0);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_bytes().len(), 7);
}

#[test]
fn last_error_is_per_thread() {
    let beta = [1.0];
    let mut p = ptr::null_mut();
    unsafe { cr_problem_new(-1.0, 1, 1, beta.as_ptr(), beta.as_ptr(), &mut p) };
    assert!(cr_last_error_length() > 0);
    let other = std::thread::spawn(|| cr_last_error_length())
        .join()
        .unwrap();
    assert_eq!(other, 0);
}

#[test]
fn weighted_sum_rate_spends_the_budget() {
    let p = mirrored();
    let w = [1.0, 2.0];
    let (mut r, mut q, mut l, mut v) = ([0.0; 2], [0.0; 2], [0.0; 2], 0.0);
    let rc = unsafe {
        cr_weighted_sum_rate(
            p,
            w.as_ptr(),
            CR_LAMBDA_SUM_POWER_RELAX,
            r.as_mut_ptr(),
            q.as_mut_ptr(),
            l.as_mut_ptr(),
            &mut v,
        )
    };
    assert_eq!(rc, CR_OK, "{}", last_error());
    assert_eq!(l, [1.0, 1.0]);
    assert!((q[0] + q[1] - 20.0).abs() < 1e-6 * 20.0, "{q:?}");
    assert!((w[0] * r[0] + w[1] * r[1] - v).abs() < 1e-12 * v);
    assert!(r[1] > r[0]);

    let rc = unsafe {
        cr_weighted_sum_rate(
            p,
            w.as_ptr(),
            17,
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
            &mut v,
        )
    };
    assert_eq!(rc, CR_ERR_INVALID);
    unsafe { cr_problem_free(p) };
}

#[test]
fn proportional_fairness_equalizes_mirrored_groups() {
    let p = mirrored();
    let mut opts = cr_fairness_options_default();
    opts.utility = CR_UTILITY_PFS;
    let mut res = ptr::null_mut();
    assert_eq!(
        unsafe { cr_solve_fairness(p, &opts, &mut res) },
        CR_OK,
        "{}",
        last_error()
    );

    let (mut u, mut d, mut conv, mut it) = (0.0, 0.0, 0, 0);
    assert_eq!(
        unsafe { cr_fairness_summary(res, &mut u, &mut d, &mut conv, &mut it) },
        CR_OK
    );
    assert_eq!(conv, 1);
    assert!(d >= u - 1e-9 * u.abs().max(1.0));

    let mut r = [0.0; 2];
    assert_eq!(unsafe { cr_fairness_rates(res, r.as_mut_ptr(), 2) }, CR_OK);
    assert!((r[0] - r[1]).abs() <= 1e-3 * r[0], "{r:?}");
    assert!((u - (r[0].ln() + r[1].ln())).abs() < 1e-9);

    let mut short = [0.0; 1];
    assert_eq!(
        unsafe { cr_fairness_weights(res, short.as_mut_ptr(), 1) },
        CR_ERR_BUFFER
    );
    unsafe {
        cr_fairness_free(res);
        cr_problem_free(p);
    }
}

#[test]
fn unknown_utility_and_bad_alpha_are_rejected() {
    let p = mirrored();
    let mut res = ptr::null_mut();
    let mut opts = cr_fairness_options_default();
    opts.utility = 9;
    assert_eq!(
        unsafe { cr_solve_fairness(p, &opts, &mut res) },
        CR_ERR_INVALID
    );
    opts.utility = CR_UTILITY_ALPHA_FAIR;
    opts.alpha = 0.0;
    assert_eq!(
        unsafe { cr_solve_fairness(p, &opts, &mut res) },
        CR_ERR_INVALID
    );
    assert!(res.is_null());
    unsafe { cr_problem_free(p) };
}

#[test]
fn monte_carlo_rates_track_the_limit() {
    let p = mirrored();
    let w = [1.0, 1.0];
    let (mut r, mut q, mut l, mut v) = ([0.0; 2], [0.0; 2], [0.0; 2], 0.0);
    let rc = unsafe {
        cr_weighted_sum_rate(
            p,
            w.as_ptr(),
            CR_LAMBDA_AUTO,
            r.as_mut_ptr(),
            q.as_mut_ptr(),
            l.as_mut_ptr(),
            &mut v,
        )
    };
    assert_eq!(rc, CR_OK, "{}", last_error());
    let (mut mean, mut se) = ([0.0; 2], [0.0; 2]);
    let rc = unsafe {
        cr_mc_ergodic_rates(
            p,
            q.as_ptr(),
            l.as_ptr(),
            w.as_ptr(),
            16,
            64,
            5,
            mean.as_mut_ptr(),
            se.as_mut_ptr(),
        )
    };
    assert_eq!(rc, CR_OK, "{}", last_error());
    for k in 0..2 {
        assert!(
            (mean[k] - r[k]).abs() < 0.05 * r[k],
            "group {k}: {} vs {}",
            mean[k],
            r[k]
        );
        assert!(se[k] > 0.0);
    }
    unsafe { cr_problem_free(p) };
}

#[test]
fn missing_config_is_a_config_error() {
    let path = CString::new("/nonexistent/cellrate.json").unwrap();
    assert_eq!(
        unsafe { cr_run_config(path.as_ptr(), ptr::null()) },
        CR_ERR_CONFIG
    );
    assert!(!last_error().is_empty());
    assert_eq!(
        unsafe { cr_run_config(ptr::null(), ptr::null()) },
        CR_ERR_NULL
    );
}

fn header() -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/cellrate.h");
    std::fs::read_to_string(path).expect("header generated by the build script")
}

#[test]
fn header_declares_every_entry_point() {
    let h = header();
    for name in [
        "cr_last_error_length",
        "cr_last_error_message",
        "cr_version",
        "cr_problem_new",
        "cr_problem_free",
        "cr_problem_dims",
        "cr_weighted_sum_rate",
        "cr_fairness_options_default",
        "cr_solve_fairness",
        "cr_fairness_free",
        "cr_fairness_summary",
        "cr_fairness_rates",
        "cr_fairness_weights",
        "cr_mc_ergodic_rates",
        "cr_run_config",
    ] {
        assert!(
            h.contains(&format!("{name}(")),
            "{name} missing from header"
        );
    }
    for c in ["CR_OK", "CR_ERR_PANIC", "CR_UTILITY_HFS", "CR_LAMBDA_AUTO"] {
        assert!(
            h.contains(&format!("#define {c} ")),
            "{c} missing from header"
        );
    }
}

/// Compiles a C program against the header and the static library.
#[test]
fn c_program_links_against_the_static_library() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap();
    // Test builds link the rlib only; build the static archive explicitly.
    let profile = match profile_dir.file_name().and_then(|s| s.to_str()) {
        Some("debug") => "dev".to_string(),
        Some(p) => p.to_string(),
        None => panic!("unexpected target layout {}", profile_dir.display()),
    };
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let status = Command::new(cargo)
        .args([
            "build",
            "-q",
            "-p",
            "cellrate-ffi",
            "--lib",
            "--profile",
            &profile,
        ])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .status()
        .unwrap();
    assert!(status.success());
    let lib = profile_dir.join("libcellrate_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "cellrate.h"
int main(void) {
    double beta[4] = {1.0, 0.3, 0.3, 1.0}, powers[2] = {10.0, 10.0};
    CrProblem *p = NULL;
    if (cr_problem_new(1.0, 2, 2, beta, powers, &p) != CR_OK) return 1;
    CrFairnessOptions o = cr_fairness_options_default();
    o.utility = CR_UTILITY_HFS;
    CrFairness *r = NULL;
    if (cr_solve_fairness(p, &o, &r) != CR_OK) return 2;
    double rates[2];
    if (cr_fairness_rates(r, rates, 2) != CR_OK) return 3;
    printf("%.12g %.12g\n", rates[0], rates[1]);
    cr_fairness_free(r);
    cr_problem_free(p);
    if (cr_problem_new(-1.0, 2, 2, beta, powers, &p) != CR_ERR_INVALID) return 4;
    char msg[256];
    cr_last_error_message(msg, sizeof msg);
    printf("%s\n", msg);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let rates: Vec<f64> = lines
        .next()
        .unwrap()
        .split(' ')
        .map(|x| x.parse().unwrap())
        .collect();
    assert!((rates[0] - rates[1]).abs() <= 1e-3 * rates[0], "{rates:?}");
    assert!(lines.next().unwrap().contains("gamma"));
}
