use cellrate::fairness::{solve_fairness, update_weights, FairnessOptions, Utility};
use cellrate::geometry::{
    build_hex7_scenario, build_linear_scenario, cluster_problem, ici_noise, Cluster,
    ClusterProblem, GainMatrix, HexCooperation, LinearCooperation, Scenario, DEFAULT_POWER_PER_BS,
};
use cellrate::limit::{
    asymptotic_log_det, optimize_powers_with, sinr_profile, weighted_avg_sum_rate,
    AsymptoticOracle, DualVars, PowerAllocation, Tolerances, Weights,
};
use cellrate::montecarlo::{dynamic_scheduler, mc_ergodic_rates, SchedulerConfig, VirtualQueues};
use proptest::prelude::*;

fn tol() -> Tolerances {
    Tolerances::default()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
}

prop_compose! {
    /// Cluster with `B ≤ 2` BSs, `A ≤ 4` groups and gains in `[0.1, 1]`.
    fn small_problem()(b in 1usize..=2, a in 1usize..=4)
        (gamma in prop::sample::select(vec![0.5, 1.0, 2.0, 4.0]),
         beta in prop::collection::vec(prop::collection::vec(0.1f64..1.0, a), b),
         powers in prop::collection::vec(1.0f64..20.0, b),
         w in prop::collection::vec(0.05f64..2.0, a))
        -> (ClusterProblem, Weights)
    {
        (ClusterProblem::new(gamma, &beta, powers).unwrap(), Weights::new(w).unwrap())
    }
}

fn random_powers(problem: &ClusterProblem, shares: &[f64]) -> PowerAllocation {
    let budget: f64 = problem.bs_powers().iter().sum();
    let s: f64 = shares.iter().sum();
    PowerAllocation::new(shares.iter().map(|x| budget * x / s).collect(), budget).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_clusters_partition_the_groups(
        half in 1usize..=8,
        radius in 0.5f64..3.0,
        gamma in 0.5f64..8.0,
        full in any::<bool>(),
    ) {
        let coop = if full { LinearCooperation::Full } else { LinearCooperation::None };
        let s = build_linear_scenario(2 * half, radius, gamma, DEFAULT_POWER_PER_BS, coop).unwrap();
        let mut seen = vec![0; s.n_groups()];
        for c in &s.clusters {
            for &g in &c.groups {
                seen[g] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&x| x == 1));
    }

    #[test]
    fn raising_a_foreign_power_raises_the_noise(
        alpha in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 3),
        powers in prop::collection::vec(0.5f64..50.0, 3),
        bump in 1.01f64..10.0,
    ) {
        // BS 0 serves groups 0 and 1; BSs 1 and 2 serve groups 2 and 3.
        let clusters = vec![
            Cluster { bs: vec![0], groups: vec![0, 1] },
            Cluster { bs: vec![1, 2], groups: vec![2, 3] },
        ];
        let gains = GainMatrix::from_rows(&alpha).unwrap();
        let base = Scenario::explicit(gains.clone(), 1.0, powers.clone(), clusters.clone()).unwrap();
        for m in 0..3 {
            let mut p = powers.clone();
            p[m] *= bump;
            let s = Scenario::explicit(gains.clone(), 1.0, p, clusters.clone()).unwrap();
            for (c, cl) in clusters.iter().enumerate() {
                for &k in &cl.groups {
                    let before = ici_noise(&base, &gains, c, k).unwrap();
                    let after = ici_noise(&s, &gains, c, k).unwrap();
                    if !cl.bs.contains(&m) && alpha[m][k] > 0.0 {
                        prop_assert!(after > before, "m {m} k {k}");
                    } else {
                        prop_assert_eq!(after, before);
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_point_residual_and_mmse_range((p, w) in small_problem(),
                                           shares in prop::collection::vec(0.0f64..1.0, 4)) {
        let mut shares = shares[..p.n_groups()].to_vec();
        shares[0] += 0.1;
        let q = random_powers(&p, &shares);
        let duals = DualVars::ones(p.n_bs());
        let prof = sinr_profile(&p, &q, &duals, &w, &tol()).unwrap();
        prop_assert!(prof.residual <= tol().fp_tol);
        for k in 0..p.n_groups() {
            for j in k..p.n_groups() {
                let u = prof.mmse(k, j);
                prop_assert!(u > 0.0 && u <= 1.0, "mmse {u}");
            }
        }
    }

    #[test]
    fn stage_log_dets_are_nested((p, w) in small_problem(),
                                 shares in prop::collection::vec(0.0f64..1.0, 4)) {
        let q = random_powers(&p, &shares[..p.n_groups()].iter().map(|x| x + 1e-3).collect::<Vec<_>>());
        let duals = DualVars::ones(p.n_bs());
        let lds: Vec<f64> = (0..p.n_groups())
            .map(|k| asymptotic_log_det(&p, &q, &duals, &w, k, &tol()).unwrap())
            .collect();
        for pair in lds.windows(2) {
            prop_assert!(pair[0] >= pair[1] - 1e-12, "{lds:?}");
        }
    }

    #[test]
    fn power_iterates_meet_the_budget((p, w) in small_problem()) {
        let duals = DualVars::ones(p.n_bs());
        let budget = duals.budget(p.bs_powers());
        let mut oracle = AsymptoticOracle::new(&p, &duals, &w, &tol()).unwrap();
        let sol = optimize_powers_with(&mut oracle, &w, budget, None, &tol(), true).unwrap();
        let a = p.n_groups();
        for it in sol.trace.chunks(a) {
            let total: f64 = it.iter().map(|r| r.q).sum();
            prop_assert!((total - budget).abs() <= 8.0 * f64::EPSILON * budget, "{total} vs {budget}");
        }
        let total: f64 = sol.allocation.q.iter().sum();
        prop_assert!((total - budget).abs() <= 8.0 * f64::EPSILON * budget);
    }

    #[test]
    fn permuting_groups_permutes_the_solution((p, w) in small_problem(), rot in 0usize..4) {
        let a = p.n_groups();
        let order: Vec<usize> = (0..a).map(|i| (i + rot) % a).collect();
        let pp = p.permute_groups(&order);
        let wp = Weights::new(order.iter().map(|&k| w.values()[k]).collect()).unwrap();
        let duals = DualVars::ones(p.n_bs());
        let s = weighted_avg_sum_rate(&p, &w, &duals, &tol()).unwrap();
        let sp = weighted_avg_sum_rate(&pp, &wp, &duals, &tol()).unwrap();
        prop_assert!(close(s.value, sp.value, 1e-9));
        let budget = duals.budget(p.bs_powers());
        for (i, &k) in order.iter().enumerate() {
            prop_assert!((s.rates.r[k] - sp.rates.r[i]).abs() <= 1e-6 * s.value.max(1.0));
            prop_assert!((s.powers.allocation.q[k] - sp.powers.allocation.q[i]).abs() <= 1e-6 * budget);
        }
    }

    #[test]
    fn common_dual_scaling_is_invisible((p, w) in small_problem(),
                                        c in prop::sample::select(vec![0.5, 2.0, 10.0])) {
        let lam = DualVars::ones(p.n_bs());
        let scaled = DualVars::new(vec![c; p.n_bs()]).unwrap();
        let s = weighted_avg_sum_rate(&p, &w, &lam, &tol()).unwrap();
        let t = weighted_avg_sum_rate(&p, &w, &scaled, &tol()).unwrap();
        prop_assert!(close(s.value, t.value, 1e-9));
        let budget = lam.budget(p.bs_powers());
        for k in 0..p.n_groups() {
            prop_assert!((s.rates.r[k] - t.rates.r[k]).abs() <= 1e-6 * s.value.max(1.0));
            prop_assert!((c * s.powers.allocation.q[k] - t.powers.allocation.q[k]).abs() <= 1e-6 * c * budget);
        }
    }

    #[test]
    fn weight_scaling_scales_only_the_objective((p, w) in small_problem(), c in 0.1f64..10.0) {
        let duals = DualVars::ones(p.n_bs());
        let wc = Weights::new(w.values().iter().map(|x| c * x).collect()).unwrap();
        let s = weighted_avg_sum_rate(&p, &w, &duals, &tol()).unwrap();
        let t = weighted_avg_sum_rate(&p, &wc, &duals, &tol()).unwrap();
        prop_assert!(close(c * s.value, t.value, 1e-9));
        let budget = duals.budget(p.bs_powers());
        for k in 0..p.n_groups() {
            prop_assert!((s.powers.allocation.q[k] - t.powers.allocation.q[k]).abs() <= 1e-6 * budget);
        }
    }

    #[test]
    fn hfs_weight_steps_stay_on_the_simplex(
        w in prop::collection::vec(0.0f64..1.0, 2..8),
        s in prop::collection::vec(-5.0f64..5.0, 8),
        mu in 1e-3f64..10.0,
    ) {
        let total: f64 = w.iter().sum::<f64>() + 1e-9;
        let w: Vec<f64> = w.iter().map(|x| (x + 1e-9 / w.len() as f64) / total).collect();
        let next = update_weights(&w, &s[..w.len()], mu, &Utility::Hfs, 0.0).unwrap();
        let sum: f64 = next.values().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12, "sum {sum}");
        prop_assert!(next.values().iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn queues_stay_nonnegative(
        steps in prop::collection::vec(
            (prop::collection::vec(0.0f64..5.0, 6), prop::collection::vec(0.0f64..5.0, 6)), 1..40),
    ) {
        let mut q = VirtualQueues::new(3, 2, 10.0, 5.0).unwrap();
        for (rates, arrivals) in &steps {
            q.update(rates, arrivals);
            prop_assert!(q.backlog().iter().all(|u| *u >= 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn fairness_duals_bound_the_utility((p, _) in small_problem(), hfs in any::<bool>()) {
        let utility = if hfs { Utility::Hfs } else { Utility::Pfs };
        let r = solve_fairness(&p, &utility, &FairnessOptions::default()).unwrap();
        for row in &r.trace {
            if row.utility.is_finite() {
                prop_assert!(row.dual >= row.utility - 1e-9 * row.utility.abs().max(1.0), "{row:?}");
            }
        }
        prop_assert!(r.dual_value >= r.utility_value - 1e-9 * r.utility_value.abs().max(1.0));
        if hfs {
            prop_assert!((r.weights.values().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        } else if r.converged {
            prop_assert!(r.stationarity() <= 10.0 * FairnessOptions::default().conv_tol);
        }
    }
}

/// Distance multisets from every hex cell center to the other 20 BSs agree.
#[test]
fn hex_torus_cells_see_the_same_interference_geometry() {
    for radius in [0.5, 1.0, 2.5] {
        let s =
            build_hex7_scenario(radius, 4.0, DEFAULT_POWER_PER_BS, HexCooperation::Sector).unwrap();
        let mut profiles: Vec<Vec<f64>> = Vec::new();
        for cell in 0..7 {
            let own = &s.clusters[cell].bs;
            let center = s.bs_positions[own[0]];
            let mut d: Vec<f64> = (0..s.n_bs())
                .filter(|m| *m != own[0])
                .map(|m| s.wrapped_distance(center, s.bs_positions[m]))
                .collect();
            d.sort_by(f64::total_cmp);
            profiles.push(d);
        }
        for p in &profiles[1..] {
            for (a, b) in p.iter().zip(&profiles[0]) {
                assert!((a - b).abs() <= 1e-9 * radius, "{p:?} vs {:?}", profiles[0]);
            }
        }
    }
}

#[test]
fn hex_clusters_partition_the_groups_in_every_mode() {
    for coop in [
        HexCooperation::None,
        HexCooperation::Sector,
        HexCooperation::Full,
    ] {
        let s = build_hex7_scenario(1.0, 4.0, DEFAULT_POWER_PER_BS, coop).unwrap();
        let mut groups: Vec<usize> = s.clusters.iter().flat_map(|c| c.groups.clone()).collect();
        groups.sort_unstable();
        assert_eq!(groups, (0..84).collect::<Vec<_>>());
        let mut bs: Vec<usize> = s.clusters.iter().flat_map(|c| c.bs.clone()).collect();
        bs.sort_unstable();
        assert_eq!(bs, (0..21).collect::<Vec<_>>());
    }
}

/// Users of one group are exchangeable: their time-average scheduler rates
/// differ by no more than sampling noise.
#[test]
fn users_in_a_group_are_statistically_equivalent() {
    let s =
        build_linear_scenario(4, 1.0, 2.0, DEFAULT_POWER_PER_BS, LinearCooperation::Full).unwrap();
    let p = cluster_problem(&s, &s.gains().unwrap(), 0).unwrap();
    let horizon = 1200;
    let mut cfg = SchedulerConfig::with_defaults(&p, 4, horizon, 5, &tol()).unwrap();
    cfg.record_trace = true;
    let res = dynamic_scheduler(&p, &Utility::Pfs, &cfg, &tol()).unwrap();
    let (a, n) = (p.n_groups(), 4);
    // Batch means absorb the queue-induced correlation between slots.
    let batches = 30;
    let len = horizon / batches;
    let mut means = vec![vec![vec![0.0; batches]; n]; a];
    for r in &res.trace {
        let b = (r.t / len).min(batches - 1);
        means[r.k][r.i][b] += r.inst_rate / len as f64;
    }
    for (k, users) in means.iter().enumerate() {
        let stats: Vec<(f64, f64)> = users
            .iter()
            .map(|bm| {
                let m = bm.iter().sum::<f64>() / batches as f64;
                let var = bm.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
                (m, (var / batches as f64).sqrt())
            })
            .collect();
        for i in 0..n {
            for j in i + 1..n {
                let (mi, si) = stats[i];
                let (mj, sj) = stats[j];
                let se = (si * si + sj * sj).sqrt();
                assert!(
                    (mi - mj).abs() <= 3.0 * se,
                    "group {k} users {i},{j}: {mi} vs {mj} (se {se})"
                );
            }
        }
    }
}

#[test]
fn monte_carlo_results_ignore_the_thread_count() {
    let s =
        build_linear_scenario(8, 1.0, 4.0, DEFAULT_POWER_PER_BS, LinearCooperation::Full).unwrap();
    let p = cluster_problem(&s, &s.gains().unwrap(), 0).unwrap();
    let w = Weights::uniform(p.n_groups());
    let duals = DualVars::ones(p.n_bs());
    let q = weighted_avg_sum_rate(&p, &w, &duals, &tol())
        .unwrap()
        .powers
        .allocation;
    let go = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let mc = mc_ergodic_rates(&p, &q, &duals, &w, 4, 16, 77).unwrap();
                let cfg = SchedulerConfig::with_defaults(&p, 2, 40, 77, &tol()).unwrap();
                let dy = dynamic_scheduler(&p, &Utility::Pfs, &cfg, &tol()).unwrap();
                (mc.per_trial, dy.time_avg)
            })
    };
    let one = go(1);
    let four = go(4);
    assert_eq!(one.0, four.0);
    assert_eq!(one.1, four.1);
}
