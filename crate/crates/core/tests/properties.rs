use caps_core::gating::{contextual_snr, gate, shannon_entropy, threshold_from_budget};
use caps_core::horizon::{
    asymptotic_extension_ratio, effective_horizon_approx, effective_horizon_exact,
    ideal_extension_ratio, min_budget, wilson_interval, HorizonParams, Z_95,
};
use caps_core::mcmc::{acceptance_log_ratio, propose, Chain};
use caps_core::oracle::{
    enumerate_base, enumerate_global_power, enumerate_local_tempered, enumerate_paths,
    first_action_preference, flip_threshold, tv_distance, DEFAULT_ENUMERATION_CAP,
};
use caps_core::policy::{
    make_pivotal_window_policy, make_random_policy, PivotalWindowSpec, RandomPolicySpec,
};
use caps_core::{BlockSignals, CapsConfig, GateConfig, GateMode, PolicyModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_policy(actions: usize, horizon: usize, scale: f64, seed: u64) -> PolicyModel {
    make_random_policy(&RandomPolicySpec::new(actions, horizon, scale, seed)).unwrap()
}

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 2..=16).prop_filter_map("all-zero weights", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-6).then(|| w.iter().map(|x| x / s).collect())
    })
}

/// (ε, ε′, N) with 0 < ε < ε′, ε + ε′ ≤ 1 and a finite flip point (ε′/ε < N).
fn pivotal_params() -> impl Strategy<Value = (f64, f64, usize)> {
    (2usize..=12, 0.02f64..0.45, 1.05f64..4.0).prop_filter_map("spec bounds", |(n, eps, ratio)| {
        let bad = eps * ratio;
        (bad + eps <= 1.0 && ratio < n as f64).then_some((eps, bad, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_distributions_are_normalised(actions in 2usize..5, horizon in 1usize..4, scale in 0.0f64..4.0, seed: u64) {
        let p = random_policy(actions, horizon, scale, seed);
        for len in 0..horizon {
            for prefix in enumerate_paths(&p, p.root(), len, DEFAULT_ENUMERATION_CAP).unwrap() {
                let node = p.walk(p.root(), &prefix).unwrap();
                let total: f64 = p.dist(node).iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn log_prob_is_the_sum_of_step_logs(actions in 2usize..5, horizon in 1usize..5, seed: u64, picks in prop::collection::vec(0usize..5, 4)) {
        let p = random_policy(actions, horizon, 1.5, seed);
        let path: Vec<usize> = picks.iter().take(horizon).map(|a| a % actions).collect();
        let mut node = p.root();
        let mut total = 0.0;
        for &a in &path {
            total += p.log_dist(node)[a];
            node = p.next(node, a).unwrap();
        }
        prop_assert_eq!(p.log_prob_from(p.root(), &path).unwrap(), total);
        prop_assert_eq!(p.trajectory_from(p.root(), &path).unwrap().log_prob(), total);
    }

    #[test]
    fn pivotal_branch_masses((eps, bad, n) in pivotal_params(), tail in 1usize..3) {
        let p = make_pivotal_window_policy(&PivotalWindowSpec::new(eps, bad, n, tail)).unwrap();
        let m = enumerate_base(&p).unwrap().first_action_marginals();
        prop_assert!((m[PivotalWindowSpec::GOOD] - eps).abs() <= 1e-12);
        prop_assert!((m[PivotalWindowSpec::BAD] - bad).abs() <= 1e-12);
    }

    #[test]
    fn global_power_ratio_law(seed: u64, alpha in 1.0f64..10.0, i in 0usize..27, j in 0usize..27) {
        let p = random_policy(3, 3, 1.0, seed);
        let base = enumerate_base(&p).unwrap();
        let power = enumerate_global_power(&p, alpha).unwrap();
        let keys: Vec<Vec<usize>> = base.iter().map(|(k, _)| k.clone()).collect();
        let (a, b) = (&keys[i], &keys[j]);
        let lhs = power.probability(a) / power.probability(b);
        let rhs = (base.probability(a) / base.probability(b)).powf(alpha);
        prop_assert!((lhs / rhs - 1.0).abs() <= 1e-9, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn tables_are_normalised(seed: u64, alpha in 1.0f64..10.0) {
        let p = random_policy(3, 3, 2.0, seed);
        for t in [enumerate_global_power(&p, alpha).unwrap(), enumerate_local_tempered(&p, alpha).unwrap()] {
            prop_assert!((t.total_mass() - 1.0).abs() <= 1e-10);
            prop_assert!(t.iter().all(|(_, q)| q >= 0.0));
            prop_assert!((t.first_action_marginals().iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn global_and_local_agree_at_one_step_or_unit_alpha(seed: u64, alpha in 1.0f64..10.0) {
        let single = random_policy(4, 1, 2.0, seed);
        let d = tv_distance(&enumerate_global_power(&single, alpha).unwrap(), &enumerate_local_tempered(&single, alpha).unwrap()).unwrap();
        prop_assert!(d <= 1e-10);
        let deep = random_policy(3, 3, 2.0, seed);
        let d = tv_distance(&enumerate_global_power(&deep, 1.0).unwrap(), &enumerate_local_tempered(&deep, 1.0).unwrap()).unwrap();
        prop_assert!(d <= 1e-10);
    }

    #[test]
    fn flip_happens_at_the_exact_root((eps, bad, n) in pivotal_params()) {
        let p = make_pivotal_window_policy(&PivotalWindowSpec::new(eps, bad, n, 1)).unwrap();
        let root = flip_threshold(eps, bad, n).unwrap().exact;
        let pref = |alpha: f64| {
            let t = enumerate_global_power(&p, alpha).unwrap();
            first_action_preference(&t, PivotalWindowSpec::GOOD, PivotalWindowSpec::BAD).preferred_action
        };
        if root - 0.05 >= 1.0 {
            prop_assert_eq!(pref(root - 0.05), PivotalWindowSpec::BAD);
        }
        prop_assert_eq!(pref(root + 0.05), PivotalWindowSpec::GOOD);
        // Non-equivalence: the two targets differ once alpha > 1.
        let local = enumerate_local_tempered(&p, root + 0.05).unwrap();
        prop_assert!(tv_distance(&enumerate_global_power(&p, root + 0.05).unwrap(), &local).unwrap() > 0.0);
    }

    #[test]
    fn local_marginal_ratio_ignores_dispersion((eps, bad, n) in pivotal_params(), alpha in 1.0f64..10.0) {
        let p = make_pivotal_window_policy(&PivotalWindowSpec::new(eps, bad, n, 1)).unwrap();
        let m = enumerate_local_tempered(&p, alpha).unwrap().first_action_marginals();
        let ratio = m[PivotalWindowSpec::BAD] / m[PivotalWindowSpec::GOOD];
        prop_assert!((ratio / (bad / eps).powf(alpha) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn snr_identity_and_kl(d in distribution()) {
        let n = d.len() as f64;
        let snr = contextual_snr(&d).unwrap();
        prop_assert!((snr + shannon_entropy(&d).unwrap() - n.ln()).abs() < 1e-12);
        let kl: f64 = d.iter().filter(|&&x| x > 0.0).map(|&x| x * (x * n).ln()).sum();
        prop_assert!((snr - kl).abs() < 1e-10);
    }

    #[test]
    fn entropy_gate_is_monotone_in_threshold(h in 0.0f64..3.0, g1 in 0.0f64..3.0, g2 in 0.0f64..3.0) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let s = BlockSignals { mean_entropy: h, min_prob: 0.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let at_hi = gate(&s, &GateConfig::entropy(hi), &mut rng).mode;
        let at_lo = gate(&s, &GateConfig::entropy(lo), &mut rng).mode;
        prop_assert!(!(at_hi == GateMode::System2 && at_lo == GateMode::System1));
    }

    #[test]
    fn budget_threshold_minimises_the_gate_loss(c in 0.1f64..2.0, beta in 0.5f64..3.0, frac in 0.02f64..0.98) {
        let curve = |s: f64| c * (-beta * s).exp();
        let (lo, hi) = (0.0, 5.0);
        let cost = curve(hi) + frac * (curve(lo) - curve(hi));
        let gamma = threshold_from_budget(cost, curve, lo, hi).unwrap();
        // Searching costs `cost` and removes the error; skipping keeps ε(s).
        for k in 0..=100 {
            let s = lo + (hi - lo) * k as f64 / 100.0;
            if (s - gamma).abs() < 1e-6 {
                continue;
            }
            let search = s < gamma;
            let chosen = if search { cost } else { curve(s) };
            let other = if search { curve(s) } else { cost };
            prop_assert!(chosen <= other + 1e-12, "s {} gamma {}", s, gamma);
        }
    }

    #[test]
    fn hastings_reduction_with_base_proposals(lp_old in -30.0f64..0.0, lp_new in -30.0f64..0.0, alpha in 1.0f64..10.0) {
        // With the base policy as proposal, q(new) = p(new) on the resampled suffix.
        let got = acceptance_log_ratio(lp_old, lp_new, lp_new, lp_old, alpha).unwrap();
        let want = ((alpha - 1.0) * (lp_new - lp_old)).min(0.0);
        prop_assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn proposals_keep_the_prefix(seed: u64, beta in 0.3f64..2.0) {
        let p = random_policy(3, 4, 1.5, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let current = p.sample_from(p.root(), 4, 1.0, &mut rng).trajectory;
        for _ in 0..20 {
            let r = propose(&p, p.root(), &current, beta, &mut rng).unwrap();
            prop_assert!(r.split_point < 4);
            prop_assert_eq!(&r.candidate.actions[..r.split_point], &current.actions[..r.split_point]);
            prop_assert!((r.candidate.log_prob() - p.log_prob_from(p.root(), &r.candidate.actions).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn chain_state_invariants(seed: u64, alpha in 1.0f64..8.0, beta in 0.5f64..1.5) {
        let p = random_policy(3, 4, 2.0, seed);
        let config = CapsConfig { alpha, proposal_exponent: beta, block_len: 4, ..CapsConfig::default() };
        let mut chain = Chain::new(&p, p.root(), p.greedy_from(p.root(), 4), &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            chain.step(&mut rng).unwrap();
            let s = chain.state();
            prop_assert!(s.accept_count <= s.step_count);
            let exact = p.log_prob_from(p.root(), &s.current.actions).unwrap();
            prop_assert!((s.current_logp - exact).abs() <= 1e-10);
        }
    }

    #[test]
    fn extension_ratio_is_consistent(eps in 0.001f64..0.5, alpha in 1.0f64..5.0, eta in 0.01f64..0.99) {
        let ratio = effective_horizon_approx(eps.powf(alpha), eta).unwrap() / effective_horizon_approx(eps, eta).unwrap();
        prop_assert!((ratio / ideal_extension_ratio(eps, alpha) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn asymptotic_ratio_rises_to_the_ideal(eps in 0.01f64..0.5, alpha in 1.1f64..4.0, rho in 0.1f64..0.9, c in 0.1f64..2.0) {
        let at = |n: f64| asymptotic_extension_ratio(&HorizonParams { eps, alpha, eta: 0.5, mixing_rate: rho, dist_const: c, budget: n });
        let ideal = ideal_extension_ratio(eps, alpha);
        let mut prev = at(0.0);
        for n in 1..60 {
            let r = at(n as f64);
            prop_assert!(r >= prev && r <= ideal * (1.0 + 1e-12));
            prev = r;
        }
    }

    #[test]
    fn min_budget_increases_with_alpha(eps in 0.01f64..0.9, rho in 0.05f64..0.95, c in 0.1f64..2.0, a in 1.0f64..9.0, da in 0.01f64..1.0) {
        let lo = min_budget(eps, a, c, rho, None).unwrap().n_min;
        let hi = min_budget(eps, a + da, c, rho, None).unwrap().n_min;
        prop_assert!(hi > lo);
    }

    #[test]
    fn effective_horizon_brackets_eta(eps in 0.001f64..0.9, eta in 0.01f64..0.99) {
        let t = effective_horizon_exact(eps, eta).unwrap() as i32;
        prop_assert!((1.0 - eps).powi(t) >= eta);
        prop_assert!((1.0 - eps).powi(t + 1) < eta);
    }

    #[test]
    fn wilson_interval_brackets_the_estimate(n in 1u64..5000, frac in 0.0f64..=1.0) {
        let s = (frac * n as f64).round() as u64;
        let (lo, hi) = wilson_interval(s, n, Z_95);
        let p = s as f64 / n as f64;
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        prop_assert!(lo <= p + 1e-12 && p <= hi + 1e-12);
    }
}
