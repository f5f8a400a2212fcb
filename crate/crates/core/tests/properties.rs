//! Randomized invariants across modules, driven by proptest over model and
//! window seeds.

use proptest::prelude::*;
use rwre_strip::asymptotics::crossing_moments;
use rwre_strip::exitprob::{absorption_oracle_adaptive, compute_pi, solve_eta_default};
use rwre_strip::experiments::{random_model, run_scenario, ScenarioConfig, Task};
use rwre_strip::seeding::rng_for;
use rwre_strip::smallmat::{resolvent, SquareMat};
use rwre_strip::strip_env::sample_window;
use rwre_strip::walker::{extract_renewals, renewals_are_valid, simulate, StartLaw, Stop};
use rwre_strip::EnvironmentModel;

fn model(seed: u64, d: usize) -> EnvironmentModel {
    random_model(&mut rng_for(seed, "property-model", 0), d)
}

fn is_stochastic(m: &SquareMat, tol: f64) -> bool {
    m.is_nonnegative() && m.row_sums().iter().all(|s| (s - 1.0).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn window_letters_are_stochastic(seed in any::<u64>(), d in 1usize..5) {
        let w = sample_window(&model(seed, d), -50, 50, seed ^ 1).unwrap();
        for (_, t) in w.triples() {
            let sum = t.p().add(t.r()).add(t.q());
            prop_assert!(is_stochastic(&sum, 1e-12));
        }
    }

    #[test]
    fn eta_recursion_and_oracle(seed in any::<u64>(), d in 1usize..5) {
        let w = sample_window(&model(seed, d), -2048, 8, seed ^ 2).unwrap();
        let seq = solve_eta_default(&w).unwrap();
        for n in seq.first_index() + 1..=seq.last_index() {
            let rec = seq.record(n).unwrap();
            let t = w.triple(n);
            let again = resolvent(t.q(), &seq.record(n - 1).unwrap().eta, t.r()).unwrap().mul(t.p());
            prop_assert!(rec.eta.sub(&again).norm() <= 1e-9);
            prop_assert!(is_stochastic(&rec.eta, 1e-12));
        }
        let oracle = absorption_oracle_adaptive(&w, 1, 0).unwrap();
        prop_assert!(seq.record(0).unwrap().eta.max_abs_diff(&oracle.exit) <= 1e-8);
    }

    #[test]
    fn pi_is_a_distribution_and_propagates(seed in any::<u64>(), d in 1usize..5) {
        let w = sample_window(&model(seed, d), -1024, 8, seed ^ 3).unwrap();
        let seq = solve_eta_default(&w).unwrap();
        let p0 = compute_pi(&seq, 0, 1e-13).unwrap();
        let p1 = compute_pi(&seq, 1, 1e-13).unwrap();
        prop_assert!(p0.pi.iter().all(|&x| x > 0.0));
        prop_assert!((p0.pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let pushed = seq.record(0).unwrap().eta.vec_mul(&p0.pi);
        for (a, b) in pushed.iter().zip(&p1.pi) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn second_moment_dominates_square(seed in any::<u64>(), d in 1usize..5) {
        let w = sample_window(&model(seed, d), -2048, 1, seed ^ 4).unwrap();
        let seq = solve_eta_default(&w).unwrap();
        let cm = crossing_moments(&seq, 0, 1e-12).unwrap();
        for (u, w0) in cm.u0.iter().zip(&cm.w0) {
            prop_assert!(*u >= 1.0 - 1e-12);
            prop_assert!(*w0 >= u * u * (1.0 - 1e-12));
        }
    }

    #[test]
    fn paths_and_renewals(seed in any::<u64>(), d in 1usize..4) {
        let m = model(seed, d);
        let w = sample_window(&m, -400, 4000, seed ^ 5).unwrap();
        let t = simulate(&w, StartLaw::Pi, Stop::Horizon(3000), seed ^ 6).unwrap();
        prop_assert!(t.xi.windows(2).all(|p| (p[1] - p[0]).abs() <= 1));
        for (n, &h) in t.hitting.iter().enumerate() {
            prop_assert_eq!(t.xi[h as usize], n as i64);
        }
        let rec = extract_renewals(&t, 0, 20);
        prop_assert!(renewals_are_valid(&t, &rec));
        for pair in rec.renewals.windows(2) {
            let (a, b) = (pair[0].0 as usize, pair[1].0 as usize);
            let low = t.xi[a..=b].iter().copied().min().unwrap();
            prop_assert_eq!(low, t.xi[a]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn scenario_is_a_pure_function_of_its_config(seed in any::<u64>(), d in 1usize..4) {
        let mut c = ScenarioConfig::new(Task::Moments, &model(seed, d), seed);
        c.budgets.speed_samples = 4;
        let a = run_scenario(&c).unwrap();
        let b = run_scenario(&c).unwrap();
        prop_assert_eq!(a.summary_json(), b.summary_json());
        prop_assert_eq!(a.files, b.files);
    }
}
