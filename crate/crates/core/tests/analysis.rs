use contlearn::analysis::*;
use contlearn::engine::{CellRecord, EpisodeSummary, RunStatus, TrialLog};
use contlearn::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn times(n: usize) -> Vec<f64> {
    (0..n).map(|t| t as f64).collect()
}

fn exp_series(t: &[f64], a: f64, b: f64) -> Vec<f64> {
    t.iter().map(|&t| a * (-b * t).exp()).collect()
}

fn pow_series(t: &[f64], a: f64, b: f64, g: f64) -> Vec<f64> {
    t.iter().map(|&t| a * (1.0 + g * t).powf(-b)).collect()
}

fn noisy(m: &[f64], seed: u64, amp: f64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    m.iter().map(|&x| x + r.gen_range(-amp..amp)).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn percentile_90(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[(0.9 * (v.len() - 1) as f64).round() as usize]
}

#[test]
fn exponential_recovery_noiseless() {
    let t = times(30);
    let f = fit_exponential(&t, &exp_series(&t, 0.9, 0.05)).unwrap();
    assert!(rel(f.alpha, 0.9) < 1e-3, "alpha {}", f.alpha);
    assert!(rel(f.beta, 0.05) < 1e-3, "beta {}", f.beta);
    assert!(f.train_mse < 1e-10, "mse {}", f.train_mse);
}

#[test]
fn exponential_recovery_with_noise() {
    let t = times(30);
    let clean = exp_series(&t, 0.9, 0.05);
    let errs: Vec<f64> = (0..100)
        .map(|s| rel(fit_exponential(&t, &noisy(&clean, s, 0.01)).unwrap().beta, 0.05))
        .collect();
    let p90 = percentile_90(errs);
    assert!(p90 < 0.2, "90th percentile relative beta error {p90}");
}

#[test]
fn power_recovery_noiseless() {
    let t = times(30);
    let f = fit_power(&t, &pow_series(&t, 0.95, 0.7, 0.3)).unwrap();
    assert!(rel(f.alpha, 0.95) < 0.01, "alpha {}", f.alpha);
    assert!(rel(f.beta, 0.7) < 0.01, "beta {}", f.beta);
    assert!(rel(f.gamma.unwrap(), 0.3) < 0.01, "gamma {:?}", f.gamma);
}

#[test]
fn power_data_fit_better_by_power() {
    let t = times(30);
    for (a, b, g) in [(0.95, 0.7, 0.3), (0.8, 1.5, 0.1), (1.0, 0.3, 2.0)] {
        let m = pow_series(&t, a, b, g);
        let p = fit_power(&t, &m).unwrap();
        let e = fit_exponential(&t, &m).unwrap();
        assert!(p.train_mse < e.train_mse, "{a} {b} {g}: {} vs {}", p.train_mse, e.train_mse);
    }
}

#[test]
fn split_selection_picks_generating_family() {
    let t = times(30);
    let exp_clean = exp_series(&t, 0.9, 0.1);
    let pow_clean = pow_series(&t, 0.95, 0.7, 0.3);
    let mut exp_wins = 0;
    let mut pow_wins = 0;
    for s in 0..100 {
        let c = split_fit_evaluate(&t, &noisy(&exp_clean, s, 0.01), None).unwrap();
        exp_wins += usize::from(c.winner == Family::Exponential);
        let c = split_fit_evaluate(&t, &noisy(&pow_clean, 1000 + s, 0.01), None).unwrap();
        pow_wins += usize::from(c.winner == Family::Power);
    }
    assert!(exp_wins >= 90, "exponential chosen in {exp_wins}/100");
    assert!(pow_wins >= 90, "power chosen in {pow_wins}/100");
}

#[test]
fn split_uses_ceiling_half() {
    let t = times(7);
    let m = exp_series(&t, 0.9, 0.2);
    let c = split_fit_evaluate(&t, &m, None).unwrap();
    let first = fit_exponential(&t[..4], &m[..4]).unwrap();
    assert_eq!(c.exponential.alpha, first.alpha);
    assert_eq!(c.exponential.beta, first.beta);
    let tail_mse = c.exponential.mse(&t[4..], &m[4..]);
    assert_eq!(c.exponential.eval_mse, Some(tail_mse));
}

fn log_with(run: &str, hash: &str, cells: &[(usize, usize, Option<u64>, f64)]) -> TrialLog {
    TrialLog {
        run_id: run.into(),
        config_hash: hash.into(),
        seed: 0,
        order: vec![0, 1, 2],
        status: RunStatus::Completed,
        episodes: vec![EpisodeSummary {
            episode: 1,
            epochs: 1,
            converged: true,
            end_epoch: 1,
            final_accuracy: vec![1.0],
            positive_fraction: [0.5, 0.5],
        }],
        cells: cells
            .iter()
            .map(|&(position, times_trained, trials, acc)| CellRecord {
                task: position - 1,
                position,
                episode: position + times_trained - 1,
                times_trained,
                trials_to_criterion: trials,
                accuracy_at_budget: acc,
                budget_reached: true,
            })
            .collect(),
        records: vec![],
    }
}

#[test]
fn single_log_means_without_sem() {
    let log = log_with("a", "h", &[(1, 1, Some(3000), 0.9), (1, 2, Some(1500), 0.95), (2, 1, None, 0.7)]);
    let t = aggregate_metrics(std::slice::from_ref(&log)).unwrap();
    let c = &t.cells[0];
    assert_eq!((c.position, c.times_trained), (1, 1));
    assert_eq!(c.trials.unwrap().mean, 3000.0);
    assert_eq!(c.trials.unwrap().sem, None);
    let missing = t.cells.iter().find(|c| c.position == 2).unwrap();
    assert!(missing.trials.is_none());
    assert_eq!(missing.accuracy_at_budget.unwrap().mean, 0.7);
}

#[test]
fn duplicated_log_has_zero_sem() {
    let log = log_with("a", "h", &[(1, 1, Some(3000), 0.9), (1, 2, Some(1500), 0.95)]);
    let t = aggregate_metrics(&[log.clone(), log]).unwrap();
    for c in &t.cells {
        assert_eq!(c.trials.unwrap().sem, Some(0.0));
        assert_eq!(c.accuracy_at_budget.unwrap().sem, Some(0.0));
    }
}

#[test]
fn synthetic_logs_exact_means() {
    let a = log_with("a", "h", &[(1, 1, Some(1000), 0.5), (1, 2, Some(400), 0.75)]);
    let b = log_with("b", "h", &[(1, 1, Some(3000), 1.0), (1, 2, Some(200), 0.25)]);
    let t = aggregate_metrics(&[a, b]).unwrap();
    let c11 = t.cells.iter().find(|c| c.times_trained == 1).unwrap();
    let c12 = t.cells.iter().find(|c| c.times_trained == 2).unwrap();
    assert_eq!(c11.trials.unwrap().mean, 2000.0);
    assert_eq!(c11.trials.unwrap().sem, Some(1000.0));
    assert_eq!(c11.accuracy_at_budget.unwrap().mean, 0.75);
    assert_eq!(c12.trials.unwrap().mean, 300.0);
    assert_eq!(c12.accuracy_at_budget.unwrap().mean, 0.5);
    let curve = &t.curves[0];
    assert_eq!(curve.n_points, 2);
    assert!((curve.slope - (300f64 / 2000.0).ln() / 2f64.ln()).abs() < 1e-12);
    assert!((curve.r2 - 1.0).abs() < 1e-12);
}

#[test]
fn mixed_configs_rejected() {
    let a = log_with("a", "h1", &[(1, 1, Some(1), 1.0)]);
    let b = log_with("b", "h2", &[(1, 1, Some(1), 1.0)]);
    assert!(matches!(aggregate_metrics(&[a, b]), Err(Error::MixedConfig(_))));
    assert!(aggregate_metrics(&[]).is_err());
}

#[test]
fn figures_render() {
    let a = log_with("a", "h", &[(1, 1, Some(1000), 0.5), (1, 2, Some(400), 0.75), (2, 1, Some(900), 0.8)]);
    let figs = figure_data(&[a], &[], &[]).unwrap();
    let names: Vec<&str> = figs.iter().map(|f| f.name.as_str()).collect();
    assert!(names.contains(&"fig3c_trials_to_criterion"));
    let c = figs.iter().find(|f| f.name == "fig3c_trials_to_criterion").unwrap();
    assert_eq!(c.rows.len(), 3);
    let svg = c.to_svg();
    assert!(svg.starts_with("<svg") && svg.contains("polyline") && svg.contains("(log)"));
    let mut buf = Vec::new();
    c.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("position,times_trained,mean,sem,n\n"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fits_stay_in_bounds(seed in 0u64..10_000, n in 3usize..25) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t = times(n);
        let m: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        for f in [fit_exponential(&t, &m).unwrap(), fit_power(&t, &m).unwrap()] {
            prop_assert!(f.train_mse >= 0.0);
            prop_assert!((0.0..=ALPHA_MAX).contains(&f.alpha));
            prop_assert!(f.beta == 0.0 || (BETA_RANGE.0..=BETA_RANGE.1).contains(&f.beta));
            if let Some(g) = f.gamma {
                prop_assert!((GAMMA_RANGE.0..=GAMMA_RANGE.1).contains(&g));
            }
        }
    }

    #[test]
    fn strength_inverts_accuracy(a in 0.5f64..=1.0) {
        let m = strength_transform(&[a])[0];
        prop_assert!((accuracy_from_strength(m) - a).abs() < 1e-12);
    }

    #[test]
    fn split_ignores_points_beyond_n(seed in 0u64..1000, extra in 1usize..10) {
        let t = times(12 + extra);
        let m = noisy(&exp_series(&t, 0.9, 0.1), seed, 0.02);
        let short = split_fit_evaluate(&t[..12], &m[..12], None).unwrap();
        let long = split_fit_evaluate(&t, &m, Some(12)).unwrap();
        prop_assert_eq!(short, long);
    }

    #[test]
    fn aggregation_is_order_invariant(vals in proptest::collection::vec((1u64..100_000, 0.0f64..1.0), 2..8), rot in 0usize..8) {
        let logs: Vec<TrialLog> = vals
            .iter()
            .enumerate()
            .map(|(i, &(t, a))| log_with(&i.to_string(), "h", &[(1, 1, Some(t), a), (1, 2, Some(t / 2 + 1), a / 2.0)]))
            .collect();
        let mut rotated = logs.clone();
        rotated.rotate_left(rot % logs.len());
        rotated.reverse();
        let a = aggregate_metrics(&logs).unwrap();
        let b = aggregate_metrics(&rotated).unwrap();
        prop_assert_eq!(a.cells, b.cells);
        prop_assert_eq!(a.curves, b.curves);
    }
}
