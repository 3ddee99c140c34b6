//! Statistical oracles for the estimator studies: exact enumeration,
//! quadrature cross-checks of the closed-form moments, and Monte Carlo
//! checks of unbiasedness, bias magnitude, and variance scaling.

use mspo_core::estimator::{
    bias_study, squared_diff_unbiased, variance_scaling_study, SampleFamily, StudyConfig,
    Transform,
};

/// Composite Simpson's rule for the n-th raw moment of f(x) = x^power over a
/// uniform density — the independent quadrature route for the closed forms.
fn simpson_uniform_moment(lo: f64, hi: f64, power: i32) -> f64 {
    let steps = 10_000usize; // even
    let h = (hi - lo) / steps as f64;
    let f = |x: f64| x.powi(power) / (hi - lo);
    let mut total = f(lo) + f(hi);
    for i in 1..steps {
        let x = lo + h * i as f64;
        total += if i % 2 == 0 { 2.0 * f(x) } else { 4.0 * f(x) };
    }
    total * h / 3.0
}

#[test]
fn closed_form_moments_agree_with_quadrature() {
    let cfg = StudyConfig::bias_default(0);
    let mean_p = cfg.p.transformed_mean(&cfg.transform).unwrap();
    let mean_q = cfg.q.transformed_mean(&cfg.transform).unwrap();
    let var_p = cfg.p.transformed_var(&cfg.transform).unwrap();
    let var_q = cfg.q.transformed_var(&cfg.transform).unwrap();

    let q_mean_p = simpson_uniform_moment(0.0, 2.0, 2);
    let q_mean_q = simpson_uniform_moment(-1.0, 1.0, 2);
    let q_var_p = simpson_uniform_moment(0.0, 2.0, 4) - q_mean_p * q_mean_p;
    let q_var_q = simpson_uniform_moment(-1.0, 1.0, 4) - q_mean_q * q_mean_q;

    assert!((mean_p - q_mean_p).abs() < 1e-10);
    assert!((mean_q - q_mean_q).abs() < 1e-10);
    assert!((var_p - q_var_p).abs() < 1e-10);
    assert!((var_q - q_var_q).abs() < 1e-10);
}

#[test]
fn trial_mean_of_unbiased_estimator_hits_true_value() {
    let trials = 20_000;
    let cfg = StudyConfig {
        trials,
        sample_sizes: vec![2, 4, 8, 16],
        ..StudyConfig::bias_default(17)
    };
    let study = bias_study(&cfg).unwrap();
    assert_eq!(study.true_value, 1.0);
    for row in &study.rows {
        // RMSE of the unbiased estimator bounds its per-trial std deviation,
        // so rmse/sqrt(T) bounds the standard error of the trial mean.
        let se = row.rmse_unbiased / (trials as f64).sqrt();
        let bias = (row.mean_unbiased - study.true_value).abs();
        assert!(
            bias <= 3.0 * se,
            "k = {}: |bias| {} > 3 se {}",
            row.k,
            bias,
            se
        );
    }
}

#[test]
fn naive_estimator_bias_matches_variance_over_k() {
    let trials = 20_000;
    let cfg = StudyConfig {
        trials,
        sample_sizes: vec![2, 4, 8],
        ..StudyConfig::bias_default(23)
    };
    let var_p = cfg.p.transformed_var(&cfg.transform).unwrap();
    let var_q = cfg.q.transformed_var(&cfg.transform).unwrap();
    let study = bias_study(&cfg).unwrap();
    for row in &study.rows {
        let predicted_bias = (var_p + var_q) / row.k as f64;
        let observed_bias = row.mean_naive - study.true_value;
        let se = row.rmse_naive / (trials as f64).sqrt();
        assert!(
            (observed_bias - predicted_bias).abs() <= 3.0 * se,
            "k = {}: observed {} vs predicted {} (se {})",
            row.k,
            observed_bias,
            predicted_bias,
            se
        );
    }
}

#[test]
fn unbiased_wins_at_small_k_and_gap_closes() {
    let cfg = StudyConfig {
        trials: 20_000,
        ..StudyConfig::bias_default(5)
    };
    let study = bias_study(&cfg).unwrap();
    let first = &study.rows[0];
    assert_eq!(first.k, 2);
    assert!(first.rmse_unbiased < first.rmse_naive);

    // The absolute rmse gap shrinks in k, allowing one non-monotone step
    // from Monte Carlo noise.
    let gaps: Vec<f64> = study
        .rows
        .iter()
        .map(|r| r.rmse_naive - r.rmse_unbiased)
        .collect();
    let violations = gaps.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    assert!(violations <= 1, "gaps {gaps:?}");
}

#[test]
fn variance_scaling_slope_and_exact_expansion() {
    let cfg = StudyConfig {
        trials: 20_000,
        sample_sizes: vec![8, 16, 32, 64, 128, 256, 512],
        ..StudyConfig::variance_default(29)
    };
    let var_p = cfg.p.transformed_var(&cfg.transform).unwrap();
    let var_q = cfg.q.transformed_var(&cfg.transform).unwrap();
    let delta = cfg.p.transformed_mean(&cfg.transform).unwrap()
        - cfg.q.transformed_mean(&cfg.transform).unwrap();
    let study = variance_scaling_study(&cfg).unwrap();

    let slope = study.slope.expect("nondegenerate setup has a slope");
    assert!(
        (-1.3..=-0.8).contains(&slope),
        "log-log slope {slope} outside [-1.3, -0.8]"
    );

    for row in study.rows.iter().filter(|r| r.k >= 32) {
        let k = row.k as f64;
        let s = var_p / k + var_q / k;
        // Exact expansion: 2 s^2 + 4 s delta^2 + 2 sigma^4 terms.
        let exact = 2.0 * s * s
            + 4.0 * s * delta * delta
            + 2.0 * var_p * var_p / (k * (k - 1.0))
            + 2.0 * var_q * var_q / (k * (k - 1.0));
        let ratio = row.empirical_var / exact;
        assert!(
            (1.0 / 3.0..=3.0).contains(&ratio),
            "k = {}: empirical {} vs exact {} (ratio {})",
            row.k,
            row.empirical_var,
            exact,
            ratio
        );
        assert!(row.predicted_leading_term <= exact);
    }
}

#[test]
fn two_atom_discrete_family_reproduces_enumeration_average() {
    // Monte Carlo over the discrete {0, 2} family converges to the exact
    // enumeration value 1 (and 1.5 for the naive estimator).
    let cfg = StudyConfig {
        p: SampleFamily::Discrete {
            atoms: vec![(0.0, 0.5), (2.0, 0.5)],
        },
        q: SampleFamily::point_mass(0.0),
        transform: Transform::Identity,
        c: 0.0,
        sample_sizes: vec![2],
        trials: 40_000,
        seed: 41,
    };
    let study = bias_study(&cfg).unwrap();
    let row = &study.rows[0];
    assert!((row.mean_unbiased - 1.0).abs() < 0.05);
    assert!((row.mean_naive - 1.5).abs() < 0.05);

    // And the exact four-outcome average, for reference.
    let outcomes = [[0.0, 0.0], [0.0, 2.0], [2.0, 0.0], [2.0, 2.0]];
    let avg = outcomes
        .iter()
        .map(|xs| squared_diff_unbiased(xs, &[0.0, 0.0], 0.0).unwrap().value)
        .sum::<f64>()
        / 4.0;
    assert_eq!(avg, 1.0);
}
