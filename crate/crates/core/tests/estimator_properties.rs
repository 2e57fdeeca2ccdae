use ndarray::Array1;

use orthoml::dgp::{
    default_discrete_eta, default_eps, generate_dataset, generate_dataset_with_noise,
    generate_instance, CoefficientLaw, Dataset, NoiseDistribution, PlrInstance,
};
use orthoml::estimator::{
    cross_fit_estimate, estimate, estimate_with_first_stage, plan_folds, sample_split_estimate,
    EstimatorConfig, FirstStage, FixedFirstStage, LassoFirstStage, NestedTopology,
    NuisanceDiagnostics, NuisanceEstimate, Scheme, SecondStageSample,
};
use orthoml::moments::MomentMode;
use orthoml::SimRng;

fn instance(p: usize, s: usize, eps: NoiseDistribution, seed: u64) -> PlrInstance {
    generate_instance(
        p,
        s,
        3.0,
        CoefficientLaw::default(),
        default_discrete_eta(),
        eps,
        &mut SimRng::new(seed),
    )
    .unwrap()
}

fn all_configs() -> Vec<EstimatorConfig> {
    let mut out = Vec::new();
    for base in [
        EstimatorConfig::dml(),
        EstimatorConfig::second_order(2),
        EstimatorConfig::second_order(3),
    ] {
        for scheme in [Scheme::CrossFit, Scheme::SampleSplit] {
            for mode in [MomentMode::Known, MomentMode::Estimated] {
                for k in [2, 3, 5] {
                    out.push(base.with_scheme(scheme).with_mode(mode).with_folds(k));
                }
            }
        }
    }
    let mut c = EstimatorConfig::second_order(3);
    c.nested = NestedTopology::SplitComplement;
    out.push(c);
    out
}

fn assert_root(report: &orthoml::estimator::EstimateReport) {
    assert!(
        report.moment_sum_at_root.abs() < 1e-8 * report.n_second_stage as f64,
        "moment sum {} at root",
        report.moment_sum_at_root
    );
}

#[test]
fn noiseless_outcome_with_oracle_nuisance_recovers_theta() {
    let zero = NoiseDistribution::discrete(vec![0.0], vec![1.0]).unwrap();
    let inst = instance(15, 5, zero, 1);
    let (data, draws) = generate_dataset_with_noise(&inst, 240, &mut SimRng::new(2)).unwrap();
    assert!(draws.eps.iter().all(|&e| e == 0.0));
    let oracle = FixedFirstStage::oracle(&inst);
    for cfg in all_configs() {
        let r = estimate_with_first_stage(&data, Some(&inst), &cfg, &oracle, &mut SimRng::new(3))
            .unwrap();
        assert!(
            (r.theta_hat - 3.0).abs() < 1e-12,
            "{cfg:?}: {}",
            r.theta_hat
        );
        assert_root(&r);
    }
}

#[test]
fn outcome_shift_by_treatment_shifts_theta() {
    // Y' = Y + cT has q0' = q0 + c gamma0 and theta0' = theta0 + c.
    let inst = instance(20, 4, default_eps(1.0).unwrap(), 4);
    let data = generate_dataset(&inst, 300, &mut SimRng::new(5)).unwrap();
    let first = LassoFirstStage::from_config(&EstimatorConfig::dml());
    let fit = first.fit(&data, data.n).unwrap();
    let c = -1.75;
    let shifted = Dataset::new(data.x.clone(), data.t.clone(), &data.y + &(c * &data.t)).unwrap();
    let base = FixedFirstStage {
        q: fit.q_hat.clone(),
        gamma: fit.gamma_hat.clone(),
    };
    let moved = FixedFirstStage {
        q: &fit.q_hat + &(c * &fit.gamma_hat),
        gamma: fit.gamma_hat.clone(),
    };
    for cfg in all_configs() {
        let a = estimate_with_first_stage(&data, Some(&inst), &cfg, &base, &mut SimRng::new(6))
            .unwrap();
        let b = estimate_with_first_stage(&shifted, Some(&inst), &cfg, &moved, &mut SimRng::new(6))
            .unwrap();
        assert!((b.theta_hat - a.theta_hat - c).abs() < 1e-9, "{cfg:?}");
    }
}

#[test]
fn outcome_scaling_with_scaled_penalty() {
    let inst = instance(25, 5, default_eps(1.0).unwrap(), 7);
    let data = generate_dataset(&inst, 400, &mut SimRng::new(8)).unwrap();
    let k = 2.5;
    let scaled = Dataset::new(data.x.clone(), data.t.clone(), &data.y * k).unwrap();
    for base in [EstimatorConfig::dml(), EstimatorConfig::second_order(3)] {
        let mut cfg = base;
        cfg.lasso_tol = 1e-10;
        let a = estimate(&data, None, &cfg, &mut SimRng::new(9)).unwrap();
        cfg.outcome_lambda_scale = k;
        let b = estimate(&scaled, None, &cfg, &mut SimRng::new(9)).unwrap();
        assert!(
            (b.theta_hat - k * a.theta_hat).abs() < 1e-6,
            "{} vs {}",
            b.theta_hat,
            k * a.theta_hat
        );
        assert!((b.se_hat - k * a.se_hat).abs() < 1e-6);
    }
}

#[test]
fn two_fold_cross_fit_is_mediant_of_half_estimates() {
    let inst = instance(30, 6, default_eps(1.0).unwrap(), 10);
    let data = generate_dataset(&inst, 500, &mut SimRng::new(11)).unwrap();
    let cfg = EstimatorConfig::dml();
    let pooled = cross_fit_estimate(&data, None, &cfg, &mut SimRng::new(12)).unwrap();

    let plan = plan_folds(data.n, &cfg, &mut SimRng::new(12)).unwrap();
    assert_eq!(plan.len(), 2);
    let first = LassoFirstStage::from_config(&cfg);
    let mut halves = Vec::new();
    for fold in &plan {
        let fit = first.fit(&data.subset(&fold.nuisance_idx), data.n).unwrap();
        let nuisance = NuisanceEstimate {
            q_hat: fit.q_hat,
            gamma_hat: fit.gamma_hat,
            mu2_hat: None,
            mu3_hat: None,
            mode: cfg.moment_mode,
            diagnostics: NuisanceDiagnostics::default(),
        };
        let held = data.subset(&fold.evaluations[0].second_stage_idx);
        let sample = SecondStageSample::from_fold(
            held.x.view(),
            held.t.view(),
            held.y.view(),
            &nuisance,
            &cfg.moment_spec(),
        )
        .unwrap();
        halves.push(sample.solve().unwrap());
    }
    let (lo, hi) = (halves[0].min(halves[1]), halves[0].max(halves[1]));
    assert!(
        lo <= pooled.theta_hat && pooled.theta_hat <= hi,
        "{halves:?} vs {}",
        pooled.theta_hat
    );
}

#[test]
fn stage_sizes_follow_topology() {
    let inst = instance(10, 2, default_eps(1.0).unwrap(), 13);
    let data = generate_dataset(&inst, 203, &mut SimRng::new(14)).unwrap();
    let r = sample_split_estimate(
        &data,
        None,
        &EstimatorConfig::second_order(3),
        &mut SimRng::new(15),
    )
    .unwrap();
    assert_eq!(r.n_used.len(), 1);
    let u = r.n_used[0];
    assert_eq!(u.nuisance + u.moment + u.second_stage, 203);
    assert!(u.moment > 0 && u.moment.abs_diff(u.second_stage) <= 1);

    let r =
        sample_split_estimate(&data, None, &EstimatorConfig::dml(), &mut SimRng::new(15)).unwrap();
    assert_eq!(r.n_used[0].moment, 0);
    assert_eq!(r.n_second_stage, 203 - 101);

    // Default nested cross-fitting: every row reaches the second stage once.
    let r = cross_fit_estimate(
        &data,
        None,
        &EstimatorConfig::second_order(3),
        &mut SimRng::new(16),
    )
    .unwrap();
    assert_eq!(r.n_used.len(), 4);
    assert_eq!(r.n_second_stage, 203);
    assert_root(&r);
}

#[test]
fn known_and_estimated_residual_moments_agree_at_large_n() {
    let inst = instance(20, 3, default_eps(1.0).unwrap(), 17);
    let data = generate_dataset(&inst, 20_000, &mut SimRng::new(18)).unwrap();
    for r in [2, 3] {
        let known = estimate(
            &data,
            Some(&inst),
            &EstimatorConfig::second_order(r).with_mode(MomentMode::Known),
            &mut SimRng::new(19),
        )
        .unwrap();
        let est = estimate(
            &data,
            Some(&inst),
            &EstimatorConfig::second_order(r),
            &mut SimRng::new(19),
        )
        .unwrap();
        assert!(
            (known.theta_hat - est.theta_hat).abs() < 2.0 * known.se_hat,
            "r={r}"
        );
        let diag = &est.nuisance_diag;
        assert!(diag
            .iter()
            .all(|d| d.mu2_err.unwrap().abs() < 0.1 && d.mu3_err.unwrap().abs() < 0.3));
    }
}

#[test]
fn jacobian_at_truth_matches_population_values() {
    let inst = instance(10, 3, default_eps(1.0).unwrap(), 20);
    let data = generate_dataset(&inst, 100_000, &mut SimRng::new(21)).unwrap();
    let oracle = FixedFirstStage::oracle(&inst);
    for (cfg, target) in [
        (EstimatorConfig::dml(), -1.0),
        (
            EstimatorConfig::second_order(3).with_mode(MomentMode::Known),
            -5.05,
        ),
        (
            EstimatorConfig::second_order(2).with_mode(MomentMode::Known),
            2.4,
        ),
    ] {
        let r = estimate_with_first_stage(&data, Some(&inst), &cfg, &oracle, &mut SimRng::new(22))
            .unwrap();
        let j_se = r.j_hat / r.j_z_score;
        assert!(
            ((r.j_hat - target) / j_se).abs() <= 4.0,
            "{cfg:?}: {} vs {target}",
            r.j_hat
        );
    }
}

// Without confounding the Lasso still selects noise columns at this penalty,
// and the outcome fit is shrunk less than the treatment fit, so the
// first-order estimate keeps a small upward bias. The second-order moment
// absorbs it.
#[test]
fn no_confounding_second_order_unbiased_first_order_not() {
    let inst = instance(40, 0, default_eps(1.0).unwrap(), 23);
    let reps = 60;
    let run = |cfg: EstimatorConfig| {
        let thetas: Vec<f64> = (0..reps)
            .map(|rep| {
                let data = generate_dataset(&inst, 400, &mut SimRng::new(24).split(rep)).unwrap();
                let r =
                    estimate(&data, Some(&inst), &cfg, &mut SimRng::new(25).split(rep)).unwrap();
                assert_root(&r);
                r.theta_hat
            })
            .collect();
        let mean = thetas.iter().sum::<f64>() / reps as f64;
        let sd = (thetas.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / reps as f64).sqrt();
        (mean - 3.0, 3.0 * sd / (reps as f64).sqrt())
    };
    let (so_bias, so_tol) = run(EstimatorConfig::second_order(3));
    assert!(
        so_bias.abs() < so_tol,
        "second order bias {so_bias}, 3 se {so_tol}"
    );
    let (dml_bias, dml_tol) = run(EstimatorConfig::dml());
    assert!(dml_bias > dml_tol, "dml bias {dml_bias}, 3 se {dml_tol}");
}

#[test]
fn cross_fitting_has_smaller_spread_than_sample_splitting() {
    let inst = instance(50, 5, default_eps(1.0).unwrap(), 26);
    let reps = 60;
    for cfg in [EstimatorConfig::dml(), EstimatorConfig::second_order(3)] {
        let sd = |scheme: Scheme| {
            let v: Vec<f64> = (0..reps)
                .map(|rep| {
                    let data =
                        generate_dataset(&inst, 600, &mut SimRng::new(27).split(rep)).unwrap();
                    estimate(
                        &data,
                        None,
                        &cfg.with_scheme(scheme),
                        &mut SimRng::new(28).split(rep),
                    )
                    .unwrap()
                    .theta_hat
                })
                .collect();
            let m = v.iter().sum::<f64>() / reps as f64;
            (v.iter().map(|t| (t - m).powi(2)).sum::<f64>() / reps as f64).sqrt()
        };
        let (cf, ss) = (sd(Scheme::CrossFit), sd(Scheme::SampleSplit));
        assert!(cf <= ss, "{cfg:?}: cross-fit sd {cf}, sample-split sd {ss}");
    }
}

#[test]
fn gaussian_treatment_noise_makes_second_order_jacobian_vanish() {
    let inst = generate_instance(
        10,
        3,
        3.0,
        CoefficientLaw::default(),
        NoiseDistribution::gaussian(1.0).unwrap(),
        default_eps(1.0).unwrap(),
        &mut SimRng::new(29),
    )
    .unwrap();
    let data = generate_dataset(&inst, 50_000, &mut SimRng::new(30)).unwrap();
    let cfg = EstimatorConfig::second_order(3).with_mode(MomentMode::Known);
    let r = estimate_with_first_stage(
        &data,
        Some(&inst),
        &cfg,
        &FixedFirstStage::oracle(&inst),
        &mut SimRng::new(31),
    )
    .unwrap();
    assert!(r.j_z_score.abs() <= 4.0, "z = {}", r.j_z_score);
    let dml = estimate_with_first_stage(
        &data,
        Some(&inst),
        &EstimatorConfig::dml(),
        &FixedFirstStage::oracle(&inst),
        &mut SimRng::new(31),
    )
    .unwrap();
    assert!(dml.j_z_score.abs() > 100.0);
}

#[test]
fn fixed_first_stage_rejects_wrong_length() {
    let inst = instance(10, 2, default_eps(1.0).unwrap(), 32);
    let data = generate_dataset(&inst, 50, &mut SimRng::new(33)).unwrap();
    let bad = FixedFirstStage {
        q: Array1::zeros(9),
        gamma: Array1::zeros(10),
    };
    assert!(estimate_with_first_stage(
        &data,
        None,
        &EstimatorConfig::dml(),
        &bad,
        &mut SimRng::new(34)
    )
    .is_err());
}
