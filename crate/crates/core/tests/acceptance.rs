//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::Instant;

use ndarray::{Array1, Array2};
use num_bigint::BigInt;
use num_rational::BigRational;
use rand_distr::{Distribution, StandardNormal, Uniform};

use orthoml::dgp::{
    default_discrete_eta, exact_discrete_moments, exact_noise_moments, excess_kurtosis_gap,
    NoiseDistribution,
};
use orthoml::harness::{
    run_monte_carlo, run_monte_carlo_with_threads, write_results, ExperimentConfig, McResults,
    OutputFormat,
};
use orthoml::lasso::{kkt_residual, lambda_experiment, lasso_fit, LassoConfig};
use orthoml::moments::{dalpha_moment, multi_indices, MomentMode, MomentSpec};
use orthoml::ortho_check::{
    finite_diff_differential, jacobian_degeneracy_scan, random_eval_point, run_orthogonality_suite,
    SuiteConfig, Verdict, DEFAULT_FD_STEP,
};
use orthoml::SimRng;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn ratio(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn noise_moment_oracle() -> Outcome {
    let eta = default_discrete_eta();
    let NoiseDistribution::Discrete { support, probs } = &eta else {
        unreachable!()
    };
    let exact = exact_discrete_moments(support, probs, 4);
    let expected = [ratio(0, 1), ratio(1, 1), ratio(-12, 5), ratio(161, 20)];
    let exact_ok = exact == expected;
    let gap = excess_kurtosis_gap(&eta);
    let gap_ok = (gap - 5.05).abs() < 1e-12;

    let n = 100_000;
    let mut rng = SimRng::new(11);
    let draws: Vec<f64> = (0..n).map(|_| eta.sample(&mut rng)).collect();
    let m = exact_noise_moments(&eta, 4);
    let mut worst_z: f64 = 0.0;
    for k in 1..=4 {
        let powers: Vec<f64> = draws.iter().map(|e| e.powi(k as i32)).collect();
        let mean = powers.iter().sum::<f64>() / n as f64;
        let var = powers.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        worst_z = worst_z.max(((mean - m[k - 1]) / (var / n as f64).sqrt()).abs());
    }
    Outcome {
        name: "noise-moment oracle",
        pass: exact_ok && gap_ok && worst_z <= 4.0,
        detail: format!("exact (0, 1, -12/5, 161/20): {exact_ok}; kurtosis gap {gap}; max |z| at n=1e5 {worst_z:.2}"),
    }
}

fn derivative_correctness() -> Outcome {
    let specs = [
        MomentSpec::first_order(),
        MomentSpec::second_order(2, MomentMode::Estimated).unwrap(),
        MomentSpec::second_order(3, MomentMode::Estimated).unwrap(),
    ];
    let alphas = multi_indices(4, 2);
    let mut rng = SimRng::new(12);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..100 {
        let point = random_eval_point(&mut rng);
        for spec in &specs {
            for &alpha in &alphas {
                let an = dalpha_moment(spec, alpha, point.t, point.y, point.theta, &point.nuisance)
                    .unwrap();
                let fd = finite_diff_differential(spec, alpha, &point, DEFAULT_FD_STEP).unwrap();
                worst = worst.max((an - fd).abs() / an.abs().max(1.0));
                checked += 1;
            }
        }
    }
    Outcome {
        name: "derivative correctness",
        pass: worst < 1e-6,
        detail: format!(
            "{checked} comparisons (100 points x 15 indices x 3 moments), max rel err {worst:.2e}"
        ),
    }
}

fn orthogonality_suite() -> Outcome {
    let report = run_orthogonality_suite(&SuiteConfig::default()).unwrap();
    let r3 = report
        .rows
        .iter()
        .filter(|r| r.spec == "second_order_r3_estimated");
    let (mut in_s, mut in_s_pass, mut excluded_ok, mut excluded) = (0, 0, 0, 0);
    let mut worst_z: f64 = 0.0;
    for row in r3 {
        match row.result.verdict {
            Verdict::DeterministicNonzero { value, matches, .. } => {
                excluded += 1;
                let expect = if row.result.alpha == [1, 0, 0, 1] {
                    1.0
                } else {
                    -3.0
                };
                excluded_ok += usize::from(matches && value == expect);
            }
            _ => {
                in_s += 1;
                in_s_pass += usize::from(row.result.passed());
                worst_z = worst_z.max(row.result.z_score.abs());
            }
        }
    }
    let fo: Vec<_> = report
        .rows
        .iter()
        .filter(|r| r.spec == "first_order" && r.result.alpha == [0, 2, 0, 0])
        .collect();
    let fo_fails = fo.iter().all(|r| r.result.z_score.abs() > 4.0);
    Outcome {
        name: "orthogonality suite",
        pass: in_s == 130 && in_s_pass == in_s && excluded_ok == excluded && excluded == 20 && fo_fails && report.passed(),
        detail: format!(
            "r=3 S checks {in_s_pass}/{in_s} (max |z| {worst_z:.2}); excluded exact {excluded_ok}/{excluded}; \
             first-order (0,2,0,0) fails at all {} points: {fo_fails}; other specs failures {}",
            fo.len(),
            report.failures
        ),
    }
}

fn gaussian_barrier() -> Outcome {
    let variants = vec![
        ("discrete".to_string(), default_discrete_eta()),
        (
            "gaussian".to_string(),
            NoiseDistribution::gaussian(1.0).unwrap(),
        ),
    ];
    let rng = SimRng::new(13);
    let r3 = jacobian_degeneracy_scan(3, &variants, 100_000, &mut rng.split(3)).unwrap();
    let r2 = jacobian_degeneracy_scan(2, &variants, 100_000, &mut rng.split(2)).unwrap();
    let gauss_ok = r3[1].z_score.abs() <= 4.0 && r2[1].z_score.abs() <= 4.0;
    let disc3_ok = (r3[0].population_j + 5.05).abs() < 1e-12
        && r3[0].z_vs_population.abs() <= 4.0
        && !r3[0].degenerate;
    let disc2_ok = (r2[0].population_j - 2.4).abs() < 1e-12
        && r2[0].j_hat > 0.0
        && r2[0].z_vs_population.abs() <= 4.0
        && !r2[0].degenerate;
    Outcome {
        name: "gaussian barrier",
        pass: gauss_ok && disc3_ok && disc2_ok,
        detail: format!(
            "gaussian z (r=3, r=2) = ({:.2}, {:.2}); discrete r=3 J {:.4} (z vs -5.05 {:.2}); discrete r=2 J {:.4} (z vs 2.4 {:.2})",
            r3[1].z_score, r2[1].z_score, r3[0].j_hat, r3[0].z_vs_population, r2[0].j_hat, r2[0].z_vs_population
        ),
    }
}

fn lasso_checks() -> Outcome {
    let (p, s) = (200, 10);
    let mut kkt_ok = true;
    let mut mono_ok = true;
    let mut all_converged = true;
    let mut errs = [Vec::new(), Vec::new()];
    for seed in 0..20u64 {
        let root = SimRng::new(1000 + seed);
        let mut crng = root.split(0);
        let coef = Uniform::new(0.0, 5.0).unwrap();
        let support = rand::seq::index::sample(&mut crng, p, s);
        let mut beta0 = Array1::<f64>::zeros(p);
        for j in support.iter() {
            beta0[j] = coef.sample(&mut crng);
        }
        for (k, &n) in [1000usize, 4000].iter().enumerate() {
            let mut drng = root.split(1 + k as u64);
            let x = Array2::from_shape_simple_fn((n, p), || StandardNormal.sample(&mut drng));
            let noise =
                Array1::from_shape_simple_fn(n, || -> f64 { StandardNormal.sample(&mut drng) });
            let y = x.dot(&beta0) + noise;
            let cfg = LassoConfig::with_lambda(lambda_experiment(p as f64, n as f64));
            let fit = lasso_fit(x.view(), y.view(), &cfg).unwrap();
            all_converged &= fit.converged;
            if fit.converged {
                kkt_ok &= kkt_residual(x.view(), y.view(), fit.beta_hat.view(), cfg.lambda)
                    < 10.0 * cfg.tol;
            }
            mono_ok &= fit
                .objective_trace
                .windows(2)
                .all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
            errs[k].push((&fit.beta_hat - &beta0).mapv(|v| v * v).sum().sqrt());
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        0.5 * (v[9] + v[10])
    };
    let (m1, m4) = (median(&mut errs[0]), median(&mut errs[1]));
    Outcome {
        name: "lasso",
        pass: kkt_ok && mono_ok && m4 <= 0.75 * m1,
        detail: format!(
            "kkt < 10 tol: {kkt_ok}; monotone: {mono_ok}; all converged: {all_converged}; \
             median err n=1000 {m1:.4}, n=4000 {m4:.4} (ratio {:.3})",
            m4 / m1
        ),
    }
}

fn instance_se(sd: f64, n_ok: usize) -> f64 {
    sd / (n_ok as f64).sqrt()
}

fn desk_reproduction(res: &McResults) -> Outcome {
    let s = *res.cells.iter().map(|c| &c.s).max().unwrap();
    let dml: Vec<_> = res.cells_for("dml", s).collect();
    let so: Vec<_> = res.cells_for("second_order_r3", s).collect();
    let mut wins = 0;
    let mut so_near = 0;
    let mut dml_far = 0;
    for (d, o) in dml.iter().zip(&so) {
        assert_eq!(d.instance_id, o.instance_id);
        wins += usize::from(o.bias.abs() < d.bias.abs());
        so_near += usize::from(o.bias.abs() <= 3.0 * instance_se(o.sd, o.n_ok));
        dml_far += usize::from(d.bias.abs() > 3.0 * instance_se(d.sd, d.n_ok));
    }
    let ds = res.summary("dml", s).unwrap();
    let os = res.summary("second_order_r3", s).unwrap();
    let median_ok = os.abs_bias.median < ds.abs_bias.median;
    let k = dml.len();
    Outcome {
        name: "desk reproduction",
        pass: median_ok && wins >= 8 && so_near >= 8 && dml_far >= 8,
        detail: format!(
            "s={s}: median |bias| second_order {:.4} vs dml {:.4}; (i) {wins}/{k} (ii) {so_near}/{k} (iii) {dml_far}/{k}",
            os.abs_bias.median, ds.abs_bias.median
        ),
    }
}

fn coverage_and_determinism(res: &McResults) -> Outcome {
    // Validity range of the second-order moment: s up to n^(2/3) / log p.
    let s_max = (res.n as f64).powf(2.0 / 3.0) / (res.p as f64).ln();
    let mut cov_ok = true;
    let mut parts = Vec::new();
    for summary in res
        .summaries
        .iter()
        .filter(|m| m.method == "second_order_r3")
    {
        let valid = summary.s as f64 <= s_max;
        if valid {
            cov_ok &= (0.90..=0.98).contains(&summary.coverage_95);
        }
        parts.push(format!(
            "s={} {:.1}%{}",
            summary.s,
            100.0 * summary.coverage_95,
            if valid { "" } else { " (outside range)" }
        ));
    }
    let dml_top = res.summaries.iter().rfind(|m| m.method == "dml").unwrap();

    let small = ExperimentConfig {
        n: 400,
        p: 40,
        sparsity_grid: vec![0, 8],
        n_instances: 2,
        n_reps: 6,
        seed: 7,
        ..ExperimentConfig::desk()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for (i, threads) in [Some(1), Some(1), Some(3)].into_iter().enumerate() {
        let r = run_monte_carlo_with_threads(&small, threads).unwrap();
        let mut run = Vec::new();
        for fmt in [OutputFormat::Csv, OutputFormat::Json] {
            let path = dir.path().join(format!("run{i}.{fmt}"));
            write_results(&r, &path, fmt).unwrap();
            run.push(std::fs::read(path).unwrap());
        }
        bytes.push(run);
    }
    let identical = bytes.windows(2).all(|w| w[0] == w[1]);
    Outcome {
        name: "ci coverage and determinism",
        pass: cov_ok && identical,
        detail: format!(
            "second_order coverage {} (range s <= {s_max:.1}); dml at s={} {:.1}%; byte-identical reruns (1, 1, 3 threads): {identical}",
            parts.join(", "),
            dml_top.s,
            100.0 * dml_top.coverage_95
        ),
    }
}

fn exact_root(res: &McResults) -> Outcome {
    let worst = res
        .cells
        .iter()
        .map(|c| c.max_root_residual)
        .fold(0.0, f64::max);
    Outcome {
        name: "exact-root identity",
        pass: worst < 1e-8,
        detail: format!(
            "max |moment sum| / n over {} desk estimates: {worst:.2e}",
            res.total_reps - res.failed_reps
        ),
    }
}

fn main() {
    let start = Instant::now();
    let mut outcomes = Vec::new();
    let mut run = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        println!(
            "{} {}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail,
            t.elapsed().as_secs_f64()
        );
        outcomes.push(o.pass);
    };
    run(&noise_moment_oracle);
    run(&derivative_correctness);
    run(&orthogonality_suite);
    run(&gaussian_barrier);
    run(&lasso_checks);

    let t = Instant::now();
    let desk = run_monte_carlo(&ExperimentConfig::desk()).expect("desk run");
    println!(
        "desk preset: {} method-reps, {} excluded, flagged {} [{:.1}s]",
        desk.total_reps,
        desk.failed_reps,
        desk.flagged,
        t.elapsed().as_secs_f64()
    );
    run(&|| exact_root(&desk));
    run(&|| desk_reproduction(&desk));
    run(&|| coverage_and_determinism(&desk));

    let failed = outcomes.iter().filter(|p| !**p).count();
    println!(
        "acceptance: {} passed, {failed} failed [{:.1}s]",
        outcomes.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
