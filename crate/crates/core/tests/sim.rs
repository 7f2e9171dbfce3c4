use mixmed::data::{Dataset, SeededRng};
use mixmed::mediate::{sema, SemaOptions};
use mixmed::sim::{
    data_stream, detection_rates, generate_dataset, relative_bias, run_study, true_global_nie, Method, Scenario,
    StudyConfig,
};
use nalgebra::{DMatrix, DVector};

fn column_corr(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let a = x.column(i).add_scalar(-x.column(i).mean());
    let b = x.column(j).add_scalar(-x.column(j).mean());
    a.dot(&b) / (a.norm() * b.norm())
}

fn sample_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let means = x.row_mean();
    let c = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - means[j]);
    c.tr_mul(&c) / (n - 1.0)
}

/// Marginal exposure covariance Σ_X + ΘᵀΣ_CΘ.
fn marginal_exposure_cov(s: &Scenario) -> DMatrix<f64> {
    s.exposure_cov() + s.theta().transpose() * s.confounder_cov() * s.theta()
}

#[test]
fn block_correlation_matches_design() {
    let s = Scenario::standard(2500, 0.4);
    let mut total = 0.0;
    let reps = 20;
    for r in 0..reps {
        let d = generate_dataset(&s, &SeededRng::with_stream(3, r)).unwrap();
        let (mut sum, mut k) = (0.0, 0);
        for i in 5..15 {
            for j in i + 1..15 {
                sum += column_corr(d.exposures(), i, j);
                k += 1;
            }
        }
        total += sum / k as f64;
    }
    let mean = total / reps as f64;
    // The confounders add a little shared variance on top of the 0.8 block.
    let sig = marginal_exposure_cov(&s);
    let implied = sig[(5, 6)] / sig[(5, 5)];
    assert!((mean - 0.80).abs() <= 0.02, "{mean}");
    assert!((mean - implied).abs() < 0.005, "{mean} vs {implied}");
}

#[test]
fn exposure_covariance_converges() {
    let s = Scenario::standard(20_000, 0.4);
    let d = generate_dataset(&s, &SeededRng::new(4)).unwrap();
    let emp = sample_cov(d.exposures());
    let sig = marginal_exposure_cov(&s);
    let n = s.n as f64;
    let p = s.p();
    let mut abs_sum = 0.0;
    let mut worst_z: f64 = 0.0;
    for i in 0..p {
        for j in 0..p {
            let dev = (emp[(i, j)] - sig[(i, j)]).abs();
            abs_sum += dev;
            // Sampling sd of a Gaussian covariance entry.
            let sd = ((sig[(i, i)] * sig[(j, j)] + sig[(i, j)].powi(2)) / n).sqrt();
            worst_z = worst_z.max(dev / sd);
        }
    }
    let mean_dev = abs_sum / (p * p) as f64;
    assert!(mean_dev < 3.0 / n.sqrt(), "{mean_dev}");
    assert!(worst_z < 5.0, "{worst_z}");
}

/// Mediator linear predictor from the generated data and the true coefficients.
fn mediator_linpred(s: &Scenario, d: &Dataset) -> DVector<f64> {
    let csum = DVector::from_fn(d.n(), |i, _| d.confounders().row(i).sum());
    d.exposures() * DVector::from_column_slice(&s.alpha_x) + csum * s.alpha_c
}

fn variance(v: &DVector<f64>) -> f64 {
    let m = v.mean();
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

#[test]
fn r_squared_is_calibrated() {
    for r2 in [0.1, 0.4] {
        let s = Scenario::standard(1000, r2);
        let reps = 20;
        let mut sum = 0.0;
        for r in 0..reps {
            let d = generate_dataset(&s, &SeededRng::with_stream(5, r)).unwrap();
            sum += variance(&mediator_linpred(&s, &d)) / variance(d.mediator());
        }
        let mean = sum / reps as f64;
        assert!((mean - r2).abs() <= 0.03, "target {r2}, got {mean}");
    }
}

#[test]
fn analytic_variances_match_a_million_draws() {
    let s = Scenario::standard(1_000_000, 0.4);
    let d = generate_dataset(&s, &SeededRng::new(6)).unwrap();
    let med = variance(&mediator_linpred(&s, &d));
    let want = s.mediator_linpred_variance();
    assert!((med / want - 1.0).abs() < 0.005, "{med} vs {want}");

    let csum = DVector::from_fn(d.n(), |i, _| d.confounders().row(i).sum());
    let out = d.mediator() * s.beta_m + d.exposures() * DVector::from_column_slice(&s.beta_x) + csum * s.beta_c;
    let want_y = s.outcome_linpred_variance().unwrap();
    assert!((variance(&out) / want_y - 1.0).abs() < 0.005, "{} vs {want_y}", variance(&out));

    let (sm2, se2) = s.noise_variances().unwrap();
    let resid = d.outcome() - &out;
    assert!((variance(&resid) / se2 - 1.0).abs() < 0.005);
    assert!((variance(&(d.mediator() - mediator_linpred(&s, &d))) / sm2 - 1.0).abs() < 0.005);
}

#[test]
fn null_design_gives_unrelated_mediator_and_outcome() {
    let mut s = Scenario::standard(5000, 0.4);
    s.alpha_x = vec![0.0; 30];
    s.beta_x = vec![0.0; 30];
    s.beta_m = 0.0;
    s.alpha_c = 0.0;
    s.beta_c = 0.0;
    let d = generate_dataset(&s, &SeededRng::new(7)).unwrap();
    let bound = 4.0 / (s.n as f64).sqrt();
    for j in 0..30 {
        let mut full = d.exposures().clone().insert_columns(30, 2, 0.0);
        full.set_column(30, d.mediator());
        full.set_column(31, d.outcome());
        assert!(column_corr(&full, j, 30).abs() < bound);
        assert!(column_corr(&full, j, 31).abs() < bound);
    }
    for m in [Method::SemaAdjusted, Method::from_label("pcma_first1").unwrap(), Method::Ersma] {
        assert_eq!(true_global_nie(&s, &m, 1000, &SeededRng::new(1)).unwrap(), 0.0);
    }
}

#[test]
fn sema_truth_is_analytic() {
    let s = Scenario::standard(1000, 0.1);
    for m in [Method::SemaAdjusted, Method::SemaUnadjusted] {
        let t = true_global_nie(&s, &m, 100_000, &SeededRng::new(1)).unwrap();
        assert!((t - 2.16).abs() < 1e-12, "{t}");
    }
    let mut no_path = s.clone();
    no_path.alpha_x = vec![0.0; 30];
    assert_eq!(true_global_nie(&no_path, &Method::SemaAdjusted, 1000, &SeededRng::new(1)).unwrap(), 0.0);
}

#[test]
fn metrics_of_an_oracle_estimator() {
    assert_eq!(relative_bias(2.16, 2.16), Some(0.0));
    assert_eq!(relative_bias(1.0, 0.0), None);
    let active = Scenario::standard(1000, 0.1).active();
    assert_eq!(detection_rates(&active, &active), (Some(1.0), Some(0.0)));
    let none = vec![false; active.len()];
    assert_eq!(detection_rates(&none, &active), (Some(0.0), Some(0.0)));
}

#[test]
fn one_replicate_reruns_in_isolation() {
    let config = StudyConfig {
        scenarios: vec![Scenario::standard(300, 0.4)],
        methods: vec![Method::SemaUnadjusted, Method::SemaAdjusted],
        replicates: 3,
        seed: 11,
        reference_n: 1000,
        ..StudyConfig::default()
    };
    let root = SeededRng::new(config.seed);
    let report = run_study(&config, &root).unwrap();
    assert_eq!(report.replicates.len(), 6);
    assert_eq!(report.truths.len(), 2);

    let data = generate_dataset(&config.scenarios[0], &data_stream(&root, 0, 2)).unwrap();
    let alone = sema(&data, &SemaOptions::default()).unwrap();
    let rec = report.replicates.iter().find(|r| r.replicate == 2 && r.method == "sema_adjusted").unwrap();
    assert_eq!(rec.estimate, Some(alone.global.nie.estimate));
    let (tpr, fpr) = detection_rates(&alone.active, &config.scenarios[0].active());
    assert_eq!((rec.tpr, rec.fpr), (tpr, fpr));

    let again = run_study(&config, &root).unwrap();
    assert_eq!(again.to_json().unwrap(), report.to_json().unwrap());
    let row = report.row("n300_r2m0.4", "sema_adjusted", None).unwrap();
    assert_eq!((row.replicates, row.failures), (3, 0));
}
