use mixmed::bkmr::{KernelConfig, ModelRole};
use mixmed::cma::{fit_models, mediation_bkmr, CmaConfig};
use mixmed::data::{Dataset, SeededRng};
use mixmed::Error;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// One exposure, one confounder; α_x = 0.5, β_m = 0.4, β_x = 0.2.
fn linear_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
    let c: Vec<f64> = (0..n).map(|_| g()).collect();
    let x: Vec<f64> = c.iter().map(|ci| 0.3 * ci + g()).collect();
    let m: Vec<f64> = (0..n).map(|i| 0.5 * x[i] + 0.5 * c[i] + g()).collect();
    let y: Vec<f64> = (0..n).map(|i| 0.2 * x[i] + 0.4 * m[i] + 0.5 * c[i] + g()).collect();
    Dataset::new(
        DMatrix::from_column_slice(n, 1, &x),
        DVector::from_vec(m),
        DVector::from_vec(y),
        DMatrix::from_column_slice(n, 1, &c),
    )
    .unwrap()
}

fn short_config() -> KernelConfig {
    KernelConfig { iterations: 400, ..KernelConfig::default() }
}

#[test]
fn linear_dgp_recovers_indirect_effect() {
    let data = linear_data(300, 1);
    let t = std::time::Instant::now();
    let [fm, fy, ft] = fit_models(&data, &short_config(), &SeededRng::new(2)).unwrap();
    let fitted = t.elapsed();
    let cfg = CmaConfig { a: vec![1.0], astar: vec![0.0], ..CmaConfig::default() };
    let eff = mediation_bkmr(&fm, &fy, &ft, &cfg, &SeededRng::new(3)).unwrap();
    eprintln!("fit {fitted:?}, total {:?}; NIE {:?}", t.elapsed(), eff.nie_summary);
    assert!(eff.nie_summary.lo < 0.2 && 0.2 < eff.nie_summary.hi);
    for j in 0..eff.te.len() {
        assert_eq!(eff.nie[j], eff.te[j] - eff.nde[j]);
    }
    assert_eq!(eff.cde.len(), 4);
    // Without an exposure-mediator interaction the CDEs should agree.
    let widths: f64 = eff.cde.iter().map(|c| c.summary.hi - c.summary.lo).fold(0.0, f64::max);
    let means: Vec<f64> = eff.cde.iter().map(|c| c.summary.mean).collect();
    let spread = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < widths, "{means:?} vs {widths}");

    // Null contrast.
    let null = CmaConfig { a: vec![0.4], astar: vec![0.4], ..CmaConfig::default() };
    let z = mediation_bkmr(&fm, &fy, &ft, &null, &SeededRng::new(3)).unwrap();
    assert!(z.te.iter().chain(&z.nde).chain(&z.nie).all(|v| *v == 0.0));

    // Mirrored contrast on the same chains negates the effects approximately.
    let mirror = CmaConfig { a: vec![0.0], astar: vec![1.0], ..CmaConfig::default() };
    let neg = mediation_bkmr(&fm, &fy, &ft, &mirror, &SeededRng::new(3)).unwrap();
    assert!((neg.te_summary.mean + eff.te_summary.mean).abs() < 0.1);

    // Roles are checked.
    assert!(matches!(mediation_bkmr(&fy, &fm, &ft, &cfg, &SeededRng::new(3)), Err(Error::Config(_))));
    let bad_sel = CmaConfig { sel: Some(vec![10_000]), ..cfg.clone() };
    assert!(matches!(mediation_bkmr(&fm, &fy, &ft, &bad_sel, &SeededRng::new(3)), Err(Error::Domain(_))));
    assert_eq!(fm.role, ModelRole::Mediator);
}

#[test]
fn effects_are_deterministic() {
    let data = linear_data(80, 4);
    let cfg = KernelConfig { iterations: 120, ..KernelConfig::default() };
    let [fm, fy, ft] = fit_models(&data, &cfg, &SeededRng::new(5)).unwrap();
    let c = CmaConfig { a: vec![1.0], astar: vec![0.0], draws: 5, ..CmaConfig::default() };
    let a = mediation_bkmr(&fm, &fy, &ft, &c, &SeededRng::new(6)).unwrap();
    let b = mediation_bkmr(&fm, &fy, &ft, &c, &SeededRng::new(6)).unwrap();
    assert_eq!(a, b);
}
