use kom_core::simulation::{generate, run_scenario, true_propensity_range, Method, Scenario, SimulationConfig};

fn config(methods: Vec<Method>, jobs: Option<usize>) -> SimulationConfig {
    SimulationConfig {
        methods,
        tune_once: true,
        jobs,
        ..SimulationConfig::default()
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let s = Scenario::new(60, 0.5, 0.5).with_replicates(6);
    let methods = vec![Method::KomSate, Method::IpwSate, Method::OutcomeRegression];
    let one = run_scenario(&s, &config(methods.clone(), Some(1))).unwrap();
    let three = run_scenario(&s, &config(methods, Some(3))).unwrap();
    assert_eq!(one.records.len(), three.records.len());
    for (a, b) in one.records.iter().zip(&three.records) {
        assert_eq!((a.replicate, a.method), (b.replicate, b.method));
        assert_eq!(a.tau_hat.map(f64::to_bits), b.tau_hat.map(f64::to_bits));
        assert_eq!(a.se_sandwich.map(f64::to_bits), b.se_sandwich.map(f64::to_bits));
    }
    for (a, b) in one.cells.iter().zip(&three.cells) {
        assert_eq!(a.rmse.to_bits(), b.rmse.to_bits());
    }
}

#[test]
fn every_method_runs_end_to_end() {
    let s = Scenario::new(80, 0.3, 1.0).with_replicates(3);
    let res = run_scenario(&s, &config(Method::ALL.to_vec(), None)).unwrap();
    assert_eq!(res.cells.len(), 7);
    for c in &res.cells {
        assert_eq!(c.successes, 3, "{} failed: {:?}", c.method, res.records.iter().find(|r| r.method == c.method).unwrap().failure);
        assert!(c.rmse.is_finite());
        let r = c.successes as f64;
        let identity = c.bias.powi(2) + c.empirical_se.powi(2) * (r - 1.0) / r;
        assert!((c.rmse.powi(2) - identity).abs() <= 1e-10 * c.rmse.powi(2).max(1.0));
    }
    let or = res.cells.iter().find(|c| c.method == Method::OutcomeRegression).unwrap();
    assert!(or.coverage_95.is_nan() && or.mean_se_sandwich.is_nan());
    assert_eq!(res.propensity_ranges.len(), 3);
}

#[test]
fn propensity_range_widens_with_alpha() {
    let mut last = (0.5, 0.5);
    for k in 1..=10 {
        let s = Scenario::new(400, k as f64 / 10.0, 1.0).with_replicates(20);
        let (lo, hi) = true_propensity_range(&s).unwrap();
        assert!(lo < last.0 && hi > last.1, "alpha {}: {lo} {hi}", k as f64 / 10.0);
        last = (lo, hi);
    }
}

#[test]
fn effect_is_constant_in_every_draw() {
    let s = Scenario::new(50, 0.7, 0.0);
    for r in 0..5 {
        let d = generate(&s, r).unwrap();
        assert_eq!(d.tau, 4.0);
        assert!(d.y1.iter().zip(&d.y0).all(|(a, b)| (a - b - 4.0).abs() < 1e-12));
        let c = d.data.counts();
        assert!(c.treated > 0 && c.control > 0);
    }
}

#[test]
fn reruns_are_identical() {
    let s = Scenario::new(40, 0.2, 1.0).with_replicates(1);
    let cfg = config(vec![Method::IpwSate, Method::OsateTruncated], Some(1));
    let a = run_scenario(&s, &cfg).unwrap();
    let b = run_scenario(&s, &cfg).unwrap();
    let est = |r: &kom_core::simulation::ScenarioResult| r.records.iter().map(|x| x.tau_hat.map(f64::to_bits)).collect::<Vec<_>>();
    assert_eq!(est(&a), est(&b));
}
