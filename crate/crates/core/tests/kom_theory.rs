mod common;

use common::*;
use kom_core::kom::{solve_problem, worst_case_cmse, worst_case_discrepancy_sq, KomMode, KomProblem, Penalty};
use kom_core::linalg::DenseMatrix;
use kom_core::qp::SolverSettings;
use kom_core::{Normalization, TargetWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_design(rng: &mut ChaCha8Rng, n: usize) -> (DenseMatrix, Vec<bool>) {
    let mut x = DenseMatrix::zeros(n, 2);
    for i in 0..n {
        x[(i, 0)] = rng.random_range(-1.0..1.0);
        x[(i, 1)] = rng.random_range(-1.0..1.0);
    }
    let mut treated: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    treated[0] = true;
    treated[1] = true;
    treated[2] = false;
    treated[3] = false;
    (x, treated)
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random_range(1e-9..1.0f64).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

#[test]
fn closed_form_discrepancy_is_the_supremum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let n = rng.random_range(4..15);
        let k = random_psd(&mut rng, n, n, 0.0);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let s: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        let t: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        for arm in [true, false] {
            let closed = worst_case_discrepancy_sq(&w, &v, &k, &s, &t, arm as u8).unwrap();
            let a = maximizer_coefficients(&w, &v, &s, &t, arm);
            let at_max = imbalance_at(&a, &w, &v, &k, &s, &t, arm).powi(2);
            assert!((closed - at_max).abs() <= 1e-8 * closed.max(1e-300));
            for _ in 0..200 {
                let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                assert!(imbalance_at(&b, &w, &v, &k, &s, &t, arm).powi(2) <= closed * (1.0 + 1e-10));
            }
        }
    }
}

#[test]
fn fixed_target_solution_matches_projected_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..5 {
        let n = 10;
        let (x, treated) = random_design(&mut rng, n);
        let k = quadratic_gram(&x);
        let lambda = (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
        let v = vec![1.0; n];
        let target = TargetWeights::new(v.clone(), Normalization::UnitMean).unwrap();
        let p = KomProblem::fixed(k.clone(), k.clone(), treated.clone(), vec![true; n], Penalty::per_arm(lambda.0, lambda.1), target);
        let (sol, _) = solve_problem(&p, &SolverSettings::default()).unwrap();
        let (_, reference) = fixed_target_optimum(&v, &k, &k, &treated, lambda);
        assert!((sol.cmse.total - reference).abs() <= 1e-7 * reference, "{} vs {reference}", sol.cmse.total);
        let direct = fixed_target_cmse(&sol.w, &v, &k, &k, &treated, lambda);
        assert!((direct - sol.cmse.total).abs() <= 1e-12 * direct.max(1.0));
    }
}

#[test]
fn joint_target_never_loses_to_a_fixed_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let settings = SolverSettings::default();
    let n = 12;
    let (x, treated) = random_design(&mut rng, n);
    let k = quadratic_gram(&x);
    let pen = Penalty::per_arm(0.5, 0.5);
    let joint = KomProblem::variable(k.clone(), k.clone(), treated.clone(), vec![true; n], pen.clone(), KomMode::Kowate, None);
    let best = solve_problem(&joint, &settings).unwrap().0.cmse.total;
    for _ in 0..5 {
        let v = TargetWeights::new(random_simplex(&mut rng, n), Normalization::Simplex).unwrap();
        let p = KomProblem::fixed(k.clone(), k.clone(), treated.clone(), vec![true; n], pen.clone(), v);
        let fixed = solve_problem(&p, &settings).unwrap().0.cmse.total;
        assert!(best <= fixed + 1e-8, "{best} > {fixed}");
    }
}

#[test]
fn selection_is_close_to_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..4 {
        let n = 8;
        let (x, treated) = random_design(&mut rng, n);
        let k = quadratic_gram(&x);
        let lambda = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
        let card = rng.random_range(3..=6);
        let p = KomProblem::variable(k.clone(), k.clone(), treated.clone(), vec![true; n], Penalty::per_arm(lambda.0, lambda.1), KomMode::Kosate, Some(card));
        let (sol, _) = solve_problem(&p, &SolverSettings::default()).unwrap();
        let level = n as f64 / card as f64;
        assert_eq!(sol.v.iter().filter(|&&v| v == level).count(), card);
        let best = subset_enumeration(&k, &k, &treated, lambda, card);
        assert!(sol.cmse.total >= best * (1.0 - 1e-6));
        assert!(sol.cmse.total <= best * 1.05, "{} vs {best}", sol.cmse.total);
    }
}

#[test]
fn conditional_error_decomposes_into_bias_and_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let n = 30;
    let (x, treated) = random_design(&mut rng, n);
    let k = quadratic_gram(&x);
    let target = TargetWeights::new(vec![1.0; n], Normalization::UnitMean).unwrap();
    let p = KomProblem::fixed(k.clone(), k.clone(), treated.clone(), vec![true; n], Penalty::per_arm(1.0, 1.0), target);
    let (sol, _) = solve_problem(&p, &SolverSettings::default()).unwrap();
    let f0: Vec<f64> = (0..n).map(|i| (x[(i, 0)] + 0.5 * x[(i, 1)]).powi(2)).collect();
    let f1: Vec<f64> = (0..n).map(|i| f0[i] + 1.0 + x[(i, 1)]).collect();
    let nf = n as f64;
    let bias: f64 = (0..n)
        .map(|i| {
            let (w1, w0) = if treated[i] { (sol.w[i], 0.0) } else { (0.0, sol.w[i]) };
            (w1 - sol.v[i]) * f1[i] - (w0 - sol.v[i]) * f0[i]
        })
        .sum::<f64>()
        / nf;
    let theory = bias * bias + sol.w.iter().map(|w| w * w).sum::<f64>() / (nf * nf);
    let reps = 4000;
    let mut sq = Vec::with_capacity(reps);
    for _ in 0..reps {
        let noise: f64 = (0..n)
            .map(|i| {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                if treated[i] { sol.w[i] * e } else { -sol.w[i] * e }
            })
            .sum::<f64>()
            / nf;
        sq.push((bias + noise).powi(2));
    }
    let mean = sq.iter().sum::<f64>() / reps as f64;
    let sd = (sq.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    assert!((mean - theory).abs() <= 3.0 * sd / (reps as f64).sqrt(), "{mean} vs {theory}");
    let b = worst_case_cmse(&sol.w, &sol.v, &k, &k, &Penalty::per_arm(1.0, 1.0), &vec![true; n], &treated).unwrap();
    assert!((b.total - sol.cmse.total).abs() < 1e-12);
}
