//! End-to-end acceptance suite. Each test exercises one exit criterion at
//! its stated tolerance and prints a PASS line with the measured values
//! (visible with `--nocapture`).

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use performative_core::estimator::{
    erm_solve, ppi_solve, rrm_trajectory, LambdaPolicy, LossModel, RidgeSquaredLoss, DEFAULT_TOL,
};
use performative_core::frobenius;
use performative_core::inference::{
    estimate_variance, estimate_variance_ppi, ppi_sigma, select_lambda, vt_recursion, GradGMode,
    Scalarization, ScoreConfig, LAMBDA_MAX,
};
use performative_core::model::{Dataset, LabeledSample};
use performative_core::score::{
    default_init, fit_score_model, grad_g_estimate, quality_metric, score_eval, score_partial2,
    PerturbationBundle, ScoreModelParams,
};
use performative_harness::config::ExperimentConfig;
use performative_harness::runner::{ks_distance_chi2, run_convergence, run_coverage, run_qq};

fn base_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Criterion 1: simultaneous coverage of the true iterate at t = 4,
/// n = 1000, policy zero, oracle Jacobian, 300 trials lands in [0.85, 0.95];
/// the run finishes inside the 3-minute budget.
#[test]
fn acceptance_1_coverage_window() {
    let start = Instant::now();
    let mut cfg = base_config();
    cfg.n_grid = vec![1000];
    cfg.trials = 300;
    cfg.lambda_policies = vec![LambdaPolicy::Zero];
    cfg.score.mode = GradGMode::Oracle;
    let summary = run_coverage(&cfg).unwrap();
    let cell = summary
        .cells
        .iter()
        .find(|c| c.t == 4)
        .expect("t = 4 cell exists");
    let elapsed = start.elapsed();
    assert!(
        (0.85..=0.95).contains(&cell.coverage_t),
        "coverage {} outside [0.85, 0.95]",
        cell.coverage_t
    );
    assert!(
        elapsed.as_secs() < 180,
        "run took {elapsed:?}, over the 3-minute budget"
    );
    println!(
        "ACCEPTANCE 1 PASS: coverage(theta_t | t=4, n=1000) = {:.4} in [0.85, 0.95] ({:.1?})",
        cell.coverage_t, elapsed
    );
}

/// Criterion 2: the inflated region's coverage of the stable point
/// dominates the iterate coverage in every cell, and the gap at t = 4 is at
/// most 0.03.
#[test]
fn acceptance_2_stable_point_dominance() {
    let mut cfg = base_config();
    cfg.n_grid = vec![1000];
    cfg.trials = 300;
    cfg.lambda_policies = vec![LambdaPolicy::Zero];
    cfg.score.mode = GradGMode::Oracle;
    let summary = run_coverage(&cfg).unwrap();
    for cell in &summary.cells {
        assert!(
            cell.coverage_ps >= cell.coverage_t,
            "cell (policy {}, n {}, t {}): ps coverage {} below iterate coverage {}",
            cell.policy,
            cell.n,
            cell.t,
            cell.coverage_ps,
            cell.coverage_t
        );
    }
    let last = summary.cells.iter().find(|c| c.t == 4).unwrap();
    let gap = last.coverage_ps - last.coverage_t;
    assert!(gap <= 0.03, "t = 4 coverage gap {gap} exceeds 0.03");
    println!(
        "ACCEPTANCE 2 PASS: coverage_ps >= coverage_t everywhere; gap at t=4 = {gap:.4} <= 0.03"
    );
}

/// Criterion 3: with the biased annotator at n = 500, N = 2000, t = 3, the
/// greedy weight yields mean width within 5% of (in practice below) the best
/// of the fixed policies.
#[test]
fn acceptance_3_greedy_width() {
    let mut cfg = base_config();
    cfg.n_grid = vec![500];
    cfg.t_steps = 3;
    cfg.trials = 200;
    cfg.lambda_policies = vec![
        LambdaPolicy::Zero,
        LambdaPolicy::Fixed(1.0),
        LambdaPolicy::Greedy,
    ];
    cfg.score.mode = GradGMode::Oracle;
    let summary = run_coverage(&cfg).unwrap();
    let width = |policy: &str| {
        summary
            .cells
            .iter()
            .find(|c| c.policy == policy && c.t == 3)
            .map(|c| c.mean_width)
            .expect("cell exists")
    };
    let (zero, one, greedy) = (width("zero"), width("fixed(1)"), width("greedy"));
    let best_fixed = zero.min(one);
    assert!(
        greedy <= best_fixed * 1.05,
        "greedy width {greedy} above min(zero {zero}, one {one}) + 5%"
    );
    println!(
        "ACCEPTANCE 3 PASS: widths zero {zero:.4}, fixed(1) {one:.4}, greedy {greedy:.4} (<= best + 5%)"
    );
}

/// Criterion 4: the squared Mahalanobis sample at t = 4, n = 1000 over 1000
/// trials stays within KS distance 0.06 of the chi-squared(2) law.
#[test]
fn acceptance_4_clt_shape() {
    let mut cfg = base_config();
    cfg.n_grid = vec![1000];
    cfg.trials = 1000;
    cfg.lambda_policies = vec![LambdaPolicy::Zero];
    cfg.score.mode = GradGMode::Oracle;
    let points = run_qq(&cfg).unwrap();
    let m2: Vec<f64> = points.iter().map(|p| p.observed_m2).collect();
    let ks = ks_distance_chi2(&m2, cfg.model.dim());
    assert!(ks <= 0.06, "KS distance {ks} exceeds 0.06");
    let mean = m2.iter().sum::<f64>() / m2.len() as f64;
    assert!(
        (mean - 2.0).abs() <= 0.2,
        "mean Mahalanobis^2 {mean} not within 10% of d = 2"
    );
    println!("ACCEPTANCE 4 PASS: KS(m^2, chi2_2) = {ks:.4} <= 0.06, mean m^2 = {mean:.3}");
}

/// Criterion 5: the estimated V_t (oracle Jacobian, empirical blocks) at
/// n = 2000, t = 4 falls within 10% Frobenius of the Monte Carlo covariance
/// of sqrt(n) (theta_hat_t - theta_t) over 2000 trials.
#[test]
fn acceptance_5_variance_recursion_oracle() {
    let cfg = base_config();
    let model = &cfg.model;
    let loss = RidgeSquaredLoss::new(model.gamma());
    let theta0 = cfg.theta0_vector();
    let truth = model.underlying_trajectory(&theta0, 4);
    let n = 2000;
    let trials = 2000;

    // Monte Carlo covariance of the scaled deviation at t = 4.
    let deviations: Vec<DVector<f64>> = (0..trials)
        .map(|trial| {
            let mut r = rng(500_000 + trial);
            let traj = rrm_trajectory(model, &loss, &theta0, 4, n, &mut r).unwrap();
            (traj.theta_at(4) - &truth[4]) * (n as f64).sqrt()
        })
        .collect();
    let mean = deviations.iter().sum::<DVector<f64>>() / trials as f64;
    let mut v_mc = DMatrix::zeros(2, 2);
    for dev in &deviations {
        let c = dev - &mean;
        v_mc.ger(1.0, &c, &c, 1.0);
    }
    v_mc /= (trials - 1) as f64;

    // One estimated V_4 from a single trajectory.
    let mut r = rng(7);
    let traj = rrm_trajectory(model, &loss, &theta0, 4, n, &mut r).unwrap();
    let score_cfg = ScoreConfig::oracle(model);
    let est = estimate_variance(&traj, &loss, &score_cfg, &mut r).unwrap();
    let rel = frobenius(&(est.v_t() - &v_mc)) / frobenius(&v_mc);
    assert!(rel <= 0.10, "relative Frobenius error {rel} exceeds 10%");
    println!("ACCEPTANCE 5 PASS: |V_hat - V_mc|_F / |V_mc|_F = {rel:.4} <= 0.10");
}

/// Criterion 6: the fitted score model reaches the reported quality
/// threshold at n = k = 2000, the Jacobian estimate at n = k = 8000 is
/// within 0.1 of the analytic one, and its median error decreases strictly
/// over n in {1000, 4000, 16000}.
#[test]
fn acceptance_6_score_matching_quality() {
    let cfg = base_config();
    let model = &cfg.model;
    let loss = RidgeSquaredLoss::new(model.gamma());
    let theta0 = cfg.theta0_vector();
    let theta1 = model.underlying_step(&theta0);
    let grad_g = model.grad_g_analytic();

    // Trained quality at n = k = 2000, eta = 0.1, lr = 0.1, 500 iterations.
    let mut r = rng(60);
    let bundle =
        PerturbationBundle::collect_perturbed(model, &theta1, 0.1, 2000, 2000, &mut r).unwrap();
    let psi = fit_score_model(&bundle, &default_init(&bundle), 0.1, 500).unwrap();
    let quality = quality_metric(&psi, &bundle, model).unwrap();
    assert!(
        quality < 0.05,
        "reported J(psi_hat) = {quality} not below 0.05"
    );

    // Jacobian estimate at n = k = 8000 (median over a few seeds).
    let mut errs8k = Vec::new();
    for seed in 0..9 {
        let mut r = rng(61 + seed);
        let n = 8000;
        let base = model.sample_labeled(&theta1, n, &mut r).unwrap();
        let theta_next = erm_solve(&loss, &base, &theta1, DEFAULT_TOL).unwrap();
        let bundle = PerturbationBundle::with_base(base.clone(), model, 0.1, n, &mut r).unwrap();
        let psi = fit_score_model(&bundle, &default_init(&bundle), 0.1, 500).unwrap();
        let g = grad_g_estimate(&loss, &base, &theta_next, &psi).unwrap();
        errs8k.push(frobenius(&(&g - &grad_g)));
    }
    errs8k.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let err8k = errs8k[errs8k.len() / 2];
    assert!(
        err8k <= 0.1,
        "|g_hat - grad G|_F = {err8k} exceeds 0.1 at n = k = 8000"
    );

    // Strictly decreasing medians over n in {1000, 4000, 16000} with
    // k = n and eta = n^{-1/4}, 50 trials each.
    let mut medians = Vec::new();
    for (block, &n) in [1000usize, 4000, 16000]
        .iter()
        .enumerate()
        .map(|(i, n)| (i as u64, n))
    {
        let eta = (n as f64).powf(-0.25);
        let mut errs: Vec<f64> = (0..50)
            .map(|trial| {
                let mut r = rng(70_000 + block * 1000 + trial);
                let base = model.sample_labeled(&theta1, n, &mut r).unwrap();
                let theta_next = erm_solve(&loss, &base, &theta1, DEFAULT_TOL).unwrap();
                let bundle =
                    PerturbationBundle::with_base(base.clone(), model, eta, n, &mut r).unwrap();
                let psi = fit_score_model(&bundle, &default_init(&bundle), 0.1, 500).unwrap();
                let g = grad_g_estimate(&loss, &base, &theta_next, &psi).unwrap();
                frobenius(&(&g - &grad_g))
            })
            .collect();
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push(errs[errs.len() / 2]);
    }
    assert!(
        medians[0] > medians[1] && medians[1] > medians[2],
        "medians {medians:?} not strictly decreasing"
    );
    println!(
        "ACCEPTANCE 6 PASS: J(psi_hat) = {quality:.4} < 0.05; |g_hat - grad G| = {err8k:.4} <= 0.1; medians {medians:?} strictly decreasing"
    );
}

/// Criterion 7: the underlying trajectory satisfies the geometric
/// contraction bound exactly for t = 0..10, and the closed-form lambda
/// argmin beats a 1001-point grid on 100 random instances.
#[test]
fn acceptance_7_contraction_and_lambda_argmin() {
    let mut cfg = base_config();
    cfg.t_steps = 10;
    let rows = run_convergence(&cfg).unwrap();
    assert_eq!(rows.len(), 11);
    for row in &rows {
        assert!(
            row.dist_to_ps <= row.bound * (1.0 + 1e-12) + 1e-300,
            "t = {}: distance {} exceeds bound {}",
            row.t,
            row.dist_to_ps,
            row.bound
        );
    }
    assert!((rows[0].dist_to_ps - rows[0].bound).abs() <= 1e-12);
    let rate = cfg.model.contraction_rate(cfg.theta_bound).unwrap();
    // Per-step contraction ratios, checked while the distances are still
    // clear of the double-precision floor.
    for pair in rows.windows(2) {
        if pair[1].dist_to_ps > 1e-13 {
            assert!(pair[1].dist_to_ps / pair[0].dist_to_ps <= rate + 1e-12);
        }
    }

    let mut r = rng(90);
    let mut spd = |d: usize| {
        let m = DMatrix::from_fn(d, d, |_, _| r.sample::<f64, _>(StandardNormal));
        &m * m.transpose() + DMatrix::identity(d, d) * 0.1
    };
    for _ in 0..100 {
        let h = spd(2);
        let joint = spd(4);
        let c_gg = joint.view((0, 0), (2, 2)).into_owned();
        let c_ff = joint.view((2, 2), (2, 2)).into_owned();
        let c_gf = joint.view((0, 2), (2, 2)).into_owned();
        let cu_ff = spd(2);
        let rat = 0.25;
        let star =
            select_lambda(&h, &c_gg, &c_ff, &c_gf, &cu_ff, rat, Scalarization::Trace).unwrap();
        let q = |lam: f64| {
            ppi_sigma(&h, &c_gg, &c_ff, &c_gf, &cu_ff, lam, rat)
                .unwrap()
                .trace()
        };
        let q_star = q(star);
        for g in 0..=1000 {
            let lam = LAMBDA_MAX * g as f64 / 1000.0;
            assert!(
                q_star <= q(lam) + 1e-10,
                "grid point {lam} beats the closed-form argmin"
            );
        }
    }
    println!(
        "ACCEPTANCE 7 PASS: contraction bound holds for t = 0..10 (rate {rate:.3}); lambda argmin beats the grid on 100 instances"
    );
}

/// Criterion 8: property suites — recursion two-form equivalence at 1e-12,
/// exact lambda = 0 degenerations, closed form vs Newton at 1e-8, and the
/// finite-difference oracles at their stated tolerances.
#[test]
fn acceptance_8_property_suites() {
    let cfg = base_config();
    let model = &cfg.model;
    let loss = RidgeSquaredLoss::new(model.gamma());
    let theta0 = cfg.theta0_vector();
    let mut r = rng(80);

    // vt_recursion vs the direct product-sum form, 1e-12.
    let spd = |d: usize, r: &mut ChaCha12Rng| {
        let m = DMatrix::from_fn(d, d, |_, _| r.sample::<f64, _>(StandardNormal));
        &m * m.transpose() + DMatrix::identity(d, d) * 0.1
    };
    for _ in 0..50 {
        let t = 4;
        let sigmas: Vec<DMatrix<f64>> = (0..t).map(|_| spd(2, &mut r)).collect();
        let grads: Vec<DMatrix<f64>> = (0..t - 1)
            .map(|_| DMatrix::from_fn(2, 2, |_, _| r.sample::<f64, _>(StandardNormal)) * 0.5)
            .collect();
        let rec = vt_recursion(&sigmas, &grads).unwrap();
        let mut direct = DMatrix::zeros(2, 2);
        for (i, sigma) in sigmas.iter().enumerate() {
            let mut prod = DMatrix::identity(2, 2);
            for g in grads.iter().take(t - 1).skip(i) {
                prod = g * prod;
            }
            direct += &prod * sigma * prod.transpose();
        }
        assert!(frobenius(&(rec - direct)) <= 1e-12);
    }

    // lambda = 0 degenerations are exact: solver and variance estimate.
    let mut stream = rng(81);
    let labeled = model.sample_labeled(&theta0, 300, &mut stream).unwrap();
    let pseudo_labeled = Dataset::new(
        labeled
            .iter()
            .map(|z| LabeledSample {
                x: z.x.clone(),
                y: model.annotate(&theta0, &z.x, &mut stream),
            })
            .collect(),
        theta0.clone(),
    )
    .unwrap();
    let pseudo_unlabeled = model.sample_labeled(&theta0, 600, &mut stream).unwrap();
    let erm = erm_solve(&loss, &labeled, &theta0, DEFAULT_TOL).unwrap();
    let ppi = ppi_solve(
        &loss,
        &labeled,
        &pseudo_labeled,
        &pseudo_unlabeled,
        0.0,
        &theta0,
        DEFAULT_TOL,
    )
    .unwrap();
    assert!((erm - ppi).norm() <= 1e-10);

    let traj = performative_core::estimator::ppi_trajectory(
        model,
        &loss,
        &theta0,
        3,
        400,
        800,
        LambdaPolicy::Zero,
        &mut rng(82),
    )
    .unwrap();
    let score_cfg = ScoreConfig::oracle(model);
    let classical = estimate_variance(&traj, &loss, &score_cfg, &mut rng(83)).unwrap();
    let ppi_est = estimate_variance_ppi(&traj, &loss, &score_cfg, 0.5, &mut rng(83)).unwrap();
    for (a, b) in classical.v_prefix.iter().zip(ppi_est.v_prefix.iter()) {
        assert!(frobenius(&(a - b)) <= 1e-10);
    }

    // Closed form vs Newton on the same data, 1e-8: exercised through a
    // loss wrapper that hides the closed form from the solver.
    struct NoClosedForm(RidgeSquaredLoss);
    impl LossModel for NoClosedForm {
        fn value(&self, z: &LabeledSample, th: &DVector<f64>) -> f64 {
            self.0.value(z, th)
        }
        fn grad(&self, z: &LabeledSample, th: &DVector<f64>) -> DVector<f64> {
            self.0.grad(z, th)
        }
        fn hessian(&self, z: &LabeledSample, th: &DVector<f64>) -> DMatrix<f64> {
            self.0.hessian(z, th)
        }
    }
    let newton = erm_solve(
        &NoClosedForm(loss),
        &labeled,
        &DVector::from_vec(vec![5.0, -4.0]),
        DEFAULT_TOL,
    )
    .unwrap();
    let closed = erm_solve(&loss, &labeled, &theta0, DEFAULT_TOL).unwrap();
    assert!((newton - closed).norm() <= 1e-8);

    // Finite-difference oracles at stated tolerances.
    let g = model.grad_g_analytic();
    let probe = DVector::from_vec(vec![0.3, -0.2]);
    let base = model.underlying_step(&probe);
    let h = 1e-6;
    for i in 0..2 {
        let mut up = probe.clone();
        up[i] += h;
        let col = (model.underlying_step(&up) - &base) / h;
        assert!((col - g.column(i)).norm() <= 1e-5);
    }
    let psi = ScoreModelParams::new(
        DVector::from_vec(vec![0.9, 1.2]),
        DVector::from_vec(vec![0.08, -0.05]),
        0.3,
    );
    let z = LabeledSample {
        x: DVector::from_vec(vec![1.1, -0.7]),
        y: 0.8,
    };
    let theta = DVector::from_vec(vec![0.2, 0.4]);
    let log_m = |th: &DVector<f64>| -> f64 {
        let resid = z.y - psi.a.dot(&z.x) - psi.c.dot(th);
        -resid * resid / (2.0 * psi.s2)
    };
    let s = score_eval(&psi, &z, &theta);
    for i in 0..2 {
        let mut up = theta.clone();
        up[i] += 1e-5;
        let mut dn = theta.clone();
        dn[i] -= 1e-5;
        let fd = (log_m(&up) - log_m(&dn)) / 2e-5;
        assert!((fd - s[i]).abs() / s[i].abs().max(1e-12) <= 1e-6);
        let second = (log_m(&up) - 2.0 * log_m(&theta) + log_m(&dn)) / 1e-10;
        assert!((second - score_partial2(&psi, i)).abs() <= 1e-4);
    }
    println!(
        "ACCEPTANCE 8 PASS: recursion two-form 1e-12; lambda=0 degenerations exact; closed form vs Newton 1e-8; FD oracles in tolerance"
    );
}
