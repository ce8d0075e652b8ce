//! Property tests for the solver stack: exact specialization of the unified
//! residual/merit, merit-gradient consistency, stationarity equivalences on
//! closed forms, cross-method agreement, and outer-loop bookkeeping.

use malm::{
    builtin_problem, merit, merit_directional_derivative, newton_step, random_quadratic, residual,
    run_from, Branch, Iterate, Method, MethodContext, Problem, RunStatus, SolverConfig,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(-scale..=scale))
}

/// Transcription of the plain penalty root function
/// `(∇f - ∇c·λ̃, c + ω̃·λ̃)`.
fn penalty_residual_reference(
    problem: &Problem,
    omega_tilde: f64,
    w: &Iterate,
) -> DVector<f64> {
    let g = problem.grad_f(&w.x).unwrap();
    let jac = problem.jac_c(&w.x).unwrap();
    let c = problem.c(&w.x).unwrap();
    let top = g - jac * &w.lambda_tilde;
    let bottom = c + omega_tilde * &w.lambda_tilde;
    let mut out = DVector::zeros(top.len() + bottom.len());
    out.rows_mut(0, top.len()).copy_from(&top);
    out.rows_mut(top.len(), bottom.len()).copy_from(&bottom);
    out
}

/// Transcription of the augmented-Lagrangian root function
/// `(∇f - ∇c·(λ_k+λ̃), c + ω̃·λ̃)`.
fn alm_residual_reference(
    problem: &Problem,
    lambda_k: &DVector<f64>,
    omega_tilde: f64,
    w: &Iterate,
) -> DVector<f64> {
    let g = problem.grad_f(&w.x).unwrap();
    let jac = problem.jac_c(&w.x).unwrap();
    let c = problem.c(&w.x).unwrap();
    let top = g - jac * (lambda_k + &w.lambda_tilde);
    let bottom = c + omega_tilde * &w.lambda_tilde;
    let mut out = DVector::zeros(top.len() + bottom.len());
    out.rows_mut(0, top.len()).copy_from(&top);
    out.rows_mut(top.len(), bottom.len()).copy_from(&bottom);
    out
}

/// Penalty merit with both penalty terms weighted `1/(2ω̃)`.
fn penalty_merit_reference(problem: &Problem, omega_tilde: f64, nu: f64, w: &Iterate) -> f64 {
    let f = problem.f(&w.x).unwrap();
    let c = problem.c(&w.x).unwrap();
    let shifted = &c + omega_tilde * &w.lambda_tilde;
    f + c.norm_squared() / (2.0 * omega_tilde)
        + nu * shifted.norm_squared() / (2.0 * omega_tilde)
}

/// Augmented-Lagrangian merit `f - λ_kᵀc + 1/(2ω̃)‖c‖² + ν/(2ω̃)‖c+ω̃λ̃‖²`.
fn alm_merit_reference(
    problem: &Problem,
    lambda_k: &DVector<f64>,
    omega_tilde: f64,
    nu: f64,
    w: &Iterate,
) -> f64 {
    let f = problem.f(&w.x).unwrap();
    let c = problem.c(&w.x).unwrap();
    let shifted = &c + omega_tilde * &w.lambda_tilde;
    f - lambda_k.dot(&c)
        + c.norm_squared() / (2.0 * omega_tilde)
        + nu * shifted.norm_squared() / (2.0 * omega_tilde)
}

proptest! {
    /// The unified residual and merit specialize exactly (float equality) to
    /// the penalty and ALM formulas when omega = 0.
    #[test]
    fn unified_forms_specialize_exactly(
        seed in 0u64..1000,
        omega_tilde in 1e-6f64..1.0,
        nu in 0.1f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=6usize);
        let m = rng.random_range(1..=4usize);
        let problem = random_quadratic(n, m, seed);
        let w = Iterate::new(random_vector(&mut rng, n, 3.0), random_vector(&mut rng, m, 3.0));
        let lambda_k = random_vector(&mut rng, m, 3.0);

        let penalty_ctx = MethodContext::new(DVector::zeros(m), 0.0, omega_tilde, nu).unwrap();
        let r = residual(&problem, &penalty_ctx, &w).unwrap();
        let r_ref = penalty_residual_reference(&problem, omega_tilde, &w);
        prop_assert!(r.iter().zip(r_ref.iter()).all(|(a, b)| a == b));
        let m_val = merit(&problem, &penalty_ctx, &w).unwrap();
        prop_assert_eq!(m_val, penalty_merit_reference(&problem, omega_tilde, nu, &w));

        let alm_ctx = MethodContext::new(lambda_k.clone(), 0.0, omega_tilde, nu).unwrap();
        let r = residual(&problem, &alm_ctx, &w).unwrap();
        let r_ref = alm_residual_reference(&problem, &lambda_k, omega_tilde, &w);
        prop_assert!(r.iter().zip(r_ref.iter()).all(|(a, b)| a == b));
        let m_val = merit(&problem, &alm_ctx, &w).unwrap();
        prop_assert_eq!(m_val, alm_merit_reference(&problem, &lambda_k, omega_tilde, nu, &w));
    }
}

/// Analytic merit directional derivatives agree with central differences at
/// seeded random states, for all three context variants, on every catalog
/// problem.
#[test]
fn merit_directional_derivative_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for name in ["QUAD1", "ROSEN-CIRCLE", "LSQ-OVER", "RANDQP"] {
        let problem = builtin_problem(name).unwrap().problem;
        let (n, m) = (problem.n(), problem.m());
        for state in 0..50 {
            let omega_tilde = 10f64.powf(rng.random_range(-3.0..=0.0));
            let nu = rng.random_range(0.5..=2.0);
            let omega = match state % 3 {
                0 => 0.0,
                _ => 10f64.powf(rng.random_range(-3.0..=-1.0)),
            };
            let lambda_k = if state % 3 == 0 {
                DVector::zeros(m)
            } else {
                random_vector(&mut rng, m, 2.0)
            };
            let ctx = MethodContext::new(lambda_k, omega, omega_tilde, nu).unwrap();
            let w = Iterate::new(random_vector(&mut rng, n, 1.5), random_vector(&mut rng, m, 1.5));
            let mut dw = Iterate::new(random_vector(&mut rng, n, 1.0), random_vector(&mut rng, m, 1.0));
            let norm = (dw.x.norm_squared() + dw.lambda_tilde.norm_squared()).sqrt();
            if norm < 1e-12 {
                continue;
            }
            dw.x /= norm;
            dw.lambda_tilde /= norm;

            let analytic = merit_directional_derivative(&problem, &ctx, &w, &dw).unwrap();
            let h = f64::EPSILON.cbrt() * (1.0 + w.x.norm() + w.lambda_tilde.norm());
            let plus = Iterate::new(&w.x + h * &dw.x, &w.lambda_tilde + h * &dw.lambda_tilde);
            let minus = Iterate::new(&w.x - h * &dw.x, &w.lambda_tilde - h * &dw.lambda_tilde);
            let fd = (merit(&problem, &ctx, &plus).unwrap()
                - merit(&problem, &ctx, &minus).unwrap())
                / (2.0 * h);
            let rel = (fd - analytic).abs() / analytic.abs().max(1e-10);
            assert!(
                rel <= 1e-5,
                "{name} state {state}: analytic {analytic:.12e} vs fd {fd:.12e} (rel {rel:.3e})"
            );
        }
    }
}

/// A vanishing unified residual reproduces the stationarity of the ALM
/// subproblem (omega = 0) and of the merit problem (omega > 0, multiplier at
/// its fixed point), on QUAD1 closed forms.
#[test]
fn residual_roots_match_closed_form_stationary_points() {
    let problem = builtin_problem("QUAD1").unwrap().problem;
    let omega_tilde = 0.1;

    // ALM subproblem at lambda_k: x̂ = (λ ω̃ + 1)/(1 + ω̃), λ̃ = -c(x̂)/ω̃.
    for lambda_k in [0.0, 0.4, 1.3] {
        let x_hat = (lambda_k * omega_tilde + 1.0) / (1.0 + omega_tilde);
        let lt = -(x_hat - 1.0) / omega_tilde;
        let ctx = MethodContext::new(DVector::from_element(1, lambda_k), 0.0, omega_tilde, 1.0)
            .unwrap();
        let w = Iterate::new(DVector::from_element(1, x_hat), DVector::from_element(1, lt));
        let r = residual(&problem, &ctx, &w).unwrap();
        assert!(r.norm() <= 1e-14, "ALM residual at closed form: {}", r.norm());

        // Stationarity of Psi_k: grad f - grad c·λ_k + (1/ω̃)·grad c·c = 0.
        let grad_psi = x_hat - lambda_k + (x_hat - 1.0) / omega_tilde;
        assert!(grad_psi.abs() <= 1e-14);
    }

    // Merit problem: x*(ω) = 1/(1+ω) with λ_k = (1-x*)/ω and λ̃ = 0.
    for omega in [1e-2, 1e-4] {
        let x_star = 1.0 / (1.0 + omega);
        let lambda_star = (1.0 - x_star) / omega;
        let ctx =
            MethodContext::new(DVector::from_element(1, lambda_star), omega, omega_tilde, 1.0)
                .unwrap();
        let w = Iterate::new(DVector::from_element(1, x_star), DVector::from_element(1, 0.0));
        let r = residual(&problem, &ctx, &w).unwrap();
        assert!(r.norm() <= 1e-12, "merit residual at closed form: {}", r.norm());

        let grad_phi = x_star + (x_star - 1.0) / omega;
        assert!(grad_phi.abs() <= 1e-12);
    }
}

/// Newton directions after regularization descend for the merit function on
/// random states of the random quadratic family.
#[test]
fn regularized_newton_steps_are_descent_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..100 {
        let n = rng.random_range(1..=5usize);
        let m = rng.random_range(1..=3usize);
        let problem = random_quadratic(n, m, 1000 + trial);
        let omega = if trial % 2 == 0 { 0.0 } else { 0.05 };
        let lambda_k = if trial % 2 == 0 {
            DVector::zeros(m)
        } else {
            random_vector(&mut rng, m, 1.0)
        };
        let ctx = MethodContext::new(lambda_k, omega, 0.1, 1.0).unwrap();
        let w = Iterate::new(random_vector(&mut rng, n, 2.0), random_vector(&mut rng, m, 2.0));
        let r = residual(&problem, &ctx, &w).unwrap();
        if r.norm() <= 1e-10 {
            continue;
        }
        let (dw, _) = newton_step(&problem, &ctx, &w).unwrap();
        let slope = merit_directional_derivative(&problem, &ctx, &w, &dw).unwrap();
        assert!(slope < 0.0, "trial {trial}: slope {slope}");
    }
}

/// Penalty and modified ALM agree with each other and with closed-form merit
/// solutions.
#[test]
fn cross_method_agreement_on_known_merit_solutions() {
    for name in ["QUAD1", "ROSEN-CIRCLE", "LSQ-OVER"] {
        let entry = builtin_problem(name).unwrap();
        let solution = entry.merit_solution.clone().unwrap();
        for omega in [1e-2, 1e-4] {
            let x_star = solution(omega);

            let mut penalty = SolverConfig::new(Method::Penalty);
            penalty.omega = omega;
            let rp = run_from(&entry.problem, entry.problem.initial_point().clone(), &penalty)
                .unwrap();
            assert_eq!(rp.status, RunStatus::Solved, "{name} penalty omega={omega}");

            // theta_lambda must exceed the accepted-phase metric contraction,
            // which the omega_tilde floor caps near 1/2 for conflicting
            // constraints; 0.7 covers every catalog problem.
            let mut malm_cfg = SolverConfig::new(Method::Malm);
            malm_cfg.omega = omega;
            malm_cfg.theta_lambda = 0.7;
            malm_cfg.allow_omega_increase = false;
            let rm = run_from(&entry.problem, entry.problem.initial_point().clone(), &malm_cfg)
                .unwrap();
            assert_eq!(rm.status, RunStatus::Solved, "{name} malm omega={omega}");

            for i in 0..entry.problem.n() {
                assert!(
                    (rp.x_final[i] - x_star[i]).abs() <= 1e-6,
                    "{name} penalty omega={omega}: x[{i}] = {} vs {}",
                    rp.x_final[i],
                    x_star[i]
                );
                assert!(
                    (rm.x_final[i] - x_star[i]).abs() <= 1e-6,
                    "{name} malm omega={omega}: x[{i}] = {} vs {}",
                    rm.x_final[i],
                    x_star[i]
                );
                assert!(
                    (rp.x_final[i] - rm.x_final[i]).abs() <= 1e-6,
                    "{name} omega={omega}: methods disagree at x[{i}]"
                );
            }
        }
    }
}

/// Rejected outer iterations shrink omega_tilde by exactly theta_omega until
/// the floor, and the penalty driver never grows a multiplier (its acceptance
/// metric column equals the constraint norm).
#[test]
fn outer_loop_bookkeeping() {
    let entry = builtin_problem("QUAD1").unwrap();

    let mut config = SolverConfig::new(Method::Malm);
    config.theta_lambda = 0.01; // force rejections
    config.max_outer = 15;
    let report = run_from(&entry.problem, entry.problem.initial_point().clone(), &config).unwrap();
    let floor = config.omega.max(config.omega_tilde_min);
    for pair in report.outer_trace.windows(2) {
        if pair[1].branch == Branch::Reject && pair[0].branch == Branch::Reject {
            let expected = (config.theta_omega * pair[0].omega_tilde).max(floor);
            assert_eq!(pair[1].omega_tilde, expected);
        }
    }
    let last_k = report.outer_trace.last().unwrap().k;
    assert_eq!(report.outer_trace.len(), last_k);

    let mut penalty = SolverConfig::new(Method::Penalty);
    penalty.omega = 1e-4;
    let report = run_from(&entry.problem, entry.problem.initial_point().clone(), &penalty).unwrap();
    assert_eq!(report.status, RunStatus::Solved);
    for row in &report.outer_trace {
        assert_eq!(row.acceptance_metric, row.norm_c);
    }
    // The final multiplier is the substituted variable, approximately
    // -c(x)/omega at the last stage.
    let c = entry.problem.c(&report.x_final).unwrap();
    let expected = -c[0] / 1e-4;
    assert!((report.lambda_final[0] - expected).abs() <= 1e-4 * expected.abs().max(1.0));
}

/// The merit function is coercive in the multiplier block whenever omega > 0.
#[test]
fn merit_coercive_in_lambda_for_positive_omega() {
    let problem = builtin_problem("LSQ-OVER").unwrap().problem;
    let ctx = MethodContext::new(DVector::from_vec(vec![0.3, -0.2]), 0.05, 0.1, 1.5).unwrap();
    let x = DVector::from_element(1, 0.7);
    let dir = DVector::from_vec(vec![1.0, -2.0]);
    let mut previous = f64::NEG_INFINITY;
    for t in [1.0, 1e1, 1e2, 1e3, 1e4, 1e5] {
        let w = Iterate::new(x.clone(), t * &dir);
        let value = merit(&problem, &ctx, &w).unwrap();
        assert!(value > previous, "merit not growing at t = {t}");
        previous = value;
    }
}

/// The assembled KKT matrix of a regularized step is bitwise symmetric, via
/// the public assembly path.
#[test]
fn assembled_systems_are_bitwise_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..50 {
        let n = rng.random_range(1..=5usize);
        let m = rng.random_range(1..=4usize);
        let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..=1.0));
        let h = DMatrix::from_fn(n, n, |i, j| (raw[(i, j)] + raw[(j, i)]) / 2.0);
        let j = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..=1.0));
        let delta = 10f64.powf(rng.random_range(-4.0..=0.0));
        let system = malm::kkt::assemble(&h, &j, delta).unwrap();
        let k = system.matrix();
        for r in 0..k.nrows() {
            for c in 0..r {
                assert_eq!(k[(r, c)].to_bits(), k[(c, r)].to_bits(), "trial {trial}");
            }
        }
    }
}
