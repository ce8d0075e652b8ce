//! Built-in test problems with known solutions.
//!
//! The catalog carries, per problem, closed-form solutions where they exist:
//! the minimizer `x*(ω)` of the merit function `f + 1/(2ω)·‖c‖²` and the
//! primal-dual solution of the constrained problem. These are the oracles the
//! test suites check the solvers against.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::problem::Problem;

/// Closed-form merit-problem solution as a map `ω -> x*(ω)`.
pub type MeritSolution = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// A catalog problem plus whatever closed-form solutions are known for it.
#[derive(Clone)]
pub struct CatalogEntry {
    pub problem: Problem,
    /// `x*(ω)` minimizing `f + 1/(2ω)·‖c‖²`, when known in closed form.
    pub merit_solution: Option<MeritSolution>,
    /// `(x*, λ*)` of `min f s.t. c = 0`, when the constrained problem is
    /// feasible and the solution is known.
    pub constrained_solution: Option<(DVector<f64>, DVector<f64>)>,
}

/// Names accepted by [`builtin_problem`]. `RANDQP` is the seed-0 member of
/// the random family; see [`random_quadratic`] for other seeds and sizes.
pub const CATALOG_NAMES: &[&str] = &["QUAD1", "ROSEN-CIRCLE", "LSQ-OVER", "RANDQP"];

/// Looks up a built-in problem by name.
pub fn builtin_problem(name: &str) -> Result<CatalogEntry> {
    match name {
        "QUAD1" => Ok(quad1()),
        "ROSEN-CIRCLE" => Ok(rosen_circle()),
        "LSQ-OVER" => Ok(lsq_over()),
        "RANDQP" => Ok(CatalogEntry {
            problem: random_quadratic(4, 2, 0),
            merit_solution: None,
            constrained_solution: None,
        }),
        other => Err(Error::UnknownProblem(other.to_string())),
    }
}

/// `f = x²/2`, `c = x - 1` in one variable.
///
/// Merit solution `x*(ω) = 1/(1+ω)`; constrained solution `(x*, λ*) = (1, 1)`.
fn quad1() -> CatalogEntry {
    let problem = Problem::builder("QUAD1", 1, 1)
        .objective(|x| 0.5 * x[0] * x[0])
        .constraints(|x| DVector::from_element(1, x[0] - 1.0))
        .gradient(|x| DVector::from_element(1, x[0]))
        .constraint_jacobian(|_| DMatrix::from_element(1, 1, 1.0))
        .lagrangian_hessian(|_, _| DMatrix::from_element(1, 1, 1.0))
        .initial_point(DVector::from_element(1, 0.0))
        .build()
        .expect("QUAD1 definition");
    CatalogEntry {
        problem,
        merit_solution: Some(Arc::new(|omega| {
            DVector::from_element(1, 1.0 / (1.0 + omega))
        })),
        constrained_solution: Some((
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
        )),
    }
}

/// Rosenbrock objective with the circle constraint `x₁² + x₂² = 2`.
///
/// The unconstrained minimum `(1, 1)` lies on the circle, so the constrained
/// solution is `((1, 1), 0)` and `(1, 1)` also minimizes the merit function
/// for every ω.
fn rosen_circle() -> CatalogEntry {
    let problem = Problem::builder("ROSEN-CIRCLE", 2, 1)
        .objective(|x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
        .constraints(|x| DVector::from_element(1, x[0] * x[0] + x[1] * x[1] - 2.0))
        .gradient(|x| {
            DVector::from_vec(vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ])
        })
        .constraint_jacobian(|x| DMatrix::from_column_slice(2, 1, &[2.0 * x[0], 2.0 * x[1]]))
        .lagrangian_hessian(|x, y| {
            let h11 = 2.0 - 400.0 * x[1] + 1200.0 * x[0] * x[0];
            DMatrix::from_row_slice(
                2,
                2,
                &[
                    h11 - 2.0 * y[0],
                    -400.0 * x[0],
                    -400.0 * x[0],
                    200.0 - 2.0 * y[0],
                ],
            )
        })
        // The classic (-1.2, 1) start lies in the basin of a spurious
        // penalized stationary point near (-1, 1); the default start stays in
        // the basin of the solution. Tests that want the hard start pass it
        // explicitly.
        .initial_point(DVector::from_vec(vec![0.0, 0.0]))
        .build()
        .expect("ROSEN-CIRCLE definition");
    CatalogEntry {
        problem,
        merit_solution: Some(Arc::new(|_| DVector::from_vec(vec![1.0, 1.0]))),
        constrained_solution: Some((
            DVector::from_vec(vec![1.0, 1.0]),
            DVector::from_element(1, 0.0),
        )),
    }
}

/// Over-determined least-squares: `f = 0`, `c = (x - 1, x - 2)` with
/// `n = 1 < m = 2`.
///
/// The constraints conflict, so the constrained problem is infeasible, but
/// the merit solution is `x* = 1.5` for every ω (the `1/(2ω)` scale does not
/// move the argmin of `(x-1)² + (x-2)²`).
fn lsq_over() -> CatalogEntry {
    let problem = Problem::builder("LSQ-OVER", 1, 2)
        .objective(|_| 0.0)
        .constraints(|x| DVector::from_vec(vec![x[0] - 1.0, x[0] - 2.0]))
        .gradient(|_| DVector::from_element(1, 0.0))
        .constraint_jacobian(|_| DMatrix::from_row_slice(1, 2, &[1.0, 1.0]))
        .lagrangian_hessian(|_, _| DMatrix::from_element(1, 1, 0.0))
        .initial_point(DVector::from_element(1, 0.0))
        .build()
        .expect("LSQ-OVER definition");
    CatalogEntry {
        problem,
        merit_solution: Some(Arc::new(|_| DVector::from_element(1, 1.5))),
        constrained_solution: None,
    }
}

/// Seeded random member of the quadratic family
/// `f = ½xᵀQx + gᵀx`, `c = Aᵀx - b` with entries drawn from `[-1, 1]`.
///
/// `Q` is symmetric but not necessarily definite. For `m <= n` the matrix `A`
/// is resampled until it has full column rank (smallest singular value above
/// `1e-2`); for `m > n` no rank condition is imposed.
pub fn random_quadratic(n: usize, m: usize, seed: u64) -> Problem {
    assert!(n >= 1 && m >= 1, "random_quadratic needs n >= 1, m >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let r = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..=1.0));
    let q = DMatrix::from_fn(n, n, |i, j| (r[(i, j)] + r[(j, i)]) / 2.0);
    let g = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));

    let a = loop {
        let a = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..=1.0));
        if m > n {
            break a;
        }
        let smallest = a
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .fold(f64::INFINITY, |acc, s| acc.min(*s));
        if smallest > 1e-2 {
            break a;
        }
    };
    let b = DVector::from_fn(m, |_, _| rng.random_range(-1.0..=1.0));

    let name = format!("RANDQP-n{n}-m{m}-s{seed}");
    let (qf, gf, af, bf) = (q.clone(), g.clone(), a.clone(), b.clone());
    let (qg, ag) = (q.clone(), a.clone());
    let qh = q;
    Problem::builder(name, n, m)
        .objective(move |x| 0.5 * (x.transpose() * &qf * x)[(0, 0)] + gf.dot(x))
        .constraints(move |x| af.transpose() * x - &bf)
        .gradient(move |x| &qg * x + &g)
        .constraint_jacobian(move |_| ag.clone())
        .lagrangian_hessian(move |_, _| qh.clone())
        .initial_point(DVector::zeros(n))
        .build()
        .expect("random quadratic definition")
}
