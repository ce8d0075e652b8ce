//! Solvers for equality-constrained programs and unconstrained merit
//! problems with large quadratic penalty terms.
//!
//! Three outer methods share one inertia-controlled Newton engine:
//!
//! * the **penalty method**, which continues the penalty parameter `ω̃` down
//!   to the merit parameter `ω`;
//! * the **augmented Lagrangian method** (ALM), which keeps `ω̃` moderate and
//!   updates a multiplier estimate instead;
//! * a **modified ALM** that extends the ALM to merit problems with `ω > 0`
//!   by lifting the penalty term with auxiliary variables and eliminating
//!   them, which turns the `(2,2)` block of the Newton system into
//!   `-(ω+ω̃)·I` and adds `ω`-terms to the residual and merit. At `ω = 0` it
//!   coincides with the ALM.
//!
//! The crate is organized along those lines: [`problem`] defines evaluable
//! problems and the test-problem [`catalog`], [`kkt`] owns the saddle-point
//! linear algebra, [`subproblem`] the inner Newton iteration, and [`driver`]
//! the outer loops.
//!
//! ```
//! use malm::{builtin_problem, run, Method, RunStatus, SolverConfig};
//!
//! let entry = builtin_problem("QUAD1").unwrap();
//! let mut config = SolverConfig::new(Method::Malm);
//! config.omega = 1e-2;
//! let report = run(&entry.problem, &config).unwrap();
//! assert_eq!(report.status, RunStatus::Solved);
//! assert!((report.x_final[0] - 1.0 / 1.01).abs() <= 1e-6);
//! ```

pub mod catalog;
pub mod driver;
pub mod error;
pub mod kkt;
pub mod problem;
pub mod subproblem;

pub use catalog::{builtin_problem, random_quadratic, CatalogEntry, CATALOG_NAMES};
pub use driver::{
    acceptance_metric, acceptance_test, kkt_residual_norm, merit_gradient_norm, run, run_from,
    run_malm, run_penalty, termination_test, Branch, Method, OuterRecord, OuterState, RunReport,
    RunStatus, SolverConfig,
};
pub use error::{Error, Result};
pub use problem::{eval_lagrangian, fd_gradient, fd_jacobian, grad_lagrangian, Problem};
pub use subproblem::{
    line_search, merit, merit_directional_derivative, merit_gradient, merit_with_form,
    newton_step, residual, soc_step, solve_subproblem, EvalCounts, InnerResult, InnerStatus,
    Iterate, MeritForm, MethodContext, MethodVariant, NewtonOptions, SocScaling,
};
