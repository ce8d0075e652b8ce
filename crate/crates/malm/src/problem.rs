//! Evaluable optimization problems.
//!
//! A [`Problem`] bundles an objective `f: R^n -> R`, equality constraints
//! `c: R^n -> R^m` and (optionally) their derivatives. Missing derivatives
//! fall back to finite differences, so the Newton-based solvers remain usable
//! on problems defined by function values alone. `m > n` is allowed; nothing
//! here assumes the constraints are satisfiable.
//!
//! Conventions:
//! * the constraint Jacobian is stored as the `n x m` matrix whose *columns*
//!   are the constraint gradients, matching the `∇c(x)` blocks of the KKT
//!   systems assembled in [`crate::kkt`];
//! * the Lagrangian is `L(x, y) = f(x) - yᵀ c(x)`;
//! * all evaluator outputs are checked for dimension and finiteness.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type HessianFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// An equality-constrained problem `min f(x) s.t. c(x) = 0`, or the data of
/// the corresponding quadratic-penalty merit problem.
///
/// Evaluators must be pure: repeated evaluation at the same point within one
/// process run must return identical values. They may be called concurrently
/// from several threads.
#[derive(Clone)]
pub struct Problem {
    name: String,
    n: usize,
    m: usize,
    objective: ScalarFn,
    constraints: VectorFn,
    gradient: Option<VectorFn>,
    constraint_jacobian: Option<MatrixFn>,
    lagrangian_hessian: Option<HessianFn>,
    initial_point: DVector<f64>,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("analytic_gradients", &self.has_analytic_gradients())
            .field("analytic_hessian", &self.has_analytic_hessian())
            .finish()
    }
}

impl Problem {
    /// Starts building a problem with primal dimension `n` and constraint
    /// dimension `m`.
    pub fn builder(name: impl Into<String>, n: usize, m: usize) -> ProblemBuilder {
        ProblemBuilder {
            name: name.into(),
            n,
            m,
            objective: None,
            constraints: None,
            gradient: None,
            constraint_jacobian: None,
            lagrangian_hessian: None,
            initial_point: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Primal dimension `n`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Constraint dimension `m`.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn has_analytic_gradients(&self) -> bool {
        self.gradient.is_some() && self.constraint_jacobian.is_some()
    }

    pub fn has_analytic_hessian(&self) -> bool {
        self.lagrangian_hessian.is_some()
    }

    /// Default starting point used by the drivers when no explicit start is
    /// given.
    pub fn initial_point(&self) -> &DVector<f64> {
        &self.initial_point
    }

    fn check_x(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                context: "primal point x",
                expected: self.n,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn check_y(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.m {
            return Err(Error::DimensionMismatch {
                context: "multiplier y",
                expected: self.m,
                actual: y.len(),
            });
        }
        Ok(())
    }

    /// Objective value `f(x)`.
    pub fn f(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_x(x)?;
        let v = (self.objective)(x);
        if !v.is_finite() {
            return Err(Error::NonFiniteEvaluation { what: "f(x)" });
        }
        Ok(v)
    }

    /// Constraint values `c(x)`.
    pub fn c(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_x(x)?;
        let v = (self.constraints)(x);
        if v.len() != self.m {
            return Err(Error::DimensionMismatch {
                context: "c(x)",
                expected: self.m,
                actual: v.len(),
            });
        }
        if v.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFiniteEvaluation { what: "c(x)" });
        }
        Ok(v)
    }

    /// Objective gradient `∇f(x)`, analytic when available, otherwise a
    /// central finite difference.
    pub fn grad_f(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_x(x)?;
        match &self.gradient {
            Some(g) => {
                let v = g(x);
                if v.len() != self.n {
                    return Err(Error::DimensionMismatch {
                        context: "grad f(x)",
                        expected: self.n,
                        actual: v.len(),
                    });
                }
                if v.iter().any(|e| !e.is_finite()) {
                    return Err(Error::NonFiniteEvaluation { what: "grad f(x)" });
                }
                Ok(v)
            }
            None => fd_gradient(self, x),
        }
    }

    /// Constraint Jacobian `∇c(x)` as an `n x m` matrix (gradients as
    /// columns), analytic when available.
    pub fn jac_c(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_x(x)?;
        match &self.constraint_jacobian {
            Some(j) => {
                let v = j(x);
                if v.nrows() != self.n || v.ncols() != self.m {
                    return Err(Error::DimensionMismatch {
                        context: "grad c(x) rows*cols",
                        expected: self.n * self.m,
                        actual: v.nrows() * v.ncols(),
                    });
                }
                if v.iter().any(|e| !e.is_finite()) {
                    return Err(Error::NonFiniteEvaluation { what: "grad c(x)" });
                }
                Ok(v)
            }
            None => fd_jacobian(self, x),
        }
    }

    /// Hessian of the Lagrangian `∇²ₓₓ L(x, y)` with `L = f - yᵀc`.
    ///
    /// The result is symmetrized as `(H + Hᵀ)/2`, so callers always see a
    /// bitwise-symmetric matrix. Without an analytic evaluator the Hessian is
    /// approximated by forward-differencing the (possibly finite-difference)
    /// Lagrangian gradient.
    pub fn hess_lagrangian(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_x(x)?;
        self.check_y(y)?;
        let h = match &self.lagrangian_hessian {
            Some(hf) => {
                let v = hf(x, y);
                if v.nrows() != self.n || v.ncols() != self.n {
                    return Err(Error::DimensionMismatch {
                        context: "hess L(x, y)",
                        expected: self.n * self.n,
                        actual: v.nrows() * v.ncols(),
                    });
                }
                if v.iter().any(|e| !e.is_finite()) {
                    return Err(Error::NonFiniteEvaluation { what: "hess L(x, y)" });
                }
                v
            }
            None => fd_lagrangian_hessian(self, x, y)?,
        };
        Ok(symmetrize(&h))
    }
}

/// `L(x, y) = f(x) - yᵀ c(x)`.
pub fn eval_lagrangian(problem: &Problem, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    problem.check_y(y)?;
    let f = problem.f(x)?;
    let c = problem.c(x)?;
    Ok(f - y.dot(&c))
}

/// Gradient of the Lagrangian in `x`: `∇f(x) - ∇c(x)·y`.
pub fn grad_lagrangian(problem: &Problem, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    problem.check_y(y)?;
    let g = problem.grad_f(x)?;
    let j = problem.jac_c(x)?;
    Ok(g - j * y)
}

fn fd_step(xi: f64) -> f64 {
    f64::EPSILON.sqrt() * (1.0 + xi.abs())
}

/// Central-difference approximation of `∇f` with step `hᵢ = √ε·(1+|xᵢ|)`.
pub fn fd_gradient(problem: &Problem, x: &DVector<f64>) -> Result<DVector<f64>> {
    problem.check_x(x)?;
    let n = problem.n();
    let mut g = DVector::zeros(n);
    let mut xp = x.clone();
    for i in 0..n {
        let h = fd_step(x[i]);
        xp[i] = x[i] + h;
        let fp = problem.f(&xp)?;
        xp[i] = x[i] - h;
        let fm = problem.f(&xp)?;
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Central-difference approximation of the constraint Jacobian, one row of
/// `∇c(x)` per primal coordinate (same step rule as [`fd_gradient`]).
pub fn fd_jacobian(problem: &Problem, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    problem.check_x(x)?;
    let (n, m) = (problem.n(), problem.m());
    let mut jac = DMatrix::zeros(n, m);
    let mut xp = x.clone();
    for i in 0..n {
        let h = fd_step(x[i]);
        xp[i] = x[i] + h;
        let cp = problem.c(&xp)?;
        xp[i] = x[i] - h;
        let cm = problem.c(&xp)?;
        xp[i] = x[i];
        for j in 0..m {
            jac[(i, j)] = (cp[j] - cm[j]) / (2.0 * h);
        }
    }
    Ok(jac)
}

fn fd_lagrangian_hessian(
    problem: &Problem,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = problem.n();
    let g0 = grad_lagrangian(problem, x, y)?;
    // When the gradient is itself a finite difference its noise is ~eps^(2/3),
    // so the forward step must grow to eps^(1/3) to keep the quotient stable.
    let base = if problem.has_analytic_gradients() {
        f64::EPSILON.sqrt()
    } else {
        f64::EPSILON.cbrt()
    };
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for i in 0..n {
        let step = base * (1.0 + x[i].abs());
        xp[i] = x[i] + step;
        let gi = grad_lagrangian(problem, &xp, y)?;
        xp[i] = x[i];
        for r in 0..n {
            h[(r, i)] = (gi[r] - g0[r]) / step;
        }
    }
    Ok(h)
}

fn symmetrize(h: &DMatrix<f64>) -> DMatrix<f64> {
    let n = h.nrows();
    DMatrix::from_fn(n, n, |i, j| (h[(i, j)] + h[(j, i)]) / 2.0)
}

/// Builder for [`Problem`]; `objective` and `constraints` are mandatory.
pub struct ProblemBuilder {
    name: String,
    n: usize,
    m: usize,
    objective: Option<ScalarFn>,
    constraints: Option<VectorFn>,
    gradient: Option<VectorFn>,
    constraint_jacobian: Option<MatrixFn>,
    lagrangian_hessian: Option<HessianFn>,
    initial_point: Option<DVector<f64>>,
}

impl ProblemBuilder {
    pub fn objective(mut self, f: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        self.objective = Some(Arc::new(f));
        self
    }

    pub fn constraints(
        mut self,
        c: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.constraints = Some(Arc::new(c));
        self
    }

    pub fn gradient(
        mut self,
        g: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(g));
        self
    }

    /// Constraint Jacobian as `n x m` with constraint gradients as columns.
    pub fn constraint_jacobian(
        mut self,
        j: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.constraint_jacobian = Some(Arc::new(j));
        self
    }

    /// Hessian `∇²ₓₓ L(x, y)` of the Lagrangian `f - yᵀc`.
    pub fn lagrangian_hessian(
        mut self,
        h: impl Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.lagrangian_hessian = Some(Arc::new(h));
        self
    }

    pub fn initial_point(mut self, x0: DVector<f64>) -> Self {
        self.initial_point = Some(x0);
        self
    }

    pub fn build(self) -> Result<Problem> {
        if self.n < 1 || self.m < 1 {
            return Err(Error::InvalidConfig(format!(
                "problem dimensions must satisfy n >= 1 and m >= 1 (got n={}, m={})",
                self.n, self.m
            )));
        }
        let objective = self
            .objective
            .ok_or_else(|| Error::InvalidConfig("problem has no objective".into()))?;
        let constraints = self
            .constraints
            .ok_or_else(|| Error::InvalidConfig("problem has no constraints".into()))?;
        let initial_point = match self.initial_point {
            Some(x0) => {
                if x0.len() != self.n {
                    return Err(Error::DimensionMismatch {
                        context: "initial point",
                        expected: self.n,
                        actual: x0.len(),
                    });
                }
                x0
            }
            None => DVector::zeros(self.n),
        };
        Ok(Problem {
            name: self.name,
            n: self.n,
            m: self.m,
            objective,
            constraints,
            gradient: self.gradient,
            constraint_jacobian: self.constraint_jacobian,
            lagrangian_hessian: self.lagrangian_hessian,
            initial_point,
        })
    }
}
