//! Line-search Newton solver for the penalty subproblems.
//!
//! All three outer methods solve subproblems of the same shape. With an outer
//! multiplier estimate `λ_k`, merit parameter `ω >= 0` and penalty parameter
//! `ω̃ > 0`, the root function is
//!
//! ```text
//! F(x, λ̃) = ( ∇f(x) - ∇c(x)·(λ_k + λ̃) ,  c(x) + ω·λ_k + (ω+ω̃)·λ̃ )
//! ```
//!
//! which reduces to the plain penalty root function for `ω = 0, λ_k = 0` and
//! to the augmented-Lagrangian root function for `ω = 0`. Steps come from the
//! saddle-point system assembled in [`crate::kkt`] with `(2,2)`-block
//! `-(ω+ω̃)·I`; globalization uses an Armijo backtracking line search on the
//! merit function
//!
//! ```text
//! M(x, λ̃) = f(x) + ω/2·‖λ̃‖² - λ_kᵀc(x)
//!          + 1/(2ω̃)·‖c + ω·λ_k + ω·λ̃‖² + ν/(2ω̃)·‖c + ω·λ_k + (ω+ω̃)·λ̃‖²
//! ```
//!
//! with optional second-order corrections when the full step degrades the
//! penalized constraint residual.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kkt::{self, Inertia};
use crate::problem::Problem;

/// Parameters fixing which subproblem variant is being solved.
#[derive(Debug, Clone)]
pub struct MethodContext {
    /// Outer multiplier estimate `λ_k` (zero vector for the penalty method).
    pub lambda_k: DVector<f64>,
    /// Merit-problem parameter `ω >= 0` (zero for penalty method and ALM).
    pub omega: f64,
    /// Current penalty parameter `ω̃ > 0`.
    pub omega_tilde: f64,
    /// Merit weight `ν > 0`.
    pub nu: f64,
}

/// Which of the three methods a context belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodVariant {
    Penalty,
    Alm,
    ModifiedAlm,
}

impl MethodContext {
    pub fn new(lambda_k: DVector<f64>, omega: f64, omega_tilde: f64, nu: f64) -> Result<Self> {
        if !(omega_tilde.is_finite() && omega_tilde > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "omega_tilde must be > 0 (got {omega_tilde})"
            )));
        }
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::InvalidConfig(format!("nu must be > 0 (got {nu})")));
        }
        if !(omega.is_finite() && omega >= 0.0) {
            return Err(Error::InvalidConfig(format!("omega must be >= 0 (got {omega})")));
        }
        Ok(MethodContext {
            lambda_k,
            omega,
            omega_tilde,
            nu,
        })
    }

    /// Magnitude of the `(2,2)` block of the Newton system.
    pub fn delta(&self) -> f64 {
        self.omega + self.omega_tilde
    }

    pub fn variant(&self) -> MethodVariant {
        if self.omega > 0.0 {
            MethodVariant::ModifiedAlm
        } else if self.lambda_k.iter().all(|&v| v == 0.0) {
            MethodVariant::Penalty
        } else {
            MethodVariant::Alm
        }
    }
}

/// Primal-dual inner iterate `w = (x, λ̃)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub x: DVector<f64>,
    pub lambda_tilde: DVector<f64>,
}

impl Iterate {
    pub fn new(x: DVector<f64>, lambda_tilde: DVector<f64>) -> Self {
        Iterate { x, lambda_tilde }
    }

    fn stepped(&self, dw: &Iterate, alpha: f64) -> Iterate {
        Iterate {
            x: &self.x + alpha * &dw.x,
            lambda_tilde: &self.lambda_tilde + alpha * &dw.lambda_tilde,
        }
    }
}

/// Logical evaluator invocations. Finite-difference fallbacks count as one
/// invocation of the derivative they approximate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub objective: u64,
    pub constraints: u64,
    pub gradient: u64,
    pub jacobian: u64,
    pub hessian: u64,
}

impl EvalCounts {
    pub fn total(&self) -> u64 {
        self.objective + self.constraints + self.gradient + self.jacobian + self.hessian
    }

    pub fn add(&mut self, other: &EvalCounts) {
        self.objective += other.objective;
        self.constraints += other.constraints;
        self.gradient += other.gradient;
        self.jacobian += other.jacobian;
        self.hessian += other.hessian;
    }
}

/// Which merit function the line search uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeritForm {
    /// The unified merit above; specializes consistently to all three
    /// methods.
    #[default]
    Unified,
    /// The historical penalty-method merit with first penalty term weighted
    /// `ω̃/2` instead of `1/(2ω̃)`. Only valid for penalty contexts
    /// (`ω = 0`, `λ_k = 0`); kept as a switch because the two weightings
    /// disagree and only the `1/(2ω̃)` form is consistent with the ALM and
    /// modified-ALM merits.
    PenaltyLiteral,
}

/// Scaling matrix used in second-order correction systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SocScaling {
    #[default]
    Identity,
    /// Current regularized Hessian approximation, shifted to positive
    /// definiteness with the same schedule used for inertia correction.
    RegularizedHessian,
}

/// Tuning knobs of the inner Newton iteration.
#[derive(Debug, Clone)]
pub struct NewtonOptions {
    /// Convergence threshold on `‖F(w)‖₂`.
    pub tol: f64,
    pub max_iterations: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c1: f64,
    /// Multiplicative backtracking factor in (0, 1).
    pub backtrack_factor: f64,
    /// Hard floor on the step length; below it the line search fails.
    pub alpha_min: f64,
    /// Enable second-order corrections on rejected full steps.
    pub soc: bool,
    /// Maximum number of chained corrections per rejected full step.
    pub max_soc_steps: usize,
    pub soc_scaling: SocScaling,
    pub merit_form: MeritForm,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-8,
            max_iterations: 200,
            armijo_c1: 1e-4,
            backtrack_factor: 0.5,
            alpha_min: 1e-12,
            soc: true,
            max_soc_steps: 2,
            soc_scaling: SocScaling::Identity,
            merit_form: MeritForm::Unified,
        }
    }
}

/// Inner termination status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
    RegularizationFailure,
}

/// One accepted (or attempted) Newton step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub alpha: f64,
    pub merit_value: f64,
    pub soc_steps: usize,
    /// Largest relative backward error over this step's SOC solves, if any.
    pub soc_backward_error: Option<f64>,
    /// Inertia-correcting shift used for the step.
    pub xi: f64,
    pub inertia: Inertia,
    /// `‖F(w)‖₂` at the point the step started from.
    pub residual_norm: f64,
    pub condition_estimate: f64,
}

/// Outcome of one subproblem solve.
#[derive(Debug, Clone)]
pub struct InnerResult {
    pub iterate: Iterate,
    pub residual_norm: f64,
    pub iterations: usize,
    pub step_history: Vec<StepRecord>,
    pub status: InnerStatus,
    pub evals: EvalCounts,
}

/// Problem data evaluated at one primal point.
struct PointData {
    f: f64,
    c: DVector<f64>,
    grad_f: DVector<f64>,
    jac_c: DMatrix<f64>,
}

fn eval_point(problem: &Problem, x: &DVector<f64>, counts: &mut EvalCounts) -> Result<PointData> {
    counts.objective += 1;
    let f = problem.f(x)?;
    counts.constraints += 1;
    let c = problem.c(x)?;
    counts.gradient += 1;
    let grad_f = problem.grad_f(x)?;
    counts.jacobian += 1;
    let jac_c = problem.jac_c(x)?;
    Ok(PointData { f, c, grad_f, jac_c })
}

fn check_iterate(problem: &Problem, ctx: &MethodContext, w: &Iterate) -> Result<()> {
    if w.x.len() != problem.n() {
        return Err(Error::DimensionMismatch {
            context: "iterate x",
            expected: problem.n(),
            actual: w.x.len(),
        });
    }
    if w.lambda_tilde.len() != problem.m() {
        return Err(Error::DimensionMismatch {
            context: "iterate lambda_tilde",
            expected: problem.m(),
            actual: w.lambda_tilde.len(),
        });
    }
    if ctx.lambda_k.len() != problem.m() {
        return Err(Error::DimensionMismatch {
            context: "context lambda_k",
            expected: problem.m(),
            actual: ctx.lambda_k.len(),
        });
    }
    Ok(())
}

/// `c + ω·λ_k + ω·λ̃` — argument of the first penalty term of the merit.
fn p_vector(c: &DVector<f64>, ctx: &MethodContext, lt: &DVector<f64>) -> DVector<f64> {
    c + ctx.omega * &ctx.lambda_k + ctx.omega * lt
}

/// `c + ω·λ_k + (ω+ω̃)·λ̃` — second residual block and second penalty term.
fn q_vector(c: &DVector<f64>, ctx: &MethodContext, lt: &DVector<f64>) -> DVector<f64> {
    c + ctx.omega * &ctx.lambda_k + (ctx.omega + ctx.omega_tilde) * lt
}

fn residual_from_parts(
    point: &PointData,
    ctx: &MethodContext,
    lt: &DVector<f64>,
) -> DVector<f64> {
    let multiplier = &ctx.lambda_k + lt;
    let top = &point.grad_f - &point.jac_c * multiplier;
    let bottom = q_vector(&point.c, ctx, lt);
    let mut out = DVector::zeros(top.len() + bottom.len());
    out.rows_mut(0, top.len()).copy_from(&top);
    out.rows_mut(top.len(), bottom.len()).copy_from(&bottom);
    out
}

fn merit_from_parts(f: f64, c: &DVector<f64>, ctx: &MethodContext, lt: &DVector<f64>, form: MeritForm) -> f64 {
    match form {
        MeritForm::Unified => {
            let p = p_vector(c, ctx, lt);
            let q = q_vector(c, ctx, lt);
            f + ctx.omega / 2.0 * lt.norm_squared() - ctx.lambda_k.dot(c)
                + p.norm_squared() / (2.0 * ctx.omega_tilde)
                + ctx.nu * q.norm_squared() / (2.0 * ctx.omega_tilde)
        }
        MeritForm::PenaltyLiteral => {
            let q = c + ctx.omega_tilde * lt;
            f + ctx.omega_tilde / 2.0 * c.norm_squared()
                + ctx.nu * q.norm_squared() / (2.0 * ctx.omega_tilde)
        }
    }
}

fn merit_gradient_from_parts(
    point: &PointData,
    ctx: &MethodContext,
    lt: &DVector<f64>,
    form: MeritForm,
) -> (DVector<f64>, DVector<f64>) {
    let ot = ctx.omega_tilde;
    match form {
        MeritForm::Unified => {
            let p = p_vector(&point.c, ctx, lt);
            let q = q_vector(&point.c, ctx, lt);
            let gx = &point.grad_f - &point.jac_c * &ctx.lambda_k
                + &point.jac_c * &p / ot
                + ctx.nu * (&point.jac_c * &q) / ot;
            let gl = ctx.omega * lt
                + (ctx.omega / ot) * &p
                + (ctx.nu * (ctx.omega + ot) / ot) * &q;
            (gx, gl)
        }
        MeritForm::PenaltyLiteral => {
            let q = &point.c + ot * lt;
            let gx = &point.grad_f
                + ot * (&point.jac_c * &point.c)
                + (ctx.nu / ot) * (&point.jac_c * &q);
            let gl = ctx.nu * q;
            (gx, gl)
        }
    }
}

fn validate_merit_form(ctx: &MethodContext, form: MeritForm) -> Result<()> {
    if form == MeritForm::PenaltyLiteral && ctx.variant() != MethodVariant::Penalty {
        return Err(Error::InvalidConfig(
            "the literal penalty merit is only defined for penalty contexts (omega = 0, lambda_k = 0)"
                .into(),
        ));
    }
    Ok(())
}

/// Unified root function `F(x, λ̃)` as an `(n+m)`-vector.
pub fn residual(problem: &Problem, ctx: &MethodContext, w: &Iterate) -> Result<DVector<f64>> {
    check_iterate(problem, ctx, w)?;
    let mut counts = EvalCounts::default();
    let point = eval_point(problem, &w.x, &mut counts)?;
    Ok(residual_from_parts(&point, ctx, &w.lambda_tilde))
}

/// Unified merit function `M(x, λ̃)`.
pub fn merit(problem: &Problem, ctx: &MethodContext, w: &Iterate) -> Result<f64> {
    merit_with_form(problem, ctx, w, MeritForm::Unified)
}

/// Merit function in the requested form (see [`MeritForm`]).
pub fn merit_with_form(
    problem: &Problem,
    ctx: &MethodContext,
    w: &Iterate,
    form: MeritForm,
) -> Result<f64> {
    check_iterate(problem, ctx, w)?;
    validate_merit_form(ctx, form)?;
    let f = problem.f(&w.x)?;
    let c = problem.c(&w.x)?;
    let value = merit_from_parts(f, &c, ctx, &w.lambda_tilde, form);
    if !value.is_finite() {
        return Err(Error::NonFiniteEvaluation { what: "merit" });
    }
    Ok(value)
}

/// Gradient of the merit function, split into its `x` and `λ̃` blocks.
pub fn merit_gradient(
    problem: &Problem,
    ctx: &MethodContext,
    w: &Iterate,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_iterate(problem, ctx, w)?;
    let mut counts = EvalCounts::default();
    let point = eval_point(problem, &w.x, &mut counts)?;
    Ok(merit_gradient_from_parts(&point, ctx, &w.lambda_tilde, MeritForm::Unified))
}

/// Directional derivative of the merit at `w` along `dw`.
pub fn merit_directional_derivative(
    problem: &Problem,
    ctx: &MethodContext,
    w: &Iterate,
    dw: &Iterate,
) -> Result<f64> {
    let (gx, gl) = merit_gradient(problem, ctx, w)?;
    Ok(gx.dot(&dw.x) + gl.dot(&dw.lambda_tilde))
}

/// Diagnostics attached to a Newton step.
#[derive(Debug, Clone)]
pub struct NewtonDiagnostics {
    pub xi: f64,
    pub inertia: Inertia,
    pub residual_norm: f64,
    pub condition_estimate: f64,
}

/// Computes one Newton step: regularizes `∇²ₓₓL(x, λ_k+λ̃)`, assembles the
/// saddle system with `(2,2)`-block `-(ω+ω̃)I` and solves against the
/// negative residual.
pub fn newton_step(
    problem: &Problem,
    ctx: &MethodContext,
    w: &Iterate,
) -> Result<(Iterate, NewtonDiagnostics)> {
    check_iterate(problem, ctx, w)?;
    let mut counts = EvalCounts::default();
    let point = eval_point(problem, &w.x, &mut counts)?;
    let multiplier = &ctx.lambda_k + &w.lambda_tilde;
    let hess = problem.hess_lagrangian(&w.x, &multiplier)?;
    let reg = kkt::regularize(&hess, &point.jac_c, ctx.delta())?;
    let f_res = residual_from_parts(&point, ctx, &w.lambda_tilde);
    let (dx, dl) = reg.factorization.solve(&(-&f_res))?;
    Ok((
        Iterate::new(dx, dl),
        NewtonDiagnostics {
            xi: reg.xi,
            inertia: reg.inertia,
            residual_norm: f_res.norm(),
            condition_estimate: reg.factorization.condition_estimate(),
        },
    ))
}

/// A second-order correction increment and the relative backward error of
/// the linear solve that produced it.
#[derive(Debug, Clone)]
pub struct SocCorrection {
    pub dx: DVector<f64>,
    pub dlambda_tilde: DVector<f64>,
    pub backward_error: f64,
}

fn soc_solve(
    s: &DMatrix<f64>,
    jac_base: &DMatrix<f64>,
    ctx: &MethodContext,
    c_trial: &DVector<f64>,
    lambda_trial: &DVector<f64>,
) -> Result<Option<SocCorrection>> {
    let q = q_vector(c_trial, ctx, lambda_trial);
    let n = s.nrows();
    let m = jac_base.ncols();
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(n, m).copy_from(&(-&q));
    let system = kkt::assemble(s, jac_base, ctx.delta())?;
    let (fact, _) = match kkt::factor_with_inertia(&system) {
        Ok(ok) => ok,
        Err(Error::SingularSystem) => return Ok(None),
        Err(e) => return Err(e),
    };
    let (dx, dl) = fact.solve(&rhs)?;
    let mut sol = DVector::zeros(n + m);
    sol.rows_mut(0, n).copy_from(&dx);
    sol.rows_mut(n, m).copy_from(&(-&dl));
    let res = system.matrix() * &sol - &rhs;
    let scale: f64 = system
        .matrix()
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let backward_error = res.norm() / (scale * sol.norm() + rhs.norm()).max(f64::MIN_POSITIVE);
    Ok(Some(SocCorrection {
        dx,
        dlambda_tilde: dl,
        backward_error,
    }))
}

/// Second-order correction at a trial point.
///
/// Solves `[[S, ∇c(x)], [∇c(x)ᵀ, -(ω+ω̃)I]]·(Δx, -Δλ̃) = -(0, q(trial))`
/// with `∇c` evaluated at the step's base point `base_x` and
/// `q = c(x_trial) + ω·λ_k + (ω+ω̃)·λ̃_trial`. Returns `None` when the
/// correction system is singular (the correction is skipped, not an error).
pub fn soc_step(
    problem: &Problem,
    ctx: &MethodContext,
    base_x: &DVector<f64>,
    trial: &Iterate,
    s: &DMatrix<f64>,
) -> Result<Option<SocCorrection>> {
    check_iterate(problem, ctx, trial)?;
    let jac_base = problem.jac_c(base_x)?;
    let c_trial = problem.c(&trial.x)?;
    soc_solve(s, &jac_base, ctx, &c_trial, &trial.lambda_tilde)
}

/// Result of a line search from `w` along `dw`.
#[derive(Debug, Clone)]
pub struct LineSearchOutcome {
    pub alpha: f64,
    pub soc_steps: usize,
    pub accepted: Iterate,
    pub merit_value: f64,
    pub max_soc_backward_error: Option<f64>,
}

/// Backtracking Armijo line search with optional second-order corrections.
///
/// `dw` must be a descent direction for the merit function at `w`; a
/// non-negative directional derivative is a usage error.
pub fn line_search(
    problem: &Problem,
    ctx: &MethodContext,
    w: &Iterate,
    dw: &Iterate,
    opts: &NewtonOptions,
) -> Result<LineSearchOutcome> {
    check_iterate(problem, ctx, w)?;
    validate_merit_form(ctx, opts.merit_form)?;
    let mut counts = EvalCounts::default();
    let point = eval_point(problem, &w.x, &mut counts)?;
    let s = match opts.soc_scaling {
        SocScaling::Identity => DMatrix::identity(problem.n(), problem.n()),
        SocScaling::RegularizedHessian => {
            let multiplier = &ctx.lambda_k + &w.lambda_tilde;
            let hess = problem.hess_lagrangian(&w.x, &multiplier)?;
            spd_projection(&hess)
        }
    };
    line_search_engine(problem, ctx, w, &point, dw, &s, opts, &mut counts)
}

/// Shifts a symmetric matrix to positive definiteness using the same shift
/// schedule as the inertia correction, verified by Cholesky.
fn spd_projection(h: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = h
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    for xi in kkt::shift_schedule(norm) {
        let mut b = h.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += xi;
        }
        if nalgebra::Cholesky::new(b.clone()).is_some() {
            return b;
        }
    }
    DMatrix::identity(h.nrows(), h.ncols())
}

/// Evaluates the merit at a trial point, mapping non-finite evaluations to
/// `None` so the line search treats them as rejected trials.
fn try_merit_at(
    problem: &Problem,
    ctx: &MethodContext,
    trial: &Iterate,
    form: MeritForm,
    counts: &mut EvalCounts,
) -> Result<Option<(f64, DVector<f64>)>> {
    counts.objective += 1;
    let f = match problem.f(&trial.x) {
        Ok(v) => v,
        Err(Error::NonFiniteEvaluation { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    counts.constraints += 1;
    let c = match problem.c(&trial.x) {
        Ok(v) => v,
        Err(Error::NonFiniteEvaluation { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let m = merit_from_parts(f, &c, ctx, &trial.lambda_tilde, form);
    if m.is_finite() {
        Ok(Some((m, c)))
    } else {
        Ok(None)
    }
}

#[allow(clippy::too_many_arguments)]
fn line_search_engine(
    problem: &Problem,
    ctx: &MethodContext,
    w: &Iterate,
    point: &PointData,
    dw: &Iterate,
    soc_scaling: &DMatrix<f64>,
    opts: &NewtonOptions,
    counts: &mut EvalCounts,
) -> Result<LineSearchOutcome> {
    let (gx, gl) = merit_gradient_from_parts(point, ctx, &w.lambda_tilde, opts.merit_form);
    let slope = gx.dot(&dw.x) + gl.dot(&dw.lambda_tilde);
    if !(slope.is_finite() && slope < 0.0) {
        return Err(Error::NotDescentDirection { slope });
    }
    let m0 = merit_from_parts(point.f, &point.c, ctx, &w.lambda_tilde, opts.merit_form);
    // Near a minimizer the true decrease falls below the rounding noise of
    // the merit itself; the epsilon-level slack keeps the test meaningful
    // there instead of rejecting every step.
    let slack = 10.0 * f64::EPSILON * (1.0 + m0.abs());
    let armijo = |m_trial: f64, alpha: f64| m_trial <= m0 + opts.armijo_c1 * alpha * slope + slack;
    let q0_norm = q_vector(&point.c, ctx, &w.lambda_tilde).norm();

    let mut alpha = 1.0;
    loop {
        let trial = w.stepped(dw, alpha);
        let trial_eval = try_merit_at(problem, ctx, &trial, opts.merit_form, counts)?;
        if let Some((m_trial, c_trial)) = &trial_eval {
            if armijo(*m_trial, alpha) {
                return Ok(LineSearchOutcome {
                    alpha,
                    soc_steps: 0,
                    accepted: trial,
                    merit_value: *m_trial,
                    max_soc_backward_error: None,
                });
            }
            // Second-order corrections: only on the rejected full step, and
            // only when that step increased the penalized constraint
            // residual.
            if alpha == 1.0 && opts.soc && opts.max_soc_steps > 0 {
                let q_trial = q_vector(c_trial, ctx, &trial.lambda_tilde).norm();
                if q_trial > q0_norm {
                    if let Some(outcome) = soc_attempts(
                        problem,
                        ctx,
                        point,
                        &trial,
                        c_trial,
                        soc_scaling,
                        opts,
                        m0 + opts.armijo_c1 * slope + slack,
                        counts,
                    )? {
                        return Ok(outcome);
                    }
                }
            }
        }
        alpha *= opts.backtrack_factor;
        if alpha < opts.alpha_min {
            return Err(Error::LineSearchFailed {
                floor: opts.alpha_min,
            });
        }
    }
}

/// Chained SOC attempts from the rejected full step. `acceptance_bound` is
/// the full-step Armijo threshold; a corrected point passing it is returned,
/// otherwise `None` and the caller backtracks.
#[allow(clippy::too_many_arguments)]
fn soc_attempts(
    problem: &Problem,
    ctx: &MethodContext,
    point: &PointData,
    full_step: &Iterate,
    c_full: &DVector<f64>,
    soc_scaling: &DMatrix<f64>,
    opts: &NewtonOptions,
    acceptance_bound: f64,
    counts: &mut EvalCounts,
) -> Result<Option<LineSearchOutcome>> {
    let mut current = full_step.clone();
    let mut c_current = c_full.clone();
    let mut max_backward_error: f64 = 0.0;
    for step in 1..=opts.max_soc_steps {
        let correction = match soc_solve(
            soc_scaling,
            &point.jac_c,
            ctx,
            &c_current,
            &current.lambda_tilde,
        )? {
            Some(corr) => corr,
            None => break,
        };
        max_backward_error = max_backward_error.max(correction.backward_error);
        current = Iterate {
            x: &current.x + &correction.dx,
            lambda_tilde: &current.lambda_tilde + &correction.dlambda_tilde,
        };
        match try_merit_at(problem, ctx, &current, opts.merit_form, counts)? {
            Some((m_soc, c_soc)) => {
                if m_soc <= acceptance_bound {
                    return Ok(Some(LineSearchOutcome {
                        alpha: 1.0,
                        soc_steps: step,
                        accepted: current,
                        merit_value: m_soc,
                        max_soc_backward_error: Some(max_backward_error),
                    }));
                }
                c_current = c_soc;
            }
            None => break,
        }
    }
    Ok(None)
}

/// Solves one penalty subproblem by damped Newton iteration on `F(w) = 0`.
///
/// Algorithmic failures (line search, regularization, iteration budget) are
/// reported through [`InnerResult::status`]; only usage and evaluation errors
/// are raised as `Err`.
pub fn solve_subproblem(
    problem: &Problem,
    ctx: &MethodContext,
    w0: &Iterate,
    opts: &NewtonOptions,
) -> Result<InnerResult> {
    check_iterate(problem, ctx, w0)?;
    validate_merit_form(ctx, opts.merit_form)?;
    if !(opts.tol.is_finite() && opts.tol > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "inner tolerance must be > 0 (got {})",
            opts.tol
        )));
    }

    let mut counts = EvalCounts::default();
    let mut w = w0.clone();
    let mut history = Vec::new();
    let mut iterations = 0usize;

    loop {
        let point = eval_point(problem, &w.x, &mut counts)?;
        let f_res = residual_from_parts(&point, ctx, &w.lambda_tilde);
        let residual_norm = f_res.norm();
        if !residual_norm.is_finite() {
            return Err(Error::NonFiniteEvaluation { what: "residual" });
        }
        if residual_norm <= opts.tol {
            return Ok(InnerResult {
                iterate: w,
                residual_norm,
                iterations,
                step_history: history,
                status: InnerStatus::Converged,
                evals: counts,
            });
        }
        if iterations >= opts.max_iterations {
            return Ok(InnerResult {
                iterate: w,
                residual_norm,
                iterations,
                step_history: history,
                status: InnerStatus::MaxIterations,
                evals: counts,
            });
        }

        counts.hessian += 1;
        let multiplier = &ctx.lambda_k + &w.lambda_tilde;
        let hess = problem.hess_lagrangian(&w.x, &multiplier)?;
        let reg = match kkt::regularize(&hess, &point.jac_c, ctx.delta()) {
            Ok(reg) => reg,
            Err(Error::RegularizationFailed { .. }) => {
                return Ok(InnerResult {
                    iterate: w,
                    residual_norm,
                    iterations,
                    step_history: history,
                    status: InnerStatus::RegularizationFailure,
                    evals: counts,
                });
            }
            Err(e) => return Err(e),
        };
        let (dx, dl) = reg.factorization.solve(&(-&f_res))?;
        let dw = Iterate::new(dx, dl);

        let s = match opts.soc_scaling {
            SocScaling::Identity => DMatrix::identity(problem.n(), problem.n()),
            SocScaling::RegularizedHessian => spd_projection(&hess),
        };
        match line_search_engine(problem, ctx, &w, &point, &dw, &s, opts, &mut counts) {
            Ok(outcome) => {
                history.push(StepRecord {
                    alpha: outcome.alpha,
                    merit_value: outcome.merit_value,
                    soc_steps: outcome.soc_steps,
                    soc_backward_error: outcome.max_soc_backward_error,
                    xi: reg.xi,
                    inertia: reg.inertia,
                    residual_norm,
                    condition_estimate: reg.factorization.condition_estimate(),
                });
                w = outcome.accepted;
                iterations += 1;
            }
            Err(Error::LineSearchFailed { .. }) | Err(Error::NotDescentDirection { .. }) => {
                return Ok(InnerResult {
                    iterate: w,
                    residual_norm,
                    iterations,
                    step_history: history,
                    status: InnerStatus::LineSearchFailure,
                    evals: counts,
                });
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::builtin_problem;
    use approx::assert_abs_diff_eq;

    fn quad1() -> Problem {
        builtin_problem("QUAD1").unwrap().problem
    }

    fn ctx(lambda_k: &[f64], omega: f64, omega_tilde: f64, nu: f64) -> MethodContext {
        MethodContext::new(
            DVector::from_column_slice(lambda_k),
            omega,
            omega_tilde,
            nu,
        )
        .unwrap()
    }

    fn w(x: &[f64], lt: &[f64]) -> Iterate {
        Iterate::new(DVector::from_column_slice(x), DVector::from_column_slice(lt))
    }

    #[test]
    fn variant_classification() {
        assert_eq!(ctx(&[0.0], 0.0, 0.1, 1.0).variant(), MethodVariant::Penalty);
        assert_eq!(ctx(&[0.5], 0.0, 0.1, 1.0).variant(), MethodVariant::Alm);
        assert_eq!(
            ctx(&[0.5], 0.01, 0.1, 1.0).variant(),
            MethodVariant::ModifiedAlm
        );
    }

    #[test]
    fn residual_values_on_quad1() {
        let p = quad1();
        let r = residual(&p, &ctx(&[0.0], 0.0, 0.1, 1.0), &w(&[0.0], &[0.0])).unwrap();
        assert_eq!(r, DVector::from_vec(vec![0.0, -1.0]));

        let r = residual(
            &p,
            &ctx(&[0.0], 0.0, 0.1, 1.0),
            &w(&[10.0 / 11.0], &[10.0 / 11.0]),
        )
        .unwrap();
        assert!(r.norm() <= 1e-15, "residual at solution: {r}");

        // Merit stationary point of the omega-problem, multiplier at its
        // fixed point: residual vanishes with lambda_tilde = 0.
        let omega = 0.01;
        let lam = 1.0 / (1.0 + omega);
        let r = residual(
            &p,
            &ctx(&[lam], omega, 0.1, 1.0),
            &w(&[1.0 / 1.01], &[0.0]),
        )
        .unwrap();
        assert!(r.norm() <= 1e-15, "residual at merit solution: {r}");
    }

    #[test]
    fn merit_values_on_quad1() {
        let p = quad1();
        let c = ctx(&[0.0], 0.0, 0.1, 1.0);
        let m = merit(&p, &c, &w(&[0.0], &[0.0])).unwrap();
        assert_eq!(m, 10.0);

        let m = merit(&p, &c, &w(&[10.0 / 11.0], &[10.0 / 11.0])).unwrap();
        let expected = (10.0_f64 / 11.0).powi(2) / 2.0 + 5.0 / 121.0;
        assert_abs_diff_eq!(m, expected, epsilon = 1e-15);

        // Feasible point with zero lambda_tilde: merit equals f.
        let rc = builtin_problem("ROSEN-CIRCLE").unwrap().problem;
        let c = ctx(&[0.0], 0.0, 0.1, 1.0);
        let m = merit(&rc, &c, &w(&[1.0, 1.0], &[0.0])).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn literal_penalty_merit_uses_omega_tilde_half_weight() {
        let p = quad1();
        let c = ctx(&[0.0], 0.0, 0.1, 1.0);
        let m = merit_with_form(&p, &c, &w(&[0.0], &[0.0]), MeritForm::PenaltyLiteral).unwrap();
        // (omega_tilde/2)*c^2 + nu/(2 omega_tilde) * (c + omega_tilde*lt)^2
        assert_abs_diff_eq!(m, 0.05 + 5.0, epsilon = 1e-15);

        // Invalid outside penalty contexts.
        let alm_ctx = ctx(&[0.3], 0.0, 0.1, 1.0);
        assert!(matches!(
            merit_with_form(&p, &alm_ctx, &w(&[0.0], &[0.0]), MeritForm::PenaltyLiteral),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn newton_step_matches_hand_solve() {
        let p = quad1();
        let c = ctx(&[0.0], 0.0, 0.1, 1.0);
        let (dw, diag) = newton_step(&p, &c, &w(&[0.0], &[0.0])).unwrap();
        assert_abs_diff_eq!(dw.x[0], 10.0 / 11.0, epsilon = 1e-14);
        assert_abs_diff_eq!(dw.lambda_tilde[0], 10.0 / 11.0, epsilon = 1e-14);
        assert_eq!(diag.xi, 0.0);
        assert_eq!(diag.inertia, Inertia::saddle_target(1, 1));

        // Zero residual gives a zero step.
        let (dw, _) = newton_step(&p, &c, &w(&[10.0 / 11.0], &[10.0 / 11.0])).unwrap();
        assert!(dw.x.norm() <= 1e-14 && dw.lambda_tilde.norm() <= 1e-14);
    }

    #[test]
    fn newton_step_on_overdetermined_problem() {
        let p = builtin_problem("LSQ-OVER").unwrap().problem;
        let c = ctx(&[0.0, 0.0], 0.01, 0.1, 1.0);
        let (dw, diag) = newton_step(&p, &c, &w(&[0.0], &[0.0, 0.0])).unwrap();
        assert!(dw.x[0].is_finite());
        assert_eq!(diag.inertia, Inertia::saddle_target(1, 2));
    }

    #[test]
    fn line_search_accepts_full_newton_step_on_quadratic() {
        let p = quad1();
        let c = ctx(&[0.0], 0.0, 0.1, 1.0);
        let start = w(&[0.0], &[0.0]);
        let (dw, _) = newton_step(&p, &c, &start).unwrap();
        let out = line_search(&p, &c, &start, &dw, &NewtonOptions::default()).unwrap();
        assert_eq!(out.alpha, 1.0);
        assert_eq!(out.soc_steps, 0);
    }

    #[test]
    fn zero_direction_is_usage_error() {
        let p = quad1();
        let c = ctx(&[0.0], 0.0, 0.1, 1.0);
        let err = line_search(
            &p,
            &c,
            &w(&[0.0], &[0.0]),
            &w(&[0.0], &[0.0]),
            &NewtonOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotDescentDirection { .. }));
    }

    #[test]
    fn line_search_satisfies_armijo_far_from_solution() {
        let entry = builtin_problem("ROSEN-CIRCLE").unwrap();
        let p = entry.problem;
        let c = ctx(&[0.0], 0.0, 0.1, 1.0);
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let lt0 = -p.c(&x0).unwrap() / 0.1;
        let start = Iterate::new(x0, lt0);
        let (dw, _) = newton_step(&p, &c, &start).unwrap();
        let slope = merit_directional_derivative(&p, &c, &start, &dw).unwrap();
        assert!(slope < 0.0);
        let opts = NewtonOptions::default();
        let out = line_search(&p, &c, &start, &dw, &opts).unwrap();
        let m0 = merit(&p, &c, &start).unwrap();
        assert!(out.alpha <= 1.0);
        assert!(out.merit_value <= m0 + opts.armijo_c1 * out.alpha * slope);
    }

    #[test]
    fn soc_step_matches_hand_solve() {
        let p = quad1();
        let c = ctx(&[0.0], 0.0, 0.1, 1.0);
        let base = DVector::from_element(1, 0.0);
        let trial = w(&[0.5], &[0.5]);
        let s = DMatrix::identity(1, 1);
        let corr = soc_step(&p, &c, &base, &trial, &s).unwrap().unwrap();
        assert_abs_diff_eq!(corr.dx[0], 0.45 / 1.1, epsilon = 1e-14);
        assert_abs_diff_eq!(corr.dlambda_tilde[0], 0.45 / 1.1, epsilon = 1e-14);
        assert!(corr.backward_error <= 1e-10);
    }

    #[test]
    fn soc_step_is_zero_at_consistent_trial_point() {
        // Trial point already satisfying c + (omega+omega_tilde)*lt = 0.
        let p = quad1();
        let c = ctx(&[0.0], 0.0, 0.1, 1.0);
        let base = DVector::from_element(1, 0.0);
        let trial = w(&[0.5], &[5.0]); // c(0.5) = -0.5, 0.1*5 = 0.5
        let s = DMatrix::identity(1, 1);
        let corr = soc_step(&p, &c, &base, &trial, &s).unwrap().unwrap();
        assert!(corr.dx.norm() <= 1e-14);
        assert!(corr.dlambda_tilde.norm() <= 1e-14);
    }

    #[test]
    fn soc_backward_error_small_on_overdetermined_problem() {
        let p = builtin_problem("LSQ-OVER").unwrap().problem;
        let c = ctx(&[0.0, 0.0], 0.01, 0.1, 1.0);
        let base = DVector::from_element(1, 0.0);
        let trial = w(&[0.7], &[0.3, -0.4]);
        let s = DMatrix::identity(1, 1);
        let corr = soc_step(&p, &c, &base, &trial, &s).unwrap().unwrap();
        assert!(corr.backward_error <= 1e-10);
    }

    #[test]
    fn subproblem_converges_on_quad1_from_paper_initialization() {
        let p = quad1();
        let c = ctx(&[0.0], 0.0, 0.1, 1.0);
        // lambda_tilde_0 = -(1/omega_tilde) * c(x0) = 10 at x0 = 0.
        let start = w(&[0.0], &[10.0]);
        let opts = NewtonOptions {
            tol: 1e-10,
            ..NewtonOptions::default()
        };
        let res = solve_subproblem(&p, &c, &start, &opts).unwrap();
        assert_eq!(res.status, InnerStatus::Converged);
        assert!(res.iterations <= 3, "iterations = {}", res.iterations);
        assert!(res.residual_norm <= 1e-10);
        assert_abs_diff_eq!(res.iterate.x[0], 10.0 / 11.0, epsilon = 1e-9);
        assert_abs_diff_eq!(res.iterate.lambda_tilde[0], 10.0 / 11.0, epsilon = 1e-9);
    }

    #[test]
    fn subproblem_at_solution_converges_in_zero_iterations() {
        let p = quad1();
        let c = ctx(&[0.0], 0.0, 0.1, 1.0);
        let res = solve_subproblem(
            &p,
            &c,
            &w(&[10.0 / 11.0], &[10.0 / 11.0]),
            &NewtonOptions::default(),
        )
        .unwrap();
        assert_eq!(res.status, InnerStatus::Converged);
        assert_eq!(res.iterations, 0);
    }

    #[test]
    fn subproblem_converges_on_rosenbrock_circle() {
        let p = builtin_problem("ROSEN-CIRCLE").unwrap().problem;
        let c = ctx(&[0.0], 0.0, 0.1, 1.0);
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let lt0 = -p.c(&x0).unwrap() / 0.1;
        let start = Iterate::new(x0, lt0);
        let res = solve_subproblem(&p, &c, &start, &NewtonOptions::default()).unwrap();
        assert_eq!(res.status, InnerStatus::Converged);
        assert!(res.residual_norm <= 1e-8);
        assert!(res.iterations <= 200);
    }

    #[test]
    fn soc_fires_on_curved_constraint_with_small_penalty() {
        // Cold start on the far side of the circle with a small penalty
        // parameter: full Newton steps overshoot the curved constraint, the
        // penalized constraint residual grows, and the correction path runs.
        let p = builtin_problem("ROSEN-CIRCLE").unwrap().problem;
        let c = ctx(&[0.0], 0.0, 1e-3, 1.0);
        let x0 = DVector::from_vec(vec![2.0, -2.0]);
        let lt0 = -p.c(&x0).unwrap() / 1e-3;
        let res = solve_subproblem(&p, &c, &Iterate::new(x0, lt0), &NewtonOptions::default())
            .unwrap();
        assert_eq!(res.status, InnerStatus::Converged);
        let soc_total: usize = res.step_history.iter().map(|s| s.soc_steps).sum();
        assert!(soc_total >= 1, "expected at least one correction step");
        for step in &res.step_history {
            if let Some(err) = step.soc_backward_error {
                assert!(err <= 1e-10);
            }
        }
    }

    #[test]
    fn soc_with_hessian_scaling_converges() {
        let p = builtin_problem("ROSEN-CIRCLE").unwrap().problem;
        let c = ctx(&[0.0], 0.0, 1e-3, 1.0);
        let x0 = DVector::from_vec(vec![2.0, -2.0]);
        let lt0 = -p.c(&x0).unwrap() / 1e-3;
        let opts = NewtonOptions {
            soc_scaling: SocScaling::RegularizedHessian,
            ..NewtonOptions::default()
        };
        let res = solve_subproblem(&p, &c, &Iterate::new(x0, lt0), &opts).unwrap();
        assert_eq!(res.status, InnerStatus::Converged);
    }

    #[test]
    fn subproblem_reports_max_iterations_instead_of_raising() {
        let p = quad1();
        let c = ctx(&[0.0], 0.0, 0.1, 1.0);
        let opts = NewtonOptions {
            max_iterations: 0,
            ..NewtonOptions::default()
        };
        let res = solve_subproblem(&p, &c, &w(&[5.0], &[3.0]), &opts).unwrap();
        assert_eq!(res.status, InnerStatus::MaxIterations);
        assert_eq!(res.iterations, 0);
    }

    #[test]
    fn line_search_failure_becomes_a_status() {
        // Test double with an inconsistent "gradient": the merit slope is
        // negative, but the objective jumps up at every positive x, so no
        // step length can satisfy the sufficient decrease test.
        let p = Problem::builder("CLIFF", 1, 1)
            .objective(|x| if x[0] > 0.0 { 1e3 } else { 0.0 })
            .constraints(|_| DVector::from_element(1, 0.5))
            .gradient(|_| DVector::from_element(1, -1.0))
            .constraint_jacobian(|_| DMatrix::from_element(1, 1, 1e-3))
            .lagrangian_hessian(|_, _| DMatrix::from_element(1, 1, 1.0))
            .build()
            .unwrap();
        let c = ctx(&[0.0], 0.0, 0.1, 1.0);
        let res =
            solve_subproblem(&p, &c, &w(&[0.0], &[0.0]), &NewtonOptions::default()).unwrap();
        assert_eq!(res.status, InnerStatus::LineSearchFailure);
    }

    #[test]
    fn merit_grows_along_lambda_ray_when_omega_positive() {
        let p = quad1();
        let c = ctx(&[0.2], 0.05, 0.1, 1.0);
        let x = DVector::from_element(1, 0.4);
        let mut last = f64::NEG_INFINITY;
        let mut growing = true;
        for t in [1.0, 10.0, 100.0, 1e3, 1e4] {
            let m = merit(&p, &c, &Iterate::new(x.clone(), DVector::from_element(1, t))).unwrap();
            if m <= last {
                growing = false;
            }
            last = m;
        }
        assert!(growing, "merit must grow along the lambda_tilde ray");
    }
}
