//! Outer iterations: penalty continuation, the augmented Lagrangian method,
//! and its modification for merit problems with a fixed `ω > 0`.
//!
//! All three drive the inner solver of [`crate::subproblem`] over a sequence
//! of penalty parameters `ω̃_k`:
//!
//! * **penalty**: `ω̃` decreases geometrically until it reaches `ω` exactly;
//!   the multiplier estimate stays zero.
//! * **alm / malm**: a multiplier estimate `λ_k` is updated whenever the
//!   acceptance metric `‖c(x_k) + ω·λ_k + ω·λ̃_k‖₂` has decreased
//!   sufficiently relative to its history; otherwise the driver falls back to
//!   shrinking `ω̃`. `alm` is `malm` with `ω = 0` and the stacked-KKT
//!   termination test; the two share one code path.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::Problem;
use crate::subproblem::{
    solve_subproblem, EvalCounts, InnerResult, InnerStatus, Iterate, MeritForm, MethodContext,
    NewtonOptions, SocScaling,
};

/// Outer method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Penalty,
    Alm,
    Malm,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Penalty => "penalty",
            Method::Alm => "alm",
            Method::Malm => "malm",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "penalty" => Ok(Method::Penalty),
            "alm" => Ok(Method::Alm),
            "malm" => Ok(Method::Malm),
            other => Err(Error::InvalidConfig(format!(
                "unknown method `{other}` (expected penalty, alm or malm)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Configuration of an outer run.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub method: Method,
    /// Merit parameter `ω`. Must be positive for `penalty`, zero for `alm`,
    /// and non-negative for `malm` (zero degenerates to ALM).
    pub omega: f64,
    /// Initial penalty parameter `ω̃₁`.
    pub omega_tilde_init: f64,
    /// Shrink factor applied to `ω̃` on the fallback branch, in (0, 1).
    pub theta_omega: f64,
    /// Required decrease factor of the acceptance metric, in (0, 1).
    pub theta_lambda: f64,
    /// Outer termination tolerance.
    pub tol: f64,
    /// Merit weight `ν`.
    pub nu: f64,
    /// Inner Newton tolerance (defaults to `tol`).
    pub inner_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Grow `ω̃` by `1/√θ_ω` on accepted multiplier updates (capped).
    pub allow_omega_increase: bool,
    /// Lower bound applied to `ω̃` on the fallback branch; the effective
    /// floor is `max(omega, omega_tilde_min)`.
    pub omega_tilde_min: f64,
    /// Cap for the optional `ω̃` increase; `None` means `ω̃₁`.
    pub omega_tilde_cap: Option<f64>,
    /// Enable second-order corrections in the inner line search.
    pub soc: bool,
    pub soc_scaling: SocScaling,
    /// Use the historical `ω̃/2`-weighted penalty merit (penalty method
    /// only); see [`MeritForm::PenaltyLiteral`].
    pub merit_eq6_literal: bool,
}

impl SolverConfig {
    pub fn new(method: Method) -> Self {
        SolverConfig {
            method,
            omega: 0.0,
            omega_tilde_init: 0.1,
            theta_omega: 0.1,
            theta_lambda: 0.1,
            tol: 1e-8,
            nu: 1.0,
            inner_tol: 1e-8,
            max_outer: 100,
            max_inner: 200,
            allow_omega_increase: true,
            omega_tilde_min: 1e-12,
            omega_tilde_cap: None,
            soc: true,
            soc_scaling: SocScaling::Identity,
            merit_eq6_literal: false,
        }
    }

    /// Sets both the outer and inner tolerances.
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self.inner_tol = tol;
        self
    }

    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    fn effective_cap(&self) -> f64 {
        self.omega_tilde_cap.unwrap_or(self.omega_tilde_init)
    }

    fn effective_floor(&self) -> f64 {
        self.omega.max(self.omega_tilde_min)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let in_open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_open_unit(self.theta_omega) {
            return fail(format!("theta_omega must lie in (0,1), got {}", self.theta_omega));
        }
        if !in_open_unit(self.theta_lambda) {
            return fail(format!(
                "theta_lambda must lie in (0,1), got {}",
                self.theta_lambda
            ));
        }
        if !positive(self.tol) {
            return fail(format!("tol must be > 0, got {}", self.tol));
        }
        if !positive(self.inner_tol) {
            return fail(format!("inner_tol must be > 0, got {}", self.inner_tol));
        }
        if !positive(self.nu) {
            return fail(format!("nu must be > 0, got {}", self.nu));
        }
        if self.max_outer == 0 {
            return fail("max_outer must be at least 1".into());
        }
        if !positive(self.omega_tilde_min) {
            return fail(format!(
                "omega_tilde_min must be > 0, got {}",
                self.omega_tilde_min
            ));
        }
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return fail(format!("omega must be finite and >= 0, got {}", self.omega));
        }
        if !positive(self.omega_tilde_init) {
            return fail(format!(
                "omega_tilde_init must be > 0, got {}",
                self.omega_tilde_init
            ));
        }
        if let Some(cap) = self.omega_tilde_cap {
            if !positive(cap) || cap < self.omega_tilde_init {
                return fail(format!(
                    "omega_tilde_cap ({cap}) must not undercut omega_tilde_init ({})",
                    self.omega_tilde_init
                ));
            }
        }
        match self.method {
            Method::Penalty => {
                if self.omega == 0.0 {
                    return fail("the penalty method requires omega > 0, got 0".into());
                }
                // omega_tilde_init == omega is allowed: the continuation then
                // consists of a single stage.
                if self.omega_tilde_init < self.omega {
                    return fail(format!(
                        "the penalty method requires omega_tilde_init >= omega ({} < {})",
                        self.omega_tilde_init, self.omega
                    ));
                }
            }
            Method::Alm => {
                if self.omega != 0.0 {
                    return fail(format!("alm requires omega = 0, got {}", self.omega));
                }
            }
            Method::Malm => {
                if self.omega_tilde_init <= self.omega {
                    return fail(format!(
                        "malm requires omega_tilde_init > omega ({} <= {})",
                        self.omega_tilde_init, self.omega
                    ));
                }
            }
        }
        if self.merit_eq6_literal && self.method != Method::Penalty {
            return fail("merit_eq6_literal only applies to the penalty method".into());
        }
        Ok(())
    }

    fn newton_options(&self) -> NewtonOptions {
        NewtonOptions {
            tol: self.inner_tol,
            max_iterations: self.max_inner,
            soc: self.soc,
            soc_scaling: self.soc_scaling,
            merit_form: if self.merit_eq6_literal {
                MeritForm::PenaltyLiteral
            } else {
                MeritForm::Unified
            },
            ..NewtonOptions::default()
        }
    }
}

/// Which update branch an outer iteration took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Accept,
    Reject,
    Terminal,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Accept => "accept",
            Branch::Reject => "reject",
            Branch::Terminal => "terminal",
        }
    }
}

/// Final status of an outer run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Solved,
    MaxOuter,
    InnerFailure,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Solved => "solved",
            RunStatus::MaxOuter => "max_outer",
            RunStatus::InnerFailure => "inner_failure",
        }
    }
}

/// One outer iteration of the trace.
#[derive(Debug, Clone)]
pub struct OuterRecord {
    pub k: usize,
    pub omega_tilde: f64,
    pub inner_iterations: usize,
    pub norm_c: f64,
    pub acceptance_metric: f64,
    pub residual_norm: f64,
    pub f_value: f64,
    pub branch: Branch,
    pub cumulative_evaluations: u64,
    /// Second-order correction steps taken across this iteration's inner
    /// solve.
    pub soc_steps: usize,
    /// Largest relative backward error over this iteration's SOC solves.
    pub max_soc_backward_error: Option<f64>,
}

/// Mutable outer state; exposed for the acceptance/termination test helpers.
#[derive(Debug, Clone)]
pub struct OuterState {
    pub k: usize,
    pub lambda_k: DVector<f64>,
    pub omega_tilde_k: f64,
    /// Acceptance metrics of the completed outer iterations, in order.
    pub metric_history: Vec<f64>,
    pub w: Iterate,
}

/// Result of an outer run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub method: Method,
    pub status: RunStatus,
    pub x_final: DVector<f64>,
    pub lambda_final: DVector<f64>,
    pub outer_trace: Vec<OuterRecord>,
    pub total_inner_iterations: usize,
    pub evals: EvalCounts,
    /// Inner residual norm at the final iterate.
    pub final_residual_norm: f64,
    pub final_norm_c: f64,
}

/// Acceptance metric `‖c(x) + ω·λ_k + ω·λ̃‖₂`; reduces to `‖c(x)‖₂` when
/// `ω = 0`.
pub fn acceptance_metric(
    problem: &Problem,
    omega: f64,
    lambda_k: &DVector<f64>,
    w: &Iterate,
) -> Result<f64> {
    let c = problem.c(&w.x)?;
    Ok((c + omega * lambda_k + omega * &w.lambda_tilde).norm())
}

/// Sufficient-decrease test on the acceptance metric: `metric_k <= θ_λ ·
/// min(history)`. With an empty history (the first outer iteration) any
/// finite metric is accepted.
pub fn acceptance_test(state: &OuterState, metric_k: f64, config: &SolverConfig) -> bool {
    if !metric_k.is_finite() {
        return false;
    }
    match state
        .metric_history
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
    {
        None => true,
        Some(min) => metric_k <= config.theta_lambda * min,
    }
}

fn soc_summary(inner: &InnerResult) -> (usize, Option<f64>) {
    let steps = inner.step_history.iter().map(|s| s.soc_steps).sum();
    let max_err = inner
        .step_history
        .iter()
        .filter_map(|s| s.soc_backward_error)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    (steps, max_err)
}

fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0f64, |acc, s| acc.max(*s))
}

/// Outer termination test.
///
/// For `malm`: `max{ω + ω̃_k, ‖∇c(x_k)‖₂} · ‖λ̃_k‖₂ <= tol`. For `alm` the
/// stacked KKT residual `‖(∇f - ∇c·λ_k, c)‖₂ <= tol` with the pre-update
/// multiplier. Both additionally require the inner solve to have converged,
/// which the caller reports through `inner_converged`.
pub fn termination_test(
    problem: &Problem,
    state: &OuterState,
    w_k: &Iterate,
    config: &SolverConfig,
    inner_converged: bool,
) -> Result<bool> {
    if !inner_converged {
        return Ok(false);
    }
    match config.method {
        Method::Malm => {
            let jac = problem.jac_c(&w_k.x)?;
            let scale = (config.omega + state.omega_tilde_k).max(spectral_norm(&jac));
            Ok(scale * w_k.lambda_tilde.norm() <= config.tol)
        }
        Method::Alm => {
            let g = problem.grad_f(&w_k.x)?;
            let jac = problem.jac_c(&w_k.x)?;
            let c = problem.c(&w_k.x)?;
            let top = g - jac * &state.lambda_k;
            let norm_sq = top.norm_squared() + c.norm_squared();
            Ok(norm_sq.sqrt() <= config.tol)
        }
        Method::Penalty => Err(Error::InvalidConfig(
            "termination_test applies to alm/malm; the penalty method terminates on omega_tilde == omega"
                .into(),
        )),
    }
}

/// `‖∇f(x) + (1/ω)·∇c(x)·c(x)‖₂` — the raw merit-problem gradient. This is
/// the ill-scaled form; prefer [`kkt_residual_norm`] for certification.
pub fn merit_gradient_norm(problem: &Problem, omega: f64, x: &DVector<f64>) -> Result<f64> {
    if !(omega.is_finite() && omega > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "merit_gradient_norm requires omega > 0, got {omega}"
        )));
    }
    let g = problem.grad_f(x)?;
    let jac = problem.jac_c(x)?;
    let c = problem.c(x)?;
    Ok((g + jac * c / omega).norm())
}

/// KKT residual `‖(∇f(x) - ∇c(x)·λ, c(x) + ω·λ)‖₂` of the merit problem in
/// its well-scaled multiplier form. At `ω = 0` this is the KKT residual of
/// the constrained problem.
pub fn kkt_residual_norm(
    problem: &Problem,
    omega: f64,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<f64> {
    let g = problem.grad_f(x)?;
    let jac = problem.jac_c(x)?;
    let c = problem.c(x)?;
    let top = g - jac * lambda;
    let bottom = c + omega * lambda;
    Ok((top.norm_squared() + bottom.norm_squared()).sqrt())
}

/// Runs the configured method from the problem's default initial point.
pub fn run(problem: &Problem, config: &SolverConfig) -> Result<RunReport> {
    run_from(problem, problem.initial_point().clone(), config)
}

/// Runs the configured method from `x0`.
pub fn run_from(problem: &Problem, x0: DVector<f64>, config: &SolverConfig) -> Result<RunReport> {
    config.validate()?;
    match config.method {
        Method::Penalty => run_penalty_from(problem, x0, config),
        Method::Alm | Method::Malm => run_malm_from(problem, x0, config),
    }
}

/// Penalty continuation (`method = penalty`), from the default start.
pub fn run_penalty(problem: &Problem, config: &SolverConfig) -> Result<RunReport> {
    run_penalty_from(problem, problem.initial_point().clone(), config)
}

fn run_penalty_from(
    problem: &Problem,
    x0: DVector<f64>,
    config: &SolverConfig,
) -> Result<RunReport> {
    config.validate()?;
    if config.method != Method::Penalty {
        return Err(Error::InvalidConfig(
            "run_penalty requires method = penalty".into(),
        ));
    }
    let m = problem.m();
    let opts = config.newton_options();
    let mut evals = EvalCounts::default();
    let mut trace = Vec::new();
    let mut total_inner = 0usize;
    let mut omega_tilde = config.omega_tilde_init;
    let mut x = x0;
    let mut lambda_tilde = DVector::zeros(m);
    let mut residual_norm = f64::INFINITY;
    let mut norm_c = f64::INFINITY;

    for k in 1..=config.max_outer {
        // Fresh substituted-variable start for every stage.
        evals.constraints += 1;
        let c_start = problem.c(&x)?;
        let lt0 = -&c_start / omega_tilde;
        let ctx = MethodContext::new(DVector::zeros(m), 0.0, omega_tilde, config.nu)?;
        let inner = solve_subproblem(problem, &ctx, &Iterate::new(x.clone(), lt0), &opts)?;
        evals.add(&inner.evals);
        total_inner += inner.iterations;
        x = inner.iterate.x.clone();
        lambda_tilde = inner.iterate.lambda_tilde.clone();
        residual_norm = inner.residual_norm;

        evals.constraints += 1;
        let c_k = problem.c(&x)?;
        evals.objective += 1;
        let f_k = problem.f(&x)?;
        norm_c = c_k.norm();
        let terminal = omega_tilde == config.omega;
        let failed = inner.status != InnerStatus::Converged;
        let (soc_steps, max_soc_backward_error) = soc_summary(&inner);
        trace.push(OuterRecord {
            k,
            omega_tilde,
            inner_iterations: inner.iterations,
            norm_c,
            // With omega = 0 and lambda_k = 0 the acceptance metric is just
            // the constraint norm.
            acceptance_metric: norm_c,
            residual_norm,
            f_value: f_k,
            branch: if terminal || failed {
                Branch::Terminal
            } else {
                Branch::Reject
            },
            cumulative_evaluations: evals.total(),
            soc_steps,
            max_soc_backward_error,
        });
        if failed {
            return Ok(RunReport {
                method: config.method,
                status: RunStatus::InnerFailure,
                x_final: x,
                lambda_final: lambda_tilde,
                outer_trace: trace,
                total_inner_iterations: total_inner,
                evals,
                final_residual_norm: residual_norm,
                final_norm_c: norm_c,
            });
        }
        if terminal {
            return Ok(RunReport {
                method: config.method,
                status: RunStatus::Solved,
                x_final: x,
                lambda_final: lambda_tilde,
                outer_trace: trace,
                total_inner_iterations: total_inner,
                evals,
                final_residual_norm: residual_norm,
                final_norm_c: norm_c,
            });
        }
        omega_tilde = (config.theta_omega * omega_tilde).max(config.omega);
    }

    Ok(RunReport {
        method: config.method,
        status: RunStatus::MaxOuter,
        x_final: x,
        lambda_final: lambda_tilde,
        outer_trace: trace,
        total_inner_iterations: total_inner,
        evals,
        final_residual_norm: residual_norm,
        final_norm_c: norm_c,
    })
}

/// ALM / modified ALM (`method = alm | malm`), from the default start.
pub fn run_malm(problem: &Problem, config: &SolverConfig) -> Result<RunReport> {
    run_malm_from(problem, problem.initial_point().clone(), config)
}

fn run_malm_from(problem: &Problem, x0: DVector<f64>, config: &SolverConfig) -> Result<RunReport> {
    config.validate()?;
    if config.method == Method::Penalty {
        return Err(Error::InvalidConfig(
            "run_malm requires method = alm or malm".into(),
        ));
    }
    let m = problem.m();
    let opts = config.newton_options();
    let mut evals = EvalCounts::default();
    let mut trace = Vec::new();
    let mut total_inner = 0usize;
    let floor = config.effective_floor();
    let cap = config.effective_cap();

    evals.constraints += 1;
    let c0 = problem.c(&x0)?;
    let mut state = OuterState {
        k: 0,
        lambda_k: DVector::zeros(m),
        omega_tilde_k: config.omega_tilde_init,
        metric_history: Vec::new(),
        w: Iterate::new(x0, -&c0 / config.omega_tilde_init),
    };

    for k in 1..=config.max_outer {
        state.k = k;
        let ctx = MethodContext::new(
            state.lambda_k.clone(),
            config.omega,
            state.omega_tilde_k,
            config.nu,
        )?;
        let inner = solve_subproblem(problem, &ctx, &state.w, &opts)?;
        evals.add(&inner.evals);
        total_inner += inner.iterations;
        state.w = inner.iterate.clone();

        evals.constraints += 1;
        let c_k = problem.c(&state.w.x)?;
        evals.objective += 1;
        let f_k = problem.f(&state.w.x)?;
        let norm_c = c_k.norm();
        let metric_k =
            (&c_k + config.omega * &state.lambda_k + config.omega * &state.w.lambda_tilde).norm();

        let inner_converged = inner.status == InnerStatus::Converged;
        let (soc_steps, max_soc_backward_error) = soc_summary(&inner);
        if !inner_converged {
            trace.push(OuterRecord {
                k,
                omega_tilde: state.omega_tilde_k,
                inner_iterations: inner.iterations,
                norm_c,
                acceptance_metric: metric_k,
                residual_norm: inner.residual_norm,
                f_value: f_k,
                branch: Branch::Terminal,
                cumulative_evaluations: evals.total(),
                soc_steps,
                max_soc_backward_error,
            });
            return Ok(RunReport {
                method: config.method,
                status: RunStatus::InnerFailure,
                x_final: state.w.x.clone(),
                lambda_final: &state.lambda_k + &state.w.lambda_tilde,
                outer_trace: trace,
                total_inner_iterations: total_inner,
                evals,
                final_residual_norm: inner.residual_norm,
                final_norm_c: norm_c,
            });
        }

        // Termination precedes the update branch.
        match config.method {
            Method::Malm => evals.jacobian += 1,
            Method::Alm => {
                evals.gradient += 1;
                evals.jacobian += 1;
                evals.constraints += 1;
            }
            Method::Penalty => unreachable!(),
        }
        let terminate = termination_test(problem, &state, &state.w, config, inner_converged)?;
        if terminate {
            state.metric_history.push(metric_k);
            trace.push(OuterRecord {
                k,
                omega_tilde: state.omega_tilde_k,
                inner_iterations: inner.iterations,
                norm_c,
                acceptance_metric: metric_k,
                residual_norm: inner.residual_norm,
                f_value: f_k,
                branch: Branch::Terminal,
                cumulative_evaluations: evals.total(),
                soc_steps,
                max_soc_backward_error,
            });
            return Ok(RunReport {
                method: config.method,
                status: RunStatus::Solved,
                x_final: state.w.x.clone(),
                lambda_final: &state.lambda_k + &state.w.lambda_tilde,
                outer_trace: trace,
                total_inner_iterations: total_inner,
                evals,
                final_residual_norm: inner.residual_norm,
                final_norm_c: norm_c,
            });
        }

        let accept = acceptance_test(&state, metric_k, config);
        state.metric_history.push(metric_k);
        if accept {
            state.lambda_k += &state.w.lambda_tilde;
            if config.allow_omega_increase {
                state.omega_tilde_k =
                    (state.omega_tilde_k / config.theta_omega.sqrt()).min(cap);
            }
            // Reset the substituted-variable warm start after a multiplier
            // update.
            state.w.lambda_tilde = DVector::zeros(m);
        } else {
            state.omega_tilde_k = (config.theta_omega * state.omega_tilde_k).max(floor);
        }
        trace.push(OuterRecord {
            k,
            omega_tilde: ctx.omega_tilde,
            inner_iterations: inner.iterations,
            norm_c,
            acceptance_metric: metric_k,
            residual_norm: inner.residual_norm,
            f_value: f_k,
            branch: if accept { Branch::Accept } else { Branch::Reject },
            cumulative_evaluations: evals.total(),
            soc_steps,
            max_soc_backward_error,
        });
    }

    let last = trace.last();
    Ok(RunReport {
        method: config.method,
        status: RunStatus::MaxOuter,
        x_final: state.w.x.clone(),
        lambda_final: &state.lambda_k + &state.w.lambda_tilde,
        final_residual_norm: last.map_or(f64::INFINITY, |r| r.residual_norm),
        final_norm_c: last.map_or(f64::INFINITY, |r| r.norm_c),
        outer_trace: trace,
        total_inner_iterations: total_inner,
        evals,
    })
}
