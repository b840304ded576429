//! Equality-constrained primal-dual variant.
//!
//! Each step samples a noisy objective gradient and Hessian, forms the KKT
//! system `[[B, Gᵀ], [G, 0]] (Δx, Δλ) = −(∇F̄ + Gᵀλ, c)` and solves it with the
//! same sketch-and-project solver as the unconstrained method, in `d + m`
//! dimensions. `B` averages the noisy Lagrangian Hessian.

use nalgebra::{DMatrix, DVector};

use crate::error::check_dim;
use crate::inference::{ci_from_variance, ConfidenceInterval};
use crate::linalg::{inverse, quad_form, symmetrized};
use crate::optimizer::{stepsize, Regime, StepsizeSchedule, TraceRecord, TraceSink};
use crate::oracle::OracleCovariance;
use crate::problems::{add_gradient_noise, add_hessian_noise};
use crate::rng::RunRngs;
use crate::sketch::{solve_newton_sketched_into, SketchDistribution, SketchSolveConfig, Tau};
use crate::{Error, Result};

/// A smooth objective with smooth equality constraints and a known solution.
pub trait EqConstrainedProblem: Sync {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn n_constraints(&self) -> usize;
    fn objective(&self, x: &DVector<f64>) -> f64;
    fn grad_into(&self, x: &DVector<f64>, out: &mut DVector<f64>);
    fn hess_into(&self, x: &DVector<f64>, out: &mut DMatrix<f64>);
    fn constraints_into(&self, x: &DVector<f64>, out: &mut DVector<f64>);
    /// `m × d` Jacobian `G(x)`.
    fn jacobian_into(&self, x: &DVector<f64>, out: &mut DMatrix<f64>);
    /// Adds `Σⱼ λⱼ ∇²cⱼ(x)` to `out`.
    fn add_constraint_curvature(
        &self,
        x: &DVector<f64>,
        lambda: &DVector<f64>,
        out: &mut DMatrix<f64>,
    );
    fn x0(&self) -> DVector<f64>;
    fn x_star(&self) -> DVector<f64>;
    fn lambda_star(&self) -> DVector<f64>;
}

fn jacobian(p: &dyn EqConstrainedProblem, x: &DVector<f64>) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(p.n_constraints(), p.dim());
    p.jacobian_into(x, &mut g);
    g
}

/// Exact `∇²ₓL(x, λ)`.
pub fn lagrangian_hessian(
    p: &dyn EqConstrainedProblem,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(p.dim(), p.dim());
    p.hess_into(x, &mut h);
    p.add_constraint_curvature(x, lambda, &mut h);
    h
}

/// Exact KKT residual `(∇F + Gᵀλ, c)`.
pub fn kkt_residual(
    p: &dyn EqConstrainedProblem,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> DVector<f64> {
    let (d, m) = (p.dim(), p.n_constraints());
    let mut g = DVector::zeros(d);
    p.grad_into(x, &mut g);
    g += jacobian(p, x).transpose() * lambda;
    let mut c = DVector::zeros(m);
    p.constraints_into(x, &mut c);
    let mut out = DVector::zeros(d + m);
    out.rows_mut(0, d).copy_from(&g);
    out.rows_mut(d, m).copy_from(&c);
    out
}

/// Coordinates whose column in `G(x⋆)` vanishes.
pub fn inactive_set(p: &dyn EqConstrainedProblem) -> Vec<usize> {
    let g = jacobian(p, &p.x_star());
    (0..p.dim())
        .filter(|&i| g.column(i).iter().all(|v| v.abs() <= 1e-12))
        .collect()
}

/// `[[B, Gᵀ], [G, 0]]`.
pub fn kkt_assemble(b: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = b.nrows();
    check_dim("kkt_assemble: B columns", d, b.ncols())?;
    check_dim("kkt_assemble: G columns", d, g.ncols())?;
    let mut k = DMatrix::zeros(d + g.nrows(), d + g.nrows());
    kkt_assemble_into(b, g, &mut k);
    Ok(k)
}

fn kkt_assemble_into(b: &DMatrix<f64>, g: &DMatrix<f64>, k: &mut DMatrix<f64>) {
    let (d, m) = (b.nrows(), g.nrows());
    k.view_mut((0, 0), (d, d)).copy_from(b);
    for j in 0..m {
        for i in 0..d {
            k[(d + j, i)] = g[(j, i)];
            k[(i, d + j)] = g[(j, i)];
        }
    }
    k.view_mut((d, d), (m, m)).fill(0.0);
}

/// Deterministic full-Newton KKT solve used to certify `(x⋆, λ⋆)`.
pub fn newton_kkt_solve(
    p: &dyn EqConstrainedProblem,
    x0: DVector<f64>,
    lambda0: DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = p.dim();
    let (mut x, mut lambda) = (x0, lambda0);
    for _ in 0..max_iter {
        let r = kkt_residual(p, &x, &lambda);
        if r.norm() <= tol {
            return Ok((x, lambda));
        }
        let k = kkt_assemble(&lagrangian_hessian(p, &x, &lambda), &jacobian(p, &x))?;
        let step = k
            .lu()
            .solve(&(-r))
            .ok_or_else(|| Error::Factorization("singular KKT matrix".into()))?;
        x += step.rows(0, d);
        lambda += step.rows(d, p.n_constraints());
    }
    Err(Error::InsufficientData(format!(
        "KKT Newton did not reach tolerance {tol:e} in {max_iter} iterations"
    )))
}

/// Convex quadratic `½xᵀQx + qᵀx` in four variables subject to `x₁ + x₂ = 1`.
#[derive(Debug, Clone)]
pub struct EqQp {
    pub q_mat: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    x_star: DVector<f64>,
    lambda_star: DVector<f64>,
}

impl EqQp {
    pub fn new(
        q_mat: DMatrix<f64>,
        q_vec: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self> {
        let d = q_mat.nrows();
        let m = a.nrows();
        check_dim("EqQp: q", d, q_vec.len())?;
        check_dim("EqQp: constraint rhs", m, b.len())?;
        let k = kkt_assemble(&q_mat, &a)?;
        let mut rhs = DVector::zeros(d + m);
        rhs.rows_mut(0, d).copy_from(&(-&q_vec));
        rhs.rows_mut(d, m).copy_from(&b);
        let sol = k
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Factorization("singular KKT matrix".into()))?;
        Ok(Self {
            x_star: sol.rows(0, d).into_owned(),
            lambda_star: sol.rows(d, m).into_owned(),
            q_mat,
            q_vec,
            a,
            b,
        })
    }
}

impl Default for EqQp {
    fn default() -> Self {
        let q_mat = DMatrix::from_row_slice(
            4,
            4,
            &[
                2.0, 0.5, 0.2, 0.0, //
                0.5, 1.5, 0.0, 0.3, //
                0.2, 0.0, 1.0, 0.1, //
                0.0, 0.3, 0.1, 1.2,
            ],
        );
        let q_vec = DVector::from_row_slice(&[-1.0, 0.5, -0.5, 1.0]);
        let a = DMatrix::from_row_slice(1, 4, &[1.0, 1.0, 0.0, 0.0]);
        let b = DVector::from_element(1, 1.0);
        Self::new(q_mat, q_vec, a, b).expect("built-in QP has a nonsingular KKT matrix")
    }
}

impl EqConstrainedProblem for EqQp {
    fn name(&self) -> &'static str {
        "eqqp"
    }
    fn dim(&self) -> usize {
        self.q_mat.nrows()
    }
    fn n_constraints(&self) -> usize {
        self.a.nrows()
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * quad_form(&self.q_mat, x) + self.q_vec.dot(x)
    }
    fn grad_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        out.gemv(1.0, &self.q_mat, x, 0.0);
        *out += &self.q_vec;
    }
    fn hess_into(&self, _x: &DVector<f64>, out: &mut DMatrix<f64>) {
        out.copy_from(&self.q_mat);
    }
    fn constraints_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        out.gemv(1.0, &self.a, x, 0.0);
        *out -= &self.b;
    }
    fn jacobian_into(&self, _x: &DVector<f64>, out: &mut DMatrix<f64>) {
        out.copy_from(&self.a);
    }
    fn add_constraint_curvature(
        &self,
        _x: &DVector<f64>,
        _lambda: &DVector<f64>,
        _out: &mut DMatrix<f64>,
    ) {
    }
    fn x0(&self) -> DVector<f64> {
        DVector::zeros(self.dim())
    }
    fn x_star(&self) -> DVector<f64> {
        self.x_star.clone()
    }
    fn lambda_star(&self) -> DVector<f64> {
        self.lambda_star.clone()
    }
}

/// `min −x₁ + ε(x₁² + x₂² − 1)` s.t. `x₁² + x₂² = 1`, with `ε = 10⁻⁶`.
#[derive(Debug, Clone, Copy)]
pub struct Maratos {
    pub eps: f64,
}

impl Default for Maratos {
    fn default() -> Self {
        Self { eps: 1e-6 }
    }
}

impl EqConstrainedProblem for Maratos {
    fn name(&self) -> &'static str {
        "maratos"
    }
    fn dim(&self) -> usize {
        2
    }
    fn n_constraints(&self) -> usize {
        1
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        -x[0] + self.eps * (x[0] * x[0] + x[1] * x[1] - 1.0)
    }
    fn grad_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        out[0] = -1.0 + 2.0 * self.eps * x[0];
        out[1] = 2.0 * self.eps * x[1];
    }
    fn hess_into(&self, _x: &DVector<f64>, out: &mut DMatrix<f64>) {
        out.fill_with_identity();
        *out *= 2.0 * self.eps;
    }
    fn constraints_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        out[0] = x[0] * x[0] + x[1] * x[1] - 1.0;
    }
    fn jacobian_into(&self, x: &DVector<f64>, out: &mut DMatrix<f64>) {
        out[(0, 0)] = 2.0 * x[0];
        out[(0, 1)] = 2.0 * x[1];
    }
    fn add_constraint_curvature(
        &self,
        _x: &DVector<f64>,
        lambda: &DVector<f64>,
        out: &mut DMatrix<f64>,
    ) {
        out[(0, 0)] += 2.0 * lambda[0];
        out[(1, 1)] += 2.0 * lambda[0];
    }
    fn x0(&self) -> DVector<f64> {
        DVector::from_row_slice(&[1.1, 0.1])
    }
    fn x_star(&self) -> DVector<f64> {
        DVector::from_row_slice(&[1.0, 0.0])
    }
    fn lambda_star(&self) -> DVector<f64> {
        DVector::from_element(1, (1.0 - 2.0 * self.eps) / 2.0)
    }
}

/// `min log(1 + x₁²) − x₂` s.t. `(1 + x₁²)² + x₂² = 4`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Hs7;

impl EqConstrainedProblem for Hs7 {
    fn name(&self) -> &'static str {
        "hs7"
    }
    fn dim(&self) -> usize {
        2
    }
    fn n_constraints(&self) -> usize {
        1
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        (1.0 + x[0] * x[0]).ln() - x[1]
    }
    fn grad_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        out[0] = 2.0 * x[0] / (1.0 + x[0] * x[0]);
        out[1] = -1.0;
    }
    fn hess_into(&self, x: &DVector<f64>, out: &mut DMatrix<f64>) {
        let s = 1.0 + x[0] * x[0];
        out.fill(0.0);
        out[(0, 0)] = 2.0 * (1.0 - x[0] * x[0]) / (s * s);
    }
    fn constraints_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        let s = 1.0 + x[0] * x[0];
        out[0] = s * s + x[1] * x[1] - 4.0;
    }
    fn jacobian_into(&self, x: &DVector<f64>, out: &mut DMatrix<f64>) {
        out[(0, 0)] = 4.0 * x[0] * (1.0 + x[0] * x[0]);
        out[(0, 1)] = 2.0 * x[1];
    }
    fn add_constraint_curvature(
        &self,
        x: &DVector<f64>,
        lambda: &DVector<f64>,
        out: &mut DMatrix<f64>,
    ) {
        out[(0, 0)] += lambda[0] * (4.0 + 12.0 * x[0] * x[0]);
        out[(1, 1)] += lambda[0] * 2.0;
    }
    fn x0(&self) -> DVector<f64> {
        DVector::from_row_slice(&[2.0, 2.0])
    }
    fn x_star(&self) -> DVector<f64> {
        DVector::from_row_slice(&[0.0, 3f64.sqrt()])
    }
    fn lambda_star(&self) -> DVector<f64> {
        DVector::from_element(1, 1.0 / (2.0 * 3f64.sqrt()))
    }
}

/// Built-in problem by name: `eqqp`, `maratos` or `hs7`.
pub fn builtin(name: &str) -> Result<Box<dyn EqConstrainedProblem>> {
    match name {
        "eqqp" => Ok(Box::new(EqQp::default())),
        "maratos" => Ok(Box::new(Maratos::default())),
        "hs7" => Ok(Box::new(Hs7)),
        other => Err(Error::Unsupported(format!(
            "unknown constrained problem {other:?}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SqpStepsize {
    /// Drawn from the schedule's band.
    Schedule,
    /// Constant, for deterministic checks.
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct SqpConfig {
    /// Solver for the `(d + m)`-dimensional KKT system.
    pub solve: SketchSolveConfig,
    pub schedule: StepsizeSchedule,
    pub stepsize: SqpStepsize,
    pub hessian_prior: f64,
    pub divergence_bound: f64,
}

impl SqpConfig {
    pub fn new(solve: SketchSolveConfig, schedule: StepsizeSchedule) -> Self {
        Self {
            solve,
            schedule,
            stepsize: SqpStepsize::Schedule,
            hessian_prior: 0.0,
            divergence_bound: 1e8,
        }
    }

    /// `τ` uniform coordinate steps with the default schedule.
    pub fn kaczmarz(tau: usize) -> Self {
        Self::new(
            SketchSolveConfig::kaczmarz(tau),
            StepsizeSchedule::default(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpState {
    pub t: usize,
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Averaged Lagrangian Hessian.
    pub b: DMatrix<f64>,
    pub last_alpha: f64,
}

impl SqpState {
    pub fn new(x0: DVector<f64>, lambda0: DVector<f64>) -> Self {
        let d = x0.len();
        Self {
            t: 0,
            x: x0,
            lambda: lambda0,
            b: DMatrix::identity(d, d),
            last_alpha: f64::NAN,
        }
    }
}

/// Stochastic sketched SQP driver with reusable buffers.
pub struct SqpSolver<'p> {
    problem: &'p dyn EqConstrainedProblem,
    sigma2: f64,
    cfg: SqpConfig,
    state: SqpState,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    jac: DMatrix<f64>,
    cons: DVector<f64>,
    kkt: DMatrix<f64>,
    rhs: DVector<f64>,
    dz: DVector<f64>,
}

impl<'p> SqpSolver<'p> {
    pub fn new(
        problem: &'p dyn EqConstrainedProblem,
        sigma2: f64,
        cfg: SqpConfig,
        state: SqpState,
    ) -> Result<Self> {
        let (d, m) = (problem.dim(), problem.n_constraints());
        check_dim("SQP iterate", d, state.x.len())?;
        check_dim("SQP multipliers", m, state.lambda.len())?;
        check_dim("SQP Hessian", d, state.b.nrows())?;
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise variance must be nonnegative, got {sigma2}"
            )));
        }
        if !(cfg.hessian_prior >= 0.0 && cfg.hessian_prior.is_finite()) {
            return Err(Error::Parameter(
                "hessian prior weight must be nonnegative".into(),
            ));
        }
        if let SqpStepsize::Fixed(a) = cfg.stepsize {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Parameter(format!(
                    "fixed stepsize must be positive, got {a}"
                )));
            }
        }
        cfg.solve.validate(d + m)?;
        cfg.schedule.validate()?;
        Ok(Self {
            problem,
            sigma2,
            cfg,
            state,
            grad: DVector::zeros(d),
            hess: DMatrix::zeros(d, d),
            jac: DMatrix::zeros(m, d),
            cons: DVector::zeros(m),
            kkt: DMatrix::zeros(d + m, d + m),
            rhs: DVector::zeros(d + m),
            dz: DVector::zeros(d + m),
        })
    }

    /// Starts from the problem's `x₀` with `λ₀ = 0`.
    pub fn from_start(
        problem: &'p dyn EqConstrainedProblem,
        sigma2: f64,
        cfg: SqpConfig,
    ) -> Result<Self> {
        let state = SqpState::new(problem.x0(), DVector::zeros(problem.n_constraints()));
        Self::new(problem, sigma2, cfg, state)
    }

    pub fn state(&self) -> &SqpState {
        &self.state
    }

    /// One primal-dual step. The returned record carries the primal block.
    pub fn step(&mut self, rngs: &mut RunRngs) -> Result<TraceRecord<'_>> {
        let p = self.problem;
        let (d, m) = (p.dim(), p.n_constraints());
        let t = self.state.t;
        let x = &self.state.x;

        p.grad_into(x, &mut self.grad);
        add_gradient_noise(self.sigma2, &mut self.grad, &mut rngs.sample);
        p.hess_into(x, &mut self.hess);
        add_hessian_noise(self.sigma2, &mut self.hess, &mut rngs.sample);
        p.add_constraint_curvature(x, &self.state.lambda, &mut self.hess);
        p.jacobian_into(x, &mut self.jac);
        p.constraints_into(x, &mut self.cons);

        self.grad.gemv_tr(1.0, &self.jac, &self.state.lambda, 1.0);
        self.rhs.rows_mut(0, d).copy_from(&self.grad);
        self.rhs.rows_mut(d, m).copy_from(&self.cons);
        kkt_assemble_into(&self.state.b, &self.jac, &mut self.kkt);

        match self.cfg.solve.tau {
            Tau::Exact => {
                let sol = self
                    .kkt
                    .clone()
                    .lu()
                    .solve(&self.rhs)
                    .ok_or_else(|| Error::Factorization("singular KKT matrix".into()))?;
                self.dz.copy_from(&sol);
                self.dz.neg_mut();
            }
            Tau::Steps(_) => solve_newton_sketched_into(
                &self.kkt,
                &self.rhs,
                &self.cfg.solve,
                &mut rngs.sketch,
                &mut self.dz,
            )?,
        }

        let alpha = match self.cfg.stepsize {
            SqpStepsize::Schedule => stepsize(&self.cfg.schedule, t, &mut rngs.step),
            SqpStepsize::Fixed(a) => a,
        };
        self.state.x.axpy(alpha, &self.dz.rows(0, d), 1.0);
        self.state.lambda.axpy(alpha, &self.dz.rows(d, m), 1.0);
        let finite = self
            .state
            .x
            .iter()
            .chain(self.state.lambda.iter())
            .all(|v| v.is_finite());
        if !finite || self.state.x.norm() + self.state.lambda.norm() > self.cfg.divergence_bound {
            return Err(Error::Divergence { t });
        }

        let n = t as f64 + self.cfg.hessian_prior;
        let inv = 1.0 / (n + 1.0);
        for j in 0..d {
            for i in 0..=j {
                let v = (n * self.state.b[(i, j)] + self.hess[(i, j)]) * inv;
                self.state.b[(i, j)] = v;
                self.state.b[(j, i)] = v;
            }
        }
        self.state.t = t + 1;
        self.state.last_alpha = alpha;

        Ok(TraceRecord {
            t: self.state.t,
            x: &self.state.x,
            alpha,
            grad: &self.grad,
            hessian_avg: &self.state.b,
        })
    }

    pub fn run(
        &mut self,
        n_iters: usize,
        rngs: &mut RunRngs,
        sinks: &mut [&mut dyn TraceSink],
    ) -> Result<&SqpState> {
        if n_iters == 0 {
            return Err(Error::Parameter("n_iters must be at least 1".into()));
        }
        for _ in 0..n_iters {
            let rec = self.step(rngs)?;
            for sink in sinks.iter_mut() {
                sink.record(&rec);
            }
        }
        Ok(&self.state)
    }
}

/// Single step on an explicit state.
pub fn sqp_step(
    state: SqpState,
    problem: &dyn EqConstrainedProblem,
    sigma2: f64,
    cfg: &SqpConfig,
    rngs: &mut RunRngs,
) -> Result<SqpState> {
    let mut solver = SqpSolver::new(problem, sigma2, cfg.clone(), state)?;
    solver.step(rngs)?;
    Ok(solver.state)
}

/// `1_I/|I|` padded with zeros to length `d`.
pub fn inactive_direction(d: usize, inactive: &[usize]) -> Result<DVector<f64>> {
    if inactive.is_empty() {
        return Err(Error::Parameter("inactive index set is empty".into()));
    }
    let mut w = DVector::zeros(d);
    for &i in inactive {
        if i >= d {
            return Err(Error::Parameter(format!(
                "inactive index {i} out of range for dimension {d}"
            )));
        }
        w[i] = 1.0 / inactive.len() as f64;
    }
    Ok(w)
}

/// Interval for the average of `x⋆` over the inactive coordinates.
pub fn inactive_functional_ci(
    x: &DVector<f64>,
    xi_hat_x: &DMatrix<f64>,
    alpha_t: f64,
    inactive: &[usize],
    q: f64,
) -> Result<ConfidenceInterval> {
    let w = inactive_direction(x.len(), inactive)?;
    check_dim(
        "inactive_functional_ci: covariance",
        x.len(),
        xi_hat_x.nrows(),
    )?;
    ci_from_variance(w.dot(x), alpha_t, quad_form(xi_hat_x, &w), q)
}

/// Limiting covariance of the primal-dual iterate at `(x⋆, λ⋆)`.
///
/// `K⋆ = [[∇²L⋆, G⋆ᵀ], [G⋆, 0]]` takes the role of the population Hessian and
/// `Ω⋆ = K⋆⁻¹ diag(σ²(I + 11ᵀ), 0) K⋆⁻¹`.
#[derive(Debug, Clone)]
pub struct KktOracle {
    pub full: OracleCovariance,
    pub d: usize,
}

impl KktOracle {
    pub fn new(
        problem: &dyn EqConstrainedProblem,
        sigma2: f64,
        solve: &SketchSolveConfig,
        regime: Regime,
        mc_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let (d, m) = (problem.dim(), problem.n_constraints());
        let (xs, ls) = (problem.x_star(), problem.lambda_star());
        let k = kkt_assemble(
            &lagrangian_hessian(problem, &xs, &ls),
            &jacobian(problem, &xs),
        )?;
        let k_inv = symmetrized(inverse(&k)?);
        let mut noise = DMatrix::zeros(d + m, d + m);
        noise
            .view_mut((0, 0), (d, d))
            .copy_from(&((DMatrix::identity(d, d) + DMatrix::from_element(d, d, 1.0)) * sigma2));
        let omega = symmetrized(&k_inv * noise * &k_inv);
        if let SketchDistribution::CoordinateBlock { .. } | SketchDistribution::Gaussian { .. } =
            solve.dist
        {
            log::info!("KKT oracle uses Monte-Carlo sketch averages");
        }
        let full = OracleCovariance::from_parts(k, omega, solve, regime, mc_samples, seed)?;
        Ok(Self { full, d })
    }

    /// Primal block of `Ξ⋆`.
    pub fn xi_x(&self) -> DMatrix<f64> {
        self.full
            .xi_star
            .view((0, 0), (self.d, self.d))
            .into_owned()
    }

    pub fn omega_x(&self) -> DMatrix<f64> {
        self.full
            .omega_star
            .view((0, 0), (self.d, self.d))
            .into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;

    fn problems() -> Vec<Box<dyn EqConstrainedProblem>> {
        ["eqqp", "maratos", "hs7"]
            .iter()
            .map(|n| builtin(n).unwrap())
            .collect()
    }

    #[test]
    fn kkt_assembly_example() {
        let k = kkt_assemble(
            &DMatrix::identity(2, 2),
            &DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        )
        .unwrap();
        let expected =
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(k, expected);
        assert_eq!(k, k.transpose());
    }

    #[test]
    fn reference_solutions_satisfy_kkt() {
        for p in problems() {
            let r = kkt_residual(p.as_ref(), &p.x_star(), &p.lambda_star());
            assert!(r.amax() < 1e-8, "{}: {r}", p.name());
            let k = kkt_assemble(
                &lagrangian_hessian(p.as_ref(), &p.x_star(), &p.lambda_star()),
                &jacobian(p.as_ref(), &p.x_star()),
            )
            .unwrap();
            assert!(k.determinant().abs() > 1e-8, "{}", p.name());
        }
    }

    #[test]
    fn newton_reproduces_reference_solutions() {
        for p in problems() {
            let start_x = p.x_star() + DVector::from_element(p.dim(), 0.05);
            let start_l = p.lambda_star() * 0.9;
            let (x, l) = newton_kkt_solve(p.as_ref(), start_x, start_l, 1e-13, 50).unwrap();
            assert!((x - p.x_star()).amax() < 1e-12, "{}", p.name());
            assert!((l - p.lambda_star()).amax() < 1e-12, "{}", p.name());
        }
    }

    #[test]
    fn lagrangian_hessians_at_solution() {
        let tau = 1e-6;
        let h = lagrangian_hessian(
            &Maratos::default(),
            &Maratos::default().x_star(),
            &Maratos::default().lambda_star(),
        );
        assert!((h - DMatrix::identity(2, 2)).amax() < 1e-15 + 4.0 * tau * tau);
        let r3 = 3f64.sqrt();
        let h7 = lagrangian_hessian(&Hs7, &Hs7.x_star(), &Hs7.lambda_star());
        let expected =
            DMatrix::from_diagonal(&DVector::from_row_slice(&[2.0 + 2.0 / r3, 1.0 / r3]));
        assert!((h7 - expected).amax() < 1e-14);
    }

    #[test]
    fn inactive_sets() {
        assert_eq!(inactive_set(&EqQp::default()), vec![2, 3]);
        assert_eq!(inactive_set(&Maratos::default()), vec![1]);
        assert_eq!(inactive_set(&Hs7), vec![0]);
    }

    #[test]
    fn solution_is_a_fixed_point() {
        let p = EqQp::default();
        let mut cfg = SqpConfig::new(SketchSolveConfig::exact(), StepsizeSchedule::default());
        cfg.stepsize = SqpStepsize::Fixed(1.0);
        let state = SqpState::new(p.x_star(), p.lambda_star());
        let mut solver = SqpSolver::new(&p, 0.0, cfg, state).unwrap();
        let mut rngs = RunRngs::from_seed(1);
        for _ in 0..5 {
            solver.step(&mut rngs).unwrap();
            let s = solver.state();
            assert!(kkt_residual(&p, &s.x, &s.lambda).norm() <= 1e-8);
        }
    }

    #[test]
    fn noiseless_exact_qp_converges_quickly() {
        let p = EqQp::default();
        let mut cfg = SqpConfig::new(SketchSolveConfig::exact(), StepsizeSchedule::default());
        cfg.stepsize = SqpStepsize::Fixed(1.0);
        let mut solver = SqpSolver::from_start(&p, 0.0, cfg).unwrap();
        let mut rngs = RunRngs::from_seed(2);
        solver.run(50, &mut rngs, &mut []).unwrap();
        assert!((&solver.state().x - p.x_star()).amax() < 1e-8);
    }

    #[test]
    fn sketched_kkt_steps_reduce_error() {
        let p = EqQp::default();
        let k = kkt_assemble(&p.q_mat, &p.a).unwrap();
        let g = DVector::from_row_slice(&[0.3, -1.0, 0.2, 0.5, -0.4]);
        let sol = -k.clone().lu().solve(&g).unwrap();
        let mut r = crate::rng::aux(3);
        let mut prev = sol.norm();
        for tau in [1, 5, 20, 80, 320] {
            let dz = crate::sketch::solve_newton_sketched(
                &k,
                &g,
                &SketchSolveConfig::kaczmarz(tau),
                &mut r,
            )
            .unwrap();
            let err = (dz - &sol).norm();
            assert!(err <= prev + 1e-12);
            prev = err;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn inactive_ci_examples() {
        let x = DVector::from_row_slice(&[0.2, 0.4]);
        let all = inactive_functional_ci(&x, &DMatrix::identity(2, 2), 0.1, &[0, 1], 0.05).unwrap();
        assert!((all.center - 0.3).abs() < 1e-15);
        let point = inactive_functional_ci(&x, &DMatrix::zeros(2, 2), 0.1, &[1], 0.05).unwrap();
        assert_eq!(point.half_width, 0.0);
        assert!(inactive_functional_ci(&x, &DMatrix::zeros(2, 2), 0.1, &[], 0.05).is_err());
    }

    #[test]
    fn exact_kkt_oracle_halves_omega() {
        let p = EqQp::default();
        let o = KktOracle::new(
            &p,
            0.01,
            &SketchSolveConfig::exact(),
            Regime {
                beta: 0.505,
                c_beta: 1.0,
            },
            0,
            0,
        )
        .unwrap();
        assert!(max_abs_diff(&o.xi_x(), &(o.omega_x() / 2.0)) < 1e-15);
        // The constrained direction carries no variance.
        let w = DVector::from_row_slice(&[1.0, 1.0, 0.0, 0.0]);
        assert!(quad_form(&o.xi_x(), &w).abs() < 1e-15);
    }

    #[test]
    fn sketched_kkt_oracle_is_consistent() {
        let p = EqQp::default();
        let o = KktOracle::new(
            &p,
            0.01,
            &SketchSolveConfig::kaczmarz(40),
            Regime {
                beta: 0.505,
                c_beta: 1.0,
            },
            0,
            0,
        )
        .unwrap();
        let lam = crate::linalg::sym_spectral_norm(&o.full.lambda);
        assert!(o.full.lyapunov_residual() <= 1e-10 * lam);
    }

    #[test]
    fn unknown_problem_rejected() {
        assert!(matches!(builtin("bt9"), Err(Error::Unsupported(_))));
    }
}
