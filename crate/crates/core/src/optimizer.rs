//! The online sketched Newton iteration.
//!
//! At step `t` one sample gives `ḡ_t` and `H̄_t` at `x_t`. The direction
//! `Δx̄_t` approximately solves `B_t Δx = −ḡ_t`, the iterate moves by a
//! stepsize drawn from the band `[β_t, β_t + χ_t]`, and only afterwards is
//! `H̄_t` folded into the Hessian average.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::error::check_dim;
use crate::problems::StochasticObjective;
use crate::rng::{Rng, RunRngs};
use crate::sketch::{solve_newton_sketched_into, SketchSolveConfig, Tau};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepsizeMode {
    /// `ᾱ_t = φ_t = β_t + χ_t/2`.
    Deterministic,
    /// `ᾱ_t ~ Unif[β_t, β_t + χ_t]`.
    UniformBand,
}

/// `β_t = c_β/(t+1)^β`, `χ_t = c_χ/(t+1)^χ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepsizeSchedule {
    pub c_beta: f64,
    pub beta: f64,
    pub c_chi: f64,
    pub chi: f64,
    pub mode: StepsizeMode,
}

/// The `(β, c_β)` pair that determines the limiting covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regime {
    pub beta: f64,
    pub c_beta: f64,
}

impl Regime {
    /// `1{β=1}/c_β`.
    pub fn shift(&self) -> f64 {
        if self.beta == 1.0 {
            1.0 / self.c_beta
        } else {
            0.0
        }
    }
}

impl Default for StepsizeSchedule {
    /// `c_β = 1`, `β = 0.505`, random band with `χ_t = β_t²`.
    fn default() -> Self {
        Self::banded(1.0, 0.505)
    }
}

impl StepsizeSchedule {
    /// Random band with `χ_t = β_t²`.
    pub fn banded(c_beta: f64, beta: f64) -> Self {
        Self {
            c_beta,
            beta,
            c_chi: c_beta * c_beta,
            chi: 2.0 * beta,
            mode: StepsizeMode::UniformBand,
        }
    }

    /// Deterministic `0.5/(t+1)^β` with an empty band, used for SGD.
    pub fn sgd(beta: f64) -> Self {
        Self {
            c_beta: 0.5,
            beta,
            c_chi: 0.0,
            chi: 1.0,
            mode: StepsizeMode::Deterministic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_beta > 0.0 && self.c_beta.is_finite()) {
            return Err(Error::Parameter(format!(
                "c_beta must be positive, got {}",
                self.c_beta
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Parameter(format!(
                "beta must lie in (0, 1], got {}",
                self.beta
            )));
        }
        if !(self.c_chi >= 0.0 && self.c_chi.is_finite()) {
            return Err(Error::Parameter(format!(
                "c_chi must be nonnegative, got {}",
                self.c_chi
            )));
        }
        if !(self.chi > 0.0 && self.chi.is_finite()) {
            return Err(Error::Parameter(format!(
                "chi must be positive, got {}",
                self.chi
            )));
        }
        Ok(())
    }

    pub fn regime(&self) -> Regime {
        Regime {
            beta: self.beta,
            c_beta: self.c_beta,
        }
    }

    pub fn beta_t(&self, t: usize) -> f64 {
        self.c_beta / ((t + 1) as f64).powf(self.beta)
    }

    pub fn chi_t(&self, t: usize) -> f64 {
        self.c_chi / ((t + 1) as f64).powf(self.chi)
    }

    /// Centered stepsize `φ_t = β_t + χ_t/2`.
    pub fn phi_t(&self, t: usize) -> f64 {
        self.beta_t(t) + 0.5 * self.chi_t(t)
    }

    pub fn band(&self, t: usize) -> (f64, f64) {
        let lo = self.beta_t(t);
        (lo, lo + self.chi_t(t))
    }
}

/// Draws `ᾱ_t` according to the schedule's mode.
pub fn stepsize(schedule: &StepsizeSchedule, t: usize, rng: &mut Rng) -> f64 {
    match schedule.mode {
        StepsizeMode::Deterministic => schedule.phi_t(t),
        StepsizeMode::UniformBand => {
            let (lo, hi) = schedule.band(t);
            let u: f64 = rng.random();
            (lo + u * (hi - lo)).clamp(lo, hi)
        }
    }
}

/// Inputs available to a custom stepsize rule.
pub struct StepContext<'a> {
    pub t: usize,
    pub lower: f64,
    pub upper: f64,
    pub direction: &'a DVector<f64>,
    pub rng: &'a mut Rng,
}

/// A user stepsize rule; its output is clamped into `[β_t, β_t + χ_t]`.
pub type StepRule = dyn Fn(&mut StepContext<'_>) -> f64 + Send + Sync;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HessianMode {
    /// `B_{t+1} = ((t + w) B_t + H̄_t)/(t + 1 + w)`. With `w = 0`, `B_0`
    /// only seeds the first solve and `B_1 = H̄_0`.
    Averaged { prior_weight: f64 },
    /// `B_t = B_0` forever (conditioned SGD; plain SGD for `B_0 = I`).
    Frozen,
}

impl Default for HessianMode {
    fn default() -> Self {
        Self::Averaged { prior_weight: 0.0 }
    }
}

#[derive(Clone)]
pub struct NewtonConfig {
    pub solve: SketchSolveConfig,
    pub schedule: StepsizeSchedule,
    pub hessian: HessianMode,
    /// Abort once `‖x_t‖` exceeds this.
    pub divergence_bound: f64,
    pub step_rule: Option<Arc<StepRule>>,
}

impl std::fmt::Debug for NewtonConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NewtonConfig")
            .field("solve", &self.solve)
            .field("schedule", &self.schedule)
            .field("hessian", &self.hessian)
            .field("divergence_bound", &self.divergence_bound)
            .field("step_rule", &self.step_rule.as_ref().map(|_| "custom"))
            .finish()
    }
}

impl NewtonConfig {
    pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e8;

    pub fn new(solve: SketchSolveConfig, schedule: StepsizeSchedule) -> Self {
        Self {
            solve,
            schedule,
            hessian: HessianMode::default(),
            divergence_bound: Self::DEFAULT_DIVERGENCE_BOUND,
            step_rule: None,
        }
    }

    /// Averaged SGD: frozen identity preconditioner and `Δx = −ḡ`.
    pub fn sgd(beta: f64) -> Self {
        Self {
            hessian: HessianMode::Frozen,
            ..Self::new(SketchSolveConfig::exact(), StepsizeSchedule::sgd(beta))
        }
    }

    pub fn with_hessian(mut self, mode: HessianMode) -> Self {
        self.hessian = mode;
        self
    }

    pub fn with_step_rule(mut self, rule: Arc<StepRule>) -> Self {
        self.step_rule = Some(rule);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonState {
    pub t: usize,
    pub x: DVector<f64>,
    /// Running Hessian average `B_t`.
    pub b: DMatrix<f64>,
    /// `ᾱ_{t-1}`, or `NaN` before the first step.
    pub last_alpha: f64,
}

impl NewtonState {
    /// `t = 0`, `B_0 = I`.
    pub fn new(x0: DVector<f64>) -> Self {
        let d = x0.len();
        Self {
            t: 0,
            x: x0,
            b: DMatrix::identity(d, d),
            last_alpha: f64::NAN,
        }
    }
}

/// What a trace consumer sees after each step: the new iterate `x_t`, the
/// stepsize `ᾱ_{t-1}` that produced it, the gradient sample used for that
/// step, and the Hessian average after the update.
#[derive(Debug, Clone, Copy)]
pub struct TraceRecord<'a> {
    pub t: usize,
    pub x: &'a DVector<f64>,
    pub alpha: f64,
    pub grad: &'a DVector<f64>,
    pub hessian_avg: &'a DMatrix<f64>,
}

pub trait TraceSink {
    fn record(&mut self, rec: &TraceRecord<'_>);
}

/// Keeps every `(t, x_t, ᾱ_{t-1})`.
#[derive(Debug, Clone, Default)]
pub struct TraceLog {
    pub entries: Vec<(usize, DVector<f64>, f64)>,
}

impl TraceSink for TraceLog {
    fn record(&mut self, rec: &TraceRecord<'_>) {
        self.entries.push((rec.t, rec.x.clone(), rec.alpha));
    }
}

/// Stateful driver that owns the iterate and reusable buffers.
pub struct SketchedNewton<'p, P: ?Sized> {
    problem: &'p P,
    cfg: NewtonConfig,
    state: NewtonState,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    dx: DVector<f64>,
}

impl<'p, P: StochasticObjective + ?Sized> SketchedNewton<'p, P> {
    pub fn new(problem: &'p P, cfg: NewtonConfig, x0: DVector<f64>) -> Result<Self> {
        Self::from_state(problem, cfg, NewtonState::new(x0))
    }

    pub fn from_state(problem: &'p P, cfg: NewtonConfig, state: NewtonState) -> Result<Self> {
        let d = problem.dim();
        check_dim("initial iterate", d, state.x.len())?;
        check_dim("initial Hessian", d, state.b.nrows())?;
        cfg.solve.validate(d)?;
        cfg.schedule.validate()?;
        if let HessianMode::Averaged { prior_weight } = cfg.hessian {
            if !(prior_weight >= 0.0 && prior_weight.is_finite()) {
                return Err(Error::Parameter(
                    "hessian prior weight must be nonnegative".into(),
                ));
            }
        }
        Ok(Self {
            problem,
            cfg,
            state,
            grad: DVector::zeros(d),
            hess: DMatrix::zeros(d, d),
            dx: DVector::zeros(d),
        })
    }

    pub fn state(&self) -> &NewtonState {
        &self.state
    }

    pub fn into_state(self) -> NewtonState {
        self.state
    }

    pub fn config(&self) -> &NewtonConfig {
        &self.cfg
    }

    /// One outer iteration `x_t → x_{t+1}`.
    pub fn step(&mut self, rngs: &mut RunRngs) -> Result<TraceRecord<'_>> {
        let t = self.state.t;
        self.problem.sample_grad_hess(
            &self.state.x,
            &mut rngs.sample,
            &mut self.grad,
            &mut self.hess,
        );

        match (self.cfg.hessian, self.cfg.solve.tau) {
            // B stays at I: the exact direction is just -g.
            (HessianMode::Frozen, Tau::Exact) if is_identity(&self.state.b) => {
                self.dx.copy_from(&self.grad);
                self.dx.neg_mut();
            }
            _ => solve_newton_sketched_into(
                &self.state.b,
                &self.grad,
                &self.cfg.solve,
                &mut rngs.sketch,
                &mut self.dx,
            )?,
        }

        let alpha = match &self.cfg.step_rule {
            None => stepsize(&self.cfg.schedule, t, &mut rngs.step),
            Some(rule) => {
                let (lower, upper) = self.cfg.schedule.band(t);
                let mut ctx = StepContext {
                    t,
                    lower,
                    upper,
                    direction: &self.dx,
                    rng: &mut rngs.step,
                };
                rule(&mut ctx).clamp(lower, upper)
            }
        };

        self.state.x.axpy(alpha, &self.dx, 1.0);
        if !self.state.x.iter().all(|v| v.is_finite())
            || self.state.x.norm() > self.cfg.divergence_bound
        {
            return Err(Error::Divergence { t });
        }

        if let HessianMode::Averaged { prior_weight } = self.cfg.hessian {
            average_into(&mut self.state.b, &self.hess, t as f64 + prior_weight);
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

    /// Runs `n_iters` steps, pushing each record to every sink in order.
    pub fn run(
        &mut self,
        n_iters: usize,
        rngs: &mut RunRngs,
        sinks: &mut [&mut dyn TraceSink],
    ) -> Result<&NewtonState> {
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

/// `b ← (n·b + h)/(n + 1)` computed on the upper triangle and mirrored, so
/// the result is exactly symmetric.
fn average_into(b: &mut DMatrix<f64>, h: &DMatrix<f64>, n: f64) {
    let d = b.nrows();
    let inv = 1.0 / (n + 1.0);
    for j in 0..d {
        for i in 0..=j {
            let v = (n * b[(i, j)] + h[(i, j)]) * inv;
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }
}

fn is_identity(b: &DMatrix<f64>) -> bool {
    b.iter()
        .enumerate()
        .all(|(k, v)| *v == if k % (b.nrows() + 1) == 0 { 1.0 } else { 0.0 })
}

/// Single step on an explicit state; see [`SketchedNewton::step`].
pub fn newton_step<P: StochasticObjective + ?Sized>(
    state: NewtonState,
    problem: &P,
    cfg: &NewtonConfig,
    rngs: &mut RunRngs,
) -> Result<NewtonState> {
    let mut driver = SketchedNewton::from_state(problem, cfg.clone(), state)?;
    driver.step(rngs)?;
    Ok(driver.into_state())
}

/// Runs `n_iters` steps from `x0` and returns the final state.
pub fn run<P: StochasticObjective + ?Sized>(
    problem: &P,
    cfg: &NewtonConfig,
    x0: DVector<f64>,
    n_iters: usize,
    rngs: &mut RunRngs,
    sinks: &mut [&mut dyn TraceSink],
) -> Result<NewtonState> {
    let mut driver = SketchedNewton::new(problem, cfg.clone(), x0)?;
    driver.run(n_iters, rngs, sinks)?;
    Ok(driver.into_state())
}
