//! Stochastic objectives with known ground truth.
//!
//! Regression models draw Gaussian features `ξ_a ~ N(0, Σ_a)` through a
//! Cholesky factor computed once per model. Noisy oracles perturb exact
//! gradient / Hessian evaluations of a deterministic function.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::check_dim;
use crate::rng::Rng;
use crate::{Error, Result};

/// Something the optimizer can query for a fresh (gradient, Hessian) sample.
pub trait StochasticObjective: Sync {
    fn dim(&self) -> usize;

    /// Draws one sample `ξ` and writes `∇f(x; ξ)` and `∇²f(x; ξ)`.
    fn sample_grad_hess(
        &self,
        x: &DVector<f64>,
        rng: &mut Rng,
        grad: &mut DVector<f64>,
        hess: &mut DMatrix<f64>,
    );
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DesignKind {
    Identity,
    /// `[Σ]_{ij} = r^{|i-j|}`
    Toeplitz(f64),
    /// Unit diagonal, constant off-diagonal `r`.
    EquiCorr(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignCovSpec {
    pub kind: DesignKind,
    pub d: usize,
}

impl DesignCovSpec {
    pub fn new(kind: DesignKind, d: usize) -> Self {
        Self { kind, d }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Parameter(
                "design dimension must be at least 1".into(),
            ));
        }
        match self.kind {
            DesignKind::Identity => Ok(()),
            DesignKind::Toeplitz(r) | DesignKind::EquiCorr(r) => {
                if r > 0.0 && r < 1.0 {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!(
                        "design correlation r must lie in (0, 1), got {r}"
                    )))
                }
            }
        }
    }
}

/// Materializes the feature covariance `Σ_a`.
pub fn materialize_design(spec: &DesignCovSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let d = spec.d;
    let m = match spec.kind {
        DesignKind::Identity => DMatrix::identity(d, d),
        DesignKind::Toeplitz(r) => DMatrix::from_fn(d, d, |i, j| r.powi(i.abs_diff(j) as i32)),
        DesignKind::EquiCorr(r) => DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { r }),
    };
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    /// Squared loss, response `ξ_b = ξ_aᵀx⋆ + ε`, `ε ~ N(0, σ²)`.
    Linear { sigma: f64 },
    /// Log loss, label `ξ_b ∈ {-1, +1}`.
    Logistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub xi_a: DVector<f64>,
    pub xi_b: f64,
}

#[derive(Debug, Clone)]
pub struct RegressionModel {
    family: Family,
    x_star: DVector<f64>,
    design: DesignCovSpec,
    sigma_a: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
}

/// `x⋆ = (1/d, …, 1/d)`.
pub fn default_x_star(d: usize) -> DVector<f64> {
    DVector::from_element(d, 1.0 / d as f64)
}

impl RegressionModel {
    pub fn new(family: Family, x_star: DVector<f64>, design: DesignCovSpec) -> Result<Self> {
        let sigma_a = materialize_design(&design)?;
        check_dim("x_star", design.d, x_star.len())?;
        if let Family::Linear { sigma } = family {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::Parameter(format!(
                    "noise standard deviation must be nonnegative, got {sigma}"
                )));
            }
        }
        let chol_lower = sigma_a
            .clone()
            .cholesky()
            .ok_or_else(|| {
                Error::Factorization("design covariance is not positive definite".into())
            })?
            .l();
        Ok(Self {
            family,
            x_star,
            design,
            sigma_a,
            chol_lower,
        })
    }

    pub fn with_default_x_star(family: Family, design: DesignCovSpec) -> Result<Self> {
        Self::new(family, default_x_star(design.d), design)
    }

    pub fn dim(&self) -> usize {
        self.design.d
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn x_star(&self) -> &DVector<f64> {
        &self.x_star
    }

    pub fn design(&self) -> &DesignCovSpec {
        &self.design
    }

    pub fn design_cov(&self) -> &DMatrix<f64> {
        &self.sigma_a
    }

    /// Writes `L z` into `out` with `z` standard normal, `LLᵀ = Σ_a`.
    fn draw_features_into(&self, rng: &mut Rng, out: &mut DVector<f64>) {
        let d = self.dim();
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        // In place: row i of L only touches z_j with j <= i.
        for i in (0..d).rev() {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.chol_lower[(i, j)] * out[j];
            }
            out[i] = acc;
        }
    }

    fn draw_response(&self, rng: &mut Rng, xi_a: &DVector<f64>) -> f64 {
        let z = xi_a.dot(&self.x_star);
        match self.family {
            Family::Linear { sigma } => {
                let eps: f64 = rng.sample(StandardNormal);
                z + sigma * eps
            }
            Family::Logistic => {
                let u: f64 = rng.random();
                if u < sigmoid(z) {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }

    pub fn draw_sample(&self, rng: &mut Rng) -> Sample {
        let mut xi_a = DVector::zeros(self.dim());
        self.draw_features_into(rng, &mut xi_a);
        let xi_b = self.draw_response(rng, &xi_a);
        Sample { xi_a, xi_b }
    }

    /// Pointwise loss `f(x; ξ)`.
    pub fn loss(&self, x: &DVector<f64>, s: &Sample) -> f64 {
        let z = s.xi_a.dot(x);
        match self.family {
            Family::Linear { .. } => 0.5 * (s.xi_b - z).powi(2),
            Family::Logistic => softplus(-s.xi_b * z),
        }
    }

    /// Scalar `c` with `∇f(x; ξ) = c · ξ_a`.
    fn grad_coef(&self, z: f64, xi_b: f64) -> f64 {
        match self.family {
            Family::Linear { .. } => -(xi_b - z),
            // -ξ_b / (1 + exp(ξ_b z)) = -ξ_b σ(-ξ_b z)
            Family::Logistic => -xi_b * sigmoid(-xi_b * z),
        }
    }

    /// Scalar `h` with `∇²f(x; ξ) = h · ξ_a ξ_aᵀ`.
    fn hess_coef(&self, z: f64) -> f64 {
        match self.family {
            Family::Linear { .. } => 1.0,
            Family::Logistic => sigmoid(z) * sigmoid(-z),
        }
    }

    pub fn sample_grad(&self, x: &DVector<f64>, s: &Sample) -> DVector<f64> {
        let z = s.xi_a.dot(x);
        &s.xi_a * self.grad_coef(z, s.xi_b)
    }

    pub fn sample_hess(&self, x: &DVector<f64>, s: &Sample) -> DMatrix<f64> {
        let z = s.xi_a.dot(x);
        let h = self.hess_coef(z);
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        out.ger(h, &s.xi_a, &s.xi_a, 0.0);
        out
    }
}

impl StochasticObjective for RegressionModel {
    fn dim(&self) -> usize {
        self.design.d
    }

    fn sample_grad_hess(
        &self,
        x: &DVector<f64>,
        rng: &mut Rng,
        grad: &mut DVector<f64>,
        hess: &mut DMatrix<f64>,
    ) {
        // The feature vector is generated directly in `grad` and rescaled last.
        self.draw_features_into(rng, grad);
        let xi_b = self.draw_response(rng, grad);
        let z = grad.dot(x);
        let h = self.hess_coef(z);
        hess.ger(h, grad, grad, 0.0);
        let c = self.grad_coef(z, xi_b);
        *grad *= c;
    }
}

/// Overflow-safe logistic function `1 / (1 + exp(-v))`.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(v))` without overflow.
pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// A deterministic twice-differentiable function.
pub trait SmoothFunction: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn grad_into(&self, x: &DVector<f64>, out: &mut DVector<f64>);
    fn hess_into(&self, x: &DVector<f64>, out: &mut DMatrix<f64>);
}

/// Exact evaluations perturbed by Gaussian noise:
/// gradient noise `N(0, σ²(I + 11ᵀ))`, symmetric Hessian noise with
/// i.i.d. `N(0, σ²)` upper-triangle entries.
#[derive(Debug, Clone)]
pub struct NoisyOracleProblem<F> {
    pub f: F,
    pub sigma2: f64,
}

impl<F: SmoothFunction> NoisyOracleProblem<F> {
    pub fn new(f: F, sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise variance must be nonnegative, got {sigma2}"
            )));
        }
        Ok(Self { f, sigma2 })
    }

    pub fn noisy_grad(&self, x: &DVector<f64>, rng: &mut Rng) -> DVector<f64> {
        let mut g = DVector::zeros(self.f.dim());
        self.f.grad_into(x, &mut g);
        add_gradient_noise(self.sigma2, &mut g, rng);
        g
    }

    pub fn noisy_hess(&self, x: &DVector<f64>, rng: &mut Rng) -> DMatrix<f64> {
        let d = self.f.dim();
        let mut h = DMatrix::zeros(d, d);
        self.f.hess_into(x, &mut h);
        add_hessian_noise(self.sigma2, &mut h, rng);
        h
    }
}

impl<F: SmoothFunction> StochasticObjective for NoisyOracleProblem<F> {
    fn dim(&self) -> usize {
        self.f.dim()
    }

    fn sample_grad_hess(
        &self,
        x: &DVector<f64>,
        rng: &mut Rng,
        grad: &mut DVector<f64>,
        hess: &mut DMatrix<f64>,
    ) {
        self.f.grad_into(x, grad);
        add_gradient_noise(self.sigma2, grad, rng);
        self.f.hess_into(x, hess);
        add_hessian_noise(self.sigma2, hess, rng);
    }
}

/// Adds `σ (I + c 11ᵀ) z` with `c = (√(d+1) − 1)/d`, the symmetric square
/// root of `σ²(I + 11ᵀ)`.
pub fn add_gradient_noise(sigma2: f64, g: &mut DVector<f64>, rng: &mut Rng) {
    if sigma2 == 0.0 {
        return;
    }
    let d = g.len() as f64;
    let sigma = sigma2.sqrt();
    let c = ((d + 1.0).sqrt() - 1.0) / d;
    let mut sum = 0.0;
    for v in g.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        sum += z;
        *v += sigma * z;
    }
    let shift = sigma * c * sum;
    for v in g.iter_mut() {
        *v += shift;
    }
}

/// Adds a symmetric matrix whose upper-triangle entries are i.i.d. `N(0, σ²)`.
pub fn add_hessian_noise(sigma2: f64, h: &mut DMatrix<f64>, rng: &mut Rng) {
    if sigma2 == 0.0 {
        return;
    }
    let sigma = sigma2.sqrt();
    let d = h.nrows();
    for j in 0..d {
        for i in 0..=j {
            let z: f64 = rng.sample(StandardNormal);
            let v = h[(i, j)] + sigma * z;
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
}
