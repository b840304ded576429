//! Ground-truth limiting covariance of the averaged-Hessian sketched Newton
//! iterate, and the metrics that score estimators against it.
//!
//! With `P = E[Π]` the expected sketch projection at the solution and `τ`
//! inner steps, `C⋆ = (I − P)^τ`. The sandwich term
//! `Λ = E[(I − C̃)Ω(I − C̃)ᵀ]` is `Ω − C⋆Ω − ΩC⋆ᵀ + T^τ(Ω)` where
//! `T(M) = E[(I − Π)M(I − Π)ᵀ]` over one sketch. The limit `Ξ⋆` solves
//! `AΞ + ΞA = Λ` with `A = (1 − shift/2)I − C⋆`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::check_dim;
use crate::linalg::{mat_pow, quad_form, spd_inverse, sym_spectral_norm, symmetrize, symmetrized};
use crate::optimizer::Regime;
use crate::problems::{Family, RegressionModel, StochasticObjective};
use crate::rng;
use crate::sketch::{Sketch, SketchDistribution, SketchSolveConfig, Tau};
use crate::{Error, Result};

pub const DEFAULT_MC_SAMPLES: usize = 1_000_000;
pub const DEFAULT_SKETCH_MC_SAMPLES: usize = 100_000;

const MC_CHUNK: usize = 50_000;

/// Population Hessian and gradient second moment at `x⋆`, with entrywise
/// standard errors when they were estimated by Monte Carlo.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationMoments {
    pub hessian: DMatrix<f64>,
    pub grad_second_moment: DMatrix<f64>,
    pub hessian_se: Option<DMatrix<f64>>,
    pub grad_second_moment_se: Option<DMatrix<f64>>,
}

impl PopulationMoments {
    /// `B⋆⁻¹ G B⋆⁻¹`.
    pub fn omega(&self) -> Result<DMatrix<f64>> {
        let inv = spd_inverse(&self.hessian)?;
        Ok(symmetrized(&inv * &self.grad_second_moment * &inv))
    }
}

/// Sums of `v`, `v²` per entry for Monte-Carlo standard errors.
struct EntrySums {
    sum: DMatrix<f64>,
    sum_sq: DMatrix<f64>,
}

impl EntrySums {
    fn new(d: usize) -> Self {
        Self {
            sum: DMatrix::zeros(d, d),
            sum_sq: DMatrix::zeros(d, d),
        }
    }

    fn push(&mut self, m: &DMatrix<f64>) {
        self.sum += m;
        self.sum_sq.zip_apply(m, |s, v| *s += v * v);
    }

    fn merge(mut self, other: Self) -> Self {
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self
    }

    fn mean_and_se(&self, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let nf = n as f64;
        let mean = &self.sum / nf;
        let se = self.sum_sq.zip_map(&mean, |sq, m| {
            let var = (sq / nf - m * m).max(0.0) * nf / (nf - 1.0).max(1.0);
            (var / nf).sqrt()
        });
        (mean, se)
    }
}

/// Splits `n` Monte-Carlo draws into fixed chunks seeded by chunk index and
/// reduces them in chunk order.
fn chunked_mc<T, F, R>(
    n: usize,
    seed: u64,
    init: impl Fn() -> T + Sync + Send,
    body: F,
    reduce: R,
) -> T
where
    T: Send,
    F: Fn(&mut T, &mut rng::Rng) + Sync + Send,
    R: Fn(T, T) -> T + Sync + Send,
{
    let chunks = n.div_ceil(MC_CHUNK);
    let parts: Vec<T> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::aux(seed.wrapping_add(k as u64));
            let mut acc = init();
            let len = MC_CHUNK.min(n - k * MC_CHUNK);
            for _ in 0..len {
                body(&mut acc, &mut r);
            }
            acc
        })
        .collect();
    parts.into_iter().reduce(reduce).unwrap_or_else(init)
}

/// `B⋆` and `E[∇f∇fᵀ]` at `x⋆`. Linear regression is closed form; logistic
/// regression uses `mc_samples` draws.
pub fn population_moments(
    model: &RegressionModel,
    mc_samples: usize,
    seed: u64,
) -> Result<PopulationMoments> {
    let sigma_a = model.design_cov();
    match model.family() {
        Family::Linear { sigma } => Ok(PopulationMoments {
            hessian: sigma_a.clone(),
            grad_second_moment: sigma_a * (sigma * sigma),
            hessian_se: None,
            grad_second_moment_se: None,
        }),
        Family::Logistic => {
            if mc_samples < 2 {
                return Err(Error::Parameter(
                    "Monte-Carlo sample count must be at least 2".into(),
                ));
            }
            let d = model.dim();
            let x_star = model.x_star();
            let (h, g) = chunked_mc(
                mc_samples,
                seed,
                || (EntrySums::new(d), EntrySums::new(d)),
                |(hs, gs), r| {
                    let mut grad = DVector::zeros(d);
                    let mut hess = DMatrix::zeros(d, d);
                    model.sample_grad_hess(x_star, r, &mut grad, &mut hess);
                    hs.push(&hess);
                    gs.push(&(&grad * grad.transpose()));
                },
                |(h1, g1), (h2, g2)| (h1.merge(h2), g1.merge(g2)),
            );
            let (hessian, hessian_se) = h.mean_and_se(mc_samples);
            let (grad_second_moment, grad_se) = g.mean_and_se(mc_samples);
            Ok(PopulationMoments {
                hessian: symmetrized(hessian),
                grad_second_moment: symmetrized(grad_second_moment),
                hessian_se: Some(hessian_se),
                grad_second_moment_se: Some(grad_se),
            })
        }
    }
}

pub fn population_hessian(
    model: &RegressionModel,
    mc_samples: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    Ok(population_moments(model, mc_samples, seed)?.hessian)
}

/// `Ω⋆ = B⋆⁻¹ E[∇f∇fᵀ] B⋆⁻¹`; `σ²Σ_a⁻¹` for linear regression.
pub fn omega_star(model: &RegressionModel, mc_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
    population_moments(model, mc_samples, seed)?.omega()
}

/// `Π = BS(SᵀB²S)†SᵀB` for one sketch.
pub fn sketch_projection(b: &DMatrix<f64>, sketch: &Sketch) -> Result<DMatrix<f64>> {
    let d = b.nrows();
    match sketch {
        Sketch::Coordinate(i) => coordinate_projection(b, *i),
        Sketch::Dense(s) => {
            check_dim("sketch_projection: S rows", d, s.nrows())?;
            let bs = b * s;
            let gram = bs.transpose() * &bs;
            let eig = gram.symmetric_eigen();
            let tol = 1e-12 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
            let mut pinv = DMatrix::zeros(s.ncols(), s.ncols());
            for (k, &lam) in eig.eigenvalues.iter().enumerate() {
                if lam > tol {
                    let u = eig.eigenvectors.column(k);
                    pinv.ger(1.0 / lam, &u, &u, 1.0);
                }
            }
            Ok(symmetrized(&bs * pinv * bs.transpose()))
        }
    }
}

/// `b_i b_iᵀ / ‖b_i‖²` with `b_i` the i-th column of `B`.
pub fn coordinate_projection(b: &DMatrix<f64>, i: usize) -> Result<DMatrix<f64>> {
    let col = b.column(i);
    let n2 = col.norm_squared();
    if !(n2 > 0.0) {
        return Err(Error::DegenerateDirection(format!(
            "column {i} of B is zero"
        )));
    }
    Ok(col * col.transpose() / n2)
}

/// `P = E[Π]`: exact for uniform coordinate sketches, Monte Carlo otherwise.
pub fn projection_expectation(
    b: &DMatrix<f64>,
    dist: &SketchDistribution,
    mc_samples: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let d = b.nrows();
    check_dim("projection_expectation: B columns", d, b.ncols())?;
    dist.validate(d)?;
    if let SketchDistribution::UniformCoordinate = dist {
        let mut p = DMatrix::zeros(d, d);
        for i in 0..d {
            p += coordinate_projection(b, i)?;
        }
        return Ok(symmetrized(p / d as f64));
    }
    if mc_samples == 0 {
        return Err(Error::Parameter(
            "Monte-Carlo sample count must be positive".into(),
        ));
    }
    let sum = chunked_mc(
        mc_samples,
        seed,
        || Ok(DMatrix::zeros(d, d)),
        |acc: &mut Result<DMatrix<f64>>, r| {
            if let Ok(m) = acc {
                match sketch_projection(b, &dist.sample(d, r)) {
                    Ok(pi) => *m += pi,
                    Err(e) => *acc = Err(e),
                }
            }
        },
        |a, b| Ok(a? + b?),
    )?;
    Ok(symmetrized(sum / mc_samples as f64))
}

/// `C⋆ = (I − P)^τ`; zero for an exact solve.
pub fn c_star(p: &DMatrix<f64>, tau: Tau) -> DMatrix<f64> {
    let d = p.nrows();
    match tau {
        Tau::Exact => DMatrix::zeros(d, d),
        Tau::Steps(k) => symmetrized(mat_pow(&(DMatrix::identity(d, d) - p), k)),
    }
}

/// One-step operator `T(M) = E[(I − Π)M(I − Π)ᵀ]` for uniform coordinate
/// sketches: `(1/d)Σᵢ (I − Πᵢ)M(I − Πᵢ)ᵀ`.
pub fn coordinate_sandwich(b: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = b.nrows();
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        let comp = DMatrix::identity(d, d) - coordinate_projection(b, i)?;
        out += &comp * m * comp.transpose();
    }
    Ok(symmetrized(out / d as f64))
}

/// `Λ = E[(I − C̃)Ω(I − C̃)ᵀ]` with `C̃ = Π_τ(I − Π)` over `τ` independent
/// sketches. Uniform coordinate sketches use the exact operator power;
/// other distributions average `mc_samples` sampled products.
pub fn lambda_matrix(
    b: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    dist: &SketchDistribution,
    tau: Tau,
    mc_samples: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let d = b.nrows();
    check_dim("lambda_matrix: Omega", d, omega.nrows())?;
    let k = match tau {
        Tau::Exact => return Ok(omega.clone()),
        Tau::Steps(k) => k,
    };
    if let SketchDistribution::UniformCoordinate = dist {
        let p = projection_expectation(b, dist, 0, seed)?;
        let c = c_star(&p, tau);
        let mut q = omega.clone();
        for _ in 0..k {
            q = coordinate_sandwich(b, &q)?;
        }
        let co = &c * omega;
        return Ok(symmetrized(omega - &co - co.transpose() + q));
    }
    if mc_samples == 0 {
        return Err(Error::Parameter(
            "Monte-Carlo sample count must be positive".into(),
        ));
    }
    let sum = chunked_mc(
        mc_samples,
        seed,
        || Ok(DMatrix::zeros(d, d)),
        |acc: &mut Result<DMatrix<f64>>, r| {
            if let Ok(m) = acc {
                let mut ct = DMatrix::identity(d, d);
                for _ in 0..k {
                    match sketch_projection(b, &dist.sample(d, r)) {
                        Ok(pi) => ct = (DMatrix::identity(d, d) - pi) * ct,
                        Err(e) => {
                            *acc = Err(e);
                            return;
                        }
                    }
                }
                let keep = DMatrix::identity(d, d) - ct;
                *m += &keep * omega * keep.transpose();
            }
        },
        |a, b| Ok(a? + b?),
    )?;
    Ok(symmetrized(sum / mc_samples as f64))
}

/// Solves `AΞ + ΞA = Λ`, `A = (1 − shift/2)I − C⋆`, through the
/// eigendecomposition `I − C⋆ = UΣUᵀ`:
/// `Ξ⋆ = U(Θ ∘ UᵀΛU)Uᵀ`, `Θ_kl = 1/(σ_k + σ_l − shift)`.
pub fn xi_star(c: &DMatrix<f64>, lambda: &DMatrix<f64>, regime: Regime) -> Result<DMatrix<f64>> {
    let d = c.nrows();
    check_dim("xi_star: Lambda", d, lambda.nrows())?;
    let shift = regime.shift();
    let eig = symmetrized(DMatrix::identity(d, d) - c).symmetric_eigen();
    let sig = &eig.eigenvalues;
    if sig.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Regime("I - C* is not positive definite".into()));
    }
    let u = &eig.eigenvectors;
    let mut inner = u.transpose() * lambda * u;
    for l in 0..d {
        for k in 0..d {
            let den = sig[k] + sig[l] - shift;
            if !(den > 0.0) {
                return Err(Error::Regime(format!(
                    "nonpositive Lyapunov denominator {den:e}; need c_beta > 1/(2 lambda_min(I - C*))"
                )));
            }
            inner[(k, l)] /= den;
        }
    }
    Ok(symmetrized(u * inner * u.transpose()))
}

/// `‖AΞ + ΞA − Λ‖₂` with `A = (1 − shift/2)I − C⋆`.
pub fn lyapunov_residual(
    c: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    regime: Regime,
) -> f64 {
    let d = c.nrows();
    let a = DMatrix::identity(d, d) * (1.0 - regime.shift() / 2.0) - c;
    let r = &a * xi + xi * &a - lambda;
    sym_spectral_norm(&symmetrized(r))
}

/// All ingredients of the limiting covariance for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCovariance {
    pub b_star: DMatrix<f64>,
    pub omega_star: DMatrix<f64>,
    pub c_star: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub xi_star: DMatrix<f64>,
    pub regime: Regime,
    /// Entrywise MC standard errors of `B⋆` (logistic models only).
    pub b_star_se: Option<DMatrix<f64>>,
}

impl OracleCovariance {
    /// Builds the oracle from `B⋆`, `Ω⋆` and the sketch configuration.
    pub fn from_parts(
        b_star: DMatrix<f64>,
        omega_star: DMatrix<f64>,
        solve: &SketchSolveConfig,
        regime: Regime,
        mc_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = b_star.nrows();
        check_dim("oracle: Omega", d, omega_star.nrows())?;
        let c = match solve.tau {
            Tau::Exact => DMatrix::zeros(d, d),
            tau => c_star(
                &projection_expectation(&b_star, &solve.dist, mc_samples, seed)?,
                tau,
            ),
        };
        let lambda = lambda_matrix(
            &b_star,
            &omega_star,
            &solve.dist,
            solve.tau,
            mc_samples,
            seed ^ 0x5eed,
        )?;
        let xi = xi_star(&c, &lambda, regime)?;
        Ok(Self {
            b_star,
            omega_star,
            c_star: c,
            lambda,
            xi_star: xi,
            regime,
            b_star_se: None,
        })
    }

    /// Oracle for a regression model solved with `solve` under `regime`.
    pub fn for_regression(
        model: &RegressionModel,
        solve: &SketchSolveConfig,
        regime: Regime,
        mc_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let moments = population_moments(model, mc_samples, seed)?;
        let omega = moments.omega()?;
        let mut out = Self::from_parts(
            moments.hessian,
            omega,
            solve,
            regime,
            DEFAULT_SKETCH_MC_SAMPLES,
            seed,
        )?;
        out.b_star_se = moments.hessian_se;
        Ok(out)
    }

    pub fn lyapunov_residual(&self) -> f64 {
        lyapunov_residual(&self.c_star, &self.xi_star, &self.lambda, self.regime)
    }
}

/// Symmetric PSD part of `m`: negative eigenvalues are set to zero.
pub fn psd_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrized(m.clone()).symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// `‖Ξ̂ − Ξ⋆‖₂ / ‖Ξ⋆‖₂`.
pub fn rel_cov_err(estimate: &DMatrix<f64>, oracle: &DMatrix<f64>) -> f64 {
    sym_spectral_norm(&symmetrized(estimate - oracle)) / sym_spectral_norm(oracle)
}

/// `wᵀ(Ξ̂ − Ξ⋆)w / wᵀΞ⋆w`, signed.
pub fn rel_var_err(estimate: &DMatrix<f64>, oracle: &DMatrix<f64>, w: &DVector<f64>) -> f64 {
    (quad_form(estimate, w) - quad_form(oracle, w)) / quad_form(oracle, w)
}

/// One row per line, entries separated by a single space, full precision.
pub fn write_matrix_text(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Parses whitespace-separated rows; blank lines and `#` lines are skipped.
pub fn parse_matrix_text(text: &str) -> Result<DMatrix<f64>> {
    let named = parse_named_matrices(text)?;
    match named.len() {
        1 => Ok(named.into_iter().next().map(|(_, m)| m).unwrap_or_default()),
        0 => Err(Error::Parameter("no matrix rows found".into())),
        n => Err(Error::Parameter(format!(
            "expected one matrix, found {n} named blocks"
        ))),
    }
}

/// Parses a sequence of `# name` headers each followed by matrix rows.
/// Rows before any header form a block with an empty name.
pub fn parse_named_matrices(text: &str) -> Result<Vec<(String, DMatrix<f64>)>> {
    let mut blocks: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('#') {
            blocks.push((name.trim().to_string(), Vec::new()));
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::Parameter(format!("line {}: invalid number {tok:?}", lineno + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if blocks.is_empty() {
            blocks.push((String::new(), Vec::new()));
        }
        let rows = &mut blocks.last_mut().expect("block pushed above").1;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parameter(format!(
                    "line {}: row has {} entries, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    blocks
        .into_iter()
        .filter(|(_, rows)| !rows.is_empty())
        .map(|(name, rows)| {
            let ncols = rows[0].len();
            let m = DMatrix::from_row_iterator(rows.len(), ncols, rows.into_iter().flatten());
            Ok((name, m))
        })
        .collect()
}
