//! Sketching distributions and the sketch-and-project solver.
//!
//! Each inner step projects the current direction onto the affine set
//! `{Δx : SᵀBΔx = -Sᵀg}` in the Euclidean metric:
//!
//! ```text
//! Δx_{j+1} = Δx_j − B S (Sᵀ B² S)† Sᵀ (B Δx_j + g)
//! ```
//!
//! Coordinate sketches (`S = e_i`) only touch one column of `B`, so a step
//! costs `O(d)` and never forms a factorization.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::check_dim;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum SketchDistribution {
    /// `S = e_i`, `i ~ Unif{1..d}` (randomized Kaczmarz).
    UniformCoordinate,
    /// `q` i.i.d. columns from `N(0, Σ)`; `chol` is the lower Cholesky
    /// factor of `Σ`, or `None` for the identity.
    Gaussian {
        q: usize,
        chol: Option<DMatrix<f64>>,
    },
    /// `q` distinct canonical columns drawn uniformly without replacement.
    CoordinateBlock { q: usize },
}

impl SketchDistribution {
    pub fn gaussian_identity(q: usize) -> Self {
        Self::Gaussian { q, chol: None }
    }

    /// Gaussian sketch with column covariance `cov`.
    pub fn gaussian(q: usize, cov: &DMatrix<f64>) -> Result<Self> {
        let l = cov
            .clone()
            .cholesky()
            .ok_or_else(|| {
                Error::Factorization("sketch covariance is not positive definite".into())
            })?
            .l();
        Ok(Self::Gaussian { q, chol: Some(l) })
    }

    pub fn columns(&self) -> usize {
        match self {
            Self::UniformCoordinate => 1,
            Self::Gaussian { q, .. } | Self::CoordinateBlock { q } => *q,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(Error::Parameter(
                "sketch dimension must be at least 1".into(),
            ));
        }
        match self {
            Self::UniformCoordinate => Ok(()),
            Self::Gaussian { q, chol } => {
                if *q == 0 {
                    return Err(Error::Parameter("sketch width q must be at least 1".into()));
                }
                if let Some(l) = chol {
                    check_dim("gaussian sketch covariance", d, l.nrows())?;
                }
                Ok(())
            }
            Self::CoordinateBlock { q } => {
                if *q == 0 || *q > d {
                    return Err(Error::Parameter(format!(
                        "coordinate block width must lie in 1..={d}, got {q}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// One draw in structured form.
    pub fn sample(&self, d: usize, rng: &mut Rng) -> Sketch {
        match self {
            Self::UniformCoordinate => Sketch::Coordinate(rng.random_range(0..d)),
            Self::CoordinateBlock { q } => {
                let mut idx = index::sample(rng, d, *q).into_vec();
                idx.sort_unstable();
                Sketch::Dense(DMatrix::from_fn(d, idx.len(), |i, k| {
                    if i == idx[k] {
                        1.0
                    } else {
                        0.0
                    }
                }))
            }
            Self::Gaussian { q, chol } => {
                let z = DMatrix::from_fn(d, *q, |_, _| rng.sample::<f64, _>(StandardNormal));
                Sketch::Dense(match chol {
                    Some(l) => l * z,
                    None => z,
                })
            }
        }
    }
}

/// A drawn sketch.
#[derive(Debug, Clone, PartialEq)]
pub enum Sketch {
    Coordinate(usize),
    Dense(DMatrix<f64>),
}

impl Sketch {
    pub fn to_matrix(&self, d: usize) -> DMatrix<f64> {
        match self {
            Self::Coordinate(i) => {
                let mut m = DMatrix::zeros(d, 1);
                m[(*i, 0)] = 1.0;
                m
            }
            Self::Dense(m) => m.clone(),
        }
    }
}

/// One draw `S ∈ ℝ^{d×q}` from `dist`.
pub fn draw_sketch(dist: &SketchDistribution, d: usize, rng: &mut Rng) -> DMatrix<f64> {
    dist.sample(d, rng).to_matrix(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tau {
    Steps(usize),
    /// Direct solve of the Newton system.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchSolveConfig {
    pub dist: SketchDistribution,
    pub tau: Tau,
    /// Relative pseudoinverse cutoff; the absolute threshold for a sketch is
    /// `pinv_tol · ‖B‖_F² · ‖S‖_F²`.
    pub pinv_tol: f64,
}

impl SketchSolveConfig {
    pub const DEFAULT_PINV_TOL: f64 = 1e-12;

    pub fn kaczmarz(tau: usize) -> Self {
        Self {
            dist: SketchDistribution::UniformCoordinate,
            tau: Tau::Steps(tau),
            pinv_tol: Self::DEFAULT_PINV_TOL,
        }
    }

    pub fn exact() -> Self {
        Self {
            dist: SketchDistribution::UniformCoordinate,
            tau: Tau::Exact,
            pinv_tol: Self::DEFAULT_PINV_TOL,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if let Tau::Steps(0) = self.tau {
            return Err(Error::Parameter(
                "number of sketch steps must be at least 1".into(),
            ));
        }
        if !(self.pinv_tol >= 0.0) {
            return Err(Error::Parameter("pinv_tol must be nonnegative".into()));
        }
        self.dist.validate(d)
    }
}

/// One sketch-and-project step for a dense sketch `S`.
///
/// Returns `dx − B S (SᵀB²S)† Sᵀ(B dx + g)`. Eigenvalues of `SᵀB²S` at or
/// below `pinv_tol` are treated as zero; a fully degenerate sketch returns
/// `dx` unchanged.
pub fn sketch_project_step(
    b: &DMatrix<f64>,
    g: &DVector<f64>,
    dx: &DVector<f64>,
    s: &DMatrix<f64>,
    pinv_tol: f64,
) -> Result<DVector<f64>> {
    let d = b.nrows();
    check_dim("sketch_project_step: B columns", d, b.ncols())?;
    check_dim("sketch_project_step: g", d, g.len())?;
    check_dim("sketch_project_step: dx", d, dx.len())?;
    check_dim("sketch_project_step: S rows", d, s.nrows())?;

    let bs = b * s;
    let residual = b * dx + g;
    let rhs = s.transpose() * &residual;
    let gram = bs.transpose() * &bs;

    let coef = if gram.nrows() == 1 {
        let denom = gram[(0, 0)];
        if denom <= pinv_tol {
            return Ok(dx.clone());
        }
        DVector::from_element(1, rhs[0] / denom)
    } else {
        pinv_sym(&gram, pinv_tol) * rhs
    };
    Ok(dx - bs * coef)
}

/// Moore-Penrose pseudoinverse of a symmetric PSD matrix, zeroing
/// eigenvalues at or below `tol`.
fn pinv_sym(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > tol {
            let u = eig.eigenvectors.column(k);
            out.ger(1.0 / lam, &u, &u, 1.0);
        }
    }
    out
}

/// Coordinate step in place: `dx ← dx − b_i (b_iᵀdx + g_i)/‖b_i‖²` with
/// `b_i` the i-th column of symmetric `B`.
#[inline]
pub(crate) fn coordinate_step(
    b: &DMatrix<f64>,
    g: &DVector<f64>,
    dx: &mut DVector<f64>,
    i: usize,
    tol: f64,
) {
    let col = b.column(i);
    let denom = col.norm_squared();
    if denom <= tol {
        return;
    }
    let r = col.dot(dx) + g[i];
    dx.axpy(-r / denom, &col, 1.0);
}

/// Approximate Newton direction: `τ` sketch-and-project steps on
/// `BΔx = −g` from `Δx = 0`, or a Cholesky solve for [`Tau::Exact`].
pub fn solve_newton_sketched(
    b: &DMatrix<f64>,
    g: &DVector<f64>,
    cfg: &SketchSolveConfig,
    rng: &mut Rng,
) -> Result<DVector<f64>> {
    let d = g.len();
    check_dim("solve_newton_sketched: B", d, b.nrows())?;
    let mut dx = DVector::zeros(d);
    solve_newton_sketched_into(b, g, cfg, rng, &mut dx)?;
    Ok(dx)
}

/// In-place variant of [`solve_newton_sketched`]; `dx` is overwritten.
pub fn solve_newton_sketched_into(
    b: &DMatrix<f64>,
    g: &DVector<f64>,
    cfg: &SketchSolveConfig,
    rng: &mut Rng,
    dx: &mut DVector<f64>,
) -> Result<()> {
    let d = g.len();
    match cfg.tau {
        Tau::Exact => {
            let chol = b.clone().cholesky().ok_or_else(|| {
                Error::Factorization("averaged Hessian is not positive definite".into())
            })?;
            dx.copy_from(g);
            chol.solve_mut(dx);
            dx.neg_mut();
            Ok(())
        }
        Tau::Steps(tau) => {
            dx.fill(0.0);
            let b_norm2 = b.norm_squared();
            let tol = cfg.pinv_tol * b_norm2;
            for _ in 0..tau {
                match cfg.dist.sample(d, rng) {
                    Sketch::Coordinate(i) => coordinate_step(b, g, dx, i, tol),
                    Sketch::Dense(s) => {
                        let step_tol = tol * s.norm_squared();
                        *dx = sketch_project_step(b, g, dx, &s, step_tol)?;
                    }
                }
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_spd(d: usize, rng: &mut Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.5
    }

    #[test]
    fn coordinate_sketch_is_canonical() {
        let mut r = rng::aux(1);
        for _ in 0..50 {
            let s = draw_sketch(&SketchDistribution::UniformCoordinate, 4, &mut r);
            assert_eq!(s.shape(), (4, 1));
            assert_eq!(s.iter().filter(|v| **v == 1.0).count(), 1);
            assert_eq!(s.iter().filter(|v| **v == 0.0).count(), 3);
        }
    }

    #[test]
    fn coordinate_frequencies_are_uniform() {
        let mut r = rng::aux(2);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            match SketchDistribution::UniformCoordinate.sample(4, &mut r) {
                Sketch::Coordinate(i) => counts[i] += 1,
                Sketch::Dense(_) => unreachable!(),
            }
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn gaussian_sketch_second_moment() {
        let mut r = rng::aux(3);
        let dist = SketchDistribution::gaussian_identity(2);
        let n = 50_000;
        let mut acc = DMatrix::zeros(3, 3);
        for _ in 0..n {
            let s = draw_sketch(&dist, 3, &mut r);
            assert_eq!(s.shape(), (3, 2));
            acc += &s * s.transpose();
        }
        // Each of the q = 2 columns contributes I.
        acc /= 2.0 * n as f64;
        assert!((acc - DMatrix::<f64>::identity(3, 3)).abs().max() < 0.05);
    }

    #[test]
    fn block_sketch_has_distinct_columns() {
        let mut r = rng::aux(4);
        let s = draw_sketch(&SketchDistribution::CoordinateBlock { q: 3 }, 5, &mut r);
        assert_eq!(s.shape(), (5, 3));
        let rows: Vec<usize> = (0..3)
            .map(|k| s.column(k).iter().position(|v| *v == 1.0).unwrap())
            .collect();
        assert!(rows[0] < rows[1] && rows[1] < rows[2]);
    }

    #[test]
    fn identity_coordinate_projection() {
        let b = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![3.0, -1.5]);
        let dx = DVector::zeros(2);
        let s = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let out = sketch_project_step(&b, &g, &dx, &s, 0.0).unwrap();
        assert_eq!(out, DVector::from_vec(vec![-3.0, 0.0]));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let b = DMatrix::identity(3, 3);
        let g = DVector::zeros(2);
        let dx = DVector::zeros(3);
        let s = DMatrix::zeros(3, 1);
        assert!(matches!(
            sketch_project_step(&b, &g, &dx, &s, 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn degenerate_sketch_skips() {
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        let g = DVector::from_vec(vec![1.0, 1.0]);
        let dx = DVector::from_vec(vec![0.3, 0.4]);
        let s = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert_eq!(sketch_project_step(&b, &g, &dx, &s, 1e-12).unwrap(), dx);
    }

    #[test]
    fn sketched_equations_hold_after_step() {
        let mut r = rng::aux(5);
        for q in [1, 2, 3] {
            let dist = SketchDistribution::gaussian_identity(q);
            for _ in 0..100 {
                let b = random_spd(4, &mut r);
                let g = DVector::from_fn(4, |_, _| r.sample::<f64, _>(StandardNormal));
                let dx = DVector::from_fn(4, |_, _| r.sample::<f64, _>(StandardNormal));
                let s = draw_sketch(&dist, 4, &mut r);
                let out = sketch_project_step(&b, &g, &dx, &s, 1e-14).unwrap();
                let resid = s.transpose() * (&b * &out + &g);
                assert!(
                    resid.amax() < 1e-10 * (1.0 + g.norm()),
                    "q={q} resid={resid}"
                );
            }
        }
    }

    #[test]
    fn error_is_monotone() {
        let mut r = rng::aux(6);
        for _ in 0..1000 {
            let b = random_spd(4, &mut r);
            let g = DVector::from_fn(4, |_, _| r.sample::<f64, _>(StandardNormal));
            let dx = DVector::from_fn(4, |_, _| r.sample::<f64, _>(StandardNormal));
            let s = draw_sketch(&SketchDistribution::UniformCoordinate, 4, &mut r);
            let out = sketch_project_step(&b, &g, &dx, &s, 0.0).unwrap();
            let sol = -b.clone().lu().solve(&g).unwrap();
            let before = (&dx - &sol).norm();
            let after = (&out - &sol).norm();
            assert!(after <= before + 1e-12, "{after} > {before}");
        }
    }

    #[test]
    fn exact_diagonal_solve() {
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let g = DVector::from_vec(vec![1.0, 1.0]);
        let mut r = rng::aux(7);
        let dx = solve_newton_sketched(&b, &g, &SketchSolveConfig::exact(), &mut r).unwrap();
        assert!((dx - DVector::from_vec(vec![-1.0, -0.5])).amax() < 1e-15);
    }

    #[test]
    fn exact_rejects_indefinite() {
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -2.0]));
        let g = DVector::from_vec(vec![1.0, 1.0]);
        let mut r = rng::aux(7);
        assert!(matches!(
            solve_newton_sketched(&b, &g, &SketchSolveConfig::exact(), &mut r),
            Err(Error::Factorization(_))
        ));
    }

    #[test]
    fn identity_coordinates_solve_exactly_once_all_seen() {
        let b = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![0.7, -2.5]);
        for seed in 0..20 {
            let cfg = SketchSolveConfig::kaczmarz(12);
            let mut probe = rng::aux(seed);
            let mut seen = [false; 2];
            for _ in 0..12 {
                if let Sketch::Coordinate(i) = cfg.dist.sample(2, &mut probe) {
                    seen[i] = true;
                }
            }
            let mut r = rng::aux(seed);
            let dx = solve_newton_sketched(&b, &g, &cfg, &mut r).unwrap();
            if seen[0] && seen[1] {
                assert_eq!(dx, -&g);
            }
        }
    }

    #[test]
    fn coordinate_path_matches_dense_formula() {
        // Independent straight-line loop over the dense recursion with the
        // same sketch sequence.
        let mut r = rng::aux(8);
        let b = random_spd(5, &mut r);
        let g = DVector::from_fn(5, |_, _| r.sample::<f64, _>(StandardNormal));
        let cfg = SketchSolveConfig::kaczmarz(17);
        let mut r1 = rng::aux(99);
        let fast = solve_newton_sketched(&b, &g, &cfg, &mut r1).unwrap();

        let mut r2 = rng::aux(99);
        let mut dx = DVector::<f64>::zeros(5);
        for _ in 0..17 {
            let s = draw_sketch(&cfg.dist, 5, &mut r2);
            let bs = &b * &s;
            let denom = (bs.transpose() * &bs)[(0, 0)];
            let num = (s.transpose() * (&b * &dx + &g))[0];
            dx -= bs.column(0) * (num / denom);
        }
        assert!((fast - dx).amax() < 1e-14);
    }

    #[test]
    fn validate_rejects_zero_steps() {
        let mut cfg = SketchSolveConfig::kaczmarz(1);
        cfg.tau = Tau::Steps(0);
        assert!(cfg.validate(3).is_err());
        assert!(SketchSolveConfig {
            dist: SketchDistribution::CoordinateBlock { q: 4 },
            tau: Tau::Steps(2),
            pinv_tol: 0.0
        }
        .validate(3)
        .is_err());
    }
}
