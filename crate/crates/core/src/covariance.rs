//! Online estimators of the limiting covariance.
//!
//! The weighted sample covariance (WSC) is
//!
//! ```text
//! Ξ̂_t = (1/t) Σ_{i=1..t} (x_i − x̄_t)(x_i − x̄_t)ᵀ / φ_{i−1}
//!     = W_t − v_t x̄_tᵀ − x̄_t v_tᵀ + a_t x̄_t x̄_tᵀ
//! ```
//!
//! with `W, v, x̄, a` running means, so memory is `O(d²)` regardless of `t`.
//! The weight paired with iterate `x_{t+1}` is `1/φ_t`.

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::error::check_dim;
use crate::linalg::{self, symmetrize};
use crate::optimizer::{Regime, StepsizeSchedule, TraceRecord, TraceSink};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WscAccumulator {
    w: DMatrix<f64>,
    v: DVector<f64>,
    xbar: DVector<f64>,
    a: f64,
    t: usize,
}

impl WscAccumulator {
    pub fn new(d: usize) -> Self {
        Self {
            w: DMatrix::zeros(d, d),
            v: DVector::zeros(d),
            xbar: DVector::zeros(d),
            a: 0.0,
            t: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn v(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn xbar(&self) -> &DVector<f64> {
        &self.xbar
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    /// Folds in `x_{t+1}` with weight `1/φ_t`.
    pub fn update(&mut self, x: &DVector<f64>, phi: f64) -> Result<()> {
        check_dim("wsc_update", self.dim(), x.len())?;
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::Parameter(format!(
                "stepsize weight must be positive, got {phi}"
            )));
        }
        let t = self.t as f64;
        let keep = t / (t + 1.0);
        let inv_phi = 1.0 / phi;
        let new = inv_phi / (t + 1.0);
        let d = self.dim();
        for j in 0..d {
            for i in 0..=j {
                let val = keep * self.w[(i, j)] + new * (x[i] * x[j]);
                self.w[(i, j)] = val;
                self.w[(j, i)] = val;
            }
        }
        self.v.axpy(new, x, keep);
        self.xbar.axpy(1.0 / (t + 1.0), x, keep);
        self.a = keep * self.a + new;
        self.t += 1;
        Ok(())
    }

    /// `Ξ̂_t`, symmetrized.
    pub fn estimate(&self) -> Result<DMatrix<f64>> {
        if self.t == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let mut m = self.w.clone();
        m.ger(-1.0, &self.v, &self.xbar, 1.0);
        m.ger(-1.0, &self.xbar, &self.v, 1.0);
        m.ger(self.a, &self.xbar, &self.xbar, 1.0);
        symmetrize(&mut m);
        Ok(m)
    }

    /// `wᵀ Ξ̂_t w` in `O(d²)` without forming `Ξ̂_t`.
    pub fn variance_along(&self, w: &DVector<f64>) -> Result<f64> {
        if self.t == 0 {
            return Err(Error::EmptyAccumulator);
        }
        check_dim("variance_along", self.dim(), w.len())?;
        let wv = w.dot(&self.v);
        let wx = w.dot(&self.xbar);
        Ok(linalg::quad_form(&self.w, w) - 2.0 * wv * wx + self.a * wx * wx)
    }
}

/// Feeds trace records into a [`WscAccumulator`], weighting `x_t` by
/// `1/φ_{t−1}` from the schedule.
#[derive(Debug, Clone)]
pub struct WscSink {
    pub acc: WscAccumulator,
    schedule: StepsizeSchedule,
}

impl WscSink {
    pub fn new(d: usize, schedule: StepsizeSchedule) -> Self {
        Self {
            acc: WscAccumulator::new(d),
            schedule,
        }
    }
}

impl TraceSink for WscSink {
    fn record(&mut self, rec: &TraceRecord<'_>) {
        let phi = self.schedule.phi_t(rec.t - 1);
        self.acc
            .update(rec.x, phi)
            .expect("trace dimension and schedule validated by the optimizer");
    }
}

/// Which 3×3 middle matrix to use in the rank-3 inverse update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiddleMatrix {
    /// `Λ_t⁻¹ = [[−a_t, 1, 0], [1, 0, 0], [0, 0, tφ_t]]`, the inverse of the
    /// matrix in `Ξ̂_{t+1} = t/(t+1)(Ξ̂_t + R_t Λ_t R_tᵀ)`. This is the variant
    /// that agrees with direct inversion.
    LambdaInverse,
    /// `[[a_t, 1, 0], [1, 0, 0], [0, 0, tφ_t]]`. Differs from the above in the
    /// sign of `a_t`; kept so the discrepancy can be checked numerically.
    SignFlipped,
}

impl MiddleMatrix {
    fn build(self, a: f64, t: f64, phi: f64) -> Matrix3<f64> {
        let a = match self {
            Self::LambdaInverse => -a,
            Self::SignFlipped => a,
        };
        Matrix3::new(a, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, t * phi)
    }
}

/// Rank-3 Sherman–Morrison–Woodbury update of `Ξ̂_t⁻¹` to `Ξ̂_{t+1}⁻¹`.
///
/// `acc_before` is the accumulator at time `t` (before `x_{t+1}` is added).
/// Returns [`Error::Factorization`] when the 3×3 capacitance matrix is
/// singular.
pub fn wsc_inverse_update(
    xi_inv: &DMatrix<f64>,
    acc_before: &WscAccumulator,
    x_next: &DVector<f64>,
    phi_t: f64,
    variant: MiddleMatrix,
) -> Result<DMatrix<f64>> {
    let d = acc_before.dim();
    check_dim("wsc_inverse_update: x", d, x_next.len())?;
    check_dim("wsc_inverse_update: inverse", d, xi_inv.nrows())?;
    if acc_before.t == 0 {
        return Err(Error::EmptyAccumulator);
    }
    let t = acc_before.t as f64;
    let xbar = &acc_before.xbar;
    let xbar_next = (xbar * t + x_next) / (t + 1.0);

    let mut r = DMatrix::zeros(d, 3);
    r.set_column(0, &(&acc_before.v - xbar * acc_before.a));
    r.set_column(1, &(xbar - &xbar_next));
    r.set_column(2, &(x_next - &xbar_next));

    let inv_r = xi_inv * &r;
    let inner = r.transpose() * &inv_r;
    let middle = variant.build(acc_before.a, t, phi_t);
    let cap = middle + Matrix3::from_iterator(inner.iter().copied());
    let cap_inv = cap
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Factorization("singular 3x3 capacitance matrix".into()))?;
    let cap_inv = DMatrix::from_iterator(3, 3, cap_inv.iter().copied());

    let scale = (t + 1.0) / t;
    let mut out = (xi_inv - &inv_r * cap_inv * inv_r.transpose()) * scale;
    symmetrize(&mut out);
    Ok(out)
}

/// WSC accumulator that also tracks `Ξ̂_t⁻¹` online after a burn-in.
///
/// At `t = burn_in` the inverse is initialized by one direct inversion;
/// later steps use [`wsc_inverse_update`]. A singular capacitance matrix
/// falls back to direct inversion of the current estimate.
#[derive(Debug, Clone)]
pub struct OnlineWscInverse {
    acc: WscAccumulator,
    xi_inv: Option<DMatrix<f64>>,
    burn_in: usize,
    variant: MiddleMatrix,
    fallbacks: usize,
}

impl OnlineWscInverse {
    /// Burn-in `10·d`.
    pub fn new(d: usize) -> Self {
        Self::with_burn_in(d, 10 * d)
    }

    pub fn with_burn_in(d: usize, burn_in: usize) -> Self {
        Self {
            acc: WscAccumulator::new(d),
            xi_inv: None,
            burn_in: burn_in.max(1),
            variant: MiddleMatrix::LambdaInverse,
            fallbacks: 0,
        }
    }

    pub fn with_variant(mut self, variant: MiddleMatrix) -> Self {
        self.variant = variant;
        self
    }

    pub fn accumulator(&self) -> &WscAccumulator {
        &self.acc
    }

    pub fn inverse(&self) -> Option<&DMatrix<f64>> {
        self.xi_inv.as_ref()
    }

    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    pub fn push(&mut self, x: &DVector<f64>, phi: f64) -> Result<()> {
        let next = match &self.xi_inv {
            Some(inv) => Some(
                match wsc_inverse_update(inv, &self.acc, x, phi, self.variant) {
                    Ok(m) => Some(m),
                    Err(Error::Factorization(_)) => None,
                    Err(e) => return Err(e),
                },
            ),
            None => None,
        };
        self.acc.update(x, phi)?;
        match next {
            Some(Some(m)) => self.xi_inv = Some(m),
            Some(None) => {
                self.fallbacks += 1;
                log::warn!(
                    "WSC inverse: capacitance singular at t={}, inverting directly",
                    self.acc.t
                );
                self.xi_inv = linalg::inverse(&self.acc.estimate()?).ok();
            }
            None if self.acc.t >= self.burn_in => {
                self.xi_inv = linalg::inverse(&self.acc.estimate()?).ok();
            }
            None => {}
        }
        Ok(())
    }
}

/// Scale `1/(2 − 1{β=1}/c_β)` of the plug-in estimator.
pub fn plugin_scale(regime: Regime) -> Result<f64> {
    let denom = 2.0 - regime.shift();
    if denom <= 0.0 {
        return Err(Error::Parameter(format!(
            "plug-in scale undefined for beta = 1 with c_beta = {} <= 0.5",
            regime.c_beta
        )));
    }
    Ok(1.0 / denom)
}

/// Running mean of gradient outer products for the plug-in estimator
/// `B_t⁻¹ G_t B_t⁻¹ / (2 − 1{β=1}/c_β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlugInAccumulator {
    g: DMatrix<f64>,
    t: usize,
}

impl PlugInAccumulator {
    pub fn new(d: usize) -> Self {
        Self {
            g: DMatrix::zeros(d, d),
            t: 0,
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn gradient_outer(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn update(&mut self, grad: &DVector<f64>) -> Result<()> {
        check_dim("plugin_update", self.g.nrows(), grad.len())?;
        let t = self.t as f64;
        let keep = t / (t + 1.0);
        let new = 1.0 / (t + 1.0);
        let d = grad.len();
        for j in 0..d {
            for i in 0..=j {
                let val = keep * self.g[(i, j)] + new * (grad[i] * grad[j]);
                self.g[(i, j)] = val;
                self.g[(j, i)] = val;
            }
        }
        self.t += 1;
        Ok(())
    }

    pub fn estimate(&self, b: &DMatrix<f64>, regime: Regime) -> Result<DMatrix<f64>> {
        plugin_estimate(self, b, regime)
    }
}

impl TraceSink for PlugInAccumulator {
    fn record(&mut self, rec: &TraceRecord<'_>) {
        self.update(rec.grad)
            .expect("trace dimension validated by the optimizer");
    }
}

pub fn plugin_estimate(
    acc: &PlugInAccumulator,
    b: &DMatrix<f64>,
    regime: Regime,
) -> Result<DMatrix<f64>> {
    if acc.t == 0 {
        return Err(Error::EmptyAccumulator);
    }
    check_dim("plugin_estimate", acc.g.nrows(), b.nrows())?;
    let scale = plugin_scale(regime)?;
    let b_inv = linalg::inverse(b)?;
    let mut m = &b_inv * &acc.g * &b_inv * scale;
    symmetrize(&mut m);
    Ok(m)
}

/// Right end `a_m = ⌊m^{2/(1−β)}⌋` of batch `m` (`a_0 = 0`).
pub fn batch_boundary(m: usize, beta: f64) -> usize {
    if m == 0 {
        return 0;
    }
    (m as f64).powf(2.0 / (1.0 - beta)).floor() as usize
}

/// Batch-means covariance over increasing batches of first-order iterates.
///
/// Batch `m` covers iterations `(a_{m−1}, a_m]`. Over the `M` completed
/// batches with means `b̄_m`, sizes `n_m`, and pooled mean `x̄`, the
/// estimate is `(1/M) Σ_m n_m (b̄_m − x̄)(b̄_m − x̄)ᵀ`, which targets the
/// covariance of `√t(x̄_t − x⋆)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMeansAccumulator {
    beta: f64,
    seen: usize,
    next_m: usize,
    next_end: usize,
    cur_sum: DVector<f64>,
    cur_count: usize,
    /// `Σ_m s_m s_mᵀ / n_m` with `s_m` the batch sum.
    outer: DMatrix<f64>,
    total: DVector<f64>,
    total_n: usize,
    batches: usize,
}

impl BatchMeansAccumulator {
    pub fn new(d: usize, beta: f64) -> Result<Self> {
        if !(beta > 0.5 && beta < 1.0) {
            return Err(Error::Parameter(format!(
                "batch-means schedule needs beta in (0.5, 1), got {beta}"
            )));
        }
        Ok(Self {
            beta,
            seen: 0,
            next_m: 1,
            next_end: batch_boundary(1, beta),
            cur_sum: DVector::zeros(d),
            cur_count: 0,
            outer: DMatrix::zeros(d, d),
            total: DVector::zeros(d),
            total_n: 0,
            batches: 0,
        })
    }

    pub fn completed_batches(&self) -> usize {
        self.batches
    }

    pub fn update(&mut self, x: &DVector<f64>) -> Result<()> {
        check_dim("batch_means_update", self.cur_sum.len(), x.len())?;
        self.seen += 1;
        self.cur_sum += x;
        self.cur_count += 1;
        if self.seen >= self.next_end {
            let n = self.cur_count as f64;
            self.outer.ger(1.0 / n, &self.cur_sum, &self.cur_sum, 1.0);
            self.total += &self.cur_sum;
            self.total_n += self.cur_count;
            self.batches += 1;
            self.cur_sum.fill(0.0);
            self.cur_count = 0;
            loop {
                self.next_m += 1;
                self.next_end = batch_boundary(self.next_m, self.beta);
                if self.next_end > self.seen {
                    break;
                }
            }
        }
        Ok(())
    }

    pub fn estimate(&self) -> Result<DMatrix<f64>> {
        if self.batches < 2 {
            return Err(Error::InsufficientData(format!(
                "batch means need at least 2 completed batches, have {}",
                self.batches
            )));
        }
        let n = self.total_n as f64;
        let mean = &self.total / n;
        // Σ n_m b̄ b̄ᵀ − N x̄ x̄ᵀ
        let mut m = self.outer.clone();
        m.ger(-n, &mean, &mean, 1.0);
        m /= self.batches as f64;
        symmetrize(&mut m);
        Ok(m)
    }
}

impl TraceSink for BatchMeansAccumulator {
    fn record(&mut self, rec: &TraceRecord<'_>) {
        self.update(rec.x)
            .expect("trace dimension validated by the optimizer");
    }
}

/// Running average `x̄_t = (1/t) Σ x_i` of the iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMean {
    pub mean: DVector<f64>,
    pub n: usize,
}

impl RunningMean {
    pub fn new(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            n: 0,
        }
    }

    pub fn push(&mut self, x: &DVector<f64>) {
        self.n += 1;
        let n = self.n as f64;
        self.mean.axpy(1.0 / n, x, (n - 1.0) / n);
    }
}

impl TraceSink for RunningMean {
    fn record(&mut self, rec: &TraceRecord<'_>) {
        self.push(rec.x);
    }
}
