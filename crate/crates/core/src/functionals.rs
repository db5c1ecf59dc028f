//! Free-energy functionals and their Sinkhorn-Wasserstein proximal operators.
//!
//! A worker's proximal step solves
//!
//! ```text
//! min_{mu}  min_{M in Pi(mu, zeta)} <C/2 + eps log M, M> + (1/alpha) G(mu)
//! ```
//!
//! whose optimal plan has the form `M = diag(z) Gamma diag(y)` with
//! `y = zeta / (Gamma z)` and `mu = z * (Gamma y)`. The scaling `z` is explicit
//! for linear `G` and the fixed point of a contractive recursion otherwise:
//!
//! * log entropy `<a, mu> + b <log mu, mu>`:
//!   `-alpha eps log z = a + b (log mu + 1)`, solved for `z` in closed form
//!   given `Gamma y`;
//! * quadratic `<a, mu> + b <mu, mu>`:
//!   `mu = (beta / 2)(-alpha eps log z - a)`, where for fixed `w = Gamma y` the
//!   scalar equation `z w = (beta / 2)(-alpha eps log z - a)` is solved per
//!   coordinate by Newton's method on `t + ln t = s`.
//!
//! All recursions run on `log z` and `log y` through the kernel's stabilized
//! `log_apply`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::measures::{GibbsKernel, ProbabilityVector, SampleSet};

/// Internal-energy part of a functional.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Internal {
    None,
    /// `beta^{-1} <log mu, mu>`.
    LogEntropy { beta: f64 },
    /// `beta^{-1} <mu, mu>` (power law with exponent 2).
    PowerLaw { beta: f64 },
}

/// One summand `F_i = <V, mu> + <U mu, mu> + internal(mu)`.
///
/// The interaction term is treated semi-implicitly: its proximal step uses the
/// linearization `<U mu_prev, mu>` at the worker's previous iterate.
#[derive(Clone, Debug)]
pub struct FreeEnergyFunctional {
    drift: DVector<f64>,
    interaction: Option<DMatrix<f64>>,
    internal: Internal,
}

impl FreeEnergyFunctional {
    pub fn new(drift: DVector<f64>, interaction: Option<DMatrix<f64>>, internal: Internal) -> Result<Self> {
        let n = drift.len();
        if drift.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("drift", "entries must be finite"));
        }
        if let Some(u) = &interaction {
            if u.nrows() != n || u.ncols() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: u.nrows(),
                });
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::param("interaction", "entries must be finite"));
            }
            let scale = u.amax().max(1.0);
            if (u - u.transpose()).amax() > 1e-12 * scale {
                return Err(Error::param("interaction", "matrix must be symmetric"));
            }
        }
        match internal {
            Internal::LogEntropy { beta } | Internal::PowerLaw { beta } if !(beta.is_finite() && beta > 0.0) => {
                return Err(Error::param("beta", format!("must be positive, got {beta}")));
            }
            _ => {}
        }
        Ok(Self {
            drift,
            interaction,
            internal,
        })
    }

    /// The functional `<a, mu>`.
    pub fn linear(a: DVector<f64>) -> Result<Self> {
        Self::new(a, None, Internal::None)
    }

    pub fn len(&self) -> usize {
        self.drift.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drift.is_empty()
    }

    pub fn drift(&self) -> &DVector<f64> {
        &self.drift
    }

    pub fn interaction(&self) -> Option<&DMatrix<f64>> {
        self.interaction.as_ref()
    }

    pub fn internal(&self) -> Internal {
        self.internal
    }

    /// Value `F(mu)` with the interaction term evaluated exactly.
    pub fn evaluate(&self, mu: &DVector<f64>) -> f64 {
        let mut value = self.drift.dot(mu);
        if let Some(u) = &self.interaction {
            value += (u * mu).dot(mu);
        }
        value
            + match self.internal {
                Internal::None => 0.0,
                Internal::LogEntropy { beta } => {
                    mu.iter().filter(|&&m| m > 0.0).map(|&m| m * m.ln()).sum::<f64>() / beta
                }
                Internal::PowerLaw { beta } => mu.dot(mu) / beta,
            }
    }
}

/// Parameters of one proximal step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProxParams {
    /// ADMM penalty.
    pub alpha: f64,
    /// Stop the fixed-point recursion once the largest relative change of `z`
    /// falls to this value.
    pub delta: f64,
    /// Maximum fixed-point sweeps.
    pub max_sweeps: usize,
}

impl ProxParams {
    pub fn new(alpha: f64, delta: f64, max_sweeps: usize) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::param("alpha", format!("must be positive, got {alpha}")));
        }
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::param("delta", format!("must be positive, got {delta}")));
        }
        if max_sweeps == 0 {
            return Err(Error::param("max_sweeps", "must be at least 1"));
        }
        Ok(Self {
            alpha,
            delta,
            max_sweeps,
        })
    }
}

/// Output of a proximal step.
#[derive(Clone, Debug)]
pub struct ProxSolution {
    pub mu: ProbabilityVector,
    /// Total mass before renormalization.
    pub raw_mass: f64,
    /// Fixed-point sweeps performed (0 for the closed-form linear case).
    pub sweeps: usize,
    /// Largest relative change of `z` in each sweep.
    pub changes: Vec<f64>,
    /// Whether the recursion met its tolerance. A non-converged solution is the
    /// last iterate.
    pub converged: bool,
}

/// `a = V + U mu_prev + nu`.
pub fn effective_drift(f: &FreeEnergyFunctional, nu: &DVector<f64>, mu_prev: &ProbabilityVector) -> DVector<f64> {
    let mut a = &f.drift + nu;
    if let Some(u) = &f.interaction {
        a += u * mu_prev.values();
    }
    a
}

fn check_inputs(a: &DVector<f64>, zeta: &ProbabilityVector, kernel: &GibbsKernel) -> Result<()> {
    let n = kernel.len();
    for got in [a.len(), zeta.len()] {
        if got != n {
            return Err(Error::DimensionMismatch { expected: n, got });
        }
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("a", "drift entries must be finite"));
    }
    zeta.require_positive("zeta")
}

/// Given `log z`, recomputes `y` so that the plan's column marginal is `zeta`
/// and returns `mu = z * (Gamma y)`.
fn close_plan(log_z: &DVector<f64>, log_zeta: &DVector<f64>, kernel: &GibbsKernel) -> Result<(DVector<f64>, f64)> {
    let log_y = log_zeta - kernel.log_apply(log_z);
    let log_mu = log_z + kernel.log_apply(&log_y);
    if log_mu.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Underflow("proximal scaling"));
    }
    let mu = log_mu.map(f64::exp);
    if mu.iter().any(|&m| m <= 0.0) {
        return Err(Error::Underflow("proximal scaling"));
    }
    let mass = mu.sum();
    Ok((mu, mass))
}

fn finish(mu: DVector<f64>, raw_mass: f64, sweeps: usize, changes: Vec<f64>, converged: bool) -> Result<ProxSolution> {
    Ok(ProxSolution {
        mu: ProbabilityVector::renormalized(mu)?,
        raw_mass,
        sweeps,
        changes,
        converged,
    })
}

/// Closed-form proximal step for `G = <a, mu>`:
/// `mu = z * Gamma(zeta / Gamma z)` with `z = exp(-a / (alpha eps))`.
pub fn prox_linear(a: &DVector<f64>, zeta: &ProbabilityVector, kernel: &GibbsKernel, alpha: f64) -> Result<ProbabilityVector> {
    Ok(prox_linear_solution(a, zeta, kernel, alpha)?.mu)
}

fn prox_linear_solution(a: &DVector<f64>, zeta: &ProbabilityVector, kernel: &GibbsKernel, alpha: f64) -> Result<ProxSolution> {
    check_inputs(a, zeta, kernel)?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::param("alpha", format!("must be positive, got {alpha}")));
    }
    let scale = -1.0 / (alpha * kernel.epsilon());
    let log_z = a * scale;
    let (mu, mass) = close_plan(&log_z, &zeta.ln(), kernel)?;
    finish(mu, mass, 0, Vec::new(), true)
}

/// Largest `|z_new / z_old - 1|`.
fn relative_change(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    new.iter()
        .zip(old.iter())
        .map(|(n, o)| (n - o).exp_m1().abs())
        .fold(0.0, f64::max)
}

/// Proximal step for `G = <a, mu> + beta^{-1} <log mu, mu>`.
///
/// Iterates `y <- zeta / (Gamma z)`,
/// `z <- exp(-(beta a + 1) / (1 + beta alpha eps)) * (Gamma y)^(-1 / (1 + beta alpha eps))`
/// from `z = 1`.
pub fn prox_log_entropy(
    beta: f64,
    a: &DVector<f64>,
    zeta: &ProbabilityVector,
    kernel: &GibbsKernel,
    params: &ProxParams,
) -> Result<ProxSolution> {
    check_inputs(a, zeta, kernel)?;
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::param("beta", format!("must be positive, got {beta}")));
    }
    let kappa = 1.0 / (1.0 + beta * params.alpha * kernel.epsilon());
    let offset = a.map(|ai| -(beta * ai + 1.0) * kappa);
    let log_zeta = zeta.ln();

    let mut log_z = DVector::zeros(kernel.len());
    let mut changes = Vec::new();
    let mut converged = false;
    for _ in 0..params.max_sweeps {
        let log_y = &log_zeta - kernel.log_apply(&log_z);
        let log_w = kernel.log_apply(&log_y);
        let next = &offset - log_w * kappa;
        let change = relative_change(&next, &log_z);
        log_z = next;
        changes.push(change);
        if change <= params.delta {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!(
            "entropy prox stopped after {} sweeps with relative change {:.3e}",
            changes.len(),
            changes.last().copied().unwrap_or(f64::NAN)
        );
    }
    let (mu, mass) = close_plan(&log_z, &log_zeta, kernel)?;
    let sweeps = changes.len();
    finish(mu, mass, sweeps, changes, converged)
}

/// Solves `e^u + u = s` for `u` (so `t = e^u` solves `t + ln t = s`).
fn solve_t_plus_log_t(s: f64) -> f64 {
    let mut u = if s <= 1.0 { s } else { s.ln() };
    for _ in 0..100 {
        let e = u.exp();
        let step = (e + u - s) / (e + 1.0);
        u -= step;
        if step.abs() <= 1e-15 * u.abs().max(1.0) {
            break;
        }
    }
    u
}

/// Proximal step for `G = <a, mu> + beta^{-1} <mu, mu>`.
///
/// Stationarity of the plan objective gives `mu = (beta / 2)(-alpha eps log z - a)`
/// with `mu = z * (Gamma y)`. Each sweep updates `y <- zeta / (Gamma z)` and then
/// solves the scalar equation for every `z_j` exactly: writing `w = Gamma y`,
/// `c = beta alpha eps / 2` and `z = c t / w`, the unknown `t > 0` satisfies
/// `t + ln t = ln w - ln c - a / (alpha eps)`.
pub fn prox_power_law(
    beta: f64,
    a: &DVector<f64>,
    zeta: &ProbabilityVector,
    kernel: &GibbsKernel,
    params: &ProxParams,
) -> Result<ProxSolution> {
    check_inputs(a, zeta, kernel)?;
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::param("beta", format!("must be positive, got {beta}")));
    }
    let ae = params.alpha * kernel.epsilon();
    let log_c = (beta * ae / 2.0).ln();
    let shift = a.map(|ai| -log_c - ai / ae);
    let log_zeta = zeta.ln();

    let mut log_z = DVector::zeros(kernel.len());
    let mut changes = Vec::new();
    let mut converged = false;
    for _ in 0..params.max_sweeps {
        let log_y = &log_zeta - kernel.log_apply(&log_z);
        let log_w = kernel.log_apply(&log_y);
        let next = DVector::from_fn(kernel.len(), |j, _| {
            let log_t = solve_t_plus_log_t(log_w[j] + shift[j]);
            log_c + log_t - log_w[j]
        });
        let bad: Vec<usize> = (0..next.len()).filter(|&j| !next[j].is_finite()).collect();
        if !bad.is_empty() {
            return Err(Error::PositiveCone { coordinates: bad });
        }
        let change = relative_change(&next, &log_z);
        log_z = next;
        changes.push(change);
        if change <= params.delta {
            converged = true;
            break;
        }
    }
    let (mu, mass) = close_plan(&log_z, &log_zeta, kernel)?;
    let sweeps = changes.len();
    finish(mu, mass, sweeps, changes, converged)
}

/// The quadratic-energy recursion with the opposite sign on the right-hand
/// side of the `z` equation, i.e. `z * (Gamma y) = -(beta / 2)(-alpha eps log z - a)`
/// iterated as `z <- (c log z + beta a / 2) / (Gamma y)`. It does not solve the
/// proximal problem; it exists so the validation suite can check that its
/// oracle rejects it.
#[doc(hidden)]
pub fn prox_power_law_flipped_sign(
    beta: f64,
    a: &DVector<f64>,
    zeta: &ProbabilityVector,
    kernel: &GibbsKernel,
    params: &ProxParams,
) -> Result<ProxSolution> {
    check_inputs(a, zeta, kernel)?;
    let c = beta * params.alpha * kernel.epsilon() / 2.0;
    let log_zeta = zeta.ln();
    let mut log_z: DVector<f64> = DVector::zeros(kernel.len());
    let mut changes = Vec::new();
    let mut converged = false;
    for _ in 0..params.max_sweeps {
        let log_y = &log_zeta - kernel.log_apply(&log_z);
        let w = kernel.log_apply(&log_y).map(f64::exp);
        let z = DVector::from_fn(kernel.len(), |j, _| (c * log_z[j] + beta * a[j] / 2.0) / w[j]);
        let bad: Vec<usize> = (0..z.len()).filter(|&j| !(z[j] > 0.0 && z[j].is_finite())).collect();
        if !bad.is_empty() {
            return Err(Error::PositiveCone { coordinates: bad });
        }
        let next = z.map(f64::ln);
        let change = relative_change(&next, &log_z);
        log_z = next;
        changes.push(change);
        if change <= params.delta {
            converged = true;
            break;
        }
    }
    let (mu, mass) = close_plan(&log_z, &log_zeta, kernel)?;
    let sweeps = changes.len();
    finish(mu, mass, sweeps, changes, converged)
}

/// Proximal step of `(1/alpha)(F + <nu, .>)` anchored at `zeta`, dispatched on
/// the functional's internal energy.
pub fn prox(
    f: &FreeEnergyFunctional,
    nu: &DVector<f64>,
    mu_prev: &ProbabilityVector,
    zeta: &ProbabilityVector,
    kernel: &GibbsKernel,
    params: &ProxParams,
) -> Result<ProxSolution> {
    let a = effective_drift(f, nu, mu_prev);
    match f.internal {
        Internal::None => prox_linear_solution(&a, zeta, kernel, params.alpha),
        Internal::LogEntropy { beta } => prox_log_entropy(beta, &a, zeta, kernel, params),
        Internal::PowerLaw { beta } => prox_power_law(beta, &a, zeta, kernel, params),
    }
}

/// Plan objective `<C/2 + eps log M, M> + (1/alpha) G(mu)` at the entropic plan
/// between `mu` and `zeta`, where `G = F + <nu, .>` with the interaction
/// linearized at `mu_prev`. Used to check that proximal outputs decrease it.
pub fn prox_objective(
    f: &FreeEnergyFunctional,
    nu: &DVector<f64>,
    mu_prev: &ProbabilityVector,
    mu: &ProbabilityVector,
    zeta: &ProbabilityVector,
    kernel: &GibbsKernel,
    alpha: f64,
) -> Result<f64> {
    let (transport, _) = crate::transport::sinkhorn_divergence(mu, zeta, kernel, 100_000, 1e-13)?;
    let a = effective_drift(f, nu, mu_prev);
    let linearized = FreeEnergyFunctional::new(a, None, f.internal)?;
    Ok(transport + linearized.evaluate(mu.values()) / alpha)
}

/// Offsets `{-h, -h/2, 0, h/2, h}^d` without the center.
fn stencil(d: usize, h: f64) -> Vec<Vec<f64>> {
    let steps = [-h, -h / 2.0, 0.0, h / 2.0, h];
    let mut out = Vec::new();
    let total = 5usize.pow(d as u32);
    for idx in 0..total {
        let mut rem = idx;
        let mut offset = vec![0.0; d];
        for o in offset.iter_mut().rev() {
            *o = steps[rem % 5];
            rem /= 5;
        }
        if offset.iter().any(|&x| x != 0.0) {
            out.push(offset);
        }
    }
    out
}

/// `phi(x)`, or its average over the stencil on the `2h` cell around `x` when
/// `phi(x)` is not finite.
fn regularized_eval(phi: &dyn Fn(&[f64]) -> f64, x: &[f64], offsets: &[Vec<f64>]) -> f64 {
    let v = phi(x);
    if v.is_finite() {
        return v;
    }
    let mut shifted = vec![0.0; x.len()];
    let total: f64 = offsets
        .iter()
        .map(|o| {
            for k in 0..x.len() {
                shifted[k] = x[k] + o[k];
            }
            phi(&shifted)
        })
        .sum();
    total / offsets.len() as f64
}

/// `V` evaluated at every sample.
pub fn discretize_drift(v: &dyn Fn(&[f64]) -> f64, samples: &SampleSet, h: f64) -> Result<DVector<f64>> {
    check_h(h)?;
    let offsets = stencil(samples.dim(), h);
    Ok(DVector::from_iterator(
        samples.len(),
        samples.points().map(|x| regularized_eval(v, x, &offsets)),
    ))
}

/// `U(theta_i - theta_j)` for every pair of samples.
pub fn discretize_interaction(u: &dyn Fn(&[f64]) -> f64, samples: &SampleSet, h: f64) -> Result<DMatrix<f64>> {
    check_h(h)?;
    let d = samples.dim();
    let offsets = stencil(d, h);
    let n = samples.len();
    let mut m = DMatrix::zeros(n, n);
    let mut diff = vec![0.0; d];
    for i in 0..n {
        for j in i..n {
            for (k, slot) in diff.iter_mut().enumerate() {
                *slot = samples.point(i)[k] - samples.point(j)[k];
            }
            let v = regularized_eval(u, &diff, &offsets);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// Drift vector and interaction matrix for the given potentials.
pub fn discretize_potentials(
    v: &dyn Fn(&[f64]) -> f64,
    u: &dyn Fn(&[f64]) -> f64,
    samples: &SampleSet,
    h: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    Ok((discretize_drift(v, samples, h)?, discretize_interaction(u, samples, h)?))
}

fn check_h(h: f64) -> Result<()> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::param("h", format!("must be positive, got {h}")));
    }
    Ok(())
}
