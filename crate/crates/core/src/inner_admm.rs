//! The consensus update: a Sinkhorn barycentric proximal problem solved through
//! its dual.
//!
//! The dual is
//!
//! ```text
//! min  sum_i f_i(u_i)   s.t.  sum_i u_i = (2 / alpha) nu_sum,
//! f_i(u) = <mu_i, log(Gamma exp(u / eps))>,
//! ```
//!
//! a sum of weighted log-sum-exp terms coupled by one linear constraint. It is
//! solved by a scaled Euclidean ADMM whose `u`-steps are proximal problems of
//! the `f_i`, handled by Newton's method with backtracking; the `z`-step is the
//! closed-form projection onto the constraint set. The consensus measure is
//! recovered from any `u_i` as `e * Gamma(mu_i / Gamma e)`, `e = exp(u_i / eps)`.
//!
//! With `e = exp(u / eps)`, `P = diag(1 / Gamma e) Gamma diag(e)` and
//! `g = P^T mu`:
//!
//! ```text
//! grad f = g / eps,    hess f = (diag(g) - P^T diag(mu) P) / eps^2.
//! ```
//!
//! `P` is row-stochastic, so `hess f` annihilates the ones vector and the
//! gradient sums to `1 / eps`.

use nalgebra::{DMatrix, DVector};
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{GibbsKernel, ProbabilityVector};
use crate::parallel::map_indexed;

fn check_len(n: usize, got: usize) -> Result<()> {
    if n == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected: n, got })
    }
}

/// Quantities shared by the value, gradient and Hessian of `f` at one point.
struct DualPoint {
    eps: f64,
    /// `u / eps`.
    log_e: DVector<f64>,
    /// `log(Gamma e)`.
    log_ge: DVector<f64>,
}

impl DualPoint {
    fn new(u: &DVector<f64>, kernel: &GibbsKernel) -> Result<Self> {
        let eps = kernel.epsilon();
        let log_e = u / eps;
        let log_ge = kernel.log_apply(&log_e);
        if log_ge.iter().any(|v| !v.is_finite()) {
            return Err(Error::Underflow("dual objective"));
        }
        Ok(Self { eps, log_e, log_ge })
    }

    fn value(&self, mu: &ProbabilityVector) -> f64 {
        mu.values().dot(&self.log_ge)
    }

    /// `g = e * Gamma(mu / Gamma e)`, i.e. `eps` times the gradient.
    fn g(&self, mu: &ProbabilityVector, kernel: &GibbsKernel) -> DVector<f64> {
        let log_r = mu.values().zip_map(&self.log_ge, |m, l| if m > 0.0 { m.ln() - l } else { f64::NEG_INFINITY });
        (&self.log_e + kernel.log_apply(&log_r)).map(f64::exp)
    }

    /// `e / max(e)` and `Gamma e / max(e)`; the Hessian is invariant under
    /// rescaling `e`.
    fn scaled_e(&self) -> (DVector<f64>, DVector<f64>) {
        let m = self.log_e.max();
        (self.log_e.map(|v| (v - m).exp()), self.log_ge.map(|v| (v - m).exp()))
    }
}

/// `f(u) = <mu, log(Gamma exp(u / eps))>`.
pub fn dual_objective_f(u: &DVector<f64>, mu: &ProbabilityVector, kernel: &GibbsKernel) -> Result<f64> {
    check_len(kernel.len(), u.len())?;
    check_len(kernel.len(), mu.len())?;
    Ok(DualPoint::new(u, kernel)?.value(mu))
}

/// `grad f(u) = (1 / eps) e * Gamma(mu / Gamma e)`.
pub fn grad_f(u: &DVector<f64>, mu: &ProbabilityVector, kernel: &GibbsKernel) -> Result<DVector<f64>> {
    check_len(kernel.len(), u.len())?;
    check_len(kernel.len(), mu.len())?;
    let p = DualPoint::new(u, kernel)?;
    Ok(p.g(mu, kernel) / p.eps)
}

/// Dense Hessian of `f`.
pub fn hess_f(u: &DVector<f64>, mu: &ProbabilityVector, kernel: &GibbsKernel) -> Result<DMatrix<f64>> {
    check_len(kernel.len(), u.len())?;
    check_len(kernel.len(), mu.len())?;
    let p = DualPoint::new(u, kernel)?;
    Ok(dense_hessian(&p, mu, kernel))
}

fn dense_hessian(p: &DualPoint, mu: &ProbabilityVector, kernel: &GibbsKernel) -> DMatrix<f64> {
    let n = kernel.len();
    let (e, ge) = p.scaled_e();
    let g = p.g(mu, kernel);
    // B = diag(sqrt(mu) / Gamma e) Gamma diag(e), so P^T diag(mu) P = B^T B.
    let mut b = kernel.to_dense();
    for j in 0..n {
        let row_scale = mu.values()[j].sqrt() / ge[j];
        for k in 0..n {
            b[(j, k)] *= row_scale * e[k];
        }
    }
    let mut h = -(b.transpose() * &b);
    for k in 0..n {
        h[(k, k)] += g[k];
    }
    h / (p.eps * p.eps)
}

/// Matrix-free Hessian-vector products at a fixed point `u`.
struct HessianOperator<'a> {
    kernel: &'a GibbsKernel,
    eps: f64,
    e: DVector<f64>,
    ge: DVector<f64>,
    g: DVector<f64>,
    mu: &'a DVector<f64>,
}

impl<'a> HessianOperator<'a> {
    fn new(p: &DualPoint, mu: &'a ProbabilityVector, kernel: &'a GibbsKernel) -> Self {
        let (e, ge) = p.scaled_e();
        Self {
            kernel,
            eps: p.eps,
            e,
            ge,
            g: p.g(mu, kernel),
            mu: mu.values(),
        }
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let pv = self.kernel.apply(&self.e.component_mul(v)).component_div(&self.ge);
        let w = self.mu.component_mul(&pv).component_div(&self.ge);
        let ptw = self.e.component_mul(&self.kernel.apply(&w));
        (self.g.component_mul(v) - ptw) / (self.eps * self.eps)
    }
}

/// `hess f(u) v` without forming the Hessian.
pub fn hess_vec(u: &DVector<f64>, mu: &ProbabilityVector, kernel: &GibbsKernel, v: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(kernel.len(), u.len())?;
    check_len(kernel.len(), v.len())?;
    let p = DualPoint::new(u, kernel)?;
    Ok(HessianOperator::new(&p, mu, kernel).apply(v))
}

/// How Newton steps solve `(tau I + hess f) d = -grad phi`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolver {
    /// Dense Cholesky factorization, with a small Levenberg shift if the
    /// factorization fails.
    Dense,
    /// Jacobi-preconditioned conjugate gradients on Hessian-vector products.
    #[default]
    ConjugateGradient,
}

/// Newton and line-search settings for the `u`-steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonParams {
    /// Stop when half the squared Newton decrement is at most this.
    pub tol: f64,
    pub max_iters: usize,
    /// Armijo fraction of the backtracking line search.
    pub alpha0: f64,
    /// Step shrink factor of the backtracking line search.
    pub beta0: f64,
    pub solver: LinearSolver,
}

impl Default for NewtonParams {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iters: 50,
            alpha0: 0.3,
            beta0: 0.7,
            solver: LinearSolver::ConjugateGradient,
        }
    }
}

impl NewtonParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::param("newton.tol", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::param("newton.max_iters", "must be at least 1"));
        }
        if !(self.alpha0 > 0.0 && self.alpha0 < 0.5) {
            return Err(Error::param("newton.alpha0", "must lie in (0, 0.5)"));
        }
        if !(self.beta0 > 0.0 && self.beta0 < 1.0) {
            return Err(Error::param("newton.beta0", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Result of a proximal solve.
#[derive(Clone, Debug)]
pub struct ProxOutcome {
    pub u: DVector<f64>,
    /// Steps taken.
    pub iterations: usize,
    /// Final stopping statistic: half the squared Newton decrement for Newton,
    /// the gradient norm for gradient descent.
    pub residual: f64,
    /// Proximal objective at `u`.
    pub objective: f64,
}

/// `(tau / 2) |u - v|^2 + f(u)`.
pub fn prox_objective(u: &DVector<f64>, v: &DVector<f64>, mu: &ProbabilityVector, kernel: &GibbsKernel, tau: f64) -> Result<f64> {
    Ok(0.5 * tau * (u - v).norm_squared() + dual_objective_f(u, mu, kernel)?)
}

fn phi(u: &DVector<f64>, v: &DVector<f64>, mu: &ProbabilityVector, kernel: &GibbsKernel, tau: f64) -> f64 {
    match DualPoint::new(u, kernel) {
        Ok(p) => 0.5 * tau * (u - v).norm_squared() + p.value(mu),
        Err(_) => f64::INFINITY,
    }
}

fn check_prox_inputs(v: &DVector<f64>, mu: &ProbabilityVector, kernel: &GibbsKernel, tau: f64) -> Result<()> {
    check_len(kernel.len(), v.len())?;
    check_len(kernel.len(), mu.len())?;
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::param("tau", format!("must be positive, got {tau}")));
    }
    Ok(())
}

/// Minimizes `(tau / 2) |u - v|^2 + f(u)` by damped Newton, starting from `v`.
pub fn prox_f_newton(
    v: &DVector<f64>,
    mu: &ProbabilityVector,
    kernel: &GibbsKernel,
    tau: f64,
    params: &NewtonParams,
) -> Result<ProxOutcome> {
    prox_f_newton_from(v, v.clone(), mu, kernel, tau, params)
}

/// [`prox_f_newton`] from an explicit starting point.
pub fn prox_f_newton_from(
    v: &DVector<f64>,
    start: DVector<f64>,
    mu: &ProbabilityVector,
    kernel: &GibbsKernel,
    tau: f64,
    params: &NewtonParams,
) -> Result<ProxOutcome> {
    check_prox_inputs(v, mu, kernel, tau)?;
    check_len(kernel.len(), start.len())?;
    let mut u = start;
    let mut iterations = 0;
    loop {
        let point = DualPoint::new(&u, kernel)?;
        let value = 0.5 * tau * (&u - v).norm_squared() + point.value(mu);
        let grad = (&u - v) * tau + point.g(mu, kernel) / point.eps;
        let step = match params.solver {
            LinearSolver::Dense => dense_newton_step(&point, mu, kernel, tau, &grad),
            LinearSolver::ConjugateGradient => cg_newton_step(&point, mu, kernel, tau, &grad),
        };
        let slope = grad.dot(&step);
        let half_decrement = -0.5 * slope;
        if half_decrement <= params.tol {
            return Ok(ProxOutcome {
                u,
                iterations,
                residual: half_decrement.max(0.0),
                objective: value,
            });
        }
        if iterations == params.max_iters {
            return Err(Error::NewtonNotConverged {
                iterations,
                decrement: half_decrement,
            });
        }
        let t = backtrack(&u, &step, value, slope, params, |w| phi(w, v, mu, kernel, tau))
            .ok_or(Error::LineSearch {
                step: params.beta0.powi(200),
                decrement: half_decrement,
            })?;
        u += step * t;
        iterations += 1;
    }
}

/// Armijo backtracking from `t = 1`. `None` if the step collapses.
fn backtrack(
    u: &DVector<f64>,
    dir: &DVector<f64>,
    value: f64,
    slope: f64,
    params: &NewtonParams,
    objective: impl Fn(&DVector<f64>) -> f64,
) -> Option<f64> {
    let mut t = 1.0;
    for _ in 0..200 {
        let trial = u + dir * t;
        if objective(&trial) <= value + params.alpha0 * t * slope {
            return Some(t);
        }
        t *= params.beta0;
    }
    None
}

fn dense_newton_step(p: &DualPoint, mu: &ProbabilityVector, kernel: &GibbsKernel, tau: f64, grad: &DVector<f64>) -> DVector<f64> {
    let n = kernel.len();
    let mut m = dense_hessian(p, mu, kernel);
    for k in 0..n {
        m[(k, k)] += tau;
    }
    let rhs = -grad;
    if let Some(chol) = m.clone().cholesky() {
        return chol.solve(&rhs);
    }
    let shift = 1e-10 * m.trace() / n as f64;
    for k in 0..n {
        m[(k, k)] += shift;
    }
    match m.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        // tau I + H is positive definite in exact arithmetic; fall back to LU.
        None => m.lu().solve(&rhs).unwrap_or_else(|| &rhs / tau),
    }
}

fn cg_newton_step(p: &DualPoint, mu: &ProbabilityVector, kernel: &GibbsKernel, tau: f64, grad: &DVector<f64>) -> DVector<f64> {
    let op = HessianOperator::new(p, mu, kernel);
    let n = kernel.len();
    // diag(H) <= g / eps^2.
    let precond = op.g.map(|gk| 1.0 / (tau + gk / (p.eps * p.eps)));
    let b = -grad;
    let b_norm = b.norm();
    let mut x = DVector::zeros(n);
    if b_norm == 0.0 {
        return x;
    }
    let mut r = b.clone();
    let mut z = r.component_mul(&precond);
    let mut d = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..(2 * n).max(50) {
        let ad = op.apply(&d) + &d * tau;
        let curvature = d.dot(&ad);
        if curvature <= 0.0 {
            break;
        }
        let step = rz / curvature;
        x.axpy(step, &d, 1.0);
        r.axpy(-step, &ad, 1.0);
        if r.norm() <= 1e-10 * b_norm {
            break;
        }
        z = r.component_mul(&precond);
        let rz_next = r.dot(&z);
        d = &z + &d * (rz_next / rz);
        rz = rz_next;
    }
    x
}

/// Minimizes the same proximal objective by gradient descent with backtracking,
/// stopping when the gradient norm is at most `params.tol` or after `max_iters`
/// steps. A reference solver for comparisons with Newton.
pub fn prox_f_gradient_descent(
    v: &DVector<f64>,
    start: DVector<f64>,
    mu: &ProbabilityVector,
    kernel: &GibbsKernel,
    tau: f64,
    params: &NewtonParams,
    max_iters: usize,
) -> Result<ProxOutcome> {
    check_prox_inputs(v, mu, kernel, tau)?;
    check_len(kernel.len(), start.len())?;
    let mut u = start;
    let mut iterations = 0;
    loop {
        let point = DualPoint::new(&u, kernel)?;
        let value = 0.5 * tau * (&u - v).norm_squared() + point.value(mu);
        let grad = (&u - v) * tau + point.g(mu, kernel) / point.eps;
        let norm = grad.norm();
        if norm <= params.tol || iterations == max_iters {
            return Ok(ProxOutcome {
                u,
                iterations,
                residual: norm,
                objective: value,
            });
        }
        let dir = -&grad;
        let t = backtrack(&u, &dir, value, -norm * norm, params, |w| phi(w, v, mu, kernel, tau)).ok_or(
            Error::LineSearch {
                step: params.beta0.powi(200),
                decrement: norm,
            },
        )?;
        u += dir * t;
        iterations += 1;
    }
}

/// Euclidean projection of `(v_1, .., v_n)` onto `{sum_i z_i = target}`:
/// `z_i = v_i - mean(v) + target / n`.
pub fn project_consensus(vs: &[DVector<f64>], target: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = vs.len() as f64;
    let shift = target / n - mean(vs);
    vs.iter().map(|v| v + &shift).collect()
}

/// Arithmetic mean, accumulated in index order.
fn mean(vs: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(vs[0].len());
    for v in vs {
        acc += v;
    }
    acc / vs.len() as f64
}

/// Inputs of one consensus update.
#[derive(Clone, Copy, Debug)]
pub struct BarycentricInputs<'a> {
    pub mus: &'a [ProbabilityVector],
    pub kernel: &'a GibbsKernel,
    pub nu_sum: &'a DVector<f64>,
    pub alpha: f64,
}

impl BarycentricInputs<'_> {
    /// `(2 / alpha) nu_sum`.
    pub fn target(&self) -> DVector<f64> {
        self.nu_sum * (2.0 / self.alpha)
    }

    fn validate(&self) -> Result<()> {
        let n = self.kernel.len();
        if self.mus.is_empty() {
            return Err(Error::param("mus", "need at least one measure"));
        }
        for mu in self.mus {
            check_len(n, mu.len())?;
            mu.require_positive("mu")?;
        }
        check_len(n, self.nu_sum.len())?;
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::param("alpha", "must be positive"));
        }
        Ok(())
    }
}

/// Variables of the inner ADMM.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerDualState {
    pub us: Vec<DVector<f64>>,
    pub zs: Vec<DVector<f64>>,
    pub nutildes: Vec<DVector<f64>>,
    pub tau: f64,
    pub target: DVector<f64>,
    pub ell: usize,
}

impl InnerDualState {
    /// `u_i = nu~_i = 0`, `z_i = target / n`.
    pub fn cold(workers: usize, target: DVector<f64>, tau: f64) -> Self {
        let zero = DVector::zeros(target.len());
        Self {
            us: vec![zero.clone(); workers],
            zs: project_consensus(&vec![zero.clone(); workers], &target),
            nutildes: vec![zero; workers],
            tau,
            target,
            ell: 0,
        }
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, Default)]
pub struct StepStats {
    /// Newton iterations of each worker.
    pub newton_iterations: Vec<usize>,
}

/// One round of the inner ADMM: parallel `u`-steps (Newton, warm-started at
/// the previous `u_i`), the closed-form `z`-step and the scaled dual step.
pub fn inner_step(
    state: &InnerDualState,
    inputs: &BarycentricInputs<'_>,
    newton: &NewtonParams,
    pool: Option<&ThreadPool>,
) -> Result<(InnerDualState, StepStats)> {
    let n = state.us.len();
    if inputs.mus.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: inputs.mus.len(),
        });
    }
    let results = map_indexed(pool, n, |i| {
        let v = &state.zs[i] - &state.nutildes[i];
        prox_f_newton_from(&v, state.us[i].clone(), &inputs.mus[i], inputs.kernel, state.tau, newton)
            .map_err(|e| e.in_worker(i))
    });
    let mut us = Vec::with_capacity(n);
    let mut stats = StepStats::default();
    for r in results {
        let outcome = r?;
        stats.newton_iterations.push(outcome.iterations);
        us.push(outcome.u);
    }

    let u_mean = mean(&us);
    let nt_mean = mean(&state.nutildes);
    let share = &state.target / n as f64;
    let zs: Vec<DVector<f64>> = (0..n)
        .map(|i| (&us[i] - &u_mean) + (&state.nutildes[i] - &nt_mean) + &share)
        .collect();
    let nutildes = (0..n).map(|i| &state.nutildes[i] + (&us[i] - &zs[i])).collect();
    Ok((
        InnerDualState {
            us,
            zs,
            nutildes,
            tau: state.tau,
            target: state.target.clone(),
            ell: state.ell + 1,
        },
        stats,
    ))
}

/// `(sqrt(2) / eps^2) max_i |Gamma mu_i|_inf`, a sufficient lower bound on
/// `tau` for convergence of the inner ADMM. The maximum runs over all workers.
pub fn tau_lower_bound(inputs: &BarycentricInputs<'_>) -> f64 {
    let eps = inputs.kernel.epsilon();
    let worst = inputs
        .mus
        .iter()
        .map(|mu| inputs.kernel.apply(mu.values()).amax())
        .fold(0.0, f64::max);
    std::f64::consts::SQRT_2 / (eps * eps) * worst
}

/// `e * Gamma(mu / Gamma e)` with `e = exp(u / eps)`, renormalized.
pub fn recover_zeta(u: &DVector<f64>, mu: &ProbabilityVector, kernel: &GibbsKernel) -> Result<ProbabilityVector> {
    let p = DualPoint::new(u, kernel)?;
    ProbabilityVector::renormalized(p.g(mu, kernel))
}

/// Output of [`run_inner`].
#[derive(Clone, Debug)]
pub struct InnerOutcome {
    pub zeta: ProbabilityVector,
    pub state: InnerDualState,
    /// Largest sup-norm distance between the per-worker recovered measures.
    pub deviation: f64,
    /// Total Newton iterations over all steps and workers.
    pub newton_iterations: usize,
}

/// Runs `iters` inner ADMM steps from `warm` (or a cold start) and recovers the
/// consensus measure as the mean of the per-worker recoveries.
pub fn run_inner(
    inputs: &BarycentricInputs<'_>,
    warm: Option<InnerDualState>,
    iters: usize,
    tau: f64,
    newton: &NewtonParams,
    pool: Option<&ThreadPool>,
) -> Result<InnerOutcome> {
    inputs.validate()?;
    if iters == 0 {
        return Err(Error::param("inner_iters", "must be at least 1"));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::param("tau", format!("must be positive, got {tau}")));
    }
    let workers = inputs.mus.len();
    let target = inputs.target();
    let mut state = match warm {
        Some(mut s) if s.us.len() == workers => {
            s.target = target;
            s.tau = tau;
            s
        }
        _ => InnerDualState::cold(workers, target, tau),
    };
    let mut newton_iterations = 0;
    for _ in 0..iters {
        let (next, stats) = inner_step(&state, inputs, newton, pool)?;
        newton_iterations += stats.newton_iterations.iter().sum::<usize>();
        state = next;
    }

    let candidates: Vec<Result<ProbabilityVector>> = map_indexed(pool, workers, |i| {
        recover_zeta(&state.us[i], &inputs.mus[i], inputs.kernel).map_err(|e| e.in_worker(i))
    });
    let candidates: Vec<ProbabilityVector> = candidates.into_iter().collect::<Result<_>>()?;
    let mut deviation: f64 = 0.0;
    for i in 0..workers {
        for j in (i + 1)..workers {
            deviation = deviation.max((candidates[i].values() - candidates[j].values()).amax());
        }
    }
    let values: Vec<DVector<f64>> = candidates.iter().map(|c| c.values().clone()).collect();
    let zeta = ProbabilityVector::renormalized(mean(&values))?;
    Ok(InnerOutcome {
        zeta,
        state,
        deviation,
        newton_iterations,
    })
}
