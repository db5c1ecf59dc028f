//! Oracle suite: compares the solvers against independent reference
//! computations on small random instances.
//!
//! Every check returns a [`Check`] carrying the measured residual, so callers
//! can print a report and decide on an exit status.

pub mod oracles;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::functionals::{
    prox, prox_linear, prox_log_entropy, prox_power_law, prox_power_law_flipped_sign, FreeEnergyFunctional, Internal,
    ProxParams,
};
use crate::inner_admm::{
    dual_objective_f, grad_f, hess_f, project_consensus, prox_f_gradient_descent, prox_f_newton, run_inner,
    tau_lower_bound, BarycentricInputs, LinearSolver, NewtonParams,
};
use crate::measures::{
    cost_from_points, cost_matrix, gibbs_kernel, make_uniform_grid, CostMatrix, GibbsKernel, KernelMode,
    ProbabilityVector,
};
use crate::pde_flows::{count_groupings, enumerate_groupings};
use crate::transport::{exact_wasserstein, sinkhorn_divergence};
use oracles::OracleEnergy;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured residuals and thresholds.
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String, start: Instant) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        }
    }

    fn failed(name: &str, err: crate::Error, start: Instant) -> Self {
        Self::new(name, false, format!("error: {err}"), start)
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {} ({:.2}s): {}", self.name, self.seconds, self.detail)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ValidateOptions {
    /// Run the power-law check against the recursion with the opposite sign.
    /// The check is expected to fail.
    pub flip_power_law_sign: bool,
}

/// Proximal variants covered by [`check_prox_oracle`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxVariant {
    Linear,
    LogEntropy,
    PowerLaw,
    Interaction,
}

impl ProxVariant {
    pub const ALL: [ProxVariant; 4] = [
        ProxVariant::Linear,
        ProxVariant::LogEntropy,
        ProxVariant::PowerLaw,
        ProxVariant::Interaction,
    ];

    fn name(self) -> &'static str {
        match self {
            ProxVariant::Linear => "linear",
            ProxVariant::LogEntropy => "log-entropy",
            ProxVariant::PowerLaw => "power-law",
            ProxVariant::Interaction => "interaction",
        }
    }
}

/// Runs the whole suite in a fixed order.
pub fn run_checks(opts: &ValidateOptions) -> Vec<Check> {
    let mut out = vec![check_prox_linear_formula(10)];
    for v in ProxVariant::ALL {
        out.push(check_prox_oracle(v, 10, opts.flip_power_law_sign && v == ProxVariant::PowerLaw));
    }
    out.push(check_dual_derivatives(20));
    out.push(check_newton_vs_gradient_descent(LinearSolver::Dense, 5));
    out.push(check_newton_vs_gradient_descent(LinearSolver::ConjugateGradient, 5));
    out.push(check_barycenter());
    out.push(check_projection(5));
    out.push(check_sinkhorn(10));
    out.push(check_exact_lp(10));
    out.push(check_groupings());
    out
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> CostMatrix {
    let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    cost_from_points(pts.iter().map(|p| &p[..]), n)
}

fn random_pv(rng: &mut ChaCha8Rng, n: usize) -> ProbabilityVector {
    ProbabilityVector::from_weights(DVector::from_fn(n, |_, _| rng.gen_range(0.05..1.0))).expect("positive weights")
}

/// `prox_linear` against the dense closed form `z * Gamma(zeta / Gamma z)`.
pub fn check_prox_linear_formula(seeds: u64) -> Check {
    const NAME: &str = "prox linear vs closed form";
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(3..12);
        let cost = random_points(&mut rng, n);
        let eps = 0.1;
        let alpha = rng.gen_range(0.5..5.0);
        let kernel = gibbs_kernel(&cost, eps, KernelMode::Direct).expect("valid kernel");
        let a = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let zeta = random_pv(&mut rng, n);
        let got = match prox_linear(&a, &zeta, &kernel, alpha) {
            Ok(m) => m,
            Err(e) => return Check::failed(NAME, e, start),
        };
        let gamma = cost.matrix().map(|c| (-c / (2.0 * eps)).exp());
        let z = a.map(|v| (-v / (alpha * eps)).exp());
        let y = zeta.values().component_div(&(&gamma.transpose() * &z));
        let mu = z.component_mul(&(&gamma * y));
        let mu = &mu / mu.sum();
        worst = worst.max((got.values() - mu).amax());
    }
    Check::new(NAME, worst <= 1e-10, format!("max |diff| = {worst:.3e} (tol 1e-10)"), start)
}

/// Proximal outputs against mirror descent on the plan objective, N = 3.
pub fn check_prox_oracle(variant: ProxVariant, seeds: u64, flip_sign: bool) -> Check {
    let name = format!(
        "prox {} vs plan oracle{}",
        variant.name(),
        if flip_sign { " (sign flipped)" } else { "" }
    );
    let start = Instant::now();
    let n = 3;
    let eps = 0.1;
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cost = random_points(&mut rng, n);
        let kernel = gibbs_kernel(&cost, eps, KernelMode::Direct).expect("valid kernel");
        let zeta = random_pv(&mut rng, n);
        let a = DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.0));
        let (alpha, energy) = match variant {
            ProxVariant::Linear | ProxVariant::Interaction => (1.0, OracleEnergy::Linear),
            ProxVariant::LogEntropy => (12.0, OracleEnergy::Entropy { beta: 1.0 }),
            ProxVariant::PowerLaw => (12.0, OracleEnergy::Quadratic { beta: 1.0 }),
        };
        let params = ProxParams::new(alpha, 1e-13, 100_000).expect("valid parameters");
        let (got, drift) = match variant {
            ProxVariant::Interaction => {
                let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
                let u = (&b + b.transpose()) * 0.5;
                let nu = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
                let mu_prev = random_pv(&mut rng, n);
                let drift = &a + &u * mu_prev.values() + &nu;
                let f = FreeEnergyFunctional::new(a.clone(), Some(u), Internal::None).expect("valid functional");
                (prox(&f, &nu, &mu_prev, &zeta, &kernel, &params).map(|s| s.mu), drift)
            }
            ProxVariant::Linear => (prox_linear(&a, &zeta, &kernel, alpha), a.clone()),
            ProxVariant::LogEntropy => (prox_log_entropy(1.0, &a, &zeta, &kernel, &params).map(|s| s.mu), a.clone()),
            ProxVariant::PowerLaw if flip_sign => (
                prox_power_law_flipped_sign(1.0, &a, &zeta, &kernel, &params).map(|s| s.mu),
                a.clone(),
            ),
            ProxVariant::PowerLaw => (prox_power_law(1.0, &a, &zeta, &kernel, &params).map(|s| s.mu), a.clone()),
        };
        let got = match got {
            Ok(m) => m,
            Err(e) => return Check::failed(&name, e, start),
        };
        let want = oracles::prox_plan_oracle(energy, &drift, zeta.values(), cost.matrix(), eps, alpha, 100_000);
        worst = worst.max((got.values() - want).amax());
    }
    Check::new(&name, worst <= 1e-5, format!("max |diff| = {worst:.3e} over {seeds} seeds (tol 1e-5)"), start)
}

/// Gradient sum, Hessian null vector, finite differences and convexity of
/// the dual log-sum-exp term.
pub fn check_dual_derivatives(seeds: u64) -> Check {
    const NAME: &str = "dual gradient and Hessian";
    let start = Instant::now();
    let (mut sum_err, mut null_err, mut fd_grad, mut fd_hess) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut min_eig = f64::INFINITY;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let n = rng.gen_range(5..=50);
        let eps = rng.gen_range(0.1..1.0);
        let cost = random_points(&mut rng, n);
        let kernel = gibbs_kernel(&cost, eps, KernelMode::Direct).expect("valid kernel");
        let mu = random_pv(&mut rng, n);
        let u = DVector::from_fn(n, |_, _| rng.gen_range(-eps..eps));
        let (g, h) = match (grad_f(&u, &mu, &kernel), hess_f(&u, &mu, &kernel)) {
            (Ok(g), Ok(h)) => (g, h),
            (Err(e), _) | (_, Err(e)) => return Check::failed(NAME, e, start),
        };
        sum_err = sum_err.max((g.sum() - 1.0 / eps).abs());
        null_err = null_err.max((&h * DVector::from_element(n, 1.0)).amax());
        let fg = oracles::fd_gradient(|x| dual_objective_f(x, &mu, &kernel).expect("finite"), &u, 1e-6);
        fd_grad = fd_grad.max((&fg - &g).amax() / g.amax().max(1.0));
        let fh = oracles::fd_jacobian(|x| grad_f(x, &mu, &kernel).expect("finite"), &u, 1e-6);
        fd_hess = fd_hess.max((&fh - &h).amax() / h.amax().max(1.0));
        min_eig = min_eig.min(oracles::min_eigenvalue(&h));
    }
    let passed = sum_err <= 1e-10 && null_err <= 1e-10 && fd_grad <= 1e-5 && fd_hess <= 1e-5 && min_eig >= -1e-10;
    Check::new(
        NAME,
        passed,
        format!(
            "|<1,grad> - 1/eps| = {sum_err:.2e}, |H 1| = {null_err:.2e}, fd grad rel {fd_grad:.2e}, \
             fd Hessian rel {fd_hess:.2e}, min eig {min_eig:.2e}"
        ),
        start,
    )
}

/// Newton against long gradient descent on the proximal problem of the dual
/// term: 21 x 21 grid on `[-1, 1]^2`, `eps = tau = 0.1`.
pub fn check_newton_vs_gradient_descent(solver: LinearSolver, seeds: u64) -> Check {
    let name = format!("newton ({solver:?}) vs 2000 gradient steps");
    let start = Instant::now();
    let grid = make_uniform_grid(&[(-1.0, 1.0), (-1.0, 1.0)], &[21, 21]).expect("valid grid");
    let kernel = match GibbsKernel::on_grid(&grid, 0.1, KernelMode::Direct) {
        Ok(k) => k,
        Err(e) => return Check::failed(&name, e, start),
    };
    let tau = 0.1;
    let params = NewtonParams {
        solver,
        ..NewtonParams::default()
    };
    let (mut max_iters, mut max_gap, mut objective) = (0usize, 0.0f64, 0.0);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mu = random_pv(&mut rng, kernel.len());
        let v = DVector::from_fn(kernel.len(), |_, _| rng.gen_range(0.0..1.0));
        let newton = prox_f_newton(&v, &mu, &kernel, tau, &params);
        let gd_params = NewtonParams { tol: 1e-12, ..params };
        let gd = prox_f_gradient_descent(&v, v.clone(), &mu, &kernel, tau, &gd_params, 2000);
        let (newton, gd) = match (newton, gd) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return Check::failed(&name, e, start),
        };
        max_iters = max_iters.max(newton.iterations);
        max_gap = max_gap.max((newton.objective - gd.objective).abs());
        objective = newton.objective;
    }
    Check::new(
        &name,
        max_iters <= 10 && max_gap <= 2e-4,
        format!("max Newton iterations {max_iters} (limit 10), max |objective gap| {max_gap:.3e} (tol 2e-4), last objective {objective:.6}"),
        start,
    )
}

/// With `nu_sum = 0` the consensus update is the entropic barycenter; compared
/// with iterative Bregman projections. `tau` is set to the sufficient bound.
pub fn check_barycenter() -> Check {
    const NAME: &str = "inner ADMM barycenter vs Bregman projections";
    let start = Instant::now();
    let n = 50;
    let eps = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let grid = make_uniform_grid(&[(-1.0, 1.0)], &[n]).expect("valid grid");
    let kernel = gibbs_kernel(&cost_matrix(&grid), eps, KernelMode::Direct).expect("valid kernel");
    let mus = vec![random_pv(&mut rng, n), random_pv(&mut rng, n)];
    let zero = DVector::zeros(n);
    let inputs = BarycentricInputs {
        mus: &mus,
        kernel: &kernel,
        nu_sum: &zero,
        alpha: 1.0,
    };
    let bound = tau_lower_bound(&inputs);
    let direct = std::f64::consts::SQRT_2 / (eps * eps)
        * mus.iter().map(|m| (kernel.to_dense() * m.values()).amax()).fold(0.0, f64::max);
    let tau = bound;
    let got = match run_inner(&inputs, None, 500, tau, &NewtonParams::default(), None) {
        Ok(o) => o.zeta,
        Err(e) => return Check::failed(NAME, e, start),
    };
    let values: Vec<DVector<f64>> = mus.iter().map(|m| m.values().clone()).collect();
    let want = oracles::ibp_barycenter(&values, &kernel.to_dense(), 100_000, 1e-15);
    let want = &want / want.sum();
    let diff = (got.values() - want).amax();
    let bound_err = (bound - direct).abs() / direct;
    Check::new(
        NAME,
        diff <= 1e-5 && bound_err <= 1e-12 && tau >= bound,
        format!("max |diff| = {diff:.3e} (tol 1e-5), tau = {tau:.3} >= bound {direct:.3}"),
        start,
    )
}

/// `project_consensus` for feasibility, idempotence and agreement with the
/// dense pseudoinverse formula.
pub fn check_projection(seeds: u64) -> Check {
    const NAME: &str = "consensus projection";
    let start = Instant::now();
    let (mut feas, mut idem, mut pinv) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..seeds {
        for workers in [2, 3, 5] {
            for n in [4, 16] {
                let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
                let vs: Vec<DVector<f64>> =
                    (0..workers).map(|_| DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0))).collect();
                let target = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
                let p = project_consensus(&vs, &target);
                let sum = p.iter().fold(DVector::zeros(n), |acc, v| acc + v);
                feas = feas.max((sum - &target).amax());
                let pp = project_consensus(&p, &target);
                idem = idem.max(p.iter().zip(&pp).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max));
                let q = oracles::pseudoinverse_projection(&vs, &target);
                pinv = pinv.max(p.iter().zip(&q).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max));
            }
        }
    }
    Check::new(
        NAME,
        feas <= 1e-12 && idem <= 1e-12 && pinv <= 1e-10,
        format!("feasibility {feas:.2e}, idempotence {idem:.2e}, vs pseudoinverse {pinv:.2e}"),
        start,
    )
}

/// Sinkhorn plan objective against Newton on the feasible plans, N = 3.
pub fn check_sinkhorn(seeds: u64) -> Check {
    const NAME: &str = "sinkhorn vs plan oracle";
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut marginal: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let cost = random_points(&mut rng, 3);
        let kernel = gibbs_kernel(&cost, 0.1, KernelMode::Direct).expect("valid kernel");
        let mu = random_pv(&mut rng, 3);
        let zeta = random_pv(&mut rng, 3);
        let (value, plan) = match sinkhorn_divergence(&mu, &zeta, &kernel, 100_000, 1e-14) {
            Ok(r) => r,
            Err(e) => return Check::failed(NAME, e, start),
        };
        let (want, _) = oracles::entropic_plan_oracle(mu.values(), zeta.values(), cost.matrix(), 0.1);
        worst = worst.max((value - want).abs());
        marginal = marginal.max(plan.marginal_error());
    }
    Check::new(
        NAME,
        worst <= 1e-8 && marginal <= 1e-12,
        format!("max |value diff| = {worst:.3e} (tol 1e-8), marginal error {marginal:.2e}"),
        start,
    )
}

/// Network simplex against vertex enumeration, N = 4.
pub fn check_exact_lp(seeds: u64) -> Check {
    const NAME: &str = "exact transport vs vertex enumeration";
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let cost = random_points(&mut rng, 4);
        let mu = random_pv(&mut rng, 4);
        let zeta = random_pv(&mut rng, 4);
        let got = match exact_wasserstein(&mu, &zeta, &cost) {
            Ok(v) => v,
            Err(e) => return Check::failed(NAME, e, start),
        };
        let want = oracles::vertex_enumeration_lp(mu.values(), zeta.values(), cost.matrix());
        worst = worst.max((got - want).abs());
    }
    Check::new(NAME, worst <= 1e-10, format!("max |diff| = {worst:.3e} (tol 1e-10)"), start)
}

/// `S(n, k) = (1 / k!) sum_j (-1)^j C(k, j) (k - j)^n`.
fn stirling_explicit(n: u32, k: u32) -> i128 {
    let mut binom: i128 = 1;
    let mut total: i128 = 0;
    let mut fact: i128 = 1;
    for j in 0..=k {
        let sign = if j % 2 == 0 { 1 } else { -1 };
        total += sign * binom * ((k - j) as i128).pow(n);
        binom = binom * (k - j) as i128 / (j + 1) as i128;
    }
    for i in 2..=k {
        fact *= i as i128;
    }
    total / fact
}

/// Grouping counts against Bell numbers, the explicit Stirling formula and
/// the enumeration.
pub fn check_groupings() -> Check {
    const NAME: &str = "grouping combinatorics";
    let start = Instant::now();
    let mut problems = Vec::new();
    for (n, bell_minus_one) in [(2usize, 1u128), (3, 4), (4, 14)] {
        match count_groupings(n, n, true) {
            Ok(c) if c == bell_minus_one => {}
            other => problems.push(format!("B_{n} - 1: got {other:?}")),
        }
    }
    for n in 1..=8usize {
        for r in 1..=n {
            let want: i128 = (1..=r as u32).map(|k| stirling_explicit(n as u32, k)).sum();
            let got = count_groupings(n, r, false).map(|c| c as i128);
            let listed = enumerate_groupings(n, r).map(|g| g.len() as i128);
            if got.as_ref().ok() != Some(&want) || listed.as_ref().ok() != Some(&want) {
                problems.push(format!("n={n} r={r}: want {want}, count {got:?}, listed {listed:?}"));
            }
        }
    }
    let detail = if problems.is_empty() {
        "Bell and Stirling partial sums agree for n <= 8".to_string()
    } else {
        problems.join("; ")
    };
    Check::new(NAME, problems.is_empty(), detail, start)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_stirling_numbers() {
        assert_eq!(stirling_explicit(4, 2), 7);
        assert_eq!(stirling_explicit(5, 3), 25);
        assert_eq!(stirling_explicit(3, 3), 1);
    }

    #[test]
    fn sign_flip_is_detected() {
        assert!(!check_prox_oracle(ProxVariant::PowerLaw, 3, true).passed);
    }

    #[test]
    fn fast_checks_pass() {
        for c in [
            check_prox_linear_formula(3),
            check_prox_oracle(ProxVariant::PowerLaw, 3, false),
            check_projection(1),
            check_sinkhorn(3),
            check_exact_lp(3),
            check_groupings(),
        ] {
            assert!(c.passed, "{c}");
        }
    }
}
