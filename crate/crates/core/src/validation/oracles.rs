//! Reference solvers that share no code path with the production solvers.
//! They are slow and meant for small instances.

use nalgebra::{DMatrix, DVector};

/// Energy part of a proximal objective, as seen by [`prox_plan_oracle`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OracleEnergy {
    Linear,
    /// `beta^{-1} <log mu, mu>`.
    Entropy { beta: f64 },
    /// `beta^{-1} <mu, mu>`.
    Quadratic { beta: f64 },
}

impl OracleEnergy {
    fn gradient(self, mu: f64) -> f64 {
        match self {
            OracleEnergy::Linear => 0.0,
            OracleEnergy::Entropy { beta } => (mu.ln() + 1.0) / beta,
            OracleEnergy::Quadratic { beta } => 2.0 * mu / beta,
        }
    }

    fn value(self, mu: f64) -> f64 {
        match self {
            OracleEnergy::Linear => 0.0,
            OracleEnergy::Entropy { beta } => mu * mu.ln() / beta,
            OracleEnergy::Quadratic { beta } => mu * mu / beta,
        }
    }

    /// Smoothness of `(1/alpha) G(M 1)` relative to the plan entropy.
    fn relative_smoothness(self, alpha: f64) -> f64 {
        match self {
            OracleEnergy::Linear => 0.0,
            OracleEnergy::Entropy { beta } => 1.0 / (beta * alpha),
            OracleEnergy::Quadratic { beta } => 2.0 / (beta * alpha),
        }
    }
}

/// Minimizes `<C/2 + eps log M, M> + (1/alpha)(<a, M 1> + G(M 1))` over plans
/// with column sums `zeta` by entropic mirror descent on the plan entries and
/// returns the row sums of the minimizer.
pub fn prox_plan_oracle(
    energy: OracleEnergy,
    a: &DVector<f64>,
    zeta: &DVector<f64>,
    cost: &DMatrix<f64>,
    eps: f64,
    alpha: f64,
    max_iters: usize,
) -> DVector<f64> {
    let n = zeta.len();
    let step = 1.0 / (eps + energy.relative_smoothness(alpha));
    let mut log_m = DMatrix::from_fn(n, n, |_, j| zeta[j].ln() - (n as f64).ln());
    for _ in 0..max_iters {
        let mu = row_sums_exp(&log_m);
        let mut next = DMatrix::from_fn(n, n, |i, j| {
            let grad = cost[(i, j)] / 2.0 + eps * (log_m[(i, j)] + 1.0) + (a[i] + energy.gradient(mu[i])) / alpha;
            log_m[(i, j)] - step * grad
        });
        for j in 0..n {
            let col: Vec<f64> = (0..n).map(|i| next[(i, j)]).collect();
            let shift = zeta[j].ln() - log_sum_exp(&col);
            for i in 0..n {
                next[(i, j)] += shift;
            }
        }
        let change = (&next - &log_m).amax();
        log_m = next;
        if change < 1e-15 {
            break;
        }
    }
    row_sums_exp(&log_m)
}

/// Value of the plan objective of [`prox_plan_oracle`] at a plan.
pub fn prox_plan_objective(
    energy: OracleEnergy,
    a: &DVector<f64>,
    plan: &DMatrix<f64>,
    cost: &DMatrix<f64>,
    eps: f64,
    alpha: f64,
) -> f64 {
    let n = plan.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let m = plan[(i, j)];
            if m > 0.0 {
                total += m * (cost[(i, j)] / 2.0 + eps * m.ln());
            }
        }
    }
    for i in 0..n {
        let mu: f64 = plan.row(i).sum();
        total += (a[i] * mu + energy.value(mu)) / alpha;
    }
    total
}

fn row_sums_exp(log_m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(log_m.nrows(), |i, _| log_m.row(i).iter().map(|v| v.exp()).sum())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Orthonormal basis of the null space of `a`, by singular value
/// decomposition.
fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let cols = a.ncols();
    // Pad to a square matrix so the decomposition yields a full right basis.
    let mut sq = DMatrix::zeros(cols.max(a.nrows()), cols);
    sq.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
    let svd = sq.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let scale = svd.singular_values.max();
    let basis: Vec<DVector<f64>> = (0..cols)
        .filter(|&k| svd.singular_values[k] <= 1e-10 * scale)
        .map(|k| vt.row(k).transpose())
        .collect();
    DMatrix::from_columns(&basis)
}

/// `min <C/2 + eps log M, M>` over plans with marginals `mu` (rows) and `zeta`
/// (columns), by damped Newton on the affine set of feasible plans. Returns
/// the optimal value and plan.
pub fn entropic_plan_oracle(mu: &DVector<f64>, zeta: &DVector<f64>, cost: &DMatrix<f64>, eps: f64) -> (f64, DMatrix<f64>) {
    let n = mu.len();
    let nn = n * n;
    // Constraint matrix on the column-major vectorization of M.
    let mut a = DMatrix::zeros(2 * n, nn);
    for i in 0..n {
        for j in 0..n {
            a[(i, j * n + i)] = 1.0;
            a[(n + j, j * n + i)] = 1.0;
        }
    }
    let basis = null_space(&a);
    let c = DVector::from_iterator(nn, cost.iter().map(|v| v / 2.0));
    let objective = |m: &DVector<f64>| -> f64 {
        if m.iter().any(|&v| v <= 0.0) {
            return f64::INFINITY;
        }
        c.dot(m) + eps * m.iter().map(|v| v * v.ln()).sum::<f64>()
    };
    let mut m = DVector::from_iterator(nn, (0..n).flat_map(|j| (0..n).map(move |i| (i, j))).map(|(i, j)| mu[i] * zeta[j]));
    for _ in 0..200 {
        let g = &c + m.map(|v| eps * (v.ln() + 1.0));
        let h = DMatrix::from_diagonal(&m.map(|v| eps / v));
        let gr = basis.transpose() * &g;
        let hr = basis.transpose() * h * &basis;
        let dt = -hr.cholesky().expect("positive definite").solve(&gr);
        let dm = &basis * &dt;
        let dec = -gr.dot(&dt);
        if dec < 1e-26 {
            break;
        }
        let f0 = objective(&m);
        let mut t = 1.0;
        while objective(&(&m + &dm * t)) > f0 - 0.25 * t * dec && t > 1e-20 {
            t *= 0.5;
        }
        m += dm * t;
    }
    let plan = DMatrix::from_column_slice(n, n, m.as_slice());
    (objective(&m), plan)
}

/// Entropic barycenter with equal weights by iterative Bregman projections:
/// the minimizer over `zeta` of `sum_i min_{M_i in Pi(mu_i, zeta)} KL(M_i | Gamma)`.
pub fn ibp_barycenter(mus: &[DVector<f64>], gamma: &DMatrix<f64>, max_iters: usize, tol: f64) -> DVector<f64> {
    let n = gamma.nrows();
    let w = 1.0 / mus.len() as f64;
    let gt = gamma.transpose();
    let mut bs = vec![DVector::from_element(n, 1.0); mus.len()];
    let mut zeta = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..max_iters {
        let mut log_zeta = DVector::zeros(n);
        let mut gtas = Vec::with_capacity(mus.len());
        for (mu, b) in mus.iter().zip(&bs) {
            let a = mu.component_div(&(gamma * b));
            let gta = &gt * a;
            log_zeta += b.component_mul(&gta).map(f64::ln) * w;
            gtas.push(gta);
        }
        let next = log_zeta.map(f64::exp);
        for (b, gta) in bs.iter_mut().zip(&gtas) {
            *b = next.component_div(gta);
        }
        let change = (&next - &zeta).amax();
        zeta = next;
        if change < tol {
            break;
        }
    }
    zeta
}

/// Projection onto `{sum_i v_i = target}` as `v - A^+ (A v - target)` with
/// `A = [I .. I]`, using a dense pseudoinverse.
pub fn pseudoinverse_projection(vs: &[DVector<f64>], target: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = target.len();
    let k = vs.len();
    let mut a = DMatrix::zeros(n, n * k);
    for b in 0..k {
        a.view_mut((0, b * n), (n, n)).fill_with_identity();
    }
    let stacked = DVector::from_iterator(n * k, vs.iter().flat_map(|v| v.iter().copied()));
    let pinv = a.clone().pseudo_inverse(1e-12).expect("pseudoinverse");
    let out = &stacked - pinv * (&a * &stacked - target);
    (0..k).map(|b| out.rows(b * n, n).into_owned()).collect()
}

/// Minimum of `<C, M>` over the vertices of the transport polytope, found by
/// solving every square basis of `2N - 1` cells. Exponential; `N <= 4`.
pub fn vertex_enumeration_lp(mu: &DVector<f64>, zeta: &DVector<f64>, cost: &DMatrix<f64>) -> f64 {
    let n = mu.len();
    assert!(n <= 4, "vertex enumeration is limited to N <= 4");
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let m = 2 * n - 1;
    // Row constraints 0..n, column constraints for columns 0..n-1 (the last is implied).
    let rhs = DVector::from_iterator(m, mu.iter().copied().chain(zeta.iter().take(n - 1).copied()));
    let mut best = f64::INFINITY;
    let mut subset: Vec<usize> = (0..m).collect();
    loop {
        let sys = DMatrix::from_fn(m, m, |r, c| {
            let (i, j) = cells[subset[c]];
            if r < n {
                (i == r) as u8 as f64
            } else {
                (j == r - n) as u8 as f64
            }
        });
        if let Some(x) = sys.lu().solve(&rhs) {
            if x.iter().all(|v| v.is_finite() && *v >= -1e-12) {
                let mut plan = DMatrix::zeros(n, n);
                for (c, &cell) in subset.iter().enumerate() {
                    plan[cells[cell]] = x[c];
                }
                let feasible = (0..n).all(|j| (plan.column(j).sum() - zeta[j]).abs() < 1e-9)
                    && (0..n).all(|i| (plan.row(i).sum() - mu[i]).abs() < 1e-9);
                if feasible {
                    best = best.min(plan.component_mul(cost).sum());
                }
            }
        }
        // Next combination in lexicographic order.
        let mut k = m;
        loop {
            if k == 0 {
                return best;
            }
            k -= 1;
            if subset[k] < cells.len() - m + k {
                break;
            }
        }
        subset[k] += 1;
        for r in (k + 1)..m {
            subset[r] = subset[r - 1] + 1;
        }
    }
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| {
        let mut p = x.clone();
        let mut m = x.clone();
        p[k] += h;
        m[k] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

/// Central finite-difference Jacobian; column `k` is the derivative along `e_k`.
pub fn fd_jacobian(g: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..x.len())
        .map(|k| {
            let mut p = x.clone();
            let mut m = x.clone();
            p[k] += h;
            m[k] -= h;
            (g(&p) - g(&m)) / (2.0 * h)
        })
        .collect();
    DMatrix::from_columns(&cols)
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vertex_enumeration_small_cases() {
        let c = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let mu = DVector::from_vec(vec![1.0, 0.0]);
        let zeta = DVector::from_vec(vec![0.0, 1.0]);
        assert!((vertex_enumeration_lp(&mu, &zeta, &c) - 1.0).abs() < 1e-12);
        let u = DVector::from_vec(vec![0.5, 0.5]);
        assert!(vertex_enumeration_lp(&u, &u, &c).abs() < 1e-12);
    }

    #[test]
    fn entropic_oracle_is_feasible() {
        let c = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 4.0, 1.0, 0.0, 1.0, 4.0, 1.0, 0.0]);
        let mu = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let zeta = DVector::from_vec(vec![0.6, 0.1, 0.3]);
        let (_, plan) = entropic_plan_oracle(&mu, &zeta, &c, 0.1);
        for i in 0..3 {
            assert!((plan.row(i).sum() - mu[i]).abs() < 1e-12);
            assert!((plan.column(i).sum() - zeta[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_oracle_is_exact_in_one_step() {
        let c = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let a = DVector::from_vec(vec![0.3, -0.2]);
        let zeta = DVector::from_vec(vec![0.4, 0.6]);
        let one = prox_plan_oracle(OracleEnergy::Linear, &a, &zeta, &c, 0.5, 2.0, 1);
        let many = prox_plan_oracle(OracleEnergy::Linear, &a, &zeta, &c, 0.5, 2.0, 100);
        assert!((one - many).amax() < 1e-15);
    }

    #[test]
    fn finite_differences_of_quadratic() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let x = DVector::from_vec(vec![0.5, -1.0]);
        let g = fd_gradient(|y| 0.5 * y.dot(&(&q * y)), &x, 1e-5);
        assert!((g - &q * &x).amax() < 1e-8);
        let h = fd_jacobian(|y| &q * y, &x, 1e-5);
        assert!((h - &q).amax() < 1e-8);
        assert!((min_eigenvalue(&q) - (2.5 - 1.25f64.sqrt())).abs() < 1e-12);
    }
}
