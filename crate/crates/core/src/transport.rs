//! Entropic and exact optimal transport between measures on a common sample set.
//!
//! [`sinkhorn_divergence`] runs alternating diagonal scalings in log space.
//! [`exact_wasserstein`] solves the Kantorovich linear program with a network
//! simplex on the complete bipartite graph; it is used for reporting and
//! stopping rules, never inside the solver iterations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::measures::{CostMatrix, GibbsKernel, ProbabilityVector};

/// A coupling `M >= 0` with `M 1 = row_marginal`, `M^T 1 = col_marginal`.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub matrix: DMatrix<f64>,
    pub row_marginal: ProbabilityVector,
    pub col_marginal: ProbabilityVector,
}

impl TransportPlan {
    /// Largest absolute deviation of the plan's row and column sums from the
    /// stored marginals.
    pub fn marginal_error(&self) -> f64 {
        let n = self.matrix.nrows();
        let mut err: f64 = 0.0;
        for i in 0..n {
            err = err.max((self.matrix.row(i).sum() - self.row_marginal.values()[i]).abs());
            err = err.max((self.matrix.column(i).sum() - self.col_marginal.values()[i]).abs());
        }
        err
    }
}

/// Scaling vectors of an entropic plan `M = diag(z) Gamma diag(y)`, stored as
/// logarithms.
#[derive(Clone, Debug)]
pub struct DualFactors {
    pub log_y: DVector<f64>,
    pub log_z: DVector<f64>,
}

/// Entropic transport between `mu` (rows) and `zeta` (columns).
///
/// Returns the plan objective `<C/2 + eps log M, M>` together with the plan.
/// Sweeps update `y` first, then `z`, so row marginals are exact after every
/// sweep and convergence is measured on the columns.
pub fn sinkhorn_divergence(
    mu: &ProbabilityVector,
    zeta: &ProbabilityVector,
    kernel: &GibbsKernel,
    max_sweeps: usize,
    tol: f64,
) -> Result<(f64, TransportPlan)> {
    let (factors, _) = sinkhorn_scalings(mu, zeta, kernel, max_sweeps, tol)?;
    let n = kernel.len();
    let eps = kernel.epsilon();
    let mut matrix = DMatrix::zeros(n, n);
    let mut value = 0.0;
    for j in 0..n {
        for i in 0..n {
            let log_gamma = kernel.log_entry(i, j);
            let log_m = factors.log_z[i] + log_gamma + factors.log_y[j];
            let m = log_m.exp();
            matrix[(i, j)] = m;
            if m > 0.0 {
                // C/2 = -eps log Gamma.
                value += m * eps * (log_m - log_gamma);
            }
        }
    }
    let plan = TransportPlan {
        matrix,
        row_marginal: mu.clone(),
        col_marginal: zeta.clone(),
    };
    Ok((value, plan))
}

/// Sinkhorn scalings without materializing the plan. Also returns the number
/// of sweeps performed.
pub fn sinkhorn_scalings(
    mu: &ProbabilityVector,
    zeta: &ProbabilityVector,
    kernel: &GibbsKernel,
    max_sweeps: usize,
    tol: f64,
) -> Result<(DualFactors, usize)> {
    let n = kernel.len();
    for p in [mu, zeta] {
        if p.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: p.len(),
            });
        }
        p.require_positive("Sinkhorn marginal")?;
    }
    let log_mu = mu.ln();
    let log_zeta = zeta.ln();
    let mut log_z: DVector<f64> = DVector::zeros(n);
    let mut log_y: DVector<f64> = DVector::zeros(n);
    let mut err = f64::INFINITY;
    for sweep in 0..=max_sweeps {
        let gz = kernel.log_apply(&log_z);
        if sweep > 0 {
            err = (0..n)
                .map(|j| ((log_y[j] + gz[j]).exp() - zeta.values()[j]).abs())
                .fold(0.0, f64::max);
            if err <= tol {
                return Ok((DualFactors { log_y, log_z }, sweep));
            }
            if sweep == max_sweeps {
                break;
            }
        }
        log_y = &log_zeta - &gz;
        let gy = kernel.log_apply(&log_y);
        log_z = &log_mu - &gy;
        if log_z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Underflow("Sinkhorn scaling"));
        }
    }
    Err(Error::SinkhornNotConverged {
        sweeps: max_sweeps,
        marginal_error: err,
    })
}

/// Optimal value of `min <C, M>` over couplings of `mu` and `zeta`.
///
/// With `C` the squared-distance matrix this is the squared 2-Wasserstein
/// distance.
pub fn exact_wasserstein(mu: &ProbabilityVector, zeta: &ProbabilityVector, cost: &CostMatrix) -> Result<f64> {
    let n = cost.len();
    for p in [mu, zeta] {
        if p.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: p.len(),
            });
        }
    }
    let mut ns = NetworkSimplex::new(mu.as_slice(), zeta.as_slice(), cost.matrix());
    ns.solve()?;
    Ok(ns.total_cost())
}

const UP: bool = true;
const DOWN: bool = false;

/// Primal network simplex for the balanced transportation problem.
///
/// Nodes `0..n` are sources, `n..2n` sinks and `2n` an artificial root. Arc
/// `i * n + j` joins source `i` to sink `j`; arc `n * n + v` is the artificial
/// arc between node `v` and the root. The spanning tree is stored through
/// parent pointers, the tree arc to the parent, and its orientation (`UP` when
/// the arc points from the node to its parent).
struct NetworkSimplex<'a> {
    n: usize,
    cost: &'a DMatrix<f64>,
    art_cost: f64,
    flow: Vec<f64>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    dir: Vec<bool>,
    depth: Vec<usize>,
    potential: Vec<f64>,
    in_tree: Vec<bool>,
    children: Vec<Vec<usize>>,
    next_arc: usize,
    block: usize,
    tol: f64,
}

impl<'a> NetworkSimplex<'a> {
    fn new(supply: &[f64], demand: &[f64], cost: &'a DMatrix<f64>) -> Self {
        let n = supply.len();
        let arcs = n * n;
        let root = 2 * n;
        let max_cost = cost.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let art_cost = (max_cost + 1.0) * (2 * n + 1) as f64;

        let mut flow = vec![0.0; arcs + 2 * n];
        let mut parent = vec![root; 2 * n + 1];
        let mut pred = vec![usize::MAX; 2 * n + 1];
        let mut dir = vec![UP; 2 * n + 1];
        let mut in_tree = vec![false; arcs + 2 * n];
        for v in 0..2 * n {
            let a = arcs + v;
            pred[v] = a;
            in_tree[a] = true;
            if v < n {
                dir[v] = UP;
                flow[a] = supply[v];
            } else {
                dir[v] = DOWN;
                flow[a] = demand[v - n];
            }
        }
        parent[root] = usize::MAX;
        let mut ns = Self {
            n,
            cost,
            art_cost,
            flow,
            parent,
            pred,
            dir,
            depth: vec![0; 2 * n + 1],
            potential: vec![0.0; 2 * n + 1],
            in_tree,
            children: vec![Vec::new(); 2 * n + 1],
            next_arc: 0,
            block: ((arcs as f64).sqrt().ceil() as usize).max(10).min(arcs.max(1)),
            tol: 1e-14 * (max_cost + 1.0),
        };
        ns.refresh_tree();
        ns
    }

    fn arc_cost(&self, a: usize) -> f64 {
        if a < self.n * self.n {
            self.cost[(a / self.n, a % self.n)]
        } else {
            self.art_cost
        }
    }

    fn endpoints(&self, a: usize) -> (usize, usize) {
        let n = self.n;
        if a < n * n {
            (a / n, n + a % n)
        } else {
            let v = a - n * n;
            if v < n {
                (v, 2 * n)
            } else {
                (2 * n, v)
            }
        }
    }

    /// Recomputes children lists, depths and potentials from parent pointers.
    fn refresh_tree(&mut self) {
        let root = 2 * self.n;
        for c in &mut self.children {
            c.clear();
        }
        for v in 0..root {
            let p = self.parent[v];
            self.children[p].push(v);
        }
        self.depth[root] = 0;
        self.potential[root] = 0.0;
        self.refresh_below(root);
    }

    /// Recomputes depth and potential of `top` from its parent, then of its
    /// whole subtree.
    fn refresh_subtree(&mut self, top: usize) {
        let p = self.parent[top];
        let c = self.arc_cost(self.pred[top]);
        self.depth[top] = self.depth[p] + 1;
        self.potential[top] = if self.dir[top] == UP {
            self.potential[p] - c
        } else {
            self.potential[p] + c
        };
        self.refresh_below(top);
    }

    fn refresh_below(&mut self, top: usize) {
        let mut stack = vec![top];
        while let Some(p) = stack.pop() {
            for idx in 0..self.children[p].len() {
                let v = self.children[p][idx];
                let c = self.arc_cost(self.pred[v]);
                self.depth[v] = self.depth[p] + 1;
                // Tree arcs have zero reduced cost c + pi(tail) - pi(head).
                self.potential[v] = if self.dir[v] == UP {
                    self.potential[p] - c
                } else {
                    self.potential[p] + c
                };
                stack.push(v);
            }
        }
    }

    fn reduced_cost(&self, a: usize) -> f64 {
        let (u, v) = self.endpoints(a);
        self.arc_cost(a) + self.potential[u] - self.potential[v]
    }

    /// Block search pricing over real arcs; returns the most negative reduced
    /// cost arc of the first block containing a violating arc.
    fn find_entering(&mut self) -> Option<usize> {
        let arcs = self.n * self.n;
        let mut best = None;
        let mut best_rc = -self.tol;
        let mut scanned = 0;
        let mut in_block = 0;
        let mut a = self.next_arc;
        while scanned < arcs {
            if !self.in_tree[a] {
                let rc = self.reduced_cost(a);
                if rc < best_rc {
                    best_rc = rc;
                    best = Some(a);
                }
            }
            scanned += 1;
            in_block += 1;
            a += 1;
            if a == arcs {
                a = 0;
            }
            if in_block == self.block {
                if best.is_some() {
                    break;
                }
                in_block = 0;
            }
        }
        self.next_arc = a;
        best
    }

    fn solve(&mut self) -> Result<()> {
        let arcs = self.n * self.n;
        let max_pivots = 50 * arcs + 1000;
        let mut pivots = 0;
        while let Some(entering) = self.find_entering() {
            self.pivot(entering);
            pivots += 1;
            if pivots > max_pivots {
                return Err(Error::LinearProgram(format!(
                    "no optimal basis after {max_pivots} pivots"
                )));
            }
        }
        let residual = self.flow[arcs..].iter().fold(0.0f64, |m, f| m.max(*f));
        if residual > 1e-9 {
            return Err(Error::LinearProgram(format!(
                "artificial flow {residual:.3e} remains; marginals are unbalanced"
            )));
        }
        Ok(())
    }

    fn pivot(&mut self, entering: usize) {
        let (first, second) = self.endpoints(entering);

        let mut a = first;
        let mut b = second;
        while a != b {
            if self.depth[a] >= self.depth[b] {
                a = self.parent[a];
            } else {
                b = self.parent[b];
            }
        }
        let join = a;

        // Flow enters along first -> second and returns second -> join -> first.
        let mut delta = f64::INFINITY;
        let mut leaving_node = usize::MAX;
        let mut on_first = true;
        let mut u = first;
        while u != join {
            if self.dir[u] == UP {
                let d = self.flow[self.pred[u]].max(0.0);
                if d < delta {
                    delta = d;
                    leaving_node = u;
                    on_first = true;
                }
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != join {
            if self.dir[u] == DOWN {
                let d = self.flow[self.pred[u]].max(0.0);
                if d <= delta {
                    delta = d;
                    leaving_node = u;
                    on_first = false;
                }
            }
            u = self.parent[u];
        }
        debug_assert!(delta.is_finite(), "transportation problem is bounded");

        if delta > 0.0 {
            self.flow[entering] += delta;
            let mut u = first;
            while u != join {
                let e = self.pred[u];
                if self.dir[u] == UP {
                    self.flow[e] -= delta;
                } else {
                    self.flow[e] += delta;
                }
                u = self.parent[u];
            }
            let mut u = second;
            while u != join {
                let e = self.pred[u];
                if self.dir[u] == UP {
                    self.flow[e] += delta;
                } else {
                    self.flow[e] -= delta;
                }
                u = self.parent[u];
            }
        }

        let leaving = self.pred[leaving_node];
        self.in_tree[leaving] = false;
        self.in_tree[entering] = true;
        self.flow[leaving] = 0.0;

        // Re-hang the path from the entering endpoint up to the leaving node.
        let (start, new_parent, start_dir) = if on_first {
            (first, second, UP)
        } else {
            (second, first, DOWN)
        };
        let mut v = start;
        let mut carried_parent = new_parent;
        let mut carried_pred = entering;
        let mut carried_dir = start_dir;
        loop {
            let old_parent = self.parent[v];
            let old_pred = self.pred[v];
            let old_dir = self.dir[v];
            let siblings = &mut self.children[old_parent];
            let pos = siblings.iter().position(|&c| c == v).expect("tree child lists are consistent");
            siblings.swap_remove(pos);
            self.children[carried_parent].push(v);
            self.parent[v] = carried_parent;
            self.pred[v] = carried_pred;
            self.dir[v] = carried_dir;
            if v == leaving_node {
                break;
            }
            carried_parent = v;
            carried_pred = old_pred;
            carried_dir = !old_dir;
            v = old_parent;
        }
        self.refresh_subtree(start);
    }

    fn total_cost(&self) -> f64 {
        let arcs = self.n * self.n;
        let mut total = 0.0;
        for a in 0..arcs {
            let f = self.flow[a];
            if f > 0.0 {
                total += f * self.arc_cost(a);
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{cost_matrix, gibbs_kernel, make_uniform_grid, KernelMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pv(rng: &mut ChaCha8Rng, n: usize) -> ProbabilityVector {
        ProbabilityVector::from_weights(DVector::from_fn(n, |_, _| rng.gen_range(0.05..1.0))).unwrap()
    }

    #[test]
    fn single_point_sinkhorn() {
        let c = CostMatrix::from_matrix(DMatrix::zeros(1, 1)).unwrap();
        let k = gibbs_kernel(&c, 0.1, KernelMode::Direct).unwrap();
        let p = ProbabilityVector::uniform(1);
        let (value, plan) = sinkhorn_divergence(&p, &p, &k, 100, 1e-12).unwrap();
        assert!(value.abs() < 1e-15);
        assert!((plan.matrix[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_point_plan_is_nearly_diagonal() {
        let c = CostMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let k = gibbs_kernel(&c, 0.02, KernelMode::Direct).unwrap();
        let p = ProbabilityVector::new(DVector::from_vec(vec![0.3, 0.7])).unwrap();
        let (_, plan) = sinkhorn_divergence(&p, &p, &k, 10_000, 1e-10).unwrap();
        assert!(plan.marginal_error() <= 1e-10);
        assert!(plan.matrix[(0, 1)] < 1e-9);
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let g = make_uniform_grid(&[(0.0, 1.0)], &[20]).unwrap();
        let k = gibbs_kernel(&cost_matrix(&g), 0.001, KernelMode::LogDomain).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_pv(&mut rng, 20);
        let b = random_pv(&mut rng, 20);
        match sinkhorn_divergence(&a, &b, &k, 2, 1e-14) {
            Err(Error::SinkhornNotConverged { sweeps, marginal_error }) => {
                assert_eq!(sweeps, 2);
                assert!(marginal_error > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exact_trivial_cases() {
        let c = CostMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let a = ProbabilityVector::dirac(2, 0);
        let b = ProbabilityVector::dirac(2, 1);
        assert!((exact_wasserstein(&a, &b, &c).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(exact_wasserstein(&a, &a, &c).unwrap(), 0.0);
    }

    #[test]
    fn exact_on_line_matches_quantile_formula() {
        // In one dimension the optimal plan is the monotone rearrangement.
        let g = make_uniform_grid(&[(0.0, 1.0)], &[30]).unwrap();
        let c = cost_matrix(&g);
        let x = g.axis_coords(0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a = random_pv(&mut rng, 30);
            let b = random_pv(&mut rng, 30);
            let lp = exact_wasserstein(&a, &b, &c).unwrap();
            let (mut i, mut j) = (0, 0);
            let (mut ra, mut rb) = (a.as_slice()[0], b.as_slice()[0]);
            let mut w = 0.0;
            loop {
                let m = ra.min(rb);
                w += m * (x[i] - x[j]).powi(2);
                ra -= m;
                rb -= m;
                if ra <= 1e-15 {
                    i += 1;
                    if i == 30 {
                        break;
                    }
                    ra += a.as_slice()[i];
                }
                if rb <= 1e-15 {
                    j += 1;
                    if j == 30 {
                        break;
                    }
                    rb += b.as_slice()[j];
                }
            }
            assert!((lp - w).abs() < 1e-9, "lp {lp} vs quantile {w}");
        }
    }

    #[test]
    fn exact_symmetric_and_scale_covariant() {
        let g = make_uniform_grid(&[(-1.0, 1.0), (-1.0, 1.0)], &[6, 6]).unwrap();
        let c = cost_matrix(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_pv(&mut rng, 36);
        let b = random_pv(&mut rng, 36);
        let ab = exact_wasserstein(&a, &b, &c).unwrap();
        let ba = exact_wasserstein(&b, &a, &c).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let scaled = exact_wasserstein(&a, &b, &c.scaled(3.5)).unwrap();
        assert!((scaled - 3.5 * ab).abs() < 1e-11);
    }

    #[test]
    fn sinkhorn_approaches_exact_as_eps_shrinks() {
        let g = make_uniform_grid(&[(0.0, 1.0), (0.0, 1.0)], &[4, 4]).unwrap();
        let c = cost_matrix(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_pv(&mut rng, 16);
        let b = random_pv(&mut rng, 16);
        let exact = exact_wasserstein(&a, &b, &c).unwrap();
        let k = gibbs_kernel(&c, 1e-3, KernelMode::LogDomain).unwrap();
        let (_, plan) = sinkhorn_divergence(&a, &b, &k, 100_000, 1e-10).unwrap();
        let transport: f64 = plan.matrix.component_mul(c.matrix()).sum();
        assert!((transport - exact).abs() < 1e-2 * exact.max(1e-3));
    }
}
