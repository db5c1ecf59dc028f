use nalgebra::DVector;
use proptest::prelude::*;

use sinkadmm::functionals::{prox_linear, prox_log_entropy, ProxParams};
use sinkadmm::inner_admm::{grad_f, hess_vec, project_consensus};
use sinkadmm::measures::{
    cost_from_points, gibbs_kernel, make_uniform_grid, read_csv, write_csv, GibbsKernel, KernelMode, ProbabilityVector,
    SIMPLEX_TOL,
};
use sinkadmm::pde_flows::{count_groupings, enumerate_groupings};
use sinkadmm::transport::{exact_wasserstein, sinkhorn_divergence};
use sinkadmm::validation::oracles::pseudoinverse_projection;

fn points(n: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec([-2.0..2.0f64, -2.0..2.0f64], n)
}

fn weights(n: usize) -> impl Strategy<Value = ProbabilityVector> {
    prop::collection::vec(0.01..1.0f64, n).prop_map(|w| ProbabilityVector::from_weights(DVector::from_vec(w)).unwrap())
}

fn instance(n: usize) -> impl Strategy<Value = (Vec<[f64; 2]>, ProbabilityVector, ProbabilityVector)> {
    (points(n), weights(n), weights(n))
}

fn kernel_for(pts: &[[f64; 2]], eps: f64) -> GibbsKernel {
    let cost = cost_from_points(pts.iter().map(|p| &p[..]), pts.len());
    gibbs_kernel(&cost, eps, KernelMode::Direct).unwrap()
}

fn on_simplex(p: &ProbabilityVector) -> bool {
    (p.values().sum() - 1.0).abs() <= SIMPLEX_TOL && p.values().iter().all(|&v| v >= 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cost_is_a_symmetric_squared_distance(pts in points(6)) {
        let c = cost_from_points(pts.iter().map(|p| &p[..]), 6);
        for i in 0..6 {
            prop_assert_eq!(c.get(i, i), 0.0);
            for j in 0..6 {
                prop_assert_eq!(c.get(i, j), c.get(j, i));
                prop_assert!(c.get(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn log_domain_kernel_matches_direct(pts in points(7), x in prop::collection::vec(0.01..2.0f64, 7)) {
        let cost = cost_from_points(pts.iter().map(|p| &p[..]), 7);
        let direct = gibbs_kernel(&cost, 0.3, KernelMode::Direct).unwrap();
        let logd = gibbs_kernel(&cost, 0.3, KernelMode::LogDomain).unwrap();
        let x = DVector::from_vec(x);
        let a = direct.apply(&x);
        let b = logd.log_apply(&x.map(f64::ln)).map(f64::exp);
        prop_assert!((&a - &b).amax() <= 1e-12 * a.amax());
    }

    #[test]
    fn projection_is_feasible_idempotent_and_orthogonal(
        vs in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 5), 2..5),
        target in prop::collection::vec(-1.0..1.0f64, 5),
    ) {
        let vs: Vec<DVector<f64>> = vs.into_iter().map(DVector::from_vec).collect();
        let target = DVector::from_vec(target);
        let p = project_consensus(&vs, &target);
        let sum = p.iter().fold(DVector::zeros(5), |acc, v| acc + v);
        prop_assert!((sum - &target).amax() <= 1e-12);
        let pp = project_consensus(&p, &target);
        for (a, b) in p.iter().zip(&pp) {
            prop_assert!((a - b).amax() <= 1e-12);
        }
        for (a, b) in p.iter().zip(&pseudoinverse_projection(&vs, &target)) {
            prop_assert!((a - b).amax() <= 1e-10);
        }
    }

    #[test]
    fn dual_gradient_sums_and_hessian_null_vector((pts, mu, _) in instance(8), u in prop::collection::vec(-0.2..0.2f64, 8)) {
        let k = kernel_for(&pts, 0.2);
        let u = DVector::from_vec(u);
        let g = grad_f(&u, &mu, &k).unwrap();
        prop_assert!((g.sum() - 5.0).abs() <= 1e-10);
        let h1 = hess_vec(&u, &mu, &k, &DVector::from_element(8, 1.0)).unwrap();
        prop_assert!(h1.amax() <= 1e-10);
    }

    #[test]
    fn proximal_outputs_lie_on_the_simplex(
        (pts, zeta, _) in instance(6),
        a in prop::collection::vec(-1.0..1.0f64, 6),
        alpha in 1.0..20.0f64,
    ) {
        let k = kernel_for(&pts, 0.1);
        let a = DVector::from_vec(a);
        prop_assert!(on_simplex(&prox_linear(&a, &zeta, &k, alpha).unwrap()));
        let params = ProxParams::new(alpha, 1e-8, 500).unwrap();
        let s = prox_log_entropy(1.0, &a, &zeta, &k, &params).unwrap();
        prop_assert!(on_simplex(&s.mu));
        prop_assert!(s.mu.is_strictly_positive());
    }

    #[test]
    fn exact_transport_is_a_squared_metric((pts, mu, zeta) in instance(6)) {
        let cost = cost_from_points(pts.iter().map(|p| &p[..]), 6);
        let w = exact_wasserstein(&mu, &zeta, &cost).unwrap();
        let back = exact_wasserstein(&zeta, &mu, &cost).unwrap();
        prop_assert!(w >= -1e-12);
        prop_assert!((w - back).abs() <= 1e-10);
        prop_assert!(exact_wasserstein(&mu, &mu, &cost).unwrap().abs() <= 1e-12);
        // The product coupling is feasible, so it bounds the optimum.
        let product = mu.values().transpose() * cost.matrix() * zeta.values();
        prop_assert!(w <= product[(0, 0)] + 1e-12);
    }

    #[test]
    fn sinkhorn_plan_has_the_requested_marginals((pts, mu, zeta) in instance(6)) {
        let k = kernel_for(&pts, 0.5);
        let (_, plan) = sinkhorn_divergence(&mu, &zeta, &k, 10_000, 1e-12).unwrap();
        prop_assert!(plan.marginal_error() <= 1e-11);
        prop_assert!(plan.matrix.iter().all(|&m| m >= 0.0));
    }

    #[test]
    fn csv_round_trip(mu in weights(9)) {
        let grid = make_uniform_grid(&[(-1.0, 1.0), (0.0, 2.0)], &[3, 3]).unwrap();
        let mut buf = Vec::new();
        write_csv(&grid, &mu, &mut buf).unwrap();
        let (pts, back) = read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.values(), mu.values());
        for (p, q) in pts.iter().zip(grid.points()) {
            prop_assert_eq!(&p[..], q);
        }
    }

    #[test]
    fn grouping_counts_match_enumeration(n in 1usize..=7, r_frac in 0.0..1.0f64) {
        let r = 1 + ((n - 1) as f64 * r_frac) as usize;
        let listed = enumerate_groupings(n, r).unwrap();
        prop_assert_eq!(listed.len() as u128, count_groupings(n, r, false).unwrap());
        for g in &listed {
            prop_assert!(g.len() <= r);
            let mut all: Vec<usize> = g.iter().flatten().copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
        if r < n {
            prop_assert!(count_groupings(n, r + 1, false).unwrap() > count_groupings(n, r, false).unwrap());
        }
    }
}
