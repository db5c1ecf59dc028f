//! Outer consensus ADMM in the Sinkhorn-regularized Wasserstein geometry.
//!
//! One iteration, for workers `i = 1..n`:
//!
//! ```text
//! mu_i   <- argmin_mu  Sinkhorn(mu, zeta) + (1/alpha)(F_i(mu) + <nu_i, mu>)   (parallel)
//! zeta   <- barycentric proximal of the new mu_i with target (2/alpha) sum_i nu_i
//! nu_i   <- nu_i + alpha (mu_i - zeta)                                          (parallel)
//! ```
//!
//! The `zeta` step is solved by the inner ADMM in [`crate::inner_admm`]. All
//! cross-worker reductions run on the coordinator in index order, so results
//! do not depend on the number of threads.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::config::SolveConfig;
use crate::error::{Error, Result};
use crate::functionals::{prox, FreeEnergyFunctional, ProxParams, ProxSolution};
use crate::inner_admm::{run_inner, tau_lower_bound, BarycentricInputs, InnerDualState, NewtonParams};
use crate::measures::{CostMatrix, GibbsKernel, ProbabilityVector};
use crate::parallel::map_indexed;
use crate::pde_flows::{distance_to_reference, Problem};
use crate::transport::exact_wasserstein;

/// Where the consensus objective is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveAt {
    /// Normalized arithmetic mean of the worker measures.
    #[default]
    Mean,
    /// The consensus variable `zeta`.
    Zeta,
}

/// Iterate of the outer ADMM.
#[derive(Clone, Debug)]
pub struct OuterState {
    pub mus: Vec<ProbabilityVector>,
    pub zeta: ProbabilityVector,
    pub nus: Vec<DVector<f64>>,
    pub k: usize,
    pub alpha: f64,
    pub functionals: Arc<[FreeEnergyFunctional]>,
}

impl OuterState {
    /// `mu_i = zeta = initial`, `nu_i = 0`, `k = 0`.
    pub fn new(functionals: Vec<FreeEnergyFunctional>, initial: ProbabilityVector, alpha: f64) -> Result<Self> {
        if functionals.len() < 2 {
            return Err(Error::param("functionals", "need at least two workers"));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::param("alpha", format!("must be positive, got {alpha}")));
        }
        let n = initial.len();
        if let Some(f) = functionals.iter().find(|f| f.len() != n) {
            return Err(Error::DimensionMismatch { expected: n, got: f.len() });
        }
        let workers = functionals.len();
        Ok(Self {
            mus: vec![initial.clone(); workers],
            zeta: initial,
            nus: vec![DVector::zeros(n); workers],
            k: 0,
            alpha,
            functionals: functionals.into(),
        })
    }

    pub fn workers(&self) -> usize {
        self.mus.len()
    }
}

/// `sum_i nu_i`, accumulated in index order.
pub fn nu_sum(state: &OuterState) -> DVector<f64> {
    let n = state.zeta.len();
    state.nus.iter().fold(DVector::zeros(n), |acc, v| acc + v)
}

/// Proximal steps of all workers anchored at the current `zeta`. Worker `i`
/// sees only `F_i`, `nu_i`, `mu_i` and `zeta`.
pub fn mu_update_all(
    state: &OuterState,
    kernel: &GibbsKernel,
    params: &ProxParams,
    pool: Option<&ThreadPool>,
) -> Result<Vec<ProxSolution>> {
    map_indexed(pool, state.workers(), |i| {
        prox(&state.functionals[i], &state.nus[i], &state.mus[i], &state.zeta, kernel, params).map_err(|e| e.in_worker(i))
    })
    .into_iter()
    .collect()
}

/// `nu_i + alpha (mu_i - zeta)` for every worker.
pub fn nu_update_all(
    state: &OuterState,
    new_mus: &[ProbabilityVector],
    new_zeta: &ProbabilityVector,
) -> Vec<DVector<f64>> {
    state
        .nus
        .iter()
        .zip(new_mus)
        .map(|(nu, mu)| nu + (mu.values() - new_zeta.values()) * state.alpha)
        .collect()
}

/// Exact pairwise distances between worker measures and the objective at the
/// consensus representative.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusReport {
    /// Optimal values of the Kantorovich programs, i.e. squared Wasserstein
    /// distances.
    pub pairwise: DMatrix<f64>,
    pub max_pairwise: f64,
    /// `sum_i F_i` at the representative chosen by [`ObjectiveAt`].
    pub objective: f64,
}

pub fn consensus_report(
    state: &OuterState,
    cost: &CostMatrix,
    objective_at: ObjectiveAt,
    pool: Option<&ThreadPool>,
) -> Result<ConsensusReport> {
    let n = state.workers();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let values = map_indexed(pool, pairs.len(), |p| {
        let (i, j) = pairs[p];
        exact_wasserstein(&state.mus[i], &state.mus[j], cost).map(|w| w.max(0.0))
    });
    let mut pairwise = DMatrix::zeros(n, n);
    let mut max_pairwise: f64 = 0.0;
    for (&(i, j), w) in pairs.iter().zip(values) {
        let w = w?;
        pairwise[(i, j)] = w;
        pairwise[(j, i)] = w;
        max_pairwise = max_pairwise.max(w);
    }
    let representative = match objective_at {
        ObjectiveAt::Mean => mean_measure(&state.mus)?,
        ObjectiveAt::Zeta => state.zeta.clone(),
    };
    let objective = state
        .functionals
        .iter()
        .map(|f| f.evaluate(representative.values()))
        .sum();
    Ok(ConsensusReport {
        pairwise,
        max_pairwise,
        objective,
    })
}

/// Normalized arithmetic mean, summed in index order.
pub fn mean_measure(mus: &[ProbabilityVector]) -> Result<ProbabilityVector> {
    let n = mus[0].len();
    let sum = mus.iter().fold(DVector::zeros(n), |acc, m| acc + m.values());
    ProbabilityVector::from_weights(sum / mus.len() as f64)
}

/// Parameters of the outer loop.
#[derive(Clone, Debug)]
pub struct OuterSettings {
    pub prox: ProxParams,
    pub tau: f64,
    pub inner_iters: usize,
    pub newton: NewtonParams,
    pub warm_start: bool,
    pub objective_at: ObjectiveAt,
    pub consensus_tol: f64,
    pub snapshot_every: usize,
    pub max_outer_iters: usize,
}

impl OuterSettings {
    pub fn from_config(c: &SolveConfig) -> Result<Self> {
        Ok(Self {
            prox: ProxParams::new(c.alpha, c.prox.delta, c.prox.max_sweeps)?,
            tau: c.tau,
            inner_iters: c.inner_iters,
            newton: c.newton,
            warm_start: c.warm_start,
            objective_at: c.objective_at,
            consensus_tol: c.consensus_tol,
            snapshot_every: c.snapshot_every,
            max_outer_iters: c.max_outer_iters,
        })
    }
}

/// Diagnostics of one outer iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IterationStats {
    /// Iteration index after the step.
    pub k: usize,
    /// Spread of the per-worker consensus recoveries.
    pub deviation: f64,
    /// `max_i |mu_i - zeta|_inf`.
    pub primal_residual: f64,
    pub newton_iterations: usize,
    pub prox_sweeps: usize,
    /// Workers whose fixed point hit the sweep limit.
    pub prox_unconverged: usize,
    /// Sup-norm violation of `sum nu' = sum nu + alpha (sum mu' - n zeta')`.
    pub nu_identity_residual: f64,
    /// Sufficient lower bound on `tau` at this iteration.
    pub tau_bound: f64,
}

/// Executes outer iterations, carrying the inner ADMM state between them.
pub struct OuterSolver {
    settings: OuterSettings,
    inner: Option<InnerDualState>,
    pool: Option<ThreadPool>,
}

impl OuterSolver {
    pub fn new(settings: OuterSettings, threads: usize) -> Result<Self> {
        if settings.inner_iters == 0 {
            return Err(Error::param("inner_iters", "must be at least 1"));
        }
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::param("threads", e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            settings,
            inner: None,
            pool,
        })
    }

    pub fn settings(&self) -> &OuterSettings {
        &self.settings
    }

    pub fn pool(&self) -> Option<&ThreadPool> {
        self.pool.as_ref()
    }

    /// Advances `state` by one iteration. On error `state` is left unchanged.
    pub fn step(&mut self, state: &mut OuterState, kernel: &GibbsKernel) -> Result<IterationStats> {
        let pool = self.pool.as_ref();
        let solutions = mu_update_all(state, kernel, &self.settings.prox, pool)?;
        let prox_sweeps = solutions.iter().map(|s| s.sweeps).sum();
        let prox_unconverged = solutions.iter().filter(|s| !s.converged).count();
        let new_mus: Vec<ProbabilityVector> = solutions.into_iter().map(|s| s.mu).collect();

        let sum_before = nu_sum(state);
        let inputs = BarycentricInputs {
            mus: &new_mus,
            kernel,
            nu_sum: &sum_before,
            alpha: state.alpha,
        };
        let tau_bound = tau_lower_bound(&inputs);
        let warm = if self.settings.warm_start { self.inner.take() } else { None };
        let inner = run_inner(
            &inputs,
            warm,
            self.settings.inner_iters,
            self.settings.tau,
            &self.settings.newton,
            pool,
        )?;
        let new_zeta = inner.zeta;
        let new_nus = nu_update_all(state, &new_mus, &new_zeta);

        let n = new_zeta.len();
        let sum_after = new_nus.iter().fold(DVector::zeros(n), |acc, v| acc + v);
        let mu_total = new_mus.iter().fold(DVector::zeros(n), |acc, m| acc + m.values());
        let predicted = &sum_before + (mu_total - new_zeta.values() * new_mus.len() as f64) * state.alpha;
        let nu_identity_residual = (sum_after - predicted).amax();
        let primal_residual = new_mus
            .iter()
            .map(|m| (m.values() - new_zeta.values()).amax())
            .fold(0.0, f64::max);

        self.inner = Some(inner.state);
        state.mus = new_mus;
        state.zeta = new_zeta;
        state.nus = new_nus;
        state.k += 1;
        Ok(IterationStats {
            k: state.k,
            deviation: inner.deviation,
            primal_residual,
            newton_iterations: inner.newton_iterations,
            prox_sweeps,
            prox_unconverged,
            nu_identity_residual,
            tau_bound,
        })
    }
}

/// State of the run at one iteration.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub k: usize,
    pub mus: Vec<ProbabilityVector>,
    pub zeta: ProbabilityVector,
    pub nus: Vec<DVector<f64>>,
    pub report: ConsensusReport,
    /// Squared Wasserstein distance of each worker measure to the stationary
    /// reference, when the problem has one.
    pub reference_distances: Option<Vec<f64>>,
    /// Diagnostics of the iteration that produced this state; `None` at `k = 0`.
    pub stats: Option<IterationStats>,
    /// Seconds since the run started.
    pub elapsed: f64,
}

/// Iterator over the snapshots of an outer run: the initial state, every
/// `snapshot_every` iterations, and the final iteration. Stops after
/// `max_outer_iters`, once the largest pairwise distance at a snapshot past
/// `k = 0` is at most a finite `consensus_tol`, or after the first error.
pub struct OuterRun {
    problem: Problem,
    solver: OuterSolver,
    state: OuterState,
    started: bool,
    done: bool,
    clock: Instant,
}

impl OuterRun {
    pub fn new(problem: Problem, settings: OuterSettings, threads: usize) -> Result<Self> {
        let state = OuterState::new(problem.functionals.clone(), problem.initial.clone(), settings.prox.alpha)?;
        Ok(Self {
            problem,
            solver: OuterSolver::new(settings, threads)?,
            state,
            started: false,
            done: false,
            clock: Instant::now(),
        })
    }

    /// Latest state, including after an error.
    pub fn state(&self) -> &OuterState {
        &self.state
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn settings(&self) -> &OuterSettings {
        self.solver.settings()
    }

    fn snapshot(&self, stats: Option<IterationStats>) -> Result<Snapshot> {
        let pool = self.solver.pool();
        let report = consensus_report(&self.state, &self.problem.cost, self.solver.settings.objective_at, pool)?;
        let reference_distances = match &self.problem.reference {
            Some(r) => Some(
                map_indexed(pool, self.state.workers(), |i| {
                    distance_to_reference(&self.state.mus[i], r, &self.problem.cost).map(|w| w.max(0.0))
                })
                .into_iter()
                .collect::<Result<Vec<f64>>>()?,
            ),
            None => None,
        };
        Ok(Snapshot {
            k: self.state.k,
            mus: self.state.mus.clone(),
            zeta: self.state.zeta.clone(),
            nus: self.state.nus.clone(),
            report,
            reference_distances,
            stats,
            elapsed: self.clock.elapsed().as_secs_f64(),
        })
    }

    fn advance(&mut self) -> Result<Snapshot> {
        let settings = self.solver.settings.clone();
        if !self.started {
            self.started = true;
            self.done = settings.max_outer_iters == 0;
            return self.snapshot(None);
        }
        loop {
            let stats = self.solver.step(&mut self.state, &self.problem.kernel)?;
            let k = self.state.k;
            let last = k >= settings.max_outer_iters;
            if last || k.is_multiple_of(settings.snapshot_every) {
                let snap = self.snapshot(Some(stats))?;
                let consensus = settings.consensus_tol.is_finite() && snap.report.max_pairwise <= settings.consensus_tol;
                self.done = last || consensus;
                return Ok(snap);
            }
        }
    }
}

impl Iterator for OuterRun {
    type Item = Result<Snapshot>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = self.advance();
        if out.is_err() {
            self.done = true;
        }
        Some(out)
    }
}

/// Materializes `config` and returns the iterator over its snapshots.
pub fn run_outer(config: &SolveConfig) -> Result<OuterRun> {
    let problem = Problem::from_config(config)?;
    OuterRun::new(problem, OuterSettings::from_config(config)?, config.threads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::Internal;
    use crate::measures::{cost_matrix, gibbs_kernel, make_uniform_grid, KernelMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> ProbabilityVector {
        ProbabilityVector::from_weights(DVector::from_fn(n, |_, _| rng.gen_range(0.1..1.0))).unwrap()
    }

    fn zero_functionals(n: usize, workers: usize) -> Vec<FreeEnergyFunctional> {
        (0..workers)
            .map(|_| FreeEnergyFunctional::linear(DVector::zeros(n)).unwrap())
            .collect()
    }

    #[test]
    fn nu_sum_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = OuterState::new(zero_functionals(4, 3), ProbabilityVector::uniform(4), 2.0).unwrap();
        assert_eq!(nu_sum(&s), DVector::zeros(4));
        let v = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        s.nus = vec![v.clone(), -v.clone(), DVector::zeros(4)];
        assert_eq!(nu_sum(&s), DVector::zeros(4));
        s.nus = (0..3).map(|_| DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let mut expect = DVector::zeros(4);
        for nu in &s.nus {
            expect += nu;
        }
        assert_eq!(nu_sum(&s), expect);
    }

    #[test]
    fn nu_update_increment() {
        let s = OuterState::new(zero_functionals(2, 2), ProbabilityVector::uniform(2), 12.0).unwrap();
        let mu = ProbabilityVector::new(DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let zeta = ProbabilityVector::new(DVector::from_vec(vec![0.0, 1.0])).unwrap();
        let nus = nu_update_all(&s, &[mu.clone(), zeta.clone()], &zeta);
        assert_eq!(nus[0], DVector::from_vec(vec![12.0, -12.0]));
        assert_eq!(nus[1], DVector::zeros(2));
    }

    #[test]
    fn zero_functionals_with_identity_kernel_are_stationary() {
        let n = 5;
        let kernel = GibbsKernel::from_gamma(DMatrix::identity(n, n), 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let initial = random_simplex(&mut rng, n);
        let mut state = OuterState::new(zero_functionals(n, 2), initial.clone(), 4.0).unwrap();
        let params = ProxParams::new(4.0, 1e-10, 50).unwrap();
        let updates = mu_update_all(&state, &kernel, &params, None).unwrap();
        for u in &updates {
            assert!((u.mu.values() - initial.values()).amax() < 1e-14);
        }
        let settings = OuterSettings {
            prox: params,
            tau: 10.0,
            inner_iters: 3,
            newton: NewtonParams::default(),
            warm_start: true,
            objective_at: ObjectiveAt::Mean,
            consensus_tol: f64::INFINITY,
            snapshot_every: 1,
            max_outer_iters: 10,
        };
        let mut solver = OuterSolver::new(settings, 1).unwrap();
        for _ in 0..3 {
            solver.step(&mut state, &kernel).unwrap();
            assert!((state.zeta.values() - initial.values()).amax() < 1e-12);
            for (mu, nu) in state.mus.iter().zip(&state.nus) {
                assert!((mu.values() - initial.values()).amax() < 1e-12);
                assert!(nu.amax() < 1e-12);
            }
        }
    }

    fn small_problem(internal: Internal) -> (Problem, OuterSettings) {
        let samples = make_uniform_grid(&[(-1.0, 1.0)], &[9]).unwrap();
        let cost = cost_matrix(&samples);
        let kernel = gibbs_kernel(&cost, 0.1, KernelMode::Direct).unwrap();
        let drift = DVector::from_iterator(9, samples.points().map(|x| 2.0 * x[0] * x[0]));
        let functionals = vec![
            FreeEnergyFunctional::linear(drift).unwrap(),
            FreeEnergyFunctional::new(DVector::zeros(9), None, internal).unwrap(),
        ];
        let initial = ProbabilityVector::from_weights(DVector::from_fn(9, |i, _| 1.0 + i as f64)).unwrap();
        let settings = OuterSettings {
            prox: ProxParams::new(4.0, 1e-8, 100).unwrap(),
            tau: 200.0,
            inner_iters: 3,
            newton: NewtonParams::default(),
            warm_start: true,
            objective_at: ObjectiveAt::Mean,
            consensus_tol: f64::INFINITY,
            snapshot_every: 4,
            max_outer_iters: 10,
        };
        (
            Problem {
                samples,
                cost,
                kernel,
                functionals,
                initial,
                reference: None,
            },
            settings,
        )
    }

    #[test]
    fn snapshot_cadence_and_simplex() {
        let (problem, settings) = small_problem(Internal::LogEntropy { beta: 1.0 });
        let snaps: Vec<Snapshot> = OuterRun::new(problem, settings, 1)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        let ks: Vec<usize> = snaps.iter().map(|s| s.k).collect();
        assert_eq!(ks, vec![0, 4, 8, 10]);
        assert_eq!(snaps[0].report.max_pairwise, 0.0);
        assert!(snaps[0].stats.is_none());
        for s in &snaps {
            for mu in s.mus.iter().chain(std::iter::once(&s.zeta)) {
                assert!((mu.values().sum() - 1.0).abs() < 1e-9);
                assert!(mu.values().min() >= 0.0);
            }
            if let Some(st) = &s.stats {
                assert!(st.nu_identity_residual < 1e-10);
            }
        }
    }

    #[test]
    fn zero_iterations_emit_initial_only() {
        let (problem, mut settings) = small_problem(Internal::None);
        settings.max_outer_iters = 0;
        let snaps: Vec<_> = OuterRun::new(problem, settings, 1).unwrap().collect();
        assert_eq!(snaps.len(), 1);
    }

    #[test]
    fn consensus_tolerance_stops_early() {
        let (problem, mut settings) = small_problem(Internal::LogEntropy { beta: 1.0 });
        settings.consensus_tol = 1e9;
        settings.snapshot_every = 2;
        let snaps: Vec<_> = OuterRun::new(problem, settings, 1).unwrap().collect();
        assert_eq!(snaps.len(), 2);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (problem, settings) = small_problem(Internal::PowerLaw { beta: 2.0 });
        let a: Vec<Snapshot> = OuterRun::new(problem.clone(), settings.clone(), 1)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        let b: Vec<Snapshot> = OuterRun::new(problem, settings, 3)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mus, y.mus);
            assert_eq!(x.zeta, y.zeta);
            assert_eq!(x.nus, y.nus);
            assert_eq!(x.report, y.report);
        }
    }

    #[test]
    fn report_matches_individual_programs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples = make_uniform_grid(&[(0.0, 1.0), (0.0, 1.0)], &[3, 3]).unwrap();
        let cost = cost_matrix(&samples);
        let mut state = OuterState::new(zero_functionals(9, 3), ProbabilityVector::uniform(9), 1.0).unwrap();
        state.mus = (0..3).map(|_| random_simplex(&mut rng, 9)).collect();
        let r = consensus_report(&state, &cost, ObjectiveAt::Mean, None).unwrap();
        for i in 0..3 {
            assert_eq!(r.pairwise[(i, i)], 0.0);
            for j in 0..3 {
                if i != j {
                    let w = exact_wasserstein(&state.mus[i], &state.mus[j], &cost).unwrap();
                    assert!((r.pairwise[(i, j)] - w).abs() < 1e-12);
                    assert_eq!(r.pairwise[(i, j)], r.pairwise[(j, i)]);
                }
            }
        }
        assert_eq!(r.objective, 0.0);
    }
}
