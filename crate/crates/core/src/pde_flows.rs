//! Gradient-flow experiments: operator splittings, presets, stationary
//! references and the combinatorics of grouping summands across workers.
//!
//! A PDE is a sum of operators, each the Wasserstein gradient of one energy:
//!
//! | operator              | energy                    |
//! |-----------------------|---------------------------|
//! | `advection`           | `<V, mu>`                 |
//! | `interaction`         | `<U mu, mu>`              |
//! | `log_diffusion`       | `beta^{-1} <log mu, mu>`  |
//! | `quadratic_diffusion` | `beta^{-1} <mu, mu>`      |
//!
//! A [`SplittingSpec`] partitions the operators into groups; each group
//! becomes the functional of one worker.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{
    FunctionalSpec, GridSpec, InitialSpec, PotentialSpec, ProxSettings, ReferenceSpec, SolveConfig,
};
use crate::error::{Error, Result};
use crate::inner_admm::NewtonParams;
use crate::measures::{
    cost_matrix, gaussian_mixture, make_uniform_grid, CostMatrix, GibbsKernel, KernelMode, ProbabilityVector,
    SampleSet,
};
use crate::functionals::{discretize_drift, discretize_interaction, FreeEnergyFunctional, Internal};
use crate::outer_admm::ObjectiveAt;
use crate::transport::exact_wasserstein;

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 5] = [
    "fpk",
    "aggregation-case1",
    "aggregation-case2",
    "aggregation-case3",
    "aggregation-case4",
];

/// Inverse temperature of the aggregation presets, `1 / 0.052`.
pub const AGGREGATION_BETA: f64 = 1.0 / 0.052;

/// Inner and outer radius of the aggregation steady state.
pub const ANNULUS_RADII: (f64, f64) = (0.5, 1.118_033_988_749_895);

/// Scalar potentials available to configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Potential {
    /// `(1 + x^4) / 4 + (y^2 - x^2) / 2`, two-dimensional.
    DoubleWell,
    /// `|x|^2 / 2`.
    Quadratic,
    /// `-ln|x| / 4`.
    LogRadius,
    /// `|x|^2 / 2 - ln|x|`.
    AttractRepel,
}

impl Potential {
    pub fn value(self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        match self {
            Potential::DoubleWell => {
                let (a, b) = (x[0], x[1]);
                0.25 * (1.0 + a.powi(4)) + 0.5 * (b * b - a * a)
            }
            Potential::Quadratic => 0.5 * r2,
            Potential::LogRadius => -0.125 * r2.ln(),
            Potential::AttractRepel => 0.5 * r2 - 0.5 * r2.ln(),
        }
    }

    fn check_dim(self, d: usize) -> Result<()> {
        if self == Potential::DoubleWell && d != 2 {
            return Err(Error::param("potentials", "double_well is two-dimensional"));
        }
        Ok(())
    }
}

/// One operator of a gradient-flow PDE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Advection,
    Interaction,
    LogDiffusion,
    QuadraticDiffusion,
}

/// Partition of a PDE's operators into per-worker groups.
#[derive(Clone, Debug, PartialEq)]
pub struct SplittingSpec {
    pub groups: Vec<Vec<Operator>>,
}

impl SplittingSpec {
    /// Operators covered by the splitting, sorted.
    pub fn operators(&self) -> Vec<Operator> {
        let mut ops: Vec<Operator> = self.groups.iter().flatten().copied().collect();
        ops.sort();
        ops
    }

    /// Requires at least two nonempty, disjoint groups, at most one diffusion
    /// per group and potentials for the operators that use them.
    pub fn validate(&self, potentials: &PotentialSpec) -> Result<()> {
        if self.groups.len() < 2 {
            return Err(Error::param("functional", "need at least two summands"));
        }
        let ops = self.operators();
        if ops.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::param("functional", "an operator appears in more than one place"));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::param("functional", format!("summand {i} has no terms")));
            }
            let diffusions = g
                .iter()
                .filter(|o| matches!(o, Operator::LogDiffusion | Operator::QuadraticDiffusion))
                .count();
            if diffusions > 1 {
                return Err(Error::param("functional", format!("summand {i} has more than one diffusion")));
            }
        }
        if ops.contains(&Operator::Advection) && potentials.drift.is_none() {
            return Err(Error::param("potentials", "advection needs a drift potential"));
        }
        if ops.contains(&Operator::Interaction) && potentials.interaction.is_none() {
            return Err(Error::param("potentials", "interaction needs an interaction potential"));
        }
        Ok(())
    }

    /// One functional per group, with potentials discretized on `samples`.
    pub fn compile(
        &self,
        potentials: &PotentialSpec,
        samples: &SampleSet,
        beta: f64,
        h: f64,
    ) -> Result<Vec<FreeEnergyFunctional>> {
        self.validate(potentials)?;
        let ops = self.operators();
        let n = samples.len();
        let drift = match potentials.drift {
            Some(v) if ops.contains(&Operator::Advection) => {
                v.check_dim(samples.dim())?;
                Some(discretize_drift(&|x| v.value(x), samples, h)?)
            }
            _ => None,
        };
        let interaction = match potentials.interaction {
            Some(u) if ops.contains(&Operator::Interaction) => {
                u.check_dim(samples.dim())?;
                Some(discretize_interaction(&|x| u.value(x), samples, h)?)
            }
            _ => None,
        };
        self.groups
            .iter()
            .map(|g| {
                let a = match (&drift, g.contains(&Operator::Advection)) {
                    (Some(v), true) => v.clone(),
                    _ => DVector::zeros(n),
                };
                let u: Option<DMatrix<f64>> = match (&interaction, g.contains(&Operator::Interaction)) {
                    (Some(m), true) => Some(m.clone()),
                    _ => None,
                };
                let internal = if g.contains(&Operator::LogDiffusion) {
                    Internal::LogEntropy { beta }
                } else if g.contains(&Operator::QuadraticDiffusion) {
                    Internal::PowerLaw { beta }
                } else {
                    Internal::None
                };
                FreeEnergyFunctional::new(a, u, internal)
            })
            .collect()
    }
}

/// Kind of a known stationary solution.
#[derive(Clone, Debug, PartialEq)]
pub enum ReferenceKind {
    Gibbs { potential: Potential, beta: f64 },
    Annulus { inner_radius: f64, outer_radius: f64 },
}

/// Stationary solution on the experiment grid.
#[derive(Clone, Debug)]
pub struct StationaryReference {
    pub kind: ReferenceKind,
    pub density: ProbabilityVector,
}

impl StationaryReference {
    /// `exp(-beta V)` at the samples, normalized.
    pub fn gibbs(potential: Potential, beta: f64, samples: &SampleSet, h: f64) -> Result<Self> {
        potential.check_dim(samples.dim())?;
        let v = discretize_drift(&|x| potential.value(x), samples, h)?;
        let vmin = v.min();
        let density = ProbabilityVector::from_weights(v.map(|x| (-beta * (x - vmin)).exp()))?;
        Ok(Self {
            kind: ReferenceKind::Gibbs { potential, beta },
            density,
        })
    }

    /// Uniform on the samples with `inner_radius <= |x| <= outer_radius`, zero
    /// elsewhere.
    pub fn annulus(inner_radius: f64, outer_radius: f64, samples: &SampleSet) -> Result<Self> {
        let inside = |x: &[f64]| {
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            inner_radius <= r && r <= outer_radius
        };
        let count = samples.points().filter(|x| inside(x)).count();
        if count == 0 {
            return Err(Error::param("reference", "no sample lies in the annulus"));
        }
        let w = 1.0 / count as f64;
        let density = DVector::from_iterator(samples.len(), samples.points().map(|x| if inside(x) { w } else { 0.0 }));
        Ok(Self {
            kind: ReferenceKind::Annulus {
                inner_radius,
                outer_radius,
            },
            density: ProbabilityVector::new(density)?,
        })
    }
}

/// Squared exact Wasserstein distance to the reference density.
pub fn distance_to_reference(mu: &ProbabilityVector, reference: &StationaryReference, cost: &CostMatrix) -> Result<f64> {
    exact_wasserstein(mu, &reference.density, cost)
}

/// A configuration materialized on its grid.
#[derive(Clone, Debug)]
pub struct Problem {
    pub samples: SampleSet,
    pub cost: CostMatrix,
    pub kernel: GibbsKernel,
    pub functionals: Vec<FreeEnergyFunctional>,
    pub initial: ProbabilityVector,
    pub reference: Option<StationaryReference>,
}

impl Problem {
    pub fn from_config(c: &SolveConfig) -> Result<Self> {
        c.validate()?;
        let samples = make_uniform_grid(&c.grid.bounds_pairs(), &c.grid.counts)?;
        let cost = cost_matrix(&samples);
        let kernel = GibbsKernel::on_grid(&samples, c.epsilon, c.kernel_mode)?;
        let functionals = c.splitting().compile(&c.potentials, &samples, c.beta, c.h)?;
        let initial = match &c.initial {
            InitialSpec::Uniform => ProbabilityVector::uniform(samples.len()),
            InitialSpec::GaussianMixture {
                means,
                variance,
                weights,
            } => {
                let d = samples.dim();
                let w = weights
                    .clone()
                    .unwrap_or_else(|| vec![1.0 / means.len() as f64; means.len()]);
                gaussian_mixture(&samples, means, &(DMatrix::identity(d, d) * *variance), &w)?
            }
        };
        let reference = match &c.reference {
            None => None,
            Some(ReferenceSpec::Gibbs) => Some(StationaryReference::gibbs(
                c.potentials.drift.expect("validated"),
                c.beta,
                &samples,
                c.h,
            )?),
            Some(ReferenceSpec::Annulus {
                inner_radius,
                outer_radius,
            }) => Some(StationaryReference::annulus(*inner_radius, *outer_radius, &samples)?),
        };
        Ok(Self {
            samples,
            cost,
            kernel,
            functionals,
            initial,
            reference,
        })
    }
}

/// Equal-weight mixture at `(+-1, +-1)` and the origin with covariance `0.1 I`.
pub fn five_gaussian_initial() -> InitialSpec {
    InitialSpec::GaussianMixture {
        means: vec![
            vec![1.0, 1.0],
            vec![-1.0, -1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![0.0, 0.0],
        ],
        variance: 0.1,
        weights: None,
    }
}

fn base_config(grid: GridSpec, alpha: f64, tau: f64, beta: f64, epsilon: f64) -> SolveConfig {
    SolveConfig {
        preset: None,
        alpha,
        tau,
        epsilon,
        beta,
        inner_iters: 3,
        max_outer_iters: 5000,
        consensus_tol: f64::INFINITY,
        snapshot_every: 100,
        threads: 1,
        warm_start: true,
        kernel_mode: KernelMode::Direct,
        output: "out".into(),
        h: 5e-3,
        objective_at: ObjectiveAt::Mean,
        grid,
        potentials: PotentialSpec::default(),
        prox: ProxSettings::default(),
        newton: NewtonParams::default(),
        initial: five_gaussian_initial(),
        reference: None,
        functional: Vec::new(),
    }
}

fn check_positive(params: &[(&'static str, f64)]) -> Result<()> {
    for &(name, v) in params {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::param(name, format!("must be positive, got {v}")));
        }
    }
    Ok(())
}

/// Linear Fokker-Planck equation with the double-well drift, split into
/// advection and log diffusion.
pub fn build_fpk_experiment(grid: GridSpec, alpha: f64, tau: f64, beta: f64, epsilon: f64) -> Result<SolveConfig> {
    check_positive(&[("alpha", alpha), ("tau", tau), ("beta", beta), ("epsilon", epsilon)])?;
    let mut c = base_config(grid, alpha, tau, beta, epsilon);
    c.preset = Some("fpk".into());
    c.output = "out/fpk".into();
    c.potentials.drift = Some(Potential::DoubleWell);
    c.functional = vec![
        FunctionalSpec {
            terms: vec![Operator::Advection],
        },
        FunctionalSpec {
            terms: vec![Operator::LogDiffusion],
        },
    ];
    c.reference = Some(ReferenceSpec::Gibbs);
    Ok(c)
}

/// Operator groups of the aggregation-drift-diffusion splittings 1 to 4.
pub fn aggregation_splitting(case: u8) -> Result<SplittingSpec> {
    use Operator::{Advection as V, Interaction as U, QuadraticDiffusion as D};
    let groups = match case {
        1 => vec![vec![V, D], vec![U]],
        2 => vec![vec![U, D], vec![V]],
        3 => vec![vec![V, U], vec![D]],
        4 => vec![vec![V], vec![U], vec![D]],
        _ => return Err(Error::param("case", format!("must be 1..=4, got {case}"))),
    };
    Ok(SplittingSpec { groups })
}

/// Aggregation-drift-diffusion equation with `U = |x|^2/2 - ln|x|`,
/// `V = -ln|x|/4` and quadratic diffusion, split as in `case`.
#[allow(clippy::too_many_arguments)]
pub fn build_aggregation_experiment(
    grid: GridSpec,
    case: u8,
    alpha: f64,
    tau: f64,
    beta: f64,
    epsilon: f64,
    h: f64,
) -> Result<SolveConfig> {
    check_positive(&[("alpha", alpha), ("tau", tau), ("beta", beta), ("epsilon", epsilon), ("h", h)])?;
    let splitting = aggregation_splitting(case)?;
    let mut c = base_config(grid, alpha, tau, beta, epsilon);
    c.preset = Some(format!("aggregation-case{case}"));
    c.output = format!("out/aggregation-case{case}").into();
    c.max_outer_iters = 10_000;
    c.h = h;
    c.potentials = PotentialSpec {
        drift: Some(Potential::LogRadius),
        interaction: Some(Potential::AttractRepel),
    };
    c.functional = splitting
        .groups
        .into_iter()
        .map(|terms| FunctionalSpec { terms })
        .collect();
    c.reference = Some(ReferenceSpec::Annulus {
        inner_radius: ANNULUS_RADII.0,
        outer_radius: ANNULUS_RADII.1,
    });
    Ok(c)
}

/// Configuration of a named experiment on the 41 x 41 grid over `[-2, 2]^2`.
pub fn preset(name: &str) -> Result<SolveConfig> {
    let grid = GridSpec::square(-2.0, 2.0, 41, 2);
    if name == "fpk" {
        return build_fpk_experiment(grid, 12.0, 150.0, 1.0, 0.05);
    }
    match name.strip_prefix("aggregation-case").and_then(|s| s.parse::<u8>().ok()) {
        Some(case @ 1..=4) => build_aggregation_experiment(grid, case, 12.0, 150.0, AGGREGATION_BETA, 0.05, 5e-3),
        _ => Err(Error::param(
            "preset",
            format!("unknown preset `{name}` (expected one of {})", PRESETS.join(", ")),
        )),
    }
}

/// `S(n, 1) + .. + S(n, r)`: the number of ways to split `n` summands among at
/// most `r` computers. With `exclude_centralized` the single-group split is
/// not counted.
pub fn count_groupings(n_summands: usize, r_computers: usize, exclude_centralized: bool) -> Result<u128> {
    if n_summands == 0 || r_computers == 0 || r_computers > n_summands {
        return Err(Error::param("r_computers", "need 1 <= r <= n"));
    }
    let overflow = || Error::param("n_summands", "count does not fit in 128 bits");
    // row[k] = S(i, k) for the current i.
    let mut row = vec![0u128; r_computers + 1];
    row[0] = 1;
    for _ in 0..n_summands {
        for k in (1..=r_computers).rev() {
            row[k] = (k as u128)
                .checked_mul(row[k])
                .and_then(|v| v.checked_add(row[k - 1]))
                .ok_or_else(overflow)?;
        }
        row[0] = 0;
    }
    let mut total: u128 = 0;
    for &s in &row[1..] {
        total = total.checked_add(s).ok_or_else(overflow)?;
    }
    Ok(if exclude_centralized { total - 1 } else { total })
}

/// All partitions of `{0, .., n-1}` into at most `r` blocks, ordered
/// lexicographically by restricted growth string. Blocks are listed by their
/// smallest element.
pub fn enumerate_groupings(n_summands: usize, r_computers: usize) -> Result<Vec<Vec<Vec<usize>>>> {
    if n_summands > 8 {
        return Err(Error::TooManySummands(n_summands));
    }
    if n_summands == 0 || r_computers == 0 || r_computers > n_summands {
        return Err(Error::param("r_computers", "need 1 <= r <= n"));
    }
    let mut out = Vec::new();
    let mut rgs = vec![0usize; n_summands];
    grow(&mut rgs, 1, 0, r_computers, &mut out);
    Ok(out)
}

fn grow(rgs: &mut [usize], pos: usize, max: usize, r: usize, out: &mut Vec<Vec<Vec<usize>>>) {
    if pos == rgs.len() {
        let mut blocks = vec![Vec::new(); max + 1];
        for (i, &b) in rgs.iter().enumerate() {
            blocks[b].push(i);
        }
        out.push(blocks);
        return;
    }
    for b in 0..=(max + 1).min(r - 1) {
        rgs[pos] = b;
        grow(rgs, pos + 1, max.max(b), r, out);
    }
}
