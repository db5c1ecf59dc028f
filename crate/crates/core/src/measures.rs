//! Sample grids, discrete probability vectors, squared-distance cost matrices
//! and Gibbs kernels.
//!
//! Every measure in the solver lives on a fixed [`SampleSet`]: a uniform
//! tensor-product grid, enumerated lexicographically (the first axis varies
//! slowest). A [`ProbabilityVector`] assigns a mass to each sample.
//!
//! The Gibbs kernel `exp(-C / 2 eps)` is the workhorse of every Sinkhorn-type
//! iteration. On a tensor grid it factors into one small kernel per axis, which
//! makes a kernel application cost `O(N * sum(n_axis))` instead of `O(N^2)`.
//! Both representations are available through [`GibbsKernel`], and both can be
//! stored either directly or as log-entries (`-C / 2 eps`) for parameter ranges
//! where the direct entries would underflow.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to constructed densities before renormalization.
pub const POSITIVITY_FLOOR: f64 = 1e-300;

/// Largest admissible `max(C) / (2 eps)` for a direct-mode kernel.
pub const DIRECT_EXPONENT_LIMIT: f64 = 700.0;

/// Tolerance on the total mass of a [`ProbabilityVector`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A uniform tensor-product grid of sample points in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    /// Row-major `N x d` coordinates.
    coords: Vec<f64>,
    bounds: Vec<(f64, f64)>,
    counts: Vec<usize>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.coords[i * d..(i + 1) * d]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim())
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        (hi - lo) / (self.counts[axis] - 1) as f64
    }

    /// Coordinates of the grid lines along one axis.
    pub fn axis_coords(&self, axis: usize) -> Vec<f64> {
        let (lo, hi) = self.bounds[axis];
        let n = self.counts[axis];
        (0..n).map(|k| grid_coord(lo, hi, k, n)).collect()
    }

    /// Index of the sample closest to `x`.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut index = 0;
        let mut stride = 1;
        for axis in (0..self.dim()).rev() {
            let (lo, _) = self.bounds[axis];
            let h = self.spacing(axis);
            let k = ((x[axis] - lo) / h).round().clamp(0.0, (self.counts[axis] - 1) as f64);
            index += k as usize * stride;
            stride *= self.counts[axis];
        }
        index
    }
}

fn grid_coord(lo: f64, hi: f64, k: usize, n: usize) -> f64 {
    // lo + (hi - lo) * k / (n - 1) keeps the endpoints and the midpoint exact.
    lo + (hi - lo) * k as f64 / (n - 1) as f64
}

/// Builds the lexicographically ordered uniform grid with `counts[a]` points on
/// `bounds[a]` for every axis `a`.
pub fn make_uniform_grid(bounds: &[(f64, f64)], counts: &[usize]) -> Result<SampleSet> {
    if bounds.is_empty() || bounds.len() != counts.len() {
        return Err(Error::InvalidGrid(format!(
            "{} bounds for {} axes",
            bounds.len(),
            counts.len()
        )));
    }
    for (axis, (&(lo, hi), &n)) in bounds.iter().zip(counts).enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidGrid(format!(
                "axis {axis}: degenerate interval [{lo}, {hi}]"
            )));
        }
        if n < 2 {
            return Err(Error::InvalidGrid(format!(
                "axis {axis}: need at least 2 points, got {n}"
            )));
        }
    }

    let d = counts.len();
    let n: usize = counts.iter().product();
    let mut coords = Vec::with_capacity(n * d);
    let mut multi = vec![0usize; d];
    for _ in 0..n {
        for axis in 0..d {
            let (lo, hi) = bounds[axis];
            coords.push(grid_coord(lo, hi, multi[axis], counts[axis]));
        }
        // Odometer increment, last axis fastest.
        for axis in (0..d).rev() {
            multi[axis] += 1;
            if multi[axis] < counts[axis] {
                break;
            }
            multi[axis] = 0;
        }
    }
    Ok(SampleSet {
        coords,
        bounds: bounds.to_vec(),
        counts: counts.to_vec(),
    })
}

/// A point of the probability simplex: nonnegative entries summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector(DVector<f64>);

impl ProbabilityVector {
    /// Validates `values` as a probability vector (nonnegative, unit mass
    /// within [`SIMPLEX_TOL`]).
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NotOnSimplex(format!(
                "entry {i} = {} is negative or not finite",
                values[i]
            )));
        }
        let mass = values.sum();
        if (mass - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::NotOnSimplex(format!("total mass {mass}")));
        }
        Ok(Self(values))
    }

    /// Floors every entry at [`POSITIVITY_FLOOR`] and rescales to unit mass.
    pub fn from_weights(mut values: DVector<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NotOnSimplex(format!(
                "weight {i} = {} is negative or not finite",
                values[i]
            )));
        }
        values.apply(|v| *v = v.max(POSITIVITY_FLOOR));
        let mass = values.sum();
        values /= mass;
        Ok(Self(values))
    }

    /// Rescales to unit mass without flooring. Used on prox and barycenter
    /// outputs, which are strictly positive by construction.
    pub(crate) fn renormalized(mut values: DVector<f64>) -> Result<Self> {
        let mass = values.sum();
        if !(mass.is_finite() && mass > 0.0) || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NotOnSimplex(format!(
                "cannot renormalize vector with mass {mass}"
            )));
        }
        values /= mass;
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Self {
        Self(DVector::from_element(n, 1.0 / n as f64))
    }

    /// Unit mass on sample `i`.
    pub fn dirac(n: usize, i: usize) -> Self {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.0.iter().all(|&v| v > 0.0)
    }

    pub fn ln(&self) -> DVector<f64> {
        self.0.map(f64::ln)
    }

    pub(crate) fn require_positive(&self, what: &str) -> Result<()> {
        match self.0.iter().position(|&v| v <= 0.0) {
            Some(i) => Err(Error::NotOnSimplex(format!(
                "{what} must be strictly positive (entry {i} is {})",
                self.0[i]
            ))),
            None => Ok(()),
        }
    }
}

/// Normalized mixture of Gaussians with a shared covariance, evaluated
/// pointwise on the samples, floored and renormalized.
pub fn gaussian_mixture(
    samples: &SampleSet,
    means: &[Vec<f64>],
    cov: &DMatrix<f64>,
    weights: &[f64],
) -> Result<ProbabilityVector> {
    let d = samples.dim();
    if cov.nrows() != d || cov.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: cov.nrows(),
        });
    }
    if means.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: means.len(),
            got: weights.len(),
        });
    }
    if let Some(m) = means.iter().find(|m| m.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: m.len(),
        });
    }
    let weight_mass: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0) || (weight_mass - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NotOnSimplex("mixture weights".into()));
    }
    if (cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let chol = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let norm = (-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det)).exp();

    let mut density = DVector::zeros(samples.len());
    for (i, x) in samples.points().enumerate() {
        let mut total = 0.0;
        for (mean, &w) in means.iter().zip(weights) {
            let diff = DVector::from_iterator(d, x.iter().zip(mean).map(|(a, b)| a - b));
            let solved = chol.solve(&diff);
            total += w * norm * (-0.5 * diff.dot(&solved)).exp();
        }
        density[i] = total;
    }
    ProbabilityVector::from_weights(density)
}

/// Dense matrix of squared Euclidean distances between samples.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(DMatrix<f64>);

impl CostMatrix {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn max(&self) -> f64 {
        self.0.max()
    }

    /// Wraps an arbitrary square matrix. Callers are responsible for it being a
    /// squared-distance matrix; used for hand-built test instances.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        Ok(Self(m))
    }

    /// Positive multiple of the cost.
    pub fn scaled(&self, s: f64) -> Self {
        Self(&self.0 * s)
    }
}

pub fn cost_matrix(samples: &SampleSet) -> CostMatrix {
    cost_from_points(samples.points(), samples.len())
}

/// Squared-distance matrix for an arbitrary point cloud.
pub fn cost_from_points<'a>(points: impl Iterator<Item = &'a [f64]>, n: usize) -> CostMatrix {
    let pts: Vec<&[f64]> = points.collect();
    debug_assert_eq!(pts.len(), n);
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = pts[i].iter().zip(pts[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            c[(i, j)] = d2;
            c[(j, i)] = d2;
        }
    }
    CostMatrix(c)
}

/// How Gibbs kernel entries are stored and applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// Entries `exp(-C / 2 eps)`; requires `max(C) / 2 eps < 700`.
    #[default]
    Direct,
    /// Entries `-C / 2 eps`, applied with stabilized log-sum-exp.
    LogDomain,
}

#[derive(Clone, Debug)]
enum Repr {
    /// `N x N` entries (direct or log, depending on the mode).
    Dense(DMatrix<f64>),
    /// One `n_a x n_a` factor per grid axis; the kernel is their Kronecker
    /// product in lexicographic sample order.
    Separable {
        factors: Vec<DMatrix<f64>>,
        counts: Vec<usize>,
    },
}

/// The Gibbs kernel `Gamma = exp(-C / 2 eps)`.
#[derive(Clone, Debug)]
pub struct GibbsKernel {
    epsilon: f64,
    mode: KernelMode,
    repr: Repr,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::param("epsilon", format!("must be positive, got {epsilon}")));
    }
    Ok(())
}

fn check_range(max_cost: f64, epsilon: f64, mode: KernelMode) -> Result<()> {
    let exponent = max_cost / (2.0 * epsilon);
    if mode == KernelMode::Direct && exponent >= DIRECT_EXPONENT_LIMIT {
        return Err(Error::KernelRange {
            exponent,
            limit: DIRECT_EXPONENT_LIMIT,
        });
    }
    Ok(())
}

fn kernel_entries(cost: &DMatrix<f64>, epsilon: f64, mode: KernelMode) -> DMatrix<f64> {
    let scale = -1.0 / (2.0 * epsilon);
    match mode {
        KernelMode::Direct => cost.map(|c| (c * scale).exp()),
        KernelMode::LogDomain => cost.map(|c| c * scale),
    }
}

/// Dense Gibbs kernel of an explicit cost matrix.
pub fn gibbs_kernel(cost: &CostMatrix, epsilon: f64, mode: KernelMode) -> Result<GibbsKernel> {
    check_epsilon(epsilon)?;
    check_range(cost.max(), epsilon, mode)?;
    Ok(GibbsKernel {
        epsilon,
        mode,
        repr: Repr::Dense(kernel_entries(cost.matrix(), epsilon, mode)),
    })
}

impl GibbsKernel {
    /// Kernel of the squared-distance cost on a tensor grid, stored as one
    /// factor per axis. Numerically identical in exact arithmetic to
    /// `gibbs_kernel(&cost_matrix(samples), ..)`.
    pub fn on_grid(samples: &SampleSet, epsilon: f64, mode: KernelMode) -> Result<Self> {
        check_epsilon(epsilon)?;
        let max_cost: f64 = samples.bounds().iter().map(|(lo, hi)| (hi - lo) * (hi - lo)).sum();
        check_range(max_cost, epsilon, mode)?;
        let factors = (0..samples.dim())
            .map(|axis| {
                let x = samples.axis_coords(axis);
                let c = DMatrix::from_fn(x.len(), x.len(), |i, j| (x[i] - x[j]) * (x[i] - x[j]));
                kernel_entries(&c, epsilon, mode)
            })
            .collect();
        Ok(Self {
            epsilon,
            mode,
            repr: Repr::Separable {
                factors,
                counts: samples.counts().to_vec(),
            },
        })
    }

    /// Direct-mode kernel with explicitly given entries, e.g. the identity as
    /// the `eps -> 0` limit.
    pub fn from_gamma(gamma: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if gamma.nrows() != gamma.ncols() {
            return Err(Error::DimensionMismatch {
                expected: gamma.nrows(),
                got: gamma.ncols(),
            });
        }
        if gamma.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::param("gamma", "entries must lie in [0, 1]"));
        }
        Ok(Self {
            epsilon,
            mode: KernelMode::Direct,
            repr: Repr::Dense(gamma),
        })
    }

    pub fn len(&self) -> usize {
        match &self.repr {
            Repr::Dense(m) => m.nrows(),
            Repr::Separable { counts, .. } => counts.iter().product(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    pub fn is_separable(&self) -> bool {
        matches!(self.repr, Repr::Separable { .. })
    }

    /// `log Gamma(i, j)`.
    pub fn log_entry(&self, i: usize, j: usize) -> f64 {
        let raw = match &self.repr {
            Repr::Dense(m) => {
                return match self.mode {
                    KernelMode::Direct => m[(i, j)].ln(),
                    KernelMode::LogDomain => m[(i, j)],
                }
            }
            Repr::Separable { factors, counts } => {
                let (mut i, mut j) = (i, j);
                let mut acc = 0.0;
                for (f, &n) in factors.iter().zip(counts).rev() {
                    let v = f[(i % n, j % n)];
                    acc += match self.mode {
                        KernelMode::Direct => v.ln(),
                        KernelMode::LogDomain => v,
                    };
                    i /= n;
                    j /= n;
                }
                acc
            }
        };
        raw
    }

    /// Dense `N x N` matrix of kernel entries.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        match (&self.repr, self.mode) {
            (Repr::Dense(m), KernelMode::Direct) => m.clone(),
            (Repr::Dense(m), KernelMode::LogDomain) => m.map(f64::exp),
            (Repr::Separable { .. }, _) => {
                DMatrix::from_fn(n, n, |i, j| self.log_entry(i, j).exp())
            }
        }
    }

    /// Signed matrix-vector product `Gamma x`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.len(), "kernel/vector length mismatch");
        match self.mode {
            KernelMode::Direct => self.apply_direct(x),
            KernelMode::LogDomain => {
                // Split into positive and negative parts and apply each in log space.
                let pos = x.map(|v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY });
                let neg = x.map(|v| if v < 0.0 { (-v).ln() } else { f64::NEG_INFINITY });
                let p = self.log_apply_lse(&pos);
                let q = self.log_apply_lse(&neg);
                p.zip_map(&q, |a, b| a.exp() - b.exp())
            }
        }
    }

    /// `log(Gamma exp(log_x))`, stable for arbitrary finite `log_x`.
    ///
    /// Entries equal to `-inf` stand for zero mass. In direct mode the input is
    /// shifted by its maximum before exponentiation; the range guard enforced at
    /// construction keeps the shifted product away from underflow.
    pub fn log_apply(&self, log_x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(log_x.len(), self.len(), "kernel/vector length mismatch");
        match self.mode {
            KernelMode::Direct => {
                let shift = log_x.max();
                if shift == f64::NEG_INFINITY {
                    return log_x.clone();
                }
                let e = log_x.map(|v| (v - shift).exp());
                self.apply_direct(&e).map(|v| v.ln() + shift)
            }
            KernelMode::LogDomain => self.log_apply_lse(log_x),
        }
    }

    /// Row sums `Gamma 1`.
    pub fn row_sums(&self) -> DVector<f64> {
        self.apply(&DVector::from_element(self.len(), 1.0))
    }

    fn apply_direct(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            Repr::Dense(m) => m * x,
            Repr::Separable { factors, counts } => {
                let mut cur = x.clone();
                let mut next = DVector::zeros(x.len());
                let mut stride = x.len();
                for (f, &n) in factors.iter().zip(counts) {
                    stride /= n;
                    next.fill(0.0);
                    let block = n * stride;
                    for base in (0..x.len()).step_by(block) {
                        for i in 0..n {
                            let out = base + i * stride;
                            for k in 0..n {
                                let w = f[(i, k)];
                                let inp = base + k * stride;
                                for r in 0..stride {
                                    next[out + r] += w * cur[inp + r];
                                }
                            }
                        }
                    }
                    std::mem::swap(&mut cur, &mut next);
                }
                cur
            }
        }
    }

    fn log_apply_lse(&self, log_x: &DVector<f64>) -> DVector<f64> {
        let log_factor = |f: &DMatrix<f64>, i: usize, k: usize| match self.mode {
            KernelMode::Direct => f[(i, k)].ln(),
            KernelMode::LogDomain => f[(i, k)],
        };
        match &self.repr {
            Repr::Dense(m) => {
                let n = m.nrows();
                DVector::from_fn(n, |j, _| lse((0..n).map(|k| log_factor(m, j, k) + log_x[k])))
            }
            Repr::Separable { factors, counts } => {
                let mut cur = log_x.clone();
                let mut next = DVector::zeros(log_x.len());
                let mut stride = log_x.len();
                for (f, &n) in factors.iter().zip(counts) {
                    stride /= n;
                    let block = n * stride;
                    for base in (0..log_x.len()).step_by(block) {
                        for r in 0..stride {
                            for i in 0..n {
                                next[base + i * stride + r] = lse(
                                    (0..n).map(|k| log_factor(f, i, k) + cur[base + k * stride + r]),
                                );
                            }
                        }
                    }
                    std::mem::swap(&mut cur, &mut next);
                }
                cur
            }
        }
    }
}

/// Stabilized `log(sum(exp(x)))`; `-inf` for empty or all-`-inf` input.
pub fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Writes one row per sample: `x1,..,xd,prob`, 17 significant digits.
pub fn write_csv(samples: &SampleSet, prob: &ProbabilityVector, mut out: impl Write) -> std::io::Result<()> {
    let header: Vec<String> = (1..=samples.dim()).map(|a| format!("x{a}")).collect();
    writeln!(out, "{},prob", header.join(","))?;
    for (x, p) in samples.points().zip(prob.as_slice()) {
        for c in x {
            write!(out, "{c:.16e},")?;
        }
        writeln!(out, "{p:.16e}")?;
    }
    Ok(())
}

/// Reads the format produced by [`write_csv`]: sample coordinates and masses.
pub fn read_csv(input: impl BufRead) -> Result<(Vec<Vec<f64>>, ProbabilityVector)> {
    let mut lines = input.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io("<csv>", e))?,
        None => return Err(Error::NotOnSimplex("empty CSV".into())),
    };
    let cols = header.split(',').count();
    let mut points = Vec::new();
    let mut probs = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("<csv>", e))?;
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::NotOnSimplex(format!("line {}: {e}", lineno + 2)))?;
        if fields.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                got: fields.len(),
            });
        }
        probs.push(fields[cols - 1]);
        points.push(fields[..cols - 1].to_vec());
    }
    Ok((points, ProbabilityVector::new(DVector::from_vec(probs))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn paper_grid_sizes() {
        let g = make_uniform_grid(&[(-2.0, 2.0), (-2.0, 2.0)], &[41, 41]).unwrap();
        assert_eq!(g.len(), 1681);
        let g = make_uniform_grid(&[(-1.0, 1.0), (-1.0, 1.0)], &[21, 21]).unwrap();
        assert_eq!(g.len(), 441);
        assert!((g.spacing(0) - 0.1).abs() < 1e-15);
        assert!((g.spacing(1) - 0.1).abs() < 1e-15);
        // Lexicographic: last axis varies fastest.
        assert_eq!(g.point(0), &[-1.0, -1.0]);
        assert!((g.point(1)[1] - (-0.9)).abs() < 1e-15);
        assert_eq!(g.point(21)[0], -0.9);
        assert_eq!(g.point(220), &[0.0, 0.0]);
    }

    #[test]
    fn endpoints_only_grid() {
        let g = make_uniform_grid(&[(0.0, 1.0)], &[2]).unwrap();
        assert_eq!(g.point(0), &[0.0]);
        assert_eq!(g.point(1), &[1.0]);
    }

    #[test]
    fn grid_errors() {
        assert!(make_uniform_grid(&[(1.0, 1.0)], &[3]).is_err());
        assert!(make_uniform_grid(&[(0.0, 1.0)], &[1]).is_err());
        assert!(make_uniform_grid(&[(0.0, 1.0)], &[3, 3]).is_err());
    }

    #[test]
    fn nearest_sample() {
        let g = make_uniform_grid(&[(-2.0, 2.0), (-2.0, 2.0)], &[21, 21]).unwrap();
        let i = g.nearest(&[1.01, -0.39]);
        assert!((g.point(i)[0] - 1.0).abs() < 1e-12);
        assert!((g.point(i)[1] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn mixture_is_normalized_and_symmetric() {
        let g = make_uniform_grid(&[(-2.0, 2.0), (-2.0, 2.0)], &[41, 41]).unwrap();
        let cov = DMatrix::identity(2, 2) * 0.1;
        let means = vec![
            vec![1.0, 1.0],
            vec![-1.0, -1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![0.0, 0.0],
        ];
        let mu0 = gaussian_mixture(&g, &means, &cov, &[0.2; 5]).unwrap();
        assert!((mu0.values().sum() - 1.0).abs() < 1e-12);
        assert!(mu0.is_strictly_positive());

        let single = gaussian_mixture(&g, &[vec![0.0, 0.0]], &cov, &[1.0]).unwrap();
        let n = 41;
        for i in 0..n {
            for j in 0..n {
                let a = single.as_slice()[i * n + j];
                let b = single.as_slice()[(n - 1 - i) * n + j];
                let c = single.as_slice()[i * n + (n - 1 - j)];
                assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
                assert!((a - c).abs() <= 1e-12 * a.max(1e-300));
            }
        }
    }

    #[test]
    fn mixture_rejects_indefinite_covariance() {
        let g = make_uniform_grid(&[(-1.0, 1.0), (-1.0, 1.0)], &[3, 3]).unwrap();
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            gaussian_mixture(&g, &[vec![0.0, 0.0]], &cov, &[1.0]),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn cost_matrix_cases() {
        let one = make_uniform_grid(&[(0.0, 1.0)], &[2]).unwrap();
        let c = cost_matrix(&one);
        assert_eq!(c.get(0, 1), 1.0);
        assert_eq!(c.get(0, 0), 0.0);

        let single = cost_from_points([&[0.5, 0.5][..]].into_iter(), 1);
        assert_eq!(single.matrix(), &DMatrix::zeros(1, 1));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 2]> = (0..3).map(|_| [rng.gen(), rng.gen()]).collect();
        let c = cost_from_points(pts.iter().map(|p| &p[..]), 3);
        for i in 0..3 {
            for j in 0..3 {
                let expect = (pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2);
                assert!((c.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kernel_analytic_entries() {
        let c = CostMatrix::from_matrix(DMatrix::zeros(1, 1)).unwrap();
        let k = gibbs_kernel(&c, 1.0, KernelMode::Direct).unwrap();
        assert_eq!(k.to_dense()[(0, 0)], 1.0);

        let c = CostMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let k = gibbs_kernel(&c, 0.5, KernelMode::Direct).unwrap();
        assert!((k.to_dense()[(0, 1)] - (-1.0f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn kernel_range_guard() {
        let g = make_uniform_grid(&[(-2.0, 2.0), (-2.0, 2.0)], &[41, 41]).unwrap();
        let c = cost_matrix(&g);
        assert!((c.max() - 32.0).abs() < 1e-12);
        // 32 / 0.1 = 320 < 700.
        assert!(GibbsKernel::on_grid(&g, 0.05, KernelMode::Direct).is_ok());
        assert!(matches!(
            GibbsKernel::on_grid(&g, 0.02, KernelMode::Direct),
            Err(Error::KernelRange { .. })
        ));
        assert!(GibbsKernel::on_grid(&g, 0.02, KernelMode::LogDomain).is_ok());
        assert!(gibbs_kernel(&c, 0.0, KernelMode::Direct).is_err());
    }

    #[test]
    fn separable_matches_dense() {
        let g = make_uniform_grid(&[(-1.0, 1.0), (0.0, 2.0)], &[5, 4]).unwrap();
        let c = cost_matrix(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DVector::from_fn(g.len(), |_, _| rng.gen_range(-1.0..1.0));
        let lx = DVector::from_fn(g.len(), |_, _| rng.gen_range(-30.0..30.0));
        for mode in [KernelMode::Direct, KernelMode::LogDomain] {
            let dense = gibbs_kernel(&c, 0.3, mode).unwrap();
            let sep = GibbsKernel::on_grid(&g, 0.3, mode).unwrap();
            assert!((dense.to_dense() - sep.to_dense()).amax() < 1e-14);
            assert!((dense.apply(&x) - sep.apply(&x)).amax() < 1e-12);
            assert!((dense.log_apply(&lx) - sep.log_apply(&lx)).amax() < 1e-10);
            for (i, j) in [(0, 0), (3, 17), (19, 2)] {
                assert!((dense.log_entry(i, j) - sep.log_entry(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_modes_agree() {
        let g = make_uniform_grid(&[(-1.0, 1.0), (-1.0, 1.0)], &[6, 6]).unwrap();
        let direct = GibbsKernel::on_grid(&g, 0.2, KernelMode::Direct).unwrap();
        let log = GibbsKernel::on_grid(&g, 0.2, KernelMode::LogDomain).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lx = DVector::from_fn(g.len(), |_, _| rng.gen_range(-50.0..50.0));
        let a = direct.log_apply(&lx);
        let b = log.log_apply(&lx);
        assert!((a - b).amax() < 1e-10);
        let x = DVector::from_fn(g.len(), |_, _| rng.gen_range(-1.0..1.0));
        assert!((direct.apply(&x) - log.apply(&x)).amax() < 1e-11);
    }

    #[test]
    fn kernel_properties() {
        let g = make_uniform_grid(&[(-2.0, 2.0), (-2.0, 2.0)], &[7, 7]).unwrap();
        let k = GibbsKernel::on_grid(&g, 0.05, KernelMode::Direct).unwrap().to_dense();
        assert!(k.iter().all(|&v| v > 0.0 && v <= 1.0));
        assert!((&k - k.transpose()).amax() == 0.0);
        assert!(k.diagonal().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn csv_round_trip_and_format() {
        let g = make_uniform_grid(&[(0.0, 1.0), (0.0, 1.0)], &[2, 3]).unwrap();
        let p = ProbabilityVector::from_weights(DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let mut buf = Vec::new();
        write_csv(&g, &p, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,x2,prob\n"));
        assert_eq!(text.lines().count(), 7);
        let (pts, q) = read_csv(&buf[..]).unwrap();
        assert_eq!(pts[5], g.point(5).to_vec());
        assert_eq!(q, p);
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(DVector::from_vec(vec![0.5, 0.6])).is_err());
        assert!(ProbabilityVector::new(DVector::from_vec(vec![1.5, -0.5])).is_err());
        let p = ProbabilityVector::from_weights(DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert!(p.is_strictly_positive());
    }
}
