//! Runs a configuration to completion and persists its trajectory.
//!
//! Layout under the configured output directory:
//!
//! ```text
//! manifest                   resolved configuration (TOML)
//! metrics.json               per-snapshot diagnostics and a final summary
//! snapshots/mu_<i>_<k>.csv   worker i (from 1) at iteration k
//! snapshots/zeta_<k>.csv     consensus variable at iteration k
//! ```
//!
//! Everything except the wall-clock fields of `metrics.json` is byte-stable
//! across reruns of the same configuration.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;

use crate::config::SolveConfig;
use crate::error::{Error, Result};
use crate::inner_admm::{tau_lower_bound, BarycentricInputs};
use crate::measures::{write_csv, ProbabilityVector, SampleSet};
use crate::outer_admm::{run_outer, IterationStats, Snapshot};
use crate::pde_flows::Problem;

/// Diagnostics of one snapshot as written to `metrics.json`.
#[derive(Clone, Debug, Serialize)]
pub struct SnapshotMetrics {
    pub k: usize,
    /// Largest pairwise Kantorovich optimum (squared Wasserstein distance).
    pub max_pairwise: f64,
    pub pairwise: Vec<Vec<f64>>,
    pub objective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_distances: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<IterationStats>,
    pub wall_clock: f64,
}

impl SnapshotMetrics {
    fn from_snapshot(s: &Snapshot) -> Self {
        let p = &s.report.pairwise;
        Self {
            k: s.k,
            max_pairwise: s.report.max_pairwise,
            pairwise: (0..p.nrows()).map(|i| p.row(i).iter().copied().collect()).collect(),
            objective: s.report.objective,
            reference_distances: s.reference_distances.clone(),
            stats: s.stats.clone(),
            wall_clock: s.elapsed,
        }
    }
}

/// Outcome of [`solve`].
#[derive(Clone, Debug, Serialize)]
pub struct SolveSummary {
    pub iterations: usize,
    pub snapshots: usize,
    pub final_snapshot: SnapshotMetrics,
    /// Sufficient lower bound on `tau` at the initial state.
    pub tau_bound: f64,
    pub tau_below_bound: bool,
    pub wall_time: f64,
    pub output: PathBuf,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    snapshots: &'a [SnapshotMetrics],
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<&'a SolveSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// `(sqrt(2) / eps^2) |Gamma mu_0|_inf` for the configured problem.
pub fn initial_tau_bound(config: &SolveConfig) -> Result<f64> {
    Ok(start_bound(&Problem::from_config(config)?, config.alpha))
}

fn start_bound(p: &Problem, alpha: f64) -> f64 {
    let mus = vec![p.initial.clone(); p.functionals.len()];
    let zero = DVector::zeros(p.initial.len());
    tau_lower_bound(&BarycentricInputs {
        mus: &mus,
        kernel: &p.kernel,
        nu_sum: &zero,
        alpha,
    })
}

/// Runs `config`, writing the manifest, snapshots and metrics under
/// `config.output`. On a solver error the snapshots written so far and a
/// metrics file recording the error are kept.
pub fn solve(config: &SolveConfig) -> Result<SolveSummary> {
    config.validate()?;
    let out = config.output.clone();
    let snap_dir = out.join("snapshots");
    fs::create_dir_all(&snap_dir).map_err(|e| Error::io(&snap_dir, e))?;
    write_file(&out.join("manifest"), config.to_toml().as_bytes())?;

    let run = run_outer(config)?;
    let samples = run.problem().samples.clone();
    let tau_bound = start_bound(run.problem(), config.alpha);
    let tau_below_bound = config.tau < tau_bound;
    if tau_below_bound {
        log::warn!(
            "tau = {} is below the sufficient bound {:.4} for inner ADMM convergence",
            config.tau,
            tau_bound
        );
    }

    let mut metrics = Vec::new();
    let mut last_k = 0;
    for snap in run {
        let snap = match snap {
            Ok(s) => s,
            Err(e) => {
                write_metrics(&out, &metrics, None, Some(e.to_string()))?;
                return Err(e);
            }
        };
        write_snapshot(&snap_dir, &samples, &snap)?;
        log::info!(
            "k = {}: max pairwise {:.3e}, objective {:.6}",
            snap.k,
            snap.report.max_pairwise,
            snap.report.objective
        );
        last_k = snap.k;
        metrics.push(SnapshotMetrics::from_snapshot(&snap));
    }
    let final_snapshot = metrics.last().cloned().expect("the initial snapshot is always emitted");
    let summary = SolveSummary {
        iterations: last_k,
        snapshots: metrics.len(),
        wall_time: final_snapshot.wall_clock,
        final_snapshot,
        tau_bound,
        tau_below_bound,
        output: out.clone(),
    };
    write_metrics(&out, &metrics, Some(&summary), None)?;
    Ok(summary)
}

fn write_snapshot(dir: &Path, samples: &SampleSet, snap: &Snapshot) -> Result<()> {
    for (i, mu) in snap.mus.iter().enumerate() {
        write_measure(&dir.join(format!("mu_{}_{}.csv", i + 1, snap.k)), samples, mu)?;
    }
    write_measure(&dir.join(format!("zeta_{}.csv", snap.k)), samples, &snap.zeta)
}

fn write_measure(path: &Path, samples: &SampleSet, mu: &ProbabilityVector) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_csv(samples, mu, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_metrics(
    out: &Path,
    snapshots: &[SnapshotMetrics],
    summary: Option<&SolveSummary>,
    error: Option<String>,
) -> Result<()> {
    let body = serde_json::to_string_pretty(&MetricsFile {
        snapshots,
        summary,
        error,
    })
    .expect("metrics are serializable");
    write_file(&out.join("metrics.json"), body.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GridSpec;
    use crate::pde_flows::build_fpk_experiment;

    fn tiny(dir: &Path) -> SolveConfig {
        let mut c = build_fpk_experiment(GridSpec::square(-2.0, 2.0, 7, 2), 12.0, 150.0, 1.0, 0.5).unwrap();
        c.max_outer_iters = 5;
        c.snapshot_every = 2;
        c.output = dir.to_path_buf();
        c
    }

    #[test]
    fn writes_layout() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let s = solve(&c).unwrap();
        assert_eq!(s.snapshots, 4);
        assert_eq!(s.iterations, 5);
        for k in [0, 2, 4, 5] {
            assert!(dir.path().join(format!("snapshots/mu_1_{k}.csv")).exists());
            assert!(dir.path().join(format!("snapshots/mu_2_{k}.csv")).exists());
            assert!(dir.path().join(format!("snapshots/zeta_{k}.csv")).exists());
        }
        let manifest = fs::read_to_string(dir.path().join("manifest")).unwrap();
        assert_eq!(crate::config::parse_config_str(&manifest).unwrap(), c);
        let metrics: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
        assert_eq!(metrics["snapshots"].as_array().unwrap().len(), 4);
        assert_eq!(metrics["summary"]["iterations"], 5);
    }

    #[test]
    fn tau_bound_matches_direct_computation() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let b = initial_tau_bound(&c).unwrap();
        let s = solve(&c).unwrap();
        assert_eq!(b, s.tau_bound);
        assert_eq!(s.tau_below_bound, c.tau < b);
    }
}
