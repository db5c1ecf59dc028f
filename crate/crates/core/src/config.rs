//! Solver configuration: a TOML document with optional experiment preset.
//!
//! A file may name a `preset` (`fpk`, `aggregation-case1` .. `aggregation-case4`);
//! top-level scalars then override the preset's values and any table that is
//! present (`[grid]`, `[potentials]`, `[prox]`, `[newton]`, `[initial]`,
//! `[reference]`, `[[functional]]`) replaces the preset's table as a whole.
//! Without a preset, `grid`, `potentials`, `functional` and `initial` are
//! required.
//!
//! ```toml
//! preset = "fpk"
//! max_outer_iters = 1500
//! snapshot_every = 50
//!
//! [grid]
//! bounds = [[-2.0, 2.0], [-2.0, 2.0]]
//! counts = [21, 21]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inner_admm::NewtonParams;
use crate::measures::KernelMode;
use crate::outer_admm::ObjectiveAt;
use crate::pde_flows::{self, Operator, Potential};

/// Uniform tensor grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub bounds: Vec<[f64; 2]>,
    pub counts: Vec<usize>,
}

impl GridSpec {
    /// `counts` points per axis on `[lo, hi]^d`.
    pub fn square(lo: f64, hi: f64, count: usize, dim: usize) -> Self {
        Self {
            bounds: vec![[lo, hi]; dim],
            counts: vec![count; dim],
        }
    }

    pub fn bounds_pairs(&self) -> Vec<(f64, f64)> {
        self.bounds.iter().map(|b| (b[0], b[1])).collect()
    }
}

/// Potentials shared by all summands: `V` for advection and `U` for
/// interaction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<Potential>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interaction: Option<Potential>,
}

/// Fixed-point settings of the worker proximal steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxSettings {
    pub delta: f64,
    pub max_sweeps: usize,
}

impl Default for ProxSettings {
    fn default() -> Self {
        Self {
            delta: 1e-4,
            max_sweeps: 20,
        }
    }
}

/// Initial density shared by all workers and the consensus variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    Uniform,
    /// Isotropic mixture `sum_j w_j N(m_j, variance I)`; equal weights when
    /// `weights` is omitted.
    GaussianMixture {
        means: Vec<Vec<f64>>,
        variance: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
}

/// Known stationary solution used for reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// `exp(-beta V)` for the configured drift potential and `beta`.
    Gibbs,
    Annulus { inner_radius: f64, outer_radius: f64 },
}

/// One summand: the operators it groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSpec {
    pub terms: Vec<Operator>,
}

/// Fully resolved solver configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub alpha: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub inner_iters: usize,
    pub max_outer_iters: usize,
    /// Stop once the largest pairwise distance at a snapshot is at most this.
    /// Infinite disables the check.
    pub consensus_tol: f64,
    pub snapshot_every: usize,
    pub threads: usize,
    pub warm_start: bool,
    pub kernel_mode: KernelMode,
    pub output: PathBuf,
    /// Half-width of the cell used to regularize singular potentials.
    pub h: f64,
    pub objective_at: ObjectiveAt,
    pub grid: GridSpec,
    pub potentials: PotentialSpec,
    pub prox: ProxSettings,
    pub newton: NewtonParams,
    pub initial: InitialSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceSpec>,
    pub functional: Vec<FunctionalSpec>,
}

/// Values that override a parsed configuration, typically from the command
/// line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// Replaces the preset named in the file, or stands in for a file.
    pub preset: Option<String>,
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,
    pub snapshot_every: Option<usize>,
    pub max_outer_iters: Option<usize>,
}

impl SolveConfig {
    /// Configuration of a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        pde_flows::preset(name)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(t) = o.threads {
            self.threads = t;
        }
        if let Some(p) = &o.output {
            self.output = p.clone();
        }
        if let Some(s) = o.snapshot_every {
            self.snapshot_every = s;
        }
        if let Some(m) = o.max_outer_iters {
            self.max_outer_iters = m;
        }
    }

    /// Checks ranges and the shape of the splitting.
    pub fn validate(&self) -> Result<()> {
        positive("alpha", self.alpha)?;
        positive("tau", self.tau)?;
        positive("epsilon", self.epsilon)?;
        positive("beta", self.beta)?;
        positive("h", self.h)?;
        positive("prox.delta", self.prox.delta)?;
        if self.consensus_tol.is_nan() || self.consensus_tol < 0.0 {
            return Err(config_err("consensus_tol", "must be nonnegative"));
        }
        for (name, v) in [
            ("inner_iters", self.inner_iters),
            ("snapshot_every", self.snapshot_every),
            ("threads", self.threads),
            ("prox.max_sweeps", self.prox.max_sweeps),
        ] {
            if v == 0 {
                return Err(config_err(name, "must be at least 1"));
            }
        }
        self.newton
            .validate()
            .map_err(|e| config_err("newton", e.to_string()))?;
        if self.grid.bounds.len() != self.grid.counts.len() || self.grid.bounds.is_empty() {
            return Err(config_err("grid", "bounds and counts must have the same nonzero length"));
        }
        for (axis, (b, &c)) in self.grid.bounds.iter().zip(&self.grid.counts).enumerate() {
            if !(b[0].is_finite() && b[1].is_finite() && b[0] < b[1]) {
                return Err(config_err("grid.bounds", format!("axis {axis}: need lo < hi")));
            }
            if c < 2 {
                return Err(config_err("grid.counts", format!("axis {axis}: need at least 2 points")));
            }
        }
        self.splitting()
            .validate(&self.potentials)
            .map_err(|e| config_err("functional", e.to_string()))?;
        match &self.initial {
            InitialSpec::Uniform => {}
            InitialSpec::GaussianMixture {
                means,
                variance,
                weights,
            } => {
                positive("initial.variance", *variance)?;
                if means.is_empty() {
                    return Err(config_err("initial.means", "need at least one mean"));
                }
                if means.iter().any(|m| m.len() != self.grid.counts.len()) {
                    return Err(config_err("initial.means", "dimension differs from the grid"));
                }
                if let Some(w) = weights {
                    if w.len() != means.len() {
                        return Err(config_err("initial.weights", "one weight per mean required"));
                    }
                }
            }
        }
        match &self.reference {
            Some(ReferenceSpec::Gibbs) if self.potentials.drift.is_none() => {
                Err(config_err("reference", "gibbs reference needs a drift potential"))
            }
            Some(ReferenceSpec::Annulus {
                inner_radius,
                outer_radius,
            }) if !(*inner_radius >= 0.0 && inner_radius < outer_radius) => {
                Err(config_err("reference", "need 0 <= inner_radius < outer_radius"))
            }
            _ => Ok(()),
        }
    }

    pub fn splitting(&self) -> pde_flows::SplittingSpec {
        pde_flows::SplittingSpec {
            groups: self.functional.iter().map(|f| f.terms.clone()).collect(),
        }
    }

    /// The resolved configuration as TOML. Parsing the output gives back an
    /// equal configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is serializable")
    }
}

/// Top-level keys as written in a file; every field optional so that a preset
/// can fill the gaps.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    alpha: Option<f64>,
    tau: Option<f64>,
    epsilon: Option<f64>,
    beta: Option<f64>,
    inner_iters: Option<usize>,
    max_outer_iters: Option<usize>,
    consensus_tol: Option<f64>,
    snapshot_every: Option<usize>,
    threads: Option<usize>,
    warm_start: Option<bool>,
    kernel_mode: Option<KernelMode>,
    output: Option<PathBuf>,
    h: Option<f64>,
    objective_at: Option<ObjectiveAt>,
    grid: Option<GridSpec>,
    potentials: Option<PotentialSpec>,
    prox: Option<ProxSettings>,
    newton: Option<NewtonParams>,
    initial: Option<InitialSpec>,
    reference: Option<ReferenceSpec>,
    functional: Option<Vec<FunctionalSpec>>,
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<SolveConfig> {
    load_config(Some(path), &Overrides::default())
}

/// Resolves a configuration from an optional file and overrides. Override
/// values win over the file; without a file an override preset is required.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<SolveConfig> {
    let mut config = match path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut raw = parse_raw(&text).map_err(|e| at_path(path, e))?;
            if overrides.preset.is_some() {
                raw.preset = overrides.preset.clone();
            }
            resolve(raw).map_err(|e| at_path(path, e))?
        }
        None => match &overrides.preset {
            Some(name) => pde_flows::preset(name).map_err(|e| config_err("preset", e.to_string()))?,
            None => {
                return Err(Error::Config {
                    location: None,
                    message: "either a config file or a preset is required".into(),
                })
            }
        },
    };
    config.apply(overrides);
    config.validate()?;
    Ok(config)
}

fn at_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Config { location, message } => Error::Config {
            location: Some(match location {
                Some(l) => format!("{}:{l}", path.display()),
                None => path.display().to_string(),
            }),
            message,
        },
        other => other,
    }
}

/// Parses and validates configuration text.
pub fn parse_config_str(text: &str) -> Result<SolveConfig> {
    let config = resolve(parse_raw(text)?)?;
    config.validate()?;
    Ok(config)
}

fn parse_raw(text: &str) -> Result<RawConfig> {
    toml::from_str(text).map_err(|e| {
        let location = e.span().map(|s| {
            let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}")
        });
        Error::Config {
            location,
            message: e.message().trim().to_string(),
        }
    })
}

fn resolve(raw: RawConfig) -> Result<SolveConfig> {
    let mut c = match &raw.preset {
        Some(name) => pde_flows::preset(name).map_err(|e| config_err("preset", e.to_string()))?,
        None => SolveConfig {
            preset: None,
            alpha: 12.0,
            tau: 150.0,
            epsilon: 0.05,
            beta: 1.0,
            inner_iters: 3,
            max_outer_iters: 1000,
            consensus_tol: f64::INFINITY,
            snapshot_every: 100,
            threads: 1,
            warm_start: true,
            kernel_mode: KernelMode::Direct,
            output: PathBuf::from("out"),
            h: 5e-3,
            objective_at: ObjectiveAt::Mean,
            grid: raw.grid.clone().ok_or_else(|| missing("grid"))?,
            potentials: raw.potentials.clone().ok_or_else(|| missing("potentials"))?,
            prox: ProxSettings::default(),
            newton: NewtonParams::default(),
            initial: raw.initial.clone().ok_or_else(|| missing("initial"))?,
            reference: None,
            functional: raw.functional.clone().ok_or_else(|| missing("functional"))?,
        },
    };
    macro_rules! take {
        ($($field:ident),*) => {
            $(if let Some(v) = raw.$field { c.$field = v; })*
        };
    }
    take!(
        alpha,
        tau,
        epsilon,
        beta,
        inner_iters,
        max_outer_iters,
        consensus_tol,
        snapshot_every,
        threads,
        warm_start,
        kernel_mode,
        output,
        h,
        objective_at,
        grid,
        potentials,
        prox,
        newton,
        initial,
        functional
    );
    if raw.reference.is_some() {
        c.reference = raw.reference;
    }
    Ok(c)
}

fn missing(key: &str) -> Error {
    config_err(key, "required when no preset is given")
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        location: Some(format!("field `{field}`")),
        message: message.into(),
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(config_err(field, format!("must be positive and finite, got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fpk_preset_has_reference_parameters() {
        let c = parse_config_str("preset = \"fpk\"").unwrap();
        assert_eq!((c.alpha, c.tau, c.beta, c.epsilon), (12.0, 150.0, 1.0, 0.05));
        assert_eq!(c.inner_iters, 3);
        assert_eq!(c.grid.counts, vec![41, 41]);
        assert_eq!(c.prox, ProxSettings { delta: 1e-4, max_sweeps: 20 });
        assert_eq!(c.functional.len(), 2);
    }

    #[test]
    fn scalars_override_preset() {
        let c = parse_config_str("preset = \"fpk\"\nalpha = 10\nmax_outer_iters = 7").unwrap();
        assert_eq!(c.alpha, 10.0);
        assert_eq!(c.max_outer_iters, 7);
        assert_eq!(c.tau, 150.0);
    }

    #[test]
    fn zero_inner_iters_rejected() {
        let e = parse_config_str("preset = \"fpk\"\ninner_iters = 0").unwrap_err();
        assert!(e.to_string().contains("inner_iters"), "{e}");
    }

    #[test]
    fn unknown_key_reports_line() {
        let e = parse_config_str("preset = \"fpk\"\n\nalpah = 3").unwrap_err();
        let s = e.to_string();
        assert!(s.contains("line 3") && s.contains("alpah"), "{s}");
    }

    #[test]
    fn unknown_nested_key_rejected() {
        let e = parse_config_str("preset = \"fpk\"\n[prox]\ndelta = 1e-3\nsweeps = 3").unwrap_err();
        assert!(e.to_string().contains("line 4"), "{e}");
    }

    #[test]
    fn missing_required_without_preset() {
        let e = parse_config_str("alpha = 1").unwrap_err();
        assert!(e.to_string().contains("grid"), "{e}");
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(parse_config_str("preset = \"heat\"").is_err());
    }

    #[test]
    fn explicit_config_without_preset() {
        let text = r#"
            alpha = 5
            epsilon = 0.2
            [grid]
            bounds = [[0.0, 1.0]]
            counts = [10]
            [potentials]
            drift = "quadratic"
            [initial]
            kind = "uniform"
            [[functional]]
            terms = ["advection"]
            [[functional]]
            terms = ["log_diffusion"]
        "#;
        let c = parse_config_str(text).unwrap();
        assert_eq!(c.functional.len(), 2);
        assert_eq!(c.alpha, 5.0);
        assert!(c.consensus_tol.is_infinite());
    }

    #[test]
    fn duplicated_operator_rejected() {
        let text = "preset = \"fpk\"\n[[functional]]\nterms = [\"advection\"]\n[[functional]]\nterms = [\"advection\"]";
        assert!(parse_config_str(text).is_err());
    }

    #[test]
    fn manifest_round_trips() {
        for name in pde_flows::PRESETS {
            let c = SolveConfig::preset(name).unwrap();
            let back = parse_config_str(&c.to_toml()).unwrap();
            assert_eq!(c, back, "{name}");
        }
    }

    #[test]
    fn overrides_win() {
        let mut c = SolveConfig::preset("fpk").unwrap();
        c.apply(&Overrides {
            threads: Some(4),
            max_outer_iters: Some(3),
            ..Default::default()
        });
        assert_eq!((c.threads, c.max_outer_iters), (4, 3));
    }

    #[test]
    fn load_config_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "preset = \"fpk\"\nthreads = 2\nmax_outer_iters = 7\n").unwrap();
        let c = load_config(Some(&path), &Overrides::default()).unwrap();
        assert_eq!((c.threads, c.max_outer_iters), (2, 7));
        let o = Overrides {
            preset: Some("aggregation-case4".into()),
            threads: Some(3),
            ..Default::default()
        };
        let c = load_config(Some(&path), &o).unwrap();
        assert_eq!(c.preset.as_deref(), Some("aggregation-case4"));
        assert_eq!((c.threads, c.max_outer_iters), (3, 7));
        assert!(matches!(load_config(None, &Overrides::default()), Err(Error::Config { .. })));
        let bad = Overrides {
            threads: Some(0),
            preset: Some("fpk".into()),
            ..Default::default()
        };
        assert!(load_config(None, &bad).is_err());
    }
}
