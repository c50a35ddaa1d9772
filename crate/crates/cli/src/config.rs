//! Declarative run configuration (TOML).
//!
//! ```toml
//! seed = 7
//! n = 10000
//! n_grid = [1000, 10000, 100000]
//! replications = 1000
//! x0 = 0
//! s0 = 0
//!
//! [family.builtin]
//! name = "iid"
//!
//! [scheme]
//! kind = "constant"
//! s = 0
//!
//! [phi]
//! kind = "indicator"
//! state = 0
//! ```
//!
//! Exactly one of `family.builtin`, `family.file` and `family.rwm` must be
//! given. Command-line flags override `seed`; the remaining fields come
//! from the file or from their defaults.

use std::fs;
use std::path::{Path, PathBuf};

use amcmc::families::{BuiltinFamily, KernelFamily};
use amcmc::kernel::{stationary_distribution, Distribution, KernelFile, StochasticMatrix};
use amcmc::ledger::SchemeSpec;
use amcmc::poisson::TestFunction;
use amcmc::rwm::{discrete_family, CompactTarget};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// Kernel family source.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<BuiltinFamily>,
    /// JSON kernel file, or `{"kernels": [[..]..], "pi": [..]?, "grid": [..]?}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rwm: Option<RwmFamilySpec>,
}

/// Discretized random-walk family on a grid of isotropic variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RwmFamilySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<CompactTarget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_file: Option<PathBuf>,
    pub m: usize,
    pub variances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum FamilyFile {
    Many {
        kernels: Vec<Vec<Vec<f64>>>,
        #[serde(default)]
        pi: Option<Vec<f64>>,
        #[serde(default)]
        grid: Option<Vec<f64>>,
    },
    Single(KernelFile),
}

/// Test function `phi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhiSpec {
    /// `1(x = state)`.
    Indicator {
        state: usize,
    },
    /// Coordinate `axis` of the grid point of each state; for families
    /// without coordinates, the state index.
    Projection {
        #[serde(default)]
        axis: usize,
        #[serde(default = "one")]
        power: i32,
    },
    Table {
        values: Vec<f64>,
    },
}

fn one() -> i32 {
    1
}

impl Default for PhiSpec {
    fn default() -> Self {
        PhiSpec::Indicator { state: 0 }
    }
}

/// Expected outcome of an LLN study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expectation {
    #[default]
    Converge,
    /// The study is meant to demonstrate a failure of the law of large numbers.
    Diverge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub experiment: Option<String>,
    #[serde(default)]
    pub family: FamilySpec,
    #[serde(default = "default_scheme")]
    pub scheme: SchemeSpec,
    #[serde(default)]
    pub phi: PhiSpec,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub x0: usize,
    #[serde(default)]
    pub s0: usize,
    /// Horizon for fitting ergodicity constants.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Exponent `p` of the waning statistic.
    #[serde(default = "one_f")]
    pub p: f64,
    /// Constant `D_k` level of the non-waning control.
    #[serde(default = "half")]
    pub control_level: f64,
    /// Family member for single-kernel commands.
    #[serde(default)]
    pub member: usize,
    /// Neumann tolerance for `poisson`; the series is skipped when absent.
    #[serde(default)]
    pub neumann_tol: Option<f64>,
    #[serde(default)]
    pub expect: Expectation,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
}

fn default_scheme() -> SchemeSpec {
    SchemeSpec::Constant { s: 0 }
}
fn default_n() -> usize {
    10_000
}
fn default_grid() -> Vec<usize> {
    vec![1_000, 10_000, 100_000]
}
fn default_replications() -> usize {
    32
}
fn default_horizon() -> usize {
    60
}
fn one_f() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

/// A family plus optional state coordinates.
#[derive(Debug, Clone)]
pub struct ResolvedFamily {
    pub family: KernelFamily,
    /// Grid point of each state (RWM families only).
    pub coords: Option<Vec<Vec<f64>>>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    // Relative paths in a config file are relative to that file.
    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(f) = self.family.file.as_mut() {
            fix(f);
        }
        if let Some(f) = self
            .family
            .rwm
            .as_mut()
            .and_then(|r| r.target_file.as_mut())
        {
            fix(f);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n == 0 {
            return Err(invalid("n", "must be at least 1"));
        }
        if self.replications == 0 {
            return Err(invalid("replications", "must be at least 1"));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(invalid("n_grid", "must be non-empty with entries >= 1"));
        }
        let sources = [
            self.family.builtin.is_some(),
            self.family.file.is_some(),
            self.family.rwm.is_some(),
        ];
        if sources.iter().filter(|b| **b).count() > 1 {
            return Err(invalid("family", "give exactly one of builtin, file, rwm"));
        }
        if let Some(f) = &self.family.file {
            if !f.exists() {
                return Err(invalid(
                    "family.file",
                    format!("{} does not exist", f.display()),
                ));
            }
        }
        if let Some(r) = &self.family.rwm {
            match (&r.target, &r.target_file) {
                (Some(_), None) => {}
                (None, Some(f)) if f.exists() => {}
                (None, Some(f)) => {
                    return Err(invalid(
                        "family.rwm.target_file",
                        format!("{} does not exist", f.display()),
                    ))
                }
                _ => {
                    return Err(invalid(
                        "family.rwm",
                        "give exactly one of target, target_file",
                    ))
                }
            }
        }
        Ok(())
    }

    /// Builds the family; the default is the cyclic pair.
    pub fn resolve_family(&self) -> Result<ResolvedFamily, ConfigError> {
        let fam_err = |field: &str, e: &dyn std::fmt::Display| invalid(field, e.to_string());
        if let Some(b) = &self.family.builtin {
            let family = b.build().map_err(|e| fam_err("family.builtin", &e))?;
            return Ok(ResolvedFamily {
                family,
                coords: None,
            });
        }
        if let Some(path) = &self.family.file {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            let parsed: FamilyFile =
                serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            let family = family_from_file(parsed).map_err(|e| fam_err("family.file", &e))?;
            return Ok(ResolvedFamily {
                family,
                coords: None,
            });
        }
        if let Some(r) = &self.family.rwm {
            let target = match (&r.target, &r.target_file) {
                (Some(t), _) => t.clone(),
                (None, Some(path)) => {
                    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                        path: path.clone(),
                        source,
                    })?;
                    serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                        path: path.clone(),
                        message: e.to_string(),
                    })?
                }
                (None, None) => return Err(invalid("family.rwm", "missing target")),
            };
            let family = discrete_family(&target, r.m, &r.variances)
                .map_err(|e| fam_err("family.rwm", &e))?;
            return Ok(ResolvedFamily {
                family,
                coords: Some(target.grid_points(r.m)),
            });
        }
        let family = BuiltinFamily::Cyclic
            .build()
            .map_err(|e| fam_err("family", &e))?;
        Ok(ResolvedFamily {
            family,
            coords: None,
        })
    }

    pub fn resolve_phi(&self, fam: &ResolvedFamily) -> Result<TestFunction, ConfigError> {
        let n = fam.family.states();
        let pi = fam.family.pi();
        let values = match &self.phi {
            PhiSpec::Indicator { state } => {
                if *state >= n {
                    return Err(invalid("phi.state", format!("{state} >= {n} states")));
                }
                return TestFunction::indicator(*state, pi)
                    .map_err(|e| invalid("phi", e.to_string()));
            }
            PhiSpec::Projection { axis, power } => match &fam.coords {
                Some(c) => {
                    if *axis >= c[0].len() {
                        return Err(invalid("phi.axis", "beyond the target dimension"));
                    }
                    c.iter().map(|p| p[*axis].powi(*power)).collect()
                }
                None => (0..n).map(|i| (i as f64).powi(*power)).collect(),
            },
            PhiSpec::Table { values } => {
                if values.len() != n {
                    return Err(invalid(
                        "phi.values",
                        format!("{} values for {n} states", values.len()),
                    ));
                }
                values.clone()
            }
        };
        TestFunction::new(values, pi).map_err(|e| invalid("phi", e.to_string()))
    }

    /// Scheme with grid coordinates filled in for RWM families.
    pub fn resolve_scheme(&self, fam: &ResolvedFamily) -> SchemeSpec {
        fill_coords(&self.scheme, fam.coords.as_deref())
    }
}

fn fill_coords(spec: &SchemeSpec, coords: Option<&[Vec<f64>]>) -> SchemeSpec {
    let axis0 = || coords.map(|c| c.iter().map(|p| p[0]).collect::<Vec<_>>());
    let mut out = spec.clone();
    match &mut out {
        SchemeSpec::Am { coords: c, .. } | SchemeSpec::Ram { coords: c, .. } if c.is_none() => {
            *c = axis0();
        }
        SchemeSpec::Rare { inner, .. } => {
            **inner = fill_coords(inner, coords);
        }
        _ => {}
    }
    out
}

fn family_from_file(file: FamilyFile) -> Result<KernelFamily, amcmc::kernel::KernelError> {
    let (kernels, pi, grid) = match file {
        FamilyFile::Single(k) => {
            let (p, pi) = k.into_parts()?;
            (vec![p], pi, None)
        }
        FamilyFile::Many { kernels, pi, grid } => {
            let kernels = kernels
                .into_iter()
                .map(StochasticMatrix::new)
                .collect::<Result<Vec<_>, _>>()?;
            (kernels, pi.map(Distribution::new).transpose()?, grid)
        }
    };
    let pi = match pi {
        Some(pi) => pi,
        None => stationary_distribution(kernels.first().ok_or(amcmc::kernel::KernelError::Empty)?)?,
    };
    let family = KernelFamily::new(kernels, pi)?;
    match grid {
        Some(g) => family.with_grid(g),
        None => Ok(family),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.n, 10_000);
        assert_eq!(cfg.scheme, SchemeSpec::Constant { s: 0 });
        cfg.validate().unwrap();
        assert_eq!(cfg.resolve_family().unwrap().family.len(), 2);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err =
            RunConfig::from_toml_str("n = 10\nreplications = \"many\"\n", Path::new("c.toml"))
                .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("replications"), "{msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_toml_str("nn = 3\n", Path::new("c.toml")).is_err());
    }

    #[test]
    fn invalid_fields_are_named() {
        let cfg = RunConfig::from_toml_str("n = 0\n", Path::new("c.toml")).unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("`n`"));
        let cfg = RunConfig::from_toml_str(
            "[family]\nfile = \"missing.json\"\n",
            Path::new("/nowhere/c.toml"),
        )
        .unwrap();
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("family.file"));
    }

    #[test]
    fn rwm_family_fills_scheme_coordinates() {
        let text = r#"
            [family.rwm]
            m = 10
            variances = [0.5, 1.0, 2.0]
            target = { d = 1, bounds = [[-3.0, 3.0]], density = { name = "uniform" } }

            [scheme]
            kind = "rare"
            schedule = { kind = "log-increments", c = 2.0, epsilon = 0.1 }
            inner = { kind = "ram", sigma0 = 1.0, a = 0.5, b = 2.0 }

            [phi]
            kind = "projection"
            power = 2
        "#;
        let cfg = RunConfig::from_toml_str(text, Path::new("c.toml")).unwrap();
        cfg.validate().unwrap();
        let fam = cfg.resolve_family().unwrap();
        assert_eq!(fam.family.states(), 10);
        let phi = cfg.resolve_phi(&fam).unwrap();
        assert!((phi.values[0] - 2.7f64.powi(2)).abs() < 1e-12);
        match cfg.resolve_scheme(&fam) {
            SchemeSpec::Rare { inner, .. } => match *inner {
                SchemeSpec::Ram { coords, .. } => assert_eq!(coords.unwrap().len(), 10),
                other => panic!("{other:?}"),
            },
            other => panic!("{other:?}"),
        }
    }
}
