//! Run configuration: a TOML key-value tree with one `variant` discriminator
//! per potential, plus `key=value` command-line overrides (last wins).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criticality::{RegionSpec, WeightSpec};
use crate::mesh::{Grid, MeshError};
use crate::potential::PotentialSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config schema violation at `{key}`: {message}")]
    Schema { key: String, message: String },
    #[error("bad override `{0}`: expected key.path=value")]
    BadOverride(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub extents: Vec<Vec<f64>>,
    pub n: Vec<usize>,
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid, ConfigError> {
        if self.extents.len() != self.dim || self.n.len() != self.dim {
            return Err(ConfigError::Schema {
                key: "grid".into(),
                message: format!("extents and n must each have {} entries", self.dim),
            });
        }
        let ext: Vec<(f64, f64)> = self
            .extents
            .iter()
            .enumerate()
            .map(|(d, e)| {
                if e.len() != 2 {
                    Err(ConfigError::Schema {
                        key: format!("grid.extents[{d}]"),
                        message: "expected [lo, hi]".into(),
                    })
                } else {
                    Ok((e[0], e[1]))
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Grid::new(self.dim, &ext, &self.n)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    /// Number of refinement levels (built from [grid] by repeated refine)
    /// unless an explicit schedule is given.
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Explicit per-level interior node counts, overriding `levels`.
    #[serde(default)]
    pub schedule_n: Option<Vec<Vec<usize>>>,
    #[serde(default = "default_slope_critical")]
    pub slope_critical: f64,
    #[serde(default = "default_slope_subcritical")]
    pub slope_subcritical: f64,
    #[serde(default = "default_gap_threshold_rel")]
    pub gap_threshold_rel: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
}

fn default_levels() -> usize {
    3
}
fn default_slope_critical() -> f64 {
    1.5
}
fn default_slope_subcritical() -> f64 {
    0.5
}
fn default_gap_threshold_rel() -> f64 {
    1e-3
}
fn default_decay_factor() -> f64 {
    10.0
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            levels: default_levels(),
            schedule_n: None,
            slope_critical: default_slope_critical(),
            slope_subcritical: default_slope_subcritical(),
            gap_threshold_rel: default_gap_threshold_rel(),
            decay_factor: default_decay_factor(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EigenConfig {
    #[serde(default = "default_eig_tol")]
    pub tol: f64,
    #[serde(default = "default_eig_maxit")]
    pub max_iterations: usize,
}

fn default_eig_tol() -> f64 {
    1e-8
}
fn default_eig_maxit() -> usize {
    10_000
}

impl Default for EigenConfig {
    fn default() -> Self {
        EigenConfig { tol: default_eig_tol(), max_iterations: default_eig_maxit() }
    }
}

impl EigenConfig {
    pub fn opts(&self) -> crate::spectral::EigOpts {
        crate::spectral::EigOpts {
            tol: self.tol,
            max_iterations: self.max_iterations,
            ..crate::spectral::EigOpts::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CapacityConfig {
    pub k: RegionSpec,
    /// Optional grid-text export path for the capacitary minimizer.
    #[serde(default)]
    pub minimizer_out: Option<String>,
    /// Also evaluate the Maz'ya ratios over the default dyadic family.
    #[serde(default)]
    pub mazya: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AapConfig {
    #[serde(default = "default_m_levels")]
    pub m_levels: usize,
    pub truncations: Vec<f64>,
    /// Optional grid-text export of the supersolution (sidecar metadata is
    /// written next to it).
    #[serde(default)]
    pub u_out: Option<String>,
}

fn default_m_levels() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ImproveConfig {
    pub u1_path: String,
    pub u2_path: String,
    #[serde(default)]
    pub w_out: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeConfig {
    Oscillation { c: f64, alpha: f64, beta: f64, eps: Vec<f64> },
    Balance {
        k: RegionSpec,
        u: RegionSpec,
        #[serde(default = "default_seed")]
        seed: u64,
        #[serde(default = "default_bumps")]
        bumps: usize,
    },
}

fn default_seed() -> u64 {
    42
}
fn default_bumps() -> usize {
    6
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: Option<GridConfig>,
    pub potential: Option<PotentialSpec>,
    /// Optional sub-domain mask (nodes outside act as Dirichlet zeros).
    pub domain: Option<RegionSpec>,
    pub k: Option<RegionSpec>,
    pub weight: Option<WeightSpec>,
    #[serde(default)]
    pub classify: Option<ClassifyConfig>,
    #[serde(default)]
    pub eigen: Option<EigenConfig>,
    #[serde(default)]
    pub capacity: Option<CapacityConfig>,
    #[serde(default)]
    pub aap: Option<AapConfig>,
    #[serde(default)]
    pub improve: Option<ImproveConfig>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
}

impl RunConfig {
    pub fn from_file(path: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_string(), source: e })?;
        RunConfig::from_str_with_overrides(&text, overrides)
    }

    pub fn from_str_with_overrides(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut tree: toml::Table =
            text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut tree, ov)?;
        }
        let cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Schema { key: "<root>".into(), message: e.to_string() })?;
        Ok(cfg)
    }

    pub fn require_grid(&self) -> Result<Grid, ConfigError> {
        self.grid
            .as_ref()
            .ok_or_else(|| ConfigError::Schema { key: "grid".into(), message: "section required".into() })?
            .build()
    }

    pub fn require_potential(&self) -> Result<&PotentialSpec, ConfigError> {
        self.potential.as_ref().ok_or_else(|| ConfigError::Schema {
            key: "potential".into(),
            message: "section required (with a `variant` discriminator)".into(),
        })
    }

    pub fn eigen_opts(&self) -> crate::spectral::EigOpts {
        self.eigen.clone().unwrap_or_default().opts()
    }
}

/// Apply one `key.path=value` override onto the parsed tree; values parse as
/// TOML literals with a bare-string fallback.
fn apply_override(tree: &mut toml::Table, ov: &str) -> Result<(), ConfigError> {
    let (path, raw) = ov.split_once('=').ok_or_else(|| ConfigError::BadOverride(ov.to_string()))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.is_empty() || keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::BadOverride(ov.to_string()));
    }
    let value: toml::Value = match format!("x = {raw}").parse::<toml::Table>() {
        Ok(t) => t.get("x").cloned().unwrap_or(toml::Value::String(raw.to_string())),
        _ => toml::Value::String(raw.trim().to_string()),
    };
    let mut cur: &mut toml::Table = tree;
    for k in &keys[..keys.len() - 1] {
        cur = cur
            .entry(k.to_string())
            .or_insert(toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(ov.to_string()))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[grid]
dim = 1
extents = [[0.0, 1.0]]
n = [511]

[potential]
variant = "hardy"
center = [0.0]
c = 0.25

[classify]
levels = 3

[k]
kind = "centered"
fraction = 0.5
"#;

    #[test]
    fn parse_and_build() {
        let cfg = RunConfig::from_str_with_overrides(SAMPLE, &[]).unwrap();
        let g = cfg.require_grid().unwrap();
        assert_eq!(g.n()[0], 511);
        match cfg.require_potential().unwrap() {
            PotentialSpec::Hardy { c, .. } => assert_eq!(*c, 0.25),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(cfg.classify.unwrap().levels, 3);
    }

    #[test]
    fn overrides_last_wins() {
        let cfg = RunConfig::from_str_with_overrides(
            SAMPLE,
            &["grid.n=[255]".into(), "potential.c=0.5".into(), "potential.c=0.75".into()],
        )
        .unwrap();
        assert_eq!(cfg.grid.as_ref().unwrap().n, vec![255]);
        match cfg.potential.as_ref().unwrap() {
            PotentialSpec::Hardy { c, .. } => assert_eq!(*c, 0.75),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected_with_path() {
        let bad = format!("{SAMPLE}\n[grid2]\nfoo = 1\n");
        let err = RunConfig::from_str_with_overrides(&bad, &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("grid2"), "diagnostic should carry the key path: {msg}");
    }

    #[test]
    fn sigma_alpha_variant_parses() {
        let text = r#"
[grid]
dim = 3
extents = [[-1.0, 1.0], [-1.0, 1.0], [-1.0, 1.0]]
n = [9, 9, 9]

[potential]
variant = "sigma_alpha"
c = 0.015625
alpha = -0.75
"#;
        let cfg = RunConfig::from_str_with_overrides(text, &[]).unwrap();
        assert!(matches!(cfg.potential, Some(PotentialSpec::SigmaAlpha { .. })));
    }
}
