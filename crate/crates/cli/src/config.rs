//! Run configuration: a TOML file, then `--set key.path=value` overrides,
//! then the dedicated flags.

use std::path::{Path, PathBuf};

use boosts::evaluate::StudyConfig;
use boosts::simulate::SimSpec;
use boosts::tune::TuneOptions;
use boosts::FitConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// Coordinate columns; inferred from `sx`, `sy`, `sz` when absent.
    pub coords: Option<Vec<String>>,
    /// Feature columns; every remaining numeric column when absent.
    pub features: Option<Vec<String>>,
    pub response: String,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            coords: None,
            features: None,
            response: "y".into(),
            train_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub runs: usize,
    pub lambda_range: (f64, f64),
    pub gamma_range: (f64, f64),
    pub candidates: usize,
    pub leaf_window: (f64, f64),
    pub inner_fraction: f64,
    pub refine_runs: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        let o = TuneOptions::default();
        Self {
            runs: 16,
            lambda_range: (0.0, 0.1),
            gamma_range: (0.0, 10.0),
            candidates: boosts::tune::DEFAULT_CANDIDATES,
            leaf_window: o.leaf_window,
            inner_fraction: o.inner_fraction,
            refine_runs: o.refine_runs,
        }
    }
}

impl TuneConfig {
    pub fn options(&self, seed: u64) -> TuneOptions {
        TuneOptions {
            leaf_window: self.leaf_window,
            inner_fraction: self.inner_fraction,
            refine_runs: self.refine_runs,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub replicates: usize,
    pub train_fraction: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let s = StudyConfig::default();
        Self {
            replicates: s.replicates,
            train_fraction: s.train_fraction,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub simulate: SimSpec,
    pub fit: FitConfig,
    pub tune: TuneConfig,
    pub compare: CompareConfig,
}

impl RunConfig {
    /// Reads `path` (if any) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut root = match path {
            Some(p) => {
                if !p.is_file() {
                    return Err(CliError::Usage(format!("config file {} not found", p.display())));
                }
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("reading {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.fit.validate()?;
        self.simulate.validate()?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(CliError::Usage("data.train_fraction must lie in (0, 1)".into()));
        }
        if !(self.compare.train_fraction > 0.0 && self.compare.train_fraction < 1.0) {
            return Err(CliError::Usage("compare.train_fraction must lie in (0, 1)".into()));
        }
        if self.compare.replicates == 0 {
            return Err(CliError::Usage("compare.replicates must be at least 1".into()));
        }
        if self.tune.runs == 0 || self.tune.candidates == 0 {
            return Err(CliError::Usage("tune.runs and tune.candidates must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(CliError::Usage("workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// when it does not parse as one.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{spec}'")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad key '{key}'")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("'{p}' in '{key}' is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::load(
            None,
            &[
                "fit.grow.lambda=0.25".into(),
                "fit.n_trees=7".into(),
                "simulate.layout=grid".into(),
                "data.coords=[\"a\", \"b\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.fit.grow.lambda, 0.25);
        assert_eq!(cfg.fit.n_trees, 7);
        assert_eq!(cfg.simulate.layout, boosts::simulate::Layout::Grid);
        assert_eq!(cfg.data.coords, Some(vec!["a".to_string(), "b".to_string()]));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(
            RunConfig::load(None, &["fit.bogus=1".into()]),
            Err(CliError::Usage(_))
        ));
        assert!(RunConfig::load(None, &["fit.grow.lambda=-1".into()]).is_err());
        assert!(RunConfig::load(None, &["no_equals".into()]).is_err());
        assert!(RunConfig::load(None, &["seed=3".into(), "seed.x=1".into()]).is_err());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 4\n[fit]\nn_trees = 3\n[fit.grow]\ngamma = 2.0\n").unwrap();
        let cfg = RunConfig::load(Some(&p), &["fit.n_trees=9".into()]).unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.fit.n_trees, 9);
        assert_eq!(cfg.fit.grow.gamma, 2.0);
        assert!(matches!(
            RunConfig::load(Some(&dir.path().join("missing.toml")), &[]),
            Err(CliError::Usage(_))
        ));
    }
}
