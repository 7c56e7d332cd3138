//! Run configuration: a TOML file plus `KEY=VALUE` overrides.
//!
//! Experiment settings sit at the top level (`gamma`, `sam`,
//! `finetune_sgd.steps`, ...), generator settings under `synth.` and swept
//! axes under `grid.`. Every key is checked; a misspelt one is an error.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use semalign::embeddings::TopK;
use semalign::harness::{ExperimentConfig, GridAxis, ModuleToggles, SynthSpec};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modules: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inter_dim: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_similar: Option<Vec<TopK>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shots_k: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin_scale: Option<Vec<f64>>,
}

impl GridConfig {
    /// Axes in a fixed order, modules varying slowest.
    pub fn axes(&self) -> Result<Vec<GridAxis>, CliError> {
        let mut axes = Vec::new();
        if let Some(m) = &self.modules {
            let toggles = m
                .iter()
                .map(|s| s.parse::<ModuleToggles>())
                .collect::<semalign::Result<Vec<_>>>()
                .map_err(CliError::from)?;
            axes.push(GridAxis::Modules(toggles));
        }
        if let Some(v) = &self.inter_dim {
            axes.push(GridAxis::InterDim(v.clone()));
        }
        if let Some(v) = &self.k_similar {
            axes.push(GridAxis::KSimilar(v.clone()));
        }
        if let Some(v) = &self.gamma {
            axes.push(GridAxis::Gamma(v.clone()));
        }
        if let Some(v) = &self.shots_k {
            axes.push(GridAxis::Shots(v.clone()));
        }
        if let Some(v) = &self.margin_scale {
            axes.push(GridAxis::MarginScale(v.clone()));
        }
        Ok(axes)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CliConfig {
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    pub synth: SynthSpec,
    pub grid: GridConfig,
}

impl CliConfig {
    /// Reads `path` (if any), applies overrides in order, validates.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<CliConfig, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::input(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let cfg = Self::build(file, overrides)?;
        cfg.experiment.validate()?;
        cfg.synth.validate()?;
        cfg.grid.axes()?;
        Ok(cfg)
    }

    /// Defaults, then the file, then each override, merged key by key so a
    /// partial section such as `finetune_sgd.steps` keeps its siblings.
    fn build(file: Table, overrides: &[String]) -> Result<CliConfig, CliError> {
        let mut table = match Value::try_from(CliConfig::default()) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        merge(&mut table, file);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    fn from_table(mut table: Table) -> Result<CliConfig, CliError> {
        fn section<T: Default + for<'de> Deserialize<'de>>(
            table: &mut Table,
            name: &str,
        ) -> Result<T, CliError> {
            match table.remove(name) {
                None => Ok(T::default()),
                Some(v) => v
                    .try_into()
                    .map_err(|e| CliError::input(format!("[{name}] {}", e.message()))),
            }
        }
        let synth = section(&mut table, "synth")?;
        let grid = section(&mut table, "grid")?;
        let experiment = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::input(e.message().to_string()))?;
        Ok(CliConfig {
            experiment,
            synth,
            grid,
        })
    }

    /// Canonical TOML form, which is also what gets hashed.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        format!("{digest:x}")[..16].to_string()
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string so `modules=ssc+sam` needs no quoting.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::input(format!("override {spec:?} is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::input(format!(
            "override key {key:?} is malformed"
        )));
    }
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));

    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::input(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
