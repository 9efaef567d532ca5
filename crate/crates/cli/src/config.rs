//! Run configuration: a TOML file with `[run]`, `[synth]`, `[fusion]`,
//! `[align]` and `[cluster]` tables, then `--set` overrides, then flags.
//!
//! Module seeds left unset are derived from `run.seed`, so a single root
//! seed pins every random stream of a run.

use std::path::Path;

use cellsym_core::seed::derive_seed;
use cellsym_core::{AlignConfig, FusionConfig, SynthConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const SECTIONS: [&str; 5] = ["run", "synth", "fusion", "align", "cluster"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub train_fraction: f64,
    /// Split each class separately instead of the whole table.
    pub stratified: bool,
    /// Written into the `tissue` column of metrics files.
    pub tissue: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            train_fraction: 0.8,
            stratified: false,
            tissue: "synthetic".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSource {
    Morph,
    Gene,
    /// Both latents side by side.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub k: usize,
    pub n_init: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub pca_dims: usize,
    pub source: LatentSource,
    pub seed: u64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            k: cellsym_core::analysis::DEFAULT_K,
            n_init: cellsym_core::analysis::DEFAULT_N_INIT,
            max_iter: 300,
            tol: 1e-6,
            pca_dims: 2,
            source: LatentSource::Morph,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub synth: SynthConfig,
    pub fusion: FusionConfig,
    pub align: AlignConfig,
    pub cluster: ClusterSection,
}

impl RunConfig {
    pub fn split_seed(&self) -> u64 {
        derive_seed(self.run.seed, "split")
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `key=value` override. Bare keys land in `default_section`.
pub fn apply_override(table: &mut Table, spec: &str, default_section: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let (section, field) = match key.split_once('.') {
        Some((s, f)) => (s, f),
        None => (default_section, key),
    };
    if !SECTIONS.contains(&section) {
        return Err(CliError::Config(format!("override `{key}`: unknown section `{section}`")));
    }
    if field.is_empty() || field.contains('.') {
        return Err(CliError::Config(format!("override `{key}`: expected section.field")));
    }
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(t) = entry else {
        return Err(CliError::Config(format!("`{section}` is not a table")));
    };
    t.insert(field.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn has_key(table: &Table, section: &str, field: &str) -> bool {
    table
        .get(section)
        .and_then(Value::as_table)
        .is_some_and(|t| t.contains_key(field))
}

/// Loads the file (if any), layers overrides and the root seed on top, fills
/// unset module seeds and validates every section.
pub fn resolve(
    path: Option<&Path>,
    overrides: &[String],
    default_section: &str,
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o, default_section)?;
    }
    if let Some(s) = seed {
        apply_override(&mut table, &format!("run.seed={s}"), "run")?;
    }
    let explicit: Vec<bool> = ["synth", "fusion", "align", "cluster"]
        .iter()
        .map(|s| has_key(&table, s, "seed"))
        .collect();
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
    let root = cfg.run.seed;
    if !explicit[0] {
        cfg.synth.seed = derive_seed(root, "synth");
    }
    if !explicit[1] {
        cfg.fusion.seed = derive_seed(root, "fusion");
    }
    if !explicit[2] {
        cfg.align.seed = derive_seed(root, "align");
    }
    if !explicit[3] {
        cfg.cluster.seed = derive_seed(root, "cluster");
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    let f = cfg.run.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(CliError::Config(format!("run.train_fraction must lie in (0, 1), got {f}")));
    }
    cfg.synth.validate()?;
    cfg.fusion.validate()?;
    cfg.align.validate()?;
    let c = &cfg.cluster;
    if c.k == 0 || c.n_init == 0 || c.max_iter == 0 || !(c.tol >= 0.0) {
        return Err(CliError::Config(
            "cluster.k, cluster.n_init and cluster.max_iter must be positive and cluster.tol non-negative".into(),
        ));
    }
    Ok(())
}
