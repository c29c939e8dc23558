//! Declarative experiment file (TOML) and its resolution against flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dualinc::data::{reference_specs, TaskFamilySpec, PRETRAIN_CORPUS_SEED};
use dualinc::engine::{Method, RunConfig};
use dualinc::model::{PretrainConfig, ToyModelConfig};
use dualinc::Error;

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "DUALINC_OUT";
pub const RESOLVED_FILE: &str = "experiment.resolved.toml";
pub const BASE_FILE: &str = "base.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_root: PathBuf,
    pub paths: Paths,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub run: RunConfig,
    pub grid: GridSection,
}

/// Locations; relative paths resolve against `out_root`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub base_checkpoint: Option<PathBuf>,
    pub runs_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub feature_dim: usize,
    pub tasks: Vec<TaskFamilySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub seed: u64,
    pub corpus_seed: u64,
    pub corpus_per_family: usize,
    pub model: ToyModelConfig,
    pub train: PretrainConfig,
}

/// Sweep lists; empty `pool_sizes` / `top_ms` fall back to the `[run]` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub methods: Vec<Method>,
    pub orders: Vec<Vec<usize>>,
    pub seeds: Vec<u64>,
    pub pool_sizes: Vec<usize>,
    pub top_ms: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_root: PathBuf::from("out"),
            paths: Paths::default(),
            data: DataSection::default(),
            pretrain: PretrainSection::default(),
            run: RunConfig::default(),
            grid: GridSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            seed: 1,
            feature_dim: 8,
            tasks: reference_specs(2000, 200),
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            seed: 1,
            corpus_seed: PRETRAIN_CORPUS_SEED,
            corpus_per_family: 2000,
            model: ToyModelConfig::default(),
            train: PretrainConfig::default(),
        }
    }
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            methods: vec![
                Method::Ours,
                Method::Sequential,
                Method::Rehearsal,
                Method::Joint,
            ],
            orders: vec![vec![0, 1, 2, 3], vec![3, 1, 0, 2], vec![2, 0, 3, 1]],
            seeds: vec![0, 1, 2],
            pool_sizes: Vec::new(),
            top_ms: Vec::new(),
        }
    }
}

/// One cell of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub label: String,
    pub config: RunConfig,
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Applies a `section.key=value` override to a parsed document.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (path, value) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("override key {path:?} is malformed")));
    }
    let mut table = doc;
    for key in &keys[..keys.len() - 1] {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override key {path:?}: {key} is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Reads `path` (defaults when `None`), then applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_err(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.pretrain.model.validate()?;
        if self.data.tasks.is_empty() {
            return Err(config_err("data.tasks is empty"));
        }
        if self.data.feature_dim != self.pretrain.model.feature_dim {
            return Err(config_err(format!(
                "data.feature_dim {} differs from pretrain.model.feature_dim {}",
                self.data.feature_dim, self.pretrain.model.feature_dim
            )));
        }
        if self.grid.methods.is_empty() || self.grid.orders.is_empty() || self.grid.seeds.is_empty()
        {
            return Err(config_err("grid needs methods, orders and seeds"));
        }
        for cell in self.cells() {
            cell.config
                .validate(self.data.tasks.len())
                .map_err(|e| config_err(format!("grid cell {}: {e}", cell.label)))?;
        }
        Ok(())
    }

    fn resolve(&self, p: &Option<PathBuf>, default: &str) -> PathBuf {
        match p {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.out_root.join(p),
            None => self.out_root.join(default),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.paths.data_dir, "data")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir().join(dualinc::data::MANIFEST_FILE)
    }

    pub fn base_path(&self) -> PathBuf {
        self.resolve(&self.paths.base_checkpoint, BASE_FILE)
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.resolve(&self.paths.runs_dir, "runs")
    }

    /// Expands the (method × N × M × order × seed) grid. N and M only vary
    /// for `ours`.
    pub fn cells(&self) -> Vec<GridCell> {
        let ns = if self.grid.pool_sizes.is_empty() {
            vec![self.run.pool_size]
        } else {
            self.grid.pool_sizes.clone()
        };
        let ms = if self.grid.top_ms.is_empty() {
            vec![self.run.top_m]
        } else {
            self.grid.top_ms.clone()
        };
        let mut out = Vec::new();
        for &method in &self.grid.methods {
            let shapes: Vec<(usize, usize)> = if method == Method::Ours {
                ns.iter()
                    .flat_map(|&n| ms.iter().map(move |&m| (n, m)))
                    .collect()
            } else {
                vec![(self.run.pool_size, self.run.top_m)]
            };
            for (n, m) in shapes {
                for order in &self.grid.orders {
                    for &seed in &self.grid.seeds {
                        let config = RunConfig {
                            method,
                            task_order: order.clone(),
                            pool_size: n,
                            top_m: m,
                            seed,
                            ..self.run.clone()
                        };
                        let order_label = order
                            .iter()
                            .map(usize::to_string)
                            .collect::<Vec<_>>()
                            .join("-");
                        let shape = if method == Method::Ours {
                            format!("_n{n}_m{m}")
                        } else {
                            String::new()
                        };
                        out.push(GridCell {
                            label: format!("{method}{shape}_o{order_label}_s{seed}"),
                            config,
                        });
                    }
                }
            }
        }
        out
    }

    /// Writes the fully resolved configuration under `out_root`.
    pub fn persist(&self) -> anyhow::Result<PathBuf> {
        fs::create_dir_all(&self.out_root).map_err(|e| Error::io(&self.out_root, e))?;
        let path = self.out_root.join(RESOLVED_FILE);
        let text = toml::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
