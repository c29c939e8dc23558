//! `gen-data`, `pretrain` and `run`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context as _;
use serde::{Deserialize, Serialize};

use dualinc::data::{
    generate_stream, load_stream, pretraining_corpus, read_manifest, render_stream,
};
use dualinc::engine::{
    encode_instance, load_base_model, run, save_base_model, BaseModel, Method, RunOptions,
};
use dualinc::Error;

use crate::config::{ExperimentConfig, GridCell, PretrainSection};

pub const SUMMARY_FILE: &str = "summary.csv";

/// Outcome of an idempotent step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Freshness {
    UpToDate(PathBuf),
    Written(PathBuf),
}

/// Generates the stream, or reports "up-to-date" when the files on disk
/// already match the configuration.
pub fn gen_data(cfg: &ExperimentConfig) -> anyhow::Result<Freshness> {
    let manifest_path = cfg.manifest_path();
    let (expected, _) = render_stream(&cfg.data.tasks, cfg.data.seed, cfg.data.feature_dim)?;
    if manifest_path.exists() {
        let current = read_manifest(&manifest_path).ok();
        if current.as_ref() == Some(&expected) && load_stream(&manifest_path).is_ok() {
            return Ok(Freshness::UpToDate(manifest_path));
        }
    }
    generate_stream(
        &cfg.data.tasks,
        cfg.data.seed,
        cfg.data.feature_dim,
        &cfg.data_dir(),
    )?;
    Ok(Freshness::Written(manifest_path))
}

fn sidecar(base: &Path) -> PathBuf {
    base.with_extension("json")
}

/// Pretrains and saves the frozen base model unless an identical one exists.
pub fn pretrain(cfg: &ExperimentConfig, force: bool) -> anyhow::Result<Freshness> {
    let path = cfg.base_path();
    let meta = sidecar(&path);
    if !force && path.exists() && meta.exists() {
        let recorded: Option<PretrainSection> = fs::read_to_string(&meta)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        if recorded.as_ref() == Some(&cfg.pretrain) && load_base_model(&path).is_ok() {
            return Ok(Freshness::UpToDate(path));
        }
    }
    let p = &cfg.pretrain;
    let corpus: Vec<_> =
        pretraining_corpus(p.corpus_seed, p.corpus_per_family, p.model.feature_dim)?
            .iter()
            .map(encode_instance)
            .collect();
    let start = Instant::now();
    let (base, report) = BaseModel::pretrain(p.model, &corpus, &p.train, p.seed)?;
    println!(
        "pretrained on {} instances in {:.1}s: loss {:.4} -> {:.4}",
        corpus.len(),
        start.elapsed().as_secs_f64(),
        report.initial_loss,
        report.final_loss
    );
    save_base_model(&base, &path)?;
    fs::write(&meta, serde_json::to_string_pretty(&cfg.pretrain)? + "\n")
        .map_err(|e| Error::io(&meta, e))?;
    Ok(Freshness::Written(path))
}

/// Final metrics of one finished grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub method: Method,
    pub pool_size: usize,
    pub top_m: usize,
    pub order: String,
    pub seed: u64,
    pub aa: f64,
    pub af: Option<f64>,
}

#[derive(Debug, Default)]
pub struct GridReport {
    pub results: Vec<CellResult>,
    pub failures: Vec<(String, String)>,
}

fn require(path: &Path, hint: &str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!("{} is missing; {hint}", path.display())).into())
    }
}

/// Runs every grid cell (resuming finished or interrupted ones), then writes
/// the aggregate summary. Failing cells are recorded and skipped.
pub fn run_grid(cfg: &ExperimentConfig) -> anyhow::Result<GridReport> {
    let manifest = cfg.manifest_path();
    let base_path = cfg.base_path();
    require(&manifest, "run gen-data first")?;
    require(&base_path, "run pretrain first")?;
    let stream = load_stream(&manifest)?;
    let base = load_base_model(&base_path)?;
    if base.model.config.feature_dim != cfg.data.feature_dim {
        return Err(Error::Config(format!(
            "base model expects {}-dim features, stream has {}",
            base.model.config.feature_dim, cfg.data.feature_dim
        ))
        .into());
    }
    let runs_dir = cfg.runs_dir();
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;

    let mut report = GridReport::default();
    let cells = cfg.cells();
    for (i, cell) in cells.iter().enumerate() {
        let start = Instant::now();
        match run_cell(&stream, &base, &runs_dir, cell) {
            Ok(result) => {
                println!(
                    "[{}/{}] {}: AA {:.4} AF {} ({:.1}s)",
                    i + 1,
                    cells.len(),
                    cell.label,
                    result.aa,
                    result.af.map_or("-".into(), |v| format!("{v:.4}")),
                    start.elapsed().as_secs_f64()
                );
                report.results.push(result);
            }
            Err(e) => {
                eprintln!("[{}/{}] {}: failed: {e:#}", i + 1, cells.len(), cell.label);
                report.failures.push((cell.label.clone(), format!("{e:#}")));
            }
        }
    }
    write_summary(&runs_dir.join(SUMMARY_FILE), &report.results)?;
    Ok(report)
}

fn run_cell(
    stream: &[dualinc::data::StreamTask],
    base: &BaseModel,
    runs_dir: &Path,
    cell: &GridCell,
) -> anyhow::Result<CellResult> {
    let dir = runs_dir.join(&cell.label);
    let opts = RunOptions {
        out_dir: Some(&dir),
        stop_after: None,
    };
    let outcome =
        run(stream, base, &cell.config, opts).with_context(|| format!("run {}", cell.label))?;
    let (aa, af) = outcome.matrix().final_metrics()?;
    Ok(CellResult {
        label: cell.label.clone(),
        method: cell.config.method,
        pool_size: cell.config.pool_size,
        top_m: cell.config.top_m,
        order: cell.config.order_label(stream.len()),
        seed: cell.config.seed,
        aa,
        af: if cell.config.method == Method::Joint {
            None
        } else {
            af
        },
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Summary rows: one per (method, N, M, order) averaged over seeds, then a
/// `mean` row per (method, N, M) averaging those order rows.
pub fn summary_rows(results: &[CellResult]) -> Vec<(String, Vec<String>)> {
    type Key = (Method, usize, usize);
    let mut by_order: BTreeMap<(Key, String), Vec<&CellResult>> = BTreeMap::new();
    for r in results {
        by_order
            .entry(((r.method, r.pool_size, r.top_m), r.order.clone()))
            .or_default()
            .push(r);
    }
    let mut per_key: BTreeMap<Key, Vec<(f64, Option<f64>)>> = BTreeMap::new();
    let mut rows = Vec::new();
    for (((method, n, m), order), runs) in &by_order {
        let aa = mean(&runs.iter().map(|r| r.aa).collect::<Vec<_>>());
        let afs: Option<Vec<f64>> = runs.iter().map(|r| r.af).collect();
        let af = afs.map(|v| mean(&v));
        per_key.entry((*method, *n, *m)).or_default().push((aa, af));
        rows.push((
            method.to_string(),
            vec![
                n.to_string(),
                m.to_string(),
                order.clone(),
                runs.len().to_string(),
                aa.to_string(),
                fmt_opt(af),
            ],
        ));
    }
    for ((method, n, m), vals) in per_key {
        let aa = mean(&vals.iter().map(|v| v.0).collect::<Vec<_>>());
        let afs: Option<Vec<f64>> = vals.iter().map(|v| v.1).collect();
        rows.push((
            method.to_string(),
            vec![
                n.to_string(),
                m.to_string(),
                "mean".into(),
                vals.len().to_string(),
                aa.to_string(),
                fmt_opt(afs.map(|v| mean(&v))),
            ],
        ));
    }
    rows
}

pub fn write_summary(path: &Path, results: &[CellResult]) -> anyhow::Result<()> {
    let mut text = String::from("method,pool_size,top_m,order,count,AA,AF\n");
    for (method, cols) in summary_rows(results) {
        text.push_str(&method);
        for c in cols {
            text.push(',');
            text.push_str(&c);
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}
