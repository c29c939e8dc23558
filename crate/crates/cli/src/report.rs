//! `report`: per-stream result tables from finished run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use dualinc::engine::{AccuracyMatrix, Method, RunConfig, CONFIG_FILE, MATRIX_FILE, METRICS_FILE};
use dualinc::Error;

pub const REPORT_MD: &str = "report.md";
pub const VERIFY_TOL: f64 = 1e-9;

#[derive(Debug, Deserialize)]
struct MatrixDoc {
    method: Method,
    tasks: Vec<String>,
    matrix: AccuracyMatrix,
    #[serde(rename = "AA")]
    aa: Vec<f64>,
    #[serde(rename = "AF")]
    af: Vec<Option<f64>>,
}

#[derive(Debug, Deserialize)]
struct ConfigDoc {
    run: RunConfig,
    tasks: Vec<String>,
}

/// One finished run as read back from disk.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub method: Method,
    pub pool_size: usize,
    pub top_m: usize,
    /// Task names in stream order.
    pub stream: Vec<String>,
    /// Final accuracy per task name.
    pub finals: BTreeMap<String, f64>,
    pub aa: f64,
    pub af: Option<f64>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        }
        .into()
    })
}

fn mismatch(dir: &Path, what: String) -> anyhow::Error {
    Error::Integrity {
        path: dir.to_path_buf(),
        detail: what,
    }
    .into()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= VERIFY_TOL
}

/// Recomputes every logged AA/AF (and the CSV copy of the matrix) from the
/// serialized accuracy matrix.
fn verify(dir: &Path, doc: &MatrixDoc) -> anyhow::Result<()> {
    let m = &doc.matrix;
    let t = m.len();
    if doc.aa.len() != t || doc.af.len() != t {
        return Err(mismatch(
            dir,
            "AA/AF arrays do not match the matrix size".into(),
        ));
    }
    let joint = doc.method == Method::Joint;
    let mut expected = Vec::with_capacity(t);
    for k in 1..=t {
        let aa = m.average_accuracy(k)?;
        let af = if k >= 2 && !joint {
            Some(m.average_forgetting(k)?)
        } else {
            None
        };
        if !close(aa, doc.aa[k - 1]) {
            return Err(mismatch(
                dir,
                format!("AA_{k} {} vs recomputed {aa}", doc.aa[k - 1]),
            ));
        }
        match (af, doc.af[k - 1]) {
            (Some(a), Some(b)) if close(a, b) => {}
            (None, None) => {}
            (a, b) => return Err(mismatch(dir, format!("AF_{k} {b:?} vs recomputed {a:?}"))),
        }
        expected.push((aa, af));
    }
    let csv_path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.is_empty()).collect();
    if rows.len() != t {
        return Err(mismatch(
            dir,
            format!("{METRICS_FILE} has {} rows, expected {t}", rows.len()),
        ));
    }
    let parse = |s: &str| -> anyhow::Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| mismatch(dir, format!("bad number {s:?}: {e}")))
        }
    };
    for (k, row) in rows.iter().enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        if cells.len() != 4 + t + 2 {
            return Err(mismatch(
                dir,
                format!("{METRICS_FILE} row {} is malformed", k + 1),
            ));
        }
        for j in 1..=t {
            let logged = parse(cells[3 + j])?;
            match (logged, m.get(k + 1, j)) {
                (Some(a), Some(b)) if close(a, b) => {}
                (None, None) => {}
                _ => {
                    return Err(mismatch(
                        dir,
                        format!("{METRICS_FILE} a_{},{j} differs", k + 1),
                    ))
                }
            }
        }
        let (aa, af) = expected[k];
        let logged_aa = parse(cells[4 + t])?.unwrap_or(f64::NAN);
        let logged_af = parse(cells[5 + t])?;
        let af_ok = match (af, logged_af) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        if !close(aa, logged_aa) || !af_ok {
            return Err(mismatch(
                dir,
                format!("{METRICS_FILE} row {} metrics differ", k + 1),
            ));
        }
    }
    Ok(())
}

/// Reads one run directory; with `check`, also verifies its metrics.
pub fn read_run(dir: &Path, check: bool) -> anyhow::Result<RunRecord> {
    let config: ConfigDoc = read_json(&dir.join(CONFIG_FILE))?;
    let mut doc: MatrixDoc = read_json(&dir.join(MATRIX_FILE))?;
    doc.matrix = AccuracyMatrix::from_rows(doc.matrix.rows().to_vec())
        .map_err(|e| mismatch(dir, format!("malformed accuracy matrix: {e}")))?;
    if doc.tasks.len() != doc.matrix.len() {
        return Err(mismatch(
            dir,
            "task names do not match the matrix size".into(),
        ));
    }
    if check {
        verify(dir, &doc)?;
    }
    let n = config.tasks.len();
    let order = config.run.order(n)?;
    let mut stream = vec![String::new(); n];
    for (pos, &i) in order.iter().enumerate() {
        stream[i] = config.tasks[pos].clone();
    }
    let (aa, af) = doc.matrix.final_metrics()?;
    let last = doc
        .matrix
        .last_row()
        .ok_or_else(|| mismatch(dir, "empty accuracy matrix".into()))?;
    let finals = doc
        .tasks
        .iter()
        .cloned()
        .zip(last.iter().copied())
        .collect();
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        method: doc.method,
        pool_size: config.run.pool_size,
        top_m: config.run.top_m,
        stream,
        finals,
        aa,
        af: if doc.method == Method::Joint {
            None
        } else {
            af
        },
    })
}

/// Subdirectories of `root` that look like run directories, sorted.
pub fn discover(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join(CONFIG_FILE).exists() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// One aggregated row of a table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub runs: usize,
    pub avg: f64,
    pub fgt: Option<f64>,
    pub finals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub tasks: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Default)]
pub struct Report {
    pub tables: Vec<Table>,
    /// Directories whose metrics could not be read, with the reason.
    pub absent: Vec<(PathBuf, String)>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Groups runs by stream and by (method, N, M), averaging over orders and
/// seeds.
pub fn build(records: &[RunRecord]) -> Vec<Table> {
    type Groups<'a> = BTreeMap<(Method, usize, usize), Vec<&'a RunRecord>>;
    let mut streams: BTreeMap<Vec<String>, Groups> = BTreeMap::new();
    for r in records {
        let key = if r.method == Method::Ours {
            (r.method, r.pool_size, r.top_m)
        } else {
            (r.method, 0, 0)
        };
        streams
            .entry(r.stream.clone())
            .or_default()
            .entry(key)
            .or_default()
            .push(r);
    }
    let mut tables = Vec::new();
    for (tasks, groups) in streams {
        let ours_shapes = groups.keys().filter(|k| k.0 == Method::Ours).count();
        let rows = groups
            .iter()
            .map(|(&(method, n, m), runs)| {
                let label = if method == Method::Ours && ours_shapes > 1 {
                    format!("{method} (N={n}, M={m})")
                } else {
                    method.to_string()
                };
                let fgts: Option<Vec<f64>> = runs.iter().map(|r| r.af).collect();
                TableRow {
                    label,
                    runs: runs.len(),
                    avg: mean(&runs.iter().map(|r| r.aa).collect::<Vec<_>>()),
                    fgt: fgts.map(|v| mean(&v)),
                    finals: tasks
                        .iter()
                        .map(|t| mean(&runs.iter().map(|r| r.finals[t]).collect::<Vec<_>>()))
                        .collect(),
                }
            })
            .collect();
        tables.push(Table { tasks, rows });
    }
    tables
}

/// Percentage with two decimals; `None` renders empty.
pub fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_default()
}

pub fn table_csv(table: &Table) -> String {
    let mut text = String::from("method,runs,Avg,Fgt");
    for t in &table.tasks {
        text.push(',');
        text.push_str(t);
    }
    text.push('\n');
    for row in &table.rows {
        text.push_str(&format!(
            "{},{},{},{}",
            row.label,
            row.runs,
            pct(Some(row.avg)),
            pct(row.fgt)
        ));
        for v in &row.finals {
            text.push(',');
            text.push_str(&pct(Some(*v)));
        }
        text.push('\n');
    }
    text
}

pub fn markdown(report: &Report) -> String {
    let mut text = String::new();
    for (i, table) in report.tables.iter().enumerate() {
        text.push_str(&format!(
            "## Stream {}: {}\n\n",
            i + 1,
            table.tasks.join(", ")
        ));
        text.push_str("| Method | Runs | Avg ↑ | Fgt ↓ |");
        for t in &table.tasks {
            text.push_str(&format!(" {t} |"));
        }
        text.push_str("\n|---|---:|---:|---:|");
        text.push_str(&"---:|".repeat(table.tasks.len()));
        text.push('\n');
        for row in &table.rows {
            text.push_str(&format!(
                "| {} | {} | {} | {} |",
                row.label,
                row.runs,
                pct(Some(row.avg)),
                pct(row.fgt)
            ));
            for v in &row.finals {
                text.push_str(&format!(" {} |", pct(Some(*v))));
            }
            text.push('\n');
        }
        text.push('\n');
    }
    if !report.absent.is_empty() {
        text.push_str("## Absent\n\n");
        for (dir, why) in &report.absent {
            text.push_str(&format!("- `{}`: {why}\n", dir.display()));
        }
    }
    text
}

/// Reads `dirs`, writes `report.md` and one `report_<k>.csv` per stream
/// into `out`. With `check`, a metric mismatch aborts.
pub fn report(dirs: &[PathBuf], out: &Path, check: bool) -> anyhow::Result<Report> {
    let mut records = Vec::new();
    let mut absent = Vec::new();
    for dir in dirs {
        match read_run(dir, check) {
            Ok(r) => records.push(r),
            Err(e) if check && is_integrity(&e) => return Err(e),
            Err(e) => absent.push((dir.clone(), format!("{e:#}"))),
        }
    }
    let report = Report {
        tables: build(&records),
        absent,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (i, table) in report.tables.iter().enumerate() {
        let path = out.join(format!("report_{}.csv", i + 1));
        fs::write(&path, table_csv(table)).map_err(|e| Error::io(&path, e))?;
    }
    let path = out.join(REPORT_MD);
    fs::write(&path, markdown(&report)).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

fn is_integrity(e: &anyhow::Error) -> bool {
    matches!(e.downcast_ref::<Error>(), Some(Error::Integrity { .. }))
}
