//! Consolidation of a run's probe reports into one long-format CSV and a
//! Markdown summary with one table per probe stage (rows are models,
//! columns are datasets or, for multi-metric probes, metric keys).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dprobe_core::probes::ProbeReport;
use serde::Serialize;

use crate::error::{CliError, Result};

/// One value in the consolidated table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub section: String,
    pub probe: String,
    pub row: String,
    pub column: String,
    pub value: f64,
    pub count: usize,
    pub degenerate: bool,
    #[serde(skip)]
    order: (usize, usize, usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub probe: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    cells: BTreeMap<(String, String), Cell>,
}

impl Section {
    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        self.cells.get(&(row.to_string(), column.to_string())).map(|c| c.value)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub sections: Vec<Section>,
    pub markdown: String,
}

impl Report {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }
}

fn cells_of(report: &ProbeReport) -> Vec<Cell> {
    let c = &report.config;
    let text = |k: &str| c[k].as_str().unwrap_or_default().to_string();
    let index = |k: &str| c[k].as_u64().unwrap_or(0) as usize;
    let base = Cell {
        section: text("stage"),
        probe: text("probe"),
        row: text("row"),
        column: text("column"),
        value: report.summary,
        count: report.counts.get(&report.summary_key).copied().unwrap_or(0),
        degenerate: report.degenerate,
        order: (index("stage_index"), index("row_index"), index("column_index"), 0),
    };
    if !c["expand"].as_bool().unwrap_or(false) {
        return vec![base];
    }
    let order: Vec<String> = match c["metric_order"].as_array() {
        Some(a) if !a.is_empty() => a.iter().filter_map(|v| v.as_str().map(String::from)).collect(),
        _ => report.metrics.keys().cloned().collect(),
    };
    let single_column = c["columns_in_stage"].as_u64().unwrap_or(1) == 1;
    order
        .iter()
        .enumerate()
        .map(|(k, key)| Cell {
            column: if single_column {
                key.clone()
            } else {
                format!("{}:{key}", base.column)
            },
            value: report.metric(key).unwrap_or(f64::NAN),
            count: report.counts.get(key).copied().unwrap_or(0),
            degenerate: !report.metrics.contains_key(key),
            order: (base.order.0, base.order.1, base.order.2, k),
            ..base.clone()
        })
        .collect()
}

fn read_reports(run_dir: &Path) -> Result<Vec<ProbeReport>> {
    let root = run_dir.join("reports");
    let mut out = Vec::new();
    let entries = match fs::read_dir(&root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(CliError::io(&root, e)),
    };
    let mut dirs: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| CliError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            let bytes = fs::read(&f).map_err(|e| CliError::io(&f, e))?;
            let r: ProbeReport = serde_json::from_slice(&bytes).map_err(|e| dprobe_core::Error::Format {
                path: f.clone(),
                reason: e.to_string(),
            })?;
            out.push(r);
        }
    }
    Ok(out)
}

fn fmt_value(c: Option<&Cell>) -> String {
    match c {
        Some(c) if !c.degenerate && c.value.is_finite() => match c.probe.as_str() {
            // Fractions; every other probe reports percentages.
            "cka" | "shape-bias" => format!("{:.4}", c.value),
            _ => format!("{:.2}", c.value),
        },
        Some(_) => "n/a".into(),
        None => String::new(),
    }
}

/// Builds the consolidated tables of a run directory and writes
/// `report.csv` and `report.md` into it.
pub fn emit_report(run_dir: &Path) -> Result<Report> {
    let reports = read_reports(run_dir)?;
    if reports.is_empty() {
        return Err(CliError::Input(format!("no probe reports under {}", run_dir.join("reports").display())));
    }
    let mut cells: Vec<Cell> = reports.iter().flat_map(cells_of).collect();
    cells.sort_by(|a, b| a.order.cmp(&b.order).then_with(|| a.section.cmp(&b.section)));
    let mut sections: Vec<Section> = Vec::new();
    for cell in &cells {
        if sections.last().is_none_or(|s| s.name != cell.section) {
            sections.push(Section {
                name: cell.section.clone(),
                probe: cell.probe.clone(),
                rows: vec![],
                columns: vec![],
                cells: BTreeMap::new(),
            });
        }
        let s = sections.last_mut().expect("just pushed");
        if !s.rows.contains(&cell.row) {
            s.rows.push(cell.row.clone());
        }
        s.cells.insert((cell.row.clone(), cell.column.clone()), cell.clone());
    }
    // Column order: by (column index, metric index) of first appearance.
    for s in &mut sections {
        let mut cols: Vec<((usize, usize), &String)> = Vec::new();
        for c in s.cells.values() {
            if !cols.iter().any(|(_, n)| *n == &c.column) {
                cols.push(((c.order.2, c.order.3), &c.column));
            }
        }
        cols.sort_by_key(|(o, _)| *o);
        s.columns = cols.into_iter().map(|(_, n)| n.clone()).collect();
    }

    let mut md = String::new();
    for s in &sections {
        let _ = writeln!(md, "## {} ({})\n", s.name, s.probe);
        let _ = writeln!(md, "| model | {} |", s.columns.join(" | "));
        let _ = writeln!(md, "|---|{}", "---|".repeat(s.columns.len()));
        for r in &s.rows {
            let vals: Vec<String> = s
                .columns
                .iter()
                .map(|c| fmt_value(s.cells.get(&(r.clone(), c.clone()))))
                .collect();
            let _ = writeln!(md, "| {r} | {} |", vals.join(" | "));
        }
        md.push('\n');
    }

    let csv_path = run_dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| dprobe_core::Error::Format {
        path: csv_path.clone(),
        reason: e.to_string(),
    })?;
    for s in &sections {
        for r in &s.rows {
            for c in &s.columns {
                if let Some(cell) = s.cells.get(&(r.clone(), c.clone())) {
                    w.serialize(cell).map_err(|e| dprobe_core::Error::Format {
                        path: csv_path.clone(),
                        reason: e.to_string(),
                    })?;
                }
            }
        }
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    let md_path = run_dir.join("report.md");
    fs::write(&md_path, &md).map_err(|e| CliError::io(&md_path, e))?;
    Ok(Report { sections, markdown: md })
}
