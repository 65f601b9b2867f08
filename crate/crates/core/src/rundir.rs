//! Deterministic on-disk layout of a finished run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::engine::{RunOutput, SimMode};
use crate::instance::Instance;
use crate::kpi::KpiInputs;
use crate::plan::Masterplan;
use crate::scenario::ScenarioTrace;

pub const RUN_FORMAT_VERSION: u32 = 1;
pub const KPI_INPUTS_FILE: &str = "kpi_inputs.json";

#[derive(Debug, Error)]
pub enum RunDirError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub instance: String,
    pub plan: String,
    pub master_seed: u64,
    pub mode: SimMode,
    pub start_year: i32,
    pub end_year: i32,
    pub nonconverged: usize,
    pub files: Vec<String>,
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::String(s) => out.push((prefix.to_owned(), s.clone())),
        Value::Null => out.push((prefix.to_owned(), String::new())),
        Value::Number(n) if n.as_f64() == Some(0.0) => out.push((prefix.to_owned(), "0".into())),
        other => out.push((prefix.to_owned(), other.to_string())),
    }
}

/// Tab-separated table with one column per (flattened) field.
pub fn to_tsv<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let mut cells = Vec::new();
        flatten("", &serde_json::to_value(row).expect("rows serialise"), &mut cells);
        if i == 0 {
            out.push_str(&cells.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join("\t"));
            out.push('\n');
        }
        let _ = writeln!(out, "{}", cells.into_iter().map(|(_, v)| v).collect::<Vec<_>>().join("\t"));
    }
    out
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("values serialise");
    s.push('\n');
    s
}

/// Write every artefact of a run into `dir`, creating it if needed.
pub fn write_run_dir(
    dir: &Path,
    instance: &Instance,
    plan: &Masterplan,
    trace: &ScenarioTrace,
    out: &RunOutput,
) -> Result<Manifest, RunDirError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| RunDirError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let files: Vec<(&str, String)> = vec![
        ("instance.json", instance.to_canonical_json()),
        ("plan.json", pretty(plan)),
        ("trace.json", pretty(trace)),
        ("trace.tsv", trace.to_columns()),
        ("kpi.json", pretty(&out.kpi)),
        ("kpi.tsv", out.kpi.to_columns()),
        (KPI_INPUTS_FILE, pretty(&out.kpi_inputs)),
        ("ledger.tsv", to_tsv(&out.ledgers)),
        ("municipalities.tsv", to_tsv(&out.muni_years)),
        ("sources.tsv", to_tsv(&out.source_years)),
        ("source_days.tsv", to_tsv(&out.source_days)),
        ("hours.tsv", to_tsv(&out.hours)),
        ("events.tsv", to_tsv(&out.events)),
        ("history.json", pretty(&out.history)),
        ("final_state.json", pretty(&out.final_state)),
    ];
    let manifest = Manifest {
        format_version: RUN_FORMAT_VERSION,
        instance: instance.name.clone(),
        plan: plan.name.clone(),
        master_seed: out.master_seed,
        mode: out.config.mode,
        start_year: out.start_year,
        end_year: out.end_year,
        nonconverged: out.nonconverged,
        files: files.iter().map(|(n, _)| n.to_string()).collect(),
    };
    for (name, text) in files.iter().chain(std::iter::once(&("manifest.json", pretty(&manifest)))) {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io(&path))?;
    }
    Ok(manifest)
}

/// KPI inputs of a run directory, for re-slicing without re-running.
pub fn read_kpi_inputs(dir: &Path) -> Result<KpiInputs, RunDirError> {
    let path = dir.join(KPI_INPUTS_FILE);
    let p = path.display().to_string();
    let text = fs::read_to_string(&path).map_err(|source| RunDirError::Io { path: p.clone(), source })?;
    serde_json::from_str(&text).map_err(|source| RunDirError::Json { path: p, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Inner {
        a: f64,
    }

    #[derive(Serialize)]
    struct Row {
        id: &'static str,
        inner: Inner,
        note: Option<u8>,
    }

    #[test]
    fn tsv_flattens_nested_fields() {
        let rows = [Row { id: "x", inner: Inner { a: 1.5 }, note: None }, Row { id: "y", inner: Inner { a: 2.0 }, note: Some(3) }];
        assert_eq!(to_tsv(&rows), "id\tinner.a\tnote\nx\t1.5\t\ny\t2.0\t3\n");
        assert_eq!(to_tsv(&[Inner { a: -0.0 }]), "a\n0\n");
    }

    #[test]
    fn empty_table_is_empty() {
        assert_eq!(to_tsv::<Row>(&[]), "");
    }
}
