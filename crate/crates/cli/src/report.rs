//! Report files and multi-seed aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use eduembed::cdmodels::{MasteryMatrix, SplitMetrics};
use eduembed::corpus::Corpus;
use eduembed::encoder::format_sig9;
use eduembed::{Error, Result};
use serde::{Deserialize, Serialize};

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Pretty JSON with a trailing newline. Struct fields serialize in declaration
/// order and maps are ordered, so equal reports are byte-identical.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(format!("report serialization: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        format: "json",
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// One row per student, one column per concept.
pub fn write_mastery(path: &Path, mastery: &MasteryMatrix, corpus: &Corpus) -> Result<()> {
    let mut out = String::from("student_id");
    for id in corpus.concept_ids() {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for i in 0..mastery.rows() {
        out.push_str(corpus.student_id(i));
        for v in mastery.row(i) {
            out.push(',');
            out.push_str(&format_sig9(*v));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Flattens split metrics into `prefix.auc`-style keys, skipping undefined values.
pub fn flatten(out: &mut BTreeMap<String, f64>, prefix: &str, m: &SplitMetrics) {
    for (name, v) in [("auc", m.auc), ("acc", m.acc), ("doa", m.doa)] {
        if let Some(v) = v {
            out.insert(format!("{prefix}.{name}"), v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Mean and standard deviation of every metric present in at least one run.
pub fn aggregate(runs: &[BTreeMap<String, f64>]) -> BTreeMap<String, Summary> {
    let mut cols: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for (k, v) in run {
            cols.entry(k).or_default().push(*v);
        }
    }
    cols.into_iter()
        .map(|(k, vs)| {
            let n = vs.len() as f64;
            let mean = vs.iter().sum::<f64>() / n;
            let var = vs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (
                k.to_string(),
                Summary {
                    n: vs.len(),
                    mean,
                    std: var.sqrt(),
                },
            )
        })
        .collect()
}
