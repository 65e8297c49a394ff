use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::finetune::HeadKind;
use crate::probe::CategoryResult;

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

/// SHA-256 (hex) of the artifacts a run read or produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHashes {
    pub dataset: String,
    pub embeddings: Option<String>,
    pub head: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub kind: HeadKind,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsRecord {
    pub schema_version: u32,
    pub name: String,
    /// Dataset (game) label used to group reports.
    pub label: String,
    /// Composition, plus `/<head>` when a head was applied.
    pub variant: String,
    pub config: ExperimentConfig,
    pub categories: Vec<CategoryResult>,
    /// Mean test macro-F1 over the categories that trained.
    pub mean_f1: f64,
    /// Width of the probed representation.
    pub embedding_width: usize,
    pub finetune: Option<FinetuneSummary>,
    pub hashes: ArtifactHashes,
    /// Not covered by determinism guarantees; see [`ResultsRecord::without_timing`].
    pub wall_clock_secs: f64,
}

/// Mean of the present values, summed in order.
pub(crate) fn mean_present(values: impl IntoIterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values.into_iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl ResultsRecord {
    pub fn recomputed_mean(&self) -> f64 {
        mean_present(self.categories.iter().map(|c| c.f1))
    }

    /// Checks the stored mean against the categories.
    pub fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.categories {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Inconsistent(format!("category `{}` appears twice", c.name)));
            }
            if let Some(f) = c.f1 {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::Inconsistent(format!("category `{}` has F1 {f} outside [0, 1]", c.name)));
                }
            }
        }
        let m = self.recomputed_mean();
        if (m - self.mean_f1).abs() > 1e-12 {
            return Err(Error::Inconsistent(format!(
                "stored mean F1 {} differs from the category mean {m}",
                self.mean_f1
            )));
        }
        Ok(())
    }

    /// The record with its wall-clock time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self { wall_clock_secs: 0.0, ..self.clone() }
    }

    pub fn f1(&self, category: &str) -> Option<f64> {
        self.categories.iter().find(|c| c.name == category).and_then(|c| c.f1)
    }
}

pub fn persist_results(record: &ResultsRecord, path: &Path) -> Result<()> {
    record.check()?;
    let mut text = serde_json::to_string_pretty(record).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_results(path: &Path) -> Result<ResultsRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let version = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Format(format!("{}: no schema_version field", path.display())))?;
    if version != RESULTS_SCHEMA_VERSION as u64 {
        return Err(Error::Version { found: version.min(u32::MAX as u64) as u32, expected: RESULTS_SCHEMA_VERSION });
    }
    let record: ResultsRecord =
        serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    record.check()?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub category: String,
    pub baseline: f64,
    pub treatment: f64,
    /// `treatment − baseline` in F1 units.
    pub delta: f64,
    /// The same difference in percentage points.
    pub delta_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaTable {
    pub baseline: String,
    pub treatment: String,
    pub rows: Vec<DeltaRow>,
    /// Mean of the per-category deltas.
    pub mean_delta: f64,
    pub mean_delta_pp: f64,
}

/// Per-category F1 differences `treatment − baseline`, in baseline order.
pub fn compare_runs(baseline: &ResultsRecord, treatment: &ResultsRecord) -> Result<DeltaTable> {
    let a: BTreeSet<&str> = baseline.categories.iter().map(|c| c.name.as_str()).collect();
    let b: BTreeSet<&str> = treatment.categories.iter().map(|c| c.name.as_str()).collect();
    if a != b {
        let diff: Vec<&str> = a.symmetric_difference(&b).copied().collect();
        return Err(Error::Inconsistent(format!(
            "category sets differ; only in one record: {}",
            diff.join(", ")
        )));
    }
    let mut rows = Vec::with_capacity(a.len());
    for c in &baseline.categories {
        let failed = |who: &str| Error::Inconsistent(format!("category `{}` has no F1 in the {who} record", c.name));
        let base = c.f1.ok_or_else(|| failed("baseline"))?;
        let treat = treatment.f1(&c.name).ok_or_else(|| failed("treatment"))?;
        let delta = treat - base;
        rows.push(DeltaRow {
            category: c.name.clone(),
            baseline: base,
            treatment: treat,
            delta,
            delta_pp: 100.0 * delta,
        });
    }
    let mean_delta = mean_present(rows.iter().map(|r| Some(r.delta)));
    Ok(DeltaTable {
        baseline: baseline.variant.clone(),
        treatment: treatment.variant.clone(),
        rows,
        mean_delta,
        mean_delta_pp: 100.0 * mean_delta,
    })
}

impl DeltaTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["category", "baseline", "treatment", "delta", "delta_pp"]).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.category.clone(),
                r.baseline.to_string(),
                r.treatment.to_string(),
                r.delta.to_string(),
                r.delta_pp.to_string(),
            ])
            .map_err(err)?;
        }
        w.write_record(["mean".to_string(), String::new(), String::new(), self.mean_delta.to_string(), self.mean_delta_pp.to_string()])
            .map_err(err)?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

impl fmt::Display for DeltaTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.category.len()).max().unwrap_or(0).max(8);
        writeln!(f, "{} vs {} (F1 deltas in percentage points)", self.treatment, self.baseline)?;
        writeln!(f, "{:<w$}  {:>8}  {:>8}  {:>8}", "category", "baseline", "treat", "delta")?;
        for r in &self.rows {
            writeln!(f, "{:<w$}  {:>8.4}  {:>8.4}  {:>+8.2}", r.category, r.baseline, r.treatment, r.delta_pp)?;
        }
        write!(f, "{:<w$}  {:>8}  {:>8}  {:>+8.2}", "mean", "", "", self.mean_delta_pp)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn record(variant: &str, f1s: &[(&str, f64)]) -> ResultsRecord {
        let config = ExperimentConfig::from_toml_str("composition = \"FI\"\n[dataset.synth]\n", &[]).unwrap();
        let categories: Vec<CategoryResult> = f1s
            .iter()
            .map(|&(n, f)| CategoryResult {
                name: n.into(),
                f1: Some(f),
                best_epoch: Some(1),
                epochs_run: Some(7),
                error: None,
            })
            .collect();
        let mut r = ResultsRecord {
            schema_version: RESULTS_SCHEMA_VERSION,
            name: variant.into(),
            label: "synth".into(),
            variant: variant.into(),
            config,
            categories,
            mean_f1: 0.0,
            embedding_width: 512,
            finetune: None,
            hashes: ArtifactHashes { dataset: "00".into(), embeddings: None, head: None },
            wall_clock_secs: 1.5,
        };
        r.mean_f1 = r.recomputed_mean();
        r
    }

    #[test]
    fn persist_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        let r = record("FI", &[("a", 0.1 + 0.2), ("b", 1.0 / 3.0)]);
        persist_results(&r, &p).unwrap();
        assert_eq!(load_results(&p).unwrap(), r);
    }

    #[test]
    fn edited_mean_and_old_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        persist_results(&record("FI", &[("a", 0.5), ("b", 0.7)]), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, text.replace("\"mean_f1\": 0.6", "\"mean_f1\": 0.65")).unwrap();
        assert!(matches!(load_results(&p), Err(Error::Inconsistent(_))));
        std::fs::write(&p, text.replace("\"schema_version\": 1", "\"schema_version\": 0")).unwrap();
        let err = load_results(&p).unwrap_err();
        assert!(matches!(err, Error::Version { found: 0, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('0') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn deltas() {
        let a = record("FI", &[("x", 0.6), ("y", 0.8)]);
        let b = record("FI+2x2", &[("y", 0.82), ("x", 0.64)]);
        assert_eq!(a.mean_f1, 0.7);
        assert!((b.mean_f1 - 0.73).abs() < 1e-15);
        let t = compare_runs(&a, &b).unwrap();
        assert!((t.mean_delta - 0.03).abs() < 1e-12);
        assert!((t.mean_delta_pp - 3.0).abs() < 1e-9);
        let mean_of_rows = t.rows.iter().map(|r| r.delta).sum::<f64>() / 2.0;
        assert!((t.mean_delta - mean_of_rows).abs() < 1e-12);
        let same = compare_runs(&a, &a).unwrap();
        assert!(same.rows.iter().all(|r| r.delta == 0.0) && same.mean_delta == 0.0);
        let c = record("other", &[("x", 0.5), ("z", 0.5)]);
        match compare_runs(&a, &c) {
            Err(Error::Inconsistent(m)) => assert!(m.contains("y") && m.contains("z"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(t.to_csv().unwrap().lines().count() == 4);
    }
}
