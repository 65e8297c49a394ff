//! Experiment orchestration: TOML configs, the full pipeline, results
//! records, run comparison and reports.
//!
//! A config file describes one experiment:
//!
//! ```toml
//! name = "fi-2x2"
//! seed = 0
//! output = "runs/fi-2x2"          # defaults to runs/<name>
//! composition = "FI+2x2"
//!
//! [dataset]
//! label = "synth"                 # group label in reports
//! path = "data/synth"             # or an inline [dataset.synth] table
//!
//! [encoder]
//! kind = "mock"                   # or "file" with path = "embeddings.prle"
//! width = 512
//! side = 32
//! seed = 0
//!
//! [compose]
//! normalize = false
//! flow_block = 8
//! flow_radius = 4
//! flows = "flows.prlf"            # optional imported flow
//!
//! [finetune]                      # optional
//! kind = "t-dim"                  # aug-mlp | t-dim | s-dim | st-dim | cpc
//! [finetune.hyper]
//! epochs = 10
//!
//! [probe]
//! lr = 3e-4
//! ```
//!
//! Any field can be overridden with `key.path=value` strings; values are
//! parsed as TOML and fall back to plain strings.

mod record;
mod report;
mod reprs;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use record::{compare_runs, load_results, persist_results, ArtifactHashes, DeltaRow, DeltaTable, FinetuneSummary, ResultsRecord, RESULTS_SCHEMA_VERSION};
pub use report::{
    build_report, game_abbreviation, read_reference_csv, render_report, report_csv, report_svg, ReferenceBar,
    ReportRow, ReportTable, MEAN_LABEL,
};
pub use reprs::{read_representations, write_representations};
pub use run::{dataset_hash, episode_flows, load_or_generate, open_encoder, run_experiment, sha256_hex, RESULTS_FILE};

use crate::composer::{ComposeOptions, CompositionConfig};
use crate::dataset::SynthSpec;
use crate::encoder::{DEFAULT_MOCK_SIDE, DEFAULT_WIDTH};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneHyper, HeadKind};
use crate::imaging::{DEFAULT_BLOCK, DEFAULT_RADIUS};
use crate::probe::ProbeHyper;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub composition: CompositionConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub compose: ComposeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneSpec>,
    #[serde(default)]
    pub probe: ProbeHyper,
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

impl DatasetSpec {
    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match &self.path {
            Some(p) => p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into()),
            None => "synth".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderChoice {
    Mock,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderChoice,
    pub width: usize,
    pub side: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            kind: EncoderChoice::Mock,
            width: DEFAULT_WIDTH,
            side: DEFAULT_MOCK_SIDE,
            seed: 0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposeSpec {
    pub normalize: bool,
    pub flow_block: usize,
    pub flow_radius: usize,
    /// PRLF file holding the flow of every consecutive frame pair, episodes
    /// back to back.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flows: Option<PathBuf>,
}

impl Default for ComposeSpec {
    fn default() -> Self {
        Self {
            normalize: false,
            flow_block: DEFAULT_BLOCK,
            flow_radius: DEFAULT_RADIUS,
            flows: None,
        }
    }
}

impl ComposeSpec {
    pub fn options(&self) -> ComposeOptions {
        ComposeOptions {
            normalize: self.normalize,
            flow_block: self.flow_block,
            flow_radius: self.flow_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSpec {
    pub kind: HeadKind,
    #[serde(default)]
    pub hyper: FinetuneHyper,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.path, &self.dataset.synth) {
            (Some(_), Some(_)) => return Err(Error::Config("dataset: give either `path` or `synth`, not both".into())),
            (None, None) => return Err(Error::Config("dataset: one of `path` or `synth` is required".into())),
            (None, Some(s)) => s.validate()?,
            _ => {}
        }
        if self.encoder.kind == EncoderChoice::File && self.encoder.path.is_none() {
            return Err(Error::Config("encoder: kind \"file\" needs `path`".into()));
        }
        self.probe.validate()?;
        if let Some(f) = &self.finetune {
            f.hyper.validate()?;
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| Path::new("runs").join(&self.name))
    }

    /// Parses TOML text and applies `key.path=value` overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// `base` with `key=value` overrides applied, for any table-shaped settings
/// struct (probe or finetune hyperparameters).
pub fn with_overrides<T: Serialize + serde::de::DeserializeOwned>(base: &T, overrides: &[String]) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

/// Sets `key.path=value` inside `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{spec}`: `{k}` is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        composition = "FI+2x2"
        [dataset.synth]
        episodes = 2
    "#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL, &[]).unwrap();
        assert_eq!(c.composition.to_string(), "FI+2x2");
        assert_eq!(c.encoder.width, 512);
        assert_eq!(c.probe, ProbeHyper::default());
        assert_eq!(c.output_dir(), Path::new("runs/experiment"));
        assert_eq!(c.dataset.label(), "synth");
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = ExperimentConfig::from_toml_str(
            MINIMAL,
            &[
                "probe.lr=0.01".into(),
                "composition=FI".into(),
                "finetune.kind=t-dim".into(),
                "finetune.hyper.epochs=3".into(),
                "dataset.label=Pong".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.probe.lr, 0.01);
        assert_eq!(c.composition.to_string(), "FI");
        let f = c.finetune.unwrap();
        assert_eq!(f.kind.name(), "t-dim");
        assert_eq!(f.hyper.epochs, 3);
        assert_eq!(c.dataset.label.as_deref(), Some("Pong"));
    }

    #[test]
    fn bad_configs_are_rejected() {
        for (text, o) in [
            (MINIMAL, "probe.nope=1"),
            (MINIMAL, "composition=FI+3x3"),
            (MINIMAL, "dataset.path=somewhere"),
            (MINIMAL, "encoder.kind=file"),
            (MINIMAL, "probe"),
            (MINIMAL, "composition.x=1"),
            ("composition = \"FI\"\n[dataset]\n", "seed=1"),
        ] {
            assert!(ExperimentConfig::from_toml_str(text, &[o.to_string()]).is_err(), "{o}");
        }
    }

    #[test]
    fn hyper_overrides() {
        let h = with_overrides(&FinetuneHyper::default(), &["epochs=2".into(), "augmentations=[\"blur\"]".into()]).unwrap();
        assert_eq!(h.epochs, 2);
        assert_eq!(h.augmentations, vec![crate::imaging::Augmentation::Blur]);
        assert!(with_overrides(&ProbeHyper::default(), &["bogus=1".into()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::from_toml_str(MINIMAL, &["finetune.kind=cpc".into()]).unwrap();
        let text = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text, &[]).unwrap(), c);
    }
}
