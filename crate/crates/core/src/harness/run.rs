use std::path::Path;
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::record::{persist_results, ArtifactHashes, FinetuneSummary, ResultsRecord, RESULTS_SCHEMA_VERSION};
use super::{DatasetSpec, EncoderChoice, EncoderSpec, ExperimentConfig};
use crate::autodiff::Tensor;
use crate::composer::compose_dataset;
use crate::dataset::{generate_synthetic, load_dataset, make_splits, validate_schema, EpisodeDataset, PROBE_RATIOS};
use crate::encoder::{encode_embeddings, EmbeddingCache, EncoderHandle};
use crate::error::{Error, Result};
use crate::finetune::{
    apply_head, aug_views, encode_head, train_aug_head, train_cpc_head, train_dim_head, unit_roles, HeadKind,
    UnitTable,
};
use crate::imaging::{read_flows, FlowField};
use crate::probe::probe_suite;

pub const RESULTS_FILE: &str = "results.json";
const EMBEDDINGS_FILE: &str = "embeddings.prle";
const HEAD_FILE: &str = "head.prlh";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the dataset content: schema, ids, pixels and labels.
pub fn dataset_hash(dataset: &EpisodeDataset) -> String {
    let mut h = Sha256::new();
    let put = |h: &mut Sha256, n: usize| h.update((n as u64).to_le_bytes());
    for (name, classes) in dataset.schema().entries() {
        put(&mut h, name.len());
        h.update(name.as_bytes());
        put(&mut h, *classes);
    }
    for ep in dataset.episodes() {
        put(&mut h, ep.id);
        put(&mut h, ep.len());
        for ((id, frame), labels) in ep.frame_ids.iter().zip(&ep.frames).zip(&ep.labels) {
            put(&mut h, *id);
            put(&mut h, frame.width());
            put(&mut h, frame.height());
            for v in frame.data() {
                h.update(v.to_le_bytes());
            }
            for &l in labels {
                put(&mut h, l);
            }
        }
    }
    hex::encode(h.finalize())
}

pub fn load_or_generate(spec: &DatasetSpec) -> Result<EpisodeDataset> {
    let ds = match (&spec.path, &spec.synth) {
        (Some(p), None) => load_dataset(p)?,
        (None, Some(s)) => generate_synthetic(s)?,
        _ => return Err(Error::Config("dataset: give exactly one of `path` or `synth`".into())),
    };
    validate_schema(&ds)?;
    Ok(ds)
}

pub fn open_encoder(spec: &EncoderSpec) -> Result<EncoderHandle> {
    match spec.kind {
        EncoderChoice::Mock => EncoderHandle::mock(spec.width, spec.side, spec.seed),
        EncoderChoice::File => {
            let path = spec.path.as_ref().ok_or_else(|| Error::Config("encoder: kind \"file\" needs `path`".into()))?;
            let handle = EncoderHandle::open(path, spec.side)?;
            if handle.width() != spec.width {
                return Err(Error::Config(format!(
                    "encoder: {} holds width {} but the config says {}",
                    path.display(),
                    handle.width(),
                    spec.width
                )));
            }
            Ok(handle)
        }
    }
}

/// Splits a flat flow list (every consecutive pair, episodes back to back)
/// into per-episode sequences.
pub fn episode_flows(dataset: &EpisodeDataset, flows: Vec<FlowField>) -> Result<Vec<Vec<FlowField>>> {
    let needed: usize = dataset.episodes().iter().map(|e| e.len().saturating_sub(1)).sum();
    if flows.len() != needed {
        return Err(Error::dim(format!(
            "{} flow fields for a dataset with {needed} consecutive frame pairs",
            flows.len()
        )));
    }
    let mut it = flows.into_iter();
    Ok(dataset
        .episodes()
        .iter()
        .map(|e| it.by_ref().take(e.len().saturating_sub(1)).collect())
        .collect())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Runs dataset → compose → (finetune) → probe and writes `results.json`,
/// the embedding cache and the head (if any) under the output directory.
/// Errors carry the stage they came from.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultsRecord> {
    let started = Instant::now();
    config.validate().map_err(|e| e.in_stage("config"))?;
    let out = config.output_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e).in_stage("output"))?;

    let dataset = load_or_generate(&config.dataset).map_err(|e| e.in_stage("dataset"))?;
    let encoder = open_encoder(&config.encoder).map_err(|e| e.in_stage("encode"))?;
    let cache = EmbeddingCache::new();

    let x = (|| {
        let flows = match &config.compose.flows {
            Some(p) => Some(episode_flows(&dataset, read_flows(p)?)?),
            None => None,
        };
        let rows = compose_dataset(
            &config.composition,
            &dataset,
            &encoder,
            &cache,
            &config.compose.options(),
            flows.as_deref(),
        )?;
        Tensor::new(&[rows.len(), config.composition.dimension(encoder.width())], rows.concat())
    })()
    .map_err(|e| e.in_stage("compose"))?;

    let mut x = x;
    let mut head_hash = None;
    let mut finetune = None;
    if let Some(spec) = &config.finetune {
        let (trained, bytes) = (|| {
            let trained = match spec.kind {
                HeadKind::AugMlp => {
                    let views = aug_views(&dataset, &encoder, &cache, &spec.hyper.augmentations, spec.hyper.views)?;
                    train_aug_head(&views, &spec.hyper, config.seed)?
                }
                kind => {
                    let mut ranges = Vec::new();
                    let mut start = 0;
                    for ep in dataset.episodes() {
                        ranges.push(start..start + ep.len());
                        start += ep.len();
                    }
                    let table = UnitTable::new(encoder.width(), unit_roles(&config.composition), x.clone(), ranges)?;
                    match kind {
                        HeadKind::Dim(mode) => train_dim_head(&table, mode, &spec.hyper, config.seed)?,
                        _ => train_cpc_head(&table, &spec.hyper, config.seed)?,
                    }
                }
            };
            let bytes = encode_head(&trained.head)?;
            Ok::<_, Error>((trained, bytes))
        })()
        .map_err(|e| e.in_stage("finetune"))?;
        x = apply_head(&trained.head, &x).map_err(|e| e.in_stage("finetune"))?;
        write(&out.join(HEAD_FILE), &bytes).map_err(|e| e.in_stage("output"))?;
        head_hash = Some(sha256_hex(&bytes));
        finetune = Some(FinetuneSummary {
            kind: spec.kind,
            steps: trained.losses.len(),
            initial_loss: trained.initial_loss(),
            final_loss: trained.final_loss(),
        });
    }

    let embeddings_hash = (|| {
        Ok::<_, Error>(match &config.encoder.path {
            Some(p) if config.encoder.kind == EncoderChoice::File => {
                Some(sha256_hex(&std::fs::read(p).map_err(|e| Error::io(p, e))?))
            }
            _ => {
                let bytes = encode_embeddings(encoder.width(), &cache.entries())?;
                write(&out.join(EMBEDDINGS_FILE), &bytes)?;
                Some(sha256_hex(&bytes))
            }
        })
    })()
    .map_err(|e| e.in_stage("output"))?;

    let report = (|| {
        let split = make_splits(dataset.frame_count(), PROBE_RATIOS, config.seed)?;
        probe_suite(&dataset, &x, &split, &config.probe, config.seed)
    })()
    .map_err(|e| e.in_stage("probe"))?;

    let variant = match &config.finetune {
        Some(f) => format!("{}/{}", config.composition, f.kind),
        None => config.composition.to_string(),
    };
    let record = ResultsRecord {
        schema_version: RESULTS_SCHEMA_VERSION,
        name: config.name.clone(),
        label: config.dataset.label(),
        variant,
        config: config.clone(),
        categories: report.categories,
        mean_f1: report.mean_f1,
        embedding_width: x.cols(),
        finetune,
        hashes: ArtifactHashes { dataset: dataset_hash(&dataset), embeddings: embeddings_hash, head: head_hash },
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    persist_results(&record, &out.join(RESULTS_FILE)).map_err(|e| e.in_stage("output"))?;
    Ok(record)
}
