//! On-disk layout: `root/episode_<k>/frame_<i>.png` plus `root/labels.csv`.
//!
//! `labels.csv` starts with a schema row `#schema,<category>=<classes>,…`,
//! then a header `episode,frame,<category>,…`, then one row per frame.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{validate_schema, Episode, EpisodeDataset, LabelSchema};
use crate::error::{Error, Result};
use crate::imaging::Frame;

pub const LABELS_FILE: &str = "labels.csv";

fn numbered_entries(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(num) = name.strip_prefix(prefix).and_then(|s| s.strip_suffix(suffix)) else {
            continue;
        };
        if let Ok(n) = num.parse::<usize>() {
            out.push((n, entry.path()));
        }
    }
    out.sort_by_key(|(n, _)| *n);
    Ok(out)
}

fn parse_schema_row(record: &csv::StringRecord) -> Result<LabelSchema> {
    if record.get(0) != Some("#schema") {
        return Err(Error::Dataset(format!(
            "{LABELS_FILE}: first row must start with #schema"
        )));
    }
    let mut categories = Vec::new();
    for field in record.iter().skip(1) {
        let (name, count) = field.split_once('=').ok_or_else(|| {
            Error::Dataset(format!("{LABELS_FILE}: malformed schema entry `{field}`"))
        })?;
        let count: usize = count.trim().parse().map_err(|_| {
            Error::Dataset(format!("{LABELS_FILE}: bad class count in `{field}`"))
        })?;
        categories.push((name.trim().to_string(), count));
    }
    LabelSchema::new(categories)
}

type LabelRows = HashMap<(usize, usize), Vec<usize>>;

fn read_labels(path: &Path) -> Result<(LabelSchema, LabelRows)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut records = reader.records();
    let next = |records: &mut csv::StringRecordsIter<'_, fs::File>| -> Result<Option<csv::StringRecord>> {
        records
            .next()
            .transpose()
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
    };
    let schema_row = next(&mut records)?
        .ok_or_else(|| Error::Dataset(format!("{}: empty labels file", path.display())))?;
    let schema = parse_schema_row(&schema_row)?;
    let header = next(&mut records)?
        .ok_or_else(|| Error::Dataset(format!("{}: missing header row", path.display())))?;
    let expected: Vec<&str> = ["episode", "frame"].into_iter().chain(schema.names()).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Dataset(format!(
            "{}: header must be `{}`",
            path.display(),
            expected.join(",")
        )));
    }
    let mut rows = HashMap::new();
    while let Some(rec) = next(&mut records)? {
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != expected.len() {
            return Err(Error::Dataset(format!(
                "{}:{line}: expected {} fields, got {}",
                path.display(),
                expected.len(),
                rec.len()
            )));
        }
        let nums: Vec<usize> = rec
            .iter()
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Dataset(format!("{}:{line}: non-integer field", path.display())))?;
        if rows.insert((nums[0], nums[1]), nums[2..].to_vec()).is_some() {
            return Err(Error::Dataset(format!(
                "{}:{line}: duplicate row for episode {} frame {}",
                path.display(),
                nums[0],
                nums[1]
            )));
        }
    }
    Ok((schema, rows))
}

/// Loads a dataset tree. Episodes and frames are ordered by their numeric
/// suffix; every frame needs a label row and labels must respect the schema.
pub fn load_dataset(root: &Path) -> Result<EpisodeDataset> {
    let (schema, mut rows) = read_labels(&root.join(LABELS_FILE))?;
    let mut episodes = Vec::new();
    for (ep_id, ep_dir) in numbered_entries(root, "episode_", "")? {
        if !ep_dir.is_dir() {
            continue;
        }
        let mut episode = Episode {
            id: ep_id,
            frame_ids: Vec::new(),
            frames: Vec::new(),
            labels: Vec::new(),
        };
        for (frame_id, path) in numbered_entries(&ep_dir, "frame_", ".png")? {
            let labels = rows.remove(&(ep_id, frame_id)).ok_or_else(|| {
                Error::Dataset(format!("no label row for frame {}", path.display()))
            })?;
            let img = image::open(&path)
                .map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            episode.frames.push(Frame::from_image(&img)?);
            episode.frame_ids.push(frame_id);
            episode.labels.push(labels);
        }
        episodes.push(episode);
    }
    if let Some(((e, f), _)) = rows.iter().min_by_key(|(k, _)| **k) {
        return Err(Error::Dataset(format!(
            "label row for episode {e} frame {f} has no image"
        )));
    }
    let ds = EpisodeDataset::new(schema, episodes)?;
    validate_schema(&ds)?;
    Ok(ds)
}

/// Writes `dataset` in the layout read by [`load_dataset`]. Pixels are
/// quantized to 8 bits.
pub fn save_dataset(dataset: &EpisodeDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let labels_path = root.join(LABELS_FILE);
    let mut writer = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(&labels_path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", labels_path.display())))?;
    let schema = dataset.schema();
    let csv_err = |e: csv::Error| Error::Dataset(format!("{}: {e}", labels_path.display()));
    let mut schema_row = vec!["#schema".to_string()];
    schema_row.extend(schema.entries().iter().map(|(n, c)| format!("{n}={c}")));
    writer.write_record(&schema_row).map_err(csv_err)?;
    let mut header = vec!["episode".to_string(), "frame".to_string()];
    header.extend(schema.names().map(str::to_string));
    writer.write_record(&header).map_err(csv_err)?;

    for ep in dataset.episodes() {
        let dir = root.join(format!("episode_{}", ep.id));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for ((fid, frame), labels) in ep.frame_ids.iter().zip(&ep.frames).zip(&ep.labels) {
            let path = dir.join(format!("frame_{fid}.png"));
            frame.to_image().save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let mut row = vec![ep.id.to_string(), fid.to_string()];
            row.extend(labels.iter().map(usize::to_string));
            writer.write_record(&row).map_err(csv_err)?;
        }
    }
    writer.flush().map_err(|e| Error::io(&labels_path, e))
}
