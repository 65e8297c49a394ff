//! Labeled episodes of frames, the train/validation/test split and a
//! synthetic moving-sprite generator.

mod io;
mod split;
mod synth;

pub use io::{load_dataset, save_dataset, LABELS_FILE};
pub use split::{make_splits, split_counts, SplitAssignment, PROBE_RATIOS};
pub use synth::{generate_synthetic, generate_synthetic_with_truth, SpriteTrack, SynthSpec};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SchemaViolation};
use crate::imaging::Frame;

/// Ordered categories with their class counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    categories: Vec<(String, usize)>,
}

impl LabelSchema {
    pub fn new(categories: Vec<(String, usize)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (name, count) in &categories {
            if name.is_empty() || name.contains(',') || name.contains('=') {
                return Err(Error::Dataset(format!("invalid category name `{name}`")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Dataset(format!("duplicate category `{name}`")));
            }
            if *count == 0 {
                return Err(Error::Dataset(format!("category `{name}` has no classes")));
            }
        }
        Ok(Self { categories })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|(n, _)| n.as_str())
    }

    pub fn class_count(&self, category: usize) -> usize {
        self.categories[category].1
    }

    pub fn name(&self, category: usize) -> &str {
        &self.categories[category].0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|(n, _)| n == name)
    }

    pub fn entries(&self) -> &[(String, usize)] {
        &self.categories
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Identifier taken from the directory name (`episode_<id>`).
    pub id: usize,
    /// Per-frame indices taken from file names (`frame_<index>.png`), ascending.
    pub frame_ids: Vec<usize>,
    pub frames: Vec<Frame>,
    /// One class index per schema category, per frame.
    pub labels: Vec<Vec<usize>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Position of a frame inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameRef {
    pub episode: usize,
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeDataset {
    schema: LabelSchema,
    episodes: Vec<Episode>,
}

impl EpisodeDataset {
    /// Checks structural consistency (label arity, frame sizes). Class ranges
    /// are checked by [`validate_schema`].
    pub fn new(schema: LabelSchema, episodes: Vec<Episode>) -> Result<Self> {
        let mut dims = None;
        for ep in &episodes {
            if ep.frames.len() != ep.labels.len() || ep.frames.len() != ep.frame_ids.len() {
                return Err(Error::Dataset(format!(
                    "episode {} has {} frames, {} ids and {} label rows",
                    ep.id,
                    ep.frames.len(),
                    ep.frame_ids.len(),
                    ep.labels.len()
                )));
            }
            for (i, (f, l)) in ep.frames.iter().zip(&ep.labels).enumerate() {
                if l.len() != schema.len() {
                    return Err(Error::Dataset(format!(
                        "episode {} frame {} has {} labels for {} categories",
                        ep.id,
                        ep.frame_ids[i],
                        l.len(),
                        schema.len()
                    )));
                }
                let d = (f.width(), f.height());
                match dims {
                    None => dims = Some(d),
                    Some(expected) if expected != d => {
                        return Err(Error::Dataset(format!(
                            "episode {} frame {} is {}x{}, expected {}x{}",
                            ep.id, ep.frame_ids[i], d.0, d.1, expected.0, expected.1
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { schema, episodes })
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn frame_count(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_count() == 0
    }

    /// All frames in episode order.
    pub fn frame_refs(&self) -> Vec<FrameRef> {
        self.episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.len()).map(move |f| FrameRef { episode: e, frame: f }))
            .collect()
    }

    pub fn frame(&self, r: FrameRef) -> &Frame {
        &self.episodes[r.episode].frames[r.frame]
    }

    /// The previous frame of the same episode, or the frame itself at the
    /// start of an episode.
    pub fn previous(&self, r: FrameRef) -> &Frame {
        let ep = &self.episodes[r.episode];
        &ep.frames[r.frame.saturating_sub(1)]
    }

    pub fn label(&self, r: FrameRef, category: usize) -> usize {
        self.episodes[r.episode].labels[r.frame][category]
    }

    /// Labels of one category, flattened in episode order.
    pub fn category_labels(&self, category: usize) -> Vec<usize> {
        self.episodes
            .iter()
            .flat_map(|ep| ep.labels.iter().map(move |l| l[category]))
            .collect()
    }

    pub fn set_label(&mut self, r: FrameRef, category: usize, class: usize) {
        self.episodes[r.episode].labels[r.frame][category] = class;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryReport {
    pub name: String,
    pub classes: usize,
    /// Frames per class.
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemaReport {
    pub frames: usize,
    pub categories: Vec<CategoryReport>,
}

/// Lists categories, class counts and label histograms, or every label that
/// falls outside its category's class range.
pub fn validate_schema(dataset: &EpisodeDataset) -> Result<SchemaReport> {
    let schema = dataset.schema();
    let mut violations = Vec::new();
    let mut histograms: Vec<Vec<usize>> = schema
        .entries()
        .iter()
        .map(|(_, c)| vec![0; *c])
        .collect();
    for ep in dataset.episodes() {
        for (fi, labels) in ep.labels.iter().enumerate() {
            for (c, &class) in labels.iter().enumerate() {
                if class >= schema.class_count(c) {
                    violations.push(SchemaViolation {
                        episode: ep.id,
                        frame: ep.frame_ids[fi],
                        category: schema.name(c).to_string(),
                        message: format!(
                            "class {class} out of range (category has {} classes)",
                            schema.class_count(c)
                        ),
                    });
                } else {
                    histograms[c][class] += 1;
                }
            }
        }
    }
    if !violations.is_empty() {
        return Err(Error::Schema(violations));
    }
    Ok(SchemaReport {
        frames: dataset.frame_count(),
        categories: schema
            .entries()
            .iter()
            .zip(histograms)
            .map(|((name, classes), histogram)| CategoryReport {
                name: name.clone(),
                classes: *classes,
                histogram,
            })
            .collect(),
    })
}

/// Counts of each category value, keyed by category name.
pub fn label_histograms(dataset: &EpisodeDataset) -> BTreeMap<String, Vec<usize>> {
    let schema = dataset.schema();
    (0..schema.len())
        .map(|c| {
            let mut h = vec![0; schema.class_count(c)];
            for l in dataset.category_labels(c) {
                if l < h.len() {
                    h[l] += 1;
                }
            }
            (schema.name(c).to_string(), h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EpisodeDataset {
        generate_synthetic(&SynthSpec {
            episodes: 2,
            frames_per_episode: 6,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn synthetic_dataset_validates() {
        let ds = tiny();
        let report = validate_schema(&ds).unwrap();
        assert_eq!(report.categories.len(), ds.schema().len());
        for cat in &report.categories {
            assert_eq!(cat.histogram.iter().sum::<usize>(), ds.frame_count());
        }
    }

    #[test]
    fn one_corrupted_label_gives_one_violation() {
        let mut ds = tiny();
        ds.set_label(FrameRef { episode: 1, frame: 3 }, 0, 99);
        match validate_schema(&ds) {
            Err(Error::Schema(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!((v[0].episode, v[0].frame), (1, 3));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn schema_rejects_duplicates() {
        assert!(LabelSchema::new(vec![("a".into(), 2), ("a".into(), 3)]).is_err());
        assert!(LabelSchema::new(vec![("a".into(), 0)]).is_err());
    }
}
