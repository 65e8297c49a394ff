//! Composed representations on disk: a PRLE file with one
//! `<episode>/<frame>/repr:<tag>` record per frame.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::dataset::EpisodeDataset;
use crate::encoder::{read_embeddings, write_embeddings, Embedding, EmbeddingKey, VariantTag};
use crate::error::{Error, Result};

/// Writes row `i` of `x` under the key of the `i`-th frame of `dataset`.
pub fn write_representations(path: &Path, dataset: &EpisodeDataset, tag: &str, x: &Tensor) -> Result<()> {
    if x.rows() != dataset.frame_count() {
        return Err(Error::dim(format!("{} rows for {} frames", x.rows(), dataset.frame_count())));
    }
    let mut entries = Vec::with_capacity(x.rows());
    for (i, r) in dataset.frame_refs().into_iter().enumerate() {
        let ep = &dataset.episodes()[r.episode];
        let key = EmbeddingKey::new(ep.id, ep.frame_ids[r.frame], VariantTag::Repr(tag.to_string()));
        entries.push((key, Embedding::new(x.row(i).iter().map(|&v| v as f32).collect())));
    }
    write_embeddings(path, x.cols(), &entries)
}

/// Reads the representation rows of every frame of `dataset`, in episode
/// order, and returns them with their tag. All records must share one tag.
pub fn read_representations(path: &Path, dataset: &EpisodeDataset) -> Result<(String, Tensor)> {
    let store = read_embeddings(path)?;
    let mut tag = None;
    for (k, _) in store.entries() {
        match (&k.tag, &tag) {
            (VariantTag::Repr(t), None) => tag = Some(t.clone()),
            (VariantTag::Repr(t), Some(seen)) if t == seen => {}
            _ => {
                return Err(Error::Format(format!(
                    "{}: expected representation records of a single tag, found `{k}`",
                    path.display()
                )))
            }
        }
    }
    let tag = tag.ok_or_else(|| Error::Format(format!("{}: no representation records", path.display())))?;
    let mut data = Vec::with_capacity(dataset.frame_count() * store.width());
    for r in dataset.frame_refs() {
        let ep = &dataset.episodes()[r.episode];
        let key = EmbeddingKey::new(ep.id, ep.frame_ids[r.frame], VariantTag::Repr(tag.clone()));
        let e = store.get(&key).ok_or_else(|| Error::MissingEmbedding(key.to_string()))?;
        data.extend(e.values().iter().map(|&v| v as f64));
    }
    let x = Tensor::new(&[dataset.frame_count(), store.width()], data)?;
    Ok((tag, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthSpec};

    #[test]
    fn round_trip_through_f32() {
        let ds = generate_synthetic(&SynthSpec { episodes: 2, frames_per_episode: 3, ..SynthSpec::default() }).unwrap();
        let x = Tensor::new(&[6, 2], vec![0.5, -1.0, 2.0, 0.25, 1.0, 0.0, 3.0, 4.0, -2.5, 8.0, 0.125, 1.5]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.prle");
        write_representations(&p, &ds, "FI+2x2", &x).unwrap();
        let (tag, back) = read_representations(&p, &ds).unwrap();
        assert_eq!(tag, "FI+2x2");
        assert_eq!(back, x);
        let bigger = generate_synthetic(&SynthSpec { episodes: 3, frames_per_episode: 3, ..SynthSpec::default() }).unwrap();
        assert!(matches!(read_representations(&p, &bigger), Err(Error::MissingEmbedding(_))));
    }
}
