//! Encoders map frames (or patches) to fixed-width embeddings.
//!
//! Two kinds exist: a seeded random-projection mock that runs in process, and
//! a file-backed store holding vectors exported from a pretrained model.
//! Both resize their input to the handle's side length first, so a patch
//! is "zoomed in" to the same resolution as a full frame.

mod cache;
mod key;
mod store;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use cache::{cached_encode, cached_encode_with, EmbeddingCache};
pub use key::{is_valid_key, EmbeddingKey, MaskSource, VariantTag};
pub use store::{
    decode_embeddings, encode_embeddings, read_embeddings, write_embeddings, EmbeddingStore,
    EMBEDDING_MAGIC, EMBEDDING_VERSION,
};

use crate::error::{Error, Result};
use crate::imaging::{to_grayscale, Frame, MIN_FRAME_SIDE};

pub const DEFAULT_WIDTH: usize = 512;
pub const DEFAULT_MOCK_SIDE: usize = 32;
/// Projection entries are drawn from `N(0, (MOCK_GAIN / side)²)`, which puts
/// typical pre-activations in the curved part of tanh.
pub const MOCK_GAIN: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn l2_distance(&self, other: &Embedding) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderKind {
    Mock { seed: u64 },
    File { path: Option<PathBuf> },
}

/// A ready-to-use encoder. Cloning is cheap; the projection matrix or the
/// loaded store is shared.
#[derive(Debug, Clone)]
pub struct EncoderHandle {
    kind: EncoderKind,
    width: usize,
    side: usize,
    /// `width × side²`, row-major, for mock handles.
    projection: Option<Arc<Vec<f64>>>,
    store: Option<Arc<EmbeddingStore>>,
}

fn check_geometry(width: usize, side: usize) -> Result<()> {
    if width < 8 {
        return Err(Error::invalid(format!("encoder width {width} is below 8")));
    }
    if side % 4 != 0 || side < MIN_FRAME_SIDE {
        return Err(Error::invalid(format!(
            "encoder input side {side} must be a multiple of 4 and at least {MIN_FRAME_SIDE}"
        )));
    }
    Ok(())
}

impl EncoderHandle {
    pub fn mock(width: usize, side: usize, seed: u64) -> Result<Self> {
        check_geometry(width, side)?;
        let inputs = side * side;
        let scale = MOCK_GAIN / side as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection: Vec<f64> = (0..width * inputs)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self {
            kind: EncoderKind::Mock { seed },
            width,
            side,
            projection: Some(Arc::new(projection)),
            store: None,
        })
    }

    pub fn from_store(store: EmbeddingStore, side: usize) -> Result<Self> {
        check_geometry(store.width(), side)?;
        Ok(Self {
            kind: EncoderKind::File {
                path: store.path().map(Path::to_path_buf),
            },
            width: store.width(),
            side,
            projection: None,
            store: Some(Arc::new(store)),
        })
    }

    pub fn open(path: &Path, side: usize) -> Result<Self> {
        Self::from_store(read_embeddings(path)?, side)
    }

    pub fn kind(&self) -> &EncoderKind {
        &self.kind
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn is_mock(&self) -> bool {
        self.projection.is_some()
    }

    pub fn store(&self) -> Option<&EmbeddingStore> {
        self.store.as_deref()
    }

    /// Short description used in result records.
    pub fn describe(&self) -> String {
        match &self.kind {
            EncoderKind::Mock { seed } => {
                format!("mock(width={}, side={}, seed={seed})", self.width, self.side)
            }
            EncoderKind::File { path } => match path {
                Some(p) => format!("file({}, width={})", p.display(), self.width),
                None => format!("file(width={})", self.width),
            },
        }
    }
}

/// Resize, grayscale, flatten, project, tanh.
pub fn mock_encode(handle: &EncoderHandle, image: &Frame) -> Result<Embedding> {
    let projection = handle.projection.as_ref().ok_or_else(|| {
        Error::Contract("mock_encode called on a file-backed encoder".into())
    })?;
    let side = handle.side;
    let resized = if image.width() == side && image.height() == side {
        image.clone()
    } else {
        image.resize(side, side)?
    };
    let gray = to_grayscale(&resized);
    let x = gray.data();
    let n = x.len();
    let values = projection
        .chunks_exact(n)
        .map(|row| {
            let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            dot.tanh() as f32
        })
        .collect();
    Ok(Embedding::new(values))
}
