//! Composition expressions and representation assembly.
//!
//! ```text
//! config := unit ("+" unit)*
//! unit   := "FI" | "1x1" | "2x2" | "4x4"
//!         | "FM" | "DM"              masked frame (flow / difference)
//!         | "FM+" | "DM+"            masked frame followed by the full frame
//!         | "FP" n | "DP" n          full frame plus the n-1 best patches
//! ```
//!
//! `FM+` is only read as the "plus" variant when the `+` ends the string or
//! is followed by another `+`, so `FM+FI` is a masked frame then a full frame.

use std::cell::OnceCell;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attention::{apply_mask, diff_mask, flow_mask, mask_from_flow, score_patches, select_top_k};
use crate::attention::{AttentionMask, FlowSource, MaskOrigin};
use crate::dataset::EpisodeDataset;
use crate::encoder::{cached_encode_with, EmbeddingCache, EmbeddingKey, EncoderHandle, MaskSource, VariantTag};
use crate::error::{Error, Result};
use crate::imaging::{FlowField, Frame, DEFAULT_BLOCK, DEFAULT_RADIUS};

/// Every frame is resized to this square before patching or masking.
pub const CANONICAL_SIDE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Unit {
    Full,
    Grid(usize),
    Mask(MaskSource),
    MaskPlus(MaskSource),
    TopK { source: MaskSource, k: usize },
}

impl Unit {
    /// Number of embeddings this unit contributes.
    pub fn count(self) -> usize {
        match self {
            Unit::Full | Unit::Mask(_) => 1,
            Unit::Grid(n) => n * n,
            Unit::MaskPlus(_) => 2,
            Unit::TopK { k, .. } => k + 1,
        }
    }
}

fn mask_letter(src: MaskSource) -> char {
    match src {
        MaskSource::Flow => 'F',
        MaskSource::Diff => 'D',
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Unit::Full => f.write_str("FI"),
            Unit::Grid(n) => write!(f, "{n}x{n}"),
            Unit::Mask(s) => write!(f, "{}M", mask_letter(s)),
            Unit::MaskPlus(s) => write!(f, "{}M+", mask_letter(s)),
            Unit::TopK { source, k } => write!(f, "{}P{}", mask_letter(source), k + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CompositionConfig {
    units: Vec<Unit>,
}

impl CompositionConfig {
    pub fn new(units: Vec<Unit>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::Config("composition needs at least one unit".into()));
        }
        for u in &units {
            match *u {
                Unit::Grid(n) if ![2, 4].contains(&n) => {
                    return Err(Error::Config(format!("unsupported grid {n}x{n}")))
                }
                Unit::TopK { k: 0, .. } => return Err(Error::Config("top-k needs k >= 1".into())),
                _ => {}
            }
        }
        Ok(Self { units })
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn unit_count(&self) -> usize {
        self.units.iter().map(|u| u.count()).sum()
    }

    /// Length of the composed vector for an encoder of `width`.
    pub fn dimension(&self, width: usize) -> usize {
        self.unit_count() * width
    }

    pub fn uses_masks(&self) -> bool {
        self.units
            .iter()
            .any(|u| matches!(u, Unit::Mask(_) | Unit::MaskPlus(_) | Unit::TopK { .. }))
    }

    pub fn uses_flow(&self) -> bool {
        self.units.iter().any(|u| {
            matches!(
                u,
                Unit::Mask(MaskSource::Flow)
                    | Unit::MaskPlus(MaskSource::Flow)
                    | Unit::TopK { source: MaskSource::Flow, .. }
            )
        })
    }
}

impl fmt::Display for CompositionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.units.iter().map(Unit::to_string).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for CompositionConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_config(s)
    }
}

impl Serialize for CompositionConfig {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CompositionConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_config(&s).map_err(serde::de::Error::custom)
    }
}

pub fn parse_config(text: &str) -> Result<CompositionConfig> {
    let b = text.as_bytes();
    let err = |position: usize, message: String| Error::Parse { position, message };
    let mut units = Vec::new();
    let mut i = 0;
    loop {
        if i >= b.len() {
            return Err(err(i, "expected a unit".into()));
        }
        let start = i;
        let unit = match b[i] {
            b'F' | b'D' if i + 1 < b.len() => {
                let src = if b[i] == b'F' { MaskSource::Flow } else { MaskSource::Diff };
                match b[i + 1] {
                    b'I' if b[i] == b'F' => {
                        i += 2;
                        Unit::Full
                    }
                    b'M' => {
                        i += 2;
                        let plus_follows = b.get(i) == Some(&b'+')
                            && (i + 1 == b.len() || b[i + 1] == b'+');
                        if plus_follows {
                            i += 1;
                            Unit::MaskPlus(src)
                        } else {
                            Unit::Mask(src)
                        }
                    }
                    b'P' => {
                        i += 2;
                        let digits = i;
                        while i < b.len() && b[i].is_ascii_digit() {
                            i += 1;
                        }
                        let n: usize = text[digits..i]
                            .parse()
                            .map_err(|_| err(digits, "expected a patch count after P".into()))?;
                        if n < 2 {
                            return Err(err(digits, format!("patch count {n} must be at least 2")));
                        }
                        Unit::TopK { source: src, k: n - 1 }
                    }
                    _ => return Err(err(start, format!("unknown unit starting `{}`", &text[start..]))),
                }
            }
            c if c.is_ascii_digit() => {
                let a = i;
                while i < b.len() && b[i].is_ascii_digit() {
                    i += 1;
                }
                if b.get(i) != Some(&b'x') {
                    return Err(err(i, "expected `x` in grid size".into()));
                }
                i += 1;
                let m = i;
                while i < b.len() && b[i].is_ascii_digit() {
                    i += 1;
                }
                let (n1, n2) = (&text[a..m - 1], &text[m..i]);
                if n1 != n2 || !["1", "2", "4"].contains(&n1) {
                    return Err(err(start, format!("unsupported grid `{}`", &text[start..i])));
                }
                match n1 {
                    "1" => Unit::Full,
                    n => Unit::Grid(n.parse().unwrap()),
                }
            }
            _ => {
                let tail: String = text[start..].chars().take(8).collect();
                return Err(err(start, format!("unknown unit starting `{tail}`")));
            }
        };
        units.push(unit);
        if i == b.len() {
            break;
        }
        if b[i] != b'+' {
            return Err(err(i, format!("expected `+`, found `{}`", &text[i..])));
        }
        i += 1;
    }
    CompositionConfig::new(units)
}

/// Row-major `n × n` tiling.
pub fn grid_patches(frame: &Frame, n: usize) -> Result<Vec<Frame>> {
    if n == 0 || frame.width() % n != 0 || frame.height() % n != 0 {
        return Err(Error::dim(format!(
            "{}x{} frame does not split into a {n}x{n} grid",
            frame.width(),
            frame.height()
        )));
    }
    let (w, h) = (frame.width() / n, frame.height() / n);
    (0..n * n)
        .map(|c| frame.crop((c % n) * w, (c / n) * h, w, h))
        .collect()
}

/// Inverse of [`grid_patches`].
pub fn assemble_grid(patches: &[Frame], n: usize) -> Result<Frame> {
    if n == 0 || patches.len() != n * n {
        return Err(Error::dim(format!("{} patches for a {n}x{n} grid", patches.len())));
    }
    let (w, h) = (patches[0].width(), patches[0].height());
    if patches.iter().any(|p| p.width() != w || p.height() != h) {
        return Err(Error::dim("grid patches differ in size"));
    }
    let (fw, fh) = (w * n, h * n);
    let mut data = vec![0.0; fw * fh * 3];
    for (c, p) in patches.iter().enumerate() {
        let (x0, y0) = ((c % n) * w, (c / n) * h);
        for y in 0..h {
            let dst = ((y0 + y) * fw + x0) * 3;
            data[dst..dst + w * 3].copy_from_slice(&p.data()[y * w * 3..(y + 1) * w * 3]);
        }
    }
    Frame::new(fw, fh, data)
}

/// Slice of the composed vector owned by one embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub unit: String,
    pub tag: String,
    pub start: usize,
    pub len: usize,
}

impl LayoutEntry {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedRepresentation {
    pub vector: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposeOptions {
    /// L2-normalize each embedding before concatenation.
    pub normalize: bool,
    pub flow_block: usize,
    pub flow_radius: usize,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        Self {
            normalize: false,
            flow_block: DEFAULT_BLOCK,
            flow_radius: DEFAULT_RADIUS,
        }
    }
}

/// One frame to compose, with its predecessor and optional imported flow.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub episode: usize,
    pub frame: usize,
    pub prev: &'a Frame,
    pub curr: &'a Frame,
    pub flow: Option<&'a FlowField>,
}

/// `frame` resized to `CANONICAL_SIDE × CANONICAL_SIDE`.
pub fn canonical_frame(frame: &Frame) -> Result<Frame> {
    if frame.width() == CANONICAL_SIDE && frame.height() == CANONICAL_SIDE {
        Ok(frame.clone())
    } else {
        frame.resize(CANONICAL_SIDE, CANONICAL_SIDE)
    }
}

/// Canonical frames and masks, built on first use.
struct Lazy<'a> {
    input: &'a FrameInput<'a>,
    opts: &'a ComposeOptions,
    prev: OnceCell<Frame>,
    curr: OnceCell<Frame>,
    diff: OnceCell<AttentionMask>,
    flow: OnceCell<AttentionMask>,
}

impl<'a> Lazy<'a> {
    fn curr(&self) -> Result<&Frame> {
        if self.curr.get().is_none() {
            let _ = self.curr.set(canonical_frame(self.input.curr)?);
        }
        Ok(self.curr.get().unwrap())
    }

    fn prev(&self) -> Result<&Frame> {
        if self.prev.get().is_none() {
            let _ = self.prev.set(canonical_frame(self.input.prev)?);
        }
        Ok(self.prev.get().unwrap())
    }

    fn mask(&self, src: MaskSource) -> Result<&AttentionMask> {
        let cell = match src {
            MaskSource::Diff => &self.diff,
            MaskSource::Flow => &self.flow,
        };
        if cell.get().is_none() {
            let m = match (src, self.input.flow) {
                (MaskSource::Diff, _) => diff_mask(self.prev()?, self.curr()?)?,
                (MaskSource::Flow, Some(f)) => {
                    mask_from_flow(f, CANONICAL_SIDE, CANONICAL_SIDE, MaskOrigin::Imported)?
                }
                (MaskSource::Flow, None) => flow_mask(
                    self.prev()?,
                    self.curr()?,
                    &FlowSource::BlockMatch {
                        block: self.opts.flow_block,
                        radius: self.opts.flow_radius,
                    },
                )?,
            };
            let _ = cell.set(m);
        }
        Ok(cell.get().unwrap())
    }
}

/// Builds the representation of `input.curr` described by `config`.
pub fn compose(
    config: &CompositionConfig,
    input: &FrameInput<'_>,
    encoder: &EncoderHandle,
    cache: &EmbeddingCache,
    opts: &ComposeOptions,
) -> Result<ComposedRepresentation> {
    let lazy = Lazy {
        input,
        opts,
        prev: OnceCell::new(),
        curr: OnceCell::new(),
        diff: OnceCell::new(),
        flow: OnceCell::new(),
    };
    let width = encoder.width();
    let mut vector = Vec::with_capacity(config.dimension(width));
    let mut layout = Vec::with_capacity(config.unit_count());

    let mut push = |unit: &Unit, tag: VariantTag, image: &dyn Fn() -> Result<Frame>| -> Result<()> {
        let key = EmbeddingKey::new(input.episode, input.frame, tag);
        let e = cached_encode_with(encoder, cache, &key, image)?;
        let start = vector.len();
        let values = e.to_f64();
        if opts.normalize {
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = if norm > 0.0 { norm } else { 1.0 };
            vector.extend(values.iter().map(|v| v / d));
        } else {
            vector.extend(values);
        }
        layout.push(LayoutEntry {
            unit: unit.to_string(),
            tag: key.tag.to_string(),
            start,
            len: width,
        });
        Ok(())
    };

    let full = || lazy.curr().cloned();
    for unit in config.units() {
        match *unit {
            Unit::Full => push(unit, VariantTag::Full, &full)?,
            Unit::Grid(n) => {
                for cell in 0..n * n {
                    push(unit, VariantTag::Grid { n, cell }, &|| {
                        let (x, y, w, h) = crate::attention::cell_rect(CANONICAL_SIDE, CANONICAL_SIDE, n, cell);
                        lazy.curr()?.crop(x, y, w, h)
                    })?;
                }
            }
            Unit::Mask(src) | Unit::MaskPlus(src) => {
                push(unit, VariantTag::Masked(src), &|| apply_mask(lazy.curr()?, lazy.mask(src)?))?;
                if matches!(unit, Unit::MaskPlus(_)) {
                    push(unit, VariantTag::Full, &full)?;
                }
            }
            Unit::TopK { source, k } => {
                push(unit, VariantTag::Full, &full)?;
                let picked = select_top_k(&score_patches(lazy.mask(source)?)?, k)?;
                for p in picked {
                    push(unit, VariantTag::Grid { n: p.grid, cell: p.cell }, &|| {
                        lazy.curr()?.crop(p.x, p.y, p.w, p.h)
                    })?;
                }
            }
        }
    }
    Ok(ComposedRepresentation { vector, layout })
}

/// Composes every frame of `dataset` in episode order, in parallel.
/// `flows[e][t]` is the imported flow from frame `t` to `t + 1` of episode
/// `e`; the first frame of each episode uses a zero mask.
pub fn compose_dataset(
    config: &CompositionConfig,
    dataset: &EpisodeDataset,
    encoder: &EncoderHandle,
    cache: &EmbeddingCache,
    opts: &ComposeOptions,
    flows: Option<&[Vec<FlowField>]>,
) -> Result<Vec<Vec<f64>>> {
    if let Some(flows) = flows {
        if flows.len() != dataset.episodes().len() {
            return Err(Error::dim(format!(
                "{} flow sequences for {} episodes",
                flows.len(),
                dataset.episodes().len()
            )));
        }
        for (ep, f) in dataset.episodes().iter().zip(flows) {
            if f.len() + 1 < ep.len() {
                return Err(Error::dim(format!(
                    "episode {} has {} frames but only {} flow fields",
                    ep.id,
                    ep.len(),
                    f.len()
                )));
            }
        }
    }
    let zero = FlowField::zeros(1, 1);
    dataset
        .frame_refs()
        .par_iter()
        .map(|&r| {
            let ep = &dataset.episodes()[r.episode];
            let flow = flows.map(|f| match r.frame {
                0 => &zero,
                t => &f[r.episode][t - 1],
            });
            let input = FrameInput {
                episode: ep.id,
                frame: ep.frame_ids[r.frame],
                prev: dataset.previous(r),
                curr: dataset.frame(r),
                flow,
            };
            compose(config, &input, encoder, cache, opts).map(|c| c.vector)
        })
        .collect()
}
