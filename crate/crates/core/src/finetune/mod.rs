//! Contrastive heads trained on frozen embeddings.
//!
//! Three kinds share one InfoNCE core: an augmentation MLP, a bilinear
//! DIM head (temporal, spatial or spatio-temporal contrast) and a CPC head
//! (linear encoder, GRU context, per-step predictors). Training data is a
//! [`UnitTable`]: the composed representation of every frame, split into
//! the embeddings of its units.

mod aug;
mod cpc;
mod dim;
mod headfile;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use aug::{aug_view_seed, aug_views, train_aug_head};
pub use cpc::{cpc_loss, cpc_param_names, gru_step, train_cpc_head, GruVars};
pub use dim::{train_dim_head, DimMode};
pub use headfile::{decode_head, encode_head, read_head, write_head, HEAD_MAGIC, HEAD_VERSION};

use crate::autodiff::{Graph, Tensor, Var};
use crate::composer::{compose_dataset, ComposeOptions, CompositionConfig, Unit};
use crate::dataset::EpisodeDataset;
use crate::encoder::{EmbeddingCache, EncoderHandle};
use crate::error::{Error, Result};
use crate::imaging::Augmentation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Temperature of the cosine scores used by the augmentation head.
    pub temperature: f64,
    pub mlp_hidden: usize,
    pub mlp_out: usize,
    pub dim_proj: usize,
    pub cpc_latent: usize,
    pub gru_hidden: usize,
    pub context: usize,
    pub steps: usize,
    /// Augmented views encoded per frame; each step contrasts two of them.
    pub views: usize,
    pub augmentations: Vec<Augmentation>,
}

impl Default for FinetuneHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            epochs: 10,
            temperature: 0.1,
            mlp_hidden: 256,
            mlp_out: 128,
            dim_proj: 128,
            cpc_latent: 256,
            gru_hidden: 256,
            context: 8,
            steps: 3,
            views: 2,
            augmentations: vec![Augmentation::Crop, Augmentation::Jitter, Augmentation::Blur],
        }
    }
}

impl FinetuneHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("finetune: {m}")));
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2 (negatives come from the batch)");
        }
        if self.epochs == 0 || self.steps == 0 || self.context == 0 {
            return bad("epochs, steps and context must be positive");
        }
        if [self.mlp_hidden, self.mlp_out, self.dim_proj, self.cpc_latent, self.gru_hidden]
            .contains(&0)
        {
            return bad("layer widths must be positive");
        }
        if self.views < 2 {
            return bad("at least two augmented views are needed");
        }
        if self.augmentations.is_empty() {
            return bad("augmentation list is empty");
        }
        Ok(())
    }
}

/// Head kind, written as `aug-mlp`, `t-dim`, `s-dim`, `st-dim` or `cpc`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum HeadKind {
    AugMlp,
    Dim(DimMode),
    Cpc,
}

impl HeadKind {
    pub fn tag(self) -> u8 {
        match self {
            HeadKind::AugMlp => 0,
            HeadKind::Dim(DimMode::Temporal) => 1,
            HeadKind::Dim(DimMode::Spatial) => 2,
            HeadKind::Dim(DimMode::SpatioTemporal) => 3,
            HeadKind::Cpc => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => HeadKind::AugMlp,
            1 => HeadKind::Dim(DimMode::Temporal),
            2 => HeadKind::Dim(DimMode::Spatial),
            3 => HeadKind::Dim(DimMode::SpatioTemporal),
            4 => HeadKind::Cpc,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::AugMlp => "aug-mlp",
            HeadKind::Dim(DimMode::Temporal) => "t-dim",
            HeadKind::Dim(DimMode::Spatial) => "s-dim",
            HeadKind::Dim(DimMode::SpatioTemporal) => "st-dim",
            HeadKind::Cpc => "cpc",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        (0..5)
            .filter_map(HeadKind::from_tag)
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown head kind `{s}` (expected aug-mlp, t-dim, s-dim, st-dim or cpc)")))
    }
}

impl TryFrom<String> for HeadKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<HeadKind> for String {
    fn from(k: HeadKind) -> String {
        k.name().to_string()
    }
}

/// A trained head: named parameter tensors plus what is needed to apply it.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveHead {
    pub kind: HeadKind,
    pub in_width: usize,
    pub temperature: f64,
    pub hyper: FinetuneHyper,
    pub params: Vec<(String, Tensor)>,
}

impl ContrastiveHead {
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Inconsistent(format!("{} head has no `{name}` tensor", self.kind.name())))
    }

    /// Width of the per-unit output of [`apply_head`].
    pub fn out_width(&self) -> usize {
        match self.kind {
            HeadKind::AugMlp => self.hyper.mlp_out,
            HeadKind::Dim(_) => self.hyper.dim_proj,
            HeadKind::Cpc => self.hyper.cpc_latent,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Inconsistent("head temperature must be positive".into()));
        }
        for (name, t) in &self.params {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Inconsistent(format!("head tensor `{name}` is not finite")));
            }
        }
        let (w, b) = self.projection_names();
        let (w, b) = (self.param(w)?, self.param(b)?);
        if w.shape().len() != 2 || w.rows() != self.in_width || b.len() != w.cols() {
            return Err(Error::Inconsistent(format!(
                "{} head projection {:?} does not match input width {}",
                self.kind.name(),
                w.shape(),
                self.in_width
            )));
        }
        Ok(())
    }

    fn projection_names(&self) -> (&'static str, &'static str) {
        match self.kind {
            HeadKind::AugMlp => ("w1", "b1"),
            HeadKind::Dim(_) => ("phi_w", "phi_b"),
            HeadKind::Cpc => ("enc_w", "enc_b"),
        }
    }
}

/// Head output plus the per-step training losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub head: ContrastiveHead,
    pub losses: Vec<f64>,
    pub steps_per_epoch: usize,
}

impl TrainedHead {
    /// Mean loss over the last epoch.
    pub fn final_loss(&self) -> f64 {
        let n = self.steps_per_epoch.min(self.losses.len()).max(1);
        let tail = &self.losses[self.losses.len() - n..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }
}

/// `mean_i −log softmax(S_i / τ)_i` for a square score matrix.
pub fn infonce(scores: &Tensor, temperature: f64) -> Result<f64> {
    check_square(scores, temperature)?;
    let mut g = Graph::new();
    let s = g.input(scores.clone());
    let l = infonce_var(&mut g, s, temperature)?;
    Ok(g.value(l).item())
}

fn check_square(scores: &Tensor, temperature: f64) -> Result<()> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be positive")));
    }
    if scores.shape().len() != 2 || scores.rows() != scores.cols() || scores.rows() == 0 {
        return Err(Error::dim(format!("InfoNCE needs a square score matrix, got {:?}", scores.shape())));
    }
    Ok(())
}

/// Graph form of [`infonce`].
pub fn infonce_var(g: &mut Graph, scores: Var, temperature: f64) -> Result<Var> {
    check_square(g.value(scores), temperature)?;
    let n = g.value(scores).rows();
    let scaled = if temperature == 1.0 { scores } else { g.scale(scores, 1.0 / temperature) };
    let targets: Vec<usize> = (0..n).collect();
    g.softmax_cross_entropy(scaled, &targets)
}

/// What a unit slice of a composed representation shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitRole {
    Full,
    Patch,
    Masked,
}

/// Composed representations of a dataset, viewed per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitTable {
    pub width: usize,
    pub roles: Vec<UnitRole>,
    /// `[frames, roles.len() * width]`
    pub data: Tensor,
    /// Row ranges of each episode, in order.
    pub episodes: Vec<Range<usize>>,
}

pub fn unit_roles(config: &CompositionConfig) -> Vec<UnitRole> {
    let mut roles = Vec::new();
    for u in config.units() {
        match *u {
            Unit::Full => roles.push(UnitRole::Full),
            Unit::Grid(n) => roles.extend(std::iter::repeat_n(UnitRole::Patch, n * n)),
            Unit::Mask(_) => roles.push(UnitRole::Masked),
            Unit::MaskPlus(_) => roles.extend([UnitRole::Masked, UnitRole::Full]),
            Unit::TopK { k, .. } => {
                roles.push(UnitRole::Full);
                roles.extend(std::iter::repeat_n(UnitRole::Patch, k));
            }
        }
    }
    roles
}

impl UnitTable {
    pub fn new(width: usize, roles: Vec<UnitRole>, data: Tensor, episodes: Vec<Range<usize>>) -> Result<Self> {
        if data.shape().len() != 2 || data.cols() != roles.len() * width || roles.is_empty() {
            return Err(Error::dim(format!(
                "unit table {:?} for {} units of width {width}",
                data.shape(),
                roles.len()
            )));
        }
        let mut next = 0;
        for r in &episodes {
            if r.start != next || r.end < r.start {
                return Err(Error::invalid("episode ranges must tile the rows in order"));
            }
            next = r.end;
        }
        if next != data.rows() {
            return Err(Error::invalid("episode ranges do not cover every row"));
        }
        Ok(Self { width, roles, data, episodes })
    }

    /// Composes every frame of `dataset` with `config`.
    pub fn from_dataset(
        config: &CompositionConfig,
        dataset: &EpisodeDataset,
        encoder: &EncoderHandle,
        cache: &EmbeddingCache,
        opts: &ComposeOptions,
    ) -> Result<Self> {
        let rows = compose_dataset(config, dataset, encoder, cache, opts, None)?;
        let cols = config.dimension(encoder.width());
        let data = Tensor::new(&[rows.len(), cols], rows.concat())?;
        let mut episodes = Vec::new();
        let mut start = 0;
        for ep in dataset.episodes() {
            episodes.push(start..start + ep.len());
            start += ep.len();
        }
        Self::new(encoder.width(), unit_roles(config), data, episodes)
    }

    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn units(&self) -> usize {
        self.roles.len()
    }

    pub fn unit(&self, row: usize, unit: usize) -> &[f64] {
        &self.data.row(row)[unit * self.width..(unit + 1) * self.width]
    }

    pub fn units_with(&self, role: UnitRole) -> Vec<usize> {
        (0..self.units()).filter(|&u| self.roles[u] == role).collect()
    }

    /// Stacks `(row, unit)` embeddings into a `[len, width]` tensor.
    pub fn gather(&self, picks: &[(usize, usize)]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(picks.len() * self.width);
        for &(r, u) in picks {
            data.extend_from_slice(self.unit(r, u));
        }
        Tensor::new(&[picks.len(), self.width], data)
    }

    /// Same table with frames shuffled inside each episode; the control for
    /// temporal objectives.
    pub fn permuted_within_episodes<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self> {
        use rand::seq::SliceRandom;
        let mut order = Vec::with_capacity(self.frames());
        for r in &self.episodes {
            let mut idx: Vec<usize> = r.clone().collect();
            idx.shuffle(rng);
            order.extend(idx);
        }
        Ok(Self {
            width: self.width,
            roles: self.roles.clone(),
            data: self.data.gather_rows(&order)?,
            episodes: self.episodes.clone(),
        })
    }

    /// All `(t, t + 1)` row pairs that stay inside one episode.
    pub fn consecutive_pairs(&self) -> Vec<(usize, usize)> {
        self.episodes
            .iter()
            .flat_map(|r| (r.start..r.end.saturating_sub(1)).map(|t| (t, t + 1)))
            .collect()
    }
}

/// Per-unit projection of composed representations; output width is
/// `head.out_width() × units`.
pub fn apply_head(head: &ContrastiveHead, reps: &Tensor) -> Result<Tensor> {
    head.check()?;
    let w_in = head.in_width;
    if reps.shape().len() != 2 || reps.cols() % w_in != 0 || reps.cols() == 0 {
        return Err(Error::dim(format!(
            "{} head of input width {w_in} applied to representations {:?}",
            head.kind.name(),
            reps.shape()
        )));
    }
    let units = reps.cols() / w_in;
    let n = reps.rows();
    let out_w = head.out_width();
    let mut out = vec![0.0; n * units * out_w];
    for u in 0..units {
        let cols: Vec<f64> = (0..n)
            .flat_map(|r| reps.row(r)[u * w_in..(u + 1) * w_in].iter().copied())
            .collect();
        let x = Tensor::new(&[n, w_in], cols)?;
        let y = project(head, &x)?;
        for r in 0..n {
            out[(r * units + u) * out_w..(r * units + u + 1) * out_w].copy_from_slice(y.row(r));
        }
    }
    Tensor::new(&[n, units * out_w], out)
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = x.matmul(w)?;
    let c = w.cols();
    for row in y.data_mut().chunks_exact_mut(c) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(y)
}

fn project(head: &ContrastiveHead, x: &Tensor) -> Result<Tensor> {
    match head.kind {
        HeadKind::AugMlp => {
            let h = affine(x, head.param("w1")?, head.param("b1")?)?.map(|v| v.max(0.0));
            affine(&h, head.param("w2")?, head.param("b2")?)
        }
        HeadKind::Dim(_) => affine(x, head.param("phi_w")?, head.param("phi_b")?),
        HeadKind::Cpc => affine(x, head.param("enc_w")?, head.param("enc_b")?),
    }
}

/// Weights drawn from `N(0, 1 / fan_in)`.
pub(crate) fn init_weight<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], (1.0 / rows as f64).sqrt(), rng)
}

/// Batches of a shuffled index list; the last short batch is dropped when
/// it would hold a single row, since InfoNCE needs negatives.
pub(crate) fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    order.chunks(size).filter(|b| b.len() >= 2).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn infonce_reference_values() {
        let mut s = Tensor::full(&[4, 4], -50.0);
        for i in 0..4 {
            s.data_mut()[i * 5] = 50.0;
        }
        assert!(infonce(&s, 1.0).unwrap() < 1e-6);
        let uniform = Tensor::full(&[8, 8], 0.3);
        assert!((infonce(&uniform, 0.1).unwrap() - 8f64.ln()).abs() < 1e-12);
        assert!(infonce(&uniform, 0.0).is_err());
        assert!(infonce(&Tensor::zeros(&[2, 3]), 1.0).is_err());
    }

    #[test]
    fn infonce_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = rng.random_range(2..10);
            let s = Tensor::randn(&[n, n], 3.0, &mut rng);
            let tau = rng.random_range(0.05..2.0);
            let mut direct = 0.0;
            for i in 0..n {
                let denom: f64 = (0..n).map(|j| (s.get2(i, j) / tau).exp()).sum();
                direct -= ((s.get2(i, i) / tau).exp() / denom).ln();
            }
            direct /= n as f64;
            assert!((infonce(&s, tau).unwrap() - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_projection_passes_through() {
        let head = ContrastiveHead {
            kind: HeadKind::Dim(DimMode::Temporal),
            in_width: 6,
            temperature: 1.0,
            hyper: FinetuneHyper { dim_proj: 6, ..FinetuneHyper::default() },
            params: vec![
                ("phi_w".into(), Tensor::identity(6)),
                ("phi_b".into(), Tensor::zeros(&[6])),
                ("w".into(), Tensor::identity(6)),
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[5, 18], 1.0, &mut rng);
        assert_eq!(apply_head(&head, &x).unwrap(), x);
        assert!(apply_head(&head, &Tensor::zeros(&[2, 7])).is_err());
    }

    #[test]
    fn roles_follow_config() {
        let c: CompositionConfig = "FI+2x2+DM+".parse().unwrap();
        let r = unit_roles(&c);
        assert_eq!(r.len(), c.unit_count());
        assert_eq!(r[0], UnitRole::Full);
        assert_eq!(r[1..5], [UnitRole::Patch; 4]);
        assert_eq!(r[5..], [UnitRole::Masked, UnitRole::Full]);
    }

    #[test]
    fn pairs_stay_inside_episodes() {
        let t = UnitTable::new(2, vec![UnitRole::Full], Tensor::zeros(&[7, 2]), vec![0..3, 3..4, 4..7]).unwrap();
        assert_eq!(t.consecutive_pairs(), vec![(0, 1), (1, 2), (4, 5), (5, 6)]);
        assert!(UnitTable::new(2, vec![UnitRole::Full], Tensor::zeros(&[7, 2]), vec![0..3, 4..7]).is_err());
    }
}
