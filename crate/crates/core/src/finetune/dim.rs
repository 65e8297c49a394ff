use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batches, infonce_var, init_weight, ContrastiveHead, FinetuneHyper, HeadKind, TrainedHead, UnitRole, UnitTable};
use crate::autodiff::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Which pairs a DIM head contrasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimMode {
    /// The same unit at `t` and `t + 1`.
    Temporal,
    /// Two distinct patches of one frame.
    Spatial,
    /// Each patch at `t` against the full frame at `t + 1`.
    SpatioTemporal,
}

impl DimMode {
    pub fn code(self) -> &'static str {
        match self {
            DimMode::Temporal => "T",
            DimMode::Spatial => "S",
            DimMode::SpatioTemporal => "ST",
        }
    }
}

impl fmt::Display for DimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for DimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T" | "TEMPORAL" => Ok(DimMode::Temporal),
            "S" | "SPATIAL" => Ok(DimMode::Spatial),
            "ST" | "SPATIOTEMPORAL" => Ok(DimMode::SpatioTemporal),
            _ => Err(Error::Config(format!("unknown DIM mode `{s}` (expected T, S or ST)"))),
        }
    }
}

/// `φ(x) = x·Φ + b` on a constant input.
fn phi(g: &mut Graph, p: &[Var], x: Tensor) -> Result<Var> {
    let x = g.input(x);
    let h = g.matmul(x, p[0])?;
    g.add(h, p[1])
}

fn pair_loss(g: &mut Graph, p: &[Var], anchors: Tensor, positives: Tensor) -> Result<Var> {
    let a = phi(g, p, anchors)?;
    let b = phi(g, p, positives)?;
    let scores = g.bilinear(a, p[2], b)?;
    infonce_var(g, scores, 1.0)
}

/// Trains a bilinear DIM head on `table` with scores
/// `s(x, y) = φ(x)ᵀ W φ(y)` and in-batch negatives.
///
/// Temporal batches draw one `(t, t + 1)` pair per row and one unit per
/// row; spatial batches draw one ordered pair of distinct patches per frame;
/// spatio-temporal losses are summed over patches.
pub fn train_dim_head(table: &UnitTable, mode: DimMode, hyper: &FinetuneHyper, seed: u64) -> Result<TrainedHead> {
    hyper.validate()?;
    let patches = table.units_with(UnitRole::Patch);
    let full = table.units_with(UnitRole::Full);
    match mode {
        DimMode::Spatial if patches.len() < 2 => {
            return Err(Error::Config("S-DIM needs a grid composition with at least two patches".into()))
        }
        DimMode::SpatioTemporal if patches.is_empty() || full.is_empty() => {
            return Err(Error::Config(
                "ST-DIM needs a composition with the full frame and grid patches".into(),
            ))
        }
        _ => {}
    }
    let items: Vec<(usize, usize)> = match mode {
        DimMode::Spatial => (0..table.frames()).map(|f| (f, f)).collect(),
        _ => table.consecutive_pairs(),
    };
    if items.len() < 2 {
        return Err(Error::Dataset("too few frames to form contrastive batches".into()));
    }

    let width = table.width;
    let d = hyper.dim_proj;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![init_weight(width, d, &mut rng), Tensor::zeros(&[d]), Tensor::identity(d)];
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut losses = Vec::new();
    let mut steps_per_epoch = 0;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let bs = batches(&order, hyper.batch_size);
        steps_per_epoch = bs.len();
        for batch in bs {
            let mut g = Graph::new();
            let p: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
            let loss = match mode {
                DimMode::Temporal => {
                    let mut a = Vec::with_capacity(batch.len());
                    let mut b = Vec::with_capacity(batch.len());
                    for &i in batch {
                        let (t, t1) = items[i];
                        let u = rng.random_range(0..table.units());
                        a.push((t, u));
                        b.push((t1, u));
                    }
                    pair_loss(&mut g, &p, table.gather(&a)?, table.gather(&b)?)?
                }
                DimMode::Spatial => {
                    let mut a = Vec::with_capacity(batch.len());
                    let mut b = Vec::with_capacity(batch.len());
                    for &i in batch {
                        let f = items[i].0;
                        let x = rng.random_range(0..patches.len());
                        let mut y = rng.random_range(0..patches.len() - 1);
                        if y >= x {
                            y += 1;
                        }
                        a.push((f, patches[x]));
                        b.push((f, patches[y]));
                    }
                    pair_loss(&mut g, &p, table.gather(&a)?, table.gather(&b)?)?
                }
                DimMode::SpatioTemporal => {
                    let target: Vec<(usize, usize)> = batch.iter().map(|&i| (items[i].1, full[0])).collect();
                    let target = table.gather(&target)?;
                    let mut total: Option<Var> = None;
                    for &u in &patches {
                        let a: Vec<(usize, usize)> = batch.iter().map(|&i| (items[i].0, u)).collect();
                        let l = pair_loss(&mut g, &p, table.gather(&a)?, target.clone())?;
                        total = Some(match total {
                            None => l,
                            Some(t) => g.add(t, l)?,
                        });
                    }
                    total.expect("at least one patch")
                }
            };
            losses.push(g.value(loss).item());
            let grads = g.backward(loss)?.wrt(&p);
            adam.step(&mut params, &grads)?;
        }
    }
    let names = ["phi_w", "phi_b", "w"];
    Ok(TrainedHead {
        head: ContrastiveHead {
            kind: HeadKind::Dim(mode),
            in_width: width,
            temperature: 1.0,
            hyper: hyper.clone(),
            params: names.iter().map(|s| s.to_string()).zip(params).collect(),
        },
        losses,
        steps_per_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Random walks: each episode drifts slowly through embedding space.
    pub(crate) fn smooth_table(episodes: usize, len: usize, units: usize, width: usize, seed: u64) -> UnitTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut ranges = Vec::new();
        for e in 0..episodes {
            let mut state = Tensor::randn(&[units * width], 1.0, &mut rng).into_data();
            for _ in 0..len {
                for v in state.iter_mut() {
                    *v += 0.15 * rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
                data.extend_from_slice(&state);
            }
            ranges.push(e * len..(e + 1) * len);
        }
        let mut roles = vec![UnitRole::Full];
        roles.extend(std::iter::repeat_n(UnitRole::Patch, units - 1));
        UnitTable::new(width, roles, Tensor::new(&[episodes * len, units * width], data).unwrap(), ranges).unwrap()
    }

    fn small() -> FinetuneHyper {
        FinetuneHyper { batch_size: 32, epochs: 4, dim_proj: 16, ..FinetuneHyper::default() }
    }

    #[test]
    fn temporal_beats_shuffled_control() {
        let t = smooth_table(8, 40, 1, 12, 0);
        let real = train_dim_head(&t, DimMode::Temporal, &small(), 0).unwrap();
        let shuffled = t.permuted_within_episodes(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let control = train_dim_head(&shuffled, DimMode::Temporal, &small(), 0).unwrap();
        assert!(real.final_loss() < 0.8 * control.final_loss(), "{} vs {}", real.final_loss(), control.final_loss());
    }

    /// Every patch is one per-frame latent plus its own noise.
    fn shared_latent_table(frames: usize, patches: usize, width: usize, seed: u64) -> UnitTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for _ in 0..frames {
            let z = Tensor::randn(&[width], 1.0, &mut rng);
            for _ in 0..patches {
                let noise = Tensor::randn(&[width], 0.5, &mut rng);
                data.extend_from_slice(z.zip_map(&noise, |a, b| a + b).unwrap().data());
            }
        }
        UnitTable::new(
            width,
            vec![UnitRole::Patch; patches],
            Tensor::new(&[frames, patches * width], data).unwrap(),
            vec![0..frames],
        )
        .unwrap()
    }

    #[test]
    fn spatial_retrieval_beats_chance() {
        let t = shared_latent_table(256, 4, 8, 2);
        let h = FinetuneHyper { epochs: 20, lr: 1e-2, ..small() };
        let trained = train_dim_head(&t, DimMode::Spatial, &h, 0).unwrap();
        let phi_w = trained.head.param("phi_w").unwrap();
        let phi_b = trained.head.param("phi_b").unwrap();
        let w = trained.head.param("w").unwrap();
        let held = shared_latent_table(32, 4, 8, 3);
        let a = held.gather(&(0..32).map(|f| (f, 0)).collect::<Vec<_>>()).unwrap();
        let b = held.gather(&(0..32).map(|f| (f, 1)).collect::<Vec<_>>()).unwrap();
        let proj = |x: &Tensor| super::super::affine(x, phi_w, phi_b).unwrap();
        let s = proj(&a).matmul(w).unwrap().matmul_nt(&proj(&b)).unwrap();
        let hits = (0..32)
            .filter(|&i| (0..32).all(|j| j == i || s.get2(i, j) < s.get2(i, i)))
            .count();
        assert!(hits >= 8, "{hits} of 32 hits, chance is 1");
    }

    #[test]
    fn grid_required_for_spatial_modes() {
        let fi = smooth_table(2, 10, 1, 4, 0);
        let h = FinetuneHyper { epochs: 1, ..small() };
        assert!(matches!(train_dim_head(&fi, DimMode::Spatial, &h, 0), Err(Error::Config(_))));
        assert!(matches!(train_dim_head(&fi, DimMode::SpatioTemporal, &h, 0), Err(Error::Config(_))));
        let grid = smooth_table(2, 10, 5, 4, 0);
        let st = train_dim_head(&grid, DimMode::SpatioTemporal, &h, 0).unwrap();
        assert!(st.final_loss().is_finite());
    }

    #[test]
    fn reproducible() {
        let t = smooth_table(2, 20, 3, 6, 5);
        let h = FinetuneHyper { epochs: 2, ..small() };
        let a = train_dim_head(&t, DimMode::Temporal, &h, 4).unwrap();
        assert_eq!(a, train_dim_head(&t, DimMode::Temporal, &h, 4).unwrap());
    }
}
