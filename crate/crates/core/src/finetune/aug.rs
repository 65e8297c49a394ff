use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{batches, infonce_var, init_weight, ContrastiveHead, FinetuneHyper, HeadKind, TrainedHead};
use crate::autodiff::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::composer::canonical_frame;
use crate::dataset::EpisodeDataset;
use crate::encoder::{cached_encode_with, EmbeddingCache, EmbeddingKey, EncoderHandle, VariantTag};
use crate::error::{Error, Result};
use crate::imaging::{augment, Augmentation};

/// Pixel seed of augmented view `view` of a frame. The key of that view is
/// `<episode>/<frame>/aug:<ops>:<view>`.
pub fn aug_view_seed(episode: usize, frame: usize, view: usize) -> u64 {
    (episode as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (frame as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ view as u64
}

/// Encodes `views` augmented copies of every frame. Returns one
/// `[frames, width]` tensor per view, rows in episode order.
pub fn aug_views(
    dataset: &EpisodeDataset,
    encoder: &EncoderHandle,
    cache: &EmbeddingCache,
    ops: &[Augmentation],
    views: usize,
) -> Result<Vec<Tensor>> {
    let refs = dataset.frame_refs();
    let mut out = Vec::with_capacity(views);
    for v in 0..views {
        let rows: Vec<Vec<f64>> = refs
            .par_iter()
            .map(|&r| {
                let ep = &dataset.episodes()[r.episode];
                let frame_id = ep.frame_ids[r.frame];
                let tag = VariantTag::aug(ops, v as u64)?;
                let key = EmbeddingKey::new(ep.id, frame_id, tag);
                let e = cached_encode_with(encoder, cache, &key, || {
                    let canon = canonical_frame(dataset.frame(r))?;
                    let ordered = match &key.tag {
                        VariantTag::Aug { ops, .. } => ops.clone(),
                        _ => unreachable!(),
                    };
                    augment(&canon, &ordered, aug_view_seed(ep.id, frame_id, v))
                })?;
                Ok(e.to_f64())
            })
            .collect::<Result<_>>()?;
        out.push(Tensor::new(&[rows.len(), encoder.width()], rows.concat())?);
    }
    Ok(out)
}

fn mlp(g: &mut Graph, p: &[Var], x: Tensor) -> Result<Var> {
    let x = g.input(x);
    let h = g.matmul(x, p[0])?;
    let h = g.add(h, p[1])?;
    let h = g.relu(h);
    let o = g.matmul(h, p[2])?;
    let o = g.add(o, p[3])?;
    g.l2_normalize_rows(o)
}

/// Trains the augmentation MLP on pre-encoded views (`views[v]` is
/// `[frames, width]`). Each step pairs two distinct views of every frame in
/// the batch and scores all pairs by cosine similarity.
pub fn train_aug_head(views: &[Tensor], hyper: &FinetuneHyper, seed: u64) -> Result<TrainedHead> {
    hyper.validate()?;
    if views.len() < 2 {
        return Err(Error::Config("augmentation head needs at least two views".into()));
    }
    let (n, width) = (views[0].rows(), views[0].cols());
    if views.iter().any(|v| v.shape() != [n, width]) {
        return Err(Error::dim("augmented views differ in shape"));
    }
    if n < 2 {
        return Err(Error::Dataset("augmentation head needs at least two frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![
        init_weight(width, hyper.mlp_hidden, &mut rng),
        Tensor::zeros(&[hyper.mlp_hidden]),
        init_weight(hyper.mlp_hidden, hyper.mlp_out, &mut rng),
        Tensor::zeros(&[hyper.mlp_out]),
    ];
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr));
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::new();
    let mut steps_per_epoch = 0;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let bs = batches(&order, hyper.batch_size);
        steps_per_epoch = bs.len();
        for batch in bs {
            let mut a_rows = Vec::with_capacity(batch.len() * width);
            let mut b_rows = Vec::with_capacity(batch.len() * width);
            for &i in batch {
                let a = rng.random_range(0..views.len());
                let mut b = rng.random_range(0..views.len() - 1);
                if b >= a {
                    b += 1;
                }
                a_rows.extend_from_slice(views[a].row(i));
                b_rows.extend_from_slice(views[b].row(i));
            }
            let xa = Tensor::new(&[batch.len(), width], a_rows)?;
            let xb = Tensor::new(&[batch.len(), width], b_rows)?;
            let mut g = Graph::new();
            let p: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
            let za = mlp(&mut g, &p, xa)?;
            let zb = mlp(&mut g, &p, xb)?;
            let zbt = g.transpose(zb)?;
            let scores = g.matmul(za, zbt)?;
            let loss = infonce_var(&mut g, scores, hyper.temperature)?;
            losses.push(g.value(loss).item());
            let grads = g.backward(loss)?.wrt(&p);
            adam.step(&mut params, &grads)?;
        }
    }
    let names = ["w1", "b1", "w2", "b2"];
    Ok(TrainedHead {
        head: ContrastiveHead {
            kind: HeadKind::AugMlp,
            in_width: width,
            temperature: hyper.temperature,
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
    use crate::finetune::apply_head;

    /// Cluster centres plus independent noise per view.
    fn clustered_views(n: usize, width: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = Tensor::randn(&[n, width], 1.0, &mut rng);
        (0..2)
            .map(|_| {
                let noise = Tensor::randn(&[n, width], 0.3, &mut rng);
                centres.zip_map(&noise, |a, b| a + b).unwrap()
            })
            .collect()
    }

    fn small() -> FinetuneHyper {
        FinetuneHyper {
            batch_size: 32,
            epochs: 25,
            mlp_hidden: 32,
            mlp_out: 16,
            ..FinetuneHyper::default()
        }
    }

    #[test]
    fn loss_drops_and_positives_align() {
        let views = clustered_views(256, 24, 0);
        let t = train_aug_head(&views, &small(), 1).unwrap();
        assert!(t.losses.len() >= 200);
        assert!(t.final_loss() < 0.7 * t.initial_loss(), "{} -> {}", t.initial_loss(), t.final_loss());

        let held = clustered_views(64, 24, 0);
        let held: Vec<Tensor> = held.iter().map(|v| v.slice_rows(0, 64).unwrap()).collect();
        let a = apply_head(&t.head, &held[0]).unwrap();
        let b = apply_head(&t.head, &held[1]).unwrap();
        let cos = |x: &[f64], y: &[f64]| {
            let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            d / (x.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        let pos: f64 = (0..64).map(|i| cos(a.row(i), b.row(i))).sum::<f64>() / 64.0;
        let mut neg = 0.0;
        for i in 0..64 {
            for j in 0..64 {
                if i != j {
                    neg += cos(a.row(i), b.row(j));
                }
            }
        }
        neg /= (64 * 63) as f64;
        assert!(pos > neg, "pos {pos} neg {neg}");
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let views = clustered_views(64, 8, 2);
        let h = FinetuneHyper { epochs: 2, ..small() };
        assert_eq!(train_aug_head(&views, &h, 3).unwrap(), train_aug_head(&views, &h, 3).unwrap());
    }
}
