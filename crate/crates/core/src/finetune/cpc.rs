use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batches, infonce_var, init_weight, ContrastiveHead, FinetuneHyper, HeadKind, TrainedHead, UnitTable};
use crate::autodiff::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Parameter handles of one GRU cell.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wn: Var,
    pub un: Var,
    pub bn: Var,
}

impl GruVars {
    /// Takes nine consecutive handles in `cpc_param_names` order.
    pub fn from_slice(v: &[Var]) -> Result<Self> {
        if v.len() < 9 {
            return Err(Error::invalid(format!("GRU needs 9 parameter handles, got {}", v.len())));
        }
        Ok(Self {
            wz: v[0],
            uz: v[1],
            bz: v[2],
            wr: v[3],
            ur: v[4],
            br: v[5],
            wn: v[6],
            un: v[7],
            bn: v[8],
        })
    }
}

fn gate(g: &mut Graph, x: Var, w: Var, h: Var, u: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    let hu = g.matmul(h, u)?;
    let s = g.add(xw, hu)?;
    g.add(s, b)
}

/// One GRU update:
///
/// ```text
/// z = σ(x·Wz + h·Uz + bz)
/// r = σ(x·Wr + h·Ur + br)
/// n = tanh(x·Wn + (r ⊙ h)·Un + bn)
/// h' = n + z ⊙ (h − n)
/// ```
pub fn gru_step(g: &mut Graph, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let z = gate(g, x, p.wz, h, p.uz, p.bz)?;
    let z = g.sigmoid(z);
    let r = gate(g, x, p.wr, h, p.ur, p.br)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, h)?;
    let n = gate(g, x, p.wn, rh, p.un, p.bn)?;
    let n = g.tanh(n);
    let d = g.sub(h, n)?;
    let zd = g.mul(z, d)?;
    g.add(n, zd)
}

/// Parameter names of a CPC head predicting `steps` latents ahead.
pub fn cpc_param_names(steps: usize) -> Vec<String> {
    let mut names: Vec<String> = [
        "enc_w", "enc_b", "gru_wz", "gru_uz", "gru_bz", "gru_wr", "gru_ur", "gru_br", "gru_wn", "gru_un",
        "gru_bn",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend((1..=steps).map(|k| format!("pred_{k}")));
    names
}

fn init_params(width: usize, hyper: &FinetuneHyper, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (l, h) = (hyper.cpc_latent, hyper.gru_hidden);
    let mut p = vec![init_weight(width, l, rng), Tensor::zeros(&[l])];
    for _ in 0..3 {
        p.push(init_weight(l, h, rng));
        p.push(init_weight(h, h, rng));
        p.push(Tensor::zeros(&[h]));
    }
    for _ in 0..hyper.steps {
        p.push(init_weight(h, l, rng));
    }
    p
}

/// Summed InfoNCE (τ = 1) of a CPC head over one batch of windows.
///
/// `seq` holds `context + steps` tensors of shape `[batch, width]`; the GRU
/// reads the first `context` latents and predictor `k` scores the latent
/// `k` steps past the context against every window in the batch.
/// `vars` follow [`cpc_param_names`].
pub fn cpc_loss(g: &mut Graph, vars: &[Var], seq: &[Tensor], hyper: &FinetuneHyper) -> Result<Var> {
    let (c, k) = (hyper.context, hyper.steps);
    if vars.len() != 11 + k {
        return Err(Error::invalid(format!("CPC with {k} steps needs {} parameters, got {}", 11 + k, vars.len())));
    }
    if seq.len() != c + k {
        return Err(Error::dim(format!("CPC window of {} latents, expected {}", seq.len(), c + k)));
    }
    let b = seq[0].rows();
    let gru = GruVars::from_slice(&vars[2..11])?;
    let mut z = Vec::with_capacity(seq.len());
    for x in seq {
        let x = g.input(x.clone());
        let e = g.matmul(x, vars[0])?;
        z.push(g.add(e, vars[1])?);
    }
    let mut h = g.input(Tensor::zeros(&[b, hyper.gru_hidden]));
    for &zt in &z[..c] {
        h = gru_step(g, zt, h, &gru)?;
    }
    let mut total: Option<Var> = None;
    for step in 0..k {
        let pred = g.matmul(h, vars[11 + step])?;
        let target = g.transpose(z[c + step])?;
        let scores = g.matmul(pred, target)?;
        let l = infonce_var(g, scores, 1.0)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    Ok(total.expect("steps is positive"))
}

/// Trains a CPC head on windows of `context + steps` consecutive frames.
/// Every window reads one unit, sampled per window.
pub fn train_cpc_head(table: &UnitTable, hyper: &FinetuneHyper, seed: u64) -> Result<TrainedHead> {
    hyper.validate()?;
    let span = hyper.context + hyper.steps;
    if let Some(short) = table.episodes.iter().find(|r| r.len() < span) {
        return Err(Error::Dataset(format!(
            "CPC needs episodes of at least {span} frames (context {} + steps {}), found one with {}",
            hyper.context,
            hyper.steps,
            short.len()
        )));
    }
    let starts: Vec<usize> = table.episodes.iter().flat_map(|r| r.start..=r.end - span).collect();
    if starts.len() < 2 {
        return Err(Error::Dataset("too few windows to form contrastive batches".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(table.width, hyper, &mut rng);
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr));
    let mut order: Vec<usize> = (0..starts.len()).collect();
    let mut losses = Vec::new();
    let mut steps_per_epoch = 0;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let bs = batches(&order, hyper.batch_size);
        steps_per_epoch = bs.len();
        for batch in bs {
            let picks: Vec<(usize, usize)> =
                batch.iter().map(|&i| (starts[i], rng.random_range(0..table.units()))).collect();
            let seq = (0..span)
                .map(|t| table.gather(&picks.iter().map(|&(s, u)| (s + t, u)).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let p: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
            let loss = cpc_loss(&mut g, &p, &seq, hyper)?;
            losses.push(g.value(loss).item());
            let grads = g.backward(loss)?.wrt(&p);
            adam.step(&mut params, &grads)?;
        }
    }
    Ok(TrainedHead {
        head: ContrastiveHead {
            kind: HeadKind::Cpc,
            in_width: table.width,
            temperature: 1.0,
            hyper: hyper.clone(),
            params: cpc_param_names(hyper.steps).into_iter().zip(params).collect(),
        },
        losses,
        steps_per_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::finetune::UnitRole;

    fn tiny() -> FinetuneHyper {
        FinetuneHyper {
            batch_size: 16,
            epochs: 6,
            cpc_latent: 8,
            gru_hidden: 8,
            context: 4,
            steps: 2,
            lr: 3e-3,
            ..FinetuneHyper::default()
        }
    }

    /// Episodes that rotate a random start vector by a fixed orthogonal-ish
    /// map, so the next frame is predictable from the past.
    fn dynamic_table(episodes: usize, len: usize, width: usize, seed: u64) -> UnitTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Tensor::randn(&[width, width], (1.0 / width as f64).sqrt(), &mut rng);
        let mut data = Vec::new();
        let mut ranges = Vec::new();
        for e in 0..episodes {
            let mut x = Tensor::randn(&[1, width], 1.0, &mut rng);
            for _ in 0..len {
                let y = x.matmul(&m).unwrap();
                let norm = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                x = y.map(|v| v / norm * (width as f64).sqrt());
                data.extend_from_slice(x.data());
            }
            ranges.push(e * len..(e + 1) * len);
        }
        UnitTable::new(width, vec![UnitRole::Full], Tensor::new(&[episodes * len, width], data).unwrap(), ranges)
            .unwrap()
    }

    #[test]
    fn hidden_state_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let p: Vec<Var> = (0..9)
            .map(|i| {
                let shape: &[usize] = if i % 3 == 2 { &[4] } else { &[4, 4] };
                g.param(Tensor::randn(shape, 3.0, &mut rng))
            })
            .collect();
        let gru = GruVars::from_slice(&p).unwrap();
        let mut h = g.input(Tensor::zeros(&[3, 4]));
        for _ in 0..50 {
            let x = g.input(Tensor::randn(&[3, 4], 10.0, &mut rng));
            h = gru_step(&mut g, x, h, &gru).unwrap();
            assert!(g.value(h).max_abs() <= 1.0);
        }
    }

    #[test]
    fn cpc_gradients_match_finite_differences() {
        let h = FinetuneHyper { cpc_latent: 3, gru_hidden: 3, context: 2, steps: 2, ..FinetuneHyper::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[3, 4], 1.0, &mut rng)).collect();
        let point = init_params(4, &h, &mut rng);
        let err = grad_check(|g, v| cpc_loss(g, v, &seq, &h), &point, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn predictable_dynamics_beat_permuted_control() {
        let t = dynamic_table(8, 40, 6, 1);
        let real = train_cpc_head(&t, &tiny(), 0).unwrap();
        let shuffled = t.permuted_within_episodes(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let control = train_cpc_head(&shuffled, &tiny(), 0).unwrap();
        assert!(real.final_loss() < control.final_loss(), "{} vs {}", real.final_loss(), control.final_loss());
    }

    #[test]
    fn short_episodes_name_the_minimum() {
        let t = dynamic_table(2, 5, 4, 0);
        match train_cpc_head(&t, &tiny(), 0) {
            Err(Error::Dataset(m)) => assert!(m.contains("at least 6"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reproducible_and_named() {
        let t = dynamic_table(2, 12, 4, 3);
        let h = FinetuneHyper { epochs: 2, batch_size: 4, ..tiny() };
        let a = train_cpc_head(&t, &h, 9).unwrap();
        assert_eq!(a, train_cpc_head(&t, &h, 9).unwrap());
        let names: Vec<&str> = a.head.params.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names.last(), Some(&"pred_2"));
        assert_eq!(names.len(), 13);
        a.head.check().unwrap();
    }
}
