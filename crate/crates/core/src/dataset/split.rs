use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Train / validation / test fractions used by the probing protocol.
pub const PROBE_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

/// Flat frame indices (episode order) partitioned into three disjoint sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn total(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

/// Largest-remainder apportionment of `n` items, so each share is within
/// one item of `n · ratio`.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        // guard against 0.7 * 50000 landing at 34999.999…
        *c = (q + 1e-9).floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Shuffles `0..n` with `seed` and cuts it by `ratios`.
pub fn make_splits(n: usize, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if n == 0 {
        return Err(Error::Dataset("cannot split an empty dataset".into()));
    }
    let [train, val, _] = split_counts(n, ratios)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(train + val);
    let validation = idx.split_off(train);
    Ok(SplitAssignment {
        train: idx,
        validation,
        test,
    })
}
