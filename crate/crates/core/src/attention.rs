//! Motion attention over consecutive frames: difference and flow masks,
//! multiplicative masking, and mask-weighted patch selection.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    block_match_flow, ssim_map, to_grayscale, FlowField, Frame, ScalarField, SsimParams,
    DEFAULT_BLOCK, DEFAULT_RADIUS,
};

/// Where a mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskOrigin {
    Diff,
    Flow,
    Imported,
}

/// Per-pixel weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    field: ScalarField,
    origin: MaskOrigin,
}

impl AttentionMask {
    pub fn new(field: ScalarField, origin: MaskOrigin) -> Result<Self> {
        if field.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("attention mask values must lie in [0, 1]"));
        }
        Ok(Self { field, origin })
    }

    pub fn zeros(width: usize, height: usize, origin: MaskOrigin) -> Self {
        Self {
            field: ScalarField::filled(width, height, 0.0),
            origin,
        }
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn origin(&self) -> MaskOrigin {
        self.origin
    }

    pub fn width(&self) -> usize {
        self.field.width()
    }

    pub fn height(&self) -> usize {
        self.field.height()
    }
}

/// `(1 - SSIM(gray(prev), gray(curr))) / 2`, clamped to `[0, 1]`.
pub fn diff_mask(prev: &Frame, curr: &Frame) -> Result<AttentionMask> {
    if prev.width() != curr.width() || prev.height() != curr.height() {
        return Err(Error::dim(format!(
            "diff mask of {}x{} and {}x{} frames",
            prev.width(),
            prev.height(),
            curr.width(),
            curr.height()
        )));
    }
    let ssim = ssim_map(&to_grayscale(prev), &to_grayscale(curr), SsimParams::default())?;
    Ok(AttentionMask {
        field: ssim.map(|s| ((1.0 - s) / 2.0).clamp(0.0, 1.0)),
        origin: MaskOrigin::Diff,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowSource {
    BlockMatch { block: usize, radius: usize },
    Imported(FlowField),
}

impl Default for FlowSource {
    fn default() -> Self {
        FlowSource::BlockMatch {
            block: DEFAULT_BLOCK,
            radius: DEFAULT_RADIUS,
        }
    }
}

/// Flow magnitude per pixel (nearest-neighbour upsampled from the flow
/// grid) divided by its maximum. Zero flow gives a zero mask.
pub fn flow_mask(prev: &Frame, curr: &Frame, source: &FlowSource) -> Result<AttentionMask> {
    let (w, h) = (curr.width(), curr.height());
    if prev.width() != w || prev.height() != h {
        return Err(Error::dim("flow mask needs equally sized frames"));
    }
    let computed;
    let (flow, origin) = match source {
        FlowSource::BlockMatch { block, radius } => {
            computed = block_match_flow(&to_grayscale(prev), &to_grayscale(curr), *block, *radius)?;
            (&computed, MaskOrigin::Flow)
        }
        FlowSource::Imported(f) => (f, MaskOrigin::Imported),
    };
    mask_from_flow(flow, w, h, origin)
}

/// Upsamples a flow grid onto a `width × height` mask. The frame must split
/// evenly into grid cells.
pub fn mask_from_flow(
    flow: &FlowField,
    width: usize,
    height: usize,
    origin: MaskOrigin,
) -> Result<AttentionMask> {
    let (gw, gh) = (flow.grid_width(), flow.grid_height());
    if gw > width || gh > height || width % gw != 0 || height % gh != 0 {
        return Err(Error::dim(format!(
            "flow grid {gw}x{gh} does not tile a {width}x{height} frame"
        )));
    }
    let mags = flow.magnitudes();
    let max = mags.iter().cloned().fold(0.0, f64::max);
    let (bw, bh) = (width / gw, height / gh);
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let m = mags[(y / bh) * gw + x / bw];
            data.push(if max > 0.0 { m / max } else { 0.0 });
        }
    }
    Ok(AttentionMask {
        field: ScalarField::new(width, height, data)?,
        origin,
    })
}

/// Multiplies every channel of every pixel by the mask value.
pub fn apply_mask(frame: &Frame, mask: &AttentionMask) -> Result<Frame> {
    if frame.width() != mask.width() || frame.height() != mask.height() {
        return Err(Error::dim(format!(
            "mask {}x{} applied to {}x{} frame",
            mask.width(),
            mask.height(),
            frame.width(),
            frame.height()
        )));
    }
    let data = frame
        .data()
        .chunks_exact(3)
        .zip(mask.field().data())
        .flat_map(|(px, &m)| [px[0] * m, px[1] * m, px[2] * m])
        .collect();
    Frame::new(frame.width(), frame.height(), data)
}

/// One cell of an `n × n` grid together with its mean mask value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchCandidate {
    pub grid: usize,
    pub cell: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub score: f64,
}

/// Pixel rectangle `(x, y, w, h)` of `cell` in an `n × n` tiling.
pub fn cell_rect(width: usize, height: usize, n: usize, cell: usize) -> (usize, usize, usize, usize) {
    let (cw, ch) = (width / n, height / n);
    ((cell % n) * cw, (cell / n) * ch, cw, ch)
}

pub const CANDIDATE_GRIDS: [usize; 2] = [2, 4];

/// Scores every cell of the 2×2 and 4×4 grids (20 candidates).
pub fn score_patches(mask: &AttentionMask) -> Result<Vec<PatchCandidate>> {
    let (w, h) = (mask.width(), mask.height());
    if w % 4 != 0 || h % 4 != 0 {
        return Err(Error::dim(format!("mask {w}x{h} is not divisible by 4")));
    }
    let mut out = Vec::with_capacity(20);
    for n in CANDIDATE_GRIDS {
        for cell in 0..n * n {
            let (x, y, cw, ch) = cell_rect(w, h, n, cell);
            out.push(PatchCandidate {
                grid: n,
                cell,
                x,
                y,
                w: cw,
                h: ch,
                score: mask.field().rect_mean(x, y, cw, ch).clamp(0.0, 1.0),
            });
        }
    }
    Ok(out)
}

fn rank(a: &PatchCandidate, b: &PatchCandidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.grid.cmp(&b.grid))
        .then(a.cell.cmp(&b.cell))
}

/// The `k` best candidates by score; ties go to the coarser grid, then the
/// lower cell index. Output is in that order.
pub fn select_top_k(candidates: &[PatchCandidate], k: usize) -> Result<Vec<PatchCandidate>> {
    if k > candidates.len() {
        return Err(Error::invalid(format!(
            "cannot select {k} of {} candidates",
            candidates.len()
        )));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(rank);
    sorted.truncate(k);
    Ok(sorted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::tests::random_frame;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f64) -> ScalarField {
        let mut s = ScalarField::filled(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                s.set(x, y, f(x, y));
            }
        }
        s
    }

    #[test]
    fn identical_frames_give_zero_masks() {
        let f = random_frame(32, 32, 2);
        assert!(diff_mask(&f, &f).unwrap().field().data().iter().all(|&v| v == 0.0));
        let m = flow_mask(&f, &f, &FlowSource::default()).unwrap();
        assert!(m.field().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diff_mask_in_range() {
        for s in 0..100 {
            let m = diff_mask(&random_frame(16, 16, s), &random_frame(16, 16, s + 1000)).unwrap();
            assert!(m.field().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn size_mismatch_rejected() {
        let a = random_frame(16, 16, 0);
        let b = random_frame(24, 16, 0);
        assert!(diff_mask(&a, &b).is_err());
        assert!(flow_mask(&a, &b, &FlowSource::default()).is_err());
        let m = AttentionMask::zeros(24, 16, MaskOrigin::Diff);
        assert!(apply_mask(&a, &m).is_err());
    }

    #[test]
    fn imported_flow_must_tile_frame() {
        let f = random_frame(32, 32, 0);
        let bad = FlowSource::Imported(FlowField::zeros(5, 4));
        assert!(flow_mask(&f, &f, &bad).is_err());
        let ok = FlowSource::Imported(FlowField::new(2, 1, vec![(3.0, 4.0), (0.0, 1.0)]).unwrap());
        let m = flow_mask(&f, &f, &ok).unwrap();
        assert_eq!(m.origin(), MaskOrigin::Imported);
        assert_eq!(m.field().get(0, 31), 1.0);
        assert_eq!(m.field().get(31, 0), 0.2);
    }

    #[test]
    fn planted_block_shift() {
        let mut a = Frame::filled(32, 32, [0.1; 3]).unwrap();
        let mut b = a.clone();
        for y in 8..16 {
            for x in 8..16 {
                let v = ((x * 7 + y * 3) % 11) as f64 / 11.0;
                a.set_pixel(x, y, [v; 3]);
                b.set_pixel(x + 2, y, [v; 3]);
            }
        }
        let m = flow_mask(&a, &b, &FlowSource::default()).unwrap();
        assert_eq!(m.field().max(), 1.0);
        assert_eq!(m.field().get(10, 10), 1.0);
        assert_eq!(m.field().get(28, 28), 0.0);
        assert_eq!(m.field().get(2, 2), 0.0);
    }

    #[test]
    fn mask_application() {
        let f = random_frame(16, 16, 9);
        let ones = AttentionMask::new(ScalarField::filled(16, 16, 1.0), MaskOrigin::Diff).unwrap();
        assert_eq!(apply_mask(&f, &ones).unwrap(), f);
        let zeros = AttentionMask::zeros(16, 16, MaskOrigin::Diff);
        assert!(apply_mask(&f, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
        let half = AttentionMask::new(ScalarField::filled(16, 16, 0.5), MaskOrigin::Diff).unwrap();
        let g = apply_mask(&f, &half).unwrap();
        for (a, b) in g.data().iter().zip(f.data()) {
            assert!((a - b * 0.5).abs() < 1e-12);
        }
        assert!(AttentionMask::new(ScalarField::filled(8, 8, 1.5), MaskOrigin::Diff).is_err());
    }

    #[test]
    fn uniform_mask_scores_equal() {
        let m = AttentionMask::new(ScalarField::filled(32, 32, 0.3), MaskOrigin::Flow).unwrap();
        let c = score_patches(&m).unwrap();
        assert_eq!(c.len(), 20);
        assert!(c.iter().all(|p| (p.score - 0.3).abs() < 1e-12));
        let top = select_top_k(&c, 4).unwrap();
        assert_eq!(
            top.iter().map(|p| (p.grid, p.cell)).collect::<Vec<_>>(),
            vec![(2, 0), (2, 1), (2, 2), (2, 3)]
        );
    }

    #[test]
    fn single_cell_indicator() {
        // 4x4 cell 6 is row 1, column 2, which sits in 2x2 cell 1.
        let ind = field(32, 32, |x, y| if (16..24).contains(&x) && (8..16).contains(&y) { 1.0 } else { 0.0 });
        let c = score_patches(&AttentionMask::new(ind, MaskOrigin::Diff).unwrap()).unwrap();
        for p in &c {
            let expected = match (p.grid, p.cell) {
                (4, 6) => 1.0,
                (2, 1) => 0.25,
                _ => 0.0,
            };
            assert!((p.score - expected).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn scores_match_direct_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let f = field(48, 24, |_, _| rng.random::<f64>());
            let c = score_patches(&AttentionMask::new(f.clone(), MaskOrigin::Diff).unwrap()).unwrap();
            for p in c {
                let mut s = 0.0;
                for y in p.y..p.y + p.h {
                    for x in p.x..p.x + p.w {
                        s += f.get(x, y);
                    }
                }
                assert!((p.score - s / (p.w * p.h) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top_k_bounds() {
        let m = AttentionMask::new(field(16, 16, |x, y| ((x + y) % 5) as f64 / 4.0), MaskOrigin::Diff).unwrap();
        let c = score_patches(&m).unwrap();
        let all = select_top_k(&c, 20).unwrap();
        assert_eq!(all.len(), 20);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(select_top_k(&c, 21).is_err());
    }

    proptest! {
        #[test]
        fn top_k_ignores_input_order(seed in 0u64..500, k in 1usize..=20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse values so ties are common
            let f = field(16, 16, |_, _| rng.random_range(0..3) as f64 / 2.0);
            let c = score_patches(&AttentionMask::new(f, MaskOrigin::Diff).unwrap()).unwrap();
            let mut shuffled = c.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            let a = select_top_k(&c, k).unwrap();
            prop_assert_eq!(&a, &select_top_k(&shuffled, k).unwrap());
            prop_assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}
