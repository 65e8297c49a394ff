use std::fs;
use std::path::Path;

use super::ScalarField;
use crate::error::{Error, Result};

pub const DEFAULT_BLOCK: usize = 8;
pub const DEFAULT_RADIUS: usize = 4;

pub const FLOW_MAGIC: &[u8; 4] = b"PRLF";
pub const FLOW_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

/// Block-level displacement field, one `(dx, dy)` per grid cell, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    grid_width: usize,
    grid_height: usize,
    vectors: Vec<(f64, f64)>,
}

impl FlowField {
    pub fn new(grid_width: usize, grid_height: usize, vectors: Vec<(f64, f64)>) -> Result<Self> {
        if grid_width == 0 || grid_height == 0 || vectors.len() != grid_width * grid_height {
            return Err(Error::dim(format!(
                "flow grid {grid_width}x{grid_height} with {} vectors",
                vectors.len()
            )));
        }
        if vectors.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::invalid("flow contains non-finite vectors"));
        }
        Ok(Self {
            grid_width,
            grid_height,
            vectors,
        })
    }

    pub fn zeros(grid_width: usize, grid_height: usize) -> Self {
        Self {
            grid_width,
            grid_height,
            vectors: vec![(0.0, 0.0); grid_width * grid_height],
        }
    }

    pub fn grid_width(&self) -> usize {
        self.grid_width
    }

    pub fn grid_height(&self) -> usize {
        self.grid_height
    }

    pub fn vectors(&self) -> &[(f64, f64)] {
        &self.vectors
    }

    pub fn get(&self, gx: usize, gy: usize) -> (f64, f64) {
        self.vectors[gy * self.grid_width + gx]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.vectors.iter().map(|(x, y)| x.hypot(*y)).collect()
    }
}

/// Exhaustive block matching: for each `block × block` tile of `a`, the
/// displacement within `±radius` whose tile in `b` has the smallest sum of
/// absolute differences. Ties prefer the smallest `|dx| + |dy|`, then the
/// first displacement in row-major (dy, dx) order. Displacements that would
/// leave the image are not considered.
pub fn block_match_flow(
    a: &ScalarField,
    b: &ScalarField,
    block: usize,
    radius: usize,
) -> Result<FlowField> {
    if !a.same_size(b) {
        return Err(Error::dim("block matching needs equally sized fields"));
    }
    let (w, h) = (a.width(), a.height());
    if block == 0 || w % block != 0 || h % block != 0 {
        return Err(Error::invalid(format!(
            "field {w}x{h} is not divisible into {block}px blocks"
        )));
    }
    let (gw, gh) = (w / block, h / block);
    let r = radius as isize;
    let mut vectors = Vec::with_capacity(gw * gh);
    for gy in 0..gh {
        for gx in 0..gw {
            let (x0, y0) = ((gx * block) as isize, (gy * block) as isize);
            let mut best: Option<(f64, isize, isize, isize)> = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (bx, by) = (x0 + dx, y0 + dy);
                    if bx < 0 || by < 0 || bx as usize + block > w || by as usize + block > h {
                        continue;
                    }
                    let sad = sad(a, b, x0 as usize, y0 as usize, bx as usize, by as usize, block);
                    let l1 = dx.abs() + dy.abs();
                    let better = match best {
                        None => true,
                        Some((bs, bl1, _, _)) => sad < bs || (sad == bs && l1 < bl1),
                    };
                    if better {
                        best = Some((sad, l1, dx, dy));
                    }
                }
            }
            let (_, _, dx, dy) = best.expect("zero displacement is always in bounds");
            vectors.push((dx as f64, dy as f64));
        }
    }
    FlowField::new(gw, gh, vectors)
}

fn sad(a: &ScalarField, b: &ScalarField, ax: usize, ay: usize, bx: usize, by: usize, n: usize) -> f64 {
    let w = a.width();
    let (da, db) = (a.data(), b.data());
    let mut s = 0.0;
    for row in 0..n {
        let ra = &da[(ay + row) * w + ax..(ay + row) * w + ax + n];
        let rb = &db[(by + row) * w + bx..(by + row) * w + bx + n];
        s += ra.iter().zip(rb).map(|(p, q)| (p - q).abs()).sum::<f64>();
    }
    s
}

/// Writes one or more flow grids of identical dimensions as a PRLF file.
/// The header carries the grid size; grids follow back to back.
pub fn write_flows(path: &Path, flows: &[FlowField]) -> Result<()> {
    let (gw, gh) = match flows.first() {
        Some(f) => (f.grid_width, f.grid_height),
        None => (0, 0),
    };
    if flows.iter().any(|f| f.grid_width != gw || f.grid_height != gh) {
        return Err(Error::dim("flow grids in one file must share dimensions"));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + flows.len() * gw * gh * 8);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&FLOW_VERSION.to_le_bytes());
    buf.extend_from_slice(&(gw as u32).to_le_bytes());
    buf.extend_from_slice(&(gh as u32).to_le_bytes());
    for f in flows {
        for &(dx, dy) in &f.vectors {
            buf.extend_from_slice(&(dx as f32).to_le_bytes());
            buf.extend_from_slice(&(dy as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_flows(path: &Path) -> Result<Vec<FlowField>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_flows(&bytes)
}

pub(crate) fn parse_flows(bytes: &[u8]) -> Result<Vec<FlowField>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption {
            offset: bytes.len() as u64,
            message: "truncated PRLF header".into(),
        });
    }
    if &bytes[..4] != FLOW_MAGIC {
        return Err(Error::Format("bad magic, expected PRLF".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FLOW_VERSION {
        return Err(Error::Format(format!("unsupported PRLF version {version}")));
    }
    let gw = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let gh = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.is_empty() {
        return Ok(Vec::new());
    }
    let grid_bytes = gw * gh * 8;
    if grid_bytes == 0 || body.len() % grid_bytes != 0 {
        return Err(Error::Corruption {
            offset: (HEADER_LEN + body.len() / grid_bytes.max(1) * grid_bytes) as u64,
            message: format!(
                "payload of {} bytes is not a whole number of {gw}x{gh} grids",
                body.len()
            ),
        });
    }
    body.chunks_exact(grid_bytes)
        .map(|chunk| {
            let vectors = chunk
                .chunks_exact(8)
                .map(|p| {
                    let dx = f32::from_le_bytes(p[..4].try_into().unwrap());
                    let dy = f32::from_le_bytes(p[4..].try_into().unwrap());
                    (dx as f64, dy as f64)
                })
                .collect();
            FlowField::new(gw, gh, vectors)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texture(w: usize, h: usize, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarField::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// `b(x, y) = a(x - dx, y - dy)`, with out-of-range samples from a second texture.
    fn shifted(a: &ScalarField, dx: isize, dy: isize, seed: u64) -> ScalarField {
        let fill = texture(a.width(), a.height(), seed);
        let mut out = fill.clone();
        for y in 0..a.height() as isize {
            for x in 0..a.width() as isize {
                let (sx, sy) = (x - dx, y - dy);
                if sx >= 0 && sy >= 0 && (sx as usize) < a.width() && (sy as usize) < a.height() {
                    out.set(x as usize, y as usize, a.get(sx as usize, sy as usize));
                }
            }
        }
        out
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let a = texture(32, 32, 1);
        let f = block_match_flow(&a, &a, 8, 4).unwrap();
        assert!(f.vectors().iter().all(|&v| v == (0.0, 0.0)));
    }

    #[test]
    fn planted_shift_is_recovered_on_interior_blocks() {
        let a = texture(64, 64, 2);
        let b = shifted(&a, 2, 1, 99);
        let f = block_match_flow(&a, &b, 8, 4).unwrap();
        assert_eq!((f.grid_width(), f.grid_height()), (8, 8));
        for gy in 0..7 {
            for gx in 0..7 {
                assert_eq!(f.get(gx, gy), (2.0, 1.0), "block ({gx},{gy})");
            }
        }
    }

    #[test]
    fn magnitudes_bounded_by_radius() {
        let a = texture(48, 48, 5);
        let b = texture(48, 48, 6);
        let f = block_match_flow(&a, &b, 8, 3).unwrap();
        let bound = 3.0 * 2f64.sqrt() + 1e-12;
        assert!(f.magnitudes().iter().all(|&m| m <= bound));
    }

    #[test]
    fn indivisible_dimensions_rejected() {
        let a = texture(30, 32, 1);
        assert!(block_match_flow(&a, &a, 8, 4).is_err());
    }

    #[test]
    fn tie_break_prefers_zero_displacement() {
        let flat = ScalarField::filled(32, 32, 0.5);
        let f = block_match_flow(&flat, &flat, 8, 4).unwrap();
        assert!(f.vectors().iter().all(|&v| v == (0.0, 0.0)));
    }

    #[test]
    fn prlf_round_trip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.prlf");
        let flows = vec![
            FlowField::new(2, 1, vec![(1.0, -2.5), (0.0, 3.0)]).unwrap(),
            FlowField::zeros(2, 1),
        ];
        write_flows(&p, &flows).unwrap();
        assert_eq!(read_flows(&p).unwrap(), flows);

        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        assert!(matches!(parse_flows(&bytes), Err(Error::Format(_))));
        let bytes = fs::read(&p).unwrap();
        assert!(matches!(
            parse_flows(&bytes[..bytes.len() - 3]),
            Err(Error::Corruption { .. })
        ));
    }
}
