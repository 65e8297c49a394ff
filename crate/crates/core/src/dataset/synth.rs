use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Episode, EpisodeDataset, LabelSchema};
use crate::error::{Error, Result};
use crate::imaging::Frame;

/// Background values stay at or below this level; sprite channels are 1.0.
const BACKGROUND_MAX: u8 = 64;
const BACKGROUND_TILE: usize = 4;

/// Parameters of the moving-sprite generator. Sprite `k` lights colour
/// channel `k` (red, green, blue), so at most three sprites are supported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub frame_size: usize,
    pub episodes: usize,
    pub frames_per_episode: usize,
    pub sprites: usize,
    pub sprite_size: usize,
    pub min_speed: usize,
    pub max_speed: usize,
    pub buckets: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            frame_size: 32,
            episodes: 4,
            frames_per_episode: 50,
            sprites: 2,
            sprite_size: 4,
            min_speed: 1,
            max_speed: 3,
            buckets: 4,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("synthetic spec: {m}")));
        if self.frame_size < crate::imaging::MIN_FRAME_SIDE {
            return fail(format!("frame size {} is below 8", self.frame_size));
        }
        if self.sprites == 0 || self.sprites > 3 {
            return fail(format!("{} sprites requested, 1 to 3 supported", self.sprites));
        }
        if self.sprite_size == 0 || self.sprite_size >= self.frame_size {
            return fail(format!(
                "sprite size {} does not fit a {}px frame",
                self.sprite_size, self.frame_size
            ));
        }
        let travel = self.frame_size - self.sprite_size;
        if self.min_speed == 0 || self.min_speed > self.max_speed || self.max_speed > travel {
            return fail(format!(
                "speeds {}..={} must be positive and at most {travel}",
                self.min_speed, self.max_speed
            ));
        }
        if self.buckets < 2 || self.buckets > self.frame_size {
            return fail(format!("bucket count {} must be in 2..={}", self.buckets, self.frame_size));
        }
        if self.episodes == 0 || self.frames_per_episode == 0 {
            return fail("empty dataset".into());
        }
        Ok(())
    }

    /// Largest top-left coordinate a sprite can take.
    pub fn travel(&self) -> i64 {
        (self.frame_size - self.sprite_size) as i64
    }

    /// Bucket of a sprite whose top-left coordinate is `pos`: the sprite
    /// center `pos + size/2` quantized into `buckets` equal bins.
    pub fn bucket(&self, pos: i64) -> usize {
        let center = pos as f64 + self.sprite_size as f64 / 2.0;
        ((center * self.buckets as f64 / self.frame_size as f64).floor() as usize).min(self.buckets - 1)
    }

    fn category_names(&self) -> Vec<(String, usize)> {
        (0..self.sprites)
            .flat_map(|k| {
                [
                    (format!("sprite{k}_x"), self.buckets),
                    (format!("sprite{k}_y"), self.buckets),
                ]
            })
            .collect()
    }
}

/// Initial state and constant velocity of one sprite in one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpriteTrack {
    pub x0: i64,
    pub y0: i64,
    pub vx: i64,
    pub vy: i64,
}

/// One step of reflecting motion on `[0, travel]`.
fn step(pos: &mut i64, vel: &mut i64, travel: i64) {
    *pos += *vel;
    if *pos < 0 {
        *pos = -*pos;
        *vel = -*vel;
    } else if *pos > travel {
        *pos = 2 * travel - *pos;
        *vel = -*vel;
    }
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<EpisodeDataset> {
    generate_synthetic_with_truth(spec).map(|(ds, _)| ds)
}

/// Generates the dataset together with every sprite's initial state.
pub fn generate_synthetic_with_truth(
    spec: &SynthSpec,
) -> Result<(EpisodeDataset, Vec<Vec<SpriteTrack>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.frame_size;
    let background = background(n, &mut rng);
    let travel = spec.travel();

    let mut episodes = Vec::with_capacity(spec.episodes);
    let mut truth = Vec::with_capacity(spec.episodes);
    for e in 0..spec.episodes {
        let tracks: Vec<SpriteTrack> = (0..spec.sprites)
            .map(|_| {
                let mut vel = || {
                    let s = rng.random_range(spec.min_speed..=spec.max_speed) as i64;
                    if rng.random::<bool>() {
                        s
                    } else {
                        -s
                    }
                };
                let (vx, vy) = (vel(), vel());
                SpriteTrack {
                    x0: rng.random_range(0..=travel),
                    y0: rng.random_range(0..=travel),
                    vx,
                    vy,
                }
            })
            .collect();
        let mut state: Vec<(i64, i64, i64, i64)> =
            tracks.iter().map(|t| (t.x0, t.y0, t.vx, t.vy)).collect();

        let mut frames = Vec::with_capacity(spec.frames_per_episode);
        let mut labels = Vec::with_capacity(spec.frames_per_episode);
        for t in 0..spec.frames_per_episode {
            if t > 0 {
                for s in state.iter_mut() {
                    step(&mut s.0, &mut s.2, travel);
                    step(&mut s.1, &mut s.3, travel);
                }
            }
            let mut data = background.clone();
            let mut row = Vec::with_capacity(spec.sprites * 2);
            for (k, &(x, y, _, _)) in state.iter().enumerate() {
                for py in y as usize..y as usize + spec.sprite_size {
                    for px in x as usize..x as usize + spec.sprite_size {
                        data[(py * n + px) * 3 + k] = 1.0;
                    }
                }
                row.push(spec.bucket(x));
                row.push(spec.bucket(y));
            }
            frames.push(Frame::new(n, n, data)?);
            labels.push(row);
        }
        episodes.push(Episode {
            id: e,
            frame_ids: (0..spec.frames_per_episode).collect(),
            frames,
            labels,
        });
        truth.push(tracks);
    }
    let schema = LabelSchema::new(spec.category_names())?;
    Ok((EpisodeDataset::new(schema, episodes)?, truth))
}

/// Static tiled texture in multiples of 1/255 so PNG round trips are exact.
fn background(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let tiles = n.div_ceil(BACKGROUND_TILE);
    let tile_colors: Vec<[f64; 3]> = (0..tiles * tiles)
        .map(|_| std::array::from_fn(|_| rng.random_range(0..=BACKGROUND_MAX) as f64 / 255.0))
        .collect();
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            data.extend_from_slice(&tile_colors[(y / BACKGROUND_TILE) * tiles + x / BACKGROUND_TILE]);
        }
    }
    data
}
