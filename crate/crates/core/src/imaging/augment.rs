use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Frame, LUMA};
use crate::error::{Error, Result};

pub const JITTER_RANGE: (f64, f64) = (0.6, 1.4);
pub const DEFAULT_MIN_CROP_SCALE: f64 = 0.6;
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.5, 1.5);
const ASPECT_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const CROP_ATTEMPTS: usize = 32;

/// Normalized 1-D Gaussian taps for offsets `-⌈3σ⌉ ..= ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(frame: &Frame, sigma: f64) -> Result<Frame> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as isize;
    let (w, h) = (frame.width() as isize, frame.height() as isize);
    let src = frame.data();

    let mut horizontal = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = (x + k as isize - radius).clamp(0, w - 1);
                let i = ((y * w + sx) * 3) as usize;
                for c in 0..3 {
                    acc[c] += kv * src[i + c];
                }
            }
            let o = ((y * w + x) * 3) as usize;
            horizontal[o..o + 3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = (y + k as isize - radius).clamp(0, h - 1);
                let i = ((sy * w + x) * 3) as usize;
                for c in 0..3 {
                    acc[c] += kv * horizontal[i + c];
                }
            }
            let o = ((y * w + x) * 3) as usize;
            out[o..o + 3].copy_from_slice(&acc);
        }
    }
    Frame::new(frame.width(), frame.height(), out)
}

/// Multiplicative color factors; 1.0 leaves the image unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
        }
    }
}

impl JitterParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let (lo, hi) = JITTER_RANGE;
        Self {
            brightness: rng.random_range(lo..=hi),
            contrast: rng.random_range(lo..=hi),
            saturation: rng.random_range(lo..=hi),
        }
    }
}

/// Brightness, then contrast (blend with the mean luma), then saturation
/// (blend with each pixel's luma), clamping after every stage.
pub fn apply_jitter(frame: &Frame, p: JitterParams) -> Frame {
    let mut data = frame.data().to_vec();
    if p.brightness != 1.0 {
        data.iter_mut()
            .for_each(|v| *v = (*v * p.brightness).clamp(0.0, 1.0));
    }
    if p.contrast != 1.0 {
        let n = (data.len() / 3) as f64;
        let mean = data
            .chunks_exact(3)
            .map(|px| LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2])
            .sum::<f64>()
            / n;
        data.iter_mut()
            .for_each(|v| *v = (p.contrast * *v + (1.0 - p.contrast) * mean).clamp(0.0, 1.0));
    }
    if p.saturation != 1.0 {
        for px in data.chunks_exact_mut(3) {
            let gray = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
            for v in px.iter_mut() {
                *v = (p.saturation * *v + (1.0 - p.saturation) * gray).clamp(0.0, 1.0);
            }
        }
    }
    Frame::from_raw_unchecked(frame.width(), frame.height(), data)
}

pub fn color_jitter(frame: &Frame, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_jitter(frame, JitterParams::sample(&mut rng))
}

/// Axis-aligned rectangle in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl CropRect {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn aspect(&self) -> f64 {
        self.w / self.h
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= width as f64 + 1e-9
            && self.y + self.h <= height as f64 + 1e-9
    }
}

/// Samples a crop whose area fraction lies in `[min_scale, 1]` and whose
/// aspect ratio lies in `[3/4, 4/3]`, by rejection. If no sample fits, the
/// largest rectangle of the frame's own (clamped) aspect is used.
pub fn sample_crop<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    min_scale: f64,
    rng: &mut R,
) -> Result<CropRect> {
    if !(min_scale > 0.0 && min_scale <= 1.0) {
        return Err(Error::invalid(format!(
            "min_scale must be in (0, 1], got {min_scale}"
        )));
    }
    let (fw, fh) = (width as f64, height as f64);
    let area = fw * fh;
    let (alo, ahi) = (ASPECT_RANGE.0.ln(), ASPECT_RANGE.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let scale = if min_scale < 1.0 {
            rng.random_range(min_scale..=1.0)
        } else {
            1.0
        };
        let aspect = rng.random_range(alo..=ahi).exp();
        let w = (scale * area * aspect).sqrt();
        let h = (scale * area / aspect).sqrt();
        if w <= fw && h <= fh {
            let x = if fw > w { rng.random_range(0.0..=fw - w) } else { 0.0 };
            let y = if fh > h { rng.random_range(0.0..=fh - h) } else { 0.0 };
            return Ok(CropRect { x, y, w, h });
        }
    }
    let aspect = (fw / fh).clamp(ASPECT_RANGE.0, ASPECT_RANGE.1);
    let w = fw.min(fh * aspect);
    let h = w / aspect;
    Ok(CropRect {
        x: (fw - w) / 2.0,
        y: (fh - h) / 2.0,
        w,
        h,
    })
}

/// Bilinear resampling of `rect` to an `out_w × out_h` frame. Sample
/// positions use half-pixel centers; reads outside the frame clamp to the edge.
pub fn crop_resize(frame: &Frame, rect: CropRect, out_w: usize, out_h: usize) -> Result<Frame> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("resize to an empty frame"));
    }
    let (w, h) = (frame.width(), frame.height());
    let src = frame.data();
    let sx = rect.w / out_w as f64;
    let sy = rect.h / out_h as f64;
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|i| axis_sample(rect.x + (i as f64 + 0.5) * sx - 0.5, w))
        .collect();
    let mut data = Vec::with_capacity(out_w * out_h * 3);
    for j in 0..out_h {
        let (y0, y1, fy) = axis_sample(rect.y + (j as f64 + 0.5) * sy - 0.5, h);
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let p00 = src[(y0 * w + x0) * 3 + c];
                let p01 = src[(y0 * w + x1) * 3 + c];
                let p10 = src[(y1 * w + x0) * 3 + c];
                let p11 = src[(y1 * w + x1) * 3 + c];
                let top = p00 + (p01 - p00) * fx;
                let bottom = p10 + (p11 - p10) * fx;
                data.push(top + (bottom - top) * fy);
            }
        }
    }
    Frame::new(out_w, out_h, data)
}

fn axis_sample(pos: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let p = pos.clamp(0.0, max);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - i0 as f64)
}

pub fn random_crop_resize(frame: &Frame, min_scale: f64, seed: u64) -> Result<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rect = sample_crop(frame.width(), frame.height(), min_scale, &mut rng)?;
    crop_resize(frame, rect, frame.width(), frame.height())
}

/// The three augmentations used by the augmentation contrastive head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    Crop,
    Jitter,
    Blur,
}

impl Augmentation {
    pub fn name(self) -> &'static str {
        match self {
            Augmentation::Crop => "crop",
            Augmentation::Jitter => "jitter",
            Augmentation::Blur => "blur",
        }
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crop" => Ok(Augmentation::Crop),
            "jitter" => Ok(Augmentation::Jitter),
            "blur" => Ok(Augmentation::Blur),
            other => Err(Error::invalid(format!("unknown augmentation `{other}`"))),
        }
    }
}

/// Applies the listed augmentations in canonical order (crop, jitter, blur),
/// each with its own stream derived from `seed`.
pub fn augment(frame: &Frame, augs: &[Augmentation], seed: u64) -> Result<Frame> {
    let mut sorted = augs.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut out = frame.clone();
    for aug in sorted {
        let sub = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (aug as u64 + 1);
        out = match aug {
            Augmentation::Crop => random_crop_resize(&out, DEFAULT_MIN_CROP_SCALE, sub)?,
            Augmentation::Jitter => color_jitter(&out, sub),
            Augmentation::Blur => {
                let mut rng = ChaCha8Rng::seed_from_u64(sub);
                let sigma = rng.random_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1);
                gaussian_blur(&out, sigma)?
            }
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::tests::random_frame;

    #[test]
    fn blur_keeps_constant_frames() {
        let f = Frame::filled(12, 10, [0.2, 0.5, 0.9]).unwrap();
        let b = gaussian_blur(&f, 1.3).unwrap();
        for (x, y) in f.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_of_impulse_is_kernel_outer_product() {
        let sigma = 1.0;
        let mut f = Frame::filled(21, 21, [0.0; 3]).unwrap();
        f.set_pixel(10, 10, [1.0; 3]);
        let b = gaussian_blur(&f, sigma).unwrap();
        // Kernel-formula oracle: exp(-d²/2σ²) normalized over d ∈ [-3, 3].
        let z: f64 = (-3i32..=3).map(|d| (-(d * d) as f64 / 2.0).exp()).sum();
        let k = |d: i32| (-(d * d) as f64 / 2.0).exp() / z;
        for y in 0..21 {
            for x in 0..21 {
                let (dx, dy) = (x as i32 - 10, y as i32 - 10);
                let expected = if dx.abs() <= 3 && dy.abs() <= 3 { k(dx) * k(dy) } else { 0.0 };
                assert!((b.pixel(x, y)[0] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_rejects_nonpositive_sigma() {
        let f = random_frame(8, 8, 1);
        assert!(gaussian_blur(&f, 0.0).is_err());
        assert!(gaussian_blur(&f, -1.0).is_err());
    }

    #[test]
    fn jitter_identity_and_determinism() {
        let f = random_frame(10, 9, 3);
        assert_eq!(apply_jitter(&f, JitterParams::default()), f);
        assert_eq!(color_jitter(&f, 42), color_jitter(&f, 42));
        assert_ne!(color_jitter(&f, 42), color_jitter(&f, 43));
    }

    #[test]
    fn brightness_alone_matches_formula() {
        let f = random_frame(10, 9, 4);
        let out = apply_jitter(
            &f,
            JitterParams {
                brightness: 1.2,
                ..JitterParams::default()
            },
        );
        for (a, b) in f.data().iter().zip(out.data()) {
            assert_eq!(*b, (1.2 * a).min(1.0));
        }
    }

    #[test]
    fn full_crop_is_identity() {
        let f = random_frame(16, 16, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rect = sample_crop(16, 16, 1.0, &mut rng).unwrap();
        // Scale 1 on a square frame only fits at aspect 1.
        let full = CropRect { x: 0.0, y: 0.0, w: 16.0, h: 16.0 };
        assert_eq!(rect, full);
        assert_eq!(crop_resize(&f, full, 16, 16).unwrap(), f);
    }

    #[test]
    fn crops_are_deterministic() {
        let f = random_frame(20, 16, 6);
        assert_eq!(
            random_crop_resize(&f, 0.6, 9).unwrap(),
            random_crop_resize(&f, 0.6, 9).unwrap()
        );
        assert!(random_crop_resize(&f, 0.0, 9).is_err());
    }

    #[test]
    fn augmentations_preserve_validity() {
        let f = random_frame(24, 20, 7);
        for seed in 0..20 {
            let out = augment(
                &f,
                &[Augmentation::Blur, Augmentation::Crop, Augmentation::Jitter],
                seed,
            )
            .unwrap();
            assert_eq!((out.width(), out.height()), (24, 20));
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
