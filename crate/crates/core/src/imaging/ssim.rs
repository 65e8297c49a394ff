use super::ScalarField;
use crate::error::{Error, Result};

/// Uniform-window SSIM settings. The constants assume a dynamic range of 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::with_range(7, 1.0)
    }
}

impl SsimParams {
    pub fn with_range(window: usize, dynamic_range: f64) -> Self {
        Self {
            window,
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
        }
    }
}

/// Inclusive prefix sums with a zero row/column in front.
struct Integral {
    stride: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(width: usize, height: usize, value: impl Fn(usize) -> f64) -> Self {
        let stride = width + 1;
        let mut sums = vec![0.0; stride * (height + 1)];
        for y in 0..height {
            let mut row = 0.0;
            for x in 0..width {
                row += value(y * width + x);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { stride, sums }
    }

    /// Sum over `[x0, x1) × [y0, y1)`.
    fn rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.stride;
        self.sums[y1 * s + x1] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0]
            + self.sums[y0 * s + x0]
    }
}

/// Per-pixel SSIM over a sliding square window with uniform weights.
///
/// Pixels whose window would leave the image take the value of the nearest
/// pixel whose window fits, so the map has the input's dimensions.
pub fn ssim_map(a: &ScalarField, b: &ScalarField, params: SsimParams) -> Result<ScalarField> {
    if !a.same_size(b) {
        return Err(Error::dim(format!(
            "ssim of {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let win = params.window;
    if win % 2 == 0 || win == 0 {
        return Err(Error::invalid(format!("ssim window must be odd, got {win}")));
    }
    let (w, h) = (a.width(), a.height());
    if win > w.min(h) {
        return Err(Error::invalid(format!(
            "ssim window {win} exceeds field {w}x{h}"
        )));
    }
    let (da, db) = (a.data(), b.data());
    let ia = Integral::new(w, h, |i| da[i]);
    let ib = Integral::new(w, h, |i| db[i]);
    let iaa = Integral::new(w, h, |i| da[i] * da[i]);
    let ibb = Integral::new(w, h, |i| db[i] * db[i]);
    let iab = Integral::new(w, h, |i| da[i] * db[i]);

    let r = win / 2;
    let n = (win * win) as f64;
    let valid_w = w - 2 * r;
    let valid_h = h - 2 * r;
    let mut valid = vec![0.0; valid_w * valid_h];
    for vy in 0..valid_h {
        for vx in 0..valid_w {
            let (x1, y1) = (vx + win, vy + win);
            let mu_a = ia.rect(vx, vy, x1, y1) / n;
            let mu_b = ib.rect(vx, vy, x1, y1) / n;
            let var_a = (iaa.rect(vx, vy, x1, y1) / n - mu_a * mu_a).max(0.0);
            let var_b = (ibb.rect(vx, vy, x1, y1) / n - mu_b * mu_b).max(0.0);
            let cov = iab.rect(vx, vy, x1, y1) / n - mu_a * mu_b;
            valid[vy * valid_w + vx] = ssim_formula(mu_a, mu_b, var_a, var_b, cov, params);
        }
    }

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let vy = y.clamp(r, h - 1 - r) - r;
        for x in 0..w {
            let vx = x.clamp(r, w - 1 - r) - r;
            out.push(valid[vy * valid_w + vx]);
        }
    }
    ScalarField::new(w, h, out)
}

pub(crate) fn ssim_formula(
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
    p: SsimParams,
) -> f64 {
    let num = (2.0 * mu_a * mu_b + p.c1) * (2.0 * cov + p.c2);
    let den = (mu_a * mu_a + mu_b * mu_b + p.c1) * (var_a + var_b + p.c2);
    (num / den).clamp(-1.0, 1.0)
}
