use serde::{Deserialize, Serialize};

use super::{AtmosphericLight, ImageTensor, RangeTag, SkyMask};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Patch size of the dark-channel airlight fallback.
pub const AIRLIGHT_PATCH: usize = 15;
/// Fraction of brightest dark-channel pixels considered by the fallback.
pub const DARK_CHANNEL_TOP_FRACTION: f64 = 0.001;
/// Minimum sky coverage for the sky-mean estimator.
pub const SKY_MIN_FRACTION: f64 = 0.02;
/// Sky pixels must lie in this top fraction of rows.
pub const SKY_ROW_FRACTION: f64 = 0.4;
pub const OTSU_BINS: usize = 256;

/// Whether airlight keeps one value per channel or collapses to their mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AirlightMode {
    #[default]
    PerChannel,
    Scalar,
}

/// Which estimator produced an airlight value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AirlightEstimator {
    Sky,
    DarkChannel,
}

/// Per-pixel channel minimum followed by a `patch×patch` minimum filter with
/// edge replication.
pub fn dark_channel<T: Real>(image: &ImageTensor<T>, patch: usize) -> Result<Tensor<T>> {
    if patch == 0 || patch % 2 == 0 {
        return Err(Error::param("patch", format!("must be odd and >= 1, got {patch}")));
    }
    let p = image.pixels();
    let (h, w) = (p.height(), p.width());
    let r = (patch / 2) as isize;
    let chan_min: Vec<T> = (0..h * w)
        .map(|i| p.data()[i].min(p.data()[h * w + i]).min(p.data()[2 * h * w + i]))
        .collect();
    // The square minimum with clamped indices is separable.
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut m = T::infinity();
            for dx in -r..=r {
                m = m.min(chan_min[y * w + clamp(x as isize + dx, w)]);
            }
            rows[y * w + x] = m;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut m = T::infinity();
            for dy in -r..=r {
                m = m.min(rows[clamp(y as isize + dy, h) * w + x]);
            }
            out[y * w + x] = m;
        }
    }
    Tensor::from_vec(Shape::new(1, h, w), out)
}

/// Histogram bin of a `[0,1]` value: `floor(v·256)`, with 1.0 in the last bin.
#[inline]
pub fn otsu_bin(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

/// Otsu split level `k`: pixels with `bin >= k` form the bright class.
///
/// Between-class variance is compared exactly as the rational
/// `(n1·S0 − n0·S1)² / (n0·n1)` over integer bin sums; ties go to the
/// smallest `k`. Returns `None` when fewer than two bins are occupied.
pub fn otsu_level(gray: &[f64]) -> Option<usize> {
    let mut hist = [0u64; OTSU_BINS];
    for &v in gray {
        hist[otsu_bin(v)] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total_n: u64 = hist.iter().sum();
    let total_s: u64 = hist.iter().enumerate().map(|(b, &c)| b as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, u128, u128)> = None;
    for k in 1..OTSU_BINS {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total_s - s0;
        let diff = (n1 as i128) * (s0 as i128) - (n0 as i128) * (s1 as i128);
        let num = (diff * diff) as u128;
        let den = n0 as u128 * n1 as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => match (num.checked_mul(bd), bn.checked_mul(den)) {
                (Some(l), Some(r)) => l > r,
                // Only reachable for images with tens of millions of pixels.
                _ => num as f64 / den as f64 > bn as f64 / bd as f64,
            },
        };
        if better {
            best = Some((k, num, den));
        }
    }
    best.map(|(k, _, _)| k)
}

/// Otsu threshold on a single-channel `[0,1]` map. A map whose values all
/// fall in one histogram bin returns its first value.
pub fn otsu_threshold<T: Real>(gray: &Tensor<T>) -> Result<f64> {
    if gray.is_empty() {
        return Err(Error::param("gray", "empty map"));
    }
    let vals: Vec<f64> = gray.data().iter().map(|v| v.as_f64()).collect();
    Ok(match otsu_level(&vals) {
        Some(k) => k as f64 / OTSU_BINS as f64,
        None => vals[0],
    })
}

/// Bright (Otsu) pixels restricted to the top rows of the frame.
pub fn segment_sky<T: Real>(image: &ImageTensor<T>) -> SkyMask {
    let unit = image.to_unit();
    let gray: Vec<f64> = unit.gray().data().iter().map(|v| v.as_f64()).collect();
    let (h, w) = (unit.height(), unit.width());
    let max_row = (SKY_ROW_FRACTION * h as f64).ceil() as usize;
    let mask = match otsu_level(&gray) {
        Some(k) => gray
            .iter()
            .enumerate()
            .map(|(i, &g)| i / w < max_row && otsu_bin(g) >= k)
            .collect(),
        None => vec![false; h * w],
    };
    SkyMask::new(mask, h, w).expect("mask sized from image")
}

/// Per-channel mean over the sky support.
pub fn estimate_airlight_sky<T: Real>(image: &ImageTensor<T>, mask: &SkyMask) -> Result<AtmosphericLight> {
    image.same_size(mask.height(), mask.width(), "estimate_airlight_sky")?;
    if mask.sky_fraction() < SKY_MIN_FRACTION || mask.count() == 0 {
        return Err(Error::InsufficientSky {
            fraction: mask.sky_fraction(),
            min: SKY_MIN_FRACTION,
        });
    }
    let unit = image.to_unit();
    let p = unit.pixels();
    let plane = p.shape().plane();
    let mut acc = [0.0f64; 3];
    for (i, _) in mask.mask().iter().enumerate().filter(|(_, &m)| m) {
        for (c, a) in acc.iter_mut().enumerate() {
            *a += p.data()[c * plane + i].as_f64();
        }
    }
    let n = mask.count() as f64;
    AtmosphericLight::new(acc.map(|s| (s / n).clamp(0.0, 1.0)))
}

/// Brightest input pixel (by RGB mean) among the top 0.1% dark-channel pixels.
///
/// Pixels tied with the last selected dark-channel value are included, and
/// the intensity argmax resolves ties to the lowest pixel index.
pub fn estimate_airlight_dark_channel<T: Real>(image: &ImageTensor<T>) -> AtmosphericLight {
    let unit = image.to_unit();
    let dark = dark_channel(&unit, AIRLIGHT_PATCH).expect("fixed odd patch");
    let n = dark.len();
    let take = ((DARK_CHANNEL_TOP_FRACTION * n as f64).ceil() as usize).clamp(1, n);
    let mut ranked: Vec<T> = dark.data().to_vec();
    ranked.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let cutoff = ranked[take - 1];
    let p = unit.pixels();
    let plane = p.shape().plane();
    let intensity = |i: usize| p.data()[i] + p.data()[plane + i] + p.data()[2 * plane + i];
    let mut best: Option<usize> = None;
    for i in (0..n).filter(|&i| dark.data()[i] >= cutoff) {
        if best.map_or(true, |b| intensity(i) > intensity(b)) {
            best = Some(i);
        }
    }
    let best = best.expect("at least one pixel reaches the cutoff");
    AtmosphericLight {
        rgb: [0, 1, 2].map(|c| p.data()[c * plane + best].as_f64().clamp(0.0, 1.0)),
    }
}

/// Sky-mean airlight with the dark-channel fallback when the sky is too small.
pub fn estimate_airlight<T: Real>(
    image: &ImageTensor<T>,
    mode: AirlightMode,
) -> (AtmosphericLight, AirlightEstimator) {
    let mask = segment_sky(image);
    let (a, which) = match estimate_airlight_sky(image, &mask) {
        Ok(a) => (a, AirlightEstimator::Sky),
        Err(_) => (estimate_airlight_dark_channel(image), AirlightEstimator::DarkChannel),
    };
    match mode {
        AirlightMode::PerChannel => (a, which),
        AirlightMode::Scalar => (a.to_scalar(), which),
    }
}

impl<T: Real> ImageTensor<T> {
    /// Convenience for tests and the CLI: a unit-range image from a closure.
    pub fn from_unit_fn(h: usize, w: usize, f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        ImageTensor::new(Tensor::from_fn(Shape::new(3, h, w), f), RangeTag::Unit)
    }
}
