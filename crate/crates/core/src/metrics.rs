//! Blind restoration quality: visible-edge gain `e`, mean visibility ratio
//! `r̄`, newly saturated fraction `δ`, a dark-channel fog-density proxy and a
//! per-pixel colourfulness weight map.
//!
//! Visible edges use a fixed gradient threshold rather than an adaptive
//! visibility level, so absolute values are only comparable within this
//! implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fogmodel::{dark_channel, ImageTensor, AIRLIGHT_PATCH};
use crate::tensor::{Real, Shape, Tensor};

/// Central-difference gradient magnitude at or above which a pixel is a visible edge.
pub const EDGE_THRESHOLD: f64 = 0.05;
/// Floor applied to gradient magnitudes before taking ratios.
pub const RATIO_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaveReport {
    /// Relative gain in visible edges.
    pub e: f64,
    /// Geometric mean of gradient ratios over visible edges after restoration.
    pub r_bar: f64,
    /// Fraction of pixels saturated after restoration but not before.
    pub delta: f64,
}

/// `|∇I|` with central differences; indices are clamped at the border, so
/// border pixels use half the one-sided difference.
pub fn gradient_magnitude(gray: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (gray.height(), gray.width());
    Tensor::from_fn(Shape::new(1, h, w), |_, y, x| {
        let gx = (gray.at(0, y, (x + 1).min(w - 1)) - gray.at(0, y, x.saturating_sub(1))) / 2.0;
        let gy = (gray.at(0, (y + 1).min(h - 1), x) - gray.at(0, y.saturating_sub(1), x)) / 2.0;
        (gx * gx + gy * gy).sqrt()
    })
}

/// Pixels whose gradient magnitude reaches [`EDGE_THRESHOLD`].
pub fn visible_edges(gray: &Tensor<f64>) -> Vec<bool> {
    gradient_magnitude(gray).data().iter().map(|&g| g >= EDGE_THRESHOLD).collect()
}

fn saturated(img: &Tensor<f64>, i: usize) -> bool {
    let plane = img.height() * img.width();
    (0..3).any(|c| {
        let v = img.data()[c * plane + i];
        v <= 0.0 || v >= 1.0
    })
}

pub fn bave_indicators<T: Real>(before: &ImageTensor<T>, after: &ImageTensor<T>) -> Result<BaveReport> {
    let (b, a) = (before.to_unit().cast::<f64>(), after.to_unit().cast::<f64>());
    if b.height() != a.height() || b.width() != a.width() {
        return Err(Error::Shape(format!(
            "bave_indicators: {}x{} vs {}x{}",
            b.height(),
            b.width(),
            a.height(),
            a.width()
        )));
    }
    let (gb, ga) = (gradient_magnitude(&b.gray()), gradient_magnitude(&a.gray()));
    let nb = gb.data().iter().filter(|&&g| g >= EDGE_THRESHOLD).count();
    let na = ga.data().iter().filter(|&&g| g >= EDGE_THRESHOLD).count();
    let e = (na as f64 - nb as f64) / nb.max(1) as f64;
    let (mut log_sum, mut n) = (0.0, 0usize);
    for (&x, &y) in gb.data().iter().zip(ga.data()) {
        if y >= EDGE_THRESHOLD {
            log_sum += (y.max(RATIO_FLOOR) / x.max(RATIO_FLOOR)).ln();
            n += 1;
        }
    }
    let r_bar = if n == 0 { 1.0 } else { (log_sum / n as f64).exp() };
    let plane = b.height() * b.width();
    let newly = (0..plane)
        .filter(|&i| saturated(a.pixels(), i) && !saturated(b.pixels(), i))
        .count();
    Ok(BaveReport {
        e,
        r_bar,
        delta: newly as f64 / plane as f64,
    })
}

/// Mean of the 15×15 dark channel; higher means foggier.
pub fn fog_density_proxy<T: Real>(image: &ImageTensor<T>) -> f64 {
    let dc = dark_channel(&image.to_unit(), AIRLIGHT_PATCH).expect("odd patch");
    dc.data().iter().map(|v| v.as_f64()).sum::<f64>() / dc.len() as f64
}

/// Standard deviation of each pixel's RGB triple about its mean, divided by
/// the image maximum when that is nonzero.
pub fn luminance_weight_map<T: Real>(image: &ImageTensor<T>) -> Tensor<f64> {
    let u = image.to_unit().cast::<f64>();
    let p = u.pixels();
    let mut m = Tensor::from_fn(Shape::new(1, p.height(), p.width()), |_, y, x| {
        let rgb = [0, 1, 2].map(|c| p.at(c, y, x));
        let mu = rgb.iter().sum::<f64>() / 3.0;
        (rgb.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 3.0).sqrt()
    });
    let (_, hi) = m.min_max();
    if hi > 0.0 {
        m.map_inplace(|v| v / hi);
    }
    m
}
