//! Atmospheric degradation model, transmission from depth, sky segmentation
//! and atmospheric-light estimation.
//!
//! Everything here is a pure function of its inputs.

mod airlight;
mod physics;

pub use airlight::{
    dark_channel, estimate_airlight, estimate_airlight_dark_channel, estimate_airlight_sky,
    otsu_bin, otsu_level, otsu_threshold, segment_sky, AirlightEstimator, AirlightMode,
    AIRLIGHT_PATCH, DARK_CHANNEL_TOP_FRACTION, OTSU_BINS, SKY_MIN_FRACTION, SKY_ROW_FRACTION,
};
pub use physics::{invert_fog, synthesize_fog, transmission_from_depth};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Transmission floor; keeps the inverse model and its gradients finite.
pub const T_MIN: f64 = 0.01;

/// Smallest image side accepted anywhere in the pipeline.
pub const MIN_IMAGE_SIDE: usize = 8;

/// Value range an [`ImageTensor`] is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeTag {
    /// `[0, 1]`, used by the physics model and the metrics.
    Unit,
    /// `[-1, 1]`, used by the networks.
    Signed,
}

impl RangeTag {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            RangeTag::Unit => (0.0, 1.0),
            RangeTag::Signed => (-1.0, 1.0),
        }
    }
}

/// An `H×W×3` image tagged with its value range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T = f64> {
    pixels: Tensor<T>,
    range: RangeTag,
}

impl<T: Real> ImageTensor<T> {
    /// Wraps `pixels`, clamping into the declared range.
    pub fn new(mut pixels: Tensor<T>, range: RangeTag) -> Result<Self> {
        let s = pixels.shape();
        if s.c != 3 {
            return Err(Error::Shape(format!("image must have 3 channels, got {}", s.c)));
        }
        if s.h < MIN_IMAGE_SIDE || s.w < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {}x{}",
                s.h, s.w
            )));
        }
        let (lo, hi) = range.bounds();
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        pixels.map_inplace(|v| v.max(lo).min(hi));
        Ok(ImageTensor { pixels, range })
    }

    pub fn filled(h: usize, w: usize, rgb: [f64; 3], range: RangeTag) -> Result<Self> {
        Self::new(
            Tensor::from_fn(Shape::new(3, h, w), |c, _, _| T::lit(rgb[c])),
            range,
        )
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor<T> {
        self.pixels
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn to_range(&self, range: RangeTag) -> Self {
        if range == self.range {
            return self.clone();
        }
        let two = T::lit(2.0);
        let pixels = match range {
            RangeTag::Unit => self.pixels.map(|v| (v + T::one()) / two),
            RangeTag::Signed => self.pixels.map(|v| v * two - T::one()),
        };
        ImageTensor { pixels, range }
    }

    pub fn to_unit(&self) -> Self {
        self.to_range(RangeTag::Unit)
    }

    pub fn to_signed(&self) -> Self {
        self.to_range(RangeTag::Signed)
    }

    pub fn cast<U: Real>(&self) -> ImageTensor<U> {
        ImageTensor {
            pixels: self.pixels.cast(),
            range: self.range,
        }
    }

    /// Per-pixel mean of the three channels, in the image's own range.
    pub fn gray(&self) -> Tensor<T> {
        let third = T::lit(1.0 / 3.0);
        let p = &self.pixels;
        Tensor::from_fn(Shape::new(1, p.height(), p.width()), |_, y, x| {
            (p.at(0, y, x) + p.at(1, y, x) + p.at(2, y, x)) * third
        })
    }

    pub fn same_size(&self, other_h: usize, other_w: usize, what: &str) -> Result<()> {
        if self.height() != other_h || self.width() != other_w {
            return Err(Error::Shape(format!(
                "{what}: image is {}x{}, other operand is {other_h}x{other_w}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

/// Per-pixel transmission, floored at [`T_MIN`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap<T = f64> {
    values: Tensor<T>,
}

impl<T: Real> TransmissionMap<T> {
    pub fn new(mut values: Tensor<T>) -> Result<Self> {
        if values.channels() != 1 {
            return Err(Error::Shape("transmission map must be single-channel".into()));
        }
        let floor = T::lit(T_MIN);
        values.map_inplace(|v| v.max(floor).min(T::one()));
        Ok(TransmissionMap { values })
    }

    pub fn uniform(h: usize, w: usize, t: f64) -> Self {
        Self::new(Tensor::full(Shape::new(1, h, w), T::lit(t))).expect("single channel")
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }
}

/// Global airlight colour, each component in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtmosphericLight {
    pub rgb: [f64; 3],
}

impl AtmosphericLight {
    pub fn new(rgb: [f64; 3]) -> Result<Self> {
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("airlight", format!("components must lie in [0,1], got {rgb:?}")));
        }
        Ok(AtmosphericLight { rgb })
    }

    pub fn gray(v: f64) -> Self {
        AtmosphericLight { rgb: [v.clamp(0.0, 1.0); 3] }
    }

    /// Collapses to the cross-channel mean.
    pub fn to_scalar(self) -> Self {
        let m = self.rgb.iter().sum::<f64>() / 3.0;
        AtmosphericLight { rgb: [m; 3] }
    }
}

/// Boolean sky support with its cached coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct SkyMask {
    mask: Vec<bool>,
    height: usize,
    width: usize,
    sky_fraction: f64,
}

impl SkyMask {
    pub fn new(mask: Vec<bool>, height: usize, width: usize) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {} entries for {height}x{width}",
                mask.len()
            )));
        }
        let on = mask.iter().filter(|&&m| m).count();
        let sky_fraction = if mask.is_empty() { 0.0 } else { on as f64 / mask.len() as f64 };
        Ok(SkyMask {
            mask,
            height,
            width,
            sky_fraction,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn sky_fraction(&self) -> f64 {
        self.sky_fraction
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Non-negative scene depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Tensor<f64>,
}

impl DepthMap {
    pub fn new(values: Tensor<f64>) -> Result<Self> {
        if values.channels() != 1 {
            return Err(Error::Shape("depth map must be single-channel".into()));
        }
        if values.data().iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::param("depth", "values must be finite and non-negative"));
        }
        Ok(DepthMap { values })
    }

    /// Linear ramp from `near` at the bottom row to `far` at the top row.
    pub fn vertical_ramp(h: usize, w: usize, near: f64, far: f64) -> Result<Self> {
        let denom = (h.max(2) - 1) as f64;
        Self::new(Tensor::from_fn(Shape::new(1, h, w), |_, y, _| {
            far + (near - far) * y as f64 / denom
        }))
    }

    pub fn values(&self) -> &Tensor<f64> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }
}
