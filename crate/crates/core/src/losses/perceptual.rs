use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::Layer;
use crate::ops::{max_pool2, max_pool2_backward, unit_backward, unit_forward, Activation, LayerSpec, UnitCache};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualBackend {
    /// Four frozen He-initialised convolutions; needs no external weights.
    #[default]
    SeededRandomStack,
    /// The 13-conv feature stack of the 16-layer ImageNet classifier, loaded
    /// from a safetensors file.
    Pretrained16Layer,
}

/// `(out_channels, tensor key index)` of each conv in the 16-layer feature
/// stack; a 2×2 max pool follows convs 2, 4, 7, 10 and 13.
pub const VGG16_CONVS: [(usize, usize); 13] = [
    (64, 0),
    (64, 2),
    (128, 5),
    (128, 7),
    (256, 10),
    (256, 12),
    (256, 14),
    (512, 17),
    (512, 19),
    (512, 21),
    (512, 24),
    (512, 26),
    (512, 28),
];
const VGG16_POOL_AFTER: [usize; 5] = [2, 4, 7, 10, 13];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Seed of the random backend's weights.
pub const RANDOM_STACK_SEED: u64 = 0x7e5e_ed00;
const RANDOM_STACK_STRIDES: [usize; 4] = [2, 2, 2, 1];
const RANDOM_STACK_WIDTH: usize = 64;

/// Frozen feature extractor. Input is a signed-range image; the output is the
/// activation after conv number `layer_index` (1-based).
#[derive(Debug, Clone)]
pub struct PerceptualExtractor<T> {
    backend: PerceptualBackend,
    layer_index: usize,
    layers: Vec<Layer<T>>,
    pool_after: Vec<bool>,
    /// Per-channel `x·scale + shift` applied before the first conv.
    scale: [f64; 3],
    shift: [f64; 3],
}

/// Saved activations of one extractor pass.
pub struct PerceptualTrace<T> {
    units: Vec<UnitCache<T>>,
    pools: Vec<Option<(Shape, Vec<usize>)>>,
}

impl<T: Real> PerceptualExtractor<T> {
    /// Default depth is the last of the three downsampling stages.
    pub const DEFAULT_RANDOM_LAYER: usize = 3;
    /// Last activation of the third stage of the 16-layer stack.
    pub const DEFAULT_PRETRAINED_LAYER: usize = 7;

    pub fn seeded_random(layer_index: usize, seed: u64) -> Result<Self> {
        if !(1..=RANDOM_STACK_STRIDES.len()).contains(&layer_index) {
            return Err(Error::param(
                "perceptual.layer_index",
                format!("random stack has {} layers, got {layer_index}", RANDOM_STACK_STRIDES.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, &stride) in RANDOM_STACK_STRIDES.iter().take(layer_index).enumerate() {
            let spec = LayerSpec::conv(format!("p{}", i + 1), cin, RANDOM_STACK_WIDTH, 3, stride).with_norm(false);
            let normal = Normal::new(0.0, (2.0 / spec.fan_in() as f64).sqrt()).expect("valid std");
            let weight = (0..spec.weight_len()).map(|_| T::lit(normal.sample(&mut rng))).collect();
            layers.push(Layer {
                bias: vec![T::zero(); spec.out_ch],
                spec,
                weight,
            });
            cin = RANDOM_STACK_WIDTH;
        }
        Ok(PerceptualExtractor {
            backend: PerceptualBackend::SeededRandomStack,
            layer_index,
            pool_after: vec![false; layers.len()],
            layers,
            scale: [1.0; 3],
            shift: [0.0; 3],
        })
    }

    /// Loads the first `layer_index` convs of the 16-layer stack from a
    /// safetensors file with keys `features.N.weight` / `features.N.bias`.
    pub fn pretrained(path: &Path, layer_index: usize) -> Result<Self> {
        if !(1..=VGG16_CONVS.len()).contains(&layer_index) {
            return Err(Error::param(
                "perceptual.layer_index",
                format!("16-layer stack has {} convs, got {layer_index}", VGG16_CONVS.len()),
            ));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let fmt = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| fmt(e.to_string()))?;
        let read = |key: String, dims: &[usize]| -> Result<Vec<T>> {
            let t = st.tensor(&key).map_err(|e| fmt(format!("{key}: {e}")))?;
            if t.dtype() != safetensors::Dtype::F32 {
                return Err(fmt(format!("{key}: expected F32, found {:?}", t.dtype())));
            }
            if t.shape() != dims {
                return Err(fmt(format!("{key}: expected shape {dims:?}, found {:?}", t.shape())));
            }
            Ok(t.data()
                .chunks_exact(4)
                .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect())
        };
        let mut layers = Vec::new();
        let mut pool_after = Vec::new();
        let mut cin = 3;
        for (i, &(cout, key)) in VGG16_CONVS.iter().take(layer_index).enumerate() {
            let spec = LayerSpec::conv(format!("features.{key}"), cin, cout, 3, 1).with_norm(false);
            let weight = read(format!("features.{key}.weight"), &[cout, cin, 3, 3])?;
            let bias = read(format!("features.{key}.bias"), &[cout])?;
            layers.push(Layer { spec, weight, bias });
            pool_after.push(VGG16_POOL_AFTER.contains(&(i + 1)) && i + 1 < layer_index);
            cin = cout;
        }
        // signed -> unit -> ImageNet-normalised
        let scale = [0, 1, 2].map(|c| 0.5 / IMAGENET_STD[c]);
        let shift = [0, 1, 2].map(|c| (0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
        Ok(PerceptualExtractor {
            backend: PerceptualBackend::Pretrained16Layer,
            layer_index,
            layers,
            pool_after,
            scale,
            shift,
        })
    }

    pub fn backend(&self) -> PerceptualBackend {
        self.backend
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn cast<U: Real>(&self) -> PerceptualExtractor<U> {
        PerceptualExtractor {
            backend: self.backend,
            layer_index: self.layer_index,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    weight: l.weight.iter().map(|v| U::lit(v.as_f64())).collect(),
                    bias: l.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
            pool_after: self.pool_after.clone(),
            scale: self.scale,
            shift: self.shift,
        }
    }

    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.features_traced(x).map(|(f, _)| f)
    }

    pub fn features_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, PerceptualTrace<T>)> {
        if x.channels() != 3 {
            return Err(Error::Shape(format!("perceptual input must be 3-channel, got {}", x.shape())));
        }
        let (scale, shift) = (self.scale.map(T::lit), self.shift.map(T::lit));
        let mut h = Tensor::from_fn(x.shape(), |c, y, xx| x.at(c, y, xx) * scale[c] + shift[c]);
        let mut units = Vec::with_capacity(self.layers.len());
        let mut pools = Vec::with_capacity(self.layers.len());
        for (l, &pool) in self.layers.iter().zip(&self.pool_after) {
            debug_assert_eq!(l.spec.act, Activation::Relu);
            let (y, c) = unit_forward(&l.spec, &l.weight, &l.bias, &h);
            units.push(c);
            if pool {
                let (p, arg) = max_pool2(&y);
                pools.push(Some((y.shape(), arg)));
                h = p;
            } else {
                pools.push(None);
                h = y;
            }
        }
        Ok((h, PerceptualTrace { units, pools }))
    }

    /// Gradient with respect to the input image; the weights stay frozen.
    pub fn backward(&self, trace: &PerceptualTrace<T>, dfeat: &Tensor<T>) -> Tensor<T> {
        let mut g = dfeat.clone();
        for i in (0..self.layers.len()).rev() {
            if let Some((shape, arg)) = &trace.pools[i] {
                g = max_pool2_backward(*shape, arg, &g);
            }
            let l = &self.layers[i];
            g = unit_backward(&l.spec, &l.weight, &trace.units[i], &g, None, true).expect("input gradient requested");
        }
        let scale = self.scale.map(T::lit);
        for (c, &s) in scale.iter().enumerate() {
            g.channel_mut(c).iter_mut().for_each(|v| *v *= s);
        }
        g
    }
}
