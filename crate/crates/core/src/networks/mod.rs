//! Parameter containers, frozen architecture tables and forward/backward
//! passes for the four network families.
//!
//! Each network exposes `*_forward` (plain inference on an [`ImageTensor`])
//! and a traced variant returning the saved activations needed by the
//! matching `*_backward`. Parameters are immutable during a pass, so one set
//! can be traced several times in a single training step.

mod defog;
mod discriminator;
mod enhancer;
mod refog;

pub use defog::{defog_backward, defog_forward, defog_forward_traced, DefogTrace, RESIDUAL_BLOCKS};
pub use discriminator::{
    discriminator_backward, discriminator_forward, discriminator_forward_traced, DiscriminatorTrace,
    DISCRIMINATOR_MIN_SIDE,
};
pub use enhancer::{enhancer_backward, enhancer_forward, enhancer_forward_traced, EnhancerTrace};
pub use refog::{
    force_transmission, refog_backward, refog_forward, refog_forward_traced, RefogTrace,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ops::{Activation, ConvKind, LayerGrad, LayerSpec};
use crate::tensor::{Real, Shape};

/// Standard deviation of the weight initialiser.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Defog,
    RefogT,
    Enhancer,
    Discriminator,
}

impl NetworkKind {
    pub const ALL: [NetworkKind; 4] = [
        NetworkKind::Defog,
        NetworkKind::RefogT,
        NetworkKind::Enhancer,
        NetworkKind::Discriminator,
    ];
}

impl std::fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NetworkKind::Defog => "defog",
            NetworkKind::RefogT => "refog_t",
            NetworkKind::Enhancer => "enhancer",
            NetworkKind::Discriminator => "discriminator",
        })
    }
}

/// How the generators double their resolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Transposed,
    NearestConv,
}

/// Declarative layer table of one network.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: NetworkKind,
    pub upsample: UpsampleMode,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    pub fn new(kind: NetworkKind, upsample: UpsampleMode) -> Self {
        let up = |name: &str, cin, cout| match upsample {
            UpsampleMode::Transposed => LayerSpec::conv(name, cin, cout, 3, 2).with_kind(ConvKind::Transposed),
            UpsampleMode::NearestConv => LayerSpec::conv(name, cin, cout, 3, 1).with_kind(ConvKind::NearestUp),
        };
        let layers = match kind {
            NetworkKind::Defog => {
                let mut l = vec![
                    LayerSpec::conv("enc1", 3, 32, 7, 1),
                    LayerSpec::conv("enc2", 32, 64, 3, 2),
                    LayerSpec::conv("enc3", 64, 128, 3, 2),
                ];
                for b in 0..RESIDUAL_BLOCKS {
                    l.push(LayerSpec::conv(format!("res{}a", b + 1), 128, 128, 3, 1));
                    l.push(LayerSpec::conv(format!("res{}b", b + 1), 128, 128, 3, 1).with_act(Activation::Identity));
                }
                l.push(up("dec1", 128, 64));
                l.push(up("dec2", 64, 32));
                l.push(LayerSpec::conv("out", 32, 3, 7, 1).with_norm(false).with_act(Activation::Tanh));
                l
            }
            NetworkKind::RefogT => vec![
                LayerSpec::conv("t1", 3, 64, 3, 1),
                LayerSpec::conv("t2", 64, 64, 3, 1),
                LayerSpec::conv("t3", 64, 64, 3, 1),
                LayerSpec::conv("t4", 64, 64, 3, 1),
                LayerSpec::conv("t_head", 64, 1, 3, 1).with_norm(false).with_act(Activation::Sigmoid),
            ],
            NetworkKind::Enhancer => vec![
                LayerSpec::conv("enc1", 3, 64, 3, 2),
                LayerSpec::conv("enc2", 64, 64, 3, 2),
                LayerSpec::conv("enc3", 64, 64, 3, 2),
                up("dec1", 64, 64),
                up("dec2", 64, 64),
                up("dec3", 64, 64),
                LayerSpec::conv("fuse", 128, 64, 1, 1),
                LayerSpec::conv("out", 64, 3, 3, 1).with_norm(false).with_act(Activation::Tanh),
            ],
            NetworkKind::Discriminator => {
                let lr = |name: &str, cin, cout| LayerSpec::conv(name, cin, cout, 4, 2).with_act(Activation::LeakyRelu);
                vec![
                    lr("d1", 3, 64),
                    lr("d2", 64, 128),
                    lr("d3", 128, 256),
                    lr("d4", 256, 512),
                    LayerSpec::conv("d5", 512, 1, 4, 2).with_norm(false).with_act(Activation::Identity),
                ]
            }
        };
        ArchitectureSpec { kind, upsample, layers }
    }

    /// SHA-256 over the canonical JSON form of the table.
    pub fn spec_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("architecture serialises");
        hex::encode(Sha256::digest(&json))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight_len() + l.out_ch).sum()
    }
}

/// Weights and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Learnable parameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T = f32> {
    arch: ArchitectureSpec,
    layers: Vec<Layer<T>>,
    seed: u64,
}

/// Weights ~ N(0, 0.02) truncated at ±2σ, biases zero, deterministic in `seed`.
pub fn init_params<T: Real>(kind: NetworkKind, seed: u64) -> NetworkParams<T> {
    init_params_with(ArchitectureSpec::new(kind, UpsampleMode::default()), seed)
}

pub fn init_params_with<T: Real>(arch: ArchitectureSpec, seed: u64) -> NetworkParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let layers = arch
        .layers
        .iter()
        .map(|spec| {
            let weight = (0..spec.weight_len())
                .map(|_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break T::lit(v);
                    }
                })
                .collect();
            Layer {
                spec: spec.clone(),
                weight,
                bias: vec![T::zero(); spec.out_ch],
            }
        })
        .collect();
    NetworkParams { arch, layers, seed }
}

impl<T: Real> NetworkParams<T> {
    /// Rebuilds parameters from raw buffers (checkpoint loading).
    pub fn from_parts(arch: ArchitectureSpec, buffers: Vec<(Vec<T>, Vec<T>)>, seed: u64) -> crate::Result<Self> {
        if buffers.len() != arch.layers.len() {
            return Err(crate::Error::Shape(format!(
                "{} layer buffers for a {}-layer {} network",
                buffers.len(),
                arch.layers.len(),
                arch.kind
            )));
        }
        let layers = arch
            .layers
            .iter()
            .zip(buffers)
            .map(|(spec, (weight, bias))| {
                if weight.len() != spec.weight_len() || bias.len() != spec.out_ch {
                    return Err(crate::Error::Shape(format!(
                        "layer {}: expected {}+{} values, got {}+{}",
                        spec.name,
                        spec.weight_len(),
                        spec.out_ch,
                        weight.len(),
                        bias.len()
                    )));
                }
                Ok(Layer {
                    spec: spec.clone(),
                    weight,
                    bias,
                })
            })
            .collect::<crate::Result<Vec<_>>>()?;
        Ok(NetworkParams { arch, layers, seed })
    }

    pub fn kind(&self) -> NetworkKind {
        self.arch.kind
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn layer(&self, i: usize) -> &Layer<T> {
        &self.layers[i]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    weight: l.weight.iter().map(|v| U::lit(v.as_f64())).collect(),
                    bias: l.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
            seed: self.seed,
        }
    }

    /// Flat iterator over every scalar, weights before bias, layer by layer.
    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
    }

    /// Mutable access to the scalar at flat position `idx` of [`Self::values`].
    pub fn value_mut(&mut self, mut idx: usize) -> &mut T {
        for l in &mut self.layers {
            if idx < l.weight.len() {
                return &mut l.weight[idx];
            }
            idx -= l.weight.len();
            if idx < l.bias.len() {
                return &mut l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }
}

/// Gradient accumulator mirroring a [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads<T> {
    pub layers: Vec<LayerGrad<T>>,
}

impl<T: Real> NetworkGrads<T> {
    pub fn zeros_like(params: &NetworkParams<T>) -> Self {
        NetworkGrads {
            layers: params.layers.iter().map(|l| LayerGrad::zeros(&l.spec)).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub(crate) fn slot(&mut self, i: usize) -> &mut LayerGrad<T> {
        &mut self.layers[i]
    }
}

/// Records the output shape of each executed layer, in execution order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShapeLog(pub Vec<(String, Shape)>);

impl ShapeLog {
    pub(crate) fn push(&mut self, name: &str, shape: Shape) {
        self.0.push((name.to_string(), shape));
    }

    pub fn get(&self, name: &str) -> Option<Shape> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }
}

pub(crate) fn grad_slot<'a, T: Real>(grads: &'a mut Option<&mut NetworkGrads<T>>, i: usize) -> Option<&'a mut LayerGrad<T>> {
    grads.as_mut().map(|g| g.slot(i))
}
