//! Training objectives: cycle reconstruction, enhancer consistency,
//! adversarial terms in least-squares or logistic form, and a feature-space
//! perceptual distance.
//!
//! Every loss returns its value as `f64` regardless of the tensor scalar, and
//! each has a `_grad` companion returning the gradient with respect to the
//! image arguments that the generators produce.

mod perceptual;

pub use perceptual::{PerceptualBackend, PerceptualExtractor, PerceptualTrace, RANDOM_STACK_SEED, VGG16_CONVS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Weights of the five generator-side terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Adversarial term of the refog direction.
    pub gamma1: f64,
    /// Adversarial term of the defog direction.
    pub gamma2: f64,
    /// Cycle reconstruction.
    pub gamma3: f64,
    /// Enhancer consistency.
    pub gamma4: f64,
    /// Perceptual distance.
    pub gamma5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma1: 10.0,
            gamma2: 10.0,
            gamma3: 8.0,
            gamma4: 5.0,
            gamma5: 2.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.gamma1, self.gamma2, self.gamma3, self.gamma4, self.gamma5]
    }

    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        self.as_array()
            .iter()
            .enumerate()
            .filter(|(_, g)| !(g.is_finite() && **g >= 0.0))
            .map(|(i, g)| format!("weights.gamma{} must be finite and >= 0, got {g}", i + 1))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Unweighted generator-side terms combined by [`total_generator_loss`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub refog_adversarial: f64,
    pub defog_adversarial: f64,
    pub cycle: f64,
    pub enhancer: f64,
    pub perceptual: f64,
}

impl LossParts {
    const NAMES: [&'static str; 5] = [
        "refog_adversarial",
        "defog_adversarial",
        "cycle",
        "enhancer",
        "perceptual",
    ];

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.refog_adversarial,
            self.defog_adversarial,
            self.cycle,
            self.enhancer,
            self.perceptual,
        ]
    }
}

/// `γ1·refog_adv + γ2·defog_adv + γ3·cycle + γ4·enhancer + γ5·perceptual`.
pub fn total_generator_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    let p = parts.as_array();
    if let Some(i) = p.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            term: LossParts::NAMES[i].to_string(),
        });
    }
    Ok(p.iter().zip(weights.as_array()).map(|(v, g)| v * g).sum())
}

/// Per-step scalars of one training direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Cycle reconstruction of the direction's source image.
    pub loss1: f64,
    /// Reconstruction through the enhancer path.
    pub loss2: f64,
    /// Discriminator objective against the direct generator output.
    pub loss3: f64,
    /// Discriminator objective against the enhanced generator output.
    pub loss4: f64,
    /// Perceptual distance between the source and its reconstruction.
    pub loss5: f64,
    pub generator_total: f64,
    pub discriminator_total: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 7] = [
        "loss1",
        "loss2",
        "loss3",
        "loss4",
        "loss5",
        "generator_total",
        "discriminator_total",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.loss1,
            self.loss2,
            self.loss3,
            self.loss4,
            self.loss5,
            self.generator_total,
            self.discriminator_total,
        ]
    }

    /// Fails on the first non-finite field, naming it.
    pub fn check_finite(&self) -> Result<()> {
        match self.values().iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite {
                term: Self::FIELDS[i].to_string(),
            }),
            None => Ok(()),
        }
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: shapes {} and {} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean over all elements of `(a − b)²`, accumulated in `f64`.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum();
    Ok(s / a.len().max(1) as f64)
}

/// Gradient of [`mse`] with respect to `b`; the gradient for `a` is its negation.
pub fn mse_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mse")?;
    let k = T::lit(2.0 / a.len().max(1) as f64);
    Ok(b.zip_map(a, |y, x| k * (y - x)))
}

/// `mean(x − recon_x)² + mean(y − recon_y)²`.
pub fn cycle_refog_loss<T: Real>(x: &Tensor<T>, recon_x: &Tensor<T>, y: &Tensor<T>, recon_y: &Tensor<T>) -> Result<f64> {
    Ok(mse(x, recon_x)? + mse(y, recon_y)?)
}

/// Gradients of [`cycle_refog_loss`] with respect to `recon_x` and `recon_y`.
pub fn cycle_refog_loss_grad<T: Real>(
    x: &Tensor<T>,
    recon_x: &Tensor<T>,
    y: &Tensor<T>,
    recon_y: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((mse_grad(x, recon_x)?, mse_grad(y, recon_y)?))
}

/// `mean(E_d(X) − R(E_d(G(X))))² + mean(E_r(Y) − G(E_r(R(Y))))²`.
pub fn enhancer_loss<T: Real>(ex: &Tensor<T>, r_of_ex_g: &Tensor<T>, ey: &Tensor<T>, g_of_ey_r: &Tensor<T>) -> Result<f64> {
    Ok(mse(ex, r_of_ex_g)? + mse(ey, g_of_ey_r)?)
}

/// Gradients of [`enhancer_loss`] with respect to all four arguments, in
/// argument order.
pub fn enhancer_loss_grad<T: Real>(
    ex: &Tensor<T>,
    r_of_ex_g: &Tensor<T>,
    ey: &Tensor<T>,
    g_of_ey_r: &Tensor<T>,
) -> Result<[Tensor<T>; 4]> {
    let g1 = mse_grad(ex, r_of_ex_g)?;
    let g2 = mse_grad(ey, g_of_ey_r)?;
    let neg = |t: &Tensor<T>| t.map(|v| -v);
    Ok([neg(&g1), g1, neg(&g2), g2])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    #[default]
    LeastSquares,
    /// Logistic scores with the saturating generator term `mean log(1 − σ(D(fake)))`.
    Log,
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn mean_of<T: Real>(t: &Tensor<T>, f: impl Fn(f64) -> f64) -> f64 {
    t.data().iter().map(|&v| f(v.as_f64())).sum::<f64>() / t.len().max(1) as f64
}

fn grad_of<T: Real>(t: &Tensor<T>, f: impl Fn(f64) -> f64) -> Tensor<T> {
    let n = t.len().max(1) as f64;
    t.map(|v| T::lit(f(v.as_f64()) / n))
}

/// Generator-side adversarial term on fake scores alone.
pub fn adversarial_generator<T: Real>(fake: &Tensor<T>, mode: GanMode) -> f64 {
    match mode {
        GanMode::LeastSquares => mean_of(fake, |s| (s - 1.0) * (s - 1.0)),
        GanMode::Log => mean_of(fake, |s| -softplus(s)),
    }
}

/// Gradient of [`adversarial_generator`] with respect to the fake scores.
pub fn adversarial_generator_grad<T: Real>(fake: &Tensor<T>, mode: GanMode) -> Tensor<T> {
    match mode {
        GanMode::LeastSquares => grad_of(fake, |s| 2.0 * (s - 1.0)),
        GanMode::Log => grad_of(fake, |s| -sigmoid(s)),
    }
}

/// Discriminator objective: real scores pushed to 1, fake scores to 0.
pub fn adversarial_discriminator<T: Real>(real: &Tensor<T>, fake: &Tensor<T>, mode: GanMode) -> f64 {
    match mode {
        GanMode::LeastSquares => mean_of(real, |s| (s - 1.0) * (s - 1.0)) + mean_of(fake, |s| s * s),
        GanMode::Log => mean_of(real, |s| softplus(-s)) + mean_of(fake, softplus),
    }
}

/// Gradients of [`adversarial_discriminator`] for the real and fake scores.
pub fn adversarial_discriminator_grad<T: Real>(real: &Tensor<T>, fake: &Tensor<T>, mode: GanMode) -> (Tensor<T>, Tensor<T>) {
    match mode {
        GanMode::LeastSquares => (grad_of(real, |s| 2.0 * (s - 1.0)), grad_of(fake, |s| 2.0 * s)),
        GanMode::Log => (grad_of(real, |s| -sigmoid(-s)), grad_of(fake, sigmoid)),
    }
}

/// `(gen_term, disc_term)` for one pair of score maps.
pub fn adversarial_losses<T: Real>(d_real: &Tensor<T>, d_fake: &Tensor<T>, mode: GanMode) -> (f64, f64) {
    (
        adversarial_generator(d_fake, mode),
        adversarial_discriminator(d_real, d_fake, mode),
    )
}

/// `mean(P(x) − P(recon_x))² + mean(P(y) − P(recon_y))²` over feature elements.
pub fn perceptual_loss<T: Real>(
    extractor: &PerceptualExtractor<T>,
    x: &Tensor<T>,
    recon_x: &Tensor<T>,
    y: &Tensor<T>,
    recon_y: &Tensor<T>,
) -> Result<f64> {
    Ok(perceptual_pair(extractor, x, recon_x)? + perceptual_pair(extractor, y, recon_y)?)
}

/// One term of [`perceptual_loss`].
pub fn perceptual_pair<T: Real>(extractor: &PerceptualExtractor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "perceptual_loss")?;
    mse(&extractor.features(a)?, &extractor.features(b)?)
}

/// Value and gradient with respect to `b` of one perceptual term.
pub fn perceptual_pair_grad<T: Real>(extractor: &PerceptualExtractor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    same_shape(a, b, "perceptual_loss")?;
    let fa = extractor.features(a)?;
    let (fb, trace) = extractor.features_traced(b)?;
    let value = mse(&fa, &fb)?;
    let dfb = mse_grad(&fa, &fb)?;
    Ok((value, extractor.backward(&trace, &dfb)))
}
