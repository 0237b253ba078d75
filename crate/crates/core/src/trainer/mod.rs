//! Alternating two-direction adversarial training.
//!
//! One iteration runs a defog-direction step and then a refog-direction step
//! on the same unpaired `(foggy, clear)` draw. Each step updates its
//! discriminator first and then, against the updated discriminator, the
//! generators and enhancer that took part in its forward pass.

mod adam;
mod checkpoint;
mod losslog;
mod model;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, CHECKPOINT_MAGIC};
pub use losslog::{LossLog, LossRow};
pub use model::DefogModel;

use crate::data::{signed_to_unit_image, Cursors, Domain, UnpairedDataset};
use crate::error::{Error, Result};
use crate::fogmodel::{estimate_airlight, AirlightEstimator, AirlightMode, AtmosphericLight};
use crate::losses::{
    adversarial_discriminator, adversarial_discriminator_grad, adversarial_generator, adversarial_generator_grad, mse, mse_grad,
    perceptual_pair_grad, total_generator_loss, GanMode, LossParts, LossReport, LossWeights, PerceptualBackend,
    PerceptualExtractor, RANDOM_STACK_SEED,
};
use crate::networks::{
    defog_backward, defog_forward_traced, discriminator_backward, discriminator_forward_traced, enhancer_backward,
    enhancer_forward_traced, init_params_with, refog_backward, refog_forward_traced, ArchitectureSpec, DefogTrace,
    EnhancerTrace, NetworkGrads, NetworkKind, NetworkParams, RefogTrace, UpsampleMode,
};
use crate::tensor::{Shape, Tensor};

/// Length of the in-memory loss history.
pub const HISTORY_LEN: usize = 256;

/// Where the refog network takes its airlight from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AirlightSource {
    /// Estimated from the image being refogged.
    #[default]
    InputImage,
    /// Estimated once from the direction's source image and reused for
    /// every refog pass of that sample.
    CycleOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    pub backend: PerceptualBackend,
    /// Feature depth; `None` selects the backend default.
    pub layer_index: Option<usize>,
    /// Safetensors file, required by the pretrained backend.
    pub weights_path: Option<PathBuf>,
    /// Initialisation seed of the random backend.
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            backend: PerceptualBackend::default(),
            layer_index: None,
            weights_path: None,
            seed: RANDOM_STACK_SEED,
        }
    }
}

impl PerceptualConfig {
    pub fn build(&self) -> Result<PerceptualExtractor<f32>> {
        match self.backend {
            PerceptualBackend::SeededRandomStack => PerceptualExtractor::seeded_random(
                self.layer_index.unwrap_or(PerceptualExtractor::<f32>::DEFAULT_RANDOM_LAYER),
                self.seed,
            ),
            PerceptualBackend::Pretrained16Layer => {
                let path = self
                    .weights_path
                    .as_deref()
                    .ok_or_else(|| Error::Config(vec!["perceptual.weights_path is required by the pretrained backend".into()]))?;
                PerceptualExtractor::pretrained(path, self.layer_index.unwrap_or(PerceptualExtractor::<f32>::DEFAULT_PRETRAINED_LAYER))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub image_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub gan_mode: GanMode,
    pub airlight_source: AirlightSource,
    pub airlight_mode: AirlightMode,
    pub upsample: UpsampleMode,
    pub perceptual: PerceptualConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_size: 512,
            learning_rate: 2e-4,
            batch_size: 1,
            iterations: 2000,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 500,
            gan_mode: GanMode::default(),
            airlight_source: AirlightSource::default(),
            airlight_mode: AirlightMode::default(),
            upsample: UpsampleMode::default(),
            perceptual: PerceptualConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for the 64×64 synthetic task.
    pub fn toy() -> Self {
        TrainConfig {
            image_size: 64,
            ..TrainConfig::default()
        }
    }

    /// Every violated constraint, in field order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.image_size < 32 || self.image_size % 8 != 0 {
            p.push(format!("image_size must be a multiple of 8 and at least 32, got {}", self.image_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            p.push(format!("learning_rate must be finite and > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            p.push("batch_size must be >= 1".into());
        }
        if self.iterations == 0 {
            p.push("iterations must be >= 1".into());
        }
        if self.checkpoint_every == 0 {
            p.push("checkpoint_every must be >= 1".into());
        }
        p.extend(self.weights.problems());
        p.extend(self.adam.problems());
        match self.perceptual.backend {
            PerceptualBackend::SeededRandomStack => {
                if self.perceptual.weights_path.is_some() {
                    p.push("perceptual.weights_path is only used by the pretrained backend".into());
                }
            }
            PerceptualBackend::Pretrained16Layer => {
                if self.perceptual.weights_path.is_none() {
                    p.push("perceptual.weights_path is required by the pretrained backend".into());
                }
            }
        }
        if let Some(i) = self.perceptual.layer_index {
            let max = match self.perceptual.backend {
                PerceptualBackend::SeededRandomStack => 4,
                PerceptualBackend::Pretrained16Layer => 13,
            };
            if !(1..=max).contains(&i) {
                p.push(format!("perceptual.layer_index must be in 1..={max}, got {i}"));
            }
        }
        p
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

/// The six trained networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Defog,
    RefogT,
    EnhancerDefog,
    EnhancerRefog,
    DiscriminatorFog,
    DiscriminatorFogfree,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Defog,
        Role::RefogT,
        Role::EnhancerDefog,
        Role::EnhancerRefog,
        Role::DiscriminatorFog,
        Role::DiscriminatorFogfree,
    ];

    pub fn kind(self) -> NetworkKind {
        match self {
            Role::Defog => NetworkKind::Defog,
            Role::RefogT => NetworkKind::RefogT,
            Role::EnhancerDefog | Role::EnhancerRefog => NetworkKind::Enhancer,
            Role::DiscriminatorFog | Role::DiscriminatorFogfree => NetworkKind::Discriminator,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Defog => "defog",
            Role::RefogT => "refog_t",
            Role::EnhancerDefog => "enhancer_defog",
            Role::EnhancerRefog => "enhancer_refog",
            Role::DiscriminatorFog => "discriminator_fog",
            Role::DiscriminatorFogfree => "discriminator_fogfree",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Defog,
    Refog,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Defog => "defog",
            Direction::Refog => "refog",
        }
    }

    /// `(forward generator, returning generator, enhancer, discriminator)`.
    fn roles(self) -> (Role, Role, Role, Role) {
        match self {
            Direction::Defog => (Role::Defog, Role::RefogT, Role::EnhancerDefog, Role::DiscriminatorFogfree),
            Direction::Refog => (Role::RefogT, Role::Defog, Role::EnhancerRefog, Role::DiscriminatorFog),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Points inside a step at which the observer sees the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    DiscriminatorUpdated,
    GeneratorsUpdated,
}

/// How often each airlight estimator ran inside refog passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AirlightTally {
    pub sky: u64,
    pub dark_channel: u64,
}

impl AirlightTally {
    fn record(&mut self, e: AirlightEstimator) {
        match e {
            AirlightEstimator::Sky => self.sky += 1,
            AirlightEstimator::DarkChannel => self.dark_channel += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: u64,
    pub direction: Direction,
    pub report: LossReport,
}

/// Parameters, optimizer moments and counters of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub nets: Vec<NetworkParams<f32>>,
    pub moments: Vec<AdamState>,
    /// Completed iterations (one defog plus one refog step each).
    pub iteration: u64,
    pub cursors: Cursors,
    pub history: VecDeque<HistoryEntry>,
    pub airlight_tally: AirlightTally,
}

impl TrainState {
    /// Fresh networks; each role's initialisation seed is drawn from a
    /// stream keyed by `seed`.
    pub fn new(seed: u64, upsample: UpsampleMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets: Vec<NetworkParams<f32>> = Role::ALL
            .iter()
            .map(|r| init_params_with(ArchitectureSpec::new(r.kind(), upsample), rng.next_u64()))
            .collect();
        let moments = nets.iter().map(|n| AdamState::new(n.parameter_count())).collect();
        TrainState {
            nets,
            moments,
            iteration: 0,
            cursors: Cursors::default(),
            history: VecDeque::with_capacity(HISTORY_LEN),
            airlight_tally: AirlightTally::default(),
        }
    }

    pub fn net(&self, r: Role) -> &NetworkParams<f32> {
        &self.nets[r.index()]
    }

    pub fn net_mut(&mut self, r: Role) -> &mut NetworkParams<f32> {
        &mut self.nets[r.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.nets.iter().all(|n| n.is_finite())
    }

    fn push_history(&mut self, e: HistoryEntry) {
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(e);
    }
}

/// Intermediate images of the first sample of the most recent step.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub direction: Direction,
    pub source: Tensor<f32>,
    /// Forward generator output (`I` or `II`).
    pub generated: Tensor<f32>,
    /// Returning generator applied to `generated`.
    pub reconstructed: Tensor<f32>,
    pub enhanced: Tensor<f32>,
    pub enhanced_reconstructed: Tensor<f32>,
    /// Transmission and airlight of the first refog pass.
    pub transmission: Tensor<f32>,
    pub airlight: AtmosphericLight,
    /// Every airlight estimate made during the step, in call order.
    pub airlights: Vec<(AtmosphericLight, AirlightEstimator)>,
}

enum Trace {
    Defog(DefogTrace<f32>),
    Refog(RefogTrace<f32>),
    Enhancer(EnhancerTrace<f32>),
}

/// Forward activations of one sample through one direction.
struct SampleForward {
    generated: (Tensor<f32>, Trace),
    reconstructed: (Tensor<f32>, Trace),
    enhanced: (Tensor<f32>, Trace),
    enhanced_reconstructed: (Tensor<f32>, Trace),
}

fn finite(t: &Tensor<f32>, term: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { term: term.to_string() })
    }
}

fn add_scaled(acc: &mut Tensor<f32>, t: &Tensor<f32>, s: f32) {
    for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
        *a += s * v;
    }
}

/// Training state together with the frozen pieces derived from the config.
pub struct Trainer {
    config: TrainConfig,
    extractor: PerceptualExtractor<f32>,
    pub state: TrainState,
    last: Option<StepDiagnostics>,
}

impl Trainer {
    /// Fresh state. Structural constraints are checked; a zero learning rate
    /// is accepted here so that a step can be exercised without updates.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let state = TrainState::new(config.seed, config.upsample);
        Self::with_state(config, state)
    }

    pub fn with_state(config: TrainConfig, state: TrainState) -> Result<Self> {
        let problems: Vec<String> = config
            .problems()
            .into_iter()
            .filter(|p| !(p.starts_with("learning_rate") && config.learning_rate == 0.0))
            .collect();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        for r in Role::ALL {
            let n = state.net(r);
            if n.arch() != &ArchitectureSpec::new(r.kind(), config.upsample) {
                return Err(Error::Config(vec![format!(
                    "{} parameters do not match the configured architecture",
                    r.name()
                )]));
            }
        }
        let extractor = config.perceptual.build()?;
        Ok(Trainer {
            config,
            extractor,
            state,
            last: None,
        })
    }

    /// Resumes from a checkpoint, keeping `config`'s schedule and
    /// hyperparameters.
    pub fn resume(config: TrainConfig, path: &Path) -> Result<Self> {
        let (state, saved) = load_checkpoint(path)?;
        if saved.upsample != config.upsample {
            return Err(Error::Config(vec![format!(
                "checkpoint uses upsample {:?}, config asks for {:?}",
                saved.upsample, config.upsample
            )]));
        }
        Self::with_state(config, state)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn extractor(&self) -> &PerceptualExtractor<f32> {
        &self.extractor
    }

    pub fn last_diagnostics(&self) -> Option<&StepDiagnostics> {
        self.last.as_ref()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.state, &self.config, path)
    }

    pub fn step_defog_direction(&mut self, x: &[Tensor<f32>], y: &[Tensor<f32>]) -> Result<LossReport> {
        self.step(Direction::Defog, x, y, &mut |_, _| {})
    }

    pub fn step_refog_direction(&mut self, y: &[Tensor<f32>], x: &[Tensor<f32>]) -> Result<LossReport> {
        self.step(Direction::Refog, y, x, &mut |_, _| {})
    }

    /// One direction step over a batch. `source` is the direction's input
    /// domain and `real` the other domain, seen only by the discriminator.
    /// `observer` runs after each sub-update.
    pub fn step(
        &mut self,
        dir: Direction,
        source: &[Tensor<f32>],
        real: &[Tensor<f32>],
        observer: &mut dyn FnMut(Phase, &TrainState),
    ) -> Result<LossReport> {
        self.check_batch(source, real)?;
        let (fwd, back, enh, disc) = dir.roles();
        let b = source.len();
        let inv_b = 1.0 / b as f32;
        let w = self.config.weights;
        let gamma_adv = match dir {
            Direction::Defog => w.gamma2,
            Direction::Refog => w.gamma1,
        } as f32;
        let mode = self.config.gan_mode;

        let mut airlights = Vec::new();
        let mut passes = Vec::with_capacity(b);
        let (mut l1, mut l2, mut l5) = (0.0, 0.0, 0.0);
        let mut d_recon = Vec::with_capacity(b);
        for s in source {
            let origin = match self.config.airlight_source {
                AirlightSource::CycleOrigin => Some(self.airlight_of(s, &mut airlights)?),
                AirlightSource::InputImage => None,
            };
            let p = self.forward_sample(s, fwd, back, enh, origin, &mut airlights)?;
            l1 += mse(s, &p.reconstructed.0)?;
            l2 += mse(s, &p.enhanced_reconstructed.0)?;
            let (v5, g5) = perceptual_pair_grad(&self.extractor, s, &p.reconstructed.0)?;
            l5 += v5;
            d_recon.push(g5);
            passes.push(p);
        }
        let bf = b as f64;
        let (l1, l2, l5) = (l1 / bf, l2 / bf, l5 / bf);

        // Discriminator update against the current generator outputs.
        let mut d_grads = NetworkGrads::zeros_like(self.state.net(disc));
        let (mut l3, mut l4) = (0.0, 0.0);
        for (p, r) in passes.iter().zip(real) {
            let dnet = self.state.net(disc);
            let (sr, tr) = discriminator_forward_traced(dnet, r)?;
            let (sg, tg) = discriminator_forward_traced(dnet, &p.generated.0)?;
            let (se, te) = discriminator_forward_traced(dnet, &p.enhanced.0)?;
            l3 += adversarial_discriminator(&sr, &sg, mode);
            l4 += adversarial_discriminator(&sr, &se, mode);
            let (mut dr, mut dg) = adversarial_discriminator_grad(&sr, &sg, mode);
            let (dr2, mut de) = adversarial_discriminator_grad(&sr, &se, mode);
            dr.add_assign(&dr2);
            for t in [&mut dr, &mut dg, &mut de] {
                t.scale(inv_b);
            }
            discriminator_backward(dnet, &tr, &dr, Some(&mut d_grads), false);
            discriminator_backward(dnet, &tg, &dg, Some(&mut d_grads), false);
            discriminator_backward(dnet, &te, &de, Some(&mut d_grads), false);
        }
        let (l3, l4) = (l3 / bf, l4 / bf);
        for (v, term) in [(l1, "loss1"), (l2, "loss2"), (l3, "loss3"), (l4, "loss4"), (l5, "loss5")] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: term.into() });
            }
        }
        self.apply(disc, &d_grads)?;
        observer(Phase::DiscriminatorUpdated, &self.state);

        // Generator update against the refreshed discriminator.
        let mut g_fwd = NetworkGrads::zeros_like(self.state.net(fwd));
        let mut g_back = NetworkGrads::zeros_like(self.state.net(back));
        let mut g_enh = NetworkGrads::zeros_like(self.state.net(enh));
        let (mut adv_g, mut adv_e) = (0.0, 0.0);
        for (i, (p, dr5)) in passes.iter().zip(&d_recon).enumerate() {
            let s = &source[i];
            let dnet = self.state.net(disc);
            let fool = |img: &Tensor<f32>| -> Result<(f64, Tensor<f32>)> {
                let (sc, tr) = discriminator_forward_traced(dnet, img)?;
                let mut g = adversarial_generator_grad(&sc, mode);
                g.scale(gamma_adv * inv_b);
                let dx = discriminator_backward(dnet, &tr, &g, None, true).expect("input gradient requested");
                Ok((adversarial_generator(&sc, mode), dx))
            };
            let (vg, dg_adv) = fool(&p.generated.0)?;
            let (ve, de_adv) = fool(&p.enhanced.0)?;
            adv_g += vg;
            adv_e += ve;

            let mut d_b = mse_grad(s, &p.reconstructed.0)?;
            d_b.scale(w.gamma3 as f32 * inv_b);
            add_scaled(&mut d_b, dr5, w.gamma5 as f32 * inv_b);
            let mut d_c = mse_grad(s, &p.enhanced_reconstructed.0)?;
            d_c.scale(w.gamma4 as f32 * inv_b);

            let mut d_e = self.backward(back, &p.enhanced_reconstructed.1, &d_c, &mut g_back, true);
            d_e.add_assign(&de_adv);
            let mut d_a = self.backward(enh, &p.enhanced.1, &d_e, &mut g_enh, true);
            d_a.add_assign(&self.backward(back, &p.reconstructed.1, &d_b, &mut g_back, true));
            d_a.add_assign(&dg_adv);
            finite(&d_a, &format!("gradient into {} output", fwd.name()))?;
            self.backward(fwd, &p.generated.1, &d_a, &mut g_fwd, false);
        }
        let (adv_g, adv_e) = (adv_g / bf, adv_e / bf);
        let adversarial = adv_g + adv_e;
        let parts = LossParts {
            refog_adversarial: if dir == Direction::Refog { adversarial } else { 0.0 },
            defog_adversarial: if dir == Direction::Defog { adversarial } else { 0.0 },
            cycle: l1,
            enhancer: l2,
            perceptual: l5,
        };
        let report = LossReport {
            loss1: l1,
            loss2: l2,
            loss3: l3,
            loss4: l4,
            loss5: l5,
            generator_total: total_generator_loss(&parts, &w)?,
            discriminator_total: l3 + l4,
        };
        report.check_finite()?;
        for (role, g) in [(fwd, &g_fwd), (back, &g_back), (enh, &g_enh)] {
            self.apply(role, g)?;
        }
        observer(Phase::GeneratorsUpdated, &self.state);

        let first = passes.swap_remove(0);
        let (transmission, airlight) = match (&first.generated.1, &first.reconstructed.1) {
            (Trace::Refog(t), _) | (_, Trace::Refog(t)) => (t.transmission().clone(), t.airlight()),
            _ => unreachable!("every direction has a refog pass"),
        };
        self.last = Some(StepDiagnostics {
            direction: dir,
            source: source[0].clone(),
            generated: first.generated.0,
            reconstructed: first.reconstructed.0,
            enhanced: first.enhanced.0,
            enhanced_reconstructed: first.enhanced_reconstructed.0,
            transmission,
            airlight,
            airlights,
        });
        Ok(report)
    }

    fn check_batch(&self, source: &[Tensor<f32>], real: &[Tensor<f32>]) -> Result<()> {
        let want = Shape::new(3, self.config.image_size, self.config.image_size);
        if source.is_empty() || source.len() != real.len() {
            return Err(Error::Shape(format!(
                "batches must be non-empty and equal in size, got {} and {}",
                source.len(),
                real.len()
            )));
        }
        if let Some(t) = source.iter().chain(real).find(|t| t.shape() != want) {
            return Err(Error::Shape(format!("batch image {} does not match configured {want}", t.shape())));
        }
        Ok(())
    }

    fn airlight_of(&mut self, img: &Tensor<f32>, log: &mut Vec<(AtmosphericLight, AirlightEstimator)>) -> Result<AtmosphericLight> {
        let (a, which) = estimate_airlight(&signed_to_unit_image(img)?, self.config.airlight_mode);
        self.state.airlight_tally.record(which);
        log.push((a, which));
        Ok(a)
    }

    fn run(
        &mut self,
        role: Role,
        input: &Tensor<f32>,
        origin: Option<AtmosphericLight>,
        log: &mut Vec<(AtmosphericLight, AirlightEstimator)>,
    ) -> Result<(Tensor<f32>, Trace)> {
        let (out, trace) = match role.kind() {
            NetworkKind::Defog => {
                let (o, t) = defog_forward_traced(self.state.net(role), input)?;
                (o, Trace::Defog(t))
            }
            NetworkKind::RefogT => {
                let a = match origin {
                    Some(a) => a,
                    None => self.airlight_of(input, log)?,
                };
                let (o, t) = refog_forward_traced(self.state.net(role), input, &a)?;
                (o, Trace::Refog(t))
            }
            NetworkKind::Enhancer => {
                let (o, t) = enhancer_forward_traced(self.state.net(role), input)?;
                (o, Trace::Enhancer(t))
            }
            NetworkKind::Discriminator => unreachable!("discriminators are not generators"),
        };
        finite(&out, &format!("{} output", role.name()))?;
        Ok((out, trace))
    }

    fn forward_sample(
        &mut self,
        s: &Tensor<f32>,
        fwd: Role,
        back: Role,
        enh: Role,
        origin: Option<AtmosphericLight>,
        log: &mut Vec<(AtmosphericLight, AirlightEstimator)>,
    ) -> Result<SampleForward> {
        let generated = self.run(fwd, s, origin, log)?;
        let reconstructed = self.run(back, &generated.0, origin, log)?;
        let enhanced = self.run(enh, &generated.0, origin, log)?;
        let enhanced_reconstructed = self.run(back, &enhanced.0, origin, log)?;
        Ok(SampleForward {
            generated,
            reconstructed,
            enhanced,
            enhanced_reconstructed,
        })
    }

    fn backward(&self, role: Role, trace: &Trace, dout: &Tensor<f32>, grads: &mut NetworkGrads<f32>, need_input: bool) -> Tensor<f32> {
        let p = self.state.net(role);
        let dx = match trace {
            Trace::Defog(t) => defog_backward(p, t, dout, Some(grads), need_input),
            Trace::Refog(t) => refog_backward(p, t, dout, Some(grads), need_input),
            Trace::Enhancer(t) => enhancer_backward(p, t, dout, Some(grads), need_input),
        };
        dx.unwrap_or_else(|| Tensor::zeros(Shape::new(0, 0, 0)))
    }

    fn apply(&mut self, role: Role, grads: &NetworkGrads<f32>) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite {
                term: format!("gradient of {}", role.name()),
            });
        }
        let i = role.index();
        self.state.moments[i].step(&mut self.state.nets[i], grads, self.config.learning_rate, &self.config.adam);
        if !self.state.nets[i].is_finite() {
            return Err(Error::NonFinite {
                term: format!("parameters of {}", role.name()),
            });
        }
        Ok(())
    }

    /// Draws one unpaired batch, runs both directions on it and advances the
    /// iteration counter. Returns one record per direction.
    pub fn iterate(&mut self, dataset: &UnpairedDataset) -> Result<[LossRow; 2]> {
        if dataset.image_size() != self.config.image_size {
            return Err(Error::Shape(format!(
                "dataset images are {0}x{0}, config expects {1}x{1}",
                dataset.image_size(),
                self.config.image_size
            )));
        }
        let mut cursors = self.state.cursors;
        let mut x = Vec::with_capacity(self.config.batch_size);
        let mut y = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            x.push(dataset.draw(Domain::Foggy, &mut cursors)?);
            y.push(dataset.draw(Domain::Clear, &mut cursors)?);
        }
        let iteration = self.state.iteration + 1;
        let t0 = Instant::now();
        let defog = self.step_defog_direction(&x, &y)?;
        let t1 = Instant::now();
        let refog = self.step_refog_direction(&y, &x)?;
        let t2 = Instant::now();
        self.state.cursors = cursors;
        self.state.iteration = iteration;
        let rows = [
            LossRow::new(iteration, Direction::Defog, &defog, (t1 - t0).as_millis() as u64),
            LossRow::new(iteration, Direction::Refog, &refog, (t2 - t1).as_millis() as u64),
        ];
        for (d, r) in [(Direction::Defog, defog), (Direction::Refog, refog)] {
            self.state.push_history(HistoryEntry {
                iteration,
                direction: d,
                report: r,
            });
        }
        Ok(rows)
    }
}

/// Output locations of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutputs {
    pub checkpoint_dir: PathBuf,
    pub loss_log: PathBuf,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        TrainOutputs {
            checkpoint_dir: dir.join("checkpoints"),
            loss_log: dir.join("losses.csv"),
        }
    }

    pub fn checkpoint_path(&self, iteration: u64) -> PathBuf {
        self.checkpoint_dir.join(format!("iter_{iteration:06}.ckpt"))
    }

    /// Text file naming the most recent checkpoint.
    pub fn latest_pointer(&self) -> PathBuf {
        self.checkpoint_dir.join("latest")
    }

    pub fn latest_checkpoint(&self) -> Result<PathBuf> {
        let p = self.latest_pointer();
        let name = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(self.checkpoint_dir.join(name.trim()))
    }
}

/// Runs iterations until `config.iterations` are complete, appending to the
/// loss log and checkpointing every `config.checkpoint_every` iterations and
/// at the end. With `resume` the state, cursors and counters come from that
/// checkpoint and the log is appended to.
pub fn train(config: &TrainConfig, dataset: &UnpairedDataset, outputs: &TrainOutputs, resume: Option<&Path>) -> Result<Trainer> {
    config.validate()?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config.clone(), p)?,
        None => Trainer::new(config.clone())?,
    };
    let mut log = LossLog::open(&outputs.loss_log, resume.is_some())?;
    let mut wrote_checkpoint = false;
    while trainer.state.iteration < config.iterations {
        let rows = trainer.iterate(dataset)?;
        for r in &rows {
            log.append(r)?;
        }
        log.flush()?;
        let it = trainer.state.iteration;
        if it % config.checkpoint_every == 0 || it == config.iterations {
            write_checkpoint(&trainer, outputs)?;
            wrote_checkpoint = true;
        }
        if it % 100 == 0 {
            let [d, r] = &rows;
            log::info!(
                "iteration {it}: defog generator {:.4} discriminator {:.4}; refog generator {:.4} discriminator {:.4}",
                d.report.generator_total,
                d.report.discriminator_total,
                r.report.generator_total,
                r.report.discriminator_total
            );
        }
    }
    if !wrote_checkpoint {
        write_checkpoint(&trainer, outputs)?;
    }
    Ok(trainer)
}

fn write_checkpoint(trainer: &Trainer, outputs: &TrainOutputs) -> Result<()> {
    let path = outputs.checkpoint_path(trainer.state.iteration);
    trainer.save(&path)?;
    let name = path.file_name().expect("checkpoint file name").to_string_lossy().into_owned();
    crate::data::io::write_atomic(&outputs.latest_pointer(), format!("{name}\n").as_bytes())
}
