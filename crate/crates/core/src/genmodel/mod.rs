//! Observation-conditioned action-chunk generators: DDPM, conditional flow
//! matching and the pi0 flow variant, all sharing one linear denoiser head
//! over a fixed random-feature map. Everything here works in normalized
//! coordinates; [`Checkpoint`] carries the statistics to leave them.

mod checkpoint;
mod diffusion;
mod elbo;
mod features;
mod flow;
mod model;
mod schedule;
mod train;

pub use checkpoint::{Checkpoint, Normalization, CHECKPOINT_MAGIC};
pub use diffusion::{ddpm_mean, ddpm_sample, ddpm_step, diffusion_loss_grad};
pub use elbo::gaussian_elbo_terms;
pub use features::{time_embedding, FeatureMap, FeatureSpec, HARMONICS, TIME_DIM};
pub use flow::{
    cfm_build, cfm_loss_grad, euler_integrate, pi0_build, pi0_integrate, pi0_loss_grad, pi0_tau_sample, TauSampler,
};
pub use model::{DenoiserModel, ModelMode};
pub use schedule::{make_schedule, noise_sample, NoiseSchedule};
pub use train::{fit_denoiser, TrainConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const DEFAULT_DIFFUSION_STEPS: usize = 50;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.2;
pub const DEFAULT_FLOW_STEPS: usize = 10;
pub const DEFAULT_PI0_S: f64 = 0.999;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("bad range: {0}")]
    BadRange(String),
    #[error("diffusion step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("model is {got:?}, operation needs {expected:?}")]
    WrongMode { expected: ModelMode, got: ModelMode },
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[source] std::io::Error),
}

/// One training pair: flattened observation stack and flattened action chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSample {
    pub obs_stack: Vec<f64>,
    pub chunk: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Ddpm,
    Cfm,
    Pi0,
}

impl Objective {
    pub fn mode(&self) -> ModelMode {
        match self {
            Objective::Ddpm => ModelMode::EpsilonPredictor,
            Objective::Cfm | Objective::Pi0 => ModelMode::VectorField,
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Objective::Ddpm => 0,
            Objective::Cfm => 1,
            Objective::Pi0 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Objective::Ddpm),
            1 => Some(Objective::Cfm),
            2 => Some(Objective::Pi0),
            _ => None,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Ddpm => "ddpm",
            Objective::Cfm => "cfm",
            Objective::Pi0 => "pi0",
        })
    }
}

impl FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ddpm" => Ok(Objective::Ddpm),
            "cfm" => Ok(Objective::Cfm),
            "pi0" => Ok(Objective::Pi0),
            other => Err(format!("unknown objective '{other}' (expected ddpm, cfm or pi0)")),
        }
    }
}

/// A denoiser together with everything needed to train and sample it.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkGenerator {
    pub model: DenoiserModel,
    pub objective: Objective,
    /// Used by DDPM only.
    pub schedule: NoiseSchedule,
    /// Euler steps for the flow objectives.
    pub sample_steps: usize,
    /// Support truncation of the pi0 flow-time distribution.
    pub pi0_s: f64,
}

impl ChunkGenerator {
    pub fn new(objective: Objective, spec: FeatureSpec) -> Result<Self, GenError> {
        Self::from_parts(
            DenoiserModel::new(objective.mode(), spec)?,
            objective,
            make_schedule(DEFAULT_DIFFUSION_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)?,
            DEFAULT_FLOW_STEPS,
            DEFAULT_PI0_S,
        )
    }

    pub fn from_parts(
        model: DenoiserModel,
        objective: Objective,
        schedule: NoiseSchedule,
        sample_steps: usize,
        pi0_s: f64,
    ) -> Result<Self, GenError> {
        model.require(objective.mode())?;
        if sample_steps == 0 {
            return Err(GenError::BadRange("sample_steps must be at least 1".into()));
        }
        if !(pi0_s > 0.0 && pi0_s <= 1.0) {
            return Err(GenError::BadRange(format!("pi0 s must lie in (0,1], got {pi0_s}")));
        }
        Ok(Self {
            model,
            objective,
            schedule,
            sample_steps,
            pi0_s,
        })
    }

    pub fn loss_grad<R: Rng + ?Sized>(&self, batch: &[ChunkSample], rng: &mut R) -> Result<(f64, Vec<f64>), GenError> {
        match self.objective {
            Objective::Ddpm => diffusion_loss_grad(&self.model, batch, &self.schedule, rng),
            Objective::Cfm => cfm_loss_grad(&self.model, batch, TauSampler::Uniform, rng),
            Objective::Pi0 => pi0_loss_grad(&self.model, batch, self.pi0_s, rng),
        }
    }

    /// Draws one chunk for a (normalized) observation stack.
    pub fn sample<R: Rng + ?Sized>(&self, obs_stack: &[f64], rng: &mut R) -> Result<Vec<f64>, GenError> {
        match self.objective {
            Objective::Ddpm => ddpm_sample(&self.model, obs_stack, &self.schedule, rng),
            Objective::Cfm => {
                let z0 = standard_normal(rng, self.model.chunk_dim());
                euler_integrate(&self.model, &z0, obs_stack, self.sample_steps)
            }
            Objective::Pi0 => {
                let eps = standard_normal(rng, self.model.chunk_dim());
                pi0_integrate(&self.model, &eps, obs_stack, self.sample_steps)
            }
        }
    }
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// The one-step "action tracks observation" toy: `o ~ N(0,1)`, `a = o + eta`,
/// `eta ~ N(0, noise_std^2)`.
pub fn diagonal_toy<R: Rng + ?Sized>(n: usize, noise_std: f64, rng: &mut R) -> Vec<ChunkSample> {
    let eta = Normal::new(0.0, noise_std).expect("noise_std must be finite and >= 0");
    (0..n)
        .map(|_| {
            let o: f64 = StandardNormal.sample(rng);
            ChunkSample {
                obs_stack: vec![o],
                chunk: vec![o + eta.sample(rng)],
            }
        })
        .collect()
}

/// Pearson correlation of two equally long series.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}
