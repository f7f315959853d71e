use super::model::{DenoiserModel, ModelMode};
use super::{standard_normal, ChunkSample, GenError};
use rand::Rng;
use rand_distr::{Beta, Distribution};

/// How flow times are drawn during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauSampler {
    Uniform,
    /// `s * Beta(1.5, 1)`.
    Pi0 { s: f64 },
}

impl TauSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64, GenError> {
        match *self {
            TauSampler::Uniform => Ok(rng.random::<f64>()),
            TauSampler::Pi0 { s } => pi0_tau_sample(s, rng),
        }
    }
}

/// Straight-line interpolant and its constant velocity `z1 - z0`.
pub fn cfm_build(z0: &[f64], z1: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(z0.len(), z1.len());
    let z = z0.iter().zip(z1).map(|(a, b)| (1.0 - tau) * a + tau * b).collect();
    let u = z0.iter().zip(z1).map(|(a, b)| b - a).collect();
    (z, u)
}

/// `mean ||v_theta(z_tau, tau, obs) - (z1 - z0)||^2` with `z0 ~ N(0, I)`.
pub fn cfm_loss_grad<R: Rng + ?Sized>(
    model: &DenoiserModel,
    batch: &[ChunkSample],
    tau_sampler: TauSampler,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), GenError> {
    flow_loss_grad(model, batch, tau_sampler, rng, cfm_build)
}

/// pi0 interpolant `tau a + (1 - tau) eps` with target `eps - a`.
pub fn pi0_build(eps: &[f64], a: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(eps.len(), a.len());
    let z = eps.iter().zip(a).map(|(e, x)| tau * x + (1.0 - tau) * e).collect();
    let u = eps.iter().zip(a).map(|(e, x)| e - x).collect();
    (z, u)
}

/// pi0 objective with flow times drawn from `s * Beta(1.5, 1)`.
pub fn pi0_loss_grad<R: Rng + ?Sized>(
    model: &DenoiserModel,
    batch: &[ChunkSample],
    s: f64,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), GenError> {
    flow_loss_grad(model, batch, TauSampler::Pi0 { s }, rng, pi0_build)
}

fn flow_loss_grad<R: Rng + ?Sized>(
    model: &DenoiserModel,
    batch: &[ChunkSample],
    tau_sampler: TauSampler,
    rng: &mut R,
    build: fn(&[f64], &[f64], f64) -> (Vec<f64>, Vec<f64>),
) -> Result<(f64, Vec<f64>), GenError> {
    model.require(ModelMode::VectorField)?;
    if batch.is_empty() {
        return Err(GenError::EmptyBatch);
    }
    let map = model.feature_map();
    let mut grad = vec![0.0; model.weights().len()];
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut phi = Vec::new();
    for s in batch {
        model.check_dims(s.chunk.len(), s.obs_stack.len())?;
        let tau = tau_sampler.sample(rng)?;
        let noise = standard_normal(rng, s.chunk.len());
        let (z, target) = build(&noise, &s.chunk, tau);
        map.features_with(&map.obs_features(&s.obs_stack), &z, tau, &mut phi);
        loss += model.accumulate(&phi, &target, scale, &mut grad);
    }
    Ok((loss * scale, grad))
}

/// Draws `s * b` with `b ~ Beta(1.5, 1)`.
pub fn pi0_tau_sample<R: Rng + ?Sized>(s: f64, rng: &mut R) -> Result<f64, GenError> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(GenError::BadRange(format!("pi0 truncation s must lie in (0,1], got {s}")));
    }
    let beta = Beta::new(1.5, 1.0).expect("valid shape parameters");
    Ok(s * beta.sample(rng))
}

fn integrate(
    model: &DenoiserModel,
    z0: &[f64],
    obs: &[f64],
    steps: usize,
    sign: f64,
) -> Result<Vec<f64>, GenError> {
    model.require(ModelMode::VectorField)?;
    model.check_dims(z0.len(), obs.len())?;
    if steps == 0 {
        return Err(GenError::BadRange("integration needs at least one step".into()));
    }
    let map = model.feature_map();
    let base = map.obs_features(obs);
    let delta = 1.0 / steps as f64;
    let mut z = z0.to_vec();
    let mut phi = Vec::new();
    let mut v = vec![0.0; z.len()];
    for k in 0..steps {
        map.features_with(&base, &z, k as f64 * delta, &mut phi);
        model.apply(&phi, &mut v);
        for (zi, vi) in z.iter_mut().zip(&v) {
            *zi += sign * delta * vi;
        }
    }
    Ok(z)
}

/// Forward Euler `z <- z + delta v(z, tau, obs)` for tau = 0, delta, .., 1 - delta.
pub fn euler_integrate(model: &DenoiserModel, z0: &[f64], obs: &[f64], steps: usize) -> Result<Vec<f64>, GenError> {
    integrate(model, z0, obs, steps, 1.0)
}

/// Euler sampler for pi0-trained fields. The model regresses `eps - a`,
/// which points from data to noise, so the update subtracts it.
pub fn pi0_integrate(model: &DenoiserModel, eps: &[f64], obs: &[f64], steps: usize) -> Result<Vec<f64>, GenError> {
    integrate(model, eps, obs, steps, -1.0)
}
