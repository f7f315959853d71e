use super::model::{DenoiserModel, ModelMode};
use super::schedule::{noise_sample, NoiseSchedule};
use super::{standard_normal, ChunkSample, GenError};
use rand::Rng;

fn step_time(t: usize, sched: &NoiseSchedule) -> f64 {
    t as f64 / sched.steps() as f64
}

/// Simplified DDPM objective `mean ||eps - eps_theta(z_t, t, obs)||^2` with
/// `t ~ U{1..T}` and its exact gradient in the weights.
pub fn diffusion_loss_grad<R: Rng + ?Sized>(
    model: &DenoiserModel,
    batch: &[ChunkSample],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), GenError> {
    model.require(ModelMode::EpsilonPredictor)?;
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
        let t = rng.random_range(1..=sched.steps());
        let eps = standard_normal(rng, s.chunk.len());
        let zt = noise_sample(&s.chunk, t, &eps, sched)?;
        map.features_with(&map.obs_features(&s.obs_stack), &zt, step_time(t, sched), &mut phi);
        loss += model.accumulate(&phi, &eps, scale, &mut grad);
    }
    Ok((loss * scale, grad))
}

/// Deterministic part of the reverse step:
/// `(z_t - beta_t / sqrt(1 - ab_t) * eps_theta) / sqrt(alpha_t)`.
pub fn ddpm_mean(
    model: &DenoiserModel,
    z_t: &[f64],
    t: usize,
    obs: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>, GenError> {
    model.require(ModelMode::EpsilonPredictor)?;
    sched.check_step(t)?;
    model.check_dims(z_t.len(), obs.len())?;
    let eps = model.predict(z_t, step_time(t, sched), obs);
    let k = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    Ok(z_t.iter().zip(&eps).map(|(z, e)| inv * (z - k * e)).collect())
}

/// One reverse step with `sigma_t = sqrt(beta_t)`; the last step (t = 1)
/// adds no noise.
pub fn ddpm_step<R: Rng + ?Sized>(
    model: &DenoiserModel,
    z_t: &[f64],
    t: usize,
    obs: &[f64],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>, GenError> {
    let mut z = ddpm_mean(model, z_t, t, obs, sched)?;
    if t > 1 {
        let sigma = sched.beta(t).sqrt();
        for (zi, e) in z.iter_mut().zip(standard_normal(rng, z_t.len())) {
            *zi += sigma * e;
        }
    }
    Ok(z)
}

/// Full ancestral sampling from `z_T ~ N(0, I)`.
pub fn ddpm_sample<R: Rng + ?Sized>(
    model: &DenoiserModel,
    obs: &[f64],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>, GenError> {
    let mut z = standard_normal(rng, model.chunk_dim());
    for t in (1..=sched.steps()).rev() {
        z = ddpm_step(model, &z, t, obs, sched, rng)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::super::features::FeatureSpec;
    use super::super::schedule::make_schedule;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> DenoiserModel {
        DenoiserModel::new(
            ModelMode::EpsilonPredictor,
            FeatureSpec {
                obs_dim: 2,
                chunk_dim: 3,
                rff_dim: 8,
                bandwidth: 1.0,
                seed: 5,
            },
        )
        .unwrap()
    }

    fn batch() -> Vec<ChunkSample> {
        (0..3)
            .map(|i| ChunkSample {
                obs_stack: vec![i as f64 * 0.3, -0.2],
                chunk: vec![0.5, -1.0 + i as f64, 0.25],
            })
            .collect()
    }

    #[test]
    fn zero_model_loss_is_noise_energy() {
        let m = model();
        let sched = make_schedule(20, 1e-3, 0.2).unwrap();
        let b = batch();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut replay = rng.clone();
        let (loss, grad) = diffusion_loss_grad(&m, &b, &sched, &mut rng).unwrap();
        let mut energy = 0.0;
        for s in &b {
            let _t: usize = replay.random_range(1..=20);
            energy += standard_normal(&mut replay, s.chunk.len()).iter().map(|e| e * e).sum::<f64>();
        }
        assert!((loss - energy / 3.0).abs() < 1e-12);
        assert_eq!(grad.len(), m.weights().len());
    }

    #[test]
    fn zero_model_step_rescales() {
        let m = model();
        let sched = make_schedule(10, 0.01, 0.1).unwrap();
        let z = [1.0, -2.0, 0.5];
        let out = ddpm_mean(&m, &z, 6, &[0.0, 0.0], &sched).unwrap();
        for (o, zi) in out.iter().zip(z) {
            assert!((o - zi / sched.alpha(6).sqrt()).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let last = ddpm_step(&m, &z, 1, &[0.0, 0.0], &sched, &mut rng).unwrap();
        assert_eq!(last, ddpm_mean(&m, &z, 1, &[0.0, 0.0], &sched).unwrap());
    }

    #[test]
    fn single_step_schedule_is_deterministic() {
        let mut m = model();
        for (i, w) in m.weights_mut().iter_mut().enumerate() {
            *w = ((i % 7) as f64 - 3.0) * 0.01;
        }
        let sched = make_schedule(1, 0.3, 0.3).unwrap();
        let z = [0.1, 0.2, 0.3];
        let a = ddpm_step(&m, &z, 1, &[1.0, 1.0], &sched, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = ddpm_step(&m, &z, 1, &[1.0, 1.0], &sched, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_range_and_mode_checked() {
        let m = model();
        let sched = make_schedule(4, 0.01, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            ddpm_step(&m, &[0.0; 3], 0, &[0.0; 2], &sched, &mut rng),
            Err(GenError::StepOutOfRange { .. })
        ));
        assert!(matches!(
            ddpm_step(&m, &[0.0; 3], 5, &[0.0; 2], &sched, &mut rng),
            Err(GenError::StepOutOfRange { .. })
        ));
        assert!(matches!(diffusion_loss_grad(&m, &[], &sched, &mut rng), Err(GenError::EmptyBatch)));
    }
}
