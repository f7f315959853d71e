use super::{ChunkGenerator, ChunkSample, GenError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Step size reached at the last update; the rate falls linearly from
    /// `lr`. `None` keeps it constant.
    pub final_lr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.05,
            batch: 64,
            seed: 0,
            final_lr: None,
        }
    }
}

/// Plain minibatch SGD on the generator's objective. Returns the mean batch
/// loss of each epoch.
pub fn fit_denoiser(
    gen: &mut ChunkGenerator,
    samples: &[ChunkSample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>, GenError> {
    if samples.is_empty() {
        return Err(GenError::EmptyBatch);
    }
    let lr_ok = |lr: f64| lr >= 0.0 && lr.is_finite();
    if cfg.batch == 0 || !lr_ok(cfg.lr) || !cfg.final_lr.is_none_or(lr_ok) {
        return Err(GenError::BadRange(format!(
            "need batch > 0 and finite lr >= 0, got batch {} lr {} final {:?}",
            cfg.batch, cfg.lr, cfg.final_lr
        )));
    }
    let per_epoch = samples.len().div_ceil(cfg.batch);
    let total_steps = (per_epoch * cfg.epochs).max(2) - 1;
    let mut step = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for idx in order.chunks(cfg.batch) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| samples[i].clone()));
            let (loss, grad) = gen.loss_grad(&batch, &mut rng)?;
            if !loss.is_finite() {
                return Err(GenError::Diverged { epoch });
            }
            let lr = match cfg.final_lr {
                Some(end) => cfg.lr + (end - cfg.lr) * (step as f64 / total_steps as f64).min(1.0),
                None => cfg.lr,
            };
            step += 1;
            for (w, g) in gen.model.weights_mut().iter_mut().zip(&grad) {
                *w -= lr * g;
            }
            total += loss;
            count += 1;
        }
        let mean = total / count as f64;
        if !mean.is_finite() || gen.model.weights().iter().any(|w| !w.is_finite()) {
            return Err(GenError::Diverged { epoch });
        }
        trace.push(mean);
    }
    Ok(trace)
}
