use chunkflow::genmodel::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec(seed: u64) -> FeatureSpec {
    FeatureSpec {
        obs_dim: 2,
        chunk_dim: 3,
        rff_dim: 6,
        bandwidth: 0.8,
        seed,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<ChunkSample> {
    (0..n)
        .map(|_| ChunkSample {
            obs_stack: (0..2).map(|_| rng.random_range(-1.5..1.5)).collect(),
            chunk: (0..3).map(|_| rng.random_range(-2.0..2.0)).collect(),
        })
        .collect()
}

/// Largest relative deviation between the analytic gradient and central
/// differences, replaying the same random draws for every evaluation.
fn fd_relative_error(gen: &ChunkGenerator, batch: &[ChunkSample], draw_seed: u64) -> f64 {
    let h = 1e-6;
    let (_, grad) = gen.loss_grad(batch, &mut ChaCha8Rng::seed_from_u64(draw_seed)).unwrap();
    let mut probe = gen.clone();
    let mut fd = vec![0.0; grad.len()];
    for i in 0..grad.len() {
        let w = probe.model.weights()[i];
        probe.model.weights_mut()[i] = w + h;
        let up = probe.loss_grad(batch, &mut ChaCha8Rng::seed_from_u64(draw_seed)).unwrap().0;
        probe.model.weights_mut()[i] = w - h;
        let down = probe.loss_grad(batch, &mut ChaCha8Rng::seed_from_u64(draw_seed)).unwrap().0;
        probe.model.weights_mut()[i] = w;
        fd[i] = (up - down) / (2.0 * h);
    }
    let diff: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for (k, objective) in [Objective::Ddpm, Objective::Cfm, Objective::Pi0].into_iter().enumerate() {
        for trial in 0..4 {
            let mut gen = ChunkGenerator::new(objective, small_spec(trial)).unwrap();
            gen.schedule = make_schedule(8, 1e-3, 0.3).unwrap();
            for w in gen.model.weights_mut() {
                *w = rng.random_range(-0.3..0.3);
            }
            let batch = random_batch(&mut rng, 3);
            let err = fd_relative_error(&gen, &batch, (k * 10 + trial as usize) as u64);
            assert!(err < 1e-5, "{objective} trial {trial}: {err}");
        }
    }
}

#[test]
fn noise_sample_marginal_variance() {
    let sched = make_schedule(50, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in [1, 25, 50] {
        let n = 100_000;
        let z0 = 0.7;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                noise_sample(&[z0], t, &[e], &sched).unwrap()[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let ab = sched.alpha_bar(t);
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.02, "t={t}: {var} vs {}", 1.0 - ab);
        assert!((mean - ab.sqrt() * z0).abs() < 4.0 * ((1.0 - ab) / n as f64).sqrt() + 1e-12);
    }
}

fn toy_spec() -> FeatureSpec {
    FeatureSpec {
        obs_dim: 1,
        chunk_dim: 1,
        rff_dim: 32,
        bandwidth: 1.0,
        seed: 1,
    }
}

fn toy_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 200,
        lr: 0.05,
        batch: 32,
        seed: 2,
        final_lr: None,
    }
}

fn sampled_correlation(gen: &ChunkGenerator, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let obs: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let acts: Vec<f64> = obs.iter().map(|o| gen.sample(&[*o], rng).unwrap()[0]).collect();
    correlation(&obs, &acts)
}

#[test]
fn ddpm_learns_diagonal_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = diagonal_toy(4000, 0.1, &mut rng);
    let mut gen = ChunkGenerator::new(Objective::Ddpm, toy_spec()).unwrap();
    let initial = gen.loss_grad(&data, &mut rng).unwrap().0;
    fit_denoiser(&mut gen, &data, &toy_cfg()).unwrap();
    let last = gen.loss_grad(&data, &mut rng).unwrap().0;
    assert!(last < 0.1 * initial, "{last} vs {initial}");

    // Sampled chunks reproduce the data mean.
    let data_mean = data.iter().map(|s| s.chunk[0]).sum::<f64>() / data.len() as f64;
    let n = 10_000;
    let sample_mean = (0..n)
        .map(|i| gen.sample(&data[i % data.len()].obs_stack, &mut rng).unwrap()[0])
        .sum::<f64>()
        / n as f64;
    let data_mean_matched = (0..n).map(|i| data[i % data.len()].chunk[0]).sum::<f64>() / n as f64;
    assert!((sample_mean - data_mean_matched).abs() < 0.05, "{sample_mean} vs {data_mean}");
    assert!(sampled_correlation(&gen, 4000, &mut rng) >= 0.85);
}

#[test]
fn cfm_learns_diagonal_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = diagonal_toy(4000, 0.1, &mut rng);
    let mut gen = ChunkGenerator::new(Objective::Cfm, toy_spec()).unwrap();
    fit_denoiser(&mut gen, &data, &toy_cfg()).unwrap();
    assert!(sampled_correlation(&gen, 4000, &mut rng) >= 0.9);
}

#[test]
fn pi0_objective_samples_toward_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = diagonal_toy(4000, 0.1, &mut rng);
    let mut gen = ChunkGenerator::new(Objective::Pi0, toy_spec()).unwrap();
    fit_denoiser(&mut gen, &data, &toy_cfg()).unwrap();
    assert!(sampled_correlation(&gen, 4000, &mut rng) >= 0.9);
}

#[test]
fn cfm_recovers_constant_shift() {
    // Prior N(0,1) to data N(shift,1): the field averaged over the path
    // distribution equals the shift.
    let shift = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<ChunkSample> = (0..4000)
        .map(|_| ChunkSample {
            obs_stack: vec![0.0],
            chunk: vec![shift + rng.sample::<f64, _>(rand_distr::StandardNormal)],
        })
        .collect();
    let mut gen = ChunkGenerator::new(Objective::Cfm, toy_spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 400,
        lr: 0.01,
        ..toy_cfg()
    };
    fit_denoiser(&mut gen, &data, &cfg).unwrap();
    let n = 20_000;
    let mut total = 0.0;
    for _ in 0..n {
        let z0: f64 = rng.sample(rand_distr::StandardNormal);
        let z1 = shift + rng.sample::<f64, _>(rand_distr::StandardNormal);
        let tau: f64 = rng.random();
        let (z, _) = cfm_build(&[z0], &[z1], tau);
        total += gen.model.predict(&z, tau, &[0.0])[0];
    }
    let mean = total / n as f64;
    assert!((mean / shift - 1.0).abs() < 0.05, "{mean}");
}

#[test]
fn pi0_tau_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (s, expect) in [(1.0, 0.6), (0.9, 0.54)] {
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let t = pi0_tau_sample(s, &mut rng).unwrap();
            assert!((0.0..=s).contains(&t));
            sum += t;
        }
        let mean = sum / n as f64;
        assert!((mean / expect - 1.0).abs() < 0.01, "s={s}: {mean}");
    }
}

#[test]
fn checkpoint_preserves_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = diagonal_toy(500, 0.1, &mut rng);
    let mut gen = ChunkGenerator::new(Objective::Ddpm, toy_spec()).unwrap();
    fit_denoiser(
        &mut gen,
        &data,
        &TrainConfig {
            epochs: 5,
            ..toy_cfg()
        },
    )
    .unwrap();
    let ck = Checkpoint::new(gen, 1, 1, 1, 1, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.lrgm");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let a = ck.generator.sample(&[0.3], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = back.generator.sample(&[0.3], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}
