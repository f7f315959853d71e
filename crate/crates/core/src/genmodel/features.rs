//! Fixed feature map for the linear denoiser head.
//!
//! ```text
//! phi(z, tau, obs) = [ b(obs) (x) e(tau) , z / chunk_dim^(1/4) (x) e(tau) ]
//! b(obs) = [1, obs / sqrt(n_obs), sqrt(2/D) cos(W obs + phase)]
//! e(tau) = [1, tau, sin(k pi tau), cos(k pi tau)  for k = 1..4]
//! ```
//!
//! The tensor product with the time embedding lets every coefficient of the
//! field vary smoothly with tau while staying linear in the weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use std::f64::consts::PI;

pub const HARMONICS: usize = 4;
pub const TIME_DIM: usize = 2 + 2 * HARMONICS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSpec {
    pub obs_dim: usize,
    pub chunk_dim: usize,
    /// Number of random Fourier features over the observation stack.
    pub rff_dim: usize,
    /// Length scale of the RFF kernel; frequencies are N(0, 1/bandwidth^2).
    pub bandwidth: f64,
    pub seed: u64,
}

/// Frozen random Fourier features over `obs`, crossed with the time embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    spec: FeatureSpec,
    /// `rff_dim x obs_dim`, row-major.
    freqs: Vec<f64>,
    phases: Vec<f64>,
}

pub fn time_embedding(tau: f64) -> [f64; TIME_DIM] {
    let mut e = [0.0; TIME_DIM];
    e[0] = 1.0;
    e[1] = tau;
    for k in 1..=HARMONICS {
        let w = k as f64 * PI * tau;
        e[2 * k] = w.sin();
        e[2 * k + 1] = w.cos();
    }
    e
}

impl FeatureMap {
    pub fn new(spec: FeatureSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, 1.0 / spec.bandwidth).expect("bandwidth validated by caller");
        let freqs = (0..spec.rff_dim * spec.obs_dim).map(|_| normal.sample(&mut rng)).collect();
        let uni = Uniform::new(0.0, 2.0 * PI).unwrap();
        let phases = (0..spec.rff_dim).map(|_| uni.sample(&mut rng)).collect();
        Self { spec, freqs, phases }
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    fn base_dim(&self) -> usize {
        1 + self.spec.obs_dim + self.spec.rff_dim
    }

    pub fn dim(&self) -> usize {
        (self.base_dim() + self.spec.chunk_dim) * TIME_DIM
    }

    /// Observation part `b(obs)`; independent of z and tau, so callers that
    /// evaluate many (z, tau) pairs for one observation compute it once.
    pub fn obs_features(&self, obs: &[f64]) -> Vec<f64> {
        debug_assert_eq!(obs.len(), self.spec.obs_dim);
        let mut b = Vec::with_capacity(self.base_dim());
        b.push(1.0);
        let s = 1.0 / (self.spec.obs_dim.max(1) as f64).sqrt();
        b.extend(obs.iter().map(|o| o * s));
        let amp = (2.0 / self.spec.rff_dim.max(1) as f64).sqrt();
        for (row, ph) in self.freqs.chunks_exact(self.spec.obs_dim.max(1)).zip(&self.phases) {
            let w: f64 = row.iter().zip(obs).map(|(a, o)| a * o).sum();
            b.push(amp * (w + ph).cos());
        }
        if self.spec.obs_dim == 0 {
            b.extend(self.phases.iter().map(|ph| amp * ph.cos()));
        }
        b
    }

    /// Full feature vector given precomputed `obs_features`.
    pub fn features_with(&self, base: &[f64], z: &[f64], tau: f64, out: &mut Vec<f64>) {
        debug_assert_eq!(z.len(), self.spec.chunk_dim);
        let e = time_embedding(tau);
        let zs = (self.spec.chunk_dim as f64).powf(-0.25);
        out.clear();
        out.reserve(self.dim());
        for b in base {
            out.extend(e.iter().map(|x| b * x));
        }
        for zi in z {
            out.extend(e.iter().map(|x| zi * zs * x));
        }
    }

    pub fn features(&self, z: &[f64], tau: f64, obs: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        self.features_with(&self.obs_features(obs), z, tau, &mut out);
        out
    }
}
