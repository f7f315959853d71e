use super::features::{FeatureMap, FeatureSpec};
use super::GenError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelMode {
    /// Predicts the noise added at step t (DDPM).
    EpsilonPredictor,
    /// Predicts a velocity field over flow time (CFM, pi0).
    VectorField,
}

impl ModelMode {
    pub fn tag(&self) -> u8 {
        match self {
            ModelMode::EpsilonPredictor => 0,
            ModelMode::VectorField => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelMode::EpsilonPredictor),
            1 => Some(ModelMode::VectorField),
            _ => None,
        }
    }
}

/// Linear head over a frozen feature map: `pred = W phi(z, tau, obs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    mode: ModelMode,
    map: FeatureMap,
    /// `chunk_dim x feature_dim`, row-major.
    weights: Vec<f64>,
}

impl DenoiserModel {
    pub fn new(mode: ModelMode, spec: FeatureSpec) -> Result<Self, GenError> {
        if spec.chunk_dim == 0 {
            return Err(GenError::BadRange("chunk dimension must be positive".into()));
        }
        if !(spec.bandwidth > 0.0 && spec.bandwidth.is_finite()) {
            return Err(GenError::BadRange(format!("bandwidth must be positive, got {}", spec.bandwidth)));
        }
        let map = FeatureMap::new(spec);
        let weights = vec![0.0; spec.chunk_dim * map.dim()];
        Ok(Self { mode, map, weights })
    }

    pub fn mode(&self) -> ModelMode {
        self.mode
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn chunk_dim(&self) -> usize {
        self.map.spec().chunk_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.map.spec().obs_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<(), GenError> {
        if weights.len() != self.weights.len() {
            return Err(GenError::DimMismatch {
                expected: self.weights.len(),
                got: weights.len(),
            });
        }
        self.weights = weights;
        Ok(())
    }

    pub(crate) fn require(&self, mode: ModelMode) -> Result<(), GenError> {
        if self.mode == mode {
            Ok(())
        } else {
            Err(GenError::WrongMode {
                expected: mode,
                got: self.mode,
            })
        }
    }

    pub(crate) fn check_dims(&self, z: usize, obs: usize) -> Result<(), GenError> {
        if z != self.chunk_dim() {
            return Err(GenError::DimMismatch {
                expected: self.chunk_dim(),
                got: z,
            });
        }
        if obs != self.cond_dim() {
            return Err(GenError::DimMismatch {
                expected: self.cond_dim(),
                got: obs,
            });
        }
        Ok(())
    }

    pub(crate) fn apply(&self, phi: &[f64], out: &mut [f64]) {
        let f = phi.len();
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(f)) {
            *o = row.iter().zip(phi).map(|(w, x)| w * x).sum();
        }
    }

    /// Network output for one input.
    pub fn predict(&self, z: &[f64], tau: f64, obs: &[f64]) -> Vec<f64> {
        let phi = self.map.features(z, tau, obs);
        let mut out = vec![0.0; self.chunk_dim()];
        self.apply(&phi, &mut out);
        out
    }

    /// Adds the gradient of `||W phi - target||^2` scaled by `scale` into
    /// `grad`; returns the unscaled squared error.
    pub(crate) fn accumulate(&self, phi: &[f64], target: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
        let mut pred = vec![0.0; target.len()];
        self.apply(phi, &mut pred);
        let mut sq = 0.0;
        let f = phi.len();
        for ((p, y), g) in pred.iter().zip(target).zip(grad.chunks_exact_mut(f)) {
            let r = p - y;
            sq += r * r;
            let k = 2.0 * r * scale;
            for (gi, x) in g.iter_mut().zip(phi) {
                *gi += k * x;
            }
        }
        sq
    }
}
