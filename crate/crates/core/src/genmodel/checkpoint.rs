//! Model checkpoint files.
//!
//! ```text
//! "LRGM0001"
//! mode u8 | objective u8 | norm u8 (0 none, 1 + NormMode tag) | pad u8
//! h_o u32 | h_a u32 | obs_dim u32 | action_dim u32
//! rff_dim u32 | bandwidth f64 | feature_seed u64
//! T u32 | betas f64 x T | sample_steps u32 | pi0_s f64
//! [obs mean,std,min,max f64 x obs_dim each | action likewise]   if norm != 0
//! rows u32 | cols u32 | weights f64 x rows*cols (row-major)
//! ```
//! All integers and floats little-endian.

use super::features::FeatureSpec;
use super::model::{DenoiserModel, ModelMode};
use super::schedule::NoiseSchedule;
use super::{ChunkGenerator, GenError, Objective};
use crate::dataset::{denormalize, normalize, NormMode, Stats};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"LRGM0001";

/// Per-frame statistics used to map observations and actions in and out of
/// the model's normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mode: NormMode,
    pub obs: Stats,
    pub action: Stats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub generator: ChunkGenerator,
    pub h_o: usize,
    pub h_a: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub norm: Option<Normalization>,
}

fn map_frames(x: &[f64], dim: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    x.chunks_exact(dim).flat_map(f).collect()
}

impl Checkpoint {
    pub fn new(
        generator: ChunkGenerator,
        h_o: usize,
        h_a: usize,
        obs_dim: usize,
        action_dim: usize,
        norm: Option<Normalization>,
    ) -> Result<Self, GenError> {
        let ck = Self {
            generator,
            h_o,
            h_a,
            obs_dim,
            action_dim,
            norm,
        };
        ck.validate()?;
        Ok(ck)
    }

    fn validate(&self) -> Result<(), GenError> {
        let m = &self.generator.model;
        if m.chunk_dim() != self.h_a * self.action_dim {
            return Err(GenError::DimMismatch {
                expected: self.h_a * self.action_dim,
                got: m.chunk_dim(),
            });
        }
        if m.cond_dim() != self.h_o * self.obs_dim {
            return Err(GenError::DimMismatch {
                expected: self.h_o * self.obs_dim,
                got: m.cond_dim(),
            });
        }
        if let Some(n) = &self.norm {
            if n.obs.dim() != self.obs_dim || n.action.dim() != self.action_dim {
                return Err(GenError::Checkpoint("normalization stats do not match dims".into()));
            }
        }
        Ok(())
    }

    pub fn obs_stack_dim(&self) -> usize {
        self.h_o * self.obs_dim
    }

    pub fn normalize_obs(&self, obs_stack: &[f64]) -> Vec<f64> {
        match &self.norm {
            Some(n) => map_frames(obs_stack, self.obs_dim, |f| normalize(f, &n.obs, n.mode)),
            None => obs_stack.to_vec(),
        }
    }

    pub fn normalize_chunk(&self, chunk: &[f64]) -> Vec<f64> {
        match &self.norm {
            Some(n) => map_frames(chunk, self.action_dim, |f| normalize(f, &n.action, n.mode)),
            None => chunk.to_vec(),
        }
    }

    pub fn denormalize_chunk(&self, chunk: &[f64]) -> Vec<f64> {
        match &self.norm {
            Some(n) => map_frames(chunk, self.action_dim, |f| denormalize(f, &n.action, n.mode)),
            None => chunk.to_vec(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let g = &self.generator;
        let spec = g.model.feature_map().spec();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(g.model.mode().tag());
        out.push(g.objective.tag());
        out.push(self.norm.as_ref().map_or(0, |n| 1 + n.mode.tag()));
        out.push(0);
        for v in [self.h_o, self.h_a, self.obs_dim, self.action_dim, spec.rff_dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&spec.bandwidth.to_le_bytes());
        out.extend_from_slice(&spec.seed.to_le_bytes());
        let betas = g.schedule.betas();
        out.extend_from_slice(&(betas.len() as u32).to_le_bytes());
        betas.iter().for_each(|b| out.extend_from_slice(&b.to_le_bytes()));
        out.extend_from_slice(&(g.sample_steps as u32).to_le_bytes());
        out.extend_from_slice(&g.pi0_s.to_le_bytes());
        if let Some(n) = &self.norm {
            for st in [&n.obs, &n.action] {
                for v in [&st.mean, &st.std, &st.min, &st.max] {
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        let cols = g.model.feature_map().dim();
        out.extend_from_slice(&(g.model.chunk_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        g.model.weights().iter().for_each(|w| out.extend_from_slice(&w.to_le_bytes()));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, GenError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(GenError::Checkpoint("bad magic".into()));
        }
        let mode = ModelMode::from_tag(r.u8()?).ok_or_else(|| GenError::Checkpoint("unknown mode tag".into()))?;
        let objective =
            Objective::from_tag(r.u8()?).ok_or_else(|| GenError::Checkpoint("unknown objective tag".into()))?;
        let norm_tag = r.u8()?;
        let norm_mode = match norm_tag {
            0 => None,
            t => Some(NormMode::from_tag(t - 1).ok_or_else(|| GenError::Checkpoint("unknown norm tag".into()))?),
        };
        r.u8()?;
        let h_o = r.u32()? as usize;
        let h_a = r.u32()? as usize;
        let obs_dim = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        let rff_dim = r.u32()? as usize;
        let bandwidth = r.f64()?;
        let seed = r.u64()?;
        let steps = r.u32()? as usize;
        let betas = r.f64s(steps)?;
        let sample_steps = r.u32()? as usize;
        let pi0_s = r.f64()?;
        let norm = match norm_mode {
            None => None,
            Some(mode) => {
                let mut stats = |d| -> Result<Stats, GenError> {
                    Ok(Stats {
                        mean: r.f64s(d)?,
                        std: r.f64s(d)?,
                        min: r.f64s(d)?,
                        max: r.f64s(d)?,
                    })
                };
                let obs = stats(obs_dim)?;
                let action = stats(action_dim)?;
                Some(Normalization { mode, obs, action })
            }
        };
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let spec = FeatureSpec {
            obs_dim: h_o.checked_mul(obs_dim).ok_or_else(|| GenError::Checkpoint("dims overflow".into()))?,
            chunk_dim: h_a.checked_mul(action_dim).ok_or_else(|| GenError::Checkpoint("dims overflow".into()))?,
            rff_dim,
            bandwidth,
            seed,
        };
        if rows != spec.chunk_dim {
            return Err(GenError::Checkpoint(format!("weight rows {rows} != chunk dim {}", spec.chunk_dim)));
        }
        let weights = r.f64s(rows.checked_mul(cols).ok_or_else(|| GenError::Checkpoint("dims overflow".into()))?)?;
        if r.pos != bytes.len() {
            return Err(GenError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut model = DenoiserModel::new(mode, spec)?;
        if cols != model.feature_map().dim() {
            return Err(GenError::Checkpoint(format!(
                "weight cols {cols} != feature dim {}",
                model.feature_map().dim()
            )));
        }
        model.set_weights(weights)?;
        let generator = ChunkGenerator::from_parts(model, objective, NoiseSchedule::from_betas(betas)?, sample_steps, pi0_s)?;
        Self::new(generator, h_o, h_a, obs_dim, action_dim, norm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GenError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(GenError::Io)?;
        std::fs::rename(&tmp, path).map_err(GenError::Io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GenError> {
        Self::decode(&std::fs::read(path).map_err(GenError::Io)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GenError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| GenError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, GenError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, GenError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, GenError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, GenError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, GenError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| GenError::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
    }
}
