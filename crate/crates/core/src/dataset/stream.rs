//! Batched streaming through a bounded shuffle buffer.

use super::{Dataset, DatasetError, FrameWindow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct StreamConfig {
    pub batch: usize,
    pub shuffle_buffer: usize,
    pub seed: u64,
    /// Offsets, in seconds, stacked around each yielded frame. Empty means
    /// every feature at offset zero.
    pub delta_ts: BTreeMap<String, Vec<f64>>,
}

impl StreamConfig {
    pub fn new(batch: usize, shuffle_buffer: usize, seed: u64) -> Self {
        Self {
            batch,
            shuffle_buffer,
            seed,
            delta_ts: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Global frame index.
    pub index: usize,
    pub episode: usize,
    pub frame: usize,
    pub window: FrameWindow,
}

/// One epoch over every frame. Not meant to be shared between consumers.
pub struct FrameStream<'a> {
    ds: &'a Dataset,
    delta_ts: BTreeMap<String, Vec<f64>>,
    batch: usize,
    capacity: usize,
    order: std::vec::IntoIter<(usize, usize, usize)>,
    buffer: Vec<(usize, usize, usize)>,
    rng: ChaCha8Rng,
    failed: bool,
}

impl<'a> FrameStream<'a> {
    pub(super) fn new(ds: &'a Dataset, cfg: StreamConfig) -> Result<Self, DatasetError> {
        if cfg.batch == 0 || cfg.shuffle_buffer == 0 {
            return Err(DatasetError::InvalidConfig(
                "batch and shuffle_buffer must be positive".into(),
            ));
        }
        let delta_ts = if cfg.delta_ts.is_empty() {
            ds.info().features.keys().map(|k| (k.clone(), vec![0.0])).collect()
        } else {
            cfg.delta_ts
        };
        let mut order = Vec::with_capacity(ds.num_frames());
        let mut index = 0;
        for ep in ds.episodes() {
            for f in 0..ep.length {
                order.push((index, ep.episode_index, f));
                index += 1;
            }
        }
        Ok(Self {
            ds,
            delta_ts,
            batch: cfg.batch,
            capacity: cfg.shuffle_buffer,
            order: order.into_iter(),
            buffer: Vec::with_capacity(cfg.shuffle_buffer),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            failed: false,
        })
    }

    fn next_id(&mut self) -> Option<(usize, usize, usize)> {
        while self.buffer.len() < self.capacity {
            match self.order.next() {
                Some(id) => self.buffer.push(id),
                None => break,
            }
        }
        if self.buffer.is_empty() {
            return None;
        }
        let pick = self.rng.random_range(0..self.buffer.len());
        // Preserve storage order for a single-slot buffer.
        Some(if self.capacity == 1 {
            self.buffer.remove(pick)
        } else {
            self.buffer.swap_remove(pick)
        })
    }
}

impl Iterator for FrameStream<'_> {
    type Item = Result<Vec<Sample>, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            let Some((index, episode, frame)) = self.next_id() else {
                break;
            };
            match self.ds.read_window(episode, frame, &self.delta_ts) {
                Ok(window) => out.push(Sample {
                    index,
                    episode,
                    frame,
                    window,
                }),
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
        (!out.is_empty()).then_some(Ok(out))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{DType, DatasetInfo, EpisodeFrame, FeatureSpec, FeatureValue};
    use super::*;

    fn dataset(dir: &std::path::Path, episodes: &[usize]) -> Dataset {
        let mut features = BTreeMap::new();
        features.insert("x".to_string(), FeatureSpec::new(DType::F32, &[3]));
        let mut ds = Dataset::create(dir, DatasetInfo::new(10.0, features).with_rows_per_file(64)).unwrap();
        let mut g = 0;
        for &n in episodes {
            let frames: Vec<EpisodeFrame> = (0..n)
                .map(|i| {
                    g += 1;
                    EpisodeFrame {
                        timestamp: i as f64 / 10.0,
                        values: [("x".to_string(), FeatureValue::F32(vec![g as f32; 3]))].into(),
                    }
                })
                .collect();
            ds.write_episode(&frames, "t").unwrap();
        }
        ds
    }

    fn ids(ds: &Dataset, cfg: StreamConfig) -> Vec<usize> {
        ds.stream(cfg)
            .unwrap()
            .flat_map(|b| b.unwrap())
            .map(|s| s.index)
            .collect()
    }

    #[test]
    fn unit_buffer_is_storage_order() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(dir.path(), &[5, 40, 30]);
        assert_eq!(ids(&ds, StreamConfig::new(7, 1, 9)), (0..75).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(dir.path(), &[20, 20]);
        let a = ids(&ds, StreamConfig::new(4, 16, 1));
        assert_eq!(a, ids(&ds, StreamConfig::new(4, 16, 1)));
        assert_ne!(a, ids(&ds, StreamConfig::new(4, 16, 2)));
    }

    #[test]
    fn batches_are_full_except_last() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(dir.path(), &[10]);
        let sizes: Vec<usize> = ds
            .stream(StreamConfig::new(4, 3, 0))
            .unwrap()
            .map(|b| b.unwrap().len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn missing_file_surfaces_on_pull() {
        let dir = tempfile::tempdir().unwrap();
        dataset(dir.path(), &[50, 50]);
        std::fs::remove_file(dir.path().join("data/chunk-000/file-001.bin")).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let results: Vec<_> = ds.stream(StreamConfig::new(8, 1, 0)).unwrap().collect();
        assert!(results[0].is_ok());
        assert!(matches!(results.last().unwrap(), Err(DatasetError::Io { .. })));
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(24))]
        #[test]
        fn every_frame_once(seed in 0u64..1000, buf in 1usize..50, batch in 1usize..20) {
            let dir = tempfile::tempdir().unwrap();
            let ds = dataset(dir.path(), &[13, 1, 29]);
            let mut got = ids(&ds, StreamConfig::new(batch, buf, seed));
            got.sort_unstable();
            proptest::prop_assert_eq!(got, (0..43).collect::<Vec<_>>());
        }
    }
}
