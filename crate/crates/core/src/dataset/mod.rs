//! Episode dataset: concatenated columnar data files, relational metadata and
//! aggregate statistics.
//!
//! ```text
//! root/meta/info.json          schema, fps, counters, path templates
//! root/meta/stats.json         per-feature mean / std / min / max
//! root/meta/tasks.jsonl        task index -> instruction text
//! root/meta/episodes.jsonl     one record per episode: (file, row offset, length)
//! root/data/chunk-NNN/file-MMM.bin
//! ```
//!
//! Writers stage every file under a temporary name and rename it into place;
//! `info.json` is written last and is the commit point, so readers never see
//! an episode whose rows are not fully on disk.

mod stats;
mod stream;
mod table;

pub use stats::{denormalize, normalize, FeatureStats, NormMode, Stats, NORM_EPS};
pub use stream::{FrameStream, Sample, StreamConfig};
pub use table::{schema_hash, ColumnSpec, Table, TABLE_HEADER_LEN, TABLE_MAGIC};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use thiserror::Error;

pub const FORMAT_VERSION: &str = "lrds-1.0";
/// Half-width, in seconds, of the window within which a requested offset must
/// land on a frame timestamp.
pub const TIMESTAMP_TOLERANCE_S: f64 = 1e-4;

/// Columns every data file carries ahead of the user features.
pub const INDEX_COLUMNS: [(&str, DType); 5] = [
    ("timestamp", DType::F64),
    ("frame_index", DType::I64),
    ("episode_index", DType::I64),
    ("index", DType::I64),
    ("task_index", DType::I64),
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("metadata error in {path}: {source}")]
    Metadata {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("dataset has no frames")]
    EmptyDataset,
    #[error("offset {offset}s for '{feature}' does not land on a frame (fps {fps})")]
    OffsetNotOnGrid {
        feature: String,
        offset: f64,
        fps: f64,
    },
    #[error("unknown feature '{0}'")]
    MissingFeature(String),
    #[error("episode {0} does not exist")]
    EpisodeOutOfRange(usize),
    #[error("frame {frame} outside episode {episode} of length {length}")]
    FrameOutOfRange {
        episode: usize,
        frame: usize,
        length: usize,
    },
    #[error("corrupt data file: {0}")]
    Corrupt(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "float32")]
    F32,
    #[serde(rename = "float64")]
    F64,
    #[serde(rename = "int64")]
    I64,
}

impl DType {
    pub fn tag(&self) -> &'static str {
        match self {
            DType::F32 => "float32",
            DType::F64 => "float64",
            DType::I64 => "int64",
        }
    }

    pub fn size(&self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl FeatureSpec {
    pub fn new(dtype: DType, shape: &[usize]) -> Self {
        Self {
            dtype,
            shape: shape.to_vec(),
        }
    }

    pub fn width(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One frame's value for one feature, flattened.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureValue {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl FeatureValue {
    pub fn dtype(&self) -> DType {
        match self {
            FeatureValue::F32(_) => DType::F32,
            FeatureValue::F64(_) => DType::F64,
            FeatureValue::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            FeatureValue::F32(v) => v.len(),
            FeatureValue::F64(v) => v.len(),
            FeatureValue::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            FeatureValue::F32(v) => v.iter().map(|x| *x as f64).collect(),
            FeatureValue::F64(v) => v.clone(),
            FeatureValue::I64(v) => v.iter().map(|x| *x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeFrame {
    /// Seconds since the episode start.
    pub timestamp: f64,
    pub values: BTreeMap<String, FeatureValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub version: String,
    pub fps: f64,
    /// User features; the index columns are implicit.
    pub features: BTreeMap<String, FeatureSpec>,
    pub data_path: String,
    /// A data file is rolled once adding an episode would take it past this.
    pub rows_per_file: usize,
    /// Data files per `chunk-NNN` directory.
    pub files_per_chunk: usize,
    pub total_episodes: usize,
    pub total_frames: usize,
    pub total_files: usize,
    pub total_tasks: usize,
    pub stats_fresh: bool,
}

impl DatasetInfo {
    pub fn new(fps: f64, features: BTreeMap<String, FeatureSpec>) -> Self {
        Self {
            version: FORMAT_VERSION.into(),
            fps,
            features,
            data_path: "data/chunk-{chunk_index:03}/file-{file_index:03}.bin".into(),
            rows_per_file: 1000,
            files_per_chunk: 1000,
            total_episodes: 0,
            total_frames: 0,
            total_files: 0,
            total_tasks: 0,
            stats_fresh: false,
        }
    }

    pub fn with_rows_per_file(mut self, rows: usize) -> Self {
        self.rows_per_file = rows;
        self
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(DatasetError::InvalidConfig(format!("fps must be positive, got {}", self.fps)));
        }
        if self.features.is_empty() {
            return Err(DatasetError::InvalidConfig("feature schema is empty".into()));
        }
        if self.rows_per_file == 0 || self.files_per_chunk == 0 {
            return Err(DatasetError::InvalidConfig("rollover thresholds must be positive".into()));
        }
        for (name, spec) in &self.features {
            if INDEX_COLUMNS.iter().any(|(n, _)| n == name) {
                return Err(DatasetError::InvalidConfig(format!("'{name}' is a reserved column")));
            }
            if spec.width() == 0 {
                return Err(DatasetError::InvalidConfig(format!("feature '{name}' has zero width")));
            }
        }
        Ok(())
    }

    /// Full column list of a data file: index columns, then features by name.
    pub fn columns(&self) -> Vec<ColumnSpec> {
        INDEX_COLUMNS
            .iter()
            .map(|(n, d)| ColumnSpec {
                name: (*n).into(),
                dtype: *d,
                width: 1,
            })
            .chain(self.features.iter().map(|(n, s)| ColumnSpec {
                name: n.clone(),
                dtype: s.dtype,
                width: s.width(),
            }))
            .collect()
    }

    pub fn data_file(&self, file_id: usize) -> PathBuf {
        let chunk = file_id / self.files_per_chunk;
        let file = file_id % self.files_per_chunk;
        PathBuf::from(format!("data/chunk-{chunk:03}/file-{file:03}.bin"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub episode_index: usize,
    pub length: usize,
    pub task_index: usize,
    pub task: String,
    pub file_id: usize,
    pub row_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TaskRecord {
    task_index: usize,
    task: String,
}

/// Values requested around one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    /// Per feature, one value per requested offset.
    pub values: BTreeMap<String, Vec<FeatureValue>>,
    /// Per feature, `true` where the offset hit a real frame.
    pub pad_mask: BTreeMap<String, Vec<bool>>,
}

impl FrameWindow {
    /// Concatenates a feature's stacked values as `f64`.
    pub fn flat(&self, feature: &str) -> Option<Vec<f64>> {
        self.values
            .get(feature)
            .map(|vs| vs.iter().flat_map(FeatureValue::to_f64).collect())
    }
}

/// Maps a time offset onto a frame offset, rejecting offsets between frames.
pub fn offset_to_frames(delta_s: f64, fps: f64) -> Option<i64> {
    let x = delta_s * fps;
    let k = x.round();
    if (x - k).abs() <= TIMESTAMP_TOLERANCE_S * fps && k.is_finite() {
        Some(k as i64)
    } else {
        None
    }
}

pub struct Dataset {
    root: PathBuf,
    info: DatasetInfo,
    episodes: Vec<EpisodeMeta>,
    tasks: Vec<String>,
    cache: Mutex<HashMap<usize, Arc<Table>>>,
}

impl std::fmt::Debug for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dataset")
            .field("root", &self.root)
            .field("episodes", &self.episodes.len())
            .field("frames", &self.info.total_frames)
            .finish()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let dir = path.parent().expect("dataset paths have a parent");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Metadata {
        path: path.to_owned(),
        source,
    })
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for line in io::BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| DatasetError::Metadata {
                path: path.to_owned(),
                source,
            })?,
        );
    }
    Ok(out)
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).expect("metadata serializes");
        out.push(b'\n');
    }
    out
}

impl Dataset {
    /// Creates an empty dataset at `root`. Fails if one already exists there.
    pub fn create(root: impl AsRef<Path>, info: DatasetInfo) -> Result<Self, DatasetError> {
        info.validate()?;
        let root = root.as_ref().to_owned();
        let info_path = root.join("meta/info.json");
        if info_path.exists() {
            return Err(DatasetError::InvalidConfig(format!(
                "a dataset already exists at {}",
                root.display()
            )));
        }
        let info = DatasetInfo {
            total_episodes: 0,
            total_frames: 0,
            total_files: 0,
            total_tasks: 0,
            stats_fresh: false,
            ..info
        };
        let ds = Self {
            root,
            info,
            episodes: Vec::new(),
            tasks: Vec::new(),
            cache: Mutex::new(HashMap::new()),
        };
        ds.write_info()?;
        Ok(ds)
    }

    /// Opens a dataset, trusting only what `info.json` has committed.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let root = root.as_ref().to_owned();
        let info: DatasetInfo = read_json(&root.join("meta/info.json"))?;
        info.validate()?;
        let mut episodes: Vec<EpisodeMeta> = read_jsonl(&root.join("meta/episodes.jsonl"))?;
        if episodes.len() < info.total_episodes {
            return Err(DatasetError::Corrupt(format!(
                "info commits {} episodes, metadata lists {}",
                info.total_episodes,
                episodes.len()
            )));
        }
        episodes.truncate(info.total_episodes);
        for (i, ep) in episodes.iter().enumerate() {
            if ep.episode_index != i {
                return Err(DatasetError::Corrupt(format!(
                    "episode record {i} carries index {}",
                    ep.episode_index
                )));
            }
        }
        let mut tasks: Vec<TaskRecord> = read_jsonl(&root.join("meta/tasks.jsonl"))?;
        tasks.truncate(info.total_tasks);
        Ok(Self {
            root,
            info,
            episodes,
            tasks: tasks.into_iter().map(|t| t.task).collect(),
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Opens the dataset at `root`, creating it with `info` when absent.
    pub fn open_or_create(root: impl AsRef<Path>, info: DatasetInfo) -> Result<Self, DatasetError> {
        if root.as_ref().join("meta/info.json").exists() {
            let ds = Self::open(root)?;
            if ds.info.features != info.features {
                return Err(DatasetError::SchemaMismatch(
                    "existing dataset has a different feature schema".into(),
                ));
            }
            Ok(ds)
        } else {
            Self::create(root, info)
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn info(&self) -> &DatasetInfo {
        &self.info
    }

    pub fn episodes(&self) -> &[EpisodeMeta] {
        &self.episodes
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn num_frames(&self) -> usize {
        self.info.total_frames
    }

    fn write_info(&self) -> Result<(), DatasetError> {
        let bytes = serde_json::to_vec_pretty(&self.info).expect("info serializes");
        write_atomic(&self.root.join("meta/info.json"), &bytes)
    }

    fn validate_frames(&self, frames: &[EpisodeFrame]) -> Result<(), DatasetError> {
        if frames.is_empty() {
            return Err(DatasetError::SchemaMismatch("episode has no frames".into()));
        }
        let period = 1.0 / self.info.fps;
        let t0 = frames[0].timestamp;
        for (i, f) in frames.iter().enumerate() {
            if !f.timestamp.is_finite() {
                return Err(DatasetError::SchemaMismatch(format!("frame {i} has a non-finite timestamp")));
            }
            let expected = t0 + i as f64 * period;
            if (f.timestamp - expected).abs() > TIMESTAMP_TOLERANCE_S {
                return Err(DatasetError::SchemaMismatch(format!(
                    "frame {i} timestamp {} is off the {} fps grid",
                    f.timestamp, self.info.fps
                )));
            }
            if f.values.len() != self.info.features.len() {
                return Err(DatasetError::SchemaMismatch(format!(
                    "frame {i} has {} features, schema has {}",
                    f.values.len(),
                    self.info.features.len()
                )));
            }
            for (name, spec) in &self.info.features {
                let v = f
                    .values
                    .get(name)
                    .ok_or_else(|| DatasetError::SchemaMismatch(format!("frame {i} lacks '{name}'")))?;
                if v.dtype() != spec.dtype || v.len() != spec.width() {
                    return Err(DatasetError::SchemaMismatch(format!(
                        "frame {i} feature '{name}' is {}[{}], expected {}[{}]",
                        v.dtype().tag(),
                        v.len(),
                        spec.dtype.tag(),
                        spec.width()
                    )));
                }
            }
        }
        Ok(())
    }

    fn rows_in_file(&self, file_id: usize) -> usize {
        self.episodes
            .iter()
            .filter(|e| e.file_id == file_id)
            .map(|e| e.row_offset + e.length)
            .max()
            .unwrap_or(0)
    }

    /// Appends one episode, rolling to a new data file when the current one
    /// would exceed `rows_per_file`. Episodes are never split across files.
    pub fn write_episode(
        &mut self,
        frames: &[EpisodeFrame],
        task: &str,
    ) -> Result<EpisodeMeta, DatasetError> {
        self.validate_frames(frames)?;
        let len = frames.len();

        let (file_id, row_offset) = match self.info.total_files.checked_sub(1) {
            Some(last) => {
                let rows = self.rows_in_file(last);
                if rows > 0 && rows + len > self.info.rows_per_file {
                    (last + 1, 0)
                } else {
                    (last, rows)
                }
            }
            None => (0, 0),
        };

        let task_index = match self.tasks.iter().position(|t| t == task) {
            Some(i) => i,
            None => self.tasks.len(),
        };
        let episode_index = self.episodes.len();
        let global_start = self.info.total_frames;

        let mut table = if row_offset > 0 {
            (*self.load_table(file_id)?).clone()
        } else {
            Table::new(self.info.columns())
        };
        if table.rows() != row_offset {
            return Err(DatasetError::Corrupt(format!(
                "data file {file_id} holds {} rows, metadata expects {row_offset}",
                table.rows()
            )));
        }
        for (i, f) in frames.iter().enumerate() {
            let mut row = vec![
                FeatureValue::F64(vec![f.timestamp]),
                FeatureValue::I64(vec![i as i64]),
                FeatureValue::I64(vec![episode_index as i64]),
                FeatureValue::I64(vec![(global_start + i) as i64]),
                FeatureValue::I64(vec![task_index as i64]),
            ];
            row.extend(self.info.features.keys().map(|k| f.values[k].clone()));
            table.push_row(&row)?;
        }

        let data_path = self.root.join(self.info.data_file(file_id));
        write_atomic(&data_path, &table.encode())?;
        self.cache.lock().unwrap().insert(file_id, Arc::new(table));

        let meta = EpisodeMeta {
            episode_index,
            length: len,
            task_index,
            task: task.to_owned(),
            file_id,
            row_offset,
        };
        let mut episodes = self.episodes.clone();
        episodes.push(meta.clone());
        write_atomic(&self.root.join("meta/episodes.jsonl"), &to_jsonl(&episodes))?;

        let mut tasks = self.tasks.clone();
        if task_index == tasks.len() {
            tasks.push(task.to_owned());
        }
        let records: Vec<TaskRecord> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| TaskRecord {
                task_index: i,
                task: t.clone(),
            })
            .collect();
        write_atomic(&self.root.join("meta/tasks.jsonl"), &to_jsonl(&records))?;

        let mut info = self.info.clone();
        info.total_episodes += 1;
        info.total_frames += len;
        info.total_files = info.total_files.max(file_id + 1);
        info.total_tasks = tasks.len();
        info.stats_fresh = false;
        let bytes = serde_json::to_vec_pretty(&info).expect("info serializes");
        write_atomic(&self.root.join("meta/info.json"), &bytes)?;

        self.info = info;
        self.episodes = episodes;
        self.tasks = tasks;
        Ok(meta)
    }

    pub(crate) fn load_table(&self, file_id: usize) -> Result<Arc<Table>, DatasetError> {
        if let Some(t) = self.cache.lock().unwrap().get(&file_id) {
            return Ok(t.clone());
        }
        let path = self.root.join(self.info.data_file(file_id));
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let table = Arc::new(Table::decode(&bytes, self.info.columns())?);
        self.cache.lock().unwrap().insert(file_id, table.clone());
        Ok(table)
    }

    pub fn episode(&self, episode: usize) -> Result<&EpisodeMeta, DatasetError> {
        self.episodes
            .get(episode)
            .ok_or(DatasetError::EpisodeOutOfRange(episode))
    }

    /// Reads one frame of an episode.
    pub fn read_frame(&self, episode: usize, frame: usize) -> Result<EpisodeFrame, DatasetError> {
        let ep = self.episode(episode)?;
        if frame >= ep.length {
            return Err(DatasetError::FrameOutOfRange {
                episode,
                frame,
                length: ep.length,
            });
        }
        let table = self.load_table(ep.file_id)?;
        let row = ep.row_offset + frame;
        let ts = match table.value(0, row) {
            FeatureValue::F64(v) => v[0],
            _ => unreachable!("timestamp column is float64"),
        };
        let values = self
            .info
            .features
            .keys()
            .enumerate()
            .map(|(i, k)| (k.clone(), table.value(INDEX_COLUMNS.len() + i, row)))
            .collect();
        Ok(EpisodeFrame {
            timestamp: ts,
            values,
        })
    }

    /// Stacks features at time offsets around `frame`. Offsets falling outside
    /// the episode replicate the nearest edge frame and are masked out.
    pub fn read_window(
        &self,
        episode: usize,
        frame: usize,
        delta_ts: &BTreeMap<String, Vec<f64>>,
    ) -> Result<FrameWindow, DatasetError> {
        let ep = self.episode(episode)?;
        if frame >= ep.length {
            return Err(DatasetError::FrameOutOfRange {
                episode,
                frame,
                length: ep.length,
            });
        }
        let table = self.load_table(ep.file_id)?;
        let mut values = BTreeMap::new();
        let mut pad_mask = BTreeMap::new();
        for (feature, offsets) in delta_ts {
            let col = table
                .column_index(feature)
                .ok_or_else(|| DatasetError::MissingFeature(feature.clone()))?;
            let mut vs = Vec::with_capacity(offsets.len());
            let mut mask = Vec::with_capacity(offsets.len());
            for &delta in offsets {
                let k = offset_to_frames(delta, self.info.fps).ok_or_else(|| {
                    DatasetError::OffsetNotOnGrid {
                        feature: feature.clone(),
                        offset: delta,
                        fps: self.info.fps,
                    }
                })?;
                let idx = frame as i64 + k;
                let valid = idx >= 0 && idx < ep.length as i64;
                let clamped = idx.clamp(0, ep.length as i64 - 1) as usize;
                vs.push(table.value(col, ep.row_offset + clamped));
                mask.push(valid);
            }
            values.insert(feature.clone(), vs);
            pad_mask.insert(feature.clone(), mask);
        }
        Ok(FrameWindow { values, pad_mask })
    }

    /// Single-pass statistics over every frame; persisted to `meta/stats.json`.
    pub fn compute_stats(&mut self) -> Result<FeatureStats, DatasetError> {
        if self.info.total_frames == 0 {
            return Err(DatasetError::EmptyDataset);
        }
        let mut acc: BTreeMap<String, stats::Welford> = self
            .info
            .features
            .iter()
            .map(|(k, s)| (k.clone(), stats::Welford::new(s.width())))
            .collect();
        for ep in &self.episodes {
            let table = self.load_table(ep.file_id)?;
            for (i, name) in self.info.features.keys().enumerate() {
                let w = acc.get_mut(name).expect("accumulator per feature");
                for row in ep.row_offset..ep.row_offset + ep.length {
                    w.push(&table.value(INDEX_COLUMNS.len() + i, row).to_f64());
                }
            }
        }
        let stats = FeatureStats {
            features: acc.into_iter().map(|(k, w)| (k, w.finish())).collect(),
        };
        let bytes = serde_json::to_vec_pretty(&stats).expect("stats serialize");
        write_atomic(&self.root.join("meta/stats.json"), &bytes)?;
        self.info.stats_fresh = true;
        self.write_info()?;
        Ok(stats)
    }

    /// Persisted statistics, if present and not invalidated by later writes.
    pub fn stats(&self) -> Result<Option<FeatureStats>, DatasetError> {
        if !self.info.stats_fresh {
            return Ok(None);
        }
        read_json(&self.root.join("meta/stats.json")).map(Some)
    }

    pub fn stream(&self, cfg: StreamConfig) -> Result<FrameStream<'_>, DatasetError> {
        FrameStream::new(self, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(rows_per_file: usize) -> DatasetInfo {
        let mut features = BTreeMap::new();
        features.insert("state".to_string(), FeatureSpec::new(DType::F64, &[2]));
        features.insert("count".to_string(), FeatureSpec::new(DType::I64, &[1]));
        features.insert("gain".to_string(), FeatureSpec::new(DType::F32, &[1]));
        DatasetInfo::new(30.0, features).with_rows_per_file(rows_per_file)
    }

    fn frames(n: usize, base: f64) -> Vec<EpisodeFrame> {
        (0..n)
            .map(|i| {
                let mut values = BTreeMap::new();
                values.insert("state".into(), FeatureValue::F64(vec![base + i as f64, -(i as f64)]));
                values.insert("count".into(), FeatureValue::I64(vec![i as i64 * 7]));
                values.insert("gain".into(), FeatureValue::F32(vec![0.25 * i as f32]));
                EpisodeFrame {
                    timestamp: i as f64 / 30.0,
                    values,
                }
            })
            .collect()
    }

    #[test]
    fn episodes_concatenate_into_one_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::create(dir.path(), info(1000)).unwrap();
        let a = ds.write_episode(&frames(10, 0.0), "reach").unwrap();
        let b = ds.write_episode(&frames(10, 100.0), "reach").unwrap();
        assert_eq!((a.file_id, a.row_offset), (0, 0));
        assert_eq!((b.file_id, b.row_offset), (0, 10));
        assert_eq!(b.task_index, 0);
        assert!(dir.path().join("data/chunk-000/file-000.bin").exists());
    }

    #[test]
    fn rolls_past_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::create(dir.path(), info(15)).unwrap();
        let a = ds.write_episode(&frames(10, 0.0), "reach").unwrap();
        let b = ds.write_episode(&frames(10, 0.0), "push").unwrap();
        assert_eq!((a.file_id, b.file_id), (0, 1));
        assert_eq!(b.row_offset, 0);
        assert_eq!(b.task_index, 1);
        assert!(dir.path().join("data/chunk-000/file-001.bin").exists());
    }

    #[test]
    fn oversized_episode_is_not_split() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::create(dir.path(), info(5)).unwrap();
        let a = ds.write_episode(&frames(12, 0.0), "t").unwrap();
        let b = ds.write_episode(&frames(3, 0.0), "t").unwrap();
        assert_eq!((a.file_id, a.length), (0, 12));
        assert_eq!((b.file_id, b.row_offset), (1, 0));
    }

    #[test]
    fn empty_and_malformed_episodes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::create(dir.path(), info(100)).unwrap();
        assert!(matches!(ds.write_episode(&[], "t"), Err(DatasetError::SchemaMismatch(_))));
        let mut bad = frames(3, 0.0);
        bad[1].values.insert("state".into(), FeatureValue::F32(vec![0.0, 0.0]));
        assert!(matches!(ds.write_episode(&bad, "t"), Err(DatasetError::SchemaMismatch(_))));
        let mut off_grid = frames(3, 0.0);
        off_grid[2].timestamp += 0.01;
        assert!(matches!(ds.write_episode(&off_grid, "t"), Err(DatasetError::SchemaMismatch(_))));
        assert_eq!(ds.info().total_episodes, 0);
    }

    #[test]
    fn reopen_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let written = frames(7, 3.5);
        {
            let mut ds = Dataset::create(dir.path(), info(4)).unwrap();
            ds.write_episode(&frames(2, 0.0), "a").unwrap();
            ds.write_episode(&written, "b").unwrap();
        }
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.episodes().len(), 2);
        for (i, f) in written.iter().enumerate() {
            assert_eq!(&ds.read_frame(1, i).unwrap(), f);
        }
        assert_eq!(ds.tasks(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn uncommitted_episode_records_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::create(dir.path(), info(100)).unwrap();
        ds.write_episode(&frames(4, 0.0), "a").unwrap();
        // Simulate a crash after episodes.jsonl was written but before info.json.
        let committed = fs::read(dir.path().join("meta/info.json")).unwrap();
        ds.write_episode(&frames(4, 0.0), "a").unwrap();
        fs::write(dir.path().join("meta/info.json"), committed).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.episodes().len(), 1);
        assert_eq!(ds.num_frames(), 4);
    }

    #[test]
    fn identity_window() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::create(dir.path(), info(100)).unwrap();
        ds.write_episode(&frames(5, 0.0), "a").unwrap();
        let mut d = BTreeMap::new();
        d.insert("state".to_string(), vec![0.0]);
        let w = ds.read_window(0, 3, &d).unwrap();
        assert_eq!(w.pad_mask["state"], vec![true]);
        assert_eq!(w.values["state"], vec![FeatureValue::F64(vec![3.0, -3.0])]);
    }

    #[test]
    fn window_pads_with_edge_frame() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::create(dir.path(), info(100)).unwrap();
        ds.write_episode(&frames(5, 0.0), "a").unwrap();
        let mut d = BTreeMap::new();
        d.insert("state".to_string(), vec![-1.0 / 30.0, 0.0, 1.0 / 30.0]);
        let w = ds.read_window(0, 0, &d).unwrap();
        assert_eq!(w.pad_mask["state"], vec![false, true, true]);
        assert_eq!(
            w.values["state"],
            vec![
                FeatureValue::F64(vec![0.0, 0.0]),
                FeatureValue::F64(vec![0.0, 0.0]),
                FeatureValue::F64(vec![1.0, -1.0]),
            ]
        );
    }

    #[test]
    fn window_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::create(dir.path(), info(100)).unwrap();
        ds.write_episode(&frames(5, 0.0), "a").unwrap();
        let mut d = BTreeMap::new();
        d.insert("state".to_string(), vec![0.0123]);
        assert!(matches!(ds.read_window(0, 0, &d), Err(DatasetError::OffsetNotOnGrid { .. })));
        let mut d = BTreeMap::new();
        d.insert("nope".to_string(), vec![0.0]);
        assert!(matches!(ds.read_window(0, 0, &d), Err(DatasetError::MissingFeature(_))));
        assert!(matches!(
            ds.read_window(0, 5, &BTreeMap::new()),
            Err(DatasetError::FrameOutOfRange { .. })
        ));
    }

    #[test]
    fn stats_match_closed_form() {
        let dir = tempfile::tempdir().unwrap();
        let mut features = BTreeMap::new();
        features.insert("x".to_string(), FeatureSpec::new(DType::F64, &[1]));
        features.insert("k".to_string(), FeatureSpec::new(DType::F64, &[1]));
        let mut ds = Dataset::create(dir.path(), DatasetInfo::new(10.0, features)).unwrap();
        let eps: Vec<EpisodeFrame> = [1.0, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, v)| EpisodeFrame {
                timestamp: i as f64 / 10.0,
                values: [
                    ("x".to_string(), FeatureValue::F64(vec![*v])),
                    ("k".to_string(), FeatureValue::F64(vec![4.0])),
                ]
                .into_iter()
                .collect(),
            })
            .collect();
        ds.write_episode(&eps, "t").unwrap();
        assert!(ds.stats().unwrap().is_none());
        let st = ds.compute_stats().unwrap();
        let x = &st.features["x"];
        assert!((x.mean[0] - 2.0).abs() < 1e-15);
        assert!((x.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!((x.min[0], x.max[0]), (1.0, 3.0));
        let k = &st.features["k"];
        assert_eq!((k.std[0], k.min[0], k.max[0], k.mean[0]), (0.0, 4.0, 4.0, 4.0));
        // Persisted and reloadable until the next write.
        let reopened = Dataset::open(dir.path()).unwrap();
        assert_eq!(reopened.stats().unwrap().unwrap(), st);
        ds.write_episode(&eps, "t").unwrap();
        assert!(ds.stats().unwrap().is_none());
    }

    #[test]
    fn empty_dataset_has_no_stats() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::create(dir.path(), info(100)).unwrap();
        assert!(matches!(ds.compute_stats(), Err(DatasetError::EmptyDataset)));
    }
}
