//! Client-side action queue: consumption, overlap aggregation, the observation
//! similarity filter and the analytic threshold bound.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueueError {
    #[error("action queue is empty")]
    EmptyQueue,
    #[error("chunk starting at tick {start} leaves a gap after tick {expected_at_most}")]
    GapDetected { start: u64, expected_at_most: u64 },
    #[error("invalid chunk: {0}")]
    InvalidChunk(String),
    #[error("inference latency needs g >= {g_min:.4}, beyond a full chunk")]
    DegenerateHorizon { g_min: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A sequence of future actions anchored at an absolute control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub start_step: u64,
    pub actions: Vec<Vec<f64>>,
}

impl ActionChunk {
    pub fn new(start_step: u64, actions: Vec<Vec<f64>>) -> Result<Self, QueueError> {
        let chunk = Self {
            start_step,
            actions,
        };
        chunk.validate()?;
        Ok(chunk)
    }

    /// Splits a row-major buffer into `action_dim`-wide rows.
    pub fn from_flat(start_step: u64, flat: &[f64], action_dim: usize) -> Result<Self, QueueError> {
        if action_dim == 0 || flat.len() % action_dim != 0 {
            return Err(QueueError::InvalidChunk(format!(
                "{} values do not split into rows of {action_dim}",
                flat.len()
            )));
        }
        Self::new(
            start_step,
            flat.chunks(action_dim).map(<[f64]>::to_vec).collect(),
        )
    }

    fn validate(&self) -> Result<(), QueueError> {
        let Some(first) = self.actions.first() else {
            return Err(QueueError::InvalidChunk("chunk has no actions".into()));
        };
        let dim = first.len();
        for a in &self.actions {
            if a.len() != dim {
                return Err(QueueError::InvalidChunk("ragged action rows".into()));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(QueueError::InvalidChunk("non-finite action".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationMode {
    Ema,
    Replace,
}

impl FromStr for AggregationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ema" => Ok(Self::Ema),
            "replace" => Ok(Self::Replace),
            other => Err(format!("unknown aggregation mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregation {
    pub mode: AggregationMode,
    /// Weight of the incoming chunk on overlapping ticks.
    pub alpha: f64,
}

impl Default for Aggregation {
    fn default() -> Self {
        Self {
            mode: AggregationMode::Ema,
            alpha: 0.5,
        }
    }
}

/// What a merge did to the queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MergeOutcome {
    /// Incoming actions for ticks already consumed.
    pub dropped_past: usize,
    pub blended: usize,
    pub appended: usize,
    /// Incoming actions beyond one chunk length past the cursor.
    pub truncated: usize,
}

/// Pending actions keyed by absolute tick.
///
/// `next_tick` is the tick the next pop consumes. It only advances when an
/// action is actually consumed, so a chunk that arrives while the queue is
/// starved is executed from its first action.
#[derive(Debug, Clone)]
pub struct ActionQueue {
    pending: VecDeque<Vec<f64>>,
    next_tick: u64,
    h_a: usize,
    g: f64,
    agg: Aggregation,
    starvations: u64,
}

impl ActionQueue {
    pub fn new(h_a: usize, g: f64, agg: Aggregation) -> Result<Self, QueueError> {
        if h_a == 0 {
            return Err(QueueError::InvalidArgument("chunk size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&g) {
            return Err(QueueError::InvalidArgument(format!("threshold g={g} outside [0,1]")));
        }
        if !(0.0..=1.0).contains(&agg.alpha) {
            return Err(QueueError::InvalidArgument(format!(
                "aggregation weight {} outside [0,1]",
                agg.alpha
            )));
        }
        Ok(Self {
            pending: VecDeque::with_capacity(h_a),
            next_tick: 0,
            h_a,
            g,
            agg,
            starvations: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn h_a(&self) -> usize {
        self.h_a
    }

    pub fn threshold(&self) -> f64 {
        self.g
    }

    pub fn next_tick(&self) -> u64 {
        self.next_tick
    }

    pub fn starvations(&self) -> u64 {
        self.starvations
    }

    /// `|pending| / H_a`.
    pub fn fill(&self) -> f64 {
        self.pending.len() as f64 / self.h_a as f64
    }

    /// Pending actions with their ticks, earliest first.
    pub fn pending(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.pending
            .iter()
            .enumerate()
            .map(move |(i, a)| (self.next_tick + i as u64, a.as_slice()))
    }

    /// Removes and returns the earliest pending action and its tick. An empty
    /// queue counts a starvation.
    pub fn pop_front(&mut self) -> Result<(u64, Vec<f64>), QueueError> {
        match self.pending.pop_front() {
            Some(a) => {
                let tick = self.next_tick;
                self.next_tick += 1;
                Ok((tick, a))
            }
            None => {
                self.starvations += 1;
                Err(QueueError::EmptyQueue)
            }
        }
    }

    /// Folds an incoming chunk into the queue, aligned by absolute tick.
    pub fn merge_chunk(&mut self, incoming: &ActionChunk) -> Result<MergeOutcome, QueueError> {
        incoming.validate()?;
        let end = self.next_tick + self.pending.len() as u64;
        if incoming.start_step > end {
            return Err(QueueError::GapDetected {
                start: incoming.start_step,
                expected_at_most: end,
            });
        }
        let horizon_end = self.next_tick + self.h_a as u64;
        let mut out = MergeOutcome::default();
        for (i, action) in incoming.actions.iter().enumerate() {
            let tick = incoming.start_step + i as u64;
            if tick < self.next_tick {
                out.dropped_past += 1;
                continue;
            }
            if tick >= horizon_end {
                out.truncated += 1;
                continue;
            }
            let idx = (tick - self.next_tick) as usize;
            if let Some(old) = self.pending.get_mut(idx) {
                if old.len() != action.len() {
                    return Err(QueueError::InvalidChunk(format!(
                        "action width {} does not match queued width {}",
                        action.len(),
                        old.len()
                    )));
                }
                match self.agg.mode {
                    AggregationMode::Replace => old.clone_from(action),
                    AggregationMode::Ema => {
                        let w = self.agg.alpha;
                        for (o, n) in old.iter_mut().zip(action) {
                            *o = (1.0 - w) * *o + w * n;
                        }
                    }
                }
                out.blended += 1;
            } else {
                debug_assert_eq!(idx, self.pending.len());
                self.pending.push_back(action.clone());
                out.appended += 1;
            }
        }
        Ok(out)
    }
}

/// Whether a freshly captured observation should be sent for inference.
///
/// True when the queue is below threshold and the observation moved at least
/// `d_lim` (L2, joint space) from the last one sent. An empty queue forces
/// processing regardless of threshold or similarity.
pub fn needs_processing(
    queue: &ActionQueue,
    obs: &[f64],
    last_sent: Option<&[f64]>,
    d_lim: f64,
) -> bool {
    if queue.is_empty() {
        return true;
    }
    if queue.fill() >= queue.threshold() {
        return false;
    }
    match last_sent {
        None => true,
        Some(prev) => {
            let d2: f64 = obs.iter().zip(prev).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= d_lim
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueAnalytics {
    /// Smallest threshold that avoids exhausting the queue.
    pub g_min: f64,
    /// Expected idle seconds per chunk boundary in the sequential (g=0) regime.
    pub idle_seq: f64,
}

/// `g_min = (E[l_S] / dt) / H_a`.
pub fn queue_analytics(e_ls: f64, dt: f64, h_a: usize) -> Result<QueueAnalytics, QueueError> {
    if !(e_ls >= 0.0 && e_ls.is_finite()) || !(dt > 0.0 && dt.is_finite()) || h_a == 0 {
        return Err(QueueError::InvalidArgument(format!(
            "need E[l_S] >= 0, dt > 0, H_a >= 1; got {e_ls}, {dt}, {h_a}"
        )));
    }
    let g_min = (e_ls / dt) / h_a as f64;
    if g_min > 1.0 {
        return Err(QueueError::DegenerateHorizon { g_min });
    }
    Ok(QueueAnalytics {
        g_min,
        idle_seq: e_ls,
    })
}

/// One control tick of a queue trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub tick: u64,
    /// Queue fill after consumption, as a fraction of `H_a`.
    pub fill_fraction: f64,
    pub sent: bool,
    pub merged: bool,
    pub starved: bool,
}

pub const TRACE_HEADER: &str = "tick,fill_fraction,sent_flag,merged_flag,starved_flag";

impl fmt::Display for TraceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.tick, self.fill_fraction, self.sent as u8, self.merged as u8, self.starved as u8
        )
    }
}

impl FromStr for TraceRow {
    type Err = String;
    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 5 {
            return Err(format!("expected 5 fields, got {}", fields.len()));
        }
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(format!("bad flag '{other}'")),
        };
        Ok(Self {
            tick: fields[0].parse().map_err(|e| format!("tick: {e}"))?,
            fill_fraction: fields[1].parse().map_err(|e| format!("fill: {e}"))?,
            sent: flag(fields[2])?,
            merged: flag(fields[3])?,
            starved: flag(fields[4])?,
        })
    }
}

pub fn write_trace<W: std::io::Write>(w: &mut W, rows: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    Ok(())
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRACE_HEADER => {}
        _ => return Err("missing trace header".into()),
    }
    lines.filter(|l| !l.trim().is_empty()).map(str::parse).collect()
}
