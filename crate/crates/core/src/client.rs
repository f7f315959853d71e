//! Robot client: the asynchronous control loop over a simulated planar arm.
//!
//! Each tick the loop
//! 1. merges the reply that arrived since the previous tick, if any;
//! 2. pops the next action, or holds the last one when the queue is empty;
//! 3. observes the arm and, when the queue is below threshold and the
//!    observation moved enough, sends it for inference without blocking.
//!
//! At most one request is outstanding, so a send only happens once the
//! previous reply has been merged.

use crate::chunking::{needs_processing, ActionChunk, ActionQueue, Aggregation, QueueError, TraceRow};
use crate::dataset::{
    DType, Dataset, DatasetError, DatasetInfo, EpisodeFrame, EpisodeMeta, FeatureSpec, FeatureValue,
};
use crate::kinematics::{fk, ArmState};
use crate::protocol::{read_message, write_message, Payload, WireError, WireMessage};
use crate::server::{ChunkSource, LatencyModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::{Shutdown, TcpStream};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};
use thiserror::Error;

pub const OBS_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;
pub const OBS_FEATURE: &str = "observation";
pub const ACTION_FEATURE: &str = "action";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("session lost: {0}")]
    SessionLost(String),
    #[error("server error {code}: {text}")]
    Server { code: u16, text: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl From<WireError> for ClientError {
    fn from(e: WireError) -> Self {
        ClientError::SessionLost(e.to_string())
    }
}

/// Observation of the arm: joint angles then end-effector position.
pub fn observe(arm: &ArmState) -> [f64; OBS_DIM] {
    let q = arm.theta();
    let p = fk(arm);
    [q[0], q[1], p[0], p[1]]
}

/// Simulated arm that tracks absolute joint targets with a per-tick rate limit.
#[derive(Debug, Clone)]
pub struct ArmEnv {
    arm: ArmState,
    max_step: f64,
}

impl ArmEnv {
    pub fn new(arm: ArmState, max_step: f64) -> Self {
        Self { arm, max_step }
    }

    pub fn arm(&self) -> &ArmState {
        &self.arm
    }

    /// Moves each joint toward `target` by at most `max_step`, within limits.
    pub fn apply(&mut self, target: &[f64]) {
        let q = self.arm.theta();
        let lim = self.arm.limits();
        let mut next = [0.0; 2];
        for i in 0..2 {
            let d = (target[i] - q[i]).clamp(-self.max_step, self.max_step);
            next[i] = (q[i] + d).clamp(lim[i].lo, lim[i].hi);
        }
        self.arm = self.arm.with_theta(next);
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// Control period in seconds.
    pub dt: f64,
    pub g: f64,
    pub h_a: usize,
    pub h_o: usize,
    /// Minimum joint-space distance from the last sent observation.
    pub d_lim: f64,
    pub episode_len: u64,
    pub aggregation: Aggregation,
    /// Per-tick joint rate limit, radians.
    pub max_joint_step: f64,
    /// Sleep to hold the control period against wall time.
    pub realtime: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            dt: 0.033,
            g: 0.5,
            h_a: 50,
            h_o: 1,
            d_lim: 0.0,
            episode_len: 1000,
            aggregation: Aggregation::default(),
            max_joint_step: 0.2,
            realtime: false,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(ClientError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(0.0..=1.0).contains(&self.g) {
            return Err(ClientError::Config(format!("g must lie in [0,1], got {}", self.g)));
        }
        if self.h_a == 0 || self.h_o == 0 {
            return Err(ClientError::Config("H_a and H_o must be >= 1".into()));
        }
        if !(self.d_lim >= 0.0) || !(self.max_joint_step > 0.0) {
            return Err(ClientError::Config("d_lim must be >= 0 and the rate limit > 0".into()));
        }
        Ok(())
    }
}

/// Link to something that answers observations with chunks.
///
/// `now` is the loop's clock in seconds; remote sessions ignore it.
pub trait PolicySession {
    /// Fire-and-forget request.
    fn send(&mut self, seq: u64, obs_stack: &[f64], now: f64) -> Result<(), ClientError>;
    /// The newest reply that arrived by `now`, if any.
    fn poll(&mut self, now: f64) -> Result<Option<(u64, Vec<Vec<f64>>)>, ClientError>;
    /// Blocking round trip used before the first tick.
    fn request(&mut self, seq: u64, obs_stack: &[f64]) -> Result<Vec<Vec<f64>>, ClientError>;
}

/// In-process session whose replies become visible `latency` seconds of
/// simulated time after the request. A new request supersedes an undelivered
/// one.
pub struct SimulatedSession<S: ChunkSource> {
    source: S,
    latency: LatencyModel,
    rng: ChaCha8Rng,
    in_flight: Option<(f64, u64, Vec<Vec<f64>>)>,
}

impl<S: ChunkSource> SimulatedSession<S> {
    pub fn new(source: S, latency: LatencyModel, seed: u64) -> Self {
        Self {
            source,
            latency,
            rng: ChaCha8Rng::seed_from_u64(seed),
            in_flight: None,
        }
    }
}

impl<S: ChunkSource> PolicySession for SimulatedSession<S> {
    fn send(&mut self, seq: u64, obs_stack: &[f64], now: f64) -> Result<(), ClientError> {
        let actions = self
            .source
            .infer(obs_stack)
            .map_err(|e| ClientError::SessionLost(e.to_string()))?;
        let ready = now + self.latency.sample(&mut self.rng);
        self.in_flight = Some((ready, seq, actions));
        Ok(())
    }

    fn poll(&mut self, now: f64) -> Result<Option<(u64, Vec<Vec<f64>>)>, ClientError> {
        // Tolerate float drift in tick arithmetic.
        match &self.in_flight {
            Some((ready, _, _)) if *ready <= now + 1e-9 => {
                let (_, seq, a) = self.in_flight.take().unwrap();
                Ok(Some((seq, a)))
            }
            _ => Ok(None),
        }
    }

    fn request(&mut self, _seq: u64, obs_stack: &[f64]) -> Result<Vec<Vec<f64>>, ClientError> {
        self.source.infer(obs_stack).map_err(|e| ClientError::SessionLost(e.to_string()))
    }
}

enum Mail {
    Reply(u64, Vec<Vec<f64>>),
    Failed(ClientError),
}

type Mailbox = Arc<(Mutex<Option<Mail>>, Condvar)>;

/// TCP session to a policy server. A background reader keeps only the latest
/// reply.
pub struct RemoteSession {
    writer: TcpStream,
    mailbox: Mailbox,
    reader: Option<JoinHandle<()>>,
    reply_timeout: Duration,
}

impl RemoteSession {
    pub fn connect(addr: &str) -> Result<Self, ClientError> {
        let mut stream = TcpStream::connect(addr).map_err(|e| ClientError::SessionLost(format!("connect {addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        write_message(&mut stream, &WireMessage::new(0, Payload::Hello))?;
        match read_message(&mut stream)? {
            Some(WireMessage {
                payload: Payload::Hello,
                ..
            }) => {}
            Some(WireMessage {
                payload: Payload::Error { code, text },
                ..
            }) => return Err(ClientError::Server { code, text }),
            Some(m) => return Err(ClientError::SessionLost(format!("unexpected {:?} during handshake", m.kind()))),
            None => return Err(ClientError::SessionLost("server closed during handshake".into())),
        }
        let writer = stream
            .try_clone()
            .map_err(|e| ClientError::SessionLost(e.to_string()))?;
        let mailbox: Mailbox = Arc::new((Mutex::new(None), Condvar::new()));
        let reader = {
            let mailbox = mailbox.clone();
            thread::spawn(move || reader_loop(stream, mailbox))
        };
        Ok(Self {
            writer,
            mailbox,
            reader: Some(reader),
            reply_timeout: Duration::from_secs(30),
        })
    }

    fn take_mail(&self) -> Option<Mail> {
        self.mailbox.0.lock().unwrap().take()
    }
}

fn reader_loop(mut stream: TcpStream, mailbox: Mailbox) {
    loop {
        let mail = match read_message(&mut stream) {
            Ok(Some(WireMessage {
                seq,
                payload: Payload::ChunkReply { action_dim, actions },
            })) => match ActionChunk::from_flat(0, &actions, action_dim as usize) {
                Ok(c) => Mail::Reply(seq, c.actions),
                Err(e) => Mail::Failed(ClientError::SessionLost(format!("bad chunk: {e}"))),
            },
            Ok(Some(WireMessage {
                payload: Payload::Error { code, text },
                ..
            })) => Mail::Failed(ClientError::Server { code, text }),
            Ok(Some(_)) => continue,
            Ok(None) => Mail::Failed(ClientError::SessionLost("server closed the connection".into())),
            Err(e) => Mail::Failed(e.into()),
        };
        let stop = matches!(mail, Mail::Failed(_));
        let (lock, cv) = &*mailbox;
        let mut slot = lock.lock().unwrap();
        // Failures are sticky; otherwise the latest reply wins.
        if !matches!(*slot, Some(Mail::Failed(_))) {
            *slot = Some(mail);
        }
        cv.notify_all();
        drop(slot);
        if stop {
            return;
        }
    }
}

impl PolicySession for RemoteSession {
    fn send(&mut self, seq: u64, obs_stack: &[f64], _now: f64) -> Result<(), ClientError> {
        write_message(&mut self.writer, &WireMessage::new(seq, Payload::Observation(obs_stack.to_vec())))?;
        Ok(())
    }

    fn poll(&mut self, _now: f64) -> Result<Option<(u64, Vec<Vec<f64>>)>, ClientError> {
        match self.take_mail() {
            None => Ok(None),
            Some(Mail::Reply(seq, a)) => Ok(Some((seq, a))),
            Some(Mail::Failed(e)) => Err(e),
        }
    }

    fn request(&mut self, seq: u64, obs_stack: &[f64]) -> Result<Vec<Vec<f64>>, ClientError> {
        self.send(seq, obs_stack, 0.0)?;
        let deadline = Instant::now() + self.reply_timeout;
        let (lock, cv) = &*self.mailbox;
        let mut slot = lock.lock().unwrap();
        loop {
            match slot.take() {
                Some(Mail::Reply(s, a)) if s == seq => return Ok(a),
                Some(Mail::Reply(..)) => {}
                Some(Mail::Failed(e)) => return Err(e),
                None => {}
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(ClientError::SessionLost("timed out waiting for the first chunk".into()));
            }
            slot = cv.wait_timeout(slot, deadline - now).unwrap().0;
        }
    }
}

impl Drop for RemoteSession {
    fn drop(&mut self) {
        let _ = self.writer.shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

/// One recorded control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    /// Observation before the tick's action.
    pub obs: [f64; OBS_DIM],
    /// Joint target applied this tick.
    pub action: Vec<f64>,
    pub ee: [f64; 2],
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeReport {
    pub ticks: u64,
    pub sends: u64,
    /// Ticks on which the queue was below threshold and the similarity filter
    /// passed, whether or not a request could be sent.
    pub threshold_triggers: u64,
    pub merges: u64,
    pub starvations: u64,
    /// Lengths of consecutive starvation runs.
    pub idle_runs: Vec<u64>,
    pub session_lost: bool,
    pub error: Option<String>,
    pub trace: Vec<TraceRow>,
    pub records: Vec<TickRecord>,
}

impl EpisodeReport {
    pub fn idle_ticks(&self) -> u64 {
        self.idle_runs.iter().sum()
    }

    /// Mean idle seconds per starvation episode (chunk boundary).
    pub fn mean_idle_s(&self, dt: f64) -> f64 {
        if self.idle_runs.is_empty() {
            0.0
        } else {
            self.idle_ticks() as f64 / self.idle_runs.len() as f64 * dt
        }
    }

    /// Structured `key=value` summary, one per line.
    pub fn summary(&self, dt: f64) -> String {
        format!(
            "ticks={}\nsends={}\nthreshold_triggers={}\nmerges={}\nstarvations={}\nidle_ticks={}\nidle_runs={}\nmean_idle_s={:.4}\nsession_lost={}\n",
            self.ticks,
            self.sends,
            self.threshold_triggers,
            self.merges,
            self.starvations,
            self.idle_ticks(),
            self.idle_runs.len(),
            self.mean_idle_s(dt),
            self.session_lost
        )
    }
}

fn stack(history: &VecDeque<[f64; OBS_DIM]>) -> Vec<f64> {
    history.iter().flatten().copied().collect()
}

/// Runs Algorithm 1 for `cfg.episode_len` ticks.
pub fn control_loop<P: PolicySession>(
    cfg: &ClientConfig,
    env: &mut ArmEnv,
    session: &mut P,
) -> Result<EpisodeReport, ClientError> {
    cfg.validate()?;
    let mut queue = ActionQueue::new(cfg.h_a, cfg.g, cfg.aggregation)?;
    let mut report = EpisodeReport::default();

    let first = observe(env.arm());
    let mut history: VecDeque<[f64; OBS_DIM]> = std::iter::repeat_n(first, cfg.h_o).collect();
    let mut seq: u64 = 1;
    let initial = session.request(seq, &stack(&history))?;
    queue.merge_chunk(&ActionChunk::new(0, initial)?)?;
    let mut last_sent: Option<Vec<f64>> = Some(first[..2].to_vec());
    let mut last_action: Vec<f64> = first[..2].to_vec();
    // seq -> tick the chunk's first action is meant for.
    let mut outstanding: Option<(u64, u64)> = None;
    let mut anchors: HashMap<u64, u64> = HashMap::new();
    let mut run = 0u64;
    let start = Instant::now();

    for tick in 0..cfg.episode_len {
        if cfg.realtime {
            let due = start + Duration::from_secs_f64(tick as f64 * cfg.dt);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                thread::sleep(wait);
            }
        }
        let now = tick as f64 * cfg.dt;
        let mut row = TraceRow {
            tick,
            fill_fraction: 0.0,
            sent: false,
            merged: false,
            starved: false,
        };

        match session.poll(now) {
            Ok(Some((s, actions))) => {
                if let Some(anchor) = anchors.remove(&s) {
                    queue.merge_chunk(&ActionChunk::new(anchor, actions)?)?;
                    report.merges += 1;
                    row.merged = true;
                }
                if outstanding.is_some_and(|(o, _)| o == s) {
                    outstanding = None;
                }
            }
            Ok(None) => {}
            Err(e) => {
                report.session_lost = true;
                report.error = Some(e.to_string());
                break;
            }
        }

        let obs = *history.back().unwrap();
        match queue.pop_front() {
            Ok((_, a)) => {
                if run > 0 {
                    report.idle_runs.push(run);
                    run = 0;
                }
                last_action = a;
            }
            Err(QueueError::EmptyQueue) => {
                row.starved = true;
                report.starvations += 1;
                run += 1;
            }
            Err(e) => return Err(e.into()),
        }
        env.apply(&last_action);
        report.records.push(TickRecord {
            obs,
            action: last_action.clone(),
            ee: fk(env.arm()),
        });

        let o = observe(env.arm());
        history.pop_front();
        history.push_back(o);
        if needs_processing(&queue, &o[..2], last_sent.as_deref(), cfg.d_lim) {
            report.threshold_triggers += 1;
            if outstanding.is_none() {
                seq += 1;
                let anchor = queue.next_tick();
                match session.send(seq, &stack(&history), now) {
                    Ok(()) => {
                        outstanding = Some((seq, anchor));
                        anchors.insert(seq, anchor);
                        last_sent = Some(o[..2].to_vec());
                        report.sends += 1;
                        row.sent = true;
                    }
                    Err(e) => {
                        report.session_lost = true;
                        report.error = Some(e.to_string());
                        break;
                    }
                }
            }
        }
        row.fill_fraction = queue.fill();
        report.trace.push(row);
        report.ticks += 1;
    }
    if run > 0 {
        report.idle_runs.push(run);
    }
    Ok(report)
}

/// Dataset schema used for recorded and demonstrated episodes.
pub fn episode_info(fps: f64) -> DatasetInfo {
    let mut features = BTreeMap::new();
    features.insert(OBS_FEATURE.to_string(), FeatureSpec::new(DType::F64, &[OBS_DIM]));
    features.insert(ACTION_FEATURE.to_string(), FeatureSpec::new(DType::F64, &[ACTION_DIM]));
    DatasetInfo::new(fps, features)
}

pub fn frames_from_records(records: &[TickRecord], fps: f64) -> Vec<EpisodeFrame> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| EpisodeFrame {
            timestamp: i as f64 / fps,
            values: [
                (OBS_FEATURE.to_string(), FeatureValue::F64(r.obs.to_vec())),
                (ACTION_FEATURE.to_string(), FeatureValue::F64(r.action.clone())),
            ]
            .into(),
        })
        .collect()
}

/// Appends a finished run to the dataset at `root` (created on first use).
/// Returns `None` when there is nowhere to record.
pub fn record_episode(
    root: Option<&Path>,
    report: &EpisodeReport,
    fps: f64,
    task: &str,
) -> Result<Option<EpisodeMeta>, ClientError> {
    let Some(root) = root else {
        return Ok(None);
    };
    let mut ds = Dataset::open_or_create(root, episode_info(fps))?;
    Ok(Some(ds.write_episode(&frames_from_records(&report.records, fps), task)?))
}

/// Replies with `H_a` copies of the current joint position. Used where only
/// queue timing matters.
pub struct HoldPosition {
    pub h_a: usize,
    pub obs_dim: usize,
}

impl ChunkSource for HoldPosition {
    fn infer(&mut self, obs_stack: &[f64]) -> Result<Vec<Vec<f64>>, crate::server::ServerError> {
        let last = &obs_stack[obs_stack.len() - self.obs_dim..];
        Ok(vec![last[..ACTION_DIM].to_vec(); self.h_a])
    }
}
