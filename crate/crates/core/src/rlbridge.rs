//! Replay buffers and the decoupled actor/learner loop.
//!
//! Human interventions are routed to both the online and the offline buffer,
//! autonomous transitions to the online buffer only, and training batches are
//! drawn half from each buffer. The learner here is a stand-in: its "update" is
//! a running mean of received actions, which is enough to exercise the
//! transition and parameter queues end to end.

use rand::Rng;
use std::collections::{BTreeMap, VecDeque};
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use thiserror::Error;

use crate::protocol::{read_message, write_message, Payload, WireError, WireMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum TransitionSource {
    Autonomous = 0,
    Human = 1,
    Offline = 2,
}

impl TransitionSource {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::Autonomous),
            1 => Some(Self::Human),
            2 => Some(Self::Offline),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub source: TransitionSource,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BridgeError {
    #[error("cannot sample from an empty {0} buffer")]
    EmptyBuffer(&'static str),
    #[error("equal-mix batch size must be even and positive, got {0}")]
    OddBatch(usize),
    #[error("replay buffer capacity must be positive")]
    ZeroCapacity,
}

/// Fixed-capacity FIFO replay buffer.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, BridgeError> {
        if capacity == 0 {
            return Err(BridgeError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Uniform draw with replacement, returned as indices into the current contents.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }
}

/// Stores a transition according to its source.
pub fn route_push(online: &mut ReplayBuffer, offline: &mut ReplayBuffer, t: Transition) {
    match t.source {
        TransitionSource::Human => {
            offline.push(t.clone());
            online.push(t);
        }
        TransitionSource::Autonomous => online.push(t),
        TransitionSource::Offline => offline.push(t),
    }
}

/// `batch / 2` uniform draws (with replacement) from each buffer; online first.
pub fn sample_equal_mix<R: Rng + ?Sized>(
    online: &ReplayBuffer,
    offline: &ReplayBuffer,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Transition>, BridgeError> {
    if batch == 0 || batch % 2 != 0 {
        return Err(BridgeError::OddBatch(batch));
    }
    if online.is_empty() {
        return Err(BridgeError::EmptyBuffer("online"));
    }
    if offline.is_empty() {
        return Err(BridgeError::EmptyBuffer("offline"));
    }
    let half = batch / 2;
    let mut out = Vec::with_capacity(batch);
    for i in online.sample_indices(half, rng) {
        out.push(online.items[i].clone());
    }
    for i in offline.sample_indices(half, rng) {
        out.push(offline.items[i].clone());
    }
    Ok(out)
}

/// FNV-1a over the little-endian bytes of a parameter vector.
pub fn param_hash(params: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for b in p.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Versioned parameter snapshot held by the actor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub version: u64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BridgeConfig {
    /// Transitions the actor streams.
    pub steps: usize,
    /// Learner publishes parameters after this many received transitions.
    pub update_every: usize,
    /// Actor swaps parameters only at episode boundaries.
    pub episode_len: usize,
    /// Every n-th transition is tagged as a human intervention (0 disables).
    pub human_every: usize,
    pub buffer_capacity: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub seed: u64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            update_every: 100,
            episode_len: 50,
            human_every: 5,
            buffer_capacity: 10_000,
            obs_dim: 4,
            action_dim: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BridgeReport {
    pub transitions_sent: usize,
    pub transitions_received: usize,
    /// Received transitions in arrival order were exactly those sent, in order.
    pub stream_intact: bool,
    /// Versions published by the learner, in order, with the hash of their content.
    pub published: Vec<(u64, u64)>,
    /// Parameter sets the actor swapped in, with the hash it computed on receipt.
    pub swapped: Vec<(u64, u64)>,
    /// Versions the learner saw acknowledged.
    pub acked: Vec<u64>,
    pub online_len: usize,
    pub offline_len: usize,
    pub session_lost: bool,
}

impl BridgeReport {
    /// No swapped parameter set disagrees with what the learner published.
    pub fn torn_free(&self) -> bool {
        let published: BTreeMap<u64, u64> = self.published.iter().copied().collect();
        self.swapped
            .iter()
            .all(|(v, h)| published.get(v).is_some_and(|p| p == h))
    }
}

struct LearnerOutcome {
    received: Vec<Transition>,
    published: Vec<(u64, u64)>,
    acked: Vec<u64>,
    online_len: usize,
    offline_len: usize,
    lost: bool,
}

fn learner_session(stream: TcpStream, cfg: &BridgeConfig) -> LearnerOutcome {
    let mut out = LearnerOutcome {
        received: Vec::new(),
        published: Vec::new(),
        acked: Vec::new(),
        online_len: 0,
        offline_len: 0,
        lost: false,
    };
    let (Ok(mut online), Ok(mut offline)) = (
        ReplayBuffer::new(cfg.buffer_capacity),
        ReplayBuffer::new(cfg.buffer_capacity),
    ) else {
        out.lost = true;
        return out;
    };
    let mut reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(_) => {
            out.lost = true;
            return out;
        }
    });
    let mut writer = BufWriter::new(stream);
    let mut version = 0u64;
    let mut action_sum = vec![0.0; cfg.action_dim];
    let mut seq = 0u64;

    let result: Result<(), WireError> = (|| {
        loop {
            let Some(msg) = read_message(&mut reader)? else {
                return Ok(());
            };
            match msg.payload {
                Payload::Hello => {
                    // Opening handshake or drain marker; both are echoed.
                    write_message(&mut writer, &WireMessage::new(msg.seq, Payload::Hello))?;
                }
                Payload::Transition(t) => {
                    for (acc, a) in action_sum.iter_mut().zip(&t.a) {
                        *acc += a;
                    }
                    out.received.push(t.clone());
                    route_push(&mut online, &mut offline, t);
                    if cfg.update_every > 0 && out.received.len() % cfg.update_every == 0 {
                        version += 1;
                        let n = out.received.len() as f64;
                        let params: Vec<f64> = action_sum.iter().map(|s| s / n).collect();
                        out.published.push((version, param_hash(&params)));
                        seq += 1;
                        write_message(
                            &mut writer,
                            &WireMessage::new(seq, Payload::ParamUpdate { version, params }),
                        )?;
                    }
                }
                Payload::ParamUpdate { version, params } if params.is_empty() => {
                    out.acked.push(version);
                }
                other => {
                    return Err(WireError::Io(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("learner got unexpected {:?}", other.kind()),
                    )))
                }
            }
        }
    })();
    out.lost = result.is_err();
    out.online_len = online.len();
    out.offline_len = offline.len();
    out
}

enum ActorInbox {
    Update(ParamSet),
    Drained,
}

/// Runs an actor and a learner as two endpoints of a loopback connection.
pub fn actor_learner_loop(cfg: &BridgeConfig) -> Result<BridgeReport, WireError> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let learner_cfg = cfg.clone();
    let learner = thread::spawn(move || -> Result<LearnerOutcome, WireError> {
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        Ok(learner_session(stream, &learner_cfg))
    });

    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let actor = run_actor(stream, cfg);
    let learner = learner
        .join()
        .map_err(|_| std::io::Error::other("learner thread panicked"))??;

    let (sent, swapped, actor_lost) = actor;
    let stream_intact = sent.len() == learner.received.len()
        && sent.iter().zip(&learner.received).all(|(a, b)| {
            // Compare bitwise so NaN-free equality is exact.
            a == b
        });
    Ok(BridgeReport {
        transitions_sent: sent.len(),
        transitions_received: learner.received.len(),
        stream_intact,
        published: learner.published,
        swapped,
        acked: learner.acked,
        online_len: learner.online_len,
        offline_len: learner.offline_len,
        session_lost: actor_lost || learner.lost,
    })
}

type ActorOutcome = (Vec<Transition>, Vec<(u64, u64)>, bool);

fn run_actor(stream: TcpStream, cfg: &BridgeConfig) -> ActorOutcome {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sent = Vec::with_capacity(cfg.steps);
    let mut swapped = Vec::new();

    let Ok(read_half) = stream.try_clone() else {
        return (sent, swapped, true);
    };
    let (tx, rx) = mpsc::channel::<ActorInbox>();
    let reader = thread::spawn(move || {
        let mut reader = BufReader::new(read_half);
        loop {
            match read_message(&mut reader) {
                Ok(Some(WireMessage {
                    payload: Payload::ParamUpdate { version, params },
                    ..
                })) => {
                    if tx.send(ActorInbox::Update(ParamSet { version, params })).is_err() {
                        return;
                    }
                }
                Ok(Some(WireMessage {
                    payload: Payload::Hello,
                    seq,
                })) if seq > 0 => {
                    let _ = tx.send(ActorInbox::Drained);
                }
                Ok(Some(_)) => {}
                Ok(None) | Err(_) => return,
            }
        }
    });

    let current: Arc<Mutex<Arc<ParamSet>>> = Arc::new(Mutex::new(Arc::new(ParamSet {
        version: 0,
        params: vec![0.0; cfg.action_dim],
    })));
    let mut writer = BufWriter::new(stream);
    let mut latest: Option<ParamSet> = None;
    let mut drained = false;

    let mut swap_in = |latest: &mut Option<ParamSet>,
                       writer: &mut BufWriter<TcpStream>|
     -> Result<(), WireError> {
        if let Some(p) = latest.take() {
            let hash = param_hash(&p.params);
            let version = p.version;
            *current.lock().unwrap() = Arc::new(p);
            swapped.push((version, hash));
            write_message(
                writer,
                &WireMessage::new(
                    version,
                    Payload::ParamUpdate {
                        version,
                        params: Vec::new(),
                    },
                ),
            )?;
        }
        Ok(())
    };

    let drain_inbox = |latest: &mut Option<ParamSet>, drained: &mut bool, block: bool| {
        loop {
            let msg = if block && !*drained {
                rx.recv().ok()
            } else {
                rx.try_recv().ok()
            };
            match msg {
                Some(ActorInbox::Update(p)) => {
                    if latest.as_ref().is_none_or(|l| p.version > l.version) {
                        *latest = Some(p);
                    }
                }
                Some(ActorInbox::Drained) => *drained = true,
                None => return,
            }
        }
    };

    let result: Result<(), WireError> = (|| {
        write_message(&mut writer, &WireMessage::new(0, Payload::Hello))?;
        let mut s: Vec<f64> = (0..cfg.obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for step in 0..cfg.steps {
            let params = current.lock().unwrap().clone();
            let a: Vec<f64> = (0..cfg.action_dim)
                .map(|i| params.params.get(i).copied().unwrap_or(0.0) + rng.random_range(-1.0..1.0))
                .collect();
            let s_next: Vec<f64> = s.iter().map(|x| x + 0.01 * rng.random_range(-1.0..1.0)).collect();
            let source = if cfg.human_every > 0 && step % cfg.human_every == 0 {
                TransitionSource::Human
            } else {
                TransitionSource::Autonomous
            };
            let t = Transition {
                s: s.clone(),
                a,
                r: -s.iter().map(|x| x * x).sum::<f64>(),
                s_next: s_next.clone(),
                source,
            };
            write_message(
                &mut writer,
                &WireMessage::new(step as u64 + 1, Payload::Transition(t.clone())),
            )?;
            sent.push(t);
            s = s_next;
            if cfg.episode_len > 0 && (step + 1) % cfg.episode_len == 0 {
                drain_inbox(&mut latest, &mut drained, false);
                swap_in(&mut latest, &mut writer)?;
            }
        }
        write_message(&mut writer, &WireMessage::new(cfg.steps as u64 + 1, Payload::Hello))?;
        drain_inbox(&mut latest, &mut drained, true);
        swap_in(&mut latest, &mut writer)?;
        Ok(())
    })();
    let lost = result.is_err() || !drained;
    if let Ok(s) = writer.into_inner() {
        let _ = s.shutdown(Shutdown::Both);
    }
    let _ = reader.join();
    (sent, swapped, lost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(source: TransitionSource, tag: f64) -> Transition {
        Transition {
            s: vec![tag],
            a: vec![tag],
            r: 0.0,
            s_next: vec![tag + 1.0],
            source,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            b.push(tr(TransitionSource::Autonomous, i as f64));
        }
        let tags: Vec<f64> = b.iter().map(|t| t.s[0]).collect();
        assert_eq!(tags, vec![2.0, 3.0, 4.0]);
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn routing_by_source() {
        let mut on = ReplayBuffer::new(1000).unwrap();
        let mut off = ReplayBuffer::new(1000).unwrap();
        route_push(&mut on, &mut off, tr(TransitionSource::Human, 1.0));
        assert_eq!((on.len(), off.len()), (1, 1));
        route_push(&mut on, &mut off, tr(TransitionSource::Autonomous, 2.0));
        assert_eq!((on.len(), off.len()), (2, 1));
        route_push(&mut on, &mut off, tr(TransitionSource::Offline, 3.0));
        assert_eq!((on.len(), off.len()), (2, 2));
    }

    #[test]
    fn routing_counts() {
        let mut on = ReplayBuffer::new(1000).unwrap();
        let mut off = ReplayBuffer::new(1000).unwrap();
        for i in 0..100 {
            route_push(&mut on, &mut off, tr(TransitionSource::Human, i as f64));
            route_push(&mut on, &mut off, tr(TransitionSource::Autonomous, i as f64));
        }
        assert_eq!(on.len(), 200);
        assert_eq!(off.len(), 100);
    }

    #[test]
    fn equal_mix_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut on = ReplayBuffer::new(10).unwrap();
        let mut off = ReplayBuffer::new(10).unwrap();
        on.push(tr(TransitionSource::Autonomous, 0.0));
        off.push(tr(TransitionSource::Offline, 1.0));
        let batch = sample_equal_mix(&on, &off, 8, &mut rng).unwrap();
        let n_on = batch.iter().filter(|t| t.source == TransitionSource::Autonomous).count();
        assert_eq!(n_on, 4);
        assert_eq!(batch.len() - n_on, 4);
    }

    #[test]
    fn equal_mix_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut on = ReplayBuffer::new(10).unwrap();
        let off = ReplayBuffer::new(10).unwrap();
        on.push(tr(TransitionSource::Autonomous, 0.0));
        assert_eq!(
            sample_equal_mix(&on, &off, 8, &mut rng).unwrap_err(),
            BridgeError::EmptyBuffer("offline")
        );
        assert_eq!(
            sample_equal_mix(&on, &off, 7, &mut rng).unwrap_err(),
            BridgeError::OddBatch(7)
        );
    }

    #[test]
    fn loop_publishes_every_hundred() {
        let cfg = BridgeConfig::default();
        let report = actor_learner_loop(&cfg).unwrap();
        assert!(!report.session_lost);
        assert_eq!(report.transitions_sent, 1000);
        assert_eq!(report.transitions_received, 1000);
        assert!(report.stream_intact);
        let versions: Vec<u64> = report.published.iter().map(|p| p.0).collect();
        assert_eq!(versions, (1..=10).collect::<Vec<_>>());
        assert!(report.torn_free());
        // The final update is always swapped in after the drain handshake.
        assert_eq!(report.swapped.last().map(|s| s.0), Some(10));
        assert_eq!(report.acked, report.swapped.iter().map(|s| s.0).collect::<Vec<_>>());
        assert_eq!(report.online_len, 1000);
        assert_eq!(report.offline_len, 200);
    }
}
