//! Policy server: chunk inference behind the wire protocol.
//!
//! Each connection is one session. A reader thread decodes frames and drops
//! observations into a single request slot; a worker thread takes the slot,
//! runs inference, waits out any injected latency and replies. A newer
//! observation replaces whatever is in the slot, and the worker discards an
//! in-flight result once a newer request exists, so each session gets at most
//! one reply per burst: the one for its latest observation.

use crate::chunking::ActionChunk;
use crate::genmodel::{Checkpoint, GenError};
use crate::protocol::{codes, read_message, write_message, Payload, WireError, WireMessage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use std::fmt;
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("observation has {got} values, policy expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] GenError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Artificial service delay added on top of inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatencyModel {
    None,
    Fixed(f64),
    LogNormal { mu: f64, sigma: f64 },
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), ServerError> {
        let ok = match *self {
            LatencyModel::None => true,
            LatencyModel::Fixed(s) => s.is_finite() && s >= 0.0,
            LatencyModel::LogNormal { mu, sigma } => mu.is_finite() && sigma.is_finite() && sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ServerError::Config(format!("latency parameters must be finite and non-negative: {self}")))
        }
    }

    /// One service-time draw in seconds.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            LatencyModel::None => 0.0,
            LatencyModel::Fixed(s) => s,
            LatencyModel::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).expect("validated").sample(rng),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            LatencyModel::None => 0.0,
            LatencyModel::Fixed(s) => s,
            LatencyModel::LogNormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
        }
    }
}

impl fmt::Display for LatencyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LatencyModel::None => write!(f, "none"),
            LatencyModel::Fixed(s) => write!(f, "fixed:{s}"),
            LatencyModel::LogNormal { mu, sigma } => write!(f, "lognormal:{mu},{sigma}"),
        }
    }
}

impl FromStr for LatencyModel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("bad number '{v}': {e}"));
        let model = match s.split_once(':') {
            None if s == "none" => LatencyModel::None,
            Some(("fixed", v)) => LatencyModel::Fixed(num(v)?),
            Some(("lognormal", v)) => {
                let (mu, sigma) = v
                    .split_once(',')
                    .ok_or_else(|| format!("expected lognormal:MU,SIGMA, got '{s}'"))?;
                LatencyModel::LogNormal {
                    mu: num(mu)?,
                    sigma: num(sigma)?,
                }
            }
            _ => return Err(format!("unknown latency model '{s}' (none | fixed:S | lognormal:MU,SIGMA)")),
        };
        model.validate().map_err(|e| e.to_string())?;
        Ok(model)
    }
}

/// A loaded checkpoint ready to produce chunks in physical units.
#[derive(Debug, Clone)]
pub struct Policy {
    ckpt: Checkpoint,
}

impl Policy {
    /// `steps` overrides the checkpoint's flow integration steps.
    pub fn new(mut ckpt: Checkpoint, steps: Option<usize>) -> Result<Self, ServerError> {
        if let Some(s) = steps {
            if s == 0 {
                return Err(ServerError::Config("inference steps must be >= 1".into()));
            }
            ckpt.generator.sample_steps = s;
        }
        Ok(Self { ckpt })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn obs_stack_dim(&self) -> usize {
        self.ckpt.obs_stack_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.ckpt.action_dim
    }

    pub fn h_a(&self) -> usize {
        self.ckpt.h_a
    }

    /// Samples one chunk for a raw observation stack. The chunk is anchored
    /// at step 0; the client re-anchors it.
    pub fn infer_chunk<R: rand::Rng + ?Sized>(&self, obs_stack: &[f64], rng: &mut R) -> Result<ActionChunk, ServerError> {
        if obs_stack.len() != self.obs_stack_dim() {
            return Err(ServerError::DimMismatch {
                expected: self.obs_stack_dim(),
                got: obs_stack.len(),
            });
        }
        let z = self.ckpt.generator.sample(&self.ckpt.normalize_obs(obs_stack), rng)?;
        let flat = self.ckpt.denormalize_chunk(&z);
        Ok(ActionChunk::from_flat(0, &flat, self.action_dim()).expect("chunk dims fixed by checkpoint"))
    }
}

/// Anything that turns observation stacks into action sequences.
pub trait ChunkSource: Send {
    fn infer(&mut self, obs_stack: &[f64]) -> Result<Vec<Vec<f64>>, ServerError>;
}

/// A policy with its own sampling stream.
pub struct SeededPolicy {
    policy: Arc<Policy>,
    rng: ChaCha8Rng,
}

impl SeededPolicy {
    pub fn new(policy: Arc<Policy>, seed: u64) -> Self {
        Self {
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl ChunkSource for SeededPolicy {
    fn infer(&mut self, obs_stack: &[f64]) -> Result<Vec<Vec<f64>>, ServerError> {
        Ok(self.policy.infer_chunk(obs_stack, &mut self.rng)?.actions)
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: String,
    pub latency: LatencyModel,
    pub max_sessions: usize,
    pub seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:0".into(),
            latency: LatencyModel::None,
            max_sessions: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Default)]
pub struct ServerStats {
    pub sessions: AtomicU64,
    pub refused: AtomicU64,
    pub requests: AtomicU64,
    pub replies: AtomicU64,
    pub superseded: AtomicU64,
}

/// Running server. Dropping the handle does not stop it; call `shutdown`.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    stats: Arc<ServerStats>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Stops accepting, closes live sessions and waits for their threads.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the stop flag is raised elsewhere.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

/// Binds `cfg.listen` and serves `policy` on a background thread.
pub fn serve(policy: Arc<Policy>, cfg: ServerConfig) -> Result<ServerHandle, ServerError> {
    cfg.latency.validate()?;
    if cfg.max_sessions == 0 {
        return Err(ServerError::Config("max_sessions must be >= 1".into()));
    }
    let listener = TcpListener::bind(&cfg.listen)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stats = Arc::new(ServerStats::default());
    let accept = {
        let stop = stop.clone();
        let stats = stats.clone();
        thread::Builder::new()
            .name("policy-accept".into())
            .spawn(move || accept_loop(listener, policy, cfg, stop, stats))?
    };
    Ok(ServerHandle {
        addr,
        stop,
        stats,
        accept: Some(accept),
    })
}

fn accept_loop(
    listener: TcpListener,
    policy: Arc<Policy>,
    cfg: ServerConfig,
    stop: Arc<AtomicBool>,
    stats: Arc<ServerStats>,
) {
    let active = Arc::new(AtomicUsize::new(0));
    let mut sessions: Vec<(TcpStream, JoinHandle<()>)> = Vec::new();
    let mut next_id = 0u64;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                next_id += 1;
                if active.load(Ordering::SeqCst) >= cfg.max_sessions {
                    stats.refused.fetch_add(1, Ordering::Relaxed);
                    refuse(stream, cfg.max_sessions);
                    continue;
                }
                active.fetch_add(1, Ordering::SeqCst);
                stats.sessions.fetch_add(1, Ordering::Relaxed);
                let Ok(control) = stream.try_clone() else {
                    active.fetch_sub(1, Ordering::SeqCst);
                    continue;
                };
                let ctx = SessionCtx {
                    policy: policy.clone(),
                    latency: cfg.latency,
                    seed: cfg.seed ^ next_id.wrapping_mul(0x9e37_79b9_7f4a_7c15),
                    stats: stats.clone(),
                    active: active.clone(),
                };
                match thread::Builder::new()
                    .name(format!("session-{next_id}"))
                    .spawn(move || run_session(stream, ctx))
                {
                    Ok(h) => sessions.push((control, h)),
                    Err(_) => {
                        active.fetch_sub(1, Ordering::SeqCst);
                    }
                }
                sessions.retain(|(_, h)| !h.is_finished());
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(_) => thread::sleep(Duration::from_millis(5)),
        }
    }
    for (s, _) in &sessions {
        let _ = s.shutdown(Shutdown::Both);
    }
    for (_, h) in sessions {
        let _ = h.join();
    }
}

fn refuse(mut stream: TcpStream, limit: usize) {
    // Read the client's Hello (if any) so the refusal is an answer to it.
    let _ = stream.set_read_timeout(Some(Duration::from_millis(200)));
    let seq = match read_message(&mut stream) {
        Ok(Some(m)) => m.seq,
        _ => 0,
    };
    let _ = write_message(
        &mut stream,
        &WireMessage::new(
            seq,
            Payload::Error {
                code: codes::SESSION_LIMIT,
                text: format!("session limit of {limit} reached"),
            },
        ),
    );
    let _ = stream.shutdown(Shutdown::Both);
}

struct SessionCtx {
    policy: Arc<Policy>,
    latency: LatencyModel,
    seed: u64,
    stats: Arc<ServerStats>,
    active: Arc<AtomicUsize>,
}

struct Request {
    seq: u64,
    obs: Vec<f64>,
    received: Instant,
}

#[derive(Default)]
struct Slot {
    pending: Option<Request>,
    /// Highest observation seq received on this session.
    latest: u64,
    closed: bool,
}

type Shared = Arc<(Mutex<Slot>, Condvar)>;

fn send(writer: &Mutex<TcpStream>, msg: &WireMessage) -> Result<(), WireError> {
    let mut w = writer.lock().unwrap();
    write_message(&mut *w, msg)
}

fn run_session(stream: TcpStream, ctx: SessionCtx) {
    let shared: Shared = Arc::new((Mutex::new(Slot::default()), Condvar::new()));
    let writer = match stream.try_clone() {
        Ok(w) => Arc::new(Mutex::new(w)),
        Err(_) => {
            ctx.active.fetch_sub(1, Ordering::SeqCst);
            return;
        }
    };
    let worker = {
        let shared = shared.clone();
        let writer = writer.clone();
        let policy = ctx.policy.clone();
        let stats = ctx.stats.clone();
        let latency = ctx.latency;
        let seed = ctx.seed;
        thread::spawn(move || worker_loop(shared, writer, policy, stats, latency, seed))
    };
    read_loop(stream, &shared, &writer, &ctx);
    {
        let (lock, cv) = &*shared;
        lock.lock().unwrap().closed = true;
        cv.notify_all();
    }
    let _ = worker.join();
    if let Ok(w) = writer.lock() {
        let _ = w.shutdown(Shutdown::Both);
    }
    ctx.active.fetch_sub(1, Ordering::SeqCst);
}

fn read_loop(mut stream: TcpStream, shared: &Shared, writer: &Mutex<TcpStream>, ctx: &SessionCtx) {
    let mut greeted = false;
    loop {
        let msg = match read_message(&mut stream) {
            Ok(Some(m)) => m,
            Ok(None) => return,
            Err(WireError::Decode(e)) => {
                let _ = send(writer, &error_msg(0, codes::MALFORMED, &e));
                return;
            }
            Err(_) => return,
        };
        match msg.payload {
            Payload::Hello => {
                greeted = true;
                if send(writer, &WireMessage::new(msg.seq, Payload::Hello)).is_err() {
                    return;
                }
            }
            Payload::Observation(obs) if greeted => {
                if obs.len() != ctx.policy.obs_stack_dim() {
                    let e = ServerError::DimMismatch {
                        expected: ctx.policy.obs_stack_dim(),
                        got: obs.len(),
                    };
                    if send(writer, &error_msg(msg.seq, codes::DIM_MISMATCH, &e)).is_err() {
                        return;
                    }
                    continue;
                }
                ctx.stats.requests.fetch_add(1, Ordering::Relaxed);
                let (lock, cv) = &**shared;
                let mut slot = lock.lock().unwrap();
                if slot.pending.is_some() {
                    ctx.stats.superseded.fetch_add(1, Ordering::Relaxed);
                }
                slot.latest = slot.latest.max(msg.seq);
                slot.pending = Some(Request {
                    seq: msg.seq,
                    obs,
                    received: Instant::now(),
                });
                cv.notify_all();
            }
            other => {
                let text = if greeted {
                    format!("unexpected {:?} from client", other.kind())
                } else {
                    "session must start with Hello".to_string()
                };
                let _ = send(writer, &error_msg(msg.seq, codes::PROTOCOL, &text));
                return;
            }
        }
    }
}

fn error_msg(seq: u64, code: u16, e: &dyn fmt::Display) -> WireMessage {
    WireMessage::new(
        seq,
        Payload::Error {
            code,
            text: e.to_string(),
        },
    )
}

fn worker_loop(
    shared: Shared,
    writer: Arc<Mutex<TcpStream>>,
    policy: Arc<Policy>,
    stats: Arc<ServerStats>,
    latency: LatencyModel,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lock, cv) = &*shared;
    loop {
        let req = {
            let mut slot = lock.lock().unwrap();
            loop {
                if slot.closed {
                    return;
                }
                if let Some(r) = slot.pending.take() {
                    break r;
                }
                slot = cv.wait(slot).unwrap();
            }
        };
        let deadline = req.received + Duration::from_secs_f64(latency.sample(&mut rng));
        let result = policy.infer_chunk(&req.obs, &mut rng);
        // Wait out the injected latency, abandoning this request as soon as a
        // newer one lands.
        let superseded = {
            let mut slot = lock.lock().unwrap();
            loop {
                if slot.closed {
                    return;
                }
                if slot.latest > req.seq {
                    break true;
                }
                let now = Instant::now();
                if now >= deadline {
                    break false;
                }
                slot = cv.wait_timeout(slot, deadline - now).unwrap().0;
            }
        };
        if superseded {
            stats.superseded.fetch_add(1, Ordering::Relaxed);
            continue;
        }
        let msg = match result {
            Ok(chunk) => WireMessage::new(
                req.seq,
                Payload::ChunkReply {
                    action_dim: policy.action_dim() as u32,
                    actions: chunk.actions.concat(),
                },
            ),
            Err(e) => error_msg(req.seq, codes::INTERNAL, &e),
        };
        if send(&writer, &msg).is_err() {
            return;
        }
        stats.replies.fetch_add(1, Ordering::Relaxed);
    }
}
