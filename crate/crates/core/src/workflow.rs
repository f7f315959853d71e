//! End-to-end jobs shared by the command line and the tests: demonstrate,
//! train, benchmark the queue, inspect datasets.

use crate::chunking::{queue_analytics, Aggregation};
use crate::client::{
    control_loop, episode_info, ArmEnv, ClientConfig, ClientError, EpisodeReport, HoldPosition, SimulatedSession,
    ACTION_DIM, ACTION_FEATURE, OBS_DIM, OBS_FEATURE,
};
use crate::dataset::{Dataset, DatasetError, EpisodeFrame, FeatureValue, NormMode};
use crate::genmodel::{
    fit_denoiser, make_schedule, Checkpoint, ChunkGenerator, ChunkSample, FeatureSpec, GenError, Normalization,
    Objective, TrainConfig,
};
use crate::kinematics::{fk, ik_solve, scripted_demo, ArmState, DemoConfig, KinematicsError, PoseTarget};
use crate::server::LatencyModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] GenError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Closed polygon approximating a circle, traversed counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirclePath {
    pub center: [f64; 2],
    pub radius: f64,
    pub waypoints: usize,
}

impl Default for CirclePath {
    fn default() -> Self {
        Self {
            center: [0.6, 1.0],
            radius: 0.35,
            waypoints: 24,
        }
    }
}

impl CirclePath {
    pub fn points(&self) -> Vec<[f64; 2]> {
        (0..self.waypoints)
            .map(|i| {
                let phi = 2.0 * PI * i as f64 / self.waypoints as f64;
                [
                    self.center[0] + self.radius * phi.cos(),
                    self.center[1] + self.radius * phi.sin(),
                ]
            })
            .collect()
    }

    /// Waypoints for `segments` polygon edges starting at vertex `start`; each
    /// edge is covered at constant speed in `steps * dt` seconds.
    pub fn targets(&self, start: usize, segments: usize, steps: usize, dt: f64) -> Vec<PoseTarget> {
        let pts = self.points();
        let n = pts.len();
        let t = steps as f64 * dt;
        (0..segments)
            .map(|i| {
                let a = pts[(start + i) % n];
                let b = pts[(start + i + 1) % n];
                PoseTarget {
                    p_star: a,
                    p_dot_star: [(b[0] - a[0]) / t, (b[1] - a[1]) / t],
                }
            })
            .collect()
    }

    /// Euclidean distance from `p` to the closed polygon.
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        let pts = self.points();
        let n = pts.len();
        (0..n)
            .map(|i| segment_distance(p, pts[i], pts[(i + 1) % n]))
            .fold(f64::INFINITY, f64::min)
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let s = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((ap[0] - s * ab[0]).powi(2) + (ap[1] - s * ab[1]).powi(2)).sqrt()
}

/// Configuration reaching `p` on the `theta2 < 0` branch. For targets in the
/// upper half plane this branch keeps the base joint away from its limits.
pub fn arm_at(p: [f64; 2], link_len: f64) -> Result<ArmState, KinematicsError> {
    let seed = ArmState::new(2.0, -2.0, link_len)?;
    ik_solve(&PoseTarget::fixed(p[0], p[1]), &seed, 200, 1e-10)
}

#[derive(Debug, Clone)]
pub struct TeachConfig {
    pub out: PathBuf,
    pub episodes: usize,
    pub laps: usize,
    pub fps: f64,
    pub steps_per_waypoint: usize,
    pub k_p: f64,
    pub noise_std: f64,
    /// Uniform joint perturbation of each episode's start, radians.
    pub perturb: f64,
    pub link_len: f64,
    pub path: CirclePath,
    pub seed: u64,
    pub task: String,
}

impl Default for TeachConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("demos"),
            episodes: 30,
            laps: 1,
            fps: 30.0,
            steps_per_waypoint: 5,
            k_p: 5.0,
            noise_std: 0.01,
            perturb: 0.05,
            link_len: 1.0,
            path: CirclePath::default(),
            seed: 0,
            task: "trace the circle".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeachReport {
    pub episodes: usize,
    pub frames: usize,
    /// Mean end-effector displacement caused by the action noise:
    /// `mean ||fk(action) - fk(q_next)||`.
    pub action_noise: f64,
    /// Mean end-effector distance of the demonstrator to the path.
    pub demo_tracking_error: f64,
}

/// Records scripted demonstrations of the circle path.
pub fn teach(cfg: &TeachConfig) -> Result<TeachReport, WorkflowError> {
    if cfg.episodes == 0 || cfg.laps == 0 || cfg.steps_per_waypoint == 0 || !(cfg.fps > 0.0) {
        return Err(WorkflowError::Config(
            "episodes, laps, steps_per_waypoint and fps must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dt = 1.0 / cfg.fps;
    let demo = DemoConfig {
        dt,
        k_p: cfg.k_p,
        steps_per_waypoint: cfg.steps_per_waypoint,
        noise_std: cfg.noise_std,
    };
    let mut ds = Dataset::open_or_create(&cfg.out, episode_info(cfg.fps))?;
    let pts = cfg.path.points();
    let (mut floor_sum, mut track_sum, mut n) = (0.0, 0.0, 0usize);
    for _ in 0..cfg.episodes {
        let start_idx = rng.random_range(0..cfg.path.waypoints);
        let on_path = arm_at(pts[start_idx], cfg.link_len)?;
        let q = on_path.theta();
        let start = on_path.with_theta([
            q[0] + rng.random_range(-cfg.perturb..=cfg.perturb),
            q[1] + rng.random_range(-cfg.perturb..=cfg.perturb),
        ]);
        let targets = cfg
            .path
            .targets(start_idx, cfg.laps * cfg.path.waypoints, cfg.steps_per_waypoint, dt);
        let steps = scripted_demo(&start, &targets, &demo, &mut rng)?;
        let frames: Vec<EpisodeFrame> = steps
            .iter()
            .enumerate()
            .map(|(i, s)| EpisodeFrame {
                timestamp: i as f64 / cfg.fps,
                values: [
                    (OBS_FEATURE.to_string(), FeatureValue::F64(s.observation().to_vec())),
                    (ACTION_FEATURE.to_string(), FeatureValue::F64(s.action.to_vec())),
                ]
                .into(),
            })
            .collect();
        for s in &steps {
            let a = fk(&start.with_theta(s.action));
            let b = fk(&start.with_theta(s.q_next));
            floor_sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            track_sum += cfg.path.distance(fk(&start.with_theta(s.q_next)));
            n += 1;
        }
        ds.write_episode(&frames, &cfg.task)?;
    }
    ds.compute_stats()?;
    Ok(TeachReport {
        episodes: cfg.episodes,
        frames: n,
        action_noise: floor_sum / n as f64,
        demo_tracking_error: track_sum / n as f64,
    })
}

/// The demonstrator's own noise floor: mean distance to the path of the
/// end-effector pose each recorded (noisy) action commands, over `ticks` steps
/// started on the path.
pub fn demonstrator_floor(cfg: &TeachConfig, ticks: usize) -> Result<f64, WorkflowError> {
    if ticks == 0 || cfg.steps_per_waypoint == 0 || !(cfg.fps > 0.0) {
        return Err(WorkflowError::Config("ticks, steps_per_waypoint and fps must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let dt = 1.0 / cfg.fps;
    let demo = DemoConfig {
        dt,
        k_p: cfg.k_p,
        steps_per_waypoint: cfg.steps_per_waypoint,
        noise_std: cfg.noise_std,
    };
    let start = arm_at(cfg.path.points()[0], cfg.link_len)?;
    let segments = ticks.div_ceil(cfg.steps_per_waypoint);
    let targets = cfg.path.targets(0, segments, cfg.steps_per_waypoint, dt);
    let steps = scripted_demo(&start, &targets, &demo, &mut rng)?;
    let total: f64 = steps[..ticks]
        .iter()
        .map(|s| cfg.path.distance(fk(&start.with_theta(s.action))))
        .sum();
    Ok(total / ticks as f64)
}

#[derive(Debug, Clone)]
pub struct TrainJob {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub objective: Objective,
    pub h_o: usize,
    pub h_a: usize,
    pub train: TrainConfig,
    pub rff_dim: usize,
    pub bandwidth: f64,
    pub norm: NormMode,
    pub sample_steps: usize,
    pub diffusion_steps: usize,
    pub pi0_s: f64,
}

impl Default for TrainJob {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("demos"),
            out: PathBuf::from("policy.lrgm"),
            objective: Objective::Cfm,
            h_o: 2,
            h_a: 10,
            train: TrainConfig {
                epochs: 100,
                lr: 0.1,
                batch: 8,
                seed: 0,
                final_lr: Some(0.0),
            },
            rff_dim: 64,
            bandwidth: 2.0,
            norm: NormMode::MeanStd,
            sample_steps: crate::genmodel::DEFAULT_FLOW_STEPS,
            diffusion_steps: crate::genmodel::DEFAULT_DIFFUSION_STEPS,
            pi0_s: crate::genmodel::DEFAULT_PI0_S,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub samples: usize,
    pub loss_trace: Vec<f64>,
    pub checkpoint: Checkpoint,
}

/// Windowed (observation stack, action chunk) pairs for every frame, in
/// physical units.
pub fn chunk_samples(ds: &Dataset, h_o: usize, h_a: usize) -> Result<Vec<ChunkSample>, WorkflowError> {
    let fps = ds.info().fps;
    let mut delta = BTreeMap::new();
    delta.insert(
        OBS_FEATURE.to_string(),
        (0..h_o).map(|k| -((h_o - 1 - k) as f64) / fps).collect::<Vec<_>>(),
    );
    delta.insert(ACTION_FEATURE.to_string(), (0..h_a).map(|k| k as f64 / fps).collect());
    let mut out = Vec::with_capacity(ds.num_frames());
    for ep in ds.episodes() {
        for f in 0..ep.length {
            let w = ds.read_window(ep.episode_index, f, &delta)?;
            out.push(ChunkSample {
                obs_stack: w.flat(OBS_FEATURE).expect("requested"),
                chunk: w.flat(ACTION_FEATURE).expect("requested"),
            });
        }
    }
    Ok(out)
}

/// Fits a chunk generator on a recorded dataset and writes the checkpoint.
pub fn train(job: &TrainJob) -> Result<TrainSummary, WorkflowError> {
    if job.h_o == 0 || job.h_a == 0 {
        return Err(WorkflowError::Config("H_o and H_a must be >= 1".into()));
    }
    let mut ds = Dataset::open(&job.dataset)?;
    let stats = match ds.stats()? {
        Some(s) => s,
        None => ds.compute_stats()?,
    };
    let missing = |k: &str| WorkflowError::Config(format!("dataset has no '{k}' feature"));
    let norm = Normalization {
        mode: job.norm,
        obs: stats.features.get(OBS_FEATURE).ok_or_else(|| missing(OBS_FEATURE))?.clone(),
        action: stats.features.get(ACTION_FEATURE).ok_or_else(|| missing(ACTION_FEATURE))?.clone(),
    };
    let spec = FeatureSpec {
        obs_dim: job.h_o * OBS_DIM,
        chunk_dim: job.h_a * ACTION_DIM,
        rff_dim: job.rff_dim,
        bandwidth: job.bandwidth,
        seed: job.train.seed,
    };
    let mut gen = ChunkGenerator::new(job.objective, spec)?;
    gen.schedule = make_schedule(
        job.diffusion_steps,
        crate::genmodel::DEFAULT_BETA_MIN,
        crate::genmodel::DEFAULT_BETA_MAX,
    )?;
    gen.sample_steps = job.sample_steps;
    gen.pi0_s = job.pi0_s;
    let mut ckpt = Checkpoint::new(gen, job.h_o, job.h_a, OBS_DIM, ACTION_DIM, Some(norm))?;

    let samples: Vec<ChunkSample> = chunk_samples(&ds, job.h_o, job.h_a)?
        .into_iter()
        .map(|s| ChunkSample {
            obs_stack: ckpt.normalize_obs(&s.obs_stack),
            chunk: ckpt.normalize_chunk(&s.chunk),
        })
        .collect();
    let loss_trace = fit_denoiser(&mut ckpt.generator, &samples, &job.train)?;
    ckpt.save(&job.out)?;
    Ok(TrainSummary {
        samples: samples.len(),
        loss_trace,
        checkpoint: ckpt,
    })
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub dt: f64,
    pub h_a: usize,
    pub g: f64,
    pub d_lim: f64,
    pub ticks: u64,
    pub latency: LatencyModel,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dt: 0.033,
            h_a: 50,
            g: 0.5,
            d_lim: 0.0,
            ticks: 10_000,
            latency: LatencyModel::Fixed(0.3),
            aggregation: Aggregation::default(),
            seed: 0,
        }
    }
}

/// Queue dynamics against an in-process server on a simulated clock.
pub fn queue_bench(cfg: &BenchConfig) -> Result<EpisodeReport, WorkflowError> {
    let arm = arm_at(CirclePath::default().points()[0], 1.0)?;
    let mut env = ArmEnv::new(arm, 0.2);
    let mut session = SimulatedSession::new(
        HoldPosition {
            h_a: cfg.h_a,
            obs_dim: OBS_DIM,
        },
        cfg.latency,
        cfg.seed,
    );
    let client = ClientConfig {
        dt: cfg.dt,
        g: cfg.g,
        h_a: cfg.h_a,
        h_o: 1,
        d_lim: cfg.d_lim,
        episode_len: cfg.ticks,
        aggregation: cfg.aggregation,
        max_joint_step: 0.2,
        realtime: false,
    };
    Ok(control_loop(&client, &mut env, &mut session)?)
}

/// `g_min` for a bench configuration, from the mean injected latency.
pub fn bench_g_min(cfg: &BenchConfig) -> Result<f64, WorkflowError> {
    queue_analytics(cfg.latency.mean(), cfg.dt, cfg.h_a)
        .map(|a| a.g_min)
        .map_err(|e| WorkflowError::Config(e.to_string()))
}

/// Runs the three threshold regimes: sequential (`g = 0`), just above the
/// starvation bound (`g_min + 0.05`, capped at 1) and always-request (`g = 1`).
pub fn bench_sweep(base: &BenchConfig) -> Result<Vec<(f64, EpisodeReport)>, WorkflowError> {
    let g_min = bench_g_min(base)?;
    [0.0, (g_min + 0.05).min(1.0), 1.0]
        .into_iter()
        .map(|g| {
            let cfg = BenchConfig { g, ..base.clone() };
            queue_bench(&cfg).map(|r| (g, r))
        })
        .collect()
}

/// Band the fill fraction stays in once `g = 1` reaches steady state under a
/// fixed latency: a reply lands every `L = ceil(latency / dt)` ticks and tops
/// the queue back up to `H_a - L` actions.
pub fn fill_band(latency: f64, dt: f64, h_a: usize) -> (f64, f64) {
    let l = (latency / dt - 1e-9).ceil().max(1.0);
    let h = h_a as f64;
    (((h - 2.0 * l + 1.0) / h).max(0.0), ((h - l) / h).max(0.0))
}

/// Mean end-effector distance to the path over a run.
pub fn tracking_error(report: &EpisodeReport, path: &CirclePath) -> f64 {
    let n = report.records.len().max(1) as f64;
    report.records.iter().map(|r| path.distance(r.ee)).sum::<f64>() / n
}

/// Human-readable dataset summary.
pub fn inspect(root: &Path) -> Result<String, WorkflowError> {
    let ds = Dataset::open(root)?;
    let info = ds.info();
    let mut s = String::new();
    let _ = writeln!(s, "version={}", info.version);
    let _ = writeln!(s, "fps={}", info.fps);
    let _ = writeln!(s, "episodes={}", info.total_episodes);
    let _ = writeln!(s, "frames={}", info.total_frames);
    let _ = writeln!(s, "files={}", info.total_files);
    let _ = writeln!(s, "tasks={}", info.total_tasks);
    for (name, spec) in &info.features {
        let _ = writeln!(s, "feature {name} {} {:?}", spec.dtype.tag(), spec.shape);
    }
    for ep in ds.episodes() {
        let _ = writeln!(
            s,
            "episode {} length={} file={} offset={} task={:?}",
            ep.episode_index, ep.length, ep.file_id, ep.row_offset, ep.task
        );
    }
    match ds.stats()? {
        Some(st) => {
            for (name, f) in &st.features {
                let _ = writeln!(s, "stats {name} mean={:?} std={:?} min={:?} max={:?}", f.mean, f.std, f.min, f.max);
            }
        }
        None => {
            let _ = writeln!(s, "stats stale");
        }
    }
    Ok(s)
}
