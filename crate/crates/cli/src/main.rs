use chunkflow::chunking::{write_trace, Aggregation, AggregationMode};
use chunkflow::client::{control_loop, record_episode, ArmEnv, ClientConfig, RemoteSession};
use chunkflow::dataset::NormMode;
use chunkflow::genmodel::{Checkpoint, Objective, TrainConfig};
use chunkflow::rlbridge::{actor_learner_loop, BridgeConfig};
use chunkflow::server::{serve, LatencyModel, Policy, ServerConfig};
use chunkflow::workflow::{self, BenchConfig, CirclePath, TeachConfig, TrainJob, WorkflowError};
use clap::{Args, Parser, Subcommand};
use std::fmt::Display;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

mod config;

/// Action-chunking policy runtime: demonstrations, training, serving and the
/// asynchronous robot client.
#[derive(Debug, Parser)]
#[command(name = "chunkflow", version, args_override_self = true)]
struct Cli {
    /// key=value file whose entries act as flags; explicit flags win.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Record scripted demonstrations of the circle-tracing task.
    Teach(TeachArgs),
    /// Fit a chunk generator on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Serve a checkpoint over TCP.
    Serve(ServeArgs),
    /// Drive the simulated arm from a policy server.
    RunClient(ClientArgs),
    /// Sweep the queue threshold against a simulated server.
    Bench(BenchArgs),
    /// Print a dataset's metadata, statistics and episode table.
    DatasetInspect(InspectArgs),
    /// Run the actor/learner exchange over a loopback connection.
    BridgeDemo(BridgeArgs),
}

#[derive(Debug, Args)]
struct TeachArgs {
    /// Dataset root; appended to if it already exists.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    episodes: usize,
    /// Laps of the circle per episode.
    #[arg(long, default_value_t = 1)]
    laps: usize,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    #[arg(long, default_value_t = 5)]
    steps_per_waypoint: usize,
    /// Proportional feedback gain of the demonstrator.
    #[arg(long, default_value_t = 5.0)]
    kp: f64,
    /// Std of the joint noise added to recorded actions, radians.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Uniform perturbation of each episode's start configuration, radians.
    #[arg(long, default_value_t = 0.05)]
    perturb: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// ddpm | cfm | pi0
    #[arg(long, default_value = "cfm")]
    objective: Objective,
    /// Observation frames stacked per request.
    #[arg(long, default_value_t = 2)]
    h_o: usize,
    /// Actions per chunk.
    #[arg(long, default_value_t = 10)]
    h_a: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Learning rate reached at the last step (linear decay). Negative keeps lr constant.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    final_lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Random Fourier features over the observation stack.
    #[arg(long, default_value_t = 64)]
    rff: usize,
    #[arg(long, default_value_t = 2.0)]
    bandwidth: f64,
    /// meanstd | minmax
    #[arg(long, default_value = "meanstd")]
    norm: NormMode,
    /// Integration steps at inference (flow objectives).
    #[arg(long, default_value_t = chunkflow::genmodel::DEFAULT_FLOW_STEPS)]
    steps: usize,
    /// Diffusion steps T (ddpm).
    #[arg(long, default_value_t = chunkflow::genmodel::DEFAULT_DIFFUSION_STEPS)]
    diffusion_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7000")]
    listen: String,
    #[arg(long)]
    ckpt: PathBuf,
    /// Override the checkpoint's sampling steps.
    #[arg(long)]
    steps: Option<usize>,
    /// none | fixed:S | lognormal:MU,SIGMA
    #[arg(long, default_value = "none")]
    latency: LatencyModel,
    #[arg(long, default_value_t = 8)]
    max_sessions: usize,
    /// Stop after this many seconds; runs until killed otherwise.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ClientArgs {
    #[arg(long, default_value = "127.0.0.1:7000")]
    server: String,
    /// Queue threshold as a fraction of H_a.
    #[arg(long, default_value_t = 0.5)]
    g: f64,
    #[arg(long, default_value_t = 33.0)]
    dt_ms: f64,
    #[arg(long, default_value_t = 1000)]
    ticks: u64,
    /// Must match the served checkpoint.
    #[arg(long, default_value_t = 2)]
    h_o: usize,
    /// Must match the served checkpoint.
    #[arg(long, default_value_t = 10)]
    h_a: usize,
    /// Similarity filter distance on joint positions; 0 disables.
    #[arg(long, default_value_t = 0.0)]
    d_lim: f64,
    /// ema | replace
    #[arg(long, default_value = "ema")]
    aggregation: AggregationMode,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Per-tick joint rate limit, radians.
    #[arg(long, default_value_t = 0.2)]
    max_joint_step: f64,
    /// Append the run to this dataset.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long, default_value = "policy rollout")]
    task: String,
    /// Write the queue trace here instead of stdout.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Run on a simulated clock instead of sleeping between ticks.
    #[arg(long)]
    no_realtime: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Mean server latency E[l_S], seconds.
    #[arg(long, default_value_t = 0.3)]
    e_ls: f64,
    /// Latency model; defaults to fixed:E_LS.
    #[arg(long)]
    latency: Option<LatencyModel>,
    #[arg(long, default_value_t = 33.0)]
    dt_ms: f64,
    #[arg(long, default_value_t = 50)]
    h_a: usize,
    #[arg(long, default_value_t = 10_000)]
    ticks: u64,
    /// Directory for one trace file per threshold.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct BridgeArgs {
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 100)]
    update_every: usize,
    #[arg(long, default_value_t = 50)]
    episode_len: usize,
    /// Every n-th transition is a human intervention; 0 disables.
    #[arg(long, default_value_t = 5)]
    human_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

impl From<WorkflowError> for Failure {
    fn from(e: WorkflowError) -> Self {
        match e {
            WorkflowError::Config(_) => usage(e),
            e => runtime(e),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match config::expand(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Teach(a) => teach(a),
        Command::Train(a) => train(a),
        Command::Serve(a) => serve_cmd(a),
        Command::RunClient(a) => run_client(a),
        Command::Bench(a) => bench(a),
        Command::DatasetInspect(a) => inspect(a),
        Command::BridgeDemo(a) => bridge(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn require(ok: bool, msg: &str) -> Outcome {
    if ok {
        Ok(())
    } else {
        Err(usage(msg))
    }
}

fn require_dataset(p: &Path) -> Outcome {
    require(
        p.join("meta/info.json").is_file(),
        &format!("{} is not a dataset (no meta/info.json)", p.display()),
    )
}

fn teach(a: TeachArgs) -> Outcome {
    let cfg = TeachConfig {
        out: a.out,
        episodes: a.episodes,
        laps: a.laps,
        fps: a.fps,
        steps_per_waypoint: a.steps_per_waypoint,
        k_p: a.kp,
        noise_std: a.noise,
        perturb: a.perturb,
        seed: a.seed,
        ..Default::default()
    };
    require(a.kp > 0.0 && a.noise >= 0.0 && a.perturb >= 0.0, "kp must be > 0, noise and perturb >= 0")?;
    let report = workflow::teach(&cfg)?;
    let floor = workflow::demonstrator_floor(&cfg, 500)?;
    println!("episodes={}", report.episodes);
    println!("frames={}", report.frames);
    println!("action_noise={:.6}", report.action_noise);
    println!("demo_tracking_error={:.6}", report.demo_tracking_error);
    println!("noise_floor={floor:.6}");
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    require_dataset(&a.data)?;
    require(a.epochs > 0 && a.batch > 0 && a.steps > 0, "epochs, batch and steps must be positive")?;
    require(a.lr > 0.0 && a.bandwidth > 0.0, "lr and bandwidth must be positive")?;
    let job = TrainJob {
        dataset: a.data,
        out: a.out,
        objective: a.objective,
        h_o: a.h_o,
        h_a: a.h_a,
        train: TrainConfig {
            epochs: a.epochs,
            lr: a.lr,
            batch: a.batch,
            seed: a.seed,
            final_lr: (a.final_lr >= 0.0).then_some(a.final_lr),
        },
        rff_dim: a.rff,
        bandwidth: a.bandwidth,
        norm: a.norm,
        sample_steps: a.steps,
        diffusion_steps: a.diffusion_steps,
        ..Default::default()
    };
    let summary = workflow::train(&job)?;
    println!("epoch,loss");
    for (i, l) in summary.loss_trace.iter().enumerate() {
        println!("{i},{l:.6}");
    }
    println!();
    println!("samples={}", summary.samples);
    println!("objective={}", a.objective);
    println!("checkpoint={}", job.out.display());
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Outcome {
    require(a.ckpt.is_file(), &format!("checkpoint {} not found", a.ckpt.display()))?;
    require(a.steps != Some(0), "steps must be >= 1")?;
    require(a.duration.is_none_or(|d| d >= 0.0), "duration must be >= 0")?;
    let ckpt = Checkpoint::load(&a.ckpt).map_err(runtime)?;
    let policy = Arc::new(Policy::new(ckpt, a.steps).map_err(usage)?);
    let (h_o, h_a) = (policy.checkpoint().h_o, policy.h_a());
    let handle = serve(
        policy,
        ServerConfig {
            listen: a.listen,
            latency: a.latency,
            max_sessions: a.max_sessions,
            seed: a.seed,
        },
    )
    .map_err(runtime)?;
    println!("listening={}", handle.local_addr());
    println!("h_o={h_o}");
    println!("h_a={h_a}");
    let _ = io::stdout().flush();
    match a.duration {
        Some(d) => {
            let end = Instant::now() + Duration::from_secs_f64(d);
            while Instant::now() < end {
                std::thread::sleep(Duration::from_millis(20));
            }
            let st = handle.stats();
            let counts = [
                ("sessions", &st.sessions),
                ("refused", &st.refused),
                ("requests", &st.requests),
                ("replies", &st.replies),
                ("superseded", &st.superseded),
            ]
            .map(|(k, v)| format!("{k}={}", v.load(Ordering::Relaxed)));
            handle.shutdown();
            println!("{}", counts.join("\n"));
        }
        None => handle.wait(),
    }
    Ok(())
}

fn run_client(a: ClientArgs) -> Outcome {
    let cfg = ClientConfig {
        dt: a.dt_ms / 1000.0,
        g: a.g,
        h_a: a.h_a,
        h_o: a.h_o,
        d_lim: a.d_lim,
        episode_len: a.ticks,
        aggregation: Aggregation {
            mode: a.aggregation,
            alpha: a.alpha,
        },
        max_joint_step: a.max_joint_step,
        realtime: !a.no_realtime,
    };
    cfg.validate().map_err(usage)?;
    let path = CirclePath::default();
    let arm = workflow::arm_at(path.points()[0], 1.0).map_err(runtime)?;
    let mut env = ArmEnv::new(arm, a.max_joint_step);
    let mut session = RemoteSession::connect(&a.server).map_err(runtime)?;
    let report = control_loop(&cfg, &mut env, &mut session).map_err(runtime)?;
    drop(session);
    print!("{}", report.summary(cfg.dt));
    println!("tracking_error={:.6}", workflow::tracking_error(&report, &path));
    if let Some(meta) = record_episode(a.record.as_deref(), &report, 1.0 / cfg.dt, &a.task).map_err(runtime)? {
        println!("recorded_episode={}", meta.episode_index);
    }
    match a.trace {
        Some(p) => {
            let mut f = io::BufWriter::new(fs::File::create(&p).map_err(runtime)?);
            write_trace(&mut f, &report.trace).map_err(runtime)?;
            f.flush().map_err(runtime)?;
        }
        None => {
            println!();
            write_trace(&mut io::stdout().lock(), &report.trace).map_err(runtime)?;
        }
    }
    if report.session_lost {
        return Err(runtime(format!(
            "session lost: {}",
            report.error.unwrap_or_default()
        )));
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Outcome {
    require(a.ticks > 0 && a.h_a > 0 && a.dt_ms > 0.0, "ticks, h_a and dt_ms must be positive")?;
    require(a.e_ls >= 0.0, "e_ls must be >= 0")?;
    let latency = a.latency.unwrap_or(LatencyModel::Fixed(a.e_ls));
    latency.validate().map_err(usage)?;
    let base = BenchConfig {
        dt: a.dt_ms / 1000.0,
        h_a: a.h_a,
        ticks: a.ticks,
        latency,
        seed: a.seed,
        ..Default::default()
    };
    let g_min = chunkflow::chunking::queue_analytics(a.e_ls, base.dt, a.h_a)
        .map_err(usage)?
        .g_min;
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    let runs = workflow::bench_sweep(&base)?;
    println!("g_min={g_min:.4}");
    println!("g,ticks,sends,merges,starvations,idle_runs,mean_idle_s,min_fill,max_fill");
    for (g, r) in &runs {
        let fills = r.trace.iter().map(|t| t.fill_fraction);
        let min = fills.clone().fold(f64::INFINITY, f64::min);
        let max = fills.fold(f64::NEG_INFINITY, f64::max);
        println!(
            "{g:.4},{},{},{},{},{},{:.4},{min:.4},{max:.4}",
            r.ticks,
            r.sends,
            r.merges,
            r.starvations,
            r.idle_runs.len(),
            r.mean_idle_s(base.dt)
        );
        if let Some(dir) = &a.out_dir {
            let p = dir.join(format!("trace_g{g:.4}.csv"));
            let mut f = io::BufWriter::new(fs::File::create(&p).map_err(runtime)?);
            write_trace(&mut f, &r.trace).map_err(runtime)?;
            f.flush().map_err(runtime)?;
        }
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Outcome {
    require_dataset(&a.data)?;
    print!("{}", workflow::inspect(&a.data)?);
    Ok(())
}

fn bridge(a: BridgeArgs) -> Outcome {
    require(
        a.steps > 0 && a.update_every > 0 && a.episode_len > 0,
        "steps, update_every and episode_len must be positive",
    )?;
    let cfg = BridgeConfig {
        steps: a.steps,
        update_every: a.update_every,
        episode_len: a.episode_len,
        human_every: a.human_every,
        seed: a.seed,
        ..Default::default()
    };
    let r = actor_learner_loop(&cfg).map_err(runtime)?;
    println!("transitions_sent={}", r.transitions_sent);
    println!("transitions_received={}", r.transitions_received);
    println!("stream_intact={}", r.stream_intact);
    println!("published={}", r.published.len());
    println!("swapped={}", r.swapped.len());
    println!("acked={}", r.acked.len());
    println!("torn_free={}", r.torn_free());
    println!("online_len={}", r.online_len);
    println!("offline_len={}", r.offline_len);
    if r.session_lost {
        return Err(runtime("actor/learner connection lost"));
    }
    Ok(())
}
