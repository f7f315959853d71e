use chunkflow::chunking::parse_trace;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chunkflow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in output:\n{text}"))
}

#[test]
fn help_lists_every_subcommand() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for sub in ["teach", "train", "serve", "run-client", "bench", "dataset-inspect", "bridge-demo"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["teach", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["bench", "--latency", "fixed:-1"]).status.code(), Some(1));
    assert_eq!(run(&["run-client", "--g", "1.5"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none");
    let o = run(&["train", "--data", missing.to_str().unwrap(), "--out", "x.lrgm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!Path::new("x.lrgm").exists());
}

#[test]
fn runtime_errors_exit_two() {
    // Nothing listens on port 1.
    let o = run(&["run-client", "--server", "127.0.0.1:1", "--ticks", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_reports_bound_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("traces");
    let o = run(&[
        "bench",
        "--e-ls",
        "0.3",
        "--dt-ms",
        "33",
        "--h-a",
        "50",
        "--ticks",
        "2000",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let g_min: f64 = value(&text, "g_min").parse().unwrap();
    assert!((g_min - 0.1818).abs() < 1e-4);
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 3);
    for f in files {
        let trace = parse_trace(&fs::read_to_string(&f).unwrap()).unwrap();
        assert_eq!(trace.len(), 2000);
        assert!(trace.iter().all(|r| (0.0..=1.0).contains(&r.fill_fraction)));
    }
    assert_eq!(stdout(&run(&["bench", "--ticks", "2000"])), stdout(&run(&["bench", "--ticks", "2000"])));
}

#[test]
fn teach_train_inspect_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("demos");
    let data_s = data.to_str().unwrap();
    let o = run(&["teach", "--out", data_s, "--episodes", "4", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(value(&stdout(&o), "frames"), "480");

    let ckpt = dir.path().join("p.lrgm");
    let o = run(&[
        "train", "--data", data_s, "--out", ckpt.to_str().unwrap(), "--epochs", "8", "--objective", "cfm",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ckpt.is_file());
    let text = stdout(&o);
    let losses: Vec<f64> = text
        .lines()
        .skip(1)
        .take_while(|l| !l.is_empty())
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 8);
    assert!(losses.last().unwrap() < losses.first().unwrap());

    let o = run(&["dataset-inspect", "--data", data_s]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(value(&text, "episodes"), "4");
    assert_eq!(text.lines().filter(|l| l.starts_with("episode ")).count(), 4);
    assert!(text.contains("stats observation"));
}

#[test]
fn teach_is_deterministic_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for p in [&a, &b] {
        let o = run(&["teach", "--out", p.to_str().unwrap(), "--episodes", "2", "--seed", "9"]);
        assert_eq!(o.status.code(), Some(0));
    }
    let file = "data/chunk-000/file-000.bin";
    assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap());
}

#[test]
fn config_file_supplies_flags_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("teach.cfg");
    let out = dir.path().join("d");
    fs::write(&cfg, format!("# demo manifest\nout = {}\nepisodes = 3\nseed = 1\n", out.display())).unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "teach"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(value(&stdout(&o), "episodes"), "3");
    let out2 = dir.path().join("d2");
    let o = run(&["teach", "--config", cfg.to_str().unwrap(), "--episodes", "1", "--out", out2.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(value(&stdout(&o), "episodes"), "1");
    fs::write(&cfg, "bogus_key = 1\n").unwrap();
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "teach"]).status.code(), Some(1));
}

#[test]
fn serve_and_run_client_close_the_loop() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("demos");
    let ckpt = dir.path().join("p.lrgm");
    assert!(run(&["teach", "--out", data.to_str().unwrap(), "--episodes", "3"]).status.success());
    assert!(run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "3"
    ])
    .status
    .success());
    let mut server = bin()
        .args(["serve", "--ckpt", ckpt.to_str().unwrap(), "--listen", "127.0.0.1:0", "--duration", "20"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(server.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    let addr = first.strip_prefix("listening=").unwrap().to_string();
    let rec = dir.path().join("rec");
    let trace = dir.path().join("trace.csv");
    let o = run(&[
        "run-client",
        "--server",
        &addr,
        "--ticks",
        "60",
        "--dt-ms",
        "5",
        "--record",
        rec.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    let _ = server.kill();
    let _ = server.wait();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(value(&text, "ticks"), "60");
    assert_eq!(value(&text, "session_lost"), "false");
    assert_eq!(value(&text, "recorded_episode"), "0");
    assert_eq!(parse_trace(&fs::read_to_string(&trace).unwrap()).unwrap().len(), 60);
}

#[test]
fn bridge_demo_runs() {
    let o = run(&["bridge-demo", "--steps", "300", "--update-every", "50", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(value(&text, "transitions_received"), "300");
    assert_eq!(value(&text, "stream_intact"), "true");
    assert_eq!(value(&text, "torn_free"), "true");
}
