use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};
use teleop_core::arm_ik::{IkConfig, IkRequest};
use teleop_core::{fixtures, load_model, ArmIk, HandRetargeter, HandSession, JointVector, KinematicModel, RedundancyWeights, RetargetConfig};
use teleop_io::client::{Client, ClientOptions};
use teleop_io::episode::read_episode;
use teleop_io::latency;
use teleop_io::pipeline::{replay_episode, run_teleop, TeleopOptions};
use teleop_io::server::{Mode, Server, ServerConfig, DEFAULT_PORT};
use teleop_io::stream::{StreamReader, WirePose};
use teleop_io::ws::{LiveInput, WsConfig, WsServer, DEFAULT_WS_PORT};
use teleop_io::SessionConfig;

const USAGE: u8 = 2;
const RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "teleop", version, about = "Arm and hand teleoperation: robot server, retargeting, IK, sessions and replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulated robot server and its WebSocket bridge.
    Serve(ServeArgs),
    /// Retarget every frame of a tracking stream to hand joint angles.
    Retarget(RetargetArgs),
    /// Resolve arm IK for a file of end-effector targets.
    Ik(IkArgs),
    /// Drive a robot server from tracking input.
    Teleop(TeleopArgs),
    /// Send a recorded episode's actions to a robot server.
    Replay(ReplayArgs),
    /// Measure command round trips against a robot server.
    BenchLatency(BenchArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value_t = DEFAULT_WS_PORT)]
    ws_port: u16,
    /// 19-DOF arm+hand model; the built-in fixture when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Advance the control loop only on commander heartbeats.
    #[arg(long)]
    deterministic: bool,
    /// Stop after this many seconds instead of running until killed.
    #[arg(long)]
    duration_s: Option<f64>,
}

#[derive(Args)]
struct RetargetArgs {
    /// 12-DOF hand model; the built-in fixture when omitted.
    #[arg(long)]
    hand_model: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IkArgs {
    /// 7-DOF arm model; the built-in fixture when omitted.
    #[arg(long)]
    arm_model: Option<PathBuf>,
    /// One target per line: {"p":[x,y,z],"q":[w,x,y,z]}.
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "ee")]
    ee_frame: String,
}

#[derive(Args)]
struct TeleopArgs {
    #[arg(long)]
    config: PathBuf,
    /// Tracking stream file.
    #[arg(long, conflicts_with = "live", required_unless_present = "live")]
    input: Option<PathBuf>,
    /// WebSocket bridge to take tracking from.
    #[arg(long, num_args = 0..=1, default_missing_value = "ws://127.0.0.1:47854/ws")]
    live: Option<String>,
    /// Episode directory to record into.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long, default_value_t = SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)))]
    addr: SocketAddr,
    #[arg(long, default_value = "episode-0")]
    episode_id: String,
    /// Feed file input at its recorded rate instead of as fast as possible.
    #[arg(long)]
    pace: bool,
    #[arg(long)]
    no_arm: bool,
    #[arg(long)]
    no_hand: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    episode: PathBuf,
    #[arg(long)]
    to: SocketAddr,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)))]
    addr: SocketAddr,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
}

fn read_model(path: &Option<PathBuf>, builtin: fn() -> KinematicModel) -> Result<KinematicModel> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("{}", p.display()))?;
            load_model(&text).with_context(|| format!("{}", p.display()))
        }
        None => Ok(builtin()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("{}", path.display()))?))
}

fn serve(args: ServeArgs) -> Result<Value> {
    let model = read_model(&args.model, fixtures::arm7_hand12)?;
    let mode = if args.deterministic { Mode::Deterministic } else { Mode::Realtime };
    let server = Server::start(ServerConfig::new(model.clone(), mode).with_port(args.port))?;
    let bridge = WsServer::start(WsConfig::new(model, Some(server.local_addr())).with_port(args.ws_port))?;
    let ready = json!({
        "event": "ready",
        "port": server.local_addr().port(),
        "ws_port": bridge.local_addr().port(),
        "mode": if args.deterministic { "deterministic" } else { "realtime" },
    });
    println!("{ready}");
    std::io::stdout().flush()?;
    let start = Instant::now();
    loop {
        match args.duration_s {
            Some(d) if start.elapsed().as_secs_f64() >= d => break,
            _ => std::thread::sleep(Duration::from_millis(50)),
        }
    }
    let ticks = server.ticks();
    bridge.shutdown();
    server.shutdown();
    Ok(json!({ "event": "stopped", "ticks": ticks }))
}

fn retarget(args: RetargetArgs) -> Result<Value> {
    let hand = read_model(&args.hand_model, fixtures::hand12_generic)?;
    let retargeter = HandRetargeter::new(hand.clone(), RetargetConfig::default())?;
    let mut session = HandSession::new(retargeter, hand.neutral())?;
    let mut out = create(&args.out)?;
    let (mut frames, mut failed, mut iterations) = (0usize, 0usize, 0usize);
    for item in StreamReader::open(&args.input).with_context(|| format!("{}", args.input.display()))? {
        let tracked = item?;
        frames += 1;
        let line = match session.step(&tracked.frame) {
            Ok(s) => {
                iterations += s.raw.iterations;
                json!({
                    "t": tracked.frame.t,
                    "q": s.smoothed.to_vec(),
                    "raw": s.raw.q.to_vec(),
                    "iterations": s.raw.iterations,
                    "converged": s.raw.converged,
                })
            }
            Err(e) => {
                failed += 1;
                json!({ "t": tracked.frame.t, "error": e.to_string() })
            }
        };
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(json!({
        "frames": frames,
        "failed": failed,
        "mean_iterations": if frames > failed { iterations as f64 / (frames - failed) as f64 } else { 0.0 },
        "out": args.out,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IkTarget {
    p: [f64; 3],
    q: [f64; 4],
    #[serde(default)]
    q_prev: Option<Vec<f64>>,
}

fn ik(args: IkArgs) -> Result<Value> {
    let arm = read_model(&args.arm_model, fixtures::arm7_generic)?;
    let weights = RedundancyWeights::default_for(&arm);
    let neutral = arm.neutral();
    let solver = ArmIk::new(
        arm,
        IkConfig {
            ee_frame: args.ee_frame.clone(),
            ..IkConfig::default()
        },
    )?;
    let input = BufReader::new(File::open(&args.targets).with_context(|| format!("{}", args.targets.display()))?);
    let mut out = create(&args.out)?;
    let mut q_prev = neutral.clone();
    let (mut solved, mut unreachable, mut count) = (0usize, 0usize, 0usize);
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: IkTarget = serde_json::from_str(&line).map_err(|e| anyhow!("line {}: {e}", i + 1))?;
        let target = WirePose { p: t.p, q: t.q }
            .to_pose()
            .map_err(|e| anyhow!("line {}: target{e}", i + 1))?;
        let prev = t.q_prev.map(|v| JointVector::from_slice(&v)).unwrap_or_else(|| q_prev.clone());
        let req = IkRequest {
            target,
            q_prev: prev,
            q_neutral: neutral.clone(),
        };
        count += 1;
        let record = match solver.resolve_with_stats(&req, &weights) {
            Ok((sol, stats)) => {
                solved += 1;
                q_prev = sol.q.clone();
                json!({
                    "q": sol.q.to_vec(),
                    "objective": sol.objective,
                    "position_err": sol.position_err,
                    "orientation_err": sol.orientation_err,
                    "evaluations": stats.evaluations,
                })
            }
            Err(e) => {
                unreachable += 1;
                json!({ "error": e.to_string() })
            }
        };
        writeln!(out, "{record}")?;
    }
    out.flush()?;
    Ok(json!({ "targets": count, "solved": solved, "failed": unreachable, "out": args.out }))
}

fn teleop(args: TeleopArgs) -> Result<Value> {
    let session = SessionConfig::load(&args.config)?;
    let client = Client::connect_with(args.addr, ClientOptions::lockstep())?;
    let opts = TeleopOptions {
        arm: !args.no_arm,
        hand: !args.no_hand,
        record: args.record.clone(),
        episode_id: args.episode_id.clone(),
        ..TeleopOptions::default()
    };
    let report = match (&args.input, &args.live) {
        (Some(path), _) => {
            let reader = StreamReader::open(path).with_context(|| format!("{}", path.display()))?;
            if args.pace {
                let start = Instant::now();
                let mut t0 = None;
                let paced = reader.inspect(|item| {
                    if let Ok(f) = item {
                        let t0 = *t0.get_or_insert(f.frame.t);
                        let due = Duration::from_secs_f64((f.frame.t - t0).max(0.0));
                        if let Some(wait) = due.checked_sub(start.elapsed()) {
                            std::thread::sleep(wait);
                        }
                    }
                });
                run_teleop(&session, paced, &client, &opts)?
            } else {
                run_teleop(&session, reader, &client, &opts)?
            }
        }
        (None, Some(url)) => {
            let live = LiveInput::connect(url).with_context(|| url.clone())?;
            run_teleop(&session, live, &client, &opts)?
        }
        (None, None) => bail!("one of --input or --live is required"),
    };
    client.close();
    Ok(serde_json::to_value(&report)?)
}

fn replay(args: ReplayArgs) -> Result<Value> {
    let episode = read_episode(&args.episode)?;
    let client = Client::connect_with(args.to, ClientOptions::lockstep())?;
    let report = replay_episode(&episode, &client, Duration::from_secs(10))?;
    client.close();
    let mut v = serde_json::to_value(&report)?;
    v["episode_id"] = json!(episode.meta.episode_id);
    Ok(v)
}

fn bench_latency(args: BenchArgs) -> Result<Value> {
    if args.n == 0 {
        bail!("--n must be positive");
    }
    Ok(serde_json::to_value(latency::measure(args.addr, args.n)?)?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Serve(a) => serve(a),
        Command::Retarget(a) => retarget(a),
        Command::Ik(a) => ik(a),
        Command::Teleop(a) => teleop(a),
        Command::Replay(a) => replay(a),
        Command::BenchLatency(a) => bench_latency(a),
    };
    match result {
        Ok(summary) => {
            let mut summary = summary;
            if let Value::Object(m) = &mut summary {
                m.insert("ok".into(), Value::Bool(true));
            }
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("{}", json!({ "ok": false, "error": format!("{e:#}") }));
            ExitCode::from(RUNTIME)
        }
    }
}
