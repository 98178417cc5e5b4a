use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;

use mmoforge_core::ascend::stack::{Cluster, StackConfig, Transport};
use mmoforge_core::ascend::{bind_address, Role};
use mmoforge_core::config::{Config, RngStream, StreamName};
use mmoforge_core::engine::WorldState;
use mmoforge_core::neural::{load_checkpoint, save_checkpoint, Policy, PolicyParams, CHECKPOINT_VERSION};
use mmoforge_core::obsio::WIRE_VERSION;
use mmoforge_core::scripted::{scripted_actions, ScriptedPolicy, Variant};
use mmoforge_core::telemetry::{
    bench_sync, coverage, export_heatmap, value_overlay, BenchPlan, ColorScale, VisitationCounter,
};
use mmoforge_core::trainer::{episode_lifetime, RolloutEnv, StepMetrics};
use mmoforge_core::world::{generate_map, TileMap};

use crate::distributed::Workers;
use crate::{CmdResult, Command, Common, Failure};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf, Failure> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    Ok(dir)
}

/// Everything needed to run the same command again.
fn write_manifest(path: &Path, command: &str, cfg: &Config, extra: serde_json::Value) -> CmdResult {
    let manifest = json!({
        "command": command,
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
        "seed": cfg.seed,
        "config_hash": format!("{:016x}", cfg.hash()),
        "config": serde_json::from_str::<serde_json::Value>(&cfg.to_json()).map_err(runtime)?,
        "versions": {
            "mmoforge": env!("CARGO_PKG_VERSION"),
            "wire": WIRE_VERSION,
            "checkpoint": CHECKPOINT_VERSION,
        },
        "details": extra,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
    fs::write(path, text + "\n").map_err(io(path))
}

fn event_log(common: &Common) -> Result<Option<BufWriter<File>>, Failure> {
    match &common.log_events {
        None => Ok(None),
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io(dir))?;
            }
            Ok(Some(BufWriter::new(File::create(p).map_err(io(p))?)))
        }
    }
}

fn read_map(path: &Path, cfg: &Config) -> Result<TileMap, Failure> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Failure::MissingFile(format!("{}: {e}", path.display())),
        _ => Failure::Io(format!("{}: {e}", path.display())),
    })?;
    let map = TileMap::from_text(&text, cfg.forest_regen_ticks).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if map.width() != cfg.total_width() || map.height() != cfg.total_height() {
        return Err(Failure::Config(format!(
            "{} is {}x{} but the config needs {}x{}",
            path.display(),
            map.width(),
            map.height(),
            cfg.total_width(),
            cfg.total_height()
        )));
    }
    Ok(map)
}

fn load_params(path: &Path, cfg: &Config) -> Result<PolicyParams<f32>, Failure> {
    if !path.exists() {
        return Err(Failure::MissingFile(format!("{}: no such checkpoint", path.display())));
    }
    load_checkpoint(path, cfg).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn variant(name: &str) -> Result<Variant, Failure> {
    name.parse().map_err(|e: mmoforge_core::scripted::ScriptError| Failure::Config(e.to_string()))
}

pub fn run(cmd: Command, common: &Common) -> CmdResult {
    match cmd {
        Command::GenerateMap => generate(common),
        Command::Simulate { policy, ticks, agents, map } => simulate(common, &policy, ticks, agents, map.as_deref()),
        Command::Train { steps, agents, servers, clients, envs, distributed, checkpoint_every, resume } => train(
            common,
            TrainArgs { steps, agents, servers, clients, envs: envs.unwrap_or(servers), distributed, checkpoint_every, resume },
        ),
        Command::Evaluate { checkpoint, episodes, ticks, agents } => evaluate(common, checkpoint, episodes, ticks, agents),
        Command::Overlay { kind, checkpoint, policy, ticks, agents, population } => {
            overlay(common, &kind, checkpoint, &policy, ticks, agents, population)
        }
        Command::BenchSync { servers, clients, trials, batch } => bench(common, servers, clients, trials, batch),
        Command::Worker { role, bind } => worker(&role, bind),
    }
}

fn generate(common: &Common) -> CmdResult {
    let cfg = common.config(None)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("map.txt"));
    let map = generate_map(&cfg, &mut RngStream::new(cfg.seed, StreamName::MapGen)).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(&out, map.to_text()).map_err(io(&out))?;
    let mut manifest = out.clone().into_os_string();
    manifest.push(".run.json");
    write_manifest(Path::new(&manifest), "generate-map", &cfg, json!({ "out": out }))?;
    println!("map {}x{} written to {}", map.width(), map.height(), out.display());
    Ok(())
}

fn simulate(common: &Common, policy: &str, ticks: u64, agents: Option<usize>, map: Option<&Path>) -> CmdResult {
    let cfg = common.config(agents)?;
    let variant = variant(policy)?;
    let mut state = match map {
        Some(p) => WorldState::with_map(cfg.clone(), read_map(p, &cfg)?),
        None => WorldState::new(cfg.clone()).map_err(|e| Failure::Config(e.to_string()))?,
    };
    let dir = out_dir(common, "runs/simulate")?;
    write_manifest(&dir.join("run.json"), "simulate", &cfg, json!({ "policy": variant.to_string(), "ticks": ticks, "map": map }))?;
    let mut events = event_log(common)?;
    let hp = dir.join("hashes.txt");
    let mut hashes = BufWriter::new(File::create(&hp).map_err(io(&hp))?);
    let ap = dir.join("agents.csv");
    let mut rows = BufWriter::new(File::create(&ap).map_err(io(&ap))?);
    writeln!(rows, "{}", mmoforge_core::agents::AGENT_CSV_HEADER).map_err(io(&ap))?;

    let mut scripted = ScriptedPolicy::new(variant, &cfg, 0);
    let mut counter = VisitationCounter::for_state(&state);
    let (mut deaths, mut spawns) = (0usize, 0usize);
    for _ in 0..ticks {
        let actions = scripted_actions(&state, &mut scripted).map_err(runtime)?;
        let out = state.step(&actions);
        counter.record_visits(&state);
        for d in &out.events.deaths {
            println!("tick={} death agent={} cause={} lifetime={}", out.events.tick, d.agent, json!(d.cause).as_str().unwrap_or("?"), d.lifetime);
        }
        deaths += out.events.deaths.len();
        spawns += out.events.spawns.len();
        if let Some(w) = events.as_mut() {
            serde_json::to_writer(&mut *w, &out.events).map_err(runtime)?;
            writeln!(w).map_err(|e| Failure::Io(e.to_string()))?;
        }
        writeln!(hashes, "{} {}", state.tick, state.hash_hex()).map_err(io(&hp))?;
        for a in state.agents.values() {
            writeln!(rows, "{}", a.csv_row(state.tick)).map_err(io(&ap))?;
        }
    }
    hashes.flush().map_err(io(&hp))?;
    rows.flush().map_err(io(&ap))?;
    if let Some(mut w) = events {
        w.flush().map_err(|e| Failure::Io(e.to_string()))?;
    }
    let cov = coverage(&counter, &state.map, None);
    println!(
        "ticks={} spawns={spawns} deaths={deaths} living={} coverage={:.4} entropy={:.4} hash={}",
        state.tick,
        state.living(),
        cov.visited,
        cov.entropy,
        state.hash_hex()
    );
    Ok(())
}

struct TrainArgs {
    steps: u64,
    agents: Option<usize>,
    servers: usize,
    clients: usize,
    envs: usize,
    distributed: bool,
    checkpoint_every: u64,
    resume: Option<PathBuf>,
}

fn train(common: &Common, a: TrainArgs) -> CmdResult {
    let cfg = common.config(a.agents)?;
    if a.servers == 0 || a.clients == 0 || a.envs < a.servers {
        return Err(Failure::Config(format!("{} servers, {} clients per server, {} environments", a.servers, a.clients, a.envs)));
    }
    let dir = out_dir(common, "runs/train")?;
    write_manifest(
        &dir.join("run.json"),
        "train",
        &cfg,
        json!({ "steps": a.steps, "servers": a.servers, "clients": a.clients, "envs": a.envs,
                "distributed": a.distributed, "resume": a.resume }),
    )?;
    let params = match &a.resume {
        Some(p) => load_params(p, &cfg)?,
        None => PolicyParams::init(&cfg),
    };
    let mut stack = StackConfig::local(a.servers, a.clients).with_envs(a.envs);
    // keeps worker processes alive for the run; they are killed on drop
    let _workers = if a.distributed {
        let w = Workers::spawn(a.servers, a.clients).map_err(runtime)?;
        stack.transport = Transport::Tcp { servers: w.servers.clone(), clients: w.clients.clone() };
        Some(w)
    } else {
        None
    };
    let mut cluster = Cluster::with_params(&cfg, &stack, params).map_err(runtime)?;
    let mut events = event_log(common)?;
    let mp = dir.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&mp).map_err(io(&mp))?);
    writeln!(metrics, "{}", StepMetrics::CSV_HEADER).map_err(io(&mp))?;
    let ckpt = dir.join("checkpoint.mmfc");
    for step in 1..=a.steps {
        let report = cluster.run_epoch().map_err(runtime)?;
        writeln!(metrics, "{}", report.metrics.csv_row()).map_err(io(&mp))?;
        metrics.flush().map_err(io(&mp))?;
        if let Some(w) = events.as_mut() {
            let line = json!({ "step": step, "metrics": report.metrics.csv_row(), "contributing": report.contributing,
                               "failed": report.failed, "params_hash": report.params_hash });
            writeln!(w, "{line}").map_err(|e| Failure::Io(e.to_string()))?;
        }
        log::info!("step {step}: {}", report.metrics.csv_row());
        if a.checkpoint_every > 0 && step % a.checkpoint_every == 0 {
            let p = dir.join(format!("checkpoint-{step:06}.mmfc"));
            save_checkpoint(cluster.params(), &p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
        }
    }
    save_checkpoint(cluster.params(), &ckpt).map_err(|e| Failure::Io(format!("{}: {e}", ckpt.display())))?;
    for i in cluster.incidents() {
        eprintln!("incident: {i}");
    }
    println!("steps={} params={} checkpoint={}", a.steps, cluster.params().hash_hex(), ckpt.display());
    Ok(())
}

fn evaluate(common: &Common, checkpoint: Option<PathBuf>, episodes: u32, ticks: u64, agents: Option<usize>) -> CmdResult {
    let cfg = common.config(agents)?;
    let dir = out_dir(common, "runs/train")?;
    let path = checkpoint.unwrap_or_else(|| dir.join("checkpoint.mmfc"));
    let params = load_params(&path, &cfg)?;
    write_manifest(
        &dir.join("eval.run.json"),
        "evaluate",
        &cfg,
        json!({ "checkpoint": path, "episodes": episodes, "ticks": ticks }),
    )?;
    let mut policy = Policy::new(Arc::new(params));
    let ep = dir.join("eval.csv");
    let mut csv = BufWriter::new(File::create(&ep).map_err(io(&ep))?);
    writeln!(csv, "episode,mean_lifetime").map_err(io(&ep))?;
    let mut all = Vec::new();
    for e in 0..episodes {
        let l = episode_lifetime(&mut policy, &cfg, e, ticks).map_err(runtime)?;
        writeln!(csv, "{e},{l}").map_err(io(&ep))?;
        all.push(l);
    }
    csv.flush().map_err(io(&ep))?;
    let mean = if all.is_empty() { 0.0 } else { all.iter().sum::<f64>() / all.len() as f64 };
    println!("episodes={episodes} mean_lifetime={mean:.4}");
    Ok(())
}

fn overlay(
    common: &Common,
    kind: &str,
    checkpoint: Option<PathBuf>,
    policy: &str,
    ticks: u64,
    agents: Option<usize>,
    population: usize,
) -> CmdResult {
    let cfg = common.config(agents)?;
    if population >= cfg.n_populations {
        return Err(Failure::Config(format!("population {population} but only {} exist", cfg.n_populations)));
    }
    let dir = out_dir(common, "runs/overlay")?;
    let params = checkpoint.as_deref().map(|p| load_params(p, &cfg)).transpose()?;
    write_manifest(
        &dir.join("run.json"),
        "overlay",
        &cfg,
        json!({ "kind": kind, "checkpoint": checkpoint, "policy": policy, "ticks": ticks, "population": population }),
    )?;
    let heat = |e: mmoforge_core::telemetry::TelemetryError| match e {
        mmoforge_core::telemetry::TelemetryError::Io { .. } => Failure::Io(e.to_string()),
        other => runtime(other),
    };
    match kind {
        "visits" => {
            let (counter, state) = match params {
                Some(p) => neural_visits(&cfg, p, ticks)?,
                None => mmoforge_core::telemetry::scripted_visits(&cfg, variant(policy)?, ticks).map_err(runtime)?,
            };
            export_heatmap(&counter.to_grid(None), Some(&state.map), &dir.join("visits"), ColorScale::Log).map_err(heat)?;
            for p in 0..cfg.n_populations {
                export_heatmap(&counter.to_grid(Some(p)), Some(&state.map), &dir.join(format!("visits_pop{p}")), ColorScale::Log)
                    .map_err(heat)?;
            }
            let c = coverage(&counter, &state.map, None);
            println!("coverage={:.4} entropy={:.4}", c.visited, c.entropy);
        }
        _ => {
            let params = params.unwrap_or_else(|| PolicyParams::init(&cfg));
            let state = WorldState::new(cfg.clone()).map_err(|e| Failure::Config(e.to_string()))?;
            let grid = value_overlay(&mut Policy::new(Arc::new(params)), &state, population).map_err(heat)?;
            export_heatmap(&grid, Some(&state.map), &dir.join("value"), ColorScale::Linear).map_err(heat)?;
            println!("value overlay {}x{} written to {}", grid.width, grid.height, dir.display());
        }
    }
    Ok(())
}

fn neural_visits(cfg: &Config, params: PolicyParams<f32>, ticks: u64) -> Result<(VisitationCounter, WorldState), Failure> {
    let mut policy = Policy::new(Arc::new(params));
    let mut env = RolloutEnv::new(cfg, 0).map_err(runtime)?;
    let mut counter = VisitationCounter::for_state(&env.state);
    for _ in 0..ticks {
        env.tick_local(&mut policy).map_err(runtime)?;
        env.take_finished();
        counter.record_visits(&env.state);
    }
    Ok((counter, env.state))
}

fn bench(common: &Common, servers: Vec<usize>, clients: Vec<usize>, trials: usize, batch: usize) -> CmdResult {
    let cfg = common.config(None)?;
    if servers.contains(&0) || clients.contains(&0) {
        return Err(Failure::Config("server and client counts must be positive".into()));
    }
    let dir = out_dir(common, "runs/bench")?;
    write_manifest(&dir.join("run.json"), "bench-sync", &cfg, json!({ "servers": servers, "clients": clients, "trials": trials, "batch": batch }))?;
    let plan = BenchPlan { servers, clients, trials, batch_actions: batch, ..Default::default() };
    let report = bench_sync(&cfg, &plan).map_err(|e| match e {
        mmoforge_core::telemetry::TelemetryError::Bench(m) if m.contains("trials") => Failure::Config(m),
        other => runtime(other),
    })?;
    let p = dir.join("bench.csv");
    fs::write(&p, report.to_csv()).map_err(io(&p))?;
    print!("{}", report.summary());
    Ok(())
}

fn worker(role: &str, bind: Option<String>) -> CmdResult {
    let role = if role == "server" { Role::Server } else { Role::Client };
    let addr = bind.unwrap_or_else(|| bind_address("127.0.0.1:0"));
    let listener = std::net::TcpListener::bind(&addr).map_err(|e| Failure::Io(format!("bind {addr}: {e}")))?;
    // the parent reads this line to learn the port
    println!("listening {}", listener.local_addr().map_err(|e| Failure::Io(e.to_string()))?);
    std::io::stdout().flush().map_err(|e| Failure::Io(e.to_string()))?;
    mmoforge_core::ascend::stack::run_worker(role, &listener).map_err(runtime)
}
