//! Command-line front end. `run` returns the process exit code.

use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};
use fog_core::codec::Origin;
use fog_core::manifest::{parse_manifest, validate, Catalog};
use fog_core::plan::plan_deployment;
use fog_core::timing::{render_csv, render_table};
use fog_core::topic::TopicName;
use serde_json::json;

use crate::bench::{calibrate_items, run_benchmark, Scenario, WorkloadSpec};
use crate::net::AcceptRules;
use crate::node::{Node, NodeConfig, ENV_LISTEN_PORT, ENV_TRACE};
use crate::provider::{LocalProvider, MockRemoteProvider, Provider, ENV_GPU};
use crate::provisioner::{read_secret, DeployError, DeployOptions, Progress, Provisioner, ENV_IMAGE};
use crate::proxy::{read_status, ChannelEnd, ProxyConfig, ProxyEndpoint, TopicPolicy};
use crate::registry::{snapshot_topics, RegistryConfig, RegistryServer};
use crate::signal::Signal;
use crate::state::{DeploymentRecord, DeploymentStatus, StateStore};
use crate::workloads::{self, workers_from_env};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_DEPLOY_FAILED: i32 = 3;
pub const EXIT_UNKNOWN_DEPLOYMENT: i32 = 4;

/// Overrides where local instance sandboxes are created.
pub const ENV_SANDBOX_DIR: &str = "FOG_SANDBOX_DIR";

#[derive(Debug, Parser)]
#[command(name = "fog", version, about = "Launch robot nodes across edge and cloud machines")]
pub struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    Local,
    MockRemote,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate, plan and deploy a manifest.
    Launch {
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "local")]
        provider: ProviderKind,
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        json: bool,
        /// Deployment id; random when absent.
        #[arg(long)]
        id: Option<String>,
    },
    /// Show groups, instances, processes and bridged topics.
    Status {
        id: String,
        #[arg(long)]
        json: bool,
    },
    /// List the registry tables on both sides.
    Topics {
        id: String,
        #[arg(long)]
        json: bool,
    },
    /// Print messages arriving on a topic at the edge.
    Echo {
        id: String,
        topic: String,
        /// Stop after this many messages.
        #[arg(long)]
        count: Option<u64>,
        /// Stop after this many seconds.
        #[arg(long)]
        timeout: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Stop everything a deployment started.
    Teardown {
        id: String,
        #[arg(long)]
        json: bool,
    },
    /// Time the compute workload on the edge against the cloud.
    Bench {
        #[arg(value_enum)]
        scenario: Scenario,
        /// Request frame size in bytes.
        #[arg(long, default_value_t = workloads::DEFAULT_FRAME_SIZE)]
        size: usize,
        #[arg(long, default_value_t = 10.0)]
        rate: f64,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// Kernel items per request; by default about 2 s on one worker.
        #[arg(long)]
        items: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Run a topic registry.
    #[command(hide = true)]
    Registry {
        #[arg(long)]
        bind: SocketAddr,
    },
    /// Run one end of a proxy pair or monitor channel.
    #[command(hide = true)]
    Proxy(ProxyArgs),
    /// Run a built-in node.
    #[command(hide = true)]
    Node {
        #[command(subcommand)]
        kind: NodeKind,
    },
    /// Run a container image stand-in.
    #[command(hide = true)]
    Container {
        #[arg(long)]
        image: String,
    },
}

#[derive(Debug, clap::Args)]
pub struct ProxyArgs {
    #[arg(long)]
    pub side: String,
    #[arg(long)]
    pub registry: Option<String>,
    #[arg(long, conflicts_with = "connect")]
    pub listen: Option<SocketAddr>,
    #[arg(long)]
    pub connect: Option<String>,
    #[arg(long)]
    pub secret_file: PathBuf,
    /// Comma-separated topics to bridge instead of discovering them.
    #[arg(long)]
    pub topics: Option<String>,
    #[arg(long)]
    pub no_bridge: bool,
    #[arg(long)]
    pub no_monitor: bool,
    #[arg(long)]
    pub trace: bool,
    #[arg(long)]
    pub status_file: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum NodeKind {
    Source(workloads::SourceArgs),
    Compute(workloads::ComputeArgs),
    Sink(workloads::SinkArgs),
    Talker(workloads::TalkerArgs),
    Listener(workloads::ListenerArgs),
    Spray(workloads::SprayArgs),
    Relay(workloads::RelayArgs),
}

pub fn run_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let out = &mut io::stdout().lock();
    match cli.command {
        Command::Launch {
            manifest,
            provider,
            trace,
            json,
            id,
        } => cmd_launch(&manifest, provider, trace, json, id, out),
        Command::Status { id, json } => cmd_status(&id, json, out),
        Command::Topics { id, json } => cmd_topics(&id, json, out),
        Command::Echo {
            id,
            topic,
            count,
            timeout,
            json,
        } => cmd_echo(&id, &topic, count, timeout, json, out),
        Command::Teardown { id, json } => cmd_teardown(&id, json, out),
        Command::Bench {
            scenario,
            size,
            rate,
            trials,
            items,
            json,
        } => cmd_bench(scenario, size, rate, trials, items, json, out),
        Command::Registry { bind } => cmd_registry(bind),
        Command::Proxy(a) => cmd_proxy(a),
        Command::Node { kind } => cmd_node(kind),
        Command::Container { image } => cmd_container(&image),
    }
}

fn fail(msg: impl std::fmt::Display) -> i32 {
    eprintln!("fog: {msg}");
    EXIT_ERROR
}

fn sandbox_root() -> PathBuf {
    std::env::var_os(ENV_SANDBOX_DIR)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir)
}

fn fog_exe() -> PathBuf {
    std::env::current_exe().unwrap_or_else(|_| PathBuf::from("fog"))
}

fn open_store() -> io::Result<StateStore> {
    StateStore::open(StateStore::default_dir())
}

struct Providers {
    cloud: Box<dyn Provider>,
    edge: LocalProvider,
}

fn providers(kind: &str, root: &Path, store: &StateStore) -> Providers {
    let cloud: Box<dyn Provider> = match kind {
        "mock-remote" => Box::new(MockRemoteProvider::persistent(store.dir().join("mock-remote.json"))),
        _ => Box::new(LocalProvider::new(root.to_path_buf(), fog_exe())),
    };
    Providers {
        cloud,
        edge: LocalProvider::new(root.join("fog-edge"), fog_exe()),
    }
}

fn emit(out: &mut impl Write, json: bool, obj: serde_json::Value, text: impl FnOnce() -> String) {
    let _ = if json {
        writeln!(out, "{obj}")
    } else {
        writeln!(out, "{}", text())
    };
    let _ = out.flush();
}

fn cmd_launch(
    path: &Path,
    provider: ProviderKind,
    trace: bool,
    json: bool,
    id: Option<String>,
    out: &mut impl Write,
) -> i32 {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("fog: cannot read {}: {e}", path.display());
            return EXIT_INVALID;
        }
    };
    let manifest = match parse_manifest(&text) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("fog: {}: {e}", path.display());
            return EXIT_INVALID;
        }
    };
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
    let catalog = Catalog::builtin();
    let diags = validate(&manifest, &catalog, |s| std::fs::File::open(dir.join(s)).is_ok());
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("fog: {}: {d}", path.display());
        }
        return EXIT_INVALID;
    }
    let plan = match plan_deployment(&manifest, &catalog) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("fog: {e}");
            return EXIT_INVALID;
        }
    };
    let store = match open_store() {
        Ok(s) => s,
        Err(e) => return fail(format!("state directory: {e}")),
    };
    let root = sandbox_root();
    let kind = match provider {
        ProviderKind::Local => "local",
        ProviderKind::MockRemote => "mock-remote",
    };
    let p = providers(kind, &root, &store);
    let prov = Provisioner::new(p.cloud.as_ref(), &p.edge, Some(&store));
    let opts = DeployOptions {
        id,
        trace,
        manifest_dir: std::fs::canonicalize(&dir).unwrap_or(dir),
        manifest_path: std::fs::canonicalize(path).ok(),
        sandbox_root: Some(root),
        ..DeployOptions::default()
    };
    let lines = std::sync::Mutex::new(io::stdout());
    let progress = |p: &Progress| {
        let mut o = lines.lock().unwrap();
        let (obj, line) = match p {
            Progress::EdgeLaunch { ok } => (
                json!({"event": "edge-launch", "ok": ok}),
                format!("edge launch {}", if *ok { "ok" } else { "fail" }),
            ),
            Progress::Step { group, index, name, ok } => (
                json!({"event": "step", "group": group, "step": index, "name": name, "ok": ok}),
                format!("[{index}/5] {group} {name} {}", if *ok { "ok" } else { "fail" }),
            ),
        };
        let _ = if json { writeln!(o, "{obj}") } else { writeln!(o, "{line}") };
        let _ = o.flush();
    };
    match prov.deploy(&plan, &opts, &progress) {
        Ok(rec) => {
            emit(out, json, json!({"event": "deployed", "id": rec.id, "status": rec.status.as_str()}), || {
                format!("deployment {} {}", rec.id, rec.status)
            });
            EXIT_OK
        }
        Err(DeployError::StepFailed(f, rec)) => {
            emit(
                out,
                json,
                json!({"event": "failed", "id": rec.id, "status": rec.status.as_str(), "group": f.group,
                       "step": f.step, "name": f.name, "cause": f.cause}),
                || format!("deployment {} {}: [{}/5] {} {}: {}", rec.id, rec.status, f.step, f.group, f.name, f.cause),
            );
            EXIT_DEPLOY_FAILED
        }
        Err(e @ DeployError::AlreadyDeployed(_)) => {
            eprintln!("fog: {e}");
            EXIT_DEPLOY_FAILED
        }
        Err(e) => fail(e),
    }
}

/// Loads a record that is not torn down, or reports an unknown deployment.
fn live_record(store: &StateStore, id: &str) -> Result<DeploymentRecord, i32> {
    match store.load(id) {
        Ok(Some(r)) if r.status != DeploymentStatus::TornDown => Ok(r),
        Ok(_) => {
            eprintln!("fog: unknown deployment {id}");
            Err(EXIT_UNKNOWN_DEPLOYMENT)
        }
        Err(e) => Err(fail(e)),
    }
}

fn cmd_status(id: &str, json: bool, out: &mut impl Write) -> i32 {
    let store = match open_store() {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let rec = match live_record(&store, id) {
        Ok(r) => r,
        Err(code) => return code,
    };
    let p = providers(&rec.provider, &rec.sandbox_root, &store);
    emit(
        out,
        json,
        json!({"kind": "deployment", "id": rec.id, "status": rec.status.as_str(), "provider": rec.provider,
               "secret_id": rec.secret_id,
               "failure": rec.failure.as_ref().map(|f| json!({"group": f.group, "step": f.step, "name": f.name, "cause": f.cause}))}),
        || {
            let mut s = format!("deployment {} {} provider={}", rec.id, rec.status, rec.provider);
            if let Some(f) = &rec.failure {
                s.push_str(&format!("\nfailed at [{}/5] {} {}: {}", f.step, f.group, f.name, f.cause));
            }
            s
        },
    );
    let edge_inst = rec.edge.instance.clone();
    emit(
        out,
        json,
        json!({"kind": "edge", "registry": rec.edge.registry, "nodes": rec.edge.nodes}),
        || format!("edge registry={} nodes=[{}]", rec.edge.registry, rec.edge.nodes.join(", ")),
    );
    for proc in &rec.edge.processes {
        let alive = edge_inst.as_ref().is_some_and(|i| p.edge.process_alive(i, proc.pid));
        emit(
            out,
            json,
            json!({"kind": "process", "instance": "edge", "label": proc.label, "pid": proc.pid, "alive": alive}),
            || format!("  {} pid={} {}", proc.label, proc.pid, if alive { "alive" } else { "dead" }),
        );
    }
    for g in &rec.groups {
        let inst = g.instance.as_ref().map(|i| i.id());
        emit(
            out,
            json,
            json!({"kind": "group", "group": g.name, "instance": inst, "instance_type": g.instance_type,
                   "host": g.host, "network": g.network.as_str(), "registry": g.registry, "channel": g.channel,
                   "nodes": g.nodes, "image": g.image}),
            || {
                format!(
                    "group {} instance={} type={} network={} channel={} nodes=[{}]",
                    g.name,
                    inst.as_deref().unwrap_or("-"),
                    g.instance_type,
                    g.network,
                    g.channel.as_deref().unwrap_or("-"),
                    g.nodes.join(", ")
                )
            },
        );
        for proc in &g.processes {
            let alive = g.instance.as_ref().is_some_and(|i| p.cloud.process_alive(i, proc.pid));
            emit(
                out,
                json,
                json!({"kind": "process", "instance": g.name, "label": proc.label, "pid": proc.pid, "alive": alive}),
                || format!("  {} pid={} {}", proc.label, proc.pid, if alive { "alive" } else { "dead" }),
            );
        }
        let status = g.status_file.as_deref().and_then(read_status);
        if let Some(st) = status {
            let connected = st["connected"].as_bool().unwrap_or(false);
            emit(
                out,
                json,
                json!({"kind": "channel", "group": g.name, "connected": connected,
                       "sessions": st["sessions"], "replays": st["replays"]}),
                || format!("  channel {}", if connected { "connected" } else { "down" }),
            );
            for b in st["bridge"].as_array().into_iter().flatten() {
                let topic = b["topic"].as_str().unwrap_or("");
                let dir = b["direction"].as_str().unwrap_or("");
                emit(
                    out,
                    json,
                    json!({"kind": "bridge", "group": g.name, "topic": topic, "direction": dir}),
                    || format!("  bridge {topic} {dir}"),
                );
            }
        }
    }
    EXIT_OK
}

fn cmd_topics(id: &str, json: bool, out: &mut impl Write) -> i32 {
    let store = match open_store() {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let rec = match live_record(&store, id) {
        Ok(r) => r,
        Err(code) => return code,
    };
    let mut sides = vec![("edge".to_string(), rec.edge.registry.clone())];
    for g in &rec.groups {
        if let Some(r) = &g.registry {
            sides.push((g.name.clone(), r.clone()));
        }
    }
    let mut code = EXIT_OK;
    for (side, addr) in sides {
        match snapshot_topics(&addr) {
            Ok(table) => {
                for (topic, r) in table.iter() {
                    let names = |m: &std::collections::BTreeMap<_, fog_core::table::Endpoint>| {
                        m.values().map(|e| e.node_name.clone()).collect::<Vec<_>>()
                    };
                    let (pubs, subs) = (names(&r.publishers), names(&r.subscribers));
                    emit(
                        out,
                        json,
                        json!({"side": side, "topic": topic.as_str(), "publishers": pubs, "subscribers": subs}),
                        || format!("{side} {} pubs=[{}] subs=[{}]", topic, pubs.join(", "), subs.join(", ")),
                    );
                }
            }
            Err(e) => {
                eprintln!("fog: {side} registry {addr}: {e}");
                code = EXIT_ERROR;
            }
        }
    }
    code
}

fn cmd_echo(id: &str, topic: &str, count: Option<u64>, timeout: Option<f64>, json: bool, out: &mut impl Write) -> i32 {
    let store = match open_store() {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let rec = match live_record(&store, id) {
        Ok(r) => r,
        Err(code) => return code,
    };
    if let Err(e) = TopicName::new(topic) {
        eprintln!("fog: {e}");
        return EXIT_INVALID;
    }
    let node = match Node::start(
        NodeConfig::new(&format!("echo-{}", std::process::id()), &rec.edge.registry).origin(Origin::Edge),
    ) {
        Ok(n) => n,
        Err(e) => return fail(e),
    };
    let sub = match node.subscribe(topic, 64) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let stop = Arc::new(Signal::default());
    workloads::stop_on_signals(stop.clone());
    let deadline = timeout.map(|t| Instant::now() + Duration::from_secs_f64(t));
    let mut got = 0u64;
    while !stop.is_stopped() && count.is_none_or(|c| got < c) && deadline.is_none_or(|d| Instant::now() < d) {
        let Some(env) = sub.recv_timeout(Duration::from_millis(100)) else { continue };
        got += 1;
        emit(
            out,
            json,
            json!({"topic": topic, "seq": env.seq, "size": env.payload.len(), "origin": env.origin.as_str(),
                   "trace": env.trace}),
            || {
                format!(
                    "seq={} size={} origin={} trace=[{}]",
                    env.seq,
                    env.payload.len(),
                    env.origin,
                    env.trace.join(", ")
                )
            },
        );
    }
    node.shutdown();
    EXIT_OK
}

fn cmd_teardown(id: &str, json: bool, out: &mut impl Write) -> i32 {
    let store = match open_store() {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let _lock = match store.lock(id) {
        Ok(l) => l,
        Err(e) => return fail(e),
    };
    let mut rec = match store.load(id) {
        Ok(Some(r)) => r,
        Ok(None) => {
            eprintln!("fog: unknown deployment {id}");
            return EXIT_UNKNOWN_DEPLOYMENT;
        }
        Err(e) => return fail(e),
    };
    let p = providers(&rec.provider, &rec.sandbox_root, &store);
    let prov = Provisioner::new(p.cloud.as_ref(), &p.edge, Some(&store));
    match prov.teardown(&mut rec) {
        Ok(()) => {
            emit(out, json, json!({"id": rec.id, "status": rec.status.as_str()}), || {
                format!("deployment {} {}", rec.id, rec.status)
            });
            EXIT_OK
        }
        Err(e) => fail(e),
    }
}

fn cmd_bench(
    scenario: Scenario,
    size: usize,
    rate: f64,
    trials: usize,
    items: Option<u64>,
    json: bool,
    out: &mut impl Write,
) -> i32 {
    let items = items.unwrap_or_else(|| calibrate_items(Duration::from_secs(2)));
    let spec = WorkloadSpec {
        frame_size: size,
        rate_hz: rate,
        items,
        trials,
    };
    let work = match tempfile::Builder::new().prefix("fog-bench-").tempdir_in(sandbox_root()) {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    let exe = fog_exe();
    let mut rows = Vec::new();
    let baseline = match run_benchmark(Scenario::EdgeOnly, &spec, &exe, work.path(), None) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let edge_s = baseline.mean_compute_s();
    rows.push(baseline);
    if scenario != Scenario::EdgeOnly {
        match run_benchmark(scenario, &spec, &exe, work.path(), Some(edge_s)) {
            Ok(r) => rows.push(r),
            Err(e) => return fail(e),
        }
    }
    if json {
        for r in &rows {
            let samples: Vec<_> = r
                .samples
                .iter()
                .map(|s| json!({"id": s.id, "e2e_s": s.e2e_s, "compute_s": s.compute_s, "network_s": s.network_s,
                                 "workers": s.workers, "result_hops": s.result_hops}))
                .collect();
            emit(
                out,
                true,
                json!({"scenario": r.row.scenario, "items": r.items, "edge_only_s": r.row.edge_only_s,
                       "cloud_compute_s": r.row.cloud_compute_s, "network_s": r.row.network_s,
                       "total_s": r.row.total_s, "speedup": r.row.speedup, "samples": samples}),
                String::new,
            );
        }
    } else {
        let table: Vec<_> = rows.iter().map(|r| r.row.clone()).collect();
        let _ = write!(out, "{}\n{}", render_table(&table), render_csv(&table));
    }
    EXIT_OK
}

fn wait_for_stop() -> Arc<Signal> {
    let stop = Arc::new(Signal::default());
    workloads::stop_on_signals(stop.clone());
    stop
}

fn cmd_registry(bind: SocketAddr) -> i32 {
    let mut server = match RegistryServer::spawn_with_rules(bind, RegistryConfig::default(), AcceptRules::from_env()) {
        Ok(s) => s,
        Err(e) => return fail(format!("registry on {bind}: {e}")),
    };
    let stop = wait_for_stop();
    while !stop.sleep(Duration::from_secs(3600)) {}
    server.shutdown();
    EXIT_OK
}

fn cmd_proxy(a: ProxyArgs) -> i32 {
    let Some(side) = Origin::parse(&a.side) else {
        eprintln!("fog: --side must be edge or cloud");
        return EXIT_INVALID;
    };
    let channel = match (a.listen, a.connect) {
        (Some(l), None) => ChannelEnd::Listen(l),
        (None, Some(c)) => ChannelEnd::Connect(c),
        _ => {
            eprintln!("fog: give exactly one of --listen or --connect");
            return EXIT_INVALID;
        }
    };
    let secret = match read_secret(&a.secret_file) {
        Ok(s) => s,
        Err(e) => return fail(format!("secret {}: {e}", a.secret_file.display())),
    };
    let mut cfg = ProxyConfig::new(side, a.registry, channel, secret);
    if let Some(t) = a.topics {
        let topics: Result<Vec<_>, _> = fog_core::manifest::parse_list(&t).iter().map(|s| TopicName::new(s)).collect();
        match topics {
            Ok(list) => cfg.policy = TopicPolicy::Explicit(list),
            Err(e) => {
                eprintln!("fog: {e}");
                return EXIT_INVALID;
            }
        }
    }
    cfg.bridging = !a.no_bridge;
    cfg.monitor = !a.no_monitor;
    cfg.trace = a.trace || std::env::var(ENV_TRACE).is_ok_and(|v| v == "1");
    cfg.status_file = a.status_file;
    cfg.accept_rules = AcceptRules::from_env();
    if let Some(p) = std::env::var(ENV_LISTEN_PORT).ok().and_then(|p| p.parse().ok()) {
        cfg.node_port = p;
    }
    let mut endpoint = match ProxyEndpoint::spawn(cfg) {
        Ok(e) => e,
        Err(e) => return fail(e),
    };
    let stop = wait_for_stop();
    while !stop.sleep(Duration::from_secs(3600)) {}
    endpoint.shutdown();
    EXIT_OK
}

fn cmd_node(kind: NodeKind) -> i32 {
    let name = match &kind {
        NodeKind::Source(_) => "source",
        NodeKind::Compute(_) => "compute",
        NodeKind::Sink(_) => "sink",
        NodeKind::Talker(_) => "talker",
        NodeKind::Listener(_) => "listener",
        NodeKind::Spray(_) => "spray",
        NodeKind::Relay(_) => "relay",
    };
    let node = match NodeConfig::from_env(name).and_then(Node::start) {
        Ok(n) => n,
        Err(e) => return fail(e),
    };
    let stop = wait_for_stop();
    let res = match &kind {
        NodeKind::Source(a) => workloads::run_source(&node, a, &stop),
        NodeKind::Compute(a) => workloads::run_compute(&node, a, &stop),
        NodeKind::Sink(a) => workloads::run_sink(&node, a, &stop, |s| {
            println!("seq={} latency_s={:.6} hops={}", s.seq, s.latency_s, s.hops);
        }),
        NodeKind::Talker(a) => workloads::run_talker(&node, a, &stop),
        NodeKind::Listener(a) => workloads::run_listener(&node, a, &stop, &mut io::stdout()),
        NodeKind::Spray(a) => workloads::run_spray(&node, a, &stop),
        NodeKind::Relay(a) => workloads::run_relay(&node, a, &stop),
    };
    node.shutdown();
    match res {
        Ok(_) => EXIT_OK,
        Err(e) => fail(e),
    }
}

fn cmd_container(image: &str) -> i32 {
    let gpu = std::env::var(ENV_GPU).is_ok_and(|v| v == "1");
    let env_image = std::env::var(ENV_IMAGE).unwrap_or_default();
    println!("container image={image} env_image={env_image} gpu={gpu} workers={}", workers_from_env());
    cmd_node(NodeKind::Compute(workloads::ComputeArgs {
        input: workloads::REQUEST_TOPIC.into(),
        output: workloads::RESULT_TOPIC.into(),
        workers: None,
        items: 0,
        seed: fog_core::kernel::DEFAULT_SEED,
    }))
}
