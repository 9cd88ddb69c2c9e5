//! One line per acceptance criterion; exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fog::bench::{calibrate_items, run_benchmark, Scenario, WorkloadSpec};
use fog::faultlink::FaultLink;
use fog::node::{Node, NodeConfig};
use fog::provider::{tagged_processes, FaultyProvider, LocalProvider, Op, Provider};
use fog::provisioner::{DeployError, DeployOptions, Provisioner};
use fog::proxy::{ChannelEnd, ProxyConfig, ProxyEndpoint, TopicPolicy};
use fog::registry::{RegistryConfig, RegistryServer};
use fog::state::{DeploymentRecord, DeploymentStatus};
use fog::workloads::spray_plan;
use fog::workloads::parallel_kernel;
use fog_core::codec::{decode_frame, encode_data, Frame, FrameKind, MessageEnvelope, NodeId, Origin};
use fog_core::discovery::{discover_bridgeable, Direction};
use fog_core::kernel::DEFAULT_SEED;
use fog_core::manifest::{parse_manifest, Catalog};
use fog_core::plan::{plan_deployment, DeploymentPlan};
use fog_core::table::{Endpoint, RegistryTable, Role};
use fog_core::timing::make_timing_row;
use fog_core::topic::TopicName;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

/// The `fog` binary next to this test's build directory, built on demand.
fn fog_exe() -> PathBuf {
    static EXE: OnceLock<PathBuf> = OnceLock::new();
    EXE.get_or_init(|| {
        let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
        let exe = deps.parent().unwrap().join("fog");
        let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
        let status = Command::new(cargo)
            .args(["build", "-q", "-p", "fog", "--bin", "fog"])
            .status()
            .expect("run cargo build");
        assert!(status.success() && exe.is_file(), "could not build {}", exe.display());
        exe
    })
    .clone()
}

fn wait_for(mut f: impl FnMut() -> bool, timeout: Duration) -> bool {
    let end = Instant::now() + timeout;
    while !f() {
        if Instant::now() > end {
            return false;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    true
}

fn plan(text: &str) -> DeploymentPlan {
    plan_deployment(&parse_manifest(text).unwrap(), &Catalog::builtin()).unwrap()
}

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

// ---------------------------------------------------------------- arithmetic

fn arithmetic() -> Outcome {
    let rows = [
        ("Compressed", 7.3, 0.6, 0.6, 1.2),
        ("Uncompressed", 7.5, 0.6, 0.7, 1.3),
        ("Apartment", 157.6, 4.2, 0.4, 4.6),
        ("Cubicles", 35.8, 1.4, 0.3, 1.7),
        ("Home", 161.8, 6.2, 0.3, 6.5),
        ("TwistyCool", 167.9, 5.1, 0.4, 5.5),
    ];
    for (name, edge, compute, net, total) in rows {
        let r = make_timing_row(name, edge, compute, net).map_err(|e| e.to_string())?;
        check!(r.total_s == compute + net, "{name}: total {} != compute + network", r.total_s);
        check!((r.total_s - total).abs() < 1e-9, "{name}: total {} vs {total}", r.total_s);
        check!(r.speedup == edge / r.total_s, "{name}: speedup is not edge / total");
    }
    let apartment = make_timing_row("Apartment", 157.6, 4.2, 0.4).unwrap().speedup;
    let dexnet = make_timing_row("Compressed", 7.3, 0.6, 0.6).unwrap().speedup;
    check!(rel(apartment, 34.26) <= 0.005, "apartment {apartment:.4} vs 34.26");
    check!(rel(dexnet, 6.08) <= 0.005, "dex-net {dexnet:.4} vs 6.08");
    Ok(format!(
        "6 rows exact; apartment {apartment:.3}x ({:.2}% from 34.2x), dex-net {dexnet:.3}x ({:.2}% from 6.0x) [tol 0.5% of 34.26 / 6.08]",
        100.0 * rel(apartment, 34.2),
        100.0 * rel(dexnet, 6.0)
    ))
}

// ---------------------------------------------------------------- speedup

fn speedup() -> Outcome {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let items = calibrate_items(Duration::from_millis(2_200));
    let timed = |workers| {
        let t0 = Instant::now();
        let v = parallel_kernel(DEFAULT_SEED, items, workers);
        (v, t0.elapsed().as_secs_f64())
    };
    let ((v1, one), (v8, eight)) = (timed(1), timed(8));
    check!(v1 == v8, "kernel value depends on worker count");
    let spec = WorkloadSpec {
        items,
        trials: 3,
        ..WorkloadSpec::default()
    };
    let edge = run_benchmark(Scenario::EdgeOnly, &spec, &fog_exe(), &work.path().join("e"), None)
        .map_err(|e| e.to_string())?;
    let edge_e2e = edge.samples.iter().map(|s| s.e2e_s).sum::<f64>() / edge.samples.len() as f64;
    check!(edge.mean_compute_s() >= 2.0, "single-worker compute {:.2}s < 2 s", edge.mean_compute_s());
    let direct = run_benchmark(Scenario::Direct, &spec, &fog_exe(), &work.path().join("d"), Some(edge_e2e))
        .map_err(|e| e.to_string())?;
    let workers = direct.samples[0].workers;
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let s = direct.row.speedup;
    let detail = format!(
        "speedup {s:.2}x (edge {edge_e2e:.2}s, cloud {:.2}s compute + {:.4}s network, {workers} workers on {cpus} cpu; \
         kernel 1 worker {one:.2}s vs 8 workers {eight:.2}s) [need >= 4.0]",
        direct.row.cloud_compute_s, direct.row.network_s
    );
    check!(eight < one, "8 workers not faster than 1; {detail}");
    check!(workers == 8, "cloud instance ran {workers} workers; {detail}");
    check!(s >= 4.0, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- discovery

fn discovery() -> Outcome {
    type Regs = Vec<(String, bool, Role)>;
    fn brute(regs: &Regs) -> BTreeSet<(String, Direction)> {
        let has = |t: &str, c: bool, r: Role| regs.iter().any(|(x, y, z)| x == t && *y == c && *z == r);
        let mut out = BTreeSet::new();
        for (t, _, _) in regs {
            if has(t, false, Role::Publisher) && has(t, true, Role::Subscriber) {
                out.insert((t.clone(), Direction::EdgeToCloud));
            }
            if has(t, true, Role::Publisher) && has(t, false, Role::Subscriber) {
                out.insert((t.clone(), Direction::CloudToEdge));
            }
        }
        out
    }
    fn run(regs: &Regs) -> BTreeSet<(String, Direction)> {
        let mut edge = RegistryTable::new();
        let mut cloud = RegistryTable::new();
        for (i, (t, c, r)) in regs.iter().enumerate() {
            let ep = Endpoint {
                node_name: format!("n{i}"),
                address: format!("127.0.0.1:{}", 2000 + i),
                node_id: NodeId([i as u8; 16]),
            };
            if *c { &mut cloud } else { &mut edge }.insert(&TopicName::new(t).unwrap(), *r, ep);
        }
        discover_bridgeable(&edge, &cloud)
            .iter()
            .map(|e| (e.topic.as_str().to_string(), e.direction))
            .collect()
    }
    let t0 = Instant::now();
    let slots = [(false, Role::Publisher), (false, Role::Subscriber), (true, Role::Publisher), (true, Role::Subscriber)];
    for mask in 0..16 {
        let regs: Regs = (0..4)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| ("/y".to_string(), slots[i].0, slots[i].1))
            .collect();
        check!(run(&regs) == brute(&regs), "placement {mask:04b} differs");
    }
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    for n in 0..1000 {
        let topics = rng.gen_range(1..10);
        let regs: Regs = (0..rng.gen_range(0..30))
            .map(|_| {
                let role = if rng.gen() { Role::Publisher } else { Role::Subscriber };
                (format!("/t{}", rng.gen_range(0..topics)), rng.gen(), role)
            })
            .collect();
        check!(run(&regs) == brute(&regs), "random table {n} differs: {regs:?}");
    }
    let dt = t0.elapsed();
    check!(dt < Duration::from_secs(5), "took {dt:?}");
    Ok(format!("16 placements + 1000 random tables equal in {:.2}s [exact, < 5 s]", dt.as_secs_f64()))
}

// ---------------------------------------------------------------- deployments

struct Site {
    dir: tempfile::TempDir,
    edge: LocalProvider,
}

impl Site {
    fn new() -> Site {
        let dir = tempfile::tempdir().unwrap();
        Site {
            edge: LocalProvider::new(dir.path().join("edge"), fog_exe()),
            dir,
        }
    }

    fn cloud(&self) -> LocalProvider {
        LocalProvider::new(self.dir.path().join("cloud"), fog_exe())
    }

    fn opts(&self, id: &str) -> DeployOptions {
        DeployOptions {
            id: Some(id.into()),
            trace: true,
            manifest_dir: self.dir.path().to_path_buf(),
            ..DeployOptions::default()
        }
    }
}

fn one_group(node: &str, exec: &str, args: &str, network: &str) -> String {
    format!(
        "[node {node}]\npackage = demo\nexec = {exec}\nargs = {args}\nplacement = cloud:g\n\n\
         [cloud g]\ninstance_type = c4.8xlarge\nsetup_script = setup.sh\nnetwork = {network}\n"
    )
}

fn leftovers(rec: &DeploymentRecord, roots: &[&Path]) -> Vec<String> {
    let mut out = Vec::new();
    if !tagged_processes(&rec.id).is_empty() {
        out.push(format!("processes {:?}", tagged_processes(&rec.id)));
    }
    for p in rec.edge.ports.iter().chain(rec.groups.iter().flat_map(|g| &g.ports)) {
        if fog::net::is_listening(&format!("127.0.0.1:{p}")) {
            out.push(format!("port {p}"));
        }
    }
    for r in roots {
        if r.join(format!("fog-{}", rec.id)).exists() {
            out.push(format!("sandbox under {}", r.display()));
        }
    }
    out
}

fn transparency() -> Outcome {
    let t0 = Instant::now();
    let site = Site::new();
    std::fs::write(site.dir.path().join("setup.sh"), "true\n").unwrap();
    let cloud = site.cloud();
    let prov = Provisioner::new(&cloud, &site.edge, None);
    let (seed, messages, topics) = (4242u64, 1000usize, 20usize);
    let manifest = one_group(
        "spray",
        "spray",
        &format!("--seed, {seed}, --messages, {messages}, --topics, {topics}, --rate, 250"),
        "proxy",
    );
    let mut rec = prov.deploy(&plan(&manifest), &site.opts("transp"), &|_| {}).map_err(|e| e.to_string())?;
    let result = (|| {
        let want = spray_plan(seed, messages, topics, "/spray");
        let mut per_topic: BTreeMap<String, Vec<Vec<u8>>> = BTreeMap::new();
        for m in &want {
            per_topic.entry(m.topic.clone()).or_default().push(m.payload.clone());
        }
        let node = Node::start(NodeConfig::new("observer", &rec.edge.registry)).map_err(|e| e.to_string())?;
        let subs: Vec<_> = (0..topics)
            .map(|i| node.subscribe(&fog::workloads::spray_topic("/spray", i), 4096).unwrap())
            .collect();
        let mut got: BTreeMap<String, Vec<MessageEnvelope>> = BTreeMap::new();
        let mut n = 0;
        let deadline = Instant::now() + Duration::from_secs(40);
        while n < messages && Instant::now() < deadline {
            let mut idle = true;
            for s in &subs {
                while let Some(e) = s.try_recv() {
                    got.entry(e.topic.as_str().to_string()).or_default().push(e);
                    n += 1;
                    idle = false;
                }
            }
            if idle {
                std::thread::sleep(Duration::from_millis(5));
            }
        }
        std::thread::sleep(Duration::from_millis(500));
        for s in &subs {
            while let Some(e) = s.try_recv() {
                got.entry(e.topic.as_str().to_string()).or_default().push(e);
                n += 1;
            }
        }
        node.shutdown();
        check!(n == messages, "received {n} of {messages}");
        for (topic, payloads) in &per_topic {
            let envs = got.get(topic).map(Vec::as_slice).unwrap_or(&[]);
            check!(envs.len() == payloads.len(), "{topic}: {} of {}", envs.len(), payloads.len());
            for (e, p) in envs.iter().zip(payloads) {
                check!(&e.payload == p, "{topic}: payload differs at seq {}", e.seq);
                check!(e.trace == ["spray", "proxy:cloud", "proxy:edge"], "{topic}: trace {:?}", e.trace);
            }
            check!(envs.windows(2).all(|w| w[0].seq < w[1].seq), "{topic}: out of order");
        }
        Ok(format!("{n} messages over {} topics identical, ordered, single crossing", per_topic.len()))
    })();
    let _ = prov.teardown(&mut rec);
    let detail = result?;
    let dt = t0.elapsed();
    check!(dt < Duration::from_secs(60), "took {dt:?}");
    Ok(format!("{detail} in {:.1}s [< 60 s]", dt.as_secs_f64()))
}

fn hop_counts() -> Outcome {
    let mut parts = Vec::new();
    for (mode, want) in [("direct", 1usize), ("proxy", 3)] {
        let site = Site::new();
        std::fs::write(site.dir.path().join("setup.sh"), "true\n").unwrap();
        let cloud = site.cloud();
        let prov = Provisioner::new(&cloud, &site.edge, None);
        let manifest = one_group("talker", "talker", "--rate, 400", mode);
        let mut rec = prov
            .deploy(&plan(&manifest), &site.opts(&format!("hops{mode}")), &|_| {})
            .map_err(|e| e.to_string())?;
        let res = (|| {
            let node = Node::start(NodeConfig::new("observer", &rec.edge.registry).trace(true))
                .map_err(|e| e.to_string())?;
            let sub = node.subscribe("/chatter", 4096).unwrap();
            let mut lens = BTreeMap::new();
            let mut n = 0;
            let deadline = Instant::now() + Duration::from_secs(20);
            while n < 500 && Instant::now() < deadline {
                if let Some(e) = sub.recv_timeout(Duration::from_millis(200)) {
                    *lens.entry(e.trace.len()).or_insert(0) += 1;
                    n += 1;
                }
            }
            node.shutdown();
            check!(n >= 500, "{mode}: only {n} messages");
            check!(lens.len() == 1 && lens.contains_key(&want), "{mode}: trace lengths {lens:?}");
            Ok(format!("{mode} {n}/{n} len {want}"))
        })();
        let _ = prov.teardown(&mut rec);
        parts.push(res?);
    }
    Ok(format!("{} [100% of >= 500 each]", parts.join(", ")))
}

fn lifecycle() -> Outcome {
    let t0 = Instant::now();
    let manifest = one_group("talker", "talker", "--rate, 10", "proxy");
    let order = [
        DeploymentStatus::Provisioning,
        DeploymentStatus::Pushing,
        DeploymentStatus::Setup,
        DeploymentStatus::Networking,
    ];
    for (step, op, prefix) in [
        (1u8, Op::Create, "g"),
        (2, Op::Push, "code"),
        (3, Op::Exec, "setup"),
        (4, Op::Exec, "net:"),
        (5, Op::Exec, "node:"),
    ] {
        let site = Site::new();
        std::fs::write(site.dir.path().join("setup.sh"), "true\n").unwrap();
        let cloud = FaultyProvider::new(site.cloud(), op, prefix);
        let prov = Provisioner::new(&cloud, &site.edge, None);
        let id = format!("life{step}");
        let err = match prov.deploy(&plan(&manifest), &site.opts(&id), &|_| {}) {
            Ok(mut rec) => {
                let _ = prov.teardown(&mut rec);
                return Err(format!("step {step}: deploy succeeded despite fault"));
            }
            Err(e) => e,
        };
        let DeployError::StepFailed(f, rec) = err else { return Err(format!("step {step}: {err}")) };
        check!(f.step == step, "fault at step {step} reported as step {}", f.step);
        check!(rec.status == DeploymentStatus::Failed, "step {step}: status {}", rec.status);
        check!(
            rec.history[..rec.history.len() - 1] == order[..usize::from(step.min(4))],
            "step {step}: history {:?}",
            rec.history
        );
        let instances = cloud.list_instances(&id).map_err(|e| e.to_string())?;
        check!(instances.is_empty(), "step {step}: instances {instances:?}");
        let left = leftovers(&rec, &[cloud.inner().root(), site.edge.root()]);
        check!(left.is_empty(), "step {step}: left {left:?}");
    }
    let site = Site::new();
    std::fs::write(site.dir.path().join("setup.sh"), "true\n").unwrap();
    let cloud = site.cloud();
    let prov = Provisioner::new(&cloud, &site.edge, None);
    let mut rec = prov.deploy(&plan(&manifest), &site.opts("life-ok"), &|_| {}).map_err(|e| e.to_string())?;
    prov.teardown(&mut rec).map_err(|e| e.to_string())?;
    let after_first = rec.clone();
    prov.teardown(&mut rec).map_err(|e| format!("second teardown: {e}"))?;
    check!(rec == after_first, "second teardown changed the record");
    let left = leftovers(&rec, &[cloud.root(), site.edge.root()]);
    check!(left.is_empty(), "after teardown: {left:?}");
    let dt = t0.elapsed();
    check!(dt < Duration::from_secs(60), "took {dt:?}");
    Ok(format!("5/5 faults rolled back clean, teardown idempotent, {:.1}s [< 60 s]", dt.as_secs_f64()))
}

// ---------------------------------------------------------------- channel

struct Pair {
    edge_reg: RegistryServer,
    cloud_reg: RegistryServer,
    edge: ProxyEndpoint,
    cloud: ProxyEndpoint,
    _link: Option<FaultLink>,
}

fn pair(relay: bool) -> Result<(Pair, Option<std::net::SocketAddr>), String> {
    let reg = || RegistryServer::spawn("127.0.0.1:0".parse().unwrap(), RegistryConfig::default()).unwrap();
    let (edge_reg, cloud_reg) = (reg(), reg());
    let secret = fog::provisioner::generate_secret();
    let cloud = ProxyEndpoint::spawn(ProxyConfig::new(
        Origin::Cloud,
        Some(cloud_reg.addr().to_string()),
        ChannelEnd::Listen("127.0.0.1:0".parse().unwrap()),
        secret.clone(),
    ))
    .map_err(|e| e.to_string())?;
    let mut target = cloud.listen_addr().unwrap().to_string();
    let link = if relay {
        let l = FaultLink::start(&target).map_err(|e| e.to_string())?;
        target = l.addr().to_string();
        Some(l)
    } else {
        None
    };
    let mut ec = ProxyConfig::new(Origin::Edge, Some(edge_reg.addr().to_string()), ChannelEnd::Connect(target), secret);
    ec.policy = TopicPolicy::Auto;
    let edge = ProxyEndpoint::spawn(ec).map_err(|e| e.to_string())?;
    check!(wait_for(|| edge.is_connected() && cloud.is_connected(), Duration::from_secs(5)), "channel never came up");
    let addr = link.as_ref().map(FaultLink::addr);
    Ok((
        Pair {
            edge_reg,
            cloud_reg,
            edge,
            cloud,
            _link: link,
        },
        addr,
    ))
}

fn lazy() -> Outcome {
    let t0 = Instant::now();
    let (p, _) = pair(false)?;
    let e = Node::start(NodeConfig::new("e", &p.edge_reg.addr().to_string())).map_err(|e| e.to_string())?;
    let c = Node::start(NodeConfig::new("c", &p.cloud_reg.addr().to_string()).origin(Origin::Cloud))
        .map_err(|e| e.to_string())?;
    // publishers without remote subscribers do not qualify
    let _a = e.advertise("/edge/only").unwrap();
    let _b = c.advertise("/cloud/only").unwrap();
    let _s = e.subscribe("/edge/local", 4).unwrap();
    std::thread::sleep(Duration::from_millis(500));
    let (e0, c0) = (p.edge.counters(), p.cloud.counters());
    std::thread::sleep(Duration::from_secs(10));
    let (e1, c1) = (p.edge.counters(), p.cloud.counters());
    let data = e1.total(FrameKind::Data) - e0.total(FrameKind::Data) + c1.total(FrameKind::Data) - c0.total(FrameKind::Data);
    let ping = e1.total(FrameKind::Ping) - e0.total(FrameKind::Ping) + c1.total(FrameKind::Ping) - c0.total(FrameKind::Ping);
    check!(data == 0 && ping == 0, "idle window carried {data} DATA and {ping} PING frames");
    check!(p.edge.bridge_table().is_empty(), "bridge table not empty");

    let watcher = Node::start(NodeConfig::new("watcher", &p.edge_reg.addr().to_string())).map_err(|e| e.to_string())?;
    let sub = watcher.subscribe(fog::netmon::LATENCY_TOPIC, 64).unwrap();
    let start = Instant::now();
    let mut samples = 0;
    while let Some(left) = Duration::from_secs(10).checked_sub(start.elapsed()) {
        if sub.recv_timeout(left).is_some() {
            samples += 1;
        }
    }
    check!((9..=11).contains(&samples), "{samples} latency samples in 10 s");
    let dt = t0.elapsed();
    check!(dt < Duration::from_secs(30), "took {dt:?}");
    Ok(format!("idle 10 s: 0 DATA, 0 PING; subscribed 10 s: {samples} samples [10 +- 1]"))
}

fn rejoin() -> Outcome {
    let t0 = Instant::now();
    let (p, _) = pair(true)?;
    let link = p._link.as_ref().unwrap();
    let e = Node::start(NodeConfig::new("e", &p.edge_reg.addr().to_string())).map_err(|e| e.to_string())?;
    let c = Node::start(NodeConfig::new("c", &p.cloud_reg.addr().to_string()).origin(Origin::Cloud))
        .map_err(|e| e.to_string())?;
    let publ = e.advertise("/stream").unwrap();
    let sub = c.subscribe("/stream", 8192).unwrap();
    check!(wait_for(|| p.cloud.bridge_table().len() == 1, Duration::from_secs(5)), "topic never bridged");
    std::thread::sleep(Duration::from_millis(300));
    let stop = std::sync::Arc::new(std::sync::atomic::AtomicBool::new(false));
    let st = stop.clone();
    let pump = std::thread::spawn(move || {
        while !st.load(std::sync::atomic::Ordering::SeqCst) {
            let _ = publ.publish(b"tick");
            std::thread::sleep(Duration::from_millis(10));
        }
    });
    let mut last = 0u64;
    let mut before = 0;
    let warm = Instant::now();
    while warm.elapsed() < Duration::from_millis(500) {
        if let Some(env) = sub.recv_timeout(Duration::from_millis(50)) {
            check!(env.seq > last, "seq {} after {last}", env.seq);
            last = env.seq;
            before += 1;
        }
    }
    link.sever_for(Duration::from_secs(2));
    let cut = Instant::now();
    let mut resumed = None;
    while cut.elapsed() < Duration::from_secs(12) {
        if let Some(env) = sub.recv_timeout(Duration::from_millis(50)) {
            check!(env.seq > last, "seq {} after {last}", env.seq);
            last = env.seq;
            if cut.elapsed() >= Duration::from_secs(2) {
                resumed = Some(cut.elapsed());
                break;
            }
        }
    }
    stop.store(true, std::sync::atomic::Ordering::SeqCst);
    pump.join().unwrap();
    let Some(r) = resumed else { return Err("delivery never resumed".into()) };
    check!(before > 0, "nothing delivered before the cut");
    check!(r < Duration::from_secs(10), "resumed after {r:?}");
    let dt = t0.elapsed();
    check!(dt < Duration::from_secs(30), "took {dt:?}");
    Ok(format!(
        "resumed {:.2}s after a 2 s cut, seqs strictly increasing, {} sessions [< 10 s]",
        r.as_secs_f64(),
        p.edge.sessions()
    ))
}

// ---------------------------------------------------------------- codec

fn codec_fuzz() -> Outcome {
    let t0 = Instant::now();
    let mut rng = rand::rngs::StdRng::seed_from_u64(31337);
    let (mut ok, mut typed) = (0, 0);
    let mut seed_env = MessageEnvelope::new(TopicName::new("/f").unwrap(), NodeId([1; 16]), 1, Origin::Edge);
    seed_env.payload = vec![7; 16];
    seed_env.trace = vec!["a".into(), "b".into()];
    let valid = encode_data(&seed_env).unwrap();
    for i in 0..100_000 {
        let bytes: Vec<u8> = if i % 2 == 0 {
            (0..rng.gen_range(0..256)).map(|_| rng.gen()).collect()
        } else {
            let mut b = valid.clone();
            for _ in 0..rng.gen_range(1..4) {
                let at = rng.gen_range(0..b.len());
                b[at] = rng.gen();
            }
            b.truncate(rng.gen_range(0..=b.len()));
            b
        };
        match catch_unwind(|| decode_frame(&bytes)) {
            Ok(Ok((_, used))) => {
                check!(used <= bytes.len(), "decode consumed past the input");
                ok += 1;
            }
            Ok(Err(_)) => typed += 1,
            Err(_) => return Err(format!("decoder panicked on {bytes:02x?}")),
        }
    }
    for i in 0..10_000 {
        let e = MessageEnvelope {
            topic: TopicName::new(&format!("/fuzz/t{}", rng.gen::<u16>())).unwrap(),
            publisher_id: NodeId(rng.gen()),
            seq: rng.gen(),
            origin: if rng.gen() { Origin::Cloud } else { Origin::Edge },
            timestamp_ns: rng.gen(),
            payload: (0..rng.gen_range(0..4096)).map(|_| rng.gen()).collect(),
            trace: (0..rng.gen_range(0..4)).map(|h| format!("hop{h}")).collect(),
        };
        let bytes = encode_data(&e).map_err(|e| e.to_string())?;
        check!(decode_frame(&bytes) == Ok((Frame::Data(e), bytes.len())), "round trip {i} failed");
    }
    let dt = t0.elapsed();
    check!(dt < Duration::from_secs(30), "took {dt:?}");
    Ok(format!(
        "100000 inputs: {ok} decodes, {typed} typed errors, 0 panics; 10000 round trips; {:.1}s [< 30 s]",
        dt.as_secs_f64()
    ))
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("table_arithmetic", arithmetic),
        ("offload_speedup", speedup),
        ("discovery_oracle", discovery),
        ("transparency", transparency),
        ("lazy_tunnel_and_monitor", lazy),
        ("hop_counts", hop_counts),
        ("deployment_lifecycle", lifecycle),
        ("rejoin", rejoin),
        ("codec_fuzz", codec_fuzz),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
