//! Edge-only versus cloud benchmark runs on the local provider.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fog_core::codec::Origin;
use fog_core::kernel::{kernel_serial, DEFAULT_SEED};
use fog_core::manifest::{parse_manifest, Catalog};
use fog_core::plan::plan_deployment;
use fog_core::timing::{make_timing_row, TimingError, TimingRow};

use crate::node::{Node, NodeConfig, NodeError};
use crate::provider::LocalProvider;
use crate::provisioner::{DeployError, DeployOptions, Provisioner};
use crate::workloads::{ComputeResult, Request, DEFAULT_FRAME_SIZE, REQUEST_TOPIC, RESULT_TOPIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scenario {
    Direct,
    Proxy,
    EdgeOnly,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Direct => "direct",
            Scenario::Proxy => "proxy",
            Scenario::EdgeOnly => "edge_only",
        }
    }
}

pub const CLOUD_INSTANCE_TYPE: &str = "c5.24xlarge";

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub frame_size: usize,
    /// Upper bound on the request rate.
    pub rate_hz: f64,
    /// Kernel items per request.
    pub items: u64,
    pub trials: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            frame_size: DEFAULT_FRAME_SIZE,
            rate_hz: 10.0,
            items: 0,
            trials: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSample {
    pub id: u64,
    pub e2e_s: f64,
    pub compute_s: f64,
    pub network_s: f64,
    pub value: u64,
    pub workers: u32,
    pub request_hops: u8,
    pub result_hops: usize,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub scenario: Scenario,
    pub items: u64,
    pub samples: Vec<BenchSample>,
    pub row: TimingRow,
}

impl BenchReport {
    pub fn mean_compute_s(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.compute_s))
    }

    pub fn mean_network_s(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.network_s))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("deployment failed: {0}")]
    Deploy(#[from] DeployError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("no result for request {0} in time")]
    Timeout(u64),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Kernel items that take about `target` on one worker of this machine.
pub fn calibrate_items(target: Duration) -> u64 {
    let mut probe = 2_000u64;
    loop {
        let t0 = Instant::now();
        std::hint::black_box(kernel_serial(DEFAULT_SEED, probe));
        let dt = t0.elapsed();
        if dt >= Duration::from_millis(100) {
            let per_item = dt.as_secs_f64() / probe as f64;
            return (target.as_secs_f64() / per_item).ceil() as u64;
        }
        probe *= 4;
    }
}

pub fn bench_manifest(scenario: Scenario) -> String {
    match scenario {
        Scenario::EdgeOnly => "[node compute]\npackage = bench\nexec = compute\nplacement = edge\n".into(),
        Scenario::Direct | Scenario::Proxy => format!(
            "[node compute]\npackage = bench\nexec = compute\nplacement = cloud:bench\n\n\
             [cloud bench]\ninstance_type = {CLOUD_INSTANCE_TYPE}\nnetwork = {}\n",
            if scenario == Scenario::Direct { "direct" } else { "proxy" }
        ),
    }
}

/// Deploys the compute node for `scenario`, sends `spec.trials` requests one
/// at a time from an edge client and tears the deployment down again.
/// `edge_only_s` is the baseline for the speedup column; without one the
/// row's own compute time is used.
pub fn run_benchmark(
    scenario: Scenario,
    spec: &WorkloadSpec,
    fog_exe: &Path,
    work_root: &Path,
    edge_only_s: Option<f64>,
) -> Result<BenchReport, BenchError> {
    let manifest = parse_manifest(&bench_manifest(scenario)).expect("bench manifest parses");
    let plan = plan_deployment(&manifest, &Catalog::builtin()).expect("bench manifest plans");
    let cloud = LocalProvider::new(work_root.to_path_buf(), fog_exe.to_path_buf());
    let edge = LocalProvider::new(work_root.join("edge"), fog_exe.to_path_buf());
    let prov = Provisioner::new(&cloud, &edge, None);
    let opts = DeployOptions {
        trace: true,
        manifest_dir: PathBuf::from(work_root),
        ..DeployOptions::default()
    };
    let mut record = prov.deploy(&plan, &opts, &|_| {})?;
    let result = drive(&record.edge.registry, scenario, spec);
    let _ = prov.teardown(&mut record);
    let samples = result?;
    let compute = mean(samples.iter().map(|s| s.compute_s));
    let network = mean(samples.iter().map(|s| s.network_s));
    let row = make_timing_row(scenario.name(), edge_only_s.unwrap_or(compute), compute, network)?;
    Ok(BenchReport {
        scenario,
        items: spec.items,
        samples,
        row,
    })
}

fn drive(registry: &str, scenario: Scenario, spec: &WorkloadSpec) -> Result<Vec<BenchSample>, BenchError> {
    let node = Node::start(
        NodeConfig::new(&format!("bench-client-{}", scenario.name()), registry)
            .origin(Origin::Edge)
            .trace(true),
    )?;
    let requests = node.advertise(REQUEST_TOPIC)?;
    let results = node.subscribe(RESULT_TOPIC, 16)?;
    let ask = |id: u64, items: u64, wait: Duration| -> Result<Option<(BenchSample, Duration)>, BenchError> {
        let t0 = Instant::now();
        requests.publish(&Request { id, items }.encode(spec.frame_size))?;
        let deadline = t0 + wait;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            let Some(env) = results.recv_timeout(left) else { continue };
            let Some(res) = ComputeResult::decode(&env.payload) else { continue };
            if res.id != id {
                continue;
            }
            let e2e = t0.elapsed();
            let compute_s = res.compute_ns as f64 / 1e9;
            let sample = BenchSample {
                id,
                e2e_s: e2e.as_secs_f64(),
                compute_s,
                network_s: (e2e.as_secs_f64() - compute_s).max(0.0),
                value: res.value,
                workers: res.workers,
                request_hops: res.request_hops,
                result_hops: env.trace.len(),
            };
            return Ok(Some((sample, e2e)));
        }
    };
    // Warm up until the whole path answers.
    let warm_deadline = Instant::now() + Duration::from_secs(30);
    let mut id = 1u64 << 32;
    loop {
        if ask(id, 0, Duration::from_millis(500))?.is_some() {
            break;
        }
        if Instant::now() > warm_deadline {
            return Err(BenchError::Timeout(id));
        }
        id += 1;
    }
    let period = Duration::from_secs_f64(1.0 / spec.rate_hz.max(1e-3));
    let mut out = Vec::with_capacity(spec.trials);
    for trial in 1..=spec.trials as u64 {
        let started = Instant::now();
        let mut got = None;
        for _ in 0..3 {
            if let Some((s, _)) = ask(trial, spec.items, Duration::from_secs(120))? {
                got = Some(s);
                break;
            }
        }
        out.push(got.ok_or(BenchError::Timeout(trial))?);
        if let Some(rest) = period.checked_sub(started.elapsed()) {
            std::thread::sleep(rest);
        }
    }
    node.shutdown();
    Ok(out)
}
