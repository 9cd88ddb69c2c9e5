//! Runs a deployment plan against a provider, and tears it down again.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::net::{IpAddr, Ipv4Addr};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use fog_core::manifest::{MachineSpec, NetworkMode, NodeSpec};
use fog_core::plan::{DeploymentPlan, GroupPlan, StepKind};
use fog_core::secure::{DeploymentSecret, SECRET_LEN};
use rand::RngCore;

use crate::net;
use crate::node::{ENV_ADVERTISE_HOST, ENV_LISTEN_PORT, ENV_MASTER, ENV_NODE_NAME, ENV_ORIGIN, ENV_TRACE};
use crate::provider::{
    kill_processes, tagged_processes, ExecRequest, InstanceHandle, LocalProvider, Provider, ProviderError,
    SecurityRules, FOG_PROGRAM,
};
use crate::proxy::read_status;
use crate::state::{
    DeploymentRecord, DeploymentStatus, GroupRecord, ProcessRecord, StateError, StateStore, StepFailure,
};

/// Node entry points the fog executable runs itself.
pub const BUILTIN_EXECS: &[&str] = &["source", "compute", "sink", "talker", "listener", "spray", "relay"];
pub const EDGE_INSTANCE: &str = "edge";
pub const EDGE_INSTANCE_TYPE: &str = "edge.1core";
pub const ENV_IMAGE: &str = "FOG_IMAGE";
const SECRET_FILE: &str = "secret";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Progress {
    Step { group: String, index: u8, name: &'static str, ok: bool },
    EdgeLaunch { ok: bool },
}

#[derive(Debug, thiserror::Error)]
pub enum DeployError {
    #[error("deployment {0} already exists")]
    AlreadyDeployed(String),
    #[error("[{}/5] {} {} failed: {}", .0.step, .0.group, .0.name, .0.cause)]
    StepFailed(StepFailure, Box<DeploymentRecord>),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("state i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, thiserror::Error)]
#[error("teardown left {} problem(s): {}", .0.len(), .0.join("; "))]
pub struct TeardownError(pub Vec<String>);

#[derive(Debug, Clone)]
pub struct DeployOptions {
    pub id: Option<String>,
    pub trace: bool,
    /// Directory the manifest's packages and setup scripts are relative to.
    pub manifest_dir: PathBuf,
    pub manifest_path: Option<PathBuf>,
    /// Longest wait for a registry, proxy or channel to come up.
    pub ready_timeout: Duration,
    /// Launched processes must still be alive this long after start.
    pub launch_check: Duration,
    /// Recorded so a later process can rebuild the providers.
    pub sandbox_root: Option<PathBuf>,
}

impl Default for DeployOptions {
    fn default() -> Self {
        DeployOptions {
            id: None,
            trace: false,
            manifest_dir: PathBuf::from("."),
            manifest_path: None,
            ready_timeout: Duration::from_secs(10),
            launch_check: Duration::from_millis(300),
            sandbox_root: None,
        }
    }
}

/// Random 8-hex deployment id.
pub fn new_deployment_id() -> String {
    format!("{:08x}", rand::thread_rng().next_u32())
}

pub fn generate_secret() -> DeploymentSecret {
    let mut b = [0u8; SECRET_LEN];
    rand::thread_rng().fill_bytes(&mut b);
    DeploymentSecret(b)
}

pub fn write_secret(path: &Path, secret: &DeploymentSecret) -> io::Result<()> {
    fs::write(path, hex::encode(secret.0))?;
    fs::set_permissions(path, fs::Permissions::from_mode(0o600))
}

pub fn read_secret(path: &Path) -> io::Result<DeploymentSecret> {
    let text = fs::read_to_string(path)?;
    let bytes = hex::decode(text.trim()).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let arr: [u8; SECRET_LEN] = bytes
        .try_into()
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "secret has the wrong length"))?;
    Ok(DeploymentSecret(arr))
}

fn edge_machine() -> MachineSpec {
    MachineSpec {
        instance_type: EDGE_INSTANCE_TYPE.into(),
        worker_count: 1,
        gpu: false,
        startup_delay_ms: 0,
    }
}

type StepResult<T> = Result<T, String>;

fn perr(e: ProviderError) -> String {
    e.to_string()
}

pub struct Provisioner<'a> {
    pub cloud: &'a dyn Provider,
    pub edge: &'a LocalProvider,
    pub store: Option<&'a StateStore>,
}

struct Ctx<'a> {
    p: &'a Provisioner<'a>,
    opts: &'a DeployOptions,
    record: Mutex<DeploymentRecord>,
    secret: DeploymentSecret,
    scratch: PathBuf,
    /// Edge ports are laid out as registry, one per edge node, one per group.
    edge_nodes: usize,
}

impl Ctx<'_> {
    fn id(&self) -> String {
        self.record.lock().unwrap().id.clone()
    }

    fn update(&self, f: impl FnOnce(&mut DeploymentRecord)) {
        let mut r = self.record.lock().unwrap();
        f(&mut r);
        if let Some(store) = self.p.store {
            if let Err(e) = store.save(&r) {
                log::warn!("could not save deployment record: {e}");
            }
        }
    }

    fn update_group(&self, name: &str, f: impl FnOnce(&mut GroupRecord)) {
        self.update(|r| {
            if let Some(g) = r.group_mut(name) {
                f(g)
            }
        });
    }

    fn wait_until(&self, mut ready: impl FnMut() -> bool) -> bool {
        let deadline = Instant::now() + self.opts.ready_timeout;
        loop {
            if ready() {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(25));
        }
    }

    fn spawn(&self, provider: &dyn Provider, inst: &InstanceHandle, req: ExecRequest) -> StepResult<ProcessRecord> {
        let out = provider.exec(inst, &req).map_err(perr)?;
        let pid = out.pid.ok_or_else(|| format!("`{}` did not report a pid", req.label))?;
        Ok(ProcessRecord { label: req.label, pid })
    }

    fn node_request(&self, node: &NodeSpec, origin: &str, master: &str, host: &str, port: u16) -> StepResult<ExecRequest> {
        let local = self.opts.manifest_dir.join(&node.package).join(&node.exec);
        let mut req = if local.is_file() {
            ExecRequest {
                program: format!("{}/{}", node.package, node.exec),
                args: node.args.clone(),
                env: Vec::new(),
                detach: true,
                label: String::new(),
            }
        } else if BUILTIN_EXECS.contains(&node.exec.as_str()) {
            let mut args = vec!["node".to_string(), node.exec.clone()];
            args.extend(node.args.iter().cloned());
            ExecRequest {
                program: FOG_PROGRAM.into(),
                args,
                env: Vec::new(),
                detach: true,
                label: String::new(),
            }
        } else {
            return Err(format!("node `{}`: no executable `{}` in package `{}`", node.name, node.exec, node.package));
        };
        req.label = format!("node:{}", node.name);
        Ok(req
            .env(ENV_MASTER, master)
            .env(ENV_NODE_NAME, node.name.as_str())
            .env(ENV_ORIGIN, origin)
            .env(ENV_TRACE, if self.opts.trace { "1" } else { "0" })
            .env(ENV_LISTEN_PORT, port.to_string())
            .env(ENV_ADVERTISE_HOST, host))
    }

    fn check_alive(&self, provider: &dyn Provider, inst: &InstanceHandle, procs: &[ProcessRecord]) -> StepResult<()> {
        thread::sleep(self.opts.launch_check);
        match procs.iter().find(|p| !provider.process_alive(inst, p.pid)) {
            Some(dead) => Err(format!("`{}` (pid {}) exited right after start", dead.label, dead.pid)),
            None => Ok(()),
        }
    }

    fn edge_inst(&self) -> InstanceHandle {
        self.record.lock().unwrap().edge.instance.clone().expect("edge instance exists")
    }

    // Edge instance and its registry.
    fn start_edge(&self, plan: &DeploymentPlan) -> StepResult<()> {
        let id = self.id();
        let reg_port = net::free_port().map_err(|e| e.to_string())?;
        let mut ports = vec![reg_port];
        for _ in 0..plan.edge_nodes.len() + plan.groups.len() {
            ports.push(net::free_port().map_err(|e| e.to_string())?);
        }
        let rules = SecurityRules {
            inbound_ports: ports.iter().copied().collect(),
            peer_allowlist: BTreeSet::from([IpAddr::V4(Ipv4Addr::LOCALHOST)]),
        };
        let edge = self.p.edge;
        let inst = edge.create_instance(&id, EDGE_INSTANCE, &edge_machine(), &rules).map_err(perr)?;
        let registry = format!("127.0.0.1:{reg_port}");
        self.update(|r| {
            r.edge.instance = Some(inst.clone());
            r.edge.registry = registry.clone();
            r.edge.ports = ports.clone();
        });
        let proc = self.spawn(edge, &inst, ExecRequest::fog("registry", &["registry", "--bind", &registry]))?;
        self.update(|r| r.edge.processes.push(proc));
        if !self.wait_until(|| edge.port_open(&inst, reg_port)) {
            return Err("edge registry did not start listening".into());
        }
        Ok(())
    }

    fn launch_edge_nodes(&self, plan: &DeploymentPlan) -> StepResult<()> {
        let edge = self.p.edge;
        let inst = self.edge_inst();
        let (registry, ports) = {
            let r = self.record.lock().unwrap();
            (r.edge.registry.clone(), r.edge.ports.clone())
        };
        let mut procs = Vec::new();
        for (i, n) in plan.edge_nodes.iter().enumerate() {
            let req = self.node_request(n, "edge", &registry, "127.0.0.1", ports[1 + i])?;
            let proc = self.spawn(edge, &inst, req)?;
            self.update(|r| {
                r.edge.processes.push(proc.clone());
                r.edge.nodes.push(n.name.clone());
            });
            procs.push(proc);
        }
        self.check_alive(edge, &inst, &procs)
    }

    fn provision(&self, g: &GroupPlan) -> StepResult<()> {
        let id = self.id();
        // registry, channel, proxy node, then one per cloud node
        let mut ports = Vec::new();
        for _ in 0..3 + g.nodes.len().max(1) {
            ports.push(net::free_port().map_err(|e| e.to_string())?);
        }
        let rules = SecurityRules {
            inbound_ports: ports.iter().copied().collect(),
            peer_allowlist: BTreeSet::from([IpAddr::V4(Ipv4Addr::LOCALHOST)]),
        };
        self.update_group(&g.group, |r| r.ports = ports.clone());
        let inst = self.p.cloud.create_instance(&id, &g.group, &g.machine, &rules).map_err(perr)?;
        let host = self.p.cloud.address(&inst).map_err(perr)?;
        self.update_group(&g.group, |r| {
            r.instance = Some(inst);
            r.host = host;
        });
        Ok(())
    }

    fn group(&self, name: &str) -> GroupRecord {
        self.record.lock().unwrap().group(name).cloned().expect("group record exists")
    }

    fn push(&self, g: &GroupPlan, step: &StepKind) -> StepResult<()> {
        let rec = self.group(&g.group);
        let inst = rec.instance.as_ref().expect("provisioned");
        let cloud = self.p.cloud;
        let secret_path = self.scratch.join(SECRET_FILE);
        cloud.push_files(inst, &[secret_path], "creds").map_err(perr)?;
        match step {
            StepKind::PushCode { packages } => {
                let dirs: Vec<PathBuf> = packages
                    .iter()
                    .map(|p| self.opts.manifest_dir.join(p))
                    .filter(|p| p.is_dir())
                    .collect();
                cloud.push_files(inst, &dirs, "code").map_err(perr)
            }
            StepKind::PullImage { image } => {
                let f = self.scratch.join(format!("image-{}", g.group));
                fs::write(&f, image).map_err(|e| e.to_string())?;
                cloud.push_files(inst, &[f], "image").map_err(perr)?;
                self.update_group(&g.group, |r| r.image = Some(image.clone()));
                Ok(())
            }
            other => Err(format!("unexpected step {other}")),
        }
    }

    fn setup(&self, g: &GroupPlan, script: Option<&str>) -> StepResult<()> {
        let Some(script) = script else { return Ok(()) };
        let rec = self.group(&g.group);
        let inst = rec.instance.as_ref().expect("provisioned");
        let local = self.opts.manifest_dir.join(script);
        self.p.cloud.push_files(inst, std::slice::from_ref(&local), "setup").map_err(perr)?;
        let name = local.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let out = self
            .p
            .cloud
            .exec(
                inst,
                &ExecRequest {
                    program: "/bin/sh".into(),
                    args: vec![format!("../setup/{name}")],
                    env: Vec::new(),
                    detach: false,
                    label: "setup".into(),
                },
            )
            .map_err(perr)?;
        if out.status != 0 {
            let tail: String = out.output.lines().last().unwrap_or("").chars().take(200).collect();
            return Err(format!("setup script `{script}` exited with status {}: {tail}", out.status));
        }
        Ok(())
    }

    fn status_file(&self, group: &str) -> PathBuf {
        self.p.edge.sandbox(&self.edge_inst()).join("logs").join(format!("channel-{group}.status"))
    }

    fn network(&self, g: &GroupPlan, step: &StepKind) -> StepResult<()> {
        let rec = self.group(&g.group);
        let inst = rec.instance.clone().expect("provisioned");
        let cloud = self.p.cloud;
        let (creg, chan, pnode) = (rec.ports[0], rec.ports[1], rec.ports[2]);
        let host = rec.host.clone();
        let channel = format!("{host}:{chan}");
        let trace = self.opts.trace;
        let edge_registry = self.record.lock().unwrap().edge.registry.clone();
        let edge_port = {
            let r = self.record.lock().unwrap();
            let idx = r.groups.iter().position(|x| x.name == g.group).unwrap_or(0);
            r.edge.ports[1 + self.edge_nodes + idx]
        };
        let topics = match step {
            StepKind::NetworkProxy { topics: Some(t) } => {
                Some(t.iter().map(|t| t.as_str().to_string()).collect::<Vec<_>>().join(","))
            }
            _ => None,
        };
        let proxy = matches!(step, StepKind::NetworkProxy { .. });
        let cloud_secret = format!("../creds/{SECRET_FILE}");
        let mut args: Vec<String> = vec!["proxy".into(), "--side".into(), "cloud".into()];
        let label = if proxy {
            let registry = format!("{host}:{creg}");
            let proc = self.spawn(cloud, &inst, ExecRequest::fog("net:registry", &["registry", "--bind", &registry]))?;
            self.update_group(&g.group, |r| {
                r.processes.push(proc);
                r.registry = Some(registry.clone());
            });
            if !self.wait_until(|| cloud.port_open(&inst, creg)) {
                return Err("cloud registry did not start listening".into());
            }
            args.extend(["--registry".into(), registry]);
            if let Some(t) = &topics {
                args.extend(["--topics".into(), t.clone()]);
            }
            "net:proxy"
        } else {
            args.push("--no-bridge".into());
            "net:agent"
        };
        args.extend(["--listen".into(), channel.clone(), "--secret-file".into(), cloud_secret]);
        args.extend(["--status-file".into(), "../logs/channel.status".into()]);
        if trace {
            args.push("--trace".into());
        }
        let req = ExecRequest {
            program: FOG_PROGRAM.into(),
            args,
            env: Vec::new(),
            detach: true,
            label: label.into(),
        }
        .env(ENV_LISTEN_PORT, pnode.to_string())
        .env(ENV_ADVERTISE_HOST, host.as_str());
        let proc = self.spawn(cloud, &inst, req)?;
        self.update_group(&g.group, |r| {
            r.processes.push(proc);
            r.channel = Some(channel.clone());
        });
        if !self.wait_until(|| cloud.port_open(&inst, chan)) {
            return Err("cloud channel endpoint did not start listening".into());
        }

        // Edge side: a bridging proxy, or a monitor-only agent for DIRECT.
        let edge = self.p.edge;
        let einst = self.edge_inst();
        let secret_path = edge.sandbox(&einst).join("creds").join(format!("{SECRET_FILE}-{}", g.group));
        write_secret(&secret_path, &self.secret).map_err(|e| e.to_string())?;
        let status = self.status_file(&g.group);
        let mut eargs: Vec<String> = vec![
            "proxy".into(),
            "--side".into(),
            "edge".into(),
            "--registry".into(),
            edge_registry,
            "--connect".into(),
            channel,
            "--secret-file".into(),
            secret_path.display().to_string(),
            "--status-file".into(),
            status.display().to_string(),
        ];
        if proxy {
            if let Some(t) = &topics {
                eargs.extend(["--topics".into(), t.clone()]);
            }
        } else {
            eargs.push("--no-bridge".into());
        }
        if trace {
            eargs.push("--trace".into());
        }
        let elabel = if proxy {
            format!("net:proxy-{}", g.group)
        } else {
            format!("net:monitor-{}", g.group)
        };
        let req = ExecRequest {
            program: FOG_PROGRAM.into(),
            args: eargs,
            env: Vec::new(),
            detach: true,
            label: elabel,
        }
        .env(ENV_LISTEN_PORT, edge_port.to_string())
        .env(ENV_ADVERTISE_HOST, "127.0.0.1");
        let proc = self.spawn(edge, &einst, req)?;
        self.update(|r| r.edge.processes.push(proc));
        self.update_group(&g.group, |r| r.status_file = Some(status.clone()));
        if cloud.kind() == "local" {
            let connected = self.wait_until(|| {
                read_status(&status).is_some_and(|v| v["connected"] == serde_json::Value::Bool(true))
            });
            if !connected {
                return Err("secure channel did not come up".into());
            }
        }
        Ok(())
    }

    fn launch(&self, g: &GroupPlan, step: &StepKind) -> StepResult<()> {
        let rec = self.group(&g.group);
        let inst = rec.instance.clone().expect("provisioned");
        let cloud = self.p.cloud;
        let master = match g.network {
            NetworkMode::Proxy => rec.registry.clone().expect("cloud registry"),
            NetworkMode::Direct => self.record.lock().unwrap().edge.registry.clone(),
        };
        let mut procs = Vec::new();
        match step {
            StepKind::LaunchNodes { .. } => {
                for (i, n) in g.nodes.iter().enumerate() {
                    let req = self.node_request(n, "cloud", &master, &rec.host, rec.ports[3 + i])?;
                    let proc = self.spawn(cloud, &inst, req)?;
                    self.update_group(&g.group, |r| {
                        r.processes.push(proc.clone());
                        r.nodes.push(n.name.clone());
                    });
                    procs.push(proc);
                }
            }
            StepKind::RunContainer { image } => {
                let req = ExecRequest::fog(&format!("container:{image}"), &["container", "--image", image])
                    .env(ENV_IMAGE, image.as_str())
                    .env(ENV_MASTER, master.as_str())
                    .env(ENV_NODE_NAME, g.group.as_str())
                    .env(ENV_ORIGIN, "cloud")
                    .env(ENV_TRACE, if self.opts.trace { "1" } else { "0" })
                    .env(ENV_LISTEN_PORT, rec.ports[3].to_string())
                    .env(ENV_ADVERTISE_HOST, rec.host.as_str());
                let proc = self.spawn(cloud, &inst, req)?;
                self.update_group(&g.group, |r| r.processes.push(proc.clone()));
                procs.push(proc);
            }
            other => return Err(format!("unexpected step {other}")),
        }
        self.check_alive(cloud, &inst, &procs)
    }

    fn run_step(&self, g: &GroupPlan, step: &StepKind) -> StepResult<()> {
        match step {
            StepKind::Provision => self.provision(g),
            StepKind::PushCode { .. } | StepKind::PullImage { .. } => self.push(g, step),
            StepKind::Setup { script } => self.setup(g, script.as_deref()),
            StepKind::NetworkDirect | StepKind::NetworkProxy { .. } => self.network(g, step),
            StepKind::LaunchNodes { .. } | StepKind::RunContainer { .. } => self.launch(g, step),
        }
    }
}

impl<'a> Provisioner<'a> {
    pub fn new(cloud: &'a dyn Provider, edge: &'a LocalProvider, store: Option<&'a StateStore>) -> Self {
        Provisioner { cloud, edge, store }
    }

    /// Runs the plan to RUNNING. On any step failure everything created so
    /// far is torn down and the record is left FAILED.
    pub fn deploy(
        &self,
        plan: &DeploymentPlan,
        opts: &DeployOptions,
        progress: &(dyn Fn(&Progress) + Sync),
    ) -> Result<DeploymentRecord, DeployError> {
        let id = opts.id.clone().unwrap_or_else(new_deployment_id);
        let _lock = match self.store {
            Some(store) => {
                let lock = store.lock(&id)?;
                if let Some(old) = store.load(&id)? {
                    if !matches!(old.status, DeploymentStatus::Failed | DeploymentStatus::TornDown) {
                        return Err(DeployError::AlreadyDeployed(id));
                    }
                }
                Some(lock)
            }
            None => None,
        };
        let scratch = tempfile::Builder::new().prefix("fog-deploy-").tempdir()?;
        let secret = generate_secret();
        write_secret(&scratch.path().join(SECRET_FILE), &secret)?;
        let mut record = DeploymentRecord::new(
            &id,
            self.cloud.kind(),
            opts.sandbox_root.as_deref().unwrap_or(self.edge.root()),
        );
        record.secret_id = hex::encode(secret.id());
        record.trace = opts.trace;
        record.manifest = opts.manifest_path.clone();
        for g in &plan.groups {
            record.groups.push(GroupRecord::new(&g.group, &g.machine.instance_type, g.network));
        }
        let ctx = Ctx {
            p: self,
            opts,
            record: Mutex::new(record),
            secret,
            scratch: scratch.path().to_path_buf(),
            edge_nodes: plan.edge_nodes.len(),
        };
        ctx.update(|_| {});
        match self.run(&ctx, plan, progress) {
            Ok(()) => {
                ctx.update(|r| r.set_status(DeploymentStatus::Running));
                Ok(ctx.record.into_inner().unwrap())
            }
            Err(failure) => {
                let mut rec = ctx.record.into_inner().unwrap();
                let _ = self.release(&mut rec);
                rec.set_status(DeploymentStatus::Failed);
                rec.failure = Some(failure.clone());
                if let Some(store) = self.store {
                    store.save(&rec)?;
                }
                Err(DeployError::StepFailed(failure, Box::new(rec)))
            }
        }
    }

    fn run(&self, ctx: &Ctx<'_>, plan: &DeploymentPlan, progress: &(dyn Fn(&Progress) + Sync)) -> Result<(), StepFailure> {
        let fail = |group: &str, step: u8, name: &str, cause: String| StepFailure {
            group: group.into(),
            step,
            name: name.into(),
            cause,
        };
        ctx.start_edge(plan).map_err(|c| {
            progress(&Progress::EdgeLaunch { ok: false });
            fail(EDGE_INSTANCE, 1, "provision", c)
        })?;
        for k in 1..=5u8 {
            ctx.update(|r| r.set_status(DeploymentStatus::for_step(k)));
            let results: Vec<(String, &'static str, StepResult<()>)> = if k <= 3 {
                thread::scope(|s| {
                    let edge = (k == 1).then(|| s.spawn(|| ctx.launch_edge_nodes(plan)));
                    let handles: Vec<_> = plan
                        .groups
                        .iter()
                        .map(|g| {
                            let step = &g.steps[(k - 1) as usize];
                            (g, step, s.spawn(move || ctx.run_step(g, step)))
                        })
                        .collect();
                    let mut out: Vec<_> = handles
                        .into_iter()
                        .map(|(g, step, h)| {
                            let r = h.join().unwrap_or_else(|_| Err("step panicked".into()));
                            (g.group.clone(), step.name(), r)
                        })
                        .collect();
                    if let Some(h) = edge {
                        let r = h.join().unwrap_or_else(|_| Err("edge launch panicked".into()));
                        progress(&Progress::EdgeLaunch { ok: r.is_ok() });
                        out.push((EDGE_INSTANCE.to_string(), "launch", r));
                    }
                    out
                })
            } else {
                let mut out = Vec::new();
                for g in &plan.groups {
                    let step = &g.steps[(k - 1) as usize];
                    let r = ctx.run_step(g, step);
                    let failed = r.is_err();
                    out.push((g.group.clone(), step.name(), r));
                    if failed {
                        break;
                    }
                }
                out
            };
            let mut first = None;
            for (group, name, r) in results {
                if group != EDGE_INSTANCE {
                    progress(&Progress::Step {
                        group: group.clone(),
                        index: k,
                        name,
                        ok: r.is_ok(),
                    });
                }
                if let Err(cause) = r {
                    first.get_or_insert_with(|| fail(&group, k, name, cause));
                }
            }
            if let Some(f) = first {
                return Err(f);
            }
        }
        Ok(())
    }

    /// Stops every process and terminates every instance the deployment
    /// owns, sweeping for any the record missed. Keeps going past errors.
    fn release(&self, rec: &mut DeploymentRecord) -> Result<(), TeardownError> {
        let mut errors = Vec::new();
        let id = rec.id.clone();
        for g in &rec.groups {
            if let Some(inst) = &g.instance {
                if let Err(e) = self.cloud.terminate(inst) {
                    errors.push(format!("terminate {}: {e}", inst.id()));
                }
            }
        }
        match self.cloud.list_instances(&id) {
            Ok(left) => {
                for inst in left {
                    if let Err(e) = self.cloud.terminate(&inst) {
                        errors.push(format!("terminate {}: {e}", inst.id()));
                    }
                }
            }
            Err(e) => errors.push(format!("list instances: {e}")),
        }
        let edge = rec.edge.instance.clone().unwrap_or(InstanceHandle {
            deployment: id.clone(),
            name: EDGE_INSTANCE.into(),
        });
        if let Err(e) = self.edge.terminate(&edge) {
            errors.push(format!("terminate edge: {e}"));
        }
        if let Ok(left) = self.edge.list_instances(&id) {
            for inst in left {
                if let Err(e) = self.edge.terminate(&inst) {
                    errors.push(format!("terminate {}: {e}", inst.id()));
                }
            }
        }
        let stragglers = tagged_processes(&id);
        if !stragglers.is_empty() {
            kill_processes(&stragglers);
        }
        for g in &mut rec.groups {
            g.processes.clear();
        }
        rec.edge.processes.clear();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(TeardownError(errors))
        }
    }

    /// Idempotent: a torn-down record is left as is.
    pub fn teardown(&self, rec: &mut DeploymentRecord) -> Result<(), TeardownError> {
        if rec.status == DeploymentStatus::TornDown {
            return Ok(());
        }
        let res = self.release(rec);
        if res.is_ok() {
            rec.set_status(DeploymentStatus::TornDown);
        }
        if let Some(store) = self.store {
            if let Err(e) = store.save(rec) {
                return Err(TeardownError(vec![format!("save record: {e}")]));
            }
        }
        res
    }
}
