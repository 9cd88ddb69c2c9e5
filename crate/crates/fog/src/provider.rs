//! Machine providers: where instances come from and how commands run on them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::net::IpAddr;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use fog_core::manifest::MachineSpec;

use crate::net::{ENV_ALLOWED_PEERS, ENV_ALLOWED_PORTS};

pub const ENV_WORKERS: &str = "FOG_WORKERS";
pub const ENV_GPU: &str = "FOG_GPU";
pub const ENV_DEPLOYMENT: &str = "FOG_DEPLOYMENT";
pub const ENV_INSTANCE: &str = "FOG_INSTANCE";
/// Program name that providers resolve to the fog executable itself.
pub const FOG_PROGRAM: &str = "fog";

/// Inbound rules applied to an instance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SecurityRules {
    pub inbound_ports: BTreeSet<u16>,
    pub peer_allowlist: BTreeSet<IpAddr>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceHandle {
    pub deployment: String,
    pub name: String,
}

impl InstanceHandle {
    pub fn id(&self) -> String {
        format!("{}-{}", self.deployment, self.name)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExecRequest {
    /// `fog`, or a path relative to the instance's code directory.
    pub program: String,
    pub args: Vec<String>,
    pub env: Vec<(String, String)>,
    /// Start in the background and return its pid.
    pub detach: bool,
    /// Names the log file and identifies the process in records.
    pub label: String,
}

impl ExecRequest {
    pub fn fog(label: &str, args: &[&str]) -> Self {
        ExecRequest {
            program: FOG_PROGRAM.into(),
            args: args.iter().map(|s| s.to_string()).collect(),
            env: Vec::new(),
            detach: true,
            label: label.into(),
        }
    }

    pub fn env(mut self, k: &str, v: impl Into<String>) -> Self {
        self.env.push((k.to_string(), v.into()));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutcome {
    pub status: i32,
    pub output: String,
    pub pid: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Create,
    Push,
    Exec,
    Terminate,
}

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("no such instance {0}")]
    NoSuchInstance(String),
    #[error("could not start `{program}`: {cause}")]
    Spawn { program: String, cause: String },
    #[error("injected failure in {0:?} `{1}`")]
    Injected(Op, String),
    #[error("provider i/o: {0}")]
    Io(#[from] io::Error),
}

/// The six operations a machine provider supplies, plus liveness queries.
pub trait Provider: Send + Sync {
    fn kind(&self) -> &'static str;
    fn create_instance(
        &self,
        deployment: &str,
        name: &str,
        machine: &MachineSpec,
        rules: &SecurityRules,
    ) -> Result<InstanceHandle, ProviderError>;
    /// Host other machines use to reach the instance.
    fn address(&self, inst: &InstanceHandle) -> Result<String, ProviderError>;
    fn push_files(&self, inst: &InstanceHandle, local: &[PathBuf], remote_root: &str) -> Result<(), ProviderError>;
    fn exec(&self, inst: &InstanceHandle, req: &ExecRequest) -> Result<ExecOutcome, ProviderError>;
    /// Stops every process and removes the instance. Idempotent.
    fn terminate(&self, inst: &InstanceHandle) -> Result<(), ProviderError>;
    fn list_instances(&self, deployment: &str) -> Result<Vec<InstanceHandle>, ProviderError>;
    fn process_alive(&self, inst: &InstanceHandle, pid: u32) -> bool;
    /// True once `port` on the instance accepts connections.
    fn port_open(&self, inst: &InstanceHandle, port: u16) -> bool;
}

fn join_set<T: ToString>(s: &BTreeSet<T>) -> String {
    s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn copy_into(src: &Path, dst_dir: &Path) -> io::Result<()> {
    let name = src
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("{} has no file name", src.display())))?;
    let dst = dst_dir.join(name);
    if src.is_dir() {
        fs::create_dir_all(&dst)?;
        for e in fs::read_dir(src)? {
            copy_into(&e?.path(), &dst)?;
        }
    } else {
        fs::copy(src, &dst)?;
    }
    Ok(())
}

fn group_alive(pgid: u32) -> bool {
    // SAFETY: kill with signal 0 only checks for existence.
    unsafe { libc::kill(-(pgid as i32), 0) == 0 }
}

fn signal_group(pgid: u32, sig: i32) {
    // SAFETY: sends a signal to a process group we created.
    unsafe {
        libc::kill(-(pgid as i32), sig);
    }
}

/// True if `pid` exists and is not a zombie.
pub fn pid_running(pid: u32) -> bool {
    match fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => stat
            .rsplit_once(')')
            .and_then(|(_, rest)| rest.split_whitespace().next())
            .is_some_and(|state| state != "Z" && state != "X"),
        Err(_) => false,
    }
}

/// Live processes whose environment carries `FOG_DEPLOYMENT=<deployment>`.
pub fn tagged_processes(deployment: &str) -> Vec<u32> {
    let needle = format!("{ENV_DEPLOYMENT}={deployment}");
    let Ok(dir) = fs::read_dir("/proc") else { return Vec::new() };
    dir.filter_map(|e| e.ok()?.file_name().to_str()?.parse::<u32>().ok())
        .filter(|pid| {
            fs::read(format!("/proc/{pid}/environ"))
                .is_ok_and(|env| env.split(|b| *b == 0).any(|kv| kv == needle.as_bytes()))
        })
        .filter(|pid| pid_running(*pid))
        .collect()
}

/// SIGKILLs each process directly.
pub fn kill_processes(pids: &[u32]) {
    for &p in pids {
        // SAFETY: plain signal delivery to a pid.
        unsafe {
            libc::kill(p as i32, libc::SIGKILL);
        }
    }
}

/// Sends SIGTERM, then SIGKILL after `grace`, to every listed process group.
pub fn stop_groups(pgids: &[u32], grace: Duration, mut reap: impl FnMut()) {
    for &g in pgids {
        signal_group(g, libc::SIGTERM);
    }
    let deadline = Instant::now() + grace;
    loop {
        reap();
        let alive: Vec<u32> = pgids.iter().copied().filter(|g| group_alive(*g) && pid_running(*g)).collect();
        if alive.is_empty() {
            return;
        }
        if Instant::now() >= deadline {
            for g in alive {
                signal_group(g, libc::SIGKILL);
            }
            std::thread::sleep(Duration::from_millis(50));
            reap();
            return;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

/// Instances are sandbox directories on this machine; processes run in
/// their own process groups on loopback.
pub struct LocalProvider {
    root: PathBuf,
    fog_exe: PathBuf,
    children: Mutex<HashMap<u32, Child>>,
}

const STATE_FILE: &str = "instance.state";
const PIDS_FILE: &str = "pids";

impl LocalProvider {
    /// `root` holds `fog-<deployment>/<instance>` sandboxes; `fog_exe` is
    /// run for the `fog` program.
    pub fn new(root: impl Into<PathBuf>, fog_exe: impl Into<PathBuf>) -> Self {
        LocalProvider {
            root: root.into(),
            fog_exe: fog_exe.into(),
            children: Mutex::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn deployment_dir(&self, deployment: &str) -> PathBuf {
        self.root.join(format!("fog-{deployment}"))
    }

    pub fn sandbox(&self, inst: &InstanceHandle) -> PathBuf {
        self.deployment_dir(&inst.deployment).join(&inst.name)
    }

    fn existing_sandbox(&self, inst: &InstanceHandle) -> Result<PathBuf, ProviderError> {
        let dir = self.sandbox(inst);
        if dir.join(STATE_FILE).is_file() {
            Ok(dir)
        } else {
            Err(ProviderError::NoSuchInstance(inst.id()))
        }
    }

    fn instance_env(&self, dir: &Path) -> Vec<(String, String)> {
        let Ok(text) = fs::read_to_string(dir.join(STATE_FILE)) else { return Vec::new() };
        text.lines()
            .filter_map(|l| l.split_once('='))
            .filter(|(k, _)| k.starts_with("FOG_"))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn pgids(&self, dir: &Path) -> Vec<u32> {
        fs::read_to_string(dir.join(PIDS_FILE))
            .unwrap_or_default()
            .lines()
            .filter_map(|l| l.split_whitespace().next()?.parse().ok())
            .collect()
    }

    fn reap(&self) {
        self.children
            .lock()
            .unwrap()
            .retain(|_, c| !matches!(c.try_wait(), Ok(Some(_))));
    }
}

/// `node:talker` logs to `talker.log`.
fn log_name(label: &str) -> String {
    label
        .rsplit(':')
        .next()
        .unwrap_or(label)
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

impl Provider for LocalProvider {
    fn kind(&self) -> &'static str {
        "local"
    }

    fn create_instance(
        &self,
        deployment: &str,
        name: &str,
        machine: &MachineSpec,
        rules: &SecurityRules,
    ) -> Result<InstanceHandle, ProviderError> {
        let inst = InstanceHandle {
            deployment: deployment.to_string(),
            name: name.to_string(),
        };
        let dir = self.sandbox(&inst);
        for sub in ["code", "setup", "logs", "creds"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        let mut state = format!(
            "instance_type={}\n{ENV_WORKERS}={}\n{ENV_GPU}={}\n{ENV_DEPLOYMENT}={deployment}\n{ENV_INSTANCE}={name}\n{ENV_ALLOWED_PORTS}={}\n",
            machine.instance_type,
            machine.worker_count,
            u8::from(machine.gpu),
            join_set(&rules.inbound_ports),
        );
        if !rules.peer_allowlist.is_empty() {
            state.push_str(&format!("{ENV_ALLOWED_PEERS}={}\n", join_set(&rules.peer_allowlist)));
        }
        fs::write(dir.join(STATE_FILE), state)?;
        std::thread::sleep(Duration::from_millis(machine.startup_delay_ms));
        Ok(inst)
    }

    fn address(&self, inst: &InstanceHandle) -> Result<String, ProviderError> {
        self.existing_sandbox(inst)?;
        Ok("127.0.0.1".into())
    }

    fn push_files(&self, inst: &InstanceHandle, local: &[PathBuf], remote_root: &str) -> Result<(), ProviderError> {
        let dest = self.existing_sandbox(inst)?.join(remote_root);
        fs::create_dir_all(&dest)?;
        for p in local {
            copy_into(p, &dest)?;
        }
        Ok(())
    }

    fn exec(&self, inst: &InstanceHandle, req: &ExecRequest) -> Result<ExecOutcome, ProviderError> {
        let dir = self.existing_sandbox(inst)?;
        let program = if req.program == FOG_PROGRAM {
            self.fog_exe.clone()
        } else {
            dir.join("code").join(&req.program)
        };
        let mut cmd = Command::new(&program);
        cmd.args(&req.args)
            .current_dir(dir.join("code"))
            .envs(self.instance_env(&dir))
            .envs(req.env.iter().cloned())
            .stdin(Stdio::null())
            .process_group(0);
        let spawn_err = |e: io::Error| ProviderError::Spawn {
            program: program.display().to_string(),
            cause: e.to_string(),
        };
        if req.detach {
            let log_path = dir.join("logs").join(format!("{}.log", log_name(&req.label)));
            let log = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
            cmd.stdout(log.try_clone()?).stderr(log);
            let child = cmd.spawn().map_err(spawn_err)?;
            let pid = child.id();
            let mut pids = fs::OpenOptions::new().create(true).append(true).open(dir.join(PIDS_FILE))?;
            io::Write::write_all(&mut pids, format!("{pid} {}\n", req.label).as_bytes())?;
            self.children.lock().unwrap().insert(pid, child);
            Ok(ExecOutcome {
                status: 0,
                output: String::new(),
                pid: Some(pid),
            })
        } else {
            let out = cmd.output().map_err(spawn_err)?;
            let mut output = String::from_utf8_lossy(&out.stdout).into_owned();
            output.push_str(&String::from_utf8_lossy(&out.stderr));
            Ok(ExecOutcome {
                status: out.status.code().unwrap_or(-1),
                output,
                pid: None,
            })
        }
    }

    fn terminate(&self, inst: &InstanceHandle) -> Result<(), ProviderError> {
        let dir = self.sandbox(inst);
        if !dir.exists() {
            return Ok(());
        }
        let pgids = self.pgids(&dir);
        stop_groups(&pgids, Duration::from_millis(1500), || self.reap());
        fs::remove_dir_all(&dir)?;
        let parent = self.deployment_dir(&inst.deployment);
        if fs::read_dir(&parent).is_ok_and(|mut d| d.next().is_none()) {
            let _ = fs::remove_dir(&parent);
        }
        Ok(())
    }

    fn list_instances(&self, deployment: &str) -> Result<Vec<InstanceHandle>, ProviderError> {
        let dir = self.deployment_dir(deployment);
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for e in entries {
            let e = e?;
            if e.path().join(STATE_FILE).is_file() {
                out.push(InstanceHandle {
                    deployment: deployment.to_string(),
                    name: e.file_name().to_string_lossy().into_owned(),
                });
            }
        }
        out.sort();
        Ok(out)
    }

    fn process_alive(&self, _inst: &InstanceHandle, pid: u32) -> bool {
        self.reap();
        pid_running(pid)
    }

    fn port_open(&self, _inst: &InstanceHandle, port: u16) -> bool {
        crate::net::is_listening(&format!("127.0.0.1:{port}"))
    }
}

/// A provider standing in for a remote cloud API: instances exist only as
/// records and commands return scripted results. State can be kept in a
/// file so separate processes see the same instances.
pub struct MockRemoteProvider {
    state_file: Option<PathBuf>,
    mem: Mutex<BTreeMap<String, serde_json::Value>>,
    scripted: Mutex<HashMap<String, ExecOutcome>>,
    calls: Mutex<Vec<String>>,
    next_pid: Mutex<u32>,
}

impl MockRemoteProvider {
    pub fn in_memory() -> Self {
        MockRemoteProvider {
            state_file: None,
            mem: Mutex::new(BTreeMap::new()),
            scripted: Mutex::new(HashMap::new()),
            calls: Mutex::new(Vec::new()),
            next_pid: Mutex::new(10_000),
        }
    }

    pub fn persistent(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        let mem = fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        MockRemoteProvider {
            state_file: Some(path),
            mem: Mutex::new(mem),
            ..Self::in_memory()
        }
    }

    /// Makes exec requests with this label return `outcome`.
    pub fn script(&self, label: &str, outcome: ExecOutcome) {
        self.scripted.lock().unwrap().insert(label.to_string(), outcome);
    }

    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }

    fn log(&self, s: String) {
        self.calls.lock().unwrap().push(s);
    }

    fn save(&self, mem: &BTreeMap<String, serde_json::Value>) -> io::Result<()> {
        match &self.state_file {
            Some(p) => fs::write(p, serde_json::to_string(mem).map_err(io::Error::other)?),
            None => Ok(()),
        }
    }

    fn check(&self, inst: &InstanceHandle) -> Result<(), ProviderError> {
        if self.mem.lock().unwrap().contains_key(&inst.id()) {
            Ok(())
        } else {
            Err(ProviderError::NoSuchInstance(inst.id()))
        }
    }
}

impl Provider for MockRemoteProvider {
    fn kind(&self) -> &'static str {
        "mock-remote"
    }

    fn create_instance(
        &self,
        deployment: &str,
        name: &str,
        machine: &MachineSpec,
        rules: &SecurityRules,
    ) -> Result<InstanceHandle, ProviderError> {
        let inst = InstanceHandle {
            deployment: deployment.into(),
            name: name.into(),
        };
        self.log(format!("create {}", inst.id()));
        let mut mem = self.mem.lock().unwrap();
        mem.insert(
            inst.id(),
            serde_json::json!({
                "deployment": deployment,
                "name": name,
                "instance_type": machine.instance_type,
                "ports": rules.inbound_ports.iter().collect::<Vec<_>>(),
            }),
        );
        self.save(&mem)?;
        Ok(inst)
    }

    fn address(&self, inst: &InstanceHandle) -> Result<String, ProviderError> {
        self.check(inst)?;
        Ok("127.0.0.1".into())
    }

    fn push_files(&self, inst: &InstanceHandle, local: &[PathBuf], remote_root: &str) -> Result<(), ProviderError> {
        self.check(inst)?;
        self.log(format!("push {} {} files to {remote_root}", inst.id(), local.len()));
        Ok(())
    }

    fn exec(&self, inst: &InstanceHandle, req: &ExecRequest) -> Result<ExecOutcome, ProviderError> {
        self.check(inst)?;
        self.log(format!("exec {} {}", inst.id(), req.label));
        if let Some(o) = self.scripted.lock().unwrap().get(&req.label) {
            return Ok(o.clone());
        }
        let pid = req.detach.then(|| {
            let mut p = self.next_pid.lock().unwrap();
            *p += 1;
            *p
        });
        Ok(ExecOutcome {
            status: 0,
            output: String::new(),
            pid,
        })
    }

    fn terminate(&self, inst: &InstanceHandle) -> Result<(), ProviderError> {
        self.log(format!("terminate {}", inst.id()));
        let mut mem = self.mem.lock().unwrap();
        if mem.remove(&inst.id()).is_some() {
            self.save(&mem)?;
        }
        Ok(())
    }

    fn list_instances(&self, deployment: &str) -> Result<Vec<InstanceHandle>, ProviderError> {
        Ok(self
            .mem
            .lock()
            .unwrap()
            .values()
            .filter(|v| v["deployment"] == deployment)
            .map(|v| InstanceHandle {
                deployment: deployment.into(),
                name: v["name"].as_str().unwrap_or_default().into(),
            })
            .collect())
    }

    fn process_alive(&self, inst: &InstanceHandle, _pid: u32) -> bool {
        self.check(inst).is_ok()
    }

    fn port_open(&self, inst: &InstanceHandle, _port: u16) -> bool {
        self.check(inst).is_ok()
    }
}

/// Wraps a provider and fails the first call matching `op` whose label (for
/// exec) starts with `label_prefix`.
pub struct FaultyProvider<P> {
    inner: P,
    op: Op,
    label_prefix: String,
    fired: Mutex<bool>,
}

impl<P: Provider> FaultyProvider<P> {
    pub fn new(inner: P, op: Op, label_prefix: &str) -> Self {
        FaultyProvider {
            inner,
            op,
            label_prefix: label_prefix.to_string(),
            fired: Mutex::new(false),
        }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn fired(&self) -> bool {
        *self.fired.lock().unwrap()
    }

    fn trip(&self, op: Op, label: &str) -> Result<(), ProviderError> {
        let mut fired = self.fired.lock().unwrap();
        if !*fired && op == self.op && label.starts_with(&self.label_prefix) {
            *fired = true;
            return Err(ProviderError::Injected(op, label.to_string()));
        }
        Ok(())
    }
}

impl<P: Provider> Provider for FaultyProvider<P> {
    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    fn create_instance(
        &self,
        deployment: &str,
        name: &str,
        machine: &MachineSpec,
        rules: &SecurityRules,
    ) -> Result<InstanceHandle, ProviderError> {
        self.trip(Op::Create, name)?;
        self.inner.create_instance(deployment, name, machine, rules)
    }

    fn address(&self, inst: &InstanceHandle) -> Result<String, ProviderError> {
        self.inner.address(inst)
    }

    fn push_files(&self, inst: &InstanceHandle, local: &[PathBuf], remote_root: &str) -> Result<(), ProviderError> {
        self.trip(Op::Push, remote_root)?;
        self.inner.push_files(inst, local, remote_root)
    }

    fn exec(&self, inst: &InstanceHandle, req: &ExecRequest) -> Result<ExecOutcome, ProviderError> {
        self.trip(Op::Exec, &req.label)?;
        self.inner.exec(inst, req)
    }

    fn terminate(&self, inst: &InstanceHandle) -> Result<(), ProviderError> {
        self.trip(Op::Terminate, &inst.name)?;
        self.inner.terminate(inst)
    }

    fn list_instances(&self, deployment: &str) -> Result<Vec<InstanceHandle>, ProviderError> {
        self.inner.list_instances(deployment)
    }

    fn process_alive(&self, inst: &InstanceHandle, pid: u32) -> bool {
        self.inner.process_alive(inst, pid)
    }

    fn port_open(&self, inst: &InstanceHandle, port: u16) -> bool {
        self.inner.port_open(inst, port)
    }
}
