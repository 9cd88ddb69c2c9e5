//! Deployment records and their on-disk store.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fog_core::manifest::{parse_list, parse_sections, NetworkMode};

use crate::provider::InstanceHandle;

pub const ENV_STATE_DIR: &str = "FOG_STATE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeploymentStatus {
    Provisioning,
    Pushing,
    Setup,
    Networking,
    Running,
    Failed,
    TornDown,
}

impl DeploymentStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            DeploymentStatus::Provisioning => "PROVISIONING",
            DeploymentStatus::Pushing => "PUSHING",
            DeploymentStatus::Setup => "SETUP",
            DeploymentStatus::Networking => "NETWORKING",
            DeploymentStatus::Running => "RUNNING",
            DeploymentStatus::Failed => "FAILED",
            DeploymentStatus::TornDown => "TORN_DOWN",
        }
    }

    /// Status entered when step `k` (1-based) starts.
    pub fn for_step(k: u8) -> Self {
        match k {
            1 => DeploymentStatus::Provisioning,
            2 => DeploymentStatus::Pushing,
            3 => DeploymentStatus::Setup,
            _ => DeploymentStatus::Networking,
        }
    }
}

impl fmt::Display for DeploymentStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeploymentStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "PROVISIONING" => DeploymentStatus::Provisioning,
            "PUSHING" => DeploymentStatus::Pushing,
            "SETUP" => DeploymentStatus::Setup,
            "NETWORKING" => DeploymentStatus::Networking,
            "RUNNING" => DeploymentStatus::Running,
            "FAILED" => DeploymentStatus::Failed,
            "TORN_DOWN" => DeploymentStatus::TornDown,
            other => return Err(format!("unknown status {other}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessRecord {
    pub label: String,
    pub pid: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepFailure {
    pub group: String,
    pub step: u8,
    pub name: String,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EdgeRecord {
    pub instance: Option<InstanceHandle>,
    pub registry: String,
    pub ports: Vec<u16>,
    pub processes: Vec<ProcessRecord>,
    pub nodes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupRecord {
    pub name: String,
    pub instance: Option<InstanceHandle>,
    pub instance_type: String,
    pub host: String,
    pub network: NetworkMode,
    pub registry: Option<String>,
    pub channel: Option<String>,
    pub ports: Vec<u16>,
    pub processes: Vec<ProcessRecord>,
    pub nodes: Vec<String>,
    pub image: Option<String>,
    /// Status file of this group's edge-side proxy or monitor.
    pub status_file: Option<PathBuf>,
}

impl GroupRecord {
    pub fn new(name: &str, instance_type: &str, network: NetworkMode) -> Self {
        GroupRecord {
            name: name.to_string(),
            instance: None,
            instance_type: instance_type.to_string(),
            host: String::new(),
            network,
            registry: None,
            channel: None,
            ports: Vec::new(),
            processes: Vec::new(),
            nodes: Vec::new(),
            image: None,
            status_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeploymentRecord {
    pub id: String,
    pub status: DeploymentStatus,
    pub provider: String,
    pub sandbox_root: PathBuf,
    pub secret_id: String,
    pub trace: bool,
    pub manifest: Option<PathBuf>,
    pub failure: Option<StepFailure>,
    /// Every status the deployment has been in, in order.
    pub history: Vec<DeploymentStatus>,
    pub edge: EdgeRecord,
    pub groups: Vec<GroupRecord>,
}

impl DeploymentRecord {
    pub fn new(id: &str, provider: &str, sandbox_root: &Path) -> Self {
        DeploymentRecord {
            id: id.to_string(),
            status: DeploymentStatus::Provisioning,
            provider: provider.to_string(),
            sandbox_root: sandbox_root.to_path_buf(),
            secret_id: String::new(),
            trace: false,
            manifest: None,
            failure: None,
            history: vec![DeploymentStatus::Provisioning],
            edge: EdgeRecord::default(),
            groups: Vec::new(),
        }
    }

    pub fn set_status(&mut self, s: DeploymentStatus) {
        if self.status != s {
            self.status = s;
            self.history.push(s);
        }
    }

    pub fn group(&self, name: &str) -> Option<&GroupRecord> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut GroupRecord> {
        self.groups.iter_mut().find(|g| g.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = format!("[deployment {}]\n", self.id);
        kv(&mut out, "status", self.status.as_str());
        kv(&mut out, "provider", &self.provider);
        kv(&mut out, "sandbox_root", &self.sandbox_root.display().to_string());
        kv(&mut out, "secret_id", &self.secret_id);
        kv(&mut out, "trace", if self.trace { "true" } else { "false" });
        if let Some(m) = &self.manifest {
            kv(&mut out, "manifest", &m.display().to_string());
        }
        let hist: Vec<&str> = self.history.iter().map(|s| s.as_str()).collect();
        kv(&mut out, "history", &hist.join(", "));
        if let Some(f) = &self.failure {
            kv(&mut out, "failed_group", &f.group);
            kv(&mut out, "failed_step", &f.step.to_string());
            kv(&mut out, "failed_step_name", &f.name);
            kv(&mut out, "failed_cause", &one_line(&f.cause));
        }
        out.push_str("\n[edge edge]\n");
        if let Some(i) = &self.edge.instance {
            kv(&mut out, "instance", &i.name);
        }
        kv(&mut out, "registry", &self.edge.registry);
        kv(&mut out, "ports", &ports_str(&self.edge.ports));
        kv(&mut out, "processes", &procs_str(&self.edge.processes));
        kv(&mut out, "nodes", &self.edge.nodes.join(", "));
        for g in &self.groups {
            out.push_str(&format!("\n[group {}]\n", g.name));
            if let Some(i) = &g.instance {
                kv(&mut out, "instance", &i.name);
            }
            kv(&mut out, "instance_type", &g.instance_type);
            kv(&mut out, "host", &g.host);
            kv(&mut out, "network", &g.network.to_string());
            if let Some(r) = &g.registry {
                kv(&mut out, "registry", r);
            }
            if let Some(c) = &g.channel {
                kv(&mut out, "channel", c);
            }
            if let Some(i) = &g.image {
                kv(&mut out, "image", i);
            }
            kv(&mut out, "ports", &ports_str(&g.ports));
            kv(&mut out, "processes", &procs_str(&g.processes));
            kv(&mut out, "nodes", &g.nodes.join(", "));
            if let Some(p) = &g.status_file {
                kv(&mut out, "status_file", &p.display().to_string());
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let sections = parse_sections(text).map_err(|e| e.to_string())?;
        let mut it = sections.iter();
        let head = it
            .next()
            .filter(|s| s.kind == "deployment")
            .ok_or("record must start with a [deployment] section")?;
        let get = |s: &fog_core::manifest::Section<'_>, k: &str| s.get(k).map(|(_, v)| v.to_string());
        let req = |s: &fog_core::manifest::Section<'_>, k: &str| get(s, k).ok_or(format!("missing key {k}"));
        let mut rec = DeploymentRecord::new(head.name, &req(head, "provider")?, Path::new(&req(head, "sandbox_root")?));
        rec.status = req(head, "status")?.parse()?;
        rec.secret_id = get(head, "secret_id").unwrap_or_default();
        rec.trace = get(head, "trace").as_deref() == Some("true");
        rec.manifest = get(head, "manifest").map(PathBuf::from);
        rec.history = parse_list(&get(head, "history").unwrap_or_default())
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()?;
        if let Some(group) = get(head, "failed_group") {
            rec.failure = Some(StepFailure {
                group,
                step: req(head, "failed_step")?.parse().map_err(|_| "bad failed_step")?,
                name: req(head, "failed_step_name")?,
                cause: get(head, "failed_cause").unwrap_or_default(),
            });
        }
        let inst = |s: &fog_core::manifest::Section<'_>| {
            get(s, "instance").map(|name| InstanceHandle {
                deployment: rec.id.clone(),
                name,
            })
        };
        for s in it {
            match s.kind {
                "edge" => {
                    rec.edge = EdgeRecord {
                        instance: inst(s),
                        registry: get(s, "registry").unwrap_or_default(),
                        ports: parse_ports(&get(s, "ports").unwrap_or_default())?,
                        processes: parse_procs(&get(s, "processes").unwrap_or_default())?,
                        nodes: parse_list(&get(s, "nodes").unwrap_or_default()),
                    }
                }
                "group" => {
                    let network = NetworkMode::parse(&req(s, "network")?).ok_or("bad network mode")?;
                    let mut g = GroupRecord::new(s.name, &req(s, "instance_type")?, network);
                    g.instance = inst(s);
                    g.host = get(s, "host").unwrap_or_default();
                    g.registry = get(s, "registry");
                    g.channel = get(s, "channel");
                    g.image = get(s, "image");
                    g.ports = parse_ports(&get(s, "ports").unwrap_or_default())?;
                    g.processes = parse_procs(&get(s, "processes").unwrap_or_default())?;
                    g.nodes = parse_list(&get(s, "nodes").unwrap_or_default());
                    g.status_file = get(s, "status_file").map(PathBuf::from);
                    rec.groups.push(g);
                }
                other => return Err(format!("unknown section kind {other}")),
            }
        }
        Ok(rec)
    }
}

fn kv(out: &mut String, k: &str, v: &str) {
    out.push_str(k);
    out.push_str(" = ");
    out.push_str(v);
    out.push('\n');
}

fn one_line(s: &str) -> String {
    s.replace(['\n', '#'], " ")
}

fn ports_str(p: &[u16]) -> String {
    p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

fn procs_str(p: &[ProcessRecord]) -> String {
    p.iter().map(|r| format!("{}:{}", r.pid, r.label)).collect::<Vec<_>>().join(", ")
}

fn parse_ports(s: &str) -> Result<Vec<u16>, String> {
    parse_list(s).iter().map(|p| p.parse().map_err(|_| format!("bad port {p}"))).collect()
}

fn parse_procs(s: &str) -> Result<Vec<ProcessRecord>, String> {
    parse_list(s)
        .iter()
        .map(|e| {
            let (pid, label) = e.split_once(':').ok_or(format!("bad process entry {e}"))?;
            Ok(ProcessRecord {
                label: label.to_string(),
                pid: pid.parse().map_err(|_| format!("bad pid {pid}"))?,
            })
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("state i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt record {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("deployment {0} is locked by another command")]
    Locked(String),
}

/// Directory of `<id>.record` files.
#[derive(Debug, Clone)]
pub struct StateStore {
    dir: PathBuf,
}

impl StateStore {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(StateStore { dir })
    }

    /// `FOG_STATE_DIR`, else `$XDG_STATE_HOME/fog`, else `~/.local/state/fog`.
    pub fn default_dir() -> PathBuf {
        if let Some(d) = std::env::var_os(ENV_STATE_DIR) {
            return d.into();
        }
        if let Some(d) = std::env::var_os("XDG_STATE_HOME") {
            return PathBuf::from(d).join("fog");
        }
        match std::env::var_os("HOME") {
            Some(h) => PathBuf::from(h).join(".local/state/fog"),
            None => std::env::temp_dir().join("fog-state"),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.record"))
    }

    pub fn save(&self, rec: &DeploymentRecord) -> io::Result<()> {
        let tmp = self.dir.join(format!(".{}.tmp", rec.id));
        fs::write(&tmp, rec.render())?;
        fs::rename(tmp, self.path(&rec.id))
    }

    pub fn load(&self, id: &str) -> Result<Option<DeploymentRecord>, StateError> {
        let path = self.path(id);
        match fs::read_to_string(&path) {
            Ok(t) => DeploymentRecord::parse(&t)
                .map(Some)
                .map_err(|reason| StateError::Corrupt { path, reason }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn list(&self) -> io::Result<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(&self.dir)?
            .filter_map(|e| {
                let name = e.ok()?.file_name().into_string().ok()?;
                name.strip_suffix(".record").map(str::to_string)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Takes the per-deployment lock. A lock left by a dead process is
    /// taken over.
    pub fn lock(&self, id: &str) -> Result<LockGuard, StateError> {
        let path = self.dir.join(format!("{id}.lock"));
        for _ in 0..2 {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id())?;
                    return Ok(LockGuard { path });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    let holder: Option<u32> = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse().ok());
                    match holder {
                        Some(pid) if crate::provider::pid_running(pid) => return Err(StateError::Locked(id.into())),
                        _ => {
                            let _ = fs::remove_file(&path);
                        }
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(StateError::Locked(id.into()))
    }
}

pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
