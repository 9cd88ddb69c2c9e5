//! Launch manifests (`.fog` files) and machine catalogs.
//!
//! Both use one sectioned `key = value` format:
//!
//! ```text
//! # camera stays local, the planner runs on a big instance
//! [node camera]
//! package = fog_bench
//! exec = source
//! placement = edge
//!
//! [node planner]
//! package = mpt_ros
//! exec = planner
//! args = --threads, 96
//! placement = cloud:planner
//!
//! [cloud planner]
//! instance_type = c5.24xlarge
//! setup_script = init.bash
//! network = proxy
//! topics = /plan_request, /plan_result
//! ```
//!
//! Lists are comma-separated, `#` starts a comment, unknown keys are errors.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::{self, Write as _};

use crate::topic::TopicName;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placement {
    Edge,
    Cloud(String),
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Edge => f.write_str("edge"),
            Placement::Cloud(g) => write!(f, "cloud:{g}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum NetworkMode {
    /// All nodes share the edge registry over a flat address space.
    #[default]
    Direct,
    /// Separate registries joined by a proxy pair.
    Proxy,
}

impl NetworkMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NetworkMode::Direct => "direct",
            NetworkMode::Proxy => "proxy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "direct" | "vpc" => Some(NetworkMode::Direct),
            "proxy" => Some(NetworkMode::Proxy),
            _ => None,
        }
    }
}

impl fmt::Display for NetworkMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Eq)]
pub struct NodeSpec {
    pub name: String,
    pub package: String,
    pub exec: String,
    pub args: Vec<String>,
    pub placement: Placement,
    /// Line of the section header; not part of equality.
    pub line: usize,
}

impl PartialEq for NodeSpec {
    fn eq(&self, o: &Self) -> bool {
        self.name == o.name
            && self.package == o.package
            && self.exec == o.exec
            && self.args == o.args
            && self.placement == o.placement
    }
}

#[derive(Debug, Clone, Eq)]
pub struct CloudGroupSpec {
    pub name: String,
    pub instance_type: String,
    pub setup_script: Option<String>,
    pub image: Option<String>,
    pub network: NetworkMode,
    /// Explicit topic allowlist; `None` means automatic discovery.
    pub topics: Option<Vec<String>>,
    pub region: Option<String>,
    pub line: usize,
}

impl PartialEq for CloudGroupSpec {
    fn eq(&self, o: &Self) -> bool {
        self.name == o.name
            && self.instance_type == o.instance_type
            && self.setup_script == o.setup_script
            && self.image == o.image
            && self.network == o.network
            && self.topics == o.topics
            && self.region == o.region
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LaunchManifest {
    pub nodes: Vec<NodeSpec>,
    pub cloud_groups: BTreeMap<String, CloudGroupSpec>,
}

impl LaunchManifest {
    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn nodes_in<'a>(&'a self, group: &'a str) -> impl Iterator<Item = &'a NodeSpec> + 'a {
        self.nodes
            .iter()
            .filter(move |n| matches!(&n.placement, Placement::Cloud(g) if g == group))
    }

    pub fn edge_nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(|n| n.placement == Placement::Edge)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestErrorKind {
    Syntax(String),
    UnknownKey(String),
    UnknownSection(String),
    DuplicateKey(String),
    DuplicateNode(String),
    DuplicateGroup(String),
    DanglingGroupRef { node: String, group: String },
    MissingKey(&'static str),
    InvalidValue { key: String, reason: String },
    ImageWithPackage { node: String, group: String },
    NoNodes,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {kind}")]
pub struct ManifestError {
    pub line: usize,
    pub kind: ManifestErrorKind,
}

impl fmt::Display for ManifestErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ManifestErrorKind::Syntax(s) => write!(f, "syntax error: {s}"),
            ManifestErrorKind::UnknownKey(k) => write!(f, "unknown key `{k}`"),
            ManifestErrorKind::UnknownSection(s) => write!(f, "unknown section `{s}`"),
            ManifestErrorKind::DuplicateKey(k) => write!(f, "duplicate key `{k}`"),
            ManifestErrorKind::DuplicateNode(n) => write!(f, "duplicate node `{n}`"),
            ManifestErrorKind::DuplicateGroup(g) => write!(f, "duplicate cloud group `{g}`"),
            ManifestErrorKind::DanglingGroupRef { node, group } => {
                write!(f, "node `{node}` references unknown cloud group `{group}`")
            }
            ManifestErrorKind::MissingKey(k) => write!(f, "missing required key `{k}`"),
            ManifestErrorKind::InvalidValue { key, reason } => {
                write!(f, "invalid value for `{key}`: {reason}")
            }
            ManifestErrorKind::ImageWithPackage { node, group } => write!(
                f,
                "node `{node}` names a package but group `{group}` runs a container image"
            ),
            ManifestErrorKind::NoNodes => f.write_str("manifest declares no nodes"),
        }
    }
}

fn err(line: usize, kind: ManifestErrorKind) -> ManifestError {
    ManifestError { line, kind }
}

/// One `[kind name]` section with its `(line, key, value)` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section<'a> {
    pub kind: &'a str,
    pub name: &'a str,
    pub line: usize,
    pub entries: Vec<(usize, &'a str, &'a str)>,
}

impl<'a> Section<'a> {
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), ManifestError> {
        let mut seen = BTreeSet::new();
        for &(line, key, _) in &self.entries {
            if !allowed.contains(&key) {
                return Err(err(line, ManifestErrorKind::UnknownKey(key.to_string())));
            }
            if !seen.insert(key) {
                return Err(err(line, ManifestErrorKind::DuplicateKey(key.to_string())));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<(usize, &'a str)> {
        self.entries
            .iter()
            .find(|(_, k, _)| *k == key)
            .map(|&(l, _, v)| (l, v))
    }
}

fn valid_ident(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Splits text in the sectioned `key = value` format into sections. Shared
/// by manifests, machine catalogs and persisted deployment records.
pub fn parse_sections(text: &str) -> Result<Vec<Section<'_>>, ManifestError> {
    let mut sections: Vec<Section<'_>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let inner = rest
                .strip_suffix(']')
                .ok_or_else(|| err(line, ManifestErrorKind::Syntax("unterminated section header".into())))?;
            let mut parts = inner.split_whitespace();
            let (kind, name) = match (parts.next(), parts.next(), parts.next()) {
                (Some(k), Some(n), None) => (k, n),
                _ => {
                    return Err(err(
                        line,
                        ManifestErrorKind::Syntax("section header must be `[kind name]`".into()),
                    ))
                }
            };
            if !valid_ident(name) {
                return Err(err(
                    line,
                    ManifestErrorKind::InvalidValue {
                        key: "section name".into(),
                        reason: format!("`{name}` is not a valid identifier"),
                    },
                ));
            }
            sections.push(Section {
                kind,
                name,
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line, ManifestErrorKind::Syntax("expected `key = value`".into())))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(err(line, ManifestErrorKind::Syntax("empty key".into())));
        }
        let section = sections
            .last_mut()
            .ok_or_else(|| err(line, ManifestErrorKind::Syntax("key outside of any section".into())))?;
        section.entries.push((line, key, value.trim()));
    }
    Ok(sections)
}

pub fn parse_list(v: &str) -> Vec<String> {
    if v.is_empty() {
        return Vec::new();
    }
    v.split(',').map(|s| s.trim().to_string()).collect()
}

const NODE_KEYS: &[&str] = &["package", "exec", "args", "placement"];
const CLOUD_KEYS: &[&str] = &[
    "instance_type",
    "setup_script",
    "image",
    "network",
    "topics",
    "region",
];

/// Parses a launch manifest. Structural invariants (unique names, group
/// references, image/package exclusivity) are enforced here; environmental
/// checks live in [`validate`].
pub fn parse_manifest(text: &str) -> Result<LaunchManifest, ManifestError> {
    let mut m = LaunchManifest::default();
    for sec in parse_sections(text)? {
        match sec.kind {
            "node" => {
                sec.check_keys(NODE_KEYS)?;
                if m.node(sec.name).is_some() {
                    return Err(err(sec.line, ManifestErrorKind::DuplicateNode(sec.name.into())));
                }
                let placement = match sec.get("placement") {
                    None => Placement::Edge,
                    Some((_, "edge")) => Placement::Edge,
                    Some((l, v)) => match v.strip_prefix("cloud:") {
                        Some(g) if valid_ident(g) => Placement::Cloud(g.to_string()),
                        _ => {
                            return Err(err(
                                l,
                                ManifestErrorKind::InvalidValue {
                                    key: "placement".into(),
                                    reason: format!("`{v}` is neither `edge` nor `cloud:<group>`"),
                                },
                            ))
                        }
                    },
                };
                m.nodes.push(NodeSpec {
                    name: sec.name.to_string(),
                    package: sec.get("package").map(|(_, v)| v.to_string()).unwrap_or_default(),
                    exec: sec.get("exec").map(|(_, v)| v.to_string()).unwrap_or_default(),
                    args: sec.get("args").map(|(_, v)| parse_list(v)).unwrap_or_default(),
                    placement,
                    line: sec.line,
                });
            }
            "cloud" => {
                sec.check_keys(CLOUD_KEYS)?;
                if m.cloud_groups.contains_key(sec.name) {
                    return Err(err(sec.line, ManifestErrorKind::DuplicateGroup(sec.name.into())));
                }
                let instance_type = sec
                    .get("instance_type")
                    .map(|(_, v)| v.to_string())
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| err(sec.line, ManifestErrorKind::MissingKey("instance_type")))?;
                let network = match sec.get("network") {
                    None => NetworkMode::default(),
                    Some((l, v)) => NetworkMode::parse(v).ok_or_else(|| {
                        err(
                            l,
                            ManifestErrorKind::InvalidValue {
                                key: "network".into(),
                                reason: format!("`{v}` is neither `direct` nor `proxy`"),
                            },
                        )
                    })?,
                };
                let opt = |k: &str| sec.get(k).map(|(_, v)| v.to_string()).filter(|v| !v.is_empty());
                m.cloud_groups.insert(
                    sec.name.to_string(),
                    CloudGroupSpec {
                        name: sec.name.to_string(),
                        instance_type,
                        setup_script: opt("setup_script"),
                        image: opt("image"),
                        network,
                        topics: sec.get("topics").map(|(_, v)| parse_list(v)),
                        region: opt("region"),
                        line: sec.line,
                    },
                );
            }
            other => {
                return Err(err(sec.line, ManifestErrorKind::UnknownSection(other.to_string())));
            }
        }
    }
    if m.nodes.is_empty() && m.cloud_groups.values().all(|g| g.image.is_none()) {
        return Err(err(1, ManifestErrorKind::NoNodes));
    }
    for n in &m.nodes {
        let image_group = match &n.placement {
            Placement::Edge => None,
            Placement::Cloud(g) => {
                let group = m.cloud_groups.get(g).ok_or_else(|| {
                    err(
                        n.line,
                        ManifestErrorKind::DanglingGroupRef {
                            node: n.name.clone(),
                            group: g.clone(),
                        },
                    )
                })?;
                group.image.as_ref().map(|_| g)
            }
        };
        match image_group {
            Some(g) if !n.package.is_empty() => {
                return Err(err(
                    n.line,
                    ManifestErrorKind::ImageWithPackage {
                        node: n.name.clone(),
                        group: g.clone(),
                    },
                ))
            }
            Some(_) => {}
            None if n.package.is_empty() => {
                return Err(err(n.line, ManifestErrorKind::MissingKey("package")))
            }
            None if n.exec.is_empty() => return Err(err(n.line, ManifestErrorKind::MissingKey("exec"))),
            None => {}
        }
    }
    Ok(m)
}

/// Canonical text form; `parse_manifest(&render_manifest(m)) == m`.
pub fn render_manifest(m: &LaunchManifest) -> String {
    let mut out = String::new();
    for n in &m.nodes {
        let _ = writeln!(out, "[node {}]", n.name);
        if !n.package.is_empty() {
            let _ = writeln!(out, "package = {}", n.package);
        }
        if !n.exec.is_empty() {
            let _ = writeln!(out, "exec = {}", n.exec);
        }
        if !n.args.is_empty() {
            let _ = writeln!(out, "args = {}", n.args.join(", "));
        }
        let _ = writeln!(out, "placement = {}\n", n.placement);
    }
    for g in m.cloud_groups.values() {
        let _ = writeln!(out, "[cloud {}]", g.name);
        let _ = writeln!(out, "instance_type = {}", g.instance_type);
        if let Some(s) = &g.setup_script {
            let _ = writeln!(out, "setup_script = {s}");
        }
        if let Some(i) = &g.image {
            let _ = writeln!(out, "image = {i}");
        }
        let _ = writeln!(out, "network = {}", g.network);
        if let Some(t) = &g.topics {
            let _ = writeln!(out, "topics = {}", t.join(", "));
        }
        if let Some(r) = &g.region {
            let _ = writeln!(out, "region = {r}");
        }
        out.push('\n');
    }
    out
}

/// Packages each cloud group needs pushed. Edge-only manifests yield an
/// empty map.
pub fn collect_packages(m: &LaunchManifest) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for n in &m.nodes {
        if let Placement::Cloud(g) = &n.placement {
            if !n.package.is_empty() {
                out.entry(g.clone()).or_default().insert(n.package.clone());
            }
        }
    }
    out
}

/// Capabilities of one instance type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineSpec {
    pub instance_type: String,
    pub worker_count: u32,
    pub gpu: bool,
    pub startup_delay_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Catalog {
    machines: BTreeMap<String, MachineSpec>,
}

/// Desk-scale stand-ins for the instance types used in the examples.
pub const DEFAULT_CATALOG: &str = "\
[machine edge.1core]
workers = 1
gpu = false
startup_delay_ms = 0

[machine t2.micro]
workers = 1
gpu = false
startup_delay_ms = 20

[machine c4.8xlarge]
workers = 8
gpu = false
startup_delay_ms = 50

[machine c5.24xlarge]
workers = 8
gpu = false
startup_delay_ms = 50

[machine g4dn.xlarge]
workers = 4
gpu = true
startup_delay_ms = 50
";

impl Catalog {
    pub fn builtin() -> Self {
        Catalog::parse(DEFAULT_CATALOG).expect("builtin catalog parses")
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut machines = BTreeMap::new();
        for sec in parse_sections(text)? {
            if sec.kind != "machine" {
                return Err(err(sec.line, ManifestErrorKind::UnknownSection(sec.kind.to_string())));
            }
            sec.check_keys(&["workers", "gpu", "startup_delay_ms"])?;
            let invalid = |l: usize, key: &str, reason: &str| {
                err(
                    l,
                    ManifestErrorKind::InvalidValue {
                        key: key.to_string(),
                        reason: reason.to_string(),
                    },
                )
            };
            let worker_count = match sec.get("workers") {
                Some((l, v)) => match v.parse::<u32>() {
                    Ok(n) if n >= 1 => n,
                    _ => return Err(invalid(l, "workers", "must be a positive integer")),
                },
                None => return Err(err(sec.line, ManifestErrorKind::MissingKey("workers"))),
            };
            let gpu = match sec.get("gpu") {
                None | Some((_, "false")) => false,
                Some((_, "true")) => true,
                Some((l, _)) => return Err(invalid(l, "gpu", "must be true or false")),
            };
            let startup_delay_ms = match sec.get("startup_delay_ms") {
                None => 0,
                Some((l, v)) => v
                    .parse::<u64>()
                    .map_err(|_| invalid(l, "startup_delay_ms", "must be a nonnegative integer"))?,
            };
            machines.insert(
                sec.name.to_string(),
                MachineSpec {
                    instance_type: sec.name.to_string(),
                    worker_count,
                    gpu,
                    startup_delay_ms,
                },
            );
        }
        Ok(Catalog { machines })
    }

    pub fn get(&self, instance_type: &str) -> Option<&MachineSpec> {
        self.machines.get(instance_type)
    }

    pub fn insert(&mut self, spec: MachineSpec) {
        self.machines.insert(spec.instance_type.clone(), spec);
    }

    pub fn iter(&self) -> impl Iterator<Item = &MachineSpec> {
        self.machines.values()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DiagnosticCode {
    UnknownInstanceType,
    MissingSetupScript,
    InvalidTopic,
    EmptyTopicList,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub code: DiagnosticCode,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {:?}: {}", self.line, self.code, self.message)
    }
}

/// Deployability checks. `script_readable` answers whether a setup script
/// path exists and can be read. An empty result means deployable.
pub fn validate(
    m: &LaunchManifest,
    catalog: &Catalog,
    script_readable: impl Fn(&str) -> bool,
) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for g in m.cloud_groups.values() {
        if catalog.get(&g.instance_type).is_none() {
            out.push(Diagnostic {
                line: g.line,
                code: DiagnosticCode::UnknownInstanceType,
                message: format!("group `{}`: unknown instance type `{}`", g.name, g.instance_type),
            });
        }
        if let Some(s) = &g.setup_script {
            if !script_readable(s) {
                out.push(Diagnostic {
                    line: g.line,
                    code: DiagnosticCode::MissingSetupScript,
                    message: format!("group `{}`: setup script `{s}` is missing or unreadable", g.name),
                });
            }
        }
        match &g.topics {
            Some(list) if list.is_empty() => out.push(Diagnostic {
                line: g.line,
                code: DiagnosticCode::EmptyTopicList,
                message: format!("group `{}`: explicit topic list is empty", g.name),
            }),
            Some(list) => {
                for t in list.iter().filter(|t| TopicName::new(t).is_err()) {
                    out.push(Diagnostic {
                        line: g.line,
                        code: DiagnosticCode::InvalidTopic,
                        message: format!("group `{}`: `{t}` is not a valid topic name", g.name),
                    });
                }
            }
            None => {}
        }
    }
    out.sort_by_key(|d| (d.line, d.code));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLANNER: &str = "\
[node planner]
package = mpt_ros
exec = mpt_ros_node
placement = cloud:planner

[node ui]
package = rviz
exec = rviz
placement = edge

[cloud planner]
instance_type = c5.24xlarge
setup_script = init.bash
";

    #[test]
    fn cloud_group_with_setup_script() {
        let m = parse_manifest(PLANNER).unwrap();
        let g = &m.cloud_groups["planner"];
        assert_eq!(g.instance_type, "c5.24xlarge");
        assert_eq!(g.setup_script.as_deref(), Some("init.bash"));
        assert_eq!(g.image, None);
        assert_eq!(g.network, NetworkMode::Direct);
        assert_eq!(m.nodes[0].placement, Placement::Cloud("planner".into()));
        assert_eq!(m.nodes[0].line, 1);
        assert_eq!(g.line, 11);
    }

    #[test]
    fn container_group_needs_no_package_nodes() {
        let m = parse_manifest("[cloud grasp]\nimage = dexnet:gpu\ninstance_type = g4dn.xlarge\n").unwrap();
        let g = &m.cloud_groups["grasp"];
        assert_eq!(g.image.as_deref(), Some("dexnet:gpu"));
        assert!(m.nodes.is_empty());
        assert!(collect_packages(&m).is_empty());
    }

    #[test]
    fn dangling_group_reference() {
        let e = parse_manifest("[node a]\npackage = p\nexec = e\nplacement = cloud:missing\n").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(matches!(e.kind, ManifestErrorKind::DanglingGroupRef { ref group, .. } if group == "missing"));
    }

    #[test]
    fn strict_keys_and_syntax() {
        let e = parse_manifest("[node a]\npackage = p\nexec = e\nplacment = edge\n").unwrap_err();
        assert_eq!(e, err(4, ManifestErrorKind::UnknownKey("placment".into())));
        let e = parse_manifest("[node a]\npackage p\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(matches!(e.kind, ManifestErrorKind::Syntax(_)));
        let e = parse_manifest("package = p\n").unwrap_err();
        assert!(matches!(e.kind, ManifestErrorKind::Syntax(_)));
        let e = parse_manifest("[node a]\npackage = p\nexec = e\n[node a]\npackage = p\nexec = e\n").unwrap_err();
        assert_eq!(e, err(4, ManifestErrorKind::DuplicateNode("a".into())));
        let e = parse_manifest("[node a\n").unwrap_err();
        assert!(matches!(e.kind, ManifestErrorKind::Syntax(_)));
    }

    #[test]
    fn image_groups_reject_package_nodes() {
        let text = "[node a]\npackage = p\nexec = e\nplacement = cloud:g\n[cloud g]\ninstance_type = g4dn.xlarge\nimage = x:y\n";
        let e = parse_manifest(text).unwrap_err();
        assert!(matches!(e.kind, ManifestErrorKind::ImageWithPackage { .. }));
    }

    #[test]
    fn comments_args_and_topics() {
        let text = "# header\n[node a] # trailing\npackage = p\nexec = e\nargs = x, y ,z\n\n[cloud g]\ninstance_type = t2.micro\nnetwork = proxy\ntopics = /a, /b\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(m.nodes[0].args, ["x", "y", "z"]);
        let g = &m.cloud_groups["g"];
        assert_eq!(g.network, NetworkMode::Proxy);
        assert_eq!(g.topics.as_deref(), Some(&["/a".to_string(), "/b".to_string()][..]));
    }

    #[test]
    fn collect_packages_dedups_and_skips_edge() {
        let text = "[node a]\npackage = shared\nexec = x\nplacement = cloud:g\n[node b]\npackage = shared\nexec = y\nplacement = cloud:g\n[node c]\npackage = local\nexec = z\n[cloud g]\ninstance_type = t2.micro\n";
        let m = parse_manifest(text).unwrap();
        let pk = collect_packages(&m);
        assert_eq!(pk.len(), 1);
        assert_eq!(pk["g"].len(), 1);
        assert!(pk["g"].contains("shared"));

        let m = parse_manifest(PLANNER).unwrap();
        let pk = collect_packages(&m);
        assert_eq!(pk.len(), 1);
        assert_eq!(pk["planner"].iter().collect::<Vec<_>>(), ["mpt_ros"]);

        let m = parse_manifest("[node a]\npackage = p\nexec = e\n").unwrap();
        assert!(collect_packages(&m).is_empty());
    }

    #[test]
    fn validate_reports_deterministic_diagnostics() {
        let cat = Catalog::builtin();
        let m = parse_manifest(PLANNER).unwrap();
        assert!(validate(&m, &cat, |_| true).is_empty());
        let d = validate(&m, &cat, |_| false);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].code, DiagnosticCode::MissingSetupScript);

        let text = "[node a]\npackage = p\nexec = e\nplacement = cloud:g\n[cloud g]\ninstance_type = z9.mega\ntopics = /ok, bad\n";
        let m = parse_manifest(text).unwrap();
        let d = validate(&m, &cat, |_| true);
        let codes: Vec<_> = d.iter().map(|d| d.code).collect();
        assert_eq!(codes, [DiagnosticCode::UnknownInstanceType, DiagnosticCode::InvalidTopic]);
    }

    #[test]
    fn render_round_trips() {
        let m = parse_manifest(PLANNER).unwrap();
        assert_eq!(parse_manifest(&render_manifest(&m)).unwrap(), m);
    }

    #[test]
    fn builtin_catalog() {
        let cat = Catalog::builtin();
        assert_eq!(cat.get("c5.24xlarge").unwrap().worker_count, 8);
        assert!(cat.get("g4dn.xlarge").unwrap().gpu);
        assert!(Catalog::parse("[machine x]\nworkers = 0\n").is_err());
    }
}
