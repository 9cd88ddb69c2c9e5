//! Ordered deployment steps derived from a manifest.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::manifest::{Catalog, LaunchManifest, MachineSpec, NetworkMode, NodeSpec};
use crate::topic::TopicName;

/// What a group step does. Every group runs exactly five steps in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepKind {
    /// 1: start an instance with security rules applied.
    Provision,
    /// 2: copy package code to the instance.
    PushCode { packages: BTreeSet<String> },
    /// 2 (container groups): fetch the container image.
    PullImage { image: String },
    /// 3: run the setup script; a no-op when there is none.
    Setup { script: Option<String> },
    /// 4: join the edge registry's flat address space.
    NetworkDirect,
    /// 4: start the proxy pair.
    NetworkProxy { topics: Option<Vec<TopicName>> },
    /// 5: start the group's nodes.
    LaunchNodes { nodes: Vec<String> },
    /// 5 (container groups): start the container.
    RunContainer { image: String },
}

impl StepKind {
    pub fn index(&self) -> u8 {
        match self {
            StepKind::Provision => 1,
            StepKind::PushCode { .. } | StepKind::PullImage { .. } => 2,
            StepKind::Setup { .. } => 3,
            StepKind::NetworkDirect | StepKind::NetworkProxy { .. } => 4,
            StepKind::LaunchNodes { .. } | StepKind::RunContainer { .. } => 5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StepKind::Provision => "provision",
            StepKind::PushCode { .. } => "push",
            StepKind::PullImage { .. } => "pull-image",
            StepKind::Setup { .. } => "setup",
            StepKind::NetworkDirect => "network-direct",
            StepKind::NetworkProxy { .. } => "network-proxy",
            StepKind::LaunchNodes { .. } => "launch",
            StepKind::RunContainer { .. } => "run-container",
        }
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPlan {
    pub group: String,
    pub machine: MachineSpec,
    pub network: NetworkMode,
    pub image: Option<String>,
    pub nodes: Vec<NodeSpec>,
    pub steps: Vec<StepKind>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeploymentPlan {
    pub edge_nodes: Vec<NodeSpec>,
    pub groups: Vec<GroupPlan>,
}

/// A step as listed for display: either the edge launch or a group step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlannedStep {
    EdgeLaunch { nodes: Vec<String> },
    Group { group: String, step: StepKind },
}

impl DeploymentPlan {
    pub fn needs_proxy(&self) -> bool {
        self.groups.iter().any(|g| g.network == NetworkMode::Proxy)
    }

    /// Flattened step list: the edge launch, then each group's five steps.
    pub fn step_list(&self) -> Vec<PlannedStep> {
        let mut out = Vec::new();
        out.push(PlannedStep::EdgeLaunch {
            nodes: self.edge_nodes.iter().map(|n| n.name.clone()).collect(),
        });
        for g in &self.groups {
            for s in &g.steps {
                out.push(PlannedStep::Group {
                    group: g.group.clone(),
                    step: s.clone(),
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}

pub fn plan_deployment(m: &LaunchManifest, catalog: &Catalog) -> Result<DeploymentPlan, PlanError> {
    let packages = crate::manifest::collect_packages(m);
    let mut groups = Vec::new();
    for g in m.cloud_groups.values() {
        let machine = catalog.get(&g.instance_type).cloned().ok_or_else(|| {
            PlanError::InvalidManifest(format!(
                "group `{}`: unknown instance type `{}`",
                g.name, g.instance_type
            ))
        })?;
        let topics = match &g.topics {
            None => None,
            Some(list) if list.is_empty() => {
                return Err(PlanError::InvalidManifest(format!(
                    "group `{}`: explicit topic list is empty",
                    g.name
                )))
            }
            Some(list) => Some(
                list.iter()
                    .map(|t| {
                        TopicName::new(t).map_err(|e| {
                            PlanError::InvalidManifest(format!("group `{}`: topic `{t}`: {e}", g.name))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        let nodes: Vec<NodeSpec> = m.nodes_in(&g.name).cloned().collect();
        let (fetch, run) = match &g.image {
            Some(image) => (
                StepKind::PullImage { image: image.clone() },
                StepKind::RunContainer { image: image.clone() },
            ),
            None => (
                StepKind::PushCode {
                    packages: packages.get(&g.name).cloned().unwrap_or_default(),
                },
                StepKind::LaunchNodes {
                    nodes: nodes.iter().map(|n| n.name.clone()).collect(),
                },
            ),
        };
        let network = match g.network {
            NetworkMode::Direct => StepKind::NetworkDirect,
            NetworkMode::Proxy => StepKind::NetworkProxy { topics },
        };
        groups.push(GroupPlan {
            group: g.name.clone(),
            machine,
            network: g.network,
            image: g.image.clone(),
            nodes,
            steps: alloc::vec![
                StepKind::Provision,
                fetch,
                StepKind::Setup {
                    script: g.setup_script.clone(),
                },
                network,
                run,
            ],
        });
    }
    Ok(DeploymentPlan {
        edge_nodes: m.edge_nodes().cloned().collect(),
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::parse_manifest;

    #[test]
    fn edge_only_manifest_plans_only_the_edge_launch() {
        let m = parse_manifest("[node a]\npackage = p\nexec = e\n").unwrap();
        let plan = plan_deployment(&m, &Catalog::builtin()).unwrap();
        assert_eq!(
            plan.step_list(),
            [PlannedStep::EdgeLaunch {
                nodes: alloc::vec!["a".into()]
            }]
        );
    }

    #[test]
    fn group_gets_five_ordered_steps() {
        let m = parse_manifest(
            "[node planner]\npackage = mpt_ros\nexec = run\nplacement = cloud:planner\n[cloud planner]\ninstance_type = c5.24xlarge\nsetup_script = init.bash\n",
        )
        .unwrap();
        let plan = plan_deployment(&m, &Catalog::builtin()).unwrap();
        let g = &plan.groups[0];
        let idx: Vec<u8> = g.steps.iter().map(StepKind::index).collect();
        assert_eq!(idx, [1, 2, 3, 4, 5]);
        let names: Vec<&str> = g.steps.iter().map(StepKind::name).collect();
        assert_eq!(names, ["provision", "push", "setup", "network-direct", "launch"]);
        assert_eq!(
            g.steps[2],
            StepKind::Setup {
                script: Some("init.bash".into())
            }
        );
        assert_eq!(g.machine.worker_count, 8);
    }

    #[test]
    fn container_group_pulls_and_runs_image() {
        let m = parse_manifest("[cloud grasp]\nimage = dexnet:gpu\ninstance_type = g4dn.xlarge\nnetwork = proxy\n").unwrap();
        let plan = plan_deployment(&m, &Catalog::builtin()).unwrap();
        let names: Vec<&str> = plan.groups[0].steps.iter().map(StepKind::name).collect();
        assert_eq!(names, ["provision", "pull-image", "setup", "network-proxy", "run-container"]);
        assert!(plan.needs_proxy());
    }

    #[test]
    fn unknown_instance_type_is_invalid() {
        let m = parse_manifest("[node a]\npackage = p\nexec = e\nplacement = cloud:g\n[cloud g]\ninstance_type = z9.mega\n").unwrap();
        assert!(matches!(
            plan_deployment(&m, &Catalog::builtin()),
            Err(PlanError::InvalidManifest(_))
        ));
    }
}
