mod common;

use std::collections::BTreeSet;
use std::fs;
use std::time::{Duration, Instant};

use common::{fog_exe, wait_for, write_script};
use fog::provider::{pid_running, ExecRequest, LocalProvider, MockRemoteProvider, Provider, SecurityRules};
use fog_core::manifest::Catalog;

fn machine(t: &str) -> fog_core::manifest::MachineSpec {
    Catalog::builtin().get(t).unwrap().clone()
}

#[test]
fn instance_env_reports_worker_count() {
    let root = tempfile::tempdir().unwrap();
    let p = LocalProvider::new(root.path(), fog_exe());
    let inst = p
        .create_instance("d1", "g", &machine("c4.8xlarge"), &SecurityRules::default())
        .unwrap();
    let src = tempfile::tempdir().unwrap();
    let script = write_script(src.path(), "show.sh", "#!/bin/sh\nenv\n");
    p.push_files(&inst, &[script], "code").unwrap();
    let out = p
        .exec(
            &inst,
            &ExecRequest {
                program: "show.sh".into(),
                label: "show".into(),
                ..ExecRequest::default()
            },
        )
        .unwrap();
    assert_eq!(out.status, 0);
    assert!(out.output.lines().any(|l| l == "FOG_WORKERS=8"), "{}", out.output);
    assert!(out.output.lines().any(|l| l == "FOG_INSTANCE=g"));
    for sub in ["code", "setup", "logs", "creds"] {
        assert!(p.sandbox(&inst).join(sub).is_dir());
    }
    p.terminate(&inst).unwrap();
    assert!(!p.deployment_dir("d1").exists());
}

#[test]
fn ports_outside_security_rules_are_refused() {
    let root = tempfile::tempdir().unwrap();
    let p = LocalProvider::new(root.path(), fog_exe());
    let allowed = fog::net::free_port().unwrap();
    let rules = SecurityRules {
        inbound_ports: BTreeSet::from([allowed]),
        ..SecurityRules::default()
    };
    let inst = p.create_instance("d2", "g", &machine("t2.micro"), &rules).unwrap();
    let other = fog::net::free_port().unwrap();
    let mut req = ExecRequest::fog("registry", &["registry", "--bind", &format!("127.0.0.1:{other}")]);
    req.detach = false;
    let out = p.exec(&inst, &req).unwrap();
    assert_ne!(out.status, 0, "{}", out.output);

    let ok = p
        .exec(&inst, &ExecRequest::fog("registry", &["registry", "--bind", &format!("127.0.0.1:{allowed}")]))
        .unwrap();
    assert!(wait_for(|| p.port_open(&inst, allowed), Duration::from_secs(5)));
    assert!(p.process_alive(&inst, ok.pid.unwrap()));
    p.terminate(&inst).unwrap();
    assert!(!p.port_open(&inst, allowed));
}

#[test]
fn terminate_stops_the_whole_process_group() {
    let root = tempfile::tempdir().unwrap();
    let p = LocalProvider::new(root.path(), fog_exe());
    let inst = p
        .create_instance("d3", "g", &machine("t2.micro"), &SecurityRules::default())
        .unwrap();
    let src = tempfile::tempdir().unwrap();
    let script = write_script(
        src.path(),
        "forks.sh",
        "#!/bin/sh\nsleep 300 &\necho $! > ../logs/child.pid\nexec sleep 300\n",
    );
    p.push_files(&inst, &[script], "code").unwrap();
    let out = p
        .exec(
            &inst,
            &ExecRequest {
                program: "forks.sh".into(),
                detach: true,
                label: "node:forks".into(),
                ..ExecRequest::default()
            },
        )
        .unwrap();
    let parent = out.pid.unwrap();
    let child_file = p.sandbox(&inst).join("logs/child.pid");
    assert!(wait_for(|| fs::read_to_string(&child_file).is_ok_and(|s| s.ends_with('\n')), Duration::from_secs(5)));
    let child: u32 = fs::read_to_string(&child_file).unwrap().trim().parse().unwrap();
    assert!(p.sandbox(&inst).join("logs/forks.log").is_file());
    assert!(pid_running(parent) && pid_running(child));

    let t0 = Instant::now();
    p.terminate(&inst).unwrap();
    assert!(wait_for(|| !pid_running(parent) && !pid_running(child), Duration::from_secs(2)));
    assert!(t0.elapsed() < Duration::from_secs(2));
    assert!(p.list_instances("d3").unwrap().is_empty());
    p.terminate(&inst).unwrap();
}

#[test]
fn mock_remote_state_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mock.json");
    let inst = {
        let m = MockRemoteProvider::persistent(&path);
        let inst = m
            .create_instance("d4", "planner", &machine("c5.24xlarge"), &SecurityRules::default())
            .unwrap();
        assert!(m.exec(&inst, &ExecRequest::fog("node:x", &["node", "talker"])).unwrap().pid.is_some());
        inst
    };
    let m = MockRemoteProvider::persistent(&path);
    assert_eq!(m.list_instances("d4").unwrap(), vec![inst.clone()]);
    m.terminate(&inst).unwrap();
    m.terminate(&inst).unwrap();
    assert!(MockRemoteProvider::persistent(&path).list_instances("d4").unwrap().is_empty());
}
