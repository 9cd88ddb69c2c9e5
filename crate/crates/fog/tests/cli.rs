mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{fog_exe, serial, wait_for};
use fog::cli::{EXIT_DEPLOY_FAILED, EXIT_INVALID, EXIT_OK, EXIT_UNKNOWN_DEPLOYMENT};

fn fog(dir: &Path, args: &[&str]) -> Output {
    Command::new(fog_exe())
        .args(args)
        .env("FOG_STATE_DIR", dir.join("state"))
        .env("FOG_SANDBOX_DIR", dir.join("sandbox"))
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const MANIFEST: &str = "\
[node talker]
package = demo
exec = talker
placement = cloud:g

[node listener]
package = demo
exec = listener
placement = edge

[cloud g]
instance_type = t2.micro
network = proxy
";

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&fog(dir.path(), &["frobnicate"])), EXIT_INVALID);
    assert_eq!(code(&fog(dir.path(), &["launch", "/nonexistent/m.fog"])), EXIT_INVALID);
    let bad = dir.path().join("bad.fog");
    std::fs::write(&bad, "[node a]\npackage = p\nexec = e\nplacement = cloud:nowhere\n").unwrap();
    let o = fog(dir.path(), &["launch", bad.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_INVALID);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn unknown_deployment_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["status", "topics"] {
        assert_eq!(code(&fog(dir.path(), &[cmd, "deadbeef"])), EXIT_UNKNOWN_DEPLOYMENT, "{cmd}");
    }
    assert_eq!(code(&fog(dir.path(), &["echo", "deadbeef", "/x"])), EXIT_UNKNOWN_DEPLOYMENT);
}

#[test]
fn launch_status_teardown_cycle() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("demo.fog");
    std::fs::write(&m, MANIFEST).unwrap();
    let o = fog(dir.path(), &["launch", m.to_str().unwrap(), "--id", "c1", "--trace"]);
    assert_eq!(code(&o), EXIT_OK, "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    for k in 1..=5 {
        assert!(out.contains(&format!("[{k}/5] g ")), "{out}");
    }
    assert!(out.contains("deployment c1 RUNNING"));

    let again = fog(dir.path(), &["launch", m.to_str().unwrap(), "--id", "c1"]);
    assert_eq!(code(&again), EXIT_DEPLOY_FAILED);

    let st = fog(dir.path(), &["status", "c1", "--json"]);
    assert_eq!(code(&st), EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(stdout(&st).lines().next().unwrap()).unwrap();
    assert_eq!(v["status"], "RUNNING");

    assert!(wait_for(
        || stdout(&fog(dir.path(), &["topics", "c1"])).contains("/chatter"),
        std::time::Duration::from_secs(5)
    ));

    assert_eq!(code(&fog(dir.path(), &["teardown", "c1"])), EXIT_OK);
    assert_eq!(code(&fog(dir.path(), &["teardown", "c1"])), EXIT_OK);
    assert_eq!(code(&fog(dir.path(), &["status", "c1"])), EXIT_UNKNOWN_DEPLOYMENT);
    assert!(fog::provider::tagged_processes("c1").is_empty());
    assert!(!dir.path().join("sandbox/fog-c1").exists());
}

#[test]
fn failed_step_exits_3() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("setup.sh"), "exit 1\n").unwrap();
    let m = dir.path().join("demo.fog");
    std::fs::write(&m, MANIFEST.replace("network = proxy", "setup_script = setup.sh\nnetwork = proxy")).unwrap();
    let o = fog(dir.path(), &["launch", m.to_str().unwrap(), "--id", "c2"]);
    assert_eq!(code(&o), EXIT_DEPLOY_FAILED);
    assert!(stdout(&o).contains("[3/5] g setup fail"), "{}", stdout(&o));
    assert!(fog::provider::tagged_processes("c2").is_empty());
}
