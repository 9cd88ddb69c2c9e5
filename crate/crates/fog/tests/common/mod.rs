#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use fog_core::manifest::{parse_manifest, Catalog};
use fog_core::plan::{plan_deployment, DeploymentPlan};

pub fn fog_exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_fog"))
}

pub fn wait_for(mut f: impl FnMut() -> bool, timeout: Duration) -> bool {
    let end = Instant::now() + timeout;
    loop {
        if f() {
            return true;
        }
        if Instant::now() > end {
            return false;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

pub fn plan(text: &str) -> DeploymentPlan {
    plan_deployment(&parse_manifest(text).unwrap(), &Catalog::builtin()).unwrap()
}

/// Tests that spawn deployments share ports and CPU; run them one at a time.
pub fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn write_script(dir: &Path, name: &str, body: &str) -> PathBuf {
    use std::os::unix::fs::PermissionsExt;
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
    p
}
