//! Stop flag with wakeable sleeps for background threads.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

#[derive(Default)]
pub struct Signal {
    stopped: Mutex<bool>,
    cv: Condvar,
}

impl Signal {
    pub fn stop(&self) {
        *self.stopped.lock().unwrap() = true;
        self.cv.notify_all();
    }

    pub fn is_stopped(&self) -> bool {
        *self.stopped.lock().unwrap()
    }

    /// Sleeps up to `d`; returns true if stopped.
    pub fn sleep(&self, d: Duration) -> bool {
        let g = self.stopped.lock().unwrap();
        let (g, _) = self.cv.wait_timeout_while(g, d, |s| !*s).unwrap();
        *g
    }

    pub fn sleep_until(&self, t: Instant) -> bool {
        self.sleep(t.saturating_duration_since(Instant::now()))
    }
}
