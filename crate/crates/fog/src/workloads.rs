//! Synthetic nodes: a frame source, a parallel compute node, a sink, and a
//! few traffic generators used by tests and benchmarks.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use clap::Args;
use fog_core::kernel::{combine, kernel_range, partition, DEFAULT_SEED};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::net;
use crate::node::{Node, NodeError, PublisherHandle};
use crate::provider::ENV_WORKERS;
use crate::signal::Signal;

pub const DEFAULT_FRAME_SIZE: usize = 49_152;
pub const REQUEST_TOPIC: &str = "/request";
pub const SENSOR_TOPIC: &str = "/sensor";
pub const RESULT_TOPIC: &str = "/result";
const REQ_MAGIC: &[u8; 4] = b"REQ1";
const RES_MAGIC: &[u8; 4] = b"RES1";
pub const REQUEST_HEADER_LEN: usize = 20;
pub const RESULT_LEN: usize = 33;

/// Worker count from `FOG_WORKERS`, defaulting to 1.
pub fn workers_from_env() -> u32 {
    std::env::var(ENV_WORKERS)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|w| *w >= 1)
        .unwrap_or(1)
}

/// Runs the kernel over `0..items` split across `workers` threads.
pub fn parallel_kernel(seed: u64, items: u64, workers: u32) -> u64 {
    let ranges = partition(items, workers);
    thread::scope(|s| {
        let hs: Vec<_> = ranges.into_iter().map(|r| s.spawn(move || kernel_range(seed, r))).collect();
        combine(hs.into_iter().map(|h| h.join().expect("kernel worker panicked")))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Request {
    pub id: u64,
    pub items: u64,
}

impl Request {
    /// Header followed by zero padding up to `size` bytes.
    pub fn encode(&self, size: usize) -> Vec<u8> {
        let mut b = Vec::with_capacity(size.max(REQUEST_HEADER_LEN));
        b.extend_from_slice(REQ_MAGIC);
        b.extend_from_slice(&self.items.to_be_bytes());
        b.extend_from_slice(&self.id.to_be_bytes());
        b.resize(size.max(REQUEST_HEADER_LEN), 0);
        b
    }

    /// Payloads too short for a header (including empty frames) are a
    /// request for zero items.
    pub fn decode(b: &[u8]) -> Request {
        if b.len() < REQUEST_HEADER_LEN || &b[..4] != REQ_MAGIC {
            return Request { id: 0, items: 0 };
        }
        Request {
            items: u64::from_be_bytes(b[4..12].try_into().unwrap()),
            id: u64::from_be_bytes(b[12..20].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComputeResult {
    pub id: u64,
    pub value: u64,
    pub compute_ns: u64,
    pub workers: u32,
    /// Hops the request had collected on arrival.
    pub request_hops: u8,
}

impl ComputeResult {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(RESULT_LEN);
        b.extend_from_slice(RES_MAGIC);
        b.extend_from_slice(&self.id.to_be_bytes());
        b.extend_from_slice(&self.value.to_be_bytes());
        b.extend_from_slice(&self.compute_ns.to_be_bytes());
        b.extend_from_slice(&self.workers.to_be_bytes());
        b.push(self.request_hops);
        b
    }

    pub fn decode(b: &[u8]) -> Option<ComputeResult> {
        if b.len() != RESULT_LEN || &b[..4] != RES_MAGIC {
            return None;
        }
        let u64_at = |i: usize| u64::from_be_bytes(b[i..i + 8].try_into().unwrap());
        Some(ComputeResult {
            id: u64_at(4),
            value: u64_at(12),
            compute_ns: u64_at(20),
            workers: u32::from_be_bytes(b[28..32].try_into().unwrap()),
            request_hops: b[32],
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct SourceArgs {
    #[arg(long, default_value = SENSOR_TOPIC)]
    pub topic: String,
    #[arg(long, default_value_t = 10.0)]
    pub rate: f64,
    #[arg(long, default_value_t = DEFAULT_FRAME_SIZE)]
    pub size: usize,
    /// Kernel items each frame asks for.
    #[arg(long, default_value_t = 0)]
    pub items: u64,
    /// Stop after this many frames; 0 runs until stopped.
    #[arg(long, default_value_t = 0)]
    pub count: u64,
}

/// Publishes frames at a fixed rate.
pub fn run_source(node: &Node, a: &SourceArgs, stop: &Signal) -> Result<u64, NodeError> {
    let publisher = node.advertise(&a.topic)?;
    let period = Duration::from_secs_f64(1.0 / a.rate.max(1e-3));
    let mut next = Instant::now();
    let mut sent = 0;
    while a.count == 0 || sent < a.count {
        if stop.sleep_until(next) {
            break;
        }
        next += period;
        sent += 1;
        publisher.publish(&Request { id: sent, items: a.items }.encode(a.size))?;
    }
    Ok(sent)
}

#[derive(Debug, Clone, Args)]
pub struct ComputeArgs {
    #[arg(long, default_value = REQUEST_TOPIC)]
    pub input: String,
    #[arg(long, default_value = RESULT_TOPIC)]
    pub output: String,
    /// Overrides FOG_WORKERS.
    #[arg(long)]
    pub workers: Option<u32>,
    /// Items to compute when a request does not say.
    #[arg(long, default_value_t = 0)]
    pub items: u64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

/// Serves one request at a time; anything arriving meanwhile replaces the
/// waiting request.
pub fn run_compute(node: &Node, a: &ComputeArgs, stop: &Signal) -> Result<u64, NodeError> {
    let workers = a.workers.unwrap_or_else(workers_from_env);
    let sub = node.subscribe(&a.input, 1)?;
    let publisher = node.advertise(&a.output)?;
    let mut served = 0;
    while !stop.is_stopped() {
        let Some(env) = sub.recv_timeout(Duration::from_millis(100)) else { continue };
        let req = Request::decode(&env.payload);
        let items = if req.items == 0 { a.items } else { req.items };
        let t0 = Instant::now();
        let value = parallel_kernel(a.seed, items, workers);
        let res = ComputeResult {
            id: req.id,
            value,
            compute_ns: t0.elapsed().as_nanos() as u64,
            workers,
            request_hops: env.trace.len().min(255) as u8,
        };
        publisher.publish(&res.encode())?;
        served += 1;
    }
    Ok(served)
}

#[derive(Debug, Clone, Args)]
pub struct SinkArgs {
    #[arg(long, default_value = RESULT_TOPIC)]
    pub topic: String,
    /// Stop after this many messages; 0 runs until stopped.
    #[arg(long, default_value_t = 0)]
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkSample {
    pub seq: u64,
    pub latency_s: f64,
    pub hops: usize,
    pub received_at: Instant,
}

/// Reports publish-to-receipt latency for each message.
pub fn run_sink(
    node: &Node,
    a: &SinkArgs,
    stop: &Signal,
    mut on_sample: impl FnMut(&SinkSample),
) -> Result<u64, NodeError> {
    let sub = node.subscribe(&a.topic, 64)?;
    let mut got = 0;
    while !stop.is_stopped() && (a.count == 0 || got < a.count) {
        let Some(env) = sub.recv_timeout(Duration::from_millis(100)) else { continue };
        let s = SinkSample {
            seq: env.seq,
            latency_s: net::now_ns().saturating_sub(env.timestamp_ns) as f64 / 1e9,
            hops: env.trace.len(),
            received_at: Instant::now(),
        };
        on_sample(&s);
        got += 1;
    }
    Ok(got)
}

#[derive(Debug, Clone, Args)]
pub struct TalkerArgs {
    #[arg(long, default_value = "/chatter")]
    pub topic: String,
    #[arg(long, default_value_t = 100.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub count: u64,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    /// Hold off until this many subscribers are connected.
    #[arg(long, default_value_t = 0)]
    pub wait_subscribers: usize,
}

fn wait_for_subscribers(p: &PublisherHandle, n: usize, stop: &Signal) -> bool {
    while p.connected_subscribers() < n {
        if stop.sleep(Duration::from_millis(20)) {
            return false;
        }
    }
    true
}

pub fn run_talker(node: &Node, a: &TalkerArgs, stop: &Signal) -> Result<u64, NodeError> {
    let publisher = node.advertise(&a.topic)?;
    if !wait_for_subscribers(&publisher, a.wait_subscribers, stop) {
        return Ok(0);
    }
    let period = Duration::from_secs_f64(1.0 / a.rate.max(1e-3));
    let mut next = Instant::now();
    let mut sent = 0;
    let mut payload = vec![0u8; a.size.max(8)];
    while a.count == 0 || sent < a.count {
        if stop.sleep_until(next) {
            break;
        }
        next += period;
        sent += 1;
        payload[..8].copy_from_slice(&sent.to_be_bytes());
        publisher.publish(&payload)?;
    }
    // keep the links up so the last messages drain
    stop.sleep(Duration::from_secs(3600 * 24 * 365));
    Ok(sent)
}

#[derive(Debug, Clone, Args)]
pub struct ListenerArgs {
    #[arg(long, default_value = "/chatter")]
    pub topic: String,
}

pub fn run_listener(node: &Node, a: &ListenerArgs, stop: &Signal, out: &mut impl Write) -> Result<u64, NodeError> {
    let sub = node.subscribe(&a.topic, 64)?;
    let mut got = 0;
    while !stop.is_stopped() {
        let Some(env) = sub.recv_timeout(Duration::from_millis(100)) else { continue };
        got += 1;
        let _ = writeln!(
            out,
            "seq={} size={} origin={} hops={}",
            env.seq,
            env.payload.len(),
            env.origin,
            env.trace.join(">")
        );
    }
    Ok(got)
}

#[derive(Debug, Clone, Args)]
pub struct RelayArgs {
    #[arg(long)]
    pub input: String,
    #[arg(long)]
    pub output: String,
}

pub fn run_relay(node: &Node, a: &RelayArgs, stop: &Signal) -> Result<u64, NodeError> {
    let sub = node.subscribe(&a.input, 64)?;
    let publisher = node.advertise(&a.output)?;
    let mut n = 0;
    while !stop.is_stopped() {
        if let Some(env) = sub.recv_timeout(Duration::from_millis(100)) {
            publisher.publish(&env.payload)?;
            n += 1;
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, Args)]
pub struct SprayArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub messages: usize,
    #[arg(long, default_value_t = 20)]
    pub topics: usize,
    #[arg(long, default_value = "/spray")]
    pub prefix: String,
    #[arg(long, default_value_t = 200.0)]
    pub rate: f64,
    /// Wait for a subscriber on every topic before starting.
    #[arg(long, default_value_t = 1)]
    pub wait_subscribers: usize,
}

/// One planned message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SprayMessage {
    pub topic: String,
    pub payload: Vec<u8>,
}

pub fn spray_topic(prefix: &str, i: usize) -> String {
    format!("{prefix}/t{i:02}")
}

/// Seeded message plan, reproducible on any machine from the same
/// arguments.
pub fn spray_plan(seed: u64, messages: usize, topics: usize, prefix: &str) -> Vec<SprayMessage> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..messages)
        .map(|_| {
            let t = rng.gen_range(0..topics.max(1));
            let len = rng.gen_range(0..=512usize);
            let mut payload = vec![0u8; len];
            rng.fill(&mut payload[..]);
            SprayMessage {
                topic: spray_topic(prefix, t),
                payload,
            }
        })
        .collect()
}

pub fn run_spray(node: &Node, a: &SprayArgs, stop: &Signal) -> Result<u64, NodeError> {
    let pubs: Vec<PublisherHandle> = (0..a.topics.max(1))
        .map(|i| node.advertise(&spray_topic(&a.prefix, i)))
        .collect::<Result<_, _>>()?;
    for p in &pubs {
        if !wait_for_subscribers(p, a.wait_subscribers, stop) {
            return Ok(0);
        }
    }
    if stop.sleep(Duration::from_secs(1)) {
        return Ok(0);
    }
    let period = Duration::from_secs_f64(1.0 / a.rate.max(1e-3));
    let mut next = Instant::now();
    let mut sent = 0;
    for m in spray_plan(a.seed, a.messages, a.topics, &a.prefix) {
        if stop.sleep_until(next) {
            break;
        }
        next += period;
        let idx = pubs.iter().position(|p| p.topic().as_str() == m.topic).expect("planned topic");
        pubs[idx].publish(&m.payload)?;
        sent += 1;
    }
    stop.sleep(Duration::from_secs(3600 * 24 * 365));
    Ok(sent)
}

static TERMINATED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_terminate(_: libc::c_int) {
    TERMINATED.store(true, Ordering::SeqCst);
}

/// Stops `stop` on SIGTERM or SIGINT.
pub fn stop_on_signals(stop: Arc<Signal>) {
    // SAFETY: the handler only stores to an atomic.
    unsafe {
        libc::signal(libc::SIGTERM, on_terminate as *const () as libc::sighandler_t);
        libc::signal(libc::SIGINT, on_terminate as *const () as libc::sighandler_t);
    }
    thread::spawn(move || loop {
        if TERMINATED.load(Ordering::SeqCst) {
            stop.stop();
            return;
        }
        thread::sleep(Duration::from_millis(50));
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_and_result_round_trip() {
        let r = Request { id: 7, items: 1234 };
        let b = r.encode(100);
        assert_eq!(b.len(), 100);
        assert_eq!(Request::decode(&b), r);
        assert_eq!(Request::decode(&[]), Request { id: 0, items: 0 });
        let c = ComputeResult {
            id: 7,
            value: 99,
            compute_ns: 5,
            workers: 8,
            request_hops: 3,
        };
        assert_eq!(ComputeResult::decode(&c.encode()), Some(c));
    }

    #[test]
    fn kernel_result_does_not_depend_on_workers() {
        let one = parallel_kernel(DEFAULT_SEED, 10_001, 1);
        for w in [2, 3, 8] {
            assert_eq!(parallel_kernel(DEFAULT_SEED, 10_001, w), one);
        }
    }

    #[test]
    fn spray_plan_is_reproducible() {
        let a = spray_plan(5, 100, 20, "/s");
        assert_eq!(a, spray_plan(5, 100, 20, "/s"));
        assert_ne!(a, spray_plan(6, 100, 20, "/s"));
        assert!(a.iter().all(|m| m.topic.starts_with("/s/t")));
    }
}
