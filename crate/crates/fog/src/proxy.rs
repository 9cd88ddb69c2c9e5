//! One endpoint of a proxy pair.
//!
//! Each endpoint sits beside a registry as an ordinary node, summarizes that
//! registry to its peer every poll interval and, from the two summaries,
//! tunnels exactly the topics that have a publisher on one side and a
//! subscriber on the other. Without a registry an endpoint only keeps the
//! channel alive and answers probes (the cloud side of a direct deployment).

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use fog_core::backoff::{Backoff, BackoffPolicy};
use fog_core::codec::{Frame, FrameKind, MessageEnvelope, Origin};
use fog_core::control::Control;
use fog_core::discovery::{self, BridgeTable, Direction, Presence};
use fog_core::secure::{ChannelRole, DeploymentSecret};
use fog_core::topic::TopicName;

use crate::channel::{self, ChannelReceiver, ChannelSlot, CounterSnapshot};
use crate::net::{self, AcceptRules, GuardedListener};
use crate::netmon::{self, MonitorConfig};
use crate::node::{Node, NodeConfig, NodeError, PublisherHandle, SubscriptionQueue};
use crate::signal::Signal;

pub const HOP_PREFIX: &str = "proxy:";
const FORWARD_QUEUE: usize = 4096;

#[derive(Debug, Clone)]
pub enum ChannelEnd {
    /// Dial the peer (initiator).
    Connect(String),
    /// Accept the peer (responder).
    Listen(SocketAddr),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopicPolicy {
    Auto,
    Explicit(Vec<TopicName>),
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub side: Origin,
    pub registry: Option<String>,
    pub channel: ChannelEnd,
    pub secret: DeploymentSecret,
    pub policy: TopicPolicy,
    pub bridging: bool,
    pub monitor: bool,
    pub poll_interval: Duration,
    pub liveness_timeout: Duration,
    pub monitor_config: MonitorConfig,
    pub trace: bool,
    pub backoff: BackoffPolicy,
    pub accept_rules: AcceptRules,
    pub status_file: Option<PathBuf>,
    /// Listen port of the proxy's own node; 0 picks one.
    pub node_port: u16,
}

impl ProxyConfig {
    pub fn new(side: Origin, registry: Option<String>, channel: ChannelEnd, secret: DeploymentSecret) -> Self {
        ProxyConfig {
            side,
            registry,
            channel,
            secret,
            policy: TopicPolicy::Auto,
            bridging: true,
            monitor: true,
            poll_interval: Duration::from_millis(500),
            liveness_timeout: Duration::from_secs(3),
            monitor_config: MonitorConfig::default(),
            trace: false,
            backoff: BackoffPolicy::default(),
            accept_rules: AcceptRules::default(),
            status_file: None,
            node_port: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProxyError {
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("proxy i/o: {0}")]
    Io(#[from] std::io::Error),
}

struct Forwarder {
    queue: Arc<SubscriptionQueue>,
    thread: Option<JoinHandle<()>>,
}

impl Forwarder {
    fn stop(mut self) {
        self.queue.close();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[derive(Default)]
struct BridgeState {
    table: BridgeTable,
    outbound: HashMap<TopicName, Forwarder>,
    inbound: HashMap<TopicName, PublisherHandle>,
}

struct Shared {
    config: ProxyConfig,
    node: Option<Node>,
    slot: Arc<ChannelSlot>,
    stop: Arc<Signal>,
    local: Mutex<Presence>,
    remote: Mutex<Option<Presence>>,
    bridge: Mutex<BridgeState>,
    sessions: AtomicU64,
    reconnect_attempts: AtomicU64,
    handshake_failures: AtomicU64,
    replays: AtomicU64,
    suppressed: AtomicU64,
}

impl Shared {
    fn hop_label(&self) -> String {
        format!("{HOP_PREFIX}{}", self.config.side)
    }

    /// Loop suppression: traffic that came from the far side, or that has
    /// already crossed a proxy, never goes back over the channel.
    fn should_forward(&self, env: &MessageEnvelope) -> bool {
        env.origin != self.config.side.other() && !env.trace.iter().any(|h| h.starts_with(HOP_PREFIX))
    }

    fn forward(&self, mut env: MessageEnvelope) {
        if !self.should_forward(&env) {
            self.suppressed.fetch_add(1, Ordering::Relaxed);
            return;
        }
        if self.config.trace {
            let _ = env.push_hop(&self.hop_label());
        }
        self.slot.send(&Frame::Data(env));
    }

    fn deliver(&self, mut env: MessageEnvelope) {
        let publ = self.bridge.lock().unwrap().inbound.get(&env.topic).cloned();
        let Some(publ) = publ else { return };
        if self.config.trace {
            let _ = env.push_hop(&self.hop_label());
        }
        if let Err(e) = publ.publish_envelope(&env) {
            log::warn!("republish on {} failed: {e}", env.topic);
        }
    }

    fn desired_table(&self) -> Option<BridgeTable> {
        let local = self.local.lock().unwrap().clone();
        let remote = self.remote.lock().unwrap().clone()?;
        let (edge, cloud) = match self.config.side {
            Origin::Edge => (local, remote),
            Origin::Cloud => (remote, local),
        };
        let mut table = discovery::discover_from_presence(&edge, &cloud);
        if let TopicPolicy::Explicit(list) = &self.config.policy {
            table.retain_topics(list);
        }
        Some(table)
    }

    /// Converges local subscriptions and publishers to the desired table.
    fn reconcile(self: &Arc<Self>) {
        let Some(node) = &self.node else { return };
        if !self.config.bridging {
            return;
        }
        let side = self.config.side;
        let mut st = self.bridge.lock().unwrap();
        let Some(table) = self.desired_table() else { return };
        if st.table == table {
            return;
        }
        let out_dir = Direction::from_source(side);
        let in_dir = Direction::from_source(side.other());
        let stale_out: Vec<TopicName> = st
            .outbound
            .keys()
            .filter(|t| !table.contains(t, out_dir))
            .cloned()
            .collect();
        for t in stale_out {
            if let Some(f) = st.outbound.remove(&t) {
                log::info!("proxy {side}: stop forwarding {t}");
                f.stop();
            }
        }
        st.inbound.retain(|t, _| table.contains(t, in_dir));
        let mut applied = BridgeTable::new();
        for e in table.iter() {
            if e.direction == out_dir {
                if !st.outbound.contains_key(&e.topic) {
                    match self.start_forwarder(node, &e.topic) {
                        Ok(f) => {
                            log::info!("proxy {side}: forwarding {}", e.topic);
                            st.outbound.insert(e.topic.clone(), f);
                        }
                        Err(err) => {
                            log::warn!("proxy {side}: subscribe {} failed: {err}", e.topic);
                            continue;
                        }
                    }
                }
            } else if !st.inbound.contains_key(&e.topic) {
                match node.advertise_topic(&e.topic) {
                    Ok(p) => {
                        st.inbound.insert(e.topic.clone(), p);
                    }
                    Err(err) => {
                        log::warn!("proxy {side}: advertise {} failed: {err}", e.topic);
                        continue;
                    }
                }
            }
            applied.insert(e.topic.clone(), e.direction);
        }
        st.table = applied;
    }

    fn start_forwarder(self: &Arc<Self>, node: &Node, topic: &TopicName) -> Result<Forwarder, NodeError> {
        let sub = node.subscribe_topic(topic, FORWARD_QUEUE)?;
        let queue = sub.queue().clone();
        let me = self.clone();
        let thread = thread::Builder::new()
            .name(format!("fwd{topic}"))
            .spawn(move || {
                while let Some(env) = sub.recv() {
                    me.forward(env);
                }
            })?;
        Ok(Forwarder {
            queue,
            thread: Some(thread),
        })
    }

    fn refresh_local(&self) {
        let Some(node) = &self.node else { return };
        match node.snapshot() {
            Ok(table) => *self.local.lock().unwrap() = discovery::summarize(&table, Some(node.id())),
            Err(e) => log::debug!("proxy {}: snapshot failed: {e}", self.config.side),
        }
    }

    fn send_summary(&self) {
        let entries = discovery::presence_to_wire(&self.local.lock().unwrap());
        self.slot.send(&Control::Summary { entries }.to_frame());
    }

    fn handle(self: &Arc<Self>, frame: Frame) {
        match frame {
            Frame::Data(env) => self.deliver(env),
            Frame::Control { kind, .. } => match Control::from_frame(&frame) {
                Ok(Control::Summary { entries }) => {
                    *self.remote.lock().unwrap() = Some(discovery::presence_from_wire(&entries));
                    self.reconcile();
                }
                Ok(probe @ Control::Probe { .. }) if kind == FrameKind::Ping => {
                    self.slot.send(&probe.to_frame_as(FrameKind::Pong));
                }
                Ok(Control::Probe { id, .. }) => self.slot.on_pong(id),
                Ok(other) => log::debug!("proxy: ignoring {other:?}"),
                Err(e) => log::warn!("proxy: undecodable control frame: {e}"),
            },
        }
    }

    /// Serves one established session until it fails.
    fn run_session(self: &Arc<Self>, mut rx: ChannelReceiver, generation: u64) {
        self.sessions.fetch_add(1, Ordering::SeqCst);
        let _ = rx.set_timeout(Some(self.config.liveness_timeout));
        self.send_summary();
        loop {
            match rx.recv() {
                Ok(frame) => self.handle(frame),
                Err(e) => {
                    if e.is_replay() {
                        self.replays.fetch_add(1, Ordering::SeqCst);
                        log::warn!("proxy {}: {e}; dropping session", self.config.side);
                    } else if !self.stop.is_stopped() {
                        log::info!("proxy {}: channel lost: {e}", self.config.side);
                    }
                    break;
                }
            }
        }
        self.slot.clear(generation);
    }

    fn status_json(&self) -> serde_json::Value {
        let st = self.bridge.lock().unwrap();
        let bridge: Vec<serde_json::Value> = st
            .table
            .iter()
            .map(|e| serde_json::json!({"topic": e.topic.as_str(), "direction": e.direction.to_string()}))
            .collect();
        serde_json::json!({
            "side": self.config.side.as_str(),
            "connected": self.slot.is_up(),
            "sessions": self.sessions.load(Ordering::SeqCst),
            "reconnect_attempts": self.reconnect_attempts.load(Ordering::SeqCst),
            "handshake_failures": self.handshake_failures.load(Ordering::SeqCst),
            "replays": self.replays.load(Ordering::SeqCst),
            "suppressed": self.suppressed.load(Ordering::Relaxed),
            "dropped": self.slot.dropped(),
            "bridge": bridge,
            "counters": self.slot.counters().snapshot().to_json(),
        })
    }

    fn write_status(&self) {
        let Some(path) = &self.config.status_file else { return };
        let tmp = path.with_extension("tmp");
        let body = self.status_json().to_string();
        if std::fs::write(&tmp, body).and_then(|_| std::fs::rename(&tmp, path)).is_err() {
            log::debug!("could not write status file {}", path.display());
        }
    }
}

fn discovery_loop(shared: Arc<Shared>) {
    loop {
        shared.refresh_local();
        if shared.slot.is_up() {
            shared.send_summary();
        }
        shared.reconcile();
        shared.write_status();
        if shared.stop.sleep(shared.config.poll_interval) {
            return;
        }
    }
}

fn initiator_loop(shared: Arc<Shared>, addr: String) {
    let mut backoff = Backoff::new(shared.config.backoff);
    let mut tries = 0u64;
    while !shared.stop.is_stopped() {
        if tries > 0 {
            shared.reconnect_attempts.fetch_add(1, Ordering::SeqCst);
        }
        tries += 1;
        let res = net::connect(&addr, Duration::from_secs(1))
            .map_err(channel::ChannelError::from)
            .and_then(|s| {
                channel::establish(s, &shared.config.secret, ChannelRole::Initiator, shared.slot.counters().clone())
            });
        match res {
            Ok((tx, rx)) => {
                backoff.reset();
                let g = shared.slot.install(tx);
                log::info!("proxy {}: channel up", shared.config.side);
                shared.run_session(rx, g);
            }
            Err(e) => {
                if matches!(e, channel::ChannelError::Handshake(_)) {
                    shared.handshake_failures.fetch_add(1, Ordering::SeqCst);
                }
                log::debug!("proxy {}: connect to {addr} failed: {e}", shared.config.side);
            }
        }
        if shared.stop.sleep(Duration::from_millis(backoff.next_delay_ms(rand::random::<f64>()))) {
            return;
        }
    }
}

fn responder_loop(shared: Arc<Shared>, listener: GuardedListener) {
    loop {
        let accepted = listener.accept();
        if shared.stop.is_stopped() {
            return;
        }
        let Ok((stream, peer)) = accepted else {
            thread::sleep(Duration::from_millis(20));
            continue;
        };
        let sh = shared.clone();
        let _ = thread::Builder::new().name("proxy-session".into()).spawn(move || {
            match channel::establish(stream, &sh.config.secret, ChannelRole::Responder, sh.slot.counters().clone()) {
                Ok((tx, rx)) => {
                    let g = sh.slot.install(tx);
                    log::info!("proxy {}: channel up from {peer}", sh.config.side);
                    sh.run_session(rx, g);
                }
                Err(e) => {
                    sh.handshake_failures.fetch_add(1, Ordering::SeqCst);
                    log::warn!("proxy {}: handshake with {peer} failed: {e}", sh.config.side);
                }
            }
        });
    }
}

/// A running proxy endpoint.
pub struct ProxyEndpoint {
    shared: Arc<Shared>,
    listen_addr: Option<SocketAddr>,
    threads: Vec<JoinHandle<()>>,
}

impl ProxyEndpoint {
    pub fn spawn(config: ProxyConfig) -> Result<ProxyEndpoint, ProxyError> {
        let node = match &config.registry {
            Some(reg) => {
                let mut nc = NodeConfig::new(&format!("proxy-{}", config.side), reg)
                    .origin(config.side)
                    .trace(config.trace);
                nc.backoff = config.backoff;
                nc.accept_rules = config.accept_rules.clone();
                nc.listen_port = config.node_port;
                if let Ok(h) = std::env::var(crate::node::ENV_ADVERTISE_HOST) {
                    nc.advertise_host = h;
                }
                Some(Node::start(nc)?)
            }
            None => None,
        };
        let listener = match &config.channel {
            ChannelEnd::Listen(addr) => Some(GuardedListener::bind(*addr, config.accept_rules.clone())?),
            ChannelEnd::Connect(_) => None,
        };
        let listen_addr = listener.as_ref().map(|l| l.local_addr()).transpose()?;
        let shared = Arc::new(Shared {
            node,
            slot: Arc::default(),
            stop: Arc::default(),
            local: Mutex::default(),
            remote: Mutex::default(),
            bridge: Mutex::default(),
            sessions: AtomicU64::new(0),
            reconnect_attempts: AtomicU64::new(0),
            handshake_failures: AtomicU64::new(0),
            replays: AtomicU64::new(0),
            suppressed: AtomicU64::new(0),
            config,
        });
        let mut threads = Vec::new();
        let spawn = |name: &str, f: Box<dyn FnOnce() + Send>| thread::Builder::new().name(name.into()).spawn(f);
        {
            let sh = shared.clone();
            threads.push(spawn("proxy-discovery", Box::new(move || discovery_loop(sh)))?);
        }
        match (&shared.config.channel, listener) {
            (ChannelEnd::Connect(addr), _) => {
                let (sh, addr) = (shared.clone(), addr.clone());
                threads.push(spawn("proxy-dial", Box::new(move || initiator_loop(sh, addr)))?);
            }
            (ChannelEnd::Listen(_), Some(l)) => {
                let sh = shared.clone();
                threads.push(spawn("proxy-accept", Box::new(move || responder_loop(sh, l)))?);
            }
            (ChannelEnd::Listen(_), None) => unreachable!("listener bound above"),
        }
        if let (Some(node), true) = (&shared.node, shared.config.monitor) {
            let (node, slot, stop, mc) = (
                node.clone(),
                shared.slot.clone(),
                shared.stop.clone(),
                shared.config.monitor_config,
            );
            threads.push(spawn(
                "proxy-monitor",
                Box::new(move || {
                    if let Err(e) = netmon::run_monitor(node, slot, stop, mc) {
                        log::warn!("monitor stopped: {e}");
                    }
                }),
            )?);
        }
        Ok(ProxyEndpoint {
            shared,
            listen_addr,
            threads,
        })
    }

    pub fn listen_addr(&self) -> Option<SocketAddr> {
        self.listen_addr
    }

    pub fn node(&self) -> Option<&Node> {
        self.shared.node.as_ref()
    }

    pub fn is_connected(&self) -> bool {
        self.shared.slot.is_up()
    }

    pub fn bridge_table(&self) -> BridgeTable {
        self.shared.bridge.lock().unwrap().table.clone()
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.shared.slot.counters().snapshot()
    }

    pub fn sessions(&self) -> u64 {
        self.shared.sessions.load(Ordering::SeqCst)
    }

    pub fn replays_detected(&self) -> u64 {
        self.shared.replays.load(Ordering::SeqCst)
    }

    pub fn handshake_failures(&self) -> u64 {
        self.shared.handshake_failures.load(Ordering::SeqCst)
    }

    pub fn suppressed(&self) -> u64 {
        self.shared.suppressed.load(Ordering::Relaxed)
    }

    pub fn status_json(&self) -> serde_json::Value {
        self.shared.status_json()
    }

    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(&mut self) {
        let sh = &self.shared;
        if !sh.stop.is_stopped() {
            sh.stop.stop();
            sh.slot.close();
            if let Some(a) = self.listen_addr {
                let wake: SocketAddr = match a.ip().is_unspecified() {
                    true => SocketAddr::from(([127, 0, 0, 1], a.port())),
                    false => a,
                };
                let _ = std::net::TcpStream::connect_timeout(&wake, Duration::from_millis(200));
            }
            let mut st = sh.bridge.lock().unwrap();
            for (_, f) in st.outbound.drain() {
                f.stop();
            }
            st.inbound.clear();
            drop(st);
            if let Some(n) = &sh.node {
                n.shutdown();
            }
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ProxyEndpoint {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Reads a status file written by a proxy process.
pub fn read_status(path: &std::path::Path) -> Option<serde_json::Value> {
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}
