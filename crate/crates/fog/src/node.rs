//! Node runtime: advertise, subscribe and publish over direct peer
//! connections, with automatic rejoin after registry or peer failures.
//!
//! Publishers connect to subscribers. Each (publisher node, subscriber node,
//! topic) pair gets one stream that starts with an `Attach` record followed by
//! DATA frames, so delivery from one publisher is in publish order. Delivery
//! is best effort: messages published while a link is down are lost, never
//! reordered.

use std::collections::{HashMap, VecDeque};
use std::io::{self, BufReader, Write};
use std::net::{IpAddr, Ipv4Addr, Shutdown, SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, SyncSender};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use fog_core::backoff::{Backoff, BackoffPolicy};
use fog_core::codec::{encode_data, EncodeError, Frame, MessageEnvelope, NodeId, Origin, MAX_PAYLOAD};
use fog_core::control::Control;
use fog_core::table::{Endpoint, RegistryTable, Role};
use fog_core::topic::{TopicError, TopicName};

use crate::net::{self, AcceptRules, GuardedListener};
use crate::signal::Signal;

pub const ENV_MASTER: &str = "FOG_MASTER";
pub const ENV_NODE_NAME: &str = "FOG_NODE_NAME";
pub const ENV_ORIGIN: &str = "FOG_ORIGIN";
pub const ENV_TRACE: &str = "FOG_TRACE";
pub const ENV_LISTEN_PORT: &str = "FOG_LISTEN_PORT";
pub const ENV_ADVERTISE_HOST: &str = "FOG_ADVERTISE_HOST";

pub const DEFAULT_QUEUE_CAPACITY: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error(transparent)]
    InvalidTopic(#[from] TopicError),
    #[error("registry unavailable: {0}")]
    RegistryUnavailable(String),
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    OversizePayload(usize),
    #[error("node has shut down")]
    NodeShutDown,
    #[error("invalid node configuration: {0}")]
    Config(String),
    #[error("encode failed: {0}")]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub name: String,
    /// Registry `host:port`.
    pub registry: String,
    pub origin: Origin,
    pub trace: bool,
    pub listen_ip: IpAddr,
    pub listen_port: u16,
    /// Host other nodes use to reach this node.
    pub advertise_host: String,
    pub backoff: BackoffPolicy,
    pub heartbeat: Duration,
    pub request_timeout: Duration,
    pub accept_rules: AcceptRules,
}

impl NodeConfig {
    pub fn new(name: &str, registry: &str) -> Self {
        NodeConfig {
            name: name.to_string(),
            registry: registry.to_string(),
            origin: Origin::Edge,
            trace: false,
            listen_ip: IpAddr::V4(Ipv4Addr::LOCALHOST),
            listen_port: 0,
            advertise_host: "127.0.0.1".to_string(),
            backoff: BackoffPolicy::default(),
            heartbeat: Duration::from_secs(2),
            request_timeout: Duration::from_secs(3),
            accept_rules: AcceptRules::default(),
        }
    }

    pub fn origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }

    pub fn trace(mut self, on: bool) -> Self {
        self.trace = on;
        self
    }

    /// Reads `FOG_MASTER`, `FOG_NODE_NAME`, `FOG_ORIGIN`, `FOG_TRACE`,
    /// `FOG_LISTEN_PORT`, `FOG_ADVERTISE_HOST` and the instance accept rules.
    pub fn from_env(default_name: &str) -> Result<Self, NodeError> {
        let registry = std::env::var(ENV_MASTER)
            .map_err(|_| NodeError::Config(format!("{ENV_MASTER} is not set")))?;
        let name = std::env::var(ENV_NODE_NAME).unwrap_or_else(|_| default_name.to_string());
        let mut cfg = NodeConfig::new(&name, &registry);
        if let Ok(o) = std::env::var(ENV_ORIGIN) {
            cfg.origin = Origin::parse(&o)
                .ok_or_else(|| NodeError::Config(format!("{ENV_ORIGIN} must be edge or cloud, got {o}")))?;
        }
        cfg.trace = std::env::var(ENV_TRACE).is_ok_and(|v| v == "1");
        if let Ok(p) = std::env::var(ENV_LISTEN_PORT) {
            cfg.listen_port = p
                .parse()
                .map_err(|_| NodeError::Config(format!("{ENV_LISTEN_PORT} is not a port: {p}")))?;
        }
        if let Ok(h) = std::env::var(ENV_ADVERTISE_HOST) {
            cfg.advertise_host = h;
        }
        cfg.accept_rules = AcceptRules::from_env();
        Ok(cfg)
    }
}

struct Link {
    endpoint: Endpoint,
    stream: Option<TcpStream>,
    backoff: Backoff,
    next_attempt: Instant,
    /// Set once the link has been up; later connects count as reconnects.
    was_up: bool,
}

impl Link {
    fn new(endpoint: Endpoint, policy: BackoffPolicy) -> Self {
        Link {
            endpoint,
            stream: None,
            backoff: Backoff::new(policy),
            next_attempt: Instant::now(),
            was_up: false,
        }
    }

    fn fail(&mut self) {
        if let Some(s) = self.stream.take() {
            let _ = s.shutdown(Shutdown::Both);
        }
        let delay = self.backoff.next_delay_ms(rand::random::<f64>());
        self.next_attempt = Instant::now() + Duration::from_millis(delay);
    }
}

struct PubInner {
    seq: u64,
    links: HashMap<NodeId, Link>,
}

struct PubState {
    topic: TopicName,
    inner: Mutex<PubInner>,
    handles: AtomicUsize,
}

impl PubState {
    /// Makes the link set equal to `subs` (keeping live links).
    fn set_targets(&self, subs: Vec<Endpoint>, policy: BackoffPolicy) {
        let mut g = self.inner.lock().unwrap();
        let keep: Vec<NodeId> = subs.iter().map(|e| e.node_id).collect();
        g.links.retain(|id, link| {
            let k = keep.contains(id);
            if !k {
                if let Some(s) = link.stream.take() {
                    let _ = s.shutdown(Shutdown::Both);
                }
            }
            k
        });
        for ep in subs {
            match g.links.get_mut(&ep.node_id) {
                Some(l) if l.endpoint.address == ep.address => {}
                Some(l) => {
                    // Same node at a new address: reconnect.
                    if let Some(s) = l.stream.take() {
                        let _ = s.shutdown(Shutdown::Both);
                    }
                    l.endpoint = ep;
                    l.next_attempt = Instant::now();
                }
                None => {
                    g.links.insert(ep.node_id, Link::new(ep, policy));
                }
            }
        }
    }

    fn add_target(&self, ep: Endpoint, policy: BackoffPolicy) {
        let mut g = self.inner.lock().unwrap();
        match g.links.get_mut(&ep.node_id) {
            Some(l) if l.endpoint.address == ep.address && l.stream.is_some() => {}
            Some(l) => {
                l.endpoint = ep;
                l.next_attempt = Instant::now();
            }
            None => {
                g.links.insert(ep.node_id, Link::new(ep, policy));
            }
        }
    }

    fn remove_target(&self, id: NodeId) {
        let mut g = self.inner.lock().unwrap();
        if let Some(mut l) = g.links.remove(&id) {
            if let Some(s) = l.stream.take() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
    }

    fn close_all(&self) {
        let mut g = self.inner.lock().unwrap();
        for (_, mut l) in g.links.drain() {
            if let Some(s) = l.stream.take() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
    }
}

/// Delivery counters for one subscription.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueStats {
    pub received: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub max_len: usize,
    pub len: usize,
}

struct QueueInner {
    items: VecDeque<MessageEnvelope>,
    stats: QueueStats,
    closed: bool,
}

/// Bounded drop-oldest queue behind a subscription.
pub struct SubscriptionQueue {
    topic: TopicName,
    capacity: usize,
    inner: Mutex<QueueInner>,
    cv: Condvar,
}

impl SubscriptionQueue {
    pub fn new(topic: TopicName, capacity: usize) -> Self {
        SubscriptionQueue {
            topic,
            capacity: capacity.max(1),
            inner: Mutex::new(QueueInner {
                items: VecDeque::new(),
                stats: QueueStats::default(),
                closed: false,
            }),
            cv: Condvar::new(),
        }
    }

    pub fn push(&self, env: MessageEnvelope) {
        let mut g = self.inner.lock().unwrap();
        if g.closed {
            return;
        }
        if g.items.len() == self.capacity {
            g.items.pop_front();
            g.stats.dropped += 1;
        }
        g.items.push_back(env);
        g.stats.received += 1;
        g.stats.max_len = g.stats.max_len.max(g.items.len());
        drop(g);
        self.cv.notify_one();
    }

    fn pop(&self, timeout: Option<Duration>) -> Option<MessageEnvelope> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut g = self.inner.lock().unwrap();
        loop {
            if let Some(env) = g.items.pop_front() {
                g.stats.delivered += 1;
                return Some(env);
            }
            if g.closed {
                return None;
            }
            match deadline {
                None => g = self.cv.wait(g).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return None;
                    }
                    g = self.cv.wait_timeout(g, d - now).unwrap().0;
                }
            }
        }
    }

    pub fn close(&self) {
        self.inner.lock().unwrap().closed = true;
        self.cv.notify_all();
    }

    pub fn stats(&self) -> QueueStats {
        let g = self.inner.lock().unwrap();
        QueueStats {
            len: g.items.len(),
            ..g.stats
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn topic(&self) -> &TopicName {
        &self.topic
    }
}

struct Session {
    writer: Arc<Mutex<TcpStream>>,
}

struct Inner {
    config: NodeConfig,
    id: NodeId,
    endpoint: Endpoint,
    listen_addr: SocketAddr,
    signal: Signal,
    shut: AtomicBool,
    session: Mutex<Option<Session>>,
    pending: Mutex<HashMap<u32, SyncSender<Control>>>,
    next_req: AtomicU32,
    pubs: Mutex<HashMap<TopicName, Arc<PubState>>>,
    subs: Mutex<HashMap<TopicName, Vec<Arc<SubscriptionQueue>>>>,
    reconnects: AtomicU64,
    link_failures: AtomicU64,
    connected: AtomicBool,
    inbound: Mutex<Vec<TcpStream>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

/// A running node. Cheap to clone; all clones share one identity.
#[derive(Clone)]
pub struct Node {
    inner: Arc<Inner>,
}

impl Node {
    /// Starts the node: binds its listen endpoint and registers with the
    /// registry. Fails with `RegistryUnavailable` if the registry cannot be
    /// reached now.
    pub fn start(config: NodeConfig) -> Result<Node, NodeError> {
        if config.name.is_empty() {
            return Err(NodeError::Config("node name is empty".into()));
        }
        let listener = GuardedListener::bind(
            SocketAddr::new(config.listen_ip, config.listen_port),
            config.accept_rules.clone(),
        )?;
        let listen_addr = listener.local_addr()?;
        let id = NodeId(rand::random());
        let endpoint = Endpoint {
            node_name: config.name.clone(),
            address: format!("{}:{}", config.advertise_host, listen_addr.port()),
            node_id: id,
        };
        let inner = Arc::new(Inner {
            config,
            id,
            endpoint,
            listen_addr,
            signal: Signal::default(),
            shut: AtomicBool::new(false),
            session: Mutex::new(None),
            pending: Mutex::new(HashMap::new()),
            next_req: AtomicU32::new(1),
            pubs: Mutex::new(HashMap::new()),
            subs: Mutex::new(HashMap::new()),
            reconnects: AtomicU64::new(0),
            link_failures: AtomicU64::new(0),
            connected: AtomicBool::new(false),
            inbound: Mutex::new(Vec::new()),
            threads: Mutex::new(Vec::new()),
        });
        let stream = open_session(&inner).map_err(|e| NodeError::RegistryUnavailable(e.to_string()))?;

        let mut threads = Vec::new();
        let weak = Arc::downgrade(&inner);
        threads.push(spawn_named("node-accept", {
            let weak = weak.clone();
            move || accept_loop(listener, weak)
        })?);
        threads.push(spawn_named("node-registry", {
            let weak = weak.clone();
            move || registry_loop(stream, weak)
        })?);
        threads.push(spawn_named("node-heartbeat", {
            let weak = weak.clone();
            move || heartbeat_loop(weak)
        })?);
        threads.push(spawn_named("node-connector", move || connector_loop(weak))?);
        *inner.threads.lock().unwrap() = threads;
        Ok(Node { inner })
    }

    pub fn id(&self) -> NodeId {
        self.inner.id
    }

    pub fn name(&self) -> &str {
        &self.inner.config.name
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.inner.endpoint
    }

    pub fn listen_addr(&self) -> SocketAddr {
        self.inner.listen_addr
    }

    pub fn origin(&self) -> Origin {
        self.inner.config.origin
    }

    pub fn tracing(&self) -> bool {
        self.inner.config.trace
    }

    pub fn is_connected(&self) -> bool {
        self.inner.connected.load(Ordering::SeqCst)
    }

    /// Registry reconnect attempts plus peer link reconnects.
    pub fn reconnect_attempts(&self) -> u64 {
        self.inner.reconnects.load(Ordering::SeqCst)
    }

    /// Number of peer links that broke.
    pub fn link_failures(&self) -> u64 {
        self.inner.link_failures.load(Ordering::SeqCst)
    }

    pub fn advertise(&self, topic: &str) -> Result<PublisherHandle, NodeError> {
        let topic = TopicName::new(topic)?;
        self.advertise_topic(&topic)
    }

    pub fn advertise_topic(&self, topic: &TopicName) -> Result<PublisherHandle, NodeError> {
        self.ensure_running()?;
        let inner = &self.inner;
        let (state, fresh) = {
            let mut pubs = inner.pubs.lock().unwrap();
            match pubs.get(topic) {
                Some(s) => (s.clone(), false),
                None => {
                    let s = Arc::new(PubState {
                        topic: topic.clone(),
                        inner: Mutex::new(PubInner {
                            seq: 0,
                            links: HashMap::new(),
                        }),
                        handles: AtomicUsize::new(0),
                    });
                    pubs.insert(topic.clone(), s.clone());
                    (s, true)
                }
            }
        };
        state.handles.fetch_add(1, Ordering::SeqCst);
        match register(inner, topic, Role::Publisher) {
            Ok(subs) => {
                state.set_targets(subs, inner.config.backoff);
                connect_due_links(inner, &state, true);
                Ok(PublisherHandle {
                    node: self.clone(),
                    state,
                    closed: false,
                })
            }
            Err(e) => {
                if state.handles.fetch_sub(1, Ordering::SeqCst) == 1 && fresh {
                    inner.pubs.lock().unwrap().remove(topic);
                }
                Err(e)
            }
        }
    }

    pub fn subscribe(&self, topic: &str, capacity: usize) -> Result<SubscriptionHandle, NodeError> {
        let topic = TopicName::new(topic)?;
        self.subscribe_topic(&topic, capacity)
    }

    pub fn subscribe_topic(&self, topic: &TopicName, capacity: usize) -> Result<SubscriptionHandle, NodeError> {
        if capacity == 0 {
            return Err(NodeError::Config("subscription capacity must be at least 1".into()));
        }
        self.ensure_running()?;
        let inner = &self.inner;
        let queue = Arc::new(SubscriptionQueue::new(topic.clone(), capacity));
        let first = {
            let mut subs = inner.subs.lock().unwrap();
            let list = subs.entry(topic.clone()).or_default();
            list.push(queue.clone());
            list.len() == 1
        };
        let res = if first {
            register(inner, topic, Role::Subscriber).map(|_| ())
        } else {
            Ok(())
        };
        match res {
            Ok(()) => Ok(SubscriptionHandle {
                node: self.clone(),
                queue,
                closed: false,
            }),
            Err(e) => {
                remove_queue(inner, &queue);
                Err(e)
            }
        }
    }

    /// Asks the registry for its current table.
    pub fn snapshot(&self) -> Result<RegistryTable, NodeError> {
        self.ensure_running()?;
        let req = self.inner.next_req.fetch_add(1, Ordering::SeqCst);
        match request(&self.inner, req, &Control::SnapshotRequest { req })? {
            Control::Snapshot { table, .. } => Ok(table),
            other => Err(NodeError::RegistryUnavailable(format!("unexpected reply {other:?}"))),
        }
    }

    fn ensure_running(&self) -> Result<(), NodeError> {
        if self.inner.shut.load(Ordering::SeqCst) {
            Err(NodeError::NodeShutDown)
        } else {
            Ok(())
        }
    }

    /// Stops all background work and closes every connection.
    pub fn shutdown(&self) {
        shutdown_inner(&self.inner);
        let threads = std::mem::take(&mut *self.inner.threads.lock().unwrap());
        let me = thread::current().id();
        for t in threads {
            if t.thread().id() != me {
                let _ = t.join();
            }
        }
    }
}

fn shutdown_inner(inner: &Inner) {
    if inner.shut.swap(true, Ordering::SeqCst) {
        return;
    }
    inner.signal.stop();
    if let Some(s) = inner.session.lock().unwrap().take() {
        let _ = s.writer.lock().unwrap().shutdown(Shutdown::Both);
    }
    inner.pending.lock().unwrap().clear();
    for (_, p) in inner.pubs.lock().unwrap().drain() {
        p.close_all();
    }
    for (_, qs) in inner.subs.lock().unwrap().drain() {
        qs.iter().for_each(|q| q.close());
    }
    for s in inner.inbound.lock().unwrap().drain(..) {
        let _ = s.shutdown(Shutdown::Both);
    }
    // Wake the accept loop.
    let _ = TcpStream::connect_timeout(&inner.listen_addr, Duration::from_millis(200));
}

fn spawn_named(name: &str, f: impl FnOnce() + Send + 'static) -> io::Result<JoinHandle<()>> {
    thread::Builder::new().name(name.to_string()).spawn(f)
}

/// Connects to the registry, says hello and waits for the ack.
fn open_session(inner: &Inner) -> io::Result<TcpStream> {
    let mut s = net::connect(&inner.config.registry, Duration::from_secs(1))?;
    net::write_frame(
        &mut s,
        &Control::Hello {
            node_id: inner.id,
            node_name: inner.endpoint.node_name.clone(),
            address: inner.endpoint.address.clone(),
        }
        .to_frame(),
    )?;
    s.set_read_timeout(Some(inner.config.request_timeout))?;
    let frame = net::read_frame(&mut s)?;
    match Control::from_frame(&frame) {
        Ok(Control::Ack { .. }) => {}
        Ok(Control::Error { message, .. }) => {
            return Err(io::Error::new(io::ErrorKind::ConnectionRefused, message))
        }
        _ => return Err(io::Error::new(io::ErrorKind::InvalidData, "unexpected hello reply")),
    }
    // The registry expires silent connections; allow a missed heartbeat or two.
    s.set_read_timeout(Some(inner.config.heartbeat * 3))?;
    *inner.session.lock().unwrap() = Some(Session {
        writer: Arc::new(Mutex::new(s.try_clone()?)),
    });
    inner.connected.store(true, Ordering::SeqCst);
    Ok(s)
}

fn send_registry(inner: &Inner, msg: &Control) -> Result<(), NodeError> {
    let writer = inner
        .session
        .lock()
        .unwrap()
        .as_ref()
        .map(|s| s.writer.clone())
        .ok_or_else(|| NodeError::RegistryUnavailable("not connected".into()))?;
    let bytes = msg.encode_frame()?;
    let mut w = writer.lock().unwrap();
    w.write_all(&bytes)
        .map_err(|e| NodeError::RegistryUnavailable(e.to_string()))
}

fn request(inner: &Inner, req: u32, msg: &Control) -> Result<Control, NodeError> {
    let (tx, rx) = mpsc::sync_channel(1);
    inner.pending.lock().unwrap().insert(req, tx);
    let res = send_registry(inner, msg).and_then(|_| {
        rx.recv_timeout(inner.config.request_timeout)
            .map_err(|_| NodeError::RegistryUnavailable("no reply from registry".into()))
    });
    inner.pending.lock().unwrap().remove(&req);
    match res? {
        Control::Error { message, .. } => Err(NodeError::RegistryUnavailable(message)),
        reply => Ok(reply),
    }
}

fn register(inner: &Inner, topic: &TopicName, role: Role) -> Result<Vec<Endpoint>, NodeError> {
    let req = inner.next_req.fetch_add(1, Ordering::SeqCst);
    match request(
        inner,
        req,
        &Control::Register {
            req,
            role,
            topic: topic.clone(),
        },
    )? {
        Control::Peers { peers, .. } => Ok(peers),
        other => Err(NodeError::RegistryUnavailable(format!("unexpected reply {other:?}"))),
    }
}

fn unregister_async(inner: &Inner, topic: &TopicName, role: Role) {
    let req = inner.next_req.fetch_add(1, Ordering::SeqCst);
    let _ = send_registry(
        inner,
        &Control::Unregister {
            req,
            role,
            topic: topic.clone(),
        },
    );
}

fn remove_queue(inner: &Inner, queue: &Arc<SubscriptionQueue>) {
    queue.close();
    let last = {
        let mut subs = inner.subs.lock().unwrap();
        match subs.get_mut(&queue.topic) {
            Some(list) => {
                list.retain(|q| !Arc::ptr_eq(q, queue));
                if list.is_empty() {
                    subs.remove(&queue.topic);
                    true
                } else {
                    false
                }
            }
            None => false,
        }
    };
    if last {
        unregister_async(inner, &queue.topic, Role::Subscriber);
    }
}

/// Reads registry traffic until the session breaks, then reconnects with
/// backoff and re-registers everything.
fn registry_loop(first: TcpStream, weak: Weak<Inner>) {
    let mut stream = Some(first);
    loop {
        if let Some(s) = stream.take() {
            read_session(s, &weak);
        }
        let Some(inner) = weak.upgrade() else { return };
        inner.connected.store(false, Ordering::SeqCst);
        inner.session.lock().unwrap().take();
        inner.pending.lock().unwrap().clear();
        if inner.shut.load(Ordering::SeqCst) {
            return;
        }
        log::info!("{}: registry connection lost, reconnecting", inner.config.name);
        let started = Instant::now();
        let mut backoff = Backoff::new(inner.config.backoff);
        drop(inner);
        loop {
            let Some(inner) = weak.upgrade() else { return };
            let delay = Duration::from_millis(backoff.next_delay_ms(rand::random::<f64>()));
            if inner.signal.sleep(delay) {
                return;
            }
            if inner.config.backoff.exhausted(started.elapsed().as_millis() as u64) {
                log::error!("{}: giving up on registry", inner.config.name);
                shutdown_inner(&inner);
                return;
            }
            inner.reconnects.fetch_add(1, Ordering::SeqCst);
            match open_session(&inner) {
                Ok(s) => {
                    log::info!("{}: rejoined registry", inner.config.name);
                    let w = weak.clone();
                    let _ = thread::Builder::new()
                        .name("node-rejoin".into())
                        .spawn(move || reregister_all(w));
                    stream = Some(s);
                    break;
                }
                Err(e) => log::debug!("{}: registry reconnect failed: {e}", inner.config.name),
            }
        }
    }
}

fn reregister_all(weak: Weak<Inner>) {
    let Some(inner) = weak.upgrade() else { return };
    let pubs: Vec<Arc<PubState>> = inner.pubs.lock().unwrap().values().cloned().collect();
    let subs: Vec<TopicName> = inner.subs.lock().unwrap().keys().cloned().collect();
    for t in subs {
        if let Err(e) = register(&inner, &t, Role::Subscriber) {
            log::warn!("{}: re-register sub {t}: {e}", inner.config.name);
        }
    }
    for p in pubs {
        match register(&inner, &p.topic, Role::Publisher) {
            Ok(list) => {
                p.set_targets(list, inner.config.backoff);
                connect_due_links(&inner, &p, false);
            }
            Err(e) => log::warn!("{}: re-register pub {}: {e}", inner.config.name, p.topic),
        }
    }
}

fn read_session(stream: TcpStream, weak: &Weak<Inner>) {
    let mut reader = BufReader::new(stream);
    loop {
        let frame = match net::read_frame(&mut reader) {
            Ok(f) => f,
            Err(_) => return,
        };
        let Some(inner) = weak.upgrade() else { return };
        let Ok(msg) = Control::from_frame(&frame) else {
            log::warn!("{}: bad frame from registry", inner.config.name);
            return;
        };
        match msg {
            Control::Peers { req, .. }
            | Control::Ack { req }
            | Control::Error { req, .. }
            | Control::Snapshot { req, .. } => {
                if let Some(tx) = inner.pending.lock().unwrap().remove(&req) {
                    let _ = tx.try_send(msg);
                }
            }
            Control::PeerAdded {
                topic,
                role: Role::Subscriber,
                peer,
            } => {
                let state = inner.pubs.lock().unwrap().get(&topic).cloned();
                if let Some(state) = state {
                    state.add_target(peer, inner.config.backoff);
                    connect_due_links(&inner, &state, false);
                }
            }
            Control::PeerRemoved {
                topic,
                role: Role::Subscriber,
                peer,
            } => {
                let state = inner.pubs.lock().unwrap().get(&topic).cloned();
                if let Some(state) = state {
                    state.remove_target(peer.node_id);
                }
            }
            _ => {}
        }
    }
}

fn heartbeat_loop(weak: Weak<Inner>) {
    let mut id = 0u64;
    loop {
        let Some(inner) = weak.upgrade() else { return };
        if inner.signal.sleep(inner.config.heartbeat) {
            return;
        }
        id += 1;
        let _ = send_registry(
            &inner,
            &Control::Probe {
                id,
                sent_ns: net::now_ns(),
            },
        );
    }
}

/// Opens links whose retry time has come. Connecting happens outside the
/// publisher lock so publishing is never blocked by a slow peer.
fn connect_due_links(inner: &Inner, state: &PubState, initial: bool) {
    let due: Vec<(NodeId, Endpoint, bool)> = {
        let g = state.inner.lock().unwrap();
        let now = Instant::now();
        g.links
            .iter()
            .filter(|(_, l)| l.stream.is_none() && l.next_attempt <= now)
            .map(|(id, l)| (*id, l.endpoint.clone(), l.was_up))
            .collect()
    };
    for (id, ep, was_up) in due {
        if was_up && !initial {
            inner.reconnects.fetch_add(1, Ordering::SeqCst);
        }
        let res = net::connect(&ep.address, Duration::from_millis(500)).and_then(|mut s| {
            net::write_frame(
                &mut s,
                &Control::Attach {
                    node_id: inner.id,
                    topic: state.topic.clone(),
                }
                .to_frame(),
            )?;
            s.set_write_timeout(Some(Duration::from_secs(2)))?;
            Ok(s)
        });
        let mut g = state.inner.lock().unwrap();
        let Some(link) = g.links.get_mut(&id) else { continue };
        if link.stream.is_some() || link.endpoint.address != ep.address {
            continue;
        }
        match res {
            Ok(s) => {
                link.stream = Some(s);
                link.was_up = true;
                link.backoff.reset();
            }
            Err(e) => {
                log::debug!("{}: connect to {} for {} failed: {e}", inner.config.name, ep.node_name, state.topic);
                link.fail();
            }
        }
    }
}

fn connector_loop(weak: Weak<Inner>) {
    loop {
        let Some(inner) = weak.upgrade() else { return };
        if inner.signal.sleep(Duration::from_millis(50)) {
            return;
        }
        let pubs: Vec<Arc<PubState>> = inner.pubs.lock().unwrap().values().cloned().collect();
        for p in pubs {
            connect_due_links(&inner, &p, false);
        }
    }
}

fn accept_loop(listener: GuardedListener, weak: Weak<Inner>) {
    loop {
        let accepted = listener.accept();
        let Some(inner) = weak.upgrade() else { return };
        if inner.shut.load(Ordering::SeqCst) {
            return;
        }
        match accepted {
            Ok((s, _)) => {
                if let Ok(k) = s.try_clone() {
                    let mut inb = inner.inbound.lock().unwrap();
                    inb.retain(|x| x.peer_addr().is_ok());
                    inb.push(k);
                }
                let w = weak.clone();
                let _ = thread::Builder::new()
                    .name("node-inbound".into())
                    .spawn(move || inbound_loop(s, w));
            }
            Err(e) => {
                log::debug!("{}: accept failed: {e}", inner.config.name);
                drop(inner);
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

fn inbound_loop(stream: TcpStream, weak: Weak<Inner>) {
    let mut reader = BufReader::with_capacity(64 * 1024, stream);
    let topic = match net::read_frame(&mut reader).ok().and_then(|f| Control::from_frame(&f).ok()) {
        Some(Control::Attach { topic, .. }) => topic,
        _ => return,
    };
    loop {
        let env = match net::read_frame(&mut reader) {
            Ok(Frame::Data(env)) => env,
            Ok(_) => continue,
            Err(_) => return,
        };
        if env.topic != topic {
            continue;
        }
        let Some(inner) = weak.upgrade() else { return };
        let queues: Vec<Arc<SubscriptionQueue>> = inner
            .subs
            .lock()
            .unwrap()
            .get(&topic)
            .cloned()
            .unwrap_or_default();
        if let Some((last, rest)) = queues.split_last() {
            for q in rest {
                q.push(env.clone());
            }
            last.push(env);
        }
    }
}

/// Handle for publishing on one topic. Clones share the sequence counter.
pub struct PublisherHandle {
    node: Node,
    state: Arc<PubState>,
    closed: bool,
}

impl PublisherHandle {
    pub fn topic(&self) -> &TopicName {
        &self.state.topic
    }

    /// Stamps and sends `payload` to every connected subscriber. Returns the
    /// assigned sequence number (the first publish gets 1).
    pub fn publish(&self, payload: &[u8]) -> Result<u64, NodeError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(NodeError::OversizePayload(payload.len()));
        }
        self.node.ensure_running()?;
        let cfg = &self.node.inner.config;
        let mut env = MessageEnvelope::new(self.state.topic.clone(), self.node.inner.id, 0, cfg.origin);
        env.payload = payload.to_vec();
        if cfg.trace {
            env.push_hop(&cfg.name)?;
        }
        let mut g = self.state.inner.lock().unwrap();
        env.seq = g.seq + 1;
        env.timestamp_ns = net::now_ns();
        let bytes = encode_data(&env)?;
        g.seq = env.seq;
        self.write_all_links(&mut g, &bytes);
        Ok(env.seq)
    }

    /// Sends an already-stamped envelope unchanged (used when re-publishing
    /// bridged traffic under its original identity).
    pub fn publish_envelope(&self, env: &MessageEnvelope) -> Result<(), NodeError> {
        self.node.ensure_running()?;
        let bytes = encode_data(env)?;
        let mut g = self.state.inner.lock().unwrap();
        self.write_all_links(&mut g, &bytes);
        Ok(())
    }

    fn write_all_links(&self, g: &mut PubInner, bytes: &[u8]) {
        for link in g.links.values_mut() {
            let Some(s) = link.stream.as_mut() else { continue };
            if let Err(e) = s.write_all(bytes) {
                log::debug!("link to {} broke: {e}", link.endpoint.node_name);
                self.node.inner.link_failures.fetch_add(1, Ordering::SeqCst);
                link.fail();
            }
        }
    }

    /// Subscribers with an open link right now.
    pub fn connected_subscribers(&self) -> usize {
        self.state
            .inner
            .lock()
            .unwrap()
            .links
            .values()
            .filter(|l| l.stream.is_some())
            .count()
    }

    pub fn last_seq(&self) -> u64 {
        self.state.inner.lock().unwrap().seq
    }

    pub fn close(mut self) {
        self.release();
    }

    fn release(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        if self.state.handles.fetch_sub(1, Ordering::SeqCst) == 1 {
            let inner = &self.node.inner;
            let removed = {
                let mut pubs = inner.pubs.lock().unwrap();
                match pubs.get(&self.state.topic) {
                    Some(s) if Arc::ptr_eq(s, &self.state) => pubs.remove(&self.state.topic).is_some(),
                    _ => false,
                }
            };
            if removed {
                self.state.close_all();
                unregister_async(inner, &self.state.topic, Role::Publisher);
            }
        }
    }
}

impl Clone for PublisherHandle {
    fn clone(&self) -> Self {
        self.state.handles.fetch_add(1, Ordering::SeqCst);
        PublisherHandle {
            node: self.node.clone(),
            state: self.state.clone(),
            closed: false,
        }
    }
}

impl Drop for PublisherHandle {
    fn drop(&mut self) {
        self.release();
    }
}

/// Stream of envelopes for one subscription.
pub struct SubscriptionHandle {
    node: Node,
    queue: Arc<SubscriptionQueue>,
    closed: bool,
}

impl SubscriptionHandle {
    pub fn topic(&self) -> &TopicName {
        self.queue.topic()
    }

    /// Blocks until a message arrives or the node shuts down.
    pub fn recv(&self) -> Option<MessageEnvelope> {
        self.queue.pop(None)
    }

    pub fn recv_timeout(&self, d: Duration) -> Option<MessageEnvelope> {
        self.queue.pop(Some(d))
    }

    pub fn try_recv(&self) -> Option<MessageEnvelope> {
        self.queue.pop(Some(Duration::ZERO))
    }

    pub fn stats(&self) -> QueueStats {
        self.queue.stats()
    }

    pub fn queue(&self) -> &Arc<SubscriptionQueue> {
        &self.queue
    }

    pub fn close(mut self) {
        self.release();
    }

    fn release(&mut self) {
        if !self.closed {
            self.closed = true;
            remove_queue(&self.node.inner, &self.queue);
        }
    }
}

impl Iterator for SubscriptionHandle {
    type Item = MessageEnvelope;

    fn next(&mut self) -> Option<MessageEnvelope> {
        self.recv()
    }
}

impl Drop for SubscriptionHandle {
    fn drop(&mut self) {
        self.release();
    }
}
