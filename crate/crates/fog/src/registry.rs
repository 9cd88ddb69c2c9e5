//! The topic registry ("master") server and a small blocking client.
//!
//! Nodes keep one connection open to the registry. The connection doubles as
//! the liveness signal: nodes PING every [`RegistryConfig::heartbeat`] and a
//! connection that stays silent for [`RegistryConfig::expiry`] (or closes) has
//! all of its node's registrations removed.

use std::collections::HashMap;
use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use fog_core::codec::{FrameKind, NodeId};
use fog_core::control::Control;
use fog_core::table::{Endpoint, RegistryTable, Role};
use fog_core::topic::TopicName;

use crate::net::{self, AcceptRules, GuardedListener};

#[derive(Debug, Clone, Copy)]
pub struct RegistryConfig {
    pub heartbeat: Duration,
    pub expiry: Duration,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            heartbeat: Duration::from_secs(2),
            expiry: Duration::from_secs(6),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("registry unavailable: {0}")]
    Unavailable(#[from] io::Error),
    #[error("registry rejected request: {0}")]
    Rejected(String),
    #[error("unexpected reply from registry")]
    Protocol,
}

type ConnId = u64;

struct Conn {
    tx: Sender<Vec<u8>>,
    stream: TcpStream,
    node: Option<Endpoint>,
}

#[derive(Default)]
struct State {
    table: RegistryTable,
    conns: HashMap<ConnId, Conn>,
    /// Which connection currently speaks for a node.
    owner: HashMap<NodeId, ConnId>,
}

impl State {
    fn send(&self, node: NodeId, msg: &Control) {
        if let Some(conn) = self.owner.get(&node).and_then(|c| self.conns.get(c)) {
            if let Ok(bytes) = msg.encode_frame() {
                let _ = conn.tx.send(bytes);
            }
        }
    }

    fn reply(&self, conn: ConnId, msg: &Control) {
        if let (Some(c), Ok(bytes)) = (self.conns.get(&conn), msg.encode_frame()) {
            let _ = c.tx.send(bytes);
        }
    }

    fn reply_as(&self, conn: ConnId, kind: FrameKind, msg: &Control) {
        if let Some(c) = self.conns.get(&conn) {
            if let Ok(bytes) = fog_core::codec::encode_control(kind, &msg.encode_body()) {
                let _ = c.tx.send(bytes);
            }
        }
    }

    /// Tells every holder of the opposite role on `topic` about a change.
    fn notify(&self, topic: &TopicName, role: Role, who: &Endpoint, added: bool) {
        for peer in self.table.peers(topic, role.opposite()) {
            let msg = if added {
                Control::PeerAdded {
                    topic: topic.clone(),
                    role,
                    peer: who.clone(),
                }
            } else {
                Control::PeerRemoved {
                    topic: topic.clone(),
                    role,
                    peer: who.clone(),
                }
            };
            self.send(peer.node_id, &msg);
        }
    }

    fn expunge_node(&mut self, node: NodeId) {
        for (topic, role, ep) in self.table.remove_node(node) {
            self.notify(&topic, role, &ep, false);
        }
    }

    /// Drops a connection; if it owned a node, that node's entries go too.
    fn drop_conn(&mut self, id: ConnId) {
        if let Some(conn) = self.conns.remove(&id) {
            let _ = conn.stream.shutdown(Shutdown::Both);
            if let Some(ep) = conn.node {
                if self.owner.get(&ep.node_id) == Some(&id) {
                    self.owner.remove(&ep.node_id);
                    self.expunge_node(ep.node_id);
                }
            }
        }
    }
}

struct Shared {
    state: Mutex<State>,
    config: RegistryConfig,
    next_conn: AtomicU64,
    stop: AtomicBool,
}

/// A running registry. Dropping the handle stops it.
pub struct RegistryServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl RegistryServer {
    pub fn spawn(bind: SocketAddr, config: RegistryConfig) -> io::Result<Self> {
        Self::spawn_with_rules(bind, config, AcceptRules::default())
    }

    pub fn spawn_with_rules(bind: SocketAddr, config: RegistryConfig, rules: AcceptRules) -> io::Result<Self> {
        let listener = GuardedListener::bind(bind, rules)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            state: Mutex::new(State::default()),
            config,
            next_conn: AtomicU64::new(1),
            stop: AtomicBool::new(false),
        });
        let sh = shared.clone();
        let accept = thread::Builder::new()
            .name("registry-accept".into())
            .spawn(move || accept_loop(listener, sh))?;
        Ok(RegistryServer {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Point-in-time copy of the table.
    pub fn snapshot(&self) -> RegistryTable {
        self.shared.state.lock().unwrap().table.clone()
    }

    pub fn connection_count(&self) -> usize {
        self.shared.state.lock().unwrap().conns.len()
    }

    pub fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the accept loop.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let mut st = self.shared.state.lock().unwrap();
        let ids: Vec<ConnId> = st.conns.keys().copied().collect();
        for id in ids {
            st.drop_conn(id);
        }
    }

    /// Blocks the calling thread until the server stops (used by the CLI).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RegistryServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: GuardedListener, shared: Arc<Shared>) {
    loop {
        let (stream, _) = match listener.accept() {
            Ok(s) => s,
            Err(e) => {
                if shared.stop.load(Ordering::SeqCst) {
                    return;
                }
                log::warn!("registry accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
                continue;
            }
        };
        if shared.stop.load(Ordering::SeqCst) {
            return;
        }
        let id = shared.next_conn.fetch_add(1, Ordering::SeqCst);
        let sh = shared.clone();
        let _ = thread::Builder::new()
            .name(format!("registry-conn-{id}"))
            .spawn(move || serve_conn(id, stream, sh));
    }
}

fn serve_conn(id: ConnId, stream: TcpStream, shared: Arc<Shared>) {
    let (Ok(write_half), Ok(read_half), Ok(kill_half)) =
        (stream.try_clone(), stream.try_clone(), stream.try_clone())
    else {
        return;
    };
    let _ = read_half.set_read_timeout(Some(shared.config.expiry));
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    shared.state.lock().unwrap().conns.insert(
        id,
        Conn {
            tx,
            stream: kill_half,
            node: None,
        },
    );
    let writer = thread::spawn(move || {
        let mut w = write_half;
        for bytes in rx {
            if io::Write::write_all(&mut w, &bytes).is_err() {
                let _ = w.shutdown(Shutdown::Both);
                break;
            }
        }
    });
    let mut reader = BufReader::new(read_half);
    while let Ok(frame) = net::read_frame(&mut reader) {
        let msg = match Control::from_frame(&frame) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("registry conn {id}: bad control frame: {e}");
                break;
            }
        };
        if !handle(id, frame.kind(), msg, &shared) {
            break;
        }
    }
    shared.state.lock().unwrap().drop_conn(id);
    let _ = writer.join();
}

/// Applies one request. Returns false to close the connection.
fn handle(id: ConnId, kind: FrameKind, msg: Control, shared: &Shared) -> bool {
    let mut st = shared.state.lock().unwrap();
    match msg {
        Control::Hello {
            node_id,
            node_name,
            address,
        } => {
            if node_name.is_empty() || address.parse::<SocketAddr>().is_err() {
                st.reply(
                    id,
                    &Control::Error {
                        req: 0,
                        message: "hello needs a node name and a host:port address".into(),
                    },
                );
                return false;
            }
            // A rejoining node replaces its previous connection.
            if let Some(old) = st.owner.insert(node_id, id) {
                if old != id {
                    if let Some(c) = st.conns.get_mut(&old) {
                        c.node = None;
                        let _ = c.stream.shutdown(Shutdown::Both);
                    }
                    st.expunge_node(node_id);
                }
            }
            if let Some(c) = st.conns.get_mut(&id) {
                c.node = Some(Endpoint {
                    node_name,
                    address,
                    node_id,
                });
            }
            st.reply(id, &Control::Ack { req: 0 });
        }
        Control::Register { req, role, topic } => {
            let Some(who) = st.conns.get(&id).and_then(|c| c.node.clone()) else {
                st.reply(
                    id,
                    &Control::Error {
                        req,
                        message: "register before hello".into(),
                    },
                );
                return true;
            };
            let added = st.table.insert(&topic, role, who.clone());
            let peers = st.table.peers(&topic, role.opposite());
            st.reply(
                id,
                &Control::Peers {
                    req,
                    topic: topic.clone(),
                    role: role.opposite(),
                    peers,
                },
            );
            if added {
                st.notify(&topic, role, &who, true);
            }
        }
        Control::Unregister { req, role, topic } => {
            let node = st.conns.get(&id).and_then(|c| c.node.as_ref().map(|n| n.node_id));
            if let Some(node) = node {
                if let Some(ep) = st.table.remove(&topic, role, node) {
                    st.notify(&topic, role, &ep, false);
                }
            }
            st.reply(id, &Control::Ack { req });
        }
        Control::SnapshotRequest { req } => {
            let table = st.table.clone();
            st.reply(id, &Control::Snapshot { req, table });
        }
        Control::Probe { .. } if kind == FrameKind::Ping => {
            st.reply_as(id, FrameKind::Pong, &msg);
        }
        Control::Probe { .. } => {}
        other => {
            log::debug!("registry conn {id}: ignoring {other:?}");
        }
    }
    true
}

/// Short-lived request/response connection, used by tools and proxies for
/// snapshots. Nodes use the runtime's persistent session instead.
pub struct RegistryClient {
    stream: TcpStream,
    reader: BufReader<TcpStream>,
    next_req: AtomicU32,
}

impl RegistryClient {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, RegistryError> {
        let stream = net::connect(addr, timeout)?;
        stream.set_read_timeout(Some(timeout.max(Duration::from_secs(2))))?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(RegistryClient {
            stream,
            reader,
            next_req: AtomicU32::new(1),
        })
    }

    pub fn snapshot(&mut self) -> Result<RegistryTable, RegistryError> {
        let req = self.next_req.fetch_add(1, Ordering::Relaxed);
        net::write_frame(&mut self.stream, &Control::SnapshotRequest { req }.to_frame())?;
        loop {
            let frame = net::read_frame(&mut self.reader)?;
            match Control::from_frame(&frame).map_err(|_| RegistryError::Protocol)? {
                Control::Snapshot { req: r, table } if r == req => return Ok(table),
                Control::Error { message, .. } => return Err(RegistryError::Rejected(message)),
                _ => continue,
            }
        }
    }
}

/// One-shot snapshot of the registry at `addr`.
pub fn snapshot_topics(addr: &str) -> Result<RegistryTable, RegistryError> {
    RegistryClient::connect(addr, Duration::from_secs(2))?.snapshot()
}
