//! Typed control records carried in the body of non-DATA frames.
//!
//! Every record starts with a one-byte tag; integers are big-endian,
//! strings are u16-length-prefixed UTF-8, lists are u32-count-prefixed.

use alloc::string::String;
use alloc::vec::Vec;

use crate::codec::{encode_control, DecodeError, EncodeError, Frame, FrameKind, NodeId};
use crate::table::{Endpoint, RegistryTable, Role};
use crate::topic::TopicName;

/// Presence of local publishers/subscribers on one topic, as exchanged by
/// the two proxy endpoints.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TopicPresence {
    pub topic: TopicName,
    pub has_pub: bool,
    pub has_sub: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Control {
    /// First frame a node sends to the registry.
    Hello {
        node_id: NodeId,
        node_name: String,
        address: String,
    },
    /// First frame a publisher sends on a connection to a subscriber.
    Attach { node_id: NodeId, topic: TopicName },
    /// Secure channel handshake message.
    Handshake { stage: u8, data: Vec<u8> },
    Register { req: u32, role: Role, topic: TopicName },
    Unregister { req: u32, role: Role, topic: TopicName },
    /// Reply to a registration: the current peers in `role` on `topic`.
    Peers {
        req: u32,
        topic: TopicName,
        role: Role,
        peers: Vec<Endpoint>,
    },
    Ack { req: u32 },
    PeerAdded { topic: TopicName, role: Role, peer: Endpoint },
    PeerRemoved { topic: TopicName, role: Role, peer: Endpoint },
    Summary { entries: Vec<TopicPresence> },
    Error { req: u32, message: String },
    SnapshotRequest { req: u32 },
    Snapshot { req: u32, table: RegistryTable },
    Probe { id: u64, sent_ns: u64 },
}

mod tag {
    pub const HELLO: u8 = 1;
    pub const ATTACH: u8 = 2;
    pub const HANDSHAKE: u8 = 3;
    pub const REGISTER: u8 = 10;
    pub const UNREGISTER: u8 = 11;
    pub const PEERS: u8 = 20;
    pub const ACK: u8 = 21;
    pub const PEER_ADDED: u8 = 22;
    pub const PEER_REMOVED: u8 = 23;
    pub const SUMMARY: u8 = 24;
    pub const ERROR: u8 = 25;
    pub const SNAPSHOT_REQUEST: u8 = 30;
    pub const SNAPSHOT: u8 = 31;
    pub const PROBE: u8 = 40;
}

impl Control {
    /// Frame kind this record travels in. Probes are sent as PING; the reply
    /// reuses the record inside a PONG (see [`Control::to_frame_as`]).
    pub fn kind(&self) -> FrameKind {
        match self {
            Control::Hello { .. } | Control::Attach { .. } | Control::Handshake { .. } => {
                FrameKind::Hello
            }
            Control::Register { .. } => FrameKind::Sub,
            Control::Unregister { .. } => FrameKind::Unsub,
            Control::Peers { .. }
            | Control::Ack { .. }
            | Control::PeerAdded { .. }
            | Control::PeerRemoved { .. }
            | Control::Summary { .. }
            | Control::Error { .. } => FrameKind::Ctrl,
            Control::SnapshotRequest { .. } | Control::Snapshot { .. } => FrameKind::Stat,
            Control::Probe { .. } => FrameKind::Ping,
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Control::Hello { .. } => tag::HELLO,
            Control::Attach { .. } => tag::ATTACH,
            Control::Handshake { .. } => tag::HANDSHAKE,
            Control::Register { .. } => tag::REGISTER,
            Control::Unregister { .. } => tag::UNREGISTER,
            Control::Peers { .. } => tag::PEERS,
            Control::Ack { .. } => tag::ACK,
            Control::PeerAdded { .. } => tag::PEER_ADDED,
            Control::PeerRemoved { .. } => tag::PEER_REMOVED,
            Control::Summary { .. } => tag::SUMMARY,
            Control::Error { .. } => tag::ERROR,
            Control::SnapshotRequest { .. } => tag::SNAPSHOT_REQUEST,
            Control::Snapshot { .. } => tag::SNAPSHOT,
            Control::Probe { .. } => tag::PROBE,
        }
    }

    pub fn encode_body(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.u8(self.tag());
        match self {
            Control::Hello {
                node_id,
                node_name,
                address,
            } => {
                w.id(node_id);
                w.str(node_name);
                w.str(address);
            }
            Control::Attach { node_id, topic } => {
                w.id(node_id);
                w.str(topic.as_str());
            }
            Control::Handshake { stage, data } => {
                w.u8(*stage);
                w.bytes(data);
            }
            Control::Register { req, role, topic } | Control::Unregister { req, role, topic } => {
                w.u32(*req);
                w.u8(*role as u8);
                w.str(topic.as_str());
            }
            Control::Peers {
                req,
                topic,
                role,
                peers,
            } => {
                w.u32(*req);
                w.str(topic.as_str());
                w.u8(*role as u8);
                w.u32(peers.len() as u32);
                peers.iter().for_each(|p| w.endpoint(p));
            }
            Control::Ack { req } | Control::SnapshotRequest { req } => w.u32(*req),
            Control::PeerAdded { topic, role, peer } | Control::PeerRemoved { topic, role, peer } => {
                w.str(topic.as_str());
                w.u8(*role as u8);
                w.endpoint(peer);
            }
            Control::Summary { entries } => {
                w.u32(entries.len() as u32);
                for e in entries {
                    w.str(e.topic.as_str());
                    w.u8(u8::from(e.has_pub) | (u8::from(e.has_sub) << 1));
                }
            }
            Control::Error { req, message } => {
                w.u32(*req);
                w.str(message);
            }
            Control::Snapshot { req, table } => {
                w.u32(*req);
                w.u32(table.len() as u32);
                for (topic, rec) in table.iter() {
                    w.str(topic.as_str());
                    for role in [Role::Publisher, Role::Subscriber] {
                        let set = rec.role(role);
                        w.u32(set.len() as u32);
                        set.values().for_each(|p| w.endpoint(p));
                    }
                }
            }
            Control::Probe { id, sent_ns } => {
                w.u64(*id);
                w.u64(*sent_ns);
            }
        }
        w.0
    }

    pub fn to_frame(&self) -> Frame {
        self.to_frame_as(self.kind())
    }

    pub fn to_frame_as(&self, kind: FrameKind) -> Frame {
        Frame::Control {
            kind,
            body: self.encode_body(),
        }
    }

    pub fn encode_frame(&self) -> Result<Vec<u8>, EncodeError> {
        encode_control(self.kind(), &self.encode_body())
    }

    /// Parses a control body received in a frame of `kind`.
    pub fn decode(kind: FrameKind, body: &[u8]) -> Result<Control, DecodeError> {
        let mut r = Reader(body);
        let t = r.u8()?;
        let rec = match t {
            tag::HELLO => Control::Hello {
                node_id: r.id()?,
                node_name: r.string()?,
                address: r.string()?,
            },
            tag::ATTACH => Control::Attach {
                node_id: r.id()?,
                topic: r.topic()?,
            },
            tag::HANDSHAKE => Control::Handshake {
                stage: r.u8()?,
                data: r.bytes()?,
            },
            tag::REGISTER | tag::UNREGISTER => {
                let req = r.u32()?;
                let role = r.role()?;
                let topic = r.topic()?;
                if t == tag::REGISTER {
                    Control::Register { req, role, topic }
                } else {
                    Control::Unregister { req, role, topic }
                }
            }
            tag::PEERS => {
                let req = r.u32()?;
                let topic = r.topic()?;
                let role = r.role()?;
                let n = r.count()?;
                let mut peers = Vec::new();
                for _ in 0..n {
                    peers.push(r.endpoint()?);
                }
                Control::Peers {
                    req,
                    topic,
                    role,
                    peers,
                }
            }
            tag::ACK => Control::Ack { req: r.u32()? },
            tag::PEER_ADDED | tag::PEER_REMOVED => {
                let topic = r.topic()?;
                let role = r.role()?;
                let peer = r.endpoint()?;
                if t == tag::PEER_ADDED {
                    Control::PeerAdded { topic, role, peer }
                } else {
                    Control::PeerRemoved { topic, role, peer }
                }
            }
            tag::SUMMARY => {
                let n = r.count()?;
                let mut entries = Vec::new();
                for _ in 0..n {
                    let topic = r.topic()?;
                    let flags = r.u8()?;
                    if flags > 3 {
                        return Err(DecodeError::Malformed("summary flags"));
                    }
                    entries.push(TopicPresence {
                        topic,
                        has_pub: flags & 1 != 0,
                        has_sub: flags & 2 != 0,
                    });
                }
                Control::Summary { entries }
            }
            tag::ERROR => Control::Error {
                req: r.u32()?,
                message: r.string()?,
            },
            tag::SNAPSHOT_REQUEST => Control::SnapshotRequest { req: r.u32()? },
            tag::SNAPSHOT => {
                let req = r.u32()?;
                let n = r.count()?;
                let mut table = RegistryTable::new();
                for _ in 0..n {
                    let topic = r.topic()?;
                    for role in [Role::Publisher, Role::Subscriber] {
                        let m = r.count()?;
                        for _ in 0..m {
                            table.insert(&topic, role, r.endpoint()?);
                        }
                    }
                }
                Control::Snapshot { req, table }
            }
            tag::PROBE => Control::Probe {
                id: r.u64()?,
                sent_ns: r.u64()?,
            },
            _ => return Err(DecodeError::Malformed("unknown control tag")),
        };
        if !r.0.is_empty() {
            return Err(DecodeError::Malformed("trailing bytes in control record"));
        }
        let expected = rec.kind();
        let kind_ok = kind == expected || (kind == FrameKind::Pong && expected == FrameKind::Ping);
        if !kind_ok {
            return Err(DecodeError::Malformed("control record in wrong frame kind"));
        }
        Ok(rec)
    }

    pub fn from_frame(frame: &Frame) -> Result<Control, DecodeError> {
        match frame {
            Frame::Data(_) => Err(DecodeError::Malformed("expected a control frame")),
            Frame::Control { kind, body } => Control::decode(*kind, body),
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn id(&mut self, id: &NodeId) {
        self.0.extend_from_slice(id.as_bytes());
    }
    fn str(&mut self, s: &str) {
        // Names and addresses are far below 64 KiB; longer strings are cut.
        let b = &s.as_bytes()[..s.len().min(u16::MAX as usize)];
        self.0.extend_from_slice(&(b.len() as u16).to_be_bytes());
        self.0.extend_from_slice(b);
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn endpoint(&mut self, e: &Endpoint) {
        self.id(&e.node_id);
        self.str(&e.node_name);
        self.str(&e.address);
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.0.len() < n {
            return Err(DecodeError::Malformed("control record truncated"));
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Ok(h)
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_be_bytes(a))
    }
    /// A list count, sanity-checked against the bytes remaining so hostile
    /// input cannot trigger huge allocations.
    fn count(&mut self) -> Result<usize, DecodeError> {
        let n = self.u32()? as usize;
        if n > self.0.len() {
            return Err(DecodeError::Malformed("list count exceeds record"));
        }
        Ok(n)
    }
    fn id(&mut self) -> Result<NodeId, DecodeError> {
        let mut a = [0u8; 16];
        a.copy_from_slice(self.take(16)?);
        Ok(NodeId(a))
    }
    fn string(&mut self) -> Result<String, DecodeError> {
        let b = self.take(2)?;
        let n = u16::from_be_bytes([b[0], b[1]]) as usize;
        let s = core::str::from_utf8(self.take(n)?)
            .map_err(|_| DecodeError::Malformed("invalid utf-8"))?;
        Ok(String::from(s))
    }
    fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn topic(&mut self) -> Result<TopicName, DecodeError> {
        TopicName::new(&self.string()?).map_err(|_| DecodeError::Malformed("invalid topic"))
    }
    fn role(&mut self) -> Result<Role, DecodeError> {
        Role::from_u8(self.u8()?).ok_or(DecodeError::Malformed("invalid role"))
    }
    fn endpoint(&mut self) -> Result<Endpoint, DecodeError> {
        Ok(Endpoint {
            node_id: self.id()?,
            node_name: self.string()?,
            address: self.string()?,
        })
    }
}
