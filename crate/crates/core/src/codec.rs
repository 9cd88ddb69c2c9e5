//! Frame format shared by every stream connection.
//!
//! ```text
//! 0      4        5     6          10
//! +------+--------+-----+----------+----------------+
//! | FGRS | ver=1  | kind| len (BE) | body (len B)   |
//! +------+--------+-----+----------+----------------+
//! ```
//!
//! A DATA body is laid out as: topic length (1), topic bytes, publisher id
//! (16), seq (8, BE), timestamp_ns (8, BE), origin (1), trace count (1),
//! then each hop label as length (1) + bytes, then the raw payload up to the
//! end of the body. Every other kind carries an opaque control record (see
//! [`crate::control`]).

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::topic::TopicName;

pub const MAGIC: [u8; 4] = *b"FGRS";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;

/// Largest payload a single envelope may carry (2^24 - 1 bytes).
pub const MAX_PAYLOAD: usize = (1 << 24) - 1;
pub const MAX_TRACE_HOPS: usize = 8;
/// Upper bound on the non-payload part of a DATA body.
pub const MAX_ENVELOPE_OVERHEAD: usize =
    1 + 255 + 16 + 8 + 8 + 1 + 1 + MAX_TRACE_HOPS * (1 + 255);
/// Largest body length a header may declare.
pub const MAX_BODY_LEN: usize = MAX_PAYLOAD + MAX_ENVELOPE_OVERHEAD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Data = 1,
    Sub = 2,
    Unsub = 3,
    Ping = 4,
    Pong = 5,
    Hello = 6,
    Stat = 7,
    Ctrl = 8,
}

impl FrameKind {
    pub const ALL: [FrameKind; 8] = [
        FrameKind::Data,
        FrameKind::Sub,
        FrameKind::Unsub,
        FrameKind::Ping,
        FrameKind::Pong,
        FrameKind::Hello,
        FrameKind::Stat,
        FrameKind::Ctrl,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(usize::from(v).wrapping_sub(1)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameKind::Data => "DATA",
            FrameKind::Sub => "SUB",
            FrameKind::Unsub => "UNSUB",
            FrameKind::Ping => "PING",
            FrameKind::Pong => "PONG",
            FrameKind::Hello => "HELLO",
            FrameKind::Stat => "STAT",
            FrameKind::Ctrl => "CTRL",
        }
    }
}

impl fmt::Display for FrameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Opaque 16-byte node / publisher identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub [u8; 16]);

impl NodeId {
    pub const fn from_bytes(b: [u8; 16]) -> Self {
        NodeId(b)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({self})")
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// Which side of the deployment a message was first published on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Origin {
    Edge = 0,
    Cloud = 1,
}

impl Origin {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Origin::Edge),
            1 => Some(Origin::Cloud),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Origin::Edge => Origin::Cloud,
            Origin::Cloud => Origin::Edge,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Edge => "edge",
            Origin::Cloud => "cloud",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "edge" | "EDGE" => Some(Origin::Edge),
            "cloud" | "CLOUD" => Some(Origin::Cloud),
            _ => None,
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One published message plus its routing metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageEnvelope {
    pub topic: TopicName,
    pub publisher_id: NodeId,
    pub seq: u64,
    pub origin: Origin,
    pub timestamp_ns: u64,
    pub payload: Vec<u8>,
    /// Hop labels, empty unless tracing is enabled.
    pub trace: Vec<String>,
}

impl MessageEnvelope {
    pub fn new(topic: TopicName, publisher_id: NodeId, seq: u64, origin: Origin) -> Self {
        MessageEnvelope {
            topic,
            publisher_id,
            seq,
            origin,
            timestamp_ns: 0,
            payload: Vec::new(),
            trace: Vec::new(),
        }
    }

    /// Appends a hop label. Labels beyond the hop limit are refused.
    pub fn push_hop(&mut self, label: &str) -> Result<(), EncodeError> {
        if self.trace.len() >= MAX_TRACE_HOPS {
            return Err(EncodeError::TraceTooLong(self.trace.len() + 1));
        }
        if label.len() > 255 {
            return Err(EncodeError::HopLabelTooLong(label.len()));
        }
        self.trace.push(String::from(label));
        Ok(())
    }

    fn encoded_body_len(&self) -> usize {
        1 + self.topic.len()
            + 16
            + 8
            + 8
            + 1
            + 1
            + self.trace.iter().map(|h| 1 + h.len()).sum::<usize>()
            + self.payload.len()
    }
}

/// A decoded frame: either a message envelope or a control record body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Data(MessageEnvelope),
    Control { kind: FrameKind, body: Vec<u8> },
}

impl Frame {
    pub fn kind(&self) -> FrameKind {
        match self {
            Frame::Data(_) => FrameKind::Data,
            Frame::Control { kind, .. } => *kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    OversizePayload(usize),
    #[error("control body of {0} bytes exceeds the frame limit")]
    OversizeBody(usize),
    #[error("trace of {0} hops exceeds the limit of 8")]
    TraceTooLong(usize),
    #[error("hop label of {0} bytes exceeds 255")]
    HopLabelTooLong(usize),
    #[error("DATA frames must carry an envelope")]
    DataNeedsEnvelope,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    /// The input ends early. `needed` is the full frame length once the
    /// header is readable, or the header length before that.
    #[error("need {needed} bytes")]
    NeedMoreBytes { needed: usize },
    #[error("declared body length {0} exceeds the limit")]
    OversizeDeclared(u32),
    #[error("malformed body: {0}")]
    Malformed(&'static str),
}

/// Encodes a frame into a fresh buffer.
pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::new();
    encode_frame_into(frame, &mut out)?;
    Ok(out)
}

/// Encodes a DATA frame for `env`.
pub fn encode_data(env: &MessageEnvelope) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(HEADER_LEN + env.encoded_body_len());
    encode_envelope_into(env, &mut out)?;
    Ok(out)
}

/// Encodes a control frame of the given kind around an opaque body.
pub fn encode_control(kind: FrameKind, body: &[u8]) -> Result<Vec<u8>, EncodeError> {
    if kind == FrameKind::Data {
        return Err(EncodeError::DataNeedsEnvelope);
    }
    if body.len() > MAX_BODY_LEN {
        return Err(EncodeError::OversizeBody(body.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    write_header(kind, body.len(), &mut out);
    out.extend_from_slice(body);
    Ok(out)
}

/// Appends the encoding of `frame` to `out`. On error `out` is left unchanged.
pub fn encode_frame_into(frame: &Frame, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    match frame {
        Frame::Data(env) => encode_envelope_into(env, out),
        Frame::Control { kind, body } => {
            let bytes = encode_control(*kind, body)?;
            out.extend_from_slice(&bytes);
            Ok(())
        }
    }
}

fn write_header(kind: FrameKind, len: usize, out: &mut Vec<u8>) {
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(kind as u8);
    out.extend_from_slice(&(len as u32).to_be_bytes());
}

fn encode_envelope_into(env: &MessageEnvelope, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    if env.payload.len() > MAX_PAYLOAD {
        return Err(EncodeError::OversizePayload(env.payload.len()));
    }
    if env.trace.len() > MAX_TRACE_HOPS {
        return Err(EncodeError::TraceTooLong(env.trace.len()));
    }
    if let Some(h) = env.trace.iter().find(|h| h.len() > 255) {
        return Err(EncodeError::HopLabelTooLong(h.len()));
    }
    // TopicName guarantees <= 255 bytes.
    let body_len = env.encoded_body_len();
    out.reserve(HEADER_LEN + body_len);
    write_header(FrameKind::Data, body_len, out);
    out.push(env.topic.len() as u8);
    out.extend_from_slice(env.topic.as_str().as_bytes());
    out.extend_from_slice(env.publisher_id.as_bytes());
    out.extend_from_slice(&env.seq.to_be_bytes());
    out.extend_from_slice(&env.timestamp_ns.to_be_bytes());
    out.push(env.origin as u8);
    out.push(env.trace.len() as u8);
    for hop in &env.trace {
        out.push(hop.len() as u8);
        out.extend_from_slice(hop.as_bytes());
    }
    out.extend_from_slice(&env.payload);
    Ok(())
}

/// Reads the header at the start of `bytes` and returns the kind and the
/// total frame length. Fails early on bad magic/version/kind even when the
/// header is incomplete.
pub fn peek_header(bytes: &[u8]) -> Result<(FrameKind, usize), DecodeError> {
    let magic_avail = bytes.len().min(4);
    if bytes[..magic_avail] != MAGIC[..magic_avail] {
        return Err(DecodeError::BadMagic);
    }
    if let Some(&v) = bytes.get(4) {
        if v != VERSION {
            return Err(DecodeError::UnsupportedVersion(v));
        }
    }
    let kind = match bytes.get(5) {
        Some(&k) => FrameKind::from_u8(k).ok_or(DecodeError::UnknownKind(k))?,
        None => return Err(DecodeError::NeedMoreBytes { needed: HEADER_LEN }),
    };
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::NeedMoreBytes { needed: HEADER_LEN });
    }
    let len = u32::from_be_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]);
    if len as usize > MAX_BODY_LEN {
        return Err(DecodeError::OversizeDeclared(len));
    }
    Ok((kind, HEADER_LEN + len as usize))
}

/// Decodes one frame from the front of `bytes`, returning it with the number
/// of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), DecodeError> {
    let (kind, total) = peek_header(bytes)?;
    if bytes.len() < total {
        return Err(DecodeError::NeedMoreBytes { needed: total });
    }
    let body = &bytes[HEADER_LEN..total];
    let frame = match kind {
        FrameKind::Data => Frame::Data(decode_envelope(body)?),
        kind => Frame::Control {
            kind,
            body: body.to_vec(),
        },
    };
    Ok((frame, total))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::Malformed("body truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_be_bytes(a))
    }

    fn short_str(&mut self) -> Result<&'a str, DecodeError> {
        let n = self.u8()? as usize;
        core::str::from_utf8(self.take(n)?).map_err(|_| DecodeError::Malformed("invalid utf-8"))
    }
}

fn decode_envelope(body: &[u8]) -> Result<MessageEnvelope, DecodeError> {
    let mut r = Reader { buf: body };
    let topic = TopicName::new(r.short_str()?).map_err(|_| DecodeError::Malformed("invalid topic"))?;
    let mut id = [0u8; 16];
    id.copy_from_slice(r.take(16)?);
    let seq = r.u64()?;
    let timestamp_ns = r.u64()?;
    let origin = Origin::from_u8(r.u8()?).ok_or(DecodeError::Malformed("invalid origin"))?;
    let hops = r.u8()? as usize;
    if hops > MAX_TRACE_HOPS {
        return Err(DecodeError::Malformed("trace too long"));
    }
    let mut trace = Vec::with_capacity(hops);
    for _ in 0..hops {
        trace.push(String::from(r.short_str()?));
    }
    if r.buf.len() > MAX_PAYLOAD {
        return Err(DecodeError::Malformed("payload too large"));
    }
    Ok(MessageEnvelope {
        topic,
        publisher_id: NodeId(id),
        seq,
        origin,
        timestamp_ns,
        payload: r.buf.to_vec(),
        trace,
    })
}
