//! Authenticated, encrypted frame transport between two proxy endpoints.
//!
//! The handshake is carried in plain HELLO frames. Afterwards every frame is
//! sent as a record: a 4-byte big-endian length followed by the sealed frame.

use std::collections::HashMap;
use std::io::{self, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, SyncSender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use fog_core::codec::{self, Frame, FrameKind, MAX_BODY_LEN};
use fog_core::control::Control;
use fog_core::secure::{
    ChannelRole, DeploymentSecret, HandshakeError, Initiator, Opener, RecordError, Responder, Sealer, COUNTER_LEN,
    NONCE_LEN, TAG_LEN,
};
use fog_core::stats::{SlidingRate, DEFAULT_RATE_WINDOW_NS};

use crate::net;

pub const MAX_RECORD_LEN: usize = codec::HEADER_LEN + MAX_BODY_LEN + COUNTER_LEN + TAG_LEN;
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

const STAGE_NONCE: u8 = 1;
const STAGE_PROOF: u8 = 2;
const STAGE_CONFIRM: u8 = 3;
const STAGE_ACCEPT: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum ChannelError {
    #[error("channel i/o: {0}")]
    Io(#[from] io::Error),
    #[error("handshake: {0}")]
    Handshake(#[from] HandshakeError),
    #[error("record: {0}")]
    Record(#[from] RecordError),
    #[error("bad frame inside record: {0}")]
    Decode(String),
    #[error("record of {0} bytes exceeds the limit")]
    TooLarge(usize),
}

impl ChannelError {
    pub fn is_replay(&self) -> bool {
        matches!(self, ChannelError::Record(RecordError::ReplayDetected { .. }))
    }
}

fn kind_slot(kind: FrameKind) -> usize {
    kind as usize - 1
}

/// Frame counts per kind in each direction, plus DATA payload accounting.
/// Shared across sessions so totals survive reconnects.
pub struct ChannelCounters {
    sent: [AtomicU64; 8],
    received: [AtomicU64; 8],
    data_bytes_out: AtomicU64,
    data_bytes_in: AtomicU64,
    rate_out: Mutex<SlidingRate>,
    rate_in: Mutex<SlidingRate>,
}

impl Default for ChannelCounters {
    fn default() -> Self {
        ChannelCounters {
            sent: Default::default(),
            received: Default::default(),
            data_bytes_out: AtomicU64::new(0),
            data_bytes_in: AtomicU64::new(0),
            rate_out: Mutex::new(SlidingRate::new(DEFAULT_RATE_WINDOW_NS)),
            rate_in: Mutex::new(SlidingRate::new(DEFAULT_RATE_WINDOW_NS)),
        }
    }
}

impl ChannelCounters {
    fn on_sent(&self, frame: &Frame) {
        self.sent[kind_slot(frame.kind())].fetch_add(1, Ordering::Relaxed);
        if let Frame::Data(env) = frame {
            let n = env.payload.len() as u64;
            self.data_bytes_out.fetch_add(n, Ordering::Relaxed);
            self.rate_out.lock().unwrap().record(net::now_ns(), n);
        }
    }

    fn on_received(&self, frame: &Frame) {
        self.received[kind_slot(frame.kind())].fetch_add(1, Ordering::Relaxed);
        if let Frame::Data(env) = frame {
            let n = env.payload.len() as u64;
            self.data_bytes_in.fetch_add(n, Ordering::Relaxed);
            self.rate_in.lock().unwrap().record(net::now_ns(), n);
        }
    }

    /// (in, out) DATA payload rates in bytes/s over the sliding window.
    pub fn rates(&self, now_ns: u64) -> (f64, f64) {
        let i = self.rate_in.lock().unwrap().rate(now_ns);
        let o = self.rate_out.lock().unwrap().rate(now_ns);
        (i, o)
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        let load = |a: &[AtomicU64; 8]| {
            let mut out = [0u64; 8];
            for (o, v) in out.iter_mut().zip(a) {
                *o = v.load(Ordering::Relaxed);
            }
            out
        };
        CounterSnapshot {
            sent: load(&self.sent),
            received: load(&self.received),
            data_bytes_out: self.data_bytes_out.load(Ordering::Relaxed),
            data_bytes_in: self.data_bytes_in.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub sent: [u64; 8],
    pub received: [u64; 8],
    pub data_bytes_out: u64,
    pub data_bytes_in: u64,
}

impl CounterSnapshot {
    pub fn sent(&self, kind: FrameKind) -> u64 {
        self.sent[kind_slot(kind)]
    }

    pub fn received(&self, kind: FrameKind) -> u64 {
        self.received[kind_slot(kind)]
    }

    /// Frames of `kind` in either direction.
    pub fn total(&self, kind: FrameKind) -> u64 {
        self.sent(kind) + self.received(kind)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut sent = serde_json::Map::new();
        let mut recv = serde_json::Map::new();
        for k in FrameKind::ALL {
            sent.insert(k.name().to_string(), self.sent(k).into());
            recv.insert(k.name().to_string(), self.received(k).into());
        }
        serde_json::json!({
            "sent": sent,
            "received": recv,
            "data_bytes_out": self.data_bytes_out,
            "data_bytes_in": self.data_bytes_in,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Option<Self> {
        let mut out = CounterSnapshot::default();
        for k in FrameKind::ALL {
            out.sent[kind_slot(k)] = v["sent"][k.name()].as_u64()?;
            out.received[kind_slot(k)] = v["received"][k.name()].as_u64()?;
        }
        out.data_bytes_out = v["data_bytes_out"].as_u64()?;
        out.data_bytes_in = v["data_bytes_in"].as_u64()?;
        Some(out)
    }
}

struct SendState {
    sealer: Sealer,
    stream: TcpStream,
}

/// Sending half. Safe to share between threads; records go out in counter
/// order.
pub struct ChannelSender {
    state: Mutex<SendState>,
    ctl: TcpStream,
    counters: Arc<ChannelCounters>,
    key_id: [u8; 8],
}

impl ChannelSender {
    pub fn send(&self, frame: &Frame) -> Result<(), ChannelError> {
        let plain = codec::encode_frame(frame).map_err(|e| ChannelError::Decode(e.to_string()))?;
        let mut st = self.state.lock().unwrap();
        let record = st.sealer.seal(&plain)?;
        let mut out = Vec::with_capacity(4 + record.len());
        out.extend_from_slice(&(record.len() as u32).to_be_bytes());
        out.extend_from_slice(&record);
        st.stream.write_all(&out)?;
        drop(st);
        self.counters.on_sent(frame);
        Ok(())
    }

    pub fn send_control(&self, msg: &Control) -> Result<(), ChannelError> {
        self.send(&msg.to_frame())
    }

    /// Closes the underlying connection in both directions.
    pub fn close(&self) {
        let _ = self.ctl.shutdown(Shutdown::Both);
    }

    pub fn key_id(&self) -> [u8; 8] {
        self.key_id
    }
}

/// Receiving half.
pub struct ChannelReceiver {
    reader: BufReader<TcpStream>,
    opener: Opener,
    counters: Arc<ChannelCounters>,
    key_id: [u8; 8],
}

impl ChannelReceiver {
    /// Waits for the next frame. Any error ends the session.
    pub fn recv(&mut self) -> Result<Frame, ChannelError> {
        let mut len = [0u8; 4];
        self.reader.read_exact(&mut len)?;
        let len = u32::from_be_bytes(len) as usize;
        if len > MAX_RECORD_LEN {
            return Err(ChannelError::TooLarge(len));
        }
        let mut record = vec![0u8; len];
        self.reader.read_exact(&mut record)?;
        let plain = self.opener.open(&record)?;
        let frame = net::decode_exact(&plain).map_err(|e| ChannelError::Decode(e.to_string()))?;
        self.counters.on_received(&frame);
        Ok(frame)
    }

    pub fn set_timeout(&self, d: Option<Duration>) -> io::Result<()> {
        self.reader.get_ref().set_read_timeout(d)
    }

    pub fn key_id(&self) -> [u8; 8] {
        self.key_id
    }
}

fn expect_stage(r: &mut impl Read, stage: u8) -> Result<Vec<u8>, ChannelError> {
    let frame = net::read_frame(r)?;
    match Control::from_frame(&frame) {
        Ok(Control::Handshake { stage: s, data }) if s == stage => Ok(data),
        _ => Err(HandshakeError::Malformed.into()),
    }
}

fn send_stage(w: &mut impl Write, stage: u8, data: Vec<u8>) -> io::Result<()> {
    net::write_frame(w, &Control::Handshake { stage, data }.to_frame())
}

/// Runs the handshake on `stream` and splits the resulting session.
pub fn establish(
    stream: TcpStream,
    secret: &DeploymentSecret,
    role: ChannelRole,
    counters: Arc<ChannelCounters>,
) -> Result<(ChannelSender, ChannelReceiver), ChannelError> {
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    stream.set_write_timeout(Some(HANDSHAKE_TIMEOUT))?;
    let mut s = stream;
    let session = match role {
        ChannelRole::Initiator => {
            let (init, msg1) = Initiator::start(secret.clone(), rand::random::<[u8; NONCE_LEN]>());
            send_stage(&mut s, STAGE_NONCE, msg1.to_vec())?;
            let msg2 = expect_stage(&mut s, STAGE_PROOF)?;
            let (msg3, session) = init.finish(&msg2)?;
            send_stage(&mut s, STAGE_CONFIRM, msg3)?;
            expect_stage(&mut s, STAGE_ACCEPT)?;
            session
        }
        ChannelRole::Responder => {
            let msg1 = expect_stage(&mut s, STAGE_NONCE)?;
            let (resp, msg2) = Responder::respond(secret.clone(), &msg1, rand::random::<[u8; NONCE_LEN]>())?;
            send_stage(&mut s, STAGE_PROOF, msg2)?;
            let msg3 = expect_stage(&mut s, STAGE_CONFIRM)?;
            let session = resp.finish(&msg3)?;
            send_stage(&mut s, STAGE_ACCEPT, Vec::new())?;
            session
        }
    };
    s.set_read_timeout(None)?;
    let send_key_id = session.send_key_id;
    let recv_key_id = session.recv_key_id;
    let (sealer, opener) = session.split();
    let reader = BufReader::with_capacity(64 * 1024, s.try_clone()?);
    Ok((
        ChannelSender {
            ctl: s.try_clone()?,
            state: Mutex::new(SendState { sealer, stream: s }),
            counters: counters.clone(),
            key_id: send_key_id,
        },
        ChannelReceiver {
            reader,
            opener,
            counters,
            key_id: recv_key_id,
        },
    ))
}

/// Holds the current session of a reconnecting channel. Senders that find
/// no session drop their frame.
pub struct ChannelSlot {
    current: Mutex<Option<(u64, Arc<ChannelSender>)>>,
    generation: AtomicU64,
    counters: Arc<ChannelCounters>,
    pongs: Mutex<HashMap<u64, SyncSender<()>>>,
    next_probe: AtomicU64,
    dropped: AtomicU64,
}

impl Default for ChannelSlot {
    fn default() -> Self {
        ChannelSlot {
            current: Mutex::new(None),
            generation: AtomicU64::new(0),
            counters: Arc::default(),
            pongs: Mutex::new(HashMap::new()),
            next_probe: AtomicU64::new(1),
            dropped: AtomicU64::new(0),
        }
    }
}

impl ChannelSlot {
    pub fn counters(&self) -> &Arc<ChannelCounters> {
        &self.counters
    }

    /// Makes `sender` current, closing any previous session. Returns the
    /// session's generation.
    pub fn install(&self, sender: ChannelSender) -> u64 {
        let g = self.generation.fetch_add(1, Ordering::SeqCst) + 1;
        if let Some((_, old)) = self.current.lock().unwrap().replace((g, Arc::new(sender))) {
            old.close();
        }
        g
    }

    /// Drops the session if it is still generation `g`.
    pub fn clear(&self, g: u64) {
        let mut cur = self.current.lock().unwrap();
        if cur.as_ref().is_some_and(|(cg, _)| *cg == g) {
            if let Some((_, s)) = cur.take() {
                s.close();
            }
        }
    }

    pub fn close(&self) {
        if let Some((_, s)) = self.current.lock().unwrap().take() {
            s.close();
        }
    }

    pub fn is_up(&self) -> bool {
        self.current.lock().unwrap().is_some()
    }

    /// Sends on the current session. A failed send ends that session.
    pub fn send(&self, frame: &Frame) -> bool {
        let cur = self.current.lock().unwrap().clone();
        let Some((g, sender)) = cur else {
            self.dropped.fetch_add(1, Ordering::Relaxed);
            return false;
        };
        match sender.send(frame) {
            Ok(()) => true,
            Err(e) => {
                log::debug!("channel send failed: {e}");
                self.dropped.fetch_add(1, Ordering::Relaxed);
                self.clear(g);
                false
            }
        }
    }

    /// Frames dropped because no session was up.
    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    /// Sends a PING and waits for the matching PONG.
    pub fn probe(&self, timeout: Duration) -> Option<Duration> {
        let id = self.next_probe.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::sync_channel(1);
        self.pongs.lock().unwrap().insert(id, tx);
        let start = Instant::now();
        let ok = self.send(&Control::Probe { id, sent_ns: net::now_ns() }.to_frame())
            && rx.recv_timeout(timeout).is_ok();
        self.pongs.lock().unwrap().remove(&id);
        ok.then(|| start.elapsed())
    }

    /// Hands a received PONG to its waiting probe.
    pub fn on_pong(&self, id: u64) {
        if let Some(tx) = self.pongs.lock().unwrap().remove(&id) {
            let _ = tx.try_send(());
        }
    }
}
