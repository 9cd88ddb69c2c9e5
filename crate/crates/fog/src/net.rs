//! Frame I/O over byte streams and guarded listeners.

use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use std::net::{IpAddr, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use fog_core::codec::{self, peek_header, DecodeError, Frame, HEADER_LEN};

/// Environment variable listing the ports an instance may listen on.
pub const ENV_ALLOWED_PORTS: &str = "FOG_ALLOWED_PORTS";
/// Environment variable listing peer IPs an instance accepts connections from.
pub const ENV_ALLOWED_PEERS: &str = "FOG_ALLOWED_PEERS";

fn invalid(e: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e.to_string())
}

/// Reads exactly one frame. Any decode problem is reported as
/// `InvalidData`; the stream is unusable afterwards.
pub fn read_frame(r: &mut impl Read) -> io::Result<Frame> {
    let mut buf = vec![0u8; HEADER_LEN];
    r.read_exact(&mut buf)?;
    let total = match peek_header(&buf) {
        Ok((_, total)) => total,
        Err(e) => return Err(invalid(e)),
    };
    buf.resize(total, 0);
    r.read_exact(&mut buf[HEADER_LEN..])?;
    decode_exact(&buf)
}

/// Decodes a buffer that must hold exactly one frame.
pub fn decode_exact(buf: &[u8]) -> io::Result<Frame> {
    match codec::decode_frame(buf) {
        Ok((frame, used)) if used == buf.len() => Ok(frame),
        Ok(_) => Err(invalid("trailing bytes after frame")),
        Err(DecodeError::NeedMoreBytes { .. }) => Err(io::ErrorKind::UnexpectedEof.into()),
        Err(e) => Err(invalid(e)),
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    let bytes = codec::encode_frame(frame).map_err(invalid)?;
    w.write_all(&bytes)
}

pub fn connect(addr: &str, timeout: Duration) -> io::Result<TcpStream> {
    let mut last = io::Error::new(io::ErrorKind::NotFound, format!("{addr}: no addresses"));
    for sa in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&sa, timeout) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn parse_ports(v: &str) -> BTreeSet<u16> {
    v.split(',').filter_map(|p| p.trim().parse().ok()).collect()
}

/// Inbound rules as seen by a process inside an instance.
#[derive(Debug, Clone, Default)]
pub struct AcceptRules {
    pub ports: Option<BTreeSet<u16>>,
    pub peers: Option<BTreeSet<IpAddr>>,
}

impl AcceptRules {
    pub fn from_env() -> Self {
        AcceptRules {
            ports: std::env::var(ENV_ALLOWED_PORTS).ok().map(|v| parse_ports(&v)),
            peers: std::env::var(ENV_ALLOWED_PEERS)
                .ok()
                .map(|v| v.split(',').filter_map(|p| p.trim().parse().ok()).collect()),
        }
    }

    pub fn permits_port(&self, port: u16) -> bool {
        self.ports.as_ref().is_none_or(|p| p.contains(&port))
    }

    pub fn permits_peer(&self, ip: IpAddr) -> bool {
        self.peers.as_ref().is_none_or(|p| p.contains(&ip))
    }
}

/// A listener that only binds allowlisted ports and drops connections from
/// peers outside the allowlist.
pub struct GuardedListener {
    inner: TcpListener,
    rules: AcceptRules,
}

impl GuardedListener {
    pub fn bind(addr: SocketAddr, rules: AcceptRules) -> io::Result<Self> {
        if !rules.permits_port(addr.port()) {
            return Err(io::Error::new(
                io::ErrorKind::PermissionDenied,
                format!("port {} is not in the instance's security rules", addr.port()),
            ));
        }
        Ok(GuardedListener {
            inner: TcpListener::bind(addr)?,
            rules,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.inner.local_addr()
    }

    pub fn accept(&self) -> io::Result<(TcpStream, SocketAddr)> {
        loop {
            let (s, peer) = self.inner.accept()?;
            if self.rules.permits_peer(peer.ip()) {
                s.set_nodelay(true)?;
                return Ok((s, peer));
            }
            log::warn!("refusing connection from {peer}: not in peer allowlist");
            drop(s);
        }
    }

    pub fn set_nonblocking(&self, nb: bool) -> io::Result<()> {
        self.inner.set_nonblocking(nb)
    }
}

/// Finds a currently free loopback port. Racy by nature; good enough for
/// allocating ports on a single desk machine.
pub fn free_port() -> io::Result<u16> {
    Ok(TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}

/// True if something accepts TCP connections on `addr`.
pub fn is_listening(addr: &str) -> bool {
    connect(addr, Duration::from_millis(200)).is_ok()
}

/// Polls until `addr` accepts connections or `timeout` passes.
pub fn wait_listening(addr: &str, timeout: Duration) -> bool {
    let deadline = std::time::Instant::now() + timeout;
    loop {
        if is_listening(addr) {
            return true;
        }
        if std::time::Instant::now() >= deadline {
            return false;
        }
        std::thread::sleep(Duration::from_millis(25));
    }
}

pub fn now_ns() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}
