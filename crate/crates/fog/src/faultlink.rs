//! TCP relay that can be cut on demand, for exercising reconnect paths.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

struct State {
    target: String,
    conns: Mutex<Vec<TcpStream>>,
    down_until: Mutex<Option<Instant>>,
    stopped: AtomicBool,
    accepted: AtomicU64,
    refused: AtomicU64,
}

impl State {
    fn is_down(&self) -> bool {
        let mut g = self.down_until.lock().unwrap();
        match *g {
            Some(t) if Instant::now() < t => true,
            Some(_) => {
                *g = None;
                false
            }
            None => false,
        }
    }

    fn cut_all(&self) {
        for s in self.conns.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

pub struct FaultLink {
    state: Arc<State>,
    addr: SocketAddr,
}

impl FaultLink {
    /// Starts relaying connections made to the returned link's address on to
    /// `target`.
    pub fn start(target: &str) -> io::Result<FaultLink> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let state = Arc::new(State {
            target: target.to_string(),
            conns: Mutex::new(Vec::new()),
            down_until: Mutex::new(None),
            stopped: AtomicBool::new(false),
            accepted: AtomicU64::new(0),
            refused: AtomicU64::new(0),
        });
        let st = state.clone();
        thread::Builder::new()
            .name("faultlink".into())
            .spawn(move || accept_loop(listener, st))?;
        Ok(FaultLink { state, addr })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Drops every relayed connection and refuses new ones for `d`.
    pub fn sever_for(&self, d: Duration) {
        *self.state.down_until.lock().unwrap() = Some(Instant::now() + d);
        self.state.cut_all();
    }

    pub fn accepted(&self) -> u64 {
        self.state.accepted.load(Ordering::SeqCst)
    }

    pub fn refused(&self) -> u64 {
        self.state.refused.load(Ordering::SeqCst)
    }
}

impl Drop for FaultLink {
    fn drop(&mut self) {
        self.state.stopped.store(true, Ordering::SeqCst);
        self.state.cut_all();
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
    }
}

fn accept_loop(listener: TcpListener, st: Arc<State>) {
    for inc in listener.incoming() {
        if st.stopped.load(Ordering::SeqCst) {
            return;
        }
        let Ok(a) = inc else { continue };
        if st.is_down() {
            st.refused.fetch_add(1, Ordering::SeqCst);
            drop(a);
            continue;
        }
        let Ok(b) = TcpStream::connect(&st.target) else {
            continue;
        };
        st.accepted.fetch_add(1, Ordering::SeqCst);
        let _ = a.set_nodelay(true);
        let _ = b.set_nodelay(true);
        let pairs = [(a.try_clone(), b.try_clone()), (b.try_clone(), a.try_clone())];
        {
            let mut conns = st.conns.lock().unwrap();
            conns.push(a);
            conns.push(b);
        }
        for (from, to) in pairs {
            if let (Ok(from), Ok(to)) = (from, to) {
                thread::spawn(move || pipe(from, to));
            }
        }
    }
}

fn pipe(mut from: TcpStream, mut to: TcpStream) {
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        match from.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if to.write_all(&buf[..n]).is_err() {
                    break;
                }
            }
        }
    }
    let _ = from.shutdown(Shutdown::Both);
    let _ = to.shutdown(Shutdown::Both);
}
