//! Message transports for the per-iteration broadcast of `(β_i, w_i)`.

use std::io::Write;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread::JoinHandle;
use std::time::Duration;

use super::frame;
use crate::error::{FleetError, Result};

/// What node `sender` publishes in iteration `iteration`.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub iteration: u64,
    pub sender: u32,
    pub beta: Vec<f64>,
    pub w: Vec<f64>,
}

/// Delivery of one broadcast per node per iteration. Implementations must
/// accept concurrent `broadcast` calls.
pub trait Transport: Sync {
    fn broadcast(&self, msg: &Broadcast) -> Result<()>;

    /// Everything published for `iteration`, ordered by sender. Returns once
    /// `expected` messages arrived; what is missing or duplicated is left for
    /// the receiver to reject.
    fn collect(&self, iteration: u64, expected: usize) -> Result<Vec<Broadcast>>;

    /// Total number of broadcasts accepted so far.
    fn sent(&self) -> u64;
}

/// Shared in-memory bus.
#[derive(Debug, Default)]
pub struct InProcessBus {
    pending: Mutex<Vec<Broadcast>>,
    sent: AtomicU64,
}

impl InProcessBus {
    pub fn new() -> Self {
        Self::default()
    }
}

fn sorted_round(mut msgs: Vec<Broadcast>, iteration: u64) -> Result<Vec<Broadcast>> {
    if let Some(stale) = msgs.iter().find(|m| m.iteration != iteration) {
        return Err(FleetError::Protocol(format!(
            "node {} sent a message for iteration {} during iteration {iteration}",
            stale.sender + 1,
            stale.iteration
        )));
    }
    msgs.sort_by_key(|m| m.sender);
    Ok(msgs)
}

impl Transport for InProcessBus {
    fn broadcast(&self, msg: &Broadcast) -> Result<()> {
        self.pending
            .lock()
            .map_err(|_| FleetError::Transport("bus lock poisoned".into()))?
            .push(msg.clone());
        self.sent.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn collect(&self, iteration: u64, _expected: usize) -> Result<Vec<Broadcast>> {
        let msgs = std::mem::take(
            &mut *self
                .pending
                .lock()
                .map_err(|_| FleetError::Transport("bus lock poisoned".into()))?,
        );
        sorted_round(msgs, iteration)
    }

    fn sent(&self) -> u64 {
        self.sent.load(Ordering::Relaxed)
    }
}

/// Broadcasts travel as framed bytes over loopback TCP: every node owns a
/// connection to a local relay, which decodes incoming frames and hands them
/// to the receiving side.
pub struct LoopbackSocket {
    senders: Vec<Mutex<TcpStream>>,
    inbox: Mutex<Receiver<Result<Broadcast>>>,
    readers: Vec<JoinHandle<()>>,
    sent: AtomicU64,
    timeout: Duration,
}

impl LoopbackSocket {
    pub fn connect(nodes: usize) -> Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", 0))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let mut senders = Vec::with_capacity(nodes);
        let mut readers = Vec::with_capacity(nodes);
        for _ in 0..nodes {
            let out = TcpStream::connect(addr)?;
            out.set_nodelay(true)?;
            let (mut incoming, _) = listener.accept()?;
            let tx = tx.clone();
            readers.push(std::thread::spawn(move || loop {
                match frame::read_frame(&mut incoming) {
                    Ok(Some(msg)) => {
                        if tx.send(Ok(msg)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => return,
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        return;
                    }
                }
            }));
            senders.push(Mutex::new(out));
        }
        Ok(Self {
            senders,
            inbox: Mutex::new(rx),
            readers,
            sent: AtomicU64::new(0),
            timeout: Duration::from_secs(30),
        })
    }
}

impl Transport for LoopbackSocket {
    fn broadcast(&self, msg: &Broadcast) -> Result<()> {
        let stream = self
            .senders
            .get(msg.sender as usize)
            .ok_or_else(|| FleetError::Protocol(format!("no connection for node {}", msg.sender + 1)))?;
        let bytes = frame::encode(msg)?;
        stream
            .lock()
            .map_err(|_| FleetError::Transport("socket lock poisoned".into()))?
            .write_all(&bytes)
            .map_err(|e| FleetError::Transport(format!("send from node {}: {e}", msg.sender + 1)))?;
        self.sent.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn collect(&self, iteration: u64, expected: usize) -> Result<Vec<Broadcast>> {
        let inbox = self
            .inbox
            .lock()
            .map_err(|_| FleetError::Transport("inbox lock poisoned".into()))?;
        let mut msgs = Vec::with_capacity(expected);
        while msgs.len() < expected {
            match inbox.recv_timeout(self.timeout) {
                Ok(msg) => msgs.push(msg?),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(FleetError::Transport(format!(
                        "timed out waiting for broadcasts of iteration {iteration} ({} of {expected})",
                        msgs.len()
                    )))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(FleetError::Transport("relay closed".into()))
                }
            }
        }
        sorted_round(msgs, iteration)
    }

    fn sent(&self) -> u64 {
        self.sent.load(Ordering::Relaxed)
    }
}

impl Drop for LoopbackSocket {
    fn drop(&mut self) {
        for s in &self.senders {
            if let Ok(s) = s.lock() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
        for h in self.readers.drain(..) {
            let _ = h.join();
        }
    }
}
