//! Star-topology middleware broker.
//!
//! One broker listens on exactly one address and mediates two interaction
//! patterns: publish/subscribe channels (a published frame is relayed to
//! every subscriber except the publisher) and request/response services (a
//! request is forwarded to the single registered provider under a
//! broker-assigned correlation id, and the response is routed back to the
//! requester under the requester's original id).
//!
//! Routing for one inbound frame is atomic with respect to table mutation:
//! the routing table lock is held while the outputs are queued, so a
//! concurrent subscribe can never observe a partially applied publish.
//! Undeliverable frames (crashed subscriber, vanished requester) are dropped
//! and logged.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;

use crate::wire::{self, Frame, FrameType};

/// Broker endpoint: a filesystem-addressed stream socket (binds cleanly into
/// jails via a single bind mount) or TCP on loopback for loopback-only jails.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BrokerAddr {
    Unix(PathBuf),
    Tcp(String),
}

impl BrokerAddr {
    /// Parse "unix:<path>", "tcp:<host:port>", or a bare filesystem path.
    pub fn parse(s: &str) -> Result<BrokerAddr, String> {
        if let Some(path) = s.strip_prefix("unix:") {
            Ok(BrokerAddr::Unix(PathBuf::from(path)))
        } else if let Some(addr) = s.strip_prefix("tcp:") {
            Ok(BrokerAddr::Tcp(addr.to_string()))
        } else if s.starts_with('/') {
            Ok(BrokerAddr::Unix(PathBuf::from(s)))
        } else {
            Err(format!("cannot parse broker address `{s}`"))
        }
    }

    /// The `ORBITJAIL_BROKER` environment variable, if set and parseable.
    pub fn from_env() -> Option<BrokerAddr> {
        std::env::var("ORBITJAIL_BROKER")
            .ok()
            .and_then(|s| BrokerAddr::parse(&s).ok())
    }
}

impl std::fmt::Display for BrokerAddr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BrokerAddr::Unix(p) => write!(f, "unix:{}", p.display()),
            BrokerAddr::Tcp(a) => write!(f, "tcp:{a}"),
        }
    }
}

pub type ConnId = u64;

struct Pending {
    requester: ConnId,
    client_corr: u32,
}

/// Routing tables. One provider per service name; pending requests are
/// removed exactly once, on response or provider disconnect.
#[derive(Default)]
pub struct BrokerState {
    subscriptions: HashMap<String, BTreeSet<ConnId>>,
    services: HashMap<String, ConnId>,
    pending: HashMap<u32, Pending>,
    next_corr: u32,
}

impl BrokerState {
    pub fn new() -> BrokerState {
        BrokerState::default()
    }

    /// Route one inbound frame, returning the frames to deliver.
    pub fn route(&mut self, from: ConnId, frame: Frame) -> Vec<(ConnId, Frame)> {
        match frame.frame_type {
            FrameType::Sub => {
                self.subscriptions
                    .entry(frame.name)
                    .or_default()
                    .insert(from);
                Vec::new()
            }
            FrameType::Pub => {
                let subscribers = match self.subscriptions.get(&frame.name) {
                    Some(set) => set,
                    None => return Vec::new(),
                };
                subscribers
                    .iter()
                    .filter(|&&conn| conn != from)
                    .map(|&conn| (conn, frame.clone()))
                    .collect()
            }
            FrameType::RegSvc => {
                if self.services.contains_key(&frame.name) {
                    return vec![(
                        from,
                        Frame::new(
                            FrameType::Err,
                            &frame.name,
                            frame.corr_id,
                            b"duplicate-service",
                        ),
                    )];
                }
                self.services.insert(frame.name, from);
                Vec::new()
            }
            FrameType::Req => {
                let provider = match self.services.get(&frame.name) {
                    Some(&conn) => conn,
                    None => {
                        return vec![(
                            from,
                            Frame::new(
                                FrameType::Err,
                                &frame.name,
                                frame.corr_id,
                                b"no-such-service",
                            ),
                        )]
                    }
                };
                let broker_corr = self.fresh_corr();
                self.pending.insert(
                    broker_corr,
                    Pending {
                        requester: from,
                        client_corr: frame.corr_id,
                    },
                );
                vec![(
                    provider,
                    Frame::new(FrameType::Req, &frame.name, broker_corr, &frame.payload),
                )]
            }
            FrameType::Resp => match self.pending.remove(&frame.corr_id) {
                Some(p) => vec![(
                    p.requester,
                    Frame::new(FrameType::Resp, &frame.name, p.client_corr, &frame.payload),
                )],
                None => {
                    log::warn!("response with unknown corr_id {} dropped", frame.corr_id);
                    Vec::new()
                }
            },
            FrameType::Err => match self.pending.remove(&frame.corr_id) {
                Some(p) => vec![(
                    p.requester,
                    Frame::new(FrameType::Err, &frame.name, p.client_corr, &frame.payload),
                )],
                None => {
                    log::warn!("error frame with unknown corr_id {} dropped", frame.corr_id);
                    Vec::new()
                }
            },
        }
    }

    /// Remove a connection from the subscription and service tables and drop
    /// its own pending requests. Requests in flight toward a disconnected
    /// provider are handled by the server layer, which tracks providers per
    /// correlation id.
    pub fn disconnect(&mut self, conn: ConnId) -> Vec<(ConnId, Frame)> {
        for subscribers in self.subscriptions.values_mut() {
            subscribers.remove(&conn);
        }
        self.services.retain(|_, provider| *provider != conn);
        self.pending.retain(|_, p| p.requester != conn);
        Vec::new()
    }

    fn fresh_corr(&mut self) -> u32 {
        loop {
            self.next_corr = self.next_corr.wrapping_add(1);
            if self.next_corr != 0 && !self.pending.contains_key(&self.next_corr) {
                return self.next_corr;
            }
        }
    }

    /// In-flight broker-assigned correlation ids (for the uniqueness
    /// property; ids are unique by construction of `fresh_corr`).
    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }
}

/// Handle to a running broker.
pub struct Broker {
    addr: BrokerAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<thread::JoinHandle<()>>,
    /// Path to unlink on drop for unix listeners.
    unlink: Option<PathBuf>,
}

impl Broker {
    /// Bind and start serving. For TCP, "tcp:127.0.0.1:0" picks a free port;
    /// the resolved address is available via [`Broker::addr`].
    pub fn bind(addr: &BrokerAddr) -> std::io::Result<Broker> {
        let shutdown = Arc::new(AtomicBool::new(false));
        let shared = Arc::new(Shared {
            state: Mutex::new(BrokerStateWithProviders::new()),
            outboxes: Mutex::new(HashMap::new()),
        });

        match addr {
            BrokerAddr::Unix(path) => {
                if path.exists() {
                    std::fs::remove_file(path)?;
                }
                let listener = UnixListener::bind(path)?;
                let accept = spawn_acceptor(listener, shared, shutdown.clone());
                Ok(Broker {
                    addr: BrokerAddr::Unix(path.clone()),
                    shutdown,
                    accept_thread: Some(accept),
                    unlink: Some(path.clone()),
                })
            }
            BrokerAddr::Tcp(spec) => {
                let listener = TcpListener::bind(spec)?;
                let resolved = listener.local_addr()?;
                let accept = spawn_acceptor(listener, shared, shutdown.clone());
                Ok(Broker {
                    addr: BrokerAddr::Tcp(resolved.to_string()),
                    shutdown,
                    accept_thread: Some(accept),
                    unlink: None,
                })
            }
        }
    }

    pub fn addr(&self) -> &BrokerAddr {
        &self.addr
    }

    /// Stop accepting and wake the accept loop.
    pub fn shutdown(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Poke the listener so accept() returns.
        match &self.addr {
            BrokerAddr::Unix(path) => {
                let _ = UnixStream::connect(path);
            }
            BrokerAddr::Tcp(addr) => {
                let _ = TcpStream::connect(addr);
            }
        }
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        self.shutdown();
        if let Some(path) = &self.unlink {
            let _ = std::fs::remove_file(path);
        }
    }
}

/// Server-side state: the routing tables plus provider tracking so a
/// provider disconnect can answer its orphaned requests.
struct BrokerStateWithProviders {
    inner: BrokerState,
    /// broker corr id -> provider connection
    in_flight_providers: HashMap<u32, ConnId>,
    next_conn: ConnId,
}

impl BrokerStateWithProviders {
    fn new() -> Self {
        BrokerStateWithProviders {
            inner: BrokerState::new(),
            in_flight_providers: HashMap::new(),
            next_conn: 0,
        }
    }

    fn route(&mut self, from: ConnId, frame: Frame) -> Vec<(ConnId, Frame)> {
        let is_req = frame.frame_type == FrameType::Req;
        let is_resp_like =
            frame.frame_type == FrameType::Resp || frame.frame_type == FrameType::Err;
        let corr_in = frame.corr_id;
        let out = self.inner.route(from, frame);
        if is_req {
            // A successfully forwarded request produced exactly one output
            // (to the provider) carrying the broker corr id.
            if let Some((provider, forwarded)) = out.first() {
                if forwarded.frame_type == FrameType::Req {
                    self.in_flight_providers.insert(forwarded.corr_id, *provider);
                }
            }
        }
        if is_resp_like {
            self.in_flight_providers.remove(&corr_in);
        }
        out
    }

    fn disconnect(&mut self, conn: ConnId) -> Vec<(ConnId, Frame)> {
        let mut out = self.inner.disconnect(conn);
        // Requests in flight toward this provider fail with an error frame.
        let orphaned: Vec<u32> = self
            .in_flight_providers
            .iter()
            .filter(|(_, &provider)| provider == conn)
            .map(|(&corr, _)| corr)
            .collect();
        for corr in orphaned {
            self.in_flight_providers.remove(&corr);
            if let Some(p) = self.inner.pending.remove(&corr) {
                out.push((
                    p.requester,
                    Frame::new(FrameType::Err, "", p.client_corr, b"provider-disconnected"),
                ));
            }
        }
        out
    }
}

struct Shared {
    state: Mutex<BrokerStateWithProviders>,
    outboxes: Mutex<HashMap<ConnId, mpsc::Sender<Frame>>>,
}

trait Stream: std::io::Read + Write + Send {
    fn try_clone_box(&self) -> std::io::Result<Box<dyn Stream>>;
    fn shutdown_both(&self);
}

impl Stream for UnixStream {
    fn try_clone_box(&self) -> std::io::Result<Box<dyn Stream>> {
        Ok(Box::new(self.try_clone()?))
    }
    fn shutdown_both(&self) {
        let _ = self.shutdown(std::net::Shutdown::Both);
    }
}

impl Stream for TcpStream {
    fn try_clone_box(&self) -> std::io::Result<Box<dyn Stream>> {
        Ok(Box::new(self.try_clone()?))
    }
    fn shutdown_both(&self) {
        let _ = self.shutdown(std::net::Shutdown::Both);
    }
}

trait Acceptor: Send + 'static {
    fn accept_stream(&self) -> std::io::Result<Box<dyn Stream>>;
}

impl Acceptor for UnixListener {
    fn accept_stream(&self) -> std::io::Result<Box<dyn Stream>> {
        self.accept().map(|(s, _)| Box::new(s) as Box<dyn Stream>)
    }
}

impl Acceptor for TcpListener {
    fn accept_stream(&self) -> std::io::Result<Box<dyn Stream>> {
        self.accept().map(|(s, _)| {
            let _ = s.set_nodelay(true);
            Box::new(s) as Box<dyn Stream>
        })
    }
}

fn spawn_acceptor<A: Acceptor>(
    listener: A,
    shared: Arc<Shared>,
    shutdown: Arc<AtomicBool>,
) -> thread::JoinHandle<()> {
    thread::spawn(move || loop {
        let stream = match listener.accept_stream() {
            Ok(s) => s,
            Err(e) => {
                if shutdown.load(Ordering::SeqCst) {
                    return;
                }
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        if shutdown.load(Ordering::SeqCst) {
            return;
        }
        let conn_id = {
            let mut state = shared.state.lock().unwrap();
            state.next_conn += 1;
            state.next_conn
        };
        spawn_connection(conn_id, stream, shared.clone());
    })
}

fn spawn_connection(conn_id: ConnId, stream: Box<dyn Stream>, shared: Arc<Shared>) {
    let mut write_half = match stream.try_clone_box() {
        Ok(s) => s,
        Err(e) => {
            log::warn!("conn {conn_id}: clone failed: {e}");
            return;
        }
    };
    let (tx, rx) = mpsc::channel::<Frame>();
    shared.outboxes.lock().unwrap().insert(conn_id, tx);

    // Writer: drains the outbox so routing never blocks on a slow peer.
    let writer_stream = match stream.try_clone_box() {
        Ok(s) => s,
        Err(_) => return,
    };
    thread::spawn(move || {
        for frame in rx {
            if wire::write_frame(&mut write_half, &frame).is_err() {
                writer_stream.shutdown_both();
                return;
            }
        }
    });

    // Reader: routes inbound frames under the state lock. Deliveries are
    // queued to per-connection outboxes while the lock is held, so table
    // mutation and delivery order stay atomic per inbound frame.
    let mut read_half = stream;
    thread::spawn(move || {
        loop {
            match wire::read_frame(&mut read_half) {
                Ok(Some(frame)) => {
                    let mut state = shared.state.lock().unwrap();
                    let outputs = state.route(conn_id, frame);
                    let outboxes = shared.outboxes.lock().unwrap();
                    for (target, out_frame) in outputs {
                        match outboxes.get(&target) {
                            Some(tx) => {
                                if tx.send(out_frame).is_err() {
                                    log::warn!("conn {target}: outbox closed, frame dropped");
                                }
                            }
                            None => log::warn!("conn {target}: gone, frame dropped"),
                        }
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    log::debug!("conn {conn_id}: read error: {e}");
                    break;
                }
            }
        }
        let mut state = shared.state.lock().unwrap();
        let outputs = state.disconnect(conn_id);
        let mut outboxes = shared.outboxes.lock().unwrap();
        outboxes.remove(&conn_id);
        for (target, out_frame) in outputs {
            if let Some(tx) = outboxes.get(&target) {
                let _ = tx.send(out_frame);
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(ty: FrameType, name: &str, corr: u32, payload: &[u8]) -> Frame {
        Frame::new(ty, name, corr, payload)
    }

    #[test]
    fn publish_reaches_both_subscribers_but_not_the_publisher() {
        let mut state = BrokerState::new();
        assert!(state.route(2, frame(FrameType::Sub, "A", 0, b"")).is_empty());
        assert!(state.route(3, frame(FrameType::Sub, "A", 0, b"")).is_empty());
        // The publisher is itself subscribed; it must not hear its own echo.
        assert!(state.route(1, frame(FrameType::Sub, "A", 0, b"")).is_empty());
        let out = state.route(1, frame(FrameType::Pub, "A", 0, b"data"));
        let mut targets: Vec<ConnId> = out.iter().map(|(c, _)| *c).collect();
        targets.sort_unstable();
        assert_eq!(targets, vec![2, 3]);
        for (_, f) in &out {
            assert_eq!(f.payload, b"data");
            assert_eq!(f.frame_type, FrameType::Pub);
        }
    }

    #[test]
    fn publish_without_subscribers_is_silent() {
        let mut state = BrokerState::new();
        assert!(state.route(1, frame(FrameType::Pub, "empty", 0, b"x")).is_empty());
    }

    #[test]
    fn request_to_unregistered_service_errs_without_pending_entry() {
        let mut state = BrokerState::new();
        let out = state.route(5, frame(FrameType::Req, "nosuch", 42, b"q"));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, 5);
        assert_eq!(out[0].1.frame_type, FrameType::Err);
        assert_eq!(out[0].1.corr_id, 42);
        assert_eq!(out[0].1.payload, b"no-such-service");
        assert_eq!(state.in_flight(), 0);
    }

    #[test]
    fn request_response_cycle_rewrites_corr_ids() {
        let mut state = BrokerState::new();
        assert!(state.route(9, frame(FrameType::RegSvc, "echo", 0, b"")).is_empty());
        let out = state.route(5, frame(FrameType::Req, "echo", 1234, b"ping"));
        assert_eq!(out.len(), 1);
        let (provider, forwarded) = &out[0];
        assert_eq!(*provider, 9);
        assert_ne!(forwarded.corr_id, 1234, "broker must assign its own id");
        assert_eq!(state.in_flight(), 1);

        let out = state.route(9, frame(FrameType::Resp, "echo", forwarded.corr_id, b"ping"));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, 5);
        assert_eq!(out[0].1.corr_id, 1234, "requester sees its own id back");
        assert_eq!(state.in_flight(), 0);
    }

    #[test]
    fn duplicate_service_registration_rejected() {
        let mut state = BrokerState::new();
        assert!(state.route(1, frame(FrameType::RegSvc, "svc", 0, b"")).is_empty());
        let out = state.route(2, frame(FrameType::RegSvc, "svc", 0, b""));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, 2);
        assert_eq!(out[0].1.frame_type, FrameType::Err);
        assert_eq!(out[0].1.payload, b"duplicate-service");
    }

    #[test]
    fn unknown_corr_id_response_dropped() {
        let mut state = BrokerState::new();
        assert!(state.route(1, frame(FrameType::Resp, "x", 999, b"late")).is_empty());
    }

    #[test]
    fn corr_ids_unique_while_in_flight() {
        let mut state = BrokerState::new();
        state.route(9, frame(FrameType::RegSvc, "s", 0, b""));
        let mut seen = std::collections::HashSet::new();
        for i in 0..1000 {
            let out = state.route(5, frame(FrameType::Req, "s", i, b""));
            assert!(seen.insert(out[0].1.corr_id), "corr id reused in flight");
        }
        assert_eq!(state.in_flight(), 1000);
    }
}
