//! Client-side middleware API.
//!
//! A [`NodeConn`] owns one connection to the broker. A background reader
//! demultiplexes inbound frames into per-channel subscription queues and
//! per-call response slots; `call` feels synchronous with a timeout. Use one
//! connection per concurrently operating task.

use std::collections::HashMap;
use std::io::Write;
use std::net::TcpStream;
use std::os::unix::net::UnixStream;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::broker::BrokerAddr;
use crate::wire::{self, Frame, FrameType};

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("broker connection lost")]
    ConnectionLost,
    #[error("call timed out")]
    Timeout,
    #[error("service error: {0}")]
    ServiceError(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

enum WriteHalf {
    Unix(UnixStream),
    Tcp(TcpStream),
}

impl Write for WriteHalf {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        match self {
            WriteHalf::Unix(s) => s.write(buf),
            WriteHalf::Tcp(s) => s.write(buf),
        }
    }
    fn flush(&mut self) -> std::io::Result<()> {
        match self {
            WriteHalf::Unix(s) => s.flush(),
            WriteHalf::Tcp(s) => s.flush(),
        }
    }
}

struct Inbox {
    subscriptions: HashMap<String, mpsc::Sender<Vec<u8>>>,
    calls: HashMap<u32, mpsc::Sender<Result<Vec<u8>, String>>>,
    requests: Option<mpsc::Sender<(String, u32, Vec<u8>)>>,
    alive: bool,
}

/// One connection to the broker.
pub struct NodeConn {
    writer: Mutex<WriteHalf>,
    inbox: Arc<Mutex<Inbox>>,
    next_corr: AtomicU32,
}

/// Delivery stream for one channel subscription.
pub struct Subscription {
    receiver: mpsc::Receiver<Vec<u8>>,
}

impl Subscription {
    /// Next delivery, waiting up to `timeout`.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<Vec<u8>> {
        self.receiver.recv_timeout(timeout).ok()
    }

    /// Everything already delivered, without waiting.
    pub fn drain(&self) -> Vec<Vec<u8>> {
        self.receiver.try_iter().collect()
    }
}

impl NodeConn {
    /// Connect to a broker.
    pub fn connect(addr: &BrokerAddr) -> std::io::Result<NodeConn> {
        let inbox = Arc::new(Mutex::new(Inbox {
            subscriptions: HashMap::new(),
            calls: HashMap::new(),
            requests: None,
            alive: true,
        }));

        let writer = match addr {
            BrokerAddr::Unix(path) => {
                let stream = UnixStream::connect(path)?;
                let read_side = stream.try_clone()?;
                spawn_reader(Box::new(read_side), inbox.clone());
                WriteHalf::Unix(stream)
            }
            BrokerAddr::Tcp(spec) => {
                let stream = TcpStream::connect(spec)?;
                stream.set_nodelay(true)?;
                let read_side = stream.try_clone()?;
                spawn_reader(Box::new(read_side), inbox.clone());
                WriteHalf::Tcp(stream)
            }
        };

        Ok(NodeConn {
            writer: Mutex::new(writer),
            inbox,
            next_corr: AtomicU32::new(1),
        })
    }

    fn send(&self, frame: &Frame) -> Result<(), NodeError> {
        let mut writer = self.writer.lock().unwrap();
        wire::write_frame(&mut *writer, frame).map_err(|_| NodeError::ConnectionLost)
    }

    /// Publish a payload on a channel. Delivered to current subscribers;
    /// publishing into silence is not an error.
    pub fn publish(&self, channel: &str, payload: &[u8]) -> Result<(), NodeError> {
        self.send(&Frame::new(FrameType::Pub, channel, 0, payload))
    }

    /// Subscribe to a channel and receive its future publications.
    pub fn subscribe(&self, channel: &str) -> Result<Subscription, NodeError> {
        let (tx, rx) = mpsc::channel();
        self.inbox
            .lock()
            .unwrap()
            .subscriptions
            .insert(channel.to_string(), tx);
        self.send(&Frame::new(FrameType::Sub, channel, 0, b""))?;
        Ok(Subscription { receiver: rx })
    }

    /// Call a service and wait for its response.
    pub fn call(
        &self,
        service: &str,
        payload: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, NodeError> {
        let corr = self.next_corr.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        self.inbox.lock().unwrap().calls.insert(corr, tx);
        let cleanup = || {
            self.inbox.lock().unwrap().calls.remove(&corr);
        };
        if let Err(e) = self.send(&Frame::new(FrameType::Req, service, corr, payload)) {
            cleanup();
            return Err(e);
        }
        match rx.recv_timeout(timeout) {
            Ok(Ok(payload)) => Ok(payload),
            Ok(Err(msg)) => Err(NodeError::ServiceError(msg)),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                cleanup();
                Err(NodeError::Timeout)
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                cleanup();
                Err(NodeError::ConnectionLost)
            }
        }
    }

    /// Register a service and answer its requests until the connection drops.
    ///
    /// The handler runs on the calling task; one request is served at a time.
    pub fn serve<F>(&self, service: &str, mut handler: F) -> Result<(), NodeError>
    where
        F: FnMut(&[u8]) -> Vec<u8>,
    {
        let (tx, rx) = mpsc::channel();
        self.inbox.lock().unwrap().requests = Some(tx);
        self.send(&Frame::new(FrameType::RegSvc, service, 0, b""))?;
        for (name, corr, payload) in rx {
            let response = handler(&payload);
            self.send(&Frame::new(FrameType::Resp, &name, corr, &response))?;
        }
        Err(NodeError::ConnectionLost)
    }
}

fn spawn_reader(mut reader: Box<dyn std::io::Read + Send>, inbox: Arc<Mutex<Inbox>>) {
    thread::spawn(move || {
        loop {
            let frame = match wire::read_frame(&mut reader) {
                Ok(Some(f)) => f,
                Ok(None) | Err(_) => break,
            };
            let mut inbox = inbox.lock().unwrap();
            match frame.frame_type {
                FrameType::Pub => {
                    if let Some(tx) = inbox.subscriptions.get(&frame.name) {
                        let _ = tx.send(frame.payload);
                    }
                }
                FrameType::Resp => {
                    if let Some(tx) = inbox.calls.remove(&frame.corr_id) {
                        let _ = tx.send(Ok(frame.payload));
                    }
                }
                FrameType::Err => {
                    if let Some(tx) = inbox.calls.remove(&frame.corr_id) {
                        let _ = tx.send(Err(String::from_utf8_lossy(&frame.payload).into_owned()));
                    } else {
                        log::warn!("unsolicited error frame: {:?}", frame.payload);
                    }
                }
                FrameType::Req => {
                    if let Some(tx) = &inbox.requests {
                        let _ = tx.send((frame.name, frame.corr_id, frame.payload));
                    }
                }
                FrameType::Sub | FrameType::RegSvc => {
                    log::warn!("broker sent a client-only frame type; dropped");
                }
            }
        }
        // Wake all waiters.
        let mut inbox = inbox.lock().unwrap();
        inbox.alive = false;
        inbox.calls.clear();
        inbox.subscriptions.clear();
        inbox.requests = None;
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::Broker;

    fn temp_sock(tag: &str) -> BrokerAddr {
        let dir = std::env::temp_dir().join(format!(
            "oj-node-{tag}-{}",
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .subsec_nanos()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        BrokerAddr::Unix(dir.join("bus.sock"))
    }

    #[test]
    fn echo_call_round_trips() {
        let broker = Broker::bind(&temp_sock("echo")).unwrap();
        let server = NodeConn::connect(broker.addr()).unwrap();
        let addr = broker.addr().clone();
        thread::spawn(move || {
            let _ = server.serve("echo", |payload| payload.to_vec());
        });
        let client = NodeConn::connect(&addr).unwrap();
        let reply = client
            .call("echo", b"ping-pong", Duration::from_secs(5))
            .unwrap();
        assert_eq!(reply, b"ping-pong");
    }

    #[test]
    fn call_to_missing_service_is_a_service_error() {
        let broker = Broker::bind(&temp_sock("missing")).unwrap();
        let client = NodeConn::connect(broker.addr()).unwrap();
        match client.call("ghost", b"hello", Duration::from_secs(5)) {
            Err(NodeError::ServiceError(msg)) => assert!(msg.contains("no-such-service")),
            other => panic!("expected service error, got {other:?}"),
        }
    }

    #[test]
    fn publish_before_any_subscriber_is_fine() {
        let broker = Broker::bind(&temp_sock("nosub")).unwrap();
        let client = NodeConn::connect(broker.addr()).unwrap();
        client.publish("lonely", b"anyone?").unwrap();
        // And a later subscriber does not see past traffic.
        let sub_conn = NodeConn::connect(broker.addr()).unwrap();
        let sub = sub_conn.subscribe("lonely").unwrap();
        assert!(sub.recv_timeout(Duration::from_millis(200)).is_none());
    }

    #[test]
    fn pub_sub_fan_out() {
        let broker = Broker::bind(&temp_sock("fan")).unwrap();
        let a = NodeConn::connect(broker.addr()).unwrap();
        let b = NodeConn::connect(broker.addr()).unwrap();
        let publisher = NodeConn::connect(broker.addr()).unwrap();
        let sub_a = a.subscribe("chan").unwrap();
        let sub_b = b.subscribe("chan").unwrap();
        // Give the broker a beat to process both subscriptions.
        thread::sleep(Duration::from_millis(100));
        publisher.publish("chan", b"both of you").unwrap();
        assert_eq!(
            sub_a.recv_timeout(Duration::from_secs(5)).unwrap(),
            b"both of you"
        );
        assert_eq!(
            sub_b.recv_timeout(Duration::from_secs(5)).unwrap(),
            b"both of you"
        );
    }

    #[test]
    fn per_publisher_order_preserved() {
        let broker = Broker::bind(&temp_sock("order")).unwrap();
        let sub_conn = NodeConn::connect(broker.addr()).unwrap();
        let sub = sub_conn.subscribe("seq").unwrap();
        thread::sleep(Duration::from_millis(100));

        let mut handles = Vec::new();
        for publisher_id in 0..3u8 {
            let addr = broker.addr().clone();
            handles.push(thread::spawn(move || {
                let conn = NodeConn::connect(&addr).unwrap();
                for seq in 0..100u32 {
                    let mut payload = vec![publisher_id];
                    payload.extend_from_slice(&seq.to_be_bytes());
                    conn.publish("seq", &payload).unwrap();
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }

        let mut last_seq: HashMap<u8, u32> = HashMap::new();
        let mut received = 0;
        while received < 300 {
            let payload = sub
                .recv_timeout(Duration::from_secs(10))
                .expect("missing deliveries");
            let publisher = payload[0];
            let seq = u32::from_be_bytes(payload[1..5].try_into().unwrap());
            if let Some(&prev) = last_seq.get(&publisher) {
                assert!(seq > prev, "publisher {publisher}: {seq} after {prev}");
            }
            last_seq.insert(publisher, seq);
            received += 1;
        }
    }
}
