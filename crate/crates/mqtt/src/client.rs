//! Reconnecting MQTT client shared by the simulators, the Modbus bridge
//! and the ingest subscriber.
//!
//! One background task owns the socket. Publishes made while the link is
//! down go into a bounded ring buffer (oldest dropped, counted) and are
//! flushed after reconnect; subscriptions are replayed on every new
//! connection. Handlers run one at a time on a dedicated thread, in
//! delivery order.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use log::{debug, info, warn};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot};
use tokio::time::{timeout, Instant};

use crate::codec::{decode_packet, encode_packet, Connect, Packet, Publish, QoS, Subscribe, MAX_PAYLOAD, SUBACK_FAILURE};
use crate::topic::{validate_filter, validate_topic, TopicFilter};

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub broker: SocketAddr,
    pub client_id: String,
    pub keep_alive: u16,
    pub backoff_initial: Duration,
    pub backoff_factor: u32,
    pub backoff_cap: Duration,
    pub default_qos: QoS,
    /// Ring buffer for publishes made while disconnected; 0 disables
    /// buffering and such publishes fail with [`ClientError::Disconnected`].
    pub offline_buffer: usize,
    pub handshake_timeout: Duration,
}

impl ClientOptions {
    pub fn new(broker: SocketAddr, client_id: impl Into<String>) -> Self {
        ClientOptions {
            broker,
            client_id: client_id.into(),
            keep_alive: 30,
            backoff_initial: Duration::from_millis(500),
            backoff_factor: 2,
            backoff_cap: Duration::from_secs(16),
            default_qos: QoS::AtMostOnce,
            offline_buffer: 128,
            handshake_timeout: Duration::from_secs(5),
        }
    }

    fn validate(&self) -> Result<(), ClientError> {
        if self.client_id.is_empty() {
            return Err(ClientError::InvalidOptions("client id must not be empty"));
        }
        if self.backoff_factor == 0 || self.backoff_initial.is_zero() {
            return Err(ClientError::InvalidOptions("backoff must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("no CONNACK within the handshake timeout")]
    HandshakeTimeout,
    #[error("broker rejected CONNECT with code {0}")]
    HandshakeRejected(u8),
    #[error("payload of {0} bytes is too large")]
    PayloadTooLarge(usize),
    #[error("not connected and offline buffering is disabled")]
    Disconnected,
    #[error("invalid publish topic {0:?}")]
    InvalidTopic(String),
    #[error("invalid topic filter {0:?}")]
    InvalidFilter(String),
    #[error("broker refused subscription to {0:?}")]
    SubscribeRejected(String),
    #[error("message evicted from the offline buffer")]
    Dropped,
    #[error("client has shut down")]
    Closed,
    #[error("invalid client options: {0}")]
    InvalidOptions(&'static str),
}

/// Completion of a publish: written (QoS 0) or acknowledged (QoS 1).
#[derive(Debug)]
pub struct Receipt(oneshot::Receiver<Result<(), ClientError>>);

impl Receipt {
    pub async fn wait(self) -> Result<(), ClientError> {
        self.0.await.unwrap_or(Err(ClientError::Closed))
    }
}

type Handler = Box<dyn FnMut(&str, &[u8]) + Send + 'static>;

enum Command {
    Publish(Outgoing),
    Subscribe { filter: TopicFilter, raw: String, qos: QoS, handler: Handler, done: oneshot::Sender<Result<(), ClientError>> },
    Disconnect { done: oneshot::Sender<()> },
}

struct Outgoing {
    publish: Publish,
    receipt: oneshot::Sender<Result<(), ClientError>>,
}

enum Dispatch {
    Handler(TopicFilter, Handler),
    Message(String, Bytes),
}

#[derive(Debug, Default)]
struct Shared {
    connected: AtomicBool,
    dropped: AtomicU64,
    connects: AtomicU64,
    closed: AtomicBool,
    subscriptions: Mutex<Vec<String>>,
}

/// Cloneable handle; all clones drive the same connection.
#[derive(Clone)]
pub struct Client {
    tx: mpsc::UnboundedSender<Command>,
    shared: Arc<Shared>,
    opts: Arc<ClientOptions>,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client").field("client_id", &self.opts.client_id).finish()
    }
}

impl Client {
    /// Connects now, failing if the broker is unreachable or rejects the
    /// handshake. Later link losses are retried in the background.
    pub async fn connect(opts: ClientOptions) -> Result<Client, ClientError> {
        opts.validate()?;
        let conn = handshake(&opts).await?;
        Ok(Self::start(opts, Some(conn)))
    }

    /// Returns immediately and keeps connecting in the background with
    /// exponential backoff. Publishes made before the first connection
    /// are buffered.
    pub fn spawn(opts: ClientOptions) -> Result<Client, ClientError> {
        opts.validate()?;
        Ok(Self::start(opts, None))
    }

    fn start(opts: ClientOptions, conn: Option<Connection>) -> Client {
        let (tx, rx) = mpsc::unbounded_channel();
        let shared = Arc::new(Shared::default());
        let (dispatch_tx, dispatch_rx) = std::sync::mpsc::channel::<Dispatch>();
        std::thread::Builder::new()
            .name(format!("mqtt-handlers-{}", opts.client_id))
            .spawn(move || run_handlers(dispatch_rx))
            .expect("spawn handler thread");
        let opts = Arc::new(opts);
        let event_loop = EventLoop {
            opts: opts.clone(),
            shared: shared.clone(),
            rx,
            dispatch: dispatch_tx,
            buffer: VecDeque::new(),
            in_flight: BTreeMap::new(),
            subs: Vec::new(),
            pending_subacks: HashMap::new(),
            next_id: 0,
        };
        tokio::spawn(event_loop.run(conn));
        Client { tx, shared, opts }
    }

    pub fn client_id(&self) -> &str {
        &self.opts.client_id
    }

    pub fn is_connected(&self) -> bool {
        self.shared.connected.load(Ordering::SeqCst)
    }

    /// Messages evicted from the offline buffer so far.
    pub fn dropped_count(&self) -> u64 {
        self.shared.dropped.load(Ordering::SeqCst)
    }

    /// Successful CONNECT handshakes over the client's lifetime.
    pub fn connect_count(&self) -> u64 {
        self.shared.connects.load(Ordering::SeqCst)
    }

    /// Filters the application has subscribed to.
    pub fn subscriptions(&self) -> Vec<String> {
        self.shared.subscriptions.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn publish(&self, topic: &str, payload: impl Into<Bytes>, qos: QoS) -> Result<Receipt, ClientError> {
        validate_topic(topic).map_err(|_| ClientError::InvalidTopic(topic.to_owned()))?;
        let payload = payload.into();
        if payload.len() > MAX_PAYLOAD {
            return Err(ClientError::PayloadTooLarge(payload.len()));
        }
        if self.shared.closed.load(Ordering::SeqCst) {
            return Err(ClientError::Closed);
        }
        if self.opts.offline_buffer == 0 && !self.is_connected() {
            return Err(ClientError::Disconnected);
        }
        let mut publish = Publish::new(topic, payload);
        publish.qos = qos;
        let (receipt, rx) = oneshot::channel();
        self.tx
            .send(Command::Publish(Outgoing { publish, receipt }))
            .map_err(|_| ClientError::Closed)?;
        Ok(Receipt(rx))
    }

    /// Publish with the configured default QoS and wait for completion.
    pub async fn send(&self, topic: &str, payload: impl Into<Bytes>) -> Result<(), ClientError> {
        self.publish(topic, payload, self.opts.default_qos)?.wait().await
    }

    /// Subscribes and installs `handler`, resolving once the broker grants
    /// the filter. The subscription is replayed after every reconnect.
    pub async fn subscribe<F>(&self, filter: &str, qos: QoS, handler: F) -> Result<(), ClientError>
    where
        F: FnMut(&str, &[u8]) + Send + 'static,
    {
        let parsed = validate_filter(filter).map_err(|_| ClientError::InvalidFilter(filter.to_owned()))?;
        let (done, rx) = oneshot::channel();
        self.tx
            .send(Command::Subscribe { filter: parsed, raw: filter.to_owned(), qos, handler: Box::new(handler), done })
            .map_err(|_| ClientError::Closed)?;
        rx.await.unwrap_or(Err(ClientError::Closed))
    }

    /// Sends DISCONNECT after flushing queued writes and stops the client.
    pub async fn disconnect(&self) {
        let (done, rx) = oneshot::channel();
        if self.tx.send(Command::Disconnect { done }).is_ok() {
            let _ = rx.await;
        }
    }
}

fn run_handlers(rx: std::sync::mpsc::Receiver<Dispatch>) {
    let mut handlers: Vec<(TopicFilter, Handler)> = Vec::new();
    while let Ok(msg) = rx.recv() {
        match msg {
            Dispatch::Handler(filter, handler) => handlers.push((filter, handler)),
            Dispatch::Message(topic, payload) => {
                for (filter, handler) in &mut handlers {
                    if filter.matches(&topic) {
                        handler(&topic, &payload);
                    }
                }
            }
        }
    }
}

struct Connection {
    reader: OwnedReadHalf,
    writer: OwnedWriteHalf,
    buf: BytesMut,
}

async fn handshake(opts: &ClientOptions) -> Result<Connection, ClientError> {
    let stream = TcpStream::connect(opts.broker)
        .await
        .map_err(|e| ClientError::ConnectionRefused(e.to_string()))?;
    let _ = stream.set_nodelay(true);
    let (mut reader, mut writer) = stream.into_split();
    let connect = Packet::Connect(Connect::new(opts.client_id.clone(), opts.keep_alive));
    let bytes = encode_packet(&connect).map_err(|_| ClientError::InvalidOptions("client id not encodable"))?;
    writer.write_all(&bytes).await.map_err(|e| ClientError::ConnectionRefused(e.to_string()))?;
    let mut buf = BytesMut::with_capacity(4096);
    let ack = timeout(opts.handshake_timeout, async {
        loop {
            if let Ok(Some((packet, used))) = decode_packet(&buf) {
                let _ = buf.split_to(used);
                return Ok(packet);
            }
            match reader.read_buf(&mut buf).await {
                Ok(0) | Err(_) => return Err(ClientError::ConnectionRefused("closed during handshake".into())),
                Ok(_) => {}
            }
        }
    })
    .await
    .map_err(|_| ClientError::HandshakeTimeout)??;
    match ack {
        Packet::ConnAck(a) if a.code == 0 => Ok(Connection { reader, writer, buf }),
        Packet::ConnAck(a) => Err(ClientError::HandshakeRejected(a.code)),
        _ => Err(ClientError::ConnectionRefused("expected CONNACK".into())),
    }
}

struct EventLoop {
    opts: Arc<ClientOptions>,
    shared: Arc<Shared>,
    rx: mpsc::UnboundedReceiver<Command>,
    dispatch: std::sync::mpsc::Sender<Dispatch>,
    /// Publishes waiting for a connection.
    buffer: VecDeque<Outgoing>,
    /// QoS 1 publishes written but not yet acknowledged.
    in_flight: BTreeMap<u16, Outgoing>,
    subs: Vec<(String, QoS)>,
    pending_subacks: HashMap<u16, (String, oneshot::Sender<Result<(), ClientError>>)>,
    next_id: u16,
}

enum LinkEnd {
    Lost,
    Shutdown(oneshot::Sender<()>),
}

impl EventLoop {
    async fn run(mut self, mut conn: Option<Connection>) {
        let mut backoff = self.opts.backoff_initial;
        loop {
            let connection = match conn.take() {
                Some(c) => Some(c),
                None => {
                    let opts = self.opts.clone();
                    let attempt = async move { handshake(&opts).await };
                    tokio::pin!(attempt);
                    loop {
                        tokio::select! {
                            res = &mut attempt => break res.map_err(|e| debug!("connect_failed {} {e}", self.opts.client_id)).ok(),
                            cmd = self.rx.recv() => match cmd {
                                None => return self.close(),
                                Some(Command::Disconnect { done }) => {
                                    self.close();
                                    let _ = done.send(());
                                    return;
                                }
                                Some(cmd) => self.offline(cmd),
                            },
                        }
                    }
                }
            };
            match connection {
                Some(c) => {
                    backoff = self.opts.backoff_initial;
                    self.shared.connected.store(true, Ordering::SeqCst);
                    self.shared.connects.fetch_add(1, Ordering::SeqCst);
                    info!("connected {} broker={}", self.opts.client_id, self.opts.broker);
                    let end = self.online(c).await;
                    self.shared.connected.store(false, Ordering::SeqCst);
                    match end {
                        LinkEnd::Shutdown(done) => {
                            self.close();
                            let _ = done.send(());
                            return;
                        }
                        LinkEnd::Lost => warn!("link_lost {}", self.opts.client_id),
                    }
                }
                None => {
                    let wake = Instant::now() + backoff;
                    backoff = (backoff * self.opts.backoff_factor).min(self.opts.backoff_cap);
                    loop {
                        tokio::select! {
                            _ = tokio::time::sleep_until(wake) => break,
                            cmd = self.rx.recv() => match cmd {
                                None => return self.close(),
                                Some(Command::Disconnect { done }) => {
                                    self.close();
                                    let _ = done.send(());
                                    return;
                                }
                                Some(cmd) => self.offline(cmd),
                            },
                        }
                    }
                }
            }
        }
    }

    fn close(&mut self) {
        self.shared.closed.store(true, Ordering::SeqCst);
        for o in self.buffer.drain(..).chain(std::mem::take(&mut self.in_flight).into_values()) {
            let _ = o.receipt.send(Err(ClientError::Closed));
        }
        for (_, (_, done)) in self.pending_subacks.drain() {
            let _ = done.send(Err(ClientError::Closed));
        }
    }

    fn allocate_id(&mut self) -> u16 {
        loop {
            self.next_id = self.next_id.checked_add(1).unwrap_or(1);
            if !self.in_flight.contains_key(&self.next_id) && !self.pending_subacks.contains_key(&self.next_id) {
                return self.next_id;
            }
        }
    }

    fn register_subscription(&mut self, filter: TopicFilter, raw: String, qos: QoS, handler: Handler) {
        let _ = self.dispatch.send(Dispatch::Handler(filter, handler));
        self.subs.retain(|(f, _)| *f != raw);
        self.subs.push((raw.clone(), qos));
        let mut list = self.shared.subscriptions.lock().unwrap_or_else(|e| e.into_inner());
        if !list.contains(&raw) {
            list.push(raw);
        }
    }

    /// Handles a command while there is no connection.
    fn offline(&mut self, cmd: Command) {
        match cmd {
            Command::Publish(o) => {
                if self.opts.offline_buffer == 0 {
                    let _ = o.receipt.send(Err(ClientError::Disconnected));
                    return;
                }
                if self.buffer.len() >= self.opts.offline_buffer {
                    if let Some(old) = self.buffer.pop_front() {
                        self.shared.dropped.fetch_add(1, Ordering::SeqCst);
                        let _ = old.receipt.send(Err(ClientError::Dropped));
                    }
                }
                self.buffer.push_back(o);
            }
            Command::Subscribe { filter, raw, qos, handler, done } => {
                self.register_subscription(filter, raw.clone(), qos, handler);
                // Acknowledged when the replay after reconnect is granted.
                let id = self.allocate_id();
                self.pending_subacks.insert(id, (raw, done));
            }
            Command::Disconnect { .. } => unreachable!("handled by caller"),
        }
    }

    async fn write(&self, writer: &mut OwnedWriteHalf, packet: &Packet) -> bool {
        match encode_packet(packet) {
            Ok(bytes) => writer.write_all(&bytes).await.is_ok(),
            Err(e) => {
                warn!("encode_failed {} {e}", self.opts.client_id);
                true
            }
        }
    }

    async fn online(&mut self, conn: Connection) -> LinkEnd {
        let Connection { mut reader, mut writer, mut buf } = conn;

        // Replay subscriptions. Waiters registered while offline keep
        // their ids; everything else gets a fresh one.
        let mut waiting: HashMap<String, u16> =
            self.pending_subacks.iter().map(|(id, (raw, _))| (raw.clone(), *id)).collect();
        for (raw, qos) in self.subs.clone() {
            let id = match waiting.remove(&raw) {
                Some(id) => id,
                None => self.allocate_id(),
            };
            let packet = Packet::Subscribe(Subscribe { packet_id: id, filters: vec![(raw, qos)] });
            if !self.write(&mut writer, &packet).await {
                return LinkEnd::Lost;
            }
        }
        // Unacknowledged QoS 1 publishes from the previous link.
        for o in self.in_flight.values_mut() {
            o.publish.dup = true;
        }
        let resend: Vec<Packet> = self.in_flight.values().map(|o| Packet::Publish(o.publish.clone())).collect();
        for p in resend {
            if !self.write(&mut writer, &p).await {
                return LinkEnd::Lost;
            }
        }
        while let Some(o) = self.buffer.pop_front() {
            if !self.send_publish(&mut writer, o).await {
                return LinkEnd::Lost;
            }
        }

        let keep_alive = Duration::from_secs(u64::from(self.opts.keep_alive));
        let ping_every = if keep_alive.is_zero() { Duration::from_secs(3600) } else { keep_alive / 2 };
        let mut ping = tokio::time::interval_at(Instant::now() + ping_every, ping_every);
        let mut last_rx = Instant::now();

        loop {
            tokio::select! {
                cmd = self.rx.recv() => match cmd {
                    None => {
                        let _ = self.write(&mut writer, &Packet::Disconnect).await;
                        return LinkEnd::Lost;
                    }
                    Some(Command::Disconnect { done }) => {
                        let _ = self.write(&mut writer, &Packet::Disconnect).await;
                        let _ = writer.shutdown().await;
                        return LinkEnd::Shutdown(done);
                    }
                    Some(Command::Publish(o)) => {
                        if !self.send_publish(&mut writer, o).await {
                            return LinkEnd::Lost;
                        }
                    }
                    Some(Command::Subscribe { filter, raw, qos, handler, done }) => {
                        self.register_subscription(filter, raw.clone(), qos, handler);
                        let id = self.allocate_id();
                        self.pending_subacks.insert(id, (raw.clone(), done));
                        let packet = Packet::Subscribe(Subscribe { packet_id: id, filters: vec![(raw, qos)] });
                        if !self.write(&mut writer, &packet).await {
                            return LinkEnd::Lost;
                        }
                    }
                },
                res = reader.read_buf(&mut buf) => {
                    match res {
                        Ok(0) | Err(_) => return LinkEnd::Lost,
                        Ok(_) => last_rx = Instant::now(),
                    }
                    loop {
                        let (packet, used) = match decode_packet(&buf) {
                            Ok(Some(x)) => x,
                            Ok(None) => break,
                            Err(e) => {
                                warn!("protocol_error {} {e}", self.opts.client_id);
                                return LinkEnd::Lost;
                            }
                        };
                        let _ = buf.split_to(used);
                        if !self.incoming(&mut writer, packet).await {
                            return LinkEnd::Lost;
                        }
                    }
                }
                _ = ping.tick() => {
                    if !keep_alive.is_zero() && last_rx.elapsed() > keep_alive.mul_f64(1.5) {
                        warn!("keep_alive_timeout {}", self.opts.client_id);
                        return LinkEnd::Lost;
                    }
                    if !self.write(&mut writer, &Packet::PingReq).await {
                        return LinkEnd::Lost;
                    }
                }
            }
        }
    }

    async fn send_publish(&mut self, writer: &mut OwnedWriteHalf, mut o: Outgoing) -> bool {
        match o.publish.qos {
            QoS::AtMostOnce => {
                let ok = self.write(writer, &Packet::Publish(o.publish.clone())).await;
                if ok {
                    let _ = o.receipt.send(Ok(()));
                } else {
                    // Not known to be written; keep it for the next link.
                    self.buffer.push_front(o);
                }
                ok
            }
            QoS::AtLeastOnce => {
                let id = self.allocate_id();
                o.publish.packet_id = Some(id);
                let packet = Packet::Publish(o.publish.clone());
                self.in_flight.insert(id, o);
                self.write(writer, &packet).await
            }
        }
    }

    async fn incoming(&mut self, writer: &mut OwnedWriteHalf, packet: Packet) -> bool {
        match packet {
            Packet::Publish(p) => {
                if let (QoS::AtLeastOnce, Some(id)) = (p.qos, p.packet_id) {
                    if !self.write(writer, &Packet::PubAck(id)).await {
                        return false;
                    }
                }
                let _ = self.dispatch.send(Dispatch::Message(p.topic, p.payload));
            }
            Packet::PubAck(id) => match self.in_flight.remove(&id) {
                Some(o) => {
                    let _ = o.receipt.send(Ok(()));
                }
                None => debug!("puback_unknown {} packet_id={id}", self.opts.client_id),
            },
            Packet::SubAck(ack) => {
                if let Some((raw, done)) = self.pending_subacks.remove(&ack.packet_id) {
                    let res = if ack.return_codes.first() == Some(&SUBACK_FAILURE) {
                        Err(ClientError::SubscribeRejected(raw))
                    } else {
                        Ok(())
                    };
                    let _ = done.send(res);
                }
            }
            Packet::PingResp | Packet::UnsubAck(_) => {}
            other => {
                warn!("protocol_error {} unexpected {}", self.opts.client_id, other.name());
                return false;
            }
        }
        true
    }
}
