//! The central hub: sessions, subscriptions and publish routing.
//!
//! [`BrokerCore`] is the synchronous state machine. It never blocks and
//! never touches a socket; each session owns an unbounded command queue
//! drained by its connection's writer task, so everything destined for
//! one session leaves in the order the core enqueued it. [`Broker`] wraps
//! the core in a TCP listener plus a housekeeping ticker for keep-alive
//! expiry and QoS 1 retransmission.
//!
//! Sessions are clean-session only and retained messages are not stored.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use bytes::BytesMut;
use log::{debug, info, warn};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use crate::codec::{
    decode_packet, encode_packet, ConnAck, Connect, Packet, Publish, QoS, SubAck, Subscribe, Unsubscribe, MAX_PAYLOAD,
    SUBACK_FAILURE,
};
use crate::topic::{validate_filter, TopicFilter};

pub type ConnId = u64;

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub bind: SocketAddr,
    /// Unacknowledged QoS 1 deliveries allowed per session.
    pub in_flight_limit: usize,
    pub max_payload: usize,
    /// A session is expired after `keep_alive * keep_alive_grace` of silence.
    pub keep_alive_grace: f64,
    pub max_connections: usize,
    pub retry_interval: Duration,
    pub max_retries: u32,
    /// How long a fresh connection may take to send CONNECT.
    pub connect_timeout: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            bind: SocketAddr::from(([0, 0, 0, 0], 1883)),
            in_flight_limit: 32,
            max_payload: MAX_PAYLOAD,
            keep_alive_grace: 1.5,
            max_connections: 64,
            retry_interval: Duration::from_secs(5),
            max_retries: 3,
            connect_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("in-flight limit must be at least 1")]
    InFlightLimit,
    #[error("max payload {0} exceeds codec bound {MAX_PAYLOAD}")]
    MaxPayload(usize),
    #[error("keep-alive grace must be positive")]
    Grace,
}

impl BrokerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.in_flight_limit == 0 {
            return Err(ConfigError::InFlightLimit);
        }
        if self.max_payload > MAX_PAYLOAD {
            return Err(ConfigError::MaxPayload(self.max_payload));
        }
        if !(self.keep_alive_grace > 0.0 && self.keep_alive_grace.is_finite()) {
            return Err(ConfigError::Grace);
        }
        Ok(())
    }
}

/// Why the broker dropped a connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseReason {
    TakenOver,
    KeepAliveExpired,
    RetriesExhausted,
    ProtocolViolation,
    Shutdown,
}

/// Commands drained by a connection's writer task.
#[derive(Debug, Clone, PartialEq)]
pub enum Outbound {
    Packet(Packet),
    Close(CloseReason),
}

pub type SessionSink = mpsc::UnboundedSender<Outbound>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Client(ConnId),
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("payload of {size} bytes exceeds limit {limit}")]
    PayloadTooLarge { size: usize, limit: usize },
}

#[derive(Debug, Clone)]
struct Subscription {
    filter: TopicFilter,
    raw: String,
    qos: QoS,
}

#[derive(Debug)]
struct InFlight {
    publish: Publish,
    sent_at: Instant,
    retries: u32,
}

#[derive(Debug)]
struct OutboundWindow {
    limit: usize,
    next_id: u16,
    pending: BTreeMap<u16, InFlight>,
    backlog: VecDeque<Publish>,
}

impl OutboundWindow {
    fn new(limit: usize) -> Self {
        OutboundWindow { limit, next_id: 0, pending: BTreeMap::new(), backlog: VecDeque::new() }
    }

    fn allocate_id(&mut self) -> u16 {
        loop {
            self.next_id = self.next_id.checked_add(1).unwrap_or(1);
            if !self.pending.contains_key(&self.next_id) {
                return self.next_id;
            }
        }
    }

    /// Sends now if the window has room, otherwise queues.
    fn offer(&mut self, mut publish: Publish, sink: &SessionSink, now: Instant) {
        if self.pending.len() >= self.limit {
            self.backlog.push_back(publish);
            return;
        }
        let id = self.allocate_id();
        publish.packet_id = Some(id);
        publish.qos = QoS::AtLeastOnce;
        publish.dup = false;
        let _ = sink.send(Outbound::Packet(Packet::Publish(publish.clone())));
        self.pending.insert(id, InFlight { publish, sent_at: now, retries: 0 });
    }

    fn refill(&mut self, sink: &SessionSink, now: Instant) {
        while self.pending.len() < self.limit {
            let Some(next) = self.backlog.pop_front() else { break };
            self.offer(next, sink, now);
        }
    }
}

#[derive(Debug)]
struct Session {
    conn_id: ConnId,
    keep_alive: u16,
    last_activity: Instant,
    subscriptions: Vec<Subscription>,
    window: OutboundWindow,
    sink: SessionSink,
}

impl Session {
    fn close(&self, reason: CloseReason) {
        let _ = self.sink.send(Outbound::Close(reason));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BrokerStats {
    pub sessions: usize,
    pub subscriptions: usize,
    pub in_flight: usize,
}

/// Session table and routing logic, free of I/O.
#[derive(Debug)]
pub struct BrokerCore {
    config: BrokerConfig,
    sessions: HashMap<String, Session>,
    by_conn: HashMap<ConnId, String>,
}

impl BrokerCore {
    pub fn new(config: BrokerConfig) -> Self {
        BrokerCore { config, sessions: HashMap::new(), by_conn: HashMap::new() }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    /// Registers a session for `conn_id`. A live session with the same
    /// client id is closed and replaced.
    pub fn connect(&mut self, conn_id: ConnId, connect: &Connect, sink: SessionSink, now: Instant) -> (String, ConnAck) {
        let client_id = if connect.client_id.is_empty() {
            format!("auto-{conn_id}")
        } else {
            connect.client_id.clone()
        };
        if let Some(old) = self.sessions.remove(&client_id) {
            self.by_conn.remove(&old.conn_id);
            old.close(CloseReason::TakenOver);
            info!("takeover {client_id} old_conn={} new_conn={conn_id}", old.conn_id);
        }
        let session = Session {
            conn_id,
            keep_alive: connect.keep_alive,
            last_activity: now,
            subscriptions: Vec::new(),
            window: OutboundWindow::new(self.config.in_flight_limit),
            sink,
        };
        self.sessions.insert(client_id.clone(), session);
        self.by_conn.insert(conn_id, client_id.clone());
        info!("connect {client_id} keep_alive={}", connect.keep_alive);
        (client_id, ConnAck::accepted())
    }

    fn session_mut(&mut self, conn_id: ConnId) -> Option<&mut Session> {
        let client_id = self.by_conn.get(&conn_id)?;
        self.sessions.get_mut(client_id)
    }

    pub fn client_id(&self, conn_id: ConnId) -> Option<&str> {
        self.by_conn.get(&conn_id).map(String::as_str)
    }

    pub fn is_live(&self, conn_id: ConnId) -> bool {
        self.by_conn.contains_key(&conn_id)
    }

    pub fn touch(&mut self, conn_id: ConnId, now: Instant) {
        if let Some(s) = self.session_mut(conn_id) {
            s.last_activity = now;
        }
    }

    /// Refreshes activity and answers with PINGRESP.
    pub fn ping(&mut self, conn_id: ConnId, now: Instant) {
        if let Some(s) = self.session_mut(conn_id) {
            s.last_activity = now;
            let _ = s.sink.send(Outbound::Packet(Packet::PingResp));
        }
    }

    /// Adds or replaces subscriptions and returns the SUBACK, which is
    /// also queued on the session.
    pub fn subscribe(&mut self, conn_id: ConnId, sub: &Subscribe, now: Instant) -> Option<SubAck> {
        let session = self.session_mut(conn_id)?;
        session.last_activity = now;
        let mut return_codes = Vec::with_capacity(sub.filters.len());
        for (raw, requested) in &sub.filters {
            match validate_filter(raw) {
                Ok(filter) => {
                    let qos = (*requested).min(QoS::AtLeastOnce);
                    session.subscriptions.retain(|s| s.raw != *raw);
                    session.subscriptions.push(Subscription { filter, raw: raw.clone(), qos });
                    return_codes.push(qos.as_u8());
                }
                Err(_) => return_codes.push(SUBACK_FAILURE),
            }
        }
        let ack = SubAck { packet_id: sub.packet_id, return_codes };
        let _ = session.sink.send(Outbound::Packet(Packet::SubAck(ack.clone())));
        Some(ack)
    }

    pub fn unsubscribe(&mut self, conn_id: ConnId, unsub: &Unsubscribe, now: Instant) {
        if let Some(session) = self.session_mut(conn_id) {
            session.last_activity = now;
            session.subscriptions.retain(|s| !unsub.filters.contains(&s.raw));
            let _ = session.sink.send(Outbound::Packet(Packet::UnsubAck(unsub.packet_id)));
        }
    }

    /// Delivers `publish` once per matching subscription of every live
    /// session and returns the number of deliveries. For a QoS 1 publish
    /// from a client, PUBACK is queued to the origin after routing.
    pub fn route_publish(&mut self, origin: Origin, publish: &Publish, now: Instant) -> Result<usize, RouteError> {
        if publish.payload.len() > self.config.max_payload {
            return Err(RouteError::PayloadTooLarge { size: publish.payload.len(), limit: self.config.max_payload });
        }
        let mut deliveries = 0;
        for session in self.sessions.values_mut() {
            for sub in &session.subscriptions {
                if !sub.filter.matches(&publish.topic) {
                    continue;
                }
                deliveries += 1;
                let out = Publish {
                    dup: false,
                    qos: QoS::AtMostOnce,
                    retain: false,
                    topic: publish.topic.clone(),
                    packet_id: None,
                    payload: publish.payload.clone(),
                };
                match publish.qos.min(sub.qos) {
                    QoS::AtMostOnce => {
                        let _ = session.sink.send(Outbound::Packet(Packet::Publish(out)));
                    }
                    QoS::AtLeastOnce => session.window.offer(out, &session.sink, now),
                }
            }
        }
        if let Origin::Client(conn_id) = origin {
            if let Some(session) = self.session_mut(conn_id) {
                session.last_activity = now;
                if let (QoS::AtLeastOnce, Some(id)) = (publish.qos, publish.packet_id) {
                    let _ = session.sink.send(Outbound::Packet(Packet::PubAck(id)));
                }
            }
        }
        debug!("publish {} topic={} deliveries={deliveries}", self.origin_name(origin), publish.topic);
        Ok(deliveries)
    }

    fn origin_name(&self, origin: Origin) -> &str {
        match origin {
            Origin::Client(c) => self.client_id(c).unwrap_or("-"),
            Origin::Internal => "internal",
        }
    }

    /// Completes a QoS 1 delivery. Unknown ids are ignored.
    pub fn on_puback(&mut self, conn_id: ConnId, packet_id: u16, now: Instant) -> bool {
        let Some(client_id) = self.by_conn.get(&conn_id) else {
            return false;
        };
        let Some(session) = self.sessions.get_mut(client_id) else {
            return false;
        };
        session.last_activity = now;
        if session.window.pending.remove(&packet_id).is_none() {
            warn!("puback_unknown {client_id} packet_id={packet_id}");
            return false;
        }
        session.window.refill(&session.sink, now);
        true
    }

    /// Removes the session bound to `conn_id`, if it is still current.
    pub fn disconnect(&mut self, conn_id: ConnId) -> Option<String> {
        let client_id = self.by_conn.remove(&conn_id)?;
        self.sessions.remove(&client_id);
        info!("disconnect {client_id} conn={conn_id}");
        Some(client_id)
    }

    /// Closes sessions silent for longer than keep-alive × grace. A
    /// keep-alive of zero disables expiry.
    pub fn expire_idle_sessions(&mut self, now: Instant) -> Vec<String> {
        let grace = self.config.keep_alive_grace;
        let expired: Vec<String> = self
            .sessions
            .iter()
            .filter(|(_, s)| {
                s.keep_alive > 0
                    && now.saturating_duration_since(s.last_activity) > Duration::from_secs_f64(f64::from(s.keep_alive) * grace)
            })
            .map(|(id, _)| id.clone())
            .collect();
        for id in &expired {
            self.remove(id, CloseReason::KeepAliveExpired);
        }
        expired
    }

    /// Re-sends unacknowledged QoS 1 deliveries with DUP set. Sessions that
    /// have used up their retries are closed and returned.
    pub fn retransmit_due(&mut self, now: Instant) -> Vec<String> {
        let interval = self.config.retry_interval;
        let max_retries = self.config.max_retries;
        let mut exhausted = Vec::new();
        for (client_id, session) in &mut self.sessions {
            for (id, entry) in &mut session.window.pending {
                if now.saturating_duration_since(entry.sent_at) < interval {
                    continue;
                }
                if entry.retries >= max_retries {
                    exhausted.push(client_id.clone());
                    break;
                }
                entry.retries += 1;
                entry.sent_at = now;
                let mut again = entry.publish.clone();
                again.dup = true;
                debug!("retransmit {client_id} packet_id={id} attempt={}", entry.retries);
                let _ = session.sink.send(Outbound::Packet(Packet::Publish(again)));
            }
        }
        for id in &exhausted {
            self.remove(id, CloseReason::RetriesExhausted);
        }
        exhausted
    }

    fn remove(&mut self, client_id: &str, reason: CloseReason) {
        if let Some(s) = self.sessions.remove(client_id) {
            self.by_conn.remove(&s.conn_id);
            s.close(reason);
            info!("close {client_id} reason={reason:?}");
        }
    }

    pub fn close_all(&mut self) {
        let ids: Vec<String> = self.sessions.keys().cloned().collect();
        for id in ids {
            self.remove(&id, CloseReason::Shutdown);
        }
    }

    pub fn stats(&self) -> BrokerStats {
        BrokerStats {
            sessions: self.sessions.len(),
            subscriptions: self.sessions.values().map(|s| s.subscriptions.len()).sum(),
            in_flight: self.sessions.values().map(|s| s.window.pending.len()).sum(),
        }
    }

    /// Filters currently held for `client_id`, in subscription order.
    pub fn subscriptions(&self, client_id: &str) -> Vec<(String, QoS)> {
        self.sessions
            .get(client_id)
            .map(|s| s.subscriptions.iter().map(|sub| (sub.raw.clone(), sub.qos)).collect())
            .unwrap_or_default()
    }

    pub fn in_flight(&self, client_id: &str) -> usize {
        self.sessions.get(client_id).map_or(0, |s| s.window.pending.len())
    }

    pub fn client_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.keys().cloned().collect();
        ids.sort();
        ids
    }
}

/// A listening broker.
pub struct Broker {
    core: Arc<Mutex<BrokerCore>>,
    local_addr: SocketAddr,
    cancel: CancellationToken,
    connections: Arc<AtomicUsize>,
    tasks: Vec<JoinHandle<()>>,
}

impl Broker {
    pub async fn bind(config: BrokerConfig) -> io::Result<Broker> {
        config.validate().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let listener = TcpListener::bind(config.bind).await?;
        let local_addr = listener.local_addr()?;
        let tick = (config.retry_interval / 4).clamp(Duration::from_millis(10), Duration::from_millis(250));
        let core = Arc::new(Mutex::new(BrokerCore::new(config)));
        let cancel = CancellationToken::new();
        let connections = Arc::new(AtomicUsize::new(0));

        let accept = tokio::spawn(accept_loop(listener, core.clone(), cancel.clone(), connections.clone()));
        let housekeeping = tokio::spawn({
            let core = core.clone();
            let cancel = cancel.clone();
            async move {
                let mut interval = tokio::time::interval(tick);
                loop {
                    tokio::select! {
                        _ = cancel.cancelled() => break,
                        _ = interval.tick() => {
                            let mut core = lock(&core);
                            let now = Instant::now();
                            core.expire_idle_sessions(now);
                            core.retransmit_due(now);
                        }
                    }
                }
            }
        });
        info!("listening - addr={local_addr}");
        Ok(Broker { core, local_addr, cancel, connections, tasks: vec![accept, housekeeping] })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn stats(&self) -> BrokerStats {
        lock(&self.core).stats()
    }

    pub fn connections(&self) -> usize {
        self.connections.load(Ordering::SeqCst)
    }

    pub fn subscriptions(&self, client_id: &str) -> Vec<(String, QoS)> {
        lock(&self.core).subscriptions(client_id)
    }

    pub fn client_ids(&self) -> Vec<String> {
        lock(&self.core).client_ids()
    }

    /// Routes a publish that did not come from a network client.
    pub fn publish(&self, publish: &Publish) -> Result<usize, RouteError> {
        lock(&self.core).route_publish(Origin::Internal, publish, Instant::now())
    }

    /// Resolves when [`Broker::shutdown`] has been requested.
    pub fn cancelled(&self) -> tokio_util::sync::WaitForCancellationFuture<'_> {
        self.cancel.cancelled()
    }

    pub async fn shutdown(mut self) {
        self.cancel.cancel();
        lock(&self.core).close_all();
        for task in self.tasks.drain(..) {
            let _ = task.await;
        }
        info!("stopped - addr={}", self.local_addr);
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}

fn lock(core: &Mutex<BrokerCore>) -> MutexGuard<'_, BrokerCore> {
    core.lock().unwrap_or_else(|e| e.into_inner())
}

static NEXT_CONN: AtomicU64 = AtomicU64::new(1);

async fn accept_loop(listener: TcpListener, core: Arc<Mutex<BrokerCore>>, cancel: CancellationToken, connections: Arc<AtomicUsize>) {
    loop {
        let (stream, peer) = tokio::select! {
            _ = cancel.cancelled() => return,
            res = listener.accept() => match res {
                Ok(x) => x,
                Err(e) => {
                    warn!("accept_failed - {e}");
                    continue;
                }
            },
        };
        let max = lock(&core).config().max_connections;
        if connections.load(Ordering::SeqCst) >= max {
            warn!("refused - peer={peer} connection limit {max} reached");
            drop(stream);
            continue;
        }
        let _ = stream.set_nodelay(true);
        connections.fetch_add(1, Ordering::SeqCst);
        let conn_id = NEXT_CONN.fetch_add(1, Ordering::Relaxed);
        let core = core.clone();
        let cancel = cancel.child_token();
        let connections = connections.clone();
        tokio::spawn(async move {
            serve_connection(stream, conn_id, core.clone(), cancel).await;
            lock(&core).disconnect(conn_id);
            connections.fetch_sub(1, Ordering::SeqCst);
        });
    }
}

async fn serve_connection(stream: TcpStream, conn_id: ConnId, core: Arc<Mutex<BrokerCore>>, cancel: CancellationToken) {
    let (mut reader, mut writer) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Outbound>();
    let closed = cancel.child_token();

    let writer_task = tokio::spawn({
        let closed = closed.clone();
        async move {
            while let Some(cmd) = rx.recv().await {
                match cmd {
                    Outbound::Packet(p) => {
                        let bytes = match encode_packet(&p) {
                            Ok(b) => b,
                            Err(e) => {
                                warn!("encode_failed - conn={conn_id} {e}");
                                continue;
                            }
                        };
                        if writer.write_all(&bytes).await.is_err() {
                            break;
                        }
                    }
                    Outbound::Close(reason) => {
                        debug!("closing - conn={conn_id} reason={reason:?}");
                        break;
                    }
                }
            }
            let _ = writer.shutdown().await;
            closed.cancel();
        }
    });

    let connect_timeout = lock(&core).config().connect_timeout;
    let mut buf = BytesMut::with_capacity(4096);
    let mut connected = false;
    let deadline = tokio::time::sleep(connect_timeout);
    tokio::pin!(deadline);

    'read: loop {
        let n = tokio::select! {
            _ = closed.cancelled() => break,
            _ = &mut deadline, if !connected => {
                warn!("connect_timeout - conn={conn_id}");
                break;
            }
            res = reader.read_buf(&mut buf) => match res {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            },
        };
        let _ = n;
        loop {
            let (packet, used) = match decode_packet(&buf) {
                Ok(Some(x)) => x,
                Ok(None) => break,
                Err(e) => {
                    warn!("protocol_error {} {e}", client_label(&core, conn_id));
                    break 'read;
                }
            };
            let _ = buf.split_to(used);
            let now = Instant::now();
            let mut core = lock(&core);
            match (connected, packet) {
                (false, Packet::Connect(c)) => {
                    let (_, ack) = core.connect(conn_id, &c, tx.clone(), now);
                    let _ = tx.send(Outbound::Packet(Packet::ConnAck(ack)));
                    connected = true;
                }
                (false, other) => {
                    warn!("protocol_error - conn={conn_id} first packet was {}", other.name());
                    break 'read;
                }
                (true, _) if !core.is_live(conn_id) => break 'read,
                (true, Packet::Connect(_)) => {
                    warn!("protocol_error {} second CONNECT", client_label_locked(&core, conn_id));
                    break 'read;
                }
                (true, Packet::Publish(p)) => {
                    if let Err(e) = core.route_publish(Origin::Client(conn_id), &p, now) {
                        warn!("protocol_error {} {e}", client_label_locked(&core, conn_id));
                        break 'read;
                    }
                }
                (true, Packet::PubAck(id)) => {
                    core.on_puback(conn_id, id, now);
                }
                (true, Packet::Subscribe(s)) => {
                    core.subscribe(conn_id, &s, now);
                }
                (true, Packet::Unsubscribe(u)) => core.unsubscribe(conn_id, &u, now),
                (true, Packet::PingReq) => core.ping(conn_id, now),
                (true, Packet::Disconnect) => break 'read,
                (true, other) => {
                    warn!("protocol_error {} unexpected {}", client_label_locked(&core, conn_id), other.name());
                    break 'read;
                }
            }
        }
    }

    lock(&core).disconnect(conn_id);
    let _ = tx.send(Outbound::Close(CloseReason::ProtocolViolation));
    drop(tx);
    let _ = writer_task.await;
}

fn client_label(core: &Mutex<BrokerCore>, conn_id: ConnId) -> String {
    client_label_locked(&lock(core), conn_id)
}

fn client_label_locked(core: &BrokerCore, conn_id: ConnId) -> String {
    match core.client_id(conn_id) {
        Some(id) => id.to_owned(),
        None => format!("- conn={conn_id}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bytes::Bytes;

    fn core() -> BrokerCore {
        BrokerCore::new(BrokerConfig::default())
    }

    fn session(core: &mut BrokerCore, conn: ConnId, id: &str, keep_alive: u16, now: Instant) -> mpsc::UnboundedReceiver<Outbound> {
        let (tx, rx) = mpsc::unbounded_channel();
        let (_, ack) = core.connect(conn, &Connect::new(id, keep_alive), tx, now);
        assert_eq!(ack.code, 0);
        rx
    }

    fn drain(rx: &mut mpsc::UnboundedReceiver<Outbound>) -> Vec<Outbound> {
        let mut out = Vec::new();
        while let Ok(x) = rx.try_recv() {
            out.push(x);
        }
        out
    }

    fn sub(filters: &[(&str, QoS)], id: u16) -> Subscribe {
        Subscribe { packet_id: id, filters: filters.iter().map(|(f, q)| (f.to_string(), *q)).collect() }
    }

    fn publishes(out: &[Outbound]) -> Vec<&Publish> {
        out.iter()
            .filter_map(|o| match o {
                Outbound::Packet(Packet::Publish(p)) => Some(p),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn subscribe_grants_and_rejects() {
        let now = Instant::now();
        let mut c = core();
        let mut rx = session(&mut c, 1, "ingest", 30, now);
        let ack = c.subscribe(1, &sub(&[("plant/#", QoS::AtLeastOnce)], 7), now).unwrap();
        assert_eq!(ack, SubAck { packet_id: 7, return_codes: vec![1] });
        let ack = c.subscribe(1, &sub(&[("#/bad", QoS::AtMostOnce)], 8), now).unwrap();
        assert_eq!(ack, SubAck { packet_id: 8, return_codes: vec![SUBACK_FAILURE] });
        assert_eq!(drain(&mut rx).len(), 2);
    }

    #[test]
    fn resubscribe_replaces_filter() {
        let now = Instant::now();
        let mut c = core();
        let mut rx = session(&mut c, 1, "s", 30, now);
        c.subscribe(1, &sub(&[("plant/#", QoS::AtLeastOnce)], 1), now);
        let ack = c.subscribe(1, &sub(&[("plant/#", QoS::AtMostOnce)], 2), now).unwrap();
        assert_eq!(ack.return_codes, vec![0]);
        assert_eq!(c.subscriptions("s"), vec![("plant/#".to_string(), QoS::AtMostOnce)]);
        drain(&mut rx);
        let n = c.route_publish(Origin::Internal, &Publish::new("plant/x", Bytes::from_static(b"1")).with_qos1(3), now).unwrap();
        assert_eq!(n, 1);
        let out = drain(&mut rx);
        let pubs = publishes(&out);
        assert_eq!(pubs.len(), 1);
        assert_eq!(pubs[0].qos, QoS::AtMostOnce);
    }

    #[test]
    fn route_counts_each_matching_subscription() {
        let now = Instant::now();
        let mut c = core();
        let mut a = session(&mut c, 1, "a", 30, now);
        let mut b = session(&mut c, 2, "b", 30, now);
        c.subscribe(1, &sub(&[("plant/#", QoS::AtMostOnce)], 1), now);
        c.subscribe(2, &sub(&[("plant/energy/+", QoS::AtMostOnce)], 1), now);
        drain(&mut a);
        drain(&mut b);
        let n = c.route_publish(Origin::Internal, &Publish::new("plant/energy/esp32", Bytes::new()), now).unwrap();
        assert_eq!(n, 2);
        assert_eq!(publishes(&drain(&mut a)).len(), 1);
        assert_eq!(publishes(&drain(&mut b)).len(), 1);
    }

    #[test]
    fn qos1_publish_without_subscribers_still_acked() {
        let now = Instant::now();
        let mut c = core();
        let mut rx = session(&mut c, 1, "pub", 30, now);
        let p = Publish::new("plant/energy/esp32", Bytes::from_static(b"x")).with_qos1(11);
        assert_eq!(c.route_publish(Origin::Client(1), &p, now), Ok(0));
        assert_eq!(drain(&mut rx), vec![Outbound::Packet(Packet::PubAck(11))]);
    }

    #[test]
    fn oversized_payload_rejected() {
        let mut c = BrokerCore::new(BrokerConfig { max_payload: 4, ..BrokerConfig::default() });
        let err = c.route_publish(Origin::Internal, &Publish::new("a", vec![0u8; 5]), Instant::now());
        assert_eq!(err, Err(RouteError::PayloadTooLarge { size: 5, limit: 4 }));
    }

    #[test]
    fn takeover_closes_old_session() {
        let now = Instant::now();
        let mut c = core();
        let mut old = session(&mut c, 1, "esp32-energy", 30, now);
        c.subscribe(1, &sub(&[("plant/#", QoS::AtMostOnce)], 1), now);
        drain(&mut old);
        let mut new = session(&mut c, 2, "esp32-energy", 30, now);
        assert_eq!(drain(&mut old), vec![Outbound::Close(CloseReason::TakenOver)]);
        c.subscribe(2, &sub(&[("plant/#", QoS::AtMostOnce)], 1), now);
        c.route_publish(Origin::Internal, &Publish::new("plant/a", Bytes::new()), now).unwrap();
        assert!(drain(&mut old).is_empty());
        assert_eq!(publishes(&drain(&mut new)).len(), 1);
        // the stale connection's disconnect must not remove the new session
        assert_eq!(c.disconnect(1), None);
        assert_eq!(c.stats().sessions, 1);
    }

    #[test]
    fn puback_shrinks_window_and_unknown_ignored() {
        let now = Instant::now();
        let mut c = core();
        let mut rx = session(&mut c, 1, "s", 30, now);
        c.subscribe(1, &sub(&[("t", QoS::AtLeastOnce)], 1), now);
        drain(&mut rx);
        for _ in 0..5 {
            c.route_publish(Origin::Internal, &Publish::new("t", Bytes::new()).with_qos1(1), now).unwrap();
        }
        assert_eq!(c.in_flight("s"), 5);
        assert!(c.on_puback(1, 5, now));
        assert_eq!(c.in_flight("s"), 4);
        assert!(!c.on_puback(1, 99, now));
        assert_eq!(c.in_flight("s"), 4);
    }

    #[test]
    fn window_limit_queues_backlog_in_order() {
        let now = Instant::now();
        let mut c = BrokerCore::new(BrokerConfig { in_flight_limit: 2, ..BrokerConfig::default() });
        let mut rx = session(&mut c, 1, "s", 30, now);
        c.subscribe(1, &sub(&[("t", QoS::AtLeastOnce)], 1), now);
        drain(&mut rx);
        for i in 0..5u8 {
            c.route_publish(Origin::Internal, &Publish::new("t", vec![i]).with_qos1(1), now).unwrap();
        }
        let first = drain(&mut rx);
        let pubs = publishes(&first);
        assert_eq!(pubs.len(), 2);
        assert_eq!(c.in_flight("s"), 2);
        let ids: Vec<u16> = pubs.iter().map(|p| p.packet_id.unwrap()).collect();
        let mut payloads: Vec<u8> = pubs.iter().map(|p| p.payload[0]).collect();
        for id in ids {
            c.on_puback(1, id, now);
        }
        let more = drain(&mut rx);
        payloads.extend(publishes(&more).iter().map(|p| p.payload[0]));
        assert_eq!(payloads, vec![0, 1, 2, 3]);
        assert_eq!(c.in_flight("s"), 2);
    }

    #[test]
    fn unacked_delivery_retried_with_dup_then_closed() {
        let t0 = Instant::now();
        let mut c = core();
        let mut rx = session(&mut c, 1, "s", 0, t0);
        c.subscribe(1, &sub(&[("t", QoS::AtLeastOnce)], 1), t0);
        c.route_publish(Origin::Internal, &Publish::new("t", Bytes::from_static(b"m")).with_qos1(1), t0).unwrap();
        drain(&mut rx);
        let step = Duration::from_secs(5);
        for attempt in 1..=3u32 {
            let now = t0 + step * attempt;
            assert!(c.retransmit_due(now).is_empty());
            let out = drain(&mut rx);
            let pubs = publishes(&out);
            assert_eq!(pubs.len(), 1, "attempt {attempt}");
            assert!(pubs[0].dup);
        }
        assert!(c.retransmit_due(t0 + step * 3 + Duration::from_secs(4)).is_empty());
        assert_eq!(c.retransmit_due(t0 + step * 4), vec!["s".to_string()]);
        assert_eq!(drain(&mut rx), vec![Outbound::Close(CloseReason::RetriesExhausted)]);
        assert_eq!(c.stats(), BrokerStats::default());
    }

    #[test]
    fn keep_alive_expiry_uses_grace() {
        let t0 = Instant::now();
        let mut c = core();
        let _rx = session(&mut c, 1, "silent", 2, t0);
        assert!(c.expire_idle_sessions(t0 + Duration::from_secs(3)).is_empty());
        assert_eq!(c.expire_idle_sessions(t0 + Duration::from_secs(4)), vec!["silent".to_string()]);
    }

    #[test]
    fn pings_keep_session_alive() {
        let t0 = Instant::now();
        let mut c = core();
        let mut rx = session(&mut c, 1, "pinger", 2, t0);
        for i in 1..=20u32 {
            let now = t0 + Duration::from_millis(1500) * i;
            c.ping(1, now);
            assert!(c.expire_idle_sessions(now + Duration::from_millis(100)).is_empty());
        }
        assert!(drain(&mut rx).iter().all(|o| *o == Outbound::Packet(Packet::PingResp)));
    }

    #[test]
    fn zero_keep_alive_never_expires() {
        let t0 = Instant::now();
        let mut c = core();
        let _rx = session(&mut c, 1, "forever", 0, t0);
        assert!(c.expire_idle_sessions(t0 + Duration::from_secs(86_400)).is_empty());
    }

    #[test]
    fn state_returns_to_baseline() {
        let now = Instant::now();
        let mut c = core();
        let mut rxs = Vec::new();
        for i in 0..4u64 {
            rxs.push(session(&mut c, i, &format!("c{i}"), 30, now));
            c.subscribe(i, &sub(&[("a/#", QoS::AtLeastOnce), ("b", QoS::AtMostOnce)], 1), now);
        }
        assert_eq!(c.stats().subscriptions, 8);
        for i in 0..4u64 {
            c.disconnect(i);
        }
        assert_eq!(c.stats(), BrokerStats::default());
    }
}
