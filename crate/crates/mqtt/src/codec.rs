//! Wire codec for the MQTT 3.1.1 control packets used by the plant.
//!
//! Only QoS 0 and QoS 1 are supported. PUBREC/PUBREL/PUBCOMP and any
//! QoS 2 marking are rejected as malformed, as are will messages. The
//! decoder is strict: every packet it accepts re-encodes to the exact
//! same bytes.

use bytes::Bytes;
use thiserror::Error;

use crate::topic::{validate_topic, MAX_STRING_LEN};

/// Largest publish payload accepted by the codec (256 KiB).
pub const MAX_PAYLOAD: usize = 256 * 1024;
/// Largest remaining length a single varint can carry.
pub const MAX_REMAINING_LENGTH: usize = 268_435_455;
/// Largest remaining length the decoder will wait for before giving up.
pub const MAX_PACKET_BODY: usize = 2 + MAX_STRING_LEN + 2 + MAX_PAYLOAD;

pub const PROTOCOL_NAME: &str = "MQTT";
pub const PROTOCOL_LEVEL: u8 = 4;
/// SUBACK return code for a rejected filter.
pub const SUBACK_FAILURE: u8 = 0x80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum QoS {
    #[default]
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    pub fn from_u8(v: u8) -> Option<QoS> {
        match v {
            0 => Some(QoS::AtMostOnce),
            1 => Some(QoS::AtLeastOnce),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub keep_alive: u16,
    pub clean_session: bool,
    /// Carried for wire fidelity; the broker ignores credentials.
    pub username: Option<String>,
    pub password: Option<Bytes>,
}

impl Connect {
    pub fn new(client_id: impl Into<String>, keep_alive: u16) -> Self {
        Connect {
            client_id: client_id.into(),
            keep_alive,
            clean_session: true,
            username: None,
            password: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnAck {
    pub session_present: bool,
    pub code: u8,
}

impl ConnAck {
    pub const ACCEPTED: u8 = 0;
    pub const SERVER_UNAVAILABLE: u8 = 3;

    pub fn accepted() -> Self {
        ConnAck { session_present: false, code: Self::ACCEPTED }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: QoS,
    pub retain: bool,
    pub topic: String,
    /// Present iff `qos` is [`QoS::AtLeastOnce`].
    pub packet_id: Option<u16>,
    pub payload: Bytes,
}

impl Publish {
    pub fn new(topic: impl Into<String>, payload: impl Into<Bytes>) -> Self {
        Publish {
            dup: false,
            qos: QoS::AtMostOnce,
            retain: false,
            topic: topic.into(),
            packet_id: None,
            payload: payload.into(),
        }
    }

    pub fn with_qos1(mut self, packet_id: u16) -> Self {
        self.qos = QoS::AtLeastOnce;
        self.packet_id = Some(packet_id);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscribe {
    pub packet_id: u16,
    /// Raw filter strings; validity is the broker's call, per entry.
    pub filters: Vec<(String, QoS)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubAck {
    pub packet_id: u16,
    /// 0x00, 0x01 or [`SUBACK_FAILURE`] per requested filter.
    pub return_codes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unsubscribe {
    pub packet_id: u16,
    pub filters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    ConnAck(ConnAck),
    Publish(Publish),
    PubAck(u16),
    Subscribe(Subscribe),
    SubAck(SubAck),
    Unsubscribe(Unsubscribe),
    UnsubAck(u16),
    PingReq,
    PingResp,
    Disconnect,
}

impl Packet {
    pub fn name(&self) -> &'static str {
        match self {
            Packet::Connect(_) => "CONNECT",
            Packet::ConnAck(_) => "CONNACK",
            Packet::Publish(_) => "PUBLISH",
            Packet::PubAck(_) => "PUBACK",
            Packet::Subscribe(_) => "SUBSCRIBE",
            Packet::SubAck(_) => "SUBACK",
            Packet::Unsubscribe(_) => "UNSUBSCRIBE",
            Packet::UnsubAck(_) => "UNSUBACK",
            Packet::PingReq => "PINGREQ",
            Packet::PingResp => "PINGRESP",
            Packet::Disconnect => "DISCONNECT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("remaining length {0} out of range")]
    RemainingLengthOutOfRange(usize),
    #[error("packet invariant violated: {0}")]
    InvariantViolation(&'static str),
}

fn malformed<T>(why: &'static str) -> Result<T, DecodeError> {
    Err(DecodeError::Malformed(why))
}

fn violation<T>(why: &'static str) -> Result<T, EncodeError> {
    Err(EncodeError::InvariantViolation(why))
}

/// Base-128 varint used for the fixed header's remaining length.
pub fn encode_remaining_length(n: usize) -> Result<Vec<u8>, EncodeError> {
    if n > MAX_REMAINING_LENGTH {
        return Err(EncodeError::RemainingLengthOutOfRange(n));
    }
    let mut out = Vec::with_capacity(4);
    let mut x = n;
    loop {
        let mut byte = (x % 128) as u8;
        x /= 128;
        if x > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if x == 0 {
            return Ok(out);
        }
    }
}

/// Returns `(value, bytes used)`, or `None` when the buffer ends mid-varint.
pub fn decode_remaining_length(buf: &[u8]) -> Result<Option<(usize, usize)>, DecodeError> {
    let mut value = 0usize;
    for i in 0..4 {
        let Some(&byte) = buf.get(i) else {
            return Ok(None);
        };
        value += usize::from(byte & 0x7F) << (7 * i);
        if byte & 0x80 == 0 {
            if i > 0 && byte == 0 {
                return malformed("non-minimal remaining length");
            }
            return Ok(Some((value, i + 1)));
        }
    }
    malformed("remaining length longer than 4 bytes")
}

/// Decodes one packet from the front of `buf`.
///
/// `Ok(None)` means `buf` holds a valid prefix of an incomplete packet.
/// On success the second element is the number of bytes consumed; any
/// trailing bytes are left for the next call.
pub fn decode_packet(buf: &[u8]) -> Result<Option<(Packet, usize)>, DecodeError> {
    let Some(&header) = buf.first() else {
        return Ok(None);
    };
    let kind = header >> 4;
    let flags = header & 0x0F;
    if kind == 0 || kind == 15 {
        return malformed("reserved packet type");
    }
    if matches!(kind, 5..=7) {
        return malformed("QoS 2 flow is not supported");
    }
    let Some((remaining, len_bytes)) = decode_remaining_length(&buf[1..])? else {
        return Ok(None);
    };
    if remaining > MAX_PACKET_BODY {
        return malformed("packet exceeds size bound");
    }
    let start = 1 + len_bytes;
    let total = start + remaining;
    if buf.len() < total {
        return Ok(None);
    }
    let mut r = Reader::new(&buf[start..total]);
    let packet = match kind {
        1 => {
            expect_flags(flags, 0)?;
            Packet::Connect(decode_connect(&mut r)?)
        }
        2 => {
            expect_flags(flags, 0)?;
            let ack_flags = r.u8()?;
            if ack_flags & 0xFE != 0 {
                return malformed("reserved CONNACK flags set");
            }
            Packet::ConnAck(ConnAck { session_present: ack_flags & 1 == 1, code: r.u8()? })
        }
        3 => Packet::Publish(decode_publish(flags, &mut r)?),
        4 => {
            expect_flags(flags, 0)?;
            Packet::PubAck(r.packet_id()?)
        }
        8 => {
            expect_flags(flags, 0b0010)?;
            let packet_id = r.packet_id()?;
            let mut filters = Vec::new();
            while !r.is_empty() {
                let filter = r.string()?;
                let requested = r.u8()?;
                if requested & 0xFC != 0 {
                    return malformed("reserved bits in requested QoS");
                }
                let qos = QoS::from_u8(requested).ok_or(DecodeError::Malformed("QoS 2 is not supported"))?;
                filters.push((filter, qos));
            }
            if filters.is_empty() {
                return malformed("SUBSCRIBE without filters");
            }
            Packet::Subscribe(Subscribe { packet_id, filters })
        }
        9 => {
            expect_flags(flags, 0)?;
            let packet_id = r.packet_id()?;
            let return_codes = r.rest().to_vec();
            if return_codes.is_empty() {
                return malformed("SUBACK without return codes");
            }
            if return_codes.iter().any(|&c| !matches!(c, 0 | 1 | SUBACK_FAILURE)) {
                return malformed("invalid SUBACK return code");
            }
            Packet::SubAck(SubAck { packet_id, return_codes })
        }
        10 => {
            expect_flags(flags, 0b0010)?;
            let packet_id = r.packet_id()?;
            let mut filters = Vec::new();
            while !r.is_empty() {
                filters.push(r.string()?);
            }
            if filters.is_empty() {
                return malformed("UNSUBSCRIBE without filters");
            }
            Packet::Unsubscribe(Unsubscribe { packet_id, filters })
        }
        11 => {
            expect_flags(flags, 0)?;
            Packet::UnsubAck(r.packet_id()?)
        }
        12..=14 => {
            expect_flags(flags, 0)?;
            match kind {
                12 => Packet::PingReq,
                13 => Packet::PingResp,
                _ => Packet::Disconnect,
            }
        }
        _ => unreachable!("packet type nibble {kind} handled above"),
    };
    if !r.is_empty() {
        return malformed("trailing bytes inside packet");
    }
    Ok(Some((packet, total)))
}

fn expect_flags(flags: u8, expected: u8) -> Result<(), DecodeError> {
    if flags != expected {
        return malformed("invalid fixed header flags");
    }
    Ok(())
}

fn decode_connect(r: &mut Reader<'_>) -> Result<Connect, DecodeError> {
    if r.string()? != PROTOCOL_NAME {
        return malformed("unsupported protocol name");
    }
    if r.u8()? != PROTOCOL_LEVEL {
        return malformed("unsupported protocol level");
    }
    let flags = r.u8()?;
    if flags & 0x01 != 0 {
        return malformed("reserved CONNECT flag set");
    }
    if flags & 0b0011_1100 != 0 {
        return malformed("will messages are not supported");
    }
    let has_username = flags & 0x80 != 0;
    let has_password = flags & 0x40 != 0;
    if has_password && !has_username {
        return malformed("password without username");
    }
    let keep_alive = r.u16()?;
    let client_id = r.string()?;
    let username = if has_username { Some(r.string()?) } else { None };
    let password = if has_password { Some(Bytes::copy_from_slice(r.binary()?)) } else { None };
    Ok(Connect { client_id, keep_alive, clean_session: flags & 0x02 != 0, username, password })
}

fn decode_publish(flags: u8, r: &mut Reader<'_>) -> Result<Publish, DecodeError> {
    let dup = flags & 0b1000 != 0;
    let retain = flags & 0b0001 != 0;
    let qos = match (flags >> 1) & 0b11 {
        0 => QoS::AtMostOnce,
        1 => QoS::AtLeastOnce,
        2 => return malformed("QoS 2 is not supported"),
        _ => return malformed("QoS 3 is invalid"),
    };
    if dup && qos == QoS::AtMostOnce {
        return malformed("DUP set on a QoS 0 publish");
    }
    let topic = r.string()?;
    if validate_topic(&topic).is_err() {
        return malformed("invalid publish topic");
    }
    let packet_id = match qos {
        QoS::AtMostOnce => None,
        QoS::AtLeastOnce => Some(r.packet_id()?),
    };
    let payload = r.rest();
    if payload.len() > MAX_PAYLOAD {
        return malformed("payload exceeds size bound");
    }
    Ok(Publish { dup, qos, retain, topic, packet_id, payload: Bytes::copy_from_slice(payload) })
}

/// Encodes a packet. Fails when the packet breaks a wire invariant.
pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>, EncodeError> {
    let mut body = Vec::new();
    let header: u8 = match packet {
        Packet::Connect(c) => {
            put_string(&mut body, PROTOCOL_NAME)?;
            body.push(PROTOCOL_LEVEL);
            if c.password.is_some() && c.username.is_none() {
                return violation("password without username");
            }
            let mut flags = 0u8;
            if c.username.is_some() {
                flags |= 0x80;
            }
            if c.password.is_some() {
                flags |= 0x40;
            }
            if c.clean_session {
                flags |= 0x02;
            }
            body.push(flags);
            body.extend_from_slice(&c.keep_alive.to_be_bytes());
            put_string(&mut body, &c.client_id)?;
            if let Some(user) = &c.username {
                put_string(&mut body, user)?;
            }
            if let Some(pass) = &c.password {
                put_binary(&mut body, pass)?;
            }
            0x10
        }
        Packet::ConnAck(a) => {
            body.push(u8::from(a.session_present));
            body.push(a.code);
            0x20
        }
        Packet::Publish(p) => {
            if validate_topic(&p.topic).is_err() {
                return violation("publish topic must be a valid non-wildcard topic");
            }
            if p.payload.len() > MAX_PAYLOAD {
                return violation("payload exceeds size bound");
            }
            put_string(&mut body, &p.topic)?;
            match (p.qos, p.packet_id) {
                (QoS::AtMostOnce, None) => {
                    if p.dup {
                        return violation("DUP set on a QoS 0 publish");
                    }
                }
                (QoS::AtLeastOnce, Some(id)) => put_packet_id(&mut body, id)?,
                (QoS::AtMostOnce, Some(_)) => return violation("packet id on a QoS 0 publish"),
                (QoS::AtLeastOnce, None) => return violation("QoS 1 publish without packet id"),
            }
            body.extend_from_slice(&p.payload);
            0x30 | (u8::from(p.dup) << 3) | (p.qos.as_u8() << 1) | u8::from(p.retain)
        }
        Packet::PubAck(id) => {
            put_packet_id(&mut body, *id)?;
            0x40
        }
        Packet::Subscribe(s) => {
            put_packet_id(&mut body, s.packet_id)?;
            if s.filters.is_empty() {
                return violation("SUBSCRIBE without filters");
            }
            for (filter, qos) in &s.filters {
                put_string(&mut body, filter)?;
                body.push(qos.as_u8());
            }
            0x82
        }
        Packet::SubAck(a) => {
            put_packet_id(&mut body, a.packet_id)?;
            if a.return_codes.is_empty() {
                return violation("SUBACK without return codes");
            }
            if a.return_codes.iter().any(|&c| !matches!(c, 0 | 1 | SUBACK_FAILURE)) {
                return violation("invalid SUBACK return code");
            }
            body.extend_from_slice(&a.return_codes);
            0x90
        }
        Packet::Unsubscribe(u) => {
            put_packet_id(&mut body, u.packet_id)?;
            if u.filters.is_empty() {
                return violation("UNSUBSCRIBE without filters");
            }
            for filter in &u.filters {
                put_string(&mut body, filter)?;
            }
            0xA2
        }
        Packet::UnsubAck(id) => {
            put_packet_id(&mut body, *id)?;
            0xB0
        }
        Packet::PingReq => 0xC0,
        Packet::PingResp => 0xD0,
        Packet::Disconnect => 0xE0,
    };
    let len = encode_remaining_length(body.len())?;
    let mut out = Vec::with_capacity(1 + len.len() + body.len());
    out.push(header);
    out.extend_from_slice(&len);
    out.extend_from_slice(&body);
    Ok(out)
}

fn put_packet_id(out: &mut Vec<u8>, id: u16) -> Result<(), EncodeError> {
    if id == 0 {
        return violation("packet id must be non-zero");
    }
    out.extend_from_slice(&id.to_be_bytes());
    Ok(())
}

fn put_string(out: &mut Vec<u8>, s: &str) -> Result<(), EncodeError> {
    if s.contains('\0') {
        return violation("string contains NUL");
    }
    put_binary(out, s.as_bytes())
}

fn put_binary(out: &mut Vec<u8>, b: &[u8]) -> Result<(), EncodeError> {
    let len = u16::try_from(b.len()).map_err(|_| EncodeError::InvariantViolation("string longer than 65535 bytes"))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(b);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return malformed("field runs past end of packet");
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn packet_id(&mut self) -> Result<u16, DecodeError> {
        match self.u16()? {
            0 => malformed("packet id must be non-zero"),
            id => Ok(id),
        }
    }

    fn binary(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u16()?;
        self.take(usize::from(len))
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let raw = self.binary()?;
        let s = std::str::from_utf8(raw).map_err(|_| DecodeError::Malformed("invalid UTF-8 string"))?;
        if s.contains('\0') {
            return malformed("string contains NUL");
        }
        Ok(s.to_owned())
    }

    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }
}

#[cfg(any(test, feature = "strategies"))]
pub mod strategies {
    //! proptest generators for valid packets.

    use super::*;
    use proptest::collection::vec;
    use proptest::prelude::*;

    fn level() -> impl Strategy<Value = String> {
        prop_oneof![
            Just(String::new()),
            "[a-z0-9_]{1,8}",
            "[\\p{L}]{1,4}",
        ]
    }

    pub fn topic() -> impl Strategy<Value = String> {
        vec(level(), 1..5)
            .prop_map(|levels| levels.join("/"))
            .prop_filter("topic must be non-empty", |t| !t.is_empty())
    }

    pub fn filter() -> impl Strategy<Value = String> {
        vec(prop_oneof![level(), Just("+".to_owned())], 1..4).prop_flat_map(|levels| {
            (Just(levels), any::<bool>()).prop_map(|(mut levels, hash)| {
                if hash {
                    levels.push("#".to_owned());
                }
                levels.join("/")
            })
        })
    }

    fn packet_id() -> impl Strategy<Value = u16> {
        1..=u16::MAX
    }

    fn qos() -> impl Strategy<Value = QoS> {
        prop_oneof![Just(QoS::AtMostOnce), Just(QoS::AtLeastOnce)]
    }

    fn publish() -> impl Strategy<Value = Publish> {
        (topic(), vec(any::<u8>(), 0..300), any::<bool>(), any::<bool>(), proptest::option::of(packet_id())).prop_map(
            |(topic, payload, retain, dup, id)| {
                let p = Publish::new(topic, payload);
                let mut p = match id {
                    Some(id) => p.with_qos1(id),
                    None => p,
                };
                p.retain = retain;
                p.dup = dup && p.qos == QoS::AtLeastOnce;
                p
            },
        )
    }

    fn connect() -> impl Strategy<Value = Connect> {
        (
            "[a-zA-Z0-9-]{0,23}",
            any::<u16>(),
            any::<bool>(),
            proptest::option::of(("[a-z]{1,8}", proptest::option::of(vec(any::<u8>(), 0..16)))),
        )
            .prop_map(|(client_id, keep_alive, clean_session, creds)| {
                let (username, password) = match creds {
                    Some((u, p)) => (Some(u), p.map(Bytes::from)),
                    None => (None, None),
                };
                Connect { client_id, keep_alive, clean_session, username, password }
            })
    }

    pub fn packet() -> impl Strategy<Value = Packet> {
        prop_oneof![
            connect().prop_map(Packet::Connect),
            (any::<bool>(), 0u8..6).prop_map(|(session_present, code)| Packet::ConnAck(ConnAck { session_present, code })),
            publish().prop_map(Packet::Publish),
            packet_id().prop_map(Packet::PubAck),
            (packet_id(), vec((filter(), qos()), 1..4)).prop_map(|(packet_id, filters)| Packet::Subscribe(Subscribe { packet_id, filters })),
            (packet_id(), vec(prop_oneof![Just(0u8), Just(1u8), Just(SUBACK_FAILURE)], 1..4))
                .prop_map(|(packet_id, return_codes)| Packet::SubAck(SubAck { packet_id, return_codes })),
            (packet_id(), vec(filter(), 1..4)).prop_map(|(packet_id, filters)| Packet::Unsubscribe(Unsubscribe { packet_id, filters })),
            packet_id().prop_map(Packet::UnsubAck),
            Just(Packet::PingReq),
            Just(Packet::PingResp),
            Just(Packet::Disconnect),
        ]
    }
}
