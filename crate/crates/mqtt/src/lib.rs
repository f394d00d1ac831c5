//! MQTT 3.1.1 subset used across the plant telemetry pipeline.
//!
//! * [`codec`] encodes and decodes control packets (QoS 0 and 1 only).
//! * [`topic`] validates topic names and filters and performs matching.
//! * [`broker`] is the central hub routing publishes to subscribers.
//! * [`client`] is the reconnecting client shared by publishers and the
//!   ingest subscriber.

pub mod broker;
pub mod client;
pub mod codec;
pub mod topic;

pub use codec::{decode_packet, encode_packet, Packet, QoS};
pub use topic::{topic_matches, validate_filter, validate_topic, TopicFilter};
