//! Newline-delimited live event stream.

use std::convert::Infallible;
use std::time::{Duration, Instant};

use axum::body::Body;
use bytes::Bytes;
use log::{debug, warn};
use plantpulse_ingest::store::LIVE_CAPACITY;
use plantpulse_ingest::{format_ts, StreamId, TelemetrySample};
use serde_json::{json, Value};
use tokio::sync::broadcast::{self, error::RecvError};
use tokio::time::{interval_at, Interval};
use tokio_util::sync::CancellationToken;

use crate::routes::render_event;

struct LiveState {
    rx: broadcast::Receiver<TelemetrySample>,
    filter: Vec<StreamId>,
    heartbeat: Interval,
    expires_at: tokio::time::Instant,
    cancel: CancellationToken,
    done: bool,
}

fn line(v: &Value) -> Bytes {
    let mut buf = serde_json::to_vec(v).expect("json");
    buf.push(b'\n');
    Bytes::from(buf)
}

fn now_ms() -> i64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_millis() as i64)
}

/// Streams stored samples for `filter` plus a heartbeat every `heartbeat`.
/// Ends at token expiry, server shutdown or once `LIVE_CAPACITY` events
/// are waiting for a slow client.
pub fn live_body(
    rx: broadcast::Receiver<TelemetrySample>,
    filter: Vec<StreamId>,
    heartbeat: Duration,
    expires_at: Instant,
    cancel: CancellationToken,
) -> Body {
    let start = tokio::time::Instant::now();
    let state = LiveState {
        rx,
        filter,
        heartbeat: interval_at(start + heartbeat, heartbeat),
        expires_at: start + expires_at.saturating_duration_since(Instant::now()),
        cancel,
        done: false,
    };
    let stream = futures::stream::unfold(state, |mut s| async move {
        if s.done {
            return None;
        }
        loop {
            tokio::select! {
                _ = s.cancel.cancelled() => return None,
                _ = tokio::time::sleep_until(s.expires_at) => {
                    s.done = true;
                    return Some((Ok::<_, Infallible>(line(&json!({ "closed": "token expired" }))), s));
                }
                _ = s.heartbeat.tick() => {
                    return Some((Ok(line(&json!({ "heartbeat": format_ts(now_ms()) }))), s));
                }
                msg = s.rx.recv() => match msg {
                    Ok(_) if s.rx.len() + 1 >= LIVE_CAPACITY => {
                        let missed = s.rx.len() + 1;
                        warn!("live_client_dropped - {missed} events buffered");
                        s.done = true;
                        return Some((Ok(line(&json!({ "closed": "lagged", "buffered": missed }))), s));
                    }
                    Ok(sample) if s.filter.contains(&sample.stream) => {
                        return Some((Ok(line(&render_event(&sample))), s));
                    }
                    Ok(_) => continue,
                    Err(RecvError::Lagged(n)) => {
                        warn!("live_client_dropped - lagged by {n} events");
                        s.done = true;
                        return Some((Ok(line(&json!({ "closed": "lagged", "buffered": n }))), s));
                    }
                    Err(RecvError::Closed) => {
                        debug!("live_source_closed");
                        return None;
                    }
                },
            }
        }
    });
    Body::from_stream(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use futures::StreamExt;

    fn sample(seq: u64) -> TelemetrySample {
        TelemetrySample {
            stream: StreamId::IndustrialEnergy,
            seq,
            ingest_ts: 0,
            source_ts: None,
            fields: vec![("power_kw".into(), 1.0)],
        }
    }

    #[tokio::test]
    async fn slow_client_disconnected_at_limit() {
        let (tx, rx) = broadcast::channel(LIVE_CAPACITY);
        let body = live_body(
            rx,
            StreamId::ALL.to_vec(),
            Duration::from_secs(15),
            Instant::now() + Duration::from_secs(60),
            CancellationToken::new(),
        );
        for seq in 1..=1000 {
            tx.send(sample(seq)).unwrap();
        }
        let mut chunks = body.into_data_stream();
        let first: Value = serde_json::from_slice(&chunks.next().await.unwrap().unwrap()).unwrap();
        assert_eq!(first, json!({"closed": "lagged", "buffered": 1000}));
        assert!(chunks.next().await.is_none());
    }

    #[tokio::test]
    async fn backlog_below_limit_is_delivered() {
        let (tx, rx) = broadcast::channel(LIVE_CAPACITY);
        let body = live_body(rx, StreamId::ALL.to_vec(), Duration::from_secs(15), Instant::now() + Duration::from_secs(60), CancellationToken::new());
        for seq in 1..=999 {
            tx.send(sample(seq)).unwrap();
        }
        let events: Vec<Value> = body
            .into_data_stream()
            .take(999)
            .map(|c| serde_json::from_slice(&c.unwrap()).unwrap())
            .collect()
            .await;
        assert!(events.iter().enumerate().all(|(i, e)| e["seq"] == i as u64 + 1));
    }
}
