use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use plantpulse_ingest::{parse_payload, TopicMap};
use plantpulse_meter_sim::device::Esp32Meter;
use plantpulse_meter_sim::{
    run_device, Bridge, Device, DeviceStats, EmulatorModel, EnvModel, EnvParams, Pm2100Emulator, WaveformParams, WindowSpec,
};
use plantpulse_modbus::registers::pm2100;
use plantpulse_modbus::ModbusClient;
use plantpulse_mqtt::broker::{Broker, BrokerConfig};
use plantpulse_mqtt::client::{Client, ClientOptions};
use plantpulse_mqtt::QoS;
use tokio_util::sync::CancellationToken;

fn loopback() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

async fn broker_at(bind: SocketAddr) -> Broker {
    Broker::bind(BrokerConfig { bind, ..BrokerConfig::default() }).await.unwrap()
}

type Inbox = Arc<Mutex<Vec<(tokio::time::Instant, Vec<u8>)>>>;

async fn listen(addr: SocketAddr, id: &str, filter: &str) -> (Client, Inbox) {
    let inbox: Inbox = Arc::default();
    let client = Client::connect(ClientOptions::new(addr, id)).await.unwrap();
    let sink = inbox.clone();
    client
        .subscribe(filter, QoS::AtLeastOnce, move |_, p| sink.lock().unwrap().push((tokio::time::Instant::now(), p.to_vec())))
        .await
        .unwrap();
    (client, inbox)
}

async fn wait_for(inbox: &Inbox, n: usize) {
    let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
    while inbox.lock().unwrap().len() < n {
        assert!(tokio::time::Instant::now() < deadline, "timed out waiting for {n} messages");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

#[tokio::test]
async fn bridge_publishes_bank_values_exactly() {
    let broker = broker_at(loopback()).await;
    let (sub, inbox) = listen(broker.local_addr(), "sub", "plant/energy/industrial").await;
    let publisher = Client::connect(ClientOptions::new(broker.local_addr(), "bridge")).await.unwrap();

    let mut emu = Pm2100Emulator::new(EmulatorModel::default());
    let server = emu.serve(loopback(), 1).await.unwrap();
    let mut bridge = Bridge::new(ModbusClient::tcp(server.local_addr()), 1);

    let mut bank = Vec::new();
    for step in 0..50 {
        let written = if step < 2 {
            // scripted ramp: the paper's 0.95 then 0.96
            let kw = [0.95f32, 0.96][step];
            emu.map().write().unwrap().set_float(pm2100::POWER, kw).unwrap();
            kw
        } else {
            emu.step()
        };
        let reading = bridge.poll().await.unwrap();
        assert_eq!(reading.power_kw.to_bits(), written.to_bits());
        publisher.publish("plant/energy/industrial", reading.payload(step as i64), QoS::AtLeastOnce).unwrap().wait().await.unwrap();
        bank.push(written);
    }
    wait_for(&inbox, 50).await;
    let got = inbox.lock().unwrap().clone();
    for (i, ((_, payload), kw)) in got.iter().zip(&bank).enumerate() {
        let v: serde_json::Value = serde_json::from_slice(payload).unwrap();
        let published = v["power_kw"].as_f64().unwrap();
        assert_eq!((published as f32).to_bits(), kw.to_bits(), "message {i}");
        assert_eq!(v["source_ts"].as_i64(), Some(i as i64));
    }
    let first: serde_json::Value = serde_json::from_slice(&got[0].1).unwrap();
    let second: serde_json::Value = serde_json::from_slice(&got[1].1).unwrap();
    assert_eq!(first["power_kw"].as_f64(), Some(0.95));
    assert_eq!(second["power_kw"].as_f64(), Some(0.96));
    assert_eq!(bridge.error_count(), 0);

    server.shutdown().await;
    sub.disconnect().await;
    publisher.disconnect().await;
    broker.shutdown().await;
}

#[tokio::test]
async fn ten_minutes_of_payloads_fit_the_ingest_schema() {
    let topics = TopicMap::default();
    let emu = Pm2100Emulator::new(EmulatorModel::default());
    let server = emu.serve(loopback(), 1).await.unwrap();
    let mut devices = [
        (Device::Industrial(Bridge::new(ModbusClient::tcp(server.local_addr()), 1)), 5_000, topics.industrial.clone()),
        (Device::Esp32(Esp32Meter::new(WaveformParams::default(), WindowSpec::default(), 1.0, 1.0, 5)), 4_000, topics.esp32.clone()),
        (Device::Environment(EnvModel::new(EnvParams::default())), 10_000, topics.environment.clone()),
    ];
    let start = 1_626_020_634_000i64;
    let mut checked = 0;
    for (device, period, topic) in &mut devices {
        let mut t = start;
        while t < start + 600_000 {
            let payload = device.sample(t).await.unwrap();
            parse_payload(&topics, topic, &payload, t).unwrap_or_else(|e| panic!("{topic}: {e}"));
            t += *period;
            checked += 1;
        }
    }
    assert_eq!(checked, 120 + 150 + 60);
    server.shutdown().await;
}

#[tokio::test]
async fn publishing_resumes_after_broker_restart() {
    let broker = broker_at(loopback()).await;
    let addr = broker.local_addr();
    let (_sub, inbox) = listen(addr, "sub", "plant/#").await;
    let mut opts = ClientOptions::new(addr, "esp32");
    opts.backoff_initial = Duration::from_millis(100);
    let client = Client::connect(opts).await.unwrap();
    let stats = Arc::new(DeviceStats::default());
    let cancel = CancellationToken::new();
    let task = tokio::spawn({
        let (stats, cancel) = (stats.clone(), cancel.clone());
        async move {
            let mut device = Device::Esp32(Esp32Meter::new(WaveformParams::default(), WindowSpec::default(), 1.0, 1.0, 1));
            run_device(&mut device, "plant/energy/esp32", Duration::from_millis(100), &client, &stats, cancel).await;
            client.disconnect().await;
        }
    });
    wait_for(&inbox, 5).await;
    broker.shutdown().await;
    tokio::time::sleep(Duration::from_millis(500)).await;
    let restarted_at = tokio::time::Instant::now();
    let broker = broker_at(addr).await;
    let (_sub2, inbox2) = listen(addr, "sub2", "plant/#").await;
    wait_for(&inbox2, 5).await;
    let first = inbox2.lock().unwrap()[0].0;
    // well within the 16 s reconnect backoff cap
    assert!(first - restarted_at < Duration::from_secs(16));
    cancel.cancel();
    task.await.unwrap();
    assert!(stats.published() >= 10);
    broker.shutdown().await;
}
