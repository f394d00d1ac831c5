use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use plantpulse_modbus::registers::pm2100;
use plantpulse_modbus::{ModbusClient, ModbusServer, PollError, RegisterMap};
use rand::Rng;

fn loopback() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

#[tokio::test]
async fn polls_see_bank_at_poll_time() {
    let map = Arc::new(RwLock::new(RegisterMap::pm2100()));
    let server = ModbusServer::bind(loopback(), 1, map.clone()).await.unwrap();
    let mut client = ModbusClient::tcp(server.local_addr());
    let mut rng = rand::rng();
    for _ in 0..200 {
        let value: f32 = rng.random_range(0.0..5.0);
        map.write().unwrap().set_float(pm2100::POWER, value).unwrap();
        let read = client.read_float32(1, pm2100::POWER_KW).await.unwrap();
        assert_eq!(read.to_bits(), value.to_bits());
    }
    server.shutdown().await;
}

#[tokio::test]
async fn offline_emulator_reports_poll_failed() {
    let map = Arc::new(RwLock::new(RegisterMap::pm2100()));
    let server = ModbusServer::bind(loopback(), 1, map).await.unwrap();
    let addr = server.local_addr();
    server.shutdown().await;
    let mut client = ModbusClient::tcp(addr);
    match client.read_float32(1, pm2100::POWER_KW).await {
        Err(PollError::PollFailed { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected PollFailed, got {other:?}"),
    }
}

#[tokio::test]
async fn wrong_unit_is_silent_and_retried() {
    let map = Arc::new(RwLock::new(RegisterMap::pm2100()));
    let server = ModbusServer::bind(loopback(), 1, map).await.unwrap();
    let mut client = ModbusClient::tcp(server.local_addr());
    let started = tokio::time::Instant::now();
    let err = client.read_registers(9, pm2100::POWER_KW, 2).await.unwrap_err();
    assert!(matches!(err, PollError::PollFailed { attempts: 3, ref last } if **last == PollError::Timeout), "{err:?}");
    assert!(started.elapsed() >= std::time::Duration::from_millis(600));
}
