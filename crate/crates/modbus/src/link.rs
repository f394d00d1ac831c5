//! Stream transport for RTU frames: the emulator-side server and the
//! polling client. One request is outstanding per link at a time.

use std::io;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use log::{debug, warn};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;
use tokio::time::timeout;
use tokio_util::sync::CancellationToken;

use crate::frame::{
    build_exception, build_read_request, build_response, parse_request, parse_response, response_len, ExceptionCode,
    FrameError, READ_HOLDING_REGISTERS, REQUEST_LEN,
};
use crate::registers::{decode_float32, NotANumber, RegisterMap};

pub type SharedMap = Arc<RwLock<RegisterMap>>;

/// Answers one request frame. `None` is RTU silence: corrupt CRC, a
/// truncated frame or a request addressed to another unit.
pub fn serve_request(map: &RegisterMap, unit: u8, request: &[u8]) -> Option<Vec<u8>> {
    match parse_request(request) {
        Ok(req) if req.unit != unit => None,
        Ok(req) => Some(match map.read_holding(req.start, req.count) {
            Ok(regs) => build_response(unit, &regs),
            Err(code) => build_exception(unit, READ_HOLDING_REGISTERS, code),
        }),
        Err(FrameError::UnsupportedFunction(f)) if request[0] == unit => {
            Some(build_exception(unit, f, ExceptionCode::IllegalFunction))
        }
        Err(FrameError::CountOutOfRange(_)) if request[0] == unit => {
            Some(build_exception(unit, READ_HOLDING_REGISTERS, ExceptionCode::IllegalDataValue))
        }
        Err(_) => None,
    }
}

/// Serves requests on one stream until it closes.
pub async fn serve_stream<S>(mut stream: S, unit: u8, map: SharedMap) -> io::Result<()>
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    let mut frame = [0u8; REQUEST_LEN];
    loop {
        match stream.read_exact(&mut frame).await {
            Ok(_) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        }
        let reply = {
            let map = map.read().unwrap_or_else(|e| e.into_inner());
            serve_request(&map, unit, &frame)
        };
        match reply {
            Some(bytes) => stream.write_all(&bytes).await?,
            None => debug!("silent - unit={unit} dropped frame {frame:02X?}"),
        }
    }
}

/// TCP listener exposing a register bank as an RTU unit.
pub struct ModbusServer {
    local_addr: SocketAddr,
    cancel: CancellationToken,
    task: Option<JoinHandle<()>>,
}

impl ModbusServer {
    pub async fn bind(addr: SocketAddr, unit: u8, map: SharedMap) -> io::Result<ModbusServer> {
        let listener = TcpListener::bind(addr).await?;
        let local_addr = listener.local_addr()?;
        let cancel = CancellationToken::new();
        let task = tokio::spawn({
            let cancel = cancel.clone();
            async move {
                loop {
                    let stream = tokio::select! {
                        _ = cancel.cancelled() => return,
                        res = listener.accept() => match res {
                            Ok((s, _)) => s,
                            Err(e) => {
                                warn!("accept_failed - {e}");
                                continue;
                            }
                        },
                    };
                    let map = map.clone();
                    let cancel = cancel.clone();
                    tokio::spawn(async move {
                        tokio::select! {
                            _ = cancel.cancelled() => {}
                            res = serve_stream(stream, unit, map) => {
                                if let Err(e) = res {
                                    debug!("link_closed - {e}");
                                }
                            }
                        }
                    });
                }
            }
        });
        Ok(ModbusServer { local_addr, cancel, task: Some(task) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Stops accepting and drops every open link.
    pub async fn shutdown(mut self) {
        self.cancel.cancel();
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for ModbusServer {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PollError {
    #[error("no response within the timeout")]
    Timeout,
    #[error("device answered with exception {0}")]
    Exception(ExceptionCode),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    NotANumber(#[from] NotANumber),
    #[error("i/o: {0}")]
    Io(String),
    #[error("poll failed after {attempts} attempts: {last}")]
    PollFailed { attempts: u32, last: Box<PollError> },
}

trait Duplex: AsyncRead + AsyncWrite + Unpin + Send {}
impl<T: AsyncRead + AsyncWrite + Unpin + Send> Duplex for T {}

enum Target {
    Tcp(SocketAddr),
    Fixed,
}

/// Polling master for a single link.
pub struct ModbusClient {
    target: Target,
    stream: Option<Box<dyn Duplex>>,
    pub timeout: Duration,
    pub retries: u32,
}

impl ModbusClient {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(200);
    pub const DEFAULT_RETRIES: u32 = 2;

    /// Client that (re)connects to `addr` on demand.
    pub fn tcp(addr: SocketAddr) -> Self {
        ModbusClient { target: Target::Tcp(addr), stream: None, timeout: Self::DEFAULT_TIMEOUT, retries: Self::DEFAULT_RETRIES }
    }

    /// Client over an already-open stream, e.g. an in-process duplex pipe.
    pub fn over<S>(stream: S) -> Self
    where
        S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
    {
        ModbusClient {
            target: Target::Fixed,
            stream: Some(Box::new(stream)),
            timeout: Self::DEFAULT_TIMEOUT,
            retries: Self::DEFAULT_RETRIES,
        }
    }

    async fn link(&mut self) -> Result<&mut Box<dyn Duplex>, PollError> {
        if self.stream.is_none() {
            match self.target {
                Target::Tcp(addr) => {
                    let s = timeout(self.timeout, TcpStream::connect(addr))
                        .await
                        .map_err(|_| PollError::Timeout)?
                        .map_err(|e| PollError::Io(e.to_string()))?;
                    let _ = s.set_nodelay(true);
                    self.stream = Some(Box::new(s));
                }
                Target::Fixed => return Err(PollError::Io("link closed".into())),
            }
        }
        Ok(self.stream.as_mut().expect("stream set above"))
    }

    /// One request/response exchange, no retries. Returns the raw frame.
    pub async fn transact_raw(&mut self, request: &[u8]) -> Result<Vec<u8>, PollError> {
        let wait = self.timeout;
        let link = self.link().await?;
        let res = timeout(wait, async {
            link.write_all(request).await?;
            let mut frame = vec![0u8; 3];
            link.read_exact(&mut frame).await?;
            let total = response_len(&frame).expect("three header bytes present");
            frame.resize(total, 0);
            link.read_exact(&mut frame[3..]).await?;
            Ok::<_, io::Error>(frame)
        })
        .await;
        match res {
            Ok(Ok(frame)) => Ok(frame),
            Ok(Err(e)) => {
                self.stream = None;
                Err(PollError::Io(e.to_string()))
            }
            Err(_) => {
                // A late reply would desynchronise framing on a reused link.
                if matches!(self.target, Target::Tcp(_)) {
                    self.stream = None;
                }
                Err(PollError::Timeout)
            }
        }
    }

    /// Reads holding registers with timeout and retries. Exception
    /// responses are returned at once; they are answers, not faults.
    pub async fn read_registers(&mut self, unit: u8, start: u16, count: u16) -> Result<Vec<u16>, PollError> {
        let request = build_read_request(unit, start, count)?;
        let attempts = self.retries + 1;
        let mut last = PollError::Timeout;
        for attempt in 1..=attempts {
            let outcome = match self.transact_raw(&request).await {
                Ok(frame) => parse_response(&frame).map_err(PollError::from),
                Err(e) => Err(e),
            };
            match outcome {
                Ok(regs) if regs.len() == usize::from(count) => return Ok(regs),
                Ok(regs) => {
                    last = PollError::Frame(FrameError::ByteCountMismatch { declared: usize::from(count) * 2, actual: regs.len() * 2 })
                }
                Err(PollError::Frame(FrameError::ExceptionResponse { code })) => return Err(PollError::Exception(code)),
                Err(e) => last = e,
            }
            debug!("poll_retry - unit={unit} start={start} attempt={attempt} {last}");
        }
        Err(PollError::PollFailed { attempts, last: Box::new(last) })
    }

    pub async fn read_float32(&mut self, unit: u8, start: u16) -> Result<f32, PollError> {
        let regs = self.read_registers(unit, start, 2).await?;
        Ok(decode_float32(regs[0], regs[1])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crc::crc16;
    use crate::registers::pm2100;

    fn shared(map: RegisterMap) -> SharedMap {
        Arc::new(RwLock::new(map))
    }

    #[test]
    fn serve_request_cases() {
        let mut map = RegisterMap::pm2100();
        map.set_float(pm2100::POWER, 0.95).unwrap();
        let ok = serve_request(&map, 1, &build_read_request(1, pm2100::POWER_KW, 2).unwrap()).unwrap();
        let regs = parse_response(&ok).unwrap();
        assert!((decode_float32(regs[0], regs[1]).unwrap() - 0.95).abs() < 1e-6);

        let bad_addr = serve_request(&map, 1, &build_read_request(1, 0x9999, 2).unwrap()).unwrap();
        assert_eq!(
            parse_response(&bad_addr),
            Err(FrameError::ExceptionResponse { code: ExceptionCode::IllegalDataAddress })
        );

        let mut corrupt = build_read_request(1, pm2100::POWER_KW, 2).unwrap();
        corrupt[7] ^= 0x01;
        assert_eq!(serve_request(&map, 1, &corrupt), None);
        assert_eq!(serve_request(&map, 2, &build_read_request(1, 0, 1).unwrap()), None);

        let mut write = vec![1, 0x06, 0, 0, 0, 1];
        write.extend_from_slice(&crc16(&write).to_le_bytes());
        let reply = serve_request(&map, 1, &write).unwrap();
        assert_eq!(parse_response(&reply), Err(FrameError::ExceptionResponse { code: ExceptionCode::IllegalFunction }));
    }

    #[tokio::test]
    async fn in_process_link_round_trip() {
        let (a, b) = tokio::io::duplex(256);
        let mut map = RegisterMap::pm2100();
        map.set_float(pm2100::VOLTAGE, 230.5).unwrap();
        tokio::spawn(serve_stream(b, 1, shared(map)));
        let mut client = ModbusClient::over(a);
        assert_eq!(client.read_float32(1, pm2100::VOLTAGE_V).await.unwrap(), 230.5);
        assert_eq!(client.read_float32(1, 0x9999).await, Err(PollError::Exception(ExceptionCode::IllegalDataAddress)));
    }

    #[tokio::test]
    async fn corrupt_request_times_out() {
        let (a, b) = tokio::io::duplex(256);
        tokio::spawn(serve_stream(b, 1, shared(RegisterMap::pm2100())));
        let mut client = ModbusClient::over(a);
        let mut req = build_read_request(1, pm2100::POWER_KW, 2).unwrap();
        req[6] ^= 0xFF;
        let started = tokio::time::Instant::now();
        assert_eq!(client.transact_raw(&req).await, Err(PollError::Timeout));
        assert!(started.elapsed() >= Duration::from_millis(200));
        // link still usable afterwards
        assert!(client.read_float32(1, pm2100::POWER_KW).await.is_ok());
    }
}
