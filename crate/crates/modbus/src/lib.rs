//! Modbus RTU over a byte stream: CRC-16, read-holding-registers frames,
//! an emulated register bank and a polling client.
//!
//! Only function 0x03 is implemented. RTU inter-frame silence is replaced
//! by length-aware parsing, so the link can run over TCP or an in-process
//! duplex pipe.

pub mod crc;
pub mod frame;
pub mod link;
pub mod registers;

pub use crc::crc16;
pub use frame::{build_read_request, parse_request, parse_response, ExceptionCode, FrameError, ReadRequest};
pub use link::{ModbusClient, ModbusServer, PollError};
pub use registers::{decode_float32, encode_float32, Encoding, FieldLayout, LayoutError, RegisterMap};
