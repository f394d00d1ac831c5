//! RTU frames for function 0x03 (read holding registers).
//!
//! Request:   unit | 0x03 | start hi | start lo | count hi | count lo | crc lo | crc hi
//! Response:  unit | 0x03 | byte count | data... | crc lo | crc hi
//! Exception: unit | 0x83 | code | crc lo | crc hi

use std::fmt;

use thiserror::Error;

use crate::crc::{append_crc, check_crc};

pub const READ_HOLDING_REGISTERS: u8 = 0x03;
pub const EXCEPTION_BIT: u8 = 0x80;
pub const MAX_READ_COUNT: u16 = 125;
pub const REQUEST_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExceptionCode {
    IllegalFunction,
    IllegalDataAddress,
    IllegalDataValue,
    ServerDeviceFailure,
    Other(u8),
}

impl ExceptionCode {
    pub fn code(self) -> u8 {
        match self {
            ExceptionCode::IllegalFunction => 1,
            ExceptionCode::IllegalDataAddress => 2,
            ExceptionCode::IllegalDataValue => 3,
            ExceptionCode::ServerDeviceFailure => 4,
            ExceptionCode::Other(c) => c,
        }
    }
}

impl From<u8> for ExceptionCode {
    fn from(c: u8) -> Self {
        match c {
            1 => ExceptionCode::IllegalFunction,
            2 => ExceptionCode::IllegalDataAddress,
            3 => ExceptionCode::IllegalDataValue,
            4 => ExceptionCode::ServerDeviceFailure,
            c => ExceptionCode::Other(c),
        }
    }
}

impl fmt::Display for ExceptionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({self:?})", self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("register count {0} outside 1..=125")]
    CountOutOfRange(u16),
    #[error("unit id {0} outside 1..=247")]
    InvalidUnit(u8),
    #[error("CRC mismatch")]
    CrcMismatch,
    #[error("truncated frame")]
    TruncatedFrame,
    #[error("byte count {declared} does not match {actual} data bytes")]
    ByteCountMismatch { declared: usize, actual: usize },
    #[error("unsupported function 0x{0:02X}")]
    UnsupportedFunction(u8),
    #[error("exception response: code {code}")]
    ExceptionResponse { code: ExceptionCode },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadRequest {
    pub unit: u8,
    pub start: u16,
    pub count: u16,
}

pub fn build_read_request(unit: u8, start: u16, count: u16) -> Result<Vec<u8>, FrameError> {
    if !(1..=247).contains(&unit) {
        return Err(FrameError::InvalidUnit(unit));
    }
    if !(1..=MAX_READ_COUNT).contains(&count) {
        return Err(FrameError::CountOutOfRange(count));
    }
    let mut frame = Vec::with_capacity(REQUEST_LEN);
    frame.push(unit);
    frame.push(READ_HOLDING_REGISTERS);
    frame.extend_from_slice(&start.to_be_bytes());
    frame.extend_from_slice(&count.to_be_bytes());
    append_crc(&mut frame);
    Ok(frame)
}

/// Server-side parse of a request frame.
pub fn parse_request(bytes: &[u8]) -> Result<ReadRequest, FrameError> {
    if bytes.len() < REQUEST_LEN {
        return Err(FrameError::TruncatedFrame);
    }
    if !check_crc(bytes) {
        return Err(FrameError::CrcMismatch);
    }
    if bytes[1] != READ_HOLDING_REGISTERS {
        return Err(FrameError::UnsupportedFunction(bytes[1]));
    }
    let count = u16::from_be_bytes([bytes[4], bytes[5]]);
    if !(1..=MAX_READ_COUNT).contains(&count) {
        return Err(FrameError::CountOutOfRange(count));
    }
    Ok(ReadRequest { unit: bytes[0], start: u16::from_be_bytes([bytes[2], bytes[3]]), count })
}

pub fn build_response(unit: u8, registers: &[u16]) -> Vec<u8> {
    let mut frame = Vec::with_capacity(5 + registers.len() * 2);
    frame.push(unit);
    frame.push(READ_HOLDING_REGISTERS);
    frame.push((registers.len() * 2) as u8);
    for r in registers {
        frame.extend_from_slice(&r.to_be_bytes());
    }
    append_crc(&mut frame);
    frame
}

pub fn build_exception(unit: u8, function: u8, code: ExceptionCode) -> Vec<u8> {
    let mut frame = vec![unit, function | EXCEPTION_BIT, code.code()];
    append_crc(&mut frame);
    frame
}

/// Total frame length implied by a response prefix, once enough of the
/// header has arrived to know it.
pub fn response_len(prefix: &[u8]) -> Option<usize> {
    let function = *prefix.get(1)?;
    if function & EXCEPTION_BIT != 0 {
        return Some(5);
    }
    Some(3 + usize::from(*prefix.get(2)?) + 2)
}

/// Verifies CRC and byte count and returns the register values.
pub fn parse_response(bytes: &[u8]) -> Result<Vec<u16>, FrameError> {
    let len = response_len(bytes).ok_or(FrameError::TruncatedFrame)?;
    if bytes.len() < len {
        return Err(FrameError::TruncatedFrame);
    }
    let frame = &bytes[..len];
    if !check_crc(frame) {
        return Err(FrameError::CrcMismatch);
    }
    let function = frame[1];
    if function & EXCEPTION_BIT != 0 {
        return Err(FrameError::ExceptionResponse { code: ExceptionCode::from(frame[2]) });
    }
    if function != READ_HOLDING_REGISTERS {
        return Err(FrameError::UnsupportedFunction(function));
    }
    let data = &frame[3..len - 2];
    let declared = usize::from(frame[2]);
    if declared % 2 != 0 || data.len() != declared {
        return Err(FrameError::ByteCountMismatch { declared, actual: data.len() });
    }
    Ok(data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect())
}
