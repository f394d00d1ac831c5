//! CRC-16/MODBUS: reflected polynomial 0xA001, init 0xFFFF, no final xor.
//! Transmitted low byte first.

const TABLE: [u16; 256] = build_table();

const fn build_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u16;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xA001 } else { crc >> 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

pub fn crc16(bytes: &[u8]) -> u16 {
    bytes.iter().fold(0xFFFF, |crc, &b| (crc >> 8) ^ TABLE[usize::from((crc ^ u16::from(b)) as u8)])
}

/// Appends the CRC of `frame` in wire order.
pub fn append_crc(frame: &mut Vec<u8>) {
    let crc = crc16(frame);
    frame.extend_from_slice(&crc.to_le_bytes());
}

/// True when the last two bytes are the CRC of the rest.
pub fn check_crc(frame: &[u8]) -> bool {
    frame.len() >= 2 && crc16(frame) == 0
}
