//! Sparse holding-register bank with a named field layout.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::frame::ExceptionCode;

/// Emulated PM2100 layout: float32 register pairs, high word first.
pub mod pm2100 {
    pub const CURRENT_A: u16 = 3010;
    pub const VOLTAGE_V: u16 = 3020;
    pub const POWER_KW: u16 = 3054;
    pub const POWER_FACTOR: u16 = 3110;

    pub const CURRENT: &str = "current";
    pub const VOLTAGE: &str = "voltage";
    pub const POWER: &str = "power_kw";
    pub const PF: &str = "power_factor";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    /// IEEE-754 single across two registers, big-endian register order.
    Float32,
    Uint16,
}

impl Encoding {
    pub fn width(self) -> u16 {
        match self {
            Encoding::Float32 => 2,
            Encoding::Uint16 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldLayout {
    pub name: String,
    pub start: u16,
    pub encoding: Encoding,
}

impl FieldLayout {
    pub fn new(name: impl Into<String>, start: u16, encoding: Encoding) -> Self {
        FieldLayout { name: name.into(), start, encoding }
    }

    fn end(&self) -> u32 {
        u32::from(self.start) + u32::from(self.encoding.width())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("fields {0:?} and {1:?} overlap")]
    Overlap(String, String),
    #[error("float32 field {0:?} must start on an even register")]
    Misaligned(String),
    #[error("field {0:?} runs past register 65535")]
    OutOfBounds(String),
    #[error("duplicate field name {0:?}")]
    DuplicateName(String),
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("field {0:?} has a different encoding")]
    WrongEncoding(String),
}

/// The value read back was a NaN or infinity bit pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("register pair 0x{hi:04X} 0x{lo:04X} is not a finite number")]
pub struct NotANumber {
    pub hi: u16,
    pub lo: u16,
}

pub fn decode_float32(hi: u16, lo: u16) -> Result<f32, NotANumber> {
    let x = f32::from_bits((u32::from(hi) << 16) | u32::from(lo));
    if x.is_finite() {
        Ok(x)
    } else {
        Err(NotANumber { hi, lo })
    }
}

pub fn encode_float32(x: f32) -> [u16; 2] {
    let bits = x.to_bits();
    [(bits >> 16) as u16, bits as u16]
}

#[derive(Debug, Clone, Default)]
pub struct RegisterMap {
    bank: BTreeMap<u16, u16>,
    fields: Vec<FieldLayout>,
}

impl RegisterMap {
    /// Builds a bank whose declared fields are populated with zeros.
    pub fn new(fields: Vec<FieldLayout>) -> Result<Self, LayoutError> {
        let mut sorted: Vec<&FieldLayout> = fields.iter().collect();
        sorted.sort_by_key(|f| f.start);
        for f in &sorted {
            if f.encoding == Encoding::Float32 && f.start % 2 != 0 {
                return Err(LayoutError::Misaligned(f.name.clone()));
            }
            if f.end() > 0x1_0000 {
                return Err(LayoutError::OutOfBounds(f.name.clone()));
            }
        }
        for pair in sorted.windows(2) {
            if pair[0].end() > u32::from(pair[1].start) {
                return Err(LayoutError::Overlap(pair[0].name.clone(), pair[1].name.clone()));
            }
        }
        for (i, f) in fields.iter().enumerate() {
            if fields[..i].iter().any(|g| g.name == f.name) {
                return Err(LayoutError::DuplicateName(f.name.clone()));
            }
        }
        let mut bank = BTreeMap::new();
        for f in &fields {
            for a in 0..f.encoding.width() {
                bank.insert(f.start + a, 0);
            }
        }
        Ok(RegisterMap { bank, fields })
    }

    /// The emulated industrial meter's four float32 quantities.
    pub fn pm2100() -> Self {
        use pm2100::*;
        RegisterMap::new(vec![
            FieldLayout::new(CURRENT, CURRENT_A, Encoding::Float32),
            FieldLayout::new(VOLTAGE, VOLTAGE_V, Encoding::Float32),
            FieldLayout::new(POWER, POWER_KW, Encoding::Float32),
            FieldLayout::new(PF, POWER_FACTOR, Encoding::Float32),
        ])
        .expect("static layout is valid")
    }

    pub fn fields(&self) -> &[FieldLayout] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Result<&FieldLayout, LayoutError> {
        self.fields.iter().find(|f| f.name == name).ok_or_else(|| LayoutError::UnknownField(name.to_owned()))
    }

    fn typed(&self, name: &str, encoding: Encoding) -> Result<u16, LayoutError> {
        let f = self.field(name)?;
        if f.encoding != encoding {
            return Err(LayoutError::WrongEncoding(name.to_owned()));
        }
        Ok(f.start)
    }

    pub fn set_float(&mut self, name: &str, value: f32) -> Result<(), LayoutError> {
        let start = self.typed(name, Encoding::Float32)?;
        let [hi, lo] = encode_float32(value);
        self.bank.insert(start, hi);
        self.bank.insert(start + 1, lo);
        Ok(())
    }

    pub fn get_float(&self, name: &str) -> Result<f32, LayoutError> {
        let start = self.typed(name, Encoding::Float32)?;
        Ok(f32::from_bits((u32::from(self.bank[&start]) << 16) | u32::from(self.bank[&(start + 1)])))
    }

    pub fn set_u16(&mut self, name: &str, value: u16) -> Result<(), LayoutError> {
        let start = self.typed(name, Encoding::Uint16)?;
        self.bank.insert(start, value);
        Ok(())
    }

    pub fn get_u16(&self, name: &str) -> Result<u16, LayoutError> {
        let start = self.typed(name, Encoding::Uint16)?;
        Ok(self.bank[&start])
    }

    /// Writes one raw register, populating it if necessary.
    pub fn set_register(&mut self, address: u16, value: u16) {
        self.bank.insert(address, value);
    }

    /// Reads `count` consecutive registers; any unpopulated address in the
    /// range is an illegal data address.
    pub fn read_holding(&self, start: u16, count: u16) -> Result<Vec<u16>, ExceptionCode> {
        (0..count)
            .map(|i| {
                start
                    .checked_add(i)
                    .and_then(|a| self.bank.get(&a).copied())
                    .ok_or(ExceptionCode::IllegalDataAddress)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn float_vectors() {
        assert_eq!(decode_float32(0x3F80, 0x0000), Ok(1.0));
        assert_eq!(decode_float32(0x0000, 0x0000), Ok(0.0));
        // sign 0, biased exponent 132 (2^5), mantissa 0x34851F / 2^23 = 0.41031...
        let hand = (1.0 + f64::from(0x34851Fu32) / f64::from(1u32 << 23)) * 32.0;
        assert!((hand - 45.13).abs() < 1e-4);
        let x = decode_float32(0x4234, 0x851F).unwrap();
        assert!((f64::from(x) - 45.13).abs() < 1e-4);
        assert!(decode_float32(0x7FC0, 0x0000).is_err());
        assert!(decode_float32(0x7F80, 0x0000).is_err());
        assert!(decode_float32(0xFF80, 0x0000).is_err());
    }

    #[test]
    fn layout_validation() {
        let overlap = RegisterMap::new(vec![
            FieldLayout::new("a", 10, Encoding::Float32),
            FieldLayout::new("b", 11, Encoding::Uint16),
        ]);
        assert_eq!(overlap.unwrap_err(), LayoutError::Overlap("a".into(), "b".into()));
        let odd = RegisterMap::new(vec![FieldLayout::new("a", 11, Encoding::Float32)]);
        assert_eq!(odd.unwrap_err(), LayoutError::Misaligned("a".into()));
        let edge = RegisterMap::new(vec![FieldLayout::new("a", 65534, Encoding::Float32)]);
        assert!(edge.is_ok());
    }

    #[test]
    fn pm2100_reads() {
        let mut m = RegisterMap::pm2100();
        m.set_float(pm2100::POWER, 0.95).unwrap();
        let regs = m.read_holding(pm2100::POWER_KW, 2).unwrap();
        let x = decode_float32(regs[0], regs[1]).unwrap();
        assert!((x - 0.95).abs() < 1e-6);
        assert_eq!(m.read_holding(0x9999, 2), Err(ExceptionCode::IllegalDataAddress));
        // straddling the end of a field is also illegal
        assert_eq!(m.read_holding(pm2100::POWER_KW, 3), Err(ExceptionCode::IllegalDataAddress));
        assert_eq!(m.read_holding(0xFFFF, 2), Err(ExceptionCode::IllegalDataAddress));
        assert!(matches!(m.set_u16(pm2100::POWER, 1), Err(LayoutError::WrongEncoding(_))));
    }

    proptest! {
        #[test]
        fn float_round_trip(bits in any::<u32>()) {
            let x = f32::from_bits(bits);
            prop_assume!(x.is_finite());
            let [hi, lo] = encode_float32(x);
            prop_assert_eq!(decode_float32(hi, lo).unwrap().to_bits(), bits);
        }
    }
}
