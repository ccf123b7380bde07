//! Short fixed-width bit-strings and an MSB-first cursor over packed residues.

use std::fmt;

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};

/// Bit-packed buffer used for compressed residues, most-significant bit first.
pub type BitBuf = BitVec<u8, Msb0>;

/// A bit-string of at most 64 bits, right-aligned in `value`.
///
/// Every header field handled by the codec fits in 64 bits (the widest are
/// the IPv6 prefix and IID halves), so field values and rule IDs share this type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bits {
    value: u64,
    width: u8,
}

impl Bits {
    /// Builds a bit-string, returning `None` when `value` does not fit in `width` bits.
    pub fn new(value: u64, width: u8) -> Option<Self> {
        if width > 64 || (width < 64 && value >> width != 0) {
            return None;
        }
        Some(Self { value, width })
    }

    /// Builds a bit-string, keeping only the low `width` bits of `value`.
    pub fn truncating(value: u64, width: u8) -> Self {
        assert!(width <= 64, "bit-string wider than 64 bits");
        Self {
            value: value & mask(width),
            width,
        }
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn width(&self) -> u8 {
        self.width
    }

    pub fn is_all_ones(&self) -> bool {
        self.width > 0 && self.value == mask(self.width)
    }

    /// Appends the bits, MSB first.
    pub fn push_to(&self, buf: &mut BitBuf) {
        for i in (0..self.width).rev() {
            buf.push((self.value >> i) & 1 == 1);
        }
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.width == 0 {
            return f.write_str("(empty)");
        }
        write!(f, "{:0width$b}", self.value, width = self.width as usize)
    }
}

pub(crate) fn mask(width: u8) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

/// Reads consecutive fields out of a bit slice.
pub struct BitCursor<'a> {
    bits: &'a BitSlice<u8, Msb0>,
    pos: usize,
}

impl<'a> BitCursor<'a> {
    pub fn new(bits: &'a BitSlice<u8, Msb0>) -> Self {
        Self { bits, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bits.len() - self.pos
    }

    /// Reads `width` bits, or `None` if fewer remain.
    pub fn read(&mut self, width: u8) -> Option<Bits> {
        let width_us = usize::from(width);
        if width > 64 || self.remaining() < width_us {
            return None;
        }
        let value = self.bits[self.pos..self.pos + width_us]
            .iter()
            .fold(0u64, |acc, b| (acc << 1) | u64::from(*b));
        self.pos += width_us;
        Some(Bits { value, width })
    }

    /// Reads whole octets (not necessarily aligned in the underlying buffer).
    pub fn read_octets(&mut self, count: usize) -> Option<Vec<u8>> {
        if self.remaining() < count * 8 {
            return None;
        }
        (0..count)
            .map(|_| self.read(8).map(|b| b.value() as u8))
            .collect()
    }

    /// Skips forward to the next octet boundary.
    pub fn align(&mut self) {
        self.pos = self.pos.div_ceil(8) * 8;
        self.pos = self.pos.min(self.bits.len());
    }
}

/// Appends octets to a bit buffer at its current (possibly unaligned) position.
pub fn push_octets(buf: &mut BitBuf, octets: &[u8]) {
    for byte in octets {
        buf.extend_from_bitslice(byte.view_bits::<Msb0>());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_values_wider_than_width() {
        assert!(Bits::new(16, 4).is_none());
        assert_eq!(Bits::new(15, 4).unwrap().to_string(), "1111");
        assert!(Bits::new(u64::MAX, 64).is_some());
    }

    #[test]
    fn cursor_reads_back_pushed_fields() {
        let mut buf = BitBuf::new();
        Bits::new(0b101, 3).unwrap().push_to(&mut buf);
        Bits::new(0x1633, 16).unwrap().push_to(&mut buf);
        push_octets(&mut buf, &[0xAB]);
        let mut cur = BitCursor::new(&buf);
        assert_eq!(cur.read(3).unwrap().value(), 0b101);
        assert_eq!(cur.read(16).unwrap().value(), 0x1633);
        assert_eq!(cur.read_octets(1).unwrap(), vec![0xAB]);
        assert!(cur.read(1).is_none());
    }

    #[test]
    fn align_moves_to_octet_boundary() {
        let buf: BitBuf = bitvec![u8, Msb0; 0; 16];
        let mut cur = BitCursor::new(&buf);
        cur.read(3);
        cur.align();
        assert_eq!(cur.position(), 8);
        cur.align();
        assert_eq!(cur.position(), 8);
    }
}
