//! Internet one's-complement checksum (RFC 1071).

/// Accumulates 16-bit big-endian words across several chunks.
///
/// Chunks are treated as one contiguous byte stream, so an odd-length chunk
/// carries its trailing octet into the next one.
#[derive(Debug, Default, Clone)]
pub struct Checksum {
    sum: u32,
    pending: Option<u8>,
}

impl Checksum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_bytes(&mut self, mut data: &[u8]) {
        if let Some(hi) = self.pending.take() {
            match data.split_first() {
                Some((lo, rest)) => {
                    self.add_word(u16::from_be_bytes([hi, *lo]));
                    data = rest;
                }
                None => {
                    self.pending = Some(hi);
                    return;
                }
            }
        }
        let mut words = data.chunks_exact(2);
        for w in &mut words {
            self.add_word(u16::from_be_bytes([w[0], w[1]]));
        }
        if let [last] = words.remainder() {
            self.pending = Some(*last);
        }
    }

    fn add_word(&mut self, word: u16) {
        let (sum, carry) = self.sum.overflowing_add(u32::from(word));
        self.sum = sum + u32::from(carry);
    }

    /// Folded one's-complement sum, before complementing.
    pub fn folded_sum(&self) -> u16 {
        let mut sum = self.sum;
        if let Some(hi) = self.pending {
            sum = sum.wrapping_add(u32::from(hi) << 8);
        }
        while sum > 0xFFFF {
            sum = (sum & 0xFFFF) + (sum >> 16);
        }
        sum as u16
    }

    pub fn finish(&self) -> u16 {
        !self.folded_sum()
    }
}

/// Checksum of a contiguous buffer.
pub fn internet_checksum(data: &[u8]) -> u16 {
    let mut c = Checksum::new();
    c.add_bytes(data);
    c.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rfc1071_example() {
        // Sample bytes from RFC 1071 section 3: sum is 0xddf2.
        let data = [0x00, 0x01, 0xf2, 0x03, 0xf4, 0xf5, 0xf6, 0xf7];
        let mut c = Checksum::new();
        c.add_bytes(&data);
        assert_eq!(c.folded_sum(), 0xddf2);
        assert_eq!(c.finish(), !0xddf2);
    }

    #[test]
    fn odd_chunks_match_contiguous() {
        let data: Vec<u8> = (0u8..=200).collect();
        let mut c = Checksum::new();
        c.add_bytes(&data[..3]);
        c.add_bytes(&data[3..4]);
        c.add_bytes(&data[4..]);
        assert_eq!(c.finish(), internet_checksum(&data));
    }

    #[test]
    fn empty_input_is_all_ones() {
        assert_eq!(internet_checksum(&[]), 0xFFFF);
    }
}
