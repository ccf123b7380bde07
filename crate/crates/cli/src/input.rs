//! Packet files: raw binary (one packet) or hex text (one packet per line).

use std::io::Read;
use std::path::Path;

/// Reads `path`, or standard input for `-`.
pub fn read_source(path: &Path) -> std::io::Result<Vec<u8>> {
    if path.as_os_str() == "-" {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf)?;
        Ok(buf)
    } else {
        std::fs::read(path)
    }
}

fn is_hex_line(line: &str) -> bool {
    let line = line.trim();
    line.is_empty()
        || line.starts_with('#')
        || line
            .chars()
            .all(|c| c.is_ascii_hexdigit() || c == ' ' || c == ':' || c == '\t')
}

/// Splits input into packets, detecting the format from its content.
pub fn parse_packets(bytes: &[u8]) -> Result<Vec<Vec<u8>>, String> {
    let text = match std::str::from_utf8(bytes) {
        Ok(t) if t.lines().all(is_hex_line) => t,
        _ => return Ok(vec![bytes.to_vec()]),
    };
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let digits: String = l.chars().filter(char::is_ascii_hexdigit).collect();
            hex::decode(&digits).map_err(|e| format!("line {}: {e}", i + 1))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_lines_and_comments() {
        let text = b"# two packets\n6000 0000\n\nab:cd\n";
        assert_eq!(
            parse_packets(text).unwrap(),
            vec![vec![0x60, 0, 0, 0], vec![0xab, 0xcd]]
        );
    }

    #[test]
    fn binary_is_one_packet() {
        let raw = [0x60, 0x00, 0x00, 0x00, 0x00, 0x08, 0x11, 0x40];
        assert_eq!(parse_packets(&raw).unwrap(), vec![raw.to_vec()]);
    }

    #[test]
    fn odd_digit_count_is_an_error() {
        assert!(parse_packets(b"abc\n").is_err());
    }
}
