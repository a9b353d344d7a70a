//! Triple-redundant, CRC-guarded container for policy files.
//!
//! A stored sandbox policy that silently loses a restriction to a flipped bit
//! is the worst failure mode for this artifact, so policies at rest are
//! wrapped in three identical CRC-32-guarded copies. Decoding returns the
//! first copy whose CRC verifies; when every copy is damaged, a byte-wise
//! majority vote across the three payloads is attempted and accepted only if
//! its CRC matches one of the stored checksums. Decode never returns partial
//! or reconstructed-but-unverified bytes: the result is the exact payload or
//! an error.
//!
//! Layout: 4-byte magic `SJC1`, then three records of
//! (4-byte big-endian payload length, payload, 4-byte big-endian CRC-32).
//! CRC-32 uses the reflected polynomial 0xEDB88320 with initial value and
//! final xor 0xFFFFFFFF.

/// Container magic.
pub const MAGIC: [u8; 4] = *b"SJC1";

/// Number of redundant copies.
pub const COPIES: usize = 3;

/// Fixed per-record overhead: length field plus CRC field.
const RECORD_OVERHEAD: usize = 8;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ResilientError {
    #[error("container does not start with the SJC1 magic")]
    BadMagic,
    #[error("container is truncated or structurally inconsistent")]
    TruncatedContainer,
    #[error("no copy verifies and majority reconstruction failed")]
    Unrecoverable,
}

/// How a payload was recovered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryPath {
    /// Copy `index` verified directly.
    Clean(usize),
    /// All copies were damaged; the byte-wise majority verified.
    Majority,
}

/// A successfully decoded payload plus the recovery evidence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovered {
    pub payload: Vec<u8>,
    pub path: RecoveryPath,
}

static CRC_TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();

fn crc_table() -> &'static [u32; 256] {
    CRC_TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, entry) in table.iter_mut().enumerate() {
            let mut crc = i as u32;
            for _ in 0..8 {
                crc = if crc & 1 != 0 {
                    (crc >> 1) ^ 0xEDB8_8320
                } else {
                    crc >> 1
                };
            }
            *entry = crc;
        }
        table
    })
}

/// CRC-32 (reflected 0xEDB88320, init 0xFFFFFFFF, final xor 0xFFFFFFFF).
pub fn crc32(data: &[u8]) -> u32 {
    let table = crc_table();
    let mut crc = 0xFFFF_FFFFu32;
    for &byte in data {
        crc = (crc >> 8) ^ table[((crc ^ byte as u32) & 0xFF) as usize];
    }
    crc ^ 0xFFFF_FFFF
}

/// Wrap a payload in the triple-redundant container.
///
/// Output length is exactly `4 + 3 * (8 + payload.len())`. The payload must
/// be shorter than 2^32 bytes.
pub fn encode_resilient(payload: &[u8]) -> Vec<u8> {
    assert!(payload.len() < u32::MAX as usize, "payload too large");
    let crc = crc32(payload);
    let len = payload.len() as u32;
    let mut out = Vec::with_capacity(4 + COPIES * (RECORD_OVERHEAD + payload.len()));
    out.extend_from_slice(&MAGIC);
    for _ in 0..COPIES {
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(payload);
        out.extend_from_slice(&crc.to_be_bytes());
    }
    out
}

struct RawCopy<'a> {
    payload: &'a [u8],
    stored_crc: u32,
}

/// Decode a container, recovering from corruption where possible.
///
/// Accepts arbitrary bytes. Succeeds iff at least one copy's CRC verifies, or
/// the byte-wise majority of the three payloads verifies against any stored
/// CRC. Corruption is assumed to be in-place (bit flips do not change the
/// container size), so record positions are derived from the container length
/// rather than trusting any single stored length field.
pub fn decode_resilient(container: &[u8]) -> Result<Recovered, ResilientError> {
    if container.len() < 4 {
        return Err(ResilientError::TruncatedContainer);
    }
    if container[..4] != MAGIC {
        return Err(ResilientError::BadMagic);
    }
    let body = &container[4..];
    if body.len() < COPIES * RECORD_OVERHEAD {
        return Err(ResilientError::TruncatedContainer);
    }
    if (body.len() - COPIES * RECORD_OVERHEAD) % COPIES != 0 {
        return Err(ResilientError::TruncatedContainer);
    }
    let payload_len = (body.len() - COPIES * RECORD_OVERHEAD) / COPIES;
    let record_len = RECORD_OVERHEAD + payload_len;

    let mut copies: Vec<RawCopy> = Vec::with_capacity(COPIES);
    for i in 0..COPIES {
        let rec = &body[i * record_len..(i + 1) * record_len];
        copies.push(RawCopy {
            payload: &rec[4..4 + payload_len],
            stored_crc: u32::from_be_bytes(rec[4 + payload_len..].try_into().unwrap()),
        });
    }

    for (i, copy) in copies.iter().enumerate() {
        if crc32(copy.payload) == copy.stored_crc {
            return Ok(Recovered {
                payload: copy.payload.to_vec(),
                path: RecoveryPath::Clean(i),
            });
        }
    }

    // Majority reconstruction over equal-length payloads.
    let mut majority = Vec::with_capacity(payload_len);
    for i in 0..payload_len {
        let (a, b, c) = (copies[0].payload[i], copies[1].payload[i], copies[2].payload[i]);
        let byte = if a == b || a == c {
            a
        } else if b == c {
            b
        } else {
            return Err(ResilientError::Unrecoverable);
        };
        majority.push(byte);
    }
    let crc = crc32(&majority);
    if copies.iter().any(|c| c.stored_crc == crc) {
        Ok(Recovered {
            payload: majority,
            path: RecoveryPath::Majority,
        })
    } else {
        Err(ResilientError::Unrecoverable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent oracle: bit-at-a-time CRC straight from the polynomial
    // definition, sharing nothing with the table-driven implementation.
    fn crc32_bitwise(data: &[u8]) -> u32 {
        let mut crc = 0xFFFF_FFFFu32;
        for &byte in data {
            crc ^= byte as u32;
            for _ in 0..8 {
                let lsb = crc & 1;
                crc >>= 1;
                if lsb != 0 {
                    crc ^= 0xEDB8_8320;
                }
            }
        }
        crc ^ 0xFFFF_FFFF
    }

    #[test]
    fn crc_known_values() {
        assert_eq!(crc32(b""), 0x0000_0000);
        assert_eq!(crc32(b"123456789"), crc32_bitwise(b"123456789"));
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn crc_matches_bitwise_oracle() {
        let mut data = Vec::new();
        for i in 0..512u32 {
            data.push((i.wrapping_mul(2654435761) >> 13) as u8);
            assert_eq!(crc32(&data), crc32_bitwise(&data), "len {}", data.len());
        }
    }

    #[test]
    fn empty_payload_layout() {
        let c = encode_resilient(b"");
        assert_eq!(c.len(), 28);
        assert_eq!(&c[..4], b"SJC1");
        for i in 0..3 {
            let rec = &c[4 + i * 8..4 + (i + 1) * 8];
            assert_eq!(rec, &[0, 0, 0, 0, 0, 0, 0, 0]);
        }
    }

    #[test]
    fn check_value_payload() {
        let c = encode_resilient(b"123456789");
        assert_eq!(c.len(), 4 + 3 * (8 + 9));
        for i in 0..3 {
            let rec_start = 4 + i * 17;
            let crc = &c[rec_start + 13..rec_start + 17];
            assert_eq!(crc, &0xCBF4_3926u32.to_be_bytes());
        }
    }

    #[test]
    fn round_trip() {
        for payload in [&b""[..], b"x", b"sandbox policy bytes", &[0u8; 300]] {
            let got = decode_resilient(&encode_resilient(payload)).unwrap();
            assert_eq!(got.payload, payload);
            assert_eq!(got.path, RecoveryPath::Clean(0));
        }
    }

    #[test]
    fn single_copy_destroyed() {
        let payload = b"the quick brown fox";
        let mut c = encode_resilient(payload);
        let record_len = 8 + payload.len();
        // Trash all of copy 0, length field and CRC included.
        for b in &mut c[4..4 + record_len] {
            *b ^= 0xA5;
        }
        let got = decode_resilient(&c).unwrap();
        assert_eq!(got.payload, payload);
        assert_eq!(got.path, RecoveryPath::Clean(1));
    }

    #[test]
    fn one_bit_per_copy_distinct_offsets() {
        let payload = b"redundancy beats radiation";
        let record_len = 8 + payload.len();
        let mut c = encode_resilient(payload);
        // Flip one payload bit in each copy at three different offsets.
        for (i, offset) in [(0usize, 0usize), (1, 5), (2, 11)] {
            c[4 + i * record_len + 4 + offset] ^= 1 << (i + 1);
        }
        let got = decode_resilient(&c).unwrap();
        assert_eq!(got.payload, payload);
        assert_eq!(got.path, RecoveryPath::Majority);
    }

    #[test]
    fn all_zero_container_is_bad_magic() {
        assert_eq!(
            decode_resilient(&[0u8; 64]).unwrap_err(),
            ResilientError::BadMagic
        );
    }

    #[test]
    fn short_inputs() {
        assert_eq!(
            decode_resilient(b"SJ").unwrap_err(),
            ResilientError::TruncatedContainer
        );
        assert_eq!(
            decode_resilient(b"SJC1").unwrap_err(),
            ResilientError::TruncatedContainer
        );
        // Magic plus a few stray bytes: not three records.
        assert_eq!(
            decode_resilient(b"SJC1xyz").unwrap_err(),
            ResilientError::TruncatedContainer
        );
    }

    #[test]
    fn truncation_never_yields_garbage() {
        let payload = b"truncate me";
        let full = encode_resilient(payload);
        // Any shortened container must error; a cut that keeps the record
        // arithmetic consistent shifts every copy and fails recovery instead.
        for cut in 1..full.len() - 4 {
            let c = &full[..full.len() - cut];
            assert!(decode_resilient(c).is_err(), "cut {cut} decoded");
        }
        assert_eq!(
            decode_resilient(&full[..full.len() - 1]).unwrap_err(),
            ResilientError::TruncatedContainer
        );
        assert_eq!(
            decode_resilient(&full[..full.len() - 3]).unwrap_err(),
            ResilientError::Unrecoverable
        );
    }

    #[test]
    fn unrecoverable_when_majority_and_crcs_broken() {
        let payload = b"beyond repair";
        let record_len = 8 + payload.len();
        let mut c = encode_resilient(payload);
        for i in 0..3 {
            let rec = 4 + i * record_len;
            // Different damage per copy at the same offset kills majority...
            c[rec + 4] = [0x11, 0x22, 0x33][i];
            // ...and the stored CRCs are broken too.
            c[rec + 4 + payload.len()] ^= 0xFF;
        }
        assert_eq!(
            decode_resilient(&c).unwrap_err(),
            ResilientError::Unrecoverable
        );
    }
}
