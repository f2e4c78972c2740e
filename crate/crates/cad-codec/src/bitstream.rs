//! On-disk/bitstream layout (little-endian):
//!
//! ```text
//! magic "CADB" (4) | version u8 | model_id u16 | lambda_index u8 |
//! orig_H u16 | orig_W u16 | padded_H u16 | padded_W u16 |
//! z_len u32 | y_len u32 | crc32 of payloads u32 | z bytes | y bytes
//! ```

use crate::types::Bitstream;
use crate::{CodecError, Result};

pub const MAGIC: &[u8; 4] = b"CADB";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 2 + 1 + 2 + 2 + 2 + 2 + 4 + 4 + 4;

pub fn payload_crc(z: &[u8], y: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(z);
    h.update(y);
    h.finalize()
}

pub fn serialize(bs: &Bitstream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + bs.z_payload.len() + bs.y_payload.len());
    out.extend_from_slice(MAGIC);
    out.push(bs.version);
    out.extend_from_slice(&bs.model_id.to_le_bytes());
    out.push(bs.lambda_index);
    out.extend_from_slice(&bs.orig_h.to_le_bytes());
    out.extend_from_slice(&bs.orig_w.to_le_bytes());
    out.extend_from_slice(&bs.padded_h.to_le_bytes());
    out.extend_from_slice(&bs.padded_w.to_le_bytes());
    out.extend_from_slice(&(bs.z_payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&(bs.y_payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload_crc(&bs.z_payload, &bs.y_payload).to_le_bytes());
    out.extend_from_slice(&bs.z_payload);
    out.extend_from_slice(&bs.y_payload);
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<Bitstream> {
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::CorruptStream("header truncated".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(CodecError::CorruptStream("bad magic".into()));
    }
    let version = bytes[4];
    if version != VERSION {
        return Err(CodecError::CorruptStream(format!(
            "unsupported version {version}"
        )));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at =
        |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let model_id = u16_at(5);
    let lambda_index = bytes[7];
    let orig_h = u16_at(8);
    let orig_w = u16_at(10);
    let padded_h = u16_at(12);
    let padded_w = u16_at(14);
    let z_len = u32_at(16) as usize;
    let y_len = u32_at(20) as usize;
    let crc = u32_at(24);
    if bytes.len() != HEADER_LEN + z_len + y_len {
        return Err(CodecError::CorruptStream(format!(
            "length mismatch: header promises {} payload bytes, got {}",
            z_len + y_len,
            bytes.len() - HEADER_LEN
        )));
    }
    let z_payload = bytes[HEADER_LEN..HEADER_LEN + z_len].to_vec();
    let y_payload = bytes[HEADER_LEN + z_len..].to_vec();
    if payload_crc(&z_payload, &y_payload) != crc {
        return Err(CodecError::CorruptStream("payload checksum mismatch".into()));
    }
    Ok(Bitstream {
        version,
        model_id,
        lambda_index,
        orig_h,
        orig_w,
        padded_h,
        padded_w,
        z_payload,
        y_payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            version: VERSION,
            model_id: 0x1234,
            lambda_index: 2,
            orig_h: 70,
            orig_w: 50,
            padded_h: 128,
            padded_w: 64,
            z_payload: vec![1, 2, 3],
            y_payload: vec![9, 8, 7, 6],
        }
    }

    #[test]
    fn roundtrip_and_layout() {
        let bs = sample();
        let bytes = serialize(&bs);
        assert_eq!(bytes.len(), HEADER_LEN + 7);
        assert_eq!(&bytes[0..4], b"CADB");
        assert_eq!(bytes[4], VERSION);
        assert_eq!(u16::from_le_bytes([bytes[5], bytes[6]]), 0x1234);
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back, bs);
        assert_eq!(bs.total_bits(), 8 * (HEADER_LEN as u64 + 7));
    }

    #[test]
    fn corruption_is_detected() {
        let bs = sample();
        let mut bytes = serialize(&bs);
        // flip a payload bit
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(
            deserialize(&bytes),
            Err(CodecError::CorruptStream(_))
        ));
        // truncate
        let bytes = serialize(&bs);
        assert!(matches!(
            deserialize(&bytes[..bytes.len() - 2]),
            Err(CodecError::CorruptStream(_))
        ));
    }
}
