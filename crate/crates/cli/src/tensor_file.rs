//! Binary tensor container.
//!
//! Layout: magic bytes `QTNSR1` (6 ASCII bytes), u8 dtype tag (0 = f32),
//! u8 rank, rank little-endian u64 extents, then the row-major
//! little-endian f32 payload, optionally followed by a u32 CRC32 of the
//! payload bytes. Errors carry byte offsets so malformed producers can be
//! located.

use std::fs;
use std::path::Path;

use tqsim_core::tensor::TensorF;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 6] = b"QTNSR1";
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrcMode {
    /// Append a CRC32 of the payload (the default).
    Present,
    /// Omit the checksum, as streaming producers may.
    Absent,
}

/// Whether the file carried a checksum; reports record this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadInfo {
    pub crc_present: bool,
}

pub fn encode(tensor: &TensorF, crc: CrcMode) -> Vec<u8> {
    let dims = tensor.dims();
    let mut out = Vec::with_capacity(8 + dims.len() * 8 + tensor.len() * 4 + 4);
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let payload_start = out.len();
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if crc == CrcMode::Present {
        let checksum = crc32fast::hash(&out[payload_start..]);
        out.extend_from_slice(&checksum.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(TensorF, ReadInfo)> {
    if bytes.len() < 8 {
        return Err(CliError::input(format!(
            "file truncated at offset {}: need at least 8 header bytes",
            bytes.len()
        )));
    }
    if &bytes[..6] != MAGIC {
        return Err(CliError::input(format!(
            "bad magic at offset 0: expected {:?}, found {:?}",
            MAGIC,
            &bytes[..6]
        )));
    }
    let dtype = bytes[6];
    if dtype != DTYPE_F32 {
        return Err(CliError::input(format!(
            "unsupported dtype tag {dtype} at offset 6"
        )));
    }
    let rank = bytes[7] as usize;
    let header_len = 8 + rank * 8;
    if bytes.len() < header_len {
        return Err(CliError::input(format!(
            "file truncated at offset {}: rank {rank} needs {header_len} header bytes",
            bytes.len()
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let off = 8 + i * 8;
        let ext = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let ext = usize::try_from(ext)
            .map_err(|_| CliError::input(format!("extent at offset {off} overflows usize")))?;
        count = count
            .checked_mul(ext.max(1))
            .ok_or_else(|| CliError::input(format!("extents at offset {off} overflow")))?;
        dims.push(ext);
    }
    let payload_len = count * 4;
    let with_crc = header_len + payload_len + 4;
    let without_crc = header_len + payload_len;
    let crc_present = if bytes.len() == with_crc {
        true
    } else if bytes.len() == without_crc {
        false
    } else {
        return Err(CliError::input(format!(
            "payload length mismatch: expected {without_crc} or {with_crc} bytes, found {} \
             (payload starts at offset {header_len})",
            bytes.len()
        )));
    };
    if crc_present {
        let expected = u32::from_le_bytes(bytes[without_crc..with_crc].try_into().unwrap());
        let actual = crc32fast::hash(&bytes[header_len..without_crc]);
        if expected != actual {
            return Err(CliError::input(format!(
                "CRC mismatch at offset {without_crc}: stored {expected:#010x}, computed {actual:#010x}"
            )));
        }
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = header_len + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    let tensor = TensorF::from_flat(&dims, data).map_err(|e| {
        CliError::input(format!("payload rejected at offset {header_len}: {e}"))
    })?;
    Ok((tensor, ReadInfo { crc_present }))
}

pub fn write_file(path: &Path, tensor: &TensorF, crc: CrcMode) -> Result<()> {
    fs::write(path, encode(tensor, crc))
        .map_err(|e| CliError::input(format!("writing {}: {e}", path.display())))
}

pub fn read_file(path: &Path) -> Result<(TensorF, ReadInfo)> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::input(format!("reading {}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_and_without_crc() {
        let t = TensorF::from_flat(&[2, 3], vec![1.0, -2.5, 0.0, 3.25, -0.125, 9.0]).unwrap();
        for mode in [CrcMode::Present, CrcMode::Absent] {
            let bytes = encode(&t, mode);
            let (back, info) = decode(&bytes).unwrap();
            assert_eq!(back, t);
            assert_eq!(info.crc_present, mode == CrcMode::Present);
        }
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let t = TensorF::from_flat(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = encode(&t, CrcMode::Present);
        let payload_at = 8 + 8;
        bytes[payload_at] ^= 0x40;
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("CRC mismatch"), "{err}");
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let t = TensorF::from_flat(&[1], vec![1.0]).unwrap();
        let mut bytes = encode(&t, CrcMode::Absent);
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("offset 0"), "{err}");
    }

    #[test]
    fn truncated_file_reports_expected_sizes() {
        let t = TensorF::from_flat(&[8], vec![0.5; 8]).unwrap();
        let bytes = encode(&t, CrcMode::Absent);
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn non_finite_payload_rejected() {
        let t = TensorF::from_flat(&[2], vec![1.0, 2.0]).unwrap();
        let mut bytes = encode(&t, CrcMode::Absent);
        // patch a NaN into the payload
        let nan = f32::NAN.to_le_bytes();
        bytes[16..20].copy_from_slice(&nan);
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("payload rejected"), "{err}");
    }
}
