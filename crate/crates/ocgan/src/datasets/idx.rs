//! IDX binary container, bit-exact.
//!
//! Layout: bytes 0–1 zero, byte 2 dtype (only `0x08` = unsigned byte is
//! supported), byte 3 rank `r`, then `r` big-endian 32-bit dimensions,
//! then the row-major payload.

use ndarray::{ArrayD, IxDyn};

use super::DataError;

const DTYPE_U8: u8 = 0x08;

/// Parse an IDX byte sequence into a tensor of unsigned bytes.
pub fn parse_idx(bytes: &[u8]) -> Result<ArrayD<u8>, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(DataError::Format(format!(
            "bad IDX magic: first two bytes must be zero, got 0x{:02x} 0x{:02x}",
            bytes[0], bytes[1]
        )));
    }
    if bytes[2] != DTYPE_U8 {
        return Err(DataError::UnsupportedDtype(bytes[2]));
    }
    let rank = bytes[3] as usize;
    let header_len = 4 + 4 * rank;
    if bytes.len() < header_len {
        return Err(DataError::Truncated {
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 4 + 4 * i;
        let dim = u32::from_be_bytes([
            bytes[off],
            bytes[off + 1],
            bytes[off + 2],
            bytes[off + 3],
        ]);
        dims.push(dim as usize);
    }
    let payload: usize = dims.iter().product();
    let expected = header_len + payload;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::Format(format!(
            "{} trailing bytes after declared payload",
            bytes.len() - expected
        )));
    }
    let data = bytes[header_len..].to_vec();
    ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| DataError::Format(format!("shape error: {e}")))
}

/// Encode a tensor of unsigned bytes back into IDX bytes.
///
/// Inverse of [`parse_idx`] on well-formed inputs.
pub fn serialize_idx(tensor: &ArrayD<u8>) -> Result<Vec<u8>, DataError> {
    let rank = tensor.ndim();
    if rank > u8::MAX as usize {
        return Err(DataError::Format(format!("rank {rank} exceeds IDX limit")));
    }
    for &d in tensor.shape() {
        if d > u32::MAX as usize {
            return Err(DataError::Format(format!("dimension {d} exceeds u32")));
        }
    }
    let mut out = Vec::with_capacity(4 + 4 * rank + tensor.len());
    out.extend_from_slice(&[0, 0, DTYPE_U8, rank as u8]);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    // Row-major payload; make the iteration order explicit.
    out.extend(tensor.iter().copied());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_hand_encoded_tensor() {
        // magic 0x00000803 (u8, rank 3), dims [1,2,2], payload [1,2,3,4].
        let bytes: Vec<u8> = vec![
            0x00, 0x00, 0x08, 0x03, // magic
            0x00, 0x00, 0x00, 0x01, // dim 0
            0x00, 0x00, 0x00, 0x02, // dim 1
            0x00, 0x00, 0x00, 0x02, // dim 2
            1, 2, 3, 4,
        ];
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t[[0, 0, 0]], 1);
        assert_eq!(t[[0, 0, 1]], 2);
        assert_eq!(t[[0, 1, 0]], 3);
        assert_eq!(t[[0, 1, 1]], 4);
    }

    #[test]
    fn zero_length_dimension_is_fine() {
        let bytes: Vec<u8> = vec![0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x00];
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.shape(), &[0]);
        assert_eq!(t.len(), 0);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes: Vec<u8> = vec![0x01, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x00];
        assert!(matches!(parse_idx(&bytes), Err(DataError::Format(_))));
    }

    #[test]
    fn rejects_unsupported_dtype() {
        // 0x0D is the IDX float dtype.
        let bytes: Vec<u8> = vec![0x00, 0x00, 0x0d, 0x01, 0x00, 0x00, 0x00, 0x00];
        assert!(matches!(
            parse_idx(&bytes),
            Err(DataError::UnsupportedDtype(0x0d))
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes: Vec<u8> = vec![
            0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x04, // dims [4]
            1, 2, // only 2 of 4 payload bytes
        ];
        assert!(matches!(parse_idx(&bytes), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let bytes: Vec<u8> = vec![0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x01, 7, 8];
        assert!(matches!(parse_idx(&bytes), Err(DataError::Format(_))));
    }
}
