//! `FHT1` tensor container.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "FHT1"
//! 4       4           rank r (u32 LE)
//! 8       4·r         extents (u32 LE each)
//! 8+4r    4·∏extents  payload, f32 LE, row-major (last index fastest)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FHT1";

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, FormatError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or(FormatError::Truncated {
            needed: at + 4,
            found: bytes.len(),
        })
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<Tensor<f32>, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            needed: 4,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let rank = read_u32(bytes, 4)? as usize;
    let header = rank
        .checked_mul(4)
        .and_then(|r| r.checked_add(8))
        .ok_or(FormatError::ExtentOverflow(vec![]))?;
    if bytes.len() < header {
        return Err(FormatError::Truncated {
            needed: header,
            found: bytes.len(),
        });
    }
    let extents: Vec<u32> = (0..rank)
        .map(|i| read_u32(bytes, 8 + 4 * i))
        .collect::<std::result::Result<_, _>>()?;
    let count = extents
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e as usize))
        .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
    let Some((count, payload)) = count else {
        return Err(FormatError::ExtentOverflow(extents));
    };
    let needed = header
        .checked_add(payload)
        .ok_or_else(|| FormatError::ExtentOverflow(extents.clone()))?;
    if bytes.len() < needed {
        return Err(FormatError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(FormatError::TrailingBytes(bytes.len() - needed));
    }
    let data = bytes[header..needed]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>();
    debug_assert_eq!(data.len(), count);
    let shape = extents.into_iter().map(|e| e as usize).collect();
    Ok(Tensor::new(shape, data).expect("count checked above"))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    if t.shape().iter().any(|&e| e > u32::MAX as usize) {
        return Err(Error::invalid(format!(
            "extent in {:?} exceeds u32",
            t.shape()
        )));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_pinned() {
        let t = Tensor::new(vec![1, 2], vec![1.0f32, -2.5]).unwrap();
        let bytes = encode_tensor(&t);
        let mut expect = b"FHT1".to_vec();
        expect.extend([2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn distinct_corruption_errors() {
        let t = Tensor::new(vec![3, 5, 7], (0..105).map(|i| i as f32 * 0.1).collect()).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(decode_tensor(&bytes).unwrap(), t);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(FormatError::BadMagic(_))));

        assert!(matches!(
            decode_tensor(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        assert!(matches!(
            decode_tensor(&bytes[..10]),
            Err(FormatError::Truncated { .. })
        ));

        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(decode_tensor(&long), Err(FormatError::TrailingBytes(1)));

        let mut huge = b"FHT1".to_vec();
        huge.extend(3u32.to_le_bytes());
        for _ in 0..3 {
            huge.extend(u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            decode_tensor(&huge),
            Err(FormatError::ExtentOverflow(_))
        ));
    }

    #[test]
    fn zero_extent_and_scalar() {
        let empty = Tensor::<f32>::new(vec![4, 0], vec![]).unwrap();
        let bytes = encode_tensor(&empty);
        assert_eq!(bytes.len(), 16);
        assert_eq!(decode_tensor(&bytes).unwrap(), empty);
        let s = Tensor::scalar(3.5f32);
        assert_eq!(decode_tensor(&encode_tensor(&s)).unwrap(), s);
    }
}
