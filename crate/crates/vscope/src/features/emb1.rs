//! EMB1 embedding container.
//!
//! Format (little-endian):
//!   magic   4 bytes  `EMB1`
//!   version u32      currently 1
//!   frames  u32      T
//!   dim     u32      D
//!   payload T*D f32  row-major frame embeddings
//!
//! Write → read is bit-exact on the payload; readers reject non-finite values.

use ndarray::Array2;

use super::FeatureError;

pub const MAGIC: [u8; 4] = *b"EMB1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Serializes a frame matrix (T×D) to EMB1 bytes.
pub fn write_embedding_container(frames: &Array2<f32>) -> Vec<u8> {
    let (t, d) = frames.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + t * d * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for row in frames.rows() {
        for &v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Deserializes EMB1 bytes into a T×D frame matrix.
///
/// `expected_dim` cross-checks the manifest's declared width when present.
pub fn read_embedding_container(
    bytes: &[u8],
    expected_dim: Option<u32>,
) -> Result<Array2<f32>, FeatureError> {
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::BadMagic);
    }
    if bytes[0..4] != MAGIC {
        return Err(FeatureError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FeatureError::UnsupportedVersion(version));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if let Some(want) = expected_dim {
        if want as usize != d {
            return Err(FeatureError::ShapeMismatch {
                expected: want as usize,
                got: d,
            });
        }
    }
    let payload = &bytes[HEADER_LEN..];
    let want_bytes = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or(FeatureError::BadMagic)?;
    if payload.len() != want_bytes {
        return Err(FeatureError::TruncatedPayload {
            expected: want_bytes,
            got: payload.len(),
        });
    }
    let mut data = Vec::with_capacity(t * d);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FeatureError::NonFiniteValue {
                row: i / d.max(1),
                col: i % d.max(1),
            });
        }
        data.push(v);
    }
    Array2::from_shape_vec((t, d), data).map_err(|_| FeatureError::BadMagic)
}
