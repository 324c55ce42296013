//! Stored element types and their conversion to and from 32-bit working values.

use std::fmt;
use std::str::FromStr;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

/// Element type of a tensor as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub const fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    /// Name used in container headers.
    pub const fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    pub fn from_header(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::BF16),
            _ => None,
        }
    }

    /// Round `x` to the nearest representable value (ties to even) and widen
    /// it back. Returns `None` when a finite input overflows the format.
    pub fn quantize(self, x: f32) -> Option<f32> {
        let y = match self {
            Dtype::F32 => x,
            Dtype::F16 => f16::from_f32(x).to_f32(),
            Dtype::BF16 => bf16::from_f32(x).to_f32(),
        };
        if x.is_finite() && !y.is_finite() {
            None
        } else {
            Some(y)
        }
    }

    /// Decode little-endian elements from `bytes`, appending to `out`.
    /// Every F16/BF16 value widens to f32 exactly.
    pub(crate) fn decode_into(self, bytes: &[u8], out: &mut Vec<f32>) {
        match self {
            Dtype::F32 => out.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            ),
            Dtype::F16 => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32()),
            ),
            Dtype::BF16 => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32()),
            ),
        }
    }

    /// Encode `values` as little-endian elements, appending to `out`.
    /// On overflow returns the offending position within `values`.
    pub(crate) fn encode_into(self, values: &[f32], out: &mut Vec<u8>) -> Result<(), usize> {
        match self {
            Dtype::F32 => {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F16 => {
                for (i, &v) in values.iter().enumerate() {
                    let h = f16::from_f32(v);
                    if v.is_finite() && h.is_infinite() {
                        return Err(i);
                    }
                    out.extend_from_slice(&h.to_le_bytes());
                }
            }
            Dtype::BF16 => {
                for (i, &v) in values.iter().enumerate() {
                    let h = bf16::from_f32(v);
                    if v.is_finite() && h.is_infinite() {
                        return Err(i);
                    }
                    out.extend_from_slice(&h.to_le_bytes());
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(Dtype::F32),
            "f16" => Ok(Dtype::F16),
            "bf16" => Ok(Dtype::BF16),
            other => Err(format!(
                "unknown dtype `{other}` (expected f32, f16 or bf16)"
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn widen(dtype: Dtype, bits: u16) -> f32 {
        let mut out = Vec::new();
        dtype.decode_into(&bits.to_le_bytes(), &mut out);
        out[0]
    }

    #[test]
    fn widening_known_bit_patterns() {
        assert_eq!(widen(Dtype::BF16, 0x3FC0), 1.5);
        assert_eq!(widen(Dtype::F16, 0x3C00), 1.0);
        assert_eq!(widen(Dtype::F16, 0x7BFF), 65504.0);
    }

    #[test]
    fn f16_overflow_is_reported() {
        let mut out = Vec::new();
        assert_eq!(Dtype::F16.encode_into(&[1.0, 1e6], &mut out), Err(1));
        assert_eq!(Dtype::F16.quantize(1e6), None);
        assert_eq!(Dtype::F16.quantize(65504.0), Some(65504.0));
    }

    #[test]
    fn narrowing_rounds_to_nearest_even() {
        // 1 + 2^-11 sits exactly between two f16 values; ties go to the even mantissa.
        let x = 1.0 + f32::powi(2.0, -11);
        assert_eq!(Dtype::F16.quantize(x), Some(1.0));
        let y = 1.0 + 3.0 * f32::powi(2.0, -11);
        assert_eq!(Dtype::F16.quantize(y), Some(1.0 + f32::powi(2.0, -9)));
    }

    #[test]
    fn widening_is_idempotent_for_every_16_bit_pattern() {
        for dtype in [Dtype::F16, Dtype::BF16] {
            for bits in 0..=u16::MAX {
                let x = widen(dtype, bits);
                if x.is_nan() {
                    continue;
                }
                let mut bytes = Vec::new();
                dtype.encode_into(&[x], &mut bytes).unwrap();
                let mut back = Vec::new();
                dtype.decode_into(&bytes, &mut back);
                assert_eq!(back[0].to_bits(), x.to_bits(), "{dtype} {bits:#06x}");
            }
        }
    }
}
