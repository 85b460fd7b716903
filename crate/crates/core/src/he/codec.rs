//! Signed fixed-point encoding of real weights into a plaintext ring Z_m.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{ToPrimitive, Zero};

use super::HeError;

pub const SCALE_BITS: u32 = 16;
pub const CLIP: f64 = 8.0;

/// Maps reals in `[-clip, clip]` to residues mod `modulus` at scale `2^scale_bits`.
/// Negative values become `modulus - |v|`; on decode, residues above
/// `modulus / 2` are read back as negative.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointCodec {
    pub scale_bits: u32,
    pub clip: f64,
    modulus: BigUint,
    /// Largest total aggregation weight (sum of sample counts) a sum of encodings may carry.
    pub max_weight: u64,
}

/// Result of [`FixedPointCodec::encode_vector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub residues: Vec<BigUint>,
    /// Coordinates that had to be clamped into `[-clip, clip]`.
    pub clamped: usize,
}

/// Rounds `x` to fixed point after clamping; returns the integer and whether it was clamped.
pub fn to_fixed(x: f64, scale_bits: u32, clip: f64) -> (i64, bool) {
    let x = if x.is_nan() { 0.0 } else { x };
    let c = x.clamp(-clip, clip);
    ((c * (1u64 << scale_bits) as f64).round() as i64, c != x)
}

impl FixedPointCodec {
    pub fn new(modulus: BigUint, max_weight: u64) -> Result<Self, HeError> {
        Self::with_params(modulus, max_weight, SCALE_BITS, CLIP)
    }

    pub fn with_params(modulus: BigUint, max_weight: u64, scale_bits: u32, clip: f64) -> Result<Self, HeError> {
        if max_weight == 0 || clip.is_nan() || clip <= 0.0 {
            return Err(HeError::InvalidParameter("codec needs positive clip and max weight".into()));
        }
        let bound = BigUint::from((clip * (1u64 << scale_bits) as f64).ceil() as u64) * BigUint::from(max_weight);
        if bound * 2u32 >= modulus {
            return Err(HeError::InvalidParameter(format!(
                "modulus of {} bits too small for max weight {max_weight}",
                modulus.bits()
            )));
        }
        Ok(Self { scale_bits, clip, modulus, max_weight })
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    pub fn encode_scalar(&self, x: f64) -> (BigUint, bool) {
        let (v, clamped) = to_fixed(x, self.scale_bits, self.clip);
        (self.residue(&BigInt::from(v)), clamped)
    }

    pub fn residue(&self, v: &BigInt) -> BigUint {
        let m = BigInt::from_biguint(Sign::Plus, self.modulus.clone());
        let r = ((v % &m) + &m) % &m;
        r.to_biguint().expect("non-negative after reduction")
    }

    /// Interprets a residue as a signed integer.
    pub fn signed(&self, r: &BigUint) -> BigInt {
        let r = r % &self.modulus;
        if r > &self.modulus >> 1 {
            BigInt::from_biguint(Sign::Plus, r) - BigInt::from_biguint(Sign::Plus, self.modulus.clone())
        } else {
            BigInt::from_biguint(Sign::Plus, r)
        }
    }

    pub fn encode_vector(&self, w: &[f64]) -> Encoded {
        let mut clamped = 0;
        let residues = w
            .iter()
            .map(|&x| {
                let (r, c) = self.encode_scalar(x);
                clamped += c as usize;
                r
            })
            .collect();
        Encoded { residues, clamped }
    }

    /// Decodes and divides by `divisor` (use 1 for a plain round trip).
    pub fn decode_vector(&self, xs: &[BigUint], divisor: u64) -> Vec<f64> {
        let denom = divisor.max(1) as f64 * (1u64 << self.scale_bits) as f64;
        xs.iter()
            .map(|r| {
                let s = self.signed(r);
                if s.is_zero() {
                    0.0
                } else {
                    s.to_f64().unwrap_or(f64::NAN) / denom
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codec() -> FixedPointCodec {
        FixedPointCodec::new(BigUint::from(1u128 << 100), 1000).unwrap()
    }

    #[test]
    fn zeros_and_one() {
        let c = codec();
        let e = c.encode_vector(&[0.0, 0.0]);
        assert!(e.residues.iter().all(|r| r.is_zero()));
        assert_eq!(c.decode_vector(&e.residues, 1), vec![0.0, 0.0]);
        let e = c.encode_vector(&[1.0]);
        assert!((c.decode_vector(&e.residues, 1)[0] - 1.0).abs() <= 2f64.powi(-16));
    }

    #[test]
    fn clamping_is_counted() {
        let c = codec();
        let e = c.encode_vector(&[9.0, -100.0, 7.5]);
        assert_eq!(e.clamped, 2);
        assert_eq!(c.decode_vector(&e.residues, 1), vec![8.0, -8.0, 7.5]);
    }

    #[test]
    fn negative_residues_decode_negative() {
        let c = codec();
        let (r, _) = c.encode_scalar(-0.5);
        assert!(r > c.modulus() >> 1);
        assert_eq!(c.decode_vector(&[r], 1), vec![-0.5]);
    }

    #[test]
    fn rejects_tiny_modulus() {
        assert!(FixedPointCodec::new(BigUint::from(1u32 << 20), 10).is_err());
    }
}
