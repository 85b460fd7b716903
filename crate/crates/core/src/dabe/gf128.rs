//! Arithmetic in GF(2^128) modulo x^128 + x^7 + x^2 + x + 1.
//!
//! Bit `i` of the `u128` is the coefficient of x^i. Addition is XOR.

use std::ops::{Add, Mul};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Gf128(pub u128);

const REDUCTION: u128 = 0x87;

impl Gf128 {
    pub const ZERO: Gf128 = Gf128(0);
    pub const ONE: Gf128 = Gf128(1);

    pub fn from_bytes(b: [u8; 16]) -> Self {
        Gf128(u128::from_be_bytes(b))
    }

    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_be_bytes()
    }

    pub fn pow(self, mut e: u128) -> Self {
        let mut base = self;
        let mut acc = Gf128::ONE;
        while e != 0 {
            if e & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            e >>= 1;
        }
        acc
    }

    /// Multiplicative inverse; `None` for zero.
    pub fn inv(self) -> Option<Self> {
        // a^(2^128 - 2) = a^-1 in a field of order 2^128.
        (self.0 != 0).then(|| self.pow(u128::MAX - 1))
    }
}

// Characteristic 2: addition is XOR.
#[allow(clippy::suspicious_arithmetic_impl)]
impl Add for Gf128 {
    type Output = Gf128;
    fn add(self, rhs: Gf128) -> Gf128 {
        Gf128(self.0 ^ rhs.0)
    }
}

impl Mul for Gf128 {
    type Output = Gf128;
    fn mul(self, rhs: Gf128) -> Gf128 {
        let (mut a, mut b, mut r) = (self.0, rhs.0, 0u128);
        while b != 0 {
            if b & 1 == 1 {
                r ^= a;
            }
            b >>= 1;
            let carry = a >> 127;
            a <<= 1;
            if carry == 1 {
                a ^= REDUCTION;
            }
        }
        Gf128(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn x_to_the_128_reduces() {
        // x^127 * x = x^128 = x^7 + x^2 + x + 1
        let x127 = Gf128(1 << 127);
        assert_eq!(x127 * Gf128(2), Gf128(0x87));
    }

    proptest! {
        #[test]
        fn inverse_and_distributivity(a in any::<u128>(), b in any::<u128>(), c in any::<u128>()) {
            let (a, b, c) = (Gf128(a), Gf128(b), Gf128(c));
            if a.0 != 0 {
                prop_assert_eq!(a * a.inv().unwrap(), Gf128::ONE);
            }
            prop_assert_eq!(a * (b + c), a * b + a * c);
            prop_assert_eq!(a * b, b * a);
        }
    }
}
