//! Probable-prime generation for Paillier moduli.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;

const SMALL_PRIMES: [u32; 54] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109,
    113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229, 233, 239,
    241, 251, 257,
];

/// Miller-Rabin with `rounds` random bases drawn from `rng`.
pub fn is_probable_prime(n: &BigUint, rounds: usize, rng: &mut impl RngCore) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for p in SMALL_PRIMES.iter().map(|&p| BigUint::from(p)).chain([two.clone()]) {
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random prime with exactly `bits` bits and its top two bits set, so the
/// product of two such primes has exactly `2 * bits` bits.
pub fn gen_prime(bits: u64, rng: &mut impl RngCore) -> BigUint {
    assert!(bits >= 16);
    loop {
        let mut c = rng.gen_biguint(bits);
        c.set_bit(bits - 1, true);
        c.set_bit(bits - 2, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, 40, rng) {
            return c;
        }
    }
}

pub(crate) fn lcm(a: &BigUint, b: &BigUint) -> BigUint {
    a.lcm(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn small_cases() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
        let primes: Vec<u32> = (0u32..200).filter(|&n| is_probable_prime(&BigUint::from(n), 20, &mut rng)).collect();
        let sieve: Vec<u32> = (0u32..200).filter(|&n| n >= 2 && (2..n).all(|d| n % d != 0)).collect();
        assert_eq!(primes, sieve);
        // Carmichael number.
        assert!(!is_probable_prime(&BigUint::from(561u32), 20, &mut rng));
    }

    #[test]
    fn generated_prime_has_requested_size() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let p = gen_prime(64, &mut rng);
        assert_eq!(p.bits(), 64);
        assert!(p.bit(62));
    }
}
