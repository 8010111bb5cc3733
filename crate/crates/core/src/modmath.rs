//! Number-theoretic helpers and the keyed mixer every protocol derives its
//! pseudorandom values from.
//!
//! All arithmetic is on `u64` with `u128` intermediates, which covers the
//! demo parameter sizes used throughout the crate (DH primes below 2^32,
//! the GM field 2^61 - 1 and PPMP moduli p^2 < 2^64).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModError {
    #[error("modulus must be at least 1")]
    ZeroModulus,
    #[error("{value} has no inverse modulo {modulus}")]
    NoInverse { value: u64, modulus: u64 },
    #[error("value {value} does not fit in {width} bits")]
    WidthOverflow { value: u64, width: u32 },
    #[error("{0} is not prime")]
    NotPrime(u64),
    #[error("{0} exceeds the supported prime size")]
    PrimeTooLarge(u64),
    #[error("{g} is not a generator of the multiplicative group mod {p}")]
    NotGenerator { p: u64, g: u64 },
}

/// Largest prime accepted by [`find_generator`] and [`ModParams`].
pub const MAX_DEMO_PRIME: u64 = 1 << 31;

/// Bit width used when reversing keys for the second noise stream.
pub const KEY_WIDTH: u32 = 64;

#[inline]
pub fn mul_mod(a: u64, b: u64, modulus: u64) -> u64 {
    ((a as u128 * b as u128) % modulus as u128) as u64
}

/// `base^exp mod modulus` by recursive halving of the exponent.
pub fn mod_pow(base: u64, exp: u64, modulus: u64) -> Result<u64, ModError> {
    if modulus == 0 {
        return Err(ModError::ZeroModulus);
    }
    Ok(pow_halving(base % modulus, exp, modulus))
}

fn pow_halving(base: u64, exp: u64, modulus: u64) -> u64 {
    if exp == 0 {
        return 1 % modulus;
    }
    let half = pow_halving(base, exp / 2, modulus);
    let squared = mul_mod(half, half, modulus);
    if exp.is_multiple_of(2) {
        squared
    } else {
        mul_mod(base, squared, modulus)
    }
}

/// Inverse of `a` modulo `modulus` (any modulus, as long as `gcd(a, modulus) = 1`).
pub fn mod_inv(a: u64, modulus: u64) -> Result<u64, ModError> {
    if modulus == 0 {
        return Err(ModError::ZeroModulus);
    }
    let m = modulus as i128;
    let (mut old_r, mut r) = ((a % modulus) as i128, m);
    let (mut old_s, mut s) = (1i128, 0i128);
    while r != 0 {
        let quotient = old_r / r;
        (old_r, r) = (r, old_r - quotient * r);
        (old_s, s) = (s, old_s - quotient * s);
    }
    if old_r != 1 || modulus == 1 {
        return Err(ModError::NoInverse { value: a, modulus });
    }
    Ok(old_s.rem_euclid(m) as u64)
}

/// Reverses the low `width` bits of `v`.
pub fn bit_reverse(v: u64, width: u32) -> Result<u64, ModError> {
    if width > 64 || (width < 64 && v >> width != 0) {
        return Err(ModError::WidthOverflow { value: v, width });
    }
    if width == 0 {
        return Ok(0);
    }
    Ok(v.reverse_bits() >> (64 - width))
}

/// Input to [`keyed_rand`].
///
/// The mixer consumes the big-endian key bytes, then the big-endian
/// sequence number, then the tag byte: 13 bytes in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedMaterial {
    pub key: u64,
    pub seq_no: u32,
    pub tag: u8,
}

impl SeedMaterial {
    pub fn new(key: u64, seq_no: u32, tag: u8) -> Self {
        SeedMaterial { key, seq_no, tag }
    }

    pub fn to_bytes(self) -> [u8; 13] {
        let mut out = [0u8; 13];
        out[..8].copy_from_slice(&self.key.to_be_bytes());
        out[8..12].copy_from_slice(&self.seq_no.to_be_bytes());
        out[12] = self.tag;
        out
    }
}

const MIX_IV: u64 = 0x6a09_e667_f3bc_c908;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

// splitmix64 finalizer
#[inline]
fn fmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic 64-bit pseudorandom value derived from `seed`.
///
/// The 13-byte layout is absorbed in two big-endian words (the second
/// zero-padded); each absorption is followed by a full avalanche round, and
/// the byte length is folded into the final round. This is not a
/// cryptographic PRF: both endpoints of a pair only need to agree on it.
pub fn keyed_rand(seed: SeedMaterial) -> u64 {
    let bytes = seed.to_bytes();
    let mut state = MIX_IV;
    for chunk in bytes.chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        state = fmix64(state ^ u64::from_be_bytes(word))
            .rotate_left(23)
            .wrapping_mul(GOLDEN);
    }
    fmix64(state ^ bytes.len() as u64)
}

/// Deterministic Miller-Rabin, exact for every `u64`.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for &b in &BASES {
        if n.is_multiple_of(b) {
            return n == b;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for &a in &BASES {
        let mut x = pow_halving(a % n, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Distinct prime factors of `n` by trial division.
pub fn prime_factors(mut n: u64) -> Vec<u64> {
    let mut factors = Vec::new();
    let mut d = 2u64;
    while d * d <= n {
        if n.is_multiple_of(d) {
            factors.push(d);
            while n.is_multiple_of(d) {
                n /= d;
            }
        }
        d += if d == 2 { 1 } else { 2 };
    }
    if n > 1 {
        factors.push(n);
    }
    factors
}

fn generates(g: u64, p: u64, factors: &[u64]) -> bool {
    !g.is_multiple_of(p)
        && factors
            .iter()
            .all(|&f| pow_halving(g % p, (p - 1) / f, p) != 1)
}

/// Smallest generator of the multiplicative group modulo the prime `p`.
pub fn find_generator(p: u64) -> Result<u64, ModError> {
    if p > MAX_DEMO_PRIME {
        return Err(ModError::PrimeTooLarge(p));
    }
    if !is_prime(p) {
        return Err(ModError::NotPrime(p));
    }
    if p == 2 {
        return Ok(1);
    }
    let factors = prime_factors(p - 1);
    Ok((2..p)
        .find(|&g| generates(g, p, &factors))
        .expect("a prime modulus always has a generator"))
}

/// Public Diffie-Hellman group parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModParams {
    pub p: u64,
    pub g: u64,
}

impl ModParams {
    pub fn new(p: u64, g: u64) -> Result<Self, ModError> {
        if p > MAX_DEMO_PRIME {
            return Err(ModError::PrimeTooLarge(p));
        }
        if !is_prime(p) || p < 3 {
            return Err(ModError::NotPrime(p));
        }
        if g <= 1 || g >= p || !generates(g, p, &prime_factors(p - 1)) {
            return Err(ModError::NotGenerator { p, g });
        }
        Ok(ModParams { p, g })
    }

    /// Parameters with the smallest generator of `p`.
    pub fn with_prime(p: u64) -> Result<Self, ModError> {
        let g = find_generator(p)?;
        ModParams::new(p, g)
    }
}

impl Default for ModParams {
    /// 2^31 - 1 with its smallest primitive root, 7.
    fn default() -> Self {
        ModParams {
            p: 2_147_483_647,
            g: 7,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_pow(base: u64, exp: u64, modulus: u64) -> u64 {
        let mut acc = 1 % modulus;
        for _ in 0..exp {
            acc = acc * (base % modulus) % modulus;
        }
        acc
    }

    fn naive_order(g: u64, p: u64) -> u64 {
        let mut x = g % p;
        let mut k = 1;
        while x != 1 {
            x = x * g % p;
            k += 1;
        }
        k
    }

    #[test]
    fn pow_examples() {
        assert_eq!(mod_pow(12345, 0, 97).unwrap(), 1);
        assert_eq!(mod_pow(5, 6, 23).unwrap(), 8);
        assert_eq!(mod_pow(19, 6, 23).unwrap(), 2);
        assert_eq!(mod_pow(3, 5, 1).unwrap(), 0);
        assert_eq!(mod_pow(2, 3, 0), Err(ModError::ZeroModulus));
    }

    #[test]
    fn pow_matches_repeated_multiplication_on_grid() {
        for modulus in (1..=1024u64).step_by(37) {
            for base in (0..1024u64).step_by(61) {
                for exp in (0..=1024u64).step_by(97) {
                    assert_eq!(
                        mod_pow(base, exp, modulus).unwrap(),
                        naive_pow(base, exp, modulus),
                        "{base}^{exp} mod {modulus}"
                    );
                }
            }
        }
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(mod_inv(1, 13).unwrap(), 1);
        let by_search = (1..7).find(|b| 3 * b % 7 == 1).unwrap();
        assert_eq!(by_search, 5);
        assert_eq!(mod_inv(3, 7).unwrap(), 5);
        assert_eq!(
            mod_inv(14, 7),
            Err(ModError::NoInverse {
                value: 14,
                modulus: 7
            })
        );
        assert_eq!(
            mod_inv(6, 9),
            Err(ModError::NoInverse {
                value: 6,
                modulus: 9
            })
        );
        // units mod p^2 for PPMP
        let m = 101 * 101;
        let inv = mod_inv(304, m).unwrap();
        assert_eq!(mul_mod(304, inv, m), 1);
    }

    #[test]
    fn inverse_exhaustive_small_primes() {
        for p in (2..=101u64).filter(|&p| is_prime(p)) {
            for a in 1..p {
                let b = mod_inv(a, p).unwrap();
                assert_eq!(a * b % p, 1);
                assert_eq!(mod_inv(b, p).unwrap(), a);
            }
        }
    }

    #[test]
    fn bit_reverse_examples() {
        assert_eq!(bit_reverse(0b1101, 4).unwrap(), 0b1011);
        assert_eq!(bit_reverse(0, 17).unwrap(), 0);
        assert_eq!(bit_reverse(1, 64).unwrap(), 1 << 63);
        assert!(bit_reverse(16, 4).is_err());
    }

    #[test]
    fn generator_examples() {
        assert_eq!(find_generator(23).unwrap(), 5);
        assert_eq!(find_generator(7).unwrap(), 3);
        assert_eq!(find_generator(2).unwrap(), 1);
        assert_eq!(find_generator(21), Err(ModError::NotPrime(21)));
        assert_eq!(find_generator(2_147_483_647).unwrap(), 7);
    }

    #[test]
    fn generator_matches_exhaustive_order() {
        for p in (3..400u64).filter(|&p| is_prime(p)) {
            let expected = (2..p).find(|&g| naive_order(g, p) == p - 1).unwrap();
            assert_eq!(find_generator(p).unwrap(), expected, "p = {p}");
        }
    }

    #[test]
    fn mod_params_validation() {
        assert!(ModParams::new(23, 5).is_ok());
        assert!(ModParams::new(23, 2).is_err());
        assert!(ModParams::new(22, 5).is_err());
        assert_eq!(
            ModParams::with_prime(23).unwrap(),
            ModParams { p: 23, g: 5 }
        );
        let d = ModParams::default();
        assert_eq!(ModParams::new(d.p, d.g).unwrap(), d);
    }

    #[test]
    fn primality() {
        let sieve: Vec<u64> = (0..2000)
            .filter(|&n| n >= 2 && (2..n).all(|d| n % d != 0))
            .collect();
        let fast: Vec<u64> = (0..2000).filter(|&n| is_prime(n)).collect();
        assert_eq!(sieve, fast);
        assert!(is_prime((1 << 61) - 1));
        assert!(!is_prime(3_215_031_751)); // strong pseudoprime to bases 2,3,5,7
    }

    #[test]
    fn keyed_rand_is_pure() {
        let seed = SeedMaterial::new(0xdead_beef, 42, 3);
        let first = keyed_rand(seed);
        for _ in 0..100 {
            assert_eq!(keyed_rand(seed), first);
        }
    }

    #[test]
    fn keyed_rand_separates_seq_and_reversed_key() {
        let mut state = 0x1234_5678u64;
        for _ in 0..10_000 {
            state = keyed_rand(SeedMaterial::new(state, 0, 0xff));
            let k = state;
            assert_ne!(
                keyed_rand(SeedMaterial::new(k, 7, 0)),
                keyed_rand(SeedMaterial::new(k, 8, 0))
            );
            let rv = bit_reverse(k, 64).unwrap();
            if rv != k {
                assert_ne!(
                    keyed_rand(SeedMaterial::new(k, 7, 0)),
                    keyed_rand(SeedMaterial::new(rv, 7, 0))
                );
            }
        }
    }

    #[test]
    fn keyed_rand_avalanche() {
        let mut state = 99u64;
        let samples = 10_000;
        for bit in 0..104 {
            let mut flipped = 0u64;
            for _ in 0..samples / 100 {
                state = keyed_rand(SeedMaterial::new(state, 1, 1));
                let base = SeedMaterial::new(state, (state >> 7) as u32, (state >> 50) as u8);
                let mut bytes = base.to_bytes();
                bytes[bit / 8] ^= 0x80 >> (bit % 8);
                let other = SeedMaterial::new(
                    u64::from_be_bytes(bytes[..8].try_into().unwrap()),
                    u32::from_be_bytes(bytes[8..12].try_into().unwrap()),
                    bytes[12],
                );
                flipped += (keyed_rand(base) ^ keyed_rand(other)).count_ones() as u64;
            }
            let mean = flipped as f64 / (samples / 100) as f64;
            assert!(mean >= 20.0, "bit {bit}: mean flipped {mean}");
        }
    }

    proptest! {
        #[test]
        fn bit_reverse_involution(v: u64, width in 1u32..=64) {
            let v = if width == 64 { v } else { v & ((1u64 << width) - 1) };
            let once = bit_reverse(v, width).unwrap();
            prop_assert_eq!(bit_reverse(once, width).unwrap(), v);
        }

        #[test]
        fn pow_exponent_addition(base in 0u64..1 << 40, a in 0u64..1 << 20, b in 0u64..1 << 20, m in 2u64..1 << 62) {
            let lhs = mod_pow(base, a + b, m).unwrap();
            let rhs = mul_mod(mod_pow(base, a, m).unwrap(), mod_pow(base, b, m).unwrap(), m);
            prop_assert_eq!(lhs, rhs);
        }
    }
}
