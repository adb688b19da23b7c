//! Binary BCH codec over GF(2^m).
//!
//! Systematic encoding: the codeword is the k message bits followed by
//! n-k parity bits, n = 2^m - 1. Decoding runs Berlekamp-Massey on the
//! syndromes and a Chien search over the error locator; up to `t` bit
//! errors per codeword are corrected, anything beyond is reported as a
//! failure instead of being silently miscorrected.

use crate::error::{Error, Result};

/// Primitive polynomials for GF(2^m), m in 3..=10, low bit = x^0.
fn primitive_poly(m: u32) -> u32 {
    match m {
        3 => 0b1011,
        4 => 0b1_0011,
        5 => 0b10_0101,
        6 => 0b100_0011,
        7 => 0b1000_1001,
        8 => 0b1_0001_1101,
        9 => 0b10_0000_1001,
        10 => 0b100_0000_1001,
        _ => panic!("unsupported GF(2^{m})"),
    }
}

/// Log/antilog tables for GF(2^m).
struct Field {
    n: usize, // 2^m - 1
    exp: Vec<u16>,
    log: Vec<u16>,
}

impl Field {
    fn new(m: u32) -> Self {
        let n = (1usize << m) - 1;
        let poly = primitive_poly(m);
        let mut exp = vec![0u16; 2 * n];
        let mut log = vec![0u16; n + 1];
        let mut x = 1u32;
        for i in 0..n {
            exp[i] = x as u16;
            log[x as usize] = i as u16;
            x <<= 1;
            if x & (1 << m) != 0 {
                x ^= poly;
            }
        }
        for i in n..2 * n {
            exp[i] = exp[i - n];
        }
        Field { n, exp, log }
    }

    #[inline]
    fn mul(&self, a: u16, b: u16) -> u16 {
        if a == 0 || b == 0 {
            0
        } else {
            self.exp[self.log[a as usize] as usize + self.log[b as usize] as usize]
        }
    }

    #[inline]
    fn inv(&self, a: u16) -> u16 {
        debug_assert_ne!(a, 0);
        self.exp[self.n - self.log[a as usize] as usize]
    }

    /// alpha^e with e taken mod n.
    #[inline]
    fn alpha_pow(&self, e: usize) -> u16 {
        self.exp[e % self.n]
    }
}

/// A binary BCH(n, k) code correcting up to `t` errors.
pub struct BchCode {
    field: Field,
    /// Codeword length, 2^m - 1.
    pub n: usize,
    /// Message length.
    pub k: usize,
    /// Correction capability in bits.
    pub t: usize,
    /// Generator polynomial, gen[i] = coefficient of x^i, values 0/1.
    gen: Vec<u8>,
}

impl BchCode {
    pub fn new(m: u32, t: usize) -> Self {
        let field = Field::new(m);
        let n = field.n;
        assert!(t >= 1 && 2 * t < n, "t out of range for n={n}");

        // Generator = product of minimal polynomials of alpha^1 .. alpha^2t,
        // one per distinct cyclotomic coset.
        let mut seen = vec![false; n];
        let mut gen: Vec<u8> = vec![1];
        for s in 1..=2 * t {
            let s = s % n;
            if seen[s] {
                continue;
            }
            // coset of s
            let mut coset = Vec::new();
            let mut c = s;
            loop {
                seen[c] = true;
                coset.push(c);
                c = (c * 2) % n;
                if c == s {
                    break;
                }
            }
            // minimal polynomial: prod (x - alpha^i) over the coset
            let mut mp: Vec<u16> = vec![1];
            for &i in &coset {
                let root = field.alpha_pow(i);
                let mut next = vec![0u16; mp.len() + 1];
                for (d, &coef) in mp.iter().enumerate() {
                    next[d + 1] ^= coef; // x * mp
                    next[d] ^= field.mul(coef, root);
                }
                mp = next;
            }
            // coefficients must collapse to GF(2)
            let mp_bits: Vec<u8> = mp
                .iter()
                .map(|&c| {
                    debug_assert!(c <= 1, "minimal polynomial not binary");
                    c as u8
                })
                .collect();
            gen = poly_mul_gf2(&gen, &mp_bits);
        }

        let k = n - (gen.len() - 1);
        BchCode { field, n, k, t, gen }
    }

    /// Parity bits for a k-bit message (values 0/1), returned LSB-degree-first
    /// reversed into transmission order (highest degree first).
    fn parity(&self, message: &[u8]) -> Vec<u8> {
        let r = self.n - self.k;
        // Remainder of message(x) * x^r divided by gen(x), computed MSB-first.
        let mut rem = vec![0u8; r];
        for &bit in message {
            let feedback = bit ^ rem[0];
            rem.rotate_left(1);
            rem[r - 1] = 0;
            if feedback == 1 {
                // gen has degree r; subtract feedback * gen (skip leading term)
                for i in 0..r {
                    rem[i] ^= self.gen[r - 1 - i];
                }
            }
        }
        rem
    }

    /// Systematic encode: message (k bits) -> codeword (n bits).
    pub fn encode(&self, message: &[u8]) -> Vec<u8> {
        assert_eq!(message.len(), self.k, "message must be k bits");
        let mut cw = Vec::with_capacity(self.n);
        cw.extend_from_slice(message);
        cw.extend_from_slice(&self.parity(message));
        cw
    }

    /// Correct up to t errors in place. Returns the number of corrected bits.
    pub fn decode(&self, word: &mut [u8]) -> Result<usize> {
        if word.len() != self.n {
            return Err(Error::shape(
                format!("{} codeword bits", self.n),
                format!("{}", word.len()),
            ));
        }
        let f = &self.field;
        let two_t = 2 * self.t;

        // Syndromes S_j = r(alpha^j); bit i is the coefficient of x^(n-1-i).
        let mut synd = vec![0u16; two_t + 1];
        let mut all_zero = true;
        for j in 1..=two_t {
            let mut s = 0u16;
            for (i, &bit) in word.iter().enumerate() {
                if bit == 1 {
                    s ^= f.alpha_pow(j * (self.n - 1 - i));
                }
            }
            synd[j] = s;
            all_zero &= s == 0;
        }
        if all_zero {
            return Ok(0);
        }

        // Berlekamp-Massey.
        let mut sigma: Vec<u16> = vec![1];
        let mut prev: Vec<u16> = vec![1];
        let mut l = 0usize;
        let mut shift = 1usize;
        let mut b = 1u16;
        for step in 0..two_t {
            let mut d = synd[step + 1];
            for i in 1..=l.min(sigma.len() - 1) {
                d ^= f.mul(sigma[i], synd[step + 1 - i]);
            }
            if d == 0 {
                shift += 1;
            } else if 2 * l <= step {
                let old = sigma.clone();
                let scale = f.mul(d, f.inv(b));
                sigma = poly_add_scaled(f, &sigma, &prev, scale, shift);
                l = step + 1 - l;
                prev = old;
                b = d;
                shift = 1;
            } else {
                let scale = f.mul(d, f.inv(b));
                sigma = poly_add_scaled(f, &sigma, &prev, scale, shift);
                shift += 1;
            }
        }
        let deg = sigma.iter().rposition(|&c| c != 0).unwrap_or(0);
        if l > self.t || deg != l {
            return Err(Error::EccFailure { t: self.t });
        }

        // Chien search: sigma(alpha^{-e}) == 0 => error at exponent e.
        let mut flips = Vec::new();
        for e in 0..self.n {
            let mut v = 0u16;
            for (d, &coef) in sigma.iter().enumerate() {
                if coef != 0 {
                    // coef * alpha^{-e*d}
                    let expo = (self.n - e % self.n) % self.n * d;
                    v ^= f.mul(coef, f.alpha_pow(expo));
                }
            }
            if v == 0 {
                flips.push(self.n - 1 - e);
            }
        }
        if flips.len() != l {
            return Err(Error::EccFailure { t: self.t });
        }
        for &i in &flips {
            word[i] ^= 1;
        }

        // Re-check: corrected word must be a codeword.
        for j in 1..=two_t {
            let mut s = 0u16;
            for (i, &bit) in word.iter().enumerate() {
                if bit == 1 {
                    s ^= f.alpha_pow(j * (self.n - 1 - i));
                }
            }
            if s != 0 {
                return Err(Error::EccFailure { t: self.t });
            }
        }
        Ok(flips.len())
    }
}

/// GF(2) polynomial product (bit vectors, index = degree).
fn poly_mul_gf2(a: &[u8], b: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        if ai == 1 {
            for (j, &bj) in b.iter().enumerate() {
                out[i + j] ^= bj;
            }
        }
    }
    out
}

/// sigma + scale * x^shift * prev over GF(2^m).
fn poly_add_scaled(f: &Field, sigma: &[u16], prev: &[u16], scale: u16, shift: usize) -> Vec<u16> {
    let mut out = sigma.to_vec();
    let needed = prev.len() + shift;
    if out.len() < needed {
        out.resize(needed, 0);
    }
    for (i, &p) in prev.iter().enumerate() {
        out[i + shift] ^= f.mul(scale, p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn known_code_dimensions() {
        let code = BchCode::new(8, 8);
        assert_eq!((code.n, code.k, code.t), (255, 191, 8));
        let code = BchCode::new(5, 3);
        assert_eq!((code.n, code.k, code.t), (31, 16, 3));
        let code = BchCode::new(4, 2);
        assert_eq!((code.n, code.k, code.t), (15, 7, 2));
    }

    #[test]
    fn roundtrip_no_errors() {
        let code = BchCode::new(5, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..50 {
            let msg: Vec<u8> = (0..code.k).map(|_| rng.random_range(0..2) as u8).collect();
            let mut cw = code.encode(&msg);
            assert_eq!(code.decode(&mut cw).unwrap(), 0);
            assert_eq!(&cw[..code.k], &msg[..]);
        }
    }

    #[test]
    fn corrects_up_to_t_errors() {
        for (m, t) in [(5u32, 3usize), (8, 8)] {
            let code = BchCode::new(m, t);
            let mut rng = ChaCha12Rng::seed_from_u64(7 + m as u64);
            for trial in 0..200 {
                let msg: Vec<u8> =
                    (0..code.k).map(|_| rng.random_range(0..2) as u8).collect();
                let clean = code.encode(&msg);
                let e = trial % (t + 1);
                let mut word = clean.clone();
                let mut positions: Vec<usize> = (0..code.n).collect();
                positions.shuffle(&mut rng);
                for &p in positions.iter().take(e) {
                    word[p] ^= 1;
                }
                let corrected = code.decode(&mut word).unwrap();
                assert_eq!(corrected, e);
                assert_eq!(word, clean);
            }
        }
    }

    #[test]
    fn rejects_t_plus_one_errors() {
        let code = BchCode::new(8, 8);
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let mut rejected = 0;
        for _ in 0..50 {
            let msg: Vec<u8> = (0..code.k).map(|_| rng.random_range(0..2) as u8).collect();
            let clean = code.encode(&msg);
            let mut word = clean.clone();
            let mut positions: Vec<usize> = (0..code.n).collect();
            positions.shuffle(&mut rng);
            for &p in positions.iter().take(code.t + 1) {
                word[p] ^= 1;
            }
            match code.decode(&mut word) {
                Err(Error::EccFailure { .. }) => rejected += 1,
                Ok(_) => {
                    // Bounded-distance decoding can land on a different
                    // codeword; it must never return the original message.
                    assert_ne!(&word[..code.k], &msg[..]);
                }
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
        assert!(rejected >= 48, "only {rejected}/50 rejected");
    }
}
