//! Link payload framing and the binary data image.
//!
//! A metadata link is framed as `[1-byte length | link bytes]`, BCH parity
//! is appended, and the resulting bits are laid out row-major (MSB-first
//! within each byte) on a small black/white module grid. The grid is what
//! the embedding network actually hides; everything in this module is pure
//! bit manipulation.

pub mod bch;

use crate::error::{Error, Result};
use bch::BchCode;
use serde::{Deserialize, Serialize};

/// Binary module grid, 0 = black, 1 = white.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataImage {
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl DataImage {
    pub fn new(h: usize, w: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::shape(format!("{h}x{w} bits"), format!("{}", bits.len())));
        }
        debug_assert!(bits.iter().all(|&b| b <= 1));
        Ok(DataImage { h, w, bits })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        DataImage { h, w, bits: vec![0; h * w] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.bits[row * self.w + col]
    }
}

/// Row-major bit vector -> module grid.
pub fn bits_to_image(bits: &[u8], h: usize, w: usize) -> Result<DataImage> {
    DataImage::new(h, w, bits.to_vec())
}

/// Module grid -> row-major bit vector. Exact inverse of [`bits_to_image`].
pub fn image_to_bits(img: &DataImage) -> Vec<u8> {
    img.bits.clone()
}

/// Result of decoding a data image back into a link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedPayload {
    pub link: String,
    /// Bits the BCH stage had to flip.
    pub corrected_bits: usize,
}

/// Payload intermediate: framed message bits and their parity.
#[derive(Debug, Clone)]
pub struct Payload {
    pub link: String,
    /// Length header + link bytes, MSB-first.
    pub raw_bits: Vec<u8>,
    /// BCH parity bits.
    pub ecc_bits: Vec<u8>,
    pub capacity: usize,
}

/// BCH code selection, exposed in configs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct BchParams {
    /// Field degree: codewords are 2^m - 1 bits.
    pub m: u32,
    /// Correction capability in bits per codeword.
    pub t: usize,
}

impl BchParams {
    /// BCH(255, 191, t=8), fits the default 18x18 grid.
    pub const FULL: BchParams = BchParams { m: 8, t: 8 };
    /// BCH(31, 16, t=3), fits the 32-bit toy grid.
    pub const TOY: BchParams = BchParams { m: 5, t: 3 };
}

/// Converts links to fixed-capacity data images and back.
pub struct PayloadCodec {
    code: BchCode,
    grid_h: usize,
    grid_w: usize,
}

impl PayloadCodec {
    pub fn new(params: BchParams, grid_h: usize, grid_w: usize) -> Result<Self> {
        let code = BchCode::new(params.m, params.t);
        let capacity = grid_h * grid_w;
        if code.n > capacity {
            return Err(Error::Config(format!(
                "BCH codeword ({} bits) exceeds grid capacity ({capacity} bits)",
                code.n
            )));
        }
        Ok(PayloadCodec { code, grid_h, grid_w })
    }

    /// Total bits on the grid.
    pub fn capacity(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    /// Longest encodable link in bytes.
    pub fn max_link_bytes(&self) -> usize {
        (self.code.k - 8) / 8
    }

    /// Bit errors correctable per codeword.
    pub fn correction_capability(&self) -> usize {
        self.code.t
    }

    fn frame(&self, link: &str) -> Result<Payload> {
        let bytes = link.as_bytes();
        if bytes.len() > self.max_link_bytes() || bytes.len() > 255 {
            return Err(Error::PayloadTooLong {
                needed: 8 + 8 * bytes.len() + (self.code.n - self.code.k),
                capacity: self.capacity(),
            });
        }
        let mut raw = Vec::with_capacity(8 + 8 * bytes.len());
        push_byte_bits(&mut raw, bytes.len() as u8);
        for &b in bytes {
            push_byte_bits(&mut raw, b);
        }
        let mut message = raw.clone();
        message.resize(self.code.k, 0);
        let cw = self.code.encode(&message);
        Ok(Payload {
            link: link.to_string(),
            raw_bits: raw,
            ecc_bits: cw[self.code.k..].to_vec(),
            capacity: self.capacity(),
        })
    }

    /// Render a link onto the module grid:
    /// `[length header | link bytes | BCH parity | zero padding]`.
    pub fn encode(&self, link: &str) -> Result<DataImage> {
        let payload = self.frame(link)?;
        let mut bits = payload.raw_bits.clone();
        bits.resize(self.code.k, 0);
        bits.extend_from_slice(&payload.ecc_bits);
        bits.resize(self.capacity(), 0);
        bits_to_image(&bits, self.grid_h, self.grid_w)
    }

    /// Recover the link from a (possibly corrupted) module grid.
    pub fn decode(&self, img: &DataImage) -> Result<DecodedPayload> {
        let (h, w) = img.dims();
        if (h, w) != (self.grid_h, self.grid_w) {
            return Err(Error::shape(
                format!("{}x{} grid", self.grid_h, self.grid_w),
                format!("{h}x{w}"),
            ));
        }
        let bits = image_to_bits(img);
        let mut word = bits[..self.code.n].to_vec();
        let corrected_bits = self.code.decode(&mut word)?;

        let len = byte_from_bits(&word[0..8]) as usize;
        if len > self.max_link_bytes() {
            return Err(Error::FramingError(format!(
                "length header {len} exceeds maximum {}",
                self.max_link_bytes()
            )));
        }
        let mut bytes = Vec::with_capacity(len);
        for i in 0..len {
            bytes.push(byte_from_bits(&word[8 + 8 * i..16 + 8 * i]));
        }
        // Message bits past the frame must be the zero padding we wrote.
        if word[8 + 8 * len..self.code.k].iter().any(|&b| b != 0) {
            return Err(Error::FramingError("nonzero message padding".into()));
        }
        let link = String::from_utf8(bytes)
            .map_err(|e| Error::FramingError(format!("link is not UTF-8: {e}")))?;
        Ok(DecodedPayload { link, corrected_bits })
    }
}

fn push_byte_bits(bits: &mut Vec<u8>, byte: u8) {
    for i in (0..8).rev() {
        bits.push((byte >> i) & 1);
    }
}

fn byte_from_bits(bits: &[u8]) -> u8 {
    bits.iter().fold(0u8, |acc, &b| (acc << 1) | b)
}
