//! Anchor embedding for cropping resistance.
//!
//! A constant anchor image is co-embedded into the carrier through a
//! CNN-based coupling flow. When the stego image is cropped, the decoded
//! anchor estimate shows the same crop of the anchor pattern, which the
//! crop estimator then localizes by template matching.
//!
//! The couplings here are convolutional rather than attention-based: crop
//! localization needs the anchor's pixel positions to stay put, so the flow
//! should interact across channels, not across distant spatial positions.

use candle_core::Tensor;

use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::nn::{apply_conv, conv3x3, zero_conv3x3, ParamStore};
use crate::tensor::device;

/// Deterministic anchor pattern. Channel 0 ramps along x and channel 1
/// along y, so any crop's position and scale are globally identifiable from
/// local means alone; channel 2 plus a faint fine grid add the texture that
/// SSIM matching and subpixel refinement need. Smooth everywhere, so the
/// pattern survives resizing at every crop scale.
pub fn anchor_image(h: usize, w: usize) -> Result<Tensor> {
    let tau = std::f64::consts::TAU;
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        let yn = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let xn = (x as f64 + 0.5) / w as f64;
            let grid = 0.05 * (tau * 9.0 * xn).sin() * (tau * 9.0 * yn).sin();
            let v0 = 0.12 + 0.70 * xn + 0.06 * (tau * (3.1 * yn + 0.2)).sin() + grid;
            let v1 = 0.12 + 0.70 * yn + 0.06 * (tau * (2.6 * xn + 0.6)).sin() + grid;
            let v2 = 0.5
                + 0.24 * (tau * (2.3 * xn + 0.17)).sin() * (tau * (1.7 * yn + 0.43)).cos()
                + 0.12 * (tau * 0.9 * (xn - yn)).sin()
                + grid;
            let idx = y * w + x;
            data[idx] = v0.clamp(0.03, 0.97) as f32;
            data[h * w + idx] = v1.clamp(0.03, 0.97) as f32;
            data[2 * h * w + idx] = v2.clamp(0.03, 0.97) as f32;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &device())?)
}

/// FNV-1a over the quantized anchor bytes; stored in checkpoints so embed
/// and decode provably share one anchor.
pub fn anchor_hash(anchor: &Tensor) -> Result<u64> {
    let data = anchor.flatten_all()?.to_vec1::<f32>()?;
    let mut hash = 0xcbf29ce484222325u64;
    for v in data {
        for b in v.to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    Ok(hash)
}

/// Dense three-conv subnet with a zero-initialized head, so a fresh coupling
/// is the identity map.
struct DenseSubnet {
    c0: (Tensor, Tensor),
    c1: (Tensor, Tensor),
    head: (Tensor, Tensor),
}

impl DenseSubnet {
    fn new(ps: &ParamStore, name: &str, growth: usize) -> Result<Self> {
        Ok(DenseSubnet {
            c0: conv3x3(ps, &format!("{name}.c0"), 3, growth)?,
            c1: conv3x3(ps, &format!("{name}.c1"), 3 + growth, growth)?,
            head: zero_conv3x3(ps, &format!("{name}.head"), 3 + 2 * growth, 3)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let f0 = apply_conv(x, &self.c0.0, &self.c0.1, 1)?.relu()?;
        let cat0 = Tensor::cat(&[x.clone(), f0], 1)?;
        let f1 = apply_conv(&cat0, &self.c1.0, &self.c1.1, 1)?.relu()?;
        let cat1 = Tensor::cat(&[cat0, f1], 1)?;
        apply_conv(&cat1, &self.head.0, &self.head.1, 1)
    }
}

struct AnchorCoupling {
    phi: DenseSubnet,
    eta: DenseSubnet,
    rho: DenseSubnet,
}

/// Channelwise coupling flow embedding the anchor into the carrier image.
pub struct AnchorFlow {
    blocks: Vec<AnchorCoupling>,
    rho_max: f64,
}

impl AnchorFlow {
    pub fn new(ps: &ParamStore, name: &str, cfg: &NetConfig) -> Result<Self> {
        let blocks = (0..cfg.anchor_blocks)
            .map(|i| {
                Ok(AnchorCoupling {
                    phi: DenseSubnet::new(ps, &format!("{name}.{i}.phi"), cfg.anchor_hidden)?,
                    eta: DenseSubnet::new(ps, &format!("{name}.{i}.eta"), cfg.anchor_hidden)?,
                    rho: DenseSubnet::new(ps, &format!("{name}.{i}.rho"), cfg.anchor_hidden)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AnchorFlow { blocks, rho_max: cfg.rho_max })
    }

    fn check(&self, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.dims() != b.dims() {
            return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
        }
        Ok(())
    }

    fn scale(&self, subnet: &DenseSubnet, x: &Tensor) -> Result<Tensor> {
        Ok(subnet.forward(x)?.clamp(-self.rho_max, self.rho_max)?)
    }

    /// Embed the anchor: `(carrier, anchor) -> (stego, residual)`.
    pub fn embed(&self, carrier: &Tensor, anchor: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(carrier, anchor)?;
        let mut x = carrier.clone();
        let mut y = anchor.clone();
        for blk in &self.blocks {
            x = x.add(&blk.phi.forward(&y)?)?;
            let s = self.scale(&blk.rho, &x)?;
            y = blk.eta.forward(&x)?.add(&y.mul(&s.exp()?)?)?;
        }
        Ok((x, y))
    }

    /// Exact inverse of [`embed`](Self::embed) given both outputs.
    pub fn invert(&self, stego: &Tensor, residual: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(stego, residual)?;
        let mut x = stego.clone();
        let mut y = residual.clone();
        for blk in self.blocks.iter().rev() {
            let s = self.scale(&blk.rho, &x)?;
            y = y.sub(&blk.eta.forward(&x)?)?.mul(&s.neg()?.exp()?)?;
            x = x.sub(&blk.phi.forward(&y)?)?;
        }
        Ok((x, y))
    }

    /// Decode path: the residual is unknown and seeded with noise. Returns
    /// `(carrier_estimate, anchor_estimate)`.
    pub fn decode(&self, received: &Tensor, noise: &Tensor) -> Result<(Tensor, Tensor)> {
        self.invert(received, noise)
    }
}
