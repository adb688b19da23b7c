//! The invertible steganography network: token affine coupling blocks and
//! the feature enhancement network on the decode path.
//!
//! Each coupling block mixes the host token stream `h` and the data token
//! stream `t` with three attention-based function learners:
//!
//! ```text
//! forward:  h' = h + phi(t)
//!           t' = eta(h') + t . exp(rho(h'))
//! inverse:  t  = (t' - eta(h')) . exp(-rho(h'))
//!           h  = h' - phi(t)
//! ```
//!
//! The inverse reuses the same `phi`, `eta`, `rho` weights, so one set of
//! parameters serves both embedding and revealing. `rho` is clamped before
//! `exp` to keep the scales bounded regardless of input magnitude.

use candle_core::Tensor;

use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::nn::{apply_conv, conv3x3, Init, ParamStore, TokenLearner};

struct CouplingLearners {
    phi: TokenLearner,
    eta: TokenLearner,
    rho: TokenLearner,
}

/// Stack of token affine coupling blocks with shared forward/inverse weights.
pub struct TacbStack {
    blocks: Vec<CouplingLearners>,
    rho_max: f64,
    dim: usize,
}

impl TacbStack {
    pub fn new(ps: &ParamStore, name: &str, n_blocks: usize, dim: usize, heads: usize, rho_max: f64) -> Result<Self> {
        let blocks = (0..n_blocks)
            .map(|i| {
                Ok(CouplingLearners {
                    phi: TokenLearner::new(ps, &format!("{name}.{i}.phi"), dim, heads)?,
                    eta: TokenLearner::new(ps, &format!("{name}.{i}.eta"), dim, heads)?,
                    rho: TokenLearner::new(ps, &format!("{name}.{i}.rho"), dim, heads)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TacbStack { blocks, rho_max, dim })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    fn check(&self, h: &Tensor, t: &Tensor) -> Result<()> {
        if h.dims() != t.dims() {
            return Err(Error::shape(format!("{:?}", h.dims()), format!("{:?}", t.dims())));
        }
        let (_, _, d) = h.dims3()?;
        if d != self.dim {
            return Err(Error::shape(format!("token dim {}", self.dim), format!("{d}")));
        }
        Ok(())
    }

    fn scale(&self, learner: &TokenLearner, x: &Tensor) -> Result<Tensor> {
        Ok(learner.forward(x)?.clamp(-self.rho_max, self.rho_max)?)
    }

    /// Run all blocks forward: returns the stego token stream and the data
    /// residual stream (discarded at embed time, replaced by noise at decode).
    pub fn conceal(&self, host: &Tensor, data: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(host, data)?;
        let mut h = host.clone();
        let mut t = data.clone();
        for blk in &self.blocks {
            h = h.add(&blk.phi.forward(&t)?)?;
            let s = self.scale(&blk.rho, &h)?;
            t = blk.eta.forward(&h)?.add(&t.mul(&s.exp()?)?)?;
        }
        Ok((h, t))
    }

    /// Exact inverse of [`conceal`](Self::conceal) given both output streams.
    pub fn invert(&self, stego: &Tensor, residual: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(stego, residual)?;
        let mut h = stego.clone();
        let mut t = residual.clone();
        for blk in self.blocks.iter().rev() {
            let s = self.scale(&blk.rho, &h)?;
            t = t.sub(&blk.eta.forward(&h)?)?.mul(&s.neg()?.exp()?)?;
            h = h.sub(&blk.phi.forward(&t)?)?;
        }
        Ok((h, t))
    }

    /// Decode-path reveal: the residual stream is unknown, so it is seeded
    /// with Gaussian noise and the blocks are run in reverse. Returns the
    /// recovered data tokens (input to the inverse broadcast).
    pub fn reveal(&self, stego: &Tensor, noise: &Tensor) -> Result<Tensor> {
        Ok(self.invert(stego, noise)?.1)
    }
}

/// Nested-skip encoder-decoder that restores tampered stego images before
/// tokenization (UNet++-style, `scales` resolution levels).
pub struct Fen {
    enc: Vec<(Tensor, Tensor)>,
    nest: Vec<Vec<(Tensor, Tensor)>>,
    final_conv: (Tensor, Tensor),
    scales: usize,
    channels: usize,
}

impl Fen {
    pub fn new(ps: &ParamStore, name: &str, cfg: &NetConfig) -> Result<Self> {
        let scales = cfg.fen_scales.max(2);
        let c = cfg.fen_channels;
        let ch = |i: usize| c << i;

        let mut enc = Vec::new();
        for i in 0..scales {
            let in_ch = if i == 0 { 3 } else { ch(i - 1) };
            enc.push(conv3x3(ps, &format!("{name}.enc{i}"), in_ch, ch(i))?);
        }
        // nest[i][j-1] computes X_{i,j} from cat(X_{i,0..j}, up(X_{i+1,j-1}))
        let mut nest = Vec::new();
        for i in 0..scales - 1 {
            let mut row = Vec::new();
            for j in 1..scales - i {
                let in_ch = ch(i) * j + ch(i + 1);
                row.push(conv3x3(ps, &format!("{name}.x{i}_{j}"), in_ch, ch(i))?);
            }
            nest.push(row);
        }
        // Identity-initialized head: output starts as the input image.
        let final_conv = {
            let in_ch = ch(0) + 3;
            let w = ps.take_with(&format!("{name}.head.weight"), || {
                let mut data = vec![0f32; 3 * in_ch];
                for o in 0..3 {
                    data[o * in_ch + ch(0) + o] = 1.0;
                }
                Ok(Tensor::from_vec(data, (3, in_ch, 1, 1), &crate::tensor::device())?)
            })?;
            let b = ps.take(&format!("{name}.head.bias"), 3, Init::Zeros)?;
            (w, b)
        };
        Ok(Fen { enc, nest, final_conv, scales, channels: c })
    }

    /// `(B, 3, H, W)` -> `(B, 3, H, W)` restored image.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = img.dims4()?;
        if c != 3 {
            return Err(Error::shape("3 channels", format!("{c}")));
        }
        let div = 1 << (self.scales - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(format!("dims divisible by {div}"), format!("{h}x{w}")));
        }
        let relu = |t: Tensor| -> Result<Tensor> { Ok(t.relu()?) };

        // encoder column
        let mut x: Vec<Vec<Tensor>> = vec![Vec::new(); self.scales];
        let mut cur = img.clone();
        for i in 0..self.scales {
            if i > 0 {
                cur = cur.avg_pool2d(2)?;
            }
            cur = relu(apply_conv(&cur, &self.enc[i].0, &self.enc[i].1, 1)?)?;
            x[i].push(cur.clone());
        }
        // nested skip refinements
        for j in 1..self.scales {
            for i in 0..self.scales - j {
                let below = &x[i + 1][j - 1];
                let (_, _, bh, bw) = below.dims4()?;
                let up = below.upsample_nearest2d(bh * 2, bw * 2)?;
                let mut cat = x[i].clone();
                cat.push(up);
                let cat = Tensor::cat(&cat, 1)?;
                let (w_, b_) = &self.nest[i][j - 1];
                x[i].push(relu(apply_conv(&cat, w_, b_, 1)?)?);
            }
        }
        let top = x[0].last().expect("scales >= 2");
        let features = Tensor::cat(&[top.clone(), img.clone()], 1)?;
        apply_conv(&features, &self.final_conv.0, &self.final_conv.1, 0)
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}
