//! Small neural-net toolkit on top of candle: a deterministic parameter
//! store and the attention blocks shared by the tokenizers and the coupling
//! learners.
//!
//! Parameters are created (or restored) by name through [`ParamStore`], so
//! initialization is reproducible under a seed and checkpoints are plain
//! name -> tensor maps.

use std::cell::RefCell;
use std::collections::HashMap;

use candle_core::{DType, Tensor, Var};
use candle_nn::ops::softmax_last_dim;
use candle_nn::{LayerNorm, Linear, Module};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::device;

/// How a fresh parameter tensor is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal(0, std).
    Normal(f64),
    Uniform(f64, f64),
    /// Identity matrix (square 2-D shapes only).
    Eye,
}

/// Named trainable parameters with seeded initialization.
pub struct ParamStore {
    rng: RefCell<ChaCha12Rng>,
    vars: RefCell<Vec<(String, Var, bool)>>,
    restored: HashMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            rng: RefCell::new(ChaCha12Rng::seed_from_u64(seed)),
            vars: RefCell::new(Vec::new()),
            restored: HashMap::new(),
        }
    }

    /// A store that resolves names from a checkpoint tensor map first.
    pub fn from_tensors(seed: u64, tensors: HashMap<String, Tensor>) -> Self {
        ParamStore { restored: tensors, ..ParamStore::new(seed) }
    }

    /// Create (or restore) the named parameter and return a tensor view that
    /// participates in autograd.
    pub fn take<S: Into<candle_core::Shape>>(&self, name: &str, shape: S, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        let tensor = match self.lookup(name, shape.dims())? {
            Some(t) => t,
            None => self.fresh(&shape, init)?,
        };
        self.register(name, tensor, true)
    }

    /// Like [`take`](Self::take) but with caller-provided initial contents.
    pub fn take_with<F>(&self, name: &str, build: F) -> Result<Tensor>
    where
        F: FnOnce() -> Result<Tensor>,
    {
        let tensor = match self.restored.get(name) {
            Some(t) => t.clone(),
            None => build()?,
        };
        self.register(name, tensor, true)
    }

    /// A constant that is serialized with the model but never optimized.
    pub fn freeze<F>(&self, name: &str, build: F) -> Result<Tensor>
    where
        F: FnOnce() -> Result<Tensor>,
    {
        let tensor = match self.restored.get(name) {
            Some(t) => t.clone(),
            None => build()?,
        };
        self.register(name, tensor, false)
    }

    fn lookup(&self, name: &str, dims: &[usize]) -> Result<Option<Tensor>> {
        match self.restored.get(name) {
            Some(t) => {
                if t.dims() != dims {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint tensor {name} has shape {:?}, expected {:?}",
                        t.dims(),
                        dims
                    )));
                }
                Ok(Some(t.clone()))
            }
            None => Ok(None),
        }
    }

    fn register(&self, name: &str, tensor: Tensor, trainable: bool) -> Result<Tensor> {
        {
            let vars = self.vars.borrow();
            if vars.iter().any(|(n, _, _)| n == name) {
                return Err(Error::Checkpoint(format!("duplicate parameter name {name}")));
            }
        }
        if trainable {
            let var = Var::from_tensor(&tensor)?;
            let view = var.as_tensor().clone();
            self.vars.borrow_mut().push((name.to_string(), var, true));
            Ok(view)
        } else {
            // Frozen tensors are stored as detached constants.
            let t = tensor.detach();
            let var = Var::from_tensor(&t)?;
            self.vars.borrow_mut().push((name.to_string(), var, false));
            Ok(t)
        }
    }

    fn fresh(&self, shape: &candle_core::Shape, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = self.rng.borrow_mut();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c as f32; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0f64, std).expect("std >= 0");
                (0..n).map(|_| d.sample(&mut *rng) as f32).collect()
            }
            Init::Uniform(lo, hi) => (0..n).map(|_| rng.random_range(lo..hi) as f32).collect(),
            Init::Eye => {
                let dims = shape.dims();
                if dims.len() != 2 || dims[0] != dims[1] {
                    return Err(Error::Config("Eye init needs a square matrix".into()));
                }
                let k = dims[0];
                let mut v = vec![0.0f32; k * k];
                for i in 0..k {
                    v[i * k + i] = 1.0;
                }
                v
            }
        };
        Ok(Tensor::from_vec(data, shape.clone(), &device())?)
    }

    /// Trainable vars with their names, in creation order.
    pub fn named_trainable(&self) -> Vec<(String, Var)> {
        self.vars
            .borrow()
            .iter()
            .filter(|(_, _, trainable)| *trainable)
            .map(|(n, v, _)| (n.clone(), v.clone()))
            .collect()
    }

    /// All trainable vars, in creation order.
    pub fn trainable(&self) -> Vec<Var> {
        self.vars
            .borrow()
            .iter()
            .filter(|(_, _, trainable)| *trainable)
            .map(|(_, v, _)| v.clone())
            .collect()
    }

    /// Named snapshot of the current parameter values (frozen ones included).
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.vars
            .borrow()
            .iter()
            .map(|(n, v, _)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.vars.borrow().iter().map(|(_, v, _)| v.as_tensor().elem_count()).sum()
    }
}

fn linear(ps: &ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
    // LeCun-style fan-in scaling keeps token magnitudes stable at init.
    let std = (1.0 / in_dim as f64).sqrt();
    let w = ps.take(&format!("{name}.weight"), (out_dim, in_dim), Init::Normal(std))?;
    let b = ps.take(&format!("{name}.bias"), out_dim, Init::Zeros)?;
    Ok(Linear::new(w, Some(b)))
}

fn zero_linear(ps: &ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let w = ps.take(&format!("{name}.weight"), (out_dim, in_dim), Init::Zeros)?;
    let b = ps.take(&format!("{name}.bias"), out_dim, Init::Zeros)?;
    Ok(Linear::new(w, Some(b)))
}

fn layer_norm(ps: &ParamStore, name: &str, dim: usize) -> Result<LayerNorm> {
    let w = ps.take(&format!("{name}.weight"), dim, Init::Ones)?;
    let b = ps.take(&format!("{name}.bias"), dim, Init::Zeros)?;
    Ok(LayerNorm::new(w, b, 1e-5))
}

/// Pre-norm multi-head self-attention + MLP block on `(B, N, D)` tokens.
pub struct AttentionBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    dim: usize,
}

impl AttentionBlock {
    pub fn new(ps: &ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        assert!(dim % heads == 0, "dim must divide into heads");
        Ok(AttentionBlock {
            norm1: layer_norm(ps, &format!("{name}.norm1"), dim)?,
            qkv: linear(ps, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: linear(ps, &format!("{name}.proj"), dim, dim)?,
            norm2: layer_norm(ps, &format!("{name}.norm2"), dim)?,
            fc1: linear(ps, &format!("{name}.fc1"), dim, 2 * dim)?,
            fc2: linear(ps, &format!("{name}.fc2"), 2 * dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        if d != self.dim {
            return Err(Error::shape(format!("token dim {}", self.dim), format!("{d}")));
        }
        let hd = d / self.heads;
        let qkv = self.qkv.forward(&self.norm1.forward(x)?)?; // (B, N, 3D)
        let qkv = qkv.reshape((b, n, 3, self.heads, hd))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?; // (B, heads, N, hd)
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = q
            .matmul(&k.transpose(2, 3)?)?
            .affine(1.0 / (hd as f64).sqrt(), 0.0)?;
        let att = softmax_last_dim(&att)?;
        let ctx = att.matmul(&v)?; // (B, heads, N, hd)
        let ctx = ctx.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        let x = x.add(&self.proj.forward(&ctx)?)?;
        let y = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        Ok(x.add(&y)?)
    }
}

/// Attention-based function learner used inside coupling blocks. The final
/// projection starts at zero so a freshly initialized coupling is exactly
/// the identity map.
pub struct TokenLearner {
    block: AttentionBlock,
    out: Linear,
}

impl TokenLearner {
    pub fn new(ps: &ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(TokenLearner {
            block: AttentionBlock::new(ps, &format!("{name}.block"), dim, heads)?,
            out: zero_linear(ps, &format!("{name}.out"), dim, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.out.forward(&self.block.forward(x)?)?)
    }
}

/// Patch-attention image tokenizer: conv patch embedding, learned positional
/// table, `depth` attention blocks, final norm.
pub struct Tokenizer {
    patch_w: Tensor,
    patch_b: Tensor,
    pos: Tensor,
    blocks: Vec<AttentionBlock>,
    norm: LayerNorm,
    pub patch: usize,
    pub in_ch: usize,
    pub dim: usize,
    grid: (usize, usize),
}

impl Tokenizer {
    pub fn new(
        ps: &ParamStore,
        name: &str,
        in_ch: usize,
        net: (usize, usize),
        patch: usize,
        dim: usize,
        heads: usize,
        depth: usize,
    ) -> Result<Self> {
        let (h, w) = net;
        assert!(h % patch == 0 && w % patch == 0, "net size must be a multiple of patch");
        let grid = (h / patch, w / patch);
        let n = grid.0 * grid.1;
        let std = (1.0 / (in_ch * patch * patch) as f64).sqrt();
        let patch_w =
            ps.take(&format!("{name}.patch.weight"), (dim, in_ch, patch, patch), Init::Normal(std))?;
        let patch_b = ps.take(&format!("{name}.patch.bias"), dim, Init::Zeros)?;
        let pos = ps.take(&format!("{name}.pos"), (1, n, dim), Init::Normal(0.02))?;
        let blocks = (0..depth)
            .map(|i| AttentionBlock::new(ps, &format!("{name}.block{i}"), dim, heads))
            .collect::<Result<Vec<_>>>()?;
        let norm = layer_norm(ps, &format!("{name}.norm"), dim)?;
        Ok(Tokenizer { patch_w, patch_b, pos, blocks, norm, patch, in_ch, dim, grid })
    }

    pub fn token_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// `(B, C, H, W)` image -> `(B, N, D)` tokens.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = img.dims4()?;
        if c != self.in_ch || (h / self.patch, w / self.patch) != self.grid {
            return Err(Error::shape(
                format!("({}, {}x{})", self.in_ch, self.grid.0 * self.patch, self.grid.1 * self.patch),
                format!("({c}, {h}x{w})"),
            ));
        }
        let x = img.conv2d(&self.patch_w, 0, self.patch, 1, 1)?; // (B, D, gh, gw)
        let x = x.broadcast_add(&self.patch_b.reshape((1, self.dim, 1, 1))?)?;
        let n = self.token_count();
        let mut x = x.reshape((b, self.dim, n))?.transpose(1, 2)?.contiguous()?;
        x = x.broadcast_add(&self.pos)?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        Ok(self.norm.forward(&x)?)
    }
}

/// Transformer detokenizer: attention blocks then a linear patch projection
/// folded back into an image.
pub struct Detokenizer {
    pos: Tensor,
    blocks: Vec<AttentionBlock>,
    norm: LayerNorm,
    out: Linear,
    patch: usize,
    out_ch: usize,
    dim: usize,
    grid: (usize, usize),
}

impl Detokenizer {
    pub fn new(
        ps: &ParamStore,
        name: &str,
        out_ch: usize,
        net: (usize, usize),
        patch: usize,
        dim: usize,
        heads: usize,
        depth: usize,
    ) -> Result<Self> {
        let (h, w) = net;
        let grid = (h / patch, w / patch);
        let n = grid.0 * grid.1;
        let pos = ps.take(&format!("{name}.pos"), (1, n, dim), Init::Normal(0.02))?;
        let blocks = (0..depth)
            .map(|i| AttentionBlock::new(ps, &format!("{name}.block{i}"), dim, heads))
            .collect::<Result<Vec<_>>>()?;
        let norm = layer_norm(ps, &format!("{name}.norm"), dim)?;
        let out = linear(ps, &format!("{name}.out"), dim, out_ch * patch * patch)?;
        Ok(Detokenizer { pos, blocks, norm, out, patch, out_ch, dim, grid })
    }

    /// `(B, N, D)` tokens -> `(B, C, H, W)` image (linear output, no activation).
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, n, d) = tokens.dims3()?;
        let (gh, gw) = self.grid;
        if n != gh * gw || d != self.dim {
            return Err(Error::shape(format!("({}, {})", gh * gw, self.dim), format!("({n}, {d})")));
        }
        let mut x = tokens.broadcast_add(&self.pos)?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        let x = self.out.forward(&self.norm.forward(&x)?)?; // (B, N, C*p*p)
        let p = self.patch;
        let x = x
            .reshape((b, gh, gw, self.out_ch, p, p))?
            .permute((0, 3, 1, 4, 2, 5))?
            .contiguous()?
            .reshape((b, self.out_ch, gh * p, gw * p))?;
        Ok(x)
    }
}

/// 3x3 conv layer parameters.
pub fn conv3x3(ps: &ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<(Tensor, Tensor)> {
    let std = (2.0 / (in_ch * 9) as f64).sqrt();
    let w = ps.take(&format!("{name}.weight"), (out_ch, in_ch, 3, 3), Init::Normal(std))?;
    let b = ps.take(&format!("{name}.bias"), out_ch, Init::Zeros)?;
    Ok((w, b))
}

pub fn zero_conv3x3(ps: &ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<(Tensor, Tensor)> {
    let w = ps.take(&format!("{name}.weight"), (out_ch, in_ch, 3, 3), Init::Zeros)?;
    let b = ps.take(&format!("{name}.bias"), out_ch, Init::Zeros)?;
    Ok((w, b))
}

pub fn apply_conv(img: &Tensor, w: &Tensor, b: &Tensor, padding: usize) -> Result<Tensor> {
    let out_ch = w.dims4()?.0;
    let x = img.conv2d(w, padding, 1, 1, 1)?;
    Ok(x.broadcast_add(&b.reshape((1, out_ch, 1, 1))?)?)
}

/// Orthogonal matrix from seeded Gram-Schmidt, used to initialize the token
/// broadcast. Returned as a plain (non-trainable) tensor.
pub fn random_orthogonal(n: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for i in 0..n {
                v[i] -= dot * c[i];
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // degenerate draw, resample
        }
        for x in &mut v {
            *x /= norm;
        }
        cols.push(v);
    }
    let mut data = vec![0f32; n * n];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            data[i * n + j] = c[i] as f32;
        }
    }
    Ok(Tensor::from_vec(data, (n, n), &device())?)
}

/// Dense f32 matrix inversion (f64 LU with partial pivoting under the hood).
/// Also returns the condition-number proxy `|M|_F * |M^-1|_F`.
pub fn invert_matrix(mat: &[f32], n: usize) -> Option<(Vec<f32>, f64)> {
    let mut a: Vec<f64> = mat.iter().map(|&x| x as f64).collect();
    let mut inv: Vec<f64> = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        // pivot
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col].abs() < 1e-12 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
        }
        let d = a[col * n + col];
        for j in 0..n {
            a[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[r * n + j] -= f * a[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    let norm = |m: &[f64]| m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cond = mat.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() * norm(&inv);
    Some((inv.iter().map(|&x| x as f32).collect(), cond))
}

/// Matrix inverse as a differentiable op: d(X^-1) = -X^-T dY X^-T.
pub struct MatInverse;

impl candle_core::CustomOp1 for MatInverse {
    fn name(&self) -> &'static str {
        "mat-inverse"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        let dims = layout.shape().dims();
        if dims.len() != 2 || dims[0] != dims[1] {
            candle_core::bail!("mat-inverse expects a square matrix, got {dims:?}");
        }
        let n = dims[0];
        let data = storage.as_slice::<f32>()?;
        let data = match layout.contiguous_offsets() {
            Some((start, end)) => &data[start..end],
            None => candle_core::bail!("mat-inverse expects contiguous input"),
        };
        let (inv, _cond) = invert_matrix(data, n)
            .ok_or_else(|| candle_core::Error::Msg("singular matrix".into()))?;
        Ok((candle_core::CpuStorage::F32(inv), layout.shape().clone()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let rt = res.t()?.contiguous()?;
        Ok(Some(rt.matmul(grad_res)?.matmul(&rt)?.neg()?))
    }
}

pub fn mat_inverse(m: &Tensor) -> Result<Tensor> {
    Ok(m.apply_op1(MatInverse)?)
}

/// Bumpy but cheap check that a tensor holds only finite values.
pub fn assert_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.abs()?.max_all()?.to_scalar::<f32>()?;
    if !s.is_finite() {
        return Err(Error::DegenerateInput(format!("{what} contains non-finite values")));
    }
    Ok(())
}

pub fn dtype() -> DType {
    DType::F32
}
