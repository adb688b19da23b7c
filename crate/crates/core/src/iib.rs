//! Invertible information broadcasting.
//!
//! The tiled data raster is tokenized by a patch-attention encoder, then the
//! token matrix is mixed with a learnable N x N matrix `M` so every payload
//! bit contributes to every token. Decoding applies `M^-1` exactly, which is
//! what makes the broadcast lossless: local pixel damage spreads thinly over
//! all tokens instead of wiping out the tokens that held a particular bit.
//!
//! `M` is stored as `Q0 * A`: a fixed random orthogonal `Q0` (so the mixing
//! starts out spread-out and well-conditioned) times a learnable `A`
//! initialized at identity. A Frobenius condition proxy `|A|_F * |A^-1|_F`
//! is monitored and kept under a cap.

use std::cell::RefCell;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{invert_matrix, mat_inverse, random_orthogonal, Init, ParamStore};

/// Learnable invertible token-mixing matrix.
pub struct Broadcaster {
    q0: Tensor,
    a: Tensor,
    n: usize,
    cond_cap: f64,
    cached_inv: RefCell<Option<Tensor>>,
}

impl Broadcaster {
    pub fn new(ps: &ParamStore, name: &str, n: usize, cond_cap: f64) -> Result<Self> {
        let q0 = ps.freeze(&format!("{name}.q0"), || random_orthogonal(n, 0x0b_c4_57))?;
        let a = ps.take(&format!("{name}.a"), (n, n), Init::Eye)?;
        Ok(Broadcaster { q0, a, n, cond_cap, cached_inv: RefCell::new(None) })
    }

    pub fn token_count(&self) -> usize {
        self.n
    }

    /// The full mixing matrix `M = Q0 * A`.
    pub fn matrix(&self) -> Result<Tensor> {
        Ok(self.q0.matmul(&self.a)?)
    }

    /// `M^-1 = A^-1 * Q0^T`, carrying gradients through the inversion.
    pub fn inverse_matrix(&self) -> Result<Tensor> {
        let a_inv = mat_inverse(&self.a).map_err(|_| self.singular_err())?;
        Ok(a_inv.matmul(&self.q0.t()?)?)
    }

    fn singular_err(&self) -> Error {
        let cond = self.condition_proxy().unwrap_or(f64::INFINITY);
        Error::SingularMatrix { cond, cap: self.cond_cap }
    }

    /// Frobenius condition proxy `|A|_F * |A^-1|_F` (an upper bound on the
    /// spectral condition number).
    pub fn condition_proxy(&self) -> Result<f64> {
        let data = self.a.flatten_all()?.to_vec1::<f32>()?;
        let (_, cond) = invert_matrix(&data, self.n).ok_or(Error::SingularMatrix {
            cond: f64::INFINITY,
            cap: self.cond_cap,
        })?;
        Ok(cond)
    }

    fn check_tokens(&self, t: &Tensor) -> Result<()> {
        let (_, n, _) = t.dims3()?;
        if n != self.n {
            return Err(Error::shape(format!("{} tokens", self.n), format!("{n}")));
        }
        Ok(())
    }

    /// `T* = M . T` on `(B, N, D)` tokens.
    pub fn broadcast(&self, tokens: &Tensor) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        Ok(self.matrix()?.unsqueeze(0)?.broadcast_matmul(tokens)?)
    }

    /// `T = M^-1 . T*`, building the autograd graph (training path).
    pub fn unbroadcast_train(&self, tokens: &Tensor) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        if self.condition_proxy()? > self.cond_cap {
            return Err(self.singular_err());
        }
        Ok(self.inverse_matrix()?.unsqueeze(0)?.broadcast_matmul(tokens)?)
    }

    /// `T = M^-1 . T*` with the inverse cached for repeated inference calls.
    pub fn unbroadcast(&self, tokens: &Tensor) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let cached = self.cached_inv.borrow().clone();
        let inv = match cached {
            Some(inv) => inv,
            None => {
                if self.condition_proxy()? > self.cond_cap {
                    return Err(self.singular_err());
                }
                let inv = self.inverse_matrix()?.detach();
                *self.cached_inv.borrow_mut() = Some(inv.clone());
                inv
            }
        };
        Ok(inv.unsqueeze(0)?.broadcast_matmul(tokens)?)
    }

    /// Drop the cached inverse (call after optimizer steps).
    pub fn invalidate_cache(&self) {
        self.cached_inv.borrow_mut().take();
    }

    /// Regularizer keeping both `|A|_F` and `|A^-1|_F` small, which bounds
    /// the condition proxy during training.
    pub fn condition_penalty(&self) -> Result<Tensor> {
        let a_inv = mat_inverse(&self.a).map_err(|_| self.singular_err())?;
        Ok(self.a.sqr()?.mean_all()?.add(&a_inv.sqr()?.mean_all()?)?)
    }
}
