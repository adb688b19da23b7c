//! Image-quality and decoding metrics.
//!
//! The `_t` functions return scalar tensors and stay differentiable so they
//! double as loss terms; the plain functions are f64 conveniences on top.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::tensor::device;

pub const PSNR_CAP_DB: f64 = 99.0;

/// 10 * log10(1 / MSE) for images in [0, 1], capped at 99 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let mse = a.sub(b)?.sqr()?.mean_all()?.to_scalar::<f32>()? as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean |a - b|, differentiable.
pub fn l1_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b)?;
    Ok(a.sub(b)?.abs()?.mean_all()?)
}

/// Binary cross-entropy over probabilities in (0, 1), differentiable.
pub fn bce_t(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    check_same_shape(probs, targets)?;
    let p = probs.clamp(1e-6, 1.0 - 1e-6)?;
    let one_minus_p = p.affine(-1.0, 1.0)?;
    let one_minus_y = targets.affine(-1.0, 1.0)?;
    let loss = targets
        .mul(&p.log()?)?
        .add(&one_minus_y.mul(&one_minus_p.log()?)?)?
        .neg()?
        .mean_all()?;
    Ok(loss)
}

/// Per-sample SSIM map means: `(B, C, H, W)` inputs -> `(B,)` values.
/// Gaussian window (sigma 1.5), valid padding. One of the two inputs may
/// have batch size 1 and is broadcast against the other. The window shrinks
/// to `min(window, H, W)` so small fixtures still work.
///
/// Filtering runs as two thin matmuls per tensor rather than grouped convs;
/// the template matcher calls this hundreds of times per estimate.
pub fn ssim_batch_t(a: &Tensor, b: &Tensor, window: usize) -> Result<Tensor> {
    let (ba, c, h, w) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if (c, h, w) != (cb, hb, wb) || (ba != bb && ba != 1 && bb != 1) {
        return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    let bsz = ba.max(bb);
    let win = window.min(h).min(w);
    let (gvm, ghm) = gaussian_blur_matrices(h, w, win)?;
    let blur = |x: &Tensor| -> Result<Tensor> {
        // (B*C, H, W) -> (B*C, H', W')
        let (xb, _, _, _) = x.dims4()?;
        let flat = x.reshape((xb * c, h, w))?;
        let out = gvm
            .unsqueeze(0)?
            .broadcast_matmul(&flat)?
            .broadcast_matmul(&ghm.t()?.unsqueeze(0)?)?;
        Ok(out.reshape((xb, c, h - win + 1, w - win + 1))?)
    };

    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let mu_aa = mu_a.sqr()?;
    let mu_bb = mu_b.sqr()?;
    let mu_ab = mu_a.broadcast_mul(&mu_b)?;
    let sig_aa = blur(&a.sqr()?)?.sub(&mu_aa)?;
    let sig_bb = blur(&b.sqr()?)?.sub(&mu_bb)?;
    let sig_ab = blur(&a.broadcast_mul(b)?)?.broadcast_sub(&mu_ab)?;

    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let num = mu_ab.affine(2.0, C1)?.broadcast_mul(&sig_ab.affine(2.0, C2)?)?;
    let den = mu_aa
        .broadcast_add(&mu_bb)?
        .affine(1.0, C1)?
        .broadcast_mul(&sig_aa.broadcast_add(&sig_bb)?.affine(1.0, C2)?)?;
    let map = num.broadcast_div(&den)?;
    Ok(map.reshape((bsz, ()))?.mean(1)?)
}

/// Valid-mode separable Gaussian filter matrices for rows and columns.
fn gaussian_blur_matrices(h: usize, w: usize, win: usize) -> Result<(Tensor, Tensor)> {
    let half = (win as f64 - 1.0) / 2.0;
    let g: Vec<f64> =
        (0..win).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let sum: f64 = g.iter().sum();
    let g: Vec<f32> = g.iter().map(|&v| (v / sum) as f32).collect();
    let build = |len: usize| -> Result<Tensor> {
        let out = len - win + 1;
        let mut m = vec![0f32; out * len];
        for r in 0..out {
            for (k, &gk) in g.iter().enumerate() {
                m[r * len + r + k] = gk;
            }
        }
        Ok(Tensor::from_vec(m, (out, len), &device())?)
    };
    Ok((build(h)?, build(w)?))
}

/// Scalar SSIM on `(C, H, W)` or `(B, C, H, W)` inputs, differentiable.
pub fn ssim_t(a: &Tensor, b: &Tensor, window: usize) -> Result<Tensor> {
    let (a4, b4) = match a.dims() {
        [c, h, w] => (a.reshape((1, *c, *h, *w))?, b.reshape((1, *c, *h, *w))?),
        [_, _, _, _] => (a.clone(), b.clone()),
        other => return Err(Error::shape("(C,H,W) or (B,C,H,W)", format!("{other:?}"))),
    };
    Ok(ssim_batch_t(&a4, &b4, window)?.mean_all()?)
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(ssim_t(a, b, 11)?.to_scalar::<f32>()? as f64)
}


/// Percentage of matching bits.
pub fn bit_accuracy(decoded: &[u8], truth: &[u8]) -> f64 {
    assert_eq!(decoded.len(), truth.len(), "bit vectors must match");
    if decoded.is_empty() {
        return 100.0;
    }
    let correct = decoded.iter().zip(truth).filter(|(a, b)| a == b).count();
    correct as f64 / decoded.len() as f64 * 100.0
}

/// Intersection-over-union of two axis-aligned boxes (x0, y0, x1, y1).
pub fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.2 - a.0).max(0.0) * (a.3 - a.1).max(0.0);
    let area_b = (b.2 - b.0).max(0.0) * (b.3 - b.1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::device;

    fn tensor_from(v: Vec<f32>, shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &device()).unwrap()
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let a = tensor_from(vec![0.3; 48], (3, 4, 4));
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_uniform_offset_is_20db() {
        // MSE = 0.01 -> 10 log10(100) = 20 dB
        let a = tensor_from(vec![0.4; 48], (3, 4, 4));
        let b = tensor_from(vec![0.5; 48], (3, 4, 4));
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn ssim_self_is_one() {
        let data: Vec<f32> = (0..3 * 16 * 16).map(|i| (i % 13) as f32 / 12.0).collect();
        let a = tensor_from(data, (3, 16, 16));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn ssim_matches_scalar_oracle_on_8x8() {
        let mut rng = crate::tensor::seeded_rng(5);
        use rand::Rng;
        let av: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let bv: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = tensor_from(av.clone(), (1, 8, 8));
        let b = tensor_from(bv.clone(), (1, 8, 8));
        let got = ssim(&a, &b).unwrap();
        let want = ssim_oracle(&av, &bv, 8, 8, 8);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    /// Independent SSIM: plain f64 loops, same window convention.
    fn ssim_oracle(a: &[f32], b: &[f32], h: usize, w: usize, win: usize) -> f64 {
        let half = (win as f64 - 1.0) / 2.0;
        let g: Vec<f64> =
            (0..win).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
        let gs: f64 = g.iter().sum();
        let g: Vec<f64> = g.iter().map(|v| v / gs).collect();
        // f32 weights to mirror the tensor path's precision
        let g: Vec<f64> = g.iter().map(|&v| v as f32 as f64).collect();
        let mut vals = Vec::new();
        for oy in 0..=(h - win) {
            for ox in 0..=(w - win) {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        let wgt = g[dy] * g[dx];
                        let va = a[(oy + dy) * w + ox + dx] as f64;
                        let vb = b[(oy + dy) * w + ox + dx] as f64;
                        ma += wgt * va;
                        mb += wgt * vb;
                        maa += wgt * va * va;
                        mbb += wgt * vb * vb;
                        mab += wgt * va * vb;
                    }
                }
                let (saa, sbb, sab) = (maa - ma * ma, mbb - mb * mb, mab - ma * mb);
                let c1 = 0.01f64.powi(2);
                let c2 = 0.03f64.powi(2);
                let num = (2.0 * ma * mb + c1) * (2.0 * sab + c2);
                let den = (ma * ma + mb * mb + c1) * (saa + sbb + c2);
                vals.push(num / den);
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn bce_uniform_half_is_ln2() {
        let p = tensor_from(vec![0.5; 32], (1, 4, 8));
        let y = tensor_from(vec![1.0; 32], (1, 4, 8));
        let got = bce_t(&p, &y).unwrap().to_scalar::<f32>().unwrap() as f64;
        assert!((got - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn bit_accuracy_extremes() {
        let a = vec![1, 0, 1, 1];
        let b: Vec<u8> = a.iter().map(|&x| 1 - x).collect();
        assert_eq!(bit_accuracy(&a, &a), 100.0);
        assert_eq!(bit_accuracy(&a, &b), 0.0);
    }

    #[test]
    fn iou_cases() {
        let a = (0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, (2.0, 2.0, 3.0, 3.0)), 0.0);
        let half = (0.0, 0.0, 0.5, 1.0);
        assert!((iou(a, half) - 0.5).abs() < 1e-12);
    }
}
