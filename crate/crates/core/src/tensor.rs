//! Image/tensor conversions and bilinear sampling.
//!
//! Images are CPU `f32` tensors shaped `(C, H, W)` (or `(B, C, H, W)` in
//! batches) with values in `[0, 1]`. Resizing and cropping are expressed as
//! small dense sampling matrices applied per axis, `out = V . img . H^T`,
//! which keeps every geometric op differentiable both with respect to the
//! image and, where needed, with respect to the crop parameters themselves.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub fn device() -> Device {
    Device::Cpu
}

/// Load an image file as a `(3, H, W)` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut data = vec![0f32; 3 * (h as usize) * (w as usize)];
    let plane = (h * w) as usize;
    for (i, p) in rgb.pixels().enumerate() {
        data[i] = p.0[0] as f32 / 255.0;
        data[plane + i] = p.0[1] as f32 / 255.0;
        data[2 * plane + i] = p.0[2] as f32 / 255.0;
    }
    Ok(Tensor::from_vec(data, (3, h as usize, w as usize), &device())?)
}

/// Quantize a `(3, H, W)` tensor to 8-bit RGB.
pub fn to_rgb8(img: &Tensor) -> Result<image::RgbImage> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::shape("3 channels", format!("{c}")));
    }
    let data = img.clamp(0.0, 1.0)?.to_vec3::<f32>()?;
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (data[0][y][x] * 255.0).round() as u8,
                (data[1][y][x] * 255.0).round() as u8,
                (data[2][y][x] * 255.0).round() as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(out)
}

/// Save a `(3, H, W)` tensor as PNG (lossless).
pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    to_rgb8(img)?.save_with_format(path, image::ImageFormat::Png).map_err(|e| {
        Error::UnreadableImage { path: path.to_path_buf(), reason: e.to_string() }
    })
}

/// Round-trip a tensor image through a real JPEG codec at the given quality.
pub fn jpeg_cycle(img: &Tensor, quality: u8) -> Result<Tensor> {
    let rgb = to_rgb8(img)?;
    let mut buf = Vec::new();
    let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    enc.encode_image(&rgb).map_err(|e| Error::Config(format!("jpeg encode: {e}")))?;
    let back = image::load_from_memory(&buf)
        .map_err(|e| Error::Config(format!("jpeg decode: {e}")))?
        .to_rgb8();
    let (w, h) = back.dimensions();
    let plane = (h * w) as usize;
    let mut data = vec![0f32; 3 * plane];
    for (i, p) in back.pixels().enumerate() {
        data[i] = p.0[0] as f32 / 255.0;
        data[plane + i] = p.0[1] as f32 / 255.0;
        data[2 * plane + i] = p.0[2] as f32 / 255.0;
    }
    Ok(Tensor::from_vec(data, (3, h as usize, w as usize), &device())?)
}

/// Gaussian tensor drawn from a caller-owned RNG (keeps decode seeding explicit).
pub fn randn<S: Into<candle_core::Shape>>(rng: &mut ChaCha12Rng, shape: S, std: f32) -> Result<Tensor> {
    let shape = shape.into();
    let normal = Normal::new(0f32, std.max(1e-12)).expect("valid std");
    let data: Vec<f32> = (0..shape.elem_count()).map(|_| normal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &device())?)
}

pub fn rand_uniform<S: Into<candle_core::Shape>>(
    rng: &mut ChaCha12Rng,
    shape: S,
    lo: f32,
    hi: f32,
) -> Result<Tensor> {
    let shape = shape.into();
    let data: Vec<f32> = (0..shape.elem_count()).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(data, shape, &device())?)
}

/// Bilinear weight matrix `(out_len, in_len)` sampling a sub-interval
/// `[start, start + scale]` (normalized units) of the input axis.
/// Sampling uses pixel centers and clamps at the borders.
pub fn sampling_matrix(in_len: usize, out_len: usize, start: f64, scale: f64) -> Result<Tensor> {
    let mut w = vec![0f32; out_len * in_len];
    for j in 0..out_len {
        let u = (start + (j as f64 + 0.5) / out_len as f64 * scale) * in_len as f64 - 0.5;
        let u = u.clamp(0.0, in_len as f64 - 1.0);
        let u0 = u.floor() as usize;
        let u1 = (u0 + 1).min(in_len - 1);
        let frac = (u - u0 as f64) as f32;
        w[j * in_len + u0] += 1.0 - frac;
        w[j * in_len + u1] += frac;
    }
    Ok(Tensor::from_vec(w, (out_len, in_len), &device())?)
}

/// Like [`sampling_matrix`] but `start`/`scale` are scalar tensors per batch
/// entry (shape `(S,)`), and the result `(S, out_len, in_len)` carries
/// gradients with respect to them. The integer support of the interpolation
/// is frozen at the current parameter values; the fractional weights stay
/// differentiable, which is what gradient-descent template matching needs.
pub fn sampling_matrix_diff(
    in_len: usize,
    out_len: usize,
    start: &Tensor,
    scale: &Tensor,
) -> Result<Tensor> {
    let s = start.dims1()?;
    let dev = device();
    let offsets: Vec<f32> = (0..out_len).map(|j| (j as f32 + 0.5) / out_len as f32).collect();
    let offsets = Tensor::from_vec(offsets, (1, out_len), &dev)?;
    // u: (S, out)
    let u = start
        .reshape((s, 1))?
        .broadcast_add(&offsets.broadcast_mul(&scale.reshape((s, 1))?)?)?
        .affine(in_len as f64, -0.5)?
        .clamp(0.0, in_len as f64 - 1.0)?;
    let u0 = u.floor()?.detach();
    let frac = u.sub(&u0)?; // gradient of u passes through here

    // One-hot scatter of the two integer taps, built from detached indices.
    let idx = u0.to_vec2::<f32>()?;
    let mut hot0 = vec![0f32; s * out_len * in_len];
    let mut hot1 = vec![0f32; s * out_len * in_len];
    for (si, row) in idx.iter().enumerate() {
        for (j, &u0f) in row.iter().enumerate() {
            let u0 = u0f as usize;
            let u1 = (u0 + 1).min(in_len - 1);
            hot0[(si * out_len + j) * in_len + u0] = 1.0;
            hot1[(si * out_len + j) * in_len + u1] = 1.0;
        }
    }
    let hot0 = Tensor::from_vec(hot0, (s, out_len, in_len), &dev)?;
    let hot1 = Tensor::from_vec(hot1, (s, out_len, in_len), &dev)?;
    let one_minus = frac.affine(-1.0, 1.0)?.reshape((s, out_len, 1))?;
    let frac = frac.reshape((s, out_len, 1))?;
    Ok(hot0.broadcast_mul(&one_minus)?.add(&hot1.broadcast_mul(&frac)?)?)
}

/// Apply per-axis sampling matrices to a `(C, H, W)` image:
/// `out[c] = v . img[c] . h^T`.
pub fn apply_sampling(img: &Tensor, v: &Tensor, h: &Tensor) -> Result<Tensor> {
    let (c, in_h, in_w) = img.dims3()?;
    let (out_h, vh) = v.dims2()?;
    let (out_w, hw) = h.dims2()?;
    if vh != in_h || hw != in_w {
        return Err(Error::shape(format!("sampling for {in_h}x{in_w}"), format!("{vh}x{hw}")));
    }
    let x = v
        .unsqueeze(0)?
        .broadcast_matmul(img)?
        .broadcast_matmul(&h.t()?.unsqueeze(0)?)?;
    x.reshape((c, out_h, out_w)).map_err(Into::into)
}

/// Bilinear resize of `(C, H, W)` to `(C, out_h, out_w)`.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = img.dims3()?;
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let v = sampling_matrix(h, out_h, 0.0, 1.0)?;
    let hm = sampling_matrix(w, out_w, 0.0, 1.0)?;
    apply_sampling(img, &v, &hm)
}

/// Extract the normalized rectangle `[x0, x0+sw] x [y0, y0+sh]` from a
/// `(C, H, W)` image and resize it to `(C, out_h, out_w)`.
pub fn crop_resize(
    img: &Tensor,
    y0: f64,
    x0: f64,
    sh: f64,
    sw: f64,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let (_, h, w) = img.dims3()?;
    let v = sampling_matrix(h, out_h, y0, sh)?;
    let hm = sampling_matrix(w, out_w, x0, sw)?;
    apply_sampling(img, &v, &hm)
}

/// Batched differentiable crop-resize: for each of `S` parameter rows,
/// sample the rectangle and resize to `(out_h, out_w)`. `img` is `(C, H, W)`,
/// result is `(S, C, out_h, out_w)` with gradients w.r.t. the parameters.
pub fn crop_resize_diff(
    img: &Tensor,
    y0: &Tensor,
    x0: &Tensor,
    sh: &Tensor,
    sw: &Tensor,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let s = y0.dims1()?;
    let v = sampling_matrix_diff(h, out_h, y0, sh)?; // (S, out_h, H)
    let hm = sampling_matrix_diff(w, out_w, x0, sw)?; // (S, out_w, W)
    let img4 = img.reshape((1, c, h, w))?;
    let x = v
        .unsqueeze(1)? // (S, 1, out_h, H)
        .broadcast_matmul(&img4)? // (S, C, out_h, W)
        .broadcast_matmul(&hm.t()?.unsqueeze(1)?)?; // (S, C, out_h, out_w)
    x.reshape((s, c, out_h, out_w)).map_err(Into::into)
}

/// Mean of |a - b| as an f64.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.abs()?.mean_all()?.to_scalar::<f32>()? as f64)
}

/// Largest |a - b| entry as an f64.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.sub(b)?.abs()?;
    let flat = d.flatten_all()?;
    Ok(flat.max(0)?.to_scalar::<f32>()? as f64)
}

pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Scalar f64 from a 0-dim or 1-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?[0] as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(c: usize, h: usize, w: usize) -> Tensor {
        let data: Vec<f32> = (0..c * h * w).map(|i| (i % 97) as f32 / 96.0).collect();
        Tensor::from_vec(data, (c, h, w), &device()).unwrap()
    }

    #[test]
    fn resize_identity_when_same_size() {
        let img = ramp_image(3, 8, 10);
        let out = resize_bilinear(&img, 8, 10).unwrap();
        assert!(max_abs_diff(&img, &out).unwrap() < 1e-6);
    }

    #[test]
    fn full_frame_crop_equals_resize() {
        let img = ramp_image(3, 16, 16);
        let a = resize_bilinear(&img, 8, 8).unwrap();
        let b = crop_resize(&img, 0.0, 0.0, 1.0, 1.0, 8, 8).unwrap();
        assert!(max_abs_diff(&a, &b).unwrap() < 1e-6);
    }

    #[test]
    fn diff_crop_matches_constant_crop() {
        let img = ramp_image(3, 24, 24);
        let y0 = Tensor::from_vec(vec![0.25f32], 1, &device()).unwrap();
        let x0 = Tensor::from_vec(vec![0.1f32], 1, &device()).unwrap();
        let sh = Tensor::from_vec(vec![0.5f32], 1, &device()).unwrap();
        let sw = Tensor::from_vec(vec![0.6f32], 1, &device()).unwrap();
        let a = crop_resize_diff(&img, &y0, &x0, &sh, &sw, 12, 12)
            .unwrap()
            .reshape((3, 12, 12))
            .unwrap();
        let b = crop_resize(&img, 0.25, 0.1, 0.5, 0.6, 12, 12).unwrap();
        assert!(max_abs_diff(&a, &b).unwrap() < 1e-5);
    }

    #[test]
    fn sampling_matrix_rows_sum_to_one() {
        let m = sampling_matrix(17, 5, 0.2, 0.55).unwrap();
        let sums = m.sum(1).unwrap().to_vec1::<f32>().unwrap();
        for s in sums {
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn crop_param_gradients_flow() {
        // Finite-difference check of d(objective)/d(start). The objective is
        // piecewise linear in the params (floor taps), so the probe point and
        // eps are chosen to stay inside one linear piece.
        let img = ramp_image(1, 32, 32);
        let target = crop_resize(&img, 0.3, 0.3, 0.4, 0.4, 16, 16).unwrap();
        let obj = |y: f32| -> f64 {
            let y0 = Tensor::from_vec(vec![y], 1, &device()).unwrap();
            let x0 = Tensor::from_vec(vec![0.3f32], 1, &device()).unwrap();
            let s = Tensor::from_vec(vec![0.4f32], 1, &device()).unwrap();
            let got = crop_resize_diff(&img, &y0, &x0, &s, &s, 16, 16).unwrap();
            got.reshape((1, 16, 16))
                .unwrap()
                .sub(&target)
                .unwrap()
                .sqr()
                .unwrap()
                .mean_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap() as f64
        };
        let probe = 0.3525f32;
        let y = candle_core::Var::from_tensor(
            &Tensor::from_vec(vec![probe], 1, &device()).unwrap(),
        )
        .unwrap();
        let x0 = Tensor::from_vec(vec![0.3f32], 1, &device()).unwrap();
        let s = Tensor::from_vec(vec![0.4f32], 1, &device()).unwrap();
        let got = crop_resize_diff(&img, y.as_tensor(), &x0, &s, &s, 16, 16).unwrap();
        let loss = got
            .reshape((1, 16, 16))
            .unwrap()
            .sub(&target)
            .unwrap()
            .sqr()
            .unwrap()
            .mean_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(y.as_tensor()).unwrap().to_vec1::<f32>().unwrap()[0] as f64;
        let eps = 2e-4;
        let fd = (obj(probe + eps as f32) - obj(probe - eps as f32)) / (2.0 * eps);
        assert!(
            (g - fd).abs() < 0.05 * fd.abs().max(1e-3),
            "autograd {g} vs finite diff {fd}"
        );
    }
}
