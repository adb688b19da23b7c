//! Repetitive data tiling and its inverse averaging.
//!
//! Tiling repeats the h x w module grid `c_h x c_w` times and rasterizes the
//! result to the network input size with hard (nearest) module edges, so a
//! single module occupies a solid pixel block and appears `c_h * c_w` times.
//! Averaging inverts this: pixels are pooled per module copy, the copies of
//! each module are averaged, and the mean is rounded to a bit. Ties at
//! exactly 0.5 round to 1.
//!
//! Both directions partition the raster with the same `floor(y * modules / H)`
//! rule, so `average(tile(x)) == x` holds exactly for every grid, including
//! rasters whose side is not a multiple of the module count.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::payload::DataImage;
use crate::tensor::device;

/// RDT(h, w, c_h, c_w) rendered onto a `net_h x net_w` raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RdtConfig {
    pub h: usize,
    pub w: usize,
    pub c_h: usize,
    pub c_w: usize,
    pub net_h: usize,
    pub net_w: usize,
}

impl RdtConfig {
    pub fn new(h: usize, w: usize, c_h: usize, c_w: usize, net_h: usize, net_w: usize) -> Result<Self> {
        let cfg = RdtConfig { h, w, c_h, c_w, net_h, net_w };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.c_h == 0 || self.c_w == 0 {
            return Err(Error::Config("RDT dims and repetitions must be >= 1".into()));
        }
        let (mh, mw) = self.module_grid();
        if self.net_h < mh || self.net_w < mw {
            return Err(Error::Config(format!(
                "raster {}x{} smaller than module grid {mh}x{mw}",
                self.net_h, self.net_w
            )));
        }
        Ok(())
    }

    /// Tiled module grid dims: (c_h * h, c_w * w).
    pub fn module_grid(&self) -> (usize, usize) {
        (self.c_h * self.h, self.c_w * self.w)
    }

    /// Copies of each module in the tiled image.
    pub fn copies(&self) -> usize {
        self.c_h * self.c_w
    }

    /// Bit capacity of the underlying data image.
    pub fn capacity(&self) -> usize {
        self.h * self.w
    }
}

/// Tile a data image to a `(1, net_h, net_w)` raster in [0, 1].
pub fn tile(data: &DataImage, cfg: &RdtConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (dh, dw) = data.dims();
    if (dh, dw) != (cfg.h, cfg.w) {
        return Err(Error::shape(format!("{}x{} data image", cfg.h, cfg.w), format!("{dh}x{dw}")));
    }
    let (mh, mw) = cfg.module_grid();
    let mut raster = vec![0f32; cfg.net_h * cfg.net_w];
    for y in 0..cfg.net_h {
        let my = (y * mh / cfg.net_h) % cfg.h;
        for x in 0..cfg.net_w {
            let mx = (x * mw / cfg.net_w) % cfg.w;
            raster[y * cfg.net_w + x] = data.get(my, mx) as f32;
        }
    }
    Ok(Tensor::from_vec(raster, (1, cfg.net_h, cfg.net_w), &device())?)
}

/// Per-module mean over all copies (and over pixels within each copy),
/// kept differentiable. Input `(1, H, W)` or `(B, 1, H, W)`; output
/// `(h, w)` or `(B, h, w)` of module probabilities.
pub fn average_probs(tiled: &Tensor, cfg: &RdtConfig) -> Result<Tensor> {
    cfg.validate()?;
    let dims = tiled.dims().to_vec();
    let (batch, h, w) = match dims.as_slice() {
        [1, h, w] => (None, *h, *w),
        [b, 1, h, w] => (Some(*b), *h, *w),
        other => return Err(Error::shape("(1,H,W) or (B,1,H,W)", format!("{other:?}"))),
    };
    if (h, w) != (cfg.net_h, cfg.net_w) {
        return Err(Error::shape(
            format!("{}x{} raster", cfg.net_h, cfg.net_w),
            format!("{h}x{w}"),
        ));
    }
    let (mh, mw) = cfg.module_grid();
    // Pixel -> tiled-module pooling, normalized per module row/col.
    let pool_v = pooling_matrix(cfg.net_h, mh)?;
    let pool_h = pooling_matrix(cfg.net_w, mw)?;
    let b = batch.unwrap_or(1);
    let x = tiled.reshape((b, h, w))?;
    let modules = pool_v
        .unsqueeze(0)?
        .broadcast_matmul(&x)?
        .broadcast_matmul(&pool_h.t()?.unsqueeze(0)?)?; // (B, mh, mw)
    // Fold the c_h x c_w copies of each module together.
    let folded = modules
        .reshape((b, cfg.c_h, cfg.h, cfg.c_w, cfg.w))?
        .mean(3)?
        .mean(1)?; // (B, h, w)
    match batch {
        Some(_) => Ok(folded),
        None => Ok(folded.reshape((cfg.h, cfg.w))?),
    }
}

/// Average and threshold back to a data image. Ties (mean exactly 0.5) round to 1.
pub fn average(tiled: &Tensor, cfg: &RdtConfig) -> Result<DataImage> {
    let probs = average_probs(tiled, cfg)?;
    let flat = probs.flatten_all()?.to_vec1::<f32>()?;
    let bits: Vec<u8> = flat.iter().map(|&p| if p >= 0.5 { 1 } else { 0 }).collect();
    DataImage::new(cfg.h, cfg.w, bits)
}

/// `(modules, pixels)` matrix with row i averaging the pixels that map to
/// module row i under the shared floor partition.
fn pooling_matrix(pixels: usize, modules: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; modules];
    let mut owner = vec![0usize; pixels];
    for p in 0..pixels {
        let m = p * modules / pixels;
        owner[p] = m;
        counts[m] += 1;
    }
    let mut w = vec![0f32; modules * pixels];
    for p in 0..pixels {
        let m = owner[p];
        w[m * pixels + p] = 1.0 / counts[m] as f32;
    }
    Ok(Tensor::from_vec(w, (modules, pixels), &device())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;

    fn random_data(h: usize, w: usize, seed: u64) -> DataImage {
        let mut rng = crate::tensor::seeded_rng(seed);
        let bits: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..2) as u8).collect();
        DataImage::new(h, w, bits).unwrap()
    }

    /// Invert a set of module copies in the raster (copy index = c_row * c_w + c_col).
    fn corrupt_copies(
        raster: &Tensor,
        cfg: &RdtConfig,
        module: (usize, usize),
        copies: &[usize],
    ) -> Tensor {
        let mut data = raster.to_vec3::<f32>().unwrap();
        let (mh, mw) = cfg.module_grid();
        for y in 0..cfg.net_h {
            let ty = y * mh / cfg.net_h;
            for x in 0..cfg.net_w {
                let tx = x * mw / cfg.net_w;
                if (ty % cfg.h, tx % cfg.w) == module {
                    let copy = (ty / cfg.h) * cfg.c_w + tx / cfg.w;
                    if copies.contains(&copy) {
                        data[0][y][x] = 1.0 - data[0][y][x];
                    }
                }
            }
        }
        let flat: Vec<f32> = data[0].iter().flatten().copied().collect();
        Tensor::from_vec(flat, (1, cfg.net_h, cfg.net_w), &device()).unwrap()
    }

    #[test]
    fn tile_shapes_match_paper_settings() {
        let cfg = RdtConfig::new(18, 18, 2, 2, 384, 384).unwrap();
        assert_eq!(cfg.module_grid(), (36, 36));
        let cfg = RdtConfig::new(4, 8, 8, 4, 384, 384).unwrap();
        assert_eq!(cfg.module_grid(), (32, 32));
        assert_eq!(cfg.capacity(), 32);
    }

    #[test]
    fn single_repetition_is_resize_only() {
        let cfg = RdtConfig::new(6, 6, 1, 1, 48, 48).unwrap();
        let data = random_data(6, 6, 0);
        let raster = tile(&data, &cfg).unwrap();
        // every 8x8 block is the constant module value
        let v = raster.to_vec3::<f32>().unwrap();
        for y in 0..48 {
            for x in 0..48 {
                assert_eq!(v[0][y][x], data.get(y / 8, x / 8) as f32);
            }
        }
        assert_eq!(average(&raster, &cfg).unwrap(), data);
    }

    #[test]
    fn roundtrip_on_non_divisible_raster() {
        // 384 / 36 modules is not an integer; the shared partition keeps the
        // round trip exact anyway.
        let cfg = RdtConfig::new(18, 18, 2, 2, 384, 384).unwrap();
        let data = random_data(18, 18, 1);
        let raster = tile(&data, &cfg).unwrap();
        assert_eq!(average(&raster, &cfg).unwrap(), data);
    }

    #[test]
    fn majority_vote_brute_force_2x2() {
        let cfg = RdtConfig::new(2, 2, 2, 2, 32, 32).unwrap();
        let copies = cfg.copies();
        for bit in [0u8, 1u8] {
            let data = DataImage::new(2, 2, vec![bit, 1 - bit, bit, bit]).unwrap();
            let raster = tile(&data, &cfg).unwrap();
            for pattern in 0u32..(1 << copies) {
                let inverted: Vec<usize> =
                    (0..copies).filter(|i| pattern & (1 << i) != 0).collect();
                let corrupted = corrupt_copies(&raster, &cfg, (0, 0), &inverted);
                let decoded = average(&corrupted, &cfg).unwrap();
                let expected = match inverted.len() {
                    n if 2 * n < copies => bit,            // strict minority inverted
                    n if 2 * n == copies => 1,             // tie -> 1
                    _ => 1 - bit,                          // majority inverted
                };
                assert_eq!(decoded.get(0, 0), expected, "bit={bit} pattern={pattern:b}");
                // untouched modules decode unchanged
                assert_eq!(decoded.get(0, 1), 1 - bit);
            }
        }
    }

    #[test]
    fn tie_resolves_to_one() {
        let cfg = RdtConfig::new(1, 1, 2, 2, 8, 8).unwrap();
        let data = DataImage::new(1, 1, vec![0]).unwrap();
        let raster = tile(&data, &cfg).unwrap();
        // invert 2 of 4 copies of a 0-bit: mean = 0.5 -> decodes 1
        let corrupted = corrupt_copies(&raster, &cfg, (0, 0), &[0, 3]);
        assert_eq!(average(&corrupted, &cfg).unwrap().get(0, 0), 1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = RdtConfig::new(4, 4, 2, 2, 32, 32).unwrap();
        let data = random_data(4, 5, 2);
        assert!(matches!(tile(&data, &cfg), Err(Error::ShapeMismatch { .. })));
        let wrong = Tensor::zeros((1, 16, 32), candle_core::DType::F32, &device()).unwrap();
        assert!(matches!(average(&wrong, &cfg), Err(Error::ShapeMismatch { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prop_roundtrip_exact(seed in 0u64..500, ch in 1usize..4, cw in 1usize..4) {
            let cfg = RdtConfig::new(4, 8, ch, cw, 96, 96).unwrap();
            let data = random_data(4, 8, seed);
            let raster = tile(&data, &cfg).unwrap();
            prop_assert_eq!(average(&raster, &cfg).unwrap(), data);
        }
    }
}
