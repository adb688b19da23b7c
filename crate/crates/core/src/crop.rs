//! Crop localization and position rectification.
//!
//! Given the decoded anchor estimate, the crop parameters are recovered by
//! differentiable template matching: minimize
//! `|est - Rs(anchor[crop])|_1 + lambda * (1 - ssim(est, Rs(anchor[crop])))`
//! over the normalized crop rectangle with multi-start Adam. The winning
//! rectangle then lets [`rectify`] pad the received image back into the
//! stego frame, turning cropping into plain local tampering.

use candle_core::{Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ssim_batch_t;
use crate::tensor::{crop_resize_diff, device, resize_bilinear};

/// Normalized crop rectangle: center and scale per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub c_x: f64,
    pub c_y: f64,
    pub s_x: f64,
    pub s_y: f64,
}

impl CropParams {
    pub const FULL: CropParams = CropParams { c_x: 0.5, c_y: 0.5, s_x: 1.0, s_y: 1.0 };

    pub fn new(c_x: f64, c_y: f64, s_x: f64, s_y: f64) -> Result<Self> {
        let p = CropParams { c_x, c_y, s_x, s_y };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let eps = 1e-6;
        for (c, s, axis) in [(self.c_x, self.s_x, "x"), (self.c_y, self.s_y, "y")] {
            if !(s > 0.0 && s <= 1.0 + eps) {
                return Err(Error::InvalidParams(format!("scale s_{axis}={s} outside (0, 1]")));
            }
            if c - s / 2.0 < -eps || c + s / 2.0 > 1.0 + eps {
                return Err(Error::InvalidParams(format!(
                    "rectangle leaves the frame on axis {axis}: center {c}, scale {s}"
                )));
            }
        }
        Ok(())
    }

    /// (x0, y0, x1, y1) in normalized units.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        (
            self.c_x - self.s_x / 2.0,
            self.c_y - self.s_y / 2.0,
            self.c_x + self.s_x / 2.0,
            self.c_y + self.s_y / 2.0,
        )
    }

    /// IoU with another crop rectangle.
    pub fn iou(&self, other: &CropParams) -> f64 {
        crate::metrics::iou(self.bbox(), other.bbox())
    }
}

/// Template-matching optimizer settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MatchConfig {
    /// SSIM weight in the objective.
    pub lambda: f64,
    /// Total gradient-descent steps (screening phase included).
    pub steps: usize,
    pub lr: f64,
    /// Initial centers form a grid x grid pattern.
    pub restart_grid: usize,
    /// Initial scales tried at every center.
    pub restart_scales: usize,
    /// Internal working resolution of the matcher.
    pub work_res: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            lambda: 0.1,
            steps: 300,
            lr: 0.05,
            restart_grid: 3,
            restart_scales: 3,
            work_res: 64,
        }
    }
}

/// The matching objective at the given params, evaluated at the estimate's
/// native resolution.
pub fn match_objective(
    anchor_est: &Tensor,
    anchor: &Tensor,
    params: &CropParams,
    lambda: f64,
) -> Result<f64> {
    let (_, h, w) = anchor_est.dims3()?;
    let (x0, y0, _, _) = params.bbox();
    let crop = crate::tensor::crop_resize(anchor, y0, x0, params.s_y, params.s_x, h, w)?;
    let l1 = crate::metrics::l1_t(anchor_est, &crop)?.to_scalar::<f32>()? as f64;
    let ssim = crate::metrics::ssim(anchor_est, &crop)?;
    Ok(l1 + lambda * (1.0 - ssim))
}

/// Recover crop parameters from a decoded anchor estimate by multi-start
/// gradient descent. Returns the parameters and the final objective value
/// (lower is more confident).
pub fn estimate_crop(
    anchor_est: &Tensor,
    anchor: &Tensor,
    cfg: &MatchConfig,
) -> Result<(CropParams, f64)> {
    let (c, eh, ew) = anchor_est.dims3()?;
    let (ca, ah, aw) = anchor.dims3()?;
    if c != ca || (eh, ew) != (ah, aw) {
        return Err(Error::shape(format!("{ca}x{ah}x{aw}"), format!("{c}x{eh}x{ew}")));
    }
    let std = scalar_std(anchor_est)?;
    if std < 1e-4 {
        return Err(Error::DegenerateInput(format!(
            "anchor estimate is nearly constant (std {std:.2e})"
        )));
    }

    let res = cfg.work_res.min(eh).min(ew);
    let est = resize_bilinear(anchor_est, res, res)?.detach();
    let anc = resize_bilinear(anchor, res, res)?.detach();

    // Multi-start grid: centers spread over the frame, nested scales.
    let mut init: Vec<[f32; 4]> = Vec::new();
    let g = cfg.restart_grid.max(1);
    for iy in 0..g {
        for ix in 0..g {
            for is in 0..cfg.restart_scales.max(1) {
                let s = match is {
                    0 => 0.95,
                    1 => 0.55,
                    _ => 0.35,
                } as f32;
                let lo = s / 2.0;
                let hi = 1.0 - s / 2.0;
                let fx = if g == 1 { 0.5 } else { ix as f32 / (g - 1) as f32 };
                let fy = if g == 1 { 0.5 } else { iy as f32 / (g - 1) as f32 };
                init.push([lo + (hi - lo) * fx, lo + (hi - lo) * fy, s, s]);
            }
        }
    }

    // Screening: gradient-free L1 ranking of the starts at low resolution.
    let coarse = 32.min(res);
    let est_c = resize_bilinear(&est, coarse, coarse)?;
    let anc_c = resize_bilinear(&anc, coarse, coarse)?;
    let mut ranked: Vec<(f64, [f32; 4])> = init
        .iter()
        .map(|p| {
            let (x0, y0) = (p[0] - p[2] / 2.0, p[1] - p[3] / 2.0);
            let crop = crate::tensor::crop_resize(
                &anc_c, y0 as f64, x0 as f64, p[3] as f64, p[2] as f64, coarse, coarse,
            )?;
            Ok((crate::tensor::mean_abs_diff(&crop, &est_c)?, *p))
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let survivors: Vec<[f32; 4]> = ranked.iter().take(3).map(|(_, p)| *p).collect();

    let (params2, obj2) = descend(&est, &anc, &survivors, cfg, cfg.steps, cfg.lr)?;
    let best = obj2
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("at least one start");
    let p = params2[best];
    let params = clamp_params(p[0] as f64, p[1] as f64, p[2] as f64, p[3] as f64);
    let confidence = match_objective(anchor_est, anchor, &params, cfg.lambda)?;
    Ok((params, confidence))
}

/// Batched Adam descent over crop params. Returns final params and objectives.
fn descend(
    est: &Tensor,
    anchor: &Tensor,
    starts: &[[f32; 4]],
    cfg: &MatchConfig,
    steps: usize,
    lr: f64,
) -> Result<(Vec<[f32; 4]>, Vec<f64>)> {
    let s = starts.len();
    let (_, res, _) = est.dims3()?;
    let dev = device();
    let col = |k: usize| -> Vec<f32> { starts.iter().map(|p| p[k]).collect() };
    let cx = Var::from_tensor(&Tensor::from_vec(col(0), s, &dev)?)?;
    let cy = Var::from_tensor(&Tensor::from_vec(col(1), s, &dev)?)?;
    let sx = Var::from_tensor(&Tensor::from_vec(col(2), s, &dev)?)?;
    let sy = Var::from_tensor(&Tensor::from_vec(col(3), s, &dev)?)?;
    let vars = vec![cx.clone(), cy.clone(), sx.clone(), sy.clone()];
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() },
    )?;

    let est_b = est.unsqueeze(0)?;
    let mut final_obj = vec![f64::INFINITY; s];
    for step in 0..steps {
        // cosine-free simple decay: drop lr近 the end for a tight landing
        if steps > 40 && step == steps - steps / 4 {
            opt.set_learning_rate(lr * 0.2);
        }
        if steps > 40 && step == steps - steps / 10 {
            opt.set_learning_rate(lr * 0.04);
        }
        let y0 = cy.as_tensor().sub(&sy.as_tensor().affine(0.5, 0.0)?)?;
        let x0 = cx.as_tensor().sub(&sx.as_tensor().affine(0.5, 0.0)?)?;
        let crops = crop_resize_diff(anchor, &y0, &x0, sy.as_tensor(), sx.as_tensor(), res, res)?;
        let diff = crops.broadcast_sub(&est_b)?.abs()?;
        let l1 = diff.reshape((s, ()))?.mean(1)?;
        let ssim = ssim_batch_t(&crops, &est_b.expand(crops.shape())?.contiguous()?, 11)?;
        let obj = l1.add(&ssim.affine(-1.0, 1.0)?.affine(cfg.lambda, 0.0)?)?;
        for (i, v) in obj.to_vec1::<f32>()?.iter().enumerate() {
            final_obj[i] = *v as f64;
        }
        let loss = obj.sum_all()?;
        opt.backward_step(&loss)?;
        project(&cx, &sx)?;
        project(&cy, &sy)?;
    }
    let read = |v: &Var| -> Result<Vec<f32>> { Ok(v.as_tensor().to_vec1::<f32>()?) };
    let (cxv, cyv, sxv, syv) = (read(&cx)?, read(&cy)?, read(&sx)?, read(&sy)?);
    let params: Vec<[f32; 4]> =
        (0..s).map(|i| [cxv[i], cyv[i], sxv[i], syv[i]]).collect();
    Ok((params, final_obj))
}

/// Project (center, scale) back into the valid region after a step.
fn project(center: &Var, scale: &Var) -> Result<()> {
    let s = scale.as_tensor().clamp(0.05, 1.0)?;
    let half = s.affine(0.5, 0.0)?;
    let c = center
        .as_tensor()
        .maximum(&half)?
        .minimum(&half.affine(-1.0, 1.0)?)?;
    scale.set(&s)?;
    center.set(&c)?;
    Ok(())
}

fn clamp_params(cx: f64, cy: f64, sx: f64, sy: f64) -> CropParams {
    let sx = sx.clamp(0.05, 1.0);
    let sy = sy.clamp(0.05, 1.0);
    CropParams {
        c_x: cx.clamp(sx / 2.0, 1.0 - sx / 2.0),
        c_y: cy.clamp(sy / 2.0, 1.0 - sy / 2.0),
        s_x: sx,
        s_y: sy,
    }
}

fn scalar_std(t: &Tensor) -> Result<f64> {
    let mean = t.mean_all()?.to_scalar::<f32>()? as f64;
    let var = t.sqr()?.mean_all()?.to_scalar::<f32>()? as f64 - mean * mean;
    Ok(var.max(0.0).sqrt())
}

/// Rectified image plus the pixel rectangle the content occupies.
pub struct PaddedImage {
    pub image: Tensor,
    /// (y0, x0, height, width) in pixels of the valid content region.
    pub rect: (usize, usize, usize, usize),
}

/// Pad the received image back into the stego frame: resize it into its
/// estimated rectangle on a fill-gray canvas of size `(net_h, net_w)`.
pub fn rectify(received: &Tensor, params: &CropParams, net_h: usize, net_w: usize) -> Result<PaddedImage> {
    params.validate()?;
    let (c, _, _) = received.dims3()?;
    let (x0, y0, x1, y1) = params.bbox();
    let px0 = (x0.max(0.0) * net_w as f64).round() as usize;
    let py0 = (y0.max(0.0) * net_h as f64).round() as usize;
    let px1 = ((x1.min(1.0)) * net_w as f64).round() as usize;
    let py1 = ((y1.min(1.0)) * net_h as f64).round() as usize;
    let (w_px, h_px) = (px1.saturating_sub(px0), py1.saturating_sub(py0));
    if w_px < 4 || h_px < 4 {
        return Err(Error::InvalidParams(format!(
            "rectified rectangle degenerate: {h_px}x{w_px} px"
        )));
    }
    let resized = resize_bilinear(received, h_px, w_px)?;
    let canvas = Tensor::full(0.5f32, (c, net_h, net_w), &device())?;
    let image = canvas.slice_assign(&[0..c, py0..py0 + h_px, px0..px0 + w_px], &resized)?;
    Ok(PaddedImage { image, rect: (py0, px0, h_px, w_px) })
}

/// Whether the estimated parameters describe a real crop (vs. jitter).
pub fn is_cropped(params: &CropParams, threshold: f64) -> bool {
    params.s_x.min(params.s_y) < 1.0 - threshold
        || (params.c_x - 0.5).abs() > threshold
        || (params.c_y - 0.5).abs() > threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::anchor_image;
    use crate::tensor::crop_resize;

    #[test]
    fn identity_crop_on_exact_anchor() {
        let anchor = anchor_image(64, 64).unwrap();
        let cfg = MatchConfig { steps: 150, ..Default::default() };
        let (params, loss) = estimate_crop(&anchor, &anchor, &cfg).unwrap();
        assert!(loss < 0.02, "loss {loss}");
        assert!((params.c_x - 0.5).abs() < 0.02, "{params:?}");
        assert!((params.c_y - 0.5).abs() < 0.02, "{params:?}");
        assert!(params.s_x > 0.96 && params.s_y > 0.96, "{params:?}");
    }

    #[test]
    fn recovers_synthetic_crop() {
        let anchor = anchor_image(64, 64).unwrap();
        let truth = CropParams::new(0.4, 0.6, 0.5, 0.5).unwrap();
        let (x0, y0, _, _) = truth.bbox();
        let est = crop_resize(&anchor, y0, x0, truth.s_y, truth.s_x, 64, 64).unwrap();
        let (params, _) = estimate_crop(&est, &anchor, &MatchConfig::default()).unwrap();
        for (got, want) in [
            (params.c_x, truth.c_x),
            (params.c_y, truth.c_y),
            (params.s_x, truth.s_x),
            (params.s_y, truth.s_y),
        ] {
            assert!((got - want).abs() < 0.01, "got {params:?}, want {truth:?}");
        }
    }

    #[test]
    fn degenerate_estimate_rejected() {
        let anchor = anchor_image(64, 64).unwrap();
        let flat = Tensor::full(0.5f32, (3, 64, 64), &device()).unwrap();
        assert!(matches!(
            estimate_crop(&flat, &anchor, &MatchConfig::default()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn objective_minimal_at_ground_truth() {
        // noiseless brute-force grid: nothing beats the true params
        let anchor = anchor_image(64, 64).unwrap();
        let truth = CropParams::new(0.45, 0.55, 0.6, 0.5).unwrap();
        let (x0, y0, _, _) = truth.bbox();
        let est = crop_resize(&anchor, y0, x0, truth.s_y, truth.s_x, 64, 64).unwrap();
        let at_truth = match_objective(&est, &anchor, &truth, 0.1).unwrap();
        let mut best_other = f64::INFINITY;
        for iy in 0..6 {
            for ix in 0..6 {
                for is in 0..4 {
                    let s = 0.3 + 0.2 * is as f64;
                    let c_lo = s / 2.0;
                    let cx = c_lo + (1.0 - s) * ix as f64 / 5.0;
                    let cy = c_lo + (1.0 - s) * iy as f64 / 5.0;
                    let p = CropParams::new(cx, cy, s, s).unwrap();
                    let obj = match_objective(&est, &anchor, &p, 0.1).unwrap();
                    best_other = best_other.min(obj);
                }
            }
        }
        assert!(at_truth <= best_other + 1e-9, "{at_truth} vs grid best {best_other}");
    }

    #[test]
    fn rectify_full_frame_is_resize() {
        let anchor = anchor_image(48, 48).unwrap();
        let out = rectify(&anchor, &CropParams::FULL, 64, 64).unwrap();
        assert_eq!(out.rect, (0, 0, 64, 64));
        let direct = resize_bilinear(&anchor, 64, 64).unwrap();
        assert!(crate::tensor::max_abs_diff(&out.image, &direct).unwrap() < 1e-6);
    }

    #[test]
    fn rectify_inverts_synthetic_crop() {
        // smooth image so resize interpolation losses stay small
        let mut data = vec![0f32; 3 * 96 * 96];
        for c in 0..3 {
            for y in 0..96 {
                for x in 0..96 {
                    let v = 0.5
                        + 0.3 * ((x as f32 / 96.0 * 4.0).sin() * (y as f32 / 96.0 * 3.0).cos());
                    data[(c * 96 + y) * 96 + x] = v * (1.0 + c as f32 * 0.1) / 1.3;
                }
            }
        }
        let img = Tensor::from_vec(data, (3, 96, 96), &device()).unwrap();
        let truth = CropParams::new(0.5, 0.45, 0.6, 0.7).unwrap();
        let (x0, y0, _, _) = truth.bbox();
        // synthetic "received" image: the crop blown up to frame size
        let received = crop_resize(&img, y0, x0, truth.s_y, truth.s_x, 96, 96).unwrap();
        let padded = rectify(&received, &truth, 96, 96).unwrap();
        let (ry, rx, rh, rw) = padded.rect;
        let inner = padded.image.narrow(1, ry, rh).unwrap().narrow(2, rx, rw).unwrap();
        let truth_inner = img.narrow(1, ry, rh).unwrap().narrow(2, rx, rw).unwrap();
        let psnr = crate::metrics::psnr(&inner, &truth_inner).unwrap();
        assert!(psnr >= 40.0, "inner PSNR {psnr}");
    }

    #[test]
    fn degenerate_params_rejected() {
        let img = anchor_image(32, 32).unwrap();
        let p = CropParams { c_x: 0.5, c_y: 0.5, s_x: 0.0, s_y: 0.5 };
        assert!(matches!(rectify(&img, &p, 96, 96), Err(Error::InvalidParams(_))));
        let tiny = CropParams { c_x: 0.5, c_y: 0.5, s_x: 0.01, s_y: 0.5 };
        assert!(matches!(rectify(&img, &tiny, 96, 96), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn is_cropped_thresholds() {
        assert!(!is_cropped(&CropParams::FULL, 0.02));
        assert!(is_cropped(&CropParams::new(0.5, 0.5, 0.5, 0.5).unwrap(), 0.02));
        assert!(!is_cropped(&CropParams::new(0.5, 0.5, 0.995, 0.995).unwrap(), 0.02));
    }

    #[test]
    fn translation_consistency() {
        let anchor = anchor_image(64, 64).unwrap();
        let base = CropParams::new(0.45, 0.5, 0.5, 0.5).unwrap();
        let shifted = CropParams::new(0.45 + 0.1, 0.5, 0.5, 0.5).unwrap();
        let run = |p: &CropParams| {
            let (x0, y0, _, _) = p.bbox();
            let est = crop_resize(&anchor, y0, x0, p.s_y, p.s_x, 64, 64).unwrap();
            estimate_crop(&est, &anchor, &MatchConfig::default()).unwrap().0
        };
        let a = run(&base);
        let b = run(&shifted);
        assert!(((b.c_x - a.c_x) - 0.1).abs() < 0.01, "shift {} vs 0.1", b.c_x - a.c_x);
    }
}
