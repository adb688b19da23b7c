use chartmark::anchor::anchor_image;
use chartmark::crop::{estimate_crop, CropParams, MatchConfig};
use chartmark::tensor::{crop_resize, rand_uniform, seeded_rng};
use rand::Rng;

fn main() {
    let anchor = anchor_image(96, 96).unwrap();
    let cfg = MatchConfig::default();
    // clean pass: every coordinate must land within 0.02
    let mut rng = seeded_rng(7777);
    let t0 = std::time::Instant::now();
    let mut worst = 0f64;
    let mut fails = 0;
    for _ in 0..100 {
        let s_x = rng.random_range(0.3..1.0);
        let s_y = rng.random_range(0.3..1.0);
        let c_x = rng.random_range(s_x / 2.0..1.0 - s_x / 2.0);
        let c_y = rng.random_range(s_y / 2.0..1.0 - s_y / 2.0);
        let truth = CropParams::new(c_x, c_y, s_x, s_y).unwrap();
        let (x0, y0, _, _) = truth.bbox();
        let clean = crop_resize(&anchor, y0, x0, s_y, s_x, 96, 96).unwrap();
        let (got, _) = estimate_crop(&clean, &anchor, &cfg).unwrap();
        let w = [(got.c_x - truth.c_x).abs(), (got.c_y - truth.c_y).abs(), (got.s_x - truth.s_x).abs(), (got.s_y - truth.s_y).abs()]
            .into_iter().fold(0.0f64, f64::max);
        worst = worst.max(w);
        if w > 0.02 { fails += 1; println!("clean fail: truth=({c_x:.3},{c_y:.3},{s_x:.3},{s_y:.3}) got=({:.3},{:.3},{:.3},{:.3})", got.c_x, got.c_y, got.s_x, got.s_y); }
    }
    println!("clean: elapsed {:?} worst coord err {:.4}, fails {fails}", t0.elapsed(), worst);

    // noisy pass: 20% masked, mean IoU >= 0.9
    let mut rng = seeded_rng(8888);
    let mut ious = Vec::new();
    let t1 = std::time::Instant::now();
    for _ in 0..100 {
        let s_x = rng.random_range(0.3..1.0);
        let s_y = rng.random_range(0.3..1.0);
        let c_x = rng.random_range(s_x / 2.0..1.0 - s_x / 2.0);
        let c_y = rng.random_range(s_y / 2.0..1.0 - s_y / 2.0);
        let truth = CropParams::new(c_x, c_y, s_x, s_y).unwrap();
        let (x0, y0, _, _) = truth.bbox();
        let mut est = crop_resize(&anchor, y0, x0, s_y, s_x, 96, 96).unwrap();
        let mut covered = 0.0;
        while covered < 0.20 {
            let mw = rng.random_range(0.15..0.4);
            let mh = rng.random_range(0.15..0.4);
            let mx = rng.random_range(0.0..1.0 - mw);
            let my = rng.random_range(0.0..1.0 - mh);
            let (px, py) = ((mx * 96.0) as usize, (my * 96.0) as usize);
            let (pw, ph) = ((mw * 96.0) as usize, (mh * 96.0) as usize);
            let noise = rand_uniform(&mut rng, (3, ph, pw), 0.0, 1.0).unwrap();
            est = est.slice_assign(&[0..3, py..py + ph, px..px + pw], &noise).unwrap();
            covered += mw * mh;
        }
        let (got, _) = estimate_crop(&est, &anchor, &cfg).unwrap();
        ious.push(truth.iou(&got));
    }
    let mean_iou: f64 = ious.iter().sum::<f64>() / ious.len() as f64;
    println!("noisy: elapsed {:?} mean IoU {:.4} min IoU {:.4}", t1.elapsed(), mean_iou, ious.iter().cloned().fold(f64::INFINITY, f64::min));
}
