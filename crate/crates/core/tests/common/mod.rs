//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use facemag::anchors::{box_iou, BBox};
use facemag::inference::Detection;
use facemag::roi::RoiSpec;
use facemag::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

pub fn det(b: BBox, score: f64) -> Detection {
    Detection { bbox: b, score, source_scale: 1.0 }
}

/// Max over every feature cell whose index falls in each output bin,
/// scanning the whole map.
pub fn brute_roi_pool(features: &Tensor, roi: &BBox, spec: &RoiSpec) -> Vec<f64> {
    let (_, c, h, w) = features.nchw().unwrap();
    let s = spec.spatial_scale;
    let x0 = (roi.x1 * s).floor().max(0.0);
    let y0 = (roi.y1 * s).floor().max(0.0);
    let x1 = (roi.x2 * s).ceil().min(w as f64);
    let y1 = (roi.y2 * s).ceil().min(h as f64);
    let (rw, rh) = (x1 - x0, y1 - y0);
    let (oh, ow) = (spec.out_h, spec.out_w);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let (lo_y, hi_y) = (y0 + (i as f64 * rh / oh as f64).floor(), y0 + ((i + 1) as f64 * rh / oh as f64).ceil());
                let (lo_x, hi_x) = (x0 + (j as f64 * rw / ow as f64).floor(), x0 + ((j + 1) as f64 * rw / ow as f64).ceil());
                let mut best = f64::NEG_INFINITY;
                for y in 0..h {
                    for x in 0..w {
                        let (yf, xf) = (y as f64, x as f64);
                        if yf >= lo_y && yf < hi_y && xf >= lo_x && xf < hi_x {
                            best = best.max(features.at4(0, ch, y, x));
                        }
                    }
                }
                out.push(if best == f64::NEG_INFINITY { 0.0 } else { best });
            }
        }
    }
    out
}

/// A feature map, a box overlapping it and a pooling spec.
pub fn random_roi_case(rng: &mut ChaCha8Rng) -> (Tensor, BBox, RoiSpec) {
    let (c, h, w) = (rng.random_range(1..4), rng.random_range(3..14), rng.random_range(3..14));
    let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let features = Tensor::from_vec(&[1, c, h, w], data).unwrap();
    let stride = [1.0, 4.0, 8.0, 16.0][rng.random_range(0..4)];
    let x1 = rng.random_range(0.0..(w as f64 - 1.0) * stride);
    let y1 = rng.random_range(0.0..(h as f64 - 1.0) * stride);
    let roi = bx(x1, y1, x1 + rng.random_range(1.0..8.0 * stride), y1 + rng.random_range(1.0..8.0 * stride));
    let spec = RoiSpec::new(rng.random_range(1..5), rng.random_range(1..5), 1.0 / stride).unwrap();
    (features, roi, spec)
}

/// Pairwise suppression over a stable score sort.
pub fn reference_nms(dets: &[Detection], t: f64) -> Vec<Detection> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut keep: Vec<Detection> = Vec::new();
    for i in idx {
        if keep.iter().all(|k| box_iou(&k.bbox, &dets[i].bbox) <= t) {
            keep.push(dets[i]);
        }
    }
    keep
}

pub fn random_dets(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
            let (w, h) = (rng.random_range(2.0..40.0), rng.random_range(2.0..40.0));
            // Coarse scores force ties.
            let s = (rng.random_range(0.0..1.0f64) * 40.0).floor() / 40.0;
            det(bx(x, y, x + w, y + h), s)
        })
        .collect()
}

/// Detections in ranking order (stable by score, image-major ties) and the GT sets.
pub struct ApInstance {
    pub per_image: Vec<Vec<Detection>>,
    pub gts: Vec<Vec<BBox>>,
}

pub fn random_ap_instance(rng: &mut ChaCha8Rng) -> ApInstance {
    loop {
        let images = rng.random_range(1..4);
        let gts: Vec<Vec<BBox>> = (0..images)
            .map(|_| {
                (0..rng.random_range(0..4))
                    .map(|_| {
                        let (x, y) = (rng.random_range(0..4) as f64 * 4.0, rng.random_range(0..4) as f64 * 4.0);
                        bx(x, y, x + 8.0, y + 8.0)
                    })
                    .collect()
            })
            .collect();
        if gts.iter().all(Vec::is_empty) {
            continue;
        }
        let mut per_image = vec![Vec::new(); images];
        for _ in 0..rng.random_range(0..=6) {
            let (x, y) = (rng.random_range(0..5) as f64 * 3.0, rng.random_range(0..5) as f64 * 3.0);
            let s = rng.random_range(0..4) as f64 / 4.0;
            per_image[rng.random_range(0..images)].push(det(bx(x, y, x + 8.0, y + 8.0), s));
        }
        return ApInstance { per_image, gts };
    }
}

/// All-point AP: for each recall level reached, the best precision at any
/// cutoff with at least that recall, integrated over recall increments.
pub fn exhaustive_ap(inst: &ApInstance, t: f64) -> f64 {
    let total: usize = inst.gts.iter().map(Vec::len).sum();
    let mut ranked: Vec<(usize, BBox, f64)> = Vec::new();
    for (i, ds) in inst.per_image.iter().enumerate() {
        ranked.extend(ds.iter().map(|d| (i, d.bbox, d.score)));
    }
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    let mut matched = vec![Vec::new(); inst.gts.len()];
    let mut cum_tp = Vec::new();
    let mut tp = 0usize;
    for (img, b, _) in &ranked {
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in inst.gts[*img].iter().enumerate() {
            let iou = box_iou(b, g);
            if iou >= t && !matched[*img].contains(&j) && best.is_none_or(|(bi, _)| iou > bi) {
                best = Some((iou, j));
            }
        }
        if let Some((_, j)) = best {
            matched[*img].push(j);
            tp += 1;
        }
        cum_tp.push(tp);
    }
    let mut ap = 0.0;
    for k in 1..=total {
        let recall = k as f64 / total as f64;
        let best_prec = (0..ranked.len())
            .filter(|&c| cum_tp[c] as f64 / total as f64 >= recall)
            .map(|c| cum_tp[c] as f64 / (c + 1) as f64)
            .fold(0.0, f64::max);
        ap += best_prec / total as f64;
    }
    ap
}
