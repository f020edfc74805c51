//! Proposals, non-maximum suppression, and single-scale / pyramid detection.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::anchors::{box_iou, decode_box_targets, BBox};
use crate::error::{shape_err, Error, Result};
use crate::models::{Model, Pass, RpnView, INPUT_MULTIPLE};
use crate::tensor::Tensor;

/// Proposals narrower or shorter than this are discarded.
pub const MIN_PROPOSAL_SIDE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub source_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidSpec {
    scales: Vec<f64>,
}

impl PyramidSpec {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Validation(format!("pyramid scales must be nonempty and positive: {scales:?}")));
        }
        Ok(PyramidSpec { scales })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Parses a comma-separated list such as `1,1.5,2`.
    pub fn parse(s: &str) -> Result<Self> {
        let scales = s
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Validation(format!("bad scale {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        PyramidSpec::new(scales)
    }
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec { scales: vec![1.0, 1.5, 2.0] }
    }
}

/// Knobs shared by proposal generation and detection.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectConfig {
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub rpn_nms_thresh: f64,
    /// Candidates kept per branch, by objectness, before proposal NMS.
    pub pre_nms_top: usize,
    /// Proposals per branch passed to the region head.
    pub proposals: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_thresh: 0.5,
            nms_thresh: 0.3,
            rpn_nms_thresh: 0.7,
            pre_nms_top: 6000,
            proposals: 300,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, t) in [("nms_thresh", self.nms_thresh), ("rpn_nms_thresh", self.rpn_nms_thresh)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Validation(format!("{k} {t} outside (0, 1)")));
            }
        }
        if self.pre_nms_top == 0 || self.proposals == 0 {
            return Err(Error::Validation("pre_nms_top and proposals must be positive".into()));
        }
        Ok(())
    }
}

fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy suppression; returns kept indices in descending score order, ties by
/// input order. Stops after `limit` kept boxes.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], thresh: f64, limit: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if kept.len() >= limit {
            break;
        }
        if kept.iter().all(|&k| box_iou(&boxes[k], &boxes[i]) <= thresh) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[Detection], iou_thresh: f64) -> Result<Vec<Detection>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::Param(format!("nms threshold {iou_thresh} outside (0, 1)")));
    }
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    Ok(nms_indices(&boxes, &scores, iou_thresh, usize::MAX)
        .into_iter()
        .map(|i| dets[i])
        .collect())
}

/// Decoded, clipped candidates of one branch, best `pre_nms_top` by objectness.
fn branch_candidates(view: &RpnView<'_>, w: f64, h: f64, pre_nms_top: usize) -> Vec<Proposal> {
    let n = view.grid.len();
    let scores: Vec<f64> = (0..n).map(|i| view.objectness(i)).collect();
    let mut order = score_order(&scores);
    let mut out = Vec::with_capacity(pre_nms_top.min(n));
    for i in order.drain(..) {
        if out.len() >= pre_nms_top {
            break;
        }
        let b = decode_box_targets(&view.grid.anchors[i], &view.deltas(i), Some((w, h)));
        if b.width() >= MIN_PROPOSAL_SIDE && b.height() >= MIN_PROPOSAL_SIDE {
            out.push(Proposal { bbox: b, objectness: scores[i] });
        }
    }
    out
}

fn suppress(cands: Vec<Proposal>, thresh: f64, k: usize) -> Vec<Proposal> {
    let boxes: Vec<BBox> = cands.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = cands.iter().map(|p| p.objectness).collect();
    nms_indices(&boxes, &scores, thresh, k).into_iter().map(|i| cands[i]).collect()
}

/// Proposals of one branch of a recorded pass.
pub fn branch_proposals(pass: &Pass, branch: usize, cfg: &DetectConfig, k: usize) -> Vec<Proposal> {
    let (w, h) = (pass.image_w as f64, pass.image_h as f64);
    suppress(branch_candidates(&pass.rpn(branch), w, h, cfg.pre_nms_top), cfg.rpn_nms_thresh, k)
}

/// Top-`k` proposals over all branches, by objectness after proposal NMS.
pub fn propose_topk(model: &Model, image: &Tensor, k: usize, cfg: &DetectConfig) -> Result<Vec<Proposal>> {
    let pass = model.begin(image)?;
    let (w, h) = (pass.image_w as f64, pass.image_h as f64);
    let mut cands = Vec::new();
    for b in 0..pass.branch_count() {
        cands.extend(branch_candidates(&pass.rpn(b), w, h, cfg.pre_nms_top));
    }
    Ok(suppress(cands, cfg.rpn_nms_thresh, k))
}

/// Propose, score with the region head, refine, threshold and suppress.
/// Output is in descending score order.
pub fn detect_single_scale(model: &Model, image: &Tensor, cfg: &DetectConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut pass = model.begin(image)?;
    let (w, h) = (pass.image_w as f64, pass.image_h as f64);
    let mut dets = Vec::new();
    for b in 0..pass.branch_count() {
        let props: Vec<BBox> = branch_proposals(&pass, b, cfg, cfg.proposals).iter().map(|p| p.bbox).collect();
        if props.is_empty() {
            continue;
        }
        let scored = model.forward_heads(&mut pass, b, &props)?;
        for ((pb, &score), t) in scored.boxes.iter().zip(&scored.scores).zip(&scored.deltas) {
            if score <= cfg.score_thresh {
                continue;
            }
            let bbox = decode_box_targets(pb, t, Some((w, h)));
            if bbox.is_valid() {
                dets.push(Detection { bbox, score, source_scale: 1.0 });
            }
        }
    }
    nms(&dets, cfg.nms_thresh)
}

/// Nearest-neighbour resampling of a `[3, H, W]` (or `[1, 3, H, W]`) image.
pub fn resize_nearest(image: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = image.nchw()?;
    if n != 1 || new_h == 0 || new_w == 0 {
        return Err(shape_err!("resize {:?} to {new_h}x{new_w}", image.dims()));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * new_h * new_w);
    for ch in 0..c {
        for y in 0..new_h {
            let sy = (((y as f64 + 0.5) * h as f64 / new_h as f64) as usize).min(h - 1);
            for x in 0..new_w {
                let sx = (((x as f64 + 0.5) * w as f64 / new_w as f64) as usize).min(w - 1);
                out.push(src[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::from_vec(&[c, new_h, new_w], out)
}

fn round_to_multiple(v: f64) -> usize {
    let m = INPUT_MULTIPLE as f64;
    (((v / m).round() as usize).max(1)) * INPUT_MULTIPLE
}

/// Resamples an image by `scale`, rounding each side to a multiple of 16.
/// Returns the image and the realized `(sx, sy)` ratios.
pub fn rescale_image(image: &Tensor, scale: f64) -> Result<(Tensor, f64, f64)> {
    let (_, _, h, w) = image.nchw()?;
    let (nh, nw) = (round_to_multiple(h as f64 * scale), round_to_multiple(w as f64 * scale));
    let out = if (nh, nw) == (h, w) {
        Tensor::from_vec(&image.dims()[image.dims().len() - 3..], image.data().to_vec())?
    } else {
        resize_nearest(image, nh, nw)?
    };
    Ok((out, nw as f64 / w as f64, nh as f64 / h as f64))
}

/// The scale that brings the shorter side to `min_side`, reduced if the
/// longer side would exceed `max_side`.
pub fn side_scale(h: usize, w: usize, min_side: Option<f64>, max_side: Option<f64>) -> f64 {
    let (short, long) = (h.min(w) as f64, h.max(w) as f64);
    let mut s = min_side.map_or(1.0, |m| m / short);
    if let Some(m) = max_side {
        if long * s > m {
            s = m / long;
        }
    }
    s
}

/// Runs detection per pyramid scale, maps boxes back to the input frame and
/// merges everything with one joint NMS.
pub fn detect_pyramid(model: &Model, image: &Tensor, spec: &PyramidSpec, cfg: &DetectConfig) -> Result<Vec<Detection>> {
    let (_, _, h, w) = image.nchw()?;
    let mut all = Vec::new();
    for &s in spec.scales() {
        let (img, sx, sy) = rescale_image(image, s)?;
        for d in detect_single_scale(model, &img, cfg)? {
            let bbox = d.bbox.scaled(1.0 / sx, 1.0 / sy).clip(w as f64, h as f64);
            if bbox.is_valid() {
                all.push(Detection { bbox, score: d.score, source_scale: s });
            }
        }
    }
    nms(&all, cfg.nms_thresh)
}

/// Descending score, then box coordinates.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then_with(|| {
            [a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2]
                .iter()
                .zip([b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2])
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
}

/// One `image_id x1 y1 x2 y2 score scale` line per detection.
pub fn format_detections(image_id: &str, dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = &d.bbox;
        let _ = writeln!(
            s,
            "{image_id} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            b.x1, b.y1, b.x2, b.y2, d.score, d.source_scale
        );
    }
    s
}

/// Inverse of [`format_detections`]; blank lines are skipped.
pub fn parse_detections(text: &str) -> Result<Vec<(String, Detection)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", f.len())));
        }
        let v = f[1..]
            .iter()
            .map(|x| x.parse::<f64>().map_err(|_| bad(format!("non-numeric field {x:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let bbox = BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| bad(e.to_string()))?;
        out.push((f[0].to_string(), Detection { bbox, score: v[4], source_scale: v[5] }));
    }
    Ok(out)
}
