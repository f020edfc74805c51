//! Anchor grids, box geometry, ground-truth assignment and box-delta coding.

use crate::error::{Error, Result};

/// Largest log size ratio fed to `exp` when decoding.
pub const MAX_LOG_RATIO: f64 = 4.0;

/// Axis-aligned box in pixel coordinates, `[x1, x2) x [y1, y2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::Param(format!("invalid box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn min_side(&self) -> f64 {
        self.width().min(self.height())
    }

    pub fn max_side(&self) -> f64 {
        self.width().max(self.height())
    }

    /// Clamps to `[0, width] x [0, height]`; the result may be degenerate.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Box deltas: center offsets in anchor units and log size ratios.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl RegressionTarget {
    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        RegressionTarget {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }
}

pub fn encode_box_targets(anchor: &BBox, gt: &BBox) -> RegressionTarget {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    RegressionTarget {
        tx: (gx - ax) / aw,
        ty: (gy - ay) / ah,
        tw: (gt.width() / aw).ln(),
        th: (gt.height() / ah).ln(),
    }
}

/// Inverse of [`encode_box_targets`]. Log ratios are clamped to
/// `±MAX_LOG_RATIO`; when `image` is `(width, height)` the result is clipped to it.
pub fn decode_box_targets(anchor: &BBox, t: &RegressionTarget, image: Option<(f64, f64)>) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let w = aw * t.tw.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
    let h = ah * t.th.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
    let b = BBox::from_center(ax + t.tx * aw, ay + t.ty * ah, w, h);
    match image {
        Some((iw, ih)) => b.clip(iw, ih),
        None => b,
    }
}

/// Square anchors tiled over a feature map, ordered `(row, col, scale)`.
#[derive(Clone, Debug)]
pub struct AnchorGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub feature_stride: usize,
    pub scales: Vec<f64>,
    pub anchors: Vec<BBox>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Flat index of the anchor at `(row, col)` with scale index `s`.
    pub fn index(&self, row: usize, col: usize, s: usize) -> usize {
        (row * self.grid_w + col) * self.scales.len() + s
    }
}

pub fn generate_anchor_grid(grid_h: usize, grid_w: usize, feature_stride: usize, scales: &[f64]) -> Result<AnchorGrid> {
    if feature_stride == 0 {
        return Err(Error::Param("feature stride must be >= 1".into()));
    }
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Param(format!("anchor scales must be nonempty and positive: {scales:?}")));
    }
    let stride = feature_stride as f64;
    let mut anchors = Vec::with_capacity(grid_h * grid_w * scales.len());
    for row in 0..grid_h {
        for col in 0..grid_w {
            let cx = (col as f64 + 0.5) * stride;
            let cy = (row as f64 + 0.5) * stride;
            for &s in scales {
                anchors.push(BBox::from_center(cx, cy, s, s));
            }
        }
    }
    Ok(AnchorGrid {
        grid_h,
        grid_w,
        feature_stride,
        scales: scales.to_vec(),
        anchors,
    })
}

/// `count` anchor sides in geometric progression from `min_side` to `max_side`,
/// so the anchors span the box sizes seen in training data.
pub fn coverage_scales(min_side: f64, max_side: f64, count: usize) -> Result<Vec<f64>> {
    if !(min_side > 0.0 && max_side >= min_side) || count == 0 {
        return Err(Error::Param(format!("scale range [{min_side}, {max_side}] x {count}")));
    }
    if count == 1 {
        return Ok(vec![(min_side * max_side).sqrt()]);
    }
    let ratio = (max_side / min_side).powf(1.0 / (count - 1) as f64);
    Ok((0..count).map(|i| min_side * ratio.powi(i as i32)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug)]
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
    /// Index into the ground-truth list for positive entries.
    pub matched_gt: Vec<Option<usize>>,
    /// Encoded targets for positive entries.
    pub targets: Vec<Option<RegressionTarget>>,
    /// Best IoU of each entry against any ground truth.
    pub max_iou: Vec<f64>,
}

impl MatchResult {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == AnchorLabel::Positive).count()
    }
}

/// Assigns boxes to ground truth: max-IoU `> hi` is positive, `< lo` negative,
/// anything between ignored. Each ground truth's best box (lowest index on
/// ties, IoU > 0) is forced positive.
pub fn match_boxes(boxes: &[BBox], gts: &[BBox], lo: f64, hi: f64) -> Result<MatchResult> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
        return Err(Error::Param(format!("thresholds lo={lo} hi={hi}")));
    }
    let n = boxes.len();
    let mut best_gt = vec![None; n];
    let mut max_iou = vec![0.0; n];
    let mut gt_best: Vec<(f64, Option<usize>)> = vec![(0.0, None); gts.len()];
    for (i, b) in boxes.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let iou = box_iou(b, gt);
            if iou > max_iou[i] {
                max_iou[i] = iou;
                best_gt[i] = Some(g);
            }
            if iou > gt_best[g].0 {
                gt_best[g] = (iou, Some(i));
            }
        }
    }
    let mut labels = vec![AnchorLabel::Ignore; n];
    let mut matched_gt = vec![None; n];
    for i in 0..n {
        if max_iou[i] < lo {
            labels[i] = AnchorLabel::Negative;
        } else if max_iou[i] > hi {
            labels[i] = AnchorLabel::Positive;
            matched_gt[i] = best_gt[i];
        }
    }
    for (g, &(_, best)) in gt_best.iter().enumerate() {
        if let Some(i) = best {
            if labels[i] != AnchorLabel::Positive {
                labels[i] = AnchorLabel::Positive;
                matched_gt[i] = Some(g);
            }
        }
    }
    let targets = matched_gt
        .iter()
        .zip(boxes)
        .map(|(m, b)| m.map(|g| encode_box_targets(b, &gts[g])))
        .collect();
    Ok(MatchResult {
        labels,
        matched_gt,
        targets,
        max_iou,
    })
}

pub fn match_anchors(grid: &AnchorGrid, gts: &[BBox], lo: f64, hi: f64) -> Result<MatchResult> {
    match_boxes(&grid.anchors, gts, lo, hi)
}
