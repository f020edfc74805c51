//! Region feature extraction: RoI max pooling, context boxes and per-region
//! block normalization.

use crate::anchors::BBox;
use crate::error::{shape_err, Error, Result};
use crate::layers::{l2_normalize_global, l2_normalize_global_backward};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSpec {
    pub out_h: usize,
    pub out_w: usize,
    /// Feature cells per image pixel, `1 / feature_stride`.
    pub spatial_scale: f64,
}

impl RoiSpec {
    pub fn new(out_h: usize, out_w: usize, spatial_scale: f64) -> Result<Self> {
        if out_h == 0 || out_w == 0 || !(spatial_scale > 0.0) {
            return Err(Error::Param(format!("roi spec {out_h}x{out_w} scale {spatial_scale}")));
        }
        Ok(RoiSpec { out_h, out_w, spatial_scale })
    }

    pub fn for_stride(out: usize, stride: usize) -> Self {
        RoiSpec {
            out_h: out,
            out_w: out,
            spatial_scale: 1.0 / stride as f64,
        }
    }
}

/// Output of [`roi_max_pool`] plus the argmax routing its backward pass uses.
#[derive(Clone, Debug)]
pub struct PooledRoi {
    pub output: Tensor,
    /// Flat `[C, H, W]` feature offset feeding each output cell; `None` for empty windows.
    pub argmax: Vec<Option<usize>>,
}

/// Feature-cell window `[start, end)` of a box edge pair, rounded outward and clipped.
fn cell_range(lo: f64, hi: f64, scale: f64, extent: usize) -> (isize, isize) {
    let start = (lo * scale).floor().max(0.0) as isize;
    let end = ((hi * scale).ceil() as isize).min(extent as isize);
    (start, end)
}

/// Max-pools the region of `features` (`[1, C, H, W]` or `[C, H, W]`) under
/// `roi` into a `[C, out_h, out_w]` grid.
pub fn roi_max_pool(features: &Tensor, roi: &BBox, spec: &RoiSpec) -> Result<PooledRoi> {
    let (n, c, h, w) = features.nchw()?;
    if n != 1 {
        return Err(shape_err!("roi pooling expects one image, got batch {n}"));
    }
    let (x0, x1) = cell_range(roi.x1, roi.x2, spec.spatial_scale, w);
    let (y0, y1) = cell_range(roi.y1, roi.y2, spec.spatial_scale, h);
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::Degenerate(format!("roi {roi:?} lies outside the {h}x{w} feature map")));
    }
    let (rw, rh) = ((x1 - x0) as usize, (y1 - y0) as usize);
    let (oh, ow) = (spec.out_h, spec.out_w);
    let data = features.data();
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = vec![None; c * oh * ow];
    for i in 0..oh {
        let hs = y0 as usize + (i * rh) / oh;
        let he = y0 as usize + ((i + 1) * rh).div_ceil(oh);
        for j in 0..ow {
            let ws = x0 as usize + (j * rw) / ow;
            let we = x0 as usize + ((j + 1) * rw).div_ceil(ow);
            if he <= hs || we <= ws {
                continue;
            }
            for ch in 0..c {
                let plane = ch * h * w;
                let mut best = plane + hs * w + ws;
                for y in hs..he {
                    for x in ws..we {
                        let idx = plane + y * w + x;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                let o = (ch * oh + i) * ow + j;
                out[o] = data[best];
                argmax[o] = Some(best);
            }
        }
    }
    Ok(PooledRoi {
        output: Tensor::from_vec(&[c, oh, ow], out)?,
        argmax,
    })
}

/// Adds the backward of one pooled region into `feature_grad`.
pub fn roi_max_pool_backward(feature_grad: &mut Tensor, pooled: &PooledRoi, out_grad: &Tensor) -> Result<()> {
    if out_grad.numel() != pooled.argmax.len() {
        return Err(shape_err!("roi backward: out_grad {:?}", out_grad.dims()));
    }
    let dst = feature_grad.data_mut();
    for (src, g) in pooled.argmax.iter().zip(out_grad.data()) {
        if let Some(i) = src {
            dst[*i] += g;
        }
    }
    Ok(())
}

/// Scales a box about its center by `factor` and clips it to the image.
pub fn expand_context_box(roi: &BBox, factor: f64, image_w: f64, image_h: f64) -> Result<BBox> {
    if !(factor >= 1.0) {
        return Err(Error::Param(format!("context factor {factor} < 1")));
    }
    let (cx, cy) = roi.center();
    Ok(BBox::from_center(cx, cy, roi.width() * factor, roi.height() * factor).clip(image_w, image_h))
}

/// Divides a pooled `[C, h, w]` block by its global L2 norm.
pub fn normalize_roi_block(pooled: &Tensor) -> Result<Tensor> {
    l2_normalize_global(pooled)
}

pub fn normalize_roi_block_backward(pooled: &Tensor, out_grad: &Tensor) -> Result<Tensor> {
    l2_normalize_global_backward(pooled, out_grad)
}
