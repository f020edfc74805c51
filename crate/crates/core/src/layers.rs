//! Differentiable primitives with explicit forward and backward passes.
//!
//! Every op takes and returns fresh tensors. Spatial ops expect `[N, C, H, W]`
//! inputs; convolution weights are `[out, in, k, k]` and transposed
//! convolution weights `[in, out, k, k]`, so one weight tensor drives a
//! convolution and its transpose.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Init, Tensor};

/// Norm floor for [`l2_normalize_global`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LayerParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        LayerParams { weight, bias }
    }

    pub fn zeros_like(&self) -> Self {
        LayerParams {
            weight: Tensor::zeros_like(&self.weight),
            bias: self.bias.as_ref().map(Tensor::zeros_like),
        }
    }

    pub fn numel(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    pub fn add_assign(&mut self, other: &LayerParams) -> Result<()> {
        self.weight.add_assign(&other.weight)?;
        match (&mut self.bias, &other.bias) {
            (Some(a), Some(b)) => a.add_assign(b),
            (None, None) => Ok(()),
            _ => Err(shape_err!("bias presence differs")),
        }
    }
}

/// Gradients of one layer application.
#[derive(Clone, Debug)]
pub struct GradPair {
    pub input_grad: Tensor,
    pub param_grads: LayerParams,
}

/// He-style initialization: gaussian with std `sqrt(2 / fan_in)`, zero bias.
pub fn he_init(weight_dims: &[usize], fan_in: usize, out_channels: usize, seed: u64) -> Result<LayerParams> {
    let std = (2.0 / fan_in as f64).sqrt();
    let weight = Tensor::create(weight_dims, Init::Gaussian { mean: 0.0, std, seed })?;
    Ok(LayerParams::new(weight, Some(Tensor::zeros(&[out_channels])?)))
}

/// Bilinear-upsampling initialization for a `[cin, cout, k, k]` transposed
/// convolution. Input channel `i` feeds output channel `i * cout / cin`,
/// scaled so each output channel averages the inputs it receives.
pub fn bilinear_transpose_init(cin: usize, cout: usize, k: usize) -> Result<LayerParams> {
    let factor = k.div_ceil(2) as f64;
    let center = if k % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
    let filt = |i: usize| 1.0 - (i as f64 - center).abs() / factor;
    let mut fan = vec![0usize; cout];
    for i in 0..cin {
        fan[i * cout / cin] += 1;
    }
    let mut w = Tensor::zeros(&[cin, cout, k, k])?;
    let data = w.data_mut();
    for i in 0..cin {
        let o = i * cout / cin;
        for ky in 0..k {
            for kx in 0..k {
                data[((i * cout + o) * k + ky) * k + kx] = filt(ky) * filt(kx) / fan[o] as f64;
            }
        }
    }
    Ok(LayerParams::new(w, Some(Tensor::zeros(&[cout])?)))
}

/// `c = beta * c + op(a) * op(b)` with row-major operands; `op` transposes when flagged.
/// `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths are checked above against the strides used.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    in_h: usize,
    in_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(channels: usize, in_h: usize, in_w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Param("stride must be >= 1".into()));
        }
        if in_h + 2 * pad < k || in_w + 2 * pad < k {
            return Err(shape_err!("kernel {k} does not fit {in_h}x{in_w} with pad {pad}"));
        }
        Ok(ConvGeom {
            channels,
            in_h,
            in_w,
            k,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one `[C, H, W]` image into a `[C*k*k, out_h*out_w]` matrix.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let ncol = self.cols();
        for c in 0..self.channels {
            let plane = &img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s - p + ky as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s - p + kx as isize;
                            *v = if ix < 0 || ix >= self.in_w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds columns back into an image.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let ncol = self.cols();
        for c in 0..self.channels {
            let plane = &mut img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..self.out_w {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn square_kernel(w: &Tensor) -> Result<(usize, usize, usize)> {
    match *w.dims() {
        [a, b, kh, kw] if kh == kw => Ok((a, b, kh)),
        _ => Err(shape_err!("expected [a, b, k, k] kernel, got {:?}", w.dims())),
    }
}

fn check_bias(p: &LayerParams, n: usize) -> Result<()> {
    match &p.bias {
        Some(b) if b.numel() != n => Err(shape_err!("bias length {} != {n}", b.numel())),
        _ => Ok(()),
    }
}

fn add_bias(out: &mut [f64], bias: Option<&Tensor>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad(p: &LayerParams, g: &Tensor, channels: usize) -> Result<Option<Tensor>> {
    if p.bias.is_none() {
        return Ok(None);
    }
    let (n, _, h, w) = g.nchw()?;
    let plane = h * w;
    let mut db = vec![0.0; channels];
    for i in 0..n {
        for (c, v) in db.iter_mut().enumerate() {
            let start = (i * channels + c) * plane;
            *v += g.data()[start..start + plane].iter().sum::<f64>();
        }
    }
    Ok(Some(Tensor::from_vec(&[channels], db)?))
}

pub fn conv2d_output_extent(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// 2-D cross-correlation; weight `[cout, cin, k, k]`.
pub fn conv2d(x: &Tensor, p: &LayerParams, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, cin, h, w) = x.nchw()?;
    let (cout, wcin, k) = square_kernel(&p.weight)?;
    if wcin != cin {
        return Err(shape_err!("conv2d: input has {cin} channels, weight expects {wcin}"));
    }
    check_bias(p, cout)?;
    let g = ConvGeom::new(cin, h, w, k, stride, pad)?;
    let mut out = vec![0.0; n * cout * g.cols()];
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for i in 0..n {
        g.im2col(&x.data()[i * cin * h * w..(i + 1) * cin * h * w], &mut cols);
        let dst = &mut out[i * cout * g.cols()..(i + 1) * cout * g.cols()];
        gemm(cout, g.rows(), g.cols(), p.weight.data(), false, &cols, false, 0.0, dst);
        add_bias(dst, p.bias.as_ref(), g.cols());
    }
    Tensor::from_vec(&[n, cout, g.out_h, g.out_w], out)
}

pub fn conv2d_backward(x: &Tensor, p: &LayerParams, stride: usize, pad: usize, out_grad: &Tensor) -> Result<GradPair> {
    let (n, cin, h, w) = x.nchw()?;
    let (cout, _, k) = square_kernel(&p.weight)?;
    let g = ConvGeom::new(cin, h, w, k, stride, pad)?;
    if out_grad.dims() != [n, cout, g.out_h, g.out_w] {
        return Err(shape_err!("conv2d backward: out_grad {:?}", out_grad.dims()));
    }
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; p.weight.numel()];
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let mut dcols = vec![0.0; g.rows() * g.cols()];
    for i in 0..n {
        let gi = &out_grad.data()[i * cout * g.cols()..(i + 1) * cout * g.cols()];
        g.im2col(&x.data()[i * cin * h * w..(i + 1) * cin * h * w], &mut cols);
        gemm(cout, g.cols(), g.rows(), gi, false, &cols, true, 1.0, &mut dw);
        gemm(g.rows(), cout, g.cols(), p.weight.data(), true, gi, false, 0.0, &mut dcols);
        g.col2im(&dcols, &mut dx[i * cin * h * w..(i + 1) * cin * h * w]);
    }
    Ok(GradPair {
        input_grad: Tensor::from_vec(x.dims(), dx)?,
        param_grads: LayerParams::new(Tensor::from_vec(p.weight.dims(), dw)?, bias_grad(p, out_grad, cout)?),
    })
}

pub fn convtranspose2d_output_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    ((extent - 1) * stride + k).checked_sub(2 * pad).filter(|&e| e > 0)
}

/// Transposed convolution; weight `[cin, cout, k, k]`. Its forward pass is the
/// input-gradient operator of [`conv2d`] with the same weight tensor.
pub fn convtranspose2d(x: &Tensor, p: &LayerParams, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, cin, h, w) = x.nchw()?;
    let (wcin, cout, k) = square_kernel(&p.weight)?;
    if wcin != cin {
        return Err(shape_err!("convtranspose2d: input has {cin} channels, weight expects {wcin}"));
    }
    if stride == 0 || pad >= k {
        return Err(Error::Param(format!("convtranspose2d stride {stride} pad {pad} kernel {k}")));
    }
    check_bias(p, cout)?;
    let (oh, ow) = match (
        convtranspose2d_output_extent(h, k, stride, pad),
        convtranspose2d_output_extent(w, k, stride, pad),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(shape_err!("convtranspose2d output extent is not positive")),
    };
    let g = ConvGeom::new(cout, oh, ow, k, stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    let mut out = vec![0.0; n * cout * oh * ow];
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for i in 0..n {
        let xi = &x.data()[i * cin * h * w..(i + 1) * cin * h * w];
        gemm(g.rows(), cin, g.cols(), p.weight.data(), true, xi, false, 0.0, &mut cols);
        let dst = &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow];
        g.col2im(&cols, dst);
        add_bias(dst, p.bias.as_ref(), oh * ow);
    }
    Tensor::from_vec(&[n, cout, oh, ow], out)
}

pub fn convtranspose2d_backward(x: &Tensor, p: &LayerParams, stride: usize, pad: usize, out_grad: &Tensor) -> Result<GradPair> {
    let (n, cin, h, w) = x.nchw()?;
    let (_, cout, k) = square_kernel(&p.weight)?;
    let (_, gc, oh, ow) = out_grad.nchw()?;
    if gc != cout {
        return Err(shape_err!("convtranspose2d backward: out_grad {:?}", out_grad.dims()));
    }
    let g = ConvGeom::new(cout, oh, ow, k, stride, pad)?;
    if (g.out_h, g.out_w) != (h, w) {
        return Err(shape_err!("convtranspose2d backward geometry mismatch"));
    }
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; p.weight.numel()];
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for i in 0..n {
        let gi = &out_grad.data()[i * cout * oh * ow..(i + 1) * cout * oh * ow];
        g.im2col(gi, &mut cols);
        let xi = &x.data()[i * cin * h * w..(i + 1) * cin * h * w];
        gemm(cin, g.rows(), g.cols(), p.weight.data(), false, &cols, false, 0.0, &mut dx[i * cin * h * w..(i + 1) * cin * h * w]);
        gemm(cin, g.cols(), g.rows(), xi, false, &cols, true, 1.0, &mut dw);
    }
    Ok(GradPair {
        input_grad: Tensor::from_vec(x.dims(), dx)?,
        param_grads: LayerParams::new(Tensor::from_vec(p.weight.dims(), dw)?, bias_grad(p, out_grad, cout)?),
    })
}

/// 2x2 max pooling with stride 2. Odd extents are rejected.
pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("maxpool2 needs even extents, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                out.push(r0[2 * ox].max(r0[2 * ox + 1]).max(r1[2 * ox]).max(r1[2 * ox + 1]));
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

/// Routes each output gradient to the first maximal element of its cell.
pub fn maxpool2_backward(x: &Tensor, out_grad: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.nchw()?;
    let (oh, ow) = (h / 2, w / 2);
    if out_grad.dims() != [n, c, oh, ow] {
        return Err(shape_err!("maxpool2 backward: out_grad {:?}", out_grad.dims()));
    }
    let mut dx = vec![0.0; x.numel()];
    for (p, (plane, gplane)) in x.data().chunks(h * w).zip(out_grad.data().chunks(oh * ow)).enumerate() {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let cand = [
                    2 * oy * w + 2 * ox,
                    2 * oy * w + 2 * ox + 1,
                    (2 * oy + 1) * w + 2 * ox,
                    (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if plane[i] > plane[best] {
                        best = i;
                    }
                }
                dx[base + best] += gplane[oy * ow + ox];
            }
        }
    }
    Tensor::from_vec(x.dims(), dx)
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::Param("upsample factor must be >= 1".into()));
    }
    let (n, c, h, w) = x.nchw()?;
    if factor == 1 {
        return Tensor::from_vec(&[n, c, h, w], x.data().to_vec());
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

/// Backward of [`upsample_nearest`]: sums each `factor x factor` block.
pub fn upsample_nearest_backward(out_grad: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::Param("upsample factor must be >= 1".into()));
    }
    let (n, c, oh, ow) = out_grad.nchw()?;
    if oh % factor != 0 || ow % factor != 0 {
        return Err(shape_err!("{oh}x{ow} is not a multiple of {factor}"));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = vec![0.0; n * c * h * w];
    for (p, plane) in out_grad.data().chunks(oh * ow).enumerate() {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += plane[oy * ow + ox];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], dx)
}

fn rows_of(x: &Tensor) -> (usize, usize) {
    let dims = x.dims();
    if dims.len() == 1 {
        (1, dims[0])
    } else {
        (dims[0], dims[1..].iter().product())
    }
}

/// `y = W x + b` per row; any trailing dims of `x` are flattened. Weight `[out, in]`.
pub fn fully_connected(x: &Tensor, p: &LayerParams) -> Result<Tensor> {
    let (rows, inner) = rows_of(x);
    let (out, win) = match *p.weight.dims() {
        [o, i] => (o, i),
        _ => return Err(shape_err!("fc weight must be rank 2, got {:?}", p.weight.dims())),
    };
    if win != inner {
        return Err(shape_err!("fc: input width {inner} != weight width {win}"));
    }
    check_bias(p, out)?;
    let mut y = vec![0.0; rows * out];
    gemm(rows, inner, out, x.data(), false, p.weight.data(), true, 0.0, &mut y);
    if let Some(b) = &p.bias {
        for row in y.chunks_mut(out) {
            row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
    }
    Tensor::from_vec(&[rows, out], y)
}

pub fn fully_connected_backward(x: &Tensor, p: &LayerParams, out_grad: &Tensor) -> Result<GradPair> {
    let (rows, inner) = rows_of(x);
    let out = p.weight.dims()[0];
    if out_grad.numel() != rows * out {
        return Err(shape_err!("fc backward: out_grad {:?}", out_grad.dims()));
    }
    let g = out_grad.data();
    let mut dx = vec![0.0; rows * inner];
    gemm(rows, out, inner, g, false, p.weight.data(), false, 0.0, &mut dx);
    let mut dw = vec![0.0; out * inner];
    gemm(out, rows, inner, g, true, x.data(), false, 0.0, &mut dw);
    let db = match &p.bias {
        Some(_) => {
            let mut db = vec![0.0; out];
            for row in g.chunks(out) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            Some(Tensor::from_vec(&[out], db)?)
        }
        None => None,
    };
    Ok(GradPair {
        input_grad: Tensor::from_vec(x.dims(), dx)?,
        param_grads: LayerParams::new(Tensor::from_vec(p.weight.dims(), dw)?, db),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Two-way softmax over consecutive score pairs along the channel axis
    /// (the last axis for rank 1 and 2 tensors).
    Softmax2,
}

/// `(outer, axis length, inner)` for the pair axis used by softmax2.
fn pair_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = x.dims();
    let ax = if dims.len() >= 3 { dims.len() - 3 } else { dims.len() - 1 };
    let len = dims[ax];
    if !len.is_multiple_of(2) {
        return Err(shape_err!("softmax2 needs an even score count, got {len}"));
    }
    Ok((dims[..ax].iter().product(), len, dims[ax + 1..].iter().product()))
}

pub fn activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    match kind {
        Activation::Relu => Ok(x.map(|v| v.max(0.0))),
        Activation::Softmax2 => {
            let (outer, len, inner) = pair_layout(x)?;
            let mut y = Tensor::zeros_like(x);
            let (src, dst) = (x.data(), y.data_mut());
            for o in 0..outer {
                for a in 0..len / 2 {
                    for i in 0..inner {
                        let i0 = (o * len + 2 * a) * inner + i;
                        let i1 = i0 + inner;
                        let p1 = 1.0 / (1.0 + (src[i0] - src[i1]).exp());
                        let p0 = 1.0 / (1.0 + (src[i1] - src[i0]).exp());
                        dst[i0] = p0;
                        dst[i1] = p1;
                    }
                }
            }
            Ok(y)
        }
    }
}

/// Backward of [`activation`]. `y` is the forward output (used by softmax2).
pub fn activation_backward(x: &Tensor, y: &Tensor, kind: Activation, out_grad: &Tensor) -> Result<Tensor> {
    if x.dims() != out_grad.dims() {
        return Err(shape_err!("activation backward: {:?} vs {:?}", x.dims(), out_grad.dims()));
    }
    match kind {
        Activation::Relu => Ok(Tensor::from_vec(
            x.dims(),
            x.data()
                .iter()
                .zip(out_grad.data())
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect(),
        )?),
        Activation::Softmax2 => {
            let (outer, len, inner) = pair_layout(x)?;
            let mut dx = Tensor::zeros_like(x);
            let (p, g, d) = (y.data(), out_grad.data(), dx.data_mut());
            for o in 0..outer {
                for a in 0..len / 2 {
                    for i in 0..inner {
                        let i0 = (o * len + 2 * a) * inner + i;
                        let i1 = i0 + inner;
                        let dot = p[i0] * g[i0] + p[i1] * g[i1];
                        d[i0] = p[i0] * (g[i0] - dot);
                        d[i1] = p[i1] * (g[i1] - dot);
                    }
                }
            }
            Ok(dx)
        }
    }
}

/// `y = x / ||x||_2` over every entry of `x`.
pub fn l2_normalize_global(x: &Tensor) -> Result<Tensor> {
    let n = x.norm();
    if n <= NORM_EPS {
        return Err(Error::Degenerate(format!("l2 norm {n:e} is below {NORM_EPS:e}")));
    }
    Ok(x.scale(1.0 / n))
}

/// Applies `dY/dX = I/||X|| - X X^T / ||X||^3` to `out_grad` without forming the matrix.
pub fn l2_normalize_global_backward(x: &Tensor, out_grad: &Tensor) -> Result<Tensor> {
    let n = x.norm();
    if n <= NORM_EPS {
        return Err(Error::Degenerate(format!("l2 norm {n:e} is below {NORM_EPS:e}")));
    }
    let xg = x.dot(out_grad)?;
    let n3 = n * n * n;
    Tensor::from_vec(
        x.dims(),
        x.data()
            .iter()
            .zip(out_grad.data())
            .map(|(&xi, &gi)| gi / n - xi * xg / n3)
            .collect(),
    )
}

/// Explicit Jacobian of the global L2 normalization as a row-major `len x len` matrix.
pub fn l2_normalize_jacobian(x: &Tensor) -> Result<Vec<f64>> {
    let n = x.norm();
    if n <= NORM_EPS {
        return Err(Error::Degenerate("zero-norm jacobian".into()));
    }
    let len = x.numel();
    let n3 = n * n * n;
    let d = x.data();
    let mut j = vec![0.0; len * len];
    for r in 0..len {
        for c in 0..len {
            j[r * len + c] = if r == c { 1.0 / n } else { 0.0 } - d[r] * d[c] / n3;
        }
    }
    Ok(j)
}

/// An operation whose analytic gradient can be compared to finite differences.
///
/// `inputs` holds the data input first, followed by any parameters.
pub trait Differentiable {
    fn name(&self) -> String;
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[Tensor], out_grad: &Tensor) -> Result<Vec<Tensor>>;
}

pub const GRADCHECK_STEP: f64 = 1e-5;
const GRADCHECK_SAMPLES: usize = 24;

/// Max relative error between analytic and central-difference gradients of
/// `<op(inputs), r>` for a seeded random projection `r`, over sampled coordinates
/// of every input.
pub fn gradient_check(op: &dyn Differentiable, inputs: &[Tensor], seed: u64) -> Result<f64> {
    let out = op.forward(inputs)?;
    let proj = Tensor::create(out.dims(), Init::Gaussian { mean: 0.0, std: 1.0, seed: seed ^ 0x9e37_79b9 })?;
    let analytic = op.backward(inputs, &proj)?;
    if analytic.len() != inputs.len() {
        return Err(shape_err!("{} returned {} gradients for {} inputs", op.name(), analytic.len(), inputs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (slot, grad) in analytic.iter().enumerate() {
        if grad.dims() != inputs[slot].dims() {
            return Err(shape_err!("{}: gradient {slot} has shape {:?}", op.name(), grad.dims()));
        }
        let len = inputs[slot].numel();
        let coords: Vec<usize> = if len <= GRADCHECK_SAMPLES {
            (0..len).collect()
        } else {
            (0..GRADCHECK_SAMPLES).map(|_| rng.random_range(0..len)).collect()
        };
        for i in coords {
            let orig = inputs[slot].data()[i];
            probe[slot].data_mut()[i] = orig + GRADCHECK_STEP;
            let plus = op.forward(&probe)?.dot(&proj)?;
            probe[slot].data_mut()[i] = orig - GRADCHECK_STEP;
            let minus = op.forward(&probe)?.dot(&proj)?;
            probe[slot].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * GRADCHECK_STEP);
            let a = grad.data()[i];
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rand_t(dims: &[usize], seed: u64) -> Tensor {
        Tensor::create(dims, Init::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
    }

    /// Direct nested-loop convolution used as an oracle.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, wd) = x.nchw().unwrap();
        let (cout, _, k, _) = (w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]).unwrap();
        for i in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.at4(i, ci, iy as usize, ix as usize) * w.at4(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        let off = out.shape().offset4(i, co, oy, ox);
                        out.data_mut()[off] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let x = rand_t(&[1, 3, 5, 5], 1);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]).unwrap();
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d(&x, &LayerParams::new(w, None), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_shapes_and_sums() {
        let x = rand_t(&[1, 1, 4, 4], 2);
        let p = he_init(&[1, 1, 3, 3], 9, 1, 3).unwrap();
        assert_eq!(conv2d(&x, &p, 1, 1).unwrap().dims(), &[1, 1, 4, 4]);

        let ones = Tensor::create(&[1, 1, 5, 5], Init::Constant(1.0)).unwrap();
        let k = LayerParams::new(Tensor::create(&[1, 1, 3, 3], Init::Constant(1.0)).unwrap(), None);
        let y = conv2d(&ones, &k, 1, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (seed, stride, pad, k) in [(1, 1, 1, 3), (2, 2, 0, 3), (3, 2, 1, 4), (4, 1, 0, 1)] {
            let x = rand_t(&[2, 3, 7, 6], seed);
            let w = rand_t(&[4, 3, k, k], seed + 10);
            let b = rand_t(&[4], seed + 20);
            let got = conv2d(&x, &LayerParams::new(w.clone(), Some(b.clone())), stride, pad).unwrap();
            let want = conv_naive(&x, &w, b.data(), stride, pad);
            assert_eq!(got.dims(), want.dims());
            for (a, e) in got.data().iter().zip(want.data()) {
                assert_abs_diff_eq!(a, e, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = rand_t(&[1, 2, 4, 4], 1);
        let p = he_init(&[1, 3, 3, 3], 27, 1, 1).unwrap();
        assert!(matches!(conv2d(&x, &p, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn magnifier_shape() {
        let x = rand_t(&[1, 4, 13, 13], 5);
        let p = bilinear_transpose_init(4, 2, 8).unwrap();
        let y = convtranspose2d(&x, &p, 4, 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 52, 52]);
    }

    #[test]
    fn convtranspose_identity_and_errors() {
        let x = rand_t(&[1, 2, 3, 3], 6);
        let mut w = Tensor::zeros(&[2, 2, 1, 1]).unwrap();
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let y = convtranspose2d(&x, &LayerParams::new(w, None), 1, 0).unwrap();
        assert_eq!(y, x);

        let p = bilinear_transpose_init(2, 2, 2).unwrap();
        assert!(convtranspose2d(&rand_t(&[1, 2, 1, 1], 1), &p, 1, 1).is_err());
    }

    #[test]
    fn convtranspose_is_conv_input_gradient() {
        let w = rand_t(&[3, 2, 8, 8], 7);
        let p = LayerParams::new(w, None);
        // conv maps 2 -> 3 channels on a 20x20 map giving 5x5; its transpose maps back.
        let x_shape = [1, 2, 20, 20];
        let y = rand_t(&[1, 3, 5, 5], 8);
        let via_conv = conv2d_backward(&Tensor::zeros(&x_shape).unwrap(), &p, 4, 2, &y).unwrap().input_grad;
        let via_t = convtranspose2d(&y, &p, 4, 2).unwrap();
        assert_eq!(via_t.dims(), &x_shape);
        for (a, b) in via_conv.data().iter().zip(via_t.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn bilinear_init_upsamples_constant_map() {
        // Interior of a magnified constant map stays constant.
        let x = Tensor::create(&[1, 2, 6, 6], Init::Constant(1.0)).unwrap();
        let y = convtranspose2d(&x, &bilinear_transpose_init(2, 2, 8).unwrap(), 4, 2).unwrap();
        for c in 0..2 {
            for yy in 6..18 {
                for xx in 6..18 {
                    assert_abs_diff_eq!(y.at4(0, c, yy, xx), 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxpool_cases() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2(&x).unwrap().data(), &[4.0]);
        let c = Tensor::create(&[1, 2, 4, 4], Init::Constant(3.0)).unwrap();
        assert!(maxpool2(&c).unwrap().data().iter().all(|&v| v == 3.0));
        assert!(maxpool2(&Tensor::zeros(&[1, 1, 3, 4]).unwrap()).is_err());
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = rand_t(&[1, 2, 6, 4], 9);
        let g = rand_t(&[1, 2, 3, 2], 10);
        let dx = maxpool2_backward(&x, &g).unwrap();
        assert_abs_diff_eq!(dx.sum(), g.sum(), epsilon = 1e-12);
        let y = maxpool2(&x).unwrap();
        for (i, &d) in dx.data().iter().enumerate() {
            if d != 0.0 {
                let (n, c, h, w) = x.shape().coords4(i);
                assert_eq!(x.data()[i], y.at4(n, c, h / 2, w / 2));
            }
        }
    }

    #[test]
    fn upsample_cases() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(upsample_nearest(&x, 1).unwrap(), x);
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let g = Tensor::create(&[1, 1, 4, 4], Init::Constant(1.0)).unwrap();
        assert_eq!(upsample_nearest_backward(&g, 2).unwrap().data(), &[4.0; 4]);
        assert!(upsample_nearest(&x, 0).is_err());
    }

    #[test]
    fn fully_connected_cases() {
        let mut eye = Tensor::zeros(&[3, 3]).unwrap();
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let x = rand_t(&[2, 3], 11);
        let p = LayerParams::new(eye, Some(Tensor::zeros(&[3]).unwrap()));
        assert_eq!(fully_connected(&x, &p).unwrap(), x);

        let p = LayerParams::new(
            Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap(),
            Some(Tensor::from_vec(&[1], vec![0.5]).unwrap()),
        );
        let y = fully_connected(&Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap(), &p).unwrap();
        assert_eq!(y.data(), &[5.5]);
        assert!(fully_connected(&rand_t(&[1, 3], 1), &p).is_err());
    }

    #[test]
    fn fc_weight_grad_is_outer_product() {
        let x = rand_t(&[1, 4], 12);
        let p = he_init(&[3, 4], 4, 3, 13).unwrap();
        let g = rand_t(&[1, 3], 14);
        let gp = fully_connected_backward(&x, &p, &g).unwrap();
        for o in 0..3 {
            for i in 0..4 {
                assert_abs_diff_eq!(gp.param_grads.weight.data()[o * 4 + i], g.data()[o] * x.data()[i], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn activations() {
        let x = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).unwrap().data(), &[0.0, 2.0]);
        let s = activation(&Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap(), Activation::Softmax2).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = activation(&Tensor::from_vec(&[2], vec![3f64.ln(), 0.0]).unwrap(), Activation::Softmax2).unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[1], 0.25, epsilon = 1e-15);
        assert!(activation(&Tensor::zeros(&[3]).unwrap(), Activation::Softmax2).is_err());
        assert!(activation(&Tensor::zeros(&[1, 3, 2, 2]).unwrap(), Activation::Softmax2).is_err());
    }

    #[test]
    fn softmax2_pairs_along_channels() {
        let x = rand_t(&[1, 6, 3, 2], 15);
        let y = activation(&x, Activation::Softmax2).unwrap();
        for a in 0..3 {
            for h in 0..3 {
                for w in 0..2 {
                    assert_abs_diff_eq!(y.at4(0, 2 * a, h, w) + y.at4(0, 2 * a + 1, h, w), 1.0, epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let x = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let y = l2_normalize_global(&x).unwrap();
        assert_abs_diff_eq!(y.data()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(y.data()[1], 0.8, epsilon = 1e-15);
        let j = l2_normalize_jacobian(&x).unwrap();
        for (a, e) in j.iter().zip([0.128, -0.096, -0.096, 0.072]) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-15);
        }
        let r = rand_t(&[1, 3, 4, 4], 16);
        assert_abs_diff_eq!(l2_normalize_global(&r).unwrap().norm(), 1.0, epsilon = 1e-12);
        assert!(matches!(l2_normalize_global(&Tensor::zeros(&[4]).unwrap()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn l2_backward_matches_explicit_jacobian() {
        for seed in 0..5 {
            let x = rand_t(&[1, 4, 4, 4], 100 + seed);
            let g = rand_t(&[1, 4, 4, 4], 200 + seed);
            let fast = l2_normalize_global_backward(&x, &g).unwrap();
            let j = l2_normalize_jacobian(&x).unwrap();
            let len = x.numel();
            for r in 0..len {
                // The Jacobian is symmetric, so J^T g = J g.
                let e: f64 = (0..len).map(|c| j[r * len + c] * g.data()[c]).sum();
                assert_abs_diff_eq!(fast.data()[r], e, epsilon = 1e-10);
            }
        }
    }
}
