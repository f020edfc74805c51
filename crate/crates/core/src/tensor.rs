//! Dense row-major f64 arrays of rank 1 to 4.
//!
//! Feature maps are stored NCHW. Rank-3 tensors are read as `[C, H, W]`
//! (a single image, or one pooled region).

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(shape_err!("rank must be 1..=4, got {}", dims.len()));
        }
        if let Some(d) = dims.iter().find(|&&d| d == 0) {
            return Err(shape_err!("extent {d} in {dims:?} is not positive"));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// `(n, c, h, w)` view of a rank-3 or rank-4 shape.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.0.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            [c, h, w] => Ok((1, c, h, w)),
            _ => Err(shape_err!("expected an image-like shape, got {:?}", self.0)),
        }
    }

    /// Flat offset of `(n, c, h, w)` in a rank-4 layout.
    pub fn offset4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let (_, cc, hh, ww) = self.nchw().expect("image-like shape");
        ((n * cc + c) * hh + h) * ww + w
    }

    /// Inverse of [`Shape::offset4`].
    pub fn coords4(&self, flat: usize) -> (usize, usize, usize, usize) {
        let (_, c, h, w) = self.nchw().expect("image-like shape");
        let x = flat % w;
        let rest = flat / w;
        let y = rest % h;
        let rest = rest / h;
        (rest / c, rest % c, y, x)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Initial contents for [`Tensor::create`].
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Gaussian { mean: f64, std: f64, seed: u64 },
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn create(dims: &[usize], init: Init) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Uniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(crate::Error::Param(format!("uniform range [{lo}, {hi})")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| rng.random_range(lo..hi)).collect()
            }
            Init::Gaussian { mean, std, seed } => {
                let normal = Normal::new(mean, std)
                    .map_err(|e| crate::Error::Param(format!("gaussian std {std}: {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::create(dims, Init::Zeros)
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(shape_err!(
                "{} elements do not fill shape {:?}",
                data.len(),
                shape
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// A `[n, 0, h, w]` tensor: the identity element of [`concat_channels`].
    pub fn no_channels(n: usize, h: usize, w: usize) -> Self {
        Tensor {
            shape: Shape(vec![n, 0, h, w]),
            data: Vec::new(),
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        self.shape.nchw()
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.offset4(n, c, h, w)]
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    fn check_same(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies channel `c` of image `n` as a `[H, W]` slice.
    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let (_, _, h, w) = self.nchw().expect("image-like tensor");
        let start = self.shape.offset4(n, c, 0, 0);
        &self.data[start..start + h * w]
    }
}

/// Splits an image-like shape into (leading batch count, channels, plane size).
fn channel_layout(t: &Tensor) -> Result<(usize, usize, usize, Vec<usize>)> {
    let dims = t.dims();
    if dims.len() < 3 {
        return Err(shape_err!("channel concat needs rank >= 3, got {:?}", dims));
    }
    let r = dims.len();
    let lead: usize = dims[..r - 3].iter().product();
    Ok((lead, dims[r - 3], dims[r - 2] * dims[r - 1], dims.to_vec()))
}

/// Concatenates along the channel axis; `a` occupies the leading channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (la, ca, pa, da) = channel_layout(a)?;
    let (lb, cb, pb, db) = channel_layout(b)?;
    let r = da.len();
    if da.len() != db.len() || la != lb || pa != pb || da[r - 2..] != db[r - 2..] || da[..r - 3] != db[..r - 3] {
        return Err(shape_err!("cannot concat {:?} with {:?}", da, db));
    }
    if cb == 0 {
        return Ok(a.clone());
    }
    if ca == 0 {
        return Ok(b.clone());
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for n in 0..la {
        data.extend_from_slice(&a.data[n * ca * pa..(n + 1) * ca * pa]);
        data.extend_from_slice(&b.data[n * cb * pb..(n + 1) * cb * pb]);
    }
    let mut dims = da.clone();
    dims[r - 3] = ca + cb;
    Tensor::from_vec(&dims, data)
}

/// Backward of [`concat_channels`]: splits a gradient into the two channel blocks.
pub fn split_channels(g: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (lead, c, plane, dims) = channel_layout(g)?;
    if ca == 0 || ca >= c {
        return Err(shape_err!("split at {ca} of {c} channels"));
    }
    let cb = c - ca;
    let mut a = Vec::with_capacity(lead * ca * plane);
    let mut b = Vec::with_capacity(lead * cb * plane);
    for n in 0..lead {
        let base = n * c * plane;
        a.extend_from_slice(&g.data[base..base + ca * plane]);
        b.extend_from_slice(&g.data[base + ca * plane..base + c * plane]);
    }
    let r = dims.len();
    let mut da = dims.clone();
    da[r - 3] = ca;
    let mut db = dims;
    db[r - 3] = cb;
    Ok((Tensor::from_vec(&da, a)?, Tensor::from_vec(&db, b)?))
}
