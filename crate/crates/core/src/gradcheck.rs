//! Finite-difference verification of every differentiable op and loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{generate_anchor_grid, match_anchors, BBox, MatchResult, RegressionTarget};
use crate::error::{Error, Result};
use crate::layers::{self, gradient_check, Activation, Differentiable, LayerParams};
use crate::losses::{self, LossWeights};
use crate::roi::{self, RoiSpec};
use crate::tensor::{Init, Tensor};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const INSTANCES_PER_OP: u64 = 10;

/// One op applied to concrete inputs.
pub struct GradCase {
    pub op: Box<dyn Differentiable>,
    pub inputs: Vec<Tensor>,
}

/// A named family of seeded instances.
#[derive(Clone, Copy)]
pub struct OpSuite {
    pub name: &'static str,
    pub make: fn(u64) -> Result<GradCase>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub op: String,
    pub instances: usize,
    pub max_error: f64,
    pub passed: bool,
}

fn uniform(dims: &[usize], lo: f64, hi: f64, seed: u64) -> Result<Tensor> {
    Tensor::create(dims, Init::Uniform { lo, hi, seed })
}

/// Values in `[-1, 1]` pairwise at least `1 / len` apart, so a max never
/// switches under a finite-difference probe.
fn distinct(dims: &[usize], seed: u64) -> Result<Tensor> {
    let len: usize = dims.iter().product();
    let mut v: Vec<f64> = (0..len).map(|i| -1.0 + 2.0 * i as f64 / len as f64).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Tensor::from_vec(dims, v)
}

/// Uniform values with magnitude at least `gap`.
fn away_from_zero(dims: &[usize], gap: f64, seed: u64) -> Result<Tensor> {
    Ok(uniform(dims, -1.0, 1.0, seed)?.map(|v| if v.abs() < gap { v.signum() * gap + v } else { v }))
}

fn split_params(inputs: &[Tensor]) -> LayerParams {
    LayerParams::new(inputs[1].clone(), inputs.get(2).cloned())
}

fn param_grads(g: layers::GradPair) -> Vec<Tensor> {
    let mut out = vec![g.input_grad, g.param_grads.weight];
    out.extend(g.param_grads.bias);
    out
}

struct Conv {
    stride: usize,
    pad: usize,
}

impl Differentiable for Conv {
    fn name(&self) -> String {
        "conv2d".into()
    }
    fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
        layers::conv2d(&x[0], &split_params(x), self.stride, self.pad)
    }
    fn backward(&self, x: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(param_grads(layers::conv2d_backward(&x[0], &split_params(x), self.stride, self.pad, g)?))
    }
}

struct ConvT {
    stride: usize,
    pad: usize,
}

impl Differentiable for ConvT {
    fn name(&self) -> String {
        "convtranspose2d".into()
    }
    fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
        layers::convtranspose2d(&x[0], &split_params(x), self.stride, self.pad)
    }
    fn backward(&self, x: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(param_grads(layers::convtranspose2d_backward(&x[0], &split_params(x), self.stride, self.pad, g)?))
    }
}

struct MaxPool;

impl Differentiable for MaxPool {
    fn name(&self) -> String {
        "maxpool2".into()
    }
    fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
        layers::maxpool2(&x[0])
    }
    fn backward(&self, x: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![layers::maxpool2_backward(&x[0], g)?])
    }
}

struct Upsample(usize);

impl Differentiable for Upsample {
    fn name(&self) -> String {
        "upsample".into()
    }
    fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
        layers::upsample_nearest(&x[0], self.0)
    }
    fn backward(&self, _: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![layers::upsample_nearest_backward(g, self.0)?])
    }
}

struct Fc;

impl Differentiable for Fc {
    fn name(&self) -> String {
        "fully_connected".into()
    }
    fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
        layers::fully_connected(&x[0], &split_params(x))
    }
    fn backward(&self, x: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(param_grads(layers::fully_connected_backward(&x[0], &split_params(x), g)?))
    }
}

struct Act(Activation);

impl Differentiable for Act {
    fn name(&self) -> String {
        format!("{:?}", self.0).to_lowercase()
    }
    fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
        layers::activation(&x[0], self.0)
    }
    fn backward(&self, x: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let y = layers::activation(&x[0], self.0)?;
        Ok(vec![layers::activation_backward(&x[0], &y, self.0, g)?])
    }
}

struct L2Norm;

impl Differentiable for L2Norm {
    fn name(&self) -> String {
        "l2_normalize_global".into()
    }
    fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
        layers::l2_normalize_global(&x[0])
    }
    fn backward(&self, x: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![layers::l2_normalize_global_backward(&x[0], g)?])
    }
}

struct RoiPool {
    roi: BBox,
    spec: RoiSpec,
}

impl Differentiable for RoiPool {
    fn name(&self) -> String {
        "roi_max_pool".into()
    }
    fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
        Ok(roi::roi_max_pool(&x[0], &self.roi, &self.spec)?.output)
    }
    fn backward(&self, x: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let p = roi::roi_max_pool(&x[0], &self.roi, &self.spec)?;
        let mut fg = Tensor::zeros_like(&x[0]);
        roi::roi_max_pool_backward(&mut fg, &p, g)?;
        Ok(vec![fg])
    }
}

/// Elementwise binary logistic loss on probabilities with fixed labels.
struct BinaryLoss {
    labels: Vec<bool>,
}

impl Differentiable for BinaryLoss {
    fn name(&self) -> String {
        "binary_class_loss".into()
    }
    fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
        Tensor::from_vec(
            x[0].dims(),
            x[0].data().iter().zip(&self.labels).map(|(&p, &l)| losses::binary_class_loss(p, l)).collect(),
        )
    }
    fn backward(&self, x: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let d = x[0]
            .data()
            .iter()
            .zip(&self.labels)
            .zip(g.data())
            .map(|((&p, &l), &gv)| gv * losses::binary_class_loss_grad(p, l))
            .collect();
        Ok(vec![Tensor::from_vec(x[0].dims(), d)?])
    }
}

struct SmoothL1;

impl Differentiable for SmoothL1 {
    fn name(&self) -> String {
        "smooth_l1".into()
    }
    fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
        Ok(x[0].map(losses::smooth_l1_loss))
    }
    fn backward(&self, x: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let d = x[0].data().iter().zip(g.data()).map(|(&v, &gv)| gv * losses::smooth_l1_grad(v)).collect();
        Ok(vec![Tensor::from_vec(x[0].dims(), d)?])
    }
}

fn scalar(v: f64) -> Result<Tensor> {
    Tensor::from_vec(&[1], vec![v])
}

struct RpnLoss {
    m: MatchResult,
    sampled: Vec<usize>,
}

impl Differentiable for RpnLoss {
    fn name(&self) -> String {
        "rpn_loss".into()
    }
    fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
        scalar(losses::rpn_loss(&x[0], &x[1], &self.m, &self.sampled)?.total())
    }
    fn backward(&self, x: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let t = losses::rpn_loss(&x[0], &x[1], &self.m, &self.sampled)?;
        let s = g.data()[0];
        Ok(vec![t.grad_probs.scale(s), t.grad_reg.scale(s)])
    }
}

struct HeadLoss {
    labels: Vec<bool>,
    targets: Vec<Option<RegressionTarget>>,
}

impl Differentiable for HeadLoss {
    fn name(&self) -> String {
        "head_loss".into()
    }
    fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
        scalar(losses::head_loss(&x[0], &x[1], &self.labels, &self.targets, self.labels.len())?.total())
    }
    fn backward(&self, x: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let t = losses::head_loss(&x[0], &x[1], &self.labels, &self.targets, self.labels.len())?;
        let s = g.data()[0];
        Ok(vec![t.grad_probs.scale(s), t.grad_reg.scale(s)])
    }
}

struct ContextLoss(LossWeights);

impl Differentiable for ContextLoss {
    fn name(&self) -> String {
        "composite_context_loss".into()
    }
    fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
        scalar(losses::composite_context_loss(x[0].data()[0], x[1].data()[0], x[2].data()[0], &self.0))
    }
    fn backward(&self, _: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let s = g.data()[0];
        Ok(vec![scalar(s * self.0.alpha)?, scalar(s * self.0.beta)?, scalar(s * self.0.gamma)?])
    }
}

fn case(op: impl Differentiable + 'static, inputs: Vec<Tensor>) -> Result<GradCase> {
    Ok(GradCase { op: Box::new(op), inputs })
}

fn make_conv(seed: u64) -> Result<GradCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (cin, cout, k) = (r.random_range(1..4), r.random_range(1..4), [1, 3][r.random_range(0..2)]);
    let (stride, pad) = (r.random_range(1..3), r.random_range(0..2));
    let x = uniform(&[1, cin, 7, 6], -1.0, 1.0, seed)?;
    let w = uniform(&[cout, cin, k, k], -0.5, 0.5, seed + 1)?;
    let b = uniform(&[cout], -0.1, 0.1, seed + 2)?;
    case(Conv { stride, pad }, vec![x, w, b])
}

fn make_convt(seed: u64) -> Result<GradCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (k, stride, pad) = [(4, 2, 1), (8, 4, 2), (3, 1, 1)][r.random_range(0..3)];
    let (cin, cout) = (r.random_range(1..4), r.random_range(1..4));
    let x = uniform(&[1, cin, 3, 4], -1.0, 1.0, seed)?;
    let w = uniform(&[cin, cout, k, k], -0.5, 0.5, seed + 1)?;
    let b = uniform(&[cout], -0.1, 0.1, seed + 2)?;
    case(ConvT { stride, pad }, vec![x, w, b])
}

fn make_maxpool(seed: u64) -> Result<GradCase> {
    case(MaxPool, vec![distinct(&[1, 2, 6, 4], seed)?])
}

fn make_upsample(seed: u64) -> Result<GradCase> {
    let f = [2, 4][(seed % 2) as usize];
    case(Upsample(f), vec![uniform(&[1, 2, 3, 3], -1.0, 1.0, seed)?])
}

fn make_fc(seed: u64) -> Result<GradCase> {
    let x = uniform(&[3, 2, 2, 2], -1.0, 1.0, seed)?;
    let w = uniform(&[5, 8], -0.5, 0.5, seed + 1)?;
    let b = uniform(&[5], -0.1, 0.1, seed + 2)?;
    case(Fc, vec![x, w, b])
}

fn make_relu(seed: u64) -> Result<GradCase> {
    case(Act(Activation::Relu), vec![away_from_zero(&[1, 3, 4, 4], 0.01, seed)?])
}

fn make_softmax(seed: u64) -> Result<GradCase> {
    let dims: &[usize] = if seed.is_multiple_of(2) { &[1, 6, 3, 3] } else { &[5, 2] };
    case(Act(Activation::Softmax2), vec![uniform(dims, -3.0, 3.0, seed)?])
}

fn make_l2(seed: u64) -> Result<GradCase> {
    case(L2Norm, vec![uniform(&[1, 3, 4, 4], -1.0, 1.0, seed)?])
}

fn make_roi(seed: u64) -> Result<GradCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x1 = r.random_range(0.0..20.0);
    let y1 = r.random_range(0.0..20.0);
    let roi = BBox::new(x1, y1, x1 + r.random_range(4.0..30.0), y1 + r.random_range(4.0..30.0))?;
    let spec = RoiSpec::new(r.random_range(1..4), r.random_range(1..4), 0.25)?;
    case(RoiPool { roi, spec }, vec![distinct(&[1, 2, 10, 10], seed)?])
}

fn make_binary(seed: u64) -> Result<GradCase> {
    let p = uniform(&[12], 0.05, 0.95, seed)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..12).map(|_| r.random_bool(0.5)).collect();
    case(BinaryLoss { labels }, vec![p])
}

fn make_smooth_l1(seed: u64) -> Result<GradCase> {
    // Away from 0 and from the +-1 knots.
    let d = uniform(&[16], -3.0, 3.0, seed)?.map(|v| if (v.abs() - 1.0).abs() < 0.01 { v * 1.05 } else { v });
    case(SmoothL1, vec![d])
}

fn make_rpn(seed: u64) -> Result<GradCase> {
    let grid = generate_anchor_grid(3, 3, 8, &[8.0, 16.0])?;
    let gts = [BBox::new(2.0 + seed as f64, 3.0, 14.0 + seed as f64, 17.0)?];
    let m = match_anchors(&grid, &gts, 0.3, 0.7)?;
    let sampled: Vec<usize> = (0..grid.len()).filter(|&i| m.labels[i] != crate::anchors::AnchorLabel::Ignore).collect();
    let probs = uniform(&[1, 4, 3, 3], 0.05, 0.95, seed)?;
    let reg = uniform(&[1, 8, 3, 3], -3.0, 3.0, seed + 1)?;
    case(RpnLoss { m, sampled }, vec![probs, reg])
}

fn make_head(seed: u64) -> Result<GradCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<bool> = (0..6).map(|i| i % 2 == 0 || r.random_bool(0.3)).collect();
    let targets = labels
        .iter()
        .map(|&l| l.then(|| RegressionTarget { tx: r.random_range(-0.5..0.5), ty: r.random_range(-0.5..0.5), tw: r.random_range(-0.5..0.5), th: r.random_range(-0.5..0.5) }))
        .collect();
    let probs = uniform(&[6, 2], 0.05, 0.95, seed)?;
    let reg = uniform(&[6, 4], -3.0, 3.0, seed + 1)?;
    case(HeadLoss { labels, targets }, vec![probs, reg])
}

fn make_context(seed: u64) -> Result<GradCase> {
    let w = LossWeights { alpha: 1.0 + seed as f64 * 0.1, beta: 0.5, gamma: 2.0 };
    case(ContextLoss(w), vec![scalar(0.3)?, scalar(1.2)?, scalar(0.7)?])
}

/// Every differentiable op, each listed once.
pub fn standard_suite() -> Vec<OpSuite> {
    vec![
        OpSuite { name: "conv2d", make: make_conv },
        OpSuite { name: "convtranspose2d", make: make_convt },
        OpSuite { name: "maxpool2", make: make_maxpool },
        OpSuite { name: "upsample", make: make_upsample },
        OpSuite { name: "fully_connected", make: make_fc },
        OpSuite { name: "relu", make: make_relu },
        OpSuite { name: "softmax2", make: make_softmax },
        OpSuite { name: "l2_normalize_global", make: make_l2 },
        OpSuite { name: "roi_max_pool", make: make_roi },
        OpSuite { name: "binary_class_loss", make: make_binary },
        OpSuite { name: "smooth_l1", make: make_smooth_l1 },
        OpSuite { name: "rpn_loss", make: make_rpn },
        OpSuite { name: "head_loss", make: make_head },
        OpSuite { name: "composite_context_loss", make: make_context },
    ]
}

pub fn run_suite(suite: &[OpSuite], tolerance: f64) -> Result<Vec<GradcheckRow>> {
    suite
        .iter()
        .map(|s| {
            let mut worst: f64 = 0.0;
            for seed in 0..INSTANCES_PER_OP {
                let c = (s.make)(seed)?;
                let e = gradient_check(c.op.as_ref(), &c.inputs, seed)?;
                worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
            }
            Ok(GradcheckRow {
                op: s.name.to_string(),
                instances: INSTANCES_PER_OP as usize,
                max_error: worst,
                passed: worst <= tolerance,
            })
        })
        .collect()
}

pub fn format_table(rows: &[GradcheckRow]) -> String {
    let mut s = format!("{:<24} {:>9} {:>12}  status\n", "op", "instances", "max_rel_err");
    for r in rows {
        s.push_str(&format!(
            "{:<24} {:>9} {:>12.3e}  {}\n",
            r.op,
            r.instances,
            r.max_error,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    s
}

/// Checks the closed-form normalization Jacobian against the explicit matrix
/// and against central differences. Returns `(matrix error, fd error)`.
pub fn l2_jacobian_check(len: usize, seed: u64) -> Result<(f64, f64)> {
    if len == 0 {
        return Err(Error::Param("empty vector".into()));
    }
    let x = uniform(&[len], -1.0, 1.0, seed)?;
    let j = layers::l2_normalize_jacobian(&x)?;
    let n = x.norm();
    let d = x.data();
    let mut matrix_err: f64 = 0.0;
    for r in 0..len {
        for c in 0..len {
            let explicit = if r == c { 1.0 / n } else { 0.0 } - d[r] * d[c] / (n * n * n);
            matrix_err = matrix_err.max((j[r * len + c] - explicit).abs());
        }
    }
    let mut fd_err: f64 = 0.0;
    let h = layers::GRADCHECK_STEP;
    for c in 0..len {
        let mut plus = x.clone();
        plus.data_mut()[c] += h;
        let mut minus = x.clone();
        minus.data_mut()[c] -= h;
        let (yp, ym) = (layers::l2_normalize_global(&plus)?, layers::l2_normalize_global(&minus)?);
        for r in 0..len {
            let fd = (yp.data()[r] - ym.data()[r]) / (2.0 * h);
            fd_err = fd_err.max((j[r * len + c] - fd).abs());
        }
    }
    Ok((matrix_err, fd_err))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Broken;

    impl Differentiable for Broken {
        fn name(&self) -> String {
            "broken".into()
        }
        fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
            Ok(x[0].map(|v| v * v))
        }
        fn backward(&self, x: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
            // Missing factor of two.
            Ok(vec![Tensor::from_vec(x[0].dims(), x[0].data().iter().zip(g.data()).map(|(a, b)| a * b).collect())?])
        }
    }

    fn make_broken(seed: u64) -> Result<GradCase> {
        case(Broken, vec![uniform(&[5], -1.0, 1.0, seed)?])
    }

    #[test]
    fn standard_suite_passes() {
        let rows = run_suite(&standard_suite(), GRADCHECK_TOLERANCE).unwrap();
        assert!(rows.iter().all(|r| r.passed), "{}", format_table(&rows));
        let mut names: Vec<_> = rows.iter().map(|r| r.op.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), rows.len());
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let rows = run_suite(&[OpSuite { name: "broken", make: make_broken }], GRADCHECK_TOLERANCE).unwrap();
        assert!(!rows[0].passed);
        assert!(format_table(&rows).contains("FAIL"));
    }

    #[test]
    fn jacobian_closed_form() {
        for (len, seed) in [(1, 0), (2, 1), (7, 2), (64, 3)] {
            let (m, fd) = l2_jacobian_check(len, seed).unwrap();
            assert!(m <= 1e-10 && fd <= 1e-6, "{len}: {m} {fd}");
        }
    }
}
