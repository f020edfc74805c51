//! Recorded forward pass over the fixed layer set, replayed in reverse for
//! gradients. Each model variant wires its graph explicitly in `models`.

use std::collections::BTreeMap;

use crate::anchors::BBox;
use crate::error::{shape_err, Error, Result};
use crate::layers::{self, Activation, LayerParams};
use crate::roi::{self, PooledRoi, RoiSpec};
use crate::tensor::{self, Tensor};

/// Named learned parameters.
pub type ParamStore = BTreeMap<String, LayerParams>;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input,
    Conv { param: String, stride: usize, pad: usize },
    ConvT { param: String, stride: usize, pad: usize },
    Relu,
    MaxPool2,
    Upsample(usize),
    /// One global L2 norm over the whole tensor.
    L2Norm,
    /// One L2 norm per leading-axis row (per pooled region).
    L2NormRows,
    Concat,
    /// Pools each box from a `[1, C, H, W]` map into `[R, C, h, w]`.
    RoiPool { boxes: Vec<BBox>, spec: RoiSpec },
    Fc { param: String },
    Softmax2,
    /// Concatenates `[R, a]` and `[R, b]` rows into `[R, a + b]`.
    ConcatRows,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    out: Tensor,
    pooled: Vec<PooledRoi>,
}

#[derive(Default)]
pub(crate) struct Graph {
    nodes: Vec<Node>,
}

fn row_dims(t: &Tensor) -> (usize, usize) {
    let d = t.dims();
    (d[0], d[1..].iter().product())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.nodes[id].out
    }

    pub fn input(&mut self, t: Tensor) -> usize {
        self.push(Op::Input, vec![], t, vec![])
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, out: Tensor, pooled: Vec<PooledRoi>) -> usize {
        self.nodes.push(Node { op, inputs, out, pooled });
        self.nodes.len() - 1
    }

    fn param<'a>(params: &'a ParamStore, name: &str) -> Result<&'a LayerParams> {
        params
            .get(name)
            .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
    }

    pub fn apply(&mut self, params: &ParamStore, op: Op, inputs: &[usize]) -> Result<usize> {
        let x = |i: usize| &self.nodes[inputs[i]].out;
        let mut pooled = Vec::new();
        let out = match &op {
            Op::Input => return Err(Error::Param("input nodes are created with Graph::input".into())),
            Op::Conv { param, stride, pad } => layers::conv2d(x(0), Self::param(params, param)?, *stride, *pad)?,
            Op::ConvT { param, stride, pad } => {
                layers::convtranspose2d(x(0), Self::param(params, param)?, *stride, *pad)?
            }
            Op::Relu => layers::activation(x(0), Activation::Relu)?,
            Op::MaxPool2 => layers::maxpool2(x(0))?,
            Op::Upsample(f) => layers::upsample_nearest(x(0), *f)?,
            Op::L2Norm => normalize_or_zero(x(0))?,
            Op::L2NormRows => {
                let t = x(0);
                let (rows, width) = row_dims(t);
                let mut data = Vec::with_capacity(t.numel());
                for r in 0..rows {
                    let row = Tensor::from_vec(&[width], t.data()[r * width..(r + 1) * width].to_vec())?;
                    data.extend(normalize_or_zero(&row)?.into_data());
                }
                Tensor::from_vec(t.dims(), data)?
            }
            Op::Concat => tensor::concat_channels(x(0), x(1))?,
            Op::RoiPool { boxes, spec } => {
                let f = x(0);
                let (_, c, _, _) = f.nchw()?;
                let mut data = Vec::with_capacity(boxes.len() * c * spec.out_h * spec.out_w);
                for b in boxes {
                    let p = roi::roi_max_pool(f, b, spec)?;
                    data.extend_from_slice(p.output.data());
                    pooled.push(p);
                }
                if boxes.is_empty() {
                    return Err(Error::Degenerate("roi pooling over zero boxes".into()));
                }
                Tensor::from_vec(&[boxes.len(), c, spec.out_h, spec.out_w], data)?
            }
            Op::Fc { param } => layers::fully_connected(x(0), Self::param(params, param)?)?,
            Op::Softmax2 => layers::activation(x(0), Activation::Softmax2)?,
            Op::ConcatRows => {
                let (a, b) = (x(0), x(1));
                let ((ra, wa), (rb, wb)) = (row_dims(a), row_dims(b));
                if ra != rb {
                    return Err(shape_err!("row concat {:?} with {:?}", a.dims(), b.dims()));
                }
                let mut data = Vec::with_capacity(a.numel() + b.numel());
                for r in 0..ra {
                    data.extend_from_slice(&a.data()[r * wa..(r + 1) * wa]);
                    data.extend_from_slice(&b.data()[r * wb..(r + 1) * wb]);
                }
                Tensor::from_vec(&[ra, wa + wb], data)?
            }
        };
        Ok(self.push(op, inputs.to_vec(), out, pooled))
    }

    /// Parameter names in use, with their use counts.
    pub fn param_uses(&self) -> BTreeMap<String, usize> {
        let mut uses = BTreeMap::new();
        for n in &self.nodes {
            if let Op::Conv { param, .. } | Op::ConvT { param, .. } | Op::Fc { param } = &n.op {
                *uses.entry(param.clone()).or_insert(0) += 1;
            }
        }
        uses
    }

    /// Back-propagates the seeded output gradients and returns parameter gradients.
    pub fn backward(&self, params: &ParamStore, seeds: Vec<(usize, Tensor)>) -> Result<ParamStore> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            accumulate(&mut grads[id], g)?;
        }
        let mut pgrads = ParamStore::new();
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let inp = |i: usize| &self.nodes[node.inputs[i]].out;
            let send = |grads: &mut Vec<Option<Tensor>>, i: usize, t: Tensor| accumulate(&mut grads[node.inputs[i]], t);
            match &node.op {
                Op::Input => {}
                Op::Conv { param, stride, pad } => {
                    let gp = layers::conv2d_backward(inp(0), Self::param(params, param)?, *stride, *pad, &g)?;
                    add_param_grad(&mut pgrads, param, gp.param_grads)?;
                    if !matches!(self.nodes[node.inputs[0]].op, Op::Input) {
                        send(&mut grads, 0, gp.input_grad)?;
                    }
                }
                Op::ConvT { param, stride, pad } => {
                    let gp = layers::convtranspose2d_backward(inp(0), Self::param(params, param)?, *stride, *pad, &g)?;
                    add_param_grad(&mut pgrads, param, gp.param_grads)?;
                    send(&mut grads, 0, gp.input_grad)?;
                }
                Op::Relu => send(&mut grads, 0, layers::activation_backward(inp(0), &node.out, Activation::Relu, &g)?)?,
                Op::MaxPool2 => send(&mut grads, 0, layers::maxpool2_backward(inp(0), &g)?)?,
                Op::Upsample(f) => send(&mut grads, 0, layers::upsample_nearest_backward(&g, *f)?)?,
                Op::L2Norm => send(&mut grads, 0, normalize_or_zero_backward(inp(0), &g)?)?,
                Op::L2NormRows => {
                    let t = inp(0);
                    let (rows, width) = row_dims(t);
                    let mut data = Vec::with_capacity(t.numel());
                    for r in 0..rows {
                        let span = r * width..(r + 1) * width;
                        let row = Tensor::from_vec(&[width], t.data()[span.clone()].to_vec())?;
                        let gr = Tensor::from_vec(&[width], g.data()[span].to_vec())?;
                        data.extend(normalize_or_zero_backward(&row, &gr)?.into_data());
                    }
                    send(&mut grads, 0, Tensor::from_vec(t.dims(), data)?)?;
                }
                Op::Concat => {
                    let ca = inp(0).nchw()?.1;
                    let (ga, gb) = tensor::split_channels(&g, ca)?;
                    send(&mut grads, 0, ga)?;
                    send(&mut grads, 1, gb)?;
                }
                Op::RoiPool { .. } => {
                    let mut fg = Tensor::zeros_like(inp(0));
                    let per = g.numel() / node.pooled.len();
                    for (r, p) in node.pooled.iter().enumerate() {
                        let gr = Tensor::from_vec(&[per], g.data()[r * per..(r + 1) * per].to_vec())?;
                        roi::roi_max_pool_backward(&mut fg, p, &gr)?;
                    }
                    send(&mut grads, 0, fg)?;
                }
                Op::Fc { param } => {
                    let gp = layers::fully_connected_backward(inp(0), Self::param(params, param)?, &g)?;
                    add_param_grad(&mut pgrads, param, gp.param_grads)?;
                    send(&mut grads, 0, gp.input_grad)?;
                }
                Op::Softmax2 => {
                    send(&mut grads, 0, layers::activation_backward(inp(0), &node.out, Activation::Softmax2, &g)?)?
                }
                Op::ConcatRows => {
                    let ((rows, wa), (_, wb)) = (row_dims(inp(0)), row_dims(inp(1)));
                    let mut ga = Vec::with_capacity(rows * wa);
                    let mut gb = Vec::with_capacity(rows * wb);
                    for r in 0..rows {
                        let row = &g.data()[r * (wa + wb)..(r + 1) * (wa + wb)];
                        ga.extend_from_slice(&row[..wa]);
                        gb.extend_from_slice(&row[wa..]);
                    }
                    send(&mut grads, 0, Tensor::from_vec(inp(0).dims(), ga)?)?;
                    send(&mut grads, 1, Tensor::from_vec(inp(1).dims(), gb)?)?;
                }
            }
        }
        Ok(pgrads)
    }
}

/// A block with no activation at all (every unit dead) normalizes to zeros
/// with a zero gradient instead of aborting the pass.
fn normalize_or_zero(x: &Tensor) -> Result<Tensor> {
    if x.norm() < layers::NORM_EPS {
        return Ok(Tensor::zeros_like(x));
    }
    roi::normalize_roi_block(x)
}

fn normalize_or_zero_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    if x.norm() < layers::NORM_EPS {
        return Ok(Tensor::zeros_like(x));
    }
    roi::normalize_roi_block_backward(x, g)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn add_param_grad(store: &mut ParamStore, name: &str, g: LayerParams) -> Result<()> {
    match store.get_mut(name) {
        Some(acc) => acc.add_assign(&g),
        None => {
            store.insert(name.to_string(), g);
            Ok(())
        }
    }
}
