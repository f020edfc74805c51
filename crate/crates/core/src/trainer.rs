//! Balanced sampling, SGD with momentum, the step schedule, and end-to-end
//! joint training of proposal network and region head.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{box_iou, encode_box_targets, match_anchors, AnchorLabel, BBox, MatchResult, RegressionTarget};
use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::inference::{branch_proposals, DetectConfig};
use crate::losses::{head_loss, rpn_loss, ContextTerms, LossReport, TermsWithGrad};
use crate::models::{parse_value, Model, Pass, Variant};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub lr_initial: f64,
    pub lr_drop_iter: usize,
    pub lr_after: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub images_per_batch: usize,
    pub rpn_batch: usize,
    pub head_batch: usize,
    pub pos_neg_ratio: f64,
    pub seed: u64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    /// Proposals at or above this IoU are head positives.
    pub head_fg_iou: f64,
    /// Proposals below this IoU are head negatives.
    pub head_bg_iou: f64,
    pub rpn_nms_thresh: f64,
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 3800,
            lr_initial: 0.001,
            lr_drop_iter: 3000,
            lr_after: 0.0001,
            momentum: 0.9,
            weight_decay: 0.0,
            images_per_batch: 1,
            rpn_batch: 256,
            head_batch: 64,
            pos_neg_ratio: 1.0,
            seed: 0,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            head_fg_iou: 0.5,
            head_bg_iou: 0.3,
            rpn_nms_thresh: 0.7,
            pre_nms_top: 2000,
            post_nms_top: 300,
        }
    }
}

/// Drop point keeping the 30000 / 38000 proportion of the reference schedule.
pub fn proportional_drop(total_iters: usize) -> usize {
    (total_iters * 30).div_ceil(38)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.lr_after > 0.0 && self.lr_after <= self.lr_initial) {
            return bad(format!("need 0 < lr_after <= lr_initial, got {} and {}", self.lr_after, self.lr_initial));
        }
        if self.total_iters > 0 && self.lr_drop_iter > self.total_iters {
            return bad(format!("lr_drop_iter {} exceeds total_iters {}", self.lr_drop_iter, self.total_iters));
        }
        if !(self.pos_neg_ratio > 0.0) {
            return bad("pos_neg_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        if self.images_per_batch == 0 || self.rpn_batch < 2 || self.head_batch < 2 {
            return bad("images_per_batch >= 1 and batch sizes >= 2 required".into());
        }
        if !(self.rpn_neg_iou < self.rpn_pos_iou) || !(self.head_bg_iou <= self.head_fg_iou) {
            return bad("negative IoU thresholds must lie below positive ones".into());
        }
        if self.pre_nms_top == 0 || self.post_nms_top == 0 || !(self.rpn_nms_thresh > 0.0 && self.rpn_nms_thresh < 1.0) {
            return bad("proposal settings out of range".into());
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("total_iters", self.total_iters.to_string()),
            ("lr_initial", self.lr_initial.to_string()),
            ("lr_drop_iter", self.lr_drop_iter.to_string()),
            ("lr_after", self.lr_after.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("images_per_batch", self.images_per_batch.to_string()),
            ("rpn_batch", self.rpn_batch.to_string()),
            ("head_batch", self.head_batch.to_string()),
            ("pos_neg_ratio", self.pos_neg_ratio.to_string()),
            ("seed", self.seed.to_string()),
            ("rpn_pos_iou", self.rpn_pos_iou.to_string()),
            ("rpn_neg_iou", self.rpn_neg_iou.to_string()),
            ("head_fg_iou", self.head_fg_iou.to_string()),
            ("head_bg_iou", self.head_bg_iou.to_string()),
            ("rpn_nms_thresh", self.rpn_nms_thresh.to_string()),
            ("pre_nms_top", self.pre_nms_top.to_string()),
            ("post_nms_top", self.post_nms_top.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "total_iters" => self.total_iters = parse_value(key, v)?,
            "lr_initial" => self.lr_initial = parse_value(key, v)?,
            "lr_drop_iter" => self.lr_drop_iter = parse_value(key, v)?,
            "lr_after" => self.lr_after = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "images_per_batch" => self.images_per_batch = parse_value(key, v)?,
            "rpn_batch" => self.rpn_batch = parse_value(key, v)?,
            "head_batch" => self.head_batch = parse_value(key, v)?,
            "pos_neg_ratio" => self.pos_neg_ratio = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "rpn_pos_iou" => self.rpn_pos_iou = parse_value(key, v)?,
            "rpn_neg_iou" => self.rpn_neg_iou = parse_value(key, v)?,
            "head_fg_iou" => self.head_fg_iou = parse_value(key, v)?,
            "head_bg_iou" => self.head_bg_iou = parse_value(key, v)?,
            "rpn_nms_thresh" => self.rpn_nms_thresh = parse_value(key, v)?,
            "pre_nms_top" => self.pre_nms_top = parse_value(key, v)?,
            "post_nms_top" => self.post_nms_top = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Positives per full batch: `batch * ratio / (1 + ratio)`, rounded down.
    pub fn positive_quota(batch: usize, ratio: f64) -> usize {
        ((batch as f64 * ratio / (1.0 + ratio)).floor() as usize).min(batch)
    }
}

/// Draws up to `batch` indices: the positive quota when available, the rest
/// negatives. Positives come first, each group in ascending index order.
pub fn sample_balanced_batch(labels: &[AnchorLabel], batch: usize, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if batch < 2 || !(ratio > 0.0) {
        return Err(Error::Param(format!("batch {batch} ratio {ratio}")));
    }
    let of = |want: AnchorLabel| labels.iter().enumerate().filter(|(_, &l)| l == want).map(|(i, _)| i).collect::<Vec<_>>();
    let (pos, neg) = (of(AnchorLabel::Positive), of(AnchorLabel::Negative));
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::Degenerate("no positive or negative candidates to sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pos = pos.len().min(TrainConfig::positive_quota(batch, ratio));
    let n_neg = neg.len().min(batch - n_pos);
    let mut draw = |from: &[usize], n: usize| {
        let mut picked: Vec<usize> = sample(&mut rng, from.len(), n).into_iter().map(|i| from[i]).collect();
        picked.sort_unstable();
        picked
    };
    let mut out = draw(&pos, n_pos);
    out.extend(draw(&neg, n_neg));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: ParamStore,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        OptimizerState {
            velocity: params.iter().map(|(k, p)| (k.clone(), p.zeros_like())).collect(),
        }
    }

    /// Wraps loaded velocities after checking them against `params`.
    pub fn from_velocity(params: &ParamStore, velocity: ParamStore) -> Result<Self> {
        let same = params.len() == velocity.len()
            && params.iter().all(|(k, p)| {
                velocity.get(k).is_some_and(|v| {
                    v.weight.dims() == p.weight.dims() && v.bias.as_ref().map(Tensor::dims) == p.bias.as_ref().map(Tensor::dims)
                })
            });
        if !same {
            return Err(Error::Validation("optimizer state does not match model parameters".into()));
        }
        Ok(OptimizerState { velocity })
    }
}

/// Training progress: the next iteration to run and the optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub optimizer: OptimizerState,
}

impl TrainState {
    pub fn new(model: &Model) -> Self {
        TrainState { iteration: 0, optimizer: OptimizerState::new(&model.params) }
    }
}

fn momentum_update(w: &mut Tensor, v: &mut Tensor, g: Option<&Tensor>, lr: f64, mu: f64) -> Result<()> {
    if let Some(g) = g {
        if g.dims() != w.dims() {
            return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.dims(), w.dims())));
        }
    }
    if v.dims() != w.dims() {
        return Err(Error::Shape(format!("velocity {:?} for parameter {:?}", v.dims(), w.dims())));
    }
    let gd = g.map(Tensor::data);
    for (i, (wi, vi)) in w.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
        *vi = mu * *vi - lr * gd.map_or(0.0, |g| g[i]);
        *wi += *vi;
    }
    Ok(())
}

/// `v <- momentum * v - lr * g; w <- w + v`. Parameters without a gradient
/// are treated as having a zero gradient.
pub fn sgd_momentum_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if let Some(k) = grads.keys().find(|k| !params.contains_key(*k)) {
        return Err(Error::Shape(format!("gradient for unknown parameter {k}")));
    }
    for (name, p) in params.iter_mut() {
        let v = state
            .velocity
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("no velocity for {name}")))?;
        let g = grads.get(name);
        momentum_update(&mut p.weight, &mut v.weight, g.map(|g| &g.weight), lr, momentum)?;
        match (&mut p.bias, &mut v.bias) {
            (Some(b), Some(vb)) => momentum_update(b, vb, g.and_then(|g| g.bias.as_ref()), lr, momentum)?,
            (None, None) => {}
            _ => return Err(Error::Shape(format!("bias presence differs for {name}"))),
        }
    }
    Ok(())
}

pub fn learning_rate_at(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter >= cfg.total_iters {
        return Err(Error::Param(format!("iteration {iter} outside [0, {})", cfg.total_iters)));
    }
    Ok(if iter < cfg.lr_drop_iter { cfg.lr_initial } else { cfg.lr_after })
}

/// Composition of one region-head batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadBatchStat {
    pub iter: usize,
    pub branch: usize,
    pub available_pos: usize,
    pub sampled_pos: usize,
    pub sampled_neg: usize,
    pub quota: usize,
}

impl HeadBatchStat {
    /// The 1:1 rule: a full positive quota whenever enough positives exist.
    pub fn satisfies_ratio(&self) -> bool {
        self.available_pos < self.quota || self.sampled_pos == self.quota
    }
}

/// Sampling decisions for one branch, fixed before the loss is evaluated.
#[derive(Clone, Debug)]
pub(crate) struct BranchPlan {
    pub rpn_match: MatchResult,
    pub rpn_sampled: Vec<usize>,
    pub head_boxes: Vec<BBox>,
    pub head_labels: Vec<bool>,
    pub head_targets: Vec<Option<RegressionTarget>>,
    pub stat: HeadBatchStat,
}

fn route(model: &Model, branch: usize, gts: &[BBox]) -> Vec<BBox> {
    if model.config.variant != Variant::SizeSplit {
        return gts.to_vec();
    }
    let t = model.config.size_split_threshold;
    gts.iter().copied().filter(|g| (g.min_side() < t) == (branch == 0)).collect()
}

pub(crate) fn make_plan(model: &Model, pass: &Pass, gts: &[BBox], cfg: &TrainConfig, iter: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BranchPlan>> {
    let (w, h) = (pass.image_w as f64, pass.image_h as f64);
    let dcfg = DetectConfig {
        rpn_nms_thresh: cfg.rpn_nms_thresh,
        pre_nms_top: cfg.pre_nms_top,
        ..DetectConfig::default()
    };
    let mut plans = Vec::new();
    for b in 0..pass.branch_count() {
        let routed = route(model, b, gts);
        let rpn_match = match_anchors(pass.rpn(b).grid, &routed, cfg.rpn_neg_iou, cfg.rpn_pos_iou)?;
        let rpn_sampled = sample_balanced_batch(&rpn_match.labels, cfg.rpn_batch, cfg.pos_neg_ratio, rng.random())?;

        let mut cands: Vec<BBox> = branch_proposals(pass, b, &dcfg, cfg.post_nms_top).into_iter().map(|p| p.bbox).collect();
        cands.extend(routed.iter().map(|g| g.clip(w, h)).filter(BBox::is_valid));
        let mut labels = Vec::with_capacity(cands.len());
        let mut best = Vec::with_capacity(cands.len());
        for c in &cands {
            let (iou, g) = routed
                .iter()
                .enumerate()
                .map(|(i, g)| (box_iou(c, g), i))
                .fold((0.0, None), |acc, (iou, i)| if iou > acc.0 { (iou, Some(i)) } else { acc });
            labels.push(if iou >= cfg.head_fg_iou {
                AnchorLabel::Positive
            } else if iou < cfg.head_bg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            });
            best.push(g);
        }
        let available_pos = labels.iter().filter(|&&l| l == AnchorLabel::Positive).count();
        let quota = TrainConfig::positive_quota(cfg.head_batch, cfg.pos_neg_ratio);
        let picked = sample_balanced_batch(&labels, cfg.head_batch, cfg.pos_neg_ratio, rng.random())?;
        let head_boxes: Vec<BBox> = picked.iter().map(|&i| cands[i]).collect();
        let head_labels: Vec<bool> = picked.iter().map(|&i| labels[i] == AnchorLabel::Positive).collect();
        let head_targets = picked
            .iter()
            .map(|&i| match (labels[i], best[i]) {
                (AnchorLabel::Positive, Some(g)) => Some(encode_box_targets(&cands[i], &routed[g])),
                _ => None,
            })
            .collect();
        let sampled_pos = head_labels.iter().filter(|&&l| l).count();
        let stat = HeadBatchStat {
            iter,
            branch: b,
            available_pos,
            sampled_pos,
            sampled_neg: head_labels.len() - sampled_pos,
            quota,
        };
        if !stat.satisfies_ratio() {
            return Err(Error::Validation(format!("head batch violates the positive quota: {stat:?}")));
        }
        plans.push(BranchPlan { rpn_match, rpn_sampled, head_boxes, head_labels, head_targets, stat });
    }
    Ok(plans)
}

/// Evaluates the objective under a fixed plan and back-propagates it.
pub(crate) fn evaluate_plan(model: &Model, pass: &mut Pass, plans: &[BranchPlan]) -> Result<(LossReport, ParamStore)> {
    let w = model.config.loss_weights;
    let mut report = LossReport::default();
    let mut seeds = Vec::new();
    let mut context: Option<ContextTerms> = None;
    for (b, plan) in plans.iter().enumerate() {
        let st = &pass.branches[b];
        let (probs_id, reg_id) = (st.rpn_probs, st.rpn_reg);
        let rpn = rpn_loss(pass.graph.value(probs_id), pass.graph.value(reg_id), &plan.rpn_match, &plan.rpn_sampled)?;
        report.rpn_cls += rpn.cls;
        report.rpn_reg += rpn.reg;
        seeds.push((probs_id, rpn.grad_probs));
        seeds.push((reg_id, rpn.grad_reg));

        let n = plan.head_boxes.len();
        report.n += n;
        let nodes = model.head_nodes(pass, b, &plan.head_boxes)?;
        let term = |ids: (usize, usize), weight: f64, seeds: &mut Vec<(usize, Tensor)>| -> Result<TermsWithGrad> {
            let t = head_loss(pass.graph.value(ids.0), pass.graph.value(ids.1), &plan.head_labels, &plan.head_targets, n)?;
            seeds.push((ids.0, t.grad_probs.scale(weight)));
            seeds.push((ids.1, t.grad_reg.scale(weight)));
            Ok(t)
        };
        match (nodes.context, nodes.joint) {
            (Some(c), Some(j)) => {
                let f = term(nodes.primary, w.alpha, &mut seeds)?;
                let c = term(c, w.beta, &mut seeds)?;
                let j = term(j, w.gamma, &mut seeds)?;
                report.head_cls += w.alpha * f.cls + w.beta * c.cls + w.gamma * j.cls;
                report.head_reg += w.alpha * f.reg + w.beta * c.reg + w.gamma * j.reg;
                let acc = context.get_or_insert_with(ContextTerms::default);
                acc.face += f.total();
                acc.context += c.total();
                acc.joint += j.total();
            }
            _ => {
                let f = term(nodes.primary, 1.0, &mut seeds)?;
                report.head_cls += f.cls;
                report.head_reg += f.reg;
            }
        }
    }
    report.context = context;
    report.total = report.rpn_cls + report.rpn_reg + report.head_cls + report.head_reg;
    let grads = pass.graph.backward(&model.params, seeds)?;
    Ok((report, grads))
}

fn iteration_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64);
    rng
}

fn average_into(acc: &mut LossReport, r: &LossReport, k: f64) {
    acc.rpn_cls += r.rpn_cls / k;
    acc.rpn_reg += r.rpn_reg / k;
    acc.head_cls += r.head_cls / k;
    acc.head_reg += r.head_reg / k;
    acc.total += r.total / k;
    acc.n += r.n;
    if let Some(c) = r.context {
        let a = acc.context.get_or_insert_with(ContextTerms::default);
        a.face += c.face / k;
        a.context += c.context / k;
        a.joint += c.joint / k;
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// `(iteration, report)` per completed iteration.
    pub trace: Vec<(usize, LossReport)>,
    pub head_stats: Vec<HeadBatchStat>,
    pub state: TrainState,
}

impl TrainOutput {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iter,rpn_cls,rpn_reg,head_cls,head_reg,total\n");
        for (i, r) in &self.trace {
            s.push_str(&r.csv_line(*i));
            s.push('\n');
        }
        s
    }
}

/// One optimizer step at `state.iteration`.
pub fn train_step(model: &mut Model, data: &[Sample], cfg: &TrainConfig, state: &mut TrainState) -> Result<(LossReport, Vec<HeadBatchStat>)> {
    let iter = state.iteration;
    let lr = learning_rate_at(iter, cfg)?;
    let mut rng = iteration_rng(cfg.seed, iter);
    let k = cfg.images_per_batch as f64;
    let mut report = LossReport::default();
    let mut grads: Option<ParamStore> = None;
    let mut stats = Vec::new();
    for _ in 0..cfg.images_per_batch {
        let s = &data[rng.random_range(0..data.len())];
        let mut pass = model.begin(&s.image)?;
        let plans = make_plan(model, &pass, &s.boxes, cfg, iter, &mut rng)?;
        stats.extend(plans.iter().map(|p| p.stat));
        let (r, g) = evaluate_plan(model, &mut pass, &plans)?;
        average_into(&mut report, &r, k);
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (name, gp) in g {
                    match acc.get_mut(&name) {
                        Some(a) => a.add_assign(&gp)?,
                        None => {
                            acc.insert(name, gp);
                        }
                    }
                }
            }
        }
    }
    if !report.is_finite() {
        return Err(Error::NonFinite { iter, report: format!("{report:?}") });
    }
    let mut grads = grads.unwrap_or_default();
    for (name, g) in grads.iter_mut() {
        let p = &model.params[name];
        g.weight = g.weight.scale(1.0 / k);
        if cfg.weight_decay > 0.0 {
            g.weight.add_assign(&p.weight.scale(cfg.weight_decay))?;
        }
        if let Some(b) = &mut g.bias {
            *b = b.scale(1.0 / k);
        }
    }
    sgd_momentum_step(&mut model.params, &grads, &mut state.optimizer, lr, cfg.momentum)?;
    state.iteration += 1;
    Ok((report, stats))
}

/// Continues training from `state` until iteration `stop_at` (or the end of
/// the schedule, whichever is first).
pub fn train_from(model: &mut Model, data: &[Sample], cfg: &TrainConfig, mut state: TrainState, stop_at: usize) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Degenerate("training set is empty".into()));
    }
    let end = stop_at.min(cfg.total_iters);
    let mut trace = Vec::with_capacity(end.saturating_sub(state.iteration));
    let mut head_stats = Vec::new();
    while state.iteration < end {
        let iter = state.iteration;
        let (report, stats) = train_step(model, data, cfg, &mut state)?;
        if iter.is_multiple_of(100) {
            log::info!("{}", report.csv_line(iter));
        }
        trace.push((iter, report));
        head_stats.extend(stats);
    }
    Ok(TrainOutput { trace, head_stats, state })
}

pub fn train(model: &mut Model, data: &[Sample], cfg: &TrainConfig) -> Result<TrainOutput> {
    let state = TrainState::new(model);
    train_from(model, data, cfg, state, cfg.total_iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerParams;
    use crate::models::ModelConfig;
    use crate::tensor::Init;
    use approx::assert_abs_diff_eq;

    fn labels(pos: usize, neg: usize) -> Vec<AnchorLabel> {
        let mut v = vec![AnchorLabel::Positive; pos];
        v.extend(vec![AnchorLabel::Negative; neg]);
        v.extend(vec![AnchorLabel::Ignore; 7]);
        v
    }

    fn count(l: &[AnchorLabel], idx: &[usize]) -> (usize, usize) {
        let p = idx.iter().filter(|&&i| l[i] == AnchorLabel::Positive).count();
        (p, idx.len() - p)
    }

    #[test]
    fn balanced_sampling_examples() {
        let l = labels(200, 200);
        assert_eq!(count(&l, &sample_balanced_batch(&l, 128, 1.0, 1).unwrap()), (64, 64));
        let l = labels(10, 1000);
        assert_eq!(count(&l, &sample_balanced_batch(&l, 128, 1.0, 1).unwrap()), (10, 118));
        let l = labels(0, 1000);
        assert_eq!(count(&l, &sample_balanced_batch(&l, 128, 1.0, 1).unwrap()), (0, 128));
        let l = labels(300, 300);
        assert_eq!(count(&l, &sample_balanced_batch(&l, 128, 3.0, 1).unwrap()), (96, 32));
        assert_eq!(sample_balanced_batch(&l, 128, 1.0, 9).unwrap(), sample_balanced_batch(&l, 128, 1.0, 9).unwrap());
        assert_ne!(sample_balanced_batch(&l, 128, 1.0, 9).unwrap(), sample_balanced_batch(&l, 128, 1.0, 10).unwrap());
        let picks = sample_balanced_batch(&l, 128, 1.0, 9).unwrap();
        assert!(picks.iter().all(|&i| l[i] != AnchorLabel::Ignore));
        assert!(matches!(sample_balanced_batch(&[AnchorLabel::Ignore; 4], 8, 1.0, 0), Err(Error::Degenerate(_))));
        assert!(sample_balanced_batch(&l, 1, 1.0, 0).is_err());
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w".into(), LayerParams::new(Tensor::from_vec(&[1], vec![v]).unwrap(), None));
        s
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = scalar_store(0.0);
        let g = scalar_store(1.0);
        let mut st = OptimizerState::new(&p);
        sgd_momentum_step(&mut p, &g, &mut st, 0.1, 0.9).unwrap();
        assert_abs_diff_eq!(p["w"].weight.data()[0], -0.1, epsilon = 1e-15);
        sgd_momentum_step(&mut p, &g, &mut st, 0.1, 0.9).unwrap();
        assert_abs_diff_eq!(p["w"].weight.data()[0], -0.29, epsilon = 1e-15);

        let before = p.clone();
        let v0 = st.velocity["w"].weight.data()[0];
        sgd_momentum_step(&mut p, &g, &mut st, 0.0, 0.9).unwrap();
        assert_abs_diff_eq!(st.velocity["w"].weight.data()[0], 0.9 * v0, epsilon = 1e-15);
        assert_abs_diff_eq!(p["w"].weight.data()[0], before["w"].weight.data()[0] + 0.9 * v0, epsilon = 1e-15);

        let mut fresh = scalar_store(2.0);
        let mut st = OptimizerState::new(&fresh);
        sgd_momentum_step(&mut fresh, &scalar_store(3.0), &mut st, 0.5, 0.9).unwrap();
        assert_eq!(fresh["w"].weight.data()[0], 2.0 - 0.5 * 3.0);

        let mut bad = ParamStore::new();
        bad.insert("w".into(), LayerParams::new(Tensor::zeros(&[2]).unwrap(), None));
        assert!(sgd_momentum_step(&mut fresh, &bad, &mut st, 0.1, 0.9).is_err());
    }

    #[test]
    fn momentum_matches_scalar_recurrence() {
        let mut p = scalar_store(0.3);
        let mut st = OptimizerState::new(&p);
        let (mut w, mut v) = (0.3f64, 0.0f64);
        for i in 0..50 {
            let g = (i as f64 * 0.7).sin();
            sgd_momentum_step(&mut p, &scalar_store(g), &mut st, 0.01, 0.9).unwrap();
            v = 0.9 * v - 0.01 * g;
            w += v;
            assert_eq!(p["w"].weight.data()[0], w);
        }
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate_at(0, &cfg).unwrap(), 0.001);
        assert_eq!(learning_rate_at(2999, &cfg).unwrap(), 0.001);
        assert_eq!(learning_rate_at(3000, &cfg).unwrap(), 0.0001);
        assert!(learning_rate_at(3800, &cfg).is_err());
        assert_eq!(proportional_drop(3800), 3000);
        assert_eq!(proportional_drop(38000), 30000);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        assert!(TrainConfig { lr_after: 0.01, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lr_drop_iter: 3801, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { pos_neg_ratio: 0.0, ..ok.clone() }.validate().is_err());
        TrainConfig { total_iters: 0, ..ok }.validate().unwrap();
    }

    fn toy_data() -> Vec<Sample> {
        (0..3)
            .map(|i| {
                let mut img = Tensor::create(&[3, 64, 64], Init::Uniform { lo: 0.4, hi: 0.6, seed: i }).unwrap();
                let b = BBox::new(8.0 + 10.0 * i as f64, 12.0, 24.0 + 10.0 * i as f64, 30.0).unwrap();
                for c in 0..3 {
                    for y in 12..30 {
                        for x in b.x1 as usize..b.x2 as usize {
                            img.data_mut()[(c * 64 + y) * 64 + x] = 0.95;
                        }
                    }
                }
                Sample { id: format!("toy{i}"), image: img, boxes: vec![b] }
            })
            .collect()
    }

    fn toy_cfg(iters: usize) -> TrainConfig {
        TrainConfig {
            total_iters: iters,
            lr_drop_iter: proportional_drop(iters),
            rpn_batch: 32,
            head_batch: 16,
            post_nms_top: 50,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let init = Model::build(&ModelConfig::new(Variant::Base), 1).unwrap();
        let mut m = init.clone();
        let out = train(&mut m, &toy_data(), &toy_cfg(0)).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(m, init);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let data = toy_data();
        let cfg = toy_cfg(6);
        for v in [Variant::FaceMagNet, Variant::SizeSplit, Variant::SkipFace] {
            let mut a = Model::build(&ModelConfig::new(v), 2).unwrap();
            let mut b = a.clone();
            let ta = train(&mut a, &data, &cfg).unwrap();
            let tb = train(&mut b, &data, &cfg).unwrap();
            assert_eq!(ta.trace_csv(), tb.trace_csv());
            assert_eq!(a, b);
            assert!(ta.head_stats.iter().all(HeadBatchStat::satisfies_ratio));

            let mut c = Model::build(&ModelConfig::new(v), 2).unwrap();
            let fresh = TrainState::new(&c);
            let first = train_from(&mut c, &data, &cfg, fresh, 3).unwrap();
            let rest = train_from(&mut c, &data, &cfg, first.state, 6).unwrap();
            let joined: Vec<_> = first.trace.iter().chain(&rest.trace).cloned().collect();
            assert_eq!(joined, ta.trace);
            assert_eq!(c, a);
        }
    }

    #[test]
    fn frozen_plan_gradient_matches_finite_differences() {
        let cfg = toy_cfg(1);
        let img = Tensor::create(&[3, 32, 32], Init::Uniform { lo: 0.0, hi: 1.0, seed: 12 }).unwrap();
        for v in [Variant::FaceMagNet, Variant::SkipFace, Variant::Context] {
            let mut mc = ModelConfig::new(v);
            mc.backbone_channels = vec![2, 3, 4, 4, 4];
            mc.rpn_channels = 4;
            mc.magnifier_channels = 3;
            mc.skip_channels = 3;
            mc.fc_dim = 5;
            mc.roi_size = 2;
            let mut model = Model::build(&mc, 3).unwrap();
            // Live units and distinct activations keep the max and ReLU switches away from the probe.
            for (k, p) in model.params.values_mut().enumerate() {
                let jitter = Tensor::create(p.weight.dims(), Init::Uniform { lo: -0.05, hi: 0.05, seed: 40 + k as u64 }).unwrap();
                p.weight.add_assign(&jitter).unwrap();
                if let Some(b) = &mut p.bias {
                    *b = Tensor::create(b.dims(), Init::Uniform { lo: 0.02, hi: 0.1, seed: 80 + k as u64 }).unwrap();
                }
            }
            let gts = [BBox::new(4.0, 6.0, 14.0, 18.0).unwrap()];
            let pass = model.begin(&img).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let plans = make_plan(&model, &pass, &gts, &cfg, 0, &mut rng).unwrap();
            let loss = |m: &Model| {
                let mut p = m.begin(&img).unwrap();
                evaluate_plan(m, &mut p, &plans).unwrap()
            };
            let (_, grads) = loss(&model);
            let h = 1e-6;
            let mut worst: f64 = 0.0;
            let mut pick = ChaCha8Rng::seed_from_u64(5);
            for name in ["conv1_1", "conv5_1", "rpn_cls", "fc6", "cls", "joint_reg", "rpn_magnifier", "head_magnifier", "skip_head_reduce"] {
                let Some(g) = grads.get(name) else { continue };
                for _ in 0..4 {
                    let i = pick.random_range(0..g.weight.numel());
                    let mut plus = model.clone();
                    plus.params.get_mut(name).unwrap().weight.data_mut()[i] += h;
                    let mut minus = model.clone();
                    minus.params.get_mut(name).unwrap().weight.data_mut()[i] -= h;
                    let fd = (loss(&plus).0.total - loss(&minus).0.total) / (2.0 * h);
                    let a = g.weight.data()[i];
                    worst = worst.max((a - fd).abs() / (a.abs() + fd.abs()).max(1e-6));
                }
            }
            assert!(worst <= 1e-3, "{v}: relative error {worst}");
        }
    }
}
