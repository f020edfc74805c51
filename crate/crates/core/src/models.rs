//! The five detector variants, wired over a miniature VGG-style backbone.
//!
//! The backbone keeps VGG's stride structure: block outputs sit at strides
//! 1, 2, 4, 8 and 16, each later block preceded by a 2x2 max pool.
//!
//! | variant      | proposal map                         | region features            |
//! |--------------|--------------------------------------|----------------------------|
//! | `base`       | block 5, stride 16                   | block 5                    |
//! | `context`    | block 5, stride 16                   | block 5 + context box      |
//! | `skipface`   | normalized blocks 3-5 fused, stride 4| normalized blocks 3-5      |
//! | `sizesplit`  | stride 8 (small) and 16 (large)      | per branch                 |
//! | `facemagnet` | magnified block 5, stride 4          | separately magnified block 5 |

use std::fmt;
use std::str::FromStr;

use crate::anchors::{coverage_scales, generate_anchor_grid, AnchorGrid, BBox, RegressionTarget};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Op, ParamStore};
use crate::layers::{bilinear_transpose_init, he_init, LayerParams};
use crate::losses::LossWeights;
use crate::roi::{expand_context_box, RoiSpec};
use crate::tensor::{Init, Tensor};

pub const MAGNIFIER_KERNEL: usize = 8;
pub const MAGNIFIER_STRIDE: usize = 4;
pub const MAGNIFIER_PAD: usize = 2;

/// Input images must have extents divisible by this.
pub const INPUT_MULTIPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Base,
    Context,
    SkipFace,
    SizeSplit,
    FaceMagNet,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Base,
        Variant::Context,
        Variant::SkipFace,
        Variant::SizeSplit,
        Variant::FaceMagNet,
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Context => "context",
            Variant::SkipFace => "skipface",
            Variant::SizeSplit => "sizesplit",
            Variant::FaceMagNet => "facemagnet",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Validation(format!("unknown variant {s:?}")))
    }
}

/// How a context head fuses region and context features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMerge {
    /// Separate fc stacks; face, context and joint classifiers.
    Concat,
    /// Channel concat of the pooled blocks, 1x1 conv, one shared fc stack.
    Conv1x1,
}

impl FromStr for ContextMerge {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(ContextMerge::Concat),
            "conv1x1" => Ok(ContextMerge::Conv1x1),
            _ => Err(Error::Validation(format!("unknown context merge {s:?}"))),
        }
    }
}

impl fmt::Display for ContextMerge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextMerge::Concat => "concat",
            ContextMerge::Conv1x1 => "conv1x1",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub context_head: bool,
    pub context_merge: ContextMerge,
    pub context_factor: f64,
    pub backbone_channels: Vec<usize>,
    pub convs_per_block: usize,
    pub rpn_channels: usize,
    pub magnifier_channels: usize,
    pub skip_channels: usize,
    pub fc_dim: usize,
    /// Anchor sides of the main branch (the small branch for `sizesplit`).
    pub anchor_scales: Vec<f64>,
    /// Anchor sides of the `sizesplit` large branch.
    pub large_anchor_scales: Vec<f64>,
    pub roi_size: usize,
    /// `sizesplit` routes boxes with min side below this to the small branch.
    pub size_split_threshold: f64,
    pub loss_weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(Variant::Base)
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| Error::Validation(format!("{key}: bad list item {s:?}"))))
        .collect()
}

pub(crate) fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| Error::Validation(format!("{key}: cannot parse {v:?}")))
}

pub(crate) fn join_list<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            context_head: variant != Variant::Base,
            context_merge: ContextMerge::Concat,
            context_factor: 2.0,
            backbone_channels: vec![8, 16, 32, 64, 64],
            convs_per_block: 1,
            rpn_channels: 32,
            magnifier_channels: 32,
            skip_channels: 64,
            fc_dim: 64,
            anchor_scales: coverage_scales(6.0, 40.0, 5).expect("static range"),
            large_anchor_scales: vec![50.0, 80.0, 128.0],
            roi_size: 7,
            size_split_threshold: 50.0,
            loss_weights: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.backbone_channels.len() != 5 || self.backbone_channels.contains(&0) {
            return bad(format!("backbone_channels must be 5 positive widths, got {:?}", self.backbone_channels));
        }
        if self.convs_per_block == 0 || self.rpn_channels == 0 || self.fc_dim == 0 || self.roi_size == 0 {
            return bad("convs_per_block, rpn_channels, fc_dim and roi_size must be positive".into());
        }
        if self.magnifier_channels == 0 || self.skip_channels == 0 {
            return bad("magnifier_channels and skip_channels must be positive".into());
        }
        if self.anchor_scales.is_empty() || self.anchor_scales.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("anchor_scales must be nonempty and positive: {:?}", self.anchor_scales));
        }
        if self.variant == Variant::SizeSplit
            && (self.large_anchor_scales.is_empty() || self.large_anchor_scales.iter().any(|&s| !(s > 0.0)))
        {
            return bad("sizesplit needs positive large_anchor_scales for its second branch".into());
        }
        if !(self.context_factor >= 1.0) {
            return bad(format!("context_factor {} < 1", self.context_factor));
        }
        if !(self.size_split_threshold > 0.0) {
            return bad("size_split_threshold must be positive".into());
        }
        match (self.variant, self.context_head) {
            (Variant::Base, true) => return bad("base has no context head; use variant context".into()),
            (Variant::Context, false) => return bad("variant context requires context_head".into()),
            _ => {}
        }
        self.loss_weights.validate()
    }

    /// `(key, value)` pairs in a fixed order; the inverse of [`ModelConfig::set`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("context_head", self.context_head.to_string()),
            ("context_merge", self.context_merge.to_string()),
            ("context_factor", self.context_factor.to_string()),
            ("backbone_channels", join_list(&self.backbone_channels)),
            ("convs_per_block", self.convs_per_block.to_string()),
            ("rpn_channels", self.rpn_channels.to_string()),
            ("magnifier_channels", self.magnifier_channels.to_string()),
            ("skip_channels", self.skip_channels.to_string()),
            ("fc_dim", self.fc_dim.to_string()),
            ("anchor_scales", join_list(&self.anchor_scales)),
            ("large_anchor_scales", join_list(&self.large_anchor_scales)),
            ("roi_size", self.roi_size.to_string()),
            ("size_split_threshold", self.size_split_threshold.to_string()),
            ("loss_alpha", self.loss_weights.alpha.to_string()),
            ("loss_beta", self.loss_weights.beta.to_string()),
            ("loss_gamma", self.loss_weights.gamma.to_string()),
        ]
    }

    /// Sets one key; returns `Ok(false)` for keys this config does not own.
    /// Setting `variant` resets `context_head` to that variant's default.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "variant" => {
                self.variant = v.trim().parse()?;
                self.context_head = self.variant != Variant::Base;
            }
            "context_head" => self.context_head = parse_value(key, v)?,
            "context_merge" => self.context_merge = v.trim().parse()?,
            "context_factor" => self.context_factor = parse_value(key, v)?,
            "backbone_channels" => self.backbone_channels = parse_list(key, v)?,
            "convs_per_block" => self.convs_per_block = parse_value(key, v)?,
            "rpn_channels" => self.rpn_channels = parse_value(key, v)?,
            "magnifier_channels" => self.magnifier_channels = parse_value(key, v)?,
            "skip_channels" => self.skip_channels = parse_value(key, v)?,
            "fc_dim" => self.fc_dim = parse_value(key, v)?,
            "anchor_scales" => self.anchor_scales = parse_list(key, v)?,
            "large_anchor_scales" => self.large_anchor_scales = parse_list(key, v)?,
            "roi_size" => self.roi_size = parse_value(key, v)?,
            "size_split_threshold" => self.size_split_threshold = parse_value(key, v)?,
            "loss_alpha" => self.loss_weights.alpha = parse_value(key, v)?,
            "loss_beta" => self.loss_weights.beta = parse_value(key, v)?,
            "loss_gamma" => self.loss_weights.gamma = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen_context_head = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {line:?} lacks '='")))?;
            if k.trim() == "context_head" {
                seen_context_head = Some(v.to_string());
                continue;
            }
            if !cfg.set(k.trim(), v)? {
                return Err(Error::Format(format!("unknown model config key {k:?}")));
            }
        }
        if let Some(v) = seen_context_head {
            cfg.set("context_head", &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Detection branches: `(param prefix, feature stride, anchor scales, context head)`.
    pub fn branches(&self) -> Vec<BranchSpec> {
        let main = |prefix: &str, stride, scales: &[f64], context| BranchSpec {
            prefix: prefix.to_string(),
            stride,
            scales: scales.to_vec(),
            context,
        };
        match self.variant {
            Variant::Base | Variant::Context => vec![main("", 16, &self.anchor_scales, self.context_head)],
            Variant::SkipFace | Variant::FaceMagNet => vec![main("", 4, &self.anchor_scales, self.context_head)],
            Variant::SizeSplit => vec![
                main("small.", 8, &self.anchor_scales, self.context_head),
                main("large.", 16, &self.large_anchor_scales, false),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchSpec {
    pub prefix: String,
    pub stride: usize,
    pub scales: Vec<f64>,
    pub context: bool,
}

#[derive(Clone, Copy, Debug)]
enum InitKind {
    He { fan_in: usize },
    Bilinear,
    Gaussian(f64),
}

struct ParamSpec {
    name: String,
    dims: Vec<usize>,
    init: InitKind,
}

fn conv_spec(name: String, cin: usize, cout: usize, k: usize) -> ParamSpec {
    ParamSpec {
        name,
        dims: vec![cout, cin, k, k],
        init: InitKind::He { fan_in: cin * k * k },
    }
}

fn fc_spec(name: String, cin: usize, cout: usize) -> ParamSpec {
    ParamSpec {
        name,
        dims: vec![cout, cin],
        init: InitKind::He { fan_in: cin },
    }
}

fn out_spec(name: String, dims: Vec<usize>, std: f64) -> ParamSpec {
    ParamSpec {
        name,
        dims,
        init: InitKind::Gaussian(std),
    }
}

/// One trunk stage: an optional leading pool, then 3x3 convs.
struct Stage {
    names: Vec<String>,
    pool_first: bool,
}

fn stage(prefix: &str, block: usize, convs: usize, pool_first: bool) -> Stage {
    Stage {
        names: (1..=convs).map(|j| format!("{prefix}conv{block}_{j}")).collect(),
        pool_first,
    }
}

/// Feeds region heads of one branch.
#[derive(Clone, Debug)]
pub(crate) enum HeadSource {
    Single { node: usize, stride: usize },
    /// Blocks 3-5 at strides 4, 8 and 16.
    Skip { nodes: [usize; 3] },
}

#[derive(Clone, Debug)]
pub(crate) struct BranchState {
    pub spec: BranchSpec,
    pub rpn_probs: usize,
    pub rpn_reg: usize,
    pub head: HeadSource,
    pub grid: AnchorGrid,
}

/// A recorded forward pass over one image.
pub struct Pass {
    pub(crate) graph: Graph,
    pub(crate) branches: Vec<BranchState>,
    pub image_w: usize,
    pub image_h: usize,
}

/// Proposal-network outputs of one branch.
pub struct RpnView<'a> {
    pub probs: &'a Tensor,
    pub reg: &'a Tensor,
    pub grid: &'a AnchorGrid,
    pub stride: usize,
}

impl RpnView<'_> {
    fn plane(&self) -> usize {
        self.grid.grid_h * self.grid.grid_w
    }

    pub fn objectness(&self, anchor: usize) -> f64 {
        let a = self.grid.scales.len();
        self.probs.data()[(2 * (anchor % a) + 1) * self.plane() + anchor / a]
    }

    pub fn deltas(&self, anchor: usize) -> RegressionTarget {
        let a = self.grid.scales.len();
        let (s, cell, plane) = (anchor % a, anchor / a, self.plane());
        let d = self.reg.data();
        RegressionTarget {
            tx: d[(4 * s) * plane + cell],
            ty: d[(4 * s + 1) * plane + cell],
            tw: d[(4 * s + 2) * plane + cell],
            th: d[(4 * s + 3) * plane + cell],
        }
    }
}

impl Pass {
    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn rpn(&self, branch: usize) -> RpnView<'_> {
        let b = &self.branches[branch];
        RpnView {
            probs: self.graph.value(b.rpn_probs),
            reg: self.graph.value(b.rpn_reg),
            grid: &b.grid,
            stride: b.spec.stride,
        }
    }

    pub fn branch_spec(&self, branch: usize) -> &BranchSpec {
        &self.branches[branch].spec
    }

    /// Parameter use counts over everything recorded so far.
    pub fn param_uses(&self) -> std::collections::BTreeMap<String, usize> {
        self.graph.param_uses()
    }
}

/// Graph nodes of one region head application: `(probs [R, 2], deltas [R, 4])` pairs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct HeadNodes {
    pub primary: (usize, usize),
    pub context: Option<(usize, usize)>,
    pub joint: Option<(usize, usize)>,
}

impl HeadNodes {
    /// The scoring pair used at inference: joint when present.
    pub fn scoring(&self) -> (usize, usize) {
        self.joint.unwrap_or(self.primary)
    }
}

/// Region-head outputs for a list of proposals.
#[derive(Clone, Debug)]
pub struct HeadScores {
    /// Proposals actually scored (clipped to the image).
    pub boxes: Vec<BBox>,
    /// Detection score per box (joint classifier when present).
    pub scores: Vec<f64>,
    pub deltas: Vec<RegressionTarget>,
    pub face_scores: Option<Vec<f64>>,
    pub context_scores: Option<Vec<f64>>,
    /// Proposals dropped because nothing was left after clipping.
    pub dropped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the parameter name, mixed with the model seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl Model {
    fn trunk_stages(cfg: &ModelConfig) -> Vec<(Vec<Stage>, &'static str)> {
        let cpb = cfg.convs_per_block;
        match cfg.variant {
            Variant::SizeSplit => vec![
                (vec![stage("", 1, cpb, false), stage("", 2, cpb, true)], "shared"),
                (vec![stage("small.", 3, cpb, true), stage("small.", 4, 1, true)], "small"),
                (
                    vec![stage("large.", 3, cpb, true), stage("large.", 4, cpb, true), stage("large.", 5, cpb, true)],
                    "large",
                ),
            ],
            _ => vec![(
                (1..=5).map(|b| stage("", b, cpb, b > 1)).collect(),
                "trunk",
            )],
        }
    }

    fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let ch = &cfg.backbone_channels;
        let mut specs = Vec::new();
        let push_stages = |stages: &[Stage], mut cin: usize, first_block: usize, specs: &mut Vec<ParamSpec>| {
            for (s, st) in stages.iter().enumerate() {
                let cout = ch[first_block + s - 1];
                for name in &st.names {
                    specs.push(conv_spec(name.clone(), cin, cout, 3));
                    cin = cout;
                }
            }
        };
        let trunks = Self::trunk_stages(cfg);
        match cfg.variant {
            Variant::SizeSplit => {
                push_stages(&trunks[0].0, 3, 1, &mut specs);
                push_stages(&trunks[1].0, ch[1], 3, &mut specs);
                push_stages(&trunks[2].0, ch[1], 3, &mut specs);
            }
            _ => push_stages(&trunks[0].0, 3, 1, &mut specs),
        }

        let (m, k) = (cfg.magnifier_channels, MAGNIFIER_KERNEL);
        let skip_in = ch[2] + ch[3] + ch[4];
        let roi = cfg.roi_size * cfg.roi_size;
        for b in cfg.branches() {
            let p = &b.prefix;
            let (rpn_in, head_c) = match (cfg.variant, p.as_str()) {
                (Variant::Base | Variant::Context, _) => (ch[4], ch[4]),
                (Variant::FaceMagNet, _) => {
                    for name in ["rpn_magnifier", "head_magnifier"] {
                        specs.push(ParamSpec {
                            name: name.into(),
                            dims: vec![ch[4], m, k, k],
                            init: InitKind::Bilinear,
                        });
                    }
                    (m, m)
                }
                (Variant::SkipFace, _) => {
                    specs.push(conv_spec("skip_rpn_reduce".into(), skip_in, cfg.skip_channels, 1));
                    specs.push(conv_spec("skip_head_reduce".into(), skip_in, cfg.skip_channels, 1));
                    if b.context {
                        specs.push(conv_spec("ctx_skip_reduce".into(), skip_in, cfg.skip_channels, 1));
                    }
                    (cfg.skip_channels, cfg.skip_channels)
                }
                (Variant::SizeSplit, "small.") => (ch[3], ch[3]),
                (Variant::SizeSplit, _) => (ch[4], ch[4]),
            };
            let a = b.scales.len();
            specs.push(conv_spec(format!("{p}rpn_conv"), rpn_in, cfg.rpn_channels, 3));
            specs.push(out_spec(format!("{p}rpn_cls"), vec![2 * a, cfg.rpn_channels, 1, 1], 0.01));
            specs.push(out_spec(format!("{p}rpn_reg"), vec![4 * a, cfg.rpn_channels, 1, 1], 0.001));

            let f = cfg.fc_dim;
            let pooled = head_c * roi;
            let merge = b.context && cfg.context_merge == ContextMerge::Conv1x1;
            if merge {
                specs.push(conv_spec(format!("{p}merge"), 2 * head_c, head_c, 1));
            }
            specs.push(fc_spec(format!("{p}fc6"), pooled, f));
            specs.push(fc_spec(format!("{p}fc7"), f, f));
            specs.push(out_spec(format!("{p}cls"), vec![2, f], 0.01));
            specs.push(out_spec(format!("{p}reg"), vec![4, f], 0.001));
            if b.context && !merge {
                specs.push(fc_spec(format!("{p}ctx_fc6"), pooled, f));
                specs.push(fc_spec(format!("{p}ctx_fc7"), f, f));
                specs.push(out_spec(format!("{p}ctx_cls"), vec![2, f], 0.01));
                specs.push(out_spec(format!("{p}ctx_reg"), vec![4, f], 0.001));
                specs.push(out_spec(format!("{p}joint_cls"), vec![2, 2 * f], 0.01));
                specs.push(out_spec(format!("{p}joint_reg"), vec![4, 2 * f], 0.001));
            }
        }
        specs
    }

    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        for s in Self::param_specs(cfg) {
            let out = s.dims[0];
            let p = match s.init {
                InitKind::He { fan_in } => he_init(&s.dims, fan_in, out, name_seed(seed, &s.name))?,
                InitKind::Bilinear => bilinear_transpose_init(s.dims[0], s.dims[1], s.dims[2])?,
                InitKind::Gaussian(std) => LayerParams::new(
                    Tensor::create(&s.dims, Init::Gaussian { mean: 0.0, std, seed: name_seed(seed, &s.name) })?,
                    Some(Tensor::zeros(&[out])?),
                ),
            };
            params.insert(s.name, p);
        }
        Ok(Model { config: cfg.clone(), params })
    }

    /// Builds a model from loaded parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Model> {
        config.validate()?;
        let specs = Self::param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Validation(format!(
                "config expects {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for s in &specs {
            let p = params
                .get(&s.name)
                .ok_or_else(|| Error::Validation(format!("missing parameter {}", s.name)))?;
            let bias_len = if matches!(s.init, InitKind::Bilinear) { s.dims[1] } else { s.dims[0] };
            if p.weight.dims() != s.dims.as_slice() || p.bias.as_ref().map(|b| b.numel()) != Some(bias_len) {
                return Err(Error::Validation(format!(
                    "parameter {} has shape {:?}, config expects {:?}",
                    s.name,
                    p.weight.dims(),
                    s.dims
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(LayerParams::numel).sum()
    }

    /// Ordered op list per branch, for display.
    pub fn architecture(&self) -> Vec<(String, Vec<String>)> {
        let cfg = &self.config;
        let mut out = Vec::new();
        for (stages, label) in Self::trunk_stages(cfg) {
            let mut ops = Vec::new();
            for st in &stages {
                if st.pool_first {
                    ops.push("maxpool2".to_string());
                }
                ops.extend(st.names.iter().map(|n| format!("{n}: conv3x3 + relu")));
            }
            out.push((label.to_string(), ops));
        }
        for b in cfg.branches() {
            let p = &b.prefix;
            let mut ops = Vec::new();
            match cfg.variant {
                Variant::FaceMagNet => {
                    ops.push(format!("rpn_magnifier: convtranspose k{MAGNIFIER_KERNEL} s{MAGNIFIER_STRIDE} p{MAGNIFIER_PAD}"));
                    ops.push(format!("head_magnifier: convtranspose k{MAGNIFIER_KERNEL} s{MAGNIFIER_STRIDE} p{MAGNIFIER_PAD}"));
                }
                Variant::SkipFace => {
                    ops.push("l2norm(block3..5), upsample x2/x4, concat, skip_rpn_reduce 1x1".into());
                    ops.push("roi pool blocks 3..5, per-roi l2norm, concat, skip_head_reduce 1x1".into());
                }
                _ => {}
            }
            ops.push(format!("{p}rpn_conv 3x3 + relu -> {p}rpn_cls (softmax2), {p}rpn_reg @ stride {}", b.stride));
            ops.push(format!("roi pool {0}x{0} -> {p}fc6 -> {p}fc7 -> {p}cls, {p}reg", cfg.roi_size));
            if b.context {
                ops.push(format!("context box x{} ({})", cfg.context_factor, cfg.context_merge));
            }
            out.push((format!("branch {}", if p.is_empty() { "main" } else { p.trim_end_matches('.') }), ops));
        }
        out
    }

    fn run_stages(&self, g: &mut Graph, mut x: usize, stages: &[Stage]) -> Result<Vec<usize>> {
        let mut outs = Vec::with_capacity(stages.len());
        for st in stages {
            if st.pool_first {
                x = g.apply(&self.params, Op::MaxPool2, &[x])?;
            }
            for name in &st.names {
                x = g.apply(&self.params, Op::Conv { param: name.clone(), stride: 1, pad: 1 }, &[x])?;
                x = g.apply(&self.params, Op::Relu, &[x])?;
            }
            outs.push(x);
        }
        Ok(outs)
    }

    fn rpn_head(&self, g: &mut Graph, x: usize, prefix: &str) -> Result<(usize, usize)> {
        let p = &self.params;
        let h = g.apply(p, Op::Conv { param: format!("{prefix}rpn_conv"), stride: 1, pad: 1 }, &[x])?;
        let h = g.apply(p, Op::Relu, &[h])?;
        let logits = g.apply(p, Op::Conv { param: format!("{prefix}rpn_cls"), stride: 1, pad: 0 }, &[h])?;
        let probs = g.apply(p, Op::Softmax2, &[logits])?;
        let reg = g.apply(p, Op::Conv { param: format!("{prefix}rpn_reg"), stride: 1, pad: 0 }, &[h])?;
        Ok((probs, reg))
    }

    /// Runs the backbone and proposal networks on a `[3, H, W]` image in `[0, 1]`.
    pub fn begin(&self, image: &Tensor) -> Result<Pass> {
        let (n, c, h, w) = image.nchw()?;
        if n != 1 || c != 3 {
            return Err(shape_err!("expected one RGB image, got {:?}", image.dims()));
        }
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(shape_err!("image {h}x{w} is not a multiple of {INPUT_MULTIPLE}"));
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 3, h, w], image.data().iter().map(|v| v - 0.5).collect())?);
        let p = &self.params;
        let trunks = Self::trunk_stages(&self.config);
        let specs = self.config.branches();
        let mut feeds: Vec<(usize, HeadSource)> = Vec::new();
        match self.config.variant {
            Variant::Base | Variant::Context => {
                let outs = self.run_stages(&mut g, x, &trunks[0].0)?;
                feeds.push((outs[4], HeadSource::Single { node: outs[4], stride: 16 }));
            }
            Variant::FaceMagNet => {
                let outs = self.run_stages(&mut g, x, &trunks[0].0)?;
                let mag = |g: &mut Graph, name: &str| {
                    g.apply(
                        p,
                        Op::ConvT { param: name.into(), stride: MAGNIFIER_STRIDE, pad: MAGNIFIER_PAD },
                        &[outs[4]],
                    )
                };
                let rpn_in = mag(&mut g, "rpn_magnifier")?;
                let head_in = mag(&mut g, "head_magnifier")?;
                feeds.push((rpn_in, HeadSource::Single { node: head_in, stride: 4 }));
            }
            Variant::SkipFace => {
                let outs = self.run_stages(&mut g, x, &trunks[0].0)?;
                let n3 = g.apply(p, Op::L2Norm, &[outs[2]])?;
                let n4 = g.apply(p, Op::L2Norm, &[outs[3]])?;
                let n5 = g.apply(p, Op::L2Norm, &[outs[4]])?;
                let u4 = g.apply(p, Op::Upsample(2), &[n4])?;
                let u5 = g.apply(p, Op::Upsample(4), &[n5])?;
                let cat = g.apply(p, Op::Concat, &[n3, u4])?;
                let cat = g.apply(p, Op::Concat, &[cat, u5])?;
                let fused = g.apply(p, Op::Conv { param: "skip_rpn_reduce".into(), stride: 1, pad: 0 }, &[cat])?;
                feeds.push((fused, HeadSource::Skip { nodes: [outs[2], outs[3], outs[4]] }));
            }
            Variant::SizeSplit => {
                let shared = self.run_stages(&mut g, x, &trunks[0].0)?;
                let small = self.run_stages(&mut g, shared[1], &trunks[1].0)?;
                let large = self.run_stages(&mut g, shared[1], &trunks[2].0)?;
                feeds.push((small[1], HeadSource::Single { node: small[1], stride: 8 }));
                feeds.push((large[2], HeadSource::Single { node: large[2], stride: 16 }));
            }
        }
        let mut branches = Vec::new();
        for (spec, (rpn_in, head)) in specs.into_iter().zip(feeds) {
            let (rpn_probs, rpn_reg) = self.rpn_head(&mut g, rpn_in, &spec.prefix)?;
            let (_, _, gh, gw) = g.value(rpn_probs).nchw()?;
            if gh * spec.stride != h || gw * spec.stride != w {
                return Err(shape_err!("branch stride {} does not match map {gh}x{gw} for {h}x{w}", spec.stride));
            }
            let grid = generate_anchor_grid(gh, gw, spec.stride, &spec.scales)?;
            branches.push(BranchState { spec, rpn_probs, rpn_reg, head, grid });
        }
        Ok(Pass { graph: g, branches, image_w: w, image_h: h })
    }

    fn pool_features(&self, pass: &mut Pass, source: &HeadSource, boxes: &[BBox], skip_reduce: &str) -> Result<usize> {
        let p = &self.params;
        let size = self.config.roi_size;
        let g = &mut pass.graph;
        match source {
            HeadSource::Single { node, stride } => g.apply(
                p,
                Op::RoiPool { boxes: boxes.to_vec(), spec: RoiSpec::for_stride(size, *stride) },
                &[*node],
            ),
            HeadSource::Skip { nodes } => {
                let mut cat = None;
                for (node, stride) in nodes.iter().zip([4, 8, 16]) {
                    let pooled = g.apply(
                        p,
                        Op::RoiPool { boxes: boxes.to_vec(), spec: RoiSpec::for_stride(size, stride) },
                        &[*node],
                    )?;
                    let normed = g.apply(p, Op::L2NormRows, &[pooled])?;
                    cat = Some(match cat {
                        None => normed,
                        Some(prev) => g.apply(p, Op::Concat, &[prev, normed])?,
                    });
                }
                let cat = cat.expect("three skip sources");
                g.apply(p, Op::Conv { param: skip_reduce.into(), stride: 1, pad: 0 }, &[cat])
            }
        }
    }

    fn fc_stack(&self, g: &mut Graph, x: usize, prefix: &str, lead: &str) -> Result<usize> {
        let p = &self.params;
        let h = g.apply(p, Op::Fc { param: format!("{prefix}{lead}fc6") }, &[x])?;
        let h = g.apply(p, Op::Relu, &[h])?;
        let h = g.apply(p, Op::Fc { param: format!("{prefix}{lead}fc7") }, &[h])?;
        g.apply(p, Op::Relu, &[h])
    }

    fn classify(&self, g: &mut Graph, x: usize, prefix: &str, lead: &str) -> Result<(usize, usize)> {
        let p = &self.params;
        let logits = g.apply(p, Op::Fc { param: format!("{prefix}{lead}cls") }, &[x])?;
        let probs = g.apply(p, Op::Softmax2, &[logits])?;
        let reg = g.apply(p, Op::Fc { param: format!("{prefix}{lead}reg") }, &[x])?;
        Ok((probs, reg))
    }

    /// Adds region-head nodes for `boxes` (already clipped, all valid) on `branch`.
    pub(crate) fn head_nodes(&self, pass: &mut Pass, branch: usize, boxes: &[BBox]) -> Result<HeadNodes> {
        if boxes.is_empty() {
            return Err(Error::Degenerate("region head over zero proposals".into()));
        }
        let b = pass.branches[branch].clone();
        let prefix = b.spec.prefix.as_str();
        let face = self.pool_features(pass, &b.head, boxes, "skip_head_reduce")?;
        if !b.spec.context {
            let h = self.fc_stack(&mut pass.graph, face, prefix, "")?;
            let primary = self.classify(&mut pass.graph, h, prefix, "")?;
            return Ok(HeadNodes { primary, context: None, joint: None });
        }
        let (iw, ih) = (pass.image_w as f64, pass.image_h as f64);
        let ctx_boxes = boxes
            .iter()
            .map(|bx| expand_context_box(bx, self.config.context_factor, iw, ih))
            .collect::<Result<Vec<_>>>()?;
        let ctx = self.pool_features(pass, &b.head, &ctx_boxes, "ctx_skip_reduce")?;
        let g = &mut pass.graph;
        match self.config.context_merge {
            ContextMerge::Conv1x1 => {
                let cat = g.apply(&self.params, Op::Concat, &[face, ctx])?;
                let merged = g.apply(&self.params, Op::Conv { param: format!("{prefix}merge"), stride: 1, pad: 0 }, &[cat])?;
                let h = self.fc_stack(g, merged, prefix, "")?;
                let primary = self.classify(g, h, prefix, "")?;
                Ok(HeadNodes { primary, context: None, joint: None })
            }
            ContextMerge::Concat => {
                let hf = self.fc_stack(g, face, prefix, "")?;
                let hc = self.fc_stack(g, ctx, prefix, "ctx_")?;
                let primary = self.classify(g, hf, prefix, "")?;
                let context = self.classify(g, hc, prefix, "ctx_")?;
                let joint_in = g.apply(&self.params, Op::ConcatRows, &[hf, hc])?;
                let joint = self.classify(g, joint_in, prefix, "joint_")?;
                Ok(HeadNodes { primary, context: Some(context), joint: Some(joint) })
            }
        }
    }

    /// Scores proposals with the region head of `branch`. Proposals are clipped
    /// to the image; those left empty are dropped and counted.
    pub fn forward_heads(&self, pass: &mut Pass, branch: usize, proposals: &[BBox]) -> Result<HeadScores> {
        let (iw, ih) = (pass.image_w as f64, pass.image_h as f64);
        let mut boxes = Vec::with_capacity(proposals.len());
        for p in proposals {
            let c = p.clip(iw, ih);
            if c.is_valid() {
                boxes.push(c);
            }
        }
        let dropped = proposals.len() - boxes.len();
        if dropped > 0 {
            log::warn!("dropped {dropped} proposals outside the image");
        }
        if boxes.is_empty() {
            return Ok(HeadScores {
                boxes,
                scores: vec![],
                deltas: vec![],
                face_scores: None,
                context_scores: None,
                dropped,
            });
        }
        let nodes = self.head_nodes(pass, branch, &boxes)?;
        let g = &pass.graph;
        let fg = |id: usize| g.value(id).data().chunks(2).map(|r| r[1]).collect::<Vec<_>>();
        let (sp, sr) = nodes.scoring();
        let deltas = g.value(sr).data().chunks(4).map(RegressionTarget::from_slice).collect();
        Ok(HeadScores {
            scores: fg(sp),
            deltas,
            face_scores: nodes.joint.map(|_| fg(nodes.primary.0)),
            context_scores: nodes.context.map(|c| fg(c.0)),
            boxes,
            dropped,
        })
    }
}

/// Owned proposal-network outputs for one branch.
#[derive(Clone, Debug)]
pub struct RpnOutput {
    pub probs: Tensor,
    pub reg: Tensor,
    pub stride: usize,
    pub grid: AnchorGrid,
}

pub fn forward_rpn(model: &Model, image: &Tensor) -> Result<Vec<RpnOutput>> {
    let pass = model.begin(image)?;
    Ok((0..pass.branch_count())
        .map(|i| {
            let v = pass.rpn(i);
            RpnOutput {
                probs: v.probs.clone(),
                reg: v.reg.clone(),
                stride: v.stride,
                grid: v.grid.clone(),
            }
        })
        .collect())
}
