//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::anchors::BBox;
use crate::dataio::{self, Dtype, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::gradcheck::{self, OpSuite, GRADCHECK_TOLERANCE};
use crate::inference::{self, DetectConfig, Detection, PyramidSpec};
use crate::models::{parse_value, Model, ModelConfig, Variant};
use crate::trainer::{self, TrainConfig, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const THREADS_ENV: &str = "FACEMAG_THREADS";

/// Every tunable, addressed as `section.key`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub detect: DetectConfig,
    pub pyramid: PyramidSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::new(Variant::FaceMagNet),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            detect: DetectConfig::default(),
            pyramid: PyramidSpec::default(),
        }
    }
}

fn synth_entries(c: &SynthConfig) -> Vec<(&'static str, String)> {
    vec![
        ("image_count", c.image_count.to_string()),
        ("image_size", c.image_size.to_string()),
        ("min_objects", c.min_objects.to_string()),
        ("max_objects", c.max_objects.to_string()),
        ("min_side", c.min_side.to_string()),
        ("max_side", c.max_side.to_string()),
        ("noise_std", c.noise_std.to_string()),
        ("seed", c.seed.to_string()),
    ]
}

fn synth_set(c: &mut SynthConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "image_count" => c.image_count = parse_value(key, v)?,
        "image_size" => c.image_size = parse_value(key, v)?,
        "min_objects" => c.min_objects = parse_value(key, v)?,
        "max_objects" => c.max_objects = parse_value(key, v)?,
        "min_side" => c.min_side = parse_value(key, v)?,
        "max_side" => c.max_side = parse_value(key, v)?,
        "noise_std" => c.noise_std = parse_value(key, v)?,
        "seed" => c.seed = parse_value(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn detect_entries(c: &DetectConfig, p: &PyramidSpec) -> Vec<(&'static str, String)> {
    let scales: Vec<String> = p.scales().iter().map(f64::to_string).collect();
    vec![
        ("score_thresh", c.score_thresh.to_string()),
        ("nms_thresh", c.nms_thresh.to_string()),
        ("rpn_nms_thresh", c.rpn_nms_thresh.to_string()),
        ("pre_nms_top", c.pre_nms_top.to_string()),
        ("proposals", c.proposals.to_string()),
        ("scales", scales.join(",")),
    ]
}

fn detect_set(c: &mut DetectConfig, p: &mut PyramidSpec, key: &str, v: &str) -> Result<bool> {
    match key {
        "score_thresh" => c.score_thresh = parse_value(key, v)?,
        "nms_thresh" => c.nms_thresh = parse_value(key, v)?,
        "rpn_nms_thresh" => c.rpn_nms_thresh = parse_value(key, v)?,
        "pre_nms_top" => c.pre_nms_top = parse_value(key, v)?,
        "proposals" => c.proposals = parse_value(key, v)?,
        "scales" => *p = PyramidSpec::parse(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    pub fn entries(&self) -> Vec<(String, String)> {
        let tag = |s: &'static str, e: Vec<(&'static str, String)>| e.into_iter().map(move |(k, v)| (format!("{s}.{k}"), v));
        tag("model", self.model.entries())
            .chain(tag("train", self.train.entries()))
            .chain(tag("synth", synth_entries(&self.synth)))
            .chain(tag("detect", detect_entries(&self.detect, &self.pyramid)))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Sets one `section.key`; unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let known = match key.split_once('.') {
            Some(("model", k)) => self.model.set(k, v)?,
            Some(("train", k)) => self.train.set(k, v)?,
            Some(("synth", k)) => synth_set(&mut self.synth, k, v)?,
            Some(("detect", k)) => detect_set(&mut self.detect, &mut self.pyramid, k, v)?,
            _ => false,
        };
        if known {
            Ok(())
        } else {
            Err(Error::Validation(format!("unknown config key {key:?}")))
        }
    }

    /// Applies `key=value` pairs in order, except that `model.variant` goes
    /// first since it resets the context-head default.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let (variant, rest): (Vec<_>, Vec<_>) = pairs.iter().partition(|(k, _)| k == "model.variant");
        for (k, v) in variant.into_iter().chain(rest) {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.detect.validate()
    }
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Defaults, then the config file, then `--set` overrides, then dedicated flags.
fn load_run_config(file: Option<&Path>, sets: &[String], flags: &[(&str, String)]) -> Result<RunConfig> {
    let mut pairs = Vec::new();
    if let Some(p) = file {
        let text = fs::read_to_string(p).map_err(|e| Error::Validation(format!("cannot read config {}: {e}", p.display())))?;
        pairs.extend(parse_pairs(&text)?);
    }
    for s in sets {
        pairs.extend(parse_pairs(s)?);
    }
    pairs.extend(flags.iter().map(|(k, v)| (k.to_string(), v.clone())));
    let mut rc = RunConfig::default();
    rc.apply(&pairs)?;
    if !pairs.iter().any(|(k, _)| k == "train.lr_drop_iter") {
        rc.train.lr_drop_iter = trainer::proportional_drop(rc.train.total_iters);
    }
    rc.validate()?;
    Ok(rc)
}

#[derive(Parser, Debug)]
#[command(name = "facemag", version, about = "Two-stage small-object detector with feature-map magnification")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.seed=3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct InputArgs {
    #[arg(long)]
    model: PathBuf,
    /// A single PPM image
    #[arg(long, conflicts_with = "ann", required_unless_present = "ann")]
    image: Option<PathBuf>,
    /// Every image of an annotation file
    #[arg(long)]
    ann: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Ap,
    Recall,
    Sizes,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the default configuration
    Config,
    /// Write a synthetic dataset
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint plus loss trace
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Loss trace path (default: checkpoint path + .trace.csv)
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Continue from a checkpoint carrying optimizer state
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop before this iteration, keeping the schedule of the full run
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Print detections in the dump format
    Detect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        input: InputArgs,
        /// Comma-separated pyramid scales
        #[arg(long)]
        scales: Option<String>,
        /// Resize so the shorter side has this length first
        #[arg(long)]
        min_side: Option<f64>,
        #[arg(long)]
        score_thresh: Option<f64>,
    },
    /// Print top-k proposals in the dump format, scored by objectness
    Propose {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value_t = 1000)]
        top: usize,
    },
    /// Score a dump against annotations
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        ann: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalMode::Ap)]
        mode: EvalMode,
        /// Predictions kept per image, by score
        #[arg(long, default_value_t = 1000)]
        top: usize,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 0.5)]
        score_thresh: f64,
        /// Directory for curve files (default: next to the predictions)
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Check every backward pass against finite differences
    Gradcheck,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn configure_threads() {
    let n = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

/// Runs the command line `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    configure_threads();
    let result = match cli.cmd {
        Command::Config => write_out(out, &RunConfig::default().to_text()).map(|_| EXIT_OK),
        Command::Generate { cfg, out: dir, count, seed } => cmd_generate(&cfg, &dir, count, seed, out),
        Command::Train { cfg, data, out: ckpt, iters, seed, trace, resume, stop_at } => {
            let opts = TrainArgs { data, out: ckpt, iters, seed, trace, resume, stop_at };
            cmd_train(&cfg, &opts, out)
        }
        Command::Detect { cfg, input, scales, min_side, score_thresh } => {
            cmd_detect(&cfg, &input, scales, min_side, score_thresh, out)
        }
        Command::Propose { cfg, input, top } => cmd_propose(&cfg, &input, top, out),
        Command::Eval { pred, ann, mode, top, iou, score_thresh, out_dir } => {
            cmd_eval(&pred, &ann, mode, top, iou, score_thresh, out_dir.as_deref(), out)
        }
        Command::Gradcheck => cmd_gradcheck(&gradcheck::standard_suite(), out, err),
    };
    result.unwrap_or_else(|e| {
        let _ = writeln!(err, "error: {e}");
        exit_code(&e)
    })
}

fn write_out(out: &mut dyn Write, s: &str) -> Result<()> {
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn cmd_generate(c: &ConfigArgs, dir: &Path, count: Option<usize>, seed: Option<u64>, out: &mut dyn Write) -> Result<i32> {
    let mut flags = Vec::new();
    if let Some(n) = count {
        flags.push(("synth.image_count", n.to_string()));
    }
    if let Some(s) = seed {
        flags.push(("synth.seed", s.to_string()));
    }
    let rc = load_run_config(c.config.as_deref(), &c.sets, &flags)?;
    let g = dataio::generate_synthetic_dataset(&rc.synth, dir)?;
    let boxes: usize = g.annotations.records.iter().map(|r| r.boxes.len()).sum();
    write_out(
        out,
        &format!(
            "{} images, {boxes} objects, {} skipped -> {}\n",
            g.annotations.records.len(),
            g.skipped,
            g.annotation_path.display()
        ),
    )?;
    Ok(EXIT_OK)
}

struct TrainArgs {
    data: PathBuf,
    out: PathBuf,
    iters: Option<usize>,
    seed: Option<u64>,
    trace: Option<PathBuf>,
    resume: Option<PathBuf>,
    stop_at: Option<usize>,
}

fn cmd_train(c: &ConfigArgs, a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let mut flags = Vec::new();
    if let Some(n) = a.iters {
        flags.push(("train.total_iters", n.to_string()));
    }
    if let Some(s) = a.seed {
        flags.push(("train.seed", s.to_string()));
    }
    let rc = load_run_config(c.config.as_deref(), &c.sets, &flags)?;
    let data = dataio::load_samples(&a.data)?;
    let (mut model, state) = match &a.resume {
        Some(p) => {
            let ck = dataio::load_checkpoint(p)?;
            let state = ck
                .train
                .ok_or_else(|| Error::Validation(format!("{} has no optimizer state", p.display())))?;
            (ck.model, state)
        }
        None => {
            let m = Model::build(&rc.model, rc.train.seed)?;
            let s = TrainState::new(&m);
            (m, s)
        }
    };
    let stop = a.stop_at.unwrap_or(rc.train.total_iters);
    let result = trainer::train_from(&mut model, &data, &rc.train, state, stop)?;
    dataio::save_checkpoint(&model, Some(&result.state), &a.out, Dtype::F64)?;
    let trace = a.trace.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".trace.csv");
        PathBuf::from(s)
    });
    fs::write(&trace, result.trace_csv())?;
    let last = result.trace.last().map_or(String::from("none"), |(_, r)| format!("{:.6}", r.total));
    write_out(
        out,
        &format!(
            "trained to iteration {}, last loss {last} -> {}\n",
            result.state.iteration,
            a.out.display()
        ),
    )?;
    Ok(EXIT_OK)
}

/// `(id, image)` pairs named by `--image` or `--ann`.
fn load_inputs(input: &InputArgs) -> Result<Vec<(String, crate::tensor::Tensor)>> {
    match (&input.image, &input.ann) {
        (Some(p), _) => {
            let id = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok(vec![(id, dataio::read_image(p)?)])
        }
        (None, Some(a)) => Ok(dataio::load_samples(a)?.into_iter().map(|s: Sample| (s.id, s.image)).collect()),
        (None, None) => Err(Error::Validation("need --image or --ann".into())),
    }
}

fn load_model(p: &Path) -> Result<Model> {
    Ok(dataio::load_checkpoint(p)?.model)
}

/// Runs `f` on every input in parallel and concatenates the dumps in input order.
fn dump_all(
    inputs: &[(String, crate::tensor::Tensor)],
    f: impl Fn(&crate::tensor::Tensor) -> Result<Vec<Detection>> + Sync,
) -> Result<String> {
    let parts = inputs
        .par_iter()
        .map(|(id, img)| {
            let mut d = f(img)?;
            inference::sort_detections(&mut d);
            Ok(inference::format_detections(id, &d))
        })
        .collect::<Result<Vec<String>>>()?;
    Ok(parts.concat())
}

fn cmd_detect(
    c: &ConfigArgs,
    input: &InputArgs,
    scales: Option<String>,
    min_side: Option<f64>,
    score_thresh: Option<f64>,
    out: &mut dyn Write,
) -> Result<i32> {
    let mut flags = Vec::new();
    if let Some(s) = scales {
        flags.push(("detect.scales", s));
    }
    if let Some(t) = score_thresh {
        flags.push(("detect.score_thresh", t.to_string()));
    }
    let rc = load_run_config(c.config.as_deref(), &c.sets, &flags)?;
    if min_side.is_some_and(|m| !(m > 0.0)) {
        return Err(Error::Validation("--min-side must be positive".into()));
    }
    let model = load_model(&input.model)?;
    let inputs = load_inputs(input)?;
    let text = dump_all(&inputs, |img| {
        let (_, _, h, w) = img.nchw()?;
        let base = inference::side_scale(h, w, min_side, None);
        let spec = PyramidSpec::new(rc.pyramid.scales().iter().map(|s| s * base).collect())?;
        if spec.scales() == [1.0] {
            inference::detect_single_scale(&model, img, &rc.detect)
        } else {
            inference::detect_pyramid(&model, img, &spec, &rc.detect)
        }
    })?;
    write_out(out, &text)?;
    Ok(EXIT_OK)
}

fn cmd_propose(c: &ConfigArgs, input: &InputArgs, top: usize, out: &mut dyn Write) -> Result<i32> {
    let rc = load_run_config(c.config.as_deref(), &c.sets, &[])?;
    let model = load_model(&input.model)?;
    let inputs = load_inputs(input)?;
    let text = dump_all(&inputs, |img| {
        Ok(inference::propose_topk(&model, img, top, &rc.detect)?
            .into_iter()
            .map(|p| Detection { bbox: p.bbox, score: p.objectness, source_scale: 1.0 })
            .collect())
    })?;
    write_out(out, &text)?;
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    pred: &Path,
    ann: &Path,
    mode: EvalMode,
    top: usize,
    iou: f64,
    score_thresh: f64,
    out_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32> {
    let set = dataio::parse_wider_annotations(&fs::read_to_string(ann)?)?;
    let gts: Vec<Vec<BBox>> = set.records.iter().map(|r| r.boxes.clone()).collect();
    if gts.iter().all(Vec::is_empty) {
        return Err(Error::Degenerate(format!("{} has no ground-truth boxes", ann.display())));
    }
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); set.records.len()];
    for (id, d) in inference::parse_detections(&fs::read_to_string(pred)?)? {
        let i = set
            .records
            .iter()
            .position(|r| r.path == id)
            .ok_or_else(|| Error::Validation(format!("prediction for unknown image {id:?}")))?;
        dets[i].push(d);
    }
    for d in &mut dets {
        inference::sort_detections(d);
        d.truncate(top);
    }
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| pred.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&dir)?;
    let line = match mode {
        EvalMode::Ap => {
            let pr = evaluation::average_precision(&dets, &gts, iou)?;
            fs::write(dir.join("pr.csv"), pr.to_csv())?;
            fs::write(dir.join("pr.svg"), evaluation::pr_curve_svg("detections", &pr))?;
            format!("AP {:.6}\n", pr.ap)
        }
        EvalMode::Recall => {
            let boxes: Vec<Vec<BBox>> = dets.iter().map(|d| d.iter().map(|x| x.bbox).collect()).collect();
            let curve = evaluation::iou_recall_curve(&boxes, &gts, &evaluation::default_thresholds())?;
            if !curve.is_monotone() {
                return Err(Error::Validation("recall curve is not monotone".into()));
            }
            fs::write(dir.join("recall.csv"), curve.to_csv())?;
            fs::write(dir.join("recall.svg"), evaluation::recall_curve_svg(&[("proposals", &curve)]))?;
            format!("AUC {:.6}\n", curve.auc)
        }
        EvalMode::Sizes => {
            let rep = evaluation::size_bucket_report(&dets, &gts, 10.0, 50.0, score_thresh)?;
            fs::write(dir.join("sizes.csv"), rep.to_csv())?;
            fs::write(dir.join("sizes.svg"), evaluation::size_report_svg(&rep))?;
            let hits: usize = rep.buckets.iter().map(|b| b.hits).sum();
            format!("recall {:.6}\n", hits as f64 / rep.total() as f64)
        }
    };
    write_out(out, &line)?;
    Ok(EXIT_OK)
}

/// Runs `suite`, prints the table and returns 0, or 3 naming the failing ops.
pub fn cmd_gradcheck(suite: &[OpSuite], out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let rows = gradcheck::run_suite(suite, GRADCHECK_TOLERANCE)?;
    write_out(out, &gradcheck::format_table(&rows))?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        return Ok(EXIT_OK);
    }
    writeln!(err, "gradient check failed: {}", failed.join(", "))?;
    Ok(EXIT_VERIFY)
}
