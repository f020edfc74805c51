mod common;

use std::fs;
use std::path::{Path, PathBuf};

use facemag::cli::{self, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_VERIFY};
use facemag::dataio::load_checkpoint;
use facemag::gradcheck::{GradCase, OpSuite};
use facemag::layers::Differentiable;
use facemag::models::Model;
use facemag::tensor::{Init, Tensor};
use facemag::Result;
use tempfile::TempDir;

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["facemag"];
    full.extend_from_slice(args);
    let code = cli::run(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "synth.image_size=64\nsynth.max_side=30\nmodel.variant=base\n";

/// A tiny dataset plus a config file describing it.
fn fixture() -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("# toy run\n{SMALL}")).unwrap();
    let data = dir.path().join("data");
    let (code, out, err) = run(&["generate", "--config", s(&cfg), "--out", s(&data), "--count", "4", "--seed", "5"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("4 images"));
    (dir, cfg, data.join("annotations.txt"))
}

fn train(cfg: &Path, ann: &Path, out: &Path, extra: &[&str]) -> (i32, String, String) {
    let mut args = vec!["train", "--config", s(cfg), "--data", s(ann), "--out", s(out)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(run(&["--help"]).0, EXIT_OK);
    assert_eq!(run(&["bogus"]).0, EXIT_CONFIG);
    assert_eq!(run(&["train"]).0, EXIT_CONFIG);
}

#[test]
fn default_config_lists_every_section() {
    let (code, out, _) = run(&["config"]);
    assert_eq!(code, EXIT_OK);
    for k in ["model.variant=facemagnet", "train.total_iters=3800", "synth.image_count=500", "detect.scales=1,1.5,2"] {
        assert!(out.lines().any(|l| l == k), "{k} missing");
    }
}

#[test]
fn missing_config_names_the_path() {
    let (code, _, err) = run(&["train", "--config", "/no/such/run.cfg", "--data", "x", "--out", "y"]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("/no/such/run.cfg"), "{err}");
}

#[test]
fn unknown_key_is_rejected() {
    let (_dir, cfg, ann) = fixture();
    let out = cfg.with_file_name("m.ckpt");
    let (code, _, err) = train(&cfg, &ann, &out, &["--set", "train.warmup=3"]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("train.warmup"));
}

#[test]
fn toy_run_writes_reloadable_checkpoint() {
    let (_dir, cfg, ann) = fixture();
    let out = cfg.with_file_name("m.ckpt");
    let (code, msg, err) = train(&cfg, &ann, &out, &["--iters", "3"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(msg.contains("iteration 3"));
    let ck = load_checkpoint(&out).unwrap();
    assert_eq!(ck.train.unwrap().iteration, 3);
    let trace = fs::read_to_string(cfg.with_file_name("m.ckpt.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
}

#[test]
fn flags_win_over_file() {
    let (_dir, cfg, ann) = fixture();
    fs::write(&cfg, format!("{SMALL}train.total_iters=4\n")).unwrap();
    let out = cfg.with_file_name("m.ckpt");
    let (code, msg, _) = train(&cfg, &ann, &out, &["--iters", "2"]);
    assert_eq!(code, EXIT_OK);
    assert!(msg.contains("iteration 2"), "{msg}");
}

#[test]
fn zero_iterations_keep_initialization() {
    let (_dir, cfg, ann) = fixture();
    let out = cfg.with_file_name("m.ckpt");
    assert_eq!(train(&cfg, &ann, &out, &["--iters", "0", "--seed", "4"]).0, EXIT_OK);
    let ck = load_checkpoint(&out).unwrap();
    let init = Model::build(&ck.model.config, 4).unwrap();
    assert_eq!(ck.model.params, init.params);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let (_dir, cfg, ann) = fixture();
    let path = |n: &str| cfg.with_file_name(n);
    let bytes = |n: &str| fs::read(path(n)).unwrap();
    for n in ["a.ckpt", "b.ckpt"] {
        assert_eq!(train(&cfg, &ann, &path(n), &["--iters", "6"]).0, EXIT_OK);
    }
    assert_eq!(bytes("a.ckpt"), bytes("b.ckpt"));
    assert_eq!(bytes("a.ckpt.trace.csv"), bytes("b.ckpt.trace.csv"));

    assert_eq!(train(&cfg, &ann, &path("half.ckpt"), &["--iters", "6", "--stop-at", "3"]).0, EXIT_OK);
    let half = path("half.ckpt");
    let resumed = ["--iters", "6", "--resume", s(&half)];
    assert_eq!(train(&cfg, &ann, &path("c.ckpt"), &resumed).0, EXIT_OK);
    assert_eq!(bytes("a.ckpt"), bytes("c.ckpt"));
    let full = String::from_utf8(bytes("a.ckpt.trace.csv")).unwrap();
    let first = String::from_utf8(bytes("half.ckpt.trace.csv")).unwrap();
    let second = String::from_utf8(bytes("c.ckpt.trace.csv")).unwrap();
    let joined: Vec<&str> = first.lines().chain(second.lines().skip(1)).collect();
    assert_eq!(joined, full.lines().collect::<Vec<_>>());
}

#[test]
fn divergence_exits_with_numeric_code() {
    let (_dir, cfg, ann) = fixture();
    let out = cfg.with_file_name("m.ckpt");
    let (code, _, err) = train(&cfg, &ann, &out, &["--iters", "30", "--set", "train.lr_initial=1e30", "--set", "train.lr_after=1e30"]);
    assert_eq!(code, EXIT_NUMERIC, "{err}");
    assert!(!out.exists());
}

#[test]
fn detect_and_propose_are_deterministic() {
    let (_dir, cfg, ann) = fixture();
    let ck = cfg.with_file_name("m.ckpt");
    assert_eq!(train(&cfg, &ann, &ck, &["--iters", "2"]).0, EXIT_OK);
    let image = ann.with_file_name("img_00000.ppm");
    let detect = |scales: &str| {
        run(&["detect", "--model", s(&ck), "--image", s(&image), "--scales", scales, "--score-thresh", "0"])
    };
    let (code, a, err) = detect("1,2");
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(detect("1,2").1, a);
    let single = detect("1").1;
    assert!(single.lines().all(|l| l.ends_with(" 1.000000")));
    for l in a.lines() {
        assert!(l.starts_with("img_00000.ppm "));
    }

    let (code, p, _) = run(&["propose", "--model", s(&ck), "--ann", s(&ann), "--top", "7"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(run(&["propose", "--model", s(&ck), "--ann", s(&ann), "--top", "7"]).1, p);
    assert!(p.lines().filter(|l| l.starts_with("img_00001.ppm ")).count() <= 7);

    assert_eq!(run(&["detect", "--model", s(&ann), "--image", s(&image)]).0, EXIT_CONFIG);
}

fn write_ann(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("ann.txt");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn eval_modes() {
    let dir = TempDir::new().unwrap();
    let ann = write_ann(dir.path(), "a.ppm\n2\n0 0 10 10\n20 20 8 8\nb.ppm\n1\n5 5 12 12\n");
    let pred = dir.path().join("pred.txt");
    let perfect = "a.ppm 0 0 10 10 1 1\na.ppm 20 20 28 28 1 1\nb.ppm 5 5 17 17 1 1\n";
    fs::write(&pred, perfect).unwrap();
    let (code, out, _) = run(&["eval", "--pred", s(&pred), "--ann", s(&ann)]);
    assert_eq!((code, out.as_str()), (EXIT_OK, "AP 1.000000\n"));
    assert!(dir.path().join("pr.csv").exists() && dir.path().join("pr.svg").exists());

    let (_, out, _) = run(&["eval", "--pred", s(&pred), "--ann", s(&ann), "--mode", "sizes"]);
    assert_eq!(out, "recall 1.000000\n");

    // The second proposal for a.ppm is the only one covering its second box.
    fs::write(&pred, "a.ppm 0 0 10 10 0.9 1\na.ppm 20 20 28 28 0.8 1\nb.ppm 5 5 17 17 1 1\n").unwrap();
    let recall = |top: &str| run(&["eval", "--pred", s(&pred), "--ann", s(&ann), "--mode", "recall", "--top", top]).1;
    assert_eq!(recall("1000"), "AUC 1.000000\n");
    assert_eq!(recall("1"), format!("AUC {:.6}\n", 2.0 / 3.0));
    assert!(dir.path().join("recall.svg").exists());

    fs::write(&pred, "").unwrap();
    assert_eq!(run(&["eval", "--pred", s(&pred), "--ann", s(&ann)]).1, "AP 0.000000\n");

    let empty = write_ann(dir.path(), "a.ppm\n0\n");
    let (code, _, err) = run(&["eval", "--pred", s(&pred), "--ann", s(&empty)]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("no ground-truth"));
}

#[test]
fn gradcheck_covers_every_op_once() {
    let (code, out, _) = run(&["gradcheck"]);
    assert_eq!(code, EXIT_OK, "{out}");
    let ops: Vec<&str> = out.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    for op in ["conv2d", "convtranspose2d", "maxpool2", "upsample", "fully_connected", "relu", "softmax2", "l2_normalize_global", "roi_max_pool", "rpn_loss", "head_loss"] {
        assert_eq!(ops.iter().filter(|&&o| o == op).count(), 1, "{op}");
    }
}

struct HalfGradient;

impl Differentiable for HalfGradient {
    fn name(&self) -> String {
        "half_gradient".into()
    }
    fn forward(&self, x: &[Tensor]) -> Result<Tensor> {
        Ok(x[0].map(|v| v * v))
    }
    fn backward(&self, x: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![Tensor::from_vec(x[0].dims(), x[0].data().iter().zip(g.data()).map(|(a, b)| a * b).collect())?])
    }
}

fn broken_case(seed: u64) -> Result<GradCase> {
    let x = Tensor::create(&[6], Init::Uniform { lo: -1.0, hi: 1.0, seed })?;
    Ok(GradCase { op: Box::new(HalfGradient), inputs: vec![x] })
}

#[test]
fn corrupted_backward_exits_three() {
    let mut suite = facemag::gradcheck::standard_suite();
    suite.push(OpSuite { name: "half_gradient", make: broken_case });
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::cmd_gradcheck(&suite, &mut out, &mut err).unwrap();
    assert_eq!(code, EXIT_VERIFY);
    let err = String::from_utf8(err).unwrap();
    assert!(err.contains("half_gradient") && !err.contains("conv2d"), "{err}");
}
