//! Synthetic data, WIDER-style annotations, PPM images and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::anchors::{box_iou, BBox};
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::layers::LayerParams;
use crate::models::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::{OptimizerState, TrainState};

pub const PLACEMENT_ATTEMPTS: usize = 100;
pub const ANNOTATION_FILE: &str = "annotations.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub path: String,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationSet {
    pub records: Vec<AnnotationRecord>,
    /// Boxes dropped while parsing because of non-positive extents.
    pub dropped: usize,
}

/// An image in `[0, 1]` with its ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_count: usize,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: f64,
    pub max_side: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_count: 500,
            image_size: 128,
            min_objects: 1,
            max_objects: 6,
            min_side: 6.0,
            max_side: 40.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return bad(format!("image_size {} is not a positive multiple of 16", self.image_size));
        }
        if !(self.min_side >= 4.0) || !(self.max_side >= self.min_side) || !(self.max_side < self.image_size as f64) {
            return bad(format!(
                "object sides need 4 <= min_side <= max_side < image_size, got [{}, {}] in {}",
                self.min_side, self.max_side, self.image_size
            ));
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects > max_objects".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        Ok(())
    }
}

/// Summary of one generated dataset.
#[derive(Clone, Debug)]
pub struct GeneratedSet {
    pub annotations: AnnotationSet,
    pub annotation_path: PathBuf,
    /// Objects abandoned after the placement budget ran out.
    pub skipped: usize,
}

fn draw_side(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> f64 {
    let (lo, hi) = (cfg.min_side.ln(), cfg.max_side.ln());
    let s = if hi > lo { rng.random_range(lo..=hi).exp() } else { cfg.min_side };
    s.round().clamp(cfg.min_side.ceil(), cfg.max_side.floor())
}

/// Renders one image with non-overlapping blobs. Returns pixel data and boxes.
fn render(rng: &mut ChaCha8Rng, cfg: &SynthConfig, skipped: &mut usize) -> Result<(Tensor, Vec<BBox>)> {
    let n = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).map_err(|e| Error::Param(e.to_string()))?;
    let base = rng.random_range(0.35..0.65);
    let mut data: Vec<f64> = (0..3 * n * n)
        .map(|_| if cfg.noise_std > 0.0 { base + noise.sample(rng) } else { base })
        .collect();
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    for _ in 0..count {
        let w = draw_side(rng, cfg);
        let h = (w * rng.random_range(0.8..1.25)).round().clamp(cfg.min_side.ceil(), cfg.max_side.floor());
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = rng.random_range(0..=(n - w as usize)) as f64;
            let y = rng.random_range(0..=(n - h as usize)) as f64;
            let b = BBox { x1: x, y1: y, x2: x + w, y2: y + h };
            if boxes.iter().all(|o| box_iou(o, &b) == 0.0) {
                placed = Some(b);
                break;
            }
        }
        let Some(b) = placed else {
            *skipped += 1;
            continue;
        };
        let bright = rng.random_bool(0.5);
        let level = if bright { rng.random_range(0.85..0.97) } else { rng.random_range(0.03..0.15) };
        let color: Vec<f64> = (0..3).map(|_| (level + rng.random_range(-0.03..0.03f64)).clamp(0.0, 1.0)).collect();
        let ellipse = rng.random_bool(0.5);
        let (cx, cy) = b.center();
        let (rx, ry) = (0.5 * b.width(), 0.5 * b.height());
        for py in b.y1 as usize..b.y2 as usize {
            for px in b.x1 as usize..b.x2 as usize {
                if ellipse {
                    let (dx, dy) = ((px as f64 + 0.5 - cx) / rx, (py as f64 + 0.5 - cy) / ry);
                    if dx * dx + dy * dy > 1.0 {
                        continue;
                    }
                }
                for (c, v) in color.iter().enumerate() {
                    data[(c * n + py) * n + px] = v + 0.5 * if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                }
            }
        }
        boxes.push(b);
    }
    for v in &mut data {
        *v = quantize(*v) as f64 / 255.0;
    }
    Ok((Tensor::from_vec(&[3, n, n], data)?, boxes))
}

/// Writes `image_count` PPM images and an annotation file into `out_dir`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<GeneratedSet> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.image_count);
    let mut skipped = 0;
    for i in 0..cfg.image_count {
        let (img, boxes) = render(&mut rng, cfg, &mut skipped)?;
        let name = format!("img_{i:05}.ppm");
        write_image(&img, &out_dir.join(&name))?;
        records.push(AnnotationRecord { path: name, boxes });
    }
    if skipped > 0 {
        log::warn!("synthetic generation skipped {skipped} objects that could not be placed");
    }
    let annotations = AnnotationSet { records, dropped: 0 };
    let annotation_path = out_dir.join(ANNOTATION_FILE);
    fs::write(&annotation_path, format_wider_annotations(&annotations))?;
    Ok(GeneratedSet { annotations, annotation_path, skipped })
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

pub fn format_wider_annotations(set: &AnnotationSet) -> String {
    let mut s = String::new();
    for r in &set.records {
        s.push_str(&r.path);
        s.push('\n');
        s.push_str(&format!("{}\n", r.boxes.len()));
        for b in &r.boxes {
            s.push_str(&format!(
                "{} {} {} {}\n",
                fmt_num(b.x1),
                fmt_num(b.y1),
                fmt_num(b.width()),
                fmt_num(b.height())
            ));
        }
    }
    s
}

/// Parses the blocked format: path line, count line, then `x y w h ...` lines.
pub fn parse_wider_annotations(text: &str) -> Result<AnnotationSet> {
    let lines: Vec<&str> = text.lines().collect();
    let mut set = AnnotationSet::default();
    let mut i = 0;
    let err = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
    while i < lines.len() {
        let path = lines[i].trim();
        if path.is_empty() {
            i += 1;
            continue;
        }
        let count_line = lines.get(i + 1).ok_or_else(|| err(i + 1, format!("missing box count after {path:?}")))?;
        let count: usize = count_line
            .trim()
            .parse()
            .map_err(|_| err(i + 1, format!("malformed box count {:?}", count_line.trim())))?;
        i += 2;
        let mut boxes = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.get(i).ok_or_else(|| err(i, "unexpected end of file inside a box list".into()))?;
            let fields: Vec<f64> = line
                .split_whitespace()
                .take(4)
                .map(|f| f.parse::<f64>().map_err(|_| err(i, format!("non-numeric box field {f:?}"))))
                .collect::<Result<_>>()?;
            if fields.len() < 4 || fields.iter().any(|v| !v.is_finite()) {
                return Err(err(i, format!("box line needs 4 numbers: {line:?}")));
            }
            let (x, y, w, h) = (fields[0], fields[1], fields[2], fields[3]);
            if w > 0.0 && h > 0.0 {
                boxes.push(BBox { x1: x, y1: y, x2: x + w, y2: y + h });
            } else {
                set.dropped += 1;
            }
            i += 1;
        }
        // A zero count may be followed by one placeholder box line.
        if count == 0 {
            if let Some(next) = lines.get(i) {
                let f: Vec<&str> = next.split_whitespace().collect();
                if f.len() >= 4 && f.iter().all(|x| x.parse::<f64>().is_ok()) {
                    i += 1;
                }
            }
        }
        set.records.push(AnnotationRecord { path: path.to_string(), boxes });
    }
    if set.dropped > 0 {
        log::warn!("dropped {} boxes with non-positive extent", set.dropped);
    }
    Ok(set)
}

/// Loads every image of an annotation file; image paths are relative to it.
pub fn load_samples(annotation_path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(annotation_path)?;
    let set = parse_wider_annotations(&text)?;
    let dir = annotation_path.parent().unwrap_or(Path::new("."));
    set.records
        .into_iter()
        .map(|r| {
            let image = read_image(&dir.join(&r.path))?;
            Ok(Sample { id: r.path, image, boxes: r.boxes })
        })
        .collect()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = image.nchw()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("ppm needs a [3, H, W] image, got {:?}", image.dims())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    let plane = h * w;
    out.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(quantize(d[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated ppm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::Format("not a binary ppm (magic must be P6)".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse().map_err(|_| Error::Format(format!("bad ppm {what} {t:?}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::Format(format!("ppm maxval {maxval}, only 255 is supported")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("ppm with zero extent".into()));
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    let plane = w * h;
    if body.len() < 3 * plane {
        return Err(Error::Format(format!("ppm pixel data truncated: {} of {} bytes", body.len(), 3 * plane)));
    }
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = body[3 * i + ch] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_image(image: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMNT";
pub const CHECKPOINT_VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "opt.velocity/";
const ITER_KEY: &str = "train.iteration";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// A loaded checkpoint; `train` is present when optimizer state was saved.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainState>,
}

fn flatten(store: &ParamStore, prefix: &str, out: &mut Vec<(String, Tensor)>) {
    for (name, p) in store {
        out.push((format!("{prefix}{name}.weight"), p.weight.clone()));
        if let Some(b) = &p.bias {
            out.push((format!("{prefix}{name}.bias"), b.clone()));
        }
    }
}

pub fn checkpoint_bytes(model: &Model, train: Option<&TrainState>, dtype: Dtype) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    flatten(&model.params, "", &mut tensors);
    let mut blob = model.config.to_text();
    if let Some(t) = train {
        flatten(&t.optimizer.velocity, VELOCITY_PREFIX, &mut tensors);
        blob.push_str(&format!("{ITER_KEY}={}\n", t.iteration));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(match dtype {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        });
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model, train: Option<&TrainState>, path: &Path, dtype: Dtype) -> Result<()> {
    let bytes = checkpoint_bytes(model, train, dtype)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn unflatten(tensors: BTreeMap<String, Tensor>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut biases = Vec::new();
    for (name, t) in tensors {
        if let Some(base) = name.strip_suffix(".weight") {
            store.insert(base.to_string(), LayerParams::new(t, None));
        } else if let Some(base) = name.strip_suffix(".bias") {
            biases.push((base.to_string(), t));
        } else {
            return Err(Error::Format(format!("unexpected tensor name {name}")));
        }
    }
    for (base, t) in biases {
        store
            .get_mut(&base)
            .ok_or_else(|| Error::Format(format!("bias without weight: {base}")))?
            .bias = Some(t);
    }
    Ok(store)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let blob_len = r.u32()? as usize;
    let blob = std::str::from_utf8(r.take(blob_len)?).map_err(|_| Error::Format("config block is not utf-8".into()))?;
    let mut iteration = None;
    let mut cfg_text = String::new();
    for line in blob.lines() {
        match line.strip_prefix(&format!("{ITER_KEY}=")) {
            Some(v) => {
                iteration = Some(v.trim().parse::<usize>().map_err(|_| Error::Format(format!("bad {ITER_KEY} {v:?}")))?)
            }
            None => {
                cfg_text.push_str(line);
                cfg_text.push('\n');
            }
        }
    }
    let config = ModelConfig::from_text(&cfg_text)?;
    let count = r.u32()? as usize;
    let mut params = BTreeMap::new();
    let mut velocity = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("non-utf-8 name".into()))?;
        let dtype = r.take(1)?[0];
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let data: Vec<f64> = match dtype {
            0 => r.take(4 * numel)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
            1 => r.take(8 * numel)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            d => return Err(Error::Format(format!("unknown dtype tag {d} for {name}"))),
        };
        let t = Tensor::from_vec(&dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        match name.strip_prefix(VELOCITY_PREFIX) {
            Some(base) => velocity.insert(base.to_string(), t),
            None => params.insert(name, t),
        };
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    let model = Model::from_parts(config, unflatten(params)?)?;
    let train = match iteration {
        Some(iteration) => {
            let velocity = unflatten(velocity)?;
            let optimizer = OptimizerState::from_velocity(&model.params, velocity)?;
            Some(TrainState { iteration, optimizer })
        }
        None if velocity.is_empty() => None,
        None => return Err(Error::Format("optimizer state without iteration count".into())),
    };
    Ok(Checkpoint { model, train })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Variant;
    use crate::tensor::Init;

    #[test]
    fn wider_examples() {
        let s = parse_wider_annotations("a.ppm\n1\n10 20 30 40\n").unwrap();
        assert_eq!(s.records[0].boxes, vec![BBox::new(10.0, 20.0, 40.0, 60.0).unwrap()]);
        let s = parse_wider_annotations("a.ppm\n0\n").unwrap();
        assert!(s.records[0].boxes.is_empty());
        let long = parse_wider_annotations("a.ppm\n1\n10 20 30 40 0 0 0 0 0 0\n").unwrap();
        assert_eq!(long.records, parse_wider_annotations("a.ppm\n1\n10 20 30 40\n").unwrap().records);
        let placeholder = parse_wider_annotations("a.ppm\n0\n0 0 0 0 0 0 0 0 0 0\nb.ppm\n1\n1 1 2 2\n").unwrap();
        assert_eq!(placeholder.records.len(), 2);
        assert_eq!(placeholder.records[1].boxes.len(), 1);
        let dropped = parse_wider_annotations("a.ppm\n2\n1 1 0 5\n1 1 3 3\n").unwrap();
        assert_eq!((dropped.records[0].boxes.len(), dropped.dropped), (1, 1));
    }

    #[test]
    fn wider_errors_carry_line_numbers() {
        assert!(matches!(parse_wider_annotations("a.ppm\nx\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_wider_annotations("a.ppm\n1\n1 2 q 4\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_wider_annotations("a.ppm\n2\n1 2 3 4\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_wider_annotations("a.ppm\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn ppm_roundtrip() {
        let white = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!((white.dims(), white.data()), (&[3usize, 1, 1][..], &[1.0, 1.0, 1.0][..]));
        let bytes: Vec<f64> = (0..3 * 5 * 7).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let t = Tensor::from_vec(&[3, 5, 7], bytes).unwrap();
        let back = decode_ppm(&encode_ppm(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        let commented = decode_ppm(b"P6\n# made by hand\n1 1\n255\n\0\x80\xff").unwrap();
        assert_eq!(commented.data()[1], 128.0 / 255.0);
    }

    #[test]
    fn synthetic_generation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { image_count: 4, image_size: 64, max_side: 20.0, seed: 5, ..SynthConfig::default() };
        let a = generate_synthetic_dataset(&cfg, &dir.path().join("a")).unwrap();
        let b = generate_synthetic_dataset(&cfg, &dir.path().join("b")).unwrap();
        for r in &a.annotations.records {
            for name in [r.path.as_str(), ANNOTATION_FILE] {
                assert_eq!(fs::read(dir.path().join("a").join(name)).unwrap(), fs::read(dir.path().join("b").join(name)).unwrap());
            }
            for bx in &r.boxes {
                assert!(bx.min_side() >= cfg.min_side && bx.max_side() <= cfg.max_side);
                assert!(bx.x1 >= 0.0 && bx.y1 >= 0.0 && bx.x2 <= 64.0 && bx.y2 <= 64.0);
            }
        }
        assert_eq!(a.annotations, b.annotations);
        let samples = load_samples(&a.annotation_path).unwrap();
        assert_eq!(samples.len(), 4);
        assert_eq!(samples[0].boxes, a.annotations.records[0].boxes);

        let empty = SynthConfig { image_count: 1, min_objects: 0, max_objects: 0, ..cfg.clone() };
        let e = generate_synthetic_dataset(&empty, &dir.path().join("e")).unwrap();
        assert!(e.annotations.records[0].boxes.is_empty());
        assert!(SynthConfig { min_side: 3.0, ..cfg.clone() }.validate().is_err());
        assert!(SynthConfig { max_side: 64.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let m = Model::build(&ModelConfig::new(Variant::FaceMagNet), 4).unwrap();
        let bytes = checkpoint_bytes(&m, None, Dtype::F64).unwrap();
        assert_eq!(&bytes[..4], b"FMNT");
        assert_eq!(bytes, checkpoint_bytes(&m, None, Dtype::F64).unwrap());
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back.model, m);
        assert!(back.train.is_none());

        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(checkpoint_from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Format(_))));

        let f32_back = checkpoint_from_bytes(&checkpoint_bytes(&m, None, Dtype::F32).unwrap()).unwrap();
        let w = &f32_back.model.params["rpn_conv"].weight;
        assert_eq!(w.data()[0], m.params["rpn_conv"].weight.data()[0] as f32 as f64);
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let mut m = Model::build(&ModelConfig::new(Variant::Base), 4).unwrap();
        let p = m.params.get_mut("fc7").unwrap();
        p.weight = Tensor::create(&[3, 64], Init::Zeros).unwrap();
        let bytes = checkpoint_bytes(&m, None, Dtype::F64).unwrap();
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Validation(_))));
    }
}
