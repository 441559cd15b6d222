//! Image files, dataset manifests and the synthetic dataset generator.
//!
//! Images are binary PGM (`P5`, maxval 255) or GPTT tensors, chosen by file
//! extension. Either way they load as `(1, H, W, C)` tensors of raw 8-bit
//! intensities.
//!
//! Manifest schema (paths relative to the manifest's directory):
//!
//! ```json
//! {
//!   "version": 1,
//!   "task_count": 2,
//!   "samples": [
//!     {"id": "s000", "input": "s000/input.pgm",
//!      "targets": {"0": "s000/task0.pgm"},
//!      "condition": "synthetic", "split": "train"}
//!   ]
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiscale::{gray_tensor, TrainingSample};
use crate::tensor::{read_gptt, write_gptt, RawTensor, Tensor};

pub const MANIFEST_VERSION: u32 = 1;

/// A decoded 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::dims(
                "gray image",
                format!("{} pixels for {height}x{width}", pixels.len()),
            ));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        gray_tensor(self.height, self.width, &self.pixels).expect("validated dims")
    }

    /// Converts a single-channel tensor whose values are integers in
    /// `0..=255`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::InvalidArgument(format!(
                "8-bit image needs shape (1, H, W, 1), got {s}"
            )));
        }
        let pixels = t
            .data()
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::InvalidArgument(format!(
                        "value {v} is not an 8-bit intensity"
                    )))
                }
            })
            .collect::<Result<_>>()?;
        GrayImage::new(s.h, s.w, pixels)
    }
}

/// Encodes a binary PGM with maxval 255.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Decodes a binary PGM. `#` comments are allowed between header fields;
/// maxval must be 255 and exactly one whitespace byte precedes the raster.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let fail = |offset: usize, msg: String| Error::Format {
        what: "PGM image",
        offset,
        msg,
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(fail(0, "missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut field = |name: &str| -> Result<(usize, usize)> {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(fail(pos, format!("truncated header before {name}"))),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fail(start, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        let v = text
            .parse::<usize>()
            .map_err(|_| fail(start, format!("{name} {text} out of range")))?;
        Ok((v, start))
    };
    let (width, _) = field("width")?;
    let (height, _) = field("height")?;
    let (maxval, at) = field("maxval")?;
    if maxval != 255 {
        return Err(fail(at, format!("maxval {maxval} unsupported (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(fail(at, format!("empty image {width}x{height}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail(pos, "expected whitespace before raster".into())),
    }
    let len = width * height;
    let raster = bytes.get(pos..pos + len).ok_or_else(|| {
        fail(
            bytes.len(),
            format!("truncated raster: need {len} bytes from offset {pos}"),
        )
    })?;
    if bytes.len() != pos + len {
        return Err(fail(
            pos + len,
            format!("{} trailing bytes", bytes.len() - pos - len),
        ));
    }
    GrayImage::new(height, width, raster.to_vec())
}

fn is_pgm(path: &Path) -> Result<bool> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
    {
        Some(e) if e == "pgm" => Ok(true),
        Some(e) if e == "gptt" => Ok(false),
        _ => Err(Error::InvalidArgument(format!(
            "{}: expected a .pgm or .gptt file",
            path.display()
        ))),
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Loads a `.pgm` or `.gptt` image as `(1, H, W, C)`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    if is_pgm(path)? {
        Ok(read_pgm(path)?.to_tensor())
    } else {
        let raw = read_gptt(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        raw.to_tensor()
    }
}

/// Saves a single image. PGM requires one channel of 8-bit integers; GPTT
/// stores `(H, W, C)` as rank 3.
pub fn save_image(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    if is_pgm(path)? {
        write_pgm(path, &GrayImage::from_tensor(t)?)
    } else {
        write_gptt(path, &RawTensor::from_item(t)?)
    }
}

/// Loads a single-channel 8-bit image from either format.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    if is_pgm(path)? {
        read_pgm(path)
    } else {
        GrayImage::from_tensor(&load_image(path)?)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub input: String,
    /// Task id (decimal string) to target image path.
    #[serde(default)]
    pub targets: BTreeMap<String, String>,
    #[serde(default)]
    pub condition: String,
    pub split: Split,
}

impl ManifestSample {
    /// Parsed task ids and their paths; unparseable keys are skipped here
    /// and reported by [`validate_manifest`].
    pub fn tasks(&self) -> impl Iterator<Item = (usize, &str)> {
        self.targets
            .iter()
            .filter_map(|(k, v)| k.parse().ok().map(|t| (t, v.as_str())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub task_count: usize,
    pub samples: Vec<ManifestSample>,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "{}: manifest version {} unsupported",
                path.display(),
                m.version
            )));
        }
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }

    pub fn sample(&self, id: &str) -> Option<&ManifestSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn split(&self, split: Option<Split>) -> impl Iterator<Item = &ManifestSample> {
        self.samples
            .iter()
            .filter(move |s| split.is_none_or(|want| s.split == want))
    }

    /// Loads the images of one sample for training.
    pub fn load_sample(&self, s: &ManifestSample) -> Result<TrainingSample> {
        let image = load_image(self.resolve(&s.input))?;
        let dims = image.shape();
        let mut targets = vec![None; self.task_count];
        for (t, path) in s.tasks() {
            if t >= self.task_count {
                return Err(Error::Data(format!(
                    "sample {}: task {t} outside 0..{}",
                    s.id, self.task_count
                )));
            }
            let img = load_gray(self.resolve(path))?;
            if (img.height, img.width) != (dims.h, dims.w) {
                return Err(Error::Data(format!(
                    "sample {} task {t}: target {}x{} vs input {}x{}",
                    s.id, img.height, img.width, dims.h, dims.w
                )));
            }
            targets[t] = Some(img.pixels);
        }
        Ok(TrainingSample {
            id: s.id.clone(),
            image,
            targets,
        })
    }

    pub fn load_samples(&self, split: Option<Split>) -> Result<Vec<TrainingSample>> {
        self.split(split).map(|s| self.load_sample(s)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    Empty,
    DuplicateId,
    MissingFile,
    Unreadable,
    BadTaskId,
    TaskOutOfRange,
    DimensionMismatch,
}

/// One manifest problem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub kind: IssueKind,
    pub sample: Option<String>,
    pub task: Option<usize>,
    /// `(H, W, C)` of the sample input and of the offending file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dims: Option<[[usize; 3]; 2]>,
    pub message: String,
}

fn dims_of(path: &Path) -> Result<[usize; 3]> {
    let s = load_image(path)?.shape();
    Ok([s.h, s.w, s.c])
}

/// Checks files, dimensions and task ids. Problems are returned as data.
pub fn validate_manifest(m: &Manifest) -> Vec<Issue> {
    let mut issues = Vec::new();
    let mut push = |kind, sample: &str, task, dims, message: String| {
        issues.push(Issue {
            kind,
            sample: Some(sample.to_string()),
            task,
            dims,
            message,
        })
    };
    let mut seen = BTreeSet::new();
    for s in &m.samples {
        if !seen.insert(s.id.as_str()) {
            push(
                IssueKind::DuplicateId,
                &s.id,
                None,
                None,
                format!("duplicate id {}", s.id),
            );
        }
        let input_path = m.resolve(&s.input);
        let input_dims = if !input_path.exists() {
            push(
                IssueKind::MissingFile,
                &s.id,
                None,
                None,
                format!("input {} not found", input_path.display()),
            );
            None
        } else {
            match dims_of(&input_path) {
                Ok(d) => Some(d),
                Err(e) => {
                    push(IssueKind::Unreadable, &s.id, None, None, e.to_string());
                    None
                }
            }
        };
        for (key, rel) in &s.targets {
            let Ok(task) = key.parse::<usize>() else {
                push(
                    IssueKind::BadTaskId,
                    &s.id,
                    None,
                    None,
                    format!("task id {key:?}"),
                );
                continue;
            };
            if task >= m.task_count {
                push(
                    IssueKind::TaskOutOfRange,
                    &s.id,
                    Some(task),
                    None,
                    format!("task {task} outside 0..{}", m.task_count),
                );
            }
            let path = m.resolve(rel);
            if !path.exists() {
                push(
                    IssueKind::MissingFile,
                    &s.id,
                    Some(task),
                    None,
                    format!("target {} not found", path.display()),
                );
                continue;
            }
            match dims_of(&path) {
                Ok(d) => {
                    if let Some(inp) = input_dims {
                        if (d[0], d[1]) != (inp[0], inp[1]) || d[2] != 1 {
                            push(
                                IssueKind::DimensionMismatch,
                                &s.id,
                                Some(task),
                                Some([inp, d]),
                                format!("input {inp:?} vs target {d:?}"),
                            );
                        }
                    }
                }
                Err(e) => push(IssueKind::Unreadable, &s.id, Some(task), None, e.to_string()),
            }
        }
    }
    if m.samples.is_empty() {
        issues.push(Issue {
            kind: IssueKind::Empty,
            sample: None,
            task: None,
            dims: None,
            message: "manifest lists no samples".into(),
        });
    }
    issues
}

/// What each synthetic task highlights, assigned by `task % 4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRule {
    /// Bright blobs on every cell's nucleus.
    Nuclei,
    /// Bodies of cells flagged dead.
    Viability,
    /// Bodies of cells flagged as neurons.
    Type,
    /// Bodies of all cells.
    Body,
}

impl TaskRule {
    pub fn for_task(t: usize) -> Self {
        [
            TaskRule::Nuclei,
            TaskRule::Viability,
            TaskRule::Type,
            TaskRule::Body,
        ][t % 4]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of the cell count.
    pub cells: (usize, usize),
    /// Semi-major axis range in pixels.
    pub radius: (f64, f64),
    /// Standard deviation of additive Gaussian noise, in intensity units.
    pub noise: f64,
    pub task_count: usize,
    /// Tasks that receive a target image; the rest are unlabeled.
    pub labeled: Vec<usize>,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn new(size: usize, task_count: usize, seed: u64) -> Self {
        SyntheticSceneSpec {
            height: size,
            width: size,
            cells: (size * size / 1200 + 2, size * size / 600 + 3),
            radius: (6.0, 11.0),
            noise: 3.0,
            task_count,
            labeled: (0..task_count).collect(),
            seed,
        }
    }
}

/// Geometry of one rendered cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneCell {
    pub row: f64,
    pub col: f64,
    pub major: f64,
    pub minor: f64,
    /// Orientation of the major axis, radians.
    pub angle: f64,
    /// Nucleus size as a fraction of the cell radii.
    pub nucleus: f64,
    pub dead: bool,
    pub neuron: bool,
}

impl SceneCell {
    /// Normalized elliptical radius of `(y, x)`: 1 on the membrane.
    pub fn radius_at(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.row, x - self.col);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.major).powi(2) + (v / self.minor).powi(2)).sqrt()
    }

    /// Nucleus intensity profile, positive strictly inside the nucleus.
    pub fn nucleus_profile(&self, y: f64, x: f64) -> f64 {
        let r = self.radius_at(y, x) / self.nucleus;
        (1.0 - r * r).max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub input: GrayImage,
    pub targets: Vec<Option<GrayImage>>,
    pub scene: Vec<SceneCell>,
}

fn body(r: f64) -> f64 {
    ((1.15 - r) / 0.3).clamp(0.0, 1.0)
}

fn ring(r: f64) -> f64 {
    (-((r - 1.0) / 0.13).powi(2)).exp()
}

fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders a scene of soft elliptical cells on a dim background.
///
/// The input shows bright membranes, darker nuclei, brighter interiors for
/// dead cells and elongated bodies for neurons, so every target rule is
/// visible in the input.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<SyntheticSample> {
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::InvalidArgument(
            "synthetic image needs positive size".into(),
        ));
    }
    if spec.cells.0 > spec.cells.1 || !(spec.radius.0 > 0.0 && spec.radius.0 <= spec.radius.1) {
        return Err(Error::InvalidArgument("bad cell count or radius range".into()));
    }
    if let Some(&t) = spec.labeled.iter().find(|&&t| t >= spec.task_count) {
        return Err(Error::InvalidArgument(format!(
            "labeled task {t} outside 0..{}",
            spec.task_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = rng.random_range(spec.cells.0..=spec.cells.1);
    let scene: Vec<SceneCell> = (0..count)
        .map(|_| {
            let neuron = rng.random_bool(0.4);
            let dead = rng.random_bool(0.35);
            let major = rng.random_range(spec.radius.0..=spec.radius.1);
            let minor = if neuron {
                major / 2.2
            } else {
                major * rng.random_range(0.8..=1.0)
            };
            SceneCell {
                row: rng.random_range(0.0..spec.height as f64),
                col: rng.random_range(0.0..spec.width as f64),
                major,
                minor,
                angle: rng.random_range(0.0..std::f64::consts::PI),
                nucleus: rng.random_range(0.35..=0.5),
                dead,
                neuron,
            }
        })
        .collect();

    let (h, w) = (spec.height, spec.width);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let rules: Vec<TaskRule> = (0..spec.task_count).map(TaskRule::for_task).collect();
    let mut input = Vec::with_capacity(h * w);
    let mut targets = vec![Vec::with_capacity(h * w); spec.task_count];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let mut v = 90.0;
            let mut t = [0.0f64; 4];
            for cell in &scene {
                let r = cell.radius_at(fy, fx);
                if r > 1.6 {
                    continue;
                }
                let b = body(r);
                let nuc = cell.nucleus_profile(fy, fx);
                v += 45.0 * ring(r) + 10.0 * b - 25.0 * nuc.sqrt();
                if cell.dead {
                    v += 30.0 * b;
                }
                t[0] = t[0].max(255.0 * nuc);
                if cell.dead {
                    t[1] = t[1].max(220.0 * b);
                }
                if cell.neuron {
                    t[2] = t[2].max(200.0 * b);
                }
                t[3] = t[3].max(180.0 * b);
            }
            v += noise.sample(&mut rng);
            input.push(quantize(v));
            for (task, rule) in rules.iter().enumerate() {
                let value = match rule {
                    TaskRule::Nuclei => t[0],
                    TaskRule::Viability => t[1],
                    TaskRule::Type => t[2],
                    TaskRule::Body => t[3],
                };
                targets[task].push(quantize(value));
            }
        }
    }
    let labeled: BTreeSet<usize> = spec.labeled.iter().copied().collect();
    let targets = targets
        .into_iter()
        .enumerate()
        .map(|(t, px)| labeled.contains(&t).then(|| GrayImage::new(h, w, px)).transpose())
        .collect::<Result<_>>()?;
    Ok(SyntheticSample {
        input: GrayImage::new(h, w, input)?,
        targets,
        scene,
    })
}

/// Options for writing a synthetic dataset to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub samples: usize,
    pub size: usize,
    pub seed: u64,
    pub task_count: usize,
    /// Tasks rendered as targets.
    pub tasks: Vec<usize>,
    /// Every `test_every`-th sample goes to the test split; 0 keeps all in
    /// the training split.
    pub test_every: usize,
    /// Drops task `i % task_count` from sample `i` to exercise masking.
    pub partial_labels: bool,
}

/// Writes `manifest.json` plus `<id>/input.pgm`, `<id>/task<t>.pgm` and
/// `<id>/scene.json` for each sample under `out`.
pub fn write_synthetic_dataset(out: impl AsRef<Path>, opts: &SynthOptions) -> Result<Manifest> {
    let out = out.as_ref();
    if opts.samples == 0 || opts.task_count == 0 {
        return Err(Error::InvalidArgument(
            "need at least one sample and one task".into(),
        ));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut seeds = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut samples = Vec::with_capacity(opts.samples);
    for i in 0..opts.samples {
        let id = format!("s{i:03}");
        let mut spec = SyntheticSceneSpec::new(opts.size, opts.task_count, seeds.random());
        spec.labeled = opts
            .tasks
            .iter()
            .copied()
            .filter(|&t| !(opts.partial_labels && opts.task_count > 1 && t == i % opts.task_count))
            .collect();
        let sample = generate_synthetic(&spec)?;
        let dir = out.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_pgm(dir.join("input.pgm"), &sample.input)?;
        let mut targets = BTreeMap::new();
        for (t, img) in sample.targets.iter().enumerate() {
            if let Some(img) = img {
                write_pgm(dir.join(format!("task{t}.pgm")), img)?;
                targets.insert(t.to_string(), format!("{id}/task{t}.pgm"));
            }
        }
        let scene = dir.join("scene.json");
        fs::write(&scene, serde_json::to_string_pretty(&sample.scene)? + "\n")
            .map_err(|e| Error::io(&scene, e))?;
        let test = opts.test_every > 0 && (i + 1) % opts.test_every == 0;
        samples.push(ManifestSample {
            input: format!("{id}/input.pgm"),
            id,
            targets,
            condition: "synthetic".into(),
            split: if test { Split::Test } else { Split::Train },
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        task_count: opts.task_count,
        samples,
        base: out.to_path_buf(),
    };
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}
