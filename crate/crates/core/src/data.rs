//! Dataset generation, IDX-file ingestion, standardization, corruption for
//! distributional shift, and the OOD outlier source.

use crate::error::{DcaError, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// A labeled dataset: row-major `[n, dim]` inputs and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub split: SplitTag,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        classes: usize,
        split: SplitTag,
        provenance: String,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(DcaError::Data("dataset must be non-empty".into()));
        }
        if inputs.len() != n * dim {
            return Err(DcaError::Dimension(format!(
                "dataset wants {}x{} inputs, got {}",
                n,
                dim,
                inputs.len()
            )));
        }
        if classes < 2 {
            return Err(DcaError::Config("dataset needs at least 2 classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(DcaError::Data(format!(
                "label {} out of range for {} classes",
                bad, classes
            )));
        }
        Ok(Dataset { inputs, labels, n, dim, classes, split, provenance })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.inputs[r * self.dim..(r + 1) * self.dim]
    }

    pub fn input_tensor(&self) -> crate::tensor::Tensor {
        crate::tensor::Tensor {
            shape: vec![self.n, self.dim],
            data: self.inputs.clone(),
            grad: None,
        }
    }
}

/// Synthetic dataset generators. Train and test splits draw from disjoint
/// RNG substreams of the same seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    /// C isotropic Gaussian clusters with centers evenly spaced on a circle.
    GaussianClusters { classes: usize, per_class_train: usize, per_class_test: usize, noise: f64 },
    /// The classic two-spirals problem (2 classes, exact class balance).
    TwoSpirals { per_class_train: usize, per_class_test: usize, noise: f64 },
    /// Uniform samples on an annulus; the OOD outlier source. Labels cycle
    /// through the classes and carry no meaning.
    RingUniform { classes: usize, samples_train: usize, samples_test: usize, inner: f64, outer: f64 },
}

fn gaussian_pair(rng: &mut impl Rng) -> (f64, f64) {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    (r * (2.0 * PI * u2).cos(), r * (2.0 * PI * u2).sin())
}

/// Radius of the circle the gaussian cluster centers sit on.
pub const CLUSTER_CENTER_RADIUS: f64 = 1.6;

fn generate(spec: &SyntheticSpec, rng: &mut impl Rng, split: SplitTag) -> Result<Dataset> {
    match spec {
        SyntheticSpec::GaussianClusters { classes, per_class_train, per_class_test, noise } => {
            if *classes < 2 {
                return Err(DcaError::Config("gaussian_clusters needs >= 2 classes".into()));
            }
            let per_class = match split {
                SplitTag::Train => *per_class_train,
                SplitTag::Test => *per_class_test,
            };
            if per_class == 0 {
                return Err(DcaError::Config("per-class sample count must be positive".into()));
            }
            let mut inputs = Vec::with_capacity(classes * per_class * 2);
            let mut labels = Vec::with_capacity(classes * per_class);
            for c in 0..*classes {
                let angle = 2.0 * PI * c as f64 / *classes as f64;
                let (cx, cy) =
                    (CLUSTER_CENTER_RADIUS * angle.cos(), CLUSTER_CENTER_RADIUS * angle.sin());
                for _ in 0..per_class {
                    let (gx, gy) = gaussian_pair(rng);
                    inputs.push(cx + noise * gx);
                    inputs.push(cy + noise * gy);
                    labels.push(c);
                }
            }
            Dataset::new(inputs, labels, 2, *classes, split, "synthetic:gaussian_clusters".into())
        }
        SyntheticSpec::TwoSpirals { per_class_train, per_class_test, noise } => {
            let per_class = match split {
                SplitTag::Train => *per_class_train,
                SplitTag::Test => *per_class_test,
            };
            if per_class == 0 {
                return Err(DcaError::Config("per-class sample count must be positive".into()));
            }
            let mut inputs = Vec::with_capacity(per_class * 4);
            let mut labels = Vec::with_capacity(per_class * 2);
            for c in 0..2usize {
                for k in 0..per_class {
                    let t = 0.25 + 3.0 * PI * (k as f64 + rng.gen_range(0.0..1.0)) / per_class as f64;
                    let sign = if c == 0 { 1.0 } else { -1.0 };
                    let (gx, gy) = gaussian_pair(rng);
                    inputs.push(sign * t.cos() * t / (3.0 * PI) + noise * gx);
                    inputs.push(sign * t.sin() * t / (3.0 * PI) + noise * gy);
                    labels.push(c);
                }
            }
            Dataset::new(inputs, labels, 2, 2, split, "synthetic:two_spirals".into())
        }
        SyntheticSpec::RingUniform { classes, samples_train, samples_test, inner, outer } => {
            if *classes < 2 {
                return Err(DcaError::Config("ring_uniform needs >= 2 classes".into()));
            }
            if !(*inner >= 0.0 && outer > inner) {
                return Err(DcaError::Config("ring_uniform needs 0 <= inner < outer".into()));
            }
            let samples = match split {
                SplitTag::Train => *samples_train,
                SplitTag::Test => *samples_test,
            };
            if samples == 0 {
                return Err(DcaError::Config("ring_uniform sample count must be positive".into()));
            }
            let mut inputs = Vec::with_capacity(samples * 2);
            let mut labels = Vec::with_capacity(samples);
            for k in 0..samples {
                // area-uniform radius on the annulus
                let u: f64 = rng.gen_range(0.0..1.0);
                let r = (inner * inner + u * (outer * outer - inner * inner)).sqrt();
                let theta = rng.gen_range(0.0..2.0 * PI);
                inputs.push(r * theta.cos());
                inputs.push(r * theta.sin());
                labels.push(k % classes);
            }
            Dataset::new(inputs, labels, 2, *classes, split, "synthetic:ring_uniform".into())
        }
    }
}

/// Generate the train and test splits of a synthetic dataset. Substream 0
/// drives the train split, substream 1 the test split.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(0);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(1);
    let train = generate(spec, &mut train_rng, SplitTag::Train)?;
    let test = generate(spec, &mut test_rng, SplitTag::Test)?;
    Ok((train, test))
}

/// Per-feature affine normalization fitted on the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit mean 0 / std 1 statistics on a dataset (population std). Features
    /// with vanishing spread keep scale 1.
    pub fn fit(train: &Dataset) -> Self {
        let d = train.dim;
        let n = train.n as f64;
        let mut mean = vec![0.0; d];
        for r in 0..train.n {
            for (m, &x) in mean.iter_mut().zip(train.row(r)) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for r in 0..train.n {
            for (v, (&x, &m)) in var.iter_mut().zip(train.row(r).iter().zip(&mean)) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.dim != self.mean.len() {
            return Err(DcaError::Dimension(format!(
                "standardizer fitted on {} features, dataset has {}",
                self.mean.len(),
                data.dim
            )));
        }
        let mut out = data.clone();
        for r in 0..out.n {
            for c in 0..out.dim {
                let i = r * out.dim + c;
                out.inputs[i] = (out.inputs[i] - self.mean[c]) / self.std[c];
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    InputBlur,
    PixelDropout,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] =
        [CorruptionKind::GaussianNoise, CorruptionKind::InputBlur, CorruptionKind::PixelDropout];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::InputBlur => "input_blur",
            CorruptionKind::PixelDropout => "pixel_dropout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" => Ok(CorruptionKind::GaussianNoise),
            "input_blur" => Ok(CorruptionKind::InputBlur),
            "pixel_dropout" => Ok(CorruptionKind::PixelDropout),
            other => Err(DcaError::Config(format!("unknown corruption kind '{}'", other))),
        }
    }
}

/// A corruption at one of five severities; severity 0 is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: usize,
}

/// Monotone per-kind parameter tables, severity 1..=5.
const GAUSSIAN_SIGMA: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.5];
const BLUR_KERNEL: [usize; 5] = [3, 5, 7, 9, 11];
const DROPOUT_RATE: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.5];

/// Apply a corruption to a dataset's inputs. Labels and size never change;
/// severity 0 returns the dataset bit-identically.
pub fn corrupt(data: &Dataset, spec: &CorruptionSpec, seed: u64) -> Result<Dataset> {
    if spec.severity > 5 {
        return Err(DcaError::Config(format!(
            "corruption severity {} outside [0, 5]",
            spec.severity
        )));
    }
    if spec.severity == 0 {
        return Ok(data.clone());
    }
    let level = spec.severity - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = data.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = GAUSSIAN_SIGMA[level];
            let mut pending = None;
            for v in out.inputs.iter_mut() {
                let g = match pending.take() {
                    Some(g) => g,
                    None => {
                        let (a, b) = gaussian_pair(&mut rng);
                        pending = Some(b);
                        a
                    }
                };
                *v += sigma * g;
            }
        }
        CorruptionKind::InputBlur => {
            // 1-D mean filter over the feature axis with clamped borders
            let k = BLUR_KERNEL[level];
            let half = (k / 2) as isize;
            let d = out.dim as isize;
            for r in 0..out.n {
                let row: Vec<f64> = out.row(r).to_vec();
                for c in 0..d {
                    let mut acc = 0.0;
                    for o in -half..=half {
                        let idx = (c + o).clamp(0, d - 1) as usize;
                        acc += row[idx];
                    }
                    out.inputs[r * out.dim + c as usize] = acc / k as f64;
                }
            }
        }
        CorruptionKind::PixelDropout => {
            let rate = DROPOUT_RATE[level];
            for v in out.inputs.iter_mut() {
                if rng.gen_range(0.0..1.0) < rate {
                    *v = 0.0;
                }
            }
        }
    }
    out.provenance = format!("{}+{}@{}", data.provenance, spec.kind.as_str(), spec.severity);
    Ok(out)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], pos: usize, what: &str) -> Result<u32> {
    if pos + 4 > bytes.len() {
        return Err(DcaError::Format(format!(
            "truncated IDX file: wanted {} at byte offset {}, file has {} bytes",
            what,
            pos,
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()))
}

/// Parse a big-endian IDX image/label file pair: pixels scale to [0, 1] by
/// division with 255. The class count is inferred from the label range.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;

    let magic = read_be_u32(&img, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DcaError::Format(format!(
            "bad IDX image magic {:#010x} at byte offset 0, expected {:#010x}",
            magic, IDX_IMAGES_MAGIC
        )));
    }
    let count = read_be_u32(&img, 4, "image count")? as usize;
    let rows = read_be_u32(&img, 8, "row count")? as usize;
    let cols = read_be_u32(&img, 12, "column count")? as usize;
    let want = 16 + count * rows * cols;
    if img.len() != want {
        return Err(DcaError::Format(format!(
            "IDX image payload is {} bytes, header at byte offset 4 implies {}",
            img.len() - 16.min(img.len()),
            want - 16
        )));
    }

    let lmagic = read_be_u32(&lab, 0, "label magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(DcaError::Format(format!(
            "bad IDX label magic {:#010x} at byte offset 0, expected {:#010x}",
            lmagic, IDX_LABELS_MAGIC
        )));
    }
    let lcount = read_be_u32(&lab, 4, "label count")? as usize;
    if lab.len() != 8 + lcount {
        return Err(DcaError::Format(format!(
            "IDX label payload is {} bytes, header implies {}",
            lab.len() - 8.min(lab.len()),
            lcount
        )));
    }
    if count != lcount {
        return Err(DcaError::Format(format!(
            "IDX pair mismatch: {} images vs {} labels",
            count, lcount
        )));
    }

    let inputs: Vec<f64> = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map(|&m| m + 1).unwrap_or(0).max(2);
    Dataset::new(
        inputs,
        labels,
        rows * cols,
        classes,
        SplitTag::Train,
        format!("idx:{}", images_path.display()),
    )
}

/// Writer counterpart of `load_idx`: inputs round to bytes via `*255`.
/// `rows x cols` must multiply to the dataset's feature dimension.
pub fn write_idx(data: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    if rows * cols != data.dim {
        return Err(DcaError::Dimension(format!(
            "{}x{} image does not match {} features",
            rows, cols, data.dim
        )));
    }
    let mut img = Vec::with_capacity(16 + data.n * data.dim);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(data.n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in &data.inputs {
        img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let mut lab = Vec::with_capacity(8 + data.n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(data.n as u32).to_be_bytes());
    for &y in &data.labels {
        lab.push(y as u8);
    }
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}
