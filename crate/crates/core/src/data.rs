//! Synthetic paired-modality data with planted class structure.
//!
//! Each class gets one anchor per modality, drawn independently, so the
//! image and text spaces share nothing but the class identity. Samples are
//! anchor plus isotropic Gaussian noise.
//!
//! # Dataset file layout
//!
//! ```text
//! offset  size  content
//! 0       12    magic  b"MTKD-DATASET"
//! 12      4     format version, u32 LE (currently 1)
//! 16      8     header length H, u64 LE
//! 24      H     JSON header: {"spec": SyntheticSpec, "rows", "image_dim", "text_dim"}
//! ...     8·M·image_dim   image matrix, f64 LE, row-major
//! ...     8·M·text_dim    text matrix, f64 LE, row-major
//! ...     8·M             labels, u64 LE
//! end-8   8     FNV-1a 64 checksum of every preceding byte, u64 LE
//! ```

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, DenseMatrix, SeededRng};

pub const DATASET_MAGIC: &[u8; 12] = b"MTKD-DATASET";
pub const DATASET_VERSION: u32 = 1;

/// Anchors closer than this cosine are redrawn.
const ANCHOR_MAX_COSINE: f64 = 0.99;
const PROBE_SAMPLES_PER_CLASS: usize = 50;
const PROBE_MIN_ACCURACY: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub raw_image_dim: usize,
    pub raw_text_dim: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub anchor_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            raw_image_dim: 32,
            raw_text_dim: 24,
            samples_per_class: 250,
            noise_sigma: 0.35,
            anchor_scale: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be at least 2".into()));
        }
        if self.raw_image_dim < 2 || self.raw_text_dim < 2 {
            return Err(Error::InvalidSpec("raw dimensions must be at least 2".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidSpec("samples_per_class must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidSpec("noise_sigma must be a nonnegative number".into()));
        }
        if !(self.anchor_scale > 0.0) || !self.anchor_scale.is_finite() {
            return Err(Error::InvalidSpec("anchor_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.num_classes * self.samples_per_class
    }
}

/// Per-class anchors for both modalities (N rows each).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAnchors {
    pub image: DenseMatrix,
    pub text: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub image_raw: DenseMatrix,
    pub text_raw: DenseMatrix,
    pub labels: Vec<usize>,
    pub spec: SyntheticSpec,
    anchors: ClassAnchors,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn anchors(&self) -> &ClassAnchors {
        &self.anchors
    }

    /// Per class, a seeded shuffle puts the first `⌊train_frac·n_c⌋` samples
    /// in the training split and the rest in the evaluation split.
    pub fn stratified_split(&self, train_frac: f64, seed: u64) -> Split {
        let mut rng = SeededRng::new(seed);
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for c in 0..self.num_classes() {
            let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            let perm = rng.permutation(idx.len());
            let n_train = (train_frac * idx.len() as f64).floor() as usize;
            for (pos, &p) in perm.iter().enumerate() {
                if pos < n_train {
                    train.push(idx[p]);
                } else {
                    eval.push(idx[p]);
                }
            }
        }
        train.sort_unstable();
        eval.sort_unstable();
        Split { train, eval }
    }

    pub fn subset(&self, idx: &[usize]) -> Batch {
        Batch {
            image: self.image_raw.select_rows(idx),
            text: self.text_raw.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Raw paired rows with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub image: DenseMatrix,
    pub text: DenseMatrix,
    pub labels: Vec<usize>,
}

fn draw_anchor_set(n: usize, dim: usize, scale: f64, rng: &mut SeededRng) -> DenseMatrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let v: Vec<f64> = (0..dim).map(|_| scale * rng.normal()).collect();
        let distinct = rows.iter().all(|r| {
            cosine_sim(r, &v).is_ok_and(|c| c <= ANCHOR_MAX_COSINE)
        });
        if distinct {
            rows.push(v);
        }
    }
    DenseMatrix::from_rows(&rows).expect("anchor rows share a dimension")
}

fn draw_anchors(spec: &SyntheticSpec, rng: &mut SeededRng) -> ClassAnchors {
    let image = draw_anchor_set(spec.num_classes, spec.raw_image_dim, spec.anchor_scale, rng);
    let text = draw_anchor_set(spec.num_classes, spec.raw_text_dim, spec.anchor_scale, rng);
    ClassAnchors { image, text }
}

/// The class anchors `generate(spec)` uses.
pub fn class_anchors(spec: &SyntheticSpec) -> Result<ClassAnchors> {
    spec.validate()?;
    Ok(draw_anchors(spec, &mut SeededRng::new(spec.seed)))
}

fn noisy_copy(anchor: &[f64], sigma: f64, rng: &mut SeededRng) -> Vec<f64> {
    anchor.iter().map(|a| a + sigma * rng.normal()).collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<PairedDataset> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let anchors = draw_anchors(spec, &mut rng);
    let m = spec.total_samples();
    let mut image = DenseMatrix::zeros(m, spec.raw_image_dim);
    let mut text = DenseMatrix::zeros(m, spec.raw_text_dim);
    let mut labels = Vec::with_capacity(m);
    let mut row = 0;
    for c in 0..spec.num_classes {
        for _ in 0..spec.samples_per_class {
            image
                .row_mut(row)
                .copy_from_slice(&noisy_copy(anchors.image.row(c), spec.noise_sigma, &mut rng));
            text.row_mut(row)
                .copy_from_slice(&noisy_copy(anchors.text.row(c), spec.noise_sigma, &mut rng));
            labels.push(c);
            row += 1;
        }
    }
    let ds = PairedDataset {
        image_raw: image,
        text_raw: text,
        labels,
        spec: spec.clone(),
        anchors,
    };
    if let Some(probe) = separability_probe(&ds)? {
        if probe.accuracy < PROBE_MIN_ACCURACY {
            return Err(Error::InvalidSpec(format!(
                "separability probe reached only {:.3} although noise is below a quarter of the anchor separation",
                probe.accuracy
            )));
        }
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub min_separation: f64,
}

/// Nearest-class-mean classifier on fresh held-out draws, per modality
/// (reported accuracy is the worse of the two).
///
/// Returns `None` when the noise is not below a quarter of the smallest
/// anchor separation, where no accuracy bound is promised.
pub fn separability_probe(ds: &PairedDataset) -> Result<Option<ProbeReport>> {
    let spec = &ds.spec;
    let sep_image = min_pairwise_distance(&ds.anchors.image);
    let sep_text = min_pairwise_distance(&ds.anchors.text);
    let min_separation = sep_image.min(sep_text);
    if spec.noise_sigma >= min_separation / 4.0 {
        return Ok(None);
    }
    let mut rng = SeededRng::new(spec.seed).fork(0x0050_524f_4245);
    let mut worst: f64 = 1.0;
    for (raw, anchors) in [
        (&ds.image_raw, &ds.anchors.image),
        (&ds.text_raw, &ds.anchors.text),
    ] {
        let means = class_means(raw, &ds.labels, spec.num_classes);
        let mut correct = 0usize;
        let mut total = 0usize;
        for c in 0..spec.num_classes {
            for _ in 0..PROBE_SAMPLES_PER_CLASS {
                let x = noisy_copy(anchors.row(c), spec.noise_sigma, &mut rng);
                if nearest_row(&means, &x) == c {
                    correct += 1;
                }
                total += 1;
            }
        }
        worst = worst.min(correct as f64 / total as f64);
    }
    Ok(Some(ProbeReport {
        accuracy: worst,
        min_separation,
    }))
}

fn min_pairwise_distance(m: &DenseMatrix) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..m.rows() {
        for j in i + 1..m.rows() {
            let d: f64 = m
                .row(i)
                .iter()
                .zip(m.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

fn class_means(raw: &DenseMatrix, labels: &[usize], n: usize) -> DenseMatrix {
    let mut means = DenseMatrix::zeros(n, raw.cols());
    let mut counts = vec![0usize; n];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (m, v) in means.row_mut(y).iter_mut().zip(raw.row(i)) {
            *m += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        let k = count.max(1) as f64;
        means.row_mut(c).iter_mut().for_each(|v| *v /= k);
    }
    means
}

fn nearest_row(m: &DenseMatrix, x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for r in 0..m.rows() {
        let d: f64 = m.row(r).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, r);
        }
    }
    best.1
}

/// Ways of producing a deviating teacher.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Corruption {
    /// Add `N(0, sigma²)` to every weight after pretraining.
    WeightNoise { sigma: f64 },
    /// Pretrain against a random permutation of the sample labels.
    LabelShuffle,
}

impl Corruption {
    pub fn shuffles_labels(&self) -> bool {
        matches!(self, Corruption::LabelShuffle)
    }
}

/// Applies weight noise; label shuffling leaves the parameters untouched
/// (the trainer honors it during pretraining).
pub fn corrupt_teacher(
    params: &EncoderParams,
    mode: &Corruption,
    rng: &mut SeededRng,
) -> EncoderParams {
    let mut out = params.clone();
    if let Corruption::WeightNoise { sigma } = *mode {
        if sigma > 0.0 {
            for l in 0..out.num_layers() {
                for w in out.weights_mut(l) {
                    *w += sigma * rng.normal();
                }
            }
        }
    }
    out
}

/// One teacher's cached, unit-norm class text vectors (N×d).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTextBank {
    vectors: DenseMatrix,
}

impl ClassTextBank {
    pub fn from_vectors(vectors: DenseMatrix) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(Error::EmptyBank);
        }
        if !vectors.rows_unit_norm(1e-9) {
            return Err(Error::NotADistribution("class bank rows must be unit norm".into()));
        }
        Ok(Self { vectors })
    }

    pub fn vectors(&self) -> &DenseMatrix {
        &self.vectors
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.rows()
    }
}

/// Encodes every class text anchor once with a frozen text encoder.
pub fn build_class_bank(text_encoder: &EncoderParams, anchors: &ClassAnchors) -> Result<ClassTextBank> {
    let mut rng = SeededRng::new(0);
    let (features, _) = encode(text_encoder, &anchors.text, false, &mut rng)?;
    ClassTextBank::from_vectors(features)
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    spec: SyntheticSpec,
    rows: usize,
    image_dim: usize,
    text_dim: usize,
}

pub fn encode_dataset(ds: &PairedDataset) -> Vec<u8> {
    let header = DatasetHeader {
        spec: ds.spec.clone(),
        rows: ds.len(),
        image_dim: ds.image_raw.cols(),
        text_dim: ds.text_raw.cols(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(
        32 + json.len() + 8 * (ds.image_raw.data().len() + ds.text_raw.data().len() + ds.len()),
    );
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in ds.image_raw.data().iter().chain(ds.text_raw.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.labels {
        out.extend_from_slice(&(y as u64).to_le_bytes());
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<PairedDataset> {
    if bytes.len() >= DATASET_MAGIC.len() && &bytes[..DATASET_MAGIC.len()] != DATASET_MAGIC {
        return Err(Error::FormatVersionMismatch("bad magic bytes".into()));
    }
    if bytes.len() < 32 {
        return Err(Error::ChecksumMismatch);
    }
    let version = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(Error::FormatVersionMismatch(format!("version {version}")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if checksum(body) != stored {
        return Err(Error::ChecksumMismatch);
    }

    let header_len = u64::from_le_bytes(body[16..24].try_into().expect("8 bytes")) as usize;
    let header_end = 24usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Malformed("header length exceeds file".into()))?;
    let header: DatasetHeader = serde_json::from_slice(&body[24..header_end])
        .map_err(|e| Error::Malformed(format!("dataset header: {e}")))?;
    header.spec.validate()?;
    let (m, di, dt) = (header.rows, header.image_dim, header.text_dim);
    let payload = &body[header_end..];
    if payload.len() != 8 * (m * di + m * dt + m) {
        return Err(Error::Malformed("payload length disagrees with header".into()));
    }
    let mut words = payload.chunks_exact(8).map(|c| c.try_into().expect("8 bytes"));
    let image: Vec<f64> = words.by_ref().take(m * di).map(f64::from_le_bytes).collect();
    let text: Vec<f64> = words.by_ref().take(m * dt).map(f64::from_le_bytes).collect();
    let labels: Vec<usize> = words.map(|w| u64::from_le_bytes(w) as usize).collect();
    if labels.iter().any(|&y| y >= header.spec.num_classes) {
        return Err(Error::Malformed("label out of range".into()));
    }
    let anchors = class_anchors(&header.spec)?;
    Ok(PairedDataset {
        image_raw: DenseMatrix::from_vec(m, di, image)?,
        text_raw: DenseMatrix::from_vec(m, dt, text)?,
        labels,
        spec: header.spec,
        anchors,
    })
}

pub fn save_dataset(ds: &PairedDataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<PairedDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
