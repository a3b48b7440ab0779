//! Two-stage training: contrastive teacher pretraining, then student
//! distillation under a teacher-weighting strategy.
//!
//! Random streams are forked from one root per run so that each consumer
//! (initialization, shuffling, dropout, augmentation, projection) draws the
//! same values regardless of which other consumers are active.

use std::f64::consts::PI;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::contrastive::{
    classify, clip_loss, clip_loss_soft, image_to_text_probs, one_hot_targets,
    text_to_image_probs, ContrastiveBatch,
};
use crate::data::{
    build_class_bank, corrupt_teacher, Batch, ClassTextBank, Corruption, PairedDataset, Split,
};
use crate::distill::{
    kl_pair_loss, mse_align, total_loss, weighted_features, FeatureProjection, KlPairLoss,
    KlWeighting, LossBreakdown, LossParts, LossRatios, MseAlign, MseTarget, TeacherOutputs,
};
use crate::encoder::{
    adam_step, backward, backward_multi, encode, init_params, Activation, AdamState,
    EncoderConfig, EncoderParams, ForwardTape,
};
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, SeededRng};
use crate::weighting::{
    certify_pareto_stationarity, dsw_weights, lsr_weights, teacher_label_similarity_soft,
    LsrWeights, SimilarityScores, SimplexWeights, Strategy, TeacherGradientSet,
};

/// Minimum eval accuracy expected of an uncorrupted teacher.
pub const TEACHER_GATE: f64 = 0.95;
/// Tolerance for the per-step Pareto certificate.
pub const CERTIFICATE_TOL: f64 = 1e-6;

const STREAM_IMAGE_INIT: u64 = 1;
const STREAM_TEXT_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_AUGMENT: u64 = 5;
const STREAM_PROJECTION: u64 = 6;
const STREAM_LABELS: u64 = 7;
const STREAM_CORRUPT_IMAGE: u64 = 8;
const STREAM_CORRUPT_TEXT: u64 = 9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Fixed,
    /// Cosine decay from `lr` at step 0 to `eta_min` (default `lr / 100`) at the last step.
    Cosine {
        #[serde(default)]
        eta_min: Option<f64>,
    },
}

impl LrSchedule {
    pub fn label(&self) -> &'static str {
        match self {
            LrSchedule::Fixed => "fixed",
            LrSchedule::Cosine { .. } => "cosine",
        }
    }
}

/// Learning rate at step `t` of `total`; `t` is clamped to `total`.
pub fn lr_at(lr: f64, schedule: &LrSchedule, t: usize, total: usize) -> f64 {
    match *schedule {
        LrSchedule::Fixed => lr,
        LrSchedule::Cosine { eta_min } => {
            if total == 0 {
                return lr;
            }
            let eta_min = eta_min.unwrap_or(lr / 100.0);
            let frac = t.min(total) as f64 / total as f64;
            eta_min + 0.5 * (lr - eta_min) * (1.0 + (PI * frac).cos())
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    None,
    /// Additive Gaussian noise on both raw modalities.
    Jitter { sigma: f64 },
    /// Convex combination with a random in-batch partner, coefficient `~ Beta(beta, beta)`.
    Mixup { beta: f64 },
}

impl Augmentation {
    fn validate(&self) -> Result<()> {
        match *self {
            Augmentation::None => Ok(()),
            Augmentation::Jitter { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            Augmentation::Jitter { .. } => {
                Err(Error::config("augmentation.sigma", "must be a nonnegative number"))
            }
            Augmentation::Mixup { beta } if beta > 0.0 && beta.is_finite() => Ok(()),
            Augmentation::Mixup { .. } => Err(Error::config("augmentation.beta", "must be positive")),
        }
    }
}

/// Raw batch after augmentation, with soft targets over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub image: DenseMatrix,
    pub text: DenseMatrix,
    /// B×N target distributions (one-hot unless mixed).
    pub targets: DenseMatrix,
    /// Labels of the unmixed rows.
    pub labels: Vec<usize>,
}

pub fn augment(
    batch: &Batch,
    num_classes: usize,
    mode: &Augmentation,
    rng: &mut SeededRng,
) -> Result<AugmentedBatch> {
    match *mode {
        Augmentation::None => plain(batch, num_classes),
        Augmentation::Jitter { sigma } => {
            let mut out = plain(batch, num_classes)?;
            if sigma > 0.0 {
                for v in out.image.data_mut().iter_mut().chain(out.text.data_mut()) {
                    *v += sigma * rng.normal();
                }
            }
            Ok(out)
        }
        Augmentation::Mixup { beta } => {
            let coeff = rng.beta(beta, beta);
            let perm = rng.permutation(batch.labels.len());
            mix_pairs(batch, num_classes, &perm, coeff)
        }
    }
}

fn plain(batch: &Batch, num_classes: usize) -> Result<AugmentedBatch> {
    Ok(AugmentedBatch {
        image: batch.image.clone(),
        text: batch.text.clone(),
        targets: one_hot_targets(&batch.labels, num_classes)?,
        labels: batch.labels.clone(),
    })
}

/// Row `i` becomes `coeff·x_i + (1 − coeff)·x_{partner[i]}` in both
/// modalities and in the targets.
pub fn mix_pairs(
    batch: &Batch,
    num_classes: usize,
    partner: &[usize],
    coeff: f64,
) -> Result<AugmentedBatch> {
    let b = batch.labels.len();
    if partner.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            actual: partner.len(),
        });
    }
    if !(0.0..=1.0).contains(&coeff) {
        return Err(Error::config("mixup coefficient", "must lie in [0, 1]"));
    }
    let hard = one_hot_targets(&batch.labels, num_classes)?;
    let mix = |m: &DenseMatrix| {
        let mut out = m.clone();
        for (i, &j) in partner.iter().enumerate() {
            let other = m.row(j).to_vec();
            for (o, x) in out.row_mut(i).iter_mut().zip(other) {
                *o = coeff * *o + (1.0 - coeff) * x;
            }
        }
        out
    };
    Ok(AugmentedBatch {
        image: mix(&batch.image),
        text: mix(&batch.text),
        targets: mix(&hard),
        labels: batch.labels.clone(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub recall1: f64,
    pub recall5: f64,
}

/// Classifies every row of `batch.image` against `bank`.
///
/// The rank of the true class counts strictly better classes plus tied
/// classes of lower index, matching the tie rule of `classify`.
pub fn evaluate(
    image_encoder: &EncoderParams,
    batch: &Batch,
    bank: &ClassTextBank,
) -> Result<EvalMetrics> {
    let b = batch.labels.len();
    if b == 0 {
        return Ok(EvalMetrics::default());
    }
    let (u, _) = encode(image_encoder, &batch.image, false, &mut SeededRng::new(0))?;
    let vectors = bank.vectors();
    let predicted = classify(&u, vectors, 1.0)?;
    let logits = u.matmul(&vectors.transpose())?;
    let (mut correct, mut r1, mut r5) = (0usize, 0usize, 0usize);
    for (i, &y) in batch.labels.iter().enumerate() {
        if y >= vectors.rows() {
            return Err(Error::LabelOutOfRange {
                label: y,
                candidates: vectors.rows(),
            });
        }
        if predicted.labels[i] == y {
            correct += 1;
        }
        let row = logits.row(i);
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(c, &s)| s > row[y] || (s == row[y] && c < y))
            .count();
        r1 += usize::from(rank < 1);
        r5 += usize::from(rank < 5);
    }
    let n = b as f64;
    Ok(EvalMetrics {
        accuracy: correct as f64 / n,
        recall1: r1 as f64 / n,
        recall5: r5 as f64 / n,
    })
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive, got {v}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub batch_size: usize,
    /// Std of the Gaussian jitter added to raw inputs (and to the class
    /// anchors fed to the text encoder) during pretraining.
    pub noise_exposure: f64,
    pub seed: u64,
    #[serde(default)]
    pub corruption: Option<Corruption>,
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        positive("teacher.lr", self.lr)?;
        positive("teacher.tau", self.tau)?;
        if self.batch_size == 0 {
            return Err(Error::config("teacher.batch_size", "must be at least 1"));
        }
        if self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::config("teacher.widths", "layer widths must be positive"));
        }
        if !(self.noise_exposure >= 0.0) || !self.noise_exposure.is_finite() {
            return Err(Error::config("teacher.noise_exposure", "must be a nonnegative number"));
        }
        if let Some(Corruption::WeightNoise { sigma }) = self.corruption {
            if !(sigma >= 0.0) || !sigma.is_finite() {
                return Err(Error::config("teacher.corruption.sigma", "must be a nonnegative number"));
            }
        }
        Ok(())
    }

    pub fn display_name(&self, index: usize) -> String {
        self.name.clone().unwrap_or_else(|| format!("teacher{index}"))
    }
}

/// Heterogeneous teachers differing in width, depth, seed, and noise
/// exposure. All share `output_dim` 32.
pub fn default_teacher_lineup(k: usize) -> Vec<TeacherConfig> {
    let variants: [(&[usize], f64, u64); 4] = [
        (&[64], 0.35, 101),
        (&[96], 0.30, 202),
        (&[48, 48], 0.45, 303),
        (&[128], 0.25, 404),
    ];
    (0..k)
        .map(|i| {
            let (widths, noise, seed) = variants[i % variants.len()];
            TeacherConfig {
                name: Some(format!("teacher{i}")),
                hidden_widths: widths.to_vec(),
                output_dim: 32,
                activation: Activation::Relu,
                epochs: 30,
                lr: 1e-3,
                tau: 0.1,
                batch_size: 64,
                noise_exposure: noise,
                seed: seed + (i / variants.len()) as u64 * 1000,
                corruption: None,
            }
        })
        .collect()
}

/// A frozen teacher: both encoders plus its cached class bank.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub name: String,
    pub image: EncoderParams,
    pub text: EncoderParams,
    pub bank: ClassTextBank,
    pub eval: EvalMetrics,
    pub corrupted: bool,
}

impl Teacher {
    /// Wraps already-trained encoders, building the bank from the dataset's
    /// class anchors.
    pub fn from_params(
        name: impl Into<String>,
        image: EncoderParams,
        text: EncoderParams,
        dataset: &PairedDataset,
        split: &Split,
    ) -> Result<Self> {
        if image.config().output_dim != text.config().output_dim {
            return Err(Error::DimensionMismatch {
                expected: image.config().output_dim,
                actual: text.config().output_dim,
            });
        }
        let bank = build_class_bank(&text, dataset.anchors())?;
        let eval = evaluate(&image, &dataset.subset(&split.eval), &bank)?;
        Ok(Self {
            name: name.into(),
            image,
            text,
            bank,
            eval,
            corrupted: false,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.image.config().output_dim
    }

    /// Set when an uncorrupted teacher misses [`TEACHER_GATE`].
    pub fn below_gate(&self) -> bool {
        !self.corrupted && self.eval.accuracy < TEACHER_GATE
    }

    pub fn checksum(&self) -> u64 {
        self.image.checksum() ^ self.text.checksum().rotate_left(1)
    }

    fn outputs(&self, image: &DenseMatrix, text: &DenseMatrix, tau: f64) -> Result<TeacherOutputs> {
        let mut rng = SeededRng::new(0);
        let (u, _) = encode(&self.image, image, false, &mut rng)?;
        let (w, _) = encode(&self.text, text, false, &mut rng)?;
        TeacherOutputs::from_features(u, w, tau)
    }
}

/// Trains one teacher with the class-bank contrastive loss, then applies
/// its corruption (if any) and freezes it.
///
/// Every batch re-encodes the (jittered) class anchors with the current
/// text encoder, so the bank gradient is exact.
pub fn pretrain_teacher(
    dataset: &PairedDataset,
    split: &Split,
    cfg: &TeacherConfig,
    index: usize,
) -> Result<Teacher> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let image_cfg = EncoderConfig::new(dataset.image_raw.cols(), cfg.hidden_widths.clone(), cfg.output_dim)
        .with_activation(cfg.activation);
    let text_cfg = EncoderConfig::new(dataset.text_raw.cols(), cfg.hidden_widths.clone(), cfg.output_dim)
        .with_activation(cfg.activation);
    let mut image = init_params(&image_cfg, &mut root.fork(STREAM_IMAGE_INIT))?;
    let mut text = init_params(&text_cfg, &mut root.fork(STREAM_TEXT_INIT))?;
    let mut shuffle = root.fork(STREAM_SHUFFLE);
    let mut noise = root.fork(STREAM_AUGMENT);
    let mut dropout = root.fork(STREAM_DROPOUT);

    let mut labels: Vec<usize> = split.train.iter().map(|&i| dataset.labels[i]).collect();
    if cfg.corruption.is_some_and(|c| c.shuffles_labels()) {
        let perm = root.fork(STREAM_LABELS).permutation(labels.len());
        labels = perm.iter().map(|&p| labels[p]).collect();
    }

    let anchors = &dataset.anchors().text;
    let mut adam_i = AdamState::for_params(&image, cfg.lr);
    let mut adam_t = AdamState::for_params(&text, cfg.lr);
    let n = split.train.len();
    for _ in 0..cfg.epochs {
        let order = shuffle.permutation(n);
        for chunk in order.chunks(cfg.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&p| split.train[p]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&p| labels[p]).collect();
            let mut x = dataset.image_raw.select_rows(&idx);
            let mut bank_in = anchors.clone();
            if cfg.noise_exposure > 0.0 {
                for v in x.data_mut().iter_mut().chain(bank_in.data_mut()) {
                    *v += cfg.noise_exposure * noise.normal();
                }
            }
            let (u, mut tu) = encode(&image, &x, true, &mut dropout)?;
            let (bank, mut tb) = encode(&text, &bank_in, true, &mut dropout)?;
            let loss = clip_loss(&ContrastiveBatch::new(&u, &bank, cfg.tau)?, &batch_labels)?;
            if !loss.value.is_finite() {
                return Err(Error::NonFinite("teacher pretraining loss"));
            }
            let (gi, _) = backward(&mut tu, &loss.grad_u)?;
            let (gt, _) = backward(&mut tb, &loss.grad_w)?;
            adam_step(&mut image, &gi, &mut adam_i)?;
            adam_step(&mut text, &gt, &mut adam_t)?;
        }
    }

    freeze_teacher(cfg.display_name(index), image, text, cfg.corruption.as_ref(), cfg.seed, dataset, split)
}

/// Applies `corruption` (weight noise drawn from `seed`) to trained encoders
/// and wraps them as a frozen teacher.
pub fn freeze_teacher(
    name: impl Into<String>,
    mut image: EncoderParams,
    mut text: EncoderParams,
    corruption: Option<&Corruption>,
    seed: u64,
    dataset: &PairedDataset,
    split: &Split,
) -> Result<Teacher> {
    let root = SeededRng::new(seed);
    if let Some(c) = corruption {
        image = corrupt_teacher(&image, c, &mut root.fork(STREAM_CORRUPT_IMAGE));
        text = corrupt_teacher(&text, c, &mut root.fork(STREAM_CORRUPT_TEXT));
    }
    let mut teacher = Teacher::from_params(name, image, text, dataset, split)?;
    teacher.corrupted = corruption.is_some();
    Ok(teacher)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub dropout_p: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![8],
            output_dim: 32,
            activation: Activation::Tanh,
            dropout_p: 0.0,
        }
    }
}

impl StudentConfig {
    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig::new(input_dim, self.hidden_widths.clone(), self.output_dim)
            .with_activation(self.activation)
            .with_dropout(self.dropout_p)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config(2).validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Student {
    pub image: EncoderParams,
    pub text: EncoderParams,
}

impl Student {
    pub fn init(cfg: &StudentConfig, dataset: &PairedDataset, seed: u64) -> Result<Self> {
        let root = SeededRng::new(seed);
        Ok(Self {
            image: init_params(
                &cfg.encoder_config(dataset.image_raw.cols()),
                &mut root.fork(STREAM_IMAGE_INIT),
            )?,
            text: init_params(
                &cfg.encoder_config(dataset.text_raw.cols()),
                &mut root.fork(STREAM_TEXT_INIT),
            )?,
        })
    }

    pub fn class_bank(&self, dataset: &PairedDataset) -> Result<ClassTextBank> {
        build_class_bank(&self.text, dataset.anchors())
    }
}

/// How often the student's class bank is re-encoded during distillation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankRefresh {
    /// Once per epoch; gradients flow through the epoch's cached forward pass.
    #[default]
    PerEpoch,
    /// Before every batch (exact gradients).
    PerBatch,
}

/// Which class bank evaluation classifies against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum EvalBank {
    /// Class anchors encoded by the student's own text encoder.
    #[default]
    Student,
    /// The cached bank of one teacher.
    Teacher { index: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Softens teacher in-batch distributions.
    pub tau_teacher: f64,
    /// Softens student in-batch distributions in the KL term.
    pub tau_student: f64,
    /// Temperature of the student's class-bank contrastive loss.
    pub tau_distill: f64,
    pub loss_ratios: LossRatios,
    pub strategy: Strategy,
    pub num_teachers: usize,
    pub augmentation: Augmentation,
    pub seed: u64,
    pub kl_weighting: KlWeighting,
    pub mse_target: MseTarget,
    pub bank_refresh: BankRefresh,
    pub eval_bank: EvalBank,
    pub parallel_teachers: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr: 1e-4,
            lr_schedule: LrSchedule::Fixed,
            tau_teacher: 4.0,
            tau_student: 4.0,
            tau_distill: 4.0,
            loss_ratios: LossRatios::default(),
            strategy: Strategy::Avg,
            num_teachers: 2,
            augmentation: Augmentation::None,
            seed: 0,
            kl_weighting: KlWeighting::PerTeacher,
            mse_target: MseTarget::WeightedAverage,
            bank_refresh: BankRefresh::PerEpoch,
            eval_bank: EvalBank::Student,
            parallel_teachers: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        positive("lr", self.lr)?;
        positive("tau_teacher", self.tau_teacher)?;
        positive("tau_student", self.tau_student)?;
        positive("tau_distill", self.tau_distill)?;
        self.loss_ratios.validate().map_err(|e| match e {
            Error::NonPositiveRatio { name, value } => Error::config(
                format!("loss_ratios.{name}"),
                format!("must be positive, got {value}"),
            ),
            other => other,
        })?;
        if let LrSchedule::Cosine { eta_min: Some(e) } = self.lr_schedule {
            if !(0.0..=self.lr).contains(&e) {
                return Err(Error::config("lr_schedule.eta_min", "must lie in [0, lr]"));
            }
        }
        self.augmentation.validate()?;
        if self.strategy.distills() && self.num_teachers == 0 {
            return Err(Error::StrategyTeacherMismatch {
                strategy: self.strategy.to_string(),
                teachers: 0,
                expected: 1,
            });
        }
        if self.kl_weighting == KlWeighting::PerDirection && self.strategy == Strategy::Lsr {
            return Err(Error::config(
                "kl_weighting",
                "per_direction weighting has no per-teacher similarity scores for lsr",
            ));
        }
        if let EvalBank::Teacher { index } = self.eval_bank {
            if index >= self.num_teachers {
                return Err(Error::config("eval_bank.index", "no such teacher"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_clip: f64,
    /// Weighted (not γ-scaled) KL term; zero without distillation.
    pub l_kl: f64,
    pub l_mse: f64,
    pub total: f64,
    #[serde(skip)]
    pub breakdown: Option<LossBreakdown>,
    pub weights: Option<SimplexWeights>,
    pub lsr_weights: Option<LsrWeights>,
    pub fw_iterations: Option<usize>,
    pub fw_converged: Option<bool>,
    /// Pareto certificate of the dsw weights, checked when the solver converged.
    pub certified: Option<bool>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub l_clip: f64,
    pub l_kl: f64,
    pub l_mse: f64,
    pub total: f64,
    pub eval: EvalMetrics,
    /// Mean teacher weights over the epoch's steps; empty without distillation.
    pub alpha: Vec<f64>,
    /// Mean lsr weights over the epoch, logged alongside dsw.
    pub lsr_alpha: Vec<f64>,
    /// Mean Frank-Wolfe iterations per step.
    pub fw_iters: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub initial_eval: EvalMetrics,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub teacher_checksums: Vec<u64>,
}

impl RunMetrics {
    pub fn final_eval(&self) -> EvalMetrics {
        self.epochs.last().map_or(self.initial_eval, |e| e.eval)
    }
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: Student,
    pub metrics: RunMetrics,
}

fn teacher_outputs(
    teachers: &[Teacher],
    image: &DenseMatrix,
    text: &DenseMatrix,
    tau: f64,
    parallel: bool,
) -> Result<Vec<TeacherOutputs>> {
    if parallel && teachers.len() > 1 {
        thread::scope(|s| {
            let handles: Vec<_> = teachers
                .iter()
                .map(|t| s.spawn(move || t.outputs(image, text, tau)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("teacher forward thread panicked"))
                .collect()
        })
    } else {
        teachers.iter().map(|t| t.outputs(image, text, tau)).collect()
    }
}

fn flatten(image: &EncoderParams, text: &EncoderParams) -> Vec<f64> {
    let mut v = Vec::with_capacity(image.len() + text.len());
    v.extend_from_slice(image.as_slice());
    v.extend_from_slice(text.as_slice());
    v
}

struct Distiller<'a> {
    cfg: &'a TrainConfig,
    teachers: &'a [Teacher],
    projection: Option<FeatureProjection>,
    student: Student,
    adam_image: AdamState,
    adam_text: AdamState,
    dropout: SeededRng,
}

struct StudentBank {
    features: DenseMatrix,
    tape: ForwardTape,
}

impl Distiller<'_> {
    fn encode_bank(&mut self, anchors: &DenseMatrix) -> Result<StudentBank> {
        let (features, tape) = encode(&self.student.text, anchors, false, &mut self.dropout)?;
        Ok(StudentBank { features, tape })
    }

    fn step(&mut self, batch: &AugmentedBatch, bank: &StudentBank, lr: f64) -> Result<StepRecord> {
        let cfg = self.cfg;
        let ratios = cfg.loss_ratios;
        let (u, mut tape_u) = encode(&self.student.image, &batch.image, true, &mut self.dropout)?;
        let (w, mut tape_w) = encode(&self.student.text, &batch.text, true, &mut self.dropout)?;

        let clip = clip_loss_soft(
            &ContrastiveBatch::new(&u, &bank.features, cfg.tau_distill)?,
            &batch.targets,
        )?;
        let mut grad_u = clip.grad_u.scaled(ratios.clip);
        let mut grad_w = DenseMatrix::zeros(w.rows(), w.cols());
        let grad_bank = clip.grad_w.scaled(ratios.clip);

        let mut record = StepRecord {
            epoch: 0,
            step: 0,
            l_clip: clip.value,
            l_kl: 0.0,
            l_mse: 0.0,
            total: ratios.clip * clip.value,
            breakdown: None,
            weights: None,
            lsr_weights: None,
            fw_iterations: None,
            fw_converged: None,
            certified: None,
            lr,
        };

        if cfg.strategy.distills() {
            let outs = teacher_outputs(
                self.teachers,
                &batch.image,
                &batch.text,
                cfg.tau_teacher,
                cfg.parallel_teachers,
            )?;
            let sb = ContrastiveBatch::new(&u, &w, cfg.tau_student)?;
            let s_i2t = image_to_text_probs(&sb)?;
            let s_t2i = text_to_image_probs(&sb)?;
            let kls: Vec<KlPairLoss> = outs
                .iter()
                .map(|t| kl_pair_loss(t, &s_i2t, &s_t2i, cfg.tau_student))
                .collect::<Result<_>>()?;
            let k = kls.len();

            // One (grad_u, grad_w, value) per weighted KL objective.
            let objectives: Vec<(DenseMatrix, DenseMatrix, f64)> = match cfg.kl_weighting {
                KlWeighting::PerTeacher => kls
                    .iter()
                    .map(|kl| kl.feature_grads(&u, &w, 1.0, 1.0).map(|(a, b)| (a, b, kl.total())))
                    .collect::<Result<_>>()?,
                KlWeighting::PerDirection => {
                    let inv = 1.0 / k as f64;
                    let mut dirs = Vec::with_capacity(2);
                    for (wi, wt) in [(inv, 0.0), (0.0, inv)] {
                        let mut gu = DenseMatrix::zeros(u.rows(), u.cols());
                        let mut gw = DenseMatrix::zeros(w.rows(), w.cols());
                        let mut value = 0.0;
                        for kl in &kls {
                            let (a, b) = kl.feature_grads(&u, &w, wi, wt)?;
                            gu.add_scaled(&a, 1.0)?;
                            gw.add_scaled(&b, 1.0)?;
                            value += wi * kl.i2t + wt * kl.t2i;
                        }
                        dirs.push((gu, gw, value));
                    }
                    dirs
                }
            };

            let lsr = if cfg.kl_weighting == KlWeighting::PerTeacher {
                let scores = self
                    .teachers
                    .iter()
                    .zip(&outs)
                    .map(|(t, o)| teacher_label_similarity_soft(&o.image, &batch.targets, t.bank.vectors()))
                    .collect::<Result<Vec<f64>>>()?;
                Some(lsr_weights(&SimilarityScores::new(scores)?)?)
            } else {
                None
            };

            let weights = match cfg.strategy {
                Strategy::Avg => SimplexWeights::uniform(objectives.len()),
                Strategy::Lsr => lsr.as_ref().expect("validated: lsr needs per-teacher weighting").weights.clone(),
                Strategy::Dsw => {
                    let mut probe_u = tape_u.clone();
                    let mut probe_w = tape_w.clone();
                    let gus: Vec<DenseMatrix> = objectives.iter().map(|o| o.0.clone()).collect();
                    let gws: Vec<DenseMatrix> = objectives.iter().map(|o| o.1.clone()).collect();
                    let pu = backward_multi(&mut probe_u, &gus)?;
                    let pw = backward_multi(&mut probe_w, &gws)?;
                    let grads: Vec<Vec<f64>> =
                        pu.iter().zip(&pw).map(|((gi, _), (gt, _))| flatten(gi, gt)).collect();
                    let set = TeacherGradientSet::new(grads, objectives.iter().map(|o| o.2).collect())?;
                    let fw = dsw_weights(&set)?;
                    record.fw_iterations = Some(fw.iterations);
                    record.fw_converged = Some(fw.converged);
                    if fw.converged {
                        record.certified = Some(certify_pareto_stationarity(&fw.d, &set, CERTIFICATE_TOL).passes);
                    }
                    fw.weights
                }
                Strategy::Base => unreachable!("base does not distill"),
            };

            // Summed apart from the other terms so duplicated teachers reproduce a single one exactly.
            let mut kl_u = DenseMatrix::zeros(u.rows(), u.cols());
            let mut kl_w = DenseMatrix::zeros(w.rows(), w.cols());
            for ((gu, gw, _), &a) in objectives.iter().zip(weights.as_slice()) {
                kl_u.add_scaled(gu, a)?;
                kl_w.add_scaled(gw, a)?;
            }
            grad_u.add_scaled(&kl_u, ratios.kl)?;
            grad_w.add_scaled(&kl_w, ratios.kl)?;

            let mse_weights = match cfg.kl_weighting {
                KlWeighting::PerTeacher => weights.clone(),
                KlWeighting::PerDirection => SimplexWeights::uniform(k),
            };
            let mse = self.mse(&outs, &u, &w, &mse_weights)?;
            grad_u.add_scaled(&mse.grad_u, ratios.mse)?;
            grad_w.add_scaled(&mse.grad_w, ratios.mse)?;

            let breakdown = total_loss(
                LossParts {
                    l_clip: clip.value,
                    l_kl_i2t: kls.iter().map(|kl| kl.i2t).collect(),
                    l_kl_t2i: kls.iter().map(|kl| kl.t2i).collect(),
                    l_mse: mse.value,
                },
                ratios,
                &weights,
                cfg.kl_weighting,
            )?;
            record.l_kl = breakdown.kl_term();
            record.l_mse = breakdown.l_mse;
            record.total = breakdown.total;
            record.breakdown = Some(breakdown);
            record.weights = Some(weights);
            record.lsr_weights = lsr;
        }

        if !record.total.is_finite() {
            return Err(Error::NonFinite("distillation loss"));
        }
        let (gi, _) = backward(&mut tape_u, &grad_u)?;
        let (mut gt, _) = backward(&mut tape_w, &grad_w)?;
        let mut bank_tape = bank.tape.clone();
        let (gb, _) = backward(&mut bank_tape, &grad_bank)?;
        gt.add_scaled(&gb, 1.0)?;
        if !gi.is_finite() || !gt.is_finite() {
            return Err(Error::NonFinite("student gradient"));
        }
        self.adam_image.lr = lr;
        self.adam_text.lr = lr;
        adam_step(&mut self.student.image, &gi, &mut self.adam_image)?;
        adam_step(&mut self.student.text, &gt, &mut self.adam_text)?;
        Ok(record)
    }

    /// MSE against λ-weighted teacher features, with gradients w.r.t. the
    /// unprojected student features.
    fn mse(
        &self,
        outs: &[TeacherOutputs],
        u: &DenseMatrix,
        w: &DenseMatrix,
        weights: &SimplexWeights,
    ) -> Result<MseAlign> {
        let (su, sw) = match &self.projection {
            Some(p) => (p.apply(u)?, p.apply(w)?),
            None => (u.clone(), w.clone()),
        };
        let mut m = match self.cfg.mse_target {
            MseTarget::WeightedAverage => {
                let tu = weighted_features(&outs.iter().map(|o| &o.image).collect::<Vec<_>>(), weights)?;
                let tw = weighted_features(&outs.iter().map(|o| &o.text).collect::<Vec<_>>(), weights)?;
                mse_align(&tu, &su, &tw, &sw)?
            }
            MseTarget::PerTeacher => {
                let mut acc = MseAlign {
                    value: 0.0,
                    image: 0.0,
                    text: 0.0,
                    grad_u: DenseMatrix::zeros(su.rows(), su.cols()),
                    grad_w: DenseMatrix::zeros(sw.rows(), sw.cols()),
                };
                for (o, &a) in outs.iter().zip(weights.as_slice()) {
                    let m = mse_align(&o.image, &su, &o.text, &sw)?;
                    acc.value += a * m.value;
                    acc.image += a * m.image;
                    acc.text += a * m.text;
                    acc.grad_u.add_scaled(&m.grad_u, a)?;
                    acc.grad_w.add_scaled(&m.grad_w, a)?;
                }
                acc
            }
        };
        if let Some(p) = &self.projection {
            m.grad_u = p.backprop(&m.grad_u)?;
            m.grad_w = p.backprop(&m.grad_w)?;
        }
        Ok(m)
    }
}

fn check_teachers(cfg: &TrainConfig, student_cfg: &StudentConfig, teachers: &[Teacher]) -> Result<()> {
    let mismatch = || Error::StrategyTeacherMismatch {
        strategy: cfg.strategy.to_string(),
        teachers: teachers.len(),
        expected: cfg.num_teachers,
    };
    if teachers.len() != cfg.num_teachers || (cfg.strategy.distills() && teachers.is_empty()) {
        return Err(mismatch());
    }
    if let Some(first) = teachers.first() {
        if let Some(t) = teachers.iter().find(|t| t.output_dim() != first.output_dim()) {
            return Err(Error::config(
                "teachers",
                format!(
                    "all teachers must share an output width ({} has {}, expected {})",
                    t.name,
                    t.output_dim(),
                    first.output_dim()
                ),
            ));
        }
    }
    if let EvalBank::Teacher { index } = cfg.eval_bank {
        if teachers[index].output_dim() != student_cfg.output_dim {
            return Err(Error::config(
                "eval_bank",
                "a teacher bank needs the student's output width",
            ));
        }
    }
    Ok(())
}

/// Trains a fresh student from `cfg.seed` against frozen `teachers`.
pub fn distill_student(
    cfg: &TrainConfig,
    student_cfg: &StudentConfig,
    teachers: &[Teacher],
    dataset: &PairedDataset,
    split: &Split,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    student_cfg.validate()?;
    check_teachers(cfg, student_cfg, teachers)?;
    if split.train.is_empty() {
        return Err(Error::config("split", "training split is empty"));
    }
    let root = SeededRng::new(cfg.seed);
    let student = Student::init(student_cfg, dataset, cfg.seed)?;
    let projection = match teachers.first() {
        Some(t) if cfg.strategy.distills() && t.output_dim() != student_cfg.output_dim => Some(
            FeatureProjection::random(
                student_cfg.output_dim,
                t.output_dim(),
                &mut root.fork(STREAM_PROJECTION),
            ),
        ),
        _ => None,
    };
    let teacher_checksums: Vec<u64> = teachers.iter().map(Teacher::checksum).collect();
    let mut shuffle = root.fork(STREAM_SHUFFLE);
    let mut aug_rng = root.fork(STREAM_AUGMENT);
    let eval_batch = dataset.subset(&split.eval);
    let anchors = &dataset.anchors().text;
    let num_classes = dataset.num_classes();

    let mut d = Distiller {
        cfg,
        teachers,
        projection,
        adam_image: AdamState::for_params(&student.image, cfg.lr),
        adam_text: AdamState::for_params(&student.text, cfg.lr),
        student,
        dropout: root.fork(STREAM_DROPOUT),
    };

    let eval_bank = |d: &Distiller<'_>| -> Result<ClassTextBank> {
        match cfg.eval_bank {
            EvalBank::Student => d.student.class_bank(dataset),
            EvalBank::Teacher { index } => Ok(teachers[index].bank.clone()),
        }
    };
    let initial_eval = evaluate(&d.student.image, &eval_batch, &eval_bank(&d)?)?;

    let n = split.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * per_epoch;
    let mut steps = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut t = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let order = shuffle.permutation(n);
        let mut bank = d.encode_bank(anchors)?;
        let first = steps.len();
        for chunk in order.chunks(cfg.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&p| split.train[p]).collect();
            let batch = augment(&dataset.subset(&idx), num_classes, &cfg.augmentation, &mut aug_rng)?;
            if cfg.bank_refresh == BankRefresh::PerBatch && steps.len() > first {
                bank = d.encode_bank(anchors)?;
            }
            let lr = lr_at(cfg.lr, &cfg.lr_schedule, t, total_steps);
            let mut rec = d.step(&batch, &bank, lr)?;
            rec.epoch = epoch;
            rec.step = t;
            steps.push(rec);
            t += 1;
        }
        let eval = evaluate(&d.student.image, &eval_batch, &eval_bank(&d)?)?;
        epochs.push(summarize_epoch(epoch, &steps[first..], eval, start));
    }

    Ok(DistillOutcome {
        student: d.student,
        metrics: RunMetrics {
            initial_eval,
            epochs,
            steps,
            teacher_checksums,
        },
    })
}

fn mean_vectors<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for r in rows {
        if acc.is_empty() {
            acc = vec![0.0; r.len()];
        }
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count.max(1) as f64);
    acc
}

fn summarize_epoch(epoch: usize, steps: &[StepRecord], eval: EvalMetrics, start: Instant) -> EpochRecord {
    let n = steps.len().max(1) as f64;
    let mean = |f: fn(&StepRecord) -> f64| steps.iter().map(f).sum::<f64>() / n;
    EpochRecord {
        epoch,
        l_clip: mean(|s| s.l_clip),
        l_kl: mean(|s| s.l_kl),
        l_mse: mean(|s| s.l_mse),
        total: mean(|s| s.total),
        eval,
        alpha: mean_vectors(steps.iter().filter_map(|s| s.weights.as_ref().map(|w| w.as_slice()))),
        lsr_alpha: mean_vectors(
            steps
                .iter()
                .filter_map(|s| s.lsr_weights.as_ref().map(|w| w.weights.as_slice())),
        ),
        fw_iters: mean(|s| s.fw_iterations.unwrap_or(0) as f64),
        lr: steps.last().map_or(0.0, |s| s.lr),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}
