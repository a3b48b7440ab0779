use std::path::{Path, PathBuf};

use mtkd_core::data::{generate, load_dataset, Corruption, PairedDataset, SyntheticSpec};
use mtkd_core::distill::LossRatios;
use mtkd_core::encoder::load_checkpoint;
use mtkd_core::trainer::{default_teacher_lineup, StudentConfig, TeacherConfig, TrainConfig};
use mtkd_core::weighting::Strategy;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

/// Widest teacher lineup the metrics CSV has columns for.
pub const MAX_TEACHERS: usize = 4;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Single,
    LossRatio,
    Strategy,
    TeacherCount,
    StudentSize,
}

impl Suite {
    pub fn as_str(&self) -> &'static str {
        match self {
            Suite::Single => "single",
            Suite::LossRatio => "loss_ratio",
            Suite::Strategy => "strategy",
            Suite::TeacherCount => "teacher_count",
            Suite::StudentSize => "student_size",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Spec(SyntheticSpec),
    Path(PathBuf),
}

/// A teacher given either as a pretraining recipe or as saved encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TeacherSource {
    Checkpoint(CheckpointTeacher),
    Pretrain(TeacherConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointTeacher {
    #[serde(default)]
    pub name: Option<String>,
    pub image_checkpoint: PathBuf,
    pub text_checkpoint: PathBuf,
}

/// Corrupts the teacher at `teacher` (0-based) in the lineup.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub teacher: usize,
    #[serde(flatten)]
    pub corruption: Corruption,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub suite: Suite,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub student: StudentConfig,
    /// Defaults to the built-in heterogeneous lineup.
    #[serde(default)]
    pub teachers: Option<Vec<TeacherSource>>,
    #[serde(default)]
    pub corruption: Option<CorruptionSpec>,
    /// Defaults to the dataset seed.
    #[serde(default)]
    pub split_seed: Option<u64>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Records real per-epoch wall-clock in the metrics CSV (breaks
    /// byte-identical reruns); otherwise `wall_ms` is written as 0.
    #[serde(default)]
    pub timing: bool,
}

fn default_train_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}

impl Manifest {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("manifest: {e}")))
    }
}

/// One row of a suite's grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub train: TrainConfig,
    pub student: StudentConfig,
}

/// Student analogs for the size suite: `(label, hidden layers, width)`.
/// Depth is halved and feature width divided by 8 to fit the desk scale.
pub const STUDENT_SIZE_GRID: [(&str, usize, usize); 3] =
    [("6layer+64", 3, 8), ("8layer+128", 4, 16), ("6layer+512", 3, 64)];

pub const LOSS_RATIO_GRID: [(f64, f64, f64); 4] =
    [(0.5, 1.0, 1.0), (1.0, 0.5, 1.0), (1.0, 1.0, 0.5), (1.0, 1.0, 1.0)];

pub fn grid(manifest: &Manifest) -> Vec<GridPoint> {
    let base = GridPoint {
        label: manifest.suite.as_str().to_string(),
        train: manifest.train.clone(),
        student: manifest.student.clone(),
    };
    match manifest.suite {
        Suite::Single => vec![base],
        Suite::LossRatio => LOSS_RATIO_GRID
            .iter()
            .map(|&(clip, kl, mse)| {
                let ratios = LossRatios { clip, kl, mse };
                let mut p = base.clone();
                p.label = ratios.label();
                p.train.loss_ratios = ratios;
                p
            })
            .collect(),
        Suite::Strategy => Strategy::ALL
            .iter()
            .map(|&s| {
                let mut p = base.clone();
                p.label = s.as_str().to_string();
                p.train.strategy = s;
                p
            })
            .collect(),
        Suite::TeacherCount => (1..=MAX_TEACHERS)
            .map(|k| {
                let mut p = base.clone();
                p.label = k.to_string();
                p.train.num_teachers = k;
                p
            })
            .collect(),
        Suite::StudentSize => STUDENT_SIZE_GRID
            .iter()
            .map(|&(label, depth, width)| {
                let mut p = base.clone();
                p.label = label.to_string();
                p.student.hidden_widths = vec![width; depth];
                p
            })
            .collect(),
    }
}

/// A manifest after every check `run` depends on has passed.
#[derive(Clone, Debug)]
pub struct ResolvedManifest {
    pub manifest: Manifest,
    pub dataset: PairedDataset,
    pub grid: Vec<GridPoint>,
    /// Exactly as many teachers as the widest grid point needs, with the
    /// corruption folded in and paths made absolute.
    pub teachers: Vec<TeacherSource>,
    pub split_seed: u64,
}

impl ResolvedManifest {
    pub fn teacher_count(&self) -> usize {
        self.teachers.len()
    }
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_manifest(path: &Path) -> CliResult<(Manifest, PathBuf)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let manifest = Manifest::from_json(&text)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, dir))
}

/// Shared validation path of `validate` and `run`. Relative paths resolve
/// against `base_dir`.
pub fn resolve(mut manifest: Manifest, base_dir: &Path) -> CliResult<ResolvedManifest> {
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(CliError::config(format!(
            "schema_version: expected {SCHEMA_VERSION}, got {}",
            manifest.schema_version
        )));
    }
    if manifest.seeds.is_empty() {
        return Err(CliError::config("seeds: at least one seed is required"));
    }
    if !(manifest.train_fraction > 0.0 && manifest.train_fraction < 1.0) {
        return Err(CliError::config("train_fraction: must lie strictly between 0 and 1"));
    }
    if let Some(dir) = &manifest.output_dir {
        manifest.output_dir = Some(resolve_path(base_dir, dir));
    }

    let grid = grid(&manifest);
    let mut needed = 0;
    for point in &grid {
        point.train.validate().map_err(|e| CliError::from_core(e, None))?;
        point.student.validate().map_err(|e| CliError::from_core(e, None))?;
        needed = needed.max(point.train.num_teachers);
    }
    if needed > MAX_TEACHERS {
        return Err(CliError::config(format!(
            "train.num_teachers: at most {MAX_TEACHERS} teachers are supported, got {needed}"
        )));
    }

    let dataset = match &mut manifest.dataset {
        DatasetSource::Spec(spec) => generate(spec).map_err(|e| CliError::from_core(e, None))?,
        DatasetSource::Path(p) => {
            *p = resolve_path(base_dir, p);
            load_dataset(p).map_err(|e| CliError::from_core(e, None))?
        }
    };

    let mut teachers: Vec<TeacherSource> = match &manifest.teachers {
        Some(list) => {
            if list.len() < needed {
                return Err(CliError::config(format!(
                    "teachers: {needed} teachers required, {} listed",
                    list.len()
                )));
            }
            list.iter().take(needed).cloned().collect()
        }
        None => default_teacher_lineup(needed).into_iter().map(TeacherSource::Pretrain).collect(),
    };
    if let Some(spec) = manifest.corruption {
        if spec.teacher >= teachers.len() {
            return Err(CliError::config(format!(
                "corruption.teacher: index {} but only {} teachers are in use",
                spec.teacher,
                teachers.len()
            )));
        }
        match &mut teachers[spec.teacher] {
            TeacherSource::Pretrain(cfg) => cfg.corruption = Some(spec.corruption),
            TeacherSource::Checkpoint(_) if spec.corruption.shuffles_labels() => {
                return Err(CliError::config(
                    "corruption.mode: label_shuffle needs a pretrained teacher, not a checkpoint",
                ))
            }
            TeacherSource::Checkpoint(_) => {}
        }
    }
    for (i, t) in teachers.iter_mut().enumerate() {
        match t {
            TeacherSource::Pretrain(cfg) => cfg.validate().map_err(|e| CliError::config(format!("teachers[{i}]: {e}")))?,
            TeacherSource::Checkpoint(ck) => {
                ck.image_checkpoint = resolve_path(base_dir, &ck.image_checkpoint);
                ck.text_checkpoint = resolve_path(base_dir, &ck.text_checkpoint);
                let image = load_checkpoint(&ck.image_checkpoint).map_err(|e| CliError::from_core(e, None))?;
                let text = load_checkpoint(&ck.text_checkpoint).map_err(|e| CliError::from_core(e, None))?;
                if image.config().input_dim != dataset.image_raw.cols()
                    || text.config().input_dim != dataset.text_raw.cols()
                {
                    return Err(CliError::data(format!(
                        "teachers[{i}]: checkpoint input widths do not match the dataset"
                    )));
                }
            }
        }
    }

    let split_seed = manifest.split_seed.unwrap_or(dataset.spec.seed);
    Ok(ResolvedManifest {
        manifest,
        dataset,
        grid,
        teachers,
        split_seed,
    })
}

pub fn load_and_resolve(path: &Path) -> CliResult<ResolvedManifest> {
    let (manifest, dir) = read_manifest(path)?;
    resolve(manifest, &dir)
}

/// Effective configuration printed by `validate`.
#[derive(Serialize)]
pub struct EffectiveConfig<'a> {
    pub manifest: &'a Manifest,
    pub grid: Vec<EffectiveGridPoint<'a>>,
    pub teachers: &'a [TeacherSource],
    pub split_seed: u64,
    pub dataset_rows: usize,
}

#[derive(Serialize)]
pub struct EffectiveGridPoint<'a> {
    pub label: &'a str,
    pub train: &'a TrainConfig,
    pub student: &'a StudentConfig,
}

impl ResolvedManifest {
    pub fn effective(&self) -> EffectiveConfig<'_> {
        EffectiveConfig {
            manifest: &self.manifest,
            grid: self
                .grid
                .iter()
                .map(|p| EffectiveGridPoint {
                    label: &p.label,
                    train: &p.train,
                    student: &p.student,
                })
                .collect(),
            teachers: &self.teachers,
            split_seed: self.split_seed,
            dataset_rows: self.dataset.len(),
        }
    }
}
