use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use mtkd_core::data::Split;
use mtkd_core::encoder::{load_checkpoint, save_checkpoint};
use mtkd_core::trainer::{distill_student, freeze_teacher, pretrain_teacher, RunMetrics, Teacher};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::{load_and_resolve, ResolvedManifest, TeacherSource, MAX_TEACHERS};

pub const METRICS_HEADER: [&str; 18] = [
    "suite", "grid_point", "seed", "epoch", "l_clip", "l_kl", "l_mse", "total", "acc", "recall1", "recall5",
    "alpha_0", "alpha_1", "alpha_2", "alpha_3", "fw_iters", "lr", "wall_ms",
];

pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const MANIFEST_ECHO_FILE: &str = "manifest.json";
pub const RUNS_DIR: &str = "runs";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed_override: Option<u64>,
    /// Worker count for independent (grid point, seed) runs; 0 and 1 both
    /// mean sequential.
    pub threads: usize,
    pub output_dir: Option<PathBuf>,
}

/// Outcome of one (grid point, seed) run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub grid_point: String,
    pub seed: u64,
    pub metrics: Result<RunMetrics, CliError>,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct SuiteOutcome {
    pub output_dir: PathBuf,
    pub teachers: Vec<Teacher>,
    pub results: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
    /// First failure in job order; the remaining runs still complete.
    pub first_error: Option<CliError>,
}

/// Mean ± sample std over the seeds of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub suite: String,
    pub grid_point: String,
    pub seeds: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub recall1_mean: f64,
    pub recall1_std: f64,
    pub recall5_mean: f64,
    pub recall5_std: f64,
    pub total_mean: f64,
    pub total_std: f64,
    /// Mean weight over every epoch and seed; empty without distillation.
    pub alpha_0_mean: Option<f64>,
    pub alpha_1_mean: Option<f64>,
    pub alpha_2_mean: Option<f64>,
    pub alpha_3_mean: Option<f64>,
    pub failed: usize,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// File-name-safe form of a grid label (`0.5:1:1` → `0.5-1-1`).
pub fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '+' || c == '_' { c } else { '-' })
        .collect()
}

pub fn run_file_name(grid_point: &str, seed: u64) -> String {
    format!("{}_seed{seed}.csv", slug(grid_point))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders one run's per-epoch rows. `wall_ms` is 0 unless `timing`.
pub fn metrics_csv(suite: &str, grid_point: &str, seed: u64, metrics: &RunMetrics, timing: bool) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::data(format!("metrics csv: {e}"));
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for e in &metrics.epochs {
        let mut row = vec![
            suite.to_string(),
            grid_point.to_string(),
            seed.to_string(),
            e.epoch.to_string(),
            e.l_clip.to_string(),
            e.l_kl.to_string(),
            e.l_mse.to_string(),
            e.total.to_string(),
            e.eval.accuracy.to_string(),
            e.eval.recall1.to_string(),
            e.eval.recall5.to_string(),
        ];
        row.extend((0..MAX_TEACHERS).map(|k| fmt_opt(e.alpha.get(k).copied())));
        row.push(e.fw_iters.to_string());
        row.push(e.lr.to_string());
        row.push(if timing { e.wall_ms.to_string() } else { "0".to_string() });
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::data(format!("metrics csv: {e}")))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn build_teachers(resolved: &ResolvedManifest, split: &Split) -> CliResult<Vec<Teacher>> {
    let ds = &resolved.dataset;
    let corruption = resolved.manifest.corruption;
    resolved
        .teachers
        .iter()
        .enumerate()
        .map(|(i, source)| match source {
            TeacherSource::Pretrain(cfg) => {
                pretrain_teacher(ds, split, cfg, i).map_err(|e| CliError::from_core(e, Some(&format!("teacher{i}"))))
            }
            TeacherSource::Checkpoint(ck) => {
                let image = load_checkpoint(&ck.image_checkpoint).map_err(|e| CliError::from_core(e, None))?;
                let text = load_checkpoint(&ck.text_checkpoint).map_err(|e| CliError::from_core(e, None))?;
                let c = corruption.filter(|c| c.teacher == i).map(|c| c.corruption);
                let name = ck.name.clone().unwrap_or_else(|| format!("teacher{i}"));
                freeze_teacher(name, image, text, c.as_ref(), i as u64, ds, split)
                    .map_err(|e| CliError::from_core(e, Some(&format!("teacher{i}"))))
            }
        })
        .collect()
}

fn summarize(suite: &str, label: &str, results: &[&RunResult]) -> SummaryRow {
    let ok: Vec<&RunMetrics> = results.iter().filter_map(|r| r.metrics.as_ref().ok()).collect();
    let finals: Vec<_> = ok.iter().map(|m| m.final_eval()).collect();
    let col = |f: &dyn Fn(usize) -> f64| mean_std(&(0..ok.len()).map(f).collect::<Vec<_>>());
    let (acc_mean, acc_std) = col(&|i| finals[i].accuracy);
    let (recall1_mean, recall1_std) = col(&|i| finals[i].recall1);
    let (recall5_mean, recall5_std) = col(&|i| finals[i].recall5);
    let (total_mean, total_std) = col(&|i| ok[i].epochs.last().map_or(f64::NAN, |e| e.total));
    let alpha = |k: usize| {
        let xs: Vec<f64> = ok.iter().flat_map(|m| m.epochs.iter().filter_map(move |e| e.alpha.get(k).copied())).collect();
        (!xs.is_empty()).then(|| mean_std(&xs).0)
    };
    SummaryRow {
        suite: suite.to_string(),
        grid_point: label.to_string(),
        seeds: ok.len(),
        acc_mean,
        acc_std,
        recall1_mean,
        recall1_std,
        recall5_mean,
        recall5_std,
        total_mean,
        total_std,
        alpha_0_mean: alpha(0),
        alpha_1_mean: alpha(1),
        alpha_2_mean: alpha(2),
        alpha_3_mean: alpha(3),
        failed: results.len() - ok.len(),
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::data(format!("summary csv: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::data(format!("summary csv: {e}")))
}

#[derive(Serialize)]
struct TeacherRecord<'a> {
    name: &'a str,
    accuracy: f64,
    recall1: f64,
    recall5: f64,
    corrupted: bool,
    below_gate: bool,
    checksum: String,
    image_checkpoint: String,
    text_checkpoint: String,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    grid_point: &'a str,
    seed: u64,
    status: &'static str,
    error: Option<String>,
    metrics_csv: Option<String>,
    final_accuracy: Option<f64>,
    wall_ms: f64,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    schema_version: u32,
    library_version: &'static str,
    suite: &'a str,
    seeds: &'a [u64],
    config: &'a crate::manifest::EffectiveConfig<'a>,
    teachers: Vec<TeacherRecord<'a>>,
    runs: Vec<RunRecord<'a>>,
    wall_clock_ms: f64,
}

/// Runs every (grid point × seed) of an already-resolved manifest and
/// writes the run directory.
pub fn run_resolved(mut resolved: ResolvedManifest, opts: &RunOptions) -> CliResult<SuiteOutcome> {
    let started = Instant::now();
    if let Some(seed) = opts.seed_override {
        resolved.manifest.seeds = vec![seed];
    }
    let out = opts
        .output_dir
        .clone()
        .or_else(|| resolved.manifest.output_dir.clone())
        .ok_or_else(|| CliError::config("output_dir: not set in the manifest or on the command line"))?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;

    let effective = resolved.effective();
    let echo = serde_json::to_vec_pretty(&effective).map_err(|e| CliError::data(e.to_string()))?;
    write_file(&out.join(MANIFEST_ECHO_FILE), &echo)?;

    let ds = &resolved.dataset;
    let split = ds.stratified_split(resolved.manifest.train_fraction, resolved.split_seed);
    let teachers = build_teachers(&resolved, &split)?;
    let mut teacher_records = Vec::with_capacity(teachers.len());
    for (i, t) in teachers.iter().enumerate() {
        if t.below_gate() {
            eprintln!(
                "warning: teacher {} reached eval accuracy {:.4}, below the {:.2} gate",
                t.name,
                t.eval.accuracy,
                mtkd_core::trainer::TEACHER_GATE
            );
        }
        let dir = out.join("teachers").join(format!("{i}_{}", slug(&t.name)));
        let (img, txt) = (dir.join("image"), dir.join("text"));
        save_checkpoint(&t.image, &img).map_err(|e| CliError::from_core(e, None))?;
        save_checkpoint(&t.text, &txt).map_err(|e| CliError::from_core(e, None))?;
        teacher_records.push((img, txt));
    }

    let suite = resolved.manifest.suite.as_str();
    let seeds = resolved.manifest.seeds.clone();
    let jobs: Vec<(usize, u64)> = (0..resolved.grid.len()).flat_map(|g| seeds.iter().map(move |&s| (g, s))).collect();
    let slots: Vec<Mutex<Option<RunResult>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let j = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(g, seed)) = jobs.get(j) else { break };
        let point = &resolved.grid[g];
        let mut cfg = point.train.clone();
        cfg.seed = seed;
        let t0 = Instant::now();
        let run_id = format!("{}/seed{seed}", point.label);
        let metrics = distill_student(&cfg, &point.student, &teachers[..cfg.num_teachers], ds, &split)
            .map(|o| o.metrics)
            .map_err(|e| CliError::from_core(e, Some(&run_id)));
        let result = RunResult {
            grid_point: point.label.clone(),
            seed,
            metrics,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        *slots[j].lock().unwrap_or_else(|p| p.into_inner()) = Some(result);
    };
    let threads = opts.threads.max(1).min(jobs.len().max(1));
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(work);
            }
        });
    }
    let results: Vec<RunResult> = slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|p| p.into_inner()).expect("every job ran"))
        .collect();

    let mut first_error = None;
    let mut run_records = Vec::with_capacity(results.len());
    for r in &results {
        let run_id = format!("{}/seed{}", r.grid_point, r.seed);
        match &r.metrics {
            Ok(m) => {
                let name = run_file_name(&r.grid_point, r.seed);
                let bytes = metrics_csv(suite, &r.grid_point, r.seed, m, resolved.manifest.timing)?;
                write_file(&out.join(RUNS_DIR).join(&name), &bytes)?;
                run_records.push(RunRecord {
                    grid_point: &r.grid_point,
                    seed: r.seed,
                    status: "ok",
                    error: None,
                    metrics_csv: Some(format!("{RUNS_DIR}/{name}")),
                    final_accuracy: Some(m.final_eval().accuracy),
                    wall_ms: r.wall_ms,
                });
            }
            Err(err) => {
                eprintln!("error: run {run_id} failed: {err}");
                if first_error.is_none() {
                    first_error = Some(err.clone());
                }
                run_records.push(RunRecord {
                    grid_point: &r.grid_point,
                    seed: r.seed,
                    status: "failed",
                    error: Some(err.to_string()),
                    metrics_csv: None,
                    final_accuracy: None,
                    wall_ms: r.wall_ms,
                });
            }
        }
    }

    let summary: Vec<SummaryRow> = resolved
        .grid
        .iter()
        .map(|p| {
            let rs: Vec<&RunResult> = results.iter().filter(|r| r.grid_point == p.label).collect();
            summarize(suite, &p.label, &rs)
        })
        .collect();
    write_file(&out.join(SUMMARY_FILE), &summary_csv(&summary)?)?;

    let run_manifest = RunManifest {
        schema_version: crate::manifest::SCHEMA_VERSION,
        library_version: env!("CARGO_PKG_VERSION"),
        suite,
        seeds: &seeds,
        config: &effective,
        teachers: teachers
            .iter()
            .zip(&teacher_records)
            .map(|(t, (img, txt))| TeacherRecord {
                name: &t.name,
                accuracy: t.eval.accuracy,
                recall1: t.eval.recall1,
                recall5: t.eval.recall5,
                corrupted: t.corrupted,
                below_gate: t.below_gate(),
                checksum: format!("{:016x}", t.checksum()),
                image_checkpoint: img.strip_prefix(&out).unwrap_or(img).display().to_string(),
                text_checkpoint: txt.strip_prefix(&out).unwrap_or(txt).display().to_string(),
            })
            .collect(),
        runs: run_records,
        wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    let json = serde_json::to_vec_pretty(&run_manifest).map_err(|e| CliError::data(e.to_string()))?;
    write_file(&out.join(RUN_MANIFEST_FILE), &json)?;

    Ok(SuiteOutcome {
        output_dir: out,
        teachers,
        results,
        summary,
        first_error,
    })
}

pub fn run(manifest_path: &Path, opts: &RunOptions) -> CliResult<SuiteOutcome> {
    let resolved = load_and_resolve(manifest_path)?;
    run_resolved(resolved, opts)
}
