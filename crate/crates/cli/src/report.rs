use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};
use crate::runner::{slug, SummaryRow, METRICS_HEADER, RUNS_DIR, SUMMARY_FILE};

/// Ranked rows of one suite run, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteTable {
    pub suite: String,
    /// Run directory relative to the report root; empty for the root itself.
    pub run_dir: String,
    pub rows: Vec<SummaryRow>,
}

impl SuiteTable {
    pub fn best(&self) -> Option<&SummaryRow> {
        self.rows.first()
    }

    /// 1-based rank of `grid_point`.
    pub fn rank_of(&self, grid_point: &str) -> Option<usize> {
        self.rows.iter().position(|r| r.grid_point == grid_point).map(|i| i + 1)
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub tables: Vec<SuiteTable>,
    pub text: String,
    pub long_csvs: Vec<PathBuf>,
}

/// `(grid_point, seed, epoch, metric, value)`.
type LongRow = [String; 5];

fn find_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_summaries(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == SUMMARY_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

fn read_summary(path: &Path) -> CliResult<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<SummaryRow>, _>>()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Rewrites every per-run CSV in `runs_dir` as `(grid_point, seed, epoch,
/// metric, value)` rows.
fn long_rows(runs_dir: &Path, rows: &mut Vec<LongRow>) -> CliResult<()> {
    let Ok(read) = std::fs::read_dir(runs_dir) else { return Ok(()) };
    let mut files: Vec<PathBuf> = read
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    for f in files {
        let mut r = csv::Reader::from_path(&f).map_err(|e| CliError::data(format!("{}: {e}", f.display())))?;
        let header = r.headers().map_err(|e| CliError::data(format!("{}: {e}", f.display())))?.clone();
        if header.iter().ne(METRICS_HEADER.iter().copied()) {
            return Err(CliError::data(format!("{}: unexpected metrics header", f.display())));
        }
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::data(format!("{}: {e}", f.display())))?;
            for (name, value) in header.iter().zip(rec.iter()).skip(4) {
                if !value.is_empty() {
                    rows.push([rec[1].to_string(), rec[2].to_string(), rec[3].to_string(), name.to_string(), value.to_string()]);
                }
            }
        }
    }
    Ok(())
}

fn observations(table: &SuiteTable) -> Vec<String> {
    let mut notes = Vec::new();
    match table.suite.as_str() {
        "loss_ratio" => {
            if let Some(rank) = table.rank_of("1:1:1") {
                notes.push(format!("1:1:1 ranks first: {} (rank {rank})", if rank == 1 { "yes" } else { "no" }));
            }
        }
        "strategy" => {
            if let (Some(d), Some(a)) = (table.rank_of("dsw"), table.rank_of("avg")) {
                notes.push(format!("dsw ranked above avg: {}", if d < a { "yes" } else { "no" }));
            }
            if let (Some(a), Some(b)) = (table.rank_of("avg"), table.rank_of("base")) {
                notes.push(format!("avg ranked above base: {}", if a < b { "yes" } else { "no" }));
            }
        }
        _ => {}
    }
    notes
}

fn render(table: &SuiteTable) -> String {
    let mut s = String::new();
    if table.run_dir.is_empty() {
        let _ = writeln!(s, "suite: {} (desk-scale analog)", table.suite);
    } else {
        let _ = writeln!(s, "suite: {} in {} (desk-scale analog)", table.suite, table.run_dir);
    }
    let _ = writeln!(
        s,
        "{:>4}  {:<12} {:>17} {:>17} {:>17} {:>5}  alpha",
        "rank", "grid_point", "acc", "recall@1", "recall@5", "seeds"
    );
    for (i, r) in table.rows.iter().enumerate() {
        let alpha: Vec<String> = [r.alpha_0_mean, r.alpha_1_mean, r.alpha_2_mean, r.alpha_3_mean]
            .iter()
            .flatten()
            .map(|a| format!("{a:.3}"))
            .collect();
        let _ = writeln!(
            s,
            "{:>4}  {:<12} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>5}  {}{}",
            i + 1,
            r.grid_point,
            r.acc_mean,
            r.acc_std,
            r.recall1_mean,
            r.recall1_std,
            r.recall5_mean,
            r.recall5_std,
            r.seeds,
            alpha.join("/"),
            if i == 0 { "  *best" } else { "" }
        );
    }
    for note in observations(table) {
        let _ = writeln!(s, "note: {note}");
    }
    s
}

/// Aggregates every completed run directory under `dir` into one table per
/// suite run; writes a matching `report_<suite>[_<run dir>]_long.csv` into
/// `dir`.
pub fn report(dir: &Path) -> CliResult<Report> {
    let mut summaries = Vec::new();
    if dir.is_dir() {
        find_summaries(dir, &mut summaries)?;
    }
    let mut by_run: BTreeMap<(String, String), (Vec<SummaryRow>, Vec<LongRow>)> = BTreeMap::new();
    for path in &summaries {
        let rows: Vec<SummaryRow> = read_summary(path)?.into_iter().filter(|r| r.seeds > 0).collect();
        let Some(suite) = rows.first().map(|r| r.suite.clone()) else { continue };
        let parent = path.parent().unwrap_or(dir);
        let rel = parent.strip_prefix(dir).unwrap_or(parent).display().to_string();
        let entry = by_run.entry((suite, rel)).or_default();
        entry.0.extend(rows);
        long_rows(&parent.join(RUNS_DIR), &mut entry.1)?;
    }
    if by_run.is_empty() {
        return Err(CliError::NoRunsFound(dir.to_path_buf()));
    }

    let mut tables = Vec::new();
    let mut text = String::new();
    let mut long_csvs = Vec::new();
    for ((suite, run_dir), (mut rows, long)) in by_run {
        rows.sort_by(|a, b| b.acc_mean.total_cmp(&a.acc_mean).then_with(|| a.grid_point.cmp(&b.grid_point)));
        let name = if run_dir.is_empty() {
            format!("report_{suite}_long.csv")
        } else {
            format!("report_{suite}_{}_long.csv", slug(&run_dir))
        };
        let table = SuiteTable { suite, run_dir, rows };
        text.push_str(&render(&table));
        text.push('\n');
        tables.push(table);

        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let werr = |e: csv::Error| CliError::data(format!("long csv: {e}"));
        w.write_record(["grid_point", "seed", "epoch", "metric", "value"]).map_err(werr)?;
        for row in &long {
            w.write_record(row).map_err(werr)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        long_csvs.push(path);
    }
    Ok(Report { tables, text, long_csvs })
}
