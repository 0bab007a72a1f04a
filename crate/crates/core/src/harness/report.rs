//! Tables and plot series from finished runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::align::TargetMode;
use crate::error::{Error, Result};
use crate::harness::ablate::{describe, mean_std};
use crate::harness::config::SELECTION_K;
use crate::harness::train::RunRecord;
use crate::metrics::PARTITION_K;
use crate::types::BACKGROUND;

/// Loads `run_record.json` from every directory under (or equal to) each root.
pub fn collect_records(roots: &[PathBuf]) -> Result<Vec<(PathBuf, RunRecord)>> {
    let mut out = Vec::new();
    for root in roots {
        let mut stack = vec![root.clone()];
        while let Some(dir) = stack.pop() {
            let rec = dir.join("run_record.json");
            if rec.is_file() {
                out.push((dir.clone(), RunRecord::load(&rec)?));
                continue;
            }
            let mut children: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            children.sort();
            stack.extend(children.into_iter().rev());
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig("no run_record.json found under the given run directories".into()));
    }
    Ok(out)
}

/// Test per-predicate recall at K=100 for every non-background predicate
/// (0 when a predicate has no test instance).
pub fn per_predicate_r100(rec: &RunRecord) -> Vec<f64> {
    let pp = rec.test.per_predicate_recall.get(&PARTITION_K).cloned().unwrap_or_default();
    (0..rec.num_predicates).filter(|&p| p != BACKGROUND).map(|p| pp.get(&p).copied().unwrap_or(0.0)).collect()
}

/// Per-predicate difference rows `(predicate_id, partition, mean_diff, std)`
/// of aligned runs against baselines, paired by seed.
pub fn per_predicate_diff(aligned: &[&RunRecord], baseline: &[&RunRecord]) -> Vec<(usize, String, f64, f64)> {
    let Some(first) = aligned.first().or(baseline.first()) else { return Vec::new() };
    let base_by_seed: BTreeMap<u64, Vec<f64>> = baseline.iter().map(|r| (r.config.seed, per_predicate_r100(r))).collect();
    let base_mean: Vec<f64> = {
        let all: Vec<Vec<f64>> = base_by_seed.values().cloned().collect();
        (0..first.num_predicates - 1).map(|i| mean_std(&all.iter().map(|v| v[i]).collect::<Vec<_>>()).0).collect()
    };
    let diffs: Vec<Vec<f64>> = aligned
        .iter()
        .map(|r| {
            let a = per_predicate_r100(r);
            let b = base_by_seed.get(&r.config.seed).unwrap_or(&base_mean);
            a.iter().zip(b).map(|(x, y)| x - y).collect()
        })
        .collect();
    (1..first.num_predicates)
        .map(|p| {
            let col: Vec<f64> = diffs.iter().map(|d| d[p - 1]).collect();
            let (m, s) = mean_std(&col);
            let bucket = first.partition.bucket_of(p).map_or("none", |b| b.name()).to_string();
            (p, bucket, m, s)
        })
        .collect()
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn group_key(r: &RunRecord) -> String {
    format!("{}_{}", r.config.model.name(), r.config.mode.name())
}

fn variant_key(r: &RunRecord) -> String {
    describe(&r.config).replace([' ', '='], "_").replace('+', "-").replace('λ', "lambda")
}

/// Writes `results.csv`, `per_predicate_diff.csv` (plus one per aligned
/// variant) and `series/*.csv`.
pub fn write_report(records: &[(PathBuf, RunRecord)], out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out.join("series")).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();

    let results = out.join("results.csv");
    let mut w = writer(&results)?;
    w.write_record(["run", "model", "mode", "variant", "seed", "split", "metric", "K", "value"])?;
    for (dir, r) in records {
        let run = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        for (split, rep) in [("val", r.selected_val()), ("test", &r.test)] {
            for (metric, _, k, v) in rep.csv_rows() {
                w.write_record([
                    run.clone(),
                    r.config.model.name().to_string(),
                    r.config.mode.name().to_string(),
                    describe(&r.config),
                    r.config.seed.to_string(),
                    split.to_string(),
                    metric,
                    k.to_string(),
                    format!("{v:.6}"),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&results, e))?;
    files.push(results);

    // aligned-vs-baseline differences, per (model, mode) group
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for (_, r) in records {
        groups.entry(group_key(r)).or_default().push(r);
    }
    let mut main_written = false;
    for (g, recs) in &groups {
        let baseline: Vec<&RunRecord> = recs.iter().copied().filter(|r| r.config.align.target_mode == TargetMode::Off).collect();
        if baseline.is_empty() {
            continue;
        }
        let mut variants: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
        for r in recs.iter().copied().filter(|r| r.config.align.target_mode != TargetMode::Off) {
            variants.entry(variant_key(r)).or_default().push(r);
        }
        for (v, aligned) in &variants {
            let rows = per_predicate_diff(aligned, &baseline);
            let path = out.join(format!("per_predicate_diff_{g}_{v}.csv"));
            write_diff(&path, &rows)?;
            files.push(path);
            let is_default = aligned[0].config.align == crate::align::AlignConfig::default();
            if !main_written && (is_default || variants.len() == 1) {
                let main = out.join("per_predicate_diff.csv");
                write_diff(&main, &rows)?;
                files.push(main);
                main_written = true;
            }
        }
    }

    for (dir, r) in records {
        let run = dir.file_name().map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned());
        let path = out.join("series").join(format!("{run}_val_mR@{SELECTION_K}.csv"));
        let mut w = writer(&path)?;
        w.write_record(["iteration", "value"])?;
        for p in &r.eval_points {
            w.write_record([p.iteration.to_string(), format!("{:.6}", p.val.mean_recall(SELECTION_K).unwrap_or(0.0))])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        files.push(path);
        let path = out.join("series").join(format!("{run}_loss.csv"));
        let mut w = writer(&path)?;
        w.write_record(["iteration", "l_original", "l_align", "l_final"])?;
        for (it, l) in &r.loss_curve {
            w.write_record([it.to_string(), format!("{:.6}", l.l_original), format!("{:.6}", l.l_align), format!("{:.6}", l.l_final)])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }
    Ok(files)
}

fn write_diff(path: &Path, rows: &[(usize, String, f64, f64)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["predicate_id", "partition", "mean_diff", "std"])?;
    for (p, b, m, s) in rows {
        w.write_record([p.to_string(), b.clone(), format!("{m:.6}"), format!("{s:.6}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
