//! Ablation grids: alignment-variant table and the p / λ sweeps.
//!
//! A grid file is flat `key=value` lines. `preset` selects the rows
//! (`variants`, `p_sweep`, `lambda_sweep`); `cell = label; k=v; k=v` lines add
//! custom rows; every other key overrides the base training configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{HeadMode, TargetMode};
use crate::datagen::{Corpus, CorpusMeta};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::harness::config::{parse_key_values, TrainConfig};
use crate::harness::train::run_training;
use crate::models::ModelFamily;

pub const P_SWEEP: [f64; 5] = [0.05, 0.1, 0.2, 0.4, 0.6];
pub const LAMBDA_SWEEP: [f64; 5] = [0.1, 1.0, 10.0, 50.0, 100.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Variants,
    PSweep,
    LambdaSweep,
    Custom,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variants" => Ok(Preset::Variants),
            "p_sweep" | "p-sweep" => Ok(Preset::PSweep),
            "lambda_sweep" | "lambda-sweep" => Ok(Preset::LambdaSweep),
            "custom" => Ok(Preset::Custom),
            _ => Err(Error::InvalidConfig(format!("unknown preset {s:?}"))),
        }
    }
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub method: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub preset: Preset,
    pub base: Vec<(String, String)>,
    pub cells: Vec<GridCell>,
}

fn kv(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Rows of a preset.
pub fn preset_cells(preset: Preset, family: ModelFamily) -> Vec<GridCell> {
    let base = family.display();
    let off = GridCell { method: base.to_string(), overrides: kv(&[("align", "off".into())]) };
    let variant = |t: &str, h: &str| kv(&[("align", t.into()), ("head", h.into()), ("p", "0.1".into()), ("lambda", "10".into())]);
    match preset {
        Preset::Variants => vec![
            off,
            GridCell { method: format!("{base} + SA + UPH"), overrides: variant("sa", "untied") },
            GridCell { method: format!("{base} + SSA + PH"), overrides: variant("ssa", "tied") },
            GridCell { method: format!("{base} + SSA + UPH"), overrides: variant("ssa", "untied") },
        ],
        Preset::PSweep => std::iter::once(off)
            .chain(P_SWEEP.iter().map(|&p| GridCell {
                method: format!("Align-{base} (p={})", fmt_num(p)),
                overrides: kv(&[("align", "ssa".into()), ("head", "untied".into()), ("p", fmt_num(p)), ("lambda", "10".into())]),
            }))
            .collect(),
        Preset::LambdaSweep => std::iter::once(off)
            .chain(LAMBDA_SWEEP.iter().map(|&l| GridCell {
                method: format!("Align-{base} (λ={})", fmt_num(l)),
                overrides: kv(&[("align", "ssa".into()), ("head", "untied".into()), ("p", "0.1".into()), ("lambda", fmt_num(l))]),
            }))
            .collect(),
        Preset::Custom => Vec::new(),
    }
}

/// Metric columns of a preset's table.
pub fn preset_columns(preset: Preset) -> Vec<Metric> {
    match preset {
        Preset::Variants | Preset::Custom => vec![Metric::MeanRecall(50), Metric::MeanRecall(100), Metric::Recall(50), Metric::Recall(100)],
        Preset::PSweep | Preset::LambdaSweep => vec![Metric::MeanRecall(50), Metric::MeanRecall(100)],
    }
}

pub fn parse_grid(text: &str, path: &Path) -> Result<Grid> {
    let mut preset = Preset::Custom;
    let mut base = Vec::new();
    let mut custom = Vec::new();
    for (k, v) in parse_key_values(text, path)? {
        match k.as_str() {
            "preset" => preset = v.parse()?,
            "cell" => {
                let mut parts = v.split(';').map(str::trim).filter(|s| !s.is_empty());
                let method = parts.next().ok_or_else(|| Error::InvalidConfig("cell needs a label".into()))?.to_string();
                let overrides = parts
                    .map(|p| {
                        p.split_once('=')
                            .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                            .ok_or_else(|| Error::InvalidConfig(format!("cell {method}: expected key=value, got {p:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                custom.push(GridCell { method, overrides });
            }
            _ => base.push((k, v)),
        }
    }
    let mut probe = TrainConfig::new(ModelFamily::MiniMotifs);
    probe.apply(&base)?;
    let mut cells = preset_cells(preset, probe.model);
    cells.extend(custom);
    if cells.is_empty() {
        return Err(Error::InvalidConfig("grid has no cells".into()));
    }
    Ok(Grid { preset, base, cells })
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid(&text, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Recall(usize),
    MeanRecall(usize),
    Head,
    Body,
    Tail,
}

impl Metric {
    pub fn name(self) -> String {
        match self {
            Metric::Recall(k) => format!("R@{k}"),
            Metric::MeanRecall(k) => format!("mR@{k}"),
            Metric::Head => "HEAD".into(),
            Metric::Body => "BODY".into(),
            Metric::Tail => "TAIL".into(),
        }
    }

    pub fn of(self, r: &crate::metrics::EvalReport) -> f64 {
        match self {
            Metric::Recall(k) => r.recall_at.get(&k).copied().unwrap_or(f64::NAN),
            Metric::MeanRecall(k) => r.mean_recall_at.get(&k).copied().unwrap_or(f64::NAN),
            Metric::Head => r.partition_recall.head,
            Metric::Body => r.partition_recall.body,
            Metric::Tail => r.partition_recall.tail,
        }
    }
}

/// Mean and sample standard deviation (`n − 1`; 0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Validation metrics of the selected model, in column order.
    pub values: Vec<f64>,
    pub test_values: Vec<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub config: TrainConfig,
    pub seeds: Vec<SeedResult>,
    /// `(mean, σ)` per column over successful seeds.
    pub stats: Vec<(f64, f64)>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub preset: Preset,
    pub columns: Vec<Metric>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, method: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// `Method,<metric>_mean,<metric>_std,...,n_seeds`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut header = vec!["Method".to_string()];
        for c in &self.columns {
            header.push(format!("{}_mean", c.name()));
            header.push(format!("{}_std", c.name()));
        }
        header.push("n_seeds".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.method.clone()];
            for &(m, s) in &r.stats {
                rec.push(format!("{:.2}", 100.0 * m));
                rec.push(format!("{:.2}", 100.0 * s));
            }
            rec.push(r.seeds.len().to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Markdown rendering with `mean ± σ` cells (percent).
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method |");
        for c in &self.columns {
            s.push_str(&format!(" {} |", c.name()));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.columns.len()));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("| {} |", r.method));
            for &(m, sd) in &r.stats {
                s.push_str(&format!(" {:.2} ± {:.2} |", 100.0 * m, 100.0 * sd));
            }
            s.push('\n');
        }
        s
    }
}

/// Runs every cell for every seed (cells × seeds fan out over `exec`).
/// A failing run is recorded in its row and the table is still produced.
pub fn run_ablation(grid: &Grid, seeds: &[u64], meta: &CorpusMeta, corpus: &Corpus, exec: Exec, out: Option<&Path>) -> Result<(AblationTable, Vec<PathBuf>)> {
    if grid.cells.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one cell and one seed".into()));
    }
    let columns = preset_columns(grid.preset);
    let mut configs = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let mut cfg = TrainConfig::new(ModelFamily::MiniMotifs);
        cfg.apply(&grid.base)?;
        cfg.apply(&cell.overrides)?;
        cfg.validate()?;
        configs.push(cfg);
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results = exec::map(exec, &jobs, |&(c, seed)| {
        let mut cfg = configs[c].clone();
        cfg.set("seed", &seed.to_string())?;
        let dir = out.map(|o| o.join("runs").join(format!("cell{c:02}_seed{seed}")));
        let outcome = run_training(&cfg, meta, corpus, dir.as_deref())?;
        let rec = outcome.record;
        Ok::<_, Error>(SeedResult {
            seed,
            values: columns.iter().map(|m| m.of(rec.selected_val())).collect(),
            test_values: columns.iter().map(|m| m.of(&rec.test)).collect(),
            wall_clock_secs: rec.wall_clock_secs,
        })
    });
    let mut rows: Vec<AblationRow> = grid
        .cells
        .iter()
        .zip(&configs)
        .map(|(cell, cfg)| AblationRow { method: cell.method.clone(), config: cfg.clone(), seeds: vec![], stats: vec![], failures: vec![] })
        .collect();
    for (&(c, seed), r) in jobs.iter().zip(results) {
        match r {
            Ok(s) => rows[c].seeds.push(s),
            Err(e) => rows[c].failures.push(format!("seed {seed}: {e}")),
        }
    }
    for row in &mut rows {
        row.stats = (0..columns.len())
            .map(|i| mean_std(&row.seeds.iter().map(|s| s.values[i]).collect::<Vec<_>>()))
            .collect();
    }
    let table = AblationTable { preset: grid.preset, columns, rows };
    let mut files = Vec::new();
    if let Some(o) = out {
        std::fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
        let csv = o.join("ablation.csv");
        table.write_csv(&csv)?;
        let md = o.join("ablation.md");
        std::fs::write(&md, table.to_markdown()).map_err(|e| Error::io(&md, e))?;
        let json = o.join("ablation.json");
        std::fs::write(&json, serde_json::to_vec_pretty(&table)?).map_err(|e| Error::io(&json, e))?;
        files.extend([csv, md, json]);
    }
    Ok((table, files))
}

/// The alignment settings a row was trained with, for display.
pub fn describe(cfg: &TrainConfig) -> String {
    match cfg.align.target_mode {
        TargetMode::Off => "baseline".into(),
        t => format!(
            "{}+{} p={} λ={}",
            t.short(),
            match cfg.align.head_mode {
                HeadMode::Untied => "UPH",
                HeadMode::Tied => "PH",
            },
            cfg.align.p,
            cfg.align.lambda
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweeps_have_a_baseline_row_and_one_row_per_value() {
        let p = preset_cells(Preset::PSweep, ModelFamily::MiniMotifs);
        let names: Vec<&str> = p.iter().map(|c| c.method.as_str()).collect();
        assert_eq!(
            names,
            ["Motifs", "Align-Motifs (p=0.05)", "Align-Motifs (p=0.1)", "Align-Motifs (p=0.2)", "Align-Motifs (p=0.4)", "Align-Motifs (p=0.6)"]
        );
        let l = preset_cells(Preset::LambdaSweep, ModelFamily::MiniMotifs);
        assert_eq!(l[1].method, "Align-Motifs (λ=0.1)");
        assert_eq!(l[5].method, "Align-Motifs (λ=100)");
        let t = preset_cells(Preset::Variants, ModelFamily::MiniSgtr);
        assert_eq!(t.iter().map(|c| c.method.as_str()).collect::<Vec<_>>(), ["SGTR", "SGTR + SA + UPH", "SGTR + SSA + PH", "SGTR + SSA + UPH"]);
    }

    #[test]
    fn sample_standard_deviation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn grid_files_parse() {
        let g = parse_grid("preset=p_sweep\nmodel=mini-motifs\niterations=10\neval_every=5\ncell = extra; align=ssa; p=0.3\n", Path::new("g")).unwrap();
        assert_eq!(g.cells.len(), 7);
        assert_eq!(g.cells[6].overrides, vec![("align".to_string(), "ssa".to_string()), ("p".to_string(), "0.3".to_string())]);
        assert!(parse_grid("model=mini-motifs\n", Path::new("g")).is_err());
    }
}
