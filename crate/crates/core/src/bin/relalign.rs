//! `relalign` command line: corpus generation, training, evaluation,
//! ablation grids and reports. Every command writes under `--out` and ends
//! by hashing what it wrote into `manifest.json`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use relalign::checkpoint::Checkpoint;
use relalign::datagen::{generate_corpus_with, read_corpus, write_corpus, CorpusSpec, Split};
use relalign::evaluate::{evaluate, EvalOptions};
use relalign::exec::Exec;
use relalign::harness::ablate::{read_grid, run_ablation};
use relalign::harness::config::{parse_ks, read_key_values};
use relalign::harness::manifest::Manifest;
use relalign::harness::report::{collect_records, write_report};
use relalign::harness::{run_training, TrainConfig};
use relalign::models::{EvalMode, ModelFamily};

const DATA_ENV: &str = "RELALIGN_DATA";

#[derive(Parser)]
#[command(name = "relalign", version, about = "Relation alignment for scene graph generation on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic long-tail corpus.
    Gen(GenArgs),
    /// Train one model and evaluate the selected checkpoint on test.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Run an ablation grid over several seeds.
    Ablate(AblateArgs),
    /// Aggregate finished runs into tables and plot series.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArg {
    /// Corpus directory (defaults to $RELALIGN_DATA).
    #[arg(long)]
    data: Option<PathBuf>,
}

impl DataArg {
    fn resolve(&self) -> Result<PathBuf> {
        match &self.data {
            Some(d) => Ok(d.clone()),
            None => std::env::var_os(DATA_ENV).map(PathBuf::from).with_context(|| format!("no corpus given: pass --data or set {DATA_ENV}")),
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output directory (defaults to $RELALIGN_DATA).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    num_object_classes: Option<usize>,
    /// Including background.
    #[arg(long)]
    num_predicates: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    max_entities: Option<usize>,
    #[arg(long)]
    zipf_s: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// key=value file; its entries override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_exec)]
    exec: Option<Exec>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    out: PathBuf,
    /// mini-sgtr | mini-motifs
    #[arg(long)]
    model: Option<String>,
    /// predcls | sgcls | sgdet
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// ssa | sa | off
    #[arg(long)]
    align: Option<String>,
    /// untied | tied
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Evaluation Ks, comma separated.
    #[arg(long)]
    k: Option<String>,
    /// desk | micro
    #[arg(long)]
    size: Option<String>,
    /// parallel | sequential
    #[arg(long)]
    exec: Option<String>,
    /// Extra key=value overrides (repeatable), applied after the other flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// key=value file; its entries override flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "20,50,100")]
    k: String,
    /// Overrides the mode stored in the checkpoint.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    no_graph_constraint: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_exec, default_value = "parallel")]
    exec: Exec,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    grid: PathBuf,
    /// Runs seeds 0..N for every cell.
    #[arg(long, default_value_t = 4)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_exec, default_value = "parallel")]
    exec: Exec,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_exec(s: &str) -> std::result::Result<Exec, String> {
    match s {
        "parallel" => Ok(Exec::Parallel),
        "sequential" => Ok(Exec::Sequential),
        _ => Err(format!("expected parallel or sequential, got {s:?}")),
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn finish(out: &Path, command: &str, settings: serde_json::Value) -> Result<()> {
    let args = std::env::args().collect();
    let path = Manifest::collect(out, command, args, settings)?.write(out)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn gen(a: GenArgs) -> Result<()> {
    let out = match a.out {
        Some(o) => o,
        None => std::env::var_os(DATA_ENV).map(PathBuf::from).with_context(|| format!("no output directory: pass --out or set {DATA_ENV}"))?,
    };
    let mut spec = CorpusSpec::default();
    macro_rules! flag {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { spec.$f = v; } )* };
    }
    flag!(n_train, n_val, n_test, num_object_classes, num_predicates, height, width, feature_dim, max_entities, zipf_s, seed);
    if let Some(path) = &a.config {
        // round-trip through JSON so every CorpusSpec field is addressable by name
        let mut value = serde_json::to_value(&spec)?;
        for (k, v) in read_key_values(path)? {
            let key = k.replace('-', "_");
            let slot = value.get_mut(&key).with_context(|| format!("{}: unknown corpus key {k:?}", path.display()))?;
            *slot = serde_json::from_str(&v).with_context(|| format!("{}: bad value for {k}: {v:?}", path.display()))?;
        }
        spec = serde_json::from_value(value)?;
    }
    spec.validate()?;
    mkdir(&out)?;
    let corpus = generate_corpus_with(&spec, a.exec.unwrap_or_default())?;
    let (meta, _) = write_corpus(&out, &spec, &corpus)?;
    eprintln!(
        "corpus {} ({} / {} / {} samples), head={:?} body={:?} tail={:?}",
        spec.hash(),
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        meta.partition.head,
        meta.partition.body,
        meta.partition.tail
    );
    finish(&out, "gen", json!({ "spec": spec, "corpus_hash": spec.hash() }))
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    push("model", a.model.clone());
    push("mode", a.mode.clone());
    push("p", a.p.map(|v| v.to_string()));
    push("lambda", a.lambda.map(|v| v.to_string()));
    push("align", a.align.clone());
    push("head", a.head.clone());
    push("seed", a.seed.map(|v| v.to_string()));
    push("iterations", a.iterations.map(|v| v.to_string()));
    push("eval_every", a.eval_every.map(|v| v.to_string()));
    push("batch_size", a.batch_size.map(|v| v.to_string()));
    push("lr", a.lr.map(|v| v.to_string()));
    push("k", a.k.clone());
    push("size", a.size.clone());
    push("exec", a.exec.clone());
    for s in &a.set {
        let (k, v) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(path) = &a.config {
        pairs.extend(read_key_values(path)?);
    }
    // the family decides the defaults, so it is resolved before anything else
    let family = match pairs.iter().rev().find(|(k, _)| k == "model") {
        Some((_, v)) => v.parse::<ModelFamily>()?,
        None => bail!("no model given: pass --model mini-sgtr|mini-motifs or set model= in --config"),
    };
    let mut cfg = TrainConfig::new(family);
    cfg.apply(&pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let data = a.data.resolve()?;
    let (meta, corpus) = read_corpus(&data).with_context(|| format!("reading corpus at {}", data.display()))?;
    mkdir(&a.out)?;
    let outcome = run_training(&cfg, &meta, &corpus, Some(&a.out))?;
    let r = &outcome.record;
    let sel = &r.eval_points[r.selected];
    eprintln!(
        "selected iteration {} (val mR@50 {:.4}); test R@50 {:.4} mR@50 {:.4} in {:.1}s",
        sel.iteration,
        sel.val.mean_recall(50).unwrap_or(0.0),
        r.test.recall_at.get(&50).copied().unwrap_or(0.0),
        r.test.mean_recall(50).unwrap_or(0.0),
        r.wall_clock_secs
    );
    finish(&a.out, "train", json!({ "config": cfg, "data": data, "corpus_hash": meta.spec.hash() }))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = a.data.resolve()?;
    let (meta, corpus) = read_corpus(&data).with_context(|| format!("reading corpus at {}", data.display()))?;
    if ckpt.corpus_hash != meta.spec.hash() {
        bail!("checkpoint was trained on corpus {} but {} holds {}", ckpt.corpus_hash, data.display(), meta.spec.hash());
    }
    let model = ckpt.restore()?;
    let split: Split = a.split.parse()?;
    let mode: EvalMode = match &a.mode {
        Some(m) => m.parse()?,
        None => ckpt.mode,
    };
    let ks = parse_ks(&a.k)?;
    let samples = match split {
        Split::Train => &corpus.train,
        Split::Val => &corpus.val,
        Split::Test => &corpus.test,
    };
    let opts = EvalOptions {
        mode,
        ks: &ks,
        graph_constraint: !a.no_graph_constraint,
        num_predicates: meta.spec.num_predicates,
        partition: &meta.partition,
        exec: a.exec,
    };
    let report = evaluate(&model, samples, &opts)?;
    mkdir(&a.out)?;
    let stem = format!("eval_{}_{}", a.split, mode.name());
    report.write_csv(&a.out.join(format!("{stem}.csv")))?;
    report.write_json(&a.out.join(format!("{stem}.json")))?;
    report.write_per_predicate_csv(&a.out.join(format!("{stem}_per_predicate.csv")), &meta.partition)?;
    for k in &ks {
        eprintln!("R@{k} {:.4}  mR@{k} {:.4}", report.recall_at.get(k).copied().unwrap_or(0.0), report.mean_recall(*k).unwrap_or(0.0));
    }
    finish(
        &a.out,
        "eval",
        json!({ "checkpoint": a.checkpoint, "split": a.split, "mode": mode, "ks": ks, "graph_constraint": !a.no_graph_constraint }),
    )
}

fn ablate(a: AblateArgs) -> Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let grid = read_grid(&a.grid)?;
    let data = a.data.resolve()?;
    let (meta, corpus) = read_corpus(&data).with_context(|| format!("reading corpus at {}", data.display()))?;
    mkdir(&a.out)?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let (table, _) = run_ablation(&grid, &seeds, &meta, &corpus, a.exec, Some(&a.out))?;
    println!("{}", table.to_markdown());
    for row in table.rows.iter().filter(|r| !r.failures.is_empty()) {
        eprintln!("{}: {} failed run(s): {}", row.method, row.failures.len(), row.failures.join("; "));
    }
    finish(&a.out, "ablate", json!({ "grid": grid, "seeds": seeds, "corpus_hash": meta.spec.hash() }))
}

fn report(a: ReportArgs) -> Result<()> {
    let records = collect_records(&a.runs)?;
    mkdir(&a.out)?;
    write_report(&records, &a.out)?;
    eprintln!("{} run(s) summarised", records.len());
    let runs: Vec<String> = records.iter().map(|(d, _)| d.display().to_string()).collect();
    finish(&a.out, "report", json!({ "runs": runs }))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
    }
}
