//! Subcommands behind the `trackrank` binary.
//!
//! Each command resolves a [`RunConfig`] (file, then flag overrides),
//! validates it, and only then touches the filesystem. Commands return a
//! [`Report`] holding both the human-readable table and its JSON form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::aggregators::{AggregatorConfig, PoolMode, Readout, RnnCell, RnnConfig};
use crate::config::{split_path, DataSource, RunConfig};
use crate::data::format::Dtype;
use crate::data::{load_dataset, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::gradient_suite::{row_names, run_suite, SuiteRow, DEFAULT_SEEDS, DEFAULT_TOLERANCE};
use crate::trainer::{evaluate_model, Checkpoint, EvalRecord, TrainLog, Trainer};

#[derive(Debug, Parser)]
#[command(name = "trackrank", version, about = "Temporal aggregation heads for video re-identification")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct Common {
    /// JSON run config; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long, global = true)]
    pub json: bool,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (train/ and test/ splits).
    Synth(SynthArgs),
    /// Train one head and write checkpoints and logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test split.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every head and loss.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate several heads on the same data.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StorageDtype {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ReadoutFlag {
    FinalState,
    OutputAverage,
}

#[derive(Debug, Default, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub dtype: Option<StorageDtype>,
}

#[derive(Debug, Default, Args)]
pub struct TrainArgs {
    /// Head label (e.g. `att-tconv-softmax`, `gru-avg`) or family
    /// (`avg-pool`, `max-pool`, `attention`, `rnn`, `lstm`, `gru`).
    #[arg(long)]
    pub head: Option<String>,
    #[arg(long, value_enum)]
    pub readout: Option<ReadoutFlag>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Dataset directory with train/ and test/ splits.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A split directory or a dataset root (its test/ split is used).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub rerank: bool,
    /// Re-ranking mix weight on the original distance; implies --rerank.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Only these rows (repeatable).
    #[arg(long)]
    pub head: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    pub seeds: usize,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            head: Vec::new(),
            tolerance: DEFAULT_TOLERANCE,
            seeds: DEFAULT_SEEDS,
        }
    }
}

#[derive(Debug, Default, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Repetitions with consecutive seeds.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Synthetic drift rate override.
    #[arg(long)]
    pub drift: Option<f64>,
}

/// Output of a command. `success` is false when the command ran but its
/// checks failed (gradcheck).
#[derive(Debug, Clone)]
pub struct Report {
    pub text: String,
    pub json: Value,
    pub success: bool,
}

impl Report {
    fn ok(text: String, json: Value) -> Self {
        Self {
            text,
            json,
            success: true,
        }
    }

    pub fn render(&self, as_json: bool) -> String {
        if as_json {
            serde_json::to_string_pretty(&self.json).expect("report serializes") + "\n"
        } else {
            self.text.clone()
        }
    }
}

pub fn run(cli: &Cli) -> Result<Report> {
    match &cli.command {
        Command::Synth(a) => synth(&cli.common, a),
        Command::Train(a) => train(&cli.common, a),
        Command::Eval(a) => eval(&cli.common, a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Compare(a) => compare(&cli.common, a),
    }
}

fn base_config(common: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match common.config.as_deref().or(fallback) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn finish(mut cfg: RunConfig) -> Result<RunConfig> {
    cfg.apply_seed();
    cfg.validate()?;
    Ok(cfg)
}

/// Resolves `--head`. A family name keeps the current head's settings when
/// it is already of that family.
pub fn parse_head(name: &str, current: AggregatorConfig) -> Result<AggregatorConfig> {
    let rnn = |cell| {
        let (hidden_size, readout) = match current {
            AggregatorConfig::Rnn(r) => (r.hidden_size, r.readout),
            _ => (crate::aggregators::DEFAULT_HIDDEN_SIZE, Readout::FinalState),
        };
        AggregatorConfig::Rnn(RnnConfig {
            cell,
            hidden_size,
            readout,
        })
    };
    let current_cell = match current {
        AggregatorConfig::Rnn(r) => r.cell,
        _ => RnnCell::Lstm,
    };
    let family = match name {
        "avg" | "avg-pool" => Some(AggregatorConfig::Pooling { mode: PoolMode::Avg }),
        "max" | "max-pool" => Some(AggregatorConfig::Pooling { mode: PoolMode::Max }),
        "attention" | "att" => Some(match current {
            AggregatorConfig::Attention(_) => current,
            _ => default_heads()[4],
        }),
        "rnn" => Some(rnn(current_cell)),
        "lstm" => Some(rnn(RnnCell::Lstm)),
        "gru" => Some(rnn(RnnCell::Gru)),
        _ => None,
    };
    if let Some(h) = family {
        return Ok(h);
    }
    default_heads()
        .into_iter()
        .find(|h| h.label() == name)
        .ok_or_else(|| {
            let labels: Vec<String> = default_heads().iter().map(AggregatorConfig::label).collect();
            Error::config(format!(
                "unknown head {name:?}; expected a family (avg-pool, max-pool, attention, rnn, lstm, gru) or one of {}",
                labels.join(", ")
            ))
        })
}

fn default_heads() -> Vec<AggregatorConfig> {
    crate::config::CompareOptions::default().heads
}

fn require_out(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| Error::config("no output directory; pass --out or set \"out\" in the config"))
}

fn check_out_dir(dir: &Path, force: bool) -> Result<()> {
    let non_empty = match fs::read_dir(dir) {
        Ok(mut entries) => entries.next().is_some(),
        Err(_) if !dir.exists() => false,
        Err(e) => return Err(Error::io(dir, e)),
    };
    if non_empty && !force {
        return Err(Error::invalid(format!(
            "output directory {} is not empty (use --force to write into it)",
            dir.display()
        )));
    }
    if dir.exists() && !dir.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", dir.display())));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn synth(common: &Common, args: &SynthArgs) -> Result<Report> {
    let cfg = finish(base_config(common, None)?)?;
    let DataSource::Synthetic(synth) = &cfg.data else {
        return Err(Error::config("synth needs a \"synthetic\" data section"));
    };
    let out = require_out(&cfg)?;
    check_out_dir(&out, common.force)?;
    let (train, test) = crate::data::generate_synthetic(synth)?;
    let dtype = match args.dtype {
        Some(StorageDtype::F32) => Dtype::F32,
        _ => Dtype::F64,
    };
    write_dataset(&out.join("train"), &train, dtype)?;
    write_dataset(&out.join("test"), &test, dtype)?;
    let summary = |d: &Dataset| {
        json!({
            "identities": d.num_identities(),
            "tracklets": d.tracklets.len(),
            "queries": d.queries.len(),
            "frames": d.num_frames(),
        })
    };
    let text = format!(
        "wrote {}\n  train: {} identities, {} tracklets\n  test:  {} identities, {} tracklets, {} queries\n",
        out.display(),
        train.num_identities(),
        train.tracklets.len(),
        test.num_identities(),
        test.tracklets.len(),
        test.queries.len()
    );
    Ok(Report::ok(
        text,
        json!({"out": out, "synthetic": synth, "train": summary(&train), "test": summary(&test)}),
    ))
}

fn metrics_line(step: usize, map: f64, cmc: &BTreeMap<usize, f64>) -> String {
    let mut s = format!("step {step:>6}  mAP {map:.4}");
    for (k, v) in cmc {
        let _ = write!(s, "  R{k} {v:.4}");
    }
    s
}

fn train(common: &Common, args: &TrainArgs) -> Result<Report> {
    let mut cfg = base_config(common, None)?;
    if let Some(h) = &args.head {
        cfg.head = parse_head(h, cfg.head)?;
    }
    if let Some(r) = args.readout {
        let AggregatorConfig::Rnn(rnn) = &mut cfg.head else {
            return Err(Error::config("--readout applies only to rnn heads"));
        };
        rnn.readout = match r {
            ReadoutFlag::FinalState => Readout::FinalState,
            ReadoutFlag::OutputAverage => Readout::OutputAverage,
        };
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = args.lr {
        cfg.train.learning_rate = Some(lr);
    }
    if let Some(d) = &args.data {
        cfg.data = DataSource::Dir(d.clone());
    }
    let cfg = finish(cfg)?;
    let out = require_out(&cfg)?;
    check_out_dir(&out, common.force)?;
    let (train_set, test_set) = cfg.data.load()?;
    let train_cfg = cfg.train_config();
    let resumed = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let fresh = resumed.is_none();
    let mut trainer = match resumed {
        Some(c) => Trainer::resume(&train_set, c, train_cfg.clone())?,
        None => Trainer::new(&train_set, train_cfg.clone())?,
    };

    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join("config.json"), &cfg)?;
    let start = trainer.evaluate(&test_set, &cfg.eval)?;
    if fresh {
        trainer.checkpoint().save(&out.join("checkpoint_init"))?;
    }
    let mut log = TrainLog::default();
    trainer.run(Some((&test_set, &cfg.eval)), &mut log)?;
    trainer.checkpoint().save(&out.join("checkpoint"))?;

    let mut lines = String::new();
    for s in &log.steps {
        lines += &serde_json::to_string(s).expect("record serializes");
        lines.push('\n');
    }
    let log_path = out.join("loss_log.jsonl");
    fs::write(&log_path, lines).map_err(|e| Error::io(&log_path, e))?;
    let last = log.evals.last().expect("run always evaluates at the end").clone();
    let metrics = json!({
        "config": cfg,
        "train_config": train_cfg,
        "head": cfg.head.label(),
        "start": start,
        "evals": log.evals,
        "final": last,
    });
    write_json(&out.join("metrics.json"), &metrics)?;

    let mut text = format!("{} on {} training tracklets\n", cfg.head.label(), train_set.tracklets.len());
    let first = log.steps.first().map_or(f64::NAN, |s| s.loss);
    let final_loss = log.steps.last().map_or(f64::NAN, |s| s.loss);
    let _ = writeln!(text, "{}  (start)", metrics_line(start.step, start.map, &start.cmc));
    for e in &log.evals {
        let _ = writeln!(text, "{}", metrics_line(e.step, e.map, &e.cmc));
    }
    let _ = writeln!(text, "loss {first:.4} -> {final_loss:.4}");
    let _ = writeln!(text, "wrote {}", out.display());
    Ok(Report::ok(text, metrics))
}

fn eval(common: &Common, args: &EvalArgs) -> Result<Report> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let sibling = args.checkpoint.with_file_name("config.json");
    let fallback = sibling.is_file().then_some(sibling.as_path());
    let mut cfg = base_config(common, fallback)?;
    if let Some(d) = &args.data {
        cfg.data = DataSource::Dir(d.clone());
    }
    if args.rerank || args.lambda.is_some() {
        let mut r = cfg.eval.rerank.unwrap_or_default();
        if let Some(l) = args.lambda {
            r.lambda = l;
        }
        cfg.eval.rerank = Some(r);
    }
    let cfg = finish(cfg)?;
    let data = match &cfg.data {
        DataSource::Dir(d) => load_dataset(&split_path(d, "test"))?,
        synthetic => synthetic.load_test()?,
    };
    let model = checkpoint.model()?;
    let t = checkpoint.meta.config.sampler.t;
    let (_, report) = evaluate_model(&model, &checkpoint.params, &data, t, &cfg.eval)?;
    let record = EvalRecord::new(checkpoint.meta.step, &report);
    let mut text = format!(
        "{} checkpoint at step {} on {} queries / {} gallery{}\n",
        checkpoint.meta.config.model.head.label(),
        checkpoint.meta.step,
        data.queries.len(),
        data.tracklets.len(),
        match &cfg.eval.rerank {
            Some(r) => format!(" (re-ranked: k1={} k2={} lambda={})", r.k1, r.k2, r.lambda),
            None => String::new(),
        }
    );
    let _ = writeln!(text, "{}", metrics_line(record.step, record.map, &record.cmc));
    let _ = writeln!(text, "skipped queries: {}", report.num_skipped_queries);
    Ok(Report::ok(
        text,
        json!({
            "checkpoint": args.checkpoint,
            "step": checkpoint.meta.step,
            "head": checkpoint.meta.config.model.head.label(),
            "rerank": cfg.eval.rerank,
            "report": report,
        }),
    ))
}

fn gradcheck(args: &GradcheckArgs) -> Result<Report> {
    if !(args.tolerance > 0.0) {
        return Err(Error::config(format!("tolerance must be positive, got {}", args.tolerance)));
    }
    if args.seeds == 0 {
        return Err(Error::config("seeds must be at least 1"));
    }
    let names = row_names();
    for h in &args.head {
        if !names.contains(h) {
            return Err(Error::config(format!("unknown gradcheck row {h:?}; expected one of {}", names.join(", "))));
        }
    }
    let only = (!args.head.is_empty()).then_some(args.head.as_slice());
    let rows = run_suite(only, args.seeds, args.tolerance);
    let success = rows.iter().all(SuiteRow::ok);
    let mut text = format!("{:<20} {:>7} {:>12}  status\n", "row", "passed", "worst error");
    for r in &rows {
        let _ = writeln!(
            text,
            "{:<20} {:>3}/{:<3} {:>12.3e}  {}",
            r.name,
            r.passed,
            r.seeds,
            r.worst_error,
            if r.ok() { "PASS".to_string() } else { format!("FAIL ({})", r.failure.as_deref().unwrap_or("")) }
        );
    }
    let _ = writeln!(text, "tolerance {:e}, {} seeds: {}", args.tolerance, args.seeds, if success { "all passed" } else { "failures" });
    Ok(Report {
        text,
        json: json!({"tolerance": args.tolerance, "seeds": args.seeds, "passed": success, "rows": rows}),
        success,
    })
}

/// One row of the comparison table, averaged over runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub method: String,
    pub t: usize,
    pub untrained_map: f64,
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    /// Final mAP of each run.
    pub runs: Vec<f64>,
}

pub const BASELINE_LABEL: &str = "image-baseline";

fn compare(common: &Common, args: &CompareArgs) -> Result<Report> {
    let mut cfg = base_config(common, None)?;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(d) = &args.data {
        cfg.data = DataSource::Dir(d.clone());
    }
    if let Some(r) = args.runs {
        cfg.compare.runs = r;
    }
    if let Some(d) = args.drift {
        let DataSource::Synthetic(s) = &mut cfg.data else {
            return Err(Error::config("--drift needs synthetic data"));
        };
        s.drift_rate = d;
    }
    let cfg = finish(cfg)?;
    let rows = compare_heads(&cfg)?;
    let ranks = &cfg.eval.ranks;
    let mut text = format!("{:<20} {:>2} {:>9} {:>7}", "method", "T", "untrained", "mAP");
    for k in ranks {
        let _ = write!(text, " {:>7}", format!("R{k}"));
    }
    text.push('\n');
    for r in &rows {
        let _ = write!(text, "{:<20} {:>2} {:>9.4} {:>7.4}", r.method, r.t, r.untrained_map, r.map);
        for v in r.cmc.values() {
            let _ = write!(text, " {v:>7.4}");
        }
        text.push('\n');
    }
    let _ = writeln!(text, "{} run(s), {} steps each", cfg.compare.runs, cfg.train.steps);
    Ok(Report::ok(text, json!({"config": cfg, "rows": rows})))
}

/// Trains every configured head (and the T=1 baseline) for each run and
/// averages test metrics.
pub fn compare_heads(cfg: &RunConfig) -> Result<Vec<CompareRow>> {
    let mut variants: Vec<(String, RunConfig)> = Vec::new();
    if cfg.compare.baseline {
        let mut b = cfg.with_head(AggregatorConfig::Pooling { mode: PoolMode::Avg });
        b.sampler.t = 1;
        variants.push((BASELINE_LABEL.into(), b));
    }
    for h in &cfg.compare.heads {
        variants.push((h.label(), cfg.with_head(*h)));
    }
    let base_seed = cfg.seed.unwrap_or(0);
    let runs = cfg.compare.runs;
    let mut sums: Vec<(f64, f64, BTreeMap<usize, f64>, Vec<f64>)> =
        vec![(0.0, 0.0, BTreeMap::new(), Vec::new()); variants.len()];
    for run in 0..runs {
        let mut seeded = cfg.clone();
        seeded.set_seed(base_seed + run as u64);
        let (train_set, test_set) = seeded.data.load()?;
        for ((_, v), acc) in variants.iter().zip(sums.iter_mut()) {
            let mut v = v.clone();
            v.set_seed(base_seed + run as u64);
            let mut trainer = Trainer::new(&train_set, v.train_config())?;
            let before = trainer.evaluate(&test_set, &v.eval)?;
            let mut log = TrainLog::default();
            trainer.run(Some((&test_set, &v.eval)), &mut log)?;
            let after = log.evals.last().expect("final evaluation");
            acc.0 += before.map;
            acc.1 += after.map;
            for (k, c) in &after.cmc {
                *acc.2.entry(*k).or_default() += c;
            }
            acc.3.push(after.map);
        }
    }
    let n = runs as f64;
    Ok(variants
        .into_iter()
        .zip(sums)
        .map(|((method, v), (u, m, cmc, maps))| CompareRow {
            method,
            t: v.sampler.t,
            untrained_map: u / n,
            map: m / n,
            cmc: cmc.into_iter().map(|(k, c)| (k, c / n)).collect(),
            runs: maps,
        })
        .collect())
}
