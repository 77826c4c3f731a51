//! `mptsnet` command-line tool.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mptsnet::data::{load_ts, normalize, save_ts, synth_planted_periods, Dataset, SynthSpec};
use mptsnet::model::{AttentionRecord, BranchMerge, ModelConfig, Variant};
use mptsnet::spectral::{dataset_spectrum, identify_main_periods, PeriodEntry};
use mptsnet::train::{
    argmax, evaluate_checkpoint, load_checkpoint, train, Checkpoint, Evaluation, TrainAbort,
    TrainConfig, TrainReport,
};

const USAGE: u8 = 1;
const DATA: u8 = 2;
const RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "mptsnet",
    version,
    about = "Multiscale periodic time-series classifier"
)]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Warnings and errors only.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a `.ts` split, selecting the best epoch on the test split.
    Train(TrainArgs),
    /// Accuracy, per-class accuracy and confusion matrix of a checkpoint.
    Eval(EvalArgs),
    /// Main periods of a dataset (after z-score normalization).
    InspectPeriods(InspectArgs),
    /// Write planted-period train/test `.ts` files.
    Synth(SynthArgs),
    /// Per-scale attention maps and composite maps for selected samples.
    ExportAttention(ExportArgs),
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Full,
    NoLocal,
    NoGlobal,
    NoMp,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoLocal => Variant::NoLocal,
            VariantArg::NoGlobal => Variant::NoGlobal,
            VariantArg::NoMp => Variant::NoMp,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MergeArg {
    Mean,
    ConcatProject,
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a positive number, got {s}"))
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a non-negative number, got {s}"))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_name = "TS")]
    train: PathBuf,
    #[arg(long, value_name = "TS")]
    test: PathBuf,
    /// Output directory for checkpoint.bin and report.json.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of periodic scales.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    d_embed: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    blocks: u64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    heads: u64,
    /// Odd convolution kernel sizes of the local extractor.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9,11")]
    kernels: Vec<usize>,
    #[arg(long, value_enum, default_value = "full")]
    variant: VariantArg,
    #[arg(long, value_enum, default_value = "mean")]
    branch_merge: MergeArg,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    #[arg(long, default_value_t = 1e-3, value_parser = positive_f64)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Global gradient-norm ceiling.
    #[arg(long, default_value_t = 5.0, value_parser = positive_f64, conflicts_with = "no_clip")]
    clip: f64,
    #[arg(long)]
    no_clip: bool,
    /// Visit training samples in a fixed order.
    #[arg(long)]
    no_shuffle: bool,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "TS")]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long, value_name = "TS")]
    data: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// Use the values as stored instead of z-scoring each variable first.
    #[arg(long)]
    raw: bool,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for NAME_TRAIN.ts and NAME_TEST.ts.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Planted periods per class: classes separated by ';', periods within a
    /// class by '+', e.g. "8;12" or "8+20;12".
    #[arg(long, default_value = "8;12")]
    periods: String,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    dims: u64,
    #[arg(long, default_value_t = 96, value_parser = clap::value_parser!(u64).range(4..))]
    length: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    per_class: u64,
    #[arg(long, default_value_t = 0.1, value_parser = non_negative_f64)]
    noise: f64,
    /// Seed of the training file; the test file uses seed + 1.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "Planted")]
    name: String,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "TS")]
    data: PathBuf,
    /// Sample indices into the dataset.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    samples: Vec<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

/// An error raised by the CLI itself, with its exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(Exit(code, _)) = cause.downcast_ref::<Exit>() {
            return *code;
        }
        let lib = cause
            .downcast_ref::<mptsnet::Error>()
            .or_else(|| cause.downcast_ref::<TrainAbort>().map(|a| &a.error));
        if let Some(e) = lib {
            return match e {
                mptsnet::Error::Usage(_) | mptsnet::Error::Config(_) => USAGE,
                mptsnet::Error::Data(_)
                | mptsnet::Error::DataAt { .. }
                | mptsnet::Error::Format { .. }
                | mptsnet::Error::Checkpoint(_)
                | mptsnet::Error::Io { .. } => DATA,
                mptsnet::Error::Shape(_) | mptsnet::Error::NonFinite(_) => RUNTIME,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return DATA;
        }
    }
    RUNTIME
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, _) => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain on one line, leaving out causes already quoted by an
/// outer message.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("MPTSNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Exit(
            USAGE,
            format!("MPTSNET_THREADS must be a positive integer, got {raw:?}"),
        )
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Exit(RUNTIME, format!("cannot configure {n} threads: {e}")))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectPeriods(a) => cmd_inspect_periods(a),
        Command::Synth(a) => cmd_synth(a),
        Command::ExportAttention(a) => cmd_export_attention(a),
    }
}

fn load(path: &Path) -> anyhow::Result<Dataset> {
    load_ts(path).map_err(|e| match e {
        mptsnet::Error::Io { .. } => anyhow::Error::new(e),
        other => anyhow::Error::new(other).context(format!("reading {}", path.display())),
    })
}

fn load_ck(path: &Path) -> anyhow::Result<Checkpoint> {
    load_checkpoint(path).map_err(|e| match e {
        mptsnet::Error::Io { .. } => anyhow::Error::new(e),
        other => anyhow::Error::new(other).context(format!("reading {}", path.display())),
    })
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Exit(DATA, format!("cannot create {}: {e}", dir.display())).into())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents)
        .map_err(|e| Exit(DATA, format!("cannot write {}: {e}", path.display())).into())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

fn usize_of(v: u64) -> usize {
    usize::try_from(v).unwrap_or(usize::MAX)
}

fn model_config(a: &TrainArgs, train: &Dataset) -> ModelConfig {
    let mut cfg = ModelConfig::new(train.dims(), train.series_length(), train.num_classes());
    cfg.k = usize_of(a.k);
    cfg.d_embed = usize_of(a.d_embed);
    cfg.num_blocks = usize_of(a.blocks);
    cfg.heads = usize_of(a.heads);
    cfg.kernel_sizes = a.kernels.clone();
    cfg.branch_merge = match a.branch_merge {
        MergeArg::Mean => BranchMerge::Mean,
        MergeArg::ConcatProject => BranchMerge::ConcatProject,
    };
    cfg.with_variant(a.variant.into())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    checkpoint: &'a Path,
    report: &'a Path,
    best_epoch: usize,
    best_eval_accuracy: f64,
    final_train_accuracy: f64,
    final_eval_accuracy: f64,
    periods: Vec<usize>,
}

fn epochs_csv(report: &TrainReport) -> String {
    let mut s =
        String::from("epoch,train_loss,train_accuracy,eval_loss,eval_accuracy,wall_time_secs\n");
    for e in &report.epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.epoch, e.train_loss, e.train_accuracy, e.eval_loss, e.eval_accuracy, e.wall_time_secs
        );
    }
    s
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let tr = load(&a.train)?;
    let te = load(&a.test)?;
    let cfg = model_config(&a, &tr);
    cfg.validate()?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: usize_of(a.batch_size),
        lr: a.lr,
        seed: a.seed,
        clip_norm: (!a.no_clip).then_some(a.clip),
        shuffle: !a.no_shuffle,
    };
    create_dir(&a.out)?;
    let ck_path = a.out.join("checkpoint.bin");
    let report_path = a.out.join("report.json");
    let outcome = match train(&cfg, &tr, &te, &tc, Some(&ck_path)) {
        Ok(o) => o,
        Err(abort) => {
            if let Some(r) = &abort.report {
                write_file(&report_path, r.to_json())?;
                log::warn!("partial report written to {}", report_path.display());
            }
            return Err(anyhow::Error::new(abort).context("training aborted"));
        }
    };
    let report = &outcome.report;
    write_file(&report_path, report.to_json())?;
    match a.format {
        Format::Json => {
            let last = report.last();
            let summary = TrainSummary {
                checkpoint: &ck_path,
                report: &report_path,
                best_epoch: report.best_epoch,
                best_eval_accuracy: report.best_eval_accuracy,
                final_train_accuracy: last.train_accuracy,
                final_eval_accuracy: last.eval_accuracy,
                periods: report.periods.entries.iter().map(|e| e.period).collect(),
            };
            println!("{}", to_json(&summary));
        }
        Format::Csv => print!("{}", epochs_csv(report)),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOut<'a> {
    samples: usize,
    accuracy: f64,
    loss: f64,
    classes: &'a [String],
    per_class_accuracy: &'a [Option<f64>],
    /// Rows are true classes, columns predictions.
    confusion: &'a [Vec<usize>],
}

fn eval_csv(names: &[String], ev: &Evaluation) -> String {
    let mut s = String::from("class,support,correct,accuracy\n");
    for (c, name) in names.iter().enumerate() {
        let support: usize = ev.confusion[c].iter().sum();
        let acc = ev.per_class_accuracy[c]
            .map(|a| a.to_string())
            .unwrap_or_default();
        let _ = writeln!(s, "{name},{support},{},{acc}", ev.confusion[c][c]);
    }
    let total: usize = ev.confusion.iter().flatten().sum();
    let correct: usize = (0..names.len()).map(|c| ev.confusion[c][c]).sum();
    let _ = writeln!(s, "all,{total},{correct},{}", ev.accuracy);
    s
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ck = load_ck(&a.checkpoint)?;
    let ds = load(&a.data)?;
    let ev = evaluate_checkpoint(&ck, &ds)?;
    match a.format {
        Format::Json => {
            let out = EvalOut {
                samples: ds.len(),
                accuracy: ev.accuracy,
                loss: ev.loss,
                classes: &ck.label_names,
                per_class_accuracy: &ev.per_class_accuracy,
                confusion: &ev.confusion,
            };
            println!("{}", to_json(&out));
        }
        Format::Csv => print!("{}", eval_csv(&ck.label_names, &ev)),
    }
    Ok(())
}

fn cmd_inspect_periods(a: InspectArgs) -> anyhow::Result<()> {
    let ds = load(&a.data)?;
    let values = if a.raw {
        ds.values
    } else {
        normalize(&ds, &[])?.0.values
    };
    let spectrum = dataset_spectrum(values.view())?;
    let periods = identify_main_periods(&spectrum, usize_of(a.k))?;
    match a.format {
        Format::Json => println!("{}", to_json(&periods.entries)),
        Format::Csv => print!("{}", periods_csv(&periods.entries)),
    }
    Ok(())
}

fn periods_csv(entries: &[PeriodEntry]) -> String {
    let mut s = String::from("frequency,period,mean_amplitude\n");
    for e in entries {
        let _ = writeln!(s, "{},{},{}", e.frequency, e.period, e.mean_amplitude);
    }
    s
}

fn parse_class_periods(spec: &str) -> anyhow::Result<Vec<Vec<f64>>> {
    let classes: Vec<Vec<f64>> = spec
        .split(';')
        .map(|class| {
            class
                .split('+')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()
        .map_err(|e| Exit(USAGE, format!("--periods {spec:?}: {e}")))?;
    if classes.is_empty() {
        bail!(Exit(USAGE, "--periods needs at least one class".into()));
    }
    Ok(classes)
}

#[derive(Serialize)]
struct SynthOut {
    train: PathBuf,
    test: PathBuf,
    samples_per_split: usize,
    classes: Vec<String>,
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut spec = SynthSpec {
        classes: parse_class_periods(&a.periods)?,
        dims: usize_of(a.dims),
        length: usize_of(a.length),
        per_class: usize_of(a.per_class),
        noise_std: a.noise,
        seed: a.seed,
    };
    let mut train_ds = synth_planted_periods(&spec)?;
    spec.seed = a.seed.wrapping_add(1);
    let mut test_ds = synth_planted_periods(&spec)?;
    train_ds.meta.problem_name = a.name.clone();
    test_ds.meta.problem_name = a.name.clone();
    create_dir(&a.out)?;
    let train_path = a.out.join(format!("{}_TRAIN.ts", a.name));
    let test_path = a.out.join(format!("{}_TEST.ts", a.name));
    save_ts(&train_ds, &train_path)?;
    save_ts(&test_ds, &test_path)?;
    let out = SynthOut {
        train: train_path,
        test: test_path,
        samples_per_split: train_ds.len(),
        classes: train_ds.label_names.clone(),
    };
    println!("{}", to_json(&out));
    Ok(())
}

#[derive(Serialize)]
struct SampleAttention {
    index: usize,
    label: Option<String>,
    predicted: String,
    logits: Vec<f64>,
    blocks: Vec<AttentionRecord>,
}

fn cmd_export_attention(a: ExportArgs) -> anyhow::Result<()> {
    let ck = load_ck(&a.checkpoint)?;
    let raw = load(&a.data)?;
    if let Some(&bad) = a.samples.iter().find(|&&i| i >= raw.len()) {
        bail!(mptsnet::Error::Data(format!(
            "sample index {bad} is out of range for {} samples",
            raw.len()
        )));
    }
    let ds = ck.prepare(&raw)?.select(&a.samples);
    let fwd = ck.model.forward(ds.values.view())?;
    let samples: Vec<SampleAttention> = a
        .samples
        .iter()
        .zip(fwd.logits.rows())
        .zip(fwd.attention)
        .map(|((&index, logits), blocks)| {
            let logits = logits.to_vec();
            SampleAttention {
                index,
                label: (!raw.labels.is_empty()).then(|| raw.label_names[raw.labels[index]].clone()),
                predicted: ck.label_names[argmax(&logits)].clone(),
                logits,
                blocks,
            }
        })
        .collect();
    create_dir(&a.out)?;
    let written = match a.format {
        Format::Json => {
            let path = a.out.join("attention.json");
            write_file(&path, to_json(&samples))?;
            vec![path]
        }
        Format::Csv => {
            let (attn, comp) = attention_csv(&samples);
            let p1 = a.out.join("attention.csv");
            let p2 = a.out.join("composite.csv");
            write_file(&p1, attn)?;
            write_file(&p2, comp)?;
            vec![p1, p2]
        }
    };
    println!("{}", to_json(&written));
    Ok(())
}

/// Long-format tables: one row per attention entry, one row per composite
/// timestep.
fn attention_csv(samples: &[SampleAttention]) -> (String, String) {
    let mut attn = String::from("sample,block,scale,frequency,period,alpha,query,key,weight\n");
    let mut comp = String::from("sample,block,t,value\n");
    for s in samples {
        for b in &s.blocks {
            for (si, sc) in b.scales.iter().enumerate() {
                for (q, row) in sc.attention.iter().enumerate() {
                    for (k, w) in row.iter().enumerate() {
                        let _ = writeln!(
                            attn,
                            "{},{},{si},{},{},{},{q},{k},{w}",
                            s.index, b.block, sc.frequency, sc.period, sc.alpha
                        );
                    }
                }
            }
            for (t, v) in b.composite.iter().enumerate() {
                let _ = writeln!(comp, "{},{},{t},{v}", s.index, b.block);
            }
        }
    }
    (attn, comp)
}
