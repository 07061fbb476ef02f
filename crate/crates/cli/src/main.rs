use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::bail;
use clap::{Parser, Subcommand};
use serde::Serialize;

use ecglab::checkpoint::{Checkpoint, CheckpointKind};
use ecglab::config::{Preset, ScoreSource, TuningMode};
use ecglab::data::{build_dataset, load_split, ClassCatalog, LoadedSample};
use ecglab::eval::{evaluate, judge_from_config, BuiltinJudge, Judge, MetricsReport, ModelReporter, RemoteJudge};
use ecglab::gradcheck::primitive_checks;
use ecglab::lora::trainable_param_count;
use ecglab::model::{grad_check_model, open_gates, MultimodalModel};
use ecglab::tokenizer::TokenSequence;
use ecglab::train::{fit, prepare_model, select_trainable, trained_groups, TrainItem};
use ecglab::{Error, OpKind, RunConfig, Tensor};

/// Exit codes shared by every subcommand.
mod code {
    pub const VERIFY: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const EXTERNAL: u8 = 4;
}

#[derive(Parser)]
#[command(name = "ecglab", version, about = "Multimodal ECG interpretation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration; the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set lora.rank=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the instruction dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Also write each sample's signal as CSV.
        #[arg(long)]
        export_signals: bool,
    },
    /// Fine-tune and write a checkpoint plus a JSON Lines step log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory holding `train.jsonl`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TuningMode>,
        /// Checkpoint path; defaults to `train.checkpoint_path`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Step log; defaults to the checkpoint path with `.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate on the test split and print a MetricsReport as JSON.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained checkpoint; without it the untrained model is evaluated.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory holding `test.jsonl`.
        #[arg(long)]
        data: PathBuf,
        /// `builtin` or the URL of a remote judge.
        #[arg(long)]
        judge: Option<String>,
        /// Per-class AUC scores: `text` (labels found in the report) or
        /// `answer_posterior` (likelihood of every templated answer).
        #[arg(long, value_parser = parse_scores)]
        scores: Option<ScoreSource>,
        /// Evaluate only the first N test samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train and evaluate one LoRA model per rank, plus a partial-tuning row.
    SweepRank {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32, 64, 128])]
        ranks: Vec<usize>,
        /// Skip the partial-tuning comparison row.
        #[arg(long)]
        no_partial: bool,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every primitive and model component.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input seeds for the primitive checks.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Coordinates probed per parameter tensor.
        #[arg(long, default_value_t = 2)]
        coords: usize,
        /// Break the backward rule of one op (verification fixture).
        #[arg(long, hide = true, value_parser = parse_op)]
        inject_fault: Option<OpKind>,
    },
    /// Fold LoRA adapters into their host weights.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<TuningMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown mode {s:?}"))
}

fn parse_scores(s: &str) -> Result<ScoreSource, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown score source {s:?}"))
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| format!("unknown op {s:?}"))
}

/// Failure that maps straight to an exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Exit(c, _)) = err.downcast_ref::<Exit>() {
        return *c;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::Config(_) | Error::Validation(_) | Error::Layout(_) | Error::Stratification(_) | Error::State(_),
        ) => code::CONFIG,
        Some(Error::Io { .. } | Error::Format { .. }) => code::IO,
        Some(Error::Judge(_)) => code::EXTERNAL,
        _ => code::VERIFY,
    }
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => "{}".to_string(),
    };
    Ok(RunConfig::from_json_str(&text, &args.overrides)?)
}

fn refuse_paper_shape(cfg: &RunConfig, what: &str) -> anyhow::Result<()> {
    if cfg.preset == Preset::PaperShape {
        bail!(Exit(
            code::CONFIG,
            format!("the paper-shape preset is for shape validation only; refusing to {what} at full scale"),
        ));
    }
    Ok(())
}

fn load_test(data: &Path, limit: Option<usize>) -> anyhow::Result<Vec<LoadedSample>> {
    let mut samples = load_split(&data.join("test.jsonl"))?;
    if let Some(n) = limit {
        samples.truncate(n);
    }
    Ok(samples)
}

fn build_judge(cfg: &RunConfig, flag: Option<&str>) -> anyhow::Result<Box<dyn Judge>> {
    Ok(match flag {
        None => judge_from_config(&cfg.judge)?,
        Some("builtin") => Box::new(BuiltinJudge),
        Some(url) => Box::new(RemoteJudge::new(url, Duration::from_secs_f64(cfg.judge.timeout_s))),
    })
}

fn report(
    model: &MultimodalModel,
    cfg: &RunConfig,
    samples: &[LoadedSample],
    judge: &dyn Judge,
) -> anyhow::Result<MetricsReport> {
    let reporter = ModelReporter {
        model,
        max_new_tokens: cfg.eval.max_new_tokens,
        scores: cfg.eval.scores,
    };
    Ok(evaluate(
        &reporter,
        samples,
        &ClassCatalog::default(),
        judge,
        cfg.eval.scores,
        &cfg.fingerprint(),
    )?)
}

fn train_model(cfg: &RunConfig, data: &Path, log: Option<&mut dyn Write>) -> anyhow::Result<MultimodalModel> {
    let channels = cfg.model.vision.channels;
    let items: Vec<TrainItem> = load_split(&data.join("train.jsonl"))?
        .iter()
        .map(|s| TrainItem::from_loaded(s, channels))
        .collect();
    let mut model = prepare_model(cfg, cfg.train.mode)?;
    fit(&mut model, &items, &cfg.train, log)?;
    Ok(model)
}

fn synth(cfg: &RunConfig, out: &Path, seed: u64, export: bool) -> anyhow::Result<()> {
    let summary = build_dataset(out, &cfg.data, cfg.model.vision.image_size, seed, export)?;
    let names = ClassCatalog::default().names();
    println!("train manifest: {}", summary.train_manifest.display());
    println!("test manifest: {}", summary.test_manifest.display());
    for (i, name) in names.iter().enumerate() {
        println!(
            "{name:>14}  train {:>4}  test {:>4}",
            summary.train_counts[i], summary.test_counts[i]
        );
    }
    Ok(())
}

fn train(
    mut cfg: RunConfig,
    data: &Path,
    mode: Option<TuningMode>,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
) -> anyhow::Result<()> {
    refuse_paper_shape(&cfg, "train")?;
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    let out = out
        .or_else(|| cfg.train.checkpoint_path.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no checkpoint path: pass --out or set train.checkpoint_path".into()))?;
    let log = log.unwrap_or_else(|| out.with_extension("log.jsonl"));
    let file = File::create(&log).map_err(|e| Error::io(&log, e))?;
    let mut writer = BufWriter::new(file);
    let model = train_model(&cfg, data, Some(&mut writer))?;
    writer.flush().map_err(|e| Error::io(&log, e))?;
    Checkpoint::capture(&model, &cfg, cfg.train.mode)?.save(&out)?;
    println!("checkpoint: {}", out.display());
    println!("log: {}", log.display());
    Ok(())
}

fn eval(
    mut cfg: RunConfig,
    checkpoint: Option<&Path>,
    data: &Path,
    judge: Option<&str>,
    scores: Option<ScoreSource>,
    limit: Option<usize>,
) -> anyhow::Result<()> {
    if let Some(s) = scores {
        cfg.eval.scores = s;
    }
    let judge = build_judge(&cfg, judge)?;
    let model = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let model = ck.restore()?;
            cfg.model = ck.config.model.clone();
            cfg.lora = ck.config.lora.clone();
            cfg.train = ck.config.train.clone();
            model
        }
        None => {
            refuse_paper_shape(&cfg, "evaluate")?;
            MultimodalModel::new(&cfg.model)?
        }
    };
    let samples = load_test(data, limit)?;
    let rep = report(&model, &cfg, &samples, judge.as_ref())?;
    println!("{}", rep.to_json());
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    mode: TuningMode,
    rank: Option<usize>,
    alpha: Option<f64>,
    trainable_params: usize,
    module_groups: Vec<&'static str>,
    metrics: MetricsReport,
}

#[derive(Serialize)]
struct SweepTable {
    rows: Vec<SweepRow>,
}

fn sweep_rank(
    cfg: RunConfig,
    data: &Path,
    ranks: &[usize],
    partial: bool,
    limit: Option<usize>,
    out: &Path,
) -> anyhow::Result<()> {
    refuse_paper_shape(&cfg, "sweep")?;
    if ranks.is_empty() {
        bail!(Exit(code::CONFIG, "--ranks must list at least one rank".into()));
    }
    let samples = load_test(data, limit)?;
    let judge = build_judge(&cfg, None)?;
    let ratio = cfg.lora.alpha / cfg.lora.rank as f64;
    let mut rows = Vec::new();
    for &rank in ranks {
        let mut c = cfg.clone();
        c.train.mode = TuningMode::Lora;
        c.lora.rank = rank;
        c.lora.alpha = ratio * rank as f64;
        let model = train_model(&c, data, None)?;
        let state = model.lora.as_ref().expect("lora mode attaches adapters");
        let names = select_trainable(&model, TuningMode::Lora)?;
        let metrics = report(&model, &c, &samples, judge.as_ref())?;
        eprintln!("rank {rank}: macro AUC {:.4}", metrics.macro_auc);
        rows.push(SweepRow {
            mode: TuningMode::Lora,
            rank: Some(rank),
            alpha: Some(c.lora.alpha),
            trainable_params: trainable_param_count(&model.params, state),
            module_groups: trained_groups(&names).into_iter().collect(),
            metrics,
        });
    }
    if partial {
        let mut c = cfg.clone();
        c.train.mode = TuningMode::Partial;
        let model = train_model(&c, data, None)?;
        let names = select_trainable(&model, TuningMode::Partial)?;
        let metrics = report(&model, &c, &samples, judge.as_ref())?;
        eprintln!("partial: macro AUC {:.4}", metrics.macro_auc);
        rows.push(SweepRow {
            mode: TuningMode::Partial,
            rank: None,
            alpha: None,
            trainable_params: model.params.trainable_numel(),
            module_groups: trained_groups(&names).into_iter().collect(),
            metrics,
        });
    }
    let json = serde_json::to_string_pretty(&SweepTable { rows }).expect("serializable");
    std::fs::write(out, &json).map_err(|e| Error::io(out, e))?;
    println!("{json}");
    Ok(())
}

const PRIMITIVE_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-4;

fn gradcheck(cfg: RunConfig, seeds: u64, coords: usize, fault: Option<OpKind>) -> anyhow::Result<()> {
    refuse_paper_shape(&cfg, "run finite-difference checks")?;
    let mut failed: Vec<String> = Vec::new();

    let mut worst: Vec<(OpKind, &'static str, f64)> = Vec::new();
    for seed in 0..seeds {
        for c in primitive_checks(seed, 1e-5, fault)? {
            match worst.iter_mut().find(|(op, arg, _)| *op == c.op && *arg == c.arg) {
                Some(w) => w.2 = w.2.max(c.max_rel_error),
                None => worst.push((c.op, c.arg, c.max_rel_error)),
            }
        }
    }
    for (op, arg, err) in &worst {
        let ok = *err < PRIMITIVE_TOL;
        println!(
            "{} op {:<14} {:<7} max rel error {err:.3e}",
            if ok { "PASS" } else { "FAIL" },
            op.name(),
            arg
        );
        if !ok {
            failed.push(format!("op {}", op.name()));
        }
    }

    let mut model = MultimodalModel::new(&cfg.model)?;
    model.attach_lora(&cfg.lora)?;
    model.params.set_all_trainable(true);
    open_gates(&mut model, 0.5);
    for (name, p) in model.params.iter_mut() {
        if name.ends_with(".lora_b") {
            let shape = p.tensor.shape().to_vec();
            p.tensor = Tensor::randn(&shape, 0.02, 11).with_requires_grad(true);
        }
    }
    let s = cfg.model.vision.image_size;
    let image = Tensor::randn(&[s, s, cfg.model.vision.channels], 0.3, 5);
    let seq = TokenSequence::instruction("Describe.", "normal.");
    let checks = grad_check_model(&model, &image, &seq, coords, 1e-5, fault)?;
    let mut components: Vec<(&'static str, usize, f64)> = Vec::new();
    for c in &checks {
        match components.iter_mut().find(|(name, _, _)| *name == c.component) {
            Some(e) => {
                e.1 += c.coords;
                e.2 = e.2.max(c.max_rel_error);
            }
            None => components.push((c.component, c.coords, c.max_rel_error)),
        }
    }
    for (name, n, err) in &components {
        let ok = *err < MODEL_TOL;
        println!(
            "{} component {name:<14} {n:>4} coords max rel error {err:.3e}",
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(format!("component {name}"));
        }
    }
    if !failed.is_empty() {
        bail!(Exit(
            code::VERIFY,
            format!("gradient check failed: {}", failed.join(", "))
        ));
    }
    Ok(())
}

fn merge(checkpoint: &Path, out: &Path) -> anyhow::Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.kind != CheckpointKind::Lora {
        bail!(Exit(
            code::CONFIG,
            format!(
                "{} is a {:?} checkpoint with no adapters to merge",
                checkpoint.display(),
                ck.kind
            ),
        ));
    }
    ck.merged()?.save(out)?;
    println!("merged checkpoint: {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            cfg,
            out,
            seed,
            export_signals,
        } => synth(&load_config(&cfg)?, &out, seed, export_signals),
        Command::Train {
            cfg,
            data,
            mode,
            out,
            log,
            seed,
        } => {
            let mut c = load_config(&cfg)?;
            if let Some(s) = seed {
                c.train.seed = s;
            }
            train(c, &data, mode, out, log)
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
            judge,
            scores,
            limit,
        } => eval(
            load_config(&cfg)?,
            checkpoint.as_deref(),
            &data,
            judge.as_deref(),
            scores,
            limit,
        ),
        Command::SweepRank {
            cfg,
            data,
            ranks,
            no_partial,
            limit,
            out,
        } => sweep_rank(load_config(&cfg)?, &data, &ranks, !no_partial, limit, &out),
        Command::Gradcheck {
            cfg,
            seeds,
            coords,
            inject_fault,
        } => gradcheck(load_config(&cfg)?, seeds, coords, inject_fault),
        Command::Merge { checkpoint, out } => merge(&checkpoint, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
