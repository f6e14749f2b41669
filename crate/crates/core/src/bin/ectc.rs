use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ectc::check::{self, CheckOptions, CheckSize};
use ectc::data_io::{self, Checkpoint, DatasetRecord};
use ectc::lattice::{GammaTarget, LabelVocab};
use ectc::model::{self, Supervision, TrainConfig};
use ectc::pipeline::{self, AlignmentRow};
use ectc::similarity::SimilarityMode;
use ectc::synth::{self, AnchorLevel, SyntheticSpec};
use ectc::{Error, Result};

#[derive(Parser)]
#[command(name = "ectc", version, about = "Weakly supervised action labeling with similarity-reweighted CTC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test corpus.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint's per-frame predictions.
    Eval(EvalArgs),
    /// Export training-set alignments under the checkpoint's supervision.
    Align(AlignArgs),
    /// Verify the lattice against brute-force enumeration.
    Check(CheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON spec; inline flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory for train.jsonl, test.jsonl and vocab.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    proto_scale: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    segments_min: Option<usize>,
    #[arg(long)]
    segments_max: Option<usize>,
    #[arg(long)]
    length_min: Option<usize>,
    #[arg(long)]
    length_max: Option<usize>,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    test_videos: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Store sparse annotations: `per-segment-1` or a fraction in (0, 1].
    #[arg(long)]
    anchors: Option<AnchorLevel>,
}

#[derive(Args)]
struct DataArgs {
    /// Corpus file, one JSON record per line.
    #[arg(long)]
    data: PathBuf,
    /// Vocabulary file; defaults to vocab.txt next to the data.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "weak")]
    mode: Supervision,
    #[arg(long, default_value = "both")]
    similarity: SimilarityMode,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Target cluster length for the temporal k-means.
    #[arg(long)]
    cluster_len: Option<usize>,
    #[arg(long)]
    kmeans_iters: Option<usize>,
    /// Semi mode: sample anchors from frame labels (`per-segment-1` or a
    /// fraction) instead of using stored annotations.
    #[arg(long)]
    annot_fraction: Option<AnchorLevel>,
    #[arg(long)]
    gamma_target: Option<GammaTarget>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write per-video rows and the summary as JSON lines.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Alignment rows as JSON lines.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// Comma-separated `AxT` instance sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<CheckSize>>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_wrong_sign: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Align(args) => run_align(args),
        Command::Check(args) => run_check(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run_synth(args: SynthArgs) -> Result<ExitCode> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => SyntheticSpec::default(),
    };
    macro_rules! override_fields {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { spec.$field = v; })* };
    }
    override_fields!(
        actions, dim, proto_scale, sigma, drift, segments_min, segments_max, length_min, length_max, videos,
        test_videos, seed
    );
    if args.anchors.is_some() {
        spec.anchors = args.anchors;
    }
    let corpus = synth::generate_corpus(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    data_io::write_vocab(&corpus.vocab, &args.out.join("vocab.txt"))?;
    data_io::write_corpus(&corpus.train, &corpus.vocab, &args.out.join("train.jsonl"))?;
    data_io::write_corpus(&corpus.test, &corpus.vocab, &args.out.join("test.jsonl"))?;
    std::fs::write(args.out.join("spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    for (split, records) in [("train", &corpus.train), ("test", &corpus.test)] {
        let s = synth::corpus_stats(records);
        println!(
            "split={split} records={} frames={} mean_segments={:.4} within_cosine={:.4} between_cosine={:.4}",
            s.records, s.frames, s.mean_segments, s.within_cosine, s.between_cosine
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn load_data(args: &DataArgs) -> Result<(LabelVocab, Vec<DatasetRecord>)> {
    let vocab_path = match &args.vocab {
        Some(p) => p.clone(),
        None => args
            .data
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.txt"),
    };
    let vocab = data_io::read_vocab(&vocab_path)?;
    let records = data_io::read_corpus(&args.data, &vocab)?;
    if records.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no records", args.data.display())));
    }
    Ok((vocab, records))
}

fn run_train(args: TrainArgs) -> Result<ExitCode> {
    let (vocab, records) = load_data(&args.data)?;
    let mut config = TrainConfig {
        mode: args.mode,
        similarity: args.similarity,
        annot: args.annot_fraction,
        ..TrainConfig::default()
    };
    macro_rules! override_fields {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { config.$field = v; })* };
    }
    override_fields!(theta, hidden, lr, weight_decay, clip, epochs, seed, cluster_len, kmeans_iters, gamma_target);
    config.validate()?;
    let input_dim = records[0].features.cols();
    let items = model::prepare_corpus(&records, &config)?;
    println!(
        "mode={} similarity={} records={} actions={} input_dim={input_dim} hidden={} relaxed_tracks={}",
        config.mode,
        config.similarity,
        records.len(),
        vocab.len(),
        config.hidden,
        items.iter().filter(|i| i.relaxed).count()
    );
    let outcome = model::train(&items, input_dim, vocab.len(), &config, |e| {
        let acc = e.train_frame_acc.map_or_else(String::new, |a| format!(" train_frame_acc={a:.6}"));
        println!("epoch={} mean_loss={:.6}{acc}", e.epoch, e.mean_loss);
    })?;
    let ckpt = Checkpoint {
        vocab,
        config,
        params: outcome.params,
    };
    data_io::save_checkpoint(&ckpt, &args.out)?;
    println!("checkpoint={} params={}", args.out.display(), ckpt.params.num_params());
    Ok(ExitCode::SUCCESS)
}

fn load_checked(data: &DataArgs, checkpoint: &Path) -> Result<(Checkpoint, LabelVocab, Vec<DatasetRecord>)> {
    let ckpt = data_io::load_checkpoint(checkpoint)?;
    let (vocab, records) = load_data(data)?;
    ckpt.ensure_vocab(&vocab)?;
    if let Some(r) = records.iter().find(|r| r.features.cols() != ckpt.params.input_dim) {
        return Err(Error::Shape(format!(
            "record {} has {} features, checkpoint expects {}",
            r.id,
            r.features.cols(),
            ckpt.params.input_dim
        )));
    }
    Ok((ckpt, vocab, records))
}

fn run_eval(args: EvalArgs) -> Result<ExitCode> {
    let (ckpt, _, records) = load_checked(&args.data, &args.checkpoint)?;
    let report = pipeline::evaluate(&ckpt.params, &records)?;
    for r in &report.rows {
        println!(
            "id={} frames={} frame_acc={:.6} unit_acc={:.6} jaccard={:.6}",
            r.id, r.frames, r.frame_acc, r.unit_acc, r.jaccard
        );
    }
    let s = &report.summary;
    println!(
        "summary videos={} frame_acc={:.6} unit_acc={:.6} jaccard={:.6}",
        s.videos, s.frame_acc, s.unit_acc, s.jaccard
    );
    if let Some(path) = &args.report {
        pipeline::write_jsonl(&report.to_rows(), path)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn mean_of(rows: &[AlignmentRow], pick: impl Fn(&AlignmentRow) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(pick).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn run_align(args: AlignArgs) -> Result<ExitCode> {
    let (ckpt, vocab, records) = load_checked(&args.data, &args.checkpoint)?;
    let rows = pipeline::align(&ckpt.params, &ckpt.config, &vocab, &records)?;
    pipeline::write_jsonl(&rows, &args.out)?;
    let mut line = format!("summary videos={} mode={}", rows.len(), ckpt.config.mode);
    for (key, val) in [
        ("align_frame_acc", mean_of(&rows, |r| r.frame_acc)),
        ("align_jaccard", mean_of(&rows, |r| r.jaccard)),
        ("uniform_frame_acc", mean_of(&rows, |r| r.uniform_frame_acc)),
    ] {
        if let Some(v) = val {
            line.push_str(&format!(" {key}={v:.6}"));
        }
    }
    println!("{line}");
    Ok(ExitCode::SUCCESS)
}

fn run_check(args: CheckArgs) -> Result<ExitCode> {
    let opts = CheckOptions {
        sizes: args.sizes.unwrap_or_else(check::default_sizes),
        trials: args.trials,
        seed: args.seed,
        flip_gradient_sign: args.inject_wrong_sign,
    };
    let report = check::run_checks(&opts)?;
    for p in &report.probes {
        println!("{}", p.line());
    }
    let passed = report.passed();
    println!("result={}", if passed { "pass" } else { "fail" });
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
