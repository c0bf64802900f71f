//! Command-line front end for the span-substitution pipeline: corpus
//! generation, preprocessing (alignments, token classes, spans),
//! augmentation, training, evaluation, and statistics.
//!
//! Machine-readable results go to standard output as JSON; progress notes
//! go to standard error. Exit codes: 0 success, 1 data or runtime error,
//! 2 usage error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use spanaug::align::AlignConfig;
use spanaug::config::{
    is_usage_error, load_concepts, load_corpus, need, pick, resolve_classes, resolve_table,
    AugmentMode, FileConfig, ModelKind, RunManifest,
};
use spanaug::corpus::{gen_scan_mini, write_jsonl, write_scan, GrammarConfig};
use spanaug::models::{CountModel, Seq2Seq, Seq2SeqConfig};
use spanaug::spans::{extract_corpus_spans, write_span_dump, SpanInventory};
use spanaug::subst::{
    lexsym_baseline, spansub, spansub_exhaustive, AugmentConfig, SpanFilter, SubstContext,
    SubtreeRule,
};
use spanaug::train::{
    per_concept_errors, prepare, run_training, Downstream, Mode, TrainConfig,
};
use spanaug::{Error, Result};

#[derive(Parser)]
#[command(name = "spanaug", version, about = "Span-substitution data augmentation pipeline")]
struct Cli {
    /// TOML file mirroring every flag; flags given here override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every subsystem derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a miniature navigation-command corpus.
    Gen(GenArgs),
    /// Extract a phrase alignment table from a corpus.
    Align(AlignArgs),
    /// Infer (or load) token equivalence classes.
    Clusters(ClustersArgs),
    /// Extract substitutable spans.
    Spans(SpansArgs),
    /// Run offline augmentation.
    Augment(AugmentArgs),
    /// Train a downstream model, optionally with a learned policy.
    Train(TrainArgs),
    /// Evaluate a checkpoint by greedy decoding.
    Eval(EvalArgs),
    /// Corpus and preprocessing statistics.
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sample this many examples; omit for the full enumeration.
    #[arg(long)]
    size: Option<usize>,
    /// 1 = bare phrases, 2 = adds repeats, 3 = adds two-clause commands.
    #[arg(long)]
    max_depth: Option<u8>,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_v_len: Option<usize>,
    #[arg(long)]
    max_w_len: Option<usize>,
    #[arg(long)]
    nec_threshold: Option<f64>,
    #[arg(long)]
    suff_threshold: Option<f64>,
}

#[derive(Args)]
struct ClustersArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SpansArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Alignment table file; extracted on the fly when omitted.
    #[arg(long)]
    alignment: Option<PathBuf>,
    /// Cluster override file; classes are inferred when omitted.
    #[arg(long)]
    clusters: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<AugmentMode>,
    /// Rounds whose products rejoin the sampling pool.
    #[arg(long)]
    k: Option<usize>,
    /// Draws per round.
    #[arg(long)]
    n: Option<usize>,
    /// Enumerate every legal product instead of sampling.
    #[arg(long)]
    exhaustive: bool,
    #[arg(long, value_enum)]
    subtree_rule: Option<SubtreeRule>,
    #[arg(long)]
    alignment: Option<PathBuf>,
    #[arg(long)]
    clusters: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// Sampled actions per example per policy cycle.
    #[arg(long)]
    t_draws: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Interleave original batches with generated ones (loop modes only).
    #[arg(long)]
    mix_original: bool,
    /// Offline augmentation rounds for the spansub modes.
    #[arg(long)]
    k: Option<usize>,
    /// Offline augmentation draws per round.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum)]
    subtree_rule: Option<SubtreeRule>,
    /// Where the run report JSON goes.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Optional probability-trace CSV.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Optional downstream-model checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Optional policy checkpoint (loop modes).
    #[arg(long)]
    augmenter_checkpoint: Option<PathBuf>,
    /// Concept file for the per-concept error table, one per line.
    #[arg(long)]
    concepts: Option<PathBuf>,
    #[arg(long)]
    alignment: Option<PathBuf>,
    #[arg(long)]
    clusters: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    concepts: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    alignment: Option<PathBuf>,
    #[arg(long)]
    clusters: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) if is_usage_error(&err) => {
            eprintln!("{err}");
            std::process::exit(2);
        }
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(1);
        }
    }
}

fn usage(msg: &str) -> Error {
    Error::Validation(format!("usage: {msg}"))
}

fn emit(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("serializing output: {e}")))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    if let Some(threads) = cli.threads.or(file.threads) {
        // A second builder in the same process is harmless: the pool is
        // already capped by the first.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let seed = cli.seed.or(file.seed);

    match cli.command {
        Command::Gen(args) => cmd_gen(args, &file, seed),
        Command::Align(args) => cmd_align(args, &file),
        Command::Clusters(args) => cmd_clusters(args, &file),
        Command::Spans(args) => cmd_spans(args, &file),
        Command::Augment(args) => cmd_augment(args, &file, seed),
        Command::Train(args) => cmd_train(args, &file, seed),
        Command::Eval(args) => cmd_eval(args, &file),
        Command::Stats(args) => cmd_stats(args, &file),
    }
}

fn cmd_gen(args: GenArgs, file: &FileConfig, seed: Option<u64>) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved {
        out: PathBuf,
        size: Option<usize>,
        max_depth: u8,
        seed: u64,
    }
    let resolved = Resolved {
        out: need(args.out, file.gen.out.clone(), "out")?,
        size: args.size.or(file.gen.size),
        max_depth: pick(args.max_depth, file.gen.max_depth, 3),
        seed: pick(seed, file.gen.seed, 0),
    };

    let grammar = GrammarConfig { max_depth: resolved.max_depth, ..Default::default() };
    let corpus = gen_scan_mini(&grammar, resolved.seed, resolved.size)?;
    RunManifest::new("gen", resolved.seed, &resolved, &[])?.write_beside(&resolved.out)?;
    if resolved.out.extension().is_some_and(|e| e == "jsonl") {
        write_jsonl(&corpus, &resolved.out)?;
    } else {
        write_scan(&corpus, &resolved.out)?;
    }
    eprintln!("wrote {} examples to {}", corpus.len(), resolved.out.display());
    emit(&serde_json::json!({ "examples": corpus.len(), "out": resolved.out }))
}

fn cmd_align(args: AlignArgs, file: &FileConfig) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved {
        corpus: PathBuf,
        out: PathBuf,
        align: AlignConfig,
    }
    let section = &file.align;
    let defaults = AlignConfig::default();
    let resolved = Resolved {
        corpus: need(args.corpus, section.corpus.clone(), "corpus")?,
        out: need(args.out, section.out.clone(), "out")?,
        align: AlignConfig {
            max_v_len: pick(args.max_v_len, section.max_v_len, defaults.max_v_len),
            max_w_len: pick(args.max_w_len, section.max_w_len, defaults.max_w_len),
            nec_threshold: pick(args.nec_threshold, section.nec_threshold, defaults.nec_threshold),
            suff_threshold: pick(
                args.suff_threshold,
                section.suff_threshold,
                defaults.suff_threshold,
            ),
        },
    };

    let corpus = load_corpus(&resolved.corpus)?;
    let table = spanaug::align::extract_alignments(&corpus, &resolved.align)?;
    RunManifest::new("align", 0, &resolved, &[&resolved.corpus])?.write_beside(&resolved.out)?;
    table.write_jsonl(&resolved.out)?;
    emit(&serde_json::json!({ "entries": table.len(), "out": resolved.out }))
}

fn cmd_clusters(args: ClustersArgs, file: &FileConfig) -> Result<()> {
    let corpus_path = need(args.corpus, file.clusters.corpus.clone(), "corpus")?;
    let corpus = load_corpus(&corpus_path)?;
    let eqc = spanaug::cluster::infer_classes(&corpus)?;
    let classes: Vec<Vec<&str>> = eqc
        .members
        .iter()
        .map(|m| m.iter().map(String::as_str).collect())
        .collect();
    let value = serde_json::json!({ "num_classes": eqc.num_classes(), "classes": classes });
    match args.out.or(file.clusters.out.clone()) {
        Some(out) => {
            let text = serde_json::to_string_pretty(&value)
                .map_err(|e| Error::Validation(format!("serializing clusters: {e}")))?;
            std::fs::write(&out, text + "\n").map_err(|e| Error::io(&out, e))?;
            emit(&serde_json::json!({ "num_classes": eqc.num_classes(), "out": out }))
        }
        None => emit(&value),
    }
}

fn cmd_spans(args: SpansArgs, file: &FileConfig) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved {
        corpus: PathBuf,
        out: PathBuf,
        alignment: Option<PathBuf>,
        clusters: Option<PathBuf>,
    }
    let section = &file.spans;
    let resolved = Resolved {
        corpus: need(args.corpus, section.corpus.clone(), "corpus")?,
        out: need(args.out, section.out.clone(), "out")?,
        alignment: args.alignment.or(section.alignment.clone()),
        clusters: args.clusters.or(section.clusters.clone()),
    };

    let corpus = load_corpus(&resolved.corpus)?;
    let eqc = resolve_classes(&corpus, resolved.clusters.as_deref())?;
    let table = resolve_table(&corpus, resolved.alignment.as_deref(), &AlignConfig::default())?;
    let per_spans = extract_corpus_spans(&corpus, table.as_ref(), &eqc)?;
    let inventory = SpanInventory::build(&per_spans);

    let mut inputs: Vec<&Path> = vec![&resolved.corpus];
    inputs.extend(resolved.alignment.as_deref());
    inputs.extend(resolved.clusters.as_deref());
    RunManifest::new("spans", 0, &resolved, &inputs)?.write_beside(&resolved.out)?;
    write_span_dump(&resolved.out, &per_spans)?;
    emit(&serde_json::json!({
        "examples": corpus.len(),
        "spans": per_spans.iter().map(Vec::len).sum::<usize>(),
        "inventory": inventory.len(),
        "inventory_digest": inventory.digest(),
        "out": resolved.out,
    }))
}

fn cmd_augment(args: AugmentArgs, file: &FileConfig, seed: Option<u64>) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved {
        corpus: PathBuf,
        out: PathBuf,
        mode: AugmentMode,
        exhaustive: bool,
        augment: AugmentConfig,
        alignment: Option<PathBuf>,
        clusters: Option<PathBuf>,
    }
    let section = &file.augment;
    let defaults = AugmentConfig::default();
    let resolved = Resolved {
        corpus: need(args.corpus, section.corpus.clone(), "corpus")?,
        out: need(args.out, section.out.clone(), "out")?,
        mode: need(args.mode, section.mode, "mode")?,
        exhaustive: args.exhaustive || section.exhaustive.unwrap_or(false),
        augment: AugmentConfig {
            k: pick(args.k, section.k, defaults.k),
            n: pick(args.n, section.n, defaults.n),
            seed: pick(seed, section.seed, defaults.seed),
            subtree_rule: pick(args.subtree_rule, section.subtree_rule, defaults.subtree_rule),
        },
        alignment: args.alignment.or(section.alignment.clone()),
        clusters: args.clusters.or(section.clusters.clone()),
    };

    let corpus = load_corpus(&resolved.corpus)?;
    let eqc = resolve_classes(&corpus, resolved.clusters.as_deref())?;
    let table = resolve_table(&corpus, resolved.alignment.as_deref(), &AlignConfig::default())?;
    let per_spans = extract_corpus_spans(&corpus, table.as_ref(), &eqc)?;
    let inventory = SpanInventory::build(&per_spans);
    let ctx = SubstContext { eqc: &eqc, table: table.as_ref() };

    let (set, stats) = if resolved.exhaustive {
        let filter = match resolved.mode {
            AugmentMode::Spansub => SpanFilter::All,
            AugmentMode::Lexsym => SpanFilter::SingleToken,
        };
        spansub_exhaustive(&corpus, &per_spans, &inventory, resolved.augment.subtree_rule, filter)?
    } else {
        match resolved.mode {
            AugmentMode::Spansub => {
                spansub(&corpus, &per_spans, &inventory, &ctx, &resolved.augment)?
            }
            AugmentMode::Lexsym => {
                lexsym_baseline(&corpus, &per_spans, &inventory, &ctx, &resolved.augment)?
            }
        }
    };

    let mut inputs: Vec<&Path> = vec![&resolved.corpus];
    inputs.extend(resolved.alignment.as_deref());
    inputs.extend(resolved.clusters.as_deref());
    RunManifest::new("augment", resolved.augment.seed, &resolved, &inputs)?
        .write_beside(&resolved.out)?;
    set.write_jsonl(&resolved.out)?;
    eprintln!("wrote {} augmented examples to {}", set.len(), resolved.out.display());
    emit(&serde_json::json!({ "distinct": set.len(), "stats": stats, "out": resolved.out }))
}

fn cmd_train(args: TrainArgs, file: &FileConfig, seed: Option<u64>) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved {
        corpus: PathBuf,
        dev: Option<PathBuf>,
        test: Option<PathBuf>,
        model: ModelKind,
        train: TrainConfig,
        seq2seq: Seq2SeqConfig,
        report: PathBuf,
        traces: Option<PathBuf>,
        checkpoint: Option<PathBuf>,
        augmenter_checkpoint: Option<PathBuf>,
        concepts: Option<PathBuf>,
        alignment: Option<PathBuf>,
        clusters: Option<PathBuf>,
    }
    let section = &file.train;
    let defaults = TrainConfig::default();
    let augment_defaults = AugmentConfig::default();
    let train = TrainConfig {
        mode: need(args.mode, section.mode, "mode")?,
        warmup_epochs: pick(args.warmup_epochs, section.warmup_epochs, defaults.warmup_epochs),
        epochs: pick(args.epochs, section.epochs, defaults.epochs),
        batch_size: pick(args.batch_size, section.batch_size, defaults.batch_size),
        t_draws: pick(args.t_draws, section.t_draws, defaults.t_draws),
        seed: pick(seed, section.seed, defaults.seed),
        mix_original: args.mix_original || section.mix_original.unwrap_or(false),
        augment: AugmentConfig {
            k: pick(args.k, section.k, augment_defaults.k),
            n: pick(args.n, section.n, augment_defaults.n),
            seed: pick(seed, section.seed, augment_defaults.seed),
            subtree_rule: pick(
                args.subtree_rule,
                section.subtree_rule,
                augment_defaults.subtree_rule,
            ),
        },
        augmenter: section.augmenter.clone().unwrap_or_default(),
        probes: section.probes.clone().unwrap_or_default(),
    };
    let resolved = Resolved {
        corpus: need(args.corpus, section.corpus.clone(), "corpus")?,
        dev: args.dev.or(section.dev.clone()),
        test: args.test.or(section.test.clone()),
        model: need(args.model, section.model, "model")?,
        seq2seq: section.seq2seq.clone().unwrap_or_default(),
        report: need(args.report, section.report.clone(), "report")?,
        traces: args.traces.or(section.traces.clone()),
        checkpoint: args.checkpoint.or(section.checkpoint.clone()),
        augmenter_checkpoint: args.augmenter_checkpoint.or(section.augmenter_checkpoint.clone()),
        concepts: args.concepts.or(section.concepts.clone()),
        alignment: args.alignment.or(section.alignment.clone()),
        clusters: args.clusters.or(section.clusters.clone()),
        train,
    };

    if resolved.train.mix_original && !resolved.train.mode.uses_loop() {
        return Err(usage("--mix-original only applies to the policy-loop modes"));
    }
    if !resolved.train.probes.is_empty() && !resolved.train.mode.uses_loop() {
        return Err(usage("probability probes only apply to the policy-loop modes"));
    }
    if resolved.augmenter_checkpoint.is_some() && !resolved.train.mode.uses_loop() {
        return Err(usage("--augmenter-checkpoint only applies to the policy-loop modes"));
    }
    resolved.train.validate().map_err(|e| usage(&e.to_string()))?;

    let corpus = load_corpus(&resolved.corpus)?;
    let dev = resolved.dev.as_deref().map(load_corpus).transpose()?;
    let test = resolved.test.as_deref().map(load_corpus).transpose()?;
    let concepts = match resolved.concepts.as_deref() {
        Some(path) => load_concepts(path)?,
        None => Vec::new(),
    };
    let eqc = resolve_classes(&corpus, resolved.clusters.as_deref())?;
    let table = resolve_table(&corpus, resolved.alignment.as_deref(), &AlignConfig::default())?;
    let prepared = prepare(&corpus, &resolved.train, &eqc, table.as_ref())?;

    let mut model = match resolved.model {
        ModelKind::Count => {
            let vocab: Vec<String> = prepared.corpus.output_vocab.iter().cloned().collect();
            Downstream::Count(CountModel::new(&vocab, 1.0)?)
        }
        ModelKind::Seq2seq => {
            let in_vocab: Vec<String> = prepared.corpus.input_vocab.iter().cloned().collect();
            let out_vocab: Vec<String> = prepared.corpus.output_vocab.iter().cloned().collect();
            Downstream::Neural(Seq2Seq::new(
                resolved.seq2seq.clone(),
                &in_vocab,
                &out_vocab,
                resolved.train.seed,
            )?)
        }
    };

    let mut inputs: Vec<&Path> = vec![&resolved.corpus];
    inputs.extend(resolved.dev.as_deref());
    inputs.extend(resolved.test.as_deref());
    inputs.extend(resolved.concepts.as_deref());
    inputs.extend(resolved.alignment.as_deref());
    inputs.extend(resolved.clusters.as_deref());
    RunManifest::new("train", resolved.train.seed, &resolved, &inputs)?
        .write_beside(&resolved.report)?;

    eprintln!(
        "training {} in {} mode: {} examples ({} original)",
        model.kind(),
        resolved.train.mode,
        prepared.corpus.len(),
        prepared.base_len,
    );
    let outcome = run_training(
        &resolved.train,
        &prepared,
        &mut model,
        dev.as_ref(),
        test.as_ref(),
        &concepts,
    )?;

    outcome.report.save_json(&resolved.report)?;
    if let Some(path) = &resolved.traces {
        outcome.report.write_trace_csv(path)?;
    }
    if let Some(path) = &resolved.checkpoint {
        model.save(path)?;
    }
    if let (Some(path), Some(aug)) = (&resolved.augmenter_checkpoint, &outcome.augmenter) {
        aug.save(path)?;
    }
    emit(&serde_json::json!({
        "mode": outcome.report.mode,
        "exact_match_train": outcome.report.exact_match_train,
        "exact_match_dev": outcome.report.exact_match_dev,
        "exact_match_test": outcome.report.exact_match_test,
        "phi_updates": outcome.report.phi_updates,
        "theta_updates": outcome.report.theta_updates,
        "generated_consumed": outcome.report.generated_consumed,
        "report": resolved.report,
    }))
}

fn cmd_eval(args: EvalArgs, file: &FileConfig) -> Result<()> {
    let section = &file.eval;
    let checkpoint = need(args.checkpoint, section.checkpoint.clone(), "checkpoint")?;
    let test_path = need(args.test, section.test.clone(), "test")?;
    let concepts = match args.concepts.or(section.concepts.clone()) {
        Some(path) => load_concepts(&path)?,
        None => Vec::new(),
    };

    let model = Downstream::Neural(Seq2Seq::load(&checkpoint)?);
    let test = load_corpus(&test_path)?;
    let exact = model
        .exact_on(&test.examples)?
        .expect("seq2seq models decode");
    let per_concept = if concepts.is_empty() {
        Vec::new()
    } else {
        per_concept_errors(&model, &test, &concepts)?
    };
    emit(&serde_json::json!({
        "examples": test.len(),
        "exact_match": exact,
        "per_concept": per_concept,
    }))
}

fn cmd_stats(args: StatsArgs, file: &FileConfig) -> Result<()> {
    let section = &file.stats;
    let corpus_path = need(args.corpus, section.corpus.clone(), "corpus")?;
    let corpus = load_corpus(&corpus_path)?;

    let mut value = serde_json::json!({
        "examples": corpus.len(),
        "input_vocab": corpus.input_vocab.len(),
        "output_vocab": corpus.output_vocab.len(),
        "with_trees": corpus.trees.as_ref().map_or(0, std::collections::BTreeMap::len),
        "input_tokens": corpus.examples.iter().map(|e| e.input.len()).sum::<usize>(),
        "output_tokens": corpus.examples.iter().map(|e| e.output.len()).sum::<usize>(),
        "max_input_len": corpus.examples.iter().map(|e| e.input.len()).max().unwrap_or(0),
        "max_output_len": corpus.examples.iter().map(|e| e.output.len()).max().unwrap_or(0),
    });

    // Span statistics whenever preprocessing is possible without an
    // expensive implicit alignment pass: trees in the corpus, or an
    // explicit alignment file.
    let alignment = args.alignment.or(section.alignment.clone());
    let clusters = args.clusters.or(section.clusters.clone());
    if corpus.trees.is_some() || alignment.is_some() {
        let eqc = resolve_classes(&corpus, clusters.as_deref())?;
        let table = resolve_table(&corpus, alignment.as_deref(), &AlignConfig::default())?;
        let per_spans = extract_corpus_spans(&corpus, table.as_ref(), &eqc)?;
        let inventory = SpanInventory::build(&per_spans);
        value["num_classes"] = serde_json::json!(eqc.num_classes());
        value["spans"] = serde_json::json!(per_spans.iter().map(Vec::len).sum::<usize>());
        value["inventory"] = serde_json::json!(inventory.len());
        value["inventory_digest"] = serde_json::json!(inventory.digest());
    }
    emit(&value)
}
