//! Difficulty-aware training: warm-up on the original data, then
//! alternating cycles that (a) sample substitution actions, realize them as
//! generated examples, and push the policy toward the ones the downstream
//! model finds hard, and (b) descend the downstream model on freshly
//! generated batches. Offline-substitution modes and a uniform-sampling
//! control run through the same machinery, and every run produces a JSON
//! report with per-epoch losses, selection-probability traces, and final
//! exact-match numbers.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{contains_span, AlignmentTable};
use crate::augmenter::{ActionSample, Augmenter, AugmenterConfig, BatchItem, SampleOutcome};
use crate::cluster::EquivalenceClasses;
use crate::corpus::{Corpus, ParallelExample, Token};
use crate::models::{exact_match, CountModel, DifficultyModel, Seq2Seq};
use crate::spans::{extract_corpus_spans, EligibleSpan, SpanInventory};
use crate::subst::{
    legal_candidates, spansub, substitute_guarded, AugmentConfig, AugmentStats, SpanFilter,
    SubstContext, SubstMode, SubstOutcome,
};
use crate::{derive_rng, Error, Result};

/// What drives training: plain descent, offline substitution, the learned
/// policy, the uniform-sampling control, or their combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Mode {
    #[serde(rename = "baseline")]
    #[value(name = "baseline")]
    Baseline,
    #[serde(rename = "spansub")]
    #[value(name = "spansub")]
    Spansub,
    #[serde(rename = "l2s2")]
    #[value(name = "l2s2")]
    L2s2,
    #[serde(rename = "spansub+l2s2")]
    #[value(name = "spansub+l2s2")]
    SpansubL2s2,
    #[serde(rename = "rands2")]
    #[value(name = "rands2")]
    Rands2,
    #[serde(rename = "spansub+rands2")]
    #[value(name = "spansub+rands2")]
    SpansubRands2,
}

impl Mode {
    /// The training corpus is first replaced by original ∪ sampled
    /// substitution output.
    pub fn offline_spansub(self) -> bool {
        matches!(self, Mode::Spansub | Mode::SpansubL2s2 | Mode::SpansubRands2)
    }

    /// Runs the alternating policy/model loop after warm-up.
    pub fn uses_loop(self) -> bool {
        matches!(self, Mode::L2s2 | Mode::SpansubL2s2 | Mode::Rands2 | Mode::SpansubRands2)
    }

    /// The policy parameters receive ascent updates.
    pub fn updates_phi(self) -> bool {
        matches!(self, Mode::L2s2 | Mode::SpansubL2s2)
    }

    /// Actions are drawn uniformly over spans and legal candidates,
    /// ignoring the policy's distributions.
    pub fn uniform_sampling(self) -> bool {
        matches!(self, Mode::Rands2 | Mode::SpansubRands2)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Mode::Baseline => "baseline",
            Mode::Spansub => "spansub",
            Mode::L2s2 => "l2s2",
            Mode::SpansubL2s2 => "spansub+l2s2",
            Mode::Rands2 => "rands2",
            Mode::SpansubRands2 => "spansub+rands2",
        };
        f.write_str(name)
    }
}

/// Identifies an inventory span by its content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanKey {
    pub tokens: Vec<Token>,
    pub fragment: Vec<Token>,
}

/// A span whose selection probabilities the report traces: on `example_id`,
/// how likely is `out` swapped out, and how likely does the swap-in land in
/// `in_class`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackedProbe {
    pub example_id: usize,
    pub out: SpanKey,
    pub in_class: Vec<SpanKey>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Warm-up epochs of plain descent before the alternating loop.
    pub warmup_epochs: usize,
    /// Alternating (or, for non-loop modes, additional plain) epochs.
    pub epochs: usize,
    pub batch_size: usize,
    /// Sampled actions per example per policy-ascent cycle.
    pub t_draws: usize,
    pub seed: u64,
    /// Interleave an original-batch descent step after every
    /// generated-batch step (loop modes only).
    pub mix_original: bool,
    /// Offline substitution settings for the spansub modes.
    pub augment: AugmentConfig,
    pub augmenter: AugmenterConfig,
    pub probes: Vec<TrackedProbe>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Baseline,
            warmup_epochs: 5,
            epochs: 20,
            batch_size: 32,
            t_draws: 4,
            seed: 0,
            mix_original: false,
            augment: AugmentConfig::default(),
            augmenter: AugmenterConfig::default(),
            probes: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_draws == 0 {
            return Err(Error::Validation("t_draws must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if self.mode.uses_loop() {
            self.augmenter.validate()?;
        }
        Ok(())
    }
}

/// A probe resolved against the inventory and its example.
#[derive(Debug, Clone)]
struct ProbeRef {
    probe: TrackedProbe,
    /// Position of the example in the corpus.
    example_pos: usize,
    /// Position of the out span in the example's span-id list.
    pos_out: usize,
    out_id: usize,
    in_ids: BTreeSet<usize>,
}

/// Everything the loop needs, computed once: the (possibly augmented)
/// corpus, per-example spans, the frozen inventory, and resolved probes.
pub struct Prepared {
    pub corpus: Corpus,
    /// Examples `0..base_len` are the original corpus; the rest are
    /// offline-substitution products.
    pub base_len: usize,
    pub per_spans: Vec<Vec<EligibleSpan>>,
    /// Inventory index of each span in `per_spans`, same shape.
    pub span_ids: Vec<Vec<usize>>,
    pub inventory: SpanInventory,
    pub subst_mode: SubstMode,
    pub offline_stats: Option<AugmentStats>,
    probes: Vec<ProbeRef>,
}

/// Extracts spans, optionally runs offline substitution, freezes the
/// inventory, and resolves the tracked probes.
pub fn prepare(
    base: &Corpus,
    config: &TrainConfig,
    eqc: &EquivalenceClasses,
    table: Option<&AlignmentTable>,
) -> Result<Prepared> {
    config.validate()?;
    if base.is_empty() {
        return Err(Error::Validation("cannot train on an empty corpus".into()));
    }
    let base_spans = extract_corpus_spans(base, table, eqc)?;
    let ctx = SubstContext { eqc, table };

    let (corpus, per_spans, offline_stats) = if config.mode.offline_spansub() {
        let inv = SpanInventory::build(&base_spans);
        let (aug, stats) = spansub(base, &base_spans, &inv, &ctx, &config.augment)?;
        let mut examples = base.examples.clone();
        let mut spans = base_spans;
        let mut next_id = examples.iter().map(|e| e.id).max().map_or(0, |m| m + 1);
        for gen in &aug.examples {
            let ex = ParallelExample {
                id: next_id,
                input: gen.input.clone(),
                output: gen.output.clone(),
            };
            next_id += 1;
            spans.push(ctx.respan(&ex)?);
            examples.push(ex);
        }
        (Corpus::new(examples, base.trees.clone())?, spans, Some(stats))
    } else {
        (base.clone(), base_spans, None)
    };

    let inventory = SpanInventory::build(&per_spans);
    let index = inventory.index_map();
    let span_ids: Vec<Vec<usize>> = per_spans
        .iter()
        .map(|spans| {
            spans
                .iter()
                .map(|s| index[&(s.tokens.clone(), s.fragment.clone())])
                .collect()
        })
        .collect();

    let mut probes = Vec::with_capacity(config.probes.len());
    for probe in &config.probes {
        let example_pos = corpus
            .examples
            .iter()
            .position(|e| e.id == probe.example_id)
            .ok_or_else(|| {
                Error::Validation(format!("probe example {} not in corpus", probe.example_id))
            })?;
        let lookup = |key: &SpanKey| -> Result<usize> {
            index.get(&(key.tokens.clone(), key.fragment.clone())).copied().ok_or_else(|| {
                Error::Validation(format!("probe span {:?} not in inventory", key.tokens))
            })
        };
        let out_id = lookup(&probe.out)?;
        let pos_out = span_ids[example_pos].iter().position(|&v| v == out_id).ok_or_else(|| {
            Error::Validation(format!(
                "probe span {:?} does not occur on example {}",
                probe.out.tokens, probe.example_id
            ))
        })?;
        let in_ids = probe.in_class.iter().map(lookup).collect::<Result<BTreeSet<_>>>()?;
        probes.push(ProbeRef { probe: probe.clone(), example_pos, pos_out, out_id, in_ids });
    }

    let subst_mode =
        if base.trees.is_some() { SubstMode::Tree } else { SubstMode::Sequence };
    Ok(Prepared {
        base_len: base.len(),
        corpus,
        per_spans,
        span_ids,
        inventory,
        subst_mode,
        offline_stats,
        probes,
    })
}

/// The trainable downstream model, decodable or not.
pub enum Downstream {
    Count(CountModel),
    Neural(Seq2Seq),
}

enum Snapshot {
    Count(CountModel),
    NeuralFlat(Vec<f64>),
}

impl Downstream {
    pub fn kind(&self) -> &'static str {
        match self {
            Downstream::Count(_) => "count",
            Downstream::Neural(_) => "seq2seq",
        }
    }

    /// Greedy decodes every input; `None` for models that cannot decode.
    pub fn predictions(&self, examples: &[ParallelExample]) -> Result<Option<Vec<Vec<Token>>>> {
        match self {
            Downstream::Count(_) => Ok(None),
            Downstream::Neural(m) => examples
                .par_iter()
                .map(|ex| m.greedy_decode(&ex.input))
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    /// Exact match of greedy decoding; `None` for non-decoding models.
    pub fn exact_on(&self, examples: &[ParallelExample]) -> Result<Option<f64>> {
        match self.predictions(examples)? {
            None => Ok(None),
            Some(preds) => {
                let refs: Vec<Vec<Token>> =
                    examples.iter().map(|e| e.output.clone()).collect();
                exact_match(&preds, &refs).map(Some)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Downstream::Count(m) => m.save(path),
            Downstream::Neural(m) => m.save(path),
        }
    }

    fn snapshot(&self) -> Snapshot {
        match self {
            Downstream::Count(m) => Snapshot::Count(m.clone()),
            Downstream::Neural(m) => Snapshot::NeuralFlat(m.params.to_flat()),
        }
    }

    fn restore(&mut self, snap: &Snapshot) {
        match (self, snap) {
            (Downstream::Count(m), Snapshot::Count(s)) => *m = s.clone(),
            (Downstream::Neural(m), Snapshot::NeuralFlat(flat)) => m.params.set_flat(flat),
            _ => unreachable!("snapshot kind matches the model it came from"),
        }
    }
}

impl DifficultyModel for Downstream {
    fn train_batch(&mut self, batch: &[ParallelExample]) -> Result<f64> {
        match self {
            Downstream::Count(m) => m.train_batch(batch),
            Downstream::Neural(m) => m.train_batch(batch),
        }
    }

    fn nll(&self, example: &ParallelExample) -> Result<f64> {
        match self {
            Downstream::Count(m) => m.nll(example),
            Downstream::Neural(m) => m.nll(example),
        }
    }
}

/// Exact-match error rate over the test inputs containing one concept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptStat {
    pub concept: String,
    pub matched: usize,
    pub errors: usize,
    pub error_rate: f64,
}

fn concept_errors_from(
    predictions: &[Vec<Token>],
    examples: &[ParallelExample],
    concepts: &[Vec<Token>],
) -> Vec<ConceptStat> {
    let mut out = Vec::new();
    for concept in concepts {
        let mut matched = 0usize;
        let mut errors = 0usize;
        for (pred, ex) in predictions.iter().zip(examples) {
            if contains_span(&ex.input, concept) {
                matched += 1;
                if pred != &ex.output {
                    errors += 1;
                }
            }
        }
        // Concepts matching nothing are absent from the table.
        if matched > 0 {
            out.push(ConceptStat {
                concept: concept.join(" "),
                matched,
                errors,
                error_rate: errors as f64 / matched as f64,
            });
        }
    }
    out
}

/// Error rate of greedy decoding restricted to test inputs containing each
/// concept; concepts matching no input are omitted.
pub fn per_concept_errors(
    model: &Downstream,
    test: &Corpus,
    concepts: &[Vec<Token>],
) -> Result<Vec<ConceptStat>> {
    let predictions = model.predictions(&test.examples)?.ok_or_else(|| {
        Error::Validation("per-concept error rates need a decoding model".into())
    })?;
    Ok(concept_errors_from(&predictions, &test.examples, concepts))
}

/// One epoch's record of a probe: the policy's noise-free probabilities and
/// the draws actually observed that epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub epoch: usize,
    /// P(the probe span is swapped out of its example).
    pub p_out: f64,
    /// P(the swap-in lands in the probe class | the probe span is out).
    pub p_in_class: f64,
    /// Sampled draws that chose the probe out-span, anywhere in the corpus.
    pub drawn_total: usize,
    /// ... of which the swap-in landed in the probe class.
    pub drawn_in_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeTrace {
    pub probe: TrackedProbe,
    pub entries: Vec<TraceEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub downstream: String,
    /// Mean descent loss per warm-up epoch (loop modes only).
    pub warmup_losses: Vec<f64>,
    /// Mean descent loss per training epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean ascent objective per epoch (policy modes only).
    pub phi_objectives: Vec<f64>,
    pub phi_updates: usize,
    pub theta_updates: usize,
    /// Generated examples the downstream model trained on.
    pub generated_consumed: usize,
    /// Draws skipped because the example has no spans.
    pub skipped_no_span: usize,
    /// Draws skipped because the chosen span has no legal replacement.
    pub skipped_no_candidate: usize,
    /// Draws whose substitution the validity checker discarded.
    pub discarded_invalid: usize,
    pub offline_stats: Option<AugmentStats>,
    pub exact_match_train: Option<f64>,
    pub exact_match_dev: Option<f64>,
    pub exact_match_test: Option<f64>,
    pub per_concept: Vec<ConceptStat>,
    pub traces: Vec<ProbeTrace>,
}

impl RunReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| Error::Validation(format!("serializing report: {e}")))?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Companion CSV of the probability traces, one row per probe × epoch.
    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "probe,label,epoch,p_out,p_in_class,drawn_total,drawn_in_class")
            .map_err(|e| Error::io(path, e))?;
        for (i, trace) in self.traces.iter().enumerate() {
            let label = trace.probe.out.tokens.join(" ");
            for e in &trace.entries {
                writeln!(
                    w,
                    "{i},{label},{},{},{},{},{}",
                    e.epoch, e.p_out, e.p_in_class, e.drawn_total, e.drawn_in_class
                )
                .map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    /// The trained policy, for loop modes.
    pub augmenter: Option<Augmenter>,
}

const TAG_ORDER: u64 = 0x7a11_0001;
const TAG_SAMPLE: u64 = 0x7a11_0002;

fn stream_id(tag: u64, a: u64, b: u64) -> u64 {
    tag ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17)
        ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9).rotate_left(31)
}

/// Shuffled batch indices for one descent pass. `phase` separates streams
/// that must not reuse each other's orderings.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, phase: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(seed, stream_id(TAG_ORDER, phase, epoch));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// `steps` descent updates on shuffled batches from `corpus`. Returns the
/// per-step mean losses.
pub fn warmup(
    model: &mut Downstream,
    corpus: &Corpus,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch_size must be at least 1".into()));
    }
    let mut losses = Vec::with_capacity(steps);
    let mut epoch = 0u64;
    'outer: loop {
        for batch in epoch_batches(corpus.len(), batch_size, seed, 0, epoch) {
            if losses.len() == steps {
                break 'outer;
            }
            let examples: Vec<ParallelExample> =
                batch.iter().map(|&i| corpus.examples[i].clone()).collect();
            losses.push(model.train_batch(&examples)?);
        }
        epoch += 1;
        if steps == 0 {
            break;
        }
    }
    Ok(losses)
}

/// Draws `t` uniform actions over the example's spans and their legal
/// candidates — the control policy.
fn uniform_sample_actions(
    prepared: &Prepared,
    example_pos: usize,
    t: usize,
    rule: crate::subst::SubtreeRule,
    rng: &mut ChaCha8Rng,
) -> Vec<SampleOutcome> {
    let span_ids = &prepared.span_ids[example_pos];
    if span_ids.is_empty() {
        return vec![SampleOutcome::NoSpans; t];
    }
    let mut out = Vec::with_capacity(t);
    for _ in 0..t {
        let pos_out = rng.random_range(0..span_ids.len());
        let a_out = span_ids[pos_out];
        let legal = legal_candidates(
            &prepared.inventory,
            &prepared.inventory.spans[a_out],
            rule,
            SpanFilter::All,
        );
        if legal.is_empty() {
            out.push(SampleOutcome::NoCandidates { a_out });
            continue;
        }
        let pos_in = rng.random_range(0..legal.len());
        out.push(SampleOutcome::Sampled(Box::new(ActionSample {
            a_out,
            a_in: legal[pos_in],
            pos_out,
            pos_in,
            prob_out: 1.0 / span_ids.len() as f64,
            prob_in: 1.0 / legal.len() as f64,
            legal,
            noise_out: Vec::new(),
            noise_in: Vec::new(),
        })))
    }
    out
}

/// Realizes one sampled action as a generated example, or `None` when the
/// validity checker discards it.
fn realize(
    prepared: &Prepared,
    example_pos: usize,
    sample: &ActionSample,
) -> Result<Option<ParallelExample>> {
    let example = &prepared.corpus.examples[example_pos];
    let s_out = &prepared.per_spans[example_pos][sample.pos_out];
    let s_in = &prepared.inventory.spans[sample.a_in];
    let siblings = &prepared.per_spans[example_pos];
    match substitute_guarded(example, s_out, s_in, prepared.subst_mode, siblings)? {
        SubstOutcome::Generated(gen) => Ok(Some(ParallelExample {
            id: example.id,
            input: gen.input,
            output: gen.output,
        })),
        SubstOutcome::Discard(_) => Ok(None),
    }
}

/// Per-epoch tallies of probe-span draws.
struct ProbeCounters {
    drawn_total: Vec<usize>,
    drawn_in_class: Vec<usize>,
}

impl ProbeCounters {
    fn new(n: usize) -> Self {
        ProbeCounters { drawn_total: vec![0; n], drawn_in_class: vec![0; n] }
    }

    fn record(&mut self, probes: &[ProbeRef], sample: &ActionSample) {
        for (i, probe) in probes.iter().enumerate() {
            if sample.a_out == probe.out_id {
                self.drawn_total[i] += 1;
                if probe.in_ids.contains(&sample.a_in) {
                    self.drawn_in_class[i] += 1;
                }
            }
        }
    }
}

/// Runs the configured training pipeline over a prepared corpus. `model`
/// should be freshly initialized; dev, when present and decodable, drives
/// best-checkpoint keeping.
pub fn run_training(
    config: &TrainConfig,
    prepared: &Prepared,
    model: &mut Downstream,
    dev: Option<&Corpus>,
    test: Option<&Corpus>,
    concepts: &[Vec<Token>],
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = prepared.corpus.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);

    let mut report = RunReport {
        mode: config.mode,
        seed: config.seed,
        downstream: model.kind().to_string(),
        warmup_losses: Vec::new(),
        epoch_losses: Vec::new(),
        phi_objectives: Vec::new(),
        phi_updates: 0,
        theta_updates: 0,
        generated_consumed: 0,
        skipped_no_span: 0,
        skipped_no_candidate: 0,
        discarded_invalid: 0,
        offline_stats: prepared.offline_stats.clone(),
        exact_match_train: None,
        exact_match_dev: None,
        exact_match_test: None,
        per_concept: Vec::new(),
        traces: prepared
            .probes
            .iter()
            .map(|p| ProbeTrace { probe: p.probe.clone(), entries: Vec::new() })
            .collect(),
    };
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };

    let mut best: Option<(f64, Snapshot)> = None;
    let keep_best = |model: &Downstream,
                         best: &mut Option<(f64, Snapshot)>|
     -> Result<()> {
        if let Some(devc) = dev {
            if let Some(em) = model.exact_on(&devc.examples)? {
                if best.as_ref().is_none_or(|(b, _)| em > *b) {
                    *best = Some((em, model.snapshot()));
                }
            }
        }
        Ok(())
    };

    let augmenter = if !config.mode.uses_loop() {
        let total = config.warmup_epochs + config.epochs;
        for epoch in 0..total {
            let losses = warmup(
                model,
                &prepared.corpus,
                steps_per_epoch,
                config.batch_size,
                stream_id(config.seed, 1, epoch as u64),
            )?;
            report.theta_updates += losses.len();
            report.epoch_losses.push(mean(&losses));
            keep_best(model, &mut best)?;
        }
        None
    } else {
        let vocab: Vec<Token> = prepared.corpus.input_vocab.iter().cloned().collect();
        let mut aug = Augmenter::new(
            config.augmenter.clone(),
            &vocab,
            &prepared.inventory,
            config.augment.subtree_rule,
            config.seed,
        )?;

        for epoch in 0..config.warmup_epochs {
            let losses = warmup(
                model,
                &prepared.corpus,
                steps_per_epoch,
                config.batch_size,
                stream_id(config.seed, 2, epoch as u64),
            )?;
            report.theta_updates += losses.len();
            report.warmup_losses.push(mean(&losses));
        }

        for epoch in 0..config.epochs {
            let mut counters = ProbeCounters::new(prepared.probes.len());
            let mut theta_losses = Vec::new();
            let mut phi_values = Vec::new();

            let phi_batches =
                epoch_batches(n, config.batch_size, config.seed, 3, epoch as u64);
            let theta_batches =
                epoch_batches(n, config.batch_size, config.seed, 4, epoch as u64);

            for (phi_batch, theta_batch) in phi_batches.iter().zip(&theta_batches) {
                // Policy phase: T draws per example, weighted by how hard
                // the downstream model finds the generated product.
                let mut collected: Vec<(usize, Vec<(ActionSample, f64)>)> =
                    Vec::with_capacity(phi_batch.len());
                for &pos in phi_batch {
                    let example = &prepared.corpus.examples[pos];
                    let mut rng = derive_rng(
                        config.seed,
                        stream_id(TAG_SAMPLE, 2 * epoch as u64, example.id as u64),
                    );
                    let outcomes = if config.mode.uniform_sampling() {
                        uniform_sample_actions(
                            prepared,
                            pos,
                            config.t_draws,
                            config.augment.subtree_rule,
                            &mut rng,
                        )
                    } else {
                        aug.sample_actions(
                            &example.input,
                            &prepared.span_ids[pos],
                            config.t_draws,
                            &mut rng,
                        )?
                    };
                    let mut weighted = Vec::new();
                    for outcome in outcomes {
                        match outcome {
                            SampleOutcome::NoSpans => report.skipped_no_span += 1,
                            SampleOutcome::NoCandidates { .. } => {
                                report.skipped_no_candidate += 1
                            }
                            SampleOutcome::Sampled(sample) => {
                                counters.record(&prepared.probes, &sample);
                                match realize(prepared, pos, &sample)? {
                                    None => report.discarded_invalid += 1,
                                    Some(gen) => {
                                        if config.mode.updates_phi() {
                                            let w = model.nll(&gen)?;
                                            weighted.push((*sample, w));
                                        }
                                    }
                                }
                            }
                        }
                    }
                    collected.push((pos, weighted));
                }
                if config.mode.updates_phi() {
                    let items: Vec<BatchItem<'_>> = collected
                        .iter()
                        .map(|(pos, weighted)| BatchItem {
                            tokens: &prepared.corpus.examples[*pos].input,
                            span_ids: &prepared.span_ids[*pos],
                            weighted,
                        })
                        .collect();
                    phi_values.push(aug.ascend_step(&items, config.t_draws, true)?);
                    report.phi_updates += 1;
                }

                // Downstream phase: one generated example per original.
                let mut generated = Vec::new();
                for &pos in theta_batch {
                    let example = &prepared.corpus.examples[pos];
                    let mut rng = derive_rng(
                        config.seed,
                        stream_id(TAG_SAMPLE, 2 * epoch as u64 + 1, example.id as u64),
                    );
                    let outcomes = if config.mode.uniform_sampling() {
                        uniform_sample_actions(
                            prepared,
                            pos,
                            1,
                            config.augment.subtree_rule,
                            &mut rng,
                        )
                    } else {
                        aug.sample_actions(
                            &example.input,
                            &prepared.span_ids[pos],
                            1,
                            &mut rng,
                        )?
                    };
                    match outcomes.into_iter().next().unwrap() {
                        SampleOutcome::NoSpans => report.skipped_no_span += 1,
                        SampleOutcome::NoCandidates { .. } => report.skipped_no_candidate += 1,
                        SampleOutcome::Sampled(sample) => {
                            counters.record(&prepared.probes, &sample);
                            match realize(prepared, pos, &sample)? {
                                None => report.discarded_invalid += 1,
                                Some(gen) => generated.push(gen),
                            }
                        }
                    }
                }
                if !generated.is_empty() {
                    report.generated_consumed += generated.len();
                    theta_losses.push(model.train_batch(&generated)?);
                    report.theta_updates += 1;
                }
                if config.mix_original {
                    let originals: Vec<ParallelExample> = theta_batch
                        .iter()
                        .map(|&pos| prepared.corpus.examples[pos].clone())
                        .collect();
                    theta_losses.push(model.train_batch(&originals)?);
                    report.theta_updates += 1;
                }
            }

            report.epoch_losses.push(mean(&theta_losses));
            if config.mode.updates_phi() {
                report.phi_objectives.push(mean(&phi_values));
            }
            for (i, probe) in prepared.probes.iter().enumerate() {
                let example = &prepared.corpus.examples[probe.example_pos];
                let snapshot = aug.probe(&example.input, &prepared.span_ids[probe.example_pos])?;
                let p_in_class: f64 = probe
                    .in_ids
                    .iter()
                    .map(|&j| snapshot.p_in[probe.pos_out][j])
                    .sum();
                report.traces[i].entries.push(TraceEntry {
                    epoch,
                    p_out: snapshot.p_out[probe.pos_out],
                    p_in_class,
                    drawn_total: counters.drawn_total[i],
                    drawn_in_class: counters.drawn_in_class[i],
                });
            }
            keep_best(model, &mut best)?;
        }
        Some(aug)
    };

    if let Some((em, snap)) = &best {
        model.restore(snap);
        report.exact_match_dev = Some(*em);
    } else if let Some(devc) = dev {
        report.exact_match_dev = model.exact_on(&devc.examples)?;
    }
    report.exact_match_train = model.exact_on(&prepared.corpus.examples[..prepared.base_len])?;
    if let Some(testc) = test {
        if let Some(preds) = model.predictions(&testc.examples)? {
            let refs: Vec<Vec<Token>> =
                testc.examples.iter().map(|e| e.output.clone()).collect();
            report.exact_match_test = Some(exact_match(&preds, &refs)?);
            report.per_concept = concept_errors_from(&preds, &testc.examples, concepts);
        }
    }

    Ok(TrainOutcome { report, augmenter })
}
