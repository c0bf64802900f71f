//! Legality-checked span substitution and the sampling loop that grows a
//! corpus from it.
//!
//! Tree-annotated examples splice exact ranges. Sequence examples follow
//! replace-everywhere semantics: every occurrence of the outgoing tokens in
//! the input and of their fragment in the output changes at once, and
//! ambiguous cases (overlapping matches, or a fragment that also lives
//! inside some other span's larger fragment elsewhere in the sentence) are
//! discarded rather than guessed at.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::AlignmentTable;
use crate::cluster::{ClassPair, EquivalenceClasses};
use crate::corpus::{Corpus, ParallelExample, Token};
use crate::derive_rng;
use crate::spans::{extract_sequence_spans, EligibleSpan, SpanInventory};
use crate::{Error, Result};
use rand::Rng;

/// How a complete-subtree swap-out chooses its partners: by root-token
/// class, or by requiring the partner's boundary pair to double the root
/// class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SubtreeRule {
    #[default]
    Root,
    Boundary,
}

/// Restricts which spans may participate in substitution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanFilter {
    All,
    /// Word-level baseline: single-token spans only, on both sides.
    SingleToken,
}

impl SpanFilter {
    fn admits(&self, span: &EligibleSpan) -> bool {
        match self {
            SpanFilter::All => true,
            SpanFilter::SingleToken => span.tokens.len() == 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Iterative depth: how many rounds fold their products back into the
    /// sampling pool.
    pub k: usize,
    /// Draws per round; skipped draws still consume budget.
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub subtree_rule: SubtreeRule,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { k: 1, n: 10_000, seed: 0, subtree_rule: SubtreeRule::Root }
    }
}

/// True when `s_in` may replace `s_out`. A single-token swap-out only
/// admits spans whose boundary classes both equal that token's class; a
/// complete subtree additionally admits subtrees matching under `rule`;
/// everything else needs equal boundary pairs.
pub fn legal_pair(s_out: &EligibleSpan, s_in: &EligibleSpan, rule: SubtreeRule) -> bool {
    if s_out.tokens.len() == 1 {
        let c = s_out.class_pair.first;
        return s_in.class_pair.first == c && s_in.class_pair.last == c;
    }
    let boundary_match = s_in.class_pair == s_out.class_pair;
    if s_out.is_subtree {
        if let Some(rc) = s_out.root_class {
            let subtree_route = match rule {
                SubtreeRule::Root => s_in.is_subtree && s_in.root_class == Some(rc),
                SubtreeRule::Boundary => {
                    s_in.is_subtree
                        && s_in.class_pair.first == rc
                        && s_in.class_pair.last == rc
                }
            };
            return boundary_match || subtree_route;
        }
    }
    boundary_match
}

/// Inventory indices legal as replacements for `s_out`, ascending.
pub fn legal_candidates(
    inventory: &SpanInventory,
    s_out: &EligibleSpan,
    rule: SubtreeRule,
    filter: SpanFilter,
) -> Vec<usize> {
    let mut idxs: Vec<usize> = inventory.candidates(s_out.class_pair).to_vec();
    if s_out.tokens.len() > 1 && s_out.is_subtree {
        if let Some(rc) = s_out.root_class {
            match rule {
                SubtreeRule::Root => {
                    if let Some(more) = inventory.by_root.get(&rc) {
                        idxs.extend_from_slice(more);
                    }
                }
                SubtreeRule::Boundary => {
                    idxs.extend_from_slice(
                        inventory.candidates(ClassPair { first: rc, last: rc }),
                    );
                }
            }
            idxs.sort_unstable();
            idxs.dedup();
        }
    }
    idxs.retain(|&i| {
        let s = &inventory.spans[i];
        filter.admits(s) && legal_pair(s_out, s, rule)
    });
    idxs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubstMode {
    Tree,
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    /// Occurrences of the outgoing tokens overlap in the input.
    OverlappingInputMatches,
    /// Occurrences of the outgoing fragment overlap in the output.
    OverlappingFragmentMatches,
    /// The outgoing fragment does not occur in the output at all.
    MissingFragment,
    /// Another span elsewhere in the sentence carries a fragment that
    /// contains the outgoing fragment, so replace-everywhere would corrupt
    /// that span's share of the output.
    ForeignFragment,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SubstOutcome {
    Generated(AugmentedExample),
    Discard(DiscardReason),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub source_id: usize,
    pub out_span: EligibleSpan,
    pub in_span: EligibleSpan,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentedExample {
    pub input: Vec<Token>,
    pub output: Vec<Token>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentedSet {
    pub examples: Vec<AugmentedExample>,
}

impl AugmentedSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// One line per example: corpus fields plus
    /// `"provenance":{"source":…,"out":[p,k],"in_example":…,"in":[p,k],"depth":…}`.
    pub fn write_jsonl(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        use std::io::Write as _;
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for (id, ex) in self.examples.iter().enumerate() {
            let p = &ex.provenance;
            let row = serde_json::json!({
                "id": id,
                "input": ex.input,
                "output": ex.output,
                "provenance": {
                    "source": p.source_id,
                    "out": [p.out_span.range.p, p.out_span.range.k],
                    "in_example": p.in_span.example_id,
                    "in": [p.in_span.range.p, p.in_span.range.k],
                    "depth": p.depth,
                },
            });
            writeln!(out, "{row}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AugmentStats {
    pub draws: usize,
    pub generated: usize,
    pub duplicates: usize,
    pub no_spans: usize,
    pub no_legal_partner: usize,
    pub discard_overlapping_input: usize,
    pub discard_overlapping_fragment: usize,
    pub discard_missing_fragment: usize,
    pub discard_foreign_fragment: usize,
}

impl AugmentStats {
    fn count_discard(&mut self, reason: DiscardReason) {
        match reason {
            DiscardReason::OverlappingInputMatches => self.discard_overlapping_input += 1,
            DiscardReason::OverlappingFragmentMatches => self.discard_overlapping_fragment += 1,
            DiscardReason::MissingFragment => self.discard_missing_fragment += 1,
            DiscardReason::ForeignFragment => self.discard_foreign_fragment += 1,
        }
    }

    fn absorb(&mut self, other: &AugmentStats) {
        self.draws += other.draws;
        self.generated += other.generated;
        self.duplicates += other.duplicates;
        self.no_spans += other.no_spans;
        self.no_legal_partner += other.no_legal_partner;
        self.discard_overlapping_input += other.discard_overlapping_input;
        self.discard_overlapping_fragment += other.discard_overlapping_fragment;
        self.discard_missing_fragment += other.discard_missing_fragment;
        self.discard_foreign_fragment += other.discard_foreign_fragment;
    }
}

fn occurrences(hay: &[Token], needle: &[Token]) -> Vec<usize> {
    if needle.is_empty() || hay.len() < needle.len() {
        return Vec::new();
    }
    (0..=hay.len() - needle.len())
        .filter(|&i| &hay[i..i + needle.len()] == needle)
        .collect()
}

fn any_overlap(occ: &[usize], len: usize) -> bool {
    occ.windows(2).any(|w| w[1] - w[0] < len)
}

/// Replaces the (non-overlapping, ascending) occurrences of an `old_len`
/// window with `new`.
fn replace_at(hay: &[Token], occ: &[usize], old_len: usize, new: &[Token]) -> Vec<Token> {
    let mut out = Vec::with_capacity(hay.len());
    let mut cursor = 0usize;
    for &q in occ {
        out.extend_from_slice(&hay[cursor..q]);
        out.extend_from_slice(new);
        cursor = q + old_len;
    }
    out.extend_from_slice(&hay[cursor..]);
    out
}

fn splice(hay: &[Token], start: usize, end_inclusive: usize, new: &[Token]) -> Vec<Token> {
    let mut out = Vec::with_capacity(hay.len());
    out.extend_from_slice(&hay[..start]);
    out.extend_from_slice(new);
    out.extend_from_slice(&hay[end_inclusive + 1..]);
    out
}

/// Swaps `s_in` for `s_out` inside `example`. `Discard` is an ordinary
/// outcome; errors mean `s_out` does not actually sit in the example.
pub fn substitute(
    example: &ParallelExample,
    s_out: &EligibleSpan,
    s_in: &EligibleSpan,
    mode: SubstMode,
) -> Result<SubstOutcome> {
    substitute_guarded(example, s_out, s_in, mode, &[])
}

/// Like [`substitute`], also discarding when one of `siblings` (the
/// example's other spans) shows the outgoing fragment embedded in a larger
/// fragment away from the replaced positions — replace-everywhere would
/// rewrite that material too.
pub fn substitute_guarded(
    example: &ParallelExample,
    s_out: &EligibleSpan,
    s_in: &EligibleSpan,
    mode: SubstMode,
    siblings: &[EligibleSpan],
) -> Result<SubstOutcome> {
    let located = example
        .input
        .get(s_out.range.p..=s_out.range.p + s_out.range.k)
        .map(|win| win == s_out.tokens.as_slice())
        .unwrap_or(false);
    if !located {
        return Err(Error::Validation(format!(
            "example {}: swap-out span {:?} not at ({},{})",
            example.id, s_out.tokens, s_out.range.p, s_out.range.k
        )));
    }

    let (input, output) = match mode {
        SubstMode::Tree => {
            let out_range = s_out.out_range.ok_or_else(|| {
                Error::Validation("tree substitution needs the span's output location".into())
            })?;
            let frag_located = example
                .output
                .get(out_range.p..=out_range.p + out_range.k)
                .map(|win| win == s_out.fragment.as_slice())
                .unwrap_or(false);
            if !frag_located {
                return Err(Error::Validation(format!(
                    "example {}: fragment {:?} not at ({},{})",
                    example.id, s_out.fragment, out_range.p, out_range.k
                )));
            }
            (
                splice(&example.input, s_out.range.p, s_out.range.end(), &s_in.tokens),
                splice(&example.output, out_range.p, out_range.end(), &s_in.fragment),
            )
        }
        SubstMode::Sequence => {
            let v_occ = occurrences(&example.input, &s_out.tokens);
            let w_occ = occurrences(&example.output, &s_out.fragment);
            if w_occ.is_empty() {
                return Ok(SubstOutcome::Discard(DiscardReason::MissingFragment));
            }
            if any_overlap(&v_occ, s_out.tokens.len()) {
                return Ok(SubstOutcome::Discard(DiscardReason::OverlappingInputMatches));
            }
            if any_overlap(&w_occ, s_out.fragment.len()) {
                return Ok(SubstOutcome::Discard(DiscardReason::OverlappingFragmentMatches));
            }
            let covered = |sib: &EligibleSpan| {
                v_occ.iter().any(|&q| {
                    sib.range.p <= q + s_out.tokens.len() - 1 && q <= sib.range.end()
                })
            };
            let foreign = siblings.iter().any(|sib| {
                sib.fragment.len() >= s_out.fragment.len()
                    && sib
                        .fragment
                        .windows(s_out.fragment.len())
                        .any(|w| w == s_out.fragment.as_slice())
                    && !covered(sib)
            });
            if foreign {
                return Ok(SubstOutcome::Discard(DiscardReason::ForeignFragment));
            }
            (
                replace_at(&example.input, &v_occ, s_out.tokens.len(), &s_in.tokens),
                replace_at(&example.output, &w_occ, s_out.fragment.len(), &s_in.fragment),
            )
        }
    };

    Ok(SubstOutcome::Generated(AugmentedExample {
        input,
        output,
        provenance: Provenance {
            source_id: example.id,
            out_span: s_out.clone(),
            in_span: s_in.clone(),
            depth: 1,
        },
    }))
}

/// What span extraction needs to process freshly generated examples.
pub struct SubstContext<'a> {
    pub eqc: &'a EquivalenceClasses,
    /// Present for sequence corpora; tree corpora cannot re-derive
    /// annotations for generated examples, which therefore contribute no
    /// spans of their own in later rounds.
    pub table: Option<&'a AlignmentTable>,
}

impl SubstContext<'_> {
    /// Spans of a freshly generated example: table-matched for sequence
    /// corpora, none for tree corpora.
    pub fn respan(&self, example: &ParallelExample) -> Result<Vec<EligibleSpan>> {
        match self.table {
            Some(table) => extract_sequence_spans(example, table, self.eqc),
            None => Ok(Vec::new()),
        }
    }
}

struct PoolEntry {
    example: ParallelExample,
    spans: Vec<EligibleSpan>,
}

fn run_sampling(
    corpus: &Corpus,
    per_spans: &[Vec<EligibleSpan>],
    inventory: &SpanInventory,
    ctx: &SubstContext,
    config: &AugmentConfig,
    filter: SpanFilter,
) -> Result<(AugmentedSet, AugmentStats)> {
    if config.k == 0 {
        return Err(Error::Validation("iterative depth must be >= 1".into()));
    }
    if per_spans.len() != corpus.len() {
        return Err(Error::Validation(format!(
            "{} span lists for {} examples",
            per_spans.len(),
            corpus.len()
        )));
    }
    let mode = if corpus.trees.is_some() { SubstMode::Tree } else { SubstMode::Sequence };

    let mut pool: Vec<PoolEntry> = corpus
        .examples
        .iter()
        .zip(per_spans)
        .map(|(ex, spans)| PoolEntry { example: ex.clone(), spans: spans.clone() })
        .collect();
    let mut seen: HashSet<(Vec<Token>, Vec<Token>)> = pool
        .iter()
        .map(|e| (e.example.input.clone(), e.example.output.clone()))
        .collect();
    let mut next_id = corpus.examples.iter().map(|e| e.id).max().unwrap_or(0) + 1;

    let mut set = AugmentedSet::default();
    let mut stats = AugmentStats::default();
    for round in 0..config.k {
        let mut rng = derive_rng(config.seed, round as u64);
        let mut batch: Vec<AugmentedExample> = Vec::new();
        for _ in 0..config.n {
            stats.draws += 1;
            let entry = &pool[rng.random_range(0..pool.len())];
            if entry.spans.is_empty() {
                stats.no_spans += 1;
                continue;
            }
            let s_out = &entry.spans[rng.random_range(0..entry.spans.len())];
            if !filter.admits(s_out) {
                stats.no_legal_partner += 1;
                continue;
            }
            let cands = legal_candidates(inventory, s_out, config.subtree_rule, filter);
            if cands.is_empty() {
                stats.no_legal_partner += 1;
                continue;
            }
            let s_in = &inventory.spans[cands[rng.random_range(0..cands.len())]];
            match substitute_guarded(&entry.example, s_out, s_in, mode, &entry.spans)? {
                SubstOutcome::Discard(reason) => stats.count_discard(reason),
                SubstOutcome::Generated(mut aug) => {
                    if aug.input == entry.example.input && aug.output == entry.example.output {
                        stats.duplicates += 1;
                        continue;
                    }
                    if !seen.insert((aug.input.clone(), aug.output.clone())) {
                        stats.duplicates += 1;
                        continue;
                    }
                    aug.provenance.depth = round + 1;
                    batch.push(aug);
                }
            }
        }
        stats.generated += batch.len();
        for aug in &batch {
            let example = ParallelExample {
                id: next_id,
                input: aug.input.clone(),
                output: aug.output.clone(),
            };
            next_id += 1;
            let spans = ctx.respan(&example)?;
            pool.push(PoolEntry { example, spans });
        }
        set.examples.extend(batch);
    }
    Ok((set, stats))
}

/// The iterative sampling loop: each round draws `n` times (example, one of
/// its spans, a legal inventory partner), substitutes, deduplicates against
/// everything seen, and folds the round's products into the pool.
pub fn spansub(
    corpus: &Corpus,
    per_spans: &[Vec<EligibleSpan>],
    inventory: &SpanInventory,
    ctx: &SubstContext,
    config: &AugmentConfig,
) -> Result<(AugmentedSet, AugmentStats)> {
    run_sampling(corpus, per_spans, inventory, ctx, config, SpanFilter::All)
}

/// Word-level control: the same loop restricted to single-token spans on
/// both sides.
pub fn lexsym_baseline(
    corpus: &Corpus,
    per_spans: &[Vec<EligibleSpan>],
    inventory: &SpanInventory,
    ctx: &SubstContext,
    config: &AugmentConfig,
) -> Result<(AugmentedSet, AugmentStats)> {
    run_sampling(corpus, per_spans, inventory, ctx, config, SpanFilter::SingleToken)
}

/// Depth-1 enumeration of every legal substitution, deduplicated in
/// (example, span, candidate) order. Suited to small corpora and to
/// counting distinct products.
pub fn spansub_exhaustive(
    corpus: &Corpus,
    per_spans: &[Vec<EligibleSpan>],
    inventory: &SpanInventory,
    rule: SubtreeRule,
    filter: SpanFilter,
) -> Result<(AugmentedSet, AugmentStats)> {
    if per_spans.len() != corpus.len() {
        return Err(Error::Validation(format!(
            "{} span lists for {} examples",
            per_spans.len(),
            corpus.len()
        )));
    }
    let mode = if corpus.trees.is_some() { SubstMode::Tree } else { SubstMode::Sequence };
    let per_example: Vec<(Vec<AugmentedExample>, AugmentStats)> = corpus
        .examples
        .par_iter()
        .zip(per_spans)
        .map(|(ex, spans)| {
            let mut local = Vec::new();
            let mut st = AugmentStats::default();
            for s_out in spans.iter().filter(|s| filter.admits(s)) {
                for &ci in &legal_candidates(inventory, s_out, rule, filter) {
                    st.draws += 1;
                    match substitute_guarded(ex, s_out, &inventory.spans[ci], mode, spans)? {
                        SubstOutcome::Discard(reason) => st.count_discard(reason),
                        SubstOutcome::Generated(aug) => {
                            if aug.input == ex.input && aug.output == ex.output {
                                st.duplicates += 1;
                            } else {
                                local.push(aug);
                            }
                        }
                    }
                }
            }
            Ok((local, st))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut seen: HashSet<(Vec<Token>, Vec<Token>)> = corpus
        .examples
        .iter()
        .map(|e| (e.input.clone(), e.output.clone()))
        .collect();
    let mut set = AugmentedSet::default();
    let mut stats = AugmentStats::default();
    for (local, st) in per_example {
        stats.absorb(&st);
        for aug in local {
            if seen.insert((aug.input.clone(), aug.output.clone())) {
                set.examples.push(aug);
            } else {
                stats.duplicates += 1;
            }
        }
    }
    stats.generated = set.len();
    Ok((set, stats))
}
