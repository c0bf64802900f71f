//! Span eligibility and extraction.
//!
//! A contiguous token range of a tree-annotated sentence is *eligible* when
//! its nodes form a connected piece of the tree with at most one member
//! reaching a parent outside the range and at most one member reaching a
//! child outside the range (the root's imaginary parent counts as outside;
//! imaginary leaf children never do, or no multi-leaf subtree could ever
//! qualify). Sequence-form corpora have no trees; their spans are the
//! occurrences of aligned input phrases instead.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::AlignmentTable;
use crate::cluster::{span_class, ClassId, ClassPair, EquivalenceClasses};
use crate::corpus::{Corpus, ParallelExample, Token, TreeAnnotation};
use crate::{Error, Result};

/// Token positions `p ..= p + k` (so `k` is the length minus one).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpanRange {
    pub p: usize,
    pub k: usize,
}

impl SpanRange {
    pub fn new(p: usize, k: usize) -> Self {
        SpanRange { p, k }
    }

    pub fn start(&self) -> usize {
        self.p
    }

    pub fn end(&self) -> usize {
        self.p + self.k
    }

    pub fn len(&self) -> usize {
        self.k + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn slice<'a, T>(&self, tokens: &'a [T]) -> &'a [T] {
        &tokens[self.p..=self.p + self.k]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibleSpan {
    pub example_id: usize,
    pub range: SpanRange,
    /// Input tokens the range covers.
    pub tokens: Vec<Token>,
    /// Output tokens removed alongside when this span is swapped out.
    pub fragment: Vec<Token>,
    pub class_pair: ClassPair,
    pub is_subtree: bool,
    /// Class of the top node's token; tree spans only.
    pub root_class: Option<ClassId>,
    /// Where the fragment sits in the example's output; tree spans only
    /// (sequence substitution locates fragments by matching instead).
    pub out_range: Option<SpanRange>,
}

/// Eligibility facts for one range: boundary counts, connectivity, and the
/// top node (the unique member whose parent lies outside, root included).
struct RangeShape {
    eligible: bool,
    is_subtree: bool,
    top: usize,
}

fn range_shape(tree: &TreeAnnotation, children: &[Vec<usize>], range: SpanRange) -> RangeShape {
    let lo = range.p;
    let hi = range.p + range.k;
    let inside = |v: usize| v >= lo && v <= hi;

    // Boundary counts. The root's imaginary parent is outside every range.
    let mut outside_parent = 0usize;
    let mut outside_child = 0usize;
    let mut top = lo;
    for v in lo..=hi {
        let pa = tree.parent[v];
        if pa < 0 || !inside(pa as usize) {
            outside_parent += 1;
            top = v;
        }
        if children[v].iter().any(|&c| !inside(c)) {
            outside_child += 1;
        }
    }

    // Connectivity over undirected parent edges, members only.
    let mut seen = vec![false; range.len()];
    let mut queue = vec![lo];
    seen[0] = true;
    let mut count = 1usize;
    while let Some(v) = queue.pop() {
        let pa = tree.parent[v];
        if pa >= 0 && inside(pa as usize) && !seen[pa as usize - lo] {
            seen[pa as usize - lo] = true;
            count += 1;
            queue.push(pa as usize);
        }
        for &c in &children[v] {
            if inside(c) && !seen[c - lo] {
                seen[c - lo] = true;
                count += 1;
                queue.push(c);
            }
        }
    }
    let connected = count == range.len();

    RangeShape {
        eligible: connected && outside_parent <= 1 && outside_child <= 1,
        is_subtree: connected && outside_parent <= 1 && outside_child == 0,
        top,
    }
}

pub fn is_eligible(tree: &TreeAnnotation, range: SpanRange) -> Result<bool> {
    if range.p + range.k >= tree.len() {
        return Err(Error::Validation(format!(
            "range ({},{}) out of bounds for {} nodes",
            range.p,
            range.k,
            tree.len()
        )));
    }
    Ok(range_shape(tree, &tree.children(), range).eligible)
}

fn tree_fragment(
    example: &ParallelExample,
    tree: &TreeAnnotation,
    range: SpanRange,
) -> Result<(Vec<Token>, SpanRange)> {
    if let Some(frags) = &tree.frags {
        if let Some(&(op, ok)) = frags.get(&(range.p, range.k)) {
            let out = SpanRange::new(op, ok);
            return Ok((out.slice(&example.output).to_vec(), out));
        }
    }
    // Identity mapping: the fragment sits at the same positions.
    if range.p + range.k >= example.output.len() {
        return Err(Error::Validation(format!(
            "example {}: no fragment mapping for ({},{}) and identity range exceeds the output",
            example.id, range.p, range.k
        )));
    }
    Ok((range.slice(&example.output).to_vec(), range))
}

/// All eligible spans of a tree-annotated example, ordered by (p, k).
pub fn extract_eligible_spans(
    example: &ParallelExample,
    tree: &TreeAnnotation,
    eqc: &EquivalenceClasses,
) -> Result<Vec<EligibleSpan>> {
    if tree.len() != example.input.len() {
        return Err(Error::Validation(format!(
            "example {}: {} tree nodes for {} tokens",
            example.id,
            tree.len(),
            example.input.len()
        )));
    }
    let children = tree.children();
    let m = tree.len();
    let mut out = Vec::new();
    for p in 0..m {
        for k in 0..m - p {
            let range = SpanRange::new(p, k);
            let shape = range_shape(tree, &children, range);
            if !shape.eligible {
                continue;
            }
            let tokens = range.slice(&example.input).to_vec();
            let (fragment, out_range) = tree_fragment(example, tree, range)?;
            out.push(EligibleSpan {
                example_id: example.id,
                range,
                class_pair: span_class(&tokens, eqc)?,
                root_class: Some(eqc.class(&example.input[shape.top])?),
                tokens,
                fragment,
                is_subtree: shape.is_subtree,
                out_range: Some(out_range),
            });
        }
    }
    Ok(out)
}

/// One span per occurrence of each aligned phrase in the input, ordered by
/// (p, k). Fragments come from the table; trees play no part.
pub fn extract_sequence_spans(
    example: &ParallelExample,
    table: &AlignmentTable,
    eqc: &EquivalenceClasses,
) -> Result<Vec<EligibleSpan>> {
    let mut out = Vec::new();
    for (v, entry) in &table.entries {
        if v.is_empty() || v.len() > example.input.len() {
            continue;
        }
        for (p, win) in example.input.windows(v.len()).enumerate() {
            if win != v.as_slice() {
                continue;
            }
            out.push(EligibleSpan {
                example_id: example.id,
                range: SpanRange::new(p, v.len() - 1),
                tokens: v.clone(),
                fragment: entry.w.clone(),
                class_pair: span_class(v, eqc)?,
                is_subtree: false,
                root_class: None,
                out_range: None,
            });
        }
    }
    out.sort_by_key(|s| s.range);
    Ok(out)
}

/// Per-example span lists for the whole corpus, tree mode when annotations
/// exist, sequence mode via the alignment table otherwise.
pub fn extract_corpus_spans(
    corpus: &Corpus,
    table: Option<&AlignmentTable>,
    eqc: &EquivalenceClasses,
) -> Result<Vec<Vec<EligibleSpan>>> {
    if corpus.trees.is_some() {
        corpus
            .examples
            .par_iter()
            .map(|ex| {
                let tree = corpus.tree(ex.id).ok_or_else(|| {
                    Error::Validation(format!("example {} lacks a tree annotation", ex.id))
                })?;
                extract_eligible_spans(ex, tree, eqc)
            })
            .collect()
    } else {
        let table = table.ok_or_else(|| {
            Error::Validation("sequence corpus needs an alignment table to extract spans".into())
        })?;
        corpus
            .examples
            .par_iter()
            .map(|ex| extract_sequence_spans(ex, table, eqc))
            .collect()
    }
}

/// Corpus-wide pool of distinct spans, indexed by class pair and, for
/// complete subtrees, by root class.
#[derive(Debug, Clone, Default)]
pub struct SpanInventory {
    pub spans: Vec<EligibleSpan>,
    pub by_class: BTreeMap<ClassPair, Vec<usize>>,
    pub by_root: BTreeMap<ClassId, Vec<usize>>,
}

impl SpanInventory {
    /// Deduplicates on (tokens, fragment), keeping the first contributor in
    /// (example order, range order).
    pub fn build(per_example: &[Vec<EligibleSpan>]) -> SpanInventory {
        let mut seen: HashMap<(&[Token], &[Token]), usize> = HashMap::new();
        let mut spans: Vec<EligibleSpan> = Vec::new();
        for span in per_example.iter().flatten() {
            let key = (span.tokens.as_slice(), span.fragment.as_slice());
            if !seen.contains_key(&key) {
                seen.insert(key, spans.len());
                spans.push(span.clone());
            }
        }
        let mut by_class: BTreeMap<ClassPair, Vec<usize>> = BTreeMap::new();
        let mut by_root: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, span) in spans.iter().enumerate() {
            by_class.entry(span.class_pair).or_default().push(i);
            if span.is_subtree {
                if let Some(rc) = span.root_class {
                    by_root.entry(rc).or_default().push(i);
                }
            }
        }
        SpanInventory { spans, by_class, by_root }
    }

    pub fn candidates(&self, pair: ClassPair) -> &[usize] {
        self.by_class.get(&pair).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Lookup from (tokens, fragment) to inventory index, for mapping an
    /// example's extracted spans onto the frozen inventory.
    pub fn index_map(&self) -> HashMap<(Vec<Token>, Vec<Token>), usize> {
        self.spans
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.tokens.clone(), s.fragment.clone()), i))
            .collect()
    }

    /// Content fingerprint, stable across runs; ties augmenter checkpoints
    /// to the inventory they were trained against.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.spans {
            h.update(s.tokens.join("\u{1f}").as_bytes());
            h.update([0u8]);
            h.update(s.fragment.join("\u{1f}").as_bytes());
            h.update([0u8]);
            h.update(s.class_pair.first.to_le_bytes());
            h.update(s.class_pair.last.to_le_bytes());
            h.update([s.is_subtree as u8]);
            h.update(s.root_class.map(|c| c + 1).unwrap_or(0).to_le_bytes());
        }
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One line per span: `{"example":…,"p":…,"k":…,"tokens":…,"frag":…,"class":[first,last],"subtree":…}`.
pub fn write_span_dump(path: impl AsRef<Path>, per_example: &[Vec<EligibleSpan>]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for span in per_example.iter().flatten() {
        let row = serde_json::json!({
            "example": span.example_id,
            "p": span.range.p,
            "k": span.range.k,
            "tokens": span.tokens,
            "frag": span.fragment,
            "class": [span.class_pair.first, span.class_pair.last],
            "subtree": span.is_subtree,
        });
        writeln!(out, "{row}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
