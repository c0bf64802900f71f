//! Input-span to output-fragment alignment extraction.
//!
//! A pair (v, w) aligns when w appears in (nearly) every output whose input
//! contains v (sufficiency) and v appears in (nearly) every input whose
//! output contains w (necessity). Containment is contiguous-subsequence on
//! both sides. Of all w qualifying for one v, the longest wins, then the
//! best-supported, then the lexicographically first.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Token};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignConfig {
    pub max_v_len: usize,
    pub max_w_len: usize,
    pub nec_threshold: f64,
    pub suff_threshold: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            max_v_len: 3,
            max_w_len: 8,
            // A verb+direction phrase like "jump right" explains only about a
            // third of the "TR J" occurrences (the rest come from around/
            // opposite commands), so necessity must sit below that for
            // phrase-level pairs to survive. 0.2 keeps them with margin while
            // still rejecting connector-crossing noise, which scores under
            // 0.05 on generated corpora.
            nec_threshold: 0.2,
            suff_threshold: 1.0,
        }
    }
}

impl AlignConfig {
    fn validate(&self) -> Result<()> {
        if self.max_v_len == 0 || self.max_w_len == 0 {
            return Err(Error::Validation("alignment length caps must be >= 1".into()));
        }
        for (name, t) in [("nec", self.nec_threshold), ("suff", self.suff_threshold)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Validation(format!(
                    "{name}_threshold {t} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub w: Vec<Token>,
    /// Number of corpus examples whose input contains v.
    pub support: usize,
}

/// Accepted v -> w alignments. Iteration order is the sorted order of v.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentTable {
    pub entries: BTreeMap<Vec<Token>, TableEntry>,
}

impl AlignmentTable {
    pub fn lookup(&self, v: &[Token]) -> Option<&TableEntry> {
        self.entries.get(v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for (v, entry) in &self.entries {
            let row = serde_json::json!({"v": v, "w": entry.w, "support": entry.support});
            writeln!(out, "{row}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            v: Vec<Token>,
            w: Vec<Token>,
            support: usize,
        }
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(line)
                .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
            entries.insert(row.v, TableEntry { w: row.w, support: row.support });
        }
        Ok(AlignmentTable { entries })
    }
}

/// True when `needle` occurs as a contiguous subsequence of `haystack`.
pub fn contains_span(haystack: &[Token], needle: &[Token]) -> bool {
    !needle.is_empty()
        && haystack.len() >= needle.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}

/// |{d : v in x, w in y}| / |{d : v in x}|, 0 on empty denominator.
pub fn sufficiency(v: &[Token], w: &[Token], corpus: &Corpus) -> f64 {
    let mut with_v = 0usize;
    let mut both = 0usize;
    for ex in &corpus.examples {
        if contains_span(&ex.input, v) {
            with_v += 1;
            if contains_span(&ex.output, w) {
                both += 1;
            }
        }
    }
    if with_v == 0 {
        0.0
    } else {
        both as f64 / with_v as f64
    }
}

/// |{d : w in y, v in x}| / |{d : w in y}|, 0 on empty denominator.
pub fn necessity(v: &[Token], w: &[Token], corpus: &Corpus) -> f64 {
    let mut with_w = 0usize;
    let mut both = 0usize;
    for ex in &corpus.examples {
        if contains_span(&ex.output, w) {
            with_w += 1;
            if contains_span(&ex.input, v) {
                both += 1;
            }
        }
    }
    if with_w == 0 {
        0.0
    } else {
        both as f64 / with_w as f64
    }
}

/// One v with every fragment that passed both thresholds, before the
/// longest/support/lexicographic selection collapses it to a single w.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub v: Vec<Token>,
    pub support: usize,
    /// (w, number of examples containing both v and w)
    pub fragments: Vec<(Vec<Token>, usize)>,
}

fn distinct_spans(tokens: &[u32], max_len: usize) -> Vec<Box<[u32]>> {
    let mut seen: HashSet<&[u32]> = HashSet::new();
    let mut out = Vec::new();
    for len in 1..=max_len.min(tokens.len()) {
        for win in tokens.windows(len) {
            if seen.insert(win) {
                out.push(win.to_vec().into_boxed_slice());
            }
        }
    }
    out
}

/// Every (v, w) pair passing the thresholds, grouped by v in sorted order.
pub fn enumerate_candidates(corpus: &Corpus, config: &AlignConfig) -> Result<Vec<CandidateSet>> {
    config.validate()?;
    // Intern output tokens so fragment keys hash cheaply.
    let out_id: HashMap<&Token, u32> = corpus
        .output_vocab
        .iter()
        .enumerate()
        .map(|(i, t)| (t, i as u32))
        .collect();
    let out_tok: Vec<&Token> = corpus.output_vocab.iter().collect();

    let mut per_example_w: Vec<Vec<Box<[u32]>>> = Vec::with_capacity(corpus.len());
    let mut w_count: HashMap<Box<[u32]>, usize> = HashMap::new();
    for ex in &corpus.examples {
        let ids: Vec<u32> = ex.output.iter().map(|t| out_id[t]).collect();
        let spans = distinct_spans(&ids, config.max_w_len);
        for s in &spans {
            *w_count.entry(s.clone()).or_insert(0) += 1;
        }
        per_example_w.push(spans);
    }

    // v -> indices of examples containing it (each example once).
    let mut v_examples: BTreeMap<Vec<Token>, Vec<usize>> = BTreeMap::new();
    for (idx, ex) in corpus.examples.iter().enumerate() {
        let mut seen: HashSet<&[Token]> = HashSet::new();
        for len in 1..=config.max_v_len.min(ex.input.len()) {
            for win in ex.input.windows(len) {
                if seen.insert(win) {
                    v_examples.entry(win.to_vec()).or_default().push(idx);
                }
            }
        }
    }

    let mut out = Vec::new();
    for (v, examples) in v_examples {
        let n_v = examples.len();
        let mut joint: HashMap<&[u32], usize> = HashMap::new();
        for &idx in &examples {
            for s in &per_example_w[idx] {
                *joint.entry(s).or_insert(0) += 1;
            }
        }
        let mut fragments: Vec<(Vec<Token>, usize)> = Vec::new();
        for (w_ids, n_vw) in joint {
            let suff = n_vw as f64 / n_v as f64;
            if suff < config.suff_threshold {
                continue;
            }
            let nec = n_vw as f64 / w_count[w_ids] as f64;
            if nec < config.nec_threshold {
                continue;
            }
            let w: Vec<Token> = w_ids.iter().map(|&i| out_tok[i as usize].clone()).collect();
            fragments.push((w, n_vw));
        }
        if !fragments.is_empty() {
            fragments.sort();
            out.push(CandidateSet { v, support: n_v, fragments });
        }
    }
    Ok(out)
}

/// Collapses the qualifying candidates to one fragment per v.
pub fn extract_alignments(corpus: &Corpus, config: &AlignConfig) -> Result<AlignmentTable> {
    let mut entries = BTreeMap::new();
    for cand in enumerate_candidates(corpus, config)? {
        let best = cand
            .fragments
            .into_iter()
            .max_by(|(wa, na), (wb, nb)| {
                (wa.len(), na, std::cmp::Reverse(wa)).cmp(&(wb.len(), nb, std::cmp::Reverse(wb)))
            })
            .unwrap();
        entries.insert(cand.v, TableEntry { w: best.0, support: cand.support });
    }
    Ok(AlignmentTable { entries })
}
