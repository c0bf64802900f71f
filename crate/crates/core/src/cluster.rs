//! Word equivalence classes from shared contexts.
//!
//! Two tokens merge when two sentences in the corpus are identical except
//! at a single position holding the two tokens; the relation closes
//! transitively. Curated class files can replace or seed the inference.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Token};
use crate::{Error, Result};

pub type ClassId = u32;

/// (class of first token, class of last token) of a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassPair {
    pub first: ClassId,
    pub last: ClassId,
}

/// Which side of the parallel corpus context frames are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    #[default]
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EquivalenceClasses {
    pub class_of: BTreeMap<Token, ClassId>,
    pub members: Vec<BTreeSet<Token>>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Deterministic orientation: smaller index wins.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

impl EquivalenceClasses {
    /// Builds the partition from explicit merge groups over a vocabulary.
    /// Tokens of the vocabulary not covered by any group become singletons.
    pub fn from_groups<'a>(
        vocab: impl IntoIterator<Item = &'a Token>,
        groups: &[Vec<Token>],
    ) -> Result<Self> {
        let mut all: BTreeSet<Token> = vocab.into_iter().cloned().collect();
        for g in groups {
            all.extend(g.iter().cloned());
        }
        let index: BTreeMap<&Token, usize> =
            all.iter().enumerate().map(|(i, t)| (t, i)).collect();
        let mut uf = UnionFind::new(all.len());
        for g in groups {
            for pair in g.windows(2) {
                uf.union(index[&pair[0]], index[&pair[1]]);
            }
        }
        // Class ids ordered by each class's lexicographically first member.
        let tokens: Vec<&Token> = all.iter().collect();
        let mut rep_to_class: BTreeMap<usize, ClassId> = BTreeMap::new();
        let mut class_of = BTreeMap::new();
        let mut members: Vec<BTreeSet<Token>> = Vec::new();
        for (i, tok) in tokens.iter().enumerate() {
            let rep = uf.find(i);
            let id = *rep_to_class.entry(rep).or_insert_with(|| {
                members.push(BTreeSet::new());
                (members.len() - 1) as ClassId
            });
            members[id as usize].insert((*tok).clone());
            class_of.insert((*tok).clone(), id);
        }
        Ok(EquivalenceClasses { class_of, members })
    }

    pub fn class(&self, token: &str) -> Result<ClassId> {
        self.class_of
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    /// Tokens sharing a class with `token`, including itself.
    pub fn class_members(&self, token: &str) -> Result<&BTreeSet<Token>> {
        Ok(&self.members[self.class(token)? as usize])
    }
}

/// Infers classes by shared one-position context frames over the chosen
/// side, closed transitively. Output is independent of example order.
pub fn infer_classes_on(corpus: &Corpus, side: Side) -> Result<EquivalenceClasses> {
    if corpus.is_empty() {
        return Err(Error::Validation("cannot infer classes of an empty corpus".into()));
    }
    let vocab = match side {
        Side::Input => &corpus.input_vocab,
        Side::Output => &corpus.output_vocab,
    };
    // frame key -> first token observed in that frame; later tokens at the
    // same frame merge with the first (transitivity covers the rest).
    let mut frames: HashMap<String, &Token> = HashMap::new();
    let mut groups: Vec<Vec<Token>> = Vec::new();
    let mut sentences: BTreeSet<&Vec<Token>> = BTreeSet::new();
    for ex in &corpus.examples {
        sentences.insert(match side {
            Side::Input => &ex.input,
            Side::Output => &ex.output,
        });
    }
    for sent in sentences {
        for hole in 0..sent.len() {
            let mut key = String::new();
            for (j, t) in sent.iter().enumerate() {
                if j == hole {
                    key.push('\u{1}');
                } else {
                    key.push_str(t);
                }
                key.push(' ');
            }
            match frames.entry(key) {
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(&sent[hole]);
                }
                std::collections::hash_map::Entry::Occupied(e) => {
                    if **e.get() != sent[hole] {
                        groups.push(vec![(*e.get()).clone(), sent[hole].clone()]);
                    }
                }
            }
        }
    }
    EquivalenceClasses::from_groups(vocab, &groups)
}

pub fn infer_classes(corpus: &Corpus) -> Result<EquivalenceClasses> {
    infer_classes_on(corpus, Side::Input)
}

/// Parses a cluster file: one cluster per line, tokens space-separated,
/// `#` starts a comment.
pub fn load_override_clusters(path: impl AsRef<Path>) -> Result<Vec<Vec<Token>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut clusters = Vec::new();
    let mut seen: BTreeMap<Token, usize> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cluster = crate::corpus::toks(line);
        for t in &cluster {
            if let Some(prev) = seen.insert(t.clone(), lineno) {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("token {t:?} already in cluster on line {}", prev + 1),
                ));
            }
        }
        clusters.push(cluster);
    }
    Ok(clusters)
}

/// Classes from a curated cluster file; unlisted tokens of the corpus side
/// become singletons.
pub fn load_overrides(path: impl AsRef<Path>, corpus: &Corpus, side: Side) -> Result<EquivalenceClasses> {
    let clusters = load_override_clusters(path)?;
    let vocab = match side {
        Side::Input => &corpus.input_vocab,
        Side::Output => &corpus.output_vocab,
    };
    EquivalenceClasses::from_groups(vocab, &clusters)
}

/// (class of first token, class of last token).
pub fn span_class(span: &[Token], eqc: &EquivalenceClasses) -> Result<ClassPair> {
    let first = span
        .first()
        .ok_or_else(|| Error::Validation("empty span has no class".into()))?;
    let last = span.last().unwrap();
    Ok(ClassPair { first: eqc.class(first)?, last: eqc.class(last)? })
}
