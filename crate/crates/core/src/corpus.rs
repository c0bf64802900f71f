//! Parallel corpora: loading, generation, serialization.
//!
//! Three on-disk forms are supported: the `IN: ... OUT: ...` text format,
//! plain JSONL (`{"id":..,"input":[..],"output":[..]}`), and tree JSONL
//! which adds a `parent` array (root parent = -1, node i = token i) and an
//! optional `frags` list mapping input ranges to output ranges.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Token = String;

/// Splits on ASCII whitespace. Convenience for tests and fixtures.
pub fn toks(s: &str) -> Vec<Token> {
    s.split_whitespace().map(|t| t.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelExample {
    pub id: usize,
    pub input: Vec<Token>,
    pub output: Vec<Token>,
}

/// One rooted multi-way tree over the input tokens of an example.
/// `parent[i]` is the parent node of token i, or -1 for the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeAnnotation {
    pub parent: Vec<i64>,
    /// Optional explicit input-range -> output-range fragment map, keyed by
    /// (p, k). When `None`, fragment lookup is the identity index range.
    pub frags: Option<BTreeMap<(usize, usize), (usize, usize)>>,
}

impl TreeAnnotation {
    pub fn new(parent: Vec<i64>) -> Result<Self> {
        Self::with_frags(parent, None)
    }

    pub fn with_frags(
        parent: Vec<i64>,
        frags: Option<BTreeMap<(usize, usize), (usize, usize)>>,
    ) -> Result<Self> {
        let n = parent.len();
        if n == 0 {
            return Err(Error::Validation("empty parent array".into()));
        }
        let mut root = None;
        for (i, &p) in parent.iter().enumerate() {
            if p == -1 {
                if root.replace(i).is_some() {
                    return Err(Error::Validation("parent array has two roots".into()));
                }
            } else if p < 0 || p as usize >= n {
                return Err(Error::Validation(format!(
                    "parent index {p} of node {i} out of range"
                )));
            } else if p as usize == i {
                return Err(Error::Validation(format!("node {i} is its own parent")));
            }
        }
        let root = root.ok_or_else(|| Error::Validation("parent array has no root".into()))?;
        // n-1 child edges plus a reachability sweep rules out cycles.
        let mut children = vec![Vec::new(); n];
        for (i, &p) in parent.iter().enumerate() {
            if p >= 0 {
                children[p as usize].push(i);
            }
        }
        let mut seen = vec![false; n];
        let mut stack = vec![root];
        seen[root] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &c in &children[v] {
                if !seen[c] {
                    seen[c] = true;
                    count += 1;
                    stack.push(c);
                }
            }
        }
        if count != n {
            return Err(Error::Validation(
                "parent array contains a cycle (unreachable nodes)".into(),
            ));
        }
        Ok(TreeAnnotation { parent, frags })
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn root(&self) -> usize {
        self.parent.iter().position(|&p| p == -1).unwrap()
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.parent.len()];
        for (i, &p) in self.parent.iter().enumerate() {
            if p >= 0 {
                ch[p as usize].push(i);
            }
        }
        ch
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<ParallelExample>,
    pub trees: Option<BTreeMap<usize, TreeAnnotation>>,
    pub input_vocab: BTreeSet<Token>,
    pub output_vocab: BTreeSet<Token>,
}

impl Corpus {
    pub fn new(
        examples: Vec<ParallelExample>,
        trees: Option<BTreeMap<usize, TreeAnnotation>>,
    ) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for ex in &examples {
            if ex.input.is_empty() || ex.output.is_empty() {
                return Err(Error::Validation(format!(
                    "example {} has an empty side",
                    ex.id
                )));
            }
            for t in ex.input.iter().chain(&ex.output) {
                if t.is_empty() || t.chars().any(char::is_whitespace) {
                    return Err(Error::Validation(format!(
                        "example {}: bad token {t:?}",
                        ex.id
                    )));
                }
            }
            if !ids.insert(ex.id) {
                return Err(Error::Validation(format!("duplicate example id {}", ex.id)));
            }
        }
        if let Some(trees) = &trees {
            for (&id, tree) in trees {
                let ex = examples
                    .iter()
                    .find(|e| e.id == id)
                    .ok_or_else(|| Error::Validation(format!("tree for unknown id {id}")))?;
                if tree.len() != ex.input.len() {
                    return Err(Error::Validation(format!(
                        "example {id}: {} tree nodes for {} tokens",
                        tree.len(),
                        ex.input.len()
                    )));
                }
                if let Some(frags) = &tree.frags {
                    for (&(p, k), &(op, ok)) in frags {
                        if p + k >= ex.input.len() || op + ok >= ex.output.len() {
                            return Err(Error::Validation(format!(
                                "example {id}: frag range ({p},{k})->({op},{ok}) out of bounds"
                            )));
                        }
                    }
                }
            }
        }
        let mut input_vocab = BTreeSet::new();
        let mut output_vocab = BTreeSet::new();
        for ex in &examples {
            input_vocab.extend(ex.input.iter().cloned());
            output_vocab.extend(ex.output.iter().cloned());
        }
        Ok(Corpus { examples, trees, input_vocab, output_vocab })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&ParallelExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn tree(&self, id: usize) -> Option<&TreeAnnotation> {
        self.trees.as_ref().and_then(|m| m.get(&id))
    }
}

// ---- IN:/OUT: text format ----

pub fn load_scan(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rest = line
            .strip_prefix("IN:")
            .ok_or_else(|| Error::parse(path, lineno + 1, "line does not start with IN:"))?;
        let (inp, out) = rest
            .split_once("OUT:")
            .ok_or_else(|| Error::parse(path, lineno + 1, "line has no OUT: marker"))?;
        let input = toks(inp);
        let output = toks(out);
        if input.is_empty() {
            return Err(Error::parse(path, lineno + 1, "empty input side"));
        }
        if output.is_empty() {
            return Err(Error::parse(path, lineno + 1, "empty output side"));
        }
        examples.push(ParallelExample { id: examples.len(), input, output });
    }
    if examples.is_empty() {
        return Err(Error::parse(path, 0, "no examples in file"));
    }
    Corpus::new(examples, None)
}

pub fn write_scan(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = String::new();
    for ex in &corpus.examples {
        buf.push_str("IN: ");
        buf.push_str(&ex.input.join(" "));
        buf.push_str(" OUT: ");
        buf.push_str(&ex.output.join(" "));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

// ---- JSONL ----

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    id: usize,
    input: Vec<Token>,
    output: Vec<Token>,
    #[serde(skip_serializing_if = "Option::is_none")]
    parent: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frags: Option<Vec<FragRow>>,
}

#[derive(Serialize, Deserialize)]
struct FragRow {
    p: usize,
    k: usize,
    out_p: usize,
    out_k: usize,
}

/// Loads either plain or tree JSONL; rows with a `parent` field become
/// tree-annotated examples.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    let mut trees = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
        if let Some(parent) = row.parent {
            let frags = row.frags.map(|v| {
                v.into_iter()
                    .map(|f| ((f.p, f.k), (f.out_p, f.out_k)))
                    .collect::<BTreeMap<_, _>>()
            });
            let tree = TreeAnnotation::with_frags(parent, frags)
                .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
            trees.insert(row.id, tree);
        }
        examples.push(ParallelExample { id: row.id, input: row.input, output: row.output });
    }
    let trees = if trees.is_empty() { None } else { Some(trees) };
    Corpus::new(examples, trees)
}

/// Loads tree JSONL, requiring every row to carry a parent array.
pub fn load_tree_jsonl(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let corpus = load_jsonl(path)?;
    let trees = corpus.trees.as_ref().map(|t| t.len()).unwrap_or(0);
    if trees != corpus.examples.len() {
        return Err(Error::Validation(format!(
            "{}: {} of {} rows missing parent arrays",
            path.display(),
            corpus.examples.len() - trees,
            corpus.examples.len()
        )));
    }
    Ok(corpus)
}

pub fn write_jsonl(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for ex in &corpus.examples {
        let tree = corpus.tree(ex.id);
        let row = JsonlRow {
            id: ex.id,
            input: ex.input.clone(),
            output: ex.output.clone(),
            parent: tree.map(|t| t.parent.clone()),
            frags: tree.and_then(|t| {
                t.frags.as_ref().map(|m| {
                    m.iter()
                        .map(|(&(p, k), &(out_p, out_k))| FragRow { p, k, out_p, out_k })
                        .collect()
                })
            }),
        };
        let line = serde_json::to_string(&row)
            .map_err(|e| Error::Validation(format!("serialize id {}: {e}", ex.id)))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

// ---- miniature navigation-command grammar ----

/// Doubles the turn (opposite) or interleaves four turn-step pairs
/// (around).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModifierKind {
    Opposite,
    Around,
}

/// Inventory of the generated command language. Surface forms pair with
/// their action tokens where applicable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub primitives: Vec<(Token, Token)>,
    pub directions: Vec<(Token, Token)>,
    pub modifiers: Vec<(Token, ModifierKind)>,
    pub repeats: Vec<(Token, usize)>,
    pub connectors: Vec<Token>,
    /// 1 = bare phrases, 2 = adds repeats, 3 = adds two-clause commands.
    pub max_depth: u8,
    /// Replace abbreviated action tokens with long-form names.
    pub long_actions: bool,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            primitives: [("walk", "W"), ("run", "R"), ("jump", "J"), ("look", "L")]
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            directions: [("left", "TL"), ("right", "TR")]
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            modifiers: vec![
                ("opposite".into(), ModifierKind::Opposite),
                ("around".into(), ModifierKind::Around),
            ],
            repeats: vec![("twice".into(), 2), ("thrice".into(), 3)],
            connectors: vec!["and".into(), "after".into()],
            max_depth: 3,
            long_actions: false,
        }
    }
}

impl GrammarConfig {
    /// The grammar's word categories as merge groups: primitives,
    /// directions, modifiers, repeats, connectors. Suitable as curated
    /// clusters where inferred ones would conflate categories (a two-token
    /// command like `walk right` shares its frame with `walk twice`, which
    /// would merge directions with repeat words).
    pub fn class_groups(&self) -> Vec<Vec<Token>> {
        vec![
            self.primitives.iter().map(|(t, _)| t.clone()).collect(),
            self.directions.iter().map(|(t, _)| t.clone()).collect(),
            self.modifiers.iter().map(|(t, _)| t.clone()).collect(),
            self.repeats.iter().map(|(t, _)| t.clone()).collect(),
            self.connectors.clone(),
        ]
    }
}

fn long_form(abbrev: &str) -> String {
    match abbrev {
        "W" => "WALK".into(),
        "R" => "RUN".into(),
        "J" => "JUMP".into(),
        "L" => "LOOK".into(),
        "TL" => "TURN_LEFT".into(),
        "TR" => "TURN_RIGHT".into(),
        other => other.to_string(),
    }
}

/// Enumerates every command of the grammar up to `max_depth`, in a fixed
/// order, with outputs built compositionally from the config's action
/// tokens.
pub fn enumerate_scan(config: &GrammarConfig) -> Vec<(Vec<Token>, Vec<Token>)> {
    let act = |a: &str| -> Token {
        if config.long_actions { long_form(a) } else { a.to_string() }
    };
    // phrase = prim | prim dir | prim mod dir
    let mut phrases: Vec<(Vec<Token>, Vec<Token>)> = Vec::new();
    for (p, pa) in &config.primitives {
        phrases.push((vec![p.clone()], vec![act(pa)]));
        for (d, da) in &config.directions {
            phrases.push((vec![p.clone(), d.clone()], vec![act(da), act(pa)]));
        }
        for (m, kind) in &config.modifiers {
            for (d, da) in &config.directions {
                let actions = match kind {
                    ModifierKind::Opposite => vec![act(da), act(da), act(pa)],
                    ModifierKind::Around => {
                        let mut a = Vec::with_capacity(8);
                        for _ in 0..4 {
                            a.push(act(da));
                            a.push(act(pa));
                        }
                        a
                    }
                };
                phrases.push((vec![p.clone(), m.clone(), d.clone()], actions));
            }
        }
    }
    if config.max_depth <= 1 {
        return phrases;
    }
    let mut clauses = phrases.clone();
    for (r, times) in &config.repeats {
        for (ptoks, pacts) in &phrases {
            let mut toks = ptoks.clone();
            toks.push(r.clone());
            let mut acts = Vec::with_capacity(pacts.len() * times);
            for _ in 0..*times {
                acts.extend(pacts.iter().cloned());
            }
            clauses.push((toks, acts));
        }
    }
    if config.max_depth <= 2 {
        return clauses;
    }
    let mut commands = clauses.clone();
    for conn in &config.connectors {
        for (t1, a1) in &clauses {
            for (t2, a2) in &clauses {
                let mut toks = t1.clone();
                toks.push(conn.clone());
                toks.extend(t2.iter().cloned());
                let acts = if conn == "after" {
                    let mut a = a2.clone();
                    a.extend(a1.iter().cloned());
                    a
                } else {
                    let mut a = a1.clone();
                    a.extend(a2.iter().cloned());
                    a
                };
                commands.push((toks, acts));
            }
        }
    }
    commands
}

/// Deterministic corpus from the command grammar. `size = None` keeps the
/// full enumeration; otherwise a seeded shuffle picks `size` distinct
/// commands (capped at the enumeration size).
pub fn gen_scan_mini(config: &GrammarConfig, seed: u64, size: Option<usize>) -> Result<Corpus> {
    if config.primitives.is_empty() {
        return Err(Error::Validation("grammar needs at least one primitive".into()));
    }
    let mut all = enumerate_scan(config);
    if let Some(n) = size {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        all.truncate(n.min(all.len()));
    }
    let examples = all
        .into_iter()
        .enumerate()
        .map(|(id, (input, output))| ParallelExample { id, input, output })
        .collect();
    Corpus::new(examples, None)
}

/// Partition for the held-out-primitive protocol: the bare `prim` command
/// stays in training, every composed use of `prim` goes to test.
pub fn primitive_split(corpus: &Corpus, prim: &str) -> Result<(Corpus, Corpus)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ex in &corpus.examples {
        let has = ex.input.iter().any(|t| t == prim);
        if has && ex.input.len() > 1 {
            test.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    if test.is_empty() {
        return Err(Error::Validation(format!(
            "no composed uses of {prim:?} in the corpus"
        )));
    }
    Ok((Corpus::new(train, None)?, Corpus::new(test, None)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use spanaug_oracles::scan::oracle_scan_interpret;

    #[test]
    fn scan_line_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "IN: jump OUT: JUMP\nIN: walk twice OUT: W W\n").unwrap();
        let c = load_scan(&p).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.examples[0].input, toks("jump"));
        assert_eq!(c.examples[0].output, toks("JUMP"));
        assert_eq!(c.examples[1].id, 1);
        let p2 = dir.path().join("c2.txt");
        write_scan(&c, &p2).unwrap();
        assert_eq!(load_scan(&p2).unwrap(), c);
    }

    #[test]
    fn scan_rejects_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        fs::write(&p, "IN: OUT: J\n").unwrap();
        let err = load_scan(&p).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
        fs::write(&p, "jump -> J\n").unwrap();
        assert!(load_scan(&p).is_err());
        fs::write(&p, "\n\n").unwrap();
        assert!(load_scan(&p).is_err(), "empty corpus must error");
    }

    #[test]
    fn jsonl_round_trip_with_trees() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let tree = TreeAnnotation::new(vec![1, -1, 1]).unwrap();
        let corpus = Corpus::new(
            vec![ParallelExample { id: 4, input: toks("a b c"), output: toks("A B C") }],
            Some([(4, tree)].into_iter().collect()),
        )
        .unwrap();
        write_jsonl(&corpus, &p).unwrap();
        let back = load_tree_jsonl(&p).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn tree_validation_rejects_cycles_and_length_mismatch() {
        assert!(TreeAnnotation::new(vec![1, 0, -1]).is_err(), "2-cycle");
        assert!(TreeAnnotation::new(vec![0, -1]).is_err(), "self-parent");
        assert!(TreeAnnotation::new(vec![1, 2]).is_err(), "no root");
        assert!(TreeAnnotation::new(vec![-1, -1]).is_err(), "two roots");
        assert!(TreeAnnotation::new(vec![-1, 5]).is_err(), "out of range");
        let tree = TreeAnnotation::new(vec![-1, 0, 0, 1]).unwrap();
        let corpus = Corpus::new(
            vec![ParallelExample { id: 0, input: toks("a b c"), output: toks("A") }],
            Some([(0, tree)].into_iter().collect()),
        );
        assert!(corpus.is_err(), "4 nodes for 3 tokens");
    }

    #[test]
    fn enumeration_counts_are_exact() {
        let cfg = GrammarConfig::default();
        // 4 prims x (1 + 2 + 4) = 28 phrases; x3 repeats = 84 clauses;
        // 84 + 2x84x84 commands.
        let mut c1 = cfg.clone();
        c1.max_depth = 1;
        assert_eq!(enumerate_scan(&c1).len(), 28);
        let mut c2 = cfg.clone();
        c2.max_depth = 2;
        assert_eq!(enumerate_scan(&c2).len(), 84);
        assert_eq!(enumerate_scan(&cfg).len(), 84 + 2 * 84 * 84);
    }

    #[test]
    fn anchor_command_interprets_correctly() {
        let corpus = gen_scan_mini(&GrammarConfig::default(), 0, None).unwrap();
        let anchor = toks("walk around right twice and jump left thrice");
        let ex = corpus.examples.iter().find(|e| e.input == anchor).unwrap();
        assert_eq!(
            ex.output,
            toks("TR W TR W TR W TR W TR W TR W TR W TR W TL J TL J TL J")
        );
        assert_eq!(ex.output.len(), 22);
        let bare = corpus.examples.iter().find(|e| e.input == toks("jump")).unwrap();
        assert_eq!(bare.output, toks("J"));
    }

    #[test]
    fn generator_agrees_with_independent_interpreter() {
        let corpus = gen_scan_mini(&GrammarConfig::default(), 11, Some(500)).unwrap();
        for ex in &corpus.examples {
            let oracle = oracle_scan_interpret(&ex.input).expect("generated input must parse");
            assert_eq!(oracle, ex.output, "input {:?}", ex.input);
        }
    }

    #[test]
    fn long_action_names_switch() {
        let mut cfg = GrammarConfig::default();
        cfg.long_actions = true;
        let corpus = gen_scan_mini(&cfg, 0, None).unwrap();
        let ex = corpus
            .examples
            .iter()
            .find(|e| e.input == toks("jump right"))
            .unwrap();
        assert_eq!(ex.output, toks("TURN_RIGHT JUMP"));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GrammarConfig::default();
        let a = gen_scan_mini(&cfg, 42, Some(200)).unwrap();
        let b = gen_scan_mini(&cfg, 42, Some(200)).unwrap();
        assert_eq!(a, b);
        let c = gen_scan_mini(&cfg, 43, Some(200)).unwrap();
        assert_ne!(a, c, "different seeds should shuffle differently");
    }

    #[test]
    fn primitive_split_partitions_jump() {
        let corpus = gen_scan_mini(&GrammarConfig::default(), 0, None).unwrap();
        let (train, test) = primitive_split(&corpus, "jump").unwrap();
        assert_eq!(train.len() + test.len(), corpus.len());
        assert!(train.examples.iter().any(|e| e.input == toks("jump")));
        assert!(train
            .examples
            .iter()
            .all(|e| e.input.len() == 1 || !e.input.contains(&"jump".to_string())));
        assert!(test
            .examples
            .iter()
            .all(|e| e.input.len() > 1 && e.input.contains(&"jump".to_string())));
    }
}
