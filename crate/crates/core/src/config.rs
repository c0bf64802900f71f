//! Configuration plumbing for the command-line tool: a TOML file mirroring
//! every flag, flag-over-file-over-default resolution, run manifests with
//! input hashes, and the shared load/preprocess helpers commands build on.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{extract_alignments, AlignConfig, AlignmentTable};
use crate::augmenter::AugmenterConfig;
use crate::cluster::{infer_classes, load_overrides, EquivalenceClasses, Side};
use crate::corpus::{load_jsonl, load_scan, Corpus, Token};
use crate::models::Seq2SeqConfig;
use crate::subst::SubtreeRule;
use crate::train::{Mode, TrackedProbe};
use crate::{Error, Result};

/// Optional values for every flag, grouped by subcommand. Anything absent
/// falls back to the flag's built-in default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub gen: GenSection,
    pub align: AlignSection,
    pub clusters: ClustersSection,
    pub spans: SpansSection,
    pub augment: AugmentSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub stats: StatsSection,
}

impl FileConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, 0, e.to_string()))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub out: Option<PathBuf>,
    pub size: Option<usize>,
    pub max_depth: Option<u8>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSection {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub max_v_len: Option<usize>,
    pub max_w_len: Option<usize>,
    pub nec_threshold: Option<f64>,
    pub suff_threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClustersSection {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpansSection {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub alignment: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: Option<AugmentMode>,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub exhaustive: Option<bool>,
    pub subtree_rule: Option<SubtreeRule>,
    pub alignment: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub corpus: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub model: Option<ModelKind>,
    pub t_draws: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub mix_original: Option<bool>,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub subtree_rule: Option<SubtreeRule>,
    pub report: Option<PathBuf>,
    pub traces: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub augmenter_checkpoint: Option<PathBuf>,
    pub concepts: Option<PathBuf>,
    pub alignment: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
    /// Policy-network shape; file-only (no flags).
    pub augmenter: Option<AugmenterConfig>,
    /// Downstream network shape; file-only (no flags).
    pub seq2seq: Option<Seq2SeqConfig>,
    /// Spans whose selection probabilities the report traces; file-only.
    pub probes: Option<Vec<TrackedProbe>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub concepts: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub corpus: Option<PathBuf>,
    pub alignment: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentMode {
    /// Spans of any width.
    Spansub,
    /// Single-token word-level baseline.
    Lexsym,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Count,
    Seq2seq,
}

/// Flag value if given, else the config-file value, else the default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Like [`pick`] but with no default: missing on both paths is a usage
/// error the caller maps to exit code 2.
pub fn need<T>(flag: Option<T>, file: Option<T>, what: &str) -> Result<T> {
    flag.or(file)
        .ok_or_else(|| Error::Validation(format!("usage: missing required option --{what}")))
}

/// True when the error came from absent/invalid options rather than data.
pub fn is_usage_error(err: &Error) -> bool {
    matches!(err, Error::Validation(msg) if msg.starts_with("usage:"))
}

/// Records exactly what a command ran with: the fully resolved
/// configuration, content hashes of every input file, the seed, and the
/// tool version. Written next to the first output, before any output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Input path -> SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(digest.len() * 2);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}

impl RunManifest {
    pub fn new(
        command: &str,
        seed: u64,
        config: &impl Serialize,
        inputs: &[&Path],
    ) -> Result<Self> {
        let mut hashes = BTreeMap::new();
        for path in inputs {
            hashes.insert(path.display().to_string(), sha256_file(path)?);
        }
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config)
                .map_err(|e| Error::Validation(format!("serializing manifest: {e}")))?,
            inputs: hashes,
        })
    }

    /// Writes `<output>.manifest.json` beside the artifact it describes.
    pub fn write_beside(&self, output: &Path) -> Result<PathBuf> {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        let path = output.with_file_name(name);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("serializing manifest: {e}")))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Loads a corpus by extension: `.jsonl` rows (tree annotations included
/// when present), anything else the `IN: ... OUT: ...` text format.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        load_jsonl(path)
    } else {
        load_scan(path)
    }
}

/// Token classes from an override file when given, else inferred from
/// shared input contexts.
pub fn resolve_classes(corpus: &Corpus, overrides: Option<&Path>) -> Result<EquivalenceClasses> {
    match overrides {
        Some(path) => load_overrides(path, corpus, Side::Input),
        None => infer_classes(corpus),
    }
}

/// An alignment table for sequence corpora: loaded from a file when given,
/// else extracted. Tree corpora need none.
pub fn resolve_table(
    corpus: &Corpus,
    alignment: Option<&Path>,
    config: &AlignConfig,
) -> Result<Option<AlignmentTable>> {
    if corpus.trees.is_some() {
        return Ok(None);
    }
    Ok(Some(match alignment {
        Some(path) => AlignmentTable::load_jsonl(path)?,
        None => extract_alignments(corpus, config)?,
    }))
}

/// One concept per line, whitespace-tokenized; blank lines skipped.
pub fn load_concepts(path: &Path) -> Result<Vec<Vec<Token>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::split_whitespace)
        .map(|ws| ws.map(str::to_string).collect::<Vec<_>>())
        .filter(|c| !c.is_empty())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_config_parses_every_section() {
        let text = r#"
seed = 9
[gen]
out = "c.jsonl"
size = 40
[augment]
mode = "lexsym"
exhaustive = true
[train]
mode = "spansub+l2s2"
model = "count"
epochs = 3
[train.augmenter]
embed_dim = 6
hidden_dim = 5
layers = 2
span_dim = 20
[[train.probes]]
example_id = 2
out = { tokens = ["jump"], fragment = ["J"] }
in_class = [{ tokens = ["walk"], fragment = ["W"] }]
"#;
        let config: FileConfig = toml::from_str(text).unwrap();
        assert_eq!(config.seed, Some(9));
        assert_eq!(config.gen.size, Some(40));
        assert_eq!(config.augment.mode, Some(AugmentMode::Lexsym));
        assert_eq!(config.train.mode, Some(Mode::SpansubL2s2));
        assert_eq!(config.train.model, Some(ModelKind::Count));
        assert_eq!(config.train.augmenter.as_ref().unwrap().embed_dim, 6);
        assert_eq!(config.train.probes.as_ref().unwrap()[0].example_id, 2);

        let err = toml::from_str::<FileConfig>("[gen]\nbogus = 1");
        assert!(err.is_err(), "unknown keys must be rejected");
    }

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick::<u64>(None, None, 3), 3);
        assert!(need(None::<u64>, None, "out").is_err());
        assert_eq!(need(None, Some(5), "out").unwrap(), 5);
        let err = need::<u64>(None, None, "out").unwrap_err();
        assert!(is_usage_error(&err));
    }

    #[test]
    fn manifests_hash_inputs_and_land_beside_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "hello\n").unwrap();
        let manifest = RunManifest::new(
            "augment",
            7,
            &serde_json::json!({"n": 10}),
            &[input.as_path()],
        )
        .unwrap();
        let out = dir.path().join("aug.jsonl");
        let written = manifest.write_beside(&out).unwrap();
        assert_eq!(written, dir.path().join("aug.jsonl.manifest.json"));
        let text = std::fs::read_to_string(&written).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["seed"], 7);
        assert_eq!(
            parsed["inputs"][input.display().to_string()],
            // sha256 of "hello\n"
            "5891b5b522d5df086d0ff0b110fbd9d21bb4fc7163af34d08286a2e846f6be03"
        );
    }
}
