//! Difficulty models: anything that can be trained on parallel examples
//! and report how hard one is as a mean per-token negative log-likelihood.
//!
//! Two implementations: [`CountModel`], a smoothed bigram-with-context
//! counter — deterministic, fast, and order-invariant, the reference
//! difficulty oracle for policy-dynamics tests — and [`Seq2Seq`], a small
//! bidirectional recurrent encoder-decoder with dot-product attention and
//! a tied output projection, trained by Adam on teacher-forced NLL and
//! evaluated by greedy decoding plus exact match.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    gru_step_masked, init_gru, orthogonal_init, uniform_init, Adam, BoundParams, Checkpoint,
    Params, Tape, Var,
};
use crate::corpus::{ParallelExample, Token};
use crate::{derive_rng, Error, Result};

/// Behavioral contract of a difficulty model: trainable on batches,
/// queryable for a finite nonnegative mean per-token NLL.
pub trait DifficultyModel {
    /// One training update on a nonempty batch; returns the mean loss.
    fn train_batch(&mut self, batch: &[ParallelExample]) -> Result<f64>;
    /// Mean per-token negative log-likelihood of `example.output` given
    /// `example.input`.
    fn nll(&self, example: &ParallelExample) -> Result<f64>;
}

// ---------------------------------------------------------------------------
// Count model
// ---------------------------------------------------------------------------

/// Number of input-context buckets the bag signature hashes into.
const CONTEXT_BUCKETS: u64 = 1024;

/// Deterministic FNV-1a over the *sorted* input tokens: a bag signature,
/// insensitive to token order, bucketed to [`CONTEXT_BUCKETS`] contexts.
fn bag_bucket(input: &[Token]) -> u16 {
    let mut sorted: Vec<&str> = input.iter().map(|t| t.as_str()).collect();
    sorted.sort_unstable();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in sorted {
        for b in t.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0x1f; // token separator
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % CONTEXT_BUCKETS) as u16
}

/// Additively smoothed conditional counts of
/// `next output token | previous output token, input bag bucket`.
///
/// Outcomes range over the output vocabulary plus an end marker, so every
/// conditional is a proper distribution; an untrained model is exactly
/// uniform at `1/(|V_out|+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CountModel {
    pub alpha: f64,
    out_vocab: Vec<Token>,
    out_index: BTreeMap<Token, u32>,
    /// (bucket, prev id, next id) -> count. Prev id `V` is the start
    /// marker; next id `V` is the end marker.
    counts: BTreeMap<(u16, u32, u32), u64>,
    /// (bucket, prev id) -> total count.
    totals: BTreeMap<(u16, u32), u64>,
}

impl CountModel {
    pub fn new(out_vocab: &[Token], alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Validation(format!("smoothing alpha {alpha} must be positive")));
        }
        if out_vocab.is_empty() {
            return Err(Error::Validation("empty output vocabulary".into()));
        }
        Ok(CountModel {
            alpha,
            out_vocab: out_vocab.to_vec(),
            out_index: out_vocab
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i as u32))
                .collect(),
            counts: BTreeMap::new(),
            totals: BTreeMap::new(),
        })
    }

    fn boundary_id(&self) -> u32 {
        self.out_vocab.len() as u32
    }

    /// (prev, next) id pairs the output walks through, start/end included.
    fn transitions(&self, output: &[Token]) -> Vec<(u32, Option<u32>)> {
        let boundary = self.boundary_id();
        let mut prev = boundary; // start marker
        let mut steps = Vec::with_capacity(output.len() + 1);
        for tok in output {
            let next = self.out_index.get(tok).copied();
            steps.push((prev, next));
            // An unknown token still advances the chain; condition the next
            // step on the boundary id so the walk stays defined.
            prev = next.unwrap_or(boundary);
        }
        steps.push((prev, Some(boundary))); // end marker
        steps
    }

    /// Smoothed probability of `next` (None = unknown token, which gets
    /// the zero-count smoothing floor).
    fn prob(&self, bucket: u16, prev: u32, next: Option<u32>) -> f64 {
        let outcomes = (self.out_vocab.len() + 1) as f64;
        let total = self.totals.get(&(bucket, prev)).copied().unwrap_or(0) as f64;
        let count = match next {
            Some(n) => self.counts.get(&(bucket, prev, n)).copied().unwrap_or(0) as f64,
            None => 0.0,
        };
        (count + self.alpha) / (total + self.alpha * outcomes)
    }
}

impl DifficultyModel for CountModel {
    fn train_batch(&mut self, batch: &[ParallelExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Validation("empty training batch".into()));
        }
        let mut loss = 0.0;
        for ex in batch {
            loss += self.nll(ex)?;
            let bucket = bag_bucket(&ex.input);
            for (prev, next) in self.transitions(&ex.output) {
                if let Some(n) = next {
                    *self.counts.entry((bucket, prev, n)).or_insert(0) += 1;
                    *self.totals.entry((bucket, prev)).or_insert(0) += 1;
                }
            }
        }
        Ok(loss / batch.len() as f64)
    }

    fn nll(&self, example: &ParallelExample) -> Result<f64> {
        let bucket = bag_bucket(&example.input);
        let steps = self.transitions(&example.output);
        let n = steps.len() as f64;
        let total: f64 =
            steps.iter().map(|(prev, next)| -self.prob(bucket, *prev, *next).ln()).sum();
        Ok(total / n)
    }
}

impl CountModel {
    /// Writes the model as a compact binary table (sorted entries, so the
    /// bytes are a deterministic function of the counts).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(b"SPANCNT1").map_err(io)?;
        w.write_all(&self.alpha.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.out_vocab.len() as u32).to_le_bytes()).map_err(io)?;
        for tok in &self.out_vocab {
            let bytes = tok.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(bytes).map_err(io)?;
        }
        w.write_all(&(self.counts.len() as u64).to_le_bytes()).map_err(io)?;
        for ((bucket, prev, next), count) in &self.counts {
            w.write_all(&bucket.to_le_bytes()).map_err(io)?;
            w.write_all(&prev.to_le_bytes()).map_err(io)?;
            w.write_all(&next.to_le_bytes()).map_err(io)?;
            w.write_all(&count.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let bad = |msg: &str| Error::parse(path, 0, msg);

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != b"SPANCNT1" {
            return Err(bad("not a count-model file"));
        }
        let mut f8 = [0u8; 8];
        r.read_exact(&mut f8).map_err(|e| Error::io(path, e))?;
        let alpha = f64::from_le_bytes(f8);
        let mut u4 = [0u8; 4];
        r.read_exact(&mut u4).map_err(|e| Error::io(path, e))?;
        let vocab_len = u32::from_le_bytes(u4) as usize;
        let mut out_vocab = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            r.read_exact(&mut u4).map_err(|e| Error::io(path, e))?;
            let n = u32::from_le_bytes(u4) as usize;
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            out_vocab
                .push(String::from_utf8(buf).map_err(|_| bad("vocabulary is not utf-8"))?);
        }
        let mut model = CountModel::new(&out_vocab, alpha)?;
        r.read_exact(&mut f8).map_err(|e| Error::io(path, e))?;
        let entries = u64::from_le_bytes(f8);
        let mut u2 = [0u8; 2];
        for _ in 0..entries {
            r.read_exact(&mut u2).map_err(|e| Error::io(path, e))?;
            let bucket = u16::from_le_bytes(u2);
            r.read_exact(&mut u4).map_err(|e| Error::io(path, e))?;
            let prev = u32::from_le_bytes(u4);
            r.read_exact(&mut u4).map_err(|e| Error::io(path, e))?;
            let next = u32::from_le_bytes(u4);
            r.read_exact(&mut f8).map_err(|e| Error::io(path, e))?;
            let count = u64::from_le_bytes(f8);
            model.counts.insert((bucket, prev, next), count);
            *model.totals.entry((bucket, prev)).or_insert(0) += count;
        }
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Neural sequence-to-sequence model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seq2SeqConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    /// Greedy decoding stops after this many tokens if no end marker.
    pub max_decode_len: usize,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Seq2SeqConfig { embed_dim: 64, hidden_dim: 64, lr: 1e-3, max_decode_len: 64 }
    }
}

impl Seq2SeqConfig {
    /// Dimensions small enough for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Seq2SeqConfig { embed_dim: 5, hidden_dim: 4, lr: 1e-2, max_decode_len: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_decode_len == 0 {
            return Err(Error::Validation("seq2seq dimensions must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Validation("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One-layer bidirectional recurrent encoder, one-layer recurrent decoder
/// with dot-product attention over the encoder states, and an output
/// projection tied to the decoder's embedding table.
pub struct Seq2Seq {
    pub config: Seq2SeqConfig,
    pub params: Params,
    pub seed: u64,
    in_vocab: Vec<Token>,
    in_index: BTreeMap<Token, usize>,
    out_vocab: Vec<Token>,
    out_index: BTreeMap<Token, usize>,
    adam: Adam,
}

const STREAM_S2S_INIT: u64 = 0x5eed_0101;

impl Seq2Seq {
    pub fn new(
        config: Seq2SeqConfig,
        in_vocab: &[Token],
        out_vocab: &[Token],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if in_vocab.is_empty() || out_vocab.is_empty() {
            return Err(Error::Validation("empty vocabulary".into()));
        }
        let e = config.embed_dim;
        let h = config.hidden_dim;
        let mut rng = derive_rng(seed, STREAM_S2S_INIT);
        let mut params = Params::new();
        params.insert("embed_in", uniform_init(&[in_vocab.len(), e], 0.1, &mut rng));
        // Output table rows: tokens, then the start marker, then the end
        // marker. The same rows project decoder states back to logits.
        params.insert("embed_out", uniform_init(&[out_vocab.len() + 2, e], 0.1, &mut rng));
        init_gru(&mut params, "enc.fw", e, h, &mut rng);
        init_gru(&mut params, "enc.bw", e, h, &mut rng);
        params.insert("attn.w", orthogonal_init(2 * h, h, &mut rng));
        params.insert("init.w", orthogonal_init(2 * h, h, &mut rng));
        params.insert("init.b", ArrayD::zeros(ndarray::IxDyn(&[h])));
        init_gru(&mut params, "dec", e, h, &mut rng);
        params.insert("read.w", orthogonal_init(3 * h, e, &mut rng));
        params.insert("read.b", ArrayD::zeros(ndarray::IxDyn(&[e])));

        let flat = params.flat_len();
        let lr = config.lr;
        Ok(Seq2Seq {
            config,
            params,
            seed,
            in_vocab: in_vocab.to_vec(),
            in_index: in_vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect(),
            out_vocab: out_vocab.to_vec(),
            out_index: out_vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect(),
            adam: Adam::new(lr, flat),
        })
    }

    fn start_row(&self) -> usize {
        self.out_vocab.len()
    }

    fn end_row(&self) -> usize {
        self.out_vocab.len() + 1
    }

    /// Index of the end-marker in the prediction logits (which run over
    /// the output tokens then the end marker).
    fn end_logit(&self) -> usize {
        self.out_vocab.len()
    }

    fn in_ids(&self, tokens: &[Token]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| self.in_index.get(t).copied().ok_or_else(|| Error::UnknownToken(t.clone())))
            .collect()
    }

    fn out_ids(&self, tokens: &[Token]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| self.out_index.get(t).copied().ok_or_else(|| Error::UnknownToken(t.clone())))
            .collect()
    }

    /// Encoder forward over a padded batch: returns the per-step states
    /// (`B x 2h` each), the additive attention mask (`B x T_in`, 0 on real
    /// positions, -inf on padding), and the decoder's initial state.
    fn encode_batch<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        inputs: &[Vec<usize>],
    ) -> (Vec<Var<'t>>, Var<'t>, Var<'t>) {
        let b = inputs.len();
        let h = self.config.hidden_dim;
        let t_in = inputs.iter().map(Vec::len).max().unwrap();
        let embed = bound.var("embed_in");

        let step_ids = |t: usize| -> Vec<usize> {
            inputs.iter().map(|ids| ids.get(t).copied().unwrap_or(0)).collect()
        };
        let step_mask = |t: usize| -> Var<'t> {
            let m: Vec<f64> =
                inputs.iter().map(|ids| if t < ids.len() { 1.0 } else { 0.0 }).collect();
            tape.vector(&m)
        };

        let zero = tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[b, h])));
        let mut fw = Vec::with_capacity(t_in);
        let mut state = zero;
        for t in 0..t_in {
            let x = embed.gather_rows(&step_ids(t));
            state = gru_step_masked(bound, "enc.fw", x, state, step_mask(t));
            fw.push(state);
        }
        let fw_final = state;
        let mut bw = vec![zero; t_in];
        let mut state = zero;
        for t in (0..t_in).rev() {
            let x = embed.gather_rows(&step_ids(t));
            state = gru_step_masked(bound, "enc.bw", x, state, step_mask(t));
            bw[t] = state;
        }
        let bw_final = state;

        let states: Vec<Var<'t>> =
            (0..t_in).map(|t| tape.concat_cols(&[fw[t], bw[t]])).collect();
        let attn_mask = {
            let mut m = ndarray::Array2::<f64>::zeros((b, t_in));
            for (r, ids) in inputs.iter().enumerate() {
                for t in ids.len()..t_in {
                    m[[r, t]] = f64::NEG_INFINITY;
                }
            }
            tape.leaf(m.into_dyn())
        };
        let summary = tape.concat_cols(&[fw_final, bw_final]);
        let s0 = summary.matmul(bound.var("init.w")).add_bias(bound.var("init.b")).tanh();
        (states, attn_mask, s0)
    }

    /// Teacher-forced decoder loss over a padded batch; returns the summed
    /// NLL node and the number of real target tokens (end markers
    /// included).
    fn loss_graph<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        batch: &[&ParallelExample],
    ) -> Result<(Var<'t>, usize)> {
        if batch.is_empty() {
            return Err(Error::Validation("empty training batch".into()));
        }
        let inputs: Vec<Vec<usize>> =
            batch.iter().map(|ex| self.in_ids(&ex.input)).collect::<Result<_>>()?;
        let outputs: Vec<Vec<usize>> =
            batch.iter().map(|ex| self.out_ids(&ex.output)).collect::<Result<_>>()?;

        let (states, attn_mask, mut s) = self.encode_batch(tape, bound, &inputs);
        let keys: Vec<Var<'t>> =
            states.iter().map(|h| h.matmul(bound.var("attn.w"))).collect();

        let embed_out = bound.var("embed_out");
        // Tied projection: logits against the token rows plus the end row.
        let mut pred_rows: Vec<usize> = (0..self.out_vocab.len()).collect();
        pred_rows.push(self.end_row());
        let proj = embed_out.gather_rows(&pred_rows).t();

        let t_out = outputs.iter().map(Vec::len).max().unwrap() + 1;
        let token_count: usize = outputs.iter().map(|o| o.len() + 1).sum();

        let mut total: Option<Var<'t>> = None;
        for t in 0..t_out {
            // Teacher forcing: previous gold token, start marker at t=0.
            let prev_rows: Vec<usize> = outputs
                .iter()
                .map(|o| {
                    if t == 0 {
                        self.start_row()
                    } else {
                        o.get(t - 1).copied().unwrap_or(self.end_row())
                    }
                })
                .collect();
            let x = embed_out.gather_rows(&prev_rows);
            let step_mask: Vec<f64> =
                outputs.iter().map(|o| if t <= o.len() { 1.0 } else { 0.0 }).collect();
            let mask = tape.vector(&step_mask);
            s = gru_step_masked(bound, "dec", x, s, mask);

            let scores: Vec<Var<'t>> = keys.iter().map(|k| k.mul(s).row_sum()).collect();
            let alpha = tape.stack_cols(&scores).add(attn_mask).row_softmax();
            let mut ctx = states[0].mul_col(alpha.col(0));
            for (i, state) in states.iter().enumerate().skip(1) {
                ctx = ctx.add(state.mul_col(alpha.col(i)));
            }
            let readout = tape
                .concat_cols(&[s, ctx])
                .matmul(bound.var("read.w"))
                .add_bias(bound.var("read.b"))
                .tanh();
            let lp = readout.matmul(proj).row_log_softmax();

            let targets: Vec<usize> = outputs
                .iter()
                .map(|o| o.get(t).copied().unwrap_or(self.end_logit()))
                .collect();
            let picked = lp.select_cols(&targets);
            let contrib = picked.dot(mask);
            total = Some(match total {
                Some(acc) => acc.add(contrib),
                None => contrib,
            });
        }
        Ok((total.unwrap().affine(-1.0, 0.0), token_count))
    }

    /// Mean per-token negative log-likelihood of the batch, no update.
    pub fn loss_value(&self, batch: &[&ParallelExample]) -> Result<f64> {
        let tape = Tape::new();
        let bound = tape.bind(&self.params);
        let (sum_nll, tokens) = self.loss_graph(&tape, &bound, batch)?;
        Ok(sum_nll.scalar_value() / tokens as f64)
    }

    /// Mean per-token negative log-likelihood and its gradient with respect
    /// to the flattened parameters, no update.
    pub fn loss_and_grads(&self, batch: &[&ParallelExample]) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let bound = tape.bind(&self.params);
        let (sum_nll, tokens) = self.loss_graph(&tape, &bound, batch)?;
        let mean = sum_nll.affine(1.0 / tokens as f64, 0.0);
        let value = mean.scalar_value();
        let grads = tape.backward(mean);
        Ok((value, bound.flat_grads(&grads)))
    }

    /// Greedy argmax decoding until the end marker or the length cap.
    pub fn greedy_decode(&self, input: &[Token]) -> Result<Vec<Token>> {
        let ids = self.in_ids(input)?;
        let tape = Tape::new();
        let bound = tape.bind(&self.params);
        let (states, attn_mask, mut s) = self.encode_batch(&tape, &bound, &[ids]);
        let keys: Vec<Var<'_>> =
            states.iter().map(|h| h.matmul(bound.var("attn.w"))).collect();
        let embed_out = bound.var("embed_out");
        let mut pred_rows: Vec<usize> = (0..self.out_vocab.len()).collect();
        pred_rows.push(self.end_row());
        let proj = embed_out.gather_rows(&pred_rows).t();

        let mut prev = self.start_row();
        let mut decoded = Vec::new();
        for _ in 0..self.config.max_decode_len {
            let x = embed_out.gather_rows(&[prev]);
            let one = tape.vector(&[1.0]);
            s = gru_step_masked(&bound, "dec", x, s, one);
            let scores: Vec<Var<'_>> = keys.iter().map(|k| k.mul(s).row_sum()).collect();
            let alpha = tape.stack_cols(&scores).add(attn_mask).row_softmax();
            let mut ctx = states[0].mul_col(alpha.col(0));
            for (i, state) in states.iter().enumerate().skip(1) {
                ctx = ctx.add(state.mul_col(alpha.col(i)));
            }
            let readout = tape
                .concat_cols(&[s, ctx])
                .matmul(bound.var("read.w"))
                .add_bias(bound.var("read.b"))
                .tanh();
            let logits = readout.matmul(proj).value();
            let row = logits.index_axis(ndarray::Axis(0), 0);
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (i, v) in row.iter().enumerate() {
                if *v > best_v {
                    best_v = *v;
                    best = i;
                }
            }
            if best == self.end_logit() {
                break;
            }
            decoded.push(self.out_vocab[best].clone());
            prev = best;
        }
        Ok(decoded)
    }

    /// Writes a checkpoint with the parameters, configuration, and both
    /// vocabularies.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new("seq2seq", self.seed, &self.params);
        ckpt.meta = serde_json::json!({
            "config": self.config,
            "in_vocab": self.in_vocab,
            "out_vocab": self.out_vocab,
        });
        ckpt.save(path)
    }

    /// Restores a checkpoint. Optimizer state is not persisted.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.kind != "seq2seq" {
            return Err(Error::Validation(format!(
                "checkpoint kind {:?} is not a seq2seq model",
                ckpt.kind
            )));
        }
        #[derive(Deserialize)]
        struct Meta {
            config: Seq2SeqConfig,
            in_vocab: Vec<Token>,
            out_vocab: Vec<Token>,
        }
        let meta: Meta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Validation(format!("seq2seq checkpoint meta: {e}")))?;
        let params = ckpt.params()?;
        let flat = params.flat_len();
        Ok(Seq2Seq {
            adam: Adam::new(meta.config.lr, flat),
            config: meta.config,
            params,
            seed: ckpt.seed,
            in_index: meta.in_vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect(),
            in_vocab: meta.in_vocab,
            out_index: meta.out_vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect(),
            out_vocab: meta.out_vocab,
        })
    }
}

impl DifficultyModel for Seq2Seq {
    fn train_batch(&mut self, batch: &[ParallelExample]) -> Result<f64> {
        let refs: Vec<&ParallelExample> = batch.iter().collect();
        let tape = Tape::new();
        let bound = tape.bind(&self.params);
        let (sum_nll, tokens) = self.loss_graph(&tape, &bound, &refs)?;
        let mean = sum_nll.affine(1.0 / tokens as f64, 0.0);
        let value = mean.scalar_value();
        let grads = tape.backward(mean);
        self.adam.step(&mut self.params, &bound.flat_grads(&grads));
        Ok(value)
    }

    fn nll(&self, example: &ParallelExample) -> Result<f64> {
        let tape = Tape::new();
        let bound = tape.bind(&self.params);
        let (sum_nll, tokens) = self.loss_graph(&tape, &bound, &[example])?;
        Ok(sum_nll.scalar_value() / tokens as f64)
    }
}

/// Fraction of prediction/reference pairs that match token for token.
pub fn exact_match(predictions: &[Vec<Token>], references: &[Vec<Token>]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::Validation(format!(
            "{} predictions against {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(references).filter(|(p, r)| p == r).count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toks;
    use spanaug_oracles::grad::{max_rel_err, oracle_fd_gradient};

    fn ex(id: usize, input: &str, output: &str) -> ParallelExample {
        ParallelExample { id, input: toks(input), output: toks(output) }
    }

    #[test]
    fn count_model_matches_the_hand_computed_smoothing_values() {
        let mut model = CountModel::new(&toks("B"), 1.0).unwrap();
        let pair = ex(0, "a", "B");
        let untrained = model.nll(&pair).unwrap();
        assert!(
            (untrained - 2.0f64.ln()).abs() < 1e-12,
            "untrained nll {untrained} should be ln(|V|+1)"
        );

        model.train_batch(std::slice::from_ref(&pair)).unwrap();
        let trained = model.nll(&pair).unwrap();
        let expected = -((2.0f64 / 3.0).ln() + (2.0f64 / 3.0).ln()) / 2.0;
        assert!((trained - expected).abs() < 1e-12, "nll {trained} != {expected}");
    }

    #[test]
    fn count_model_training_lowers_nll_and_order_does_not_matter() {
        let vocab = toks("A B C");
        let pair = ex(0, "x y", "A B");
        let other = ex(1, "x z", "C");

        let mut model = CountModel::new(&vocab, 1.0).unwrap();
        let before = model.nll(&pair).unwrap();
        for _ in 0..100 {
            model.train_batch(std::slice::from_ref(&pair)).unwrap();
        }
        let after = model.nll(&pair).unwrap();
        assert!(after < before, "{after} !< {before}");

        let mut forward = CountModel::new(&vocab, 1.0).unwrap();
        forward.train_batch(&[pair.clone(), other.clone(), pair.clone()]).unwrap();
        let mut backward = CountModel::new(&vocab, 1.0).unwrap();
        backward.train_batch(&[pair.clone(), pair.clone(), other.clone()]).unwrap();
        assert_eq!(forward, backward, "count training must be order-invariant");
    }

    #[test]
    fn count_model_scores_unseen_output_bigrams_strictly_harder() {
        let vocab = toks("A B");
        let mut model = CountModel::new(&vocab, 1.0).unwrap();
        for _ in 0..50 {
            model.train_batch(&[ex(0, "x y", "A B")]).unwrap();
        }
        let seen = model.nll(&ex(0, "x y", "A B")).unwrap();
        let unseen = model.nll(&ex(0, "x y", "B A")).unwrap();
        assert!(
            unseen > seen + 0.5,
            "unseen bigrams {unseen} should be much harder than seen {seen}"
        );
    }

    #[test]
    fn count_model_round_trips_through_its_binary_file() {
        let mut model = CountModel::new(&toks("A B C"), 1.0).unwrap();
        model
            .train_batch(&[ex(0, "x y", "A B"), ex(1, "z", "C C A"), ex(2, "y", "B")])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("counts.bin");
        model.save(&path).unwrap();
        let loaded = CountModel::load(&path).unwrap();
        assert_eq!(model, loaded);
        let probe = ex(3, "x y", "A B C");
        assert_eq!(model.nll(&probe).unwrap(), loaded.nll(&probe).unwrap());
    }

    #[test]
    fn empty_batches_are_rejected() {
        let mut count = CountModel::new(&toks("A"), 1.0).unwrap();
        assert!(count.train_batch(&[]).is_err());
        let mut neural = Seq2Seq::new(Seq2SeqConfig::tiny(), &toks("a"), &toks("A"), 0).unwrap();
        assert!(neural.train_batch(&[]).is_err());
    }

    #[test]
    fn exact_match_counts_token_for_token_equality() {
        let a = vec![toks("A B"), toks("C"), toks("D E"), toks("F")];
        assert_eq!(exact_match(&a, &a).unwrap(), 1.0);
        let none = vec![toks("X"), toks("Y"), toks("Z"), toks("W")];
        assert_eq!(exact_match(&a, &none).unwrap(), 0.0);
        let mut three = a.clone();
        three[1] = toks("X");
        assert_eq!(exact_match(&three, &a).unwrap(), 0.75);
        assert!(exact_match(&a[..2], &a).is_err());
    }

    #[test]
    fn seq2seq_rejects_unknown_tokens() {
        let model = Seq2Seq::new(Seq2SeqConfig::tiny(), &toks("a b"), &toks("A B"), 0).unwrap();
        assert!(matches!(
            model.nll(&ex(0, "a q", "A")),
            Err(Error::UnknownToken(t)) if t == "q"
        ));
        assert!(matches!(
            model.nll(&ex(0, "a", "A Q")),
            Err(Error::UnknownToken(t)) if t == "Q"
        ));
        assert!(model.greedy_decode(&toks("q")).is_err());
    }

    #[test]
    fn seq2seq_nll_gradients_match_finite_differences() {
        let model = Seq2Seq::new(Seq2SeqConfig::tiny(), &toks("a b c"), &toks("A B"), 1).unwrap();
        assert!(model.params.flat_len() <= 5_000);
        let batch = [ex(0, "a b", "A B A"), ex(1, "c a b", "B")];
        let refs: Vec<&ParallelExample> = batch.iter().collect();

        let tape = Tape::new();
        let bound = tape.bind(&model.params);
        let (sum_nll, tokens) = model.loss_graph(&tape, &bound, &refs).unwrap();
        let mean = sum_nll.affine(1.0 / tokens as f64, 0.0);
        let analytic = bound.flat_grads(&tape.backward(mean));

        let flat = model.params.to_flat();
        let fd = oracle_fd_gradient(
            |p| {
                let mut probe = model.params.clone();
                probe.set_flat(p);
                let t = Tape::new();
                let b = t.bind(&probe);
                let (s, n) = model.loss_graph(&t, &b, &refs).unwrap();
                s.affine(1.0 / n as f64, 0.0).scalar_value()
            },
            &flat,
            1e-4,
        );
        let err = max_rel_err(&analytic, &fd);
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn seq2seq_learns_a_copy_task_and_decodes_it_exactly() {
        let vocab = toks("p q r s t");
        let config = Seq2SeqConfig {
            embed_dim: 24,
            hidden_dim: 24,
            lr: 5e-3,
            max_decode_len: 16,
        };
        let mut model = Seq2Seq::new(config, &vocab, &vocab, 2).unwrap();
        let pairs = vec![
            ex(0, "p q", "p q"),
            ex(1, "r s t", "r s t"),
            ex(2, "t q p", "t q p"),
            ex(3, "s", "s"),
            ex(4, "q r q", "q r q"),
        ];
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(model.train_batch(&pairs).unwrap());
        }
        let window = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
        let means: Vec<f64> = losses.chunks(50).map(window).collect();
        for pair in means.windows(2) {
            assert!(
                pair[1] < pair[0],
                "mean loss not strictly decreasing across windows: {means:?}"
            );
        }
        for pair in &pairs {
            let decoded = model.greedy_decode(&pair.input).unwrap();
            assert_eq!(decoded, pair.output, "copy failed on {:?}", pair.input);
        }
    }

    #[test]
    fn untrained_decoding_is_total_bounded_and_deterministic() {
        let model =
            Seq2Seq::new(Seq2SeqConfig::tiny(), &toks("a b c"), &toks("A B C"), 3).unwrap();
        let a = model.greedy_decode(&toks("a c b a")).unwrap();
        let b = model.greedy_decode(&toks("a c b a")).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= model.config.max_decode_len);
    }

    #[test]
    fn seq2seq_checkpoints_round_trip() {
        let mut model =
            Seq2Seq::new(Seq2SeqConfig::tiny(), &toks("a b"), &toks("A B"), 4).unwrap();
        model.train_batch(&[ex(0, "a b", "B A"), ex(1, "b", "A")]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s2s.json");
        model.save(&path).unwrap();
        let loaded = Seq2Seq::load(&path).unwrap();
        assert_eq!(loaded.params.to_flat(), model.params.to_flat());
        assert_eq!(loaded.config, model.config);
        let probe = ex(2, "a", "A B");
        assert_eq!(loaded.nll(&probe).unwrap(), model.nll(&probe).unwrap());
        assert_eq!(
            loaded.greedy_decode(&toks("a b")).unwrap(),
            model.greedy_decode(&toks("a b")).unwrap()
        );
    }

    #[test]
    fn nll_stays_finite_and_nonnegative_on_training_data() {
        let mut count = CountModel::new(&toks("A B"), 1.0).unwrap();
        let mut neural =
            Seq2Seq::new(Seq2SeqConfig::tiny(), &toks("a b"), &toks("A B"), 5).unwrap();
        let batch = [ex(0, "a b", "A B"), ex(1, "b a", "B")];
        count.train_batch(&batch).unwrap();
        neural.train_batch(&batch).unwrap();
        for ex in &batch {
            for nll in [count.nll(ex).unwrap(), neural.nll(ex).unwrap()] {
                assert!(nll.is_finite() && nll >= 0.0, "nll {nll}");
            }
        }
    }
}
