//! The learnable substitution policy.
//!
//! A bidirectional recurrent encoder turns an example's input into a fixed
//! vector; scaled-cosine scores against two span-embedding tables give a
//! swap-out distribution over the example's own spans and a swap-in
//! distribution over the frozen inventory. Sampling is Gumbel-softmax with
//! a straight-through forward; candidates that the substitution legality
//! rule rejects are masked to probability exactly zero, so every sampled
//! action pair is legal by construction.
//!
//! Training maximizes the expected downstream difficulty of sampled
//! substitutions: the objective is the mean over examples and draws of
//! `p(action) * nll`, ascended with Adam. Gradients flow through the soft
//! sample probabilities; the noise of each draw is recorded so the update
//! replays exactly the probabilities that produced it.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    cosine, dropout, gru_step, init_gru, orthogonal_init, uniform_init, Adam, BoundParams,
    Checkpoint, Params, Tape, Var,
};
use crate::corpus::Token;
use crate::spans::SpanInventory;
use crate::subst::{legal_candidates, SpanFilter, SubtreeRule};
use crate::{derive_rng, Error, Result};

/// Gumbel-softmax sampling knobs.
///
/// Sampling perturbs the *tempered* logits: `y = softmax(l/t + g)`. The
/// hard sample is the perturbed argmax, whose distribution is exactly
/// `softmax(l/t)` — temperature therefore sharpens both the draw and the
/// soft gradient signal, and at the default `t = 1` the form coincides
/// with the usual `softmax((l + g)/t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GumbelConfig {
    pub temperature: f64,
    /// Take the perturbed argmax on the forward pass (soft probabilities
    /// still carry the gradients). When false, draws are categorical from
    /// the soft vector instead.
    pub hard_forward: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig { temperature: 1.0, hard_forward: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmenterConfig {
    /// Token embedding width of the encoder.
    pub embed_dim: usize,
    /// Hidden width per direction.
    pub hidden_dim: usize,
    /// Stacked bidirectional encoder layers. The example encoding is the
    /// concatenation of every layer's final states in both directions,
    /// width `2 * layers * hidden_dim`.
    pub layers: usize,
    /// Width of the swap-out/swap-in span embedding tables. Must equal the
    /// encoding width `2 * layers * hidden_dim` so cosine scoring is
    /// well-typed; the defaults line up (2 layers x 2 directions x 128 =
    /// 512).
    pub span_dim: usize,
    /// Dropout between encoder layers, training mode only.
    pub dropout: f64,
    /// Adam step size for the ascent updates.
    pub lr: f64,
    pub gumbel: GumbelConfig,
}

impl Default for AugmenterConfig {
    fn default() -> Self {
        AugmenterConfig {
            embed_dim: 128,
            hidden_dim: 128,
            layers: 2,
            span_dim: 512,
            dropout: 0.5,
            lr: 1e-3,
            gumbel: GumbelConfig::default(),
        }
    }
}

impl AugmenterConfig {
    /// Desk-size dimensions for gradient checks and fast dynamics tests:
    /// well under 5k parameters on small vocabularies.
    pub fn tiny() -> Self {
        AugmenterConfig {
            embed_dim: 6,
            hidden_dim: 5,
            layers: 2,
            span_dim: 20,
            dropout: 0.0,
            lr: 1e-2,
            gumbel: GumbelConfig::default(),
        }
    }

    /// Width of the example encoding under this configuration.
    pub fn encoding_dim(&self) -> usize {
        2 * self.layers * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.span_dim == 0 || self.layers == 0 {
            return Err(Error::Validation("augmenter dimensions must be positive".into()));
        }
        if self.span_dim != self.encoding_dim() {
            return Err(Error::Validation(format!(
                "span_dim {} must equal the encoding width 2*layers*hidden = {}",
                self.span_dim,
                self.encoding_dim()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Validation("learning rate must be positive".into()));
        }
        if !(self.gumbel.temperature > 0.0) {
            return Err(Error::Validation("gumbel temperature must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled substitution action: swap out inventory span `a_out` of the
/// example, swap in inventory span `a_in`. Positions index the compact
/// vectors the probabilities were drawn from; the recorded noise lets the
/// training update rebuild exactly the same soft probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSample {
    pub a_out: usize,
    pub a_in: usize,
    /// Position of `a_out` within the example's span-id list.
    pub pos_out: usize,
    /// Position of `a_in` within `legal`.
    pub pos_in: usize,
    /// Legal swap-in candidates for `a_out`, ascending inventory indices.
    pub legal: Vec<usize>,
    pub prob_out: f64,
    pub prob_in: f64,
    pub noise_out: Vec<f64>,
    pub noise_in: Vec<f64>,
}

/// Per-draw result of [`Augmenter::sample_actions`].
#[derive(Clone, Debug)]
pub enum SampleOutcome {
    Sampled(Box<ActionSample>),
    /// The example has no substitutable spans.
    NoSpans,
    /// The drawn swap-out span admits no legal replacement.
    NoCandidates { a_out: usize },
}

/// Noise-free snapshot of the policy's distributions on one example:
/// `p_out[i]` is the probability of swapping out `span_ids[i]`, and
/// `p_in[i]` is the full swap-in vector (length = inventory size, exact
/// zeros on illegal candidates) conditioned on that choice.
#[derive(Clone, Debug)]
pub struct PolicyProbe {
    pub span_ids: Vec<usize>,
    pub p_out: Vec<f64>,
    pub p_in: Vec<Vec<f64>>,
    pub legal: Vec<Vec<usize>>,
}

/// One example's contribution to an ascent step: its input tokens, its
/// span ids, and the sampled actions paired with the downstream
/// negative-log-likelihood of the example each action generated (zero for
/// skipped draws).
pub struct BatchItem<'a> {
    pub tokens: &'a [Token],
    pub span_ids: &'a [usize],
    pub weighted: &'a [(ActionSample, f64)],
}

pub struct Augmenter {
    pub config: AugmenterConfig,
    pub params: Params,
    pub rule: SubtreeRule,
    pub seed: u64,
    vocab: BTreeMap<Token, usize>,
    vocab_order: Vec<Token>,
    inventory: SpanInventory,
    digest: String,
    adam: Adam,
    steps: u64,
}

/// RNG stream tags so the policy's independent randomness sources never
/// collide under one master seed.
const STREAM_INIT: u64 = 0x5eed_0001;
const STREAM_DROPOUT: u64 = 0x5eed_0002;

impl Augmenter {
    /// Freshly initialized policy over a frozen span inventory. `vocab` is
    /// the ordered input vocabulary the encoder embeds; `rule` is the
    /// subtree legality route used for candidate masking.
    pub fn new(
        config: AugmenterConfig,
        vocab: &[Token],
        inventory: &SpanInventory,
        rule: SubtreeRule,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() {
            return Err(Error::Validation("empty vocabulary".into()));
        }
        if inventory.is_empty() {
            return Err(Error::Validation("empty span inventory".into()));
        }
        let mut rng = derive_rng(seed, STREAM_INIT);
        let mut params = Params::new();
        params.insert("embed", uniform_init(&[vocab.len(), config.embed_dim], 0.1, &mut rng));
        for layer in 0..config.layers {
            let input = if layer == 0 { config.embed_dim } else { 2 * config.hidden_dim };
            for dir in ["fw", "bw"] {
                init_gru(
                    &mut params,
                    &format!("enc{layer}.{dir}"),
                    input,
                    config.hidden_dim,
                    &mut rng,
                );
            }
        }
        let n = inventory.len();
        params.insert("phi_o", uniform_init(&[n, config.span_dim], 0.1, &mut rng));
        params.insert("phi_i", uniform_init(&[n, config.span_dim], 0.1, &mut rng));
        params.insert(
            "phi_f.w",
            orthogonal_init(config.encoding_dim() + config.span_dim, config.span_dim, &mut rng),
        );
        params.insert("phi_f.b", ArrayD::zeros(ndarray::IxDyn(&[config.span_dim])));

        let flat = params.flat_len();
        let lr = config.lr;
        Ok(Augmenter {
            config,
            params,
            rule,
            seed,
            vocab: vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect(),
            vocab_order: vocab.to_vec(),
            inventory: inventory.clone(),
            digest: inventory.digest(),
            adam: Adam::new(lr, flat),
            steps: 0,
        })
    }

    pub fn inventory(&self) -> &SpanInventory {
        &self.inventory
    }

    pub fn inventory_digest(&self) -> &str {
        &self.digest
    }

    fn token_ids(&self, tokens: &[Token]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| self.vocab.get(t).copied().ok_or_else(|| Error::UnknownToken(t.clone())))
            .collect()
    }

    /// Builds the encoder graph for one example; returns the encoding: the
    /// concatenated final states of every layer in both directions, width
    /// `2 * layers * hidden`.
    fn encode_graph<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        tokens: &[Token],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<'t>> {
        let ids = self.token_ids(tokens)?;
        let embed = bound.var("embed");
        let mut inputs: Vec<Var<'t>> = ids.iter().map(|&i| embed.gather_rows(&[i])).collect();
        let h = self.config.hidden_dim;
        let zero = || tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[1, h])));

        let mut finals = Vec::with_capacity(2 * self.config.layers);
        for layer in 0..self.config.layers {
            let fw_prefix = format!("enc{layer}.fw");
            let bw_prefix = format!("enc{layer}.bw");

            let mut state = zero();
            let mut fw_states = Vec::with_capacity(inputs.len());
            for x in &inputs {
                state = gru_step(bound, &fw_prefix, *x, state);
                fw_states.push(state);
            }
            let mut state = zero();
            let mut bw_states = vec![state; inputs.len()];
            for (t, x) in inputs.iter().enumerate().rev() {
                state = gru_step(bound, &bw_prefix, *x, state);
                bw_states[t] = state;
            }
            finals.push(*fw_states.last().unwrap());
            finals.push(bw_states[0]);

            if layer + 1 < self.config.layers {
                inputs = fw_states
                    .iter()
                    .zip(&bw_states)
                    .map(|(f, b)| {
                        let combined = tape.concat_cols(&[*f, *b]);
                        dropout(combined, self.config.dropout, training, rng)
                    })
                    .collect();
            }
        }
        Ok(tape.concat_cols(&finals).row(0))
    }

    /// Evaluation-mode encoding of an input as a plain vector.
    pub fn encode(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = tape.bind(&self.params);
        let mut rng = derive_rng(self.seed, STREAM_DROPOUT);
        let enc = self.encode_graph(&tape, &bound, tokens, false, &mut rng)?;
        Ok(enc.value().iter().cloned().collect())
    }

    /// Swap-out logits: twice the cosine between the example encoding and
    /// each span's swap-out embedding; range `[-2, 2]`.
    fn out_logits<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        enc: Var<'t>,
        span_ids: &[usize],
    ) -> Var<'t> {
        let phi_o = bound.var("phi_o");
        let scores: Vec<Var<'t>> = span_ids
            .iter()
            .map(|&i| cosine(enc, phi_o.row(i)).affine(2.0, 0.0))
            .collect();
        tape.concat(&scores)
    }

    /// Swap-in logits over the legal candidates for `a_out`: the encoding
    /// is fused with the chosen span's swap-out embedding through the
    /// affine combiner, then cosine-scored against swap-in embeddings.
    fn in_logits<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        enc: Var<'t>,
        a_out: usize,
        legal: &[usize],
    ) -> Var<'t> {
        let ctx = tape.concat(&[enc, bound.var("phi_o").row(a_out)]);
        let fused = bound.var("phi_f.w").t().matvec(ctx).add(bound.var("phi_f.b"));
        let phi_i = bound.var("phi_i");
        let scores: Vec<Var<'t>> = legal
            .iter()
            .map(|&i| cosine(fused, phi_i.row(i)).affine(2.0, 0.0))
            .collect();
        tape.concat(&scores)
    }

    /// Soft Gumbel probabilities: `softmax(logits/temperature + noise)`.
    fn gumbel_probs<'t>(&self, tape: &'t Tape, logits: Var<'t>, noise: &[f64]) -> Var<'t> {
        let g = tape.vector(noise);
        logits.affine(1.0 / self.config.gumbel.temperature, 0.0).add(g).softmax()
    }

    /// Legal swap-in inventory indices for swapping out inventory span
    /// `a_out`, under this policy's subtree rule.
    pub fn legal_for(&self, a_out: usize) -> Vec<usize> {
        legal_candidates(
            &self.inventory,
            &self.inventory.spans[a_out],
            self.rule,
            SpanFilter::All,
        )
    }

    fn pick(&self, probs: &Var<'_>, rng: &mut ChaCha8Rng) -> (usize, f64) {
        let y = probs.value();
        let idx = if self.config.gumbel.hard_forward {
            argmax(y.iter().cloned())
        } else {
            let mut u: f64 = rng.random_range(0.0..1.0);
            let mut chosen = y.len() - 1;
            for (i, p) in y.iter().enumerate() {
                if u < *p {
                    chosen = i;
                    break;
                }
                u -= *p;
            }
            chosen
        };
        (idx, y[ndarray::IxDyn(&[idx])])
    }

    /// Draws `t_draws` substitution actions for one example in evaluation
    /// mode. Draw-level randomness comes entirely from `rng`, so callers
    /// control reproducibility by deriving per-example streams.
    pub fn sample_actions(
        &self,
        tokens: &[Token],
        span_ids: &[usize],
        t_draws: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SampleOutcome>> {
        if span_ids.is_empty() {
            return Ok(vec![SampleOutcome::NoSpans; t_draws]);
        }
        let tape = Tape::new();
        let bound = tape.bind(&self.params);
        let mut dropout_rng = derive_rng(self.seed, STREAM_DROPOUT);
        let enc = self.encode_graph(&tape, &bound, tokens, false, &mut dropout_rng)?;
        let logits_out = self.out_logits(&tape, &bound, enc, span_ids);

        let mut outcomes = Vec::with_capacity(t_draws);
        for _ in 0..t_draws {
            let noise_out = gumbel_noise(span_ids.len(), rng);
            let probs_out = self.gumbel_probs(&tape, logits_out, &noise_out);
            let (pos_out, prob_out) = self.pick(&probs_out, rng);
            let a_out = span_ids[pos_out];

            let legal = self.legal_for(a_out);
            if legal.is_empty() {
                outcomes.push(SampleOutcome::NoCandidates { a_out });
                continue;
            }
            let logits_in = self.in_logits(&tape, &bound, enc, a_out, &legal);
            let noise_in = gumbel_noise(legal.len(), rng);
            let probs_in = self.gumbel_probs(&tape, logits_in, &noise_in);
            let (pos_in, prob_in) = self.pick(&probs_in, rng);
            let a_in = legal[pos_in];

            outcomes.push(SampleOutcome::Sampled(Box::new(ActionSample {
                a_out,
                a_in,
                pos_out,
                pos_in,
                legal,
                prob_out,
                prob_in,
                noise_out,
                noise_in,
            })));
        }
        Ok(outcomes)
    }

    /// Noise-free distributions on one example: tempered softmax without
    /// Gumbel perturbation, swap-in vectors expanded to inventory length
    /// with exact zeros on illegal candidates.
    pub fn probe(&self, tokens: &[Token], span_ids: &[usize]) -> Result<PolicyProbe> {
        if span_ids.is_empty() {
            return Ok(PolicyProbe {
                span_ids: Vec::new(),
                p_out: Vec::new(),
                p_in: Vec::new(),
                legal: Vec::new(),
            });
        }
        let tape = Tape::new();
        let bound = tape.bind(&self.params);
        let mut rng = derive_rng(self.seed, STREAM_DROPOUT);
        let enc = self.encode_graph(&tape, &bound, tokens, false, &mut rng)?;
        let zeros_out = vec![0.0; span_ids.len()];
        let p_out: Vec<f64> = self
            .gumbel_probs(&tape, self.out_logits(&tape, &bound, enc, span_ids), &zeros_out)
            .value()
            .iter()
            .cloned()
            .collect();

        let mut p_in = Vec::with_capacity(span_ids.len());
        let mut legal_lists = Vec::with_capacity(span_ids.len());
        for &a_out in span_ids {
            let legal = self.legal_for(a_out);
            let mut full = vec![0.0; self.inventory.len()];
            if !legal.is_empty() {
                let logits = self.in_logits(&tape, &bound, enc, a_out, &legal);
                let compact = self.gumbel_probs(&tape, logits, &vec![0.0; legal.len()]).value();
                for (pos, &inv) in legal.iter().enumerate() {
                    full[inv] = compact[ndarray::IxDyn(&[pos])];
                }
            }
            p_in.push(full);
            legal_lists.push(legal);
        }
        Ok(PolicyProbe { span_ids: span_ids.to_vec(), p_out, p_in, legal: legal_lists })
    }

    fn objective_graph<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        batch: &[BatchItem<'_>],
        t_draws: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<'t>> {
        if batch.is_empty() || t_draws == 0 {
            return Err(Error::Validation("empty augmenter batch".into()));
        }
        let mut total: Option<Var<'t>> = None;
        for item in batch {
            if item.weighted.is_empty() {
                continue;
            }
            let enc = self.encode_graph(tape, bound, item.tokens, training, rng)?;
            let logits_out = self.out_logits(tape, bound, enc, item.span_ids);
            for (sample, nll) in item.weighted {
                if !nll.is_finite() {
                    return Err(Error::Validation(format!(
                        "nonfinite difficulty weight {nll} in augmenter batch"
                    )));
                }
                let probs_out = self.gumbel_probs(tape, logits_out, &sample.noise_out);
                let p_o = probs_out.at(sample.pos_out);
                let logits_in = self.in_logits(tape, bound, enc, sample.a_out, &sample.legal);
                let probs_in = self.gumbel_probs(tape, logits_in, &sample.noise_in);
                let p_i = probs_in.at(sample.pos_in);
                let term = p_o.mul(p_i).affine(*nll, 0.0);
                total = Some(match total {
                    Some(t) => t.add(term),
                    None => term,
                });
            }
        }
        let scale = 1.0 / (batch.len() as f64 * t_draws as f64);
        match total {
            Some(t) => Ok(t.affine(scale, 0.0)),
            None => Ok(tape.scalar(0.0)),
        }
    }

    /// Value of the difficulty objective on a batch (no update).
    pub fn objective_value(&self, batch: &[BatchItem<'_>], t_draws: usize) -> Result<f64> {
        let tape = Tape::new();
        let bound = tape.bind(&self.params);
        let mut rng = derive_rng(self.seed, STREAM_DROPOUT);
        Ok(self.objective_graph(&tape, &bound, batch, t_draws, false, &mut rng)?.scalar_value())
    }

    /// Objective value and its gradient with respect to the flattened
    /// parameters, replaying the recorded perturbations, no update.
    pub fn objective_grads(
        &self,
        batch: &[BatchItem<'_>],
        t_draws: usize,
    ) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let bound = tape.bind(&self.params);
        let mut rng = derive_rng(self.seed, STREAM_DROPOUT);
        let objective = self.objective_graph(&tape, &bound, batch, t_draws, false, &mut rng)?;
        let value = objective.scalar_value();
        let grads = tape.backward(objective);
        Ok((value, bound.flat_grads(&grads)))
    }

    /// One gradient-ascent step on the difficulty objective. Returns the
    /// objective value before the update.
    pub fn ascend_step(
        &mut self,
        batch: &[BatchItem<'_>],
        t_draws: usize,
        training: bool,
    ) -> Result<f64> {
        let tape = Tape::new();
        let bound = tape.bind(&self.params);
        let mut rng = derive_rng(self.seed, STREAM_DROPOUT ^ self.steps);
        let objective = self.objective_graph(&tape, &bound, batch, t_draws, training, &mut rng)?;
        let value = objective.scalar_value();
        let grads = tape.backward(objective);
        let mut flat = bound.flat_grads(&grads);
        for g in &mut flat {
            *g = -*g;
        }
        self.adam.step(&mut self.params, &flat);
        self.steps += 1;
        Ok(value)
    }

    /// Diagnostic identity: summing `p_out * p_in * weight` over *every*
    /// action (no sampling, no noise) with a constant weight collapses to
    /// the weight itself, with zero gradient everywhere. Returns the value
    /// and the flat gradient.
    pub fn objective_full_support(
        &self,
        tokens: &[Token],
        span_ids: &[usize],
        weight: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if span_ids.is_empty() {
            return Err(Error::Validation("no spans for full-support objective".into()));
        }
        let tape = Tape::new();
        let bound = tape.bind(&self.params);
        let mut rng = derive_rng(self.seed, STREAM_DROPOUT);
        let enc = self.encode_graph(&tape, &bound, tokens, false, &mut rng)?;
        let zeros_out = vec![0.0; span_ids.len()];
        let probs_out =
            self.gumbel_probs(&tape, self.out_logits(&tape, &bound, enc, span_ids), &zeros_out);
        let mut total: Option<Var<'_>> = None;
        for (pos, &a_out) in span_ids.iter().enumerate() {
            let legal = self.legal_for(a_out);
            if legal.is_empty() {
                continue;
            }
            let logits_in = self.in_logits(&tape, &bound, enc, a_out, &legal);
            let probs_in = self.gumbel_probs(&tape, logits_in, &vec![0.0; legal.len()]);
            let mass = probs_in.sum().mul(probs_out.at(pos));
            total = Some(match total {
                Some(t) => t.add(mass),
                None => mass,
            });
        }
        let objective = total
            .ok_or_else(|| Error::Validation("no legal candidates anywhere".into()))?
            .affine(weight, 0.0);
        let value = objective.scalar_value();
        let grads = tape.backward(objective);
        Ok((value, bound.flat_grads(&grads)))
    }

    /// Writes a checkpoint carrying the parameters, configuration,
    /// vocabulary, and the inventory digest the policy is frozen against.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut ckpt = Checkpoint::new("augmenter", self.seed, &self.params);
        ckpt.inventory_digest = Some(self.digest.clone());
        ckpt.meta = serde_json::json!({
            "config": self.config,
            "vocab": self.vocab_order,
            "rule": self.rule,
        });
        ckpt.save(path)
    }

    /// Restores a checkpoint against the same frozen inventory. Refuses to
    /// load when the inventory digest differs: table rows index spans, so
    /// a changed inventory silently reinterprets every row.
    ///
    /// Optimizer state is not persisted; resumed training restarts Adam's
    /// moment estimates.
    pub fn load(path: &std::path::Path, inventory: &SpanInventory) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.kind != "augmenter" {
            return Err(Error::Validation(format!(
                "checkpoint kind {:?} is not an augmenter",
                ckpt.kind
            )));
        }
        let expected = inventory.digest();
        let found = ckpt.inventory_digest.clone().unwrap_or_default();
        if found != expected {
            return Err(Error::InventoryMismatch { expected, found });
        }
        #[derive(Deserialize)]
        struct Meta {
            config: AugmenterConfig,
            vocab: Vec<Token>,
            rule: SubtreeRule,
        }
        let meta: Meta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Validation(format!("augmenter checkpoint meta: {e}")))?;
        let params = ckpt.params()?;
        let flat = params.flat_len();
        Ok(Augmenter {
            adam: Adam::new(meta.config.lr, flat),
            config: meta.config,
            params,
            rule: meta.rule,
            seed: ckpt.seed,
            vocab: meta.vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect(),
            vocab_order: meta.vocab,
            inventory: inventory.clone(),
            digest: expected,
            steps: 0,
        })
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Standard Gumbel(0,1) draws: `-ln(-ln(u))`.
fn gumbel_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(1e-12..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::ClassPair;
    use crate::corpus::toks;
    use crate::spans::{EligibleSpan, SpanRange};
    use crate::subst::legal_pair;
    use spanaug_oracles::grad::{max_rel_err, oracle_fd_gradient};

    fn seq_span(tokens: &str, fragment: &str, first: u32, last: u32) -> EligibleSpan {
        let tokens = toks(tokens);
        let k = tokens.len() - 1;
        EligibleSpan {
            example_id: 0,
            range: SpanRange::new(0, k),
            tokens,
            fragment: toks(fragment),
            class_pair: ClassPair { first, last },
            is_subtree: false,
            root_class: None,
            out_range: None,
        }
    }

    /// Five sequence spans over two classes: three single verbs (class 0)
    /// and two verb-plus-marker phrases (classes 0..1).
    fn toy_inventory() -> (Vec<Token>, SpanInventory) {
        let spans = vec![
            seq_span("alpha", "A", 0, 0),
            seq_span("beta", "B", 0, 0),
            seq_span("gamma", "C", 0, 0),
            seq_span("alpha mark", "A M", 0, 1),
            seq_span("beta mark", "B M", 0, 1),
        ];
        let inventory = SpanInventory::build(&[spans]);
        (toks("alpha beta gamma mark"), inventory)
    }

    fn toy_augmenter(seed: u64) -> Augmenter {
        let (vocab, inventory) = toy_inventory();
        Augmenter::new(AugmenterConfig::tiny(), &vocab, &inventory, SubtreeRule::Root, seed)
            .unwrap()
    }

    #[test]
    fn encode_is_deterministic_and_zero_parameters_give_zero_vectors() {
        let aug = toy_augmenter(1);
        let a = aug.encode(&toks("alpha mark")).unwrap();
        let b = aug.encode(&toks("alpha mark")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), aug.config.encoding_dim());
        assert!(a.iter().any(|v| *v != 0.0));

        let mut zeroed = toy_augmenter(1);
        let n = zeroed.params.flat_len();
        zeroed.params.set_flat(&vec![0.0; n]);
        let z = zeroed.encode(&toks("beta mark alpha")).unwrap();
        assert!(z.iter().all(|v| *v == 0.0), "zero parameters must encode to zero");
    }

    #[test]
    fn unknown_tokens_are_rejected() {
        let aug = toy_augmenter(2);
        match aug.encode(&toks("alpha omega")) {
            Err(Error::UnknownToken(t)) => assert_eq!(t, "omega"),
            other => panic!("expected unknown-token error, got {other:?}"),
        }
    }

    #[test]
    fn equal_logits_are_exactly_uniform_without_noise_and_single_span_is_certain() {
        let mut aug = toy_augmenter(3);
        let n = aug.params.flat_len();
        aug.params.set_flat(&vec![0.0; n]);
        let probe = aug.probe(&toks("alpha mark"), &[0, 3]).unwrap();
        assert_eq!(probe.p_out.len(), 2);
        for p in &probe.p_out {
            assert_eq!(*p, 0.5, "zero logits must give exactly uniform swap-out");
        }

        let probe = aug.probe(&toks("alpha mark"), &[3]).unwrap();
        assert_eq!(probe.p_out, vec![1.0]);
    }

    #[test]
    fn illegal_candidates_have_exactly_zero_probability_and_are_never_sampled() {
        let aug = toy_augmenter(4);
        let probe = aug.probe(&toks("alpha mark"), &[0, 3]).unwrap();

        // Swapping out the single verb admits only single verbs.
        assert_eq!(probe.legal[0], vec![0, 1, 2]);
        assert_eq!(probe.p_in[0][3], 0.0);
        assert_eq!(probe.p_in[0][4], 0.0);
        // Swapping out the phrase admits only the phrases.
        assert_eq!(probe.legal[1], vec![3, 4]);
        assert_eq!(probe.p_in[1][0], 0.0);
        assert_eq!(probe.p_in[1][1], 0.0);
        assert_eq!(probe.p_in[1][2], 0.0);
        let legal_mass: f64 = probe.p_in[1].iter().sum();
        assert!((legal_mass - 1.0).abs() < 1e-6);

        let mut rng = derive_rng(7, 0);
        let mut seen = std::collections::BTreeSet::new();
        for outcome in aug.sample_actions(&toks("alpha mark"), &[0, 3], 10_000, &mut rng).unwrap()
        {
            let SampleOutcome::Sampled(s) = outcome else { panic!("unexpected skip") };
            if s.a_out == 0 {
                assert!([0, 1, 2].contains(&s.a_in), "illegal candidate {} sampled", s.a_in);
            } else {
                assert!([3, 4].contains(&s.a_in), "illegal candidate {} sampled", s.a_in);
            }
            seen.insert((s.a_out, s.a_in));
            assert!((0.0..=1.0).contains(&s.prob_out));
            assert!((0.0..=1.0).contains(&s.prob_in));
        }
        assert!(seen.len() >= 4, "sampling never explored: {seen:?}");
    }

    #[test]
    fn every_sampled_pair_satisfies_the_legality_rule() {
        let aug = toy_augmenter(5);
        let mut rng = derive_rng(11, 0);
        for outcome in aug.sample_actions(&toks("beta mark"), &[1, 4, 2], 2_000, &mut rng).unwrap()
        {
            let SampleOutcome::Sampled(s) = outcome else { panic!("unexpected skip") };
            let out = &aug.inventory().spans[s.a_out];
            let inp = &aug.inventory().spans[s.a_in];
            assert!(legal_pair(out, inp, SubtreeRule::Root));
        }
    }

    #[test]
    fn dominant_logit_wins_almost_always_at_low_temperature() {
        let mut aug = toy_augmenter(6);
        // Engineer the swap-out logits directly: phi_o row 1 aligned with
        // the encoding (+2), the rest anti-aligned (-2).
        let enc = aug.encode(&toks("alpha mark")).unwrap();
        {
            let table = aug.params.get_mut("phi_o");
            for row in 0..5 {
                let sign = if row == 1 { 1.0 } else { -1.0 };
                for (c, b) in enc.iter().enumerate().take(table.shape()[1]) {
                    table[[row, c]] = sign * b;
                }
            }
        }
        aug.config.gumbel.temperature = 0.01;
        let span_ids = [0, 1, 2];
        let mut rng = derive_rng(13, 0);
        let outcomes = aug.sample_actions(&toks("alpha mark"), &span_ids, 10_000, &mut rng).unwrap();
        let dominant = outcomes
            .iter()
            .filter(|o| matches!(o, SampleOutcome::Sampled(s) if s.a_out == 1))
            .count();
        assert!(dominant >= 9_900, "dominant index drawn {dominant}/10000");
    }

    #[test]
    fn lower_temperature_concentrates_sampling_monotonically() {
        let base = toy_augmenter(7);
        let span_ids = [0, 1, 3];
        let probe = base.probe(&toks("alpha mark"), &span_ids).unwrap();
        let best = argmax(probe.p_out.iter().cloned());

        let mut freqs = Vec::new();
        for temp in [1.0, 0.3, 0.1, 0.03] {
            let mut aug = toy_augmenter(7);
            aug.config.gumbel.temperature = temp;
            let mut rng = derive_rng(17, 0);
            let outcomes =
                aug.sample_actions(&toks("alpha mark"), &span_ids, 10_000, &mut rng).unwrap();
            let hits = outcomes
                .iter()
                .filter(|o| matches!(o, SampleOutcome::Sampled(s) if s.pos_out == best))
                .count();
            freqs.push(hits as f64 / 10_000.0);
        }
        for w in freqs.windows(2) {
            assert!(w[1] >= w[0] - 0.01, "concentration not monotone: {freqs:?}");
        }
        assert!(freqs.last().unwrap() > &0.95, "lowest temperature too diffuse: {freqs:?}");
    }

    #[test]
    fn full_support_objective_collapses_to_the_weight_with_zero_gradient() {
        let aug = toy_augmenter(8);
        let (value, grads) = aug.objective_full_support(&toks("alpha mark"), &[0, 3], 1.7).unwrap();
        assert!((value - 1.7).abs() < 1e-9, "value {value}");
        let worst = grads.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(worst < 1e-9, "gradient should vanish, max |g| = {worst}");
    }

    #[test]
    fn ascent_shifts_probability_toward_the_heavier_weighted_candidate() {
        let mut aug = toy_augmenter(9);
        let tokens = toks("alpha mark");
        let span_ids = [3usize];
        let legal = aug.legal_for(3);
        assert_eq!(legal, vec![3, 4]);

        let before = aug.probe(&tokens, &span_ids).unwrap();
        let target = 4usize; // reward swapping in the other phrase
        let target_pos = 1usize;

        let make = |pos_in: usize, a_in: usize| ActionSample {
            a_out: 3,
            a_in,
            pos_out: 0,
            pos_in,
            legal: legal.clone(),
            prob_out: 1.0,
            prob_in: 0.5,
            noise_out: vec![0.0],
            noise_in: vec![0.0, 0.0],
        };
        let weighted = vec![(make(target_pos, target), 2.0), (make(0, 3), 0.5)];
        for _ in 0..30 {
            let batch =
                [BatchItem { tokens: &tokens, span_ids: &span_ids, weighted: &weighted }];
            aug.ascend_step(&batch, 2, false).unwrap();
        }
        let after = aug.probe(&tokens, &span_ids).unwrap();
        assert!(
            after.p_in[0][target] > before.p_in[0][target] + 0.05,
            "p(in = {target}) did not rise: {} -> {}",
            before.p_in[0][target],
            after.p_in[0][target]
        );
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let aug = toy_augmenter(10);
        assert!(aug.params.flat_len() <= 5_000, "probe must stay small");

        let tokens_a = toks("alpha mark");
        let tokens_b = toks("beta mark");
        let spans_a = [0usize, 3];
        let spans_b = [1usize, 4];
        let mut rng = derive_rng(23, 0);
        let drawn_a: Vec<(ActionSample, f64)> = aug
            .sample_actions(&tokens_a, &spans_a, 2, &mut rng)
            .unwrap()
            .into_iter()
            .zip([1.3, 0.4])
            .map(|(o, w)| match o {
                SampleOutcome::Sampled(s) => (*s, w),
                other => panic!("unexpected {other:?}"),
            })
            .collect();
        let drawn_b: Vec<(ActionSample, f64)> = aug
            .sample_actions(&tokens_b, &spans_b, 2, &mut rng)
            .unwrap()
            .into_iter()
            .zip([0.9, 2.1])
            .map(|(o, w)| match o {
                SampleOutcome::Sampled(s) => (*s, w),
                other => panic!("unexpected {other:?}"),
            })
            .collect();

        let batch = [
            BatchItem { tokens: &tokens_a, span_ids: &spans_a, weighted: &drawn_a },
            BatchItem { tokens: &tokens_b, span_ids: &spans_b, weighted: &drawn_b },
        ];

        let tape = Tape::new();
        let bound = tape.bind(&aug.params);
        let mut drng = derive_rng(aug.seed, STREAM_DROPOUT);
        let obj = aug.objective_graph(&tape, &bound, &batch, 2, false, &mut drng).unwrap();
        let analytic = bound.flat_grads(&tape.backward(obj));

        let flat = aug.params.to_flat();
        let fd = oracle_fd_gradient(
            |p| {
                let mut probe = aug.params.clone();
                probe.set_flat(p);
                let t = Tape::new();
                let b = t.bind(&probe);
                let mut r = derive_rng(aug.seed, STREAM_DROPOUT);
                aug.objective_graph(&t, &b, &batch, 2, false, &mut r).unwrap().scalar_value()
            },
            &flat,
            1e-5,
        );
        let err = max_rel_err(&analytic, &fd);
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn checkpoints_round_trip_and_refuse_a_different_inventory() {
        let aug = toy_augmenter(12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("augmenter.json");
        aug.save(&path).unwrap();

        let (_, inventory) = toy_inventory();
        let restored = Augmenter::load(&path, &inventory).unwrap();
        assert_eq!(restored.params.to_flat(), aug.params.to_flat());
        assert_eq!(restored.config, aug.config);
        assert_eq!(restored.inventory_digest(), aug.inventory_digest());

        let shrunk = SpanInventory::build(&[vec![
            seq_span("alpha", "A", 0, 0),
            seq_span("beta", "B", 0, 0),
        ]]);
        match Augmenter::load(&path, &shrunk) {
            Err(Error::InventoryMismatch { .. }) => {}
            Err(other) => panic!("expected inventory mismatch, got {other:?}"),
            Ok(_) => panic!("expected inventory mismatch, got a loaded policy"),
        }
    }

    #[test]
    fn identical_rng_streams_reproduce_identical_samples() {
        let aug = toy_augmenter(13);
        let draw = |seed: u64| {
            let mut rng = derive_rng(seed, 42);
            aug.sample_actions(&toks("alpha mark"), &[0, 3], 8, &mut rng).unwrap()
        };
        let a = draw(5);
        let b = draw(5);
        let c = draw(6);
        let key = |os: &[SampleOutcome]| {
            os.iter()
                .map(|o| match o {
                    SampleOutcome::Sampled(s) => (s.a_out, s.a_in, s.noise_out.clone()),
                    _ => (usize::MAX, usize::MAX, Vec::new()),
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(key(&a), key(&b));
        assert_ne!(key(&a), key(&c));
    }

    #[test]
    fn probe_distributions_are_proper() {
        let aug = toy_augmenter(14);
        let probe = aug.probe(&toks("gamma mark alpha"), &[2, 0, 4]).unwrap();
        let total: f64 = probe.p_out.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(probe.p_out.iter().all(|p| *p >= 0.0));
        for (full, legal) in probe.p_in.iter().zip(&probe.legal) {
            let mass: f64 = full.iter().sum();
            assert!((mass - 1.0).abs() < 1e-6);
            for (i, p) in full.iter().enumerate() {
                if legal.contains(&i) {
                    assert!(*p > 0.0);
                } else {
                    assert_eq!(*p, 0.0);
                }
            }
        }
    }
}
