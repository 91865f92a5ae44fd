//! Response generation: separate context and review encoders, a decoder
//! that attends to context, entities and reviews in turn, and an output
//! mixing the vocabulary with copies from entity surfaces and reviews.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EntityId, KnowledgeGraph, TokenId, Vocabulary, BOS, EOS, PAD, SEP, UNK};
use crate::metrics;
use crate::nn::{
    self, attention_mask, embed_with_positions, AdamConfig, EncoderConfig, FeedForward, FitReport,
    LayerNorm, Linear, Mat, MultiHeadAttention, NnError, ParamId, ParamStore, Schedule, Tape,
    TransformerEncoder, Var,
};

pub const MAX_RESPONSE_TOKENS: usize = 30;

#[derive(Debug, thiserror::Error)]
pub enum DialogueError {
    #[error("decoder prefix is empty")]
    EmptyPrefix,
    #[error("no responses to evaluate")]
    EmptyEvalSet,
    #[error("entity table has {found} rows, expected {expected}")]
    EntityMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which review pathways the model keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueVariant {
    /// Copy tokens out of the retrieved reviews.
    pub review_copy: bool,
    /// Decoder cross-attention over review states.
    pub review_attention: bool,
    /// A review encoder with its own parameters; otherwise the context
    /// encoder is reused.
    pub review_encoder: bool,
}

impl Default for DialogueVariant {
    fn default() -> Self {
        Self {
            review_copy: true,
            review_attention: true,
            review_encoder: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_response_len: usize,
    pub variant: DialogueVariant,
    pub seed: u64,
}

impl Default for DialogueConfig {
    fn default() -> Self {
        Self {
            d_model: 300,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 300,
            dropout: 0.1,
            max_response_len: MAX_RESPONSE_TOKENS,
            variant: DialogueVariant::default(),
            seed: 0,
        }
    }
}

impl DialogueConfig {
    fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.encoder_layers,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
        }
    }
}

/// Everything the generator conditions on for one response.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueInput {
    /// Flattened context, already truncated.
    pub context: Vec<TokenId>,
    /// Retrieved review sentences joined by SEP.
    pub reviews: Vec<TokenId>,
    /// Context entities followed by review entities.
    pub entities: Vec<EntityId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub dialogue: String,
    pub turn: usize,
    pub input: DialogueInput,
    pub response: Vec<TokenId>,
}

/// Next-token distribution and its parts at one decoder position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    pub pr: Vec<f64>,
    pub vocab: Vec<f64>,
    /// All zero when the entity scope is empty.
    pub kg_copy: Vec<f64>,
    /// All zero when the review scope is empty or review copy is disabled.
    pub review_copy: Vec<f64>,
    pub gates: [f64; 3],
}

/// Residual stream after each decoder sublayer, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub self_attention: Mat,
    pub context_attention: Mat,
    pub entity_attention: Mat,
    pub review_attention: Option<Mat>,
    pub output: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<LayerState>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// Surface tokens of each entity, deduplicated and sorted, unknown tokens
/// dropped.
pub fn entity_surface_tokens(kg: &KnowledgeGraph, vocab: &Vocabulary) -> Vec<Vec<TokenId>> {
    (0..kg.entity_count())
        .map(|e| {
            let mut ids: Vec<TokenId> = kg
                .surfaces(EntityId(e as u32))
                .flat_map(|s| s.iter().map(|t| vocab.id(t)))
                .filter(|&id| id != UNK)
                .collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        })
        .collect()
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_ctx: LayerNorm,
    ctx_attn: MultiHeadAttention,
    ln_ent: LayerNorm,
    ent_attn: MultiHeadAttention,
    review: Option<(LayerNorm, MultiHeadAttention)>,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

struct Memory {
    ctx: Var,
    ctx_keep: Vec<bool>,
    ent: Var,
    ent_keep: Vec<bool>,
    rev: Var,
    rev_keep: Vec<bool>,
    kg_scope: Vec<TokenId>,
    review_positions: Vec<usize>,
    review_tokens: Vec<TokenId>,
}

struct LayerVars {
    a0: Var,
    a1: Var,
    a2: Var,
    a3: Option<Var>,
    y: Var,
}

struct Mixture {
    pr: Var,
    vocab: Var,
    kg: Option<Var>,
    review: Option<Var>,
    gates: Var,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: DialogueConfig,
    vocab: Vocabulary,
    entity_tokens: Vec<Vec<TokenId>>,
    entity_dim: usize,
    digest: Option<String>,
}

#[derive(Clone, Debug)]
pub struct DialogueModel {
    cfg: DialogueConfig,
    vocab: Vocabulary,
    entity_tokens: Vec<Vec<TokenId>>,
    store: ParamStore,
    embed: ParamId,
    ctx_encoder: TransformerEncoder,
    rev_encoder: Option<TransformerEncoder>,
    entity_states: ParamId,
    bridge: Linear,
    layers: Vec<DecoderLayer>,
    final_ln: LayerNorm,
    vocab_head: Linear,
    kg_copy: ParamId,
    review_copy: Option<ParamId>,
    gate: Linear,
}

impl DialogueModel {
    /// `entity_states` are the frozen recommender entity vectors, one row
    /// per entity of `entity_tokens`.
    pub fn new(
        vocab: Vocabulary,
        entity_states: Mat,
        entity_tokens: Vec<Vec<TokenId>>,
        cfg: DialogueConfig,
    ) -> Result<Self, DialogueError> {
        if entity_states.nrows() != entity_tokens.len() {
            return Err(DialogueError::EntityMismatch {
                expected: entity_tokens.len(),
                found: entity_states.nrows(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let v = vocab.len();
        let embed = store.add_xavier("dlg.embed", v, d, &mut rng);
        let ctx_encoder = TransformerEncoder::new(&mut store, "dlg.ctx", cfg.encoder(), &mut rng)?;
        let rev_encoder = if cfg.variant.review_encoder {
            Some(TransformerEncoder::new(&mut store, "dlg.rev", cfg.encoder(), &mut rng)?)
        } else {
            None
        };
        let entity_dim = entity_states.ncols();
        let entity_states = store.add("dlg.entity_states", entity_states);
        let bridge = Linear::new(&mut store, "dlg.bridge", entity_dim, d, true, &mut rng);
        let mut layers = Vec::with_capacity(cfg.decoder_layers);
        for i in 0..cfg.decoder_layers {
            let p = format!("dlg.dec{i}");
            let mut mha = |name: &str, store: &mut ParamStore| {
                MultiHeadAttention::new(store, &format!("{p}.{name}"), d, cfg.heads, &mut rng)
            };
            let self_attn = mha("self", &mut store)?;
            let ctx_attn = mha("ctx", &mut store)?;
            let ent_attn = mha("ent", &mut store)?;
            let review = if cfg.variant.review_attention {
                Some((
                    LayerNorm::new(&mut store, &format!("{p}.ln_rev"), d),
                    mha("rev", &mut store)?,
                ))
            } else {
                None
            };
            layers.push(DecoderLayer {
                ln_self: LayerNorm::new(&mut store, &format!("{p}.ln_self"), d),
                self_attn,
                ln_ctx: LayerNorm::new(&mut store, &format!("{p}.ln_ctx"), d),
                ctx_attn,
                ln_ent: LayerNorm::new(&mut store, &format!("{p}.ln_ent"), d),
                ent_attn,
                review,
                ln_ffn: LayerNorm::new(&mut store, &format!("{p}.ln_ffn"), d),
                ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), d, cfg.ffn_dim, &mut rng),
            });
        }
        let final_ln = LayerNorm::new(&mut store, "dlg.ln_out", d);
        let vocab_head = Linear::new(&mut store, "dlg.vocab_head", d, v, true, &mut rng);
        let kg_copy = store.add_xavier("dlg.copy.kg", d, d, &mut rng);
        let review_copy = cfg
            .variant
            .review_copy
            .then(|| store.add_xavier("dlg.copy.rev", d, d, &mut rng));
        let sources = if cfg.variant.review_copy { 3 } else { 2 };
        let gate = Linear::new(&mut store, "dlg.gate", d, sources, true, &mut rng);
        Ok(Self {
            cfg,
            vocab,
            entity_tokens,
            store,
            embed,
            ctx_encoder,
            rev_encoder,
            entity_states,
            bridge,
            layers,
            final_ln,
            vocab_head,
            kg_copy,
            review_copy,
            gate,
        })
    }

    pub fn config(&self) -> &DialogueConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Trainable parameters: everything except the frozen entity vectors.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| id != self.entity_states).collect()
    }

    /// Tokens the entity copy source may emit for `entities`.
    pub fn kg_scope(&self, entities: &[EntityId]) -> Vec<TokenId> {
        let mut scope: Vec<TokenId> = entities
            .iter()
            .filter_map(|e| self.entity_tokens.get(e.index()))
            .flatten()
            .copied()
            .collect();
        scope.sort_unstable();
        scope.dedup();
        scope
    }

    fn masked_row(t: &mut Tape, d: usize) -> (Var, Vec<bool>) {
        (t.constant(Mat::zeros((1, d))), vec![false])
    }

    fn encode_with(
        &self,
        t: &mut Tape,
        encoder: &TransformerEncoder,
        ids: &[TokenId],
    ) -> Result<(Var, Vec<bool>), NnError> {
        if ids.is_empty() {
            return Ok(Self::masked_row(t, self.cfg.d_model));
        }
        let x = embed_with_positions(t, self.embed, ids);
        Ok((encoder.forward(t, x, None)?, vec![true; ids.len()]))
    }

    fn encode(&self, t: &mut Tape, input: &DialogueInput) -> Result<Memory, NnError> {
        let (ctx, ctx_keep) = self.encode_with(t, &self.ctx_encoder, &input.context)?;
        let rev_enc = self.rev_encoder.as_ref().unwrap_or(&self.ctx_encoder);
        let (rev, rev_keep) = self.encode_with(t, rev_enc, &input.reviews)?;
        let (ent, ent_keep) = if input.entities.is_empty() {
            Self::masked_row(t, self.cfg.d_model)
        } else {
            let idx: Vec<usize> = input.entities.iter().map(|e| e.index()).collect();
            let table = t.param(self.entity_states);
            let rows = t.gather_rows(table, &idx);
            (self.bridge.forward(t, rows), vec![true; idx.len()])
        };
        let (review_positions, review_tokens) = input
            .reviews
            .iter()
            .enumerate()
            .filter(|(_, &tok)| !Vocabulary::is_reserved(tok))
            .map(|(i, &tok)| (i, tok))
            .unzip();
        Ok(Memory {
            ctx,
            ctx_keep,
            ent,
            ent_keep,
            rev,
            rev_keep,
            kg_scope: self.kg_scope(&input.entities),
            review_positions,
            review_tokens,
        })
    }

    fn cross(
        t: &mut Tape,
        ln: &LayerNorm,
        attn: &MultiHeadAttention,
        h: Var,
        mem: Var,
        keep: &[bool],
        dropout: f64,
    ) -> Result<Var, NnError> {
        let n = t.shape(h).0;
        let mask = attention_mask(n, keep.len(), false, Some(keep));
        let normed = ln.forward(t, h);
        let a = attn.forward(t, normed, mem, mem, mask.as_ref())?;
        let a = t.dropout(a, dropout);
        Ok(t.add(h, a))
    }

    fn decode(
        &self,
        t: &mut Tape,
        prefix: &[TokenId],
        mem: &Memory,
    ) -> Result<(Var, Vec<LayerVars>), DialogueError> {
        if prefix.is_empty() {
            return Err(DialogueError::EmptyPrefix);
        }
        let p = self.cfg.dropout;
        let n = prefix.len();
        let causal = attention_mask(n, n, true, None);
        let x = embed_with_positions(t, self.embed, prefix);
        let mut h = t.dropout(x, p);
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let normed = layer.ln_self.forward(t, h);
            let a = layer.self_attn.forward(t, normed, normed, normed, causal.as_ref())?;
            let a = t.dropout(a, p);
            let a0 = t.add(h, a);
            let a1 = Self::cross(t, &layer.ln_ctx, &layer.ctx_attn, a0, mem.ctx, &mem.ctx_keep, p)?;
            let a2 = Self::cross(t, &layer.ln_ent, &layer.ent_attn, a1, mem.ent, &mem.ent_keep, p)?;
            let a3 = match &layer.review {
                Some((ln, attn)) => Some(Self::cross(t, ln, attn, a2, mem.rev, &mem.rev_keep, p)?),
                None => None,
            };
            let before_ffn = a3.unwrap_or(a2);
            let normed = layer.ln_ffn.forward(t, before_ffn);
            let f = layer.ffn.forward(t, normed, p);
            let f = t.dropout(f, p);
            h = t.add(before_ffn, f);
            trace.push(LayerVars { a0, a1, a2, a3, y: h });
        }
        Ok((self.final_ln.forward(t, h), trace))
    }

    fn copy_source(t: &mut Tape, y: Var, weight: Var, keys: Var, scope: &[TokenId], width: usize) -> Var {
        let d = t.shape(y).1;
        let q = t.matmul(y, weight);
        let scores = t.matmul_t(q, keys);
        let scores = t.scale(scores, 1.0 / (d as f64).sqrt());
        let probs = t.softmax(scores);
        t.scatter_cols(probs, scope, width)
    }

    fn mixture(&self, t: &mut Tape, y: Var, mem: &Memory) -> Mixture {
        let v = self.vocab.len();
        let n = t.shape(y).0;
        let logits = self.vocab_head.forward(t, y);
        let vocab = t.softmax(logits);
        let kg = (!mem.kg_scope.is_empty()).then(|| {
            let table = t.param(self.embed);
            let keys = t.gather_rows(table, &mem.kg_scope);
            let w = t.param(self.kg_copy);
            Self::copy_source(t, y, w, keys, &mem.kg_scope, v)
        });
        let review = match self.review_copy {
            Some(w) if !mem.review_tokens.is_empty() => {
                let keys = t.gather_rows(mem.rev, &mem.review_positions);
                let w = t.param(w);
                Some(Self::copy_source(t, y, w, keys, &mem.review_tokens, v))
            }
            _ => None,
        };
        let present = [true, kg.is_some(), review.is_some()];
        let sources = self.gate.out_dim;
        let keep = Array2::from_shape_fn((n, sources), |(_, j)| present[j]);
        let gate_logits = self.gate.forward(t, y);
        let gates = t.masked_softmax(gate_logits, &keep);
        let mut pr = {
            let g = t.slice_cols(gates, 0, 1);
            t.mul_col(vocab, g)
        };
        for (j, src) in [kg, review].into_iter().enumerate() {
            if let Some(src) = src {
                let g = t.slice_cols(gates, j + 1, 1);
                let part = t.mul_col(src, g);
                pr = t.add(pr, part);
            }
        }
        Mixture {
            pr,
            vocab,
            kg,
            review,
            gates,
        }
    }

    fn teacher_forcing(&self, response: &[TokenId]) -> (Vec<TokenId>, Vec<TokenId>) {
        let resp = &response[..response.len().min(self.cfg.max_response_len)];
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(resp);
        let mut targets = resp.to_vec();
        targets.push(EOS);
        (inputs, targets)
    }

    /// Teacher-forced probabilities of the response tokens followed by EOS.
    fn target_probs(&self, t: &mut Tape, ex: &DialogueExample) -> Result<Var, DialogueError> {
        let mem = self.encode(t, &ex.input)?;
        let (inputs, targets) = self.teacher_forcing(&ex.response);
        let (y, _) = self.decode(t, &inputs, &mem)?;
        let mix = self.mixture(t, y, &mem);
        let coords: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
        Ok(t.pick(mix.pr, &coords))
    }

    /// Mean over responses of the per-token mean negative log-likelihood.
    pub fn batch_loss(&self, t: &mut Tape, batch: &[&DialogueExample]) -> Result<Var, DialogueError> {
        let mut per_response = Vec::with_capacity(batch.len());
        for ex in batch {
            let probs = self.target_probs(t, ex)?;
            let logp = t.log(probs);
            per_response.push(t.mean(logp));
        }
        if per_response.is_empty() {
            return Err(DialogueError::EmptyEvalSet);
        }
        let all = t.concat_rows(&per_response);
        let m = t.mean(all);
        Ok(t.scale(m, -1.0))
    }

    fn eval_loss(&self, store: &ParamStore, split: &[DialogueExample]) -> f64 {
        let mut t = Tape::new(store);
        let refs: Vec<&DialogueExample> = split.iter().collect();
        match self.batch_loss(&mut t, &refs) {
            Ok(l) => t.value(l)[[0, 0]],
            Err(_) => f64::NAN,
        }
    }

    /// Evaluation-mode probability of each target token, per example.
    pub fn token_probabilities(&self, examples: &[DialogueExample]) -> Result<Vec<Vec<f64>>, DialogueError> {
        examples
            .iter()
            .map(|ex| {
                let mut t = Tape::new(&self.store);
                let p = self.target_probs(&mut t, ex)?;
                Ok(t.value(p).iter().copied().collect())
            })
            .collect()
    }

    pub fn gen_loss(&self, examples: &[DialogueExample]) -> Result<f64, DialogueError> {
        if examples.is_empty() {
            return Err(DialogueError::EmptyEvalSet);
        }
        Ok(metrics::gen_loss(&self.token_probabilities(examples)?))
    }

    pub fn perplexity(&self, examples: &[DialogueExample]) -> Result<f64, DialogueError> {
        let probs = self.token_probabilities(examples)?;
        metrics::perplexity(&probs).map_err(|_| DialogueError::EmptyEvalSet)
    }

    /// Per-layer residual stream for `prefix` (which must start the
    /// response, normally with BOS).
    pub fn decoder_state(&self, input: &DialogueInput, prefix: &[TokenId]) -> Result<DecoderState, DialogueError> {
        let mut t = Tape::new(&self.store);
        let mem = self.encode(&mut t, input)?;
        let (_, trace) = self.decode(&mut t, prefix, &mem)?;
        let layers = trace
            .into_iter()
            .map(|l| LayerState {
                self_attention: t.value(l.a0).clone(),
                context_attention: t.value(l.a1).clone(),
                entity_attention: t.value(l.a2).clone(),
                review_attention: l.a3.map(|a| t.value(a).clone()),
                output: t.value(l.y).clone(),
            })
            .collect();
        Ok(DecoderState { layers })
    }

    /// Distribution of the token following `prefix`.
    pub fn token_distribution(
        &self,
        input: &DialogueInput,
        prefix: &[TokenId],
    ) -> Result<TokenDistribution, DialogueError> {
        let mut t = Tape::new(&self.store);
        let mem = self.encode(&mut t, input)?;
        let (y, _) = self.decode(&mut t, prefix, &mem)?;
        let last = prefix.len() - 1;
        let y = t.slice_rows(y, last, 1);
        let mix = self.mixture(&mut t, y, &mem);
        let row = |t: &Tape, v: Option<Var>| match v {
            Some(v) => t.value(v).iter().copied().collect(),
            None => vec![0.0; self.vocab.len()],
        };
        let g = t.value(mix.gates);
        let mut gates = [0.0; 3];
        for (j, slot) in gates.iter_mut().enumerate().take(g.ncols()) {
            *slot = g[[0, j]];
        }
        Ok(TokenDistribution {
            pr: row(&t, Some(mix.pr)),
            vocab: row(&t, Some(mix.vocab)),
            kg_copy: row(&t, mix.kg),
            review_copy: row(&t, mix.review),
            gates,
        })
    }

    fn banned(id: TokenId) -> bool {
        matches!(id, PAD | UNK | BOS | SEP)
    }

    fn next_log_probs(&self, t: &mut Tape, mem: &Memory, prefix: &[TokenId]) -> Result<Vec<f64>, DialogueError> {
        let (y, _) = self.decode(t, prefix, mem)?;
        let y = t.slice_rows(y, prefix.len() - 1, 1);
        let mix = self.mixture(t, y, mem);
        Ok(t.value(mix.pr).iter().map(|p| p.ln()).collect())
    }

    /// Decodes from BOS until EOS or `max_len` emitted tokens. A produced EOS
    /// is included in the output.
    pub fn generate(&self, input: &DialogueInput, max_len: usize, mode: DecodeMode) -> Result<Vec<TokenId>, DialogueError> {
        let mut t = Tape::new(&self.store);
        let mem = self.encode(&mut t, input)?;
        match mode {
            DecodeMode::Greedy => {
                let mut out = Vec::new();
                while out.len() < max_len {
                    let mut prefix = vec![BOS];
                    prefix.extend_from_slice(&out);
                    let lp = self.next_log_probs(&mut t, &mem, &prefix)?;
                    let best = (0..lp.len())
                        .filter(|&i| !Self::banned(i))
                        .max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)))
                        .expect("vocabulary has non-reserved tokens");
                    out.push(best);
                    if best == EOS {
                        break;
                    }
                }
                Ok(out)
            }
            DecodeMode::Beam(width) => self.beam_search(&mut t, &mem, max_len, width.max(1)),
        }
    }

    fn beam_search(&self, t: &mut Tape, mem: &Memory, max_len: usize, width: usize) -> Result<Vec<TokenId>, DialogueError> {
        #[derive(Clone)]
        struct Hyp {
            tokens: Vec<TokenId>,
            logp: f64,
        }
        let normalized = |h: &Hyp| h.logp / h.tokens.len().max(1) as f64;
        let order = |a: &Hyp, b: &Hyp| {
            b.logp
                .total_cmp(&a.logp)
                .then_with(|| a.tokens.cmp(&b.tokens))
        };
        let mut beams = vec![Hyp {
            tokens: Vec::new(),
            logp: 0.0,
        }];
        let mut finished: Vec<Hyp> = Vec::new();
        for _ in 0..max_len {
            let mut candidates = Vec::new();
            for h in &beams {
                let mut prefix = vec![BOS];
                prefix.extend_from_slice(&h.tokens);
                let lp = self.next_log_probs(t, mem, &prefix)?;
                let mut ids: Vec<usize> = (0..lp.len()).filter(|&i| !Self::banned(i)).collect();
                ids.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                for &i in ids.iter().take(width) {
                    let mut tokens = h.tokens.clone();
                    tokens.push(i);
                    candidates.push(Hyp {
                        tokens,
                        logp: h.logp + lp[i],
                    });
                }
            }
            candidates.sort_by(order);
            candidates.truncate(width);
            beams.clear();
            for c in candidates {
                if c.tokens.last() == Some(&EOS) {
                    finished.push(c);
                } else {
                    beams.push(c);
                }
            }
            if beams.is_empty() {
                break;
            }
        }
        finished.extend(beams);
        let best = finished
            .into_iter()
            .min_by(|a, b| {
                normalized(b)
                    .total_cmp(&normalized(a))
                    .then_with(|| a.tokens.cmp(&b.tokens))
            })
            .map(|h| h.tokens)
            .unwrap_or_default();
        Ok(best)
    }

    /// Trains all parameters except the frozen entity vectors.
    pub fn train(
        &mut self,
        train: &[DialogueExample],
        valid: &[DialogueExample],
        schedule: &Schedule,
        adam: AdamConfig,
    ) -> FitReport {
        let trainable = self.trainable();
        let mut store = std::mem::take(&mut self.store);
        let report = {
            let view = &*self;
            nn::fit(
                &mut store,
                trainable,
                adam,
                schedule,
                train,
                valid,
                |t, batch| view.batch_loss(t, batch).expect("non-empty batch"),
                |s, split| view.eval_loss(s, split),
            )
        };
        self.store = store;
        report
    }

    pub fn save(&self, path: &Path, digest: Option<&str>) -> Result<(), DialogueError> {
        let meta = Meta {
            kind: "dialogue".into(),
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            entity_tokens: self.entity_tokens.clone(),
            entity_dim: self.store.get(self.entity_states).ncols(),
            digest: digest.map(str::to_string),
        };
        Ok(nn::checkpoint::save(path, &self.store, &meta)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>), DialogueError> {
        let archive = nn::checkpoint::Archive::load(path)?;
        let meta: Meta = archive.meta()?;
        if meta.kind != "dialogue" {
            return Err(NnError::Checkpoint(format!("expected a dialogue checkpoint, found {}", meta.kind)).into());
        }
        let states = Mat::zeros((meta.entity_tokens.len(), meta.entity_dim));
        let mut model = Self::new(meta.vocab, states, meta.entity_tokens, meta.config)?;
        archive.restore_into(&mut model.store)?;
        Ok((model, meta.digest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_gradients;
    use rand::Rng;

    pub(super) fn micro_vocab() -> Vocabulary {
        let words: Vec<String> = "a b c d e f g".split(' ').map(String::from).collect();
        Vocabulary::build([words.as_slice()], 1)
    }

    fn micro(variant: DialogueVariant, seed: u64) -> DialogueModel {
        let vocab = micro_vocab();
        assert_eq!(vocab.len(), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let states = Mat::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let ent_tokens = vec![vec![vocab.id("a")], vec![vocab.id("b"), vocab.id("c")], vec![]];
        let cfg = DialogueConfig {
            d_model: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            ffn_dim: 6,
            dropout: 0.0,
            max_response_len: 30,
            variant,
            seed,
        };
        DialogueModel::new(vocab, states, ent_tokens, cfg).unwrap()
    }

    fn example(m: &DialogueModel) -> DialogueExample {
        let v = m.vocab();
        let ids = |s: &str| s.split(' ').map(|w| v.id(w)).collect::<Vec<_>>();
        let mut reviews = ids("d e");
        reviews.push(SEP);
        reviews.extend(ids("f"));
        DialogueExample {
            dialogue: "x".into(),
            turn: 1,
            input: DialogueInput {
                context: ids("a b c g"),
                reviews,
                entities: vec![EntityId(0), EntityId(1), EntityId(0)],
            },
            response: ids("e a f"),
        }
    }

    #[test]
    fn distributions_are_normalized_and_scoped() {
        let m = micro(DialogueVariant::default(), 1);
        let ex = example(&m);
        let dist = m.token_distribution(&ex.input, &[BOS, 7, 8]).unwrap();
        let total: f64 = dist.pr.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((dist.gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let kg_scope = m.kg_scope(&ex.input.entities);
        for (tok, p) in dist.kg_copy.iter().enumerate() {
            if !kg_scope.contains(&tok) {
                assert_eq!(*p, 0.0);
            }
        }
        for (tok, p) in dist.review_copy.iter().enumerate() {
            if !ex.input.reviews.contains(&tok) || Vocabulary::is_reserved(tok) {
                assert_eq!(*p, 0.0);
            }
        }
    }

    #[test]
    fn empty_scopes_reduce_to_vocabulary() {
        let m = micro(DialogueVariant::default(), 1);
        let input = DialogueInput {
            context: vec![7],
            ..Default::default()
        };
        let dist = m.token_distribution(&input, &[BOS]).unwrap();
        assert_eq!(dist.gates, [1.0, 0.0, 0.0]);
        assert_eq!(dist.pr, dist.vocab);
    }

    fn force_gates(m: &mut DialogueModel, bias: [f64; 3]) {
        let w = m.gate.w;
        let b = m.gate.b.unwrap();
        let store = m.store_mut();
        store.get_mut(w).fill(0.0);
        for (j, v) in bias.iter().enumerate() {
            store.get_mut(b)[[0, j]] = *v;
        }
    }

    #[test]
    fn forced_review_gate_copies_single_token() {
        let mut m = micro(DialogueVariant::default(), 1);
        force_gates(&mut m, [-1000.0, -1000.0, 0.0]);
        let t = m.vocab().id("g");
        let input = DialogueInput {
            context: vec![7],
            reviews: vec![t],
            entities: vec![EntityId(0)],
        };
        let dist = m.token_distribution(&input, &[BOS]).unwrap();
        assert_eq!(dist.gates, [0.0, 0.0, 1.0]);
        assert_eq!(dist.pr[t], 1.0);
    }

    #[test]
    fn half_vocab_half_review_mixture() {
        let mut m = micro(DialogueVariant::default(), 1);
        force_gates(&mut m, [0.0, -1000.0, 0.0]);
        let head = m.vocab_head.clone();
        m.store_mut().get_mut(head.w).fill(0.0);
        m.store_mut().get_mut(head.b.unwrap()).fill(0.0);
        let t = m.vocab().id("g");
        let input = DialogueInput {
            context: vec![7],
            reviews: vec![t],
            entities: vec![EntityId(0)],
        };
        let dist = m.token_distribution(&input, &[BOS]).unwrap();
        let v = m.vocab().len() as f64;
        for (tok, p) in dist.pr.iter().enumerate() {
            let expect = if tok == t { 0.5 / v + 0.5 } else { 0.5 / v };
            assert!((p - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_is_causal() {
        let m = micro(DialogueVariant::default(), 2);
        let ex = example(&m);
        let base = vec![BOS, 5, 6, 7, 8, 9];
        let a = m.decoder_state(&ex.input, &base).unwrap();
        for j in 1..base.len() {
            let mut alt = base.clone();
            alt[j] = 11;
            let b = m.decoder_state(&ex.input, &alt).unwrap();
            for (la, lb) in a.layers.iter().zip(&b.layers) {
                for i in 0..j {
                    assert_eq!(la.output.row(i), lb.output.row(i));
                    assert_eq!(la.self_attention.row(i), lb.self_attention.row(i));
                }
                assert_ne!(la.output.row(j), lb.output.row(j));
            }
        }
        assert!(matches!(m.decoder_state(&ex.input, &[]), Err(DialogueError::EmptyPrefix)));
    }

    #[test]
    fn empty_reviews_pass_through_review_attention() {
        let m = micro(DialogueVariant::default(), 2);
        let mut ex = example(&m);
        ex.input.reviews.clear();
        let s = m.decoder_state(&ex.input, &[BOS, 5]).unwrap();
        for l in &s.layers {
            assert_eq!(l.review_attention.as_ref().unwrap(), &l.entity_attention);
        }
    }

    #[test]
    fn gen_loss_gradients_match_finite_differences() {
        for variant in [
            DialogueVariant::default(),
            DialogueVariant {
                review_copy: false,
                review_attention: false,
                review_encoder: false,
            },
        ] {
            let m = micro(variant, 4);
            let ex = example(&m);
            let mut ex2 = example(&m);
            ex2.input.reviews.clear();
            ex2.input.entities.clear();
            ex2.response.truncate(1);
            let batch = [&ex, &ex2];
            let report = check_param_gradients(
                m.store(),
                |s| {
                    let mut t = Tape::new(s);
                    let l = m.batch_loss(&mut t, &batch).unwrap();
                    (t.value(l)[[0, 0]], t.backward(l))
                },
                1e-5,
            );
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn perplexity_agrees_with_tape_loss() {
        let m = micro(DialogueVariant::default(), 5);
        let ex = example(&m);
        let mut short = example(&m);
        short.response.truncate(1);
        let data = vec![ex, short];
        let refs: Vec<&DialogueExample> = data.iter().collect();
        let mut t = Tape::new(m.store());
        let l = m.batch_loss(&mut t, &refs).unwrap();
        assert!((t.value(l)[[0, 0]] - m.gen_loss(&data).unwrap()).abs() < 1e-12);
        let probs = m.token_probabilities(&data).unwrap();
        let tokens: usize = probs.iter().map(Vec::len).sum();
        let nll: f64 = probs.iter().flatten().map(|p| -p.ln()).sum();
        assert!((m.perplexity(&data).unwrap() - (nll / tokens as f64).exp()).abs() < 1e-9);
        assert!(m.perplexity(&[]).is_err());
    }

    #[test]
    fn variants_differ_structurally() {
        let full = micro(DialogueVariant::default(), 1);
        let no_ra = micro(
            DialogueVariant {
                review_attention: false,
                ..Default::default()
            },
            1,
        );
        let no_cp = micro(
            DialogueVariant {
                review_copy: false,
                ..Default::default()
            },
            1,
        );
        let no_en = micro(
            DialogueVariant {
                review_encoder: false,
                ..Default::default()
            },
            1,
        );
        assert!(no_ra.num_parameters() < full.num_parameters());
        assert!(no_ra.store().iter().all(|(_, n, _)| !(n.starts_with("dlg.dec") && n.contains("rev"))));
        let full_names: Vec<&str> = full.store().iter().map(|(_, n, _)| n).collect();
        let cp_names: Vec<&str> = no_cp.store().iter().map(|(_, n, _)| n).collect();
        let removed: Vec<&&str> = full_names.iter().filter(|n| !cp_names.contains(n)).collect();
        assert_eq!(removed, vec![&"dlg.copy.rev"]);
        assert_eq!(no_cp.store().get(no_cp.gate.w).ncols(), 2);
        assert!(no_en.store().iter().all(|(_, n, _)| !n.starts_with("dlg.rev.")));
        assert!(no_en.num_parameters() < full.num_parameters());
        let ex = example(&no_cp);
        let dist = no_cp.token_distribution(&ex.input, &[BOS]).unwrap();
        assert_eq!(dist.gates[2], 0.0);
        assert!(dist.review_copy.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn encoders_have_independent_parameters() {
        let m = micro(DialogueVariant::default(), 6);
        let ex = example(&m);
        let before = m.token_distribution(&ex.input, &[BOS, 5]).unwrap();
        let mut swapped = m.clone();
        let names: Vec<String> = m
            .store()
            .iter()
            .filter(|(_, n, _)| n.starts_with("dlg.ctx."))
            .map(|(_, n, _)| n.to_string())
            .collect();
        for name in names {
            let other = name.replacen("dlg.ctx.", "dlg.rev.", 1);
            let (a, b) = (m.store().id(&name).unwrap(), m.store().id(&other).unwrap());
            let (va, vb) = (m.store().get(a).clone(), m.store().get(b).clone());
            swapped.store_mut().set(a, vb);
            swapped.store_mut().set(b, va);
        }
        let after = swapped.token_distribution(&ex.input, &[BOS, 5]).unwrap();
        assert_ne!(before.pr, after.pr);
    }

    #[test]
    fn generation_limits_and_determinism() {
        let m = micro(DialogueVariant::default(), 7);
        let ex = example(&m);
        let one = m.generate(&ex.input, 1, DecodeMode::Greedy).unwrap();
        assert_eq!(one.len(), 1);
        let a = m.generate(&ex.input, 30, DecodeMode::Greedy).unwrap();
        let b = m.generate(&ex.input, 30, DecodeMode::Greedy).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 30);
        let beam = m.generate(&ex.input, 10, DecodeMode::Beam(3)).unwrap();
        assert!(!beam.is_empty() && beam.len() <= 10);
        assert!(a.iter().all(|&t| !DialogueModel::banned(t)));
    }

    #[test]
    fn memorizes_a_few_responses() {
        let mut m = micro(DialogueVariant::default(), 8);
        let v = m.vocab().clone();
        let ids = |s: &str| s.split(' ').map(|w| v.id(w)).collect::<Vec<_>>();
        let data: Vec<DialogueExample> = [("a", "b c d"), ("b", "e f"), ("c", "g a b"), ("d", "c c"), ("e", "f")]
            .iter()
            .enumerate()
            .map(|(i, (ctx, resp))| DialogueExample {
                dialogue: format!("m{i}"),
                turn: 1,
                input: DialogueInput {
                    context: ids(ctx),
                    ..Default::default()
                },
                response: ids(resp),
            })
            .collect();
        let sched = Schedule {
            epochs: 300,
            batch_size: 5,
            patience: 0,
            seed: 1,
        };
        let adam = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        m.train(&data, &[], &sched, adam);
        for ex in &data {
            let out = m.generate(&ex.input, 30, DecodeMode::Greedy).unwrap();
            let mut expect = ex.response.clone();
            expect.push(EOS);
            assert_eq!(out, expect);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = micro(DialogueVariant::default(), 9);
        let ex = example(&m);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.safetensors");
        m.save(&path, Some("abc")).unwrap();
        let (back, digest) = DialogueModel::load(&path).unwrap();
        assert_eq!(digest.as_deref(), Some("abc"));
        assert_eq!(
            back.token_distribution(&ex.input, &[BOS]).unwrap().pr,
            m.token_distribution(&ex.input, &[BOS]).unwrap().pr
        );
    }
}
