//! Trainable follower and speaker networks.
//!
//! Both models share one architecture for digesting what the agent has done
//! so far: a GRU folds `[visual feature; previous action embedding]` pairs
//! into a hidden state, keeping every intermediate state as an attention
//! memory. On top of that state the two models diverge:
//!
//! * [`FollowerModel`] scores candidate actions given an instruction. A
//!   bidirectional GRU encodes the token sequence, the agent state attends
//!   over the token encodings, and a bilinear map matches `[state; context]`
//!   against each candidate's action embedding.
//! * [`SpeakerModel`] scores an instruction given a candidate action. A
//!   linear layer conditions an LM initial state on `(state, action
//!   embedding)`, then a GRU language model with attention over the history
//!   memory assigns a log-probability to every token.
//!
//! Output layers are zero-initialized so an untrained follower is exactly
//! uniform over actions and an untrained speaker is exactly uniform over the
//! vocabulary; training starts from a known, seed-independent baseline and
//! tests can assert it bit-for-bit.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, NavError, Result};
use crate::ndgrad::optim::{Checkpoint, ParamStore};
use crate::ndgrad::{Array, Tape, Tensor};
use crate::seeds::derived_rng;
use crate::world::{action_embedding, Action, ActionEmbedding, EnvGraph, NodeId};

/// Checkpoint `kind` tag for follower weights.
pub const FOLLOWER_KIND: &str = "follower";
/// Checkpoint `kind` tag for speaker weights.
pub const SPEAKER_KIND: &str = "speaker";

/// Network sizing shared by both models.
///
/// `hidden` must be even because the follower's instruction encoder splits it
/// across the two directions of a bidirectional GRU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Recurrent state width for the history encoder, instruction encoder
    /// (split across directions), and speaker LM.
    pub hidden: usize,
    /// Token embedding width.
    pub token_embed: usize,
    /// Visual feature width; must match the worlds the model runs on.
    pub d_v: usize,
    /// Vocabulary size; must match the tokenizer the model runs with.
    pub vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            token_embed: 32,
            d_v: 32,
            vocab: crate::instructions::build_vocab().len(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden < 2 || self.hidden % 2 != 0 {
            return config_err(format!(
                "hidden width must be an even number >= 2, got {}",
                self.hidden
            ));
        }
        if self.token_embed == 0 || self.d_v == 0 {
            return config_err("token_embed and d_v must be positive");
        }
        // Four ids are reserved (pad/bos/eos/unk); a smaller vocabulary
        // cannot express any instruction.
        if self.vocab < 5 {
            return config_err(format!("vocab of {} leaves no content words", self.vocab));
        }
        Ok(())
    }

    /// Width of an [`ActionEmbedding`]: 4 orientation values + the target
    /// visual feature.
    pub fn action_dim(&self) -> usize {
        4 + self.d_v
    }
}

/// How a parameter is filled at init time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Uniform ±sqrt(6 / (fan_in + fan_out)); used for recurrent and
    /// projection weights.
    Xavier,
    /// Used for biases and for output layers that must start uniform.
    Zeros,
    /// Uniform ±0.1; used for embedding tables.
    Embed,
}

/// One parameter: name, shape, and init rule. A model is fully described by
/// its layout.
type Layout = Vec<(String, Vec<usize>, Init)>;

/// GRU parameters: the update/reset gates share one fused matrix, the
/// candidate state has its own.
fn gru_layout(prefix: &str, input: usize, hidden: usize) -> Layout {
    vec![
        (format!("{prefix}.w_zr"), vec![input + hidden, 2 * hidden], Init::Xavier),
        (format!("{prefix}.b_zr"), vec![2 * hidden], Init::Zeros),
        (format!("{prefix}.w_h"), vec![input + hidden, hidden], Init::Xavier),
        (format!("{prefix}.b_h"), vec![hidden], Init::Zeros),
    ]
}

fn follower_layout(cfg: &ModelConfig) -> Layout {
    let h = cfg.hidden;
    let mut layout = vec![(
        "tok_embed".to_string(),
        vec![cfg.vocab, cfg.token_embed],
        Init::Embed,
    )];
    layout.extend(gru_layout("enc_fwd", cfg.token_embed, h / 2));
    layout.extend(gru_layout("enc_bwd", cfg.token_embed, h / 2));
    layout.extend(gru_layout("hist", cfg.d_v + cfg.action_dim(), h));
    layout.push(("att_w".to_string(), vec![h, h], Init::Xavier));
    // Zero so initial logits are all zero: the untrained follower is exactly
    // uniform over any candidate set.
    layout.push(("act_w".to_string(), vec![2 * h, cfg.action_dim()], Init::Zeros));
    layout
}

fn speaker_layout(cfg: &ModelConfig) -> Layout {
    let h = cfg.hidden;
    let mut layout = vec![(
        "tok_embed".to_string(),
        vec![cfg.vocab, cfg.token_embed],
        Init::Embed,
    )];
    layout.extend(gru_layout("hist", cfg.d_v + cfg.action_dim(), h));
    layout.push(("stop_feature".to_string(), vec![cfg.d_v], Init::Zeros));
    layout.push((
        "cond_w".to_string(),
        vec![h + cfg.action_dim(), h],
        Init::Xavier,
    ));
    layout.push(("cond_b".to_string(), vec![h], Init::Zeros));
    layout.extend(gru_layout("lm", cfg.token_embed, h));
    layout.push(("att_w".to_string(), vec![h, h], Init::Xavier));
    layout.push(("comb_w".to_string(), vec![2 * h, h], Init::Xavier));
    layout.push(("comb_b".to_string(), vec![h], Init::Zeros));
    // The final column convention: rows 0..hidden are weights, the last row
    // is the bias applied through an appended constant 1. Zero so the
    // untrained LM is exactly uniform over the vocabulary.
    layout.push(("out_w".to_string(), vec![h + 1, cfg.vocab], Init::Zeros));
    layout
}

/// Materialize a layout into a store, drawing weights in layout order so the
/// same seed always yields the same bytes.
fn init_params(layout: &Layout, rng: &mut ChaCha12Rng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, shape, init) in layout {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Xavier => {
                let (fan_in, fan_out) = match shape.len() {
                    2 => (shape[0], shape[1]),
                    _ => (numel, numel),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Embed => (0..numel).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        };
        store.register(name, Array::new(shape.clone(), data)?)?;
    }
    Ok(store)
}

/// Check that a checkpoint's parameters match a layout name-for-name and
/// shape-for-shape, in order.
fn check_against_layout(ckpt: &Checkpoint, layout: &Layout) -> Result<()> {
    if ckpt.params.len() != layout.len() {
        return Err(NavError::Data(format!(
            "checkpoint has {} parameters, model expects {}",
            ckpt.params.len(),
            layout.len()
        )));
    }
    for (entry, (name, shape, _)) in ckpt.params.iter().zip(layout) {
        if &entry.name != name || &entry.shape != shape {
            return Err(NavError::Data(format!(
                "checkpoint parameter {:?} with shape {:?} does not match expected {:?} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
    }
    Ok(())
}

/// GRU cell view over tape-registered parameters.
struct GruCell {
    w_zr: Tensor,
    b_zr: Tensor,
    w_h: Tensor,
    b_h: Tensor,
    hidden: usize,
}

impl GruCell {
    fn fetch(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<GruCell> {
        let w_zr = tape.param(store, &format!("{prefix}.w_zr"))?;
        let b_zr = tape.param(store, &format!("{prefix}.b_zr"))?;
        let w_h = tape.param(store, &format!("{prefix}.w_h"))?;
        let b_h = tape.param(store, &format!("{prefix}.b_h"))?;
        let hidden = tape.value(b_h).numel();
        Ok(GruCell { w_zr, b_zr, w_h, b_h, hidden })
    }

    /// One recurrence: `h' = z ⊙ h + (1−z) ⊙ tanh(W_h [x; r ⊙ h] + b_h)`
    /// where `(z, r) = σ(W_zr [x; h] + b_zr)`. `z` keeps the old state.
    fn step(&self, tape: &mut Tape, x: Tensor, h: Tensor) -> Result<Tensor> {
        let xh = tape.concat1(&[x, h])?;
        let zr_lin = tape.matmul(xh, self.w_zr)?;
        let zr_aff = tape.add(zr_lin, self.b_zr)?;
        let zr = tape.sigmoid(zr_aff)?;
        let z = tape.slice1(zr, 0, self.hidden)?;
        let r = tape.slice1(zr, self.hidden, self.hidden)?;
        let rh = tape.mul(r, h)?;
        let xrh = tape.concat1(&[x, rh])?;
        let hh_lin = tape.matmul(xrh, self.w_h)?;
        let hh_aff = tape.add(hh_lin, self.b_h)?;
        let hh = tape.tanh(hh_aff)?;
        let keep = tape.mul(z, h)?;
        let neg_z = tape.scale(z, -1.0)?;
        let admit = tape.add_scalar(neg_z, 1.0)?;
        let update = tape.mul(admit, hh)?;
        tape.add(keep, update)
    }
}

/// Folded agent history on a tape: the current hidden state plus every
/// intermediate state (one per observation) for attention.
#[derive(Debug, Clone)]
pub struct HistoryState {
    /// Hidden state after the latest observation.
    pub h: Tensor,
    /// All hidden states so far, oldest first; `memory.last() == h`.
    pub memory: Vec<Tensor>,
    /// Number of actions folded in (= observations − 1).
    pub steps: usize,
}

/// Fold one `[visual; previous action]` observation into the history GRU.
/// The very first observation has no previous action and uses zeros.
fn fold_history(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    prev: Option<&HistoryState>,
    visual: &[f64],
    prev_action: Option<&ActionEmbedding>,
) -> Result<HistoryState> {
    if visual.len() != cfg.d_v {
        return Err(NavError::Shape {
            op: "fold_history",
            lhs: vec![visual.len()],
            rhs: vec![cfg.d_v],
        });
    }
    if prev.is_some() != prev_action.is_some() {
        return config_err(
            "the first observation must have no previous action; later ones must have one",
        );
    }
    let mut input = Vec::with_capacity(cfg.d_v + cfg.action_dim());
    input.extend_from_slice(visual);
    match prev_action {
        Some(a) => {
            let v = a.to_vec();
            if v.len() != cfg.action_dim() {
                return Err(NavError::Shape {
                    op: "fold_history",
                    lhs: vec![v.len()],
                    rhs: vec![cfg.action_dim()],
                });
            }
            input.extend_from_slice(&v);
        }
        None => input.extend(std::iter::repeat(0.0).take(cfg.action_dim())),
    }
    let x = tape.const_vec(&input)?;
    let gru = GruCell::fetch(tape, store, "hist")?;
    let h_prev = match prev {
        Some(state) => state.h,
        None => tape.const_vec(&vec![0.0; cfg.hidden])?,
    };
    let h = gru.step(tape, x, h_prev)?;
    let mut memory = prev.map(|s| s.memory.clone()).unwrap_or_default();
    memory.push(h);
    let steps = memory.len() - 1;
    Ok(HistoryState { h, memory, steps })
}

/// Full fold over a history: `observations` are per-node visual features in
/// visit order, `prev_actions[i]` is the action that led to observation
/// `i+1`. Exactly one more observation than actions.
fn encode_history_impl(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    observations: &[Vec<f64>],
    prev_actions: &[ActionEmbedding],
) -> Result<HistoryState> {
    if observations.len() != prev_actions.len() + 1 {
        return config_err(format!(
            "history needs exactly one more observation than actions, got {} observations and {} actions",
            observations.len(),
            prev_actions.len()
        ));
    }
    let mut state = fold_history(tape, store, cfg, None, &observations[0], None)?;
    for (obs, act) in observations[1..].iter().zip(prev_actions) {
        state = fold_history(tape, store, cfg, Some(&state), obs, Some(act))?;
    }
    Ok(state)
}

/// Instruction-conditioned action scorer.
#[derive(Debug, Clone)]
pub struct FollowerModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl FollowerModel {
    /// Fresh weights; the same `(cfg, seed)` always produces the same bytes.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<FollowerModel> {
        cfg.validate()?;
        let mut rng = derived_rng(seed, "follower-init");
        let params = init_params(&follower_layout(cfg), &mut rng)?;
        Ok(FollowerModel { cfg: cfg.clone(), params })
    }

    /// Candidate actions at `node` paired with their embeddings. The
    /// follower has no learned stop representation: Stop embeds with a
    /// zero target feature.
    pub fn candidates(
        &self,
        graph: &EnvGraph,
        node: NodeId,
    ) -> Result<(Vec<Action>, Vec<ActionEmbedding>)> {
        let actions = graph.candidate_actions(node)?;
        let zeros = vec![0.0; self.cfg.d_v];
        let embeddings = actions
            .iter()
            .map(|&a| action_embedding(graph, node, a, &zeros))
            .collect::<Result<Vec<_>>>()?;
        Ok((actions, embeddings))
    }

    /// Encode a token sequence with the bidirectional GRU; returns a
    /// `(len, hidden)` matrix of per-token encodings.
    pub fn encode_instruction(&self, tape: &mut Tape, tokens: &[u32]) -> Result<Tensor> {
        check_tokens(tokens, self.cfg.vocab)?;
        let table = tape.param(&self.params, "tok_embed")?;
        let embeds = tape.embed_rows(table, tokens)?;
        let half = self.cfg.hidden / 2;
        let fwd_gru = GruCell::fetch(tape, &self.params, "enc_fwd")?;
        let bwd_gru = GruCell::fetch(tape, &self.params, "enc_bwd")?;
        let zero = tape.const_vec(&vec![0.0; half])?;
        let mut fwd = Vec::with_capacity(tokens.len());
        let mut h = zero;
        for k in 0..tokens.len() {
            let x = tape.row(embeds, k)?;
            h = fwd_gru.step(tape, x, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![zero; tokens.len()];
        h = zero;
        for k in (0..tokens.len()).rev() {
            let x = tape.row(embeds, k)?;
            h = bwd_gru.step(tape, x, h)?;
            bwd[k] = h;
        }
        let rows = (0..tokens.len())
            .map(|k| tape.concat1(&[fwd[k], bwd[k]]))
            .collect::<Result<Vec<_>>>()?;
        tape.stack_rows(&rows)
    }

    /// Fold a full history; see [`HistoryState`].
    pub fn encode_history(
        &self,
        tape: &mut Tape,
        observations: &[Vec<f64>],
        prev_actions: &[ActionEmbedding],
    ) -> Result<HistoryState> {
        encode_history_impl(tape, &self.params, &self.cfg, observations, prev_actions)
    }

    /// Extend a folded history by one step without re-folding the prefix.
    pub fn history_step(
        &self,
        tape: &mut Tape,
        prev: &HistoryState,
        visual: &[f64],
        action: &ActionEmbedding,
    ) -> Result<HistoryState> {
        fold_history(tape, &self.params, &self.cfg, Some(prev), visual, Some(action))
    }

    /// Score each candidate: the agent state attends over the instruction
    /// encoding, and `[state; context]` is matched bilinearly against every
    /// candidate embedding. Returns a length-`|A|` logit vector.
    pub fn logits(
        &self,
        tape: &mut Tape,
        hist: &HistoryState,
        instruction: Tensor,
        candidates: &[ActionEmbedding],
    ) -> Result<Tensor> {
        if candidates.is_empty() {
            return config_err("cannot score an empty candidate set");
        }
        let att_w = tape.param(&self.params, "att_w")?;
        let act_w = tape.param(&self.params, "act_w")?;
        let query = tape.matmul(att_w, hist.h)?;
        let scores = tape.matmul(instruction, query)?;
        let alpha = tape.softmax(scores)?;
        let context = tape.matmul(alpha, instruction)?;
        let state = tape.concat1(&[hist.h, context])?;
        let proj = tape.matmul(state, act_w)?;
        let dim = self.cfg.action_dim();
        let mut flat = Vec::with_capacity(candidates.len() * dim);
        for emb in candidates {
            let v = emb.to_vec();
            if v.len() != dim {
                return Err(NavError::Shape {
                    op: "follower logits",
                    lhs: vec![v.len()],
                    rhs: vec![dim],
                });
            }
            flat.extend_from_slice(&v);
        }
        let cand = tape.constant(Array::matrix(candidates.len(), dim, flat)?)?;
        tape.matmul(cand, proj)
    }

    pub fn to_checkpoint(&self, vocab_hash: &str) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(
            FOLLOWER_KIND,
            serde_json::to_value(&self.cfg)
                .map_err(|e| NavError::Data(format!("encoding model config: {e}")))?,
            vocab_hash,
            &self.params,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<FollowerModel> {
        if ckpt.kind != FOLLOWER_KIND {
            return Err(NavError::Data(format!(
                "checkpoint kind {:?} is not a follower",
                ckpt.kind
            )));
        }
        let cfg = model_config_from(&ckpt.config)?;
        cfg.validate()?;
        check_against_layout(ckpt, &follower_layout(&cfg))?;
        Ok(FollowerModel { cfg, params: ckpt.to_store()? })
    }
}

/// Batched LM scores for every candidate action at one decision.
#[derive(Debug, Clone, Copy)]
pub struct LmBatch {
    /// Rank-2, `(len − 1, |A|)`: log p(token[k+1] | token[..=k], action,
    /// history) — one row per position, one column per candidate.
    pub per_token: Tensor,
    /// Rank-1, length `|A|`: each candidate's total instruction
    /// log-probability (the column sums of `per_token`).
    pub scores: Tensor,
}

/// LM scores for every `(decision, candidate)` pair of a whole trail.
#[derive(Debug, Clone)]
pub struct TrailScores {
    /// Rank-1, length `Σ_t |A_t|`: each pair's total instruction
    /// log-probability, decisions in input order, candidates within.
    pub scores: Tensor,
    /// Half-open row range of each decision inside `scores`.
    pub ranges: Vec<(usize, usize)>,
}

/// Additive attention mask for rows that must ignore later memory. The
/// shift is large enough that `exp(mask − max)` underflows to exactly 0.0
/// after max subtraction, so a masked row weights its valid prefix exactly
/// as an unmasked row over that prefix would.
const ATTENTION_MASK: f64 = -1e304;

/// Per-position LM output for one `(history, action, instruction)` triple.
#[derive(Debug, Clone, Copy)]
pub struct LmOutput {
    /// Rank-1, length `len − 1`: log p(token[k+1] | token[..=k], action,
    /// history) for each position.
    pub per_token: Tensor,
    /// Rank-2, `(len − 1, vocab)`: the full conditional log-distribution at
    /// each position (rows of a log-softmax).
    pub rows: Tensor,
}

/// Action-conditioned instruction language model.
#[derive(Debug, Clone)]
pub struct SpeakerModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl SpeakerModel {
    /// Fresh weights; the same `(cfg, seed)` always produces the same bytes.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<SpeakerModel> {
        cfg.validate()?;
        let mut rng = derived_rng(seed, "speaker-init");
        let params = init_params(&speaker_layout(cfg), &mut rng)?;
        Ok(SpeakerModel { cfg: cfg.clone(), params })
    }

    /// Fold a full history; see [`HistoryState`].
    pub fn encode_history(
        &self,
        tape: &mut Tape,
        observations: &[Vec<f64>],
        prev_actions: &[ActionEmbedding],
    ) -> Result<HistoryState> {
        encode_history_impl(tape, &self.params, &self.cfg, observations, prev_actions)
    }

    /// Extend a folded history by one step without re-folding the prefix.
    pub fn history_step(
        &self,
        tape: &mut Tape,
        prev: &HistoryState,
        visual: &[f64],
        action: &ActionEmbedding,
    ) -> Result<HistoryState> {
        fold_history(tape, &self.params, &self.cfg, Some(prev), visual, Some(action))
    }

    /// Embed a candidate action on the tape. Moves are constants (orientation
    /// plus the target node's feature); Stop splices in the learned stop
    /// feature so gradients reach it.
    pub fn candidate_tensor(
        &self,
        tape: &mut Tape,
        graph: &EnvGraph,
        node: NodeId,
        action: Action,
    ) -> Result<Tensor> {
        match action {
            Action::Stop => {
                let d_v = graph.node(node)?.visual_feature.len();
                if d_v != self.cfg.d_v {
                    return Err(NavError::Shape {
                        op: "speaker candidate",
                        lhs: vec![d_v],
                        rhs: vec![self.cfg.d_v],
                    });
                }
                self.stop_tensor(tape)
            }
            Action::MoveTo(_) => {
                let emb = action_embedding(graph, node, action, &vec![0.0; self.cfg.d_v])?;
                tape.const_vec(&emb.to_vec())
            }
        }
    }

    /// The Stop embedding with the learned feature vector spliced in.
    fn stop_tensor(&self, tape: &mut Tape) -> Result<Tensor> {
        // Stop's orientation convention matches `world::action_embedding`:
        // heading 0, elevation 0.
        let orient = tape.const_vec(&[0.0, 1.0, 0.0, 1.0])?;
        let stop = tape.param(&self.params, "stop_feature")?;
        tape.concat1(&[orient, stop])
    }

    /// Teacher-forced per-token log-probabilities of `tokens` under the LM
    /// conditioned on `(history, action)`. `action_emb` should come from
    /// [`SpeakerModel::candidate_tensor`].
    pub fn token_logprobs(
        &self,
        tape: &mut Tape,
        hist: &HistoryState,
        action_emb: Tensor,
        tokens: &[u32],
    ) -> Result<LmOutput> {
        check_tokens(tokens, self.cfg.vocab)?;
        let cond_w = tape.param(&self.params, "cond_w")?;
        let cond_b = tape.param(&self.params, "cond_b")?;
        let att_w = tape.param(&self.params, "att_w")?;
        let comb_w = tape.param(&self.params, "comb_w")?;
        let comb_b = tape.param(&self.params, "comb_b")?;
        let out_w = tape.param(&self.params, "out_w")?;
        let table = tape.param(&self.params, "tok_embed")?;
        let gru = GruCell::fetch(tape, &self.params, "lm")?;

        let cond_in = tape.concat1(&[hist.h, action_emb])?;
        let cond_lin = tape.matmul(cond_in, cond_w)?;
        let cond_aff = tape.add(cond_lin, cond_b)?;
        let mut h = tape.tanh(cond_aff)?;
        let memory = tape.stack_rows(&hist.memory)?;
        let inputs = tape.embed_rows(table, &tokens[..tokens.len() - 1])?;
        let one = tape.const_vec(&[1.0])?;

        let mut rows = Vec::with_capacity(tokens.len() - 1);
        for k in 0..tokens.len() - 1 {
            let x = tape.row(inputs, k)?;
            h = gru.step(tape, x, h)?;
            let query = tape.matmul(att_w, h)?;
            let scores = tape.matmul(memory, query)?;
            let alpha = tape.softmax(scores)?;
            let context = tape.matmul(alpha, memory)?;
            let joined = tape.concat1(&[h, context])?;
            let comb_lin = tape.matmul(joined, comb_w)?;
            let comb_aff = tape.add(comb_lin, comb_b)?;
            let comb = tape.tanh(comb_aff)?;
            // Appended 1 turns the last row of out_w into a bias.
            rows.push(tape.concat1(&[comb, one])?);
        }
        let states = tape.stack_rows(&rows)?;
        let logits = tape.matmul(states, out_w)?;
        let logdist = tape.log_softmax(logits)?;
        let cells: Vec<(usize, usize)> = tokens[1..]
            .iter()
            .enumerate()
            .map(|(k, &t)| (k, t as usize))
            .collect();
        let per_token = tape.gather2(logdist, &cells)?;
        Ok(LmOutput { per_token, rows: logdist })
    }

    /// Total log p(instruction | action, history): the sum of per-token
    /// log-probabilities. This is the score the generative policy ranks
    /// actions by.
    pub fn lm_score(
        &self,
        tape: &mut Tape,
        hist: &HistoryState,
        action_emb: Tensor,
        tokens: &[u32],
    ) -> Result<Tensor> {
        let out = self.token_logprobs(tape, hist, action_emb, tokens)?;
        tape.sum(out.per_token)
    }

    /// Stack the embeddings of every candidate at `node` as the rows of one
    /// matrix, in the given order. Stop rows splice in the learned feature.
    pub fn candidate_matrix(
        &self,
        tape: &mut Tape,
        graph: &EnvGraph,
        node: NodeId,
        actions: &[Action],
    ) -> Result<Tensor> {
        let rows = actions
            .iter()
            .map(|&a| self.candidate_tensor(tape, graph, node, a))
            .collect::<Result<Vec<_>>>()?;
        tape.stack_rows(&rows)
    }

    /// Score every candidate's conditional LM in one pass over the
    /// instruction. Row for row this computes exactly what
    /// [`SpeakerModel::token_logprobs`] computes candidate by candidate —
    /// the per-row arithmetic and accumulation order are identical — but
    /// batching the candidates into rank-2 ops makes one decision cost a
    /// single LM walk instead of one per candidate.
    pub fn lm_scores_batched(
        &self,
        tape: &mut Tape,
        hist: &HistoryState,
        cand_matrix: Tensor,
        tokens: &[u32],
    ) -> Result<LmBatch> {
        check_tokens(tokens, self.cfg.vocab)?;
        let b = {
            let shape = tape.value(cand_matrix).shape();
            if shape.len() != 2 || shape[1] != self.cfg.action_dim() {
                return Err(NavError::Shape {
                    op: "lm_scores_batched",
                    lhs: shape.to_vec(),
                    rhs: vec![0, self.cfg.action_dim()],
                });
            }
            shape[0]
        };
        let hidden = self.cfg.hidden;
        let cond_w = tape.param(&self.params, "cond_w")?;
        let cond_b = tape.param(&self.params, "cond_b")?;
        let att_w = tape.param(&self.params, "att_w")?;
        let comb_w = tape.param(&self.params, "comb_w")?;
        let comb_b = tape.param(&self.params, "comb_b")?;
        let out_w = tape.param(&self.params, "out_w")?;
        let table = tape.param(&self.params, "tok_embed")?;
        let gru = GruCell::fetch(tape, &self.params, "lm")?;

        // Broadcast the shared pieces to one row per candidate.
        let h_rows = tape.stack_rows(&vec![hist.h; b])?;
        let cond_b_rows = tape.stack_rows(&vec![cond_b; b])?;
        let b_zr_rows = tape.stack_rows(&vec![gru.b_zr; b])?;
        let b_h_rows = tape.stack_rows(&vec![gru.b_h; b])?;
        let comb_b_rows = tape.stack_rows(&vec![comb_b; b])?;
        let ones_col = tape.constant(Array::matrix(b, 1, vec![1.0; b])?)?;

        let cond_in = tape.concat_cols(&[h_rows, cand_matrix])?;
        let cond_lin = tape.matmul(cond_in, cond_w)?;
        let cond_aff = tape.add(cond_lin, cond_b_rows)?;
        let mut h = tape.tanh(cond_aff)?; // (B, H)
        let memory = tape.stack_rows(&hist.memory)?; // (t, H)
        let memory_t = tape.transpose(memory)?;
        let att_w_t = tape.transpose(att_w)?;
        let inputs = tape.embed_rows(table, &tokens[..tokens.len() - 1])?;

        let mut position_rows = Vec::with_capacity(tokens.len() - 1);
        for k in 0..tokens.len() - 1 {
            let x = tape.row(inputs, k)?;
            let x_rows = tape.stack_rows(&vec![x; b])?;
            // GRU recurrence, all candidates at once.
            let xh = tape.concat_cols(&[x_rows, h])?;
            let zr_lin = tape.matmul(xh, gru.w_zr)?;
            let zr_aff = tape.add(zr_lin, b_zr_rows)?;
            let zr = tape.sigmoid(zr_aff)?;
            let z = tape.slice_cols(zr, 0, hidden)?;
            let r = tape.slice_cols(zr, hidden, hidden)?;
            let rh = tape.mul(r, h)?;
            let xrh = tape.concat_cols(&[x_rows, rh])?;
            let hh_lin = tape.matmul(xrh, gru.w_h)?;
            let hh_aff = tape.add(hh_lin, b_h_rows)?;
            let hh = tape.tanh(hh_aff)?;
            let keep = tape.mul(z, h)?;
            let neg_z = tape.scale(z, -1.0)?;
            let admit = tape.add_scalar(neg_z, 1.0)?;
            let update = tape.mul(admit, hh)?;
            h = tape.add(keep, update)?;
            // Attention over the history memory, one query per candidate.
            let query = tape.matmul(h, att_w_t)?; // (B, H)
            let scores = tape.matmul(query, memory_t)?; // (B, t)
            let alpha = tape.softmax(scores)?;
            let context = tape.matmul(alpha, memory)?; // (B, H)
            let joined = tape.concat_cols(&[h, context])?;
            let comb_lin = tape.matmul(joined, comb_w)?;
            let comb_aff = tape.add(comb_lin, comb_b_rows)?;
            let comb = tape.tanh(comb_aff)?;
            // Appended 1 turns the last row of out_w into a bias.
            let out_in = tape.concat_cols(&[comb, ones_col])?;
            let logits = tape.matmul(out_in, out_w)?; // (B, V)
            let logdist = tape.log_softmax(logits)?;
            let target = tokens[k + 1] as usize;
            let cells: Vec<(usize, usize)> = (0..b).map(|i| (i, target)).collect();
            position_rows.push(tape.gather2(logdist, &cells)?); // (B,)
        }
        let per_token = tape.stack_rows(&position_rows)?; // (L−1, B)
        let ones_pos = tape.const_vec(&vec![1.0; tokens.len() - 1])?;
        let scores = tape.matmul(ones_pos, per_token)?; // (B,)
        Ok(LmBatch { per_token, scores })
    }

    /// Score every decision of a trail in a single walk over the
    /// instruction. Row for row this matches [`SpeakerModel::lm_scores_batched`]
    /// run decision by decision — each row attends only to the history
    /// prefix its decision had seen (later memory rows get exactly zero
    /// attention weight via [`ATTENTION_MASK`]) — but stacking all
    /// decisions' candidates into one rank-2 walk makes a whole episode
    /// cost one LM pass instead of one per decision.
    ///
    /// `hists[t]` is the history state at decision `t`; each must extend
    /// the previous by one [`SpeakerModel::history_step`], so the last
    /// state's memory can serve as the shared attention memory. `cands[t]`
    /// holds decision `t`'s candidate embeddings (rank-1 rows on the tape).
    pub fn lm_scores_trail(
        &self,
        tape: &mut Tape,
        hists: &[HistoryState],
        cands: &[Vec<Tensor>],
        tokens: &[u32],
    ) -> Result<TrailScores> {
        check_tokens(tokens, self.cfg.vocab)?;
        if hists.is_empty() || hists.len() != cands.len() {
            return Err(NavError::Shape {
                op: "lm_scores_trail",
                lhs: vec![hists.len()],
                rhs: vec![cands.len()],
            });
        }
        let hidden = self.cfg.hidden;
        let mem_len = hists.last().unwrap().memory.len();

        // Row layout: decisions in order, candidates within a decision.
        let mut ranges = Vec::with_capacity(hists.len());
        let mut h_rows_src = Vec::new();
        let mut cand_rows = Vec::new();
        let mut mask_data = Vec::new();
        let mut next_row = 0usize;
        for (hist, rows) in hists.iter().zip(cands) {
            let valid = hist.memory.len();
            if rows.is_empty() || valid == 0 || valid > mem_len {
                return Err(NavError::Shape {
                    op: "lm_scores_trail",
                    lhs: vec![rows.len(), valid],
                    rhs: vec![1, mem_len],
                });
            }
            for &row in rows {
                h_rows_src.push(hist.h);
                cand_rows.push(row);
                for k in 0..mem_len {
                    mask_data.push(if k < valid { 0.0 } else { ATTENTION_MASK });
                }
            }
            ranges.push((next_row, next_row + rows.len()));
            next_row += rows.len();
        }
        let b = next_row;

        let cond_w = tape.param(&self.params, "cond_w")?;
        let cond_b = tape.param(&self.params, "cond_b")?;
        let att_w = tape.param(&self.params, "att_w")?;
        let comb_w = tape.param(&self.params, "comb_w")?;
        let comb_b = tape.param(&self.params, "comb_b")?;
        let out_w = tape.param(&self.params, "out_w")?;
        let table = tape.param(&self.params, "tok_embed")?;
        let gru = GruCell::fetch(tape, &self.params, "lm")?;

        let h_rows = tape.stack_rows(&h_rows_src)?;
        let cand_matrix = tape.stack_rows(&cand_rows)?;
        let cond_b_rows = tape.stack_rows(&vec![cond_b; b])?;
        let b_zr_rows = tape.stack_rows(&vec![gru.b_zr; b])?;
        let b_h_rows = tape.stack_rows(&vec![gru.b_h; b])?;
        let comb_b_rows = tape.stack_rows(&vec![comb_b; b])?;
        let ones_col = tape.constant(Array::matrix(b, 1, vec![1.0; b])?)?;
        let mask = tape.constant(Array::matrix(b, mem_len, mask_data)?)?;

        let cond_in = tape.concat_cols(&[h_rows, cand_matrix])?;
        let cond_lin = tape.matmul(cond_in, cond_w)?;
        let cond_aff = tape.add(cond_lin, cond_b_rows)?;
        let mut h = tape.tanh(cond_aff)?; // (B, H)
        let memory = tape.stack_rows(&hists.last().unwrap().memory)?; // (M, H)
        let memory_t = tape.transpose(memory)?;
        let att_w_t = tape.transpose(att_w)?;
        let inputs = tape.embed_rows(table, &tokens[..tokens.len() - 1])?;

        let mut position_rows = Vec::with_capacity(tokens.len() - 1);
        for k in 0..tokens.len() - 1 {
            let x = tape.row(inputs, k)?;
            let x_rows = tape.stack_rows(&vec![x; b])?;
            // GRU recurrence, all rows at once.
            let xh = tape.concat_cols(&[x_rows, h])?;
            let zr_lin = tape.matmul(xh, gru.w_zr)?;
            let zr_aff = tape.add(zr_lin, b_zr_rows)?;
            let zr = tape.sigmoid(zr_aff)?;
            let z = tape.slice_cols(zr, 0, hidden)?;
            let r = tape.slice_cols(zr, hidden, hidden)?;
            let rh = tape.mul(r, h)?;
            let xrh = tape.concat_cols(&[x_rows, rh])?;
            let hh_lin = tape.matmul(xrh, gru.w_h)?;
            let hh_aff = tape.add(hh_lin, b_h_rows)?;
            let hh = tape.tanh(hh_aff)?;
            let keep = tape.mul(z, h)?;
            let neg_z = tape.scale(z, -1.0)?;
            let admit = tape.add_scalar(neg_z, 1.0)?;
            let update = tape.mul(admit, hh)?;
            h = tape.add(keep, update)?;
            // Attention over the shared memory, masked to each row's prefix.
            let query = tape.matmul(h, att_w_t)?; // (B, H)
            let raw = tape.matmul(query, memory_t)?; // (B, M)
            let gated = tape.add(raw, mask)?;
            let alpha = tape.softmax(gated)?;
            let context = tape.matmul(alpha, memory)?; // (B, H)
            let joined = tape.concat_cols(&[h, context])?;
            let comb_lin = tape.matmul(joined, comb_w)?;
            let comb_aff = tape.add(comb_lin, comb_b_rows)?;
            let comb = tape.tanh(comb_aff)?;
            // Appended 1 turns the last row of out_w into a bias.
            let out_in = tape.concat_cols(&[comb, ones_col])?;
            let logits = tape.matmul(out_in, out_w)?; // (B, V)
            let logdist = tape.log_softmax(logits)?;
            let target = tokens[k + 1] as usize;
            let cells: Vec<(usize, usize)> = (0..b).map(|i| (i, target)).collect();
            position_rows.push(tape.gather2(logdist, &cells)?); // (B,)
        }
        let per_token = tape.stack_rows(&position_rows)?; // (L−1, B)
        let ones_pos = tape.const_vec(&vec![1.0; tokens.len() - 1])?;
        let scores = tape.matmul(ones_pos, per_token)?; // (B,)
        Ok(TrailScores { scores, ranges })
    }

    pub fn to_checkpoint(&self, vocab_hash: &str) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(
            SPEAKER_KIND,
            serde_json::to_value(&self.cfg)
                .map_err(|e| NavError::Data(format!("encoding model config: {e}")))?,
            vocab_hash,
            &self.params,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<SpeakerModel> {
        if ckpt.kind != SPEAKER_KIND {
            return Err(NavError::Data(format!(
                "checkpoint kind {:?} is not a speaker",
                ckpt.kind
            )));
        }
        let cfg = model_config_from(&ckpt.config)?;
        cfg.validate()?;
        check_against_layout(ckpt, &speaker_layout(&cfg))?;
        Ok(SpeakerModel { cfg, params: ckpt.to_store()? })
    }
}

/// Extract a [`ModelConfig`] from a checkpoint's config value. Training
/// checkpoints stamp their full training config (with the model sizing
/// nested under `model_cfg`); bare model checkpoints stamp the sizing
/// directly. Accept both.
fn model_config_from(value: &serde_json::Value) -> Result<ModelConfig> {
    let inner = value.get("model_cfg").unwrap_or(value);
    serde_json::from_value(inner.clone())
        .map_err(|e| NavError::Data(format!("decoding model config: {e}")))
}

/// Instructions must carry at least BOS and EOS, and every id must be in
/// vocabulary range.
fn check_tokens(tokens: &[u32], vocab: usize) -> Result<()> {
    if tokens.len() < 2 {
        return config_err(format!(
            "instruction must contain at least BOS and EOS, got {} tokens",
            tokens.len()
        ));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(NavError::UnknownId(format!(
            "token id {t} outside vocabulary of {vocab}"
        )));
    }
    Ok(())
}
