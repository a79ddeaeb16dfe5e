//! Training: losses, teacher oracles, teacher/student mixing, and the loop.
//!
//! Both model kinds train by imitation. At every supervised decision the
//! teacher provides a reference action and the model pays
//!
//! * follower: the negative log-softmax of the reference action's logit;
//! * speaker: the negative log of the Bayes posterior the reference action
//!   gets under the action-conditioned LM — which both rewards the
//!   reference's LM score and penalizes every other candidate's, so
//!   gradients flow through all of them.
//!
//! Two supervision regimes are supported. `supervised` teacher-forces the
//! agent along the reference path and never lets it stray. `fidelity` rolls
//! the student's own policy, mixing in teacher actions with probability
//! 1 − η per step, and supervises every visited state: on-path states follow
//! the reference (with a multi-visit matching rule), off-path states chase a
//! temporal goal — the reference node nearest to the agent within a window
//! that grows with how long the agent has been away.
//!
//! Everything is deterministic given the config seed: batch shuffles and
//! per-episode mixing draws come from derived RNG streams, and batch
//! gradients are reduced in episode order no matter how many threads ran
//! the forward passes.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Episode, Flavor, Split};
use crate::error::{config_err, data_err, NavError, Result};
use crate::metrics::{rollout_and_evaluate, DEFAULT_SUCCESS_RADIUS};
use crate::models::{FollowerModel, HistoryState, ModelConfig, SpeakerModel};
use crate::ndgrad::optim::{accumulate, scale_grads, Adam, Checkpoint, GradMap, sgd_step};
use crate::ndgrad::{Tape, Tensor};
use crate::policies::{
    default_max_steps, ActionPosterior, DiscSelector, GenSelector, Trajectory,
};
use crate::seeds::derived_rng;
use crate::world::{
    action_embedding, shortest_dists, shortest_path, Action, ActionEmbedding, EnvGraph, NodeId,
};

/// Schema tag for training config files.
pub const CONFIG_SCHEMA: &str = "navgen-config/1";

/// Which model a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Follower,
    Speaker,
}

/// Parameter update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Supervision regime; see the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Teacher forcing along the reference path.
    Supervised,
    /// Student-forced rollouts with Bernoulli teacher mixing.
    Fidelity,
}

/// A full training run description. Serialized alongside checkpoints so
/// every artifact records how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub model: ModelKind,
    pub flavor: Flavor,
    pub supervision: Supervision,
    pub epochs: usize,
    /// Episodes per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Probability of taking the student's sampled action during fidelity
    /// training (the teacher acts with probability 1 − η).
    pub eta: f64,
    /// Generative/discriminative mixing weight recorded for downstream
    /// combined evaluation; training itself never reads it.
    pub beta: f64,
    pub seed: u64,
    /// Leading epochs that also train on the augmented split (then the run
    /// switches to original data only). 0 disables the phase split.
    pub phase1_epochs: usize,
    /// Decision budget per rollout; None picks the flavor default.
    pub max_steps: Option<usize>,
    /// Per-epoch validation cap: evaluate on this many val_seen episodes
    /// after each epoch (0 skips per-epoch validation).
    pub val_cap: usize,
    pub model_cfg: ModelConfig,
}

fn default_schema() -> String {
    CONFIG_SCHEMA.to_string()
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schema: default_schema(),
            model: ModelKind::Follower,
            flavor: Flavor::R2r,
            supervision: Supervision::Supervised,
            epochs: 3,
            batch_size: 16,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            eta: 1.0 / 3.0,
            beta: 0.5,
            seed: 7,
            phase1_epochs: 0,
            max_steps: None,
            val_cap: 0,
            model_cfg: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return data_err(format!("unknown config schema {:?}", self.schema));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return config_err("epochs and batch_size must be at least 1");
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return config_err(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return config_err(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return config_err(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if self.phase1_epochs > self.epochs {
            return config_err(format!(
                "phase 1 ({} epochs) cannot exceed the total ({})",
                self.phase1_epochs, self.epochs
            ));
        }
        if let Some(0) = self.max_steps {
            return config_err("max_steps must be at least 1");
        }
        self.model_cfg.validate()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| NavError::Data(format!("encoding train config: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| NavError::Data(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolved_max_steps(&self) -> usize {
        self.max_steps.unwrap_or_else(|| default_max_steps(self.flavor))
    }
}

/// Follower imitation loss at one decision: negative log-softmax of the
/// reference candidate's logit.
pub fn disc_loss(
    tape: &mut Tape,
    follower: &FollowerModel,
    hist: &HistoryState,
    instruction: Tensor,
    candidates: &[ActionEmbedding],
    ref_index: usize,
) -> Result<Tensor> {
    if ref_index >= candidates.len() {
        return config_err(format!(
            "reference index {ref_index} out of range for {} candidates",
            candidates.len()
        ));
    }
    let logits = follower.logits(tape, hist, instruction, candidates)?;
    tape.nll(logits, ref_index)
}

/// Speaker imitation loss at one decision: negative log of the reference
/// action's Bayes posterior, `−[lm_score(a*) − logsumexp_a lm_score(a)]`.
/// Because the normalizer sums over every candidate, gradients reward the
/// reference action's LM and penalize all the others.
pub fn gen_loss(
    tape: &mut Tape,
    speaker: &SpeakerModel,
    hist: &HistoryState,
    graph: &EnvGraph,
    node: NodeId,
    actions: &[Action],
    tokens: &[u32],
    ref_index: usize,
) -> Result<Tensor> {
    if actions.is_empty() || ref_index >= actions.len() {
        return config_err(format!(
            "reference index {ref_index} out of range for {} actions",
            actions.len()
        ));
    }
    let cand = speaker.candidate_matrix(tape, graph, node, actions)?;
    let batch = speaker.lm_scores_batched(tape, hist, cand, tokens)?;
    tape.nll(batch.scores, ref_index)
}

/// Shortest-path teacher: Stop within `at_goal_radius` of the goal
/// (default 0: the exact node), otherwise the first hop of a shortest path.
pub fn teacher_action_shortest(
    graph: &EnvGraph,
    current: NodeId,
    goal: NodeId,
    at_goal_radius: f64,
) -> Result<Action> {
    let (path, dist) = shortest_path(graph, current, goal)?;
    if dist <= at_goal_radius || path.len() < 2 {
        return Ok(Action::Stop);
    }
    Ok(Action::MoveTo(path[1]))
}

/// Rolling state for the fidelity teacher: where the agent is relative to
/// the reference path, how it has matched so far, and when it last touched
/// the path.
#[derive(Debug, Clone)]
pub struct TeacherContext {
    reference: Vec<NodeId>,
    /// node → indices of its occurrences in the reference.
    occurrences: std::collections::HashMap<NodeId, Vec<usize>>,
    /// node → how many times the agent has arrived there.
    visits: std::collections::HashMap<NodeId, usize>,
    /// Current node (last observed).
    current: Option<NodeId>,
    /// Arrivals so far minus one; the paper's t.
    time: usize,
    /// Reference index matched at the most recent on-path arrival (i) and
    /// when that happened (t′).
    last_match: usize,
    last_match_time: usize,
}

impl TeacherContext {
    pub fn new(reference: &[NodeId]) -> Result<TeacherContext> {
        if reference.is_empty() {
            return config_err("fidelity teacher needs a nonempty reference path");
        }
        let mut occurrences: std::collections::HashMap<NodeId, Vec<usize>> = Default::default();
        for (j, &r) in reference.iter().enumerate() {
            occurrences.entry(r).or_default().push(j);
        }
        Ok(TeacherContext {
            reference: reference.to_vec(),
            occurrences,
            visits: Default::default(),
            current: None,
            time: 0,
            last_match: 0,
            last_match_time: 0,
        })
    }

    /// Record an arrival (the start node counts as the first arrival).
    pub fn observe(&mut self, node: NodeId) {
        self.time = match self.current {
            None => 0,
            Some(_) => self.time + 1,
        };
        self.current = Some(node);
        let n = {
            let v = self.visits.entry(node).or_insert(0);
            *v += 1;
            *v
        };
        if let Some(idx) = self.occurrences.get(&node) {
            // Multi-visit matching: the n-th arrival at a node the
            // reference contains m times matches its n-th occurrence while
            // n < m, and stays pinned to the last occurrence afterwards.
            let m = idx.len();
            let matched = if n < m { n } else { m };
            self.last_match = idx[matched - 1];
            self.last_match_time = self.time;
        }
    }

    /// True when the current node lies on the reference path.
    pub fn on_path(&self) -> bool {
        self.current
            .map(|c| self.occurrences.contains_key(&c))
            .unwrap_or(false)
    }

    /// The reference action for the current state; see
    /// [`fidelity_reference_action`].
    pub fn action(&self, graph: &EnvGraph) -> Result<Action> {
        let current = self
            .current
            .ok_or(NavError::Config("teacher has observed no arrivals".to_string()))?;
        if self.on_path() {
            // Rule 1: continue along the reference from the matched index.
            let j = self.last_match;
            return Ok(if j + 1 < self.reference.len() {
                Action::MoveTo(self.reference[j + 1])
            } else {
                Action::Stop
            });
        }
        // Rule 2: chase the temporal goal — the nearest reference node in
        // the window starting at the last matched index and extending one
        // slot per step spent off the path (earliest index on ties).
        let window_end = (self.last_match + (self.time - self.last_match_time))
            .min(self.reference.len() - 1);
        let dists = shortest_dists(graph, current)?;
        let mut goal = self.reference[self.last_match];
        let mut best = f64::INFINITY;
        for &r in &self.reference[self.last_match..=window_end] {
            let d = dists[r as usize];
            if d < best {
                best = d;
                goal = r;
            }
        }
        let (path, _) = shortest_path(graph, current, goal)?;
        if path.len() < 2 {
            // Unreachable for a connected graph with current ∉ R, but keep
            // the degenerate answer meaningful.
            return Ok(Action::Stop);
        }
        Ok(Action::MoveTo(path[1]))
    }
}

/// The fidelity-oriented teacher action: follow the reference when on it,
/// head for the temporal goal when off it.
pub fn fidelity_reference_action(graph: &EnvGraph, ctx: &TeacherContext) -> Result<Action> {
    ctx.action(graph)
}

/// Blend teacher and student: draw δ ~ Bernoulli(η); on δ = 1 sample from
/// the student's distribution, otherwise take the teacher's action.
pub fn mix_next_action(
    teacher: Action,
    student: &ActionPosterior,
    eta: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Action> {
    if !(0.0..=1.0).contains(&eta) {
        return config_err(format!("eta must lie in [0, 1], got {eta}"));
    }
    if rng.gen_bool(eta) {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for (action, p) in student.actions.iter().zip(&student.probs) {
            cum += p;
            if u < cum {
                return Ok(*action);
            }
        }
        // Rounding left u beyond the last cumulative bucket.
        Ok(*student.actions.last().unwrap())
    } else {
        Ok(teacher)
    }
}

/// The trained weights, by kind.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Follower(FollowerModel),
    Speaker(SpeakerModel),
}

impl TrainedModel {
    /// Stamp a checkpoint with the full training config.
    pub fn to_checkpoint(&self, cfg: &TrainConfig, vocab_hash: &str) -> Result<Checkpoint> {
        let config = serde_json::to_value(cfg)
            .map_err(|e| NavError::Data(format!("encoding train config: {e}")))?;
        Ok(match self {
            TrainedModel::Follower(m) => {
                Checkpoint::from_store(crate::models::FOLLOWER_KIND, config, vocab_hash, &m.params)
            }
            TrainedModel::Speaker(m) => {
                Checkpoint::from_store(crate::models::SPEAKER_KIND, config, vocab_hash, &m.params)
            }
        })
    }
}

/// One epoch's summary. Every field is deterministic given the config, so
/// training logs can be compared byte-for-byte across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// 1 while the augmented split is in the mix, 2 afterwards.
    pub phase: u8,
    /// Episodes trained on this epoch.
    pub episodes: usize,
    /// Mean per-decision loss across the epoch.
    pub mean_loss: f64,
    /// Success rate on the capped validation slice, when enabled.
    pub val_sr: Option<f64>,
    /// Mean nDTW on the capped validation slice, when enabled.
    pub val_ndtw: Option<f64>,
}

/// A finished run: final weights plus the per-epoch log.
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: Vec<EpochRecord>,
}

/// Write the per-epoch log as line-delimited JSON.
pub fn save_train_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in log {
        serde_json::to_writer(&mut out, rec)
            .map_err(|e| NavError::Data(format!("encoding train log: {e}")))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Per-episode forward/backward result.
struct EpisodePass {
    /// Mean per-decision loss.
    loss: f64,
    grads: GradMap,
    decisions: usize,
}

/// Where the supervised walk visits and what it pays there.
fn check_compatible(cfg: &TrainConfig, dataset: &Dataset) -> Result<()> {
    let (_, graph) = dataset
        .worlds
        .first()
        .ok_or(NavError::Data("dataset has no worlds".to_string()))?;
    let d_v = graph.node(0)?.visual_feature.len();
    if d_v != cfg.model_cfg.d_v {
        return config_err(format!(
            "model d_v {} does not match world feature width {d_v}",
            cfg.model_cfg.d_v
        ));
    }
    let vocab = crate::instructions::build_vocab().len();
    if vocab != cfg.model_cfg.vocab {
        return config_err(format!(
            "model vocab {} does not match tokenizer vocab {vocab}",
            cfg.model_cfg.vocab
        ));
    }
    Ok(())
}

/// Teacher-forced pass: walk the reference path, paying the imitation loss
/// at every decision (each hop plus the final Stop).
fn supervised_pass(
    follower: Option<&FollowerModel>,
    speaker: Option<&SpeakerModel>,
    graph: &EnvGraph,
    episode: &Episode,
) -> Result<EpisodePass> {
    if follower.is_none() {
        if let Some(s) = speaker {
            return supervised_speaker_pass(s, graph, episode);
        }
    }
    let reference = &episode.reference_path;
    let tokens = &episode.instruction.tokens;
    let mut tape = Tape::new();
    let zeros = vec![0.0; graph.node(reference[0])?.visual_feature.len()];

    let Some(f) = follower else {
        return config_err("supervised pass needs a model");
    };
    let enc = f.encode_instruction(&mut tape, tokens)?;
    let first_obs = vec![graph.node(reference[0])?.visual_feature.clone()];
    let mut hist = f.encode_history(&mut tape, &first_obs, &[])?;

    let mut losses = Vec::with_capacity(reference.len());
    for (j, &node) in reference.iter().enumerate() {
        let actions = graph.candidate_actions(node)?;
        let ref_index = teacher_index(&actions, reference, j)?;
        let (_, embeddings) = f.candidates(graph, node)?;
        losses.push(disc_loss(&mut tape, f, &hist, enc, &embeddings, ref_index)?);
        if j + 1 < reference.len() {
            let next = reference[j + 1];
            let emb = action_embedding(graph, node, Action::MoveTo(next), &zeros)?;
            let visual = graph.node(next)?.visual_feature.clone();
            hist = f.history_step(&mut tape, &hist, &visual, &emb)?;
        }
    }
    finish_pass(tape, losses)
}

/// The teacher's action index along a reference path: the next reference
/// node, or Stop at the end.
fn teacher_index(actions: &[Action], reference: &[NodeId], j: usize) -> Result<usize> {
    let teacher = if j + 1 < reference.len() {
        Action::MoveTo(reference[j + 1])
    } else {
        Action::Stop
    };
    actions
        .iter()
        .position(|&a| a == teacher)
        .ok_or_else(|| NavError::IllegalAction(format!("teacher action {teacher} not a candidate")))
}

/// Mean the per-decision losses, backpropagate, and package the gradients.
fn finish_pass(mut tape: Tape, losses: Vec<Tensor>) -> Result<EpisodePass> {
    let stacked = tape.concat1(&losses)?;
    let total = tape.mean(stacked)?;
    let loss = tape.value(total).item()?;
    tape.backward(total)?;
    Ok(EpisodePass { loss, grads: tape.param_grads(), decisions: losses.len() })
}

/// Teacher forcing for the speaker, all decisions scored in one stacked LM
/// walk: per decision the loss is still the negative log posterior of the
/// teacher's action, but the instruction is processed once per episode
/// rather than once per decision.
fn supervised_speaker_pass(
    s: &SpeakerModel,
    graph: &EnvGraph,
    episode: &Episode,
) -> Result<EpisodePass> {
    let reference = &episode.reference_path;
    let tokens = &episode.instruction.tokens;
    let mut tape = Tape::new();
    let zeros = vec![0.0; graph.node(reference[0])?.visual_feature.len()];

    let first_obs = vec![graph.node(reference[0])?.visual_feature.clone()];
    let mut hist = s.encode_history(&mut tape, &first_obs, &[])?;
    let mut hists = Vec::with_capacity(reference.len());
    let mut cands = Vec::with_capacity(reference.len());
    let mut refs = Vec::with_capacity(reference.len());
    for (j, &node) in reference.iter().enumerate() {
        let actions = graph.candidate_actions(node)?;
        refs.push(teacher_index(&actions, reference, j)?);
        let rows = actions
            .iter()
            .map(|&a| s.candidate_tensor(&mut tape, graph, node, a))
            .collect::<Result<Vec<_>>>()?;
        cands.push(rows);
        hists.push(hist.clone());
        if j + 1 < reference.len() {
            let next = reference[j + 1];
            let emb = action_embedding(graph, node, Action::MoveTo(next), &zeros)?;
            let visual = graph.node(next)?.visual_feature.clone();
            hist = s.history_step(&mut tape, &hist, &visual, &emb)?;
        }
    }
    let trail = s.lm_scores_trail(&mut tape, &hists, &cands, tokens)?;
    let losses = decision_losses(&mut tape, &trail, &refs)?;
    finish_pass(tape, losses)
}

/// Per-decision negative log posteriors from stacked trail scores.
fn decision_losses(tape: &mut Tape, trail: &TrailScores, refs: &[usize]) -> Result<Vec<Tensor>> {
    trail
        .ranges
        .iter()
        .zip(refs)
        .map(|(&(start, end), &ref_index)| {
            let logits = tape.slice1(trail.scores, start, end - start)?;
            tape.nll(logits, ref_index)
        })
        .collect()
}

/// Student-forced pass: roll the mixed policy, supervising every visited
/// state against the flavor's teacher.
#[allow(clippy::too_many_arguments)]
fn fidelity_pass(
    follower: Option<&FollowerModel>,
    speaker: Option<&SpeakerModel>,
    graph: &EnvGraph,
    episode: &Episode,
    flavor: Flavor,
    eta: f64,
    max_steps: usize,
    rng: &mut ChaCha12Rng,
) -> Result<EpisodePass> {
    let tokens = &episode.instruction.tokens;
    let mut tape = Tape::new();
    let zeros = vec![0.0; graph.node(episode.start)?.visual_feature.len()];

    let enc = match follower {
        Some(f) => Some(f.encode_instruction(&mut tape, tokens)?),
        None => None,
    };
    let first_obs = vec![graph.node(episode.start)?.visual_feature.clone()];
    let mut hist = match (follower, speaker) {
        (Some(f), _) => f.encode_history(&mut tape, &first_obs, &[])?,
        (_, Some(s)) => s.encode_history(&mut tape, &first_obs, &[])?,
        _ => return config_err("fidelity pass needs a model"),
    };
    let mut teacher_ctx = TeacherContext::new(&episode.reference_path)?;
    teacher_ctx.observe(episode.start);

    let mut node = episode.start;
    let mut losses = Vec::new();
    for _ in 0..max_steps {
        let actions = graph.candidate_actions(node)?;
        let teacher = match flavor {
            // Joined paths supervise fidelity to the reference; plain ones
            // drive straight for the goal.
            Flavor::R4r => fidelity_reference_action(graph, &teacher_ctx)?,
            _ => teacher_action_shortest(graph, node, episode.goal, 0.0)?,
        };
        let ref_index = actions
            .iter()
            .position(|&a| a == teacher)
            .ok_or_else(|| NavError::IllegalAction(format!("teacher action {teacher} not a candidate")))?;

        // Loss on the tape, student distribution from its values.
        let (loss, student_scores) = match (follower, speaker) {
            (Some(f), _) => {
                let (_, embeddings) = f.candidates(graph, node)?;
                let logits = f.logits(&mut tape, &hist, enc.unwrap(), &embeddings)?;
                let logp = tape.log_softmax(logits)?;
                let scores = tape.value(logp).data().to_vec();
                let loss = tape.nll(logits, ref_index)?;
                (loss, scores)
            }
            (_, Some(s)) => {
                let cand = s.candidate_matrix(&mut tape, graph, node, &actions)?;
                let batch = s.lm_scores_batched(&mut tape, &hist, cand, tokens)?;
                let scores = tape.value(batch.scores).data().to_vec();
                let loss = tape.nll(batch.scores, ref_index)?;
                (loss, scores)
            }
            _ => unreachable!(),
        };
        losses.push(loss);

        let student = ActionPosterior::from_scores(actions.clone(), student_scores)?;
        let next = mix_next_action(teacher, &student, eta, rng)?;
        match next {
            Action::Stop => break,
            Action::MoveTo(v) => {
                let emb = action_embedding(graph, node, next, &zeros)?;
                let visual = graph.node(v)?.visual_feature.clone();
                hist = match (follower, speaker) {
                    (Some(f), _) => f.history_step(&mut tape, &hist, &visual, &emb)?,
                    (_, Some(s)) => s.history_step(&mut tape, &hist, &visual, &emb)?,
                    _ => unreachable!(),
                };
                node = v;
                teacher_ctx.observe(v);
            }
        }
    }
    let stacked = tape.concat1(&losses)?;
    let total = tape.mean(stacked)?;
    let loss = tape.value(total).item()?;
    tape.backward(total)?;
    Ok(EpisodePass { loss, grads: tape.param_grads(), decisions: losses.len() })
}

/// Run the full training loop described by `cfg` on `dataset`, starting
/// from a fresh seed-initialized model.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_from(cfg, dataset, None)
}

/// Like [`train`], but optionally continuing from an existing model — the
/// usual shape for curricula that warm up with teacher forcing before
/// switching to student-forced rollouts. Optimizer state starts fresh.
pub fn train_from(
    cfg: &TrainConfig,
    dataset: &Dataset,
    start: Option<TrainedModel>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(cfg, dataset)?;

    let (mut follower, mut speaker) = match (cfg.model, start) {
        (ModelKind::Follower, None) => {
            (Some(FollowerModel::init(&cfg.model_cfg, cfg.seed)?), None)
        }
        (ModelKind::Speaker, None) => {
            (None, Some(SpeakerModel::init(&cfg.model_cfg, cfg.seed)?))
        }
        (ModelKind::Follower, Some(TrainedModel::Follower(m))) => (Some(m), None),
        (ModelKind::Speaker, Some(TrainedModel::Speaker(m))) => (None, Some(m)),
        (kind, Some(_)) => {
            return Err(NavError::Config(format!(
                "initial model does not match the configured kind {kind:?}"
            )))
        }
    };

    let original: Vec<Episode> = dataset
        .select(cfg.flavor, Split::Train)
        .into_iter()
        .cloned()
        .collect();
    if original.is_empty() {
        return data_err(format!("no {} training episodes in the dataset", cfg.flavor.as_str()));
    }
    let augmented: Vec<Episode> = if cfg.phase1_epochs > 0 {
        dataset
            .select(Flavor::Augmented, Split::Train)
            .into_iter()
            .cloned()
            .collect()
    } else {
        Vec::new()
    };
    if cfg.phase1_epochs > 0 && augmented.is_empty() {
        return data_err("phase 1 requested but the dataset has no augmented episodes");
    }

    let val: Vec<Episode> = if cfg.val_cap > 0 {
        dataset
            .select(cfg.flavor, Split::ValSeen)
            .into_iter()
            .take(cfg.val_cap)
            .cloned()
            .collect()
    } else {
        Vec::new()
    };

    let max_steps = cfg.resolved_max_steps();
    let mut adam = Adam::new(cfg.lr)?;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let phase1 = epoch < cfg.phase1_epochs;
        let mut pool: Vec<&Episode> = original.iter().collect();
        if phase1 {
            pool.extend(augmented.iter());
        }
        // Deterministic Fisher–Yates shuffle per epoch.
        let mut shuffle_rng = derived_rng(cfg.seed, &format!("shuffle:{epoch}"));
        for i in (1..pool.len()).rev() {
            pool.swap(i, shuffle_rng.gen_range(0..=i));
        }

        let mut loss_sum = 0.0;
        let mut decision_count = 0usize;
        for batch in pool.chunks(cfg.batch_size) {
            let passes = crate::par::ordered_map(batch, |episode| -> Result<EpisodePass> {
                let graph = dataset.world(&episode.env_id)?;
                match cfg.supervision {
                    Supervision::Supervised => {
                        supervised_pass(follower.as_ref(), speaker.as_ref(), graph, episode)
                    }
                    Supervision::Fidelity => {
                        let mut rng = derived_rng(
                            cfg.seed,
                            &format!("mix:{epoch}:{}", episode.episode_id),
                        );
                        fidelity_pass(
                            follower.as_ref(),
                            speaker.as_ref(),
                            graph,
                            episode,
                            cfg.flavor,
                            cfg.eta,
                            max_steps,
                            &mut rng,
                        )
                    }
                }
            });
            let mut batch_grads = GradMap::default();
            let mut n = 0usize;
            for pass in passes {
                let pass = pass?;
                loss_sum += pass.loss * pass.decisions as f64;
                decision_count += pass.decisions;
                accumulate(&mut batch_grads, &pass.grads)?;
                n += 1;
            }
            scale_grads(&mut batch_grads, 1.0 / n as f64);
            let store = match (&mut follower, &mut speaker) {
                (Some(f), _) => &mut f.params,
                (_, Some(s)) => &mut s.params,
                _ => unreachable!(),
            };
            match cfg.optimizer {
                OptimizerKind::Adam => adam.step(store, &batch_grads)?,
                OptimizerKind::Sgd => sgd_step(store, &batch_grads, cfg.lr)?,
            }
        }

        let mean_loss = loss_sum / decision_count.max(1) as f64;
        let (val_sr, val_ndtw) = if val.is_empty() {
            (None, None)
        } else {
            let report = match (&follower, &speaker) {
                (Some(f), _) => {
                    rollout_and_evaluate(
                        || DiscSelector { follower: f },
                        dataset,
                        &val,
                        max_steps,
                        DEFAULT_SUCCESS_RADIUS,
                    )?
                    .1
                }
                (_, Some(s)) => {
                    rollout_and_evaluate(
                        || GenSelector { speaker: s },
                        dataset,
                        &val,
                        max_steps,
                        DEFAULT_SUCCESS_RADIUS,
                    )?
                    .1
                }
                _ => unreachable!(),
            };
            (Some(report.mean.sr), Some(report.mean.ndtw))
        };
        log.push(EpochRecord {
            epoch,
            phase: if phase1 { 1 } else { 2 },
            episodes: pool.len(),
            mean_loss,
            val_sr,
            val_ndtw,
        });
        eprintln!(
            "epoch {epoch}: loss {mean_loss:.4}{}",
            match val_sr {
                Some(sr) => format!(", val SR {sr:.3}"),
                None => String::new(),
            }
        );
    }

    let model = match (follower, speaker) {
        (Some(f), _) => TrainedModel::Follower(f),
        (_, Some(s)) => TrainedModel::Speaker(s),
        _ => unreachable!(),
    };
    Ok(TrainOutcome { model, log })
}

/// Greedy evaluation rollouts for a trained model on an episode list;
/// convenience shared by the CLI and tests.
pub fn evaluate_policy(
    model: &TrainedModel,
    dataset: &Dataset,
    episodes: &[Episode],
    max_steps: usize,
) -> Result<(Vec<Trajectory>, crate::metrics::MetricsReport)> {
    match model {
        TrainedModel::Follower(f) => rollout_and_evaluate(
            || DiscSelector { follower: f },
            dataset,
            episodes,
            max_steps,
            DEFAULT_SUCCESS_RADIUS,
        ),
        TrainedModel::Speaker(s) => rollout_and_evaluate(
            || GenSelector { speaker: s },
            dataset,
            episodes,
            max_steps,
            DEFAULT_SUCCESS_RADIUS,
        ),
    }
}
