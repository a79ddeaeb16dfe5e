//! Turning model scores into actions.
//!
//! Three model-backed policies share one shape: score every candidate action
//! at the current node, then take the argmax (ties go to the lowest index,
//! so runs are reproducible).
//!
//! * discriminative — log-softmax of the follower's logits;
//! * generative — rank actions by how well the speaker's LM explains the
//!   full instruction conditioned on each action (a Bayes posterior over
//!   actions under a uniform prior);
//! * combined — `β · lm_score + (1−β) · log p_follower`.
//!
//! [`rollout`] runs a policy greedily: one pass, no beam, no lookahead.
//! [`backtracking_rollout`] wraps any selector with revisit-triggered
//! backtracking: when the agent arrives at a node it has already visited, it
//! walks back to the most promising earlier decision point and tries that
//! node's next-best action instead.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Episode;
use crate::error::{config_err, data_err, NavError, Result};
use crate::models::{FollowerModel, SpeakerModel};
use crate::ndgrad::Tape;
use crate::world::{action_embedding, shortest_path, Action, ActionEmbedding, EnvGraph, NodeId};

/// Schema tag stamped on every serialized trajectory record.
pub const TRAJ_SCHEMA: &str = "navgen-traj/1";

/// Default decision budgets per episode flavor: roughly 2× the longest
/// reference path, so an agent that wanders still has room to recover.
pub const MAX_STEPS_SHORT: usize = 20;
pub const MAX_STEPS_JOINED: usize = 40;

/// A probability distribution over one step's candidate actions, along with
/// the raw log-scores it was normalized from.
#[derive(Debug, Clone)]
pub struct ActionPosterior {
    /// Candidates in the graph's canonical order (moves by ascending
    /// neighbor id, then Stop).
    pub actions: Vec<Action>,
    /// Normalized probabilities; nonnegative, sums to 1.
    pub probs: Vec<f64>,
    /// The unnormalized per-action log-scores the policy ranks by.
    pub log_scores: Vec<f64>,
}

impl ActionPosterior {
    /// Normalize raw log-scores into a distribution (softmax with
    /// max-subtraction, then an exact renormalization).
    pub fn from_scores(actions: Vec<Action>, log_scores: Vec<f64>) -> Result<ActionPosterior> {
        if actions.is_empty() || actions.len() != log_scores.len() {
            return config_err(format!(
                "posterior needs matching nonempty actions and scores, got {} and {}",
                actions.len(),
                log_scores.len()
            ));
        }
        if log_scores.iter().any(|s| !s.is_finite()) {
            return data_err("non-finite action score");
        }
        let m = log_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = log_scores.iter().map(|s| (s - m).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }
        Ok(ActionPosterior { actions, probs, log_scores })
    }

    /// Index of the highest-scoring action; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax_lowest(&self.log_scores, None).expect("posterior is nonempty")
    }
}

/// One finished navigation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schema: String,
    pub episode_id: String,
    /// Every node the agent physically occupied, in order, including
    /// revisits and backtracking motion.
    pub nodes: Vec<NodeId>,
    /// Every motion taken (walks included), plus a final Stop when the agent
    /// chose to stop.
    pub actions: Vec<Action>,
    /// True when the agent stopped by choice rather than running out of
    /// steps.
    pub stopped: bool,
    /// Number of selector decisions made (≤ the max_steps budget).
    pub steps: usize,
}

impl Trajectory {
    /// Check internal consistency against the world: consecutive nodes must
    /// be adjacent and actions must describe exactly the recorded motion.
    pub fn validate(&self, graph: &EnvGraph) -> Result<()> {
        if self.schema != TRAJ_SCHEMA {
            return data_err(format!("unknown trajectory schema {:?}", self.schema));
        }
        if self.nodes.is_empty() {
            return data_err(format!("trajectory {} has no nodes", self.episode_id));
        }
        let moves: Vec<NodeId> = self
            .actions
            .iter()
            .filter_map(|a| match a {
                Action::MoveTo(v) => Some(*v),
                Action::Stop => None,
            })
            .collect();
        if moves.len() != self.nodes.len() - 1 {
            return data_err(format!(
                "trajectory {} has {} moves for {} nodes",
                self.episode_id,
                moves.len(),
                self.nodes.len()
            ));
        }
        let stops = self.actions.iter().filter(|a| **a == Action::Stop).count();
        let stop_ok = match (self.stopped, stops) {
            (true, 1) => self.actions.last() == Some(&Action::Stop),
            (false, 0) => true,
            _ => false,
        };
        if !stop_ok {
            return data_err(format!(
                "trajectory {}: stop flag and actions disagree",
                self.episode_id
            ));
        }
        for (i, &v) in moves.iter().enumerate() {
            if v != self.nodes[i + 1] {
                return data_err(format!(
                    "trajectory {}: action {i} moves to {v} but node {} follows",
                    self.episode_id,
                    self.nodes[i + 1]
                ));
            }
            if graph.edge_length(self.nodes[i], v).is_none() {
                return data_err(format!(
                    "trajectory {}: nodes {} and {v} are not adjacent",
                    self.episode_id, self.nodes[i]
                ));
            }
        }
        Ok(())
    }
}

/// Everything a selector may look at when scoring one step. `trail` is the
/// agent's belief history — after a backtrack it is the resumed prefix, not
/// the full physical path.
pub struct StepContext<'a> {
    pub graph: &'a EnvGraph,
    pub episode: &'a Episode,
    /// Nodes the agent believes it has traversed, ending at the current node.
    pub trail: &'a [NodeId],
    /// Candidate actions at the current node, canonical order.
    pub actions: &'a [Action],
    /// Decisions made so far.
    pub step: usize,
}

impl StepContext<'_> {
    pub fn node(&self) -> NodeId {
        *self.trail.last().expect("trail is never empty")
    }
}

/// A policy: per-step log-scores over candidate actions. Higher is better;
/// scores need not be normalized. Selectors may keep caches, hence `&mut`.
pub trait ActionSelector {
    fn log_scores(&mut self, ctx: &StepContext) -> Result<Vec<f64>>;
}

/// History-encoder inputs for a node trail: per-node visual features plus
/// the move embeddings between consecutive nodes.
pub fn history_inputs(
    graph: &EnvGraph,
    trail: &[NodeId],
) -> Result<(Vec<Vec<f64>>, Vec<ActionEmbedding>)> {
    if trail.is_empty() {
        return config_err("history requires at least the start node");
    }
    let d_v = graph.node(trail[0])?.visual_feature.len();
    let zeros = vec![0.0; d_v];
    let mut observations = Vec::with_capacity(trail.len());
    for &v in trail {
        observations.push(graph.node(v)?.visual_feature.clone());
    }
    let mut moves = Vec::with_capacity(trail.len().saturating_sub(1));
    for w in trail.windows(2) {
        moves.push(action_embedding(graph, w[0], Action::MoveTo(w[1]), &zeros)?);
    }
    Ok((observations, moves))
}

/// Follower log-probabilities over the candidates at the end of `trail`.
fn follower_log_probs(
    follower: &FollowerModel,
    graph: &EnvGraph,
    tokens: &[u32],
    trail: &[NodeId],
) -> Result<(Vec<Action>, Vec<f64>)> {
    let mut tape = Tape::new();
    let enc = follower.encode_instruction(&mut tape, tokens)?;
    let (obs, moves) = history_inputs(graph, trail)?;
    let hist = follower.encode_history(&mut tape, &obs, &moves)?;
    let node = *trail.last().expect("trail is never empty");
    let (actions, embeddings) = follower.candidates(graph, node)?;
    let logits = follower.logits(&mut tape, &hist, enc, &embeddings)?;
    let logp = tape.log_softmax(logits)?;
    Ok((actions, tape.value(logp).data().to_vec()))
}

/// Speaker LM scores (log p(instruction | action, history)) for every
/// candidate at the end of `trail`.
fn speaker_scores(
    speaker: &SpeakerModel,
    graph: &EnvGraph,
    tokens: &[u32],
    trail: &[NodeId],
) -> Result<(Vec<Action>, Vec<f64>)> {
    let mut tape = Tape::new();
    let (obs, moves) = history_inputs(graph, trail)?;
    let hist = speaker.encode_history(&mut tape, &obs, &moves)?;
    let node = *trail.last().expect("trail is never empty");
    let actions = graph.candidate_actions(node)?;
    let cand = speaker.candidate_matrix(&mut tape, graph, node, &actions)?;
    let batch = speaker.lm_scores_batched(&mut tape, &hist, cand, tokens)?;
    Ok((actions, tape.value(batch.scores).data().to_vec()))
}

/// Distribution over actions from the follower alone.
pub fn disc_action_dist(
    follower: &FollowerModel,
    graph: &EnvGraph,
    tokens: &[u32],
    trail: &[NodeId],
) -> Result<ActionPosterior> {
    let (actions, scores) = follower_log_probs(follower, graph, tokens, trail)?;
    ActionPosterior::from_scores(actions, scores)
}

/// Bayes posterior over actions from the speaker alone: normalize the
/// per-action LM scores (uniform action prior, so the evidence term is just
/// a logsumexp over candidates).
pub fn gen_action_posterior(
    speaker: &SpeakerModel,
    graph: &EnvGraph,
    tokens: &[u32],
    trail: &[NodeId],
) -> Result<ActionPosterior> {
    let (actions, scores) = speaker_scores(speaker, graph, tokens, trail)?;
    ActionPosterior::from_scores(actions, scores)
}

/// The generative policy's choice: the action whose conditioned LM best
/// explains the instruction.
pub fn gen_select(
    speaker: &SpeakerModel,
    graph: &EnvGraph,
    tokens: &[u32],
    trail: &[NodeId],
) -> Result<Action> {
    let post = gen_action_posterior(speaker, graph, tokens, trail)?;
    Ok(post.actions[post.argmax()])
}

/// The combined policy's choice: argmax of
/// `β · lm_score + (1−β) · log p_follower`.
pub fn combined_select(
    speaker: &SpeakerModel,
    follower: &FollowerModel,
    graph: &EnvGraph,
    tokens: &[u32],
    trail: &[NodeId],
    beta: f64,
) -> Result<Action> {
    let scores = combined_scores(speaker, follower, graph, tokens, trail, beta)?;
    let actions = graph.candidate_actions(*trail.last().expect("trail is never empty"))?;
    Ok(actions[argmax_lowest(&scores, None)?])
}

fn combined_scores(
    speaker: &SpeakerModel,
    follower: &FollowerModel,
    graph: &EnvGraph,
    tokens: &[u32],
    trail: &[NodeId],
    beta: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&beta) {
        return config_err(format!("beta must lie in [0, 1], got {beta}"));
    }
    let (_, lm) = speaker_scores(speaker, graph, tokens, trail)?;
    let (_, disc) = follower_log_probs(follower, graph, tokens, trail)?;
    Ok(lm
        .iter()
        .zip(&disc)
        .map(|(l, d)| beta * l + (1.0 - beta) * d)
        .collect())
}

/// Follower-only selector.
pub struct DiscSelector<'m> {
    pub follower: &'m FollowerModel,
}

impl ActionSelector for DiscSelector<'_> {
    fn log_scores(&mut self, ctx: &StepContext) -> Result<Vec<f64>> {
        let (_, scores) = follower_log_probs(
            self.follower,
            ctx.graph,
            &ctx.episode.instruction.tokens,
            ctx.trail,
        )?;
        Ok(scores)
    }
}

/// Speaker-only selector.
pub struct GenSelector<'m> {
    pub speaker: &'m SpeakerModel,
}

impl ActionSelector for GenSelector<'_> {
    fn log_scores(&mut self, ctx: &StepContext) -> Result<Vec<f64>> {
        let (_, scores) = speaker_scores(
            self.speaker,
            ctx.graph,
            &ctx.episode.instruction.tokens,
            ctx.trail,
        )?;
        Ok(scores)
    }
}

/// β-combined selector.
pub struct CombinedSelector<'m> {
    pub speaker: &'m SpeakerModel,
    pub follower: &'m FollowerModel,
    pub beta: f64,
}

impl ActionSelector for CombinedSelector<'_> {
    fn log_scores(&mut self, ctx: &StepContext) -> Result<Vec<f64>> {
        combined_scores(
            self.speaker,
            self.follower,
            ctx.graph,
            &ctx.episode.instruction.tokens,
            ctx.trail,
            self.beta,
        )
    }
}

/// Test-and-teacher selector that walks the episode's reference path and
/// stops at its end. Off the path (which only happens if something else
/// moved the agent), it heads back toward the next reference node.
pub struct OracleSelector;

impl ActionSelector for OracleSelector {
    fn log_scores(&mut self, ctx: &StepContext) -> Result<Vec<f64>> {
        let reference = &ctx.episode.reference_path;
        let node = ctx.node();
        let pos = reference.iter().position(|&r| r == node);
        let want = match pos {
            Some(i) if i + 1 < reference.len() => Action::MoveTo(reference[i + 1]),
            Some(_) => Action::Stop,
            None => {
                // Walk toward the goal; the first hop of a shortest path.
                let (path, _) = shortest_path(ctx.graph, node, *reference.last().unwrap())?;
                Action::MoveTo(path[1])
            }
        };
        Ok(ctx
            .actions
            .iter()
            .map(|&a| if a == want { 0.0 } else { -50.0 })
            .collect())
    }
}

/// Argmax with ties going to the lowest index; `skip` masks one index out
/// (used by backtracking to forbid a previously taken action).
fn argmax_lowest(scores: &[f64], skip: Option<usize>) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        if !s.is_finite() {
            return data_err(format!("non-finite action score {s} at index {i}"));
        }
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    match best {
        Some((i, _)) => Ok(i),
        None => config_err("no selectable action"),
    }
}

/// Log-probability of the chosen index under a softmax over the raw scores
/// (max-subtracted logsumexp).
fn chosen_log_prob(scores: &[f64], choice: usize) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    scores[choice] - lse
}

/// Run a selector greedily from the episode's start: one decision per step,
/// terminating on Stop or after `max_steps` decisions (then a forced stop at
/// the current node, recorded in the `stopped` flag).
pub fn rollout<S: ActionSelector>(
    selector: &mut S,
    graph: &EnvGraph,
    episode: &Episode,
    max_steps: usize,
) -> Result<Trajectory> {
    if max_steps == 0 {
        return config_err("max_steps must be at least 1");
    }
    let mut trail = vec![episode.start];
    let mut actions_taken = Vec::new();
    let mut stopped = false;
    let mut steps = 0;
    while steps < max_steps {
        let candidates = graph.candidate_actions(*trail.last().unwrap())?;
        let ctx = StepContext {
            graph,
            episode,
            trail: &trail,
            actions: &candidates,
            step: steps,
        };
        let scores = selector.log_scores(&ctx)?;
        if scores.len() != candidates.len() {
            return data_err(format!(
                "selector returned {} scores for {} candidates",
                scores.len(),
                candidates.len()
            ));
        }
        let choice = argmax_lowest(&scores, None)?;
        steps += 1;
        match candidates[choice] {
            Action::Stop => {
                actions_taken.push(Action::Stop);
                stopped = true;
                break;
            }
            Action::MoveTo(v) => {
                actions_taken.push(Action::MoveTo(v));
                trail.push(v);
            }
        }
    }
    Ok(Trajectory {
        schema: TRAJ_SCHEMA.to_string(),
        episode_id: episode.episode_id.clone(),
        nodes: trail,
        actions: actions_taken,
        stopped,
        steps,
    })
}

/// Knobs for the backtracking wrapper. The defaults are what the evaluation
/// uses; the struct exists so each rule can be ablated independently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BacktrackRules {
    /// Remove a snapshot once the agent has resumed from it.
    pub consume_snapshot: bool,
    /// At the resume node, mask out the action that was chosen there before.
    pub forbid_previous_action: bool,
    /// Count return-walk motion toward the revisit trigger. Off by default:
    /// corrective motion re-crosses old ground by design.
    pub count_walk_visits: bool,
}

impl Default for BacktrackRules {
    fn default() -> Self {
        BacktrackRules {
            consume_snapshot: true,
            forbid_previous_action: true,
            count_walk_visits: false,
        }
    }
}

/// One decision point the agent can later return to.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub node: NodeId,
    /// Decision counter when the snapshot was taken.
    pub step: usize,
    /// Sum of chosen-action log-probabilities along the trail to this point.
    /// Closer to zero means the path here was higher-confidence.
    pub score: f64,
    /// The believed trail at the decision point (used to restore state).
    trail: Vec<NodeId>,
    /// Index of the action chosen here originally (to forbid on resume).
    chosen: usize,
}

/// Bookkeeping that the backtracking wrapper exposes for inspection.
#[derive(Debug, Clone, Default)]
pub struct BacktrackState {
    /// Physical arrivals per node (walk motion excluded by default).
    pub visit_counts: HashMap<NodeId, usize>,
    /// Remaining decision points the agent may resume from.
    pub snapshots: Vec<Snapshot>,
    /// True once the revisit trigger has fired at least once.
    pub triggered: bool,
    /// Steps at which a backtrack happened.
    pub backtrack_steps: Vec<usize>,
}

/// Resume preference: maximize −1/ℓ where ℓ ≤ 0 is the snapshot's
/// accumulated chosen log-probability. ℓ = 0 (an empty prefix) is treated as
/// maximal confidence.
fn resume_score(l: f64) -> f64 {
    if l == 0.0 {
        f64::INFINITY
    } else {
        -1.0 / l
    }
}

/// Like [`rollout`], but when the agent arrives at an already-visited node
/// it walks back (shortest path, motion appended to the trajectory) to the
/// remaining snapshot with the best resume score, masks the action it took
/// there last time, and continues from that snapshot's state.
pub fn backtracking_rollout<S: ActionSelector>(
    selector: &mut S,
    graph: &EnvGraph,
    episode: &Episode,
    max_steps: usize,
    rules: &BacktrackRules,
) -> Result<(Trajectory, BacktrackState)> {
    if max_steps == 0 {
        return config_err("max_steps must be at least 1");
    }
    let mut state = BacktrackState::default();
    // The agent's believed trail; diverges from physical `nodes` once a
    // backtrack rewinds it.
    let mut trail = vec![episode.start];
    let mut nodes = vec![episode.start];
    let mut actions_taken: Vec<Action> = Vec::new();
    let mut stopped = false;
    let mut steps = 0;
    let mut acc_log_prob = 0.0;
    let mut forbidden: Option<usize> = None;
    *state.visit_counts.entry(episode.start).or_insert(0) += 1;

    while steps < max_steps {
        let node = *trail.last().unwrap();
        let candidates = graph.candidate_actions(node)?;
        let ctx = StepContext {
            graph,
            episode,
            trail: &trail,
            actions: &candidates,
            step: steps,
        };
        let scores = selector.log_scores(&ctx)?;
        if scores.len() != candidates.len() {
            return data_err(format!(
                "selector returned {} scores for {} candidates",
                scores.len(),
                candidates.len()
            ));
        }
        let choice = argmax_lowest(&scores, forbidden)?;
        forbidden = None;
        state.snapshots.push(Snapshot {
            node,
            step: steps,
            score: acc_log_prob,
            trail: trail.clone(),
            chosen: choice,
        });
        acc_log_prob += chosen_log_prob(&scores, choice);
        steps += 1;
        match candidates[choice] {
            Action::Stop => {
                actions_taken.push(Action::Stop);
                stopped = true;
                break;
            }
            Action::MoveTo(v) => {
                actions_taken.push(Action::MoveTo(v));
                trail.push(v);
                nodes.push(v);
                let count = state.visit_counts.entry(v).or_insert(0);
                *count += 1;
                if *count < 2 {
                    continue;
                }
                // Revisit: find the best remaining decision point strictly
                // before this step.
                state.triggered = true;
                let best = state
                    .snapshots
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.step < steps)
                    .max_by(|(ia, a), (ib, b)| {
                        resume_score(a.score)
                            .partial_cmp(&resume_score(b.score))
                            .expect("resume scores are comparable")
                            // Prefer earlier snapshots, then keep stable
                            // order; note the reversed index comparison
                            // because max_by keeps the greater element.
                            .then(ib.cmp(ia))
                    })
                    .map(|(i, _)| i);
                let Some(idx) = best else {
                    // Nothing to resume from: keep navigating.
                    continue;
                };
                let snap = if rules.consume_snapshot {
                    state.snapshots.remove(idx)
                } else {
                    state.snapshots[idx].clone()
                };
                state.backtrack_steps.push(steps);
                // Physically walk back; the motion counts toward path
                // length but (by default) not toward revisit triggers.
                if v != snap.node {
                    let (walk, _) = shortest_path(graph, v, snap.node)?;
                    for w in walk.windows(2) {
                        actions_taken.push(Action::MoveTo(w[1]));
                        nodes.push(w[1]);
                        if rules.count_walk_visits {
                            *state.visit_counts.entry(w[1]).or_insert(0) += 1;
                        }
                    }
                }
                trail = snap.trail.clone();
                acc_log_prob = snap.score;
                if rules.forbid_previous_action {
                    forbidden = Some(snap.chosen);
                }
            }
        }
    }
    Ok((
        Trajectory {
            schema: TRAJ_SCHEMA.to_string(),
            episode_id: episode.episode_id.clone(),
            nodes,
            actions: actions_taken,
            stopped,
            steps,
        },
        state,
    ))
}

/// Default decision budget for an episode's flavor.
pub fn default_max_steps(flavor: crate::dataset::Flavor) -> usize {
    match flavor {
        crate::dataset::Flavor::R4r => MAX_STEPS_JOINED,
        _ => MAX_STEPS_SHORT,
    }
}

/// Write trajectories as line-delimited JSON.
pub fn save_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    for t in trajectories {
        serde_json::to_writer(&mut out, t)
            .map_err(|e| NavError::Data(format!("encoding trajectory: {e}")))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read trajectories back; each line is validated for schema only (graph
/// checks need the world, see [`Trajectory::validate`]).
pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line).map_err(|_| {
            NavError::Data(format!("{}:{}: bad trajectory record", path.display(), i + 1))
        })?;
        if t.schema != TRAJ_SCHEMA {
            return data_err(format!(
                "{}:{}: unknown trajectory schema {:?}",
                path.display(),
                i + 1,
                t.schema
            ));
        }
        out.push(t);
    }
    Ok(out)
}
