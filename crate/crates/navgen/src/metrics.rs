//! Trajectory evaluation metrics and behavioral analyses.
//!
//! All distance-flavored quantities use graph shortest-path distance — the
//! agent lives on the graph, so straight-line distance would credit motion
//! it cannot perform. Metrics are pure functions; an aggregate is always the
//! mean of per-episode values.
//!
//! The seven reported metrics, in fixed table order:
//!
//! | metric | meaning |
//! |--------|---------|
//! | PL     | path length: sum of traversed edge lengths |
//! | NE     | navigation error: distance from the final node to the goal |
//! | SR     | success: NE ≤ d_th (a distance of exactly d_th still counts) |
//! | SPL    | success weighted by inverse normalized path length |
//! | CLS    | coverage weighted by length score |
//! | nDTW   | normalized dynamic time warping against the reference |
//! | SDTW   | nDTW gated by success |
//!
//! Besides per-trajectory scoring, this module computes the two behavioral
//! curves used for policy analysis: per-timestep precision against a teacher
//! and per-timestep agreement between two policies.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Episode};
use crate::error::{config_err, data_err, NavError, Result};
use crate::policies::{ActionSelector, OracleSelector, StepContext, Trajectory};
use crate::world::{shortest_dists, shortest_path, EnvGraph, NodeId};

/// Success threshold: an episode succeeds when the agent stops within this
/// shortest-path distance of the goal.
pub const DEFAULT_SUCCESS_RADIUS: f64 = 3.0;

/// Sum of traversed edge lengths; a single-node path has length zero.
pub fn path_length(graph: &EnvGraph, path: &[NodeId]) -> Result<f64> {
    if path.is_empty() {
        return config_err("cannot measure an empty path");
    }
    let mut total = 0.0;
    for w in path.windows(2) {
        total += graph.edge_length(w[0], w[1]).ok_or_else(|| {
            NavError::IllegalAction(format!("path nodes {} -> {} are not adjacent", w[0], w[1]))
        })?;
    }
    Ok(total)
}

/// Shortest-path distance from the path's final node to the goal.
pub fn nav_error(graph: &EnvGraph, path: &[NodeId], goal: NodeId) -> Result<f64> {
    let last = *path.last().ok_or(NavError::Config(
        "cannot measure an empty path".to_string(),
    ))?;
    let (_, dist) = shortest_path(graph, last, goal)?;
    Ok(dist)
}

/// Success iff the navigation error is within the radius (inclusive).
pub fn success(nav_error: f64, radius: f64) -> bool {
    nav_error <= radius
}

/// Success weighted by inverse normalized path length: `S · l / max(p, l)`
/// for shortest length `l` and trajectory length `p`. The degenerate `l = 0`
/// (start equals goal) is defined as plain success.
pub fn spl(success: bool, shortest_len: f64, traj_len: f64) -> f64 {
    let s = if success { 1.0 } else { 0.0 };
    if shortest_len == 0.0 {
        return s;
    }
    s * shortest_len / traj_len.max(shortest_len)
}

/// Coverage weighted by length score.
///
/// `PC` is the mean over reference nodes of `exp(−d(r, P)/radius)` where
/// `d(r, P)` is the closest the trajectory ever comes to `r`. The length
/// score compares the trajectory's length against the coverage-scaled
/// reference length `EPL = PC · PL(R)`: `LS = EPL / (EPL + |EPL − PL(P)|)`.
/// CLS is their product.
pub fn cls(graph: &EnvGraph, traj: &[NodeId], reference: &[NodeId], radius: f64) -> Result<f64> {
    if traj.is_empty() || reference.is_empty() {
        return config_err("coverage needs nonempty trajectory and reference");
    }
    if radius <= 0.0 {
        return config_err(format!("success radius must be positive, got {radius}"));
    }
    let mut coverage = 0.0;
    for &r in reference {
        let dists = shortest_dists(graph, r)?;
        let nearest = traj
            .iter()
            .map(|&p| dists[p as usize])
            .fold(f64::INFINITY, f64::min);
        coverage += (-nearest / radius).exp();
    }
    coverage /= reference.len() as f64;
    let expected = coverage * path_length(graph, reference)?;
    let actual = path_length(graph, traj)?;
    let denom = expected + (expected - actual).abs();
    // expected = 0 only for a single-node reference; score by whether the
    // agent also stayed put.
    let length_score = if denom == 0.0 { 1.0 } else { expected / denom };
    Ok(coverage * length_score)
}

/// Normalized dynamic time warping: `exp(−DTW / (|R| · radius))` where DTW
/// is the classic dynamic program over pairwise node distances with
/// match/insert/delete moves, anchored at both endpoints.
pub fn ndtw(graph: &EnvGraph, traj: &[NodeId], reference: &[NodeId], radius: f64) -> Result<f64> {
    if traj.is_empty() || reference.is_empty() {
        return config_err("warping needs nonempty trajectory and reference");
    }
    if radius <= 0.0 {
        return config_err(format!("success radius must be positive, got {radius}"));
    }
    // cost[i][j] = distance(traj[i], reference[j]), computed from |R|
    // single-source passes.
    let np = traj.len();
    let nr = reference.len();
    let mut cost = vec![0.0; np * nr];
    for (j, &r) in reference.iter().enumerate() {
        let dists = shortest_dists(graph, r)?;
        for (i, &p) in traj.iter().enumerate() {
            cost[i * nr + j] = dists[p as usize];
        }
    }
    let mut dp = vec![f64::INFINITY; np * nr];
    for i in 0..np {
        for j in 0..nr {
            let best_prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut b = f64::INFINITY;
                if i > 0 && j > 0 {
                    b = b.min(dp[(i - 1) * nr + (j - 1)]);
                }
                if i > 0 {
                    b = b.min(dp[(i - 1) * nr + j]);
                }
                if j > 0 {
                    b = b.min(dp[i * nr + (j - 1)]);
                }
                b
            };
            dp[i * nr + j] = cost[i * nr + j] + best_prev;
        }
    }
    let dtw = dp[np * nr - 1];
    Ok((-dtw / (nr as f64 * radius)).exp())
}

/// nDTW gated by success.
pub fn sdtw(success: bool, ndtw: f64) -> f64 {
    if success {
        ndtw
    } else {
        0.0
    }
}

/// The seven metrics for one scored trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode_id: String,
    pub pl: f64,
    pub ne: f64,
    pub sr: f64,
    pub spl: f64,
    pub cls: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

/// Metrics for a set of trajectories plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Success radius the scores were computed with.
    pub radius: f64,
    pub episodes: Vec<EpisodeMetrics>,
    /// Column means over all episodes.
    pub mean: EpisodeMetrics,
}

/// Score one trajectory against its episode.
pub fn episode_metrics(
    graph: &EnvGraph,
    episode: &Episode,
    traj: &Trajectory,
    radius: f64,
) -> Result<EpisodeMetrics> {
    traj.validate(graph)?;
    if traj.nodes.first() != Some(&episode.start) {
        return data_err(format!(
            "trajectory {} does not start at the episode start",
            traj.episode_id
        ));
    }
    let pl = path_length(graph, &traj.nodes)?;
    let ne = nav_error(graph, &traj.nodes, episode.goal)?;
    let ok = success(ne, radius);
    let (_, shortest_len) = shortest_path(graph, episode.start, episode.goal)?;
    let spl_v = spl(ok, shortest_len, pl);
    let cls_v = cls(graph, &traj.nodes, &episode.reference_path, radius)?;
    let ndtw_v = ndtw(graph, &traj.nodes, &episode.reference_path, radius)?;
    Ok(EpisodeMetrics {
        episode_id: traj.episode_id.clone(),
        pl,
        ne,
        sr: if ok { 1.0 } else { 0.0 },
        spl: spl_v,
        cls: cls_v,
        ndtw: ndtw_v,
        sdtw: sdtw(ok, ndtw_v),
    })
}

/// Score a batch of trajectories against their episodes (matched by
/// episode id). Every trajectory must have a matching episode.
pub fn evaluate(
    dataset: &Dataset,
    trajectories: &[Trajectory],
    radius: f64,
) -> Result<MetricsReport> {
    if trajectories.is_empty() {
        return config_err("nothing to evaluate: no trajectories");
    }
    let by_id: HashMap<&str, &Episode> = dataset
        .episodes
        .iter()
        .map(|e| (e.episode_id.as_str(), e))
        .collect();
    let scored = crate::par::ordered_map(trajectories, |traj| -> Result<EpisodeMetrics> {
        let episode = by_id.get(traj.episode_id.as_str()).ok_or_else(|| {
            NavError::UnknownId(format!("trajectory {} has no episode", traj.episode_id))
        })?;
        let graph = dataset.world(&episode.env_id)?;
        episode_metrics(graph, episode, traj, radius)
    });
    let episodes: Vec<EpisodeMetrics> = scored.into_iter().collect::<Result<_>>()?;
    let mean = mean_metrics(&episodes);
    Ok(MetricsReport { radius, episodes, mean })
}

/// Column means; the id is the literal "mean".
fn mean_metrics(rows: &[EpisodeMetrics]) -> EpisodeMetrics {
    let n = rows.len().max(1) as f64;
    let sum = |f: fn(&EpisodeMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    EpisodeMetrics {
        episode_id: "mean".to_string(),
        pl: sum(|m| m.pl),
        ne: sum(|m| m.ne),
        sr: sum(|m| m.sr),
        spl: sum(|m| m.spl),
        cls: sum(|m| m.cls),
        ndtw: sum(|m| m.ndtw),
        sdtw: sum(|m| m.sdtw),
    }
}

/// Fixed CSV column order, one row per episode plus a trailing mean row.
pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "episode_id,PL,NE,SR,SPL,CLS,nDTW,SDTW")?;
    for row in report.episodes.iter().chain(std::iter::once(&report.mean)) {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.episode_id, row.pl, row.ne, row.sr, row.spl, row.cls, row.ndtw, row.sdtw
        )?;
    }
    out.flush()?;
    Ok(())
}

/// The full report as pretty JSON.
pub fn write_metrics_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| NavError::Data(format!("encoding metrics: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Roll a policy over a set of episodes (in parallel when enabled, results
/// in episode order) and score the runs.
pub fn rollout_and_evaluate<S: ActionSelector>(
    make_selector: impl Fn() -> S + Sync,
    dataset: &Dataset,
    episodes: &[Episode],
    max_steps: usize,
    radius: f64,
) -> Result<(Vec<Trajectory>, MetricsReport)> {
    if episodes.is_empty() {
        return config_err("nothing to evaluate: no episodes");
    }
    let runs = crate::par::ordered_map(episodes, |episode| -> Result<Trajectory> {
        let graph = dataset.world(&episode.env_id)?;
        let mut selector = make_selector();
        crate::policies::rollout(&mut selector, graph, episode, max_steps)
    });
    let trajectories: Vec<Trajectory> = runs.into_iter().collect::<Result<_>>()?;
    let report = evaluate(dataset, &trajectories, radius)?;
    Ok((trajectories, report))
}

/// Which state stream a behavioral curve is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMode {
    /// Feed gold histories: the agent is teleported along the reference
    /// path and asked what it would do at each prefix.
    OnReference,
    /// Roll the policy and score the states it actually reaches.
    OwnRollout,
}

/// One bucket of a per-timestep curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: usize,
    /// Mean of the per-state indicator at this timestep.
    pub value: f64,
    /// How many episode states contributed.
    pub count: usize,
}

/// The teacher's choice index at a trail state (next reference node while on
/// the path, first hop of a shortest path back otherwise, Stop at the end).
fn teacher_choice(graph: &EnvGraph, episode: &Episode, trail: &[NodeId]) -> Result<usize> {
    let candidates = graph.candidate_actions(*trail.last().unwrap())?;
    let ctx = StepContext {
        graph,
        episode,
        trail,
        actions: &candidates,
        step: trail.len() - 1,
    };
    let scores = OracleSelector.log_scores(&ctx)?;
    Ok(scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap())
}

/// A selector's choice index at a trail state.
fn selector_choice<S: ActionSelector>(
    selector: &mut S,
    graph: &EnvGraph,
    episode: &Episode,
    trail: &[NodeId],
    step: usize,
) -> Result<usize> {
    let candidates = graph.candidate_actions(*trail.last().unwrap())?;
    let ctx = StepContext { graph, episode, trail, actions: &candidates, step };
    let scores = selector.log_scores(&ctx)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// The sequence of trail states an episode contributes to a curve: reference
/// prefixes in [`CurveMode::OnReference`], the policy's own visited prefixes
/// in [`CurveMode::OwnRollout`].
fn curve_states<S: ActionSelector>(
    selector: &mut S,
    graph: &EnvGraph,
    episode: &Episode,
    mode: CurveMode,
    max_steps: usize,
) -> Result<Vec<Vec<NodeId>>> {
    match mode {
        CurveMode::OnReference => Ok((1..=episode.reference_path.len())
            .map(|end| episode.reference_path[..end].to_vec())
            .collect()),
        CurveMode::OwnRollout => {
            let traj = crate::policies::rollout(selector, graph, episode, max_steps)?;
            // One state per decision: prefixes of the visited sequence. A
            // stop decision happens at the final node; a forced stop does
            // not add a decision state beyond the last move.
            let decisions = traj.steps;
            Ok((1..=traj.nodes.len())
                .take(decisions)
                .map(|end| traj.nodes[..end].to_vec())
                .collect())
        }
    }
}

/// Per-timestep precision of a policy against the teacher.
pub fn precision_curve<S: ActionSelector>(
    make_selector: impl Fn() -> S,
    dataset: &Dataset,
    episodes: &[Episode],
    mode: CurveMode,
    max_steps: usize,
) -> Result<Vec<CurvePoint>> {
    let mut hits: Vec<(usize, usize)> = Vec::new();
    for episode in episodes {
        let graph = dataset.world(&episode.env_id)?;
        let mut selector = make_selector();
        let states = curve_states(&mut selector, graph, episode, mode, max_steps)?;
        for (t, trail) in states.iter().enumerate() {
            let want = teacher_choice(graph, episode, trail)?;
            let got = selector_choice(&mut selector, graph, episode, trail, t)?;
            if hits.len() <= t {
                hits.resize(t + 1, (0, 0));
            }
            hits[t].0 += usize::from(got == want);
            hits[t].1 += 1;
        }
    }
    Ok(curve_from_counts(&hits))
}

/// Per-timestep agreement rate between two policies. In
/// [`CurveMode::OwnRollout`] the states come from rolling the first policy.
pub fn agreement_curve<A: ActionSelector, B: ActionSelector>(
    make_a: impl Fn() -> A,
    make_b: impl Fn() -> B,
    dataset: &Dataset,
    episodes: &[Episode],
    mode: CurveMode,
    max_steps: usize,
) -> Result<Vec<CurvePoint>> {
    let mut hits: Vec<(usize, usize)> = Vec::new();
    for episode in episodes {
        let graph = dataset.world(&episode.env_id)?;
        let mut sel_a = make_a();
        let mut sel_b = make_b();
        let states = curve_states(&mut sel_a, graph, episode, mode, max_steps)?;
        for (t, trail) in states.iter().enumerate() {
            let a = selector_choice(&mut sel_a, graph, episode, trail, t)?;
            let b = selector_choice(&mut sel_b, graph, episode, trail, t)?;
            if hits.len() <= t {
                hits.resize(t + 1, (0, 0));
            }
            hits[t].0 += usize::from(a == b);
            hits[t].1 += 1;
        }
    }
    Ok(curve_from_counts(&hits))
}

fn curve_from_counts(hits: &[(usize, usize)]) -> Vec<CurvePoint> {
    hits.iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(t, &(k, n))| CurvePoint { t, value: k as f64 / n as f64, count: n })
        .collect()
}

/// Curves as CSV (`t,value,count`).
pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,value,count")?;
    for p in curve {
        writeln!(out, "{},{},{}", p.t, p.value, p.count)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldParams};
    use rand::Rng;

    fn world(seed: u64, nodes: usize) -> EnvGraph {
        let params = WorldParams { nodes, ..WorldParams::default() };
        generate_world(&format!("mt-{seed}"), seed, &params).unwrap()
    }

    /// Straight-line reimplementation of coverage-weighted length score,
    /// kept deliberately naive as an independent oracle.
    fn cls_brute(graph: &EnvGraph, traj: &[NodeId], reference: &[NodeId], radius: f64) -> f64 {
        let dist = |u: NodeId, v: NodeId| shortest_path(graph, u, v).unwrap().1;
        let mut pc = 0.0;
        for &r in reference {
            let mut nearest = f64::INFINITY;
            for &p in traj {
                nearest = nearest.min(dist(r, p));
            }
            pc += (-nearest / radius).exp();
        }
        pc /= reference.len() as f64;
        let pl_ref: f64 = reference.windows(2).map(|w| dist(w[0], w[1])).sum();
        let pl_traj: f64 = traj.windows(2).map(|w| graph.edge_length(w[0], w[1]).unwrap()).sum();
        let epl = pc * pl_ref;
        let denom = epl + (epl - pl_traj).abs();
        let ls = if denom == 0.0 { 1.0 } else { epl / denom };
        pc * ls
    }

    /// Exhaustive minimum over all monotone warping paths.
    fn dtw_brute(graph: &EnvGraph, traj: &[NodeId], reference: &[NodeId]) -> f64 {
        let dist = |u: NodeId, v: NodeId| shortest_path(graph, u, v).unwrap().1;
        fn go(
            i: usize,
            j: usize,
            traj: &[NodeId],
            reference: &[NodeId],
            dist: &dyn Fn(NodeId, NodeId) -> f64,
        ) -> f64 {
            let here = dist(traj[i], reference[j]);
            if i + 1 == traj.len() && j + 1 == reference.len() {
                return here;
            }
            let mut best = f64::INFINITY;
            if i + 1 < traj.len() && j + 1 < reference.len() {
                best = best.min(go(i + 1, j + 1, traj, reference, dist));
            }
            if i + 1 < traj.len() {
                best = best.min(go(i + 1, j, traj, reference, dist));
            }
            if j + 1 < reference.len() {
                best = best.min(go(i, j + 1, traj, reference, dist));
            }
            here + best
        }
        go(0, 0, traj, reference, &dist)
    }

    /// Random walk along edges, length `hops + 1` nodes.
    fn random_walk(graph: &EnvGraph, rng: &mut impl Rng, hops: usize) -> Vec<NodeId> {
        let mut walk = vec![rng.gen_range(0..graph.node_count() as NodeId)];
        for _ in 0..hops {
            let here = *walk.last().unwrap();
            let nbrs = graph.neighbors(here).unwrap();
            walk.push(nbrs[rng.gen_range(0..nbrs.len())].0);
        }
        walk
    }

    #[test]
    fn path_length_basics() {
        let g = world(1, 10);
        assert_eq!(path_length(&g, &[3]).unwrap(), 0.0);
        let (v, len) = g.neighbors(0).unwrap()[0];
        assert_eq!(path_length(&g, &[0, v]).unwrap(), len);
        assert!(path_length(&g, &[]).is_err());
    }

    #[test]
    fn nav_error_and_success_boundary() {
        let g = world(2, 10);
        assert_eq!(nav_error(&g, &[4], 4).unwrap(), 0.0);
        let (v, len) = g.neighbors(0).unwrap()[0];
        assert_eq!(nav_error(&g, &[v], 0).unwrap(), len);
        assert!(success(0.0, 3.0));
        assert!(success(3.0, 3.0), "distance exactly at the radius counts");
        assert!(!success(3.0 + 1e-12, 3.0));
    }

    #[test]
    fn spl_formula_cases() {
        assert_eq!(spl(true, 5.0, 5.0), 1.0);
        assert_eq!(spl(false, 5.0, 5.0), 0.0);
        assert!((spl(true, 5.0, 10.0) - 0.5).abs() < 1e-15);
        // Shorter-than-shortest can't happen physically, but the max keeps
        // the ratio capped at 1.
        assert_eq!(spl(true, 5.0, 3.0), 1.0);
        assert_eq!(spl(true, 0.0, 4.0), 1.0);
        assert_eq!(spl(false, 0.0, 4.0), 0.0);
    }

    #[test]
    fn identical_paths_score_perfectly() {
        let g = world(3, 12);
        let mut rng = crate::seeds::derived_rng(3, "perfect");
        let walk = random_walk(&g, &mut rng, 4);
        assert!((cls(&g, &walk, &walk, 3.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((ndtw(&g, &walk, &walk, 3.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ndtw(&g, &[5], &[5], 3.0).unwrap(), 1.0);
    }

    #[test]
    fn far_trajectory_scores_near_zero() {
        let g = world(4, 30);
        // Pick the pair of nodes farthest apart and park the agent there.
        let mut far = (0, 0, 0.0);
        for u in 0..g.node_count() as NodeId {
            let d = shortest_dists(&g, u).unwrap();
            for v in 0..g.node_count() as NodeId {
                if d[v as usize] > far.2 {
                    far = (u, v, d[v as usize]);
                }
            }
        }
        let score = cls(&g, &[far.0], &[far.1], 0.05).unwrap();
        assert!(score < 1e-6, "coverage of a far point should vanish, got {score}");
    }

    #[test]
    fn cls_and_ndtw_match_brute_force() {
        let mut rng = crate::seeds::derived_rng(99, "metric-oracle");
        for case in 0..40 {
            let g = world(200 + case, 10 + (case % 4) as usize);
            let traj = random_walk(&g, &mut rng, 1 + (case % 5) as usize);
            let reference = random_walk(&g, &mut rng, 1 + ((case + 2) % 5) as usize);
            let fast = cls(&g, &traj, &reference, 3.0).unwrap();
            let slow = cls_brute(&g, &traj, &reference, 3.0);
            assert!(
                (fast - slow).abs() < 1e-9,
                "cls mismatch on case {case}: {fast} vs {slow}"
            );
            let fast = ndtw(&g, &traj, &reference, 3.0).unwrap();
            let slow =
                (-dtw_brute(&g, &traj, &reference) / (reference.len() as f64 * 3.0)).exp();
            assert!(
                (fast - slow).abs() < 1e-9,
                "ndtw mismatch on case {case}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn sdtw_gates_on_success() {
        assert_eq!(sdtw(false, 0.8), 0.0);
        assert_eq!(sdtw(true, 0.8), 0.8);
    }

    #[test]
    fn oracle_scores_perfectly_end_to_end() {
        use crate::dataset::{build_dataset, DataConfig, Flavor, Split};
        use crate::policies::{rollout, OracleSelector};
        let cfg = DataConfig {
            train_worlds: 2,
            unseen_worlds: 1,
            trajectories_per_world: 4,
            val_seen_per_world: 2,
            unseen_per_world: 2,
            ..DataConfig::default()
        };
        let dataset = build_dataset(&cfg, 0).unwrap();
        let episodes: Vec<_> = dataset
            .select(Flavor::R2r, Split::ValSeen)
            .into_iter()
            .cloned()
            .collect();
        assert!(!episodes.is_empty());
        let trajectories: Vec<Trajectory> = episodes
            .iter()
            .map(|e| {
                rollout(&mut OracleSelector, dataset.world(&e.env_id).unwrap(), e, 20).unwrap()
            })
            .collect();
        let report = evaluate(&dataset, &trajectories, DEFAULT_SUCCESS_RADIUS).unwrap();
        assert_eq!(report.mean.sr, 1.0);
        assert_eq!(report.mean.ne, 0.0);
        // r2r references are shortest paths, so the oracle is optimal.
        assert!((report.mean.spl - 1.0).abs() < 1e-12);
        assert!((report.mean.cls - 1.0).abs() < 1e-12);
        assert!((report.mean.ndtw - 1.0).abs() < 1e-12);
        assert!((report.mean.sdtw - 1.0).abs() < 1e-12);

        // The oracle agrees with the teacher everywhere, in both modes.
        for mode in [CurveMode::OnReference, CurveMode::OwnRollout] {
            let curve =
                precision_curve(|| OracleSelector, &dataset, &episodes, mode, 20).unwrap();
            assert!(!curve.is_empty());
            assert!(curve.iter().all(|p| p.value == 1.0), "{mode:?}: {curve:?}");
            let agree =
                agreement_curve(|| OracleSelector, || OracleSelector, &dataset, &episodes, mode, 20)
                    .unwrap();
            assert!(agree.iter().all(|p| p.value == 1.0));
        }
    }

    #[test]
    fn bounded_metrics_stay_bounded() {
        let mut rng = crate::seeds::derived_rng(7, "bounds");
        for case in 0..30 {
            let g = world(300 + case, 12);
            let traj = random_walk(&g, &mut rng, (case % 7) as usize);
            let reference = random_walk(&g, &mut rng, 1 + (case % 6) as usize);
            let c = cls(&g, &traj, &reference, 3.0).unwrap();
            let n = ndtw(&g, &traj, &reference, 3.0).unwrap();
            assert!((0.0..=1.0).contains(&c), "cls {c}");
            assert!((0.0..=1.0).contains(&n), "ndtw {n}");
        }
    }
}
