//! End-to-end acceptance gates for the whole system, one per property the
//! build must deliver: autodiff correctness, posterior math, loss
//! identities, metric oracles, teacher rules, mixing rates, training
//! convergence, the generative-vs-discriminative comparison, token-entropy
//! invariants, backtracking behavior, and byte-level determinism.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see one
//! PASS/FAIL line per criterion. Set `ACCEPT_ONLY=3,9` to run a subset
//! while debugging.

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use navgen::dataset::{build_dataset, DataConfig, Dataset, Episode, Flavor, Split};
use navgen::error::Result;
use navgen::instructions::{build_vocab, Instruction, Style};
use navgen::learn::{
    evaluate_policy, fidelity_reference_action, gen_loss, mix_next_action, train, train_from,
    ModelKind, Supervision, TeacherContext, TrainConfig, TrainedModel,
};
use navgen::metrics::{
    cls, evaluate, ndtw, path_length, rollout_and_evaluate, DEFAULT_SUCCESS_RADIUS,
};
use navgen::models::{ModelConfig, SpeakerModel};
use navgen::ndgrad::check::grad_check;
use navgen::ndgrad::{Array, ParamStore, Tape, Tensor};
use navgen::policies::{
    backtracking_rollout, gen_action_posterior, gen_select, history_inputs, rollout,
    ActionPosterior, ActionSelector, BacktrackRules, DiscSelector, GenSelector, OracleSelector,
    StepContext, Trajectory,
};
use navgen::seeds::derived_rng;
use navgen::tent::{tent_step, tent_trace, token_entropy};
use navgen::world::{generate_world, shortest_path, Action, EnvGraph, NodeId, WorldParams};

// ---------------------------------------------------------------------------
// Pinned tolerances and training recipes
// ---------------------------------------------------------------------------

/// Finite differences: randomized points per op and the relative-error gate.
const FD_POINTS: usize = 20;
const FD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

/// Posterior and loss-identity tolerances.
const POSTERIOR_SUM_TOL: f64 = 1e-9;
const LOSS_IDENTITY_TOL: f64 = 1e-12;
const METRIC_ORACLE_TOL: f64 = 1e-9;

/// Convergence smoke (criterion: both policies on the default dataset).
const SMOKE_TIME_BUDGET_SECS: f64 = 1800.0;
const SMOKE_SR_GATE: f64 = 0.80;
const SMOKE_SR_FLOOR: f64 = 0.50;
const SMOKE_LR: f64 = 2e-3;
const FOLLOWER_EPOCHS: usize = 10;
const SPEAKER_SUP_EPOCHS: usize = 6;
const SPEAKER_FID_EPOCHS: usize = 8;

/// Scaled directional comparison: seeds and slack.
const DIRECTIONAL_SEEDS: [u64; 5] = [11, 12, 13, 14, 15];
const DIRECTIONAL_SLACK: f64 = 0.02;
const DIRECTIONAL_FOLLOWER_EPOCHS: usize = 10;
const DIRECTIONAL_SPEAKER_SUP_EPOCHS: usize = 6;
const DIRECTIONAL_SPEAKER_FID_EPOCHS: usize = 6;
const DIRECTIONAL_HIDDEN: usize = 32;

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

fn small_world(seed: u64, nodes: usize) -> EnvGraph {
    generate_world(
        format!("acc-{seed}"),
        seed,
        &WorldParams { nodes, ..WorldParams::default() },
    )
    .unwrap()
}

fn tiny_dataset(seed: u64) -> Dataset {
    let cfg = DataConfig {
        seed,
        train_worlds: 2,
        unseen_worlds: 1,
        trajectories_per_world: 6,
        val_seen_per_world: 2,
        unseen_per_world: 3,
        ..DataConfig::default()
    };
    build_dataset(&cfg, 0).unwrap()
}

fn tiny_model_cfg(dataset: &Dataset, hidden: usize) -> ModelConfig {
    let (_, graph) = dataset.worlds.first().unwrap();
    ModelConfig {
        hidden,
        token_embed: (hidden / 2).max(4),
        d_v: graph.node(0).unwrap().visual_feature.len(),
        vocab: build_vocab().len(),
    }
}

/// A speaker with randomized weights: init gives zero output layers, so
/// tests that need non-degenerate scores perturb every parameter.
fn jittered_speaker(cfg: &ModelConfig, seed: u64, amplitude: f64) -> SpeakerModel {
    let mut speaker = SpeakerModel::init(cfg, seed).unwrap();
    let mut rng = derived_rng(seed, "acceptance-jitter");
    let names: Vec<String> = speaker.params.names().cloned().collect();
    for name in names {
        for x in speaker.params.get_mut(&name).unwrap().data_mut() {
            *x += rng.gen_range(-amplitude..amplitude);
        }
    }
    speaker
}

fn uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn rand_vec(rng: &mut ChaCha12Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| uniform(rng, lo, hi)).collect()
}

// ---------------------------------------------------------------------------
// Criterion 1: every differentiable op agrees with central differences
// ---------------------------------------------------------------------------

/// One randomized finite-difference trial for the named op. Each case
/// registers its inputs as parameters, builds a scalar loss (weighting
/// non-scalar outputs by a fixed random tensor so every output cell
/// matters), and returns grad_check's max relative error.
fn fd_trial(op: &str, trial: usize) -> Result<f64> {
    let mut rng = derived_rng(4100 + trial as u64, op);
    let m = rng.gen_range(2..=4usize);
    let k = rng.gen_range(2..=4usize);
    let n = rng.gen_range(2..=4usize);
    let mut store = ParamStore::new();
    let reg = |st: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha12Rng| {
        let numel: usize = shape.iter().product();
        let data = rand_vec(rng, numel.max(1), -2.0, 2.0);
        let arr = match shape.len() {
            0 => Array::scalar(data[0]),
            1 => Array::vector(data),
            _ => Array::matrix(shape[0], shape[1], data).unwrap(),
        };
        st.register(name, arr).unwrap();
    };

    // Scalarize a tensor by a fixed random weighting (captured by value).
    let weights = rand_vec(&mut rng, 64, -1.0, 1.0);
    let weighted_sum = move |tape: &mut Tape, t: Tensor, w: &[f64]| -> Result<Tensor> {
        let shape = tape.value(t).shape().to_vec();
        let numel: usize = shape.iter().product();
        let arr = match shape.len() {
            0 => return Ok(t),
            1 => Array::vector(w[..numel].to_vec()),
            _ => Array::matrix(shape[0], shape[1], w[..numel].to_vec())?,
        };
        let wt = tape.constant(arr)?;
        let prod = tape.mul(t, wt)?;
        tape.sum(prod)
    };

    match op {
        "add" | "sub" | "mul" => {
            reg(&mut store, "a", &[m, n], &mut rng);
            reg(&mut store, "b", &[m, n], &mut rng);
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                let b = tape.param(st, "b")?;
                let out = match op {
                    "add" => tape.add(a, b)?,
                    "sub" => tape.sub(a, b)?,
                    _ => tape.mul(a, b)?,
                };
                weighted_sum(tape, out, &weights)
            })
        }
        "scale" | "add_scalar" => {
            reg(&mut store, "a", &[n], &mut rng);
            let c = uniform(&mut rng, -2.0, 2.0);
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                let out = if op == "scale" { tape.scale(a, c)? } else { tape.add_scalar(a, c)? };
                weighted_sum(tape, out, &weights)
            })
        }
        "tanh" | "sigmoid" => {
            reg(&mut store, "a", &[m, n], &mut rng);
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                let out = if op == "tanh" { tape.tanh(a)? } else { tape.sigmoid(a)? };
                weighted_sum(tape, out, &weights)
            })
        }
        "relu" => {
            // Keep inputs away from the kink at zero, where the secant
            // slope is legitimately undefined.
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let v = uniform(&mut rng, 0.1, 2.0);
                    if rng.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            store.register("a", Array::vector(data)).unwrap();
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                let out = tape.relu(a)?;
                weighted_sum(tape, out, &weights)
            })
        }
        "matmul" => {
            // Cycle the four supported rank combinations.
            let combo = trial % 4;
            match combo {
                0 => {
                    reg(&mut store, "a", &[m, k], &mut rng);
                    reg(&mut store, "b", &[k, n], &mut rng);
                }
                1 => {
                    reg(&mut store, "a", &[k], &mut rng);
                    reg(&mut store, "b", &[k, n], &mut rng);
                }
                2 => {
                    reg(&mut store, "a", &[m, k], &mut rng);
                    reg(&mut store, "b", &[k], &mut rng);
                }
                _ => {
                    reg(&mut store, "a", &[k], &mut rng);
                    reg(&mut store, "b", &[k], &mut rng);
                }
            }
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                let b = tape.param(st, "b")?;
                let out = tape.matmul(a, b)?;
                weighted_sum(tape, out, &weights)
            })
        }
        "transpose" => {
            reg(&mut store, "a", &[m, n], &mut rng);
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                let out = tape.transpose(a)?;
                weighted_sum(tape, out, &weights)
            })
        }
        "concat1" => {
            // Two vectors plus a derived scalar segment.
            reg(&mut store, "a", &[m], &mut rng);
            reg(&mut store, "b", &[n], &mut rng);
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                let b = tape.param(st, "b")?;
                let s = tape.mean(b)?;
                let out = tape.concat1(&[a, s, b])?;
                weighted_sum(tape, out, &weights)
            })
        }
        "concat_cols" => {
            reg(&mut store, "a", &[m, k], &mut rng);
            reg(&mut store, "b", &[m, n], &mut rng);
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                let b = tape.param(st, "b")?;
                let out = tape.concat_cols(&[a, b])?;
                weighted_sum(tape, out, &weights)
            })
        }
        "slice_cols" => {
            reg(&mut store, "a", &[m, 4], &mut rng);
            let start = rng.gen_range(0..=2usize);
            let len = rng.gen_range(1..=(4 - start));
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                let out = tape.slice_cols(a, start, len)?;
                weighted_sum(tape, out, &weights)
            })
        }
        "slice1" => {
            reg(&mut store, "a", &[4], &mut rng);
            let start = rng.gen_range(0..=2usize);
            let len = rng.gen_range(1..=(4 - start));
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                let out = tape.slice1(a, start, len)?;
                weighted_sum(tape, out, &weights)
            })
        }
        "stack_rows" => {
            reg(&mut store, "a", &[n], &mut rng);
            reg(&mut store, "b", &[n], &mut rng);
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                let b = tape.param(st, "b")?;
                // Repeating a row exercises gradient accumulation.
                let out = tape.stack_rows(&[a, b, a])?;
                weighted_sum(tape, out, &weights)
            })
        }
        "row" => {
            reg(&mut store, "a", &[m, n], &mut rng);
            let i = rng.gen_range(0..m);
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                let out = tape.row(a, i)?;
                weighted_sum(tape, out, &weights)
            })
        }
        "embed_rows" => {
            reg(&mut store, "table", &[m, n], &mut rng);
            let ids: Vec<u32> = vec![
                rng.gen_range(0..m) as u32,
                rng.gen_range(0..m) as u32,
                0, // repeated low id exercises accumulation with the next
                0,
            ];
            grad_check(&store, FD_STEP, move |tape, st| {
                let t = tape.param(st, "table")?;
                let out = tape.embed_rows(t, &ids)?;
                weighted_sum(tape, out, &weights)
            })
        }
        "softmax" | "log_softmax" => {
            let rank2 = trial % 2 == 0;
            if rank2 {
                reg(&mut store, "a", &[m, n], &mut rng);
            } else {
                reg(&mut store, "a", &[n], &mut rng);
            }
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                let out = if op == "softmax" { tape.softmax(a)? } else { tape.log_softmax(a)? };
                weighted_sum(tape, out, &weights)
            })
        }
        "logsumexp" => {
            reg(&mut store, "a", &[n], &mut rng);
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                tape.logsumexp(a)
            })
        }
        "nll" => {
            reg(&mut store, "a", &[n], &mut rng);
            let target = rng.gen_range(0..n);
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                tape.nll(a, target)
            })
        }
        "gather2" => {
            reg(&mut store, "a", &[m, n], &mut rng);
            let repeat = (rng.gen_range(0..m), rng.gen_range(0..n));
            let cells = vec![repeat, (rng.gen_range(0..m), rng.gen_range(0..n)), repeat];
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                let out = tape.gather2(a, &cells)?;
                weighted_sum(tape, out, &weights)
            })
        }
        "sum" | "mean" => {
            reg(&mut store, "a", &[m, n], &mut rng);
            grad_check(&store, FD_STEP, move |tape, st| {
                let a = tape.param(st, "a")?;
                if op == "sum" {
                    tape.sum(a)
                } else {
                    tape.mean(a)
                }
            })
        }
        other => panic!("no finite-difference case for op {other:?}"),
    }
}

fn criterion_1_autodiff() -> Result<String> {
    let ops = [
        "add", "sub", "mul", "scale", "add_scalar", "tanh", "sigmoid", "relu", "matmul",
        "transpose", "concat1", "concat_cols", "slice_cols", "slice1", "stack_rows", "row",
        "embed_rows", "softmax", "log_softmax", "logsumexp", "nll", "gather2", "sum", "mean",
    ];
    let t0 = Instant::now();
    let mut worst: (f64, &str) = (0.0, "-");
    for op in ops {
        for trial in 0..FD_POINTS {
            let err = fd_trial(op, trial)?;
            if err > worst.0 {
                worst = (err, op);
            }
            if err > FD_TOL {
                return Err(navgen::NavError::Numerical(format!(
                    "op {op} trial {trial}: rel err {err:.3e} exceeds {FD_TOL:.0e}"
                )));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 30.0 {
        return Err(navgen::NavError::Numerical(format!(
            "finite-difference sweep took {secs:.1}s, budget is 30s"
        )));
    }
    Ok(format!(
        "{} ops x {FD_POINTS} points, max rel err {:.2e} ({}), {:.1}s",
        ops.len(),
        worst.0,
        worst.1,
        secs
    ))
}

// ---------------------------------------------------------------------------
// Criterion 2: posterior normalization and argmax-vs-selection consistency
// ---------------------------------------------------------------------------

fn criterion_2_posterior() -> Result<String> {
    let mut rng = derived_rng(42, "posterior-scores");
    let mut max_dev = 0.0f64;
    for i in 0..10_000 {
        let n = rng.gen_range(1..=8usize);
        let wild = i % 7 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if wild {
                    uniform(&mut rng, -500.0, 100.0)
                } else {
                    uniform(&mut rng, -30.0, 5.0)
                }
            })
            .collect();
        let actions: Vec<Action> = (0..n as u32).map(Action::MoveTo).collect();
        let post = ActionPosterior::from_scores(actions, scores.clone())?;
        let sum: f64 = post.probs.iter().sum();
        max_dev = max_dev.max((sum - 1.0).abs());
        if (sum - 1.0).abs() > POSTERIOR_SUM_TOL {
            return Err(navgen::NavError::Numerical(format!(
                "posterior sum {sum} deviates more than {POSTERIOR_SUM_TOL}"
            )));
        }
        // Independent argmax over the raw scores (first max wins).
        let mut want = 0;
        for (j, &s) in scores.iter().enumerate() {
            if s > scores[want] {
                want = j;
            }
        }
        assert_eq!(post.argmax(), want, "argmax disagrees on {scores:?}");
    }

    // Equal scores are exactly uniform.
    for n in 1..=8usize {
        let actions: Vec<Action> = (0..n as u32).map(Action::MoveTo).collect();
        let post = ActionPosterior::from_scores(actions, vec![-1.7; n])?;
        for &p in &post.probs {
            assert_eq!(p, 1.0 / n as f64, "equal scores must normalize exactly");
        }
    }

    // Live pipeline: the generative choice is the posterior argmax.
    let dataset = tiny_dataset(5);
    let cfg = tiny_model_cfg(&dataset, 16);
    let speaker = jittered_speaker(&cfg, 6, 0.4);
    let mut checked = 0;
    for episode in dataset.episodes.iter().filter(|e| e.flavor == Flavor::R2r).take(20) {
        let graph = dataset.world(&episode.env_id)?;
        let trail = vec![episode.start];
        let post = gen_action_posterior(&speaker, graph, &episode.instruction.tokens, &trail)?;
        let picked = gen_select(&speaker, graph, &episode.instruction.tokens, &trail)?;
        assert_eq!(picked, post.actions[post.argmax()]);
        checked += 1;
    }
    Ok(format!(
        "10000 score vectors, max |sum-1| {:.1e}; uniform exact; {checked} live states agree",
        max_dev
    ))
}

// ---------------------------------------------------------------------------
// Criterion 3: the speaker loss equals the negative log posterior
// ---------------------------------------------------------------------------

fn criterion_3_loss_identity() -> Result<String> {
    let dataset = tiny_dataset(7);
    let cfg = tiny_model_cfg(&dataset, 16);
    let r2r: Vec<&Episode> =
        dataset.episodes.iter().filter(|e| e.flavor == Flavor::R2r).collect();
    let mut rng = derived_rng(43, "identity-instances");
    let mut max_err = 0.0f64;
    for i in 0..1000 {
        let speaker = jittered_speaker(&cfg, 100 + (i % 8) as u64, 0.4);
        let episode = r2r[rng.gen_range(0..r2r.len())];
        let graph = dataset.world(&episode.env_id)?;
        // A random prefix of the reference path is a valid trail.
        let cut = rng.gen_range(1..=episode.reference_path.len());
        let trail = episode.reference_path[..cut].to_vec();
        let node = *trail.last().unwrap();
        let actions = graph.candidate_actions(node)?;
        let ref_index = rng.gen_range(0..actions.len());

        let mut tape = Tape::new();
        let (obs, moves) = history_inputs(graph, &trail)?;
        let hist = speaker.encode_history(&mut tape, &obs, &moves)?;
        let loss = gen_loss(
            &mut tape,
            &speaker,
            &hist,
            graph,
            node,
            &actions,
            &episode.instruction.tokens,
            ref_index,
        )?;
        let loss = tape.value(loss).item()?;

        let post =
            gen_action_posterior(&speaker, graph, &episode.instruction.tokens, &trail)?;
        let direct = -post.probs[ref_index].ln();
        max_err = max_err.max((loss - direct).abs());
        if (loss - direct).abs() > LOSS_IDENTITY_TOL {
            return Err(navgen::NavError::Numerical(format!(
                "instance {i}: loss {loss} vs -log posterior {direct}"
            )));
        }
    }

    // A single candidate leaves nothing to normalize against: exactly zero.
    let speaker = jittered_speaker(&cfg, 9, 0.4);
    let mut zero_checked = 0;
    for episode in r2r.iter().take(50) {
        let graph = dataset.world(&episode.env_id)?;
        let trail = vec![episode.start];
        let mut tape = Tape::new();
        let (obs, moves) = history_inputs(graph, &trail)?;
        let hist = speaker.encode_history(&mut tape, &obs, &moves)?;
        let loss = gen_loss(
            &mut tape,
            &speaker,
            &hist,
            graph,
            episode.start,
            &[Action::Stop],
            &episode.instruction.tokens,
            0,
        )?;
        assert_eq!(tape.value(loss).item()?, 0.0, "single-candidate loss must be exactly 0");
        zero_checked += 1;
    }
    Ok(format!(
        "1000 instances, max |loss + log posterior| {:.1e}; {zero_checked} single-candidate cases exactly 0",
        max_err
    ))
}

// ---------------------------------------------------------------------------
// Criterion 4: trajectory metrics match brute-force re-derivations
// ---------------------------------------------------------------------------

/// All-pairs shortest distances by Floyd–Warshall, independent of the
/// library's single-source routine.
fn fw_distances(graph: &EnvGraph) -> Vec<Vec<f64>> {
    let n = graph.node_count();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for u in 0..n {
        d[u][u] = 0.0;
        for &(v, len) in graph.neighbors(u as NodeId).unwrap() {
            d[u][v as usize] = d[u][v as usize].min(len);
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

/// Minimum warping cost by literally enumerating every monotone alignment
/// (diagonal/right/down moves), no dynamic programming.
fn exhaustive_dtw(cost: &[Vec<f64>], i: usize, j: usize) -> f64 {
    let here = cost[i][j];
    if i == 0 && j == 0 {
        return here;
    }
    let mut best = f64::INFINITY;
    if i > 0 && j > 0 {
        best = best.min(exhaustive_dtw(cost, i - 1, j - 1));
    }
    if i > 0 {
        best = best.min(exhaustive_dtw(cost, i - 1, j));
    }
    if j > 0 {
        best = best.min(exhaustive_dtw(cost, i, j - 1));
    }
    here + best
}

fn my_path_length(graph: &EnvGraph, path: &[NodeId]) -> f64 {
    path.windows(2)
        .map(|w| {
            graph
                .neighbors(w[0])
                .unwrap()
                .iter()
                .find(|&&(v, _)| v == w[1])
                .map(|&(_, len)| len)
                .expect("consecutive nodes are adjacent")
        })
        .sum()
}

fn criterion_4_metric_oracles() -> Result<String> {
    let mut rng = derived_rng(44, "metric-instances");
    let mut max_ndtw_err = 0.0f64;
    let mut max_cls_err = 0.0f64;
    for i in 0..200 {
        let graph = small_world(700 + i, 10);
        let d = fw_distances(&graph);
        let n = graph.node_count() as u32;
        // Random connected-walk sequences up to length 8. A non-walk node
        // multiset would also be legal for the metrics, but walks match how
        // trajectories arise.
        let walk = |len: usize, rng: &mut ChaCha12Rng| -> Vec<NodeId> {
            let mut seq = vec![rng.gen_range(0..n)];
            while seq.len() < len {
                let here = *seq.last().unwrap();
                let nbrs = graph.neighbors(here).unwrap();
                let (next, _) = nbrs[rng.gen_range(0..nbrs.len())];
                seq.push(next);
            }
            seq
        };
        let p = walk(rng.gen_range(1..=8), &mut rng);
        let r = walk(rng.gen_range(1..=8), &mut rng);
        let radius = DEFAULT_SUCCESS_RADIUS;

        // nDTW against exhaustive enumeration.
        let cost: Vec<Vec<f64>> = p
            .iter()
            .map(|&pi| r.iter().map(|&rj| d[pi as usize][rj as usize]).collect())
            .collect();
        let dtw = exhaustive_dtw(&cost, p.len() - 1, r.len() - 1);
        let want_ndtw = (-dtw / (r.len() as f64 * radius)).exp();
        let got_ndtw = ndtw(&graph, &p, &r, radius)?;
        max_ndtw_err = max_ndtw_err.max((got_ndtw - want_ndtw).abs());

        // Coverage-weighted length score from its published definition.
        let coverage: f64 = r
            .iter()
            .map(|&rj| {
                let nearest = p
                    .iter()
                    .map(|&pi| d[pi as usize][rj as usize])
                    .fold(f64::INFINITY, f64::min);
                (-nearest / radius).exp()
            })
            .sum::<f64>()
            / r.len() as f64;
        let expected = coverage * my_path_length(&graph, &r);
        let actual = my_path_length(&graph, &p);
        let denom = expected + (expected - actual).abs();
        let ls = if denom == 0.0 { 1.0 } else { expected / denom };
        let want_cls = coverage * ls;
        let got_cls = cls(&graph, &p, &r, radius)?;
        max_cls_err = max_cls_err.max((got_cls - want_cls).abs());

        if max_ndtw_err > METRIC_ORACLE_TOL || max_cls_err > METRIC_ORACLE_TOL {
            return Err(navgen::NavError::Numerical(format!(
                "instance {i}: ndtw err {max_ndtw_err:.2e}, cls err {max_cls_err:.2e}"
            )));
        }

        // Identity alignment scores 1 for both.
        assert_eq!(ndtw(&graph, &r, &r, radius)?, 1.0);
        assert_eq!(cls(&graph, &r, &r, radius)?, 1.0);
    }

    // Ordering invariants on real evaluated episodes.
    let dataset = tiny_dataset(11);
    let cfg = tiny_model_cfg(&dataset, 16);
    let speaker = jittered_speaker(&cfg, 21, 0.4);
    let episodes: Vec<Episode> = dataset
        .episodes
        .iter()
        .filter(|e| e.flavor == Flavor::R2r)
        .cloned()
        .collect();
    let (_, report) = rollout_and_evaluate(
        || GenSelector { speaker: &speaker },
        &dataset,
        &episodes,
        20,
        DEFAULT_SUCCESS_RADIUS,
    )?;
    let (_, oracle_report) = rollout_and_evaluate(
        || OracleSelector,
        &dataset,
        &episodes,
        20,
        DEFAULT_SUCCESS_RADIUS,
    )?;
    let mut rows = 0;
    for row in report.episodes.iter().chain(oracle_report.episodes.iter()) {
        assert!(row.sdtw <= row.ndtw + 1e-15, "sdtw > ndtw on {}", row.episode_id);
        assert!(row.spl <= row.sr + 1e-15, "spl > sr on {}", row.episode_id);
        rows += 1;
    }
    Ok(format!(
        "200 instances: ndtw err {:.1e}, cls err {:.1e}; identity exact; {} episode rows ordered",
        max_ndtw_err, max_cls_err, rows
    ))
}

// ---------------------------------------------------------------------------
// Criterion 5: the fidelity teacher matches rule-by-rule enumeration
// ---------------------------------------------------------------------------

/// Independent re-derivation of the teacher rules from the trail alone:
/// multi-visit matching, the temporal window, earliest-argmin goal choice,
/// and the first hop toward it.
fn oracle_teacher(graph: &EnvGraph, reference: &[NodeId], trail: &[NodeId]) -> Action {
    let d = fw_distances(graph);
    // Replay the trail, tracking the match state.
    let mut visits: HashMap<NodeId, usize> = HashMap::new();
    let mut last_match = 0usize;
    let mut last_match_time = 0usize;
    for (t, &node) in trail.iter().enumerate() {
        let n = visits.entry(node).or_insert(0);
        *n += 1;
        let occ: Vec<usize> = reference
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == node)
            .map(|(j, _)| j)
            .collect();
        if !occ.is_empty() {
            let m = occ.len();
            let matched = if *n < m { *n } else { m };
            last_match = occ[matched - 1];
            last_match_time = t;
        }
    }
    let t = trail.len() - 1;
    let current = trail[t];
    if reference.contains(&current) {
        return if last_match + 1 < reference.len() {
            Action::MoveTo(reference[last_match + 1])
        } else {
            Action::Stop
        };
    }
    let window_end = (last_match + (t - last_match_time)).min(reference.len() - 1);
    let mut goal = reference[last_match];
    let mut best = f64::INFINITY;
    for &r in &reference[last_match..=window_end] {
        if d[current as usize][r as usize] < best {
            best = d[current as usize][r as usize];
            goal = r;
        }
    }
    let (path, len) = shortest_path(graph, current, goal).unwrap();
    assert!(
        (len - d[current as usize][goal as usize]).abs() < 1e-9,
        "shortest-path length disagrees with Floyd-Warshall"
    );
    Action::MoveTo(path[1])
}

fn criterion_5_fidelity_teacher() -> Result<String> {
    let mut rng = derived_rng(45, "teacher-instances");
    let mut states = 0usize;
    for i in 0..49 {
        let graph = small_world(900 + i, rng.gen_range(5..=8usize));
        let n = graph.node_count() as u32;
        // A reference that is itself a walk, biased toward revisits.
        let mut reference = vec![rng.gen_range(0..n)];
        let ref_len = rng.gen_range(2..=6usize);
        while reference.len() < ref_len {
            let here = *reference.last().unwrap();
            let nbrs = graph.neighbors(here).unwrap();
            // Prefer stepping back to an already-referenced node sometimes.
            let back = nbrs
                .iter()
                .map(|&(v, _)| v)
                .find(|v| reference.contains(v));
            let next = match back {
                Some(v) if rng.gen_bool(0.4) => v,
                _ => nbrs[rng.gen_range(0..nbrs.len())].0,
            };
            reference.push(next);
        }
        // An agent trail that starts on the reference and wanders.
        let mut trail = vec![reference[0]];
        let wander = rng.gen_range(0..=6usize);
        for _ in 0..wander {
            let here = *trail.last().unwrap();
            let nbrs = graph.neighbors(here).unwrap();
            trail.push(nbrs[rng.gen_range(0..nbrs.len())].0);
        }
        // Check the teacher at every prefix of the trail.
        for cut in 1..=trail.len() {
            let prefix = &trail[..cut];
            let mut ctx = TeacherContext::new(&reference)?;
            for &node in prefix {
                ctx.observe(node);
            }
            let got = fidelity_reference_action(&graph, &ctx)?;
            let want = oracle_teacher(&graph, &reference, prefix);
            assert_eq!(
                got, want,
                "teacher disagrees: world {i}, reference {reference:?}, trail {prefix:?}"
            );
            states += 1;
        }
    }

    // The constructed multi-visit instance: R = x-a-x-b revisits x, so the
    // first arrival heads for a, the second for b, and later arrivals stay
    // pinned to the final occurrence.
    let (graph, x, a, b) = find_multi_visit_world();
    let reference = vec![x, a, x, b];
    let checks = [
        (vec![x], Action::MoveTo(a)),
        (vec![x, a], Action::MoveTo(x)),
        (vec![x, a, x], Action::MoveTo(b)),
        (vec![x, a, x, a], Action::MoveTo(x)),
        (vec![x, a, x, a, x], Action::MoveTo(b)),
        (vec![x, a, x, b], Action::Stop),
    ];
    for (trail, want) in checks {
        let mut ctx = TeacherContext::new(&reference)?;
        for &node in &trail {
            ctx.observe(node);
        }
        assert_eq!(fidelity_reference_action(&graph, &ctx)?, want, "trail {trail:?}");
        let oracle = oracle_teacher(&graph, &reference, &trail);
        assert_eq!(oracle, want, "oracle itself disagrees on {trail:?}");
        states += 1;
    }
    Ok(format!("50 instances, {states} states, exact match"))
}

/// A world plus nodes x, a, b where x-a and x-b are edges (a != b).
fn find_multi_visit_world() -> (EnvGraph, NodeId, NodeId, NodeId) {
    for seed in 0..50 {
        let graph = small_world(1300 + seed, 6);
        for x in 0..graph.node_count() as NodeId {
            let nbrs = graph.neighbors(x).unwrap();
            if nbrs.len() >= 2 {
                return (graph.clone(), x, nbrs[0].0, nbrs[1].0);
            }
        }
    }
    panic!("no world with a degree-2 node in 50 seeds");
}

// ---------------------------------------------------------------------------
// Criterion 6: the teacher/student mixing rate is calibrated
// ---------------------------------------------------------------------------

fn criterion_6_mixing() -> Result<String> {
    let eta = 1.0 / 3.0;
    let teacher = Action::MoveTo(0);
    // A student that always proposes a recognizably different action.
    let student = ActionPosterior {
        actions: vec![Action::MoveTo(0), Action::MoveTo(1)],
        probs: vec![0.0, 1.0],
        log_scores: vec![-1e9, 0.0],
    };
    let mut rng = derived_rng(46, "mixing-rate");
    let mut student_picks = 0usize;
    let draws = 10_000;
    for _ in 0..draws {
        match mix_next_action(teacher, &student, eta, &mut rng)? {
            Action::MoveTo(1) => student_picks += 1,
            Action::MoveTo(0) => {}
            other => panic!("mixing invented {other:?}"),
        }
    }
    let rate = student_picks as f64 / draws as f64;
    if (rate - eta).abs() > 0.02 {
        return Err(navgen::NavError::Numerical(format!(
            "student rate {rate:.4} deviates from {eta:.4} by more than 0.02"
        )));
    }
    Ok(format!("student rate {rate:.4} vs eta {:.4} over {draws} draws", eta))
}

// ---------------------------------------------------------------------------
// Criterion 7: both policies train to useful success on the default data
// ---------------------------------------------------------------------------

fn criterion_7_training_smoke() -> Result<String> {
    let t0 = Instant::now();
    let data_cfg = DataConfig::default();
    let dataset = build_dataset(&data_cfg, 0)?;
    let val: Vec<Episode> = dataset
        .select(Flavor::R2r, Split::ValSeen)
        .into_iter()
        .cloned()
        .collect();

    // Discriminative follower.
    let follower_cfg = TrainConfig {
        model: ModelKind::Follower,
        epochs: FOLLOWER_EPOCHS,
        lr: SMOKE_LR,
        seed: 7,
        ..TrainConfig::default()
    };
    let follower = train(&follower_cfg, &dataset)?;
    let f_first = follower.log.first().unwrap().mean_loss;
    let f_last = follower.log.last().unwrap().mean_loss;
    let (_, f_report) = evaluate_policy(&follower.model, &dataset, &val, 20)?;
    let f_sr = f_report.mean.sr;
    eprintln!(
        "smoke follower: loss {f_first:.4} -> {f_last:.4}, val_seen SR {f_sr:.3}, {:.0}s",
        t0.elapsed().as_secs_f64()
    );

    // Generative speaker: teacher-forced warmup, then student-forced
    // epochs to close the train/rollout state mismatch.
    let sup_cfg = TrainConfig {
        model: ModelKind::Speaker,
        epochs: SPEAKER_SUP_EPOCHS,
        lr: SMOKE_LR,
        seed: 7,
        ..TrainConfig::default()
    };
    let warm = train(&sup_cfg, &dataset)?;
    let s_first = warm.log.first().unwrap().mean_loss;
    let fid_cfg = TrainConfig {
        model: ModelKind::Speaker,
        epochs: SPEAKER_FID_EPOCHS,
        supervision: Supervision::Fidelity,
        lr: SMOKE_LR,
        seed: 7,
        ..TrainConfig::default()
    };
    let speaker = train_from(&fid_cfg, &dataset, Some(warm.model))?;
    let s_last = speaker.log.last().unwrap().mean_loss;
    let (_, s_report) = evaluate_policy(&speaker.model, &dataset, &val, 20)?;
    let s_sr = s_report.mean.sr;
    let secs = t0.elapsed().as_secs_f64();
    eprintln!("smoke speaker: loss {s_first:.4} -> {s_last:.4}, val_seen SR {s_sr:.3}, {secs:.0}s");

    for (name, sr) in [("follower", f_sr), ("speaker", s_sr)] {
        if sr <= SMOKE_SR_FLOOR {
            return Err(navgen::NavError::Numerical(format!(
                "build failure: {name} val_seen SR {sr:.3} is not above {SMOKE_SR_FLOOR}"
            )));
        }
        if sr < SMOKE_SR_GATE {
            return Err(navgen::NavError::Numerical(format!(
                "{name} val_seen SR {sr:.3} is below the {SMOKE_SR_GATE} gate"
            )));
        }
    }
    if f_last >= 0.5 * f_first || s_last >= 0.5 * s_first {
        return Err(navgen::NavError::Numerical(format!(
            "loss did not halve: follower {f_first:.3}->{f_last:.3}, speaker {s_first:.3}->{s_last:.3}"
        )));
    }
    if secs >= SMOKE_TIME_BUDGET_SECS {
        return Err(navgen::NavError::Numerical(format!(
            "training smoke took {secs:.0}s, budget {SMOKE_TIME_BUDGET_SECS:.0}s"
        )));
    }
    Ok(format!(
        "follower SR {f_sr:.3}, speaker SR {s_sr:.3} on {} val_seen episodes in {secs:.0}s",
        val.len()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 8: the generative policy holds up on unseen worlds
// ---------------------------------------------------------------------------

#[derive(Default, Clone, Copy)]
struct MeanRow {
    pl: f64,
    ne: f64,
    sr: f64,
    spl: f64,
    cls: f64,
    ndtw: f64,
    sdtw: f64,
}

impl MeanRow {
    fn add(&mut self, m: &navgen::metrics::EpisodeMetrics, w: f64) {
        self.pl += w * m.pl;
        self.ne += w * m.ne;
        self.sr += w * m.sr;
        self.spl += w * m.spl;
        self.cls += w * m.cls;
        self.ndtw += w * m.ndtw;
        self.sdtw += w * m.sdtw;
    }
}

fn criterion_8_directional() -> Result<String> {
    let data_cfg = DataConfig {
        seed: 1717,
        train_worlds: 4,
        unseen_worlds: 3,
        trajectories_per_world: 16,
        val_seen_per_world: 4,
        unseen_per_world: 8,
        ..DataConfig::default()
    };
    let dataset = build_dataset(&data_cfg, 0)?;
    let splits = [Split::ValSeen, Split::ValUnseen];
    let policies = ["disc", "gen", "combined", "combined_backtrack"];
    let mut table: HashMap<(Split, &str), MeanRow> = HashMap::new();
    let mut unseen_sr: HashMap<&str, Vec<f64>> = HashMap::new();
    let w = 1.0 / DIRECTIONAL_SEEDS.len() as f64;

    for &seed in &DIRECTIONAL_SEEDS {
        let model_cfg = ModelConfig {
            hidden: DIRECTIONAL_HIDDEN,
            token_embed: DIRECTIONAL_HIDDEN / 2,
            ..tiny_model_cfg(&dataset, DIRECTIONAL_HIDDEN)
        };
        let follower_cfg = TrainConfig {
            model: ModelKind::Follower,
            epochs: DIRECTIONAL_FOLLOWER_EPOCHS,
            lr: SMOKE_LR,
            seed,
            model_cfg: model_cfg.clone(),
            ..TrainConfig::default()
        };
        let follower = match train(&follower_cfg, &dataset)?.model {
            TrainedModel::Follower(f) => f,
            _ => unreachable!(),
        };
        let sup_cfg = TrainConfig {
            model: ModelKind::Speaker,
            epochs: DIRECTIONAL_SPEAKER_SUP_EPOCHS,
            lr: SMOKE_LR,
            seed,
            model_cfg: model_cfg.clone(),
            ..TrainConfig::default()
        };
        let warm = train(&sup_cfg, &dataset)?;
        let fid_cfg = TrainConfig {
            model: ModelKind::Speaker,
            epochs: DIRECTIONAL_SPEAKER_FID_EPOCHS,
            supervision: Supervision::Fidelity,
            lr: SMOKE_LR,
            seed,
            model_cfg: model_cfg.clone(),
            ..TrainConfig::default()
        };
        let speaker = match train_from(&fid_cfg, &dataset, Some(warm.model))?.model {
            TrainedModel::Speaker(s) => s,
            _ => unreachable!(),
        };

        for &split in &splits {
            let episodes: Vec<Episode> =
                dataset.select(Flavor::R2r, split).into_iter().cloned().collect();
            for &policy in &policies {
                let report = match policy {
                    "disc" => {
                        rollout_and_evaluate(
                            || DiscSelector { follower: &follower },
                            &dataset,
                            &episodes,
                            20,
                            DEFAULT_SUCCESS_RADIUS,
                        )?
                        .1
                    }
                    "gen" => {
                        rollout_and_evaluate(
                            || GenSelector { speaker: &speaker },
                            &dataset,
                            &episodes,
                            20,
                            DEFAULT_SUCCESS_RADIUS,
                        )?
                        .1
                    }
                    "combined" => {
                        rollout_and_evaluate(
                            || navgen::policies::CombinedSelector {
                                speaker: &speaker,
                                follower: &follower,
                                beta: 0.5,
                            },
                            &dataset,
                            &episodes,
                            20,
                            DEFAULT_SUCCESS_RADIUS,
                        )?
                        .1
                    }
                    _ => {
                        let rules = BacktrackRules::default();
                        let runs: Vec<Trajectory> = episodes
                            .iter()
                            .map(|episode| -> Result<Trajectory> {
                                let graph = dataset.world(&episode.env_id)?;
                                let mut sel = navgen::policies::CombinedSelector {
                                    speaker: &speaker,
                                    follower: &follower,
                                    beta: 0.5,
                                };
                                Ok(backtracking_rollout(&mut sel, graph, episode, 20, &rules)?.0)
                            })
                            .collect::<Result<_>>()?;
                        evaluate(&dataset, &runs, DEFAULT_SUCCESS_RADIUS)?
                    }
                };
                table.entry((split, policy)).or_default().add(&report.mean, w);
                if split == Split::ValUnseen {
                    unseen_sr.entry(policy).or_default().push(report.mean.sr);
                }
            }
        }
        eprintln!(
            "directional seed {seed}: unseen SR disc {:.3} gen {:.3} combined {:.3}",
            unseen_sr["disc"].last().unwrap(),
            unseen_sr["gen"].last().unwrap(),
            unseen_sr["combined"].last().unwrap()
        );
    }

    // The scaled counterpart of the headline result table.
    println!("  mean over {} seeds:", DIRECTIONAL_SEEDS.len());
    println!(
        "  {:<11} {:<19} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
        "split", "policy", "PL", "NE", "SR", "SPL", "CLS", "nDTW", "SDTW"
    );
    for &split in &splits {
        for &policy in &policies {
            let row = table[&(split, policy)];
            println!(
                "  {:<11} {:<19} {:>6.2} {:>6.2} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
                format!("{split:?}"),
                policy,
                row.pl,
                row.ne,
                row.sr,
                row.spl,
                row.cls,
                row.ndtw,
                row.sdtw
            );
        }
    }

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let disc = mean(&unseen_sr["disc"]);
    let gen = mean(&unseen_sr["gen"]);
    let combined = mean(&unseen_sr["combined"]);
    if gen < disc - DIRECTIONAL_SLACK {
        return Err(navgen::NavError::Numerical(format!(
            "generative unseen SR {gen:.3} trails discriminative {disc:.3} by more than {DIRECTIONAL_SLACK}"
        )));
    }
    if combined < disc.max(gen) - DIRECTIONAL_SLACK {
        return Err(navgen::NavError::Numerical(format!(
            "combined unseen SR {combined:.3} trails max({disc:.3}, {gen:.3}) by more than {DIRECTIONAL_SLACK}"
        )));
    }
    Ok(format!(
        "mean val_unseen SR: disc {disc:.3}, gen {gen:.3}, combined {combined:.3} over {} seeds",
        DIRECTIONAL_SEEDS.len()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 9: token-entropy invariants
// ---------------------------------------------------------------------------

fn criterion_9_tent() -> Result<String> {
    // Exact constructions.
    assert_eq!(token_entropy(&[0.25, 0.25, 0.25, 0.25]), 1.0);
    assert_eq!(token_entropy(&[0.5, 0.5]), 1.0);
    assert_eq!(token_entropy(&[1.0, 0.0, 0.0]), 0.0);
    let half = token_entropy(&[0.5, 0.5, 0.0, 0.0]);
    if (half - 0.5).abs() > 1e-12 {
        return Err(navgen::NavError::Numerical(format!(
            "(0.5,0.5,0,0) entropy {half} is not 0.5 within 1e-12"
        )));
    }

    // A fresh speaker's zero output layer scores every action identically,
    // so the whole profile is exactly 1 through the full pipeline.
    let dataset = DataConfig {
        seed: 23,
        train_worlds: 3,
        unseen_worlds: 1,
        trajectories_per_world: 12,
        val_seen_per_world: 3,
        unseen_per_world: 2,
        ..DataConfig::default()
    };
    let dataset = build_dataset(&dataset, 0)?;
    let cfg = tiny_model_cfg(&dataset, 16);
    let fresh = SpeakerModel::init(&cfg, 3)?;
    let episode = dataset
        .episodes
        .iter()
        .find(|e| e.flavor == Flavor::R2r)
        .unwrap();
    let graph = dataset.world(&episode.env_id)?;
    let s = tent_step(&fresh, graph, &episode.instruction.tokens, &[episode.start])?;
    assert!(
        s.iter().all(|&x| x == 1.0),
        "identical conditionals must give exactly 1.0"
    );

    // Bounds on 100 traced episodes with a non-degenerate speaker.
    let speaker = jittered_speaker(&cfg, 31, 0.4);
    let episodes: Vec<&Episode> = dataset
        .episodes
        .iter()
        .filter(|e| e.flavor == Flavor::R2r)
        .take(100)
        .collect();
    assert!(episodes.len() >= 100, "need 100 episodes, have {}", episodes.len());
    let mut tokens_checked = 0usize;
    for episode in &episodes {
        let graph = dataset.world(&episode.env_id)?;
        let mut selector = OracleSelector;
        let profiles = tent_trace(&speaker, graph, episode, &mut selector, 20)?;
        for p in &profiles {
            for &x in &p.s {
                assert!((0.0..=1.0).contains(&x), "S {x} out of bounds");
                tokens_checked += 1;
            }
        }
    }
    Ok(format!(
        "exact cases hold; {tokens_checked} token entropies within [0,1] over {} episodes",
        episodes.len()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 10: revisit-triggered backtracking
// ---------------------------------------------------------------------------

/// Walks a fixed node plan, then prefers stopping.
struct Scripted {
    plan: Vec<NodeId>,
}

impl ActionSelector for Scripted {
    fn log_scores(&mut self, ctx: &StepContext) -> Result<Vec<f64>> {
        let want = self.plan.get(ctx.step).copied();
        Ok(ctx
            .actions
            .iter()
            .map(|a| match (a, want) {
                (Action::MoveTo(v), Some(w)) if *v == w => 8.0,
                (Action::Stop, None) => 8.0,
                _ => 0.0,
            })
            .collect())
    }
}

/// A world with a start `s` adjacent to a triangle a-b-c-a.
fn find_loop_world() -> (EnvGraph, NodeId, NodeId, NodeId, NodeId) {
    for seed in 0..200 {
        let graph = small_world(1500 + seed, 8);
        let nc = graph.node_count() as NodeId;
        for a in 0..nc {
            let a_nbrs: Vec<NodeId> =
                graph.neighbors(a).unwrap().iter().map(|&(v, _)| v).collect();
            for &b in &a_nbrs {
                let b_nbrs: Vec<NodeId> =
                    graph.neighbors(b).unwrap().iter().map(|&(v, _)| v).collect();
                for &c in &b_nbrs {
                    if c != a && a_nbrs.contains(&c) {
                        if let Some(&s) =
                            a_nbrs.iter().find(|&&s| s != b && s != c)
                        {
                            return (graph.clone(), s, a, b, c);
                        }
                    }
                }
            }
        }
    }
    panic!("no triangle with a pendant start in 200 seeds");
}

fn criterion_10_backtracking() -> Result<String> {
    let (graph, s, a, b, c) = find_loop_world();
    let goal = a;
    let reference = shortest_path(&graph, s, goal)?.0;
    let episode = Episode {
        episode_id: "loop-fixture".to_string(),
        env_id: graph.env_id.clone(),
        start: s,
        goal,
        reference_path: reference,
        instruction: Instruction {
            tokens: vec![0, 1],
            text: "loop".to_string(),
            style: Style::Terse,
        },
        split: Split::Train,
        flavor: Flavor::R2r,
    };
    // The script s -> a -> b -> c -> a revisits a on the 4th decision.
    let plan = vec![a, b, c, a];

    let plain = rollout(&mut Scripted { plan: plan.clone() }, &graph, &episode, 20)?;
    let rules = BacktrackRules::default();
    let (traj, state) =
        backtracking_rollout(&mut Scripted { plan: plan.clone() }, &graph, &episode, 20, &rules)?;
    traj.validate(&graph)?;

    if !state.triggered {
        return Err(navgen::NavError::Numerical(
            "revisiting a node did not trigger a backtrack".to_string(),
        ));
    }
    // The trigger fires exactly at the first revisit: decision 4 (the move
    // back onto `a`), and never spuriously before or after.
    if state.backtrack_steps != vec![4] {
        return Err(navgen::NavError::Numerical(format!(
            "expected one backtrack at decision 4, got {:?}",
            state.backtrack_steps
        )));
    }
    // The physical trajectory walks the loop and then the return leg; the
    // believed-state rewind sends the agent back toward the start.
    assert_eq!(traj.nodes[..5], [s, a, b, c, a], "loop prefix missing");
    assert!(traj.nodes.len() > 5, "return walk motion missing");
    let pl_plain = path_length(&graph, &plain.nodes)?;
    let pl_back = path_length(&graph, &traj.nodes)?;
    if pl_back <= pl_plain {
        return Err(navgen::NavError::Numerical(format!(
            "backtracking PL {pl_back:.2} did not exceed plain PL {pl_plain:.2}"
        )));
    }
    Ok(format!(
        "trigger at decision 4, walk appended ({} -> {} nodes), PL {:.2} -> {:.2}",
        plain.nodes.len(),
        traj.nodes.len(),
        pl_plain,
        pl_back
    ))
}

// ---------------------------------------------------------------------------
// Criterion 11: byte-identical artifacts
// ---------------------------------------------------------------------------

fn criterion_11_determinism() -> Result<String> {
    let dataset = tiny_dataset(29);
    let cfg = TrainConfig {
        model: ModelKind::Follower,
        epochs: 2,
        lr: 1e-3,
        seed: 77,
        model_cfg: tiny_model_cfg(&dataset, 16),
        ..TrainConfig::default()
    };
    let speaker_cfg = TrainConfig {
        model: ModelKind::Speaker,
        epochs: 1,
        ..cfg.clone()
    };
    let vocab_hash = dataset.manifest.vocab_hash.clone();
    let dir = tempfile::tempdir().unwrap();

    let mut artifacts: Vec<(String, Vec<u8>, Vec<u8>)> = Vec::new();
    for run in 0..2 {
        for (name, train_cfg) in [("follower", &cfg), ("speaker", &speaker_cfg)] {
            let outcome = train(train_cfg, &dataset)?;
            let ckpt = outcome.model.to_checkpoint(train_cfg, &vocab_hash)?;
            let ckpt_path = dir.path().join(format!("{name}-{run}.ckpt.json"));
            ckpt.save(&ckpt_path)?;
            let log_path = dir.path().join(format!("{name}-{run}.log.jsonl"));
            navgen::learn::save_train_log(&log_path, &outcome.log)?;

            let val: Vec<Episode> = dataset
                .select(Flavor::R2r, Split::ValSeen)
                .into_iter()
                .cloned()
                .collect();
            let (trajectories, report) = evaluate_policy(&outcome.model, &dataset, &val, 20)?;
            let traj_path = dir.path().join(format!("{name}-{run}.traj.jsonl"));
            navgen::policies::save_trajectories(&traj_path, &trajectories)?;
            let metrics_path = dir.path().join(format!("{name}-{run}.metrics.json"));
            navgen::metrics::write_metrics_json(&metrics_path, &report)?;

            for (kind, path) in [
                ("checkpoint", &ckpt_path),
                ("train log", &log_path),
                ("trajectories", &traj_path),
                ("metrics", &metrics_path),
            ] {
                let bytes = std::fs::read(path)?;
                let key = format!("{name} {kind}");
                if run == 0 {
                    artifacts.push((key, bytes, Vec::new()));
                } else {
                    let slot = artifacts
                        .iter_mut()
                        .find(|(k, _, _)| *k == key)
                        .expect("second run matches first run's artifact set");
                    slot.2 = bytes;
                }
            }
        }
    }
    for (key, first, second) in &artifacts {
        if first != second {
            return Err(navgen::NavError::Numerical(format!(
                "{key} differs between identical runs"
            )));
        }
    }
    Ok(format!(
        "{} artifacts byte-identical across two runs (checkpoints, logs, trajectories, metrics)",
        artifacts.len()
    ))
}

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let all: Vec<(usize, &str, fn() -> Result<String>)> = vec![
        (1, "autodiff-finite-differences", criterion_1_autodiff),
        (2, "action-posterior", criterion_2_posterior),
        (3, "speaker-loss-identity", criterion_3_loss_identity),
        (4, "metric-oracles", criterion_4_metric_oracles),
        (5, "fidelity-teacher", criterion_5_fidelity_teacher),
        (6, "teacher-student-mixing", criterion_6_mixing),
        (7, "training-smoke", criterion_7_training_smoke),
        (8, "generative-vs-discriminative", criterion_8_directional),
        (9, "token-entropy", criterion_9_tent),
        (10, "backtracking", criterion_10_backtracking),
        (11, "determinism", criterion_11_determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPT_ONLY").ok().map(|s| {
        s.split(',')
            .filter_map(|x| x.trim().parse().ok())
            .collect()
    });
    let mut failures = Vec::new();
    for (id, name, run) in all {
        if let Some(only) = &only {
            if !only.contains(&id) {
                continue;
            }
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(run);
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(Ok(detail)) => {
                println!("criterion {id:>2} [{name}] PASS — {detail} ({secs:.1}s)");
            }
            Ok(Err(e)) => {
                println!("criterion {id:>2} [{name}] FAIL — {e} ({secs:.1}s)");
                failures.push((id, name, e.to_string()));
            }
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".to_string());
                println!("criterion {id:>2} [{name}] FAIL — {msg} ({secs:.1}s)");
                failures.push((id, name, msg));
            }
        }
    }
    assert!(
        failures.is_empty(),
        "{} acceptance criteria failed: {:?}",
        failures.len(),
        failures.iter().map(|(id, name, _)| format!("{id} {name}")).collect::<Vec<_>>()
    );
}
