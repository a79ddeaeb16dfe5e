//! Token-wise prediction entropy: which instruction tokens discriminate
//! between the candidate actions at each step.
//!
//! At a decision with candidates `A`, the speaker assigns every token
//! position a conditional `p(w_k | a, history, w_{:k−1})` per action. Let
//!
//! ```text
//! q(a, w_k) = p(w_k | a, ·) / Σ_{a′} p(w_k | a′, ·)
//! S(w_k)    = −Σ_a q(a, w_k) · log_{|A|} q(a, w_k)
//! ```
//!
//! `S` is the entropy of the per-token action weighting, normalized to
//! `[0, 1]` by taking logs base `|A|`. A token whose conditional is the same
//! under every action carries no information about which action to take
//! (`S = 1`); a token predicted by exactly one action pins it down
//! completely (`S = 0`, with the `0·log 0 = 0` convention). Plots show
//! `1 − S`, so discriminative tokens spike upward.
//!
//! A single candidate (`|A| = 1`) leaves nothing to discriminate; `S` is
//! defined as all-ones for that step.

use std::io::Write;
use std::path::Path;

use crate::dataset::Episode;
use crate::error::{NavError, Result};
use crate::instructions::build_vocab;
use crate::models::SpeakerModel;
use crate::ndgrad::Tape;
use crate::policies::{history_inputs, ActionSelector, StepContext};
use crate::world::{Action, EnvGraph, NodeId};

/// Entropy profile of every scored token position at one decision.
#[derive(Debug, Clone)]
pub struct TentProfile {
    /// Decision index within the rollout.
    pub t: usize,
    /// The scored tokens, in order (every token after the leading marker).
    pub tokens: Vec<String>,
    /// `S(w_k)` per scored token, each in `[0, 1]`.
    pub s: Vec<f64>,
    /// The action the selector chose at this step.
    pub chosen: Action,
    /// Number of candidate actions at this step.
    pub num_actions: usize,
}

impl TentProfile {
    /// The plotted quantity: `1 − S` per token.
    pub fn one_minus_s(&self) -> Vec<f64> {
        self.s.iter().map(|&x| 1.0 - x).collect()
    }
}

/// Entropy of `q` in base `q.len()`, with `0·log 0 = 0`. Callers pass a
/// normalized weighting; an all-equal input short-circuits to exactly 1
/// and a one-hot input yields exactly 0.
pub fn token_entropy(q: &[f64]) -> f64 {
    let n = q.len();
    if n <= 1 {
        return 1.0;
    }
    if q.iter().all(|&x| x == q[0]) {
        // Identical weights are exactly uniform; the entropy is exactly 1
        // even when 1/n is not representable.
        return 1.0;
    }
    let ln_n = (n as f64).ln();
    let mut h = 0.0;
    for &qi in q {
        if qi > 0.0 {
            h -= qi * qi.ln();
        }
    }
    (h / ln_n).clamp(0.0, 1.0)
}

/// Per-token `S` values for one decision state: the end of `trail` with the
/// instruction `tokens`. Returns one value per scored position
/// (`tokens.len() − 1`).
pub fn tent_step(
    speaker: &SpeakerModel,
    graph: &EnvGraph,
    tokens: &[u32],
    trail: &[NodeId],
) -> Result<Vec<f64>> {
    let node = *trail
        .last()
        .ok_or(NavError::Config("tent_step needs a nonempty trail".to_string()))?;
    let actions = graph.candidate_actions(node)?;
    if actions.len() == 1 {
        // Nothing to discriminate between.
        return Ok(vec![1.0; tokens.len().saturating_sub(1)]);
    }
    let mut tape = Tape::new();
    let (obs, moves) = history_inputs(graph, trail)?;
    let hist = speaker.encode_history(&mut tape, &obs, &moves)?;
    let cand = speaker.candidate_matrix(&mut tape, graph, node, &actions)?;
    let batch = speaker.lm_scores_batched(&mut tape, &hist, cand, tokens)?;
    let per_token = tape.value(batch.per_token);
    let (rows, cols) = (per_token.shape()[0], per_token.shape()[1]);
    let data = per_token.data();
    let mut out = Vec::with_capacity(rows);
    for k in 0..rows {
        let row = &data[k * cols..(k + 1) * cols];
        // q = softmax over actions of the log-conditionals; multiplying all
        // p(w_k | a, ·) by a positive constant shifts every entry equally
        // and cancels here.
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut q: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = q.iter().sum();
        for qi in q.iter_mut() {
            *qi /= z;
        }
        out.push(token_entropy(&q));
    }
    Ok(out)
}

/// Roll `episode` with `selector`, recording a [`TentProfile`] at every
/// decision before the action is taken.
pub fn tent_trace<S: ActionSelector>(
    speaker: &SpeakerModel,
    graph: &EnvGraph,
    episode: &Episode,
    selector: &mut S,
    max_steps: usize,
) -> Result<Vec<TentProfile>> {
    let vocab = build_vocab();
    let tokens = &episode.instruction.tokens;
    let token_texts: Vec<String> = tokens[1..]
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("?").to_string())
        .collect();

    let mut trail = vec![episode.start];
    let mut profiles = Vec::new();
    for step in 0..max_steps {
        let node = *trail.last().unwrap();
        let actions = graph.candidate_actions(node)?;
        let s = tent_step(speaker, graph, tokens, &trail)?;
        let ctx = StepContext {
            graph,
            episode,
            trail: &trail,
            actions: &actions,
            step,
        };
        let scores = selector.log_scores(&ctx)?;
        if scores.len() != actions.len() {
            return Err(NavError::Config(format!(
                "selector returned {} scores for {} actions",
                scores.len(),
                actions.len()
            )));
        }
        let mut best = 0;
        for (i, &v) in scores.iter().enumerate() {
            if v > scores[best] {
                best = i;
            }
        }
        let chosen = actions[best];
        profiles.push(TentProfile {
            t: step,
            tokens: token_texts.clone(),
            s,
            chosen,
            num_actions: actions.len(),
        });
        match chosen {
            Action::Stop => break,
            Action::MoveTo(v) => trail.push(v),
        }
    }
    Ok(profiles)
}

/// Offset convention for the chart: each decision's curve is drawn at
/// `t + (1 − S)/TICK`, so one vertical tick equals this much `1 − S`.
pub const TICK: f64 = 0.05;

/// Write `tent.csv` and `tent.svg` under `out_dir`. An empty profile list
/// warns and writes nothing.
pub fn render_tent(profiles: &[TentProfile], out_dir: &Path) -> Result<()> {
    if profiles.is_empty() {
        eprintln!("warning: no entropy profiles to render; skipping output");
        return Ok(());
    }
    std::fs::create_dir_all(out_dir)?;
    write_tent_csv(profiles, &out_dir.join("tent.csv"))?;
    write_tent_svg(profiles, &out_dir.join("tent.svg"))?;
    Ok(())
}

/// CSV rows `(t, k, token, S, 1−S)`, one per scored token per decision.
pub fn write_tent_csv(profiles: &[TentProfile], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,k,token,S,1-S")?;
    for p in profiles {
        for (k, (token, &s)) in p.tokens.iter().zip(p.s.iter()).enumerate() {
            writeln!(out, "{},{},{},{},{}", p.t, k, token, s, 1.0 - s)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Hand-rolled static SVG: one polyline per decision at vertical offset
/// `t`, scaled so one tick of the y grid is [`TICK`] of `1 − S`, colored
/// by `t`.
pub fn write_tent_svg(profiles: &[TentProfile], path: &Path) -> Result<()> {
    let positions = profiles.iter().map(|p| p.s.len()).max().unwrap_or(0);
    if positions == 0 {
        return Err(NavError::Config("profiles have no scored tokens".to_string()));
    }
    // Plot-value range: curve t spans [t, t + 1/TICK].
    let max_t = profiles.iter().map(|p| p.t).max().unwrap_or(0);
    let v_max = max_t as f64 + 1.0 / TICK;

    let margin = 40.0;
    let width = 720.0;
    let height = 360.0;
    let plot_w = width - 2.0 * margin;
    let plot_h = height - 2.0 * margin;
    let x_of = |k: usize| -> f64 {
        if positions == 1 {
            margin + plot_w / 2.0
        } else {
            margin + plot_w * k as f64 / (positions - 1) as f64
        }
    };
    let y_of = |v: f64| -> f64 { margin + plot_h * (1.0 - v / v_max) };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" font-family=\"sans-serif\">\
         1-TENT per token, one curve per step (tick = {TICK})</text>\n",
        margin,
        margin - 18.0
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = margin,
        b = height - margin,
        r = width - margin
    ));
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = margin,
        t = margin,
        b = height - margin
    ));
    // Token labels along the x axis, skipping as needed to stay readable.
    let label_stride = (positions / 24).max(1);
    if let Some(p0) = profiles.first() {
        for (k, token) in p0.tokens.iter().enumerate().step_by(label_stride) {
            svg.push_str(&format!(
                "<text x=\"{x}\" y=\"{y}\" font-size=\"8\" font-family=\"sans-serif\" \
                 text-anchor=\"end\" transform=\"rotate(-60 {x} {y})\">{token}</text>\n",
                x = x_of(k),
                y = height - margin + 10.0
            ));
        }
    }
    for p in profiles {
        let hue = (p.t * 47) % 360;
        let pts: Vec<String> = p
            .s
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                let v = p.t as f64 + (1.0 - s) / TICK;
                format!("{},{}", x_of(k), y_of(v))
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"hsl({hue},70%,45%)\" stroke-width=\"1.2\" \
             points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"9\" font-family=\"sans-serif\" \
             fill=\"hsl({hue},70%,45%)\">t={t} {chosen}</text>\n",
            x = width - margin + 4.0,
            y = y_of(p.t as f64),
            t = p.t,
            chosen = p.chosen
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, DataConfig};
    use crate::models::ModelConfig;
    use crate::policies::OracleSelector;
    use crate::seeds::derived_rng;
    use rand::Rng;

    fn tiny_dataset() -> crate::dataset::Dataset {
        let cfg = DataConfig {
            train_worlds: 2,
            unseen_worlds: 1,
            trajectories_per_world: 4,
            val_seen_per_world: 2,
            unseen_per_world: 2,
            ..DataConfig::default()
        };
        build_dataset(&cfg, 0).unwrap()
    }

    fn speaker_for(dataset: &crate::dataset::Dataset, jittered: bool) -> SpeakerModel {
        let (_, graph) = dataset.worlds.first().unwrap();
        let cfg = ModelConfig {
            hidden: 8,
            token_embed: 4,
            d_v: graph.node(0).unwrap().visual_feature.len(),
            vocab: build_vocab().len(),
        };
        let mut speaker = SpeakerModel::init(&cfg, 5).unwrap();
        if jittered {
            let mut rng = derived_rng(6, "tent-jitter");
            let names: Vec<String> = speaker.params.names().cloned().collect();
            for name in names {
                for x in speaker.params.get_mut(&name).unwrap().data_mut() {
                    *x += rng.gen_range(-0.3..0.3);
                }
            }
        }
        speaker
    }

    #[test]
    fn entropy_hits_the_pinned_values() {
        // Uniform weighting over 2 or 4 actions → exactly 1.
        assert_eq!(token_entropy(&[0.5, 0.5]), 1.0);
        assert_eq!(token_entropy(&[0.25, 0.25, 0.25, 0.25]), 1.0);
        // One-hot → exactly 0 by the 0·log 0 convention.
        assert_eq!(token_entropy(&[1.0, 0.0, 0.0]), 0.0);
        // Half the mass on each of two of four actions → 1/2.
        let s = token_entropy(&[0.5, 0.5, 0.0, 0.0]);
        assert!((s - 0.5).abs() < 1e-12, "{s}");
        // Unequal-thirds stays inside [0, 1].
        let s = token_entropy(&[0.6, 0.3, 0.1]);
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn untrained_speaker_gives_all_ones() {
        // A zero-initialized output layer makes every action's conditional
        // identical, so every token is uninformative.
        let dataset = tiny_dataset();
        let (_, graph) = dataset.worlds.first().unwrap();
        let episode = dataset
            .episodes
            .iter()
            .find(|e| e.env_id == graph.env_id)
            .unwrap();
        let speaker = speaker_for(&dataset, false);
        let s = tent_step(
            &speaker,
            graph,
            &episode.instruction.tokens,
            &[episode.start],
        )
        .unwrap();
        assert_eq!(s.len(), episode.instruction.tokens.len() - 1);
        assert!(s.iter().all(|&x| x == 1.0), "{s:?}");
    }

    #[test]
    fn jittered_speaker_stays_in_bounds_and_discriminates() {
        let dataset = tiny_dataset();
        let (_, graph) = dataset.worlds.first().unwrap();
        let episode = dataset
            .episodes
            .iter()
            .find(|e| e.env_id == graph.env_id)
            .unwrap();
        let speaker = speaker_for(&dataset, true);
        let s = tent_step(
            &speaker,
            graph,
            &episode.instruction.tokens,
            &[episode.start],
        )
        .unwrap();
        assert!(s.iter().all(|&x| (0.0..=1.0).contains(&x)));
        // Perturbed weights must distinguish at least one token.
        assert!(s.iter().any(|&x| x < 1.0));
    }

    #[test]
    fn trace_profiles_line_up_with_the_rollout() {
        let dataset = tiny_dataset();
        let (_, graph) = dataset.worlds.first().unwrap();
        let episode = dataset
            .episodes
            .iter()
            .find(|e| e.env_id == graph.env_id)
            .unwrap();
        let speaker = speaker_for(&dataset, true);
        let mut selector = OracleSelector;
        let profiles =
            tent_trace(&speaker, graph, episode, &mut selector, 20).unwrap();
        // The oracle walks the reference path and stops: one profile per
        // decision, the last one choosing Stop.
        assert_eq!(profiles.len(), episode.reference_path.len());
        assert_eq!(profiles.last().unwrap().chosen, Action::Stop);
        for (i, p) in profiles.iter().enumerate() {
            assert_eq!(p.t, i);
            assert_eq!(p.s.len(), episode.instruction.tokens.len() - 1);
            assert_eq!(p.tokens.len(), p.s.len());
            assert!(p.num_actions >= 1);
            assert!(p.s.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        // Determinism: a second trace is identical.
        let again = tent_trace(&speaker, graph, episode, &mut selector, 20).unwrap();
        for (a, b) in profiles.iter().zip(again.iter()) {
            assert_eq!(a.s, b.s);
            assert_eq!(a.chosen, b.chosen);
        }
    }

    #[test]
    fn render_writes_csv_and_svg() {
        let dataset = tiny_dataset();
        let (_, graph) = dataset.worlds.first().unwrap();
        let episode = dataset
            .episodes
            .iter()
            .find(|e| e.env_id == graph.env_id)
            .unwrap();
        let speaker = speaker_for(&dataset, true);
        let mut selector = OracleSelector;
        let profiles =
            tent_trace(&speaker, graph, episode, &mut selector, 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        render_tent(&profiles, dir.path()).unwrap();

        let csv = std::fs::read_to_string(dir.path().join("tent.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,k,token,S,1-S"));
        let rows: usize = lines.count();
        let expect: usize = profiles.iter().map(|p| p.s.len()).sum();
        assert_eq!(rows, expect);

        let svg = std::fs::read_to_string(dir.path().join("tent.svg")).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), profiles.len());

        // Empty input: warn, write nothing.
        let empty = tempfile::tempdir().unwrap();
        render_tent(&[], empty.path()).unwrap();
        assert!(!empty.path().join("tent.csv").exists());
    }
}
