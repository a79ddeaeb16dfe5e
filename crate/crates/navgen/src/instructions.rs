//! Template instruction grammar and tokenizer.
//!
//! Instructions are generated from a reference path by a closed-vocabulary
//! clause grammar: one motion clause per edge (naming the turn direction and
//! the target room, optionally a landmark) followed by a stop clause. Three
//! paraphrase styles render the same path with different surface forms:
//! `terse` uses the minimal clause, `landmark` mentions landmark objects
//! when the target node has them, and `verbose` prefixes motion clauses with
//! ordinal counts. Token sequences always start with BOS and end with EOS,
//! and everything the grammar can emit lives in one canonical vocabulary, so
//! generated data never contains UNK.
//!
//! Turn words follow a fixed geometric convention: a clause says "left"
//! exactly when the signed heading change of the edge (see
//! [`crate::world::signed_heading_change`]) is positive beyond the straight
//! threshold, and "right" when it is negative beyond it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{config_err, NavError, Result};
use crate::world::{path_headings, signed_heading_change, EnvGraph, NodeId};

/// Schema tag for the grammar/vocabulary generation used in data manifests.
pub const INSTR_SCHEMA: &str = "navgen-instr/1";

/// Reserved token ids, fixed forever.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Hard cap on vocabulary size at desk scale.
pub const MAX_VOCAB: usize = 512;

// ============================================================================
// Vocabulary
// ============================================================================

/// Token table with reserved prefix `<pad> <bos> <eos> <unk>` followed by the
/// word list in sorted order. Lookup is by exact string match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build from a word iterator; words are deduplicated and sorted after
    /// the four reserved entries.
    pub fn new(words: impl IntoIterator<Item = String>) -> Result<Vocab> {
        let mut tokens = vec![
            "<pad>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
            "<unk>".to_string(),
        ];
        let mut sorted: Vec<String> = words
            .into_iter()
            .filter(|w| !tokens.contains(w))
            .collect();
        sorted.sort();
        sorted.dedup();
        tokens.extend(sorted);
        if tokens.len() > MAX_VOCAB {
            return config_err(format!(
                "vocabulary of {} tokens exceeds the cap of {MAX_VOCAB}",
                tokens.len()
            ));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content hash of the token table; checkpoints and manifests carry it so
    /// mismatched pairings fail loudly.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        format!("{:x}", hasher.finalize())
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = NavError;
    fn try_from(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < 4
            || tokens[0] != "<pad>"
            || tokens[1] != "<bos>"
            || tokens[2] != "<eos>"
            || tokens[3] != "<unk>"
        {
            return Err(NavError::Data(
                "vocabulary must start with <pad> <bos> <eos> <unk>".to_string(),
            ));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Vec<String> {
        v.tokens
    }
}

// ============================================================================
// Grammar alphabet
// ============================================================================

/// Room categories nodes can carry. These are content words: they appear both
/// in node metadata and in instruction text.
pub fn room_label_palette() -> Vec<String> {
    [
        "kitchen", "hallway", "bedroom", "bathroom", "office", "library", "lounge", "pantry",
        "studio", "garage", "balcony", "foyer",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Landmark objects nodes can carry.
pub fn landmark_palette() -> Vec<String> {
    [
        "plant", "sofa", "lamp", "table", "mirror", "painting", "shelf", "rug", "clock", "vase",
        "piano", "window",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

const ORDINALS: [&str; 15] = [
    "first",
    "second",
    "third",
    "fourth",
    "fifth",
    "sixth",
    "seventh",
    "eighth",
    "ninth",
    "tenth",
    "eleventh",
    "twelfth",
    "thirteenth",
    "fourteenth",
    "fifteenth",
];

const GLUE: [&str; 14] = [
    "go", "walk", "turn", "stop", "to", "the", "in", "near", "with", "straight", "left", "right",
    "then", ".",
];

/// Every word the grammar can emit, including the content palettes.
pub fn grammar_words() -> Vec<String> {
    let mut words: Vec<String> = GLUE.iter().map(|s| s.to_string()).collect();
    words.extend(ORDINALS.iter().map(|s| s.to_string()));
    words.extend(room_label_palette());
    words.extend(landmark_palette());
    words
}

/// The canonical vocabulary covering the full grammar. Cached; building it is
/// pure and deterministic.
pub fn build_vocab() -> &'static Vocab {
    static VOCAB: OnceLock<Vocab> = OnceLock::new();
    VOCAB.get_or_init(|| Vocab::new(grammar_words()).expect("grammar vocabulary under cap"))
}

// ============================================================================
// Instructions
// ============================================================================

/// Paraphrase style of one instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Terse,
    Landmark,
    Verbose,
}

impl Style {
    pub fn all() -> [Style; 3] {
        [Style::Terse, Style::Landmark, Style::Verbose]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Style::Terse => "terse",
            Style::Landmark => "landmark",
            Style::Verbose => "verbose",
        }
    }
}

/// One tokenized instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    /// `[BOS, word ids..., EOS]`.
    pub tokens: Vec<u32>,
    /// Surface form, words joined by single spaces.
    pub text: String,
    pub style: Style,
}

/// Grammar knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrConfig {
    /// Maximum token-sequence length including BOS and EOS.
    pub l_max: usize,
    /// Probability that the landmark style mentions a landmark the target
    /// node actually has.
    pub landmark_rate: f64,
    /// Heading changes with magnitude at or below this many degrees read as
    /// "straight".
    pub straight_threshold_deg: f64,
}

impl Default for InstrConfig {
    fn default() -> Self {
        InstrConfig {
            l_max: 64,
            landmark_rate: 0.7,
            straight_threshold_deg: 30.0,
        }
    }
}

/// Direction word for one edge given the previous edge's bearing.
fn turn_word(change: f64, threshold_deg: f64) -> &'static str {
    let threshold = threshold_deg.to_radians();
    if change > threshold {
        "left"
    } else if change < -threshold {
        "right"
    } else {
        "straight"
    }
}

/// Clause under construction: mandatory words plus droppable decorations.
struct Clause {
    words: Vec<String>,
    /// Index range of an optional "with the <landmark>" suffix, if present.
    landmark_suffix: Option<std::ops::Range<usize>>,
    /// Index of an ordinal prefix word, if present.
    ordinal_prefix: Option<usize>,
}

impl Clause {
    fn plain(words: &[&str]) -> Clause {
        Clause {
            words: words.iter().map(|s| s.to_string()).collect(),
            landmark_suffix: None,
            ordinal_prefix: None,
        }
    }

    fn token_count(&self) -> usize {
        self.words.len()
    }
}

/// Render an instruction for `path` in the given style.
///
/// Deterministic in `(path, style, seed)`: the seed drives only the optional
/// landmark mentions. Paths must be non-empty node sequences with every
/// consecutive pair adjacent; a single-node path yields the stop clause
/// alone. If the rendered clause list would exceed `cfg.l_max` tokens, the
/// generator drops decorations (landmark mentions, then ordinals) from the
/// end of the instruction backwards; a path whose mandatory clauses still do
/// not fit is a configuration error.
pub fn generate_instruction(
    graph: &EnvGraph,
    path: &[NodeId],
    style: Style,
    seed: u64,
    cfg: &InstrConfig,
) -> Result<Instruction> {
    if path.is_empty() {
        return config_err("cannot describe an empty path");
    }
    for w in path.windows(2) {
        if graph.edge_length(w[0], w[1]).is_none() {
            return Err(NavError::IllegalAction(format!(
                "path nodes {} -> {} are not adjacent",
                w[0], w[1]
            )));
        }
    }
    let vocab = build_vocab();
    let label = |id: NodeId| -> Result<String> { Ok(graph.node(id)?.room_label.clone()) };
    for &id in path {
        let l = label(id)?;
        if vocab.id(&l).is_none() {
            return config_err(format!("room label {l:?} is not in the instruction vocabulary"));
        }
    }

    let mut rng = instruction_rng(path, style, seed);
    let headings = path_headings(graph, path)?;
    let goal = *path.last().expect("non-empty");
    let mut clauses: Vec<Clause> = Vec::new();

    if path.len() == 1 {
        clauses.push(Clause::plain(&["stop", "in", "the", &label(goal)?, "."]));
    } else {
        for (i, w) in path.windows(2).enumerate() {
            let target = w[1];
            let target_label = label(target)?;
            let dir = if i == 0 {
                None
            } else {
                Some(turn_word(
                    signed_heading_change(headings[i - 1], headings[i]),
                    cfg.straight_threshold_deg,
                ))
            };
            clauses.push(motion_clause(
                graph, style, i, dir, target, &target_label, &mut rng, cfg,
            )?);
        }
        clauses.push(stop_clause(graph, style, goal, &label(goal)?, &mut rng, cfg)?);
    }

    fit_to_budget(&mut clauses, cfg.l_max)?;

    let words: Vec<String> = clauses.into_iter().flat_map(|c| c.words).collect();
    let text = words.join(" ");
    let mut tokens = Vec::with_capacity(words.len() + 2);
    tokens.push(BOS);
    for w in &words {
        let id = vocab
            .id(w)
            .ok_or_else(|| NavError::Config(format!("grammar emitted out-of-vocab word {w:?}")))?;
        tokens.push(id);
    }
    tokens.push(EOS);
    Ok(Instruction { tokens, text, style })
}

fn instruction_rng(path: &[NodeId], style: Style, seed: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([match style {
        Style::Terse => 0u8,
        Style::Landmark => 1,
        Style::Verbose => 2,
    }]);
    for &id in path {
        hasher.update(id.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed_bytes = [0u8; 8];
    seed_bytes.copy_from_slice(&digest[..8]);
    ChaCha12Rng::seed_from_u64(u64::from_le_bytes(seed_bytes))
}

#[allow(clippy::too_many_arguments)]
fn motion_clause(
    graph: &EnvGraph,
    style: Style,
    edge_index: usize,
    dir: Option<&'static str>,
    target: NodeId,
    target_label: &str,
    rng: &mut ChaCha12Rng,
    cfg: &InstrConfig,
) -> Result<Clause> {
    // Verb phrase: lead clauses have no previous heading, so no turn word.
    let mut words: Vec<String> = Vec::new();
    let mut ordinal_prefix = None;
    if style == Style::Verbose {
        let ord = ORDINALS
            .get(edge_index)
            .copied()
            .unwrap_or("then");
        words.push(ord.to_string());
        ordinal_prefix = Some(0);
    }
    let lead_verb = match style {
        Style::Terse => "go",
        Style::Landmark => "walk",
        Style::Verbose => "go",
    };
    match dir {
        None => words.push(lead_verb.to_string()),
        Some("straight") => {
            words.push(lead_verb.to_string());
            words.push("straight".to_string());
        }
        Some(turn) => {
            words.push("turn".to_string());
            words.push(turn.to_string());
        }
    }
    words.extend(["to", "the", target_label].map(str::to_string));

    // Optional landmark decoration, landmark style only.
    let mut landmark_suffix = None;
    if style == Style::Landmark {
        let node = graph.node(target)?;
        let gate: f64 = rng.gen();
        if !node.landmarks.is_empty() && gate < cfg.landmark_rate {
            let pick = rng.gen_range(0..node.landmarks.len());
            let start = words.len();
            words.extend(["with", "the", node.landmarks[pick].as_str()].map(str::to_string));
            landmark_suffix = Some(start..words.len());
        }
    }
    words.push(".".to_string());
    Ok(Clause {
        words,
        landmark_suffix,
        ordinal_prefix,
    })
}

fn stop_clause(
    graph: &EnvGraph,
    style: Style,
    goal: NodeId,
    goal_label: &str,
    rng: &mut ChaCha12Rng,
    cfg: &InstrConfig,
) -> Result<Clause> {
    match style {
        Style::Terse => Ok(Clause::plain(&["stop", "in", "the", goal_label, "."])),
        Style::Verbose => Ok(Clause::plain(&["then", "stop", "in", "the", goal_label, "."])),
        Style::Landmark => {
            let node = graph.node(goal)?;
            let gate: f64 = rng.gen();
            if !node.landmarks.is_empty() && gate < cfg.landmark_rate {
                let pick = rng.gen_range(0..node.landmarks.len());
                Ok(Clause::plain(&[
                    "stop",
                    "near",
                    "the",
                    node.landmarks[pick].as_str(),
                    ".",
                ]))
            } else {
                Ok(Clause::plain(&["stop", "in", "the", goal_label, "."]))
            }
        }
    }
}

/// Drop decorations from the back until the clause list fits `l_max` tokens
/// (including BOS/EOS). Mandatory words are never dropped; failing to fit is
/// a configuration error.
fn fit_to_budget(clauses: &mut [Clause], l_max: usize) -> Result<()> {
    let budget = l_max.saturating_sub(2);
    let total = |cs: &[Clause]| cs.iter().map(Clause::token_count).sum::<usize>();
    if total(clauses) <= budget {
        return Ok(());
    }
    for i in (0..clauses.len()).rev() {
        if let Some(range) = clauses[i].landmark_suffix.take() {
            clauses[i].words.drain(range);
            if total(clauses) <= budget {
                return Ok(());
            }
        }
    }
    for i in (0..clauses.len()).rev() {
        if let Some(idx) = clauses[i].ordinal_prefix.take() {
            clauses[i].words.remove(idx);
            if total(clauses) <= budget {
                return Ok(());
            }
        }
    }
    if total(clauses) <= budget {
        Ok(())
    } else {
        config_err(format!(
            "path needs {} instruction tokens but the limit is {l_max}",
            total(clauses) + 2
        ))
    }
}

// ============================================================================
// Tokenizer
// ============================================================================

/// Whitespace tokenizer: maps each word to its vocabulary id (UNK when
/// absent) and wraps the sequence in BOS/EOS. Empty input gives `[BOS, EOS]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    let mut ids = vec![BOS];
    for word in text.split_whitespace() {
        ids.push(vocab.id(word).unwrap_or(UNK));
    }
    ids.push(EOS);
    ids
}

/// Join two same-style instructions into one: the first instruction's EOS
/// and the second's BOS are dropped, texts are space-joined. Used to build
/// two-leg episodes whose instruction covers both legs in order.
pub fn concat_instructions(first: &Instruction, second: &Instruction) -> Result<Instruction> {
    if first.style != second.style {
        return config_err(format!(
            "cannot join a {} instruction with a {} instruction",
            first.style.as_str(),
            second.style.as_str()
        ));
    }
    let mut tokens = Vec::with_capacity(first.tokens.len() + second.tokens.len() - 2);
    tokens.extend_from_slice(&first.tokens[..first.tokens.len() - 1]);
    tokens.extend_from_slice(&second.tokens[1..]);
    Ok(Instruction {
        tokens,
        text: format!("{} {}", first.text, second.text),
        style: first.style,
    })
}

/// Inverse of [`tokenize`] up to unknown words: renders ids back to words,
/// skipping PAD/BOS/EOS and printing `<unk>` for UNK or out-of-range ids.
pub fn detokenize(tokens: &[u32], vocab: &Vocab) -> String {
    let mut words: Vec<&str> = Vec::with_capacity(tokens.len());
    for &id in tokens {
        match id {
            PAD | BOS | EOS => continue,
            _ => words.push(vocab.token(id).unwrap_or("<unk>")),
        }
    }
    words.join(" ")
}

// ============================================================================
// Tests
// ============================================================================
