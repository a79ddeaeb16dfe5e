//! Episode sets: generated worlds, sampled trajectories, instructions, and
//! the on-disk dataset layout.
//!
//! A dataset is built from `(config, seed)` alone and is reproducible to the
//! byte. Worlds come in a *seen* pool (train and val_seen episodes) and an
//! *unseen* pool (val_unseen only), so evaluation on val_unseen measures
//! generalization to environments never trained on.
//!
//! Trajectories are sampled as two-leg *chains* `a -> b -> c` where each leg
//! is a shortest path with a bounded hop count. Every leg becomes a direct
//! (`r2r`) episode — three of them, one per instruction style — and the two
//! legs of a chain join into a composite (`r4r`) episode whose reference
//! path is generally *not* a shortest path from its start to its goal. That
//! asymmetry is the point: direct episodes reward goal-seeking, composite
//! ones reward sticking to the described route.

use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, NavError, Result};
use crate::instructions::{
    build_vocab, concat_instructions, generate_instruction, InstrConfig, Instruction, Style, UNK,
};
use crate::seeds::{derived_rng, derived_seed};
use crate::world::{
    generate_world, load_world, save_world, shortest_path, EnvGraph, NodeId, WorldParams,
};

/// Schema tag for `manifest.json`.
pub const DATA_SCHEMA: &str = "navgen-data/1";

// ============================================================================
// Domain types
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
}

impl Split {
    pub fn all() -> [Split; 3] {
        [Split::Train, Split::ValSeen, Split::ValUnseen]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValSeen => "val_seen",
            Split::ValUnseen => "val_unseen",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = NavError;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val_seen" => Ok(Split::ValSeen),
            "val_unseen" => Ok(Split::ValUnseen),
            other => Err(NavError::Config(format!(
                "unknown split {other:?} (expected train, val_seen, or val_unseen)"
            ))),
        }
    }
}

/// What kind of reference path an episode carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    /// Single shortest-path leg.
    R2r,
    /// Two legs joined at a shared junction node; usually not a shortest
    /// start-to-goal path.
    R4r,
    /// Extra single-leg episodes with one instruction each, used as a
    /// first-phase training supplement.
    Augmented,
}

impl Flavor {
    pub fn as_str(self) -> &'static str {
        match self {
            Flavor::R2r => "r2r",
            Flavor::R4r => "r4r",
            Flavor::Augmented => "augmented",
        }
    }
}

impl std::str::FromStr for Flavor {
    type Err = NavError;
    fn from_str(s: &str) -> Result<Flavor> {
        match s {
            "r2r" => Ok(Flavor::R2r),
            "r4r" => Ok(Flavor::R4r),
            "augmented" => Ok(Flavor::Augmented),
            other => Err(NavError::Config(format!(
                "unknown flavor {other:?} (expected r2r, r4r, or augmented)"
            ))),
        }
    }
}

/// One instruction-following task: follow `instruction` from `start` and
/// stop at `goal`; `reference_path` is the demonstrated route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub env_id: String,
    pub start: NodeId,
    pub goal: NodeId,
    pub reference_path: Vec<NodeId>,
    pub instruction: Instruction,
    pub split: Split,
    pub flavor: Flavor,
}

impl Episode {
    /// Structural checks against the episode's world: endpoints line up and
    /// every consecutive reference pair is an edge.
    pub fn validate(&self, graph: &EnvGraph) -> Result<()> {
        if graph.env_id != self.env_id {
            return data_err(format!(
                "episode {} names world {:?} but was validated against {:?}",
                self.episode_id,
                self.env_id,
                graph.env_id
            ));
        }
        let r = &self.reference_path;
        if r.is_empty() || r[0] != self.start || *r.last().unwrap() != self.goal {
            return data_err(format!(
                "episode {}: reference path endpoints do not match start/goal",
                self.episode_id
            ));
        }
        for w in r.windows(2) {
            if graph.edge_length(w[0], w[1]).is_none() {
                return data_err(format!(
                    "episode {}: reference step {} -> {} is not an edge",
                    self.episode_id, w[0], w[1]
                ));
            }
        }
        if self.instruction.tokens.iter().any(|&t| t == UNK) {
            return data_err(format!(
                "episode {}: instruction contains an unknown token",
                self.episode_id
            ));
        }
        Ok(())
    }
}

/// Dataset-build knobs. `trajectories_per_world` and `val_seen_per_world`
/// count single legs and must be even: legs are sampled in joinable pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub train_worlds: usize,
    pub unseen_worlds: usize,
    /// Legs sampled per seen world (train + val_seen together).
    pub trajectories_per_world: usize,
    /// Of those, legs reserved for val_seen.
    pub val_seen_per_world: usize,
    /// Legs sampled per unseen world.
    pub unseen_per_world: usize,
    pub min_hops: usize,
    pub max_hops: usize,
    pub world: WorldParams,
    pub instr: InstrConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 17,
            train_worlds: 20,
            unseen_worlds: 6,
            trajectories_per_world: 34,
            val_seen_per_world: 4,
            unseen_per_world: 6,
            min_hops: 4,
            max_hops: 7,
            world: WorldParams::default(),
            instr: InstrConfig::default(),
        }
    }
}

impl DataConfig {
    fn validate(&self) -> Result<()> {
        if self.train_worlds == 0 || self.unseen_worlds == 0 {
            return config_err("need at least one seen and one unseen world");
        }
        if self.train_worlds + self.unseen_worlds < 3 {
            return config_err("need at least 3 worlds in total");
        }
        if self.trajectories_per_world % 2 != 0
            || self.val_seen_per_world % 2 != 0
            || self.unseen_per_world % 2 != 0
        {
            return config_err("trajectory counts must be even (legs are sampled in pairs)");
        }
        if self.val_seen_per_world >= self.trajectories_per_world {
            return config_err(format!(
                "val_seen_per_world ({}) must leave train legs under trajectories_per_world ({})",
                self.val_seen_per_world, self.trajectories_per_world
            ));
        }
        if self.min_hops < 1 || self.min_hops > self.max_hops {
            return config_err(format!(
                "hop range {}..={} is not a valid range",
                self.min_hops, self.max_hops
            ));
        }
        if self.max_hops >= self.world.nodes {
            return config_err(format!(
                "max_hops {} cannot be reached in a {}-node world",
                self.max_hops, self.world.nodes
            ));
        }
        Ok(())
    }
}

/// Per-file entry in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub flavor: Flavor,
    pub split: Split,
    pub file: String,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldEntry {
    pub env_id: String,
    pub file: String,
    /// Seen worlds host train and val_seen episodes; unseen ones only
    /// val_unseen.
    pub seen: bool,
}

/// Top-level dataset description, saved as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub config: DataConfig,
    pub vocab_hash: String,
    pub worlds: Vec<WorldEntry>,
    pub splits: Vec<SplitEntry>,
}

/// A fully materialized dataset: worlds by id plus every episode.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub worlds: IndexMap<String, EnvGraph>,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn world(&self, env_id: &str) -> Result<&EnvGraph> {
        self.worlds
            .get(env_id)
            .ok_or_else(|| NavError::UnknownId(format!("world {env_id:?}")))
    }

    /// Episodes of one flavor and split, in stored order.
    pub fn select(&self, flavor: Flavor, split: Split) -> Vec<&Episode> {
        self.episodes
            .iter()
            .filter(|e| e.flavor == flavor && e.split == split)
            .collect()
    }
}

// ============================================================================
// Building
// ============================================================================

/// Generate the seen and unseen world pools.
pub fn build_worlds(cfg: &DataConfig) -> Result<(Vec<EnvGraph>, Vec<EnvGraph>)> {
    cfg.validate()?;
    let mut seen = Vec::with_capacity(cfg.train_worlds);
    for i in 0..cfg.train_worlds {
        let env_id = format!("seen-{i:02}");
        seen.push(generate_world(
            &env_id,
            derived_seed(cfg.seed, &format!("world:{env_id}")),
            &cfg.world,
        )?);
    }
    let mut unseen = Vec::with_capacity(cfg.unseen_worlds);
    for i in 0..cfg.unseen_worlds {
        let env_id = format!("unseen-{i:02}");
        unseen.push(generate_world(
            &env_id,
            derived_seed(cfg.seed, &format!("world:{env_id}")),
            &cfg.world,
        )?);
    }
    Ok((seen, unseen))
}

/// Nodes whose shortest path from `src` has a hop count in range.
fn hop_candidates(
    graph: &EnvGraph,
    src: NodeId,
    min_hops: usize,
    max_hops: usize,
) -> Result<Vec<NodeId>> {
    let mut out = Vec::new();
    for node in graph.nodes() {
        if node.id == src {
            continue;
        }
        let (path, _) = shortest_path(graph, src, node.id)?;
        let hops = path.len() - 1;
        if hops >= min_hops && hops <= max_hops {
            out.push(node.id);
        }
    }
    Ok(out)
}

/// Sample one two-leg chain `a -> b -> c`; both legs are shortest paths with
/// hop counts in range. Retries a bounded number of anchor draws before
/// giving up.
fn sample_chain(
    graph: &EnvGraph,
    rng: &mut impl Rng,
    cfg: &DataConfig,
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    const ATTEMPTS: usize = 64;
    for _ in 0..ATTEMPTS {
        let a = rng.gen_range(0..graph.node_count()) as NodeId;
        let bs = hop_candidates(graph, a, cfg.min_hops, cfg.max_hops)?;
        if bs.is_empty() {
            continue;
        }
        let b = bs[rng.gen_range(0..bs.len())];
        let cs = hop_candidates(graph, b, cfg.min_hops, cfg.max_hops)?;
        if cs.is_empty() {
            continue;
        }
        let c = cs[rng.gen_range(0..cs.len())];
        let (leg1, _) = shortest_path(graph, a, b)?;
        let (leg2, _) = shortest_path(graph, b, c)?;
        return Ok((leg1, leg2));
    }
    data_err(format!(
        "world {:?}: no node pairs with {}..={} hops after {ATTEMPTS} draws",
        graph.env_id,
        cfg.min_hops,
        cfg.max_hops
    ))
}

/// Three direct episodes (one per style) for one leg.
fn leg_episodes(
    graph: &EnvGraph,
    leg: &[NodeId],
    split: Split,
    id_stem: &str,
    cfg: &DataConfig,
) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(3);
    for style in Style::all() {
        let instr = generate_instruction(
            graph,
            leg,
            style,
            derived_seed(cfg.seed, &format!("instr:{id_stem}:{}", style.as_str())),
            &cfg.instr,
        )?;
        out.push(Episode {
            episode_id: format!("r2r-{id_stem}-{}", style.as_str()),
            env_id: graph.env_id.to_string(),
            start: leg[0],
            goal: *leg.last().unwrap(),
            reference_path: leg.to_vec(),
            instruction: instr,
            split,
            flavor: Flavor::R2r,
        });
    }
    Ok(out)
}

/// Build every direct episode across all three splits. Legs are sampled in
/// chain pairs so each consecutive pair of legs shares a junction node.
pub fn build_r2r_like(
    seen: &[EnvGraph],
    unseen: &[EnvGraph],
    cfg: &DataConfig,
) -> Result<Vec<Episode>> {
    cfg.validate()?;
    if seen.len() != cfg.train_worlds || unseen.len() != cfg.unseen_worlds {
        return config_err(format!(
            "world pools ({} seen, {} unseen) do not match the config ({}, {})",
            seen.len(),
            unseen.len(),
            cfg.train_worlds,
            cfg.unseen_worlds
        ));
    }
    let mut episodes = Vec::new();
    for graph in seen {
        let chains = cfg.trajectories_per_world / 2;
        let val_chains = cfg.val_seen_per_world / 2;
        let mut rng = derived_rng(cfg.seed, &format!("chains:{}", graph.env_id));
        for k in 0..chains {
            // The first chains of every seen world are held out as val_seen;
            // the agent has trained in these worlds but not on these routes.
            let split = if k < val_chains {
                Split::ValSeen
            } else {
                Split::Train
            };
            let (leg1, leg2) = sample_chain(graph, &mut rng, cfg)?;
            let stem = format!("{}-{}-c{k:03}", split.as_str(), graph.env_id);
            episodes.extend(leg_episodes(graph, &leg1, split, &format!("{stem}a"), cfg)?);
            episodes.extend(leg_episodes(graph, &leg2, split, &format!("{stem}b"), cfg)?);
        }
    }
    for graph in unseen {
        let chains = cfg.unseen_per_world / 2;
        let mut rng = derived_rng(cfg.seed, &format!("chains:{}", graph.env_id));
        for k in 0..chains {
            let (leg1, leg2) = sample_chain(graph, &mut rng, cfg)?;
            let stem = format!("val_unseen-{}-c{k:03}", graph.env_id);
            episodes.extend(leg_episodes(
                graph,
                &leg1,
                Split::ValUnseen,
                &format!("{stem}a"),
                cfg,
            )?);
            episodes.extend(leg_episodes(
                graph,
                &leg2,
                Split::ValUnseen,
                &format!("{stem}b"),
                cfg,
            )?);
        }
    }
    Ok(episodes)
}

/// Join direct episodes into composite ones: within each (world, split,
/// style) group, scan in order and greedily pair each unused episode with
/// the first unused episode that starts where it ends. The instruction is
/// the two leg instructions joined; the reference path shares the junction
/// node.
pub fn build_r4r_like(r2r: &[Episode], worlds: &IndexMap<String, EnvGraph>) -> Result<Vec<Episode>> {
    let mut used = vec![false; r2r.len()];
    let mut joined = Vec::new();
    let mut counters: IndexMap<(String, Split), usize> = IndexMap::new();
    for i in 0..r2r.len() {
        if used[i] || r2r[i].flavor != Flavor::R2r {
            continue;
        }
        let first = &r2r[i];
        let Some(j) = (i + 1..r2r.len()).find(|&j| {
            !used[j]
                && r2r[j].flavor == Flavor::R2r
                && r2r[j].env_id == first.env_id
                && r2r[j].split == first.split
                && r2r[j].instruction.style == first.instruction.style
                && r2r[j].start == first.goal
        }) else {
            continue;
        };
        used[i] = true;
        used[j] = true;
        let second = &r2r[j];
        let graph = worlds
            .get(&first.env_id)
            .ok_or_else(|| NavError::UnknownId(format!("world {:?}", first.env_id)))?;
        let mut reference_path = first.reference_path.clone();
        reference_path.extend_from_slice(&second.reference_path[1..]);
        let instruction = concat_instructions(&first.instruction, &second.instruction)?;
        let counter = counters
            .entry((first.env_id.clone(), first.split))
            .or_insert(0);
        let episode = Episode {
            episode_id: format!(
                "r4r-{}-{}-j{:03}-{}",
                first.split.as_str(),
                first.env_id,
                *counter,
                first.instruction.style.as_str()
            ),
            env_id: first.env_id.clone(),
            start: first.start,
            goal: second.goal,
            reference_path,
            instruction,
            split: first.split,
            flavor: Flavor::R4r,
        };
        *counter += 1;
        episode.validate(graph)?;
        joined.push(episode);
    }
    if joined.is_empty() {
        return data_err("no joinable episode pairs: every pair of legs has mismatched endpoints");
    }
    Ok(joined)
}

/// Extra single-instruction direct episodes for first-phase training. Each
/// trajectory gets exactly one instruction in a cycling style.
pub fn build_augmented(
    seen: &[EnvGraph],
    count: usize,
    seed: u64,
    cfg: &DataConfig,
) -> Result<Vec<Episode>> {
    if seen.is_empty() {
        return config_err("augmented episodes need at least one seen world");
    }
    let mut out = Vec::with_capacity(count);
    let mut rng = derived_rng(seed, "augmented");
    let styles = Style::all();
    for k in 0..count {
        let graph = &seen[k % seen.len()];
        let (leg, _) = sample_chain(graph, &mut rng, cfg)?;
        let style = styles[k % styles.len()];
        let stem = format!("aug-{}-{k:04}", graph.env_id);
        let instr = generate_instruction(
            graph,
            &leg,
            style,
            derived_seed(seed, &format!("instr:{stem}")),
            &cfg.instr,
        )?;
        out.push(Episode {
            episode_id: format!("{stem}-{}", style.as_str()),
            env_id: graph.env_id.to_string(),
            start: leg[0],
            goal: *leg.last().unwrap(),
            reference_path: leg,
            instruction: instr,
            split: Split::Train,
            flavor: Flavor::Augmented,
        });
    }
    Ok(out)
}

/// Build a complete dataset: worlds, direct and composite episodes for all
/// splits, and `augmented_count` supplemental episodes.
pub fn build_dataset(cfg: &DataConfig, augmented_count: usize) -> Result<Dataset> {
    let (seen, unseen) = build_worlds(cfg)?;
    let mut worlds: IndexMap<String, EnvGraph> = IndexMap::new();
    let mut world_entries = Vec::new();
    for g in seen.iter().chain(unseen.iter()) {
        world_entries.push(WorldEntry {
            env_id: g.env_id.to_string(),
            file: format!("worlds/{}.world.json", g.env_id),
            seen: g.env_id.starts_with("seen-"),
        });
        worlds.insert(g.env_id.to_string(), g.clone());
    }
    let mut episodes = build_r2r_like(&seen, &unseen, cfg)?;
    let joined = build_r4r_like(&episodes, &worlds)?;
    episodes.extend(joined);
    if augmented_count > 0 {
        episodes.extend(build_augmented(&seen, augmented_count, cfg.seed, cfg)?);
    }
    for ep in &episodes {
        ep.validate(&worlds[&ep.env_id])?;
    }
    // Canonical storage order = file layout order (flavor, then split), so a
    // saved-and-reloaded dataset compares equal to the built one. The sort is
    // stable, keeping build order within each group.
    let flavor_rank = |f: Flavor| match f {
        Flavor::R2r => 0,
        Flavor::R4r => 1,
        Flavor::Augmented => 2,
    };
    let split_rank = |s: Split| match s {
        Split::Train => 0,
        Split::ValSeen => 1,
        Split::ValUnseen => 2,
    };
    episodes.sort_by_key(|e| (flavor_rank(e.flavor), split_rank(e.split)));
    let splits = split_entries(&episodes);
    let manifest = DatasetManifest {
        schema: DATA_SCHEMA.to_string(),
        config: cfg.clone(),
        vocab_hash: build_vocab().content_hash(),
        worlds: world_entries,
        splits,
    };
    Ok(Dataset {
        manifest,
        worlds,
        episodes,
    })
}

fn split_file(flavor: Flavor, split: Split) -> String {
    format!("{}.{}.episodes.jsonl", flavor.as_str(), split.as_str())
}

fn split_entries(episodes: &[Episode]) -> Vec<SplitEntry> {
    let mut entries = Vec::new();
    for flavor in [Flavor::R2r, Flavor::R4r, Flavor::Augmented] {
        for split in Split::all() {
            let count = episodes
                .iter()
                .filter(|e| e.flavor == flavor && e.split == split)
                .count();
            if count > 0 {
                entries.push(SplitEntry {
                    flavor,
                    split,
                    file: split_file(flavor, split),
                    episodes: count,
                });
            }
        }
    }
    entries
}

// ============================================================================
// Saving and loading
// ============================================================================

/// Write `manifest.json`, `worlds/*.world.json`, and one episode JSONL file
/// per (flavor, split) into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("worlds"))?;
    for entry in &ds.manifest.worlds {
        let graph = ds.world(&entry.env_id)?;
        save_world(graph, &dir.join(&entry.file))?;
    }
    for entry in &ds.manifest.splits {
        let mut lines = String::new();
        for ep in &ds.episodes {
            if ep.flavor == entry.flavor && ep.split == entry.split {
                lines.push_str(&serde_json::to_string(ep)?);
                lines.push('\n');
            }
        }
        std::fs::write(dir.join(&entry.file), lines)?;
    }
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&ds.manifest)?,
    )?;
    Ok(())
}

/// Load a dataset saved by [`save_dataset`]. Malformed episode lines are
/// reported with their file and 1-based line number.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| NavError::Data(format!("reading {}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| NavError::Data(format!("parsing {}: {e}", manifest_path.display())))?;
    if manifest.schema != DATA_SCHEMA {
        return data_err(format!(
            "{}: schema {:?} does not match expected {DATA_SCHEMA:?}",
            manifest_path.display(),
            manifest.schema
        ));
    }
    let mut worlds = IndexMap::new();
    for entry in &manifest.worlds {
        let graph = load_world(&dir.join(&entry.file))?;
        if graph.env_id != entry.env_id {
            return data_err(format!(
                "{}: world file claims env_id {:?}",
                entry.file,
                graph.env_id
            ));
        }
        worlds.insert(entry.env_id.clone(), graph);
    }
    let mut episodes = Vec::new();
    for entry in &manifest.splits {
        let path = dir.join(&entry.file);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| NavError::Data(format!("reading {}: {e}", path.display())))?;
        let mut count = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ep: Episode = serde_json::from_str(line).map_err(|e| {
                NavError::Data(format!("{}:{}: bad episode record: {e}", entry.file, lineno + 1))
            })?;
            let graph = worlds
                .get(&ep.env_id)
                .ok_or_else(|| NavError::Data(format!(
                    "{}:{}: episode references unknown world {:?}",
                    entry.file,
                    lineno + 1,
                    ep.env_id
                )))?;
            ep.validate(graph)?;
            episodes.push(ep);
            count += 1;
        }
        if count != entry.episodes {
            return data_err(format!(
                "{}: manifest promises {} episodes but the file holds {count}",
                entry.file, entry.episodes
            ));
        }
    }
    Ok(Dataset {
        manifest,
        worlds,
        episodes,
    })
}

// ============================================================================
// Tests
// ============================================================================
