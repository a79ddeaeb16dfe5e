//! Graph-structured navigation worlds.
//!
//! A world is a connected undirected graph embedded in 3-space. Nodes carry a
//! room label, optional landmark tokens, and a dense visual feature vector;
//! edges carry Euclidean lengths. Agents occupy one node at a time and move
//! along edges or stop. All randomness is driven by a caller-supplied seed so
//! that world generation is deterministic and serialization is byte-stable.
//!
//! Visual features are an informative-but-noisy encoding: each content token
//! (room label, landmark) maps to a fixed pseudo-random direction derived by
//! hashing the token string, and a node's feature is a weighted sum of its
//! token directions, a position-hash direction, and seeded low-amplitude
//! noise. The same label therefore looks similar in every world, which is
//! what lets a model trained in some environments ground instructions in
//! unseen ones, without the feature being a clean one-hot label oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BinaryHeap;
use std::path::Path;

use crate::error::{config_err, data_err, NavError, Result};

/// Node identifier: dense indices `0..n` within one environment.
pub type NodeId = u32;

/// Schema tag written into every serialized world file.
pub const WORLD_SCHEMA: &str = "navgen-world/1";

// ============================================================================
// Types
// ============================================================================

/// One place in the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    /// Metric position `[x, y, z]`; x is east, y is north, z is up.
    pub position: [f64; 3],
    /// Room category token, drawn from the instruction vocabulary.
    pub room_label: String,
    /// Zero or more landmark tokens, sorted for stable serialization.
    pub landmarks: Vec<String>,
    /// Dense observation vector of length `d_v`.
    pub visual_feature: Vec<f64>,
}

impl Node {
    /// Build a node with the standard deterministic (noise-free) feature
    /// encoding. Intended for hand-constructed test worlds.
    pub fn synth(
        id: NodeId,
        position: [f64; 3],
        room_label: &str,
        landmarks: &[&str],
        d_v: usize,
    ) -> Node {
        let landmarks: Vec<String> = {
            let mut l: Vec<String> = landmarks.iter().map(|s| s.to_string()).collect();
            l.sort();
            l
        };
        let visual_feature = encode_feature(room_label, &landmarks, position, d_v);
        Node {
            id,
            position,
            room_label: room_label.to_string(),
            landmarks,
            visual_feature,
        }
    }
}

/// An agent action: traverse an edge or end the episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    MoveTo(NodeId),
    Stop,
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Action::MoveTo(v) => write!(f, "move_to({v})"),
            Action::Stop => write!(f, "stop"),
        }
    }
}

/// Connected undirected navigation graph.
///
/// Construct via [`generate_world`] or [`EnvGraph::from_parts`]; both build
/// the adjacency index, which is not serialized.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvGraph {
    pub env_id: String,
    nodes: Vec<Node>,
    /// Undirected edges `(u, v, length)` with `u < v`, sorted.
    edges: Vec<(NodeId, NodeId, f64)>,
    /// Per-node neighbor list `(neighbor, edge length)`, ascending neighbor id.
    adjacency: Vec<Vec<(NodeId, f64)>>,
}

/// Generation parameters for synthetic worlds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    /// Node count; valid range is 2..=200, defaults target desk scale.
    pub nodes: usize,
    /// Visual feature dimensionality (at least 8).
    pub d_v: usize,
    /// Room-label palette; node labels are drawn from here.
    pub room_labels: Vec<String>,
    /// Landmark token pool.
    pub landmark_pool: Vec<String>,
    /// Probability that a node carries at least one landmark.
    pub landmark_density: f64,
    /// Target mean nearest-neighbor spacing in metric units.
    pub spacing: f64,
    /// Standard deviation of node elevation.
    pub elevation_std: f64,
    /// Desired mean degree once extra edges are added.
    pub mean_degree: f64,
    /// Hard cap on node degree (keeps candidate-action sets small).
    pub max_degree: usize,
    /// Amplitude of the seeded per-node feature noise.
    pub feature_noise: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            nodes: 48,
            d_v: 32,
            room_labels: crate::instructions::room_label_palette(),
            landmark_pool: crate::instructions::landmark_palette(),
            landmark_density: 0.6,
            spacing: 2.2,
            elevation_std: 0.25,
            mean_degree: 2.8,
            max_degree: 5,
            feature_noise: 0.08,
        }
    }
}

/// Mutable agent status inside one episode.
///
/// Histories record the pre-move node and the taken action per step, so both
/// always have length `t`. The observation sequence an encoder consumes is
/// `visited ++ [current]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub current: NodeId,
    pub t: usize,
    pub visited: Vec<NodeId>,
    pub taken: Vec<Action>,
    pub terminated: bool,
}

impl AgentState {
    pub fn start_at(node: NodeId) -> AgentState {
        AgentState {
            current: node,
            t: 0,
            visited: Vec::new(),
            taken: Vec::new(),
            terminated: false,
        }
    }

    /// Full node sequence including the current node (length `t + 1`).
    pub fn node_sequence(&self) -> Vec<NodeId> {
        let mut seq = self.visited.clone();
        seq.push(self.current);
        seq
    }
}

/// Orientation-plus-feature encoding of one candidate action.
///
/// Orientation is `[sin phi, cos phi, sin theta, cos theta]` where `phi` is
/// the compass bearing to the target (0 = due north = +y, clockwise positive)
/// and `theta` the elevation angle. Stop uses the level due-north prefix
/// `[0, 1, 0, 1]` and a caller-supplied feature vector (models pass their
/// learned stop feature, or zeros).
#[derive(Debug, Clone, PartialEq)]
pub struct ActionEmbedding {
    pub orientation: [f64; 4],
    pub target_feature: Vec<f64>,
}

impl ActionEmbedding {
    /// Flattened `4 + d_v` vector consumed by models.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 + self.target_feature.len());
        v.extend_from_slice(&self.orientation);
        v.extend_from_slice(&self.target_feature);
        v
    }

    /// Embedding dimension for a given feature width.
    pub fn dim(d_v: usize) -> usize {
        4 + d_v
    }

    /// All-zero embedding (used as the "no previous action" placeholder when
    /// encoding the first observation of a history).
    pub fn zeros(d_v: usize) -> ActionEmbedding {
        ActionEmbedding {
            orientation: [0.0; 4],
            target_feature: vec![0.0; d_v],
        }
    }
}

// ============================================================================
// Graph construction
// ============================================================================

impl EnvGraph {
    /// Assemble a graph from explicit nodes and edge endpoints. Edge lengths
    /// are computed from node positions. Validates ids, connectivity inputs
    /// (no self loops, endpoints in range) and sorts everything into
    /// canonical order.
    pub fn from_parts(
        env_id: impl Into<String>,
        nodes: Vec<Node>,
        edge_pairs: &[(NodeId, NodeId)],
    ) -> Result<EnvGraph> {
        let env_id = env_id.into();
        let n = nodes.len();
        for (i, node) in nodes.iter().enumerate() {
            if node.id as usize != i {
                return config_err(format!(
                    "node ids must be dense 0..{n}; found {} at index {i}",
                    node.id
                ));
            }
        }
        let mut edges = Vec::with_capacity(edge_pairs.len());
        for &(a, b) in edge_pairs {
            if a == b {
                return config_err(format!("self loop at node {a}"));
            }
            if a as usize >= n || b as usize >= n {
                return config_err(format!("edge ({a},{b}) out of range for {n} nodes"));
            }
            let (u, v) = if a < b { (a, b) } else { (b, a) };
            let len = dist3(nodes[u as usize].position, nodes[v as usize].position);
            edges.push((u, v, len));
        }
        edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        edges.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
        let adjacency = build_adjacency(n, &edges);
        Ok(EnvGraph {
            env_id,
            nodes,
            edges,
            adjacency,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(NodeId, NodeId, f64)] {
        &self.edges
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id as usize)
            .ok_or_else(|| NavError::UnknownId(format!("node {id} in {}", self.env_id)))
    }

    /// Neighbor list of `id`, ascending by neighbor id.
    pub fn neighbors(&self, id: NodeId) -> Result<&[(NodeId, f64)]> {
        self.node(id)?;
        Ok(&self.adjacency[id as usize])
    }

    /// Actions available at `node`: one move per neighbor (ascending by
    /// neighbor id) followed by Stop. Selection code indexes into this list,
    /// so the ordering is part of the on-disk trajectory contract.
    pub fn candidate_actions(&self, node: NodeId) -> Result<Vec<Action>> {
        let mut actions: Vec<Action> = self
            .neighbors(node)?
            .iter()
            .map(|&(v, _)| Action::MoveTo(v))
            .collect();
        actions.push(Action::Stop);
        Ok(actions)
    }

    /// Length of the edge `(u, v)` if present.
    pub fn edge_length(&self, u: NodeId, v: NodeId) -> Option<f64> {
        self.adjacency
            .get(u as usize)?
            .iter()
            .find(|(w, _)| *w == v)
            .map(|(_, l)| *l)
    }

    /// True when every node can reach every other node.
    pub fn is_connected(&self) -> bool {
        let n = self.nodes.len();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0u32];
        seen[0] = true;
        let mut count = 1;
        while let Some(x) = stack.pop() {
            for &(w, _) in &self.adjacency[x as usize] {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == n
    }
}

fn build_adjacency(n: usize, edges: &[(NodeId, NodeId, f64)]) -> Vec<Vec<(NodeId, f64)>> {
    let mut adj = vec![Vec::new(); n];
    for &(u, v, len) in edges {
        adj[u as usize].push((v, len));
        adj[v as usize].push((u, len));
    }
    for list in &mut adj {
        list.sort_by_key(|(w, _)| *w);
    }
    adj
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Generate a connected world deterministically from a seed.
///
/// Layout: nodes get uniform positions in a square whose side scales with
/// `sqrt(n) * spacing`; a nearest-neighbor insertion tree guarantees
/// connectivity, then the shortest remaining candidate edges are added until
/// the target mean degree is reached (respecting `max_degree`). Room labels
/// are assigned so that no two nodes within two hops share a label whenever
/// the palette allows it — mirroring how adjacent rooms in real buildings
/// rarely repeat a category, and keeping per-step candidate sets visually
/// distinguishable.
pub fn generate_world(env_id: impl Into<String>, seed: u64, params: &WorldParams) -> Result<EnvGraph> {
    if params.nodes < 2 {
        return config_err(format!("world needs at least 2 nodes, got {}", params.nodes));
    }
    if params.nodes > 200 {
        return config_err(format!("world node count capped at 200, got {}", params.nodes));
    }
    if params.d_v < 8 {
        return config_err(format!("feature dim must be at least 8, got {}", params.d_v));
    }
    if params.max_degree < 2 {
        return config_err(format!(
            "max degree must be at least 2 to keep worlds connected, got {}",
            params.max_degree
        ));
    }
    if params.room_labels.is_empty() {
        return config_err("room label palette is empty");
    }
    let env_id = env_id.into();
    let n = params.nodes;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // --- positions ---------------------------------------------------------
    let side = (n as f64).sqrt() * params.spacing;
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.gen::<f64>() * side;
        let y: f64 = rng.gen::<f64>() * side;
        let z: f64 = {
            let g: f64 = rng.sample(StandardNormal);
            g * params.elevation_std
        };
        positions.push([x, y, z]);
    }

    // --- edges: nearest-neighbor tree, then densification ------------------
    let mut edge_pairs: Vec<(NodeId, NodeId)> = Vec::new();
    let mut degree = vec![0usize; n];
    for i in 1..n {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for j in 0..i {
            if degree[j] >= params.max_degree {
                continue;
            }
            let d = dist3(positions[i], positions[j]);
            if d < best_d {
                best_d = d;
                best = Some(j);
            }
        }
        // i tree edges spread 2i degree over i+1 nodes, so with a cap of at
        // least 2 an unsaturated predecessor always exists.
        let best = best.expect("tree phase: some predecessor is below the degree cap");
        edge_pairs.push((best as NodeId, i as NodeId));
        degree[i] += 1;
        degree[best] += 1;
    }
    let radius = params.spacing * 1.7;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if edge_pairs.contains(&(i as NodeId, j as NodeId)) {
                continue;
            }
            let d = dist3(positions[i], positions[j]);
            if d <= radius {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let target_edges = ((params.mean_degree * n as f64) / 2.0).round() as usize;
    for (_, i, j) in candidates {
        if edge_pairs.len() >= target_edges {
            break;
        }
        if degree[i] >= params.max_degree || degree[j] >= params.max_degree {
            continue;
        }
        edge_pairs.push((i as NodeId, j as NodeId));
        degree[i] += 1;
        degree[j] += 1;
    }

    // --- labels: avoid repeats within two hops where possible --------------
    let edges_tmp: Vec<(NodeId, NodeId, f64)> = edge_pairs
        .iter()
        .map(|&(a, b)| {
            let (u, v) = if a < b { (a, b) } else { (b, a) };
            (u, v, dist3(positions[u as usize], positions[v as usize]))
        })
        .collect();
    let adj_tmp = build_adjacency(n, &edges_tmp);
    let mut labels: Vec<String> = Vec::with_capacity(n);
    for i in 0..n {
        let mut forbidden: Vec<&str> = Vec::new();
        for &(w1, _) in &adj_tmp[i] {
            if (w1 as usize) < i {
                forbidden.push(&labels[w1 as usize]);
            }
            for &(w2, _) in &adj_tmp[w1 as usize] {
                if (w2 as usize) < i {
                    forbidden.push(&labels[w2 as usize]);
                }
            }
        }
        let open: Vec<&String> = params
            .room_labels
            .iter()
            .filter(|l| !forbidden.contains(&l.as_str()))
            .collect();
        let label = if open.is_empty() {
            params.room_labels[rng.gen_range(0..params.room_labels.len())].clone()
        } else {
            open[rng.gen_range(0..open.len())].clone()
        };
        labels.push(label);
    }

    // --- landmarks and features --------------------------------------------
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let mut landmarks: Vec<String> = Vec::new();
        if !params.landmark_pool.is_empty() {
            let u1: f64 = rng.gen();
            let u2: f64 = rng.gen();
            let k1 = rng.gen_range(0..params.landmark_pool.len());
            let k2 = rng.gen_range(0..params.landmark_pool.len());
            if u1 < params.landmark_density {
                landmarks.push(params.landmark_pool[k1].clone());
            }
            if u2 < params.landmark_density * 0.35 {
                let second = &params.landmark_pool[k2];
                if !landmarks.contains(second) {
                    landmarks.push(second.clone());
                }
            }
            landmarks.sort();
        }
        let mut feature = encode_feature(&labels[i], &landmarks, positions[i], params.d_v);
        for f in feature.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *f += g * params.feature_noise;
        }
        nodes.push(Node {
            id: i as NodeId,
            position: positions[i],
            room_label: labels[i].clone(),
            landmarks,
            visual_feature: feature,
        });
    }

    EnvGraph::from_parts(env_id, nodes, &edge_pairs)
}

/// Fixed pseudo-random unit direction for a content token. Stable across
/// worlds, seeds, and processes (keyed only by the token string and `d_v`).
pub fn token_direction(token: &str, d_v: usize) -> Vec<f64> {
    let digest = Sha256::digest(token.as_bytes());
    let mut seed_bytes = [0u8; 8];
    seed_bytes.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha12Rng::seed_from_u64(u64::from_le_bytes(seed_bytes));
    let mut v: Vec<f64> = (0..d_v).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

/// Deterministic noise-free feature for (room label, landmarks, position).
fn encode_feature(room_label: &str, landmarks: &[String], position: [f64; 3], d_v: usize) -> Vec<f64> {
    let mut feature = token_direction(room_label, d_v);
    if !landmarks.is_empty() {
        let w = 0.5 / landmarks.len() as f64;
        for lm in landmarks {
            let dir = token_direction(lm, d_v);
            for (f, d) in feature.iter_mut().zip(dir.iter()) {
                *f += w * d;
            }
        }
    }
    let pos_key = format!("pos:{:.1}:{:.1}:{:.1}", position[0], position[1], position[2]);
    let pos_dir = token_direction(&pos_key, d_v);
    for (f, d) in feature.iter_mut().zip(pos_dir.iter()) {
        *f += 0.35 * d;
    }
    feature
}

// ============================================================================
// Actions and stepping
// ============================================================================

/// Candidate actions at a node: one `MoveTo` per neighbor in ascending node
/// order, then `Stop` last.
pub fn available_actions(graph: &EnvGraph, node: NodeId) -> Result<Vec<Action>> {
    let neighbors = graph.neighbors(node)?;
    let mut actions: Vec<Action> = neighbors.iter().map(|&(w, _)| Action::MoveTo(w)).collect();
    actions.push(Action::Stop);
    Ok(actions)
}

/// Apply an action, producing the successor state.
///
/// `MoveTo` must target a neighbor of the current node; it appends the
/// pre-move node and the action to the histories and increments `t`. `Stop`
/// freezes the state and marks it terminated. Acting on a terminated state is
/// an error.
pub fn step(graph: &EnvGraph, state: &AgentState, action: Action) -> Result<AgentState> {
    if state.terminated {
        return Err(NavError::IllegalAction(format!(
            "episode already terminated at node {}",
            state.current
        )));
    }
    match action {
        Action::Stop => {
            let mut next = state.clone();
            next.terminated = true;
            Ok(next)
        }
        Action::MoveTo(v) => {
            if graph.edge_length(state.current, v).is_none() {
                return Err(NavError::IllegalAction(format!(
                    "no edge {} -> {v} in {}",
                    state.current, graph.env_id
                )));
            }
            let mut next = state.clone();
            next.visited.push(state.current);
            next.taken.push(action);
            next.current = v;
            next.t += 1;
            Ok(next)
        }
    }
}

// ============================================================================
// Shortest paths
// ============================================================================

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: NodeId,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap on (dist, node); distances are finite non-NaN by
        // construction, and the node id tie-break keeps pop order total.
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap()
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Geodesic distance from `src` to every node (`f64::INFINITY` when
/// unreachable, which generated worlds never produce).
pub fn shortest_dists(graph: &EnvGraph, src: NodeId) -> Result<Vec<f64>> {
    graph.node(src)?;
    let n = graph.node_count();
    let mut dist = vec![f64::INFINITY; n];
    dist[src as usize] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapEntry { dist: 0.0, node: src });
    while let Some(HeapEntry { dist: d, node: x }) = heap.pop() {
        if d > dist[x as usize] {
            continue;
        }
        for &(w, len) in &graph.adjacency[x as usize] {
            let nd = d + len;
            if nd < dist[w as usize] {
                dist[w as usize] = nd;
                heap.push(HeapEntry { dist: nd, node: w });
            }
        }
    }
    Ok(dist)
}

/// Shortest path from `u` to `v` with a deterministic tie-break: among all
/// minimum-length paths, the lexicographically smallest node-id sequence.
///
/// Returns the node sequence (inclusive of both endpoints) and its length.
/// `u == v` yields `([u], 0.0)`.
pub fn shortest_path(graph: &EnvGraph, u: NodeId, v: NodeId) -> Result<(Vec<NodeId>, f64)> {
    graph.node(u)?;
    graph.node(v)?;
    if u == v {
        return Ok((vec![u], 0.0));
    }
    // Distance-to-target field, then walk forward greedily: at each node take
    // the smallest-id neighbor that stays on some shortest path. Earliest
    // smallest divergence is exactly lexicographic minimality.
    let dist_to_v = shortest_dists(graph, v)?;
    if !dist_to_v[u as usize].is_finite() {
        return Err(NavError::IllegalAction(format!(
            "no path {u} -> {v} in {}",
            graph.env_id
        )));
    }
    let total = dist_to_v[u as usize];
    let mut path = vec![u];
    let mut x = u;
    while x != v {
        let dx = dist_to_v[x as usize];
        let eps = 1e-9 * (1.0 + dx.abs());
        let mut next: Option<NodeId> = None;
        for &(w, len) in &graph.adjacency[x as usize] {
            if (len + dist_to_v[w as usize] - dx).abs() <= eps {
                next = Some(w);
                break; // adjacency is ascending, first hit is smallest id
            }
        }
        let w = next.ok_or_else(|| {
            NavError::Numerical(format!("shortest-path walk stuck at node {x}"))
        })?;
        path.push(w);
        x = w;
    }
    Ok((path, total))
}

/// Geodesic distance between two nodes.
pub fn node_distance(graph: &EnvGraph, u: NodeId, v: NodeId) -> Result<f64> {
    if u == v {
        graph.node(u)?;
        return Ok(0.0);
    }
    Ok(shortest_dists(graph, u)?[v as usize])
}

/// Sum of edge lengths along a node sequence. Every consecutive pair must be
/// adjacent; single-node sequences have length zero.
pub fn sequence_length(graph: &EnvGraph, seq: &[NodeId]) -> Result<f64> {
    let mut total = 0.0;
    for w in seq.windows(2) {
        let len = graph.edge_length(w[0], w[1]).ok_or_else(|| {
            NavError::IllegalAction(format!("non-adjacent pair {} -> {}", w[0], w[1]))
        })?;
        total += len;
    }
    if let Some(&first) = seq.first() {
        graph.node(first)?;
    }
    Ok(total)
}

// ============================================================================
// Headings and action embeddings
// ============================================================================

/// Compass bearing from `from` to `to`: 0 = due north (+y), increasing
/// clockwise (east positive), in `(-pi, pi]`.
pub fn heading(graph: &EnvGraph, from: NodeId, to: NodeId) -> Result<f64> {
    let a = graph.node(from)?.position;
    let b = graph.node(to)?.position;
    Ok((b[0] - a[0]).atan2(b[1] - a[1]))
}

/// Elevation angle from `from` to `to` (0 = level, positive = upward).
pub fn elevation(graph: &EnvGraph, from: NodeId, to: NodeId) -> Result<f64> {
    let a = graph.node(from)?.position;
    let b = graph.node(to)?.position;
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let dz = b[2] - a[2];
    Ok(dz.atan2((dx * dx + dy * dy).sqrt()))
}

/// Signed heading change when turning from bearing `prev` onto bearing
/// `next`, wrapped into `(-pi, pi]`. Positive is a counter-clockwise turn,
/// i.e. a left turn under the compass-bearing convention used here; the
/// instruction grammar emits the word "left" exactly when this is positive
/// (beyond its straight-threshold).
pub fn signed_heading_change(prev: f64, next: f64) -> f64 {
    let mut d = prev - next;
    while d > std::f64::consts::PI {
        d -= 2.0 * std::f64::consts::PI;
    }
    while d <= -std::f64::consts::PI {
        d += 2.0 * std::f64::consts::PI;
    }
    d
}

/// Per-edge compass bearings along a node path (length `path.len() - 1`).
pub fn path_headings(graph: &EnvGraph, path: &[NodeId]) -> Result<Vec<f64>> {
    path.windows(2).map(|w| heading(graph, w[0], w[1])).collect()
}

/// Embed a candidate action taken from `node`.
///
/// `MoveTo` actions must be legal (edge must exist). `Stop` combines the
/// level due-north orientation prefix `[0, 1, 0, 1]` with `stop_feature`,
/// which models supply (their learned stop vector, or zeros); it must have
/// the same width as node features.
pub fn action_embedding(
    graph: &EnvGraph,
    node: NodeId,
    action: Action,
    stop_feature: &[f64],
) -> Result<ActionEmbedding> {
    match action {
        Action::Stop => {
            let d_v = graph.node(node)?.visual_feature.len();
            if stop_feature.len() != d_v {
                return Err(NavError::Shape {
                    op: "action_embedding(stop)",
                    lhs: vec![stop_feature.len()],
                    rhs: vec![d_v],
                });
            }
            Ok(ActionEmbedding {
                orientation: [0.0, 1.0, 0.0, 1.0],
                target_feature: stop_feature.to_vec(),
            })
        }
        Action::MoveTo(v) => {
            if graph.edge_length(node, v).is_none() {
                return Err(NavError::IllegalAction(format!(
                    "cannot embed move {node} -> {v}: no such edge"
                )));
            }
            let phi = heading(graph, node, v)?;
            let theta = elevation(graph, node, v)?;
            Ok(ActionEmbedding {
                orientation: [phi.sin(), phi.cos(), theta.sin(), theta.cos()],
                target_feature: graph.node(v)?.visual_feature.clone(),
            })
        }
    }
}

// ============================================================================
// Serialization
// ============================================================================

#[derive(Serialize, Deserialize)]
struct WorldFile {
    schema: String,
    env_id: String,
    nodes: Vec<Node>,
    edges: Vec<(NodeId, NodeId, f64)>,
}

/// Serialize a world to its canonical JSON form.
pub fn world_to_json(graph: &EnvGraph) -> Result<String> {
    let file = WorldFile {
        schema: WORLD_SCHEMA.to_string(),
        env_id: graph.env_id.clone(),
        nodes: graph.nodes.clone(),
        edges: graph.edges.clone(),
    };
    Ok(serde_json::to_string(&file)?)
}

/// Parse a world from JSON, validating the schema tag and rebuilding the
/// adjacency index.
pub fn world_from_json(text: &str) -> Result<EnvGraph> {
    let file: WorldFile = serde_json::from_str(text)?;
    if file.schema != WORLD_SCHEMA {
        return data_err(format!(
            "unsupported world schema {:?} (expected {WORLD_SCHEMA:?})",
            file.schema
        ));
    }
    let n = file.nodes.len();
    for (i, node) in file.nodes.iter().enumerate() {
        if node.id as usize != i {
            return data_err(format!("world file node ids not dense at index {i}"));
        }
    }
    for &(u, v, len) in &file.edges {
        if u as usize >= n || v as usize >= n {
            return data_err(format!("world file edge ({u},{v}) out of range"));
        }
        let expect = dist3(file.nodes[u as usize].position, file.nodes[v as usize].position);
        if (expect - len).abs() > 1e-6 * (1.0 + expect) {
            return data_err(format!(
                "edge ({u},{v}) length {len} disagrees with node positions ({expect})"
            ));
        }
    }
    let adjacency = build_adjacency(n, &file.edges);
    Ok(EnvGraph {
        env_id: file.env_id,
        nodes: file.nodes,
        edges: file.edges,
        adjacency,
    })
}

pub fn save_world(graph: &EnvGraph, path: &Path) -> Result<()> {
    std::fs::write(path, world_to_json(graph)?)?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<EnvGraph> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| NavError::Data(format!("reading {}: {e}", path.display())))?;
    world_from_json(&text).map_err(|e| match e {
        NavError::Json(j) => NavError::Data(format!("parsing {}: {j}", path.display())),
        other => other,
    })
}

// ============================================================================
// Tests
// ============================================================================
