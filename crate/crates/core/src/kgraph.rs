//! Artistic knowledge graph and node2vec embeddings.
//!
//! Every statue image is a node, every distinct attribute value is a node,
//! and an edge joins an image to each attribute value of its statue. Node
//! embeddings come from second-order biased random walks fed to a skip-gram
//! model with negative sampling.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{StatueRecord, TaskId};
use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 128;
pub const ATTRIBUTE_PREFIX: &str = "attr:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Dimensions,
    BaseMaterial,
    ColorTexture,
    StoneType,
    WoodType,
    ConstructionMethod,
    StatueType,
    Century,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Dimensions => "dimensions",
            Family::BaseMaterial => "base_material",
            Family::ColorTexture => "color_texture",
            Family::StoneType => "stone_type",
            Family::WoodType => "wood_type",
            Family::ConstructionMethod => "construction_method",
            Family::StatueType => "statue_type",
            Family::Century => "century",
        }
    }

    /// The attribute family a task's labels come from.
    pub fn of_task(task: TaskId) -> Option<Family> {
        match task {
            TaskId::T1Style => None,
            TaskId::T2Dimensions => Some(Family::Dimensions),
            TaskId::T3Century => Some(Family::Century),
            TaskId::T4StatueType => Some(Family::StatueType),
            TaskId::T5_1BaseMaterial => Some(Family::BaseMaterial),
            TaskId::T5_2ColorTexture => Some(Family::ColorTexture),
            TaskId::T5_3StoneType => Some(Family::StoneType),
            TaskId::T5_4WoodType => Some(Family::WoodType),
            TaskId::T5_5Construction => Some(Family::ConstructionMethod),
        }
    }

    /// Families used by the graph without and with the time attribute.
    pub fn graph_families(include_time: bool) -> Vec<Family> {
        let mut f = vec![
            Family::Dimensions,
            Family::BaseMaterial,
            Family::ColorTexture,
            Family::StoneType,
            Family::WoodType,
            Family::ConstructionMethod,
            Family::StatueType,
        ];
        if include_time {
            f.push(Family::Century);
        }
        f
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    StatueImage,
    AttributeValue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    pub family: Option<Family>,
    pub value: Option<String>,
}

/// Undirected adjacency lists, each sorted and free of duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(a, b) in edges {
            if a == b {
                continue;
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        Self { neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    nodes: Vec<Node>,
    /// (image node, attribute node), sorted.
    edges: Vec<(usize, usize)>,
    adjacency: Adjacency,
    pub include_time: bool,
}

fn attribute_values(record: &StatueRecord, family: Family) -> Vec<String> {
    fn set<T: ToString>(s: &Option<BTreeSet<T>>) -> Vec<String> {
        s.iter().flatten().map(ToString::to_string).collect()
    }
    match family {
        Family::Dimensions => record.dimension().map(|d| d.to_string()).into_iter().collect(),
        Family::BaseMaterial => set(&record.base_material),
        Family::ColorTexture => set(&record.color_texture),
        Family::StoneType => set(&record.stone_type),
        Family::WoodType => set(&record.wood_type),
        Family::ConstructionMethod => record
            .construction_method
            .map(|c| c.to_string())
            .into_iter()
            .collect(),
        Family::StatueType => record.statue_type.map(|t| t.to_string()).into_iter().collect(),
        Family::Century => record
            .aligned_date()
            .map(|d| d.century.to_string())
            .into_iter()
            .collect(),
    }
}

pub fn attribute_node_id(family: Family, value: &str) -> String {
    format!("{ATTRIBUTE_PREFIX}{family}={value}")
}

/// Builds the graph over all images of `records`. With `include_time` the
/// century attribute is added to the dimension, material and type families.
pub fn build_kg(records: &[StatueRecord], include_time: bool) -> KnowledgeGraph {
    let families = Family::graph_families(include_time);
    let mut nodes = Vec::new();
    let mut image_attrs: Vec<(usize, Vec<(Family, String)>)> = Vec::new();
    let mut attrs: BTreeSet<(Family, String)> = BTreeSet::new();
    for r in records {
        let values: Vec<(Family, String)> = families
            .iter()
            .flat_map(|&f| attribute_values(r, f).into_iter().map(move |v| (f, v)))
            .collect();
        attrs.extend(values.iter().cloned());
        for image in &r.image_ids {
            image_attrs.push((nodes.len(), values.clone()));
            nodes.push(Node {
                id: image.clone(),
                kind: NodeKind::StatueImage,
                family: None,
                value: None,
            });
        }
    }
    let mut attr_index = BTreeMap::new();
    for (family, value) in attrs {
        attr_index.insert((family, value.clone()), nodes.len());
        nodes.push(Node {
            id: attribute_node_id(family, &value),
            kind: NodeKind::AttributeValue,
            family: Some(family),
            value: Some(value),
        });
    }
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (image, values) in image_attrs {
        for key in values {
            edges.insert((image, attr_index[&key]));
        }
    }
    let edges: Vec<(usize, usize)> = edges.into_iter().collect();
    let adjacency = Adjacency::from_edges(nodes.len(), &edges);
    KnowledgeGraph {
        nodes,
        edges,
        adjacency,
        include_time,
    }
}

impl KnowledgeGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.id.clone()).collect()
    }

    pub fn families(&self) -> BTreeSet<Family> {
        self.nodes.iter().filter_map(|n| n.family).collect()
    }

    /// Structural check: every edge joins an image to an attribute value, no
    /// duplicate edges, no self loops, attribute values unique per family.
    pub fn check_bipartite(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.edges {
            if a == b {
                return Err(Error::Validation(format!("self loop on node {}", self.nodes[a].id)));
            }
            if self.nodes[a].kind != NodeKind::StatueImage
                || self.nodes[b].kind != NodeKind::AttributeValue
            {
                return Err(Error::Validation(format!(
                    "edge {} - {} does not join an image to an attribute",
                    self.nodes[a].id, self.nodes[b].id
                )));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Validation(format!(
                    "duplicate edge {} - {}",
                    self.nodes[a].id, self.nodes[b].id
                )));
            }
        }
        let mut values = BTreeSet::new();
        for n in &self.nodes {
            if n.kind == NodeKind::AttributeValue && !values.insert((n.family, n.value.clone())) {
                return Err(Error::Validation(format!("attribute node {} repeated", n.id)));
            }
        }
        Ok(())
    }

    /// Edge list, one `node_id<TAB>node_id` per line.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> Result<()> {
        for &(a, b) in &self.edges {
            writeln!(w, "{}\t{}", self.nodes[a].id, self.nodes[b].id)
                .map_err(|e| Error::io("edge list", e))?;
        }
        Ok(())
    }

    /// Node table CSV `node_id,kind,family,value`.
    pub fn write_node_table<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let wrap = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
        w.write_record(["node_id", "kind", "family", "value"]).map_err(wrap)?;
        for n in &self.nodes {
            let kind = match n.kind {
                NodeKind::StatueImage => "statue_image",
                NodeKind::AttributeValue => "attribute_value",
            };
            let family = n.family.map(Family::as_str).unwrap_or("");
            w.write_record([n.id.as_str(), kind, family, n.value.as_deref().unwrap_or("")])
                .map_err(wrap)?;
        }
        w.flush()
            .map_err(|e| Error::Validation(format!("csv flush failed: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Walks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node2VecConfig {
    pub walk_length: usize,
    pub walks_per_node: usize,
    pub return_p: f64,
    pub inout_q: f64,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Initial learning rate, decayed linearly towards zero.
    pub learning_rate: f64,
    pub seed: u64,
    /// Skip-gram workers. Only `1` is bit-deterministic.
    pub threads: usize,
}

impl Default for Node2VecConfig {
    fn default() -> Self {
        Self {
            walk_length: 80,
            walks_per_node: 10,
            return_p: 1.0,
            inout_q: 1.0,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 42,
            threads: 1,
        }
    }
}

impl Node2VecConfig {
    pub fn validate(&self) -> Result<()> {
        let ints = [
            ("walk_length", self.walk_length),
            ("walks_per_node", self.walks_per_node),
            ("window", self.window),
            ("negatives", self.negatives),
            ("epochs", self.epochs),
            ("threads", self.threads),
        ];
        for (name, v) in ints {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        let reals = [
            ("return_p", self.return_p),
            ("inout_q", self.inout_q),
            ("learning_rate", self.learning_rate),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// splitmix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed) ^ a) ^ b)
}

/// One second-order step from `cur`, having arrived from `prev`. Unnormalized
/// weights are `1/p` to return to `prev`, `1` for neighbors of `prev` and
/// `1/q` otherwise; sampling is by rejection against the largest weight.
pub fn biased_step<R: Rng + ?Sized>(
    adj: &Adjacency,
    prev: Option<usize>,
    cur: usize,
    return_p: f64,
    inout_q: f64,
    rng: &mut R,
) -> Option<usize> {
    let nbrs = adj.neighbors(cur);
    if nbrs.is_empty() {
        return None;
    }
    let Some(prev) = prev else {
        return Some(nbrs[rng.random_range(0..nbrs.len())]);
    };
    let (w_return, w_out) = (1.0 / return_p, 1.0 / inout_q);
    let w_max = w_return.max(1.0).max(w_out);
    loop {
        let x = nbrs[rng.random_range(0..nbrs.len())];
        let w = if x == prev {
            w_return
        } else if adj.has_edge(prev, x) {
            1.0
        } else {
            w_out
        };
        if rng.random::<f64>() * w_max < w {
            return Some(x);
        }
    }
}

fn walk_from<R: Rng + ?Sized>(adj: &Adjacency, start: usize, cfg: &Node2VecConfig, rng: &mut R) -> Vec<usize> {
    let mut walk = Vec::with_capacity(cfg.walk_length);
    walk.push(start);
    while walk.len() < cfg.walk_length {
        let cur = walk[walk.len() - 1];
        let prev = walk.len().checked_sub(2).map(|i| walk[i]);
        match biased_step(adj, prev, cur, cfg.return_p, cfg.inout_q, rng) {
            Some(next) => walk.push(next),
            None => break,
        }
    }
    walk
}

/// `walks_per_node` rounds; each round visits every node once in a seeded
/// shuffled order. Each walk has its own derived seed, so the result does not
/// depend on the thread count.
pub fn random_walks_on(adj: &Adjacency, cfg: &Node2VecConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    if adj.is_empty() {
        return Err(Error::Validation("cannot walk an empty graph".into()));
    }
    let isolated = (0..adj.len()).filter(|&n| adj.neighbors(n).is_empty()).count();
    if isolated > 0 {
        log::warn!("{isolated} isolated node(s) produce walks of length 1");
    }
    let mut walks = Vec::with_capacity(adj.len() * cfg.walks_per_node);
    for round in 0..cfg.walks_per_node as u64 {
        let mut order: Vec<usize> = (0..adj.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, round, u64::MAX)));
        let batch: Vec<Vec<usize>> = order
            .par_iter()
            .map(|&start| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, round, start as u64));
                walk_from(adj, start, cfg, &mut rng)
            })
            .collect();
        walks.extend(batch);
    }
    Ok(walks)
}

pub fn random_walks(kg: &KnowledgeGraph, cfg: &Node2VecConfig) -> Result<Vec<Vec<usize>>> {
    random_walks_on(kg.adjacency(), cfg)
}

// ---------------------------------------------------------------------------
// Skip-gram with negative sampling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEmbedding {
    pub dim: usize,
    pub node_ids: Vec<String>,
    /// Row-major, one row of `dim` values per node id.
    pub vectors: Vec<f64>,
}

impl NodeEmbedding {
    pub fn vector(&self, node: usize) -> &[f64] {
        &self.vectors[node * self.dim..(node + 1) * self.dim]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|n| n == id)
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (self.vector(a), self.vector(b));
        let d = crate::matrix::dot(x, y);
        let nx = crate::matrix::dot(x, x).sqrt();
        let ny = crate::matrix::dot(y, y).sqrt();
        if nx == 0.0 || ny == 0.0 {
            0.0
        } else {
            d / (nx * ny)
        }
    }
}

/// Parameter storage shared by the deterministic and the lock-free trainer.
trait Params {
    fn load(&self, i: usize) -> f64;
    fn store(&self, i: usize, v: f64);
}

impl Params for [Cell<f64>] {
    fn load(&self, i: usize) -> f64 {
        self[i].get()
    }
    fn store(&self, i: usize, v: f64) {
        self[i].set(v)
    }
}

impl Params for [AtomicU64] {
    fn load(&self, i: usize) -> f64 {
        f64::from_bits(self[i].load(Ordering::Relaxed))
    }
    fn store(&self, i: usize, v: f64) {
        self[i].store(v.to_bits(), Ordering::Relaxed)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Sgns<'a, P: Params + ?Sized> {
    input: &'a P,
    output: &'a P,
    dim: usize,
    negatives: &'a WeightedIndex<f64>,
    cfg: &'a Node2VecConfig,
    total: usize,
    processed: &'a AtomicUsize,
}

impl<P: Params + ?Sized> Sgns<'_, P> {
    fn train_walks<'w, R: Rng>(&self, walks: impl Iterator<Item = &'w Vec<usize>>, rng: &mut R) {
        let dim = self.dim;
        let mut grad = vec![0.0; dim];
        let mut center_vec = vec![0.0; dim];
        for walk in walks {
            let done = self.processed.fetch_add(walk.len(), Ordering::Relaxed);
            let lr = self.cfg.learning_rate * (1.0 - done as f64 / self.total as f64).max(1e-4);
            for (i, &center) in walk.iter().enumerate() {
                let reduced = rng.random_range(0..self.cfg.window);
                let span = self.cfg.window - reduced;
                let lo = i.saturating_sub(span);
                let hi = (i + span).min(walk.len() - 1);
                for (j, &context) in walk.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let base_in = center * dim;
                    for (k, c) in center_vec.iter_mut().enumerate() {
                        *c = self.input.load(base_in + k);
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    for s in 0..=self.cfg.negatives {
                        let (target, label) = if s == 0 {
                            (context, 1.0)
                        } else {
                            let t = self.negatives.sample(rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let base_out = target * dim;
                        let mut f = 0.0;
                        for (k, c) in center_vec.iter().enumerate() {
                            f += c * self.output.load(base_out + k);
                        }
                        let g = (label - sigmoid(f)) * lr;
                        for (k, c) in center_vec.iter().enumerate() {
                            let o = self.output.load(base_out + k);
                            grad[k] += g * o;
                            self.output.store(base_out + k, o + g * c);
                        }
                    }
                    for (k, gk) in grad.iter().enumerate() {
                        self.input.store(base_in + k, center_vec[k] + gk);
                    }
                }
            }
        }
    }
}

/// Trains 128-dimensional skip-gram vectors over the walks and returns the
/// input-side vectors. Negatives are drawn from walk frequencies raised to
/// the power 0.75.
pub fn train_embeddings(
    walks: &[Vec<usize>],
    node_ids: &[String],
    cfg: &Node2VecConfig,
) -> Result<NodeEmbedding> {
    train_embeddings_dim(walks, node_ids, cfg, EMBEDDING_DIM)
}

pub(crate) fn train_embeddings_dim(
    walks: &[Vec<usize>],
    node_ids: &[String],
    cfg: &Node2VecConfig,
    dim: usize,
) -> Result<NodeEmbedding> {
    cfg.validate()?;
    let n = node_ids.len();
    if walks.is_empty() || n == 0 {
        return Err(Error::Validation("no walks to train on".into()));
    }
    let mut counts = vec![0.0f64; n];
    for &v in walks.iter().flatten() {
        if v >= n {
            return Err(Error::Validation(format!("walk visits unknown node index {v}")));
        }
        counts[v] += 1.0;
    }
    let weights: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
    let negatives = WeightedIndex::new(&weights)
        .map_err(|e| Error::Training(format!("negative sampling table: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5EED, 0));
    let mut input: Vec<f64> = (0..n * dim)
        .map(|_| (rng.random::<f64>() - 0.5) / dim as f64)
        .collect();
    let mut output = vec![0.0; n * dim];
    let tokens: usize = walks.iter().map(Vec::len).sum();
    let total = tokens * cfg.epochs;
    let processed = AtomicUsize::new(0);

    if cfg.threads <= 1 {
        let input_cells = Cell::from_mut(input.as_mut_slice()).as_slice_of_cells();
        let output_cells = Cell::from_mut(output.as_mut_slice()).as_slice_of_cells();
        let trainer = Sgns {
            input: input_cells,
            output: output_cells,
            dim,
            negatives: &negatives,
            cfg,
            total,
            processed: &processed,
        };
        for _ in 0..cfg.epochs {
            trainer.train_walks(walks.iter(), &mut rng);
        }
    } else {
        let to_atomic = |v: &[f64]| v.iter().map(|x| AtomicU64::new(x.to_bits())).collect::<Vec<_>>();
        let (ain, aout) = (to_atomic(&input), to_atomic(&output));
        let trainer = Sgns {
            input: ain.as_slice(),
            output: aout.as_slice(),
            dim,
            negatives: &negatives,
            cfg,
            total,
            processed: &processed,
        };
        for epoch in 0..cfg.epochs as u64 {
            (0..cfg.threads).into_par_iter().for_each(|worker| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch, worker as u64));
                let mine = walks.iter().skip(worker).step_by(cfg.threads);
                trainer.train_walks(mine, &mut rng);
            });
        }
        input = ain.iter().map(|a| f64::from_bits(a.load(Ordering::Relaxed))).collect();
    }

    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("embedding diverged to non-finite values".into()));
    }
    Ok(NodeEmbedding {
        dim,
        node_ids: node_ids.to_vec(),
        vectors: input,
    })
}

/// Walks and skip-gram training on a knowledge graph.
pub fn node2vec(kg: &KnowledgeGraph, cfg: &Node2VecConfig) -> Result<NodeEmbedding> {
    let walks = random_walks(kg, cfg)?;
    train_embeddings(&walks, &kg.node_ids(), cfg)
}
