//! Object descriptors: semantic graphs, Semantic Histograms over label walks,
//! vision-language embeddings and their weighted combination.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matching::SimilarityMatrix;
use crate::scene::EllipsoidLandmark;

/// Default adjacency radius for semantic graphs, meters.
pub const DEFAULT_D_ADJ: f64 = 0.8;
/// Default walk length (nodes per walk, start node included).
pub const DEFAULT_STEPS: usize = 3;
/// Default weight of the embedding term in the hybrid similarity.
pub const DEFAULT_ALPHA: f64 = 0.7;

/// Unit-norm tolerance for embedding rows.
pub const EMBEDDING_NORM_TOLERANCE: f64 = 1e-6;

/// Landmarks as nodes, proximity as edges.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGraph {
    node_classes: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    num_classes: usize,
    d_adj: f64,
}

impl SemanticGraph {
    /// Graph from explicit class labels and an undirected edge list.
    pub fn from_edges(node_classes: Vec<usize>, edges: &[(usize, usize)], num_classes: usize) -> Result<Self> {
        let n = node_classes.len();
        if let Some(&c) = node_classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidConfig(format!(
                "class id {c} out of range for {num_classes} classes"
            )));
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidConfig(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                continue;
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self {
            node_classes,
            neighbors,
            num_classes,
            d_adj: f64::NAN,
        })
    }

    /// Widen the label alphabet, e.g. so map and observation histograms share `C`.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if num_classes < self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "cannot shrink class count from {} to {num_classes}",
                self.num_classes
            )));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.node_classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_classes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn d_adj(&self) -> f64 {
        self.d_adj
    }

    pub fn node_class(&self, node: usize) -> usize {
        self.node_classes[node]
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }
}

/// Connect every pair of landmarks strictly closer than `d_adj`.
///
/// The class alphabet is `max(class_id) + 1`; use
/// [`SemanticGraph::with_num_classes`] to align two graphs.
pub fn build_semantic_graph(landmarks: &[EllipsoidLandmark], d_adj: f64) -> Result<SemanticGraph> {
    if !(d_adj > 0.0 && d_adj.is_finite()) {
        return Err(Error::InvalidConfig(format!("d_adj must be positive, got {d_adj}")));
    }
    let n = landmarks.len();
    let mut neighbors = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (landmarks[i].position() - landmarks[j].position()).norm();
            if d < d_adj {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }
    let node_classes: Vec<usize> = landmarks.iter().map(|l| l.class_id()).collect();
    let num_classes = node_classes.iter().max().map_or(1, |c| c + 1);
    Ok(SemanticGraph {
        node_classes,
        neighbors,
        num_classes,
        d_adj,
    })
}

/// Which label sequences a histogram counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WalkMode {
    /// Every walk, revisits and immediate backtracking included.
    #[default]
    Walks,
    /// Only walks that never revisit a node.
    SimplePaths,
}

/// L2-normalised histogram of class-label sequences over `C^s` bins, stored sparsely.
///
/// Bin index of a sequence `(c₁, …, c_s)` is `Σ cᵢ·C^(s−i)` (first label most significant).
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticHistogram {
    num_classes: usize,
    steps: usize,
    counts: Vec<(u64, u64)>,
    values: Vec<(u64, f64)>,
}

impl SemanticHistogram {
    fn from_counts(num_classes: usize, steps: usize, counts: BTreeMap<u64, u64>) -> Self {
        let counts: Vec<(u64, u64)> = counts.into_iter().filter(|&(_, c)| c > 0).collect();
        let norm = counts
            .iter()
            .map(|&(_, c)| (c as f64) * (c as f64))
            .sum::<f64>()
            .sqrt();
        let values = if norm > 0.0 {
            counts.iter().map(|&(b, c)| (b, c as f64 / norm)).collect()
        } else {
            Vec::new()
        };
        Self {
            num_classes,
            steps,
            counts,
            values,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of bins, `C^s`.
    pub fn dimension(&self) -> u64 {
        (self.num_classes as u64).pow(self.steps as u32)
    }

    /// Raw walk counts of the non-empty bins, ascending by bin.
    pub fn counts(&self) -> &[(u64, u64)] {
        &self.counts
    }

    /// Normalised values of the non-empty bins, ascending by bin.
    pub fn values(&self) -> &[(u64, f64)] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, bin: u64) -> f64 {
        self.values
            .binary_search_by_key(&bin, |&(b, _)| b)
            .map_or(0.0, |i| self.values[i].1)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension() as usize];
        for &(b, v) in &self.values {
            out[b as usize] = v;
        }
        out
    }

    /// Dot product with another histogram over the same `(C, s)`.
    pub fn dot(&self, other: &SemanticHistogram) -> Result<f64> {
        if self.num_classes != other.num_classes || self.steps != other.steps {
            return Err(Error::InvalidConfig(format!(
                "histogram shapes differ: ({}, {}) vs ({}, {})",
                self.num_classes, self.steps, other.num_classes, other.steps
            )));
        }
        let (a, b) = (&self.values, &other.values);
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        Ok(acc)
    }
}

fn check_histogram_shape(num_classes: usize, steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::InvalidConfig("step count must be at least 1".into()));
    }
    (num_classes as u64)
        .checked_pow(steps as u32)
        .map(|_| ())
        .ok_or(Error::HistogramTooLarge {
            classes: num_classes,
            steps,
        })
}

/// Histogram of label sequences along every `steps`-node walk from `node`.
pub fn semantic_histogram(graph: &SemanticGraph, node: usize, steps: usize) -> Result<SemanticHistogram> {
    semantic_histogram_with_mode(graph, node, steps, WalkMode::Walks)
}

pub fn semantic_histogram_with_mode(
    graph: &SemanticGraph,
    node: usize,
    steps: usize,
    mode: WalkMode,
) -> Result<SemanticHistogram> {
    check_histogram_shape(graph.num_classes, steps)?;
    if node >= graph.len() {
        return Err(Error::InvalidConfig(format!(
            "node {node} out of range for {} nodes",
            graph.len()
        )));
    }
    let counts = match mode {
        WalkMode::Walks => count_walks(graph, node, steps),
        WalkMode::SimplePaths => count_simple_paths(graph, node, steps),
    };
    Ok(SemanticHistogram::from_counts(graph.num_classes, steps, counts))
}

/// Forward propagation of (end node, label code) multiplicities, one hop at a time.
fn count_walks(graph: &SemanticGraph, node: usize, steps: usize) -> BTreeMap<u64, u64> {
    let c = graph.num_classes as u64;
    let mut frontier: BTreeMap<(usize, u64), u64> = BTreeMap::new();
    frontier.insert((node, graph.node_classes[node] as u64), 1);
    for _ in 1..steps {
        let mut next: BTreeMap<(usize, u64), u64> = BTreeMap::new();
        for (&(at, code), &count) in &frontier {
            for &nb in &graph.neighbors[at] {
                let key = (nb, code * c + graph.node_classes[nb] as u64);
                let slot = next.entry(key).or_insert(0);
                *slot = slot.saturating_add(count);
            }
        }
        frontier = next;
    }
    let mut out = BTreeMap::new();
    for ((_, code), count) in frontier {
        let slot = out.entry(code).or_insert(0u64);
        *slot = slot.saturating_add(count);
    }
    out
}

fn count_simple_paths(graph: &SemanticGraph, node: usize, steps: usize) -> BTreeMap<u64, u64> {
    fn dfs(
        graph: &SemanticGraph,
        at: usize,
        code: u64,
        remaining: usize,
        visited: &mut Vec<bool>,
        out: &mut BTreeMap<u64, u64>,
    ) {
        if remaining == 0 {
            *out.entry(code).or_insert(0) += 1;
            return;
        }
        for &nb in &graph.neighbors[at] {
            if visited[nb] {
                continue;
            }
            visited[nb] = true;
            let next = code * graph.num_classes as u64 + graph.node_classes[nb] as u64;
            dfs(graph, nb, next, remaining - 1, visited, out);
            visited[nb] = false;
        }
    }
    let mut visited = vec![false; graph.len()];
    visited[node] = true;
    let mut out = BTreeMap::new();
    dfs(graph, node, graph.node_classes[node] as u64, steps - 1, &mut visited, &mut out);
    out
}

/// Histograms for every node, in node order.
pub fn all_histograms(graph: &SemanticGraph, steps: usize, mode: WalkMode) -> Result<Vec<SemanticHistogram>> {
    (0..graph.len())
        .into_par_iter()
        .map(|n| semantic_histogram_with_mode(graph, n, steps, mode))
        .collect()
}

/// Unit-norm embedding vectors keyed by string id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    /// `data` holds `ids.len() × dim` values in id order.
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidEmbedding("dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::InvalidEmbedding(format!(
                "expected {} values for {} ids of dim {dim}, got {}",
                ids.len() * dim,
                ids.len(),
                data.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(Error::InvalidEmbedding(format!("duplicate id {id:?}")));
            }
            let norm = data[row * dim..(row + 1) * dim]
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if norm.is_nan() || (norm - 1.0).abs() > EMBEDDING_NORM_TOLERANCE {
                return Err(Error::InvalidEmbedding(format!(
                    "row {row} ({id:?}) has norm {norm}, expected unit length"
                )));
            }
        }
        Ok(Self {
            dim,
            ids,
            data,
            index,
        })
    }

    /// Build from `f64` rows, normalising each.
    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::InvalidEmbedding("ragged rows".into()));
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::InvalidEmbedding("zero or non-finite row".into()));
            }
            data.extend(row.iter().map(|v| (v / norm) as f32));
        }
        Self::new(dim, ids, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Row-major `len × dim` payload.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index
            .get(id)
            .map(|&row| &self.data[row * self.dim..(row + 1) * self.dim])
    }

    pub fn for_landmark(&self, lm: &EllipsoidLandmark) -> Option<&[f32]> {
        self.get(&lm.embedding_key())
    }
}

pub fn embedding_dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Components of a hybrid similarity evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridScore {
    pub total: f64,
    pub clip: f64,
    pub sh: f64,
    /// An embedding was needed (`alpha > 0`) but absent; `clip` was taken as 0.
    pub missing_embedding: bool,
}

/// `alpha · (e_map · e_obs) + (1 − alpha) · (h_map · h_obs)`.
///
/// The embedding term is skipped entirely when `alpha == 0`.
pub fn hybrid_similarity(
    map_lm: &EllipsoidLandmark,
    obs_lm: &EllipsoidLandmark,
    sh_map: &SemanticHistogram,
    sh_obs: &SemanticHistogram,
    embeddings: Option<&EmbeddingTable>,
    alpha: f64,
) -> Result<HybridScore> {
    check_alpha(alpha)?;
    let sh = sh_map.dot(sh_obs)?;
    let (clip, missing) = if alpha > 0.0 {
        let pair = embeddings.and_then(|t| Some((t.for_landmark(map_lm)?, t.for_landmark(obs_lm)?)));
        match pair {
            Some((a, b)) => (embedding_dot(a, b), false),
            None => (0.0, true),
        }
    } else {
        (0.0, false)
    };
    Ok(HybridScore {
        total: combine(alpha, clip, sh),
        clip,
        sh,
        missing_embedding: missing,
    })
}

#[inline]
pub fn combine(alpha: f64, clip: f64, sh: f64) -> f64 {
    alpha * clip + (1.0 - alpha) * sh
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

/// Observation × map similarity matrix plus bookkeeping on absent embeddings.
#[derive(Debug, Clone)]
pub struct SimilarityReport {
    pub matrix: SimilarityMatrix,
    /// Observation/map pairs scored without an embedding term.
    pub missing_embedding_pairs: usize,
    /// Landmarks (map, then observation) with no embedding, when one was needed.
    pub missing_embedding_keys: Vec<String>,
}

/// Hybrid similarity of every (observation, map landmark) pair.
pub fn similarity_matrix(
    map: &[EllipsoidLandmark],
    obs: &[EllipsoidLandmark],
    map_hists: &[SemanticHistogram],
    obs_hists: &[SemanticHistogram],
    embeddings: Option<&EmbeddingTable>,
    alpha: f64,
) -> Result<SimilarityReport> {
    check_alpha(alpha)?;
    if map.len() != map_hists.len() || obs.len() != obs_hists.len() {
        return Err(Error::InvalidConfig("histogram count does not match landmark count".into()));
    }
    let lookup = |lms: &[EllipsoidLandmark]| -> Vec<Option<Vec<f32>>> {
        if alpha == 0.0 {
            return vec![None; lms.len()];
        }
        lms.iter()
            .map(|l| embeddings.and_then(|t| t.for_landmark(l)).map(<[f32]>::to_vec))
            .collect()
    };
    let map_emb = lookup(map);
    let obs_emb = lookup(obs);

    let mut missing_embedding_keys = Vec::new();
    if alpha > 0.0 {
        for (lm, e) in map.iter().zip(&map_emb).chain(obs.iter().zip(&obs_emb)) {
            if e.is_none() {
                missing_embedding_keys.push(lm.embedding_key());
            }
        }
    }

    let rows: Vec<(Vec<f64>, usize)> = (0..obs.len())
        .into_par_iter()
        .map(|n| -> Result<(Vec<f64>, usize)> {
            let mut row = Vec::with_capacity(map.len());
            let mut missing = 0;
            for m in 0..map.len() {
                let sh = map_hists[m].dot(&obs_hists[n])?;
                let clip = if alpha > 0.0 {
                    match (&map_emb[m], &obs_emb[n]) {
                        (Some(a), Some(b)) => embedding_dot(a, b),
                        _ => {
                            missing += 1;
                            0.0
                        }
                    }
                } else {
                    0.0
                };
                row.push(combine(alpha, clip, sh));
            }
            Ok((row, missing))
        })
        .collect::<Result<_>>()?;

    let missing_embedding_pairs = rows.iter().map(|(_, m)| m).sum();
    let values: Vec<f64> = rows.into_iter().flat_map(|(r, _)| r).collect();
    Ok(SimilarityReport {
        matrix: SimilarityMatrix::new(obs.len(), map.len(), values)?,
        missing_embedding_pairs,
        missing_embedding_keys,
    })
}
