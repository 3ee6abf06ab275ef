//! Graph-theoretic inlier extraction.
//!
//! Correspondence candidates become nodes of a compatibility graph; an edge
//! means the two correspondences preserve the distance between their
//! landmarks within `d_comp`. Every maximal clique is a mutually consistent
//! hypothesis, and hypotheses are ranked by the sum of their similarities.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matching::Correspondence;
use crate::scene::{ObjectMap, ObservationSet};

/// Default rigid-distance tolerance, meters.
pub const DEFAULT_D_COMP: f64 = 0.3;
/// Default cap on enumerated cliques.
pub const DEFAULT_MAX_CLIQUES: usize = 10_000;
/// Smallest clique that determines a 6-DoF pose.
pub const MIN_POSE_CLIQUE: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
struct BitSet {
    words: Vec<u64>,
}

impl BitSet {
    fn empty(n: usize) -> Self {
        Self {
            words: vec![0; n.div_ceil(64)],
        }
    }

    fn full(n: usize) -> Self {
        let mut s = Self::empty(n);
        for i in 0..n {
            s.insert(i);
        }
        s
    }

    fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    fn remove(&mut self, i: usize) {
        self.words[i / 64] &= !(1 << (i % 64));
    }

    fn contains(&self, i: usize) -> bool {
        self.words[i / 64] & (1 << (i % 64)) != 0
    }

    fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    fn and(&self, other: &BitSet) -> BitSet {
        BitSet {
            words: self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect(),
        }
    }

    fn and_not(&self, other: &BitSet) -> BitSet {
        BitSet {
            words: self.words.iter().zip(&other.words).map(|(a, b)| a & !b).collect(),
        }
    }

    fn intersection_len(&self, other: &BitSet) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let bit = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + bit)
            })
        })
    }
}

/// Symmetric boolean compatibility matrix over correspondence candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityGraph {
    rows: Vec<BitSet>,
    d_comp: f64,
}

impl CompatibilityGraph {
    /// Graph from an explicit edge list; self-loops are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut rows = vec![BitSet::empty(n); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidConfig(format!("edge ({a}, {b}) out of range")));
            }
            if a != b {
                rows[a].insert(b);
                rows[b].insert(a);
            }
        }
        Ok(Self {
            rows,
            d_comp: f64::NAN,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn d_comp(&self) -> f64 {
        self.d_comp
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.rows[a].contains(b)
    }

    pub fn degree(&self, a: usize) -> usize {
        self.rows[a].words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn edge_count(&self) -> usize {
        (0..self.len()).map(|a| self.degree(a)).sum::<usize>() / 2
    }
}

/// Rigid distance constraint between every pair of candidates.
///
/// Two candidates that share a map landmark or an observation are never
/// compatible, so every clique is a one-to-one correspondence set.
pub fn build_compatibility(
    cands: &[Correspondence],
    map: &ObjectMap,
    obs: &ObservationSet,
    d_comp: f64,
) -> Result<CompatibilityGraph> {
    if !(d_comp > 0.0 && d_comp.is_finite()) {
        return Err(Error::InvalidConfig(format!("d_comp must be positive, got {d_comp}")));
    }
    for c in cands {
        if c.map_index >= map.len() || c.obs_index >= obs.len() {
            return Err(Error::InvalidConfig(format!(
                "candidate ({}, {}) out of range",
                c.map_index, c.obs_index
            )));
        }
    }
    let n = cands.len();
    let mut rows = vec![BitSet::empty(n); n];
    for i in 0..n {
        let (ci, pmi, poi) = (
            &cands[i],
            map.landmarks[cands[i].map_index].position(),
            obs.objects[cands[i].obs_index].position(),
        );
        for j in (i + 1)..n {
            let cj = &cands[j];
            if ci.map_index == cj.map_index || ci.obs_index == cj.obs_index {
                continue;
            }
            let dm = (pmi - map.landmarks[cj.map_index].position()).norm();
            let dobs = (poi - obs.objects[cj.obs_index].position()).norm();
            if (dm - dobs).abs() < d_comp {
                rows[i].insert(j);
                rows[j].insert(i);
            }
        }
    }
    Ok(CompatibilityGraph { rows, d_comp })
}

/// A maximal clique of the compatibility graph.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliqueHypothesis {
    /// Candidate indices, ascending.
    pub members: Vec<usize>,
    /// Sum of member similarities.
    pub score: f64,
}

impl CliqueHypothesis {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Descending score, then larger clique, then lexicographic members.
pub fn hypothesis_order(a: &CliqueHypothesis, b: &CliqueHypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.members.len().cmp(&a.members.len()))
        .then_with(|| a.members.cmp(&b.members))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliqueEnumeration {
    /// Sorted by [`hypothesis_order`].
    pub hypotheses: Vec<CliqueHypothesis>,
    /// Enumeration stopped at the clique limit; more maximal cliques exist.
    pub truncated: bool,
}

struct Enumerator<'a> {
    graph: &'a CompatibilityGraph,
    limit: usize,
    found: Vec<Vec<usize>>,
    truncated: bool,
}

impl Enumerator<'_> {
    fn expand(&mut self, clique: &mut Vec<usize>, mut p: BitSet, mut x: BitSet) {
        if p.is_empty() {
            if x.is_empty() {
                if self.found.len() >= self.limit {
                    self.truncated = true;
                } else {
                    let mut members = clique.clone();
                    members.sort_unstable();
                    self.found.push(members);
                }
            }
            return;
        }
        // Tomita pivot: the vertex of P ∪ X covering most of P, lowest index on ties.
        let mut pivot = usize::MAX;
        let mut best = 0u32;
        for u in p.iter().chain(x.iter()) {
            let cover = p.intersection_len(&self.graph.rows[u]);
            if pivot == usize::MAX || cover > best || (cover == best && u < pivot) {
                pivot = u;
                best = cover;
            }
        }
        let branch = p.and_not(&self.graph.rows[pivot]);
        for v in branch.iter() {
            let nv = &self.graph.rows[v];
            clique.push(v);
            self.expand(clique, p.and(nv), x.and(nv));
            clique.pop();
            if self.truncated {
                return;
            }
            p.remove(v);
            x.insert(v);
        }
    }
}

/// All maximal cliques (Bron–Kerbosch with pivoting), scored by similarity sum.
///
/// Enumeration stops once `max_cliques` cliques have been emitted and
/// another is found; the result is then flagged `truncated`. Node visiting
/// order is fixed by candidate index so truncation is reproducible.
pub fn enumerate_maximal_cliques(
    graph: &CompatibilityGraph,
    cands: &[Correspondence],
    max_cliques: usize,
) -> Result<CliqueEnumeration> {
    if cands.len() != graph.len() {
        return Err(Error::InvalidConfig(format!(
            "{} candidates for a graph of {} nodes",
            cands.len(),
            graph.len()
        )));
    }
    let n = graph.len();
    let mut e = Enumerator {
        graph,
        limit: max_cliques,
        found: Vec::new(),
        truncated: false,
    };
    if n > 0 {
        e.expand(&mut Vec::new(), BitSet::full(n), BitSet::empty(n));
    }
    if e.truncated {
        log::warn!("clique enumeration truncated at {max_cliques} cliques");
    }
    let mut hypotheses: Vec<CliqueHypothesis> = e
        .found
        .into_iter()
        .map(|members| {
            let score = members.iter().map(|&i| cands[i].similarity).sum();
            CliqueHypothesis { members, score }
        })
        .collect();
    hypotheses.sort_by(hypothesis_order);
    Ok(CliqueEnumeration {
        hypotheses,
        truncated: e.truncated,
    })
}

/// The best `n` hypotheses with at least [`MIN_POSE_CLIQUE`] members.
pub fn top_n_hypotheses(cliques: &[CliqueHypothesis], n: usize) -> Result<Vec<CliqueHypothesis>> {
    if n == 0 {
        return Err(Error::InvalidConfig("top_n must be at least 1".into()));
    }
    let out: Vec<CliqueHypothesis> = cliques
        .iter()
        .filter(|h| h.len() >= MIN_POSE_CLIQUE)
        .take(n)
        .cloned()
        .collect();
    if out.is_empty() {
        Err(Error::EmptyHypothesisSet {
            min_size: MIN_POSE_CLIQUE,
        })
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::EllipsoidLandmark;
    use nalgebra::{Matrix3, Vector3};

    fn unit(n: usize) -> Vec<Correspondence> {
        (0..n).map(|i| Correspondence::new(i, i, 1.0)).collect()
    }

    fn members(e: &CliqueEnumeration) -> Vec<Vec<usize>> {
        let mut v: Vec<_> = e.hypotheses.iter().map(|h| h.members.clone()).collect();
        v.sort();
        v
    }

    fn lm(p: [f64; 3]) -> EllipsoidLandmark {
        EllipsoidLandmark::new(0, Vector3::from(p), Matrix3::identity(), Vector3::repeat(0.1), 0).unwrap()
    }

    #[test]
    fn triangle_and_path() {
        let g = CompatibilityGraph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(members(&enumerate_maximal_cliques(&g, &unit(3), 100).unwrap()), vec![vec![0, 1, 2]]);
        let g = CompatibilityGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(
            members(&enumerate_maximal_cliques(&g, &unit(3), 100).unwrap()),
            vec![vec![0, 1], vec![1, 2]]
        );
    }

    #[test]
    fn truncation_is_flagged() {
        // 4 disjoint edges: 4 maximal cliques
        let g = CompatibilityGraph::from_edges(8, &[(0, 1), (2, 3), (4, 5), (6, 7)]).unwrap();
        let e = enumerate_maximal_cliques(&g, &unit(8), 3).unwrap();
        assert!(e.truncated);
        assert_eq!(e.hypotheses.len(), 3);
        let e = enumerate_maximal_cliques(&g, &unit(8), 4).unwrap();
        assert!(!e.truncated);
        assert_eq!(e.hypotheses.len(), 4);
    }

    #[test]
    fn compatibility_threshold_and_guards() {
        // map pair 2.0 m apart, observation pair 1.85 m apart
        let map = ObjectMap::new("m", vec![lm([0.0; 3]), lm([2.0, 0.0, 0.0]), lm([0.0, 5.0, 0.0])]);
        let obs = ObservationSet::new(vec![lm([1.0; 3]), lm([1.0, 2.85, 1.0]), lm([1.0, 2.9, 1.0])]);
        let cands = vec![
            Correspondence::new(0, 0, 1.0),
            Correspondence::new(1, 1, 1.0),
            Correspondence::new(1, 2, 1.0),
            Correspondence::new(0, 1, 1.0),
        ];
        let g = build_compatibility(&cands, &map, &obs, 0.3).unwrap();
        assert!(g.is_adjacent(0, 1));
        assert!(!g.is_adjacent(0, 0));
        // shared map landmark 1 and shared observation 1
        assert!(!g.is_adjacent(1, 2));
        assert!(!g.is_adjacent(1, 3));
        assert!(!g.is_adjacent(0, 3));
        assert!(build_compatibility(&cands, &map, &obs, 0.0).is_err());
        let bad = vec![Correspondence::new(9, 0, 1.0)];
        assert!(build_compatibility(&bad, &map, &obs, 0.3).is_err());
    }

    #[test]
    fn ranking_and_top_n() {
        let h = |m: Vec<usize>, s: f64| CliqueHypothesis { members: m, score: s };
        let mut v = vec![
            h(vec![0, 1, 2], 2.0),
            h(vec![3, 4, 5, 6], 2.0),
            h(vec![1, 2, 7], 3.5),
            h(vec![0, 8, 9], 1.0),
            h(vec![2, 3], 5.0),
            h(vec![4, 5, 9], 0.5),
        ];
        v.sort_by(hypothesis_order);
        assert_eq!(v[0].members, vec![2, 3]);
        assert_eq!(v[2].members, vec![3, 4, 5, 6], "equal score: larger first");
        let top = top_n_hypotheses(&v, 3).unwrap();
        assert_eq!(
            top.iter().map(|h| h.members.clone()).collect::<Vec<_>>(),
            vec![vec![1, 2, 7], vec![3, 4, 5, 6], vec![0, 1, 2]]
        );
        assert_eq!(top_n_hypotheses(&v, 1).unwrap().len(), 1);
        assert!(matches!(
            top_n_hypotheses(&[h(vec![0, 1], 9.0)], 3),
            Err(Error::EmptyHypothesisSet { .. })
        ));
        assert!(top_n_hypotheses(&v, 0).is_err());
    }

    #[test]
    fn empty_graph_has_no_cliques() {
        let g = CompatibilityGraph::from_edges(0, &[]).unwrap();
        let e = enumerate_maximal_cliques(&g, &[], 10).unwrap();
        assert!(e.hypotheses.is_empty() && !e.truncated);
    }

    #[test]
    fn bitset_crosses_word_boundaries() {
        let mut s = BitSet::empty(130);
        for i in [0, 63, 64, 127, 129] {
            s.insert(i);
        }
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![0, 63, 64, 127, 129]);
        s.remove(64);
        assert!(!s.contains(64));
        assert_eq!(BitSet::full(130).iter().count(), 130);
    }
}
