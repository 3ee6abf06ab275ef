//! Initial correspondence candidates from a similarity matrix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default neighbour count for kNN matching.
pub const DEFAULT_K: usize = 3;

/// A (map landmark, observed landmark) hypothesis with its similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub map_index: usize,
    pub obs_index: usize,
    pub similarity: f64,
}

impl Correspondence {
    pub fn new(map_index: usize, obs_index: usize, similarity: f64) -> Self {
        Self {
            map_index,
            obs_index,
            similarity,
        }
    }

    pub fn key(&self) -> (usize, usize) {
        (self.map_index, self.obs_index)
    }
}

/// Row-major `N_o × N_m` matrix: rows are observations, columns map landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n_obs: usize,
    n_map: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(n_obs: usize, n_map: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_obs * n_map {
            return Err(Error::InvalidConfig(format!(
                "similarity matrix {n_obs}×{n_map} needs {} values, got {}",
                n_obs * n_map,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("similarity values must be finite".into()));
        }
        Ok(Self {
            n_obs,
            n_map,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_map = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_map) {
            return Err(Error::InvalidConfig("ragged similarity rows".into()));
        }
        Self::new(rows.len(), n_map, rows.concat())
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_map(&self) -> usize {
        self.n_map
    }

    pub fn get(&self, obs: usize, map: usize) -> f64 {
        self.values[obs * self.n_map + map]
    }

    pub fn row(&self, obs: usize) -> &[f64] {
        &self.values[obs * self.n_map..(obs + 1) * self.n_map]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Column indices of a row sorted by descending similarity, ties by lower index.
    fn ranked_row(&self, obs: usize) -> Vec<usize> {
        let row = self.row(obs);
        let mut idx: Vec<usize> = (0..self.n_map).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        idx
    }
}

/// First index of the maximum, so ties go to the lowest index.
fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Pairs that are each other's best match.
pub fn match_one_to_one(s: &SimilarityMatrix) -> Vec<Correspondence> {
    if s.n_map == 0 {
        return Vec::new();
    }
    let col_best: Vec<usize> = (0..s.n_map)
        .map(|m| argmax((0..s.n_obs).map(|n| s.get(n, m))).expect("non-empty column"))
        .collect();
    (0..s.n_obs)
        .filter_map(|n| {
            let m = argmax(s.row(n).iter().copied())?;
            (col_best[m] == n).then(|| Correspondence::new(m, n, s.get(n, m)))
        })
        .collect()
}

/// The `min(k, N_m)` most similar landmarks for every observation.
pub fn match_knn(s: &SimilarityMatrix, k: usize) -> Result<Vec<Correspondence>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    Ok((0..s.n_obs)
        .flat_map(|n| {
            s.ranked_row(n)
                .into_iter()
                .take(k)
                .map(move |m| Correspondence::new(m, n, s.get(n, m)))
        })
        .collect())
}

/// Default candidate cap for adaptive matching: a quarter of the map, at least 2.
pub fn default_top_m(n_map: usize) -> usize {
    n_map.div_ceil(4).max(2)
}

/// Per observation, keep the candidates above the largest similarity gap among
/// the top `top_m`.
///
/// The threshold is the lower member of the widest adjacent pair in the sorted
/// truncated row; equal gaps resolve to the earliest one. Selection is the
/// sorted prefix above that gap, so a row whose gaps are all zero yields only
/// its top candidate.
pub fn match_adaptive(s: &SimilarityMatrix, top_m: usize) -> Result<Vec<Correspondence>> {
    if top_m < 2 {
        return Err(Error::InvalidConfig(format!("top_m must be at least 2, got {top_m}")));
    }
    let mut out = Vec::new();
    for n in 0..s.n_obs {
        let ranked = s.ranked_row(n);
        let truncated = &ranked[..top_m.min(ranked.len())];
        let keep = adaptive_cut(&truncated.iter().map(|&m| s.get(n, m)).collect::<Vec<_>>());
        out.extend(
            truncated[..keep]
                .iter()
                .map(|&m| Correspondence::new(m, n, s.get(n, m))),
        );
    }
    Ok(out)
}

/// Number of leading entries of a descending list that lie above its widest gap.
pub(crate) fn adaptive_cut(sorted_desc: &[f64]) -> usize {
    if sorted_desc.len() < 2 {
        return sorted_desc.len();
    }
    let mut best_gap = f64::NEG_INFINITY;
    let mut cut = 1;
    for i in 0..sorted_desc.len() - 1 {
        let gap = sorted_desc[i] - sorted_desc[i + 1];
        if gap > best_gap {
            best_gap = gap;
            cut = i + 1;
        }
    }
    cut
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingStrategy {
    OneToOne,
    Knn,
    Adaptive,
}

impl fmt::Display for MatchingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchingStrategy::OneToOne => "one_to_one",
            MatchingStrategy::Knn => "knn",
            MatchingStrategy::Adaptive => "adaptive",
        })
    }
}

impl FromStr for MatchingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_to_one" | "1-to-1" => Ok(Self::OneToOne),
            "knn" => Ok(Self::Knn),
            "adaptive" => Ok(Self::Adaptive),
            other => Err(Error::InvalidConfig(format!("unknown matching strategy {other:?}"))),
        }
    }
}

/// Strategy plus its parameters; `top_m = None` means [`default_top_m`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchingConfig {
    pub strategy: MatchingStrategy,
    pub k: usize,
    pub top_m: Option<usize>,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            strategy: MatchingStrategy::Adaptive,
            k: DEFAULT_K,
            top_m: None,
        }
    }
}

pub fn generate_candidates(s: &SimilarityMatrix, cfg: &MatchingConfig) -> Result<Vec<Correspondence>> {
    match cfg.strategy {
        MatchingStrategy::OneToOne => Ok(match_one_to_one(s)),
        MatchingStrategy::Knn => match_knn(s, cfg.k),
        MatchingStrategy::Adaptive => match_adaptive(s, cfg.top_m.unwrap_or_else(|| default_top_m(s.n_map))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(c: &[Correspondence]) -> Vec<(usize, usize)> {
        c.iter().map(Correspondence::key).collect()
    }

    #[test]
    fn one_to_one_examples() {
        let s = SimilarityMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert_eq!(keys(&match_one_to_one(&s)), vec![(0, 0), (1, 1)]);
        let s = SimilarityMatrix::from_rows(&[vec![0.9, 0.8], vec![0.85, 0.1]]).unwrap();
        assert_eq!(keys(&match_one_to_one(&s)), vec![(0, 0)]);
        let s = SimilarityMatrix::from_rows(&[vec![0.3]]).unwrap();
        assert_eq!(keys(&match_one_to_one(&s)), vec![(0, 0)]);
    }

    #[test]
    fn one_to_one_ties_take_lowest_index() {
        let s = SimilarityMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(keys(&match_one_to_one(&s)), vec![(0, 0)]);
    }

    #[test]
    fn knn_examples() {
        let s = SimilarityMatrix::from_rows(&[vec![0.1, 0.5], vec![0.3, 0.2]]).unwrap();
        assert_eq!(match_knn(&s, 3).unwrap().len(), 4);
        let s = SimilarityMatrix::from_rows(&[vec![0.1, 0.5, 0.3]]).unwrap();
        assert_eq!(keys(&match_knn(&s, 2).unwrap()), vec![(1, 0), (2, 0)]);
        let s = SimilarityMatrix::from_rows(&[vec![0.9, 0.8], vec![0.85, 0.1]]).unwrap();
        // not mutual, still selected
        assert_eq!(keys(&match_knn(&s, 1).unwrap()), vec![(0, 0), (0, 1)]);
        assert!(match_knn(&s, 0).is_err());
    }

    #[test]
    fn adaptive_examples() {
        let s = SimilarityMatrix::from_rows(&[vec![0.4, 0.85, 0.9, 0.5]]).unwrap();
        let c = match_adaptive(&s, 4).unwrap();
        assert_eq!(keys(&c), vec![(2, 0), (1, 0)]);
        let s = SimilarityMatrix::from_rows(&[vec![0.6; 5]]).unwrap();
        assert_eq!(keys(&match_adaptive(&s, 4).unwrap()), vec![(0, 0)]);
        let s = SimilarityMatrix::from_rows(&[vec![1.0, 0.1]]).unwrap();
        assert_eq!(keys(&match_adaptive(&s, 2).unwrap()), vec![(0, 0)]);
        let s = SimilarityMatrix::from_rows(&[vec![0.7]]).unwrap();
        assert_eq!(keys(&match_adaptive(&s, 2).unwrap()), vec![(0, 0)]);
        assert!(match_adaptive(&s, 1).is_err());
    }

    #[test]
    fn adaptive_gap_scan_matches_brute_force() {
        // Oracle: try every cut position, keep the earliest with the widest gap.
        let rows = [
            vec![0.9, 0.85, 0.5, 0.4],
            vec![0.9, 0.6, 0.3, 0.0],
            vec![1.0, 0.99, 0.98, 0.2, 0.1],
            vec![0.5, 0.2],
        ];
        for row in rows {
            let mut best = (f64::NEG_INFINITY, 0);
            for cut in 1..row.len() {
                let gap = row[cut - 1] - row[cut];
                if gap > best.0 {
                    best = (gap, cut);
                }
            }
            assert_eq!(adaptive_cut(&row), best.1, "{row:?}");
            let thr = row[best.1];
            assert!(row[..best.1].iter().all(|&v| v > thr));
        }
    }

    #[test]
    fn default_top_m_is_quarter() {
        assert_eq!(default_top_m(30), 8);
        assert_eq!(default_top_m(3), 2);
        assert_eq!(default_top_m(400), 100);
    }

    #[test]
    fn strategy_parsing() {
        for s in [MatchingStrategy::OneToOne, MatchingStrategy::Knn, MatchingStrategy::Adaptive] {
            assert_eq!(s.to_string().parse::<MatchingStrategy>().unwrap(), s);
        }
        assert!("hungarian".parse::<MatchingStrategy>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use std::collections::BTreeSet;

        fn matrix() -> impl Strategy<Value = SimilarityMatrix> {
            (1usize..8, 1usize..10).prop_flat_map(|(no, nm)| {
                proptest::collection::vec(-1.0f64..1.0, no * nm)
                    .prop_map(move |v| SimilarityMatrix::new(no, nm, v).unwrap())
            })
        }

        fn all(s: &SimilarityMatrix, k: usize, m: usize) -> [Vec<Correspondence>; 3] {
            [match_one_to_one(s), match_knn(s, k).unwrap(), match_adaptive(s, m).unwrap()]
        }

        proptest! {
            #[test]
            fn outputs_unique_and_in_range(s in matrix(), k in 1usize..5, m in 2usize..6) {
                for out in all(&s, k, m) {
                    let set: BTreeSet<_> = out.iter().map(Correspondence::key).collect();
                    prop_assert_eq!(set.len(), out.len());
                    prop_assert!(out.iter().all(|c| c.map_index < s.n_map() && c.obs_index < s.n_obs()));
                }
            }

            #[test]
            fn adaptive_is_sorted_prefix(s in matrix(), m in 2usize..6) {
                let out = match_adaptive(&s, m).unwrap();
                for n in 0..s.n_obs() {
                    let chosen: Vec<usize> = out.iter().filter(|c| c.obs_index == n).map(|c| c.map_index).collect();
                    let ranked = s.ranked_row(n);
                    prop_assert!(!chosen.is_empty());
                    prop_assert_eq!(&ranked[..chosen.len()], &chosen[..]);
                }
            }

            #[test]
            fn positive_scaling_preserves_selection(s in matrix(), k in 1usize..5, m in 2usize..6, factor in 0.01f64..100.0) {
                let scaled = s.scaled(factor);
                for (a, b) in all(&s, k, m).iter().zip(all(&scaled, k, m).iter()) {
                    let ka: Vec<_> = a.iter().map(Correspondence::key).collect();
                    let kb: Vec<_> = b.iter().map(Correspondence::key).collect();
                    prop_assert_eq!(ka, kb);
                }
            }
        }
    }
}
