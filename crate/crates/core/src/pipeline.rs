//! Descriptors → initial matching → inlier extraction → pose.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{prosac_extract, ransac_extract, SacConfig};
use crate::descriptors::{
    all_histograms, build_semantic_graph, similarity_matrix, EmbeddingTable, SimilarityReport, WalkMode,
    DEFAULT_ALPHA, DEFAULT_D_ADJ, DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::inlier::{
    build_compatibility, enumerate_maximal_cliques, top_n_hypotheses, CliqueHypothesis, DEFAULT_D_COMP,
    DEFAULT_MAX_CLIQUES,
};
use crate::matching::{generate_candidates, Correspondence, MatchingConfig};
use crate::pose::{evaluate_hypotheses, PoseEstimate, WeightMode};
use crate::scene::{ObjectMap, ObservationSet};

/// Number of hypotheses kept by default (enough for top-5 reporting).
pub const DEFAULT_TOP_N: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    #[default]
    Clique,
    Ransac,
    Prosac,
}

impl Extractor {
    pub fn is_stochastic(self) -> bool {
        !matches!(self, Extractor::Clique)
    }
}

impl fmt::Display for Extractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Extractor::Clique => "clique",
            Extractor::Ransac => "ransac",
            Extractor::Prosac => "prosac",
        })
    }
}

impl FromStr for Extractor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clique" => Ok(Self::Clique),
            "ransac" => Ok(Self::Ransac),
            "prosac" => Ok(Self::Prosac),
            other => Err(Error::InvalidConfig(format!("unknown extractor {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub d_adj: f64,
    pub d_comp: f64,
    pub alpha: f64,
    pub steps: usize,
    pub walk_mode: WalkMode,
    pub matching: MatchingConfig,
    pub extractor: Extractor,
    pub top_n: usize,
    pub max_cliques: usize,
    pub weights: WeightMode,
    pub seed: u64,
    pub sac: SacConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            d_adj: DEFAULT_D_ADJ,
            d_comp: DEFAULT_D_COMP,
            alpha: DEFAULT_ALPHA,
            steps: DEFAULT_STEPS,
            walk_mode: WalkMode::Walks,
            matching: MatchingConfig::default(),
            extractor: Extractor::Clique,
            top_n: DEFAULT_TOP_N,
            max_cliques: DEFAULT_MAX_CLIQUES,
            weights: WeightMode::Both,
            seed: 0,
            sac: SacConfig {
                inlier_threshold: DEFAULT_D_COMP,
                ..SacConfig::default()
            },
        }
    }
}

/// Derive an independent, named seed from a root seed (splitmix64 over an FNV-1a name hash).
pub fn sub_seed(root: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub candidates: usize,
    pub compatibility_edges: usize,
    pub cliques: usize,
    pub clique_limit_exceeded: bool,
    pub missing_embedding_pairs: usize,
    pub dropped_hypotheses: usize,
    pub sac_iterations: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Localization {
    /// Ranked pose estimates, best first.
    pub estimates: Vec<PoseEstimate>,
    pub candidates: Vec<Correspondence>,
    /// All enumerated cliques, ranked (clique extractor only).
    pub hypotheses: Vec<CliqueHypothesis>,
    pub diagnostics: Diagnostics,
}

impl Localization {
    pub fn best(&self) -> &PoseEstimate {
        &self.estimates[0]
    }
}

/// Stage 1: descriptors and the observation × map similarity matrix.
pub fn compute_similarity(
    map: &ObjectMap,
    obs: &ObservationSet,
    embeddings: Option<&EmbeddingTable>,
    cfg: &PipelineConfig,
) -> Result<SimilarityReport> {
    let map_graph = build_semantic_graph(&map.landmarks, cfg.d_adj)?;
    let obs_graph = build_semantic_graph(&obs.objects, cfg.d_adj)?;
    let classes = map_graph.num_classes().max(obs_graph.num_classes());
    let map_graph = map_graph.with_num_classes(classes)?;
    let obs_graph = obs_graph.with_num_classes(classes)?;
    let map_hists = all_histograms(&map_graph, cfg.steps, cfg.walk_mode)?;
    let obs_hists = all_histograms(&obs_graph, cfg.steps, cfg.walk_mode)?;
    let report = similarity_matrix(&map.landmarks, &obs.objects, &map_hists, &obs_hists, embeddings, cfg.alpha)?;
    if report.missing_embedding_pairs > 0 {
        if cfg.alpha >= 1.0 {
            return Err(Error::MissingEmbedding(format!(
                "{} landmark(s) without embeddings while alpha = 1 (first: {:?})",
                report.missing_embedding_keys.len(),
                report.missing_embedding_keys.first()
            )));
        }
        log::warn!(
            "{} pair(s) scored without an embedding term ({} landmark(s) missing)",
            report.missing_embedding_pairs,
            report.missing_embedding_keys.len()
        );
    }
    Ok(report)
}

/// Full pipeline on a map and an observation set.
pub fn localize(
    map: &ObjectMap,
    obs: &ObservationSet,
    embeddings: Option<&EmbeddingTable>,
    cfg: &PipelineConfig,
) -> Result<Localization> {
    if map.is_empty() || obs.is_empty() {
        return Err(Error::InvalidConfig("map and observation must be non-empty".into()));
    }
    let report = compute_similarity(map, obs, embeddings, cfg)?;
    let cands = generate_candidates(&report.matrix, &cfg.matching)?;
    let mut out = localize_candidates(map, obs, cands, cfg)?;
    out.diagnostics.missing_embedding_pairs = report.missing_embedding_pairs;
    Ok(out)
}

/// Stages 3 and 4 on an externally supplied candidate list.
pub fn localize_candidates(
    map: &ObjectMap,
    obs: &ObservationSet,
    cands: Vec<Correspondence>,
    cfg: &PipelineConfig,
) -> Result<Localization> {
    let mut diagnostics = Diagnostics {
        candidates: cands.len(),
        ..Diagnostics::default()
    };
    match cfg.extractor {
        Extractor::Clique => {
            let graph = build_compatibility(&cands, map, obs, cfg.d_comp)?;
            diagnostics.compatibility_edges = graph.edge_count();
            let cliques = enumerate_maximal_cliques(&graph, &cands, cfg.max_cliques)?;
            diagnostics.cliques = cliques.hypotheses.len();
            diagnostics.clique_limit_exceeded = cliques.truncated;
            let top = top_n_hypotheses(&cliques.hypotheses, cfg.top_n)?;
            let eval = evaluate_hypotheses(&top, &cands, map, obs, cfg.weights)?;
            diagnostics.dropped_hypotheses = eval.dropped.len();
            Ok(Localization {
                estimates: eval.estimates,
                candidates: cands,
                hypotheses: cliques.hypotheses,
                diagnostics,
            })
        }
        Extractor::Ransac | Extractor::Prosac => {
            let sac = SacConfig {
                rng_seed: sub_seed(cfg.seed, "sac"),
                ..cfg.sac
            };
            let result = if cfg.extractor == Extractor::Ransac {
                ransac_extract(&cands, map, obs, &sac)?
            } else {
                prosac_extract(&cands, map, obs, &sac)?
            };
            diagnostics.sac_iterations = Some(result.iterations);
            Ok(Localization {
                estimates: vec![result.estimate],
                candidates: cands,
                hypotheses: Vec::new(),
                diagnostics,
            })
        }
    }
}
