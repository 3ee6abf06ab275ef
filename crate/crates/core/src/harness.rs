//! Synthetic scenes, evaluation metrics, ablation sweeps and scalability runs.
//!
//! Scenes model the usual failure modes of object-level localization: missed
//! detections (dropout), noisy centres, wrong class labels, and partially seen
//! objects whose reconstructed ellipsoid is both smaller and off-centre.
//! Embeddings are synthetic: each class has a prototype direction, each
//! instance a perturbation of it, and each observation a further
//! perturbation that grows when the object is only partly visible.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::descriptors::EmbeddingTable;
use crate::error::{Error, Result};
use crate::matching::{Correspondence, MatchingStrategy};
use crate::pipeline::{compute_similarity, localize, localize_candidates, sub_seed, Extractor, Localization, PipelineConfig};
use crate::pose::{PoseEstimate, WeightMode};
use crate::scene::{EllipsoidLandmark, ObjectMap, ObservationSet, Pose};

/// Translation error under which a localization counts as a success, meters.
pub const SUCCESS_THRESHOLD: f64 = 1.0;

/// Observed/true axis ratio range for partially seen objects.
const PARTIAL_SHRINK: (f64, f64) = (0.5, 0.8);
/// Half-axis length range of generated landmarks, meters.
const AXIS_RANGE: (f64, f64) = (0.1, 0.35);

/// A copied group of landmarks placed elsewhere in the map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DuplicateCluster {
    /// Landmarks in the copied group (an anchor and its nearest neighbours).
    pub size: usize,
    /// Displacement of the copy, meters.
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneSpec {
    pub n_landmarks: usize,
    /// Side of the cube landmarks are drawn in, meters.
    pub extent: f64,
    pub n_classes: usize,
    pub embedding_dim: usize,
    /// Spread of instance embeddings around their class prototype.
    pub embedding_spread: f64,
    /// Perturbation of observed embeddings relative to the map embedding.
    pub embedding_noise: f64,
    pub position_noise_sigma: f64,
    pub label_corruption_rate: f64,
    pub dropout_rate: f64,
    pub partial_observation_rate: f64,
    /// When set, the view sees exactly the duplicated group.
    pub duplicate_cluster: Option<DuplicateCluster>,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_landmarks: 30,
            extent: 3.0,
            n_classes: 8,
            embedding_dim: 64,
            embedding_spread: 0.6,
            embedding_noise: 0.3,
            position_noise_sigma: 0.0,
            label_corruption_rate: 0.0,
            dropout_rate: 0.0,
            partial_observation_rate: 0.0,
            duplicate_cluster: None,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    /// Exact rigid copy of the whole map, no perturbation of any kind.
    pub fn noiseless(n_landmarks: usize, seed: u64) -> Self {
        Self {
            n_landmarks,
            embedding_noise: 0.0,
            rng_seed: seed,
            ..Self::default()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            rng_seed: seed,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        let rates = [
            self.label_corruption_rate,
            self.dropout_rate,
            self.partial_observation_rate,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidConfig("scene rates must lie in [0, 1]".into()));
        }
        if self.n_landmarks < 4 || self.n_classes == 0 || self.embedding_dim == 0 || self.extent.is_nan() || self.extent <= 0.0 {
            return Err(Error::InvalidConfig(
                "scene needs ≥ 4 landmarks, ≥ 1 class, positive extent and embedding dim".into(),
            ));
        }
        if let Some(d) = &self.duplicate_cluster {
            if d.size < 3 || d.size > self.n_landmarks {
                return Err(Error::InvalidConfig(format!(
                    "duplicate cluster size {} must be in [3, {}]",
                    d.size, self.n_landmarks
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub map: ObjectMap,
    /// Observations in the camera frame, with the ground-truth pose attached.
    pub observation: ObservationSet,
    pub embeddings: EmbeddingTable,
    pub ground_truth: Vec<Correspondence>,
    pub pose: Pose,
    /// Every pose consistent with the observation: the true one first, then
    /// one per duplicated copy.
    pub mode_poses: Vec<Pose>,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Unit vector `base` perturbed by isotropic noise of expected norm `scale`.
fn perturb(rng: &mut ChaCha8Rng, base: &DVector<f64>, scale: f64) -> DVector<f64> {
    if scale == 0.0 {
        return base.clone();
    }
    let dim = base.len();
    let noise = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal)) * (scale / (dim as f64).sqrt());
    let v = base + noise;
    let n = v.norm();
    if n > 1e-9 {
        v / n
    } else {
        base.clone()
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from_vector(q));
    *q.to_rotation_matrix().matrix()
}

fn uniform3(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi))
}

/// Build a scene from its spec; identical specs give identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let dim = spec.embedding_dim;

    let prototypes: Vec<DVector<f64>> = (0..spec.n_classes).map(|_| random_unit(&mut rng, dim)).collect();

    let mut map_landmarks = Vec::with_capacity(spec.n_landmarks);
    let mut instance_vectors = Vec::with_capacity(spec.n_landmarks);
    for i in 0..spec.n_landmarks {
        let class = rng.random_range(0..spec.n_classes);
        let position = uniform3(&mut rng, 0.0, spec.extent);
        let orientation = random_rotation(&mut rng);
        let axes = uniform3(&mut rng, AXIS_RANGE.0, AXIS_RANGE.1);
        let lm = EllipsoidLandmark::new(i as u64, position, orientation, axes, class)?
            .with_text_label(format!("object {i} of class {class}"))
            .with_embedding_id(format!("map/{i}"));
        map_landmarks.push(lm);
        instance_vectors.push(perturb(&mut rng, &prototypes[class], spec.embedding_spread));
    }

    let mut observed: Vec<usize>;
    let mut mode_offsets = vec![Vector3::zeros()];
    if let Some(dup) = spec.duplicate_cluster {
        let anchor = rng.random_range(0..spec.n_landmarks);
        let mut by_distance: Vec<usize> = (0..spec.n_landmarks).collect();
        let anchor_pos = *map_landmarks[anchor].position();
        by_distance.sort_by(|&a, &b| {
            let da = (map_landmarks[a].position() - anchor_pos).norm();
            let db = (map_landmarks[b].position() - anchor_pos).norm();
            da.total_cmp(&db).then(a.cmp(&b))
        });
        observed = by_distance[..dup.size].to_vec();
        let offset = Vector3::from(dup.offset);
        mode_offsets.push(offset);
        for &src in &observed {
            let id = map_landmarks.len();
            let orig = &map_landmarks[src];
            let copy = orig
                .with_geometry(orig.position() + offset, *orig.axis_lengths())?
                .with_id(id as u64)
                .with_embedding_id(format!("map/{src}"));
            map_landmarks.push(copy);
        }
    } else {
        let keep = ((spec.n_landmarks as f64) * (1.0 - spec.dropout_rate)).round() as usize;
        let keep = keep.clamp(4, spec.n_landmarks);
        let mut all: Vec<usize> = (0..spec.n_landmarks).collect();
        all.shuffle(&mut rng);
        observed = all[..keep].to_vec();
    }
    observed.shuffle(&mut rng);

    let pose = Pose::new(random_rotation(&mut rng), uniform3(&mut rng, 0.0, spec.extent))?;
    let to_camera = pose.inverse();

    let mut obs_objects = Vec::with_capacity(observed.len());
    let mut obs_vectors = Vec::with_capacity(observed.len());
    let mut ground_truth = Vec::with_capacity(observed.len());
    for (k, &m) in observed.iter().enumerate() {
        let src = &map_landmarks[m];
        let mut center = *src.position();
        let mut axes = *src.axis_lengths();
        let mut emb_noise = spec.embedding_noise;
        let mut class = src.class_id();
        let mut vector = instance_vectors[m].clone();

        if rng.random_bool(spec.partial_observation_rate) {
            let f = rng.random_range(PARTIAL_SHRINK.0..PARTIAL_SHRINK.1);
            let axis = rng.random_range(0..3);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            // The visible part's centre drifts towards the seen side.
            center += src.orientation().column(axis) * (sign * (1.0 - f) * axes[axis]);
            axes *= f;
            emb_noise = spec.embedding_noise.max(0.1) * (1.0 + 3.0 * (1.0 - f));
        }
        if spec.position_noise_sigma > 0.0 {
            center += Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)) * spec.position_noise_sigma;
        }
        if spec.n_classes > 1 && rng.random_bool(spec.label_corruption_rate) {
            class = (class + rng.random_range(1..spec.n_classes)) % spec.n_classes;
            vector = perturb(&mut rng, &prototypes[class], spec.embedding_spread);
        }
        obs_vectors.push(perturb(&mut rng, &vector, emb_noise));

        let lm = EllipsoidLandmark::new(
            src.id(),
            to_camera.transform_point(&center),
            to_camera.rotation() * src.orientation(),
            axes,
            class,
        )?
        .with_embedding_id(format!("obs/{k}"));
        obs_objects.push(lm);
        ground_truth.push(Correspondence::new(m, k, 1.0));
    }

    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (i, v) in instance_vectors.iter().enumerate() {
        ids.push(format!("map/{i}"));
        rows.push(v.iter().copied().collect::<Vec<f64>>());
    }
    for (k, v) in obs_vectors.iter().enumerate() {
        ids.push(format!("obs/{k}"));
        rows.push(v.iter().copied().collect::<Vec<f64>>());
    }
    let embeddings = EmbeddingTable::from_rows(ids, &rows)?;

    let mode_poses = mode_offsets
        .iter()
        .map(|off| Pose::new(*pose.rotation(), pose.translation() + off))
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticScene {
        map: ObjectMap::new("synthetic", map_landmarks),
        observation: ObservationSet::new(obs_objects).with_ground_truth(pose),
        embeddings,
        ground_truth,
        pose,
        mode_poses,
    })
}

/// Ground truth recovered from files: observations and map landmarks sharing an id.
pub fn ground_truth_by_id(map: &ObjectMap, obs: &ObservationSet) -> Vec<Correspondence> {
    let mut out = Vec::new();
    for (n, o) in obs.objects.iter().enumerate() {
        if let Some(m) = map.landmarks.iter().position(|l| l.id() == o.id()) {
            out.push(Correspondence::new(m, n, 1.0));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchingScore {
    pub precision: f64,
    pub recall: f64,
    /// Nothing was predicted; precision is reported as 0.
    pub empty_prediction: bool,
}

/// Precision and recall (percent) of predicted (map, observation) pairs.
pub fn evaluate_matching(pred: &[Correspondence], gt: &[Correspondence]) -> MatchingScore {
    let gt_set: BTreeSet<(usize, usize)> = gt.iter().map(Correspondence::key).collect();
    let pred_set: BTreeSet<(usize, usize)> = pred.iter().map(Correspondence::key).collect();
    let hits = pred_set.intersection(&gt_set).count() as f64;
    let precision = if pred_set.is_empty() { 0.0 } else { 100.0 * hits / pred_set.len() as f64 };
    let recall = if gt_set.is_empty() { 0.0 } else { 100.0 * hits / gt_set.len() as f64 };
    MatchingScore {
        precision,
        recall,
        empty_prediction: pred_set.is_empty(),
    }
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_error(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let d = a.transpose() * b;
    let cos = (d.trace() - 1.0) / 2.0;
    // atan2 keeps small angles accurate where acos of a value near 1 does not.
    let sin = 0.5 * Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]).norm();
    sin.atan2(cos.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoseScore {
    /// Rank-1 translation error, meters.
    pub translation_error: f64,
    /// Rank-1 rotation error, radians.
    pub rotation_error: f64,
    /// Translation error of every ranked estimate.
    pub rank_errors: Vec<f64>,
    pub threshold: f64,
}

impl PoseScore {
    /// Any of the best `n` estimates is within the success threshold.
    pub fn success_at(&self, n: usize) -> bool {
        self.rank_errors.iter().take(n).any(|&e| e < self.threshold)
    }
}

pub fn evaluate_pose(estimates: &[PoseEstimate], gt: &Pose, threshold: f64) -> Result<PoseScore> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::InvalidConfig("success threshold must be positive".into()));
    }
    let rank_errors: Vec<f64> = estimates
        .iter()
        .map(|e| (e.pose.translation() - gt.translation()).norm())
        .collect();
    let (te, re) = match estimates.first() {
        Some(e) => (rank_errors[0], rotation_error(e.pose.rotation(), gt.rotation())),
        None => (f64::INFINITY, std::f64::consts::PI),
    };
    Ok(PoseScore {
        translation_error: te,
        rotation_error: re,
        rank_errors,
        threshold,
    })
}

/// Where correspondence candidates come from in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum CandidateSource {
    /// Descriptor similarity and the configured matching strategy.
    Matching,
    /// Ground-truth pairs plus random wrong pairs making up `outlier_rate` of
    /// the list; every candidate carries its descriptor similarity.
    Injected { outlier_rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub solved: bool,
    pub precision: f64,
    pub recall: f64,
    pub translation_error: f64,
    pub rotation_error: f64,
    pub success: [bool; 3],
    /// Every mode pose is matched by one of the top 3 estimates.
    pub all_modes_in_top3: bool,
    pub latency: f64,
    pub error: Option<String>,
}

/// Ranks reported as top-N success.
pub const SUCCESS_RANKS: [usize; 3] = [1, 3, 5];

fn inject_candidates(scene: &SyntheticScene, cfg: &PipelineConfig, outlier_rate: f64, seed: u64) -> Result<Vec<Correspondence>> {
    if !(0.0..1.0).contains(&outlier_rate) {
        return Err(Error::InvalidConfig("outlier rate must lie in [0, 1)".into()));
    }
    let report = compute_similarity(&scene.map, &scene.observation, Some(&scene.embeddings), cfg)?;
    let s = &report.matrix;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "outliers"));
    let mut cands: Vec<Correspondence> = scene
        .ground_truth
        .iter()
        .map(|g| Correspondence::new(g.map_index, g.obs_index, s.get(g.obs_index, g.map_index)))
        .collect();
    let gt: BTreeSet<(usize, usize)> = scene.ground_truth.iter().map(Correspondence::key).collect();
    let n_out = ((cands.len() as f64) * outlier_rate / (1.0 - outlier_rate)).round() as usize;
    let mut taken = gt.clone();
    let capacity = s.n_obs() * s.n_map() - gt.len();
    while cands.len() - gt.len() < n_out.min(capacity) {
        let (m, n) = (rng.random_range(0..s.n_map()), rng.random_range(0..s.n_obs()));
        if taken.insert((m, n)) {
            cands.push(Correspondence::new(m, n, s.get(n, m)));
        }
    }
    cands.shuffle(&mut rng);
    Ok(cands)
}

/// Run the pipeline on one scene and score it.
pub fn run_trial(scene: &SyntheticScene, cfg: &PipelineConfig, source: CandidateSource) -> TrialOutcome {
    let start = Instant::now();
    let result: Result<Localization> = match source {
        CandidateSource::Matching => localize(&scene.map, &scene.observation, Some(&scene.embeddings), cfg),
        CandidateSource::Injected { outlier_rate } => inject_candidates(scene, cfg, outlier_rate, cfg.seed)
            .and_then(|c| localize_candidates(&scene.map, &scene.observation, c, cfg)),
    };
    let latency = start.elapsed().as_secs_f64();
    score_localization(scene, cfg.seed, result, latency)
}

fn score_localization(scene: &SyntheticScene, seed: u64, result: Result<Localization>, latency: f64) -> TrialOutcome {
    match result {
        Ok(loc) => {
            let matching = evaluate_matching(&loc.best().correspondences, &scene.ground_truth);
            let pose = evaluate_pose(&loc.estimates, &scene.pose, SUCCESS_THRESHOLD).expect("positive threshold");
            let all_modes_in_top3 = scene.mode_poses.iter().all(|mode| {
                loc.estimates
                    .iter()
                    .take(3)
                    .any(|e| (e.pose.translation() - mode.translation()).norm() < SUCCESS_THRESHOLD)
            });
            TrialOutcome {
                seed,
                solved: true,
                precision: matching.precision,
                recall: matching.recall,
                translation_error: pose.translation_error,
                rotation_error: pose.rotation_error,
                success: SUCCESS_RANKS.map(|n| pose.success_at(n)),
                all_modes_in_top3,
                latency,
                error: None,
            }
        }
        Err(e) => TrialOutcome {
            seed,
            solved: false,
            precision: 0.0,
            recall: 0.0,
            translation_error: f64::INFINITY,
            rotation_error: std::f64::consts::PI,
            success: [false; 3],
            all_modes_in_top3: false,
            latency,
            error: Some(e.to_string()),
        },
    }
}

/// Aggregate metrics over a suite of trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub trials: usize,
    pub failures: usize,
    /// Percent.
    pub precision: f64,
    /// Percent.
    pub recall: f64,
    /// Mean rank-1 translation error over solved trials, meters.
    pub translation_error: f64,
    /// Mean rank-1 rotation error over solved trials, radians.
    pub rotation_error: f64,
    pub success_rate_top1: f64,
    pub success_rate_top3: f64,
    pub success_rate_top5: f64,
    /// Seconds.
    pub mean_latency: f64,
}

impl EvalReport {
    pub fn from_trials(trials: &[TrialOutcome]) -> Self {
        let n = trials.len().max(1) as f64;
        let solved: Vec<&TrialOutcome> = trials.iter().filter(|t| t.solved).collect();
        let mean_solved = |f: fn(&TrialOutcome) -> f64| {
            if solved.is_empty() {
                f64::NAN
            } else {
                solved.iter().map(|t| f(t)).sum::<f64>() / solved.len() as f64
            }
        };
        let rate = |k: usize| 100.0 * trials.iter().filter(|t| t.success[k]).count() as f64 / n;
        Self {
            trials: trials.len(),
            failures: trials.len() - solved.len(),
            precision: trials.iter().map(|t| t.precision).sum::<f64>() / n,
            recall: trials.iter().map(|t| t.recall).sum::<f64>() / n,
            translation_error: mean_solved(|t| t.translation_error),
            rotation_error: mean_solved(|t| t.rotation_error),
            success_rate_top1: rate(0),
            success_rate_top3: rate(1),
            success_rate_top5: rate(2),
            mean_latency: trials.iter().map(|t| t.latency).sum::<f64>() / n,
        }
    }
}

/// Scene seeds of a suite: `n` named sub-seeds of the base seed.
pub fn suite_seeds(base_seed: u64, n: usize) -> Vec<u64> {
    (0..n).map(|i| sub_seed(base_seed, &format!("scene/{i}"))).collect()
}

/// Run one configuration over every scene of a suite, in parallel, in scene order.
pub fn run_suite(
    spec: &SceneSpec,
    seeds: &[u64],
    cfg: &PipelineConfig,
    source: CandidateSource,
) -> Result<Vec<TrialOutcome>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let scene = generate_scene(&spec.with_seed(seed))?;
            let trial_cfg = PipelineConfig {
                seed: sub_seed(cfg.seed, &format!("trial/{seed}")),
                ..cfg.clone()
            };
            Ok(run_trial(&scene, &trial_cfg, source))
        })
        .collect()
}

/// Stochastic extractors are run with `trials` root seeds and the run with
/// the best top-1 success rate is reported.
pub fn run_suite_best_of(
    spec: &SceneSpec,
    seeds: &[u64],
    cfg: &PipelineConfig,
    source: CandidateSource,
    trials: usize,
) -> Result<EvalReport> {
    let runs = if cfg.extractor.is_stochastic() { trials.max(1) } else { 1 };
    let mut best: Option<EvalReport> = None;
    for r in 0..runs {
        let run_cfg = PipelineConfig {
            seed: sub_seed(cfg.seed, &format!("run/{r}")),
            ..cfg.clone()
        };
        let report = EvalReport::from_trials(&run_suite(spec, seeds, &run_cfg, source)?);
        if best
            .as_ref()
            .is_none_or(|b| report.success_rate_top1 > b.success_rate_top1)
        {
            best = Some(report);
        }
    }
    Ok(best.expect("at least one run"))
}

/// Human-readable name of a descriptor mix.
pub fn descriptor_label(alpha: f64) -> String {
    if alpha == 0.0 {
        "SH".into()
    } else if alpha == 1.0 {
        "CLIP".into()
    } else {
        format!("SH+CLIP({alpha:.2})")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub suites: Vec<(String, SceneSpec)>,
    pub scenes_per_suite: usize,
    pub base_seed: u64,
    pub alphas: Vec<f64>,
    pub extractors: Vec<Extractor>,
    pub weights: Vec<WeightMode>,
    pub matchings: Vec<MatchingStrategy>,
    pub source: CandidateSource,
    /// Repeats for stochastic extractors (best one reported).
    pub stochastic_runs: usize,
    pub base_config: PipelineConfig,
}

impl Default for AblationGrid {
    fn default() -> Self {
        let cfg = PipelineConfig::default();
        Self {
            suites: vec![("default".into(), SceneSpec::default())],
            scenes_per_suite: 50,
            base_seed: 0,
            alphas: vec![cfg.alpha],
            extractors: vec![cfg.extractor],
            weights: vec![cfg.weights],
            matchings: vec![cfg.matching.strategy],
            source: CandidateSource::Matching,
            stochastic_runs: 3,
            base_config: cfg,
        }
    }
}

impl AblationGrid {
    /// 0, 0.1, …, 1.0.
    pub fn alpha_sweep() -> Vec<f64> {
        (0..=10).map(|i| f64::from(i) / 10.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub suite: String,
    pub descriptor: String,
    pub alpha: f64,
    pub extractor: String,
    pub weights: String,
    pub matching: String,
    pub report: EvalReport,
}

/// One flat CSV record per ablation cell.
#[derive(Serialize)]
struct AblationRecord<'a> {
    suite: &'a str,
    descriptor: &'a str,
    alpha: f64,
    extractor: &'a str,
    weights: &'a str,
    matching: &'a str,
    trials: usize,
    failures: usize,
    precision: f64,
    recall: f64,
    translation_error: f64,
    rotation_error: f64,
    success_rate_top1: f64,
    success_rate_top3: f64,
    success_rate_top5: f64,
    mean_latency: f64,
}

pub fn ablation_to_csv(rows: &[AblationRow]) -> Result<String> {
    let records: Vec<AblationRecord<'_>> = rows
        .iter()
        .map(|r| AblationRecord {
            suite: &r.suite,
            descriptor: &r.descriptor,
            alpha: r.alpha,
            extractor: &r.extractor,
            weights: &r.weights,
            matching: &r.matching,
            trials: r.report.trials,
            failures: r.report.failures,
            precision: r.report.precision,
            recall: r.report.recall,
            translation_error: r.report.translation_error,
            rotation_error: r.report.rotation_error,
            success_rate_top1: r.report.success_rate_top1,
            success_rate_top3: r.report.success_rate_top3,
            success_rate_top5: r.report.success_rate_top5,
            mean_latency: r.report.mean_latency,
        })
        .collect();
    rows_to_csv(&records)
}

/// Cross product of every axis; all cells of a suite share scene seeds.
pub fn run_ablation(grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    let seeds = suite_seeds(grid.base_seed, grid.scenes_per_suite);
    let mut rows = Vec::new();
    for (suite_name, spec) in &grid.suites {
        for &alpha in &grid.alphas {
            for &extractor in &grid.extractors {
                for &weights in &grid.weights {
                    for &strategy in &grid.matchings {
                        let mut cfg = grid.base_config.clone();
                        cfg.alpha = alpha;
                        cfg.extractor = extractor;
                        cfg.weights = weights;
                        cfg.matching.strategy = strategy;
                        cfg.seed = grid.base_seed;
                        let report = run_suite_best_of(spec, &seeds, &cfg, grid.source, grid.stochastic_runs)?;
                        rows.push(AblationRow {
                            suite: suite_name.clone(),
                            descriptor: descriptor_label(alpha),
                            alpha,
                            extractor: extractor.to_string(),
                            weights: weights.to_string(),
                            matching: strategy.to_string(),
                            report,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Render CSV text as a column-aligned table.
pub fn csv_to_table(csv_text: &str) -> String {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(csv_text.as_bytes());
    let rows: Vec<Vec<String>> = reader
        .records()
        .filter_map(|r| r.ok())
        .map(|r| {
            r.iter()
                .map(|cell| match cell.parse::<f64>() {
                    Ok(v) if cell.contains('.') => format!("{v:.4}"),
                    _ => cell.to_string(),
                })
                .collect()
        })
        .collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row.iter().enumerate().map(|(c, s)| format!("{s:<w$}", w = widths[c])).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
            out.push('\n');
        }
    }
    out
}

/// Tile copies of a base map until it holds `size` landmarks; observations
/// keep referring to the original copy.
pub fn duplicate_scene(base: &SyntheticScene, size: usize, spacing: f64) -> Result<SyntheticScene> {
    let n0 = base.map.len();
    if size < n0 {
        return Err(Error::InvalidConfig(format!("size {size} is below the base map size {n0}")));
    }
    let mut landmarks = base.map.landmarks.clone();
    let mut copy = 1;
    while landmarks.len() < size {
        let offset = Vector3::new(spacing * copy as f64, 0.0, 0.0);
        for lm in &base.map.landmarks {
            if landmarks.len() == size {
                break;
            }
            let id = landmarks.len() as u64;
            landmarks.push(lm.with_geometry(lm.position() + offset, *lm.axis_lengths())?.with_id(id));
        }
        copy += 1;
    }
    Ok(SyntheticScene {
        map: ObjectMap::new(base.map.frame_id.clone(), landmarks),
        ..base.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub landmarks: usize,
    pub mean_latency: f64,
    pub median_latency: f64,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalabilityReport {
    pub rows: Vec<LatencyRow>,
    pub r2_linear: f64,
    pub r2_quadratic: f64,
}

/// Coefficient of determination of a least-squares polynomial fit.
pub fn polyfit_r2(x: &[f64], y: &[f64], degree: usize) -> f64 {
    let n = x.len();
    let a = DMatrix::from_fn(n, degree + 1, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let coef = match a.clone().svd(true, true).solve(&b, 1e-12) {
        Ok(c) => c,
        Err(_) => return f64::NAN,
    };
    let fitted = &a * coef;
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_res: f64 = y.iter().zip(fitted.iter()).map(|(yi, fi)| (yi - fi).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|yi| (yi - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Time the full pipeline on a base scene tiled to each size.
pub fn benchmark_scalability(
    base: &SceneSpec,
    sizes: &[usize],
    repeats: usize,
    cfg: &PipelineConfig,
) -> Result<ScalabilityReport> {
    let base_scene = generate_scene(base)?;
    let spacing = base.extent + 4.0 * cfg.d_adj.max(cfg.d_comp);
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let scene = duplicate_scene(&base_scene, size, spacing)?;
        let mut times = Vec::with_capacity(repeats.max(1));
        let mut candidates = 0;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let loc = localize(&scene.map, &scene.observation, Some(&scene.embeddings), cfg)?;
            times.push(start.elapsed().as_secs_f64());
            candidates = loc.candidates.len();
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        times.sort_by(f64::total_cmp);
        rows.push(LatencyRow {
            landmarks: size,
            mean_latency: mean,
            median_latency: times[times.len() / 2],
            candidates,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.landmarks as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.median_latency).collect();
    Ok(ScalabilityReport {
        r2_linear: polyfit_r2(&x, &y, 1),
        r2_quadratic: polyfit_r2(&x, &y, 2),
        rows,
    })
}

/// Stable JSON rendering of a localization result, for determinism checks and output.
pub fn localization_json(loc: &Localization) -> String {
    #[derive(Serialize)]
    struct Out<'a> {
        estimates: Vec<crate::io::EstimateRecord>,
        diagnostics: &'a crate::pipeline::Diagnostics,
    }
    let out = Out {
        estimates: loc
            .estimates
            .iter()
            .enumerate()
            .map(|(i, e)| crate::io::estimate_record(i + 1, e))
            .collect(),
        diagnostics: &loc.diagnostics,
    };
    serde_json::to_string_pretty(&out).expect("serializable")
}
