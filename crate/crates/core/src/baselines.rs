//! Stochastic hypothesize-and-verify inlier extractors used as baselines.
//!
//! Verification counts candidates whose transformed observation centre lies
//! within `inlier_threshold` of its map landmark.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matching::Correspondence;
use crate::pose::{solve_correspondences, PoseEstimate, WeightMode};
use crate::scene::{ObjectMap, ObservationSet, Pose};

const SAMPLE_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SacConfig {
    pub max_iterations: usize,
    /// Position residual bound for an inlier, meters.
    pub inlier_threshold: f64,
    pub min_sample: usize,
    pub rng_seed: u64,
    /// Success probability used for early termination.
    pub confidence: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            inlier_threshold: 0.3,
            min_sample: SAMPLE_SIZE,
            rng_seed: 0,
            confidence: 0.99,
        }
    }
}

impl SacConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.inlier_threshold.is_nan() || self.inlier_threshold <= 0.0 {
            return Err(Error::InvalidConfig(
                "max_iterations and inlier_threshold must be positive".into(),
            ));
        }
        if self.min_sample != SAMPLE_SIZE {
            return Err(Error::InvalidConfig(format!(
                "minimal sample for a rigid pose is {SAMPLE_SIZE}, got {}",
                self.min_sample
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidConfig("confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SacResult {
    /// Candidate indices (into the input slice), ascending.
    pub inliers: Vec<usize>,
    pub estimate: PoseEstimate,
    /// Hypotheses drawn before termination.
    pub iterations: usize,
    /// 1-based iteration that first produced the winning consensus.
    pub best_found_at: usize,
}

fn residual_inliers(cands: &[Correspondence], map: &ObjectMap, obs: &ObservationSet, pose: &Pose, thr: f64) -> Vec<usize> {
    cands
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let predicted = pose.transform_point(obs.objects[c.obs_index].position());
            (map.landmarks[c.map_index].position() - predicted).norm() < thr
        })
        .map(|(i, _)| i)
        .collect()
}

fn required_iterations(inliers: usize, total: usize, confidence: f64) -> f64 {
    let ratio = inliers as f64 / total as f64;
    let p_good = ratio.powi(SAMPLE_SIZE as i32);
    if p_good >= 1.0 {
        return 1.0;
    }
    if p_good <= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - confidence).ln() / (1.0 - p_good).ln()
}

fn valid_sample(cands: &[Correspondence], sample: &[usize]) -> bool {
    for (i, &a) in sample.iter().enumerate() {
        for &b in &sample[i + 1..] {
            if a == b || cands[a].map_index == cands[b].map_index || cands[a].obs_index == cands[b].obs_index {
                return false;
            }
        }
    }
    true
}

/// Shared hypothesize-and-verify loop; `draw` yields the sample for iteration `t` (1-based).
fn consensus_loop(
    cands: &[Correspondence],
    map: &ObjectMap,
    obs: &ObservationSet,
    cfg: &SacConfig,
    mut draw: impl FnMut(&mut ChaCha8Rng, usize) -> [usize; SAMPLE_SIZE],
) -> Result<SacResult> {
    cfg.validate()?;
    if cands.len() < SAMPLE_SIZE {
        return Err(Error::NoConsensus {
            best: 0,
            required: SAMPLE_SIZE,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(Vec<usize>, Pose)> = None;
    let mut best_found_at = 0;
    let mut t = 0;
    while t < cfg.max_iterations {
        t += 1;
        let sample = draw(&mut rng, t);
        if !valid_sample(cands, &sample) {
            continue;
        }
        let subset: Vec<Correspondence> = sample.iter().map(|&i| cands[i]).collect();
        let Ok(est) = solve_correspondences(&subset, map, obs, WeightMode::None) else {
            continue;
        };
        let inliers = residual_inliers(cands, map, obs, &est.pose, cfg.inlier_threshold);
        if best.as_ref().is_none_or(|(b, _)| inliers.len() > b.len()) {
            best_found_at = t;
            let needed = required_iterations(inliers.len(), cands.len(), cfg.confidence);
            best = Some((inliers, est.pose));
            if (t as f64) >= needed {
                break;
            }
        } else if let Some((b, _)) = &best {
            if (t as f64) >= required_iterations(b.len(), cands.len(), cfg.confidence) {
                break;
            }
        }
    }

    let (inliers, pose) = best.unwrap_or_else(|| (Vec::new(), Pose::identity()));
    if inliers.len() < SAMPLE_SIZE {
        return Err(Error::NoConsensus {
            best: inliers.len(),
            required: SAMPLE_SIZE,
        });
    }

    // Re-fit on the consensus set; keep the refit only if it does not lose support.
    let support: Vec<Correspondence> = inliers.iter().map(|&i| cands[i]).collect();
    let (inliers, estimate) = match solve_correspondences(&support, map, obs, WeightMode::None) {
        Ok(refit) => {
            let refit_inliers = residual_inliers(cands, map, obs, &refit.pose, cfg.inlier_threshold);
            if refit_inliers.len() >= inliers.len() {
                (refit_inliers, refit)
            } else {
                (inliers, solve_at(&support, pose))
            }
        }
        Err(_) => (inliers, solve_at(&support, pose)),
    };
    let mut estimate = estimate;
    estimate.correspondences = inliers.iter().map(|&i| cands[i]).collect();
    estimate.hypothesis_score = estimate.correspondences.iter().map(|c| c.similarity).sum();
    if let Some(rms) = rms_residual(&estimate.correspondences, map, obs, &estimate.pose) {
        estimate.weighted_rms_residual = rms;
    }
    Ok(SacResult {
        inliers,
        estimate,
        iterations: t,
        best_found_at,
    })
}

fn solve_at(support: &[Correspondence], pose: Pose) -> PoseEstimate {
    PoseEstimate {
        pose,
        weighted_rms_residual: 0.0,
        hypothesis_score: 0.0,
        correspondences: support.to_vec(),
    }
}

fn rms_residual(cands: &[Correspondence], map: &ObjectMap, obs: &ObservationSet, pose: &Pose) -> Option<f64> {
    if cands.is_empty() {
        return None;
    }
    let sum: f64 = cands
        .iter()
        .map(|c| (map.landmarks[c.map_index].position() - pose.transform_point(obs.objects[c.obs_index].position())).norm_squared())
        .sum();
    Some((sum / cands.len() as f64).sqrt())
}

fn sample_from(rng: &mut ChaCha8Rng, pool: usize) -> [usize; SAMPLE_SIZE] {
    let idx = index::sample(rng, pool, SAMPLE_SIZE);
    [idx.index(0), idx.index(1), idx.index(2)]
}

/// Uniform sampling RANSAC over the candidate list.
pub fn ransac_extract(
    cands: &[Correspondence],
    map: &ObjectMap,
    obs: &ObservationSet,
    cfg: &SacConfig,
) -> Result<SacResult> {
    let n = cands.len();
    consensus_loop(cands, map, obs, cfg, |rng, _| sample_from(rng, n))
}

/// Progressive sampling schedule: the pool grows from the top of a
/// quality-ordered list so that after `growth_max` draws it covers all items.
#[derive(Debug, Clone)]
pub struct ProsacSchedule {
    total: usize,
    subset: usize,
    t_n: f64,
    t_n_prime: f64,
}

impl ProsacSchedule {
    pub fn new(total: usize, growth_max: usize) -> Self {
        let m = SAMPLE_SIZE;
        let mut t_n = growth_max as f64;
        for i in 0..m {
            t_n *= (m - i) as f64 / (total - i) as f64;
        }
        Self {
            total,
            subset: m,
            t_n,
            t_n_prime: 1.0,
        }
    }

    /// Current pool size.
    pub fn subset(&self) -> usize {
        self.subset
    }

    /// Draw the sample for iteration `t` (1-based). The first draw is the top `m` items.
    pub fn draw(&mut self, rng: &mut impl Rng, t: usize) -> [usize; SAMPLE_SIZE] {
        let t = t as f64;
        if t > self.t_n_prime && self.subset < self.total {
            let t_next = self.t_n * (self.subset + 1) as f64 / (self.subset + 1 - SAMPLE_SIZE) as f64;
            self.t_n_prime += (t_next - self.t_n).ceil();
            self.t_n = t_next;
            self.subset += 1;
        }
        if self.t_n_prime < t {
            let idx = index::sample(rng, self.subset, SAMPLE_SIZE);
            [idx.index(0), idx.index(1), idx.index(2)]
        } else {
            // The newest item plus two from the previous pool.
            let idx = index::sample(rng, self.subset - 1, SAMPLE_SIZE - 1);
            [idx.index(0), idx.index(1), self.subset - 1]
        }
    }
}

/// PROSAC: sampling restricted to a growing prefix of the similarity-sorted candidates.
pub fn prosac_extract(
    cands: &[Correspondence],
    map: &ObjectMap,
    obs: &ObservationSet,
    cfg: &SacConfig,
) -> Result<SacResult> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].similarity.total_cmp(&cands[a].similarity).then(a.cmp(&b)));
    if cands.len() < SAMPLE_SIZE {
        return Err(Error::NoConsensus {
            best: 0,
            required: SAMPLE_SIZE,
        });
    }
    let mut schedule = ProsacSchedule::new(cands.len(), cfg.max_iterations);
    let mut result = consensus_loop(cands, map, obs, cfg, |rng, t| {
        schedule.draw(rng, t).map(|i| order[i])
    })?;
    result.inliers.sort_unstable();
    Ok(result)
}
