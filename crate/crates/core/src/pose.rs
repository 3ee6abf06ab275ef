//! Weighted closed-form rigid registration of landmark centres.
//!
//! Minimises `Σ wₖ ‖p_map,k − (R·p_obs,k + t)‖²` with weighted centroids, the
//! SVD of the weighted cross-covariance and a determinant correction.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inlier::CliqueHypothesis;
use crate::matching::Correspondence;
use crate::scene::{ObjectMap, ObservationSet, Pose};

/// Second-to-first scatter eigenvalue ratio under which points count as collinear.
const COLLINEAR_TOLERANCE: f64 = 1e-12;

/// `min(1, ‖axes_obs‖ / ‖axes_map‖)`: how much of the map object was seen.
pub fn completeness_weight(obs_axes: &Vector3<f64>, map_axes: &Vector3<f64>) -> f64 {
    let map_sq = map_axes.norm_squared();
    debug_assert!(map_sq > 0.0);
    (obs_axes.norm_squared() / map_sq).sqrt().min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedPair {
    pub map: Vector3<f64>,
    pub obs: Vector3<f64>,
    pub w_sim: f64,
    pub w_com: f64,
}

impl WeightedPair {
    pub fn unweighted(map: Vector3<f64>, obs: Vector3<f64>) -> Self {
        Self {
            map,
            obs,
            w_sim: 1.0,
            w_com: 1.0,
        }
    }

    pub fn weight(&self) -> f64 {
        self.w_sim * self.w_com
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightedCorrespondenceSet {
    pub pairs: Vec<WeightedPair>,
}

impl WeightedCorrespondenceSet {
    pub fn new(pairs: Vec<WeightedPair>) -> Self {
        Self { pairs }
    }

    /// The weighted objective at an arbitrary pose.
    pub fn objective(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> f64 {
        self.pairs
            .iter()
            .map(|p| p.weight() * (p.map - (rotation * p.obs + translation)).norm_squared())
            .sum()
    }
}

/// Which factors enter each correspondence weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    None,
    Sim,
    Com,
    #[default]
    Both,
}

impl WeightMode {
    pub const ALL: [WeightMode; 4] = [WeightMode::None, WeightMode::Sim, WeightMode::Com, WeightMode::Both];

    fn uses_sim(self) -> bool {
        matches!(self, WeightMode::Sim | WeightMode::Both)
    }

    fn uses_com(self) -> bool {
        matches!(self, WeightMode::Com | WeightMode::Both)
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::None => "none",
            WeightMode::Sim => "sim",
            WeightMode::Com => "com",
            WeightMode::Both => "both",
        })
    }
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "sim" => Ok(Self::Sim),
            "com" => Ok(Self::Com),
            "both" => Ok(Self::Both),
            other => Err(Error::InvalidConfig(format!("unknown weight mode {other:?}"))),
        }
    }
}

/// A solved pose with its fit quality.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub weighted_rms_residual: f64,
    /// Similarity sum of the hypothesis the pose came from.
    pub hypothesis_score: f64,
    /// Correspondences the pose was fitted to.
    pub correspondences: Vec<Correspondence>,
}

/// Weighted least-squares rigid transform taking observation points onto map points.
pub fn solve_weighted_pose(set: &WeightedCorrespondenceSet) -> Result<PoseEstimate> {
    let positive: Vec<&WeightedPair> = set.pairs.iter().filter(|p| p.weight() > 0.0).collect();
    if positive.len() < 3 {
        return Err(Error::InsufficientPairs {
            positive: positive.len(),
            required: 3,
        });
    }
    if set
        .pairs
        .iter()
        .any(|p| !(p.weight().is_finite() && p.weight() >= 0.0))
    {
        return Err(Error::InvalidConfig("weights must be finite and non-negative".into()));
    }

    let total: f64 = positive.iter().map(|p| p.weight()).sum();
    let centroid_map = positive.iter().fold(Vector3::zeros(), |acc, p| acc + p.map * p.weight()) / total;
    let centroid_obs = positive.iter().fold(Vector3::zeros(), |acc, p| acc + p.obs * p.weight()) / total;

    let mut cross = Matrix3::zeros();
    let mut scatter_map = Matrix3::zeros();
    let mut scatter_obs = Matrix3::zeros();
    for p in &positive {
        let (dm, dobs) = (p.map - centroid_map, p.obs - centroid_obs);
        let w = p.weight();
        cross += w * dobs * dm.transpose();
        scatter_map += w * dm * dm.transpose();
        scatter_obs += w * dobs * dobs.transpose();
    }
    ensure_spread(&scatter_map, "map")?;
    ensure_spread(&scatter_obs, "observation")?;

    let svd = cross.svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let translation = centroid_map - rotation * centroid_obs;

    let objective = set.objective(&rotation, &translation);
    Ok(PoseEstimate {
        pose: Pose::from_parts_unchecked(rotation, translation),
        weighted_rms_residual: (objective / total).max(0.0).sqrt(),
        hypothesis_score: 0.0,
        correspondences: Vec::new(),
    })
}

fn ensure_spread(scatter: &Matrix3<f64>, which: &str) -> Result<()> {
    let mut ev: Vec<f64> = SymmetricEigen::new(*scatter).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= COLLINEAR_TOLERANCE * ev[0] {
        return Err(Error::DegenerateGeometry(format!(
            "{which} points are collinear or coincident (scatter eigenvalues {ev:?})"
        )));
    }
    Ok(())
}

/// Weighted pairs for a set of candidates.
pub fn weighted_pairs(
    cands: &[Correspondence],
    map: &ObjectMap,
    obs: &ObservationSet,
    mode: WeightMode,
) -> WeightedCorrespondenceSet {
    let pairs = cands
        .iter()
        .map(|c| {
            let (m, o) = (&map.landmarks[c.map_index], &obs.objects[c.obs_index]);
            WeightedPair {
                map: *m.position(),
                obs: *o.position(),
                w_sim: if mode.uses_sim() { c.similarity.max(0.0) } else { 1.0 },
                w_com: if mode.uses_com() {
                    completeness_weight(o.axis_lengths(), m.axis_lengths())
                } else {
                    1.0
                },
            }
        })
        .collect();
    WeightedCorrespondenceSet { pairs }
}

/// Solve a pose for a single correspondence subset.
pub fn solve_correspondences(
    cands: &[Correspondence],
    map: &ObjectMap,
    obs: &ObservationSet,
    mode: WeightMode,
) -> Result<PoseEstimate> {
    let mut est = solve_weighted_pose(&weighted_pairs(cands, map, obs, mode))?;
    est.hypothesis_score = cands.iter().map(|c| c.similarity).sum();
    est.correspondences = cands.to_vec();
    Ok(est)
}

#[derive(Debug, Clone)]
pub struct HypothesisEvaluation {
    /// One estimate per solvable hypothesis, in hypothesis order.
    pub estimates: Vec<PoseEstimate>,
    /// Rank and failure of every dropped hypothesis.
    pub dropped: Vec<(usize, Error)>,
}

/// Solve every hypothesis; unsolvable ones are dropped, order is preserved.
pub fn evaluate_hypotheses(
    hyps: &[CliqueHypothesis],
    cands: &[Correspondence],
    map: &ObjectMap,
    obs: &ObservationSet,
    mode: WeightMode,
) -> Result<HypothesisEvaluation> {
    let results: Vec<Result<PoseEstimate>> = hyps
        .par_iter()
        .map(|h| {
            let members: Vec<Correspondence> = h.members.iter().map(|&i| cands[i]).collect();
            let mut est = solve_correspondences(&members, map, obs, mode)?;
            est.hypothesis_score = h.score;
            Ok(est)
        })
        .collect();
    let mut estimates = Vec::new();
    let mut dropped = Vec::new();
    for (rank, r) in results.into_iter().enumerate() {
        match r {
            Ok(e) => estimates.push(e),
            Err(e) => {
                log::debug!("hypothesis {rank} dropped: {e}");
                dropped.push((rank, e));
            }
        }
    }
    if estimates.is_empty() {
        return Err(Error::NoSolvableHypothesis { attempted: hyps.len() });
    }
    Ok(HypothesisEvaluation { estimates, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::EllipsoidLandmark;
    use nalgebra::Rotation3;

    fn pts() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.2, -0.3),
            Vector3::new(-0.5, 1.5, 0.4),
            Vector3::new(0.3, -0.8, 2.0),
            Vector3::new(2.2, 1.1, 0.9),
        ]
    }

    #[test]
    fn completeness_examples() {
        let m = Vector3::new(0.4, 0.3, 0.2);
        assert_eq!(completeness_weight(&m, &m), 1.0);
        assert!((completeness_weight(&(m / 2.0), &m) - 0.5).abs() < 1e-15);
        assert_eq!(completeness_weight(&(m * 2.0), &m), 1.0);
    }

    #[test]
    fn identity_for_equal_points() {
        let set = WeightedCorrespondenceSet::new(
            pts()
                .into_iter()
                .enumerate()
                .map(|(i, p)| WeightedPair { map: p, obs: p, w_sim: 0.5 + i as f64, w_com: 0.9 })
                .collect(),
        );
        let est = solve_weighted_pose(&set).unwrap();
        assert!((est.pose.rotation() - Matrix3::identity()).amax() < 1e-12);
        assert!(est.pose.translation().norm() < 1e-12);
        assert!(est.weighted_rms_residual < 1e-12);
    }

    #[test]
    fn zero_weight_outlier_is_ignored() {
        let r0 = *Rotation3::from_euler_angles(0.4, -1.1, 2.5).matrix();
        let t0 = Vector3::new(1.0, -2.0, 0.5);
        let mut pairs: Vec<_> = pts().into_iter().map(|p| WeightedPair::unweighted(r0 * p + t0, p)).collect();
        let exact = solve_weighted_pose(&WeightedCorrespondenceSet::new(pairs.clone())).unwrap();
        pairs.push(WeightedPair { map: Vector3::new(9.0, 9.0, 9.0), obs: Vector3::zeros(), w_sim: 0.0, w_com: 1.0 });
        let with_outlier = solve_weighted_pose(&WeightedCorrespondenceSet::new(pairs)).unwrap();
        assert!((exact.pose.rotation() - with_outlier.pose.rotation()).amax() < 1e-12);
        assert!((exact.pose.translation() - with_outlier.pose.translation()).norm() < 1e-12);
        assert!((with_outlier.pose.rotation() - r0).amax() < 1e-12);
    }

    #[test]
    fn three_points_are_enough() {
        let r0 = *Rotation3::from_euler_angles(2.9, 0.3, -0.2).matrix();
        let t0 = Vector3::new(0.0, 4.0, 0.5);
        let pairs: Vec<_> = pts()[..3].iter().map(|p| WeightedPair::unweighted(r0 * p + t0, *p)).collect();
        let est = solve_weighted_pose(&WeightedCorrespondenceSet::new(pairs)).unwrap();
        assert!((est.pose.rotation() - r0).amax() < 1e-10);
        assert!((est.pose.translation() - t0).norm() < 1e-10);
    }

    #[test]
    fn error_cases() {
        let two: Vec<_> = pts()[..2].iter().map(|p| WeightedPair::unweighted(*p, *p)).collect();
        assert!(matches!(
            solve_weighted_pose(&WeightedCorrespondenceSet::new(two)),
            Err(Error::InsufficientPairs { positive: 2, .. })
        ));
        let line: Vec<_> = (0..5)
            .map(|i| {
                let p = Vector3::new(i as f64, 2.0 * i as f64, -(i as f64));
                WeightedPair::unweighted(p, p)
            })
            .collect();
        assert!(matches!(
            solve_weighted_pose(&WeightedCorrespondenceSet::new(line)),
            Err(Error::DegenerateGeometry(_))
        ));
        let mut zero: Vec<_> = pts().into_iter().map(|p| WeightedPair::unweighted(p, p)).collect();
        for p in zero.iter_mut().skip(2) {
            p.w_com = 0.0;
        }
        assert!(matches!(
            solve_weighted_pose(&WeightedCorrespondenceSet::new(zero)),
            Err(Error::InsufficientPairs { .. })
        ));
    }

    fn lm(p: Vector3<f64>) -> EllipsoidLandmark {
        EllipsoidLandmark::new(0, p, Matrix3::identity(), Vector3::repeat(0.2), 0).unwrap()
    }

    #[test]
    fn hypotheses_keep_order_and_drop_collinear() {
        let map_pts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let map = ObjectMap::new("m", map_pts.iter().copied().map(lm).collect());
        let obs = ObservationSet::new(map_pts.iter().copied().map(lm).collect());
        let cands: Vec<_> = (0..5).map(|i| Correspondence::new(i, i, 1.0)).collect();
        let hyps = vec![
            CliqueHypothesis { members: vec![0, 1, 3], score: 3.0 },
            CliqueHypothesis { members: vec![0, 1, 2], score: 2.0 },
            CliqueHypothesis { members: vec![1, 3, 4], score: 1.0 },
        ];
        let eval = evaluate_hypotheses(&hyps, &cands, &map, &obs, WeightMode::Both).unwrap();
        assert_eq!(eval.estimates.len(), 2);
        assert_eq!(eval.estimates[0].hypothesis_score, 3.0);
        assert_eq!(eval.estimates[1].hypothesis_score, 1.0);
        assert_eq!(eval.dropped.len(), 1);
        assert!(matches!(eval.dropped[0], (1, Error::DegenerateGeometry(_))));
        assert!(matches!(
            evaluate_hypotheses(&hyps[1..2], &cands, &map, &obs, WeightMode::Both),
            Err(Error::NoSolvableHypothesis { attempted: 1 })
        ));
    }

    #[test]
    fn negative_similarity_is_clamped() {
        let map = ObjectMap::new("m", pts().into_iter().map(lm).collect());
        let obs = ObservationSet::new(pts().into_iter().map(lm).collect());
        let cands = vec![Correspondence::new(0, 0, -0.4), Correspondence::new(1, 1, 0.6)];
        let set = weighted_pairs(&cands, &map, &obs, WeightMode::Sim);
        assert_eq!(set.pairs[0].w_sim, 0.0);
        assert_eq!(set.pairs[1].w_sim, 0.6);
        let set = weighted_pairs(&cands, &map, &obs, WeightMode::None);
        assert!(set.pairs.iter().all(|p| p.weight() == 1.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            *Rotation3::from_scaled_axis(axis.normalize() * rng.random_range(-3.1..3.1)).matrix()
        }

        fn instance(seed: u64, noise: f64) -> (WeightedCorrespondenceSet, Matrix3<f64>, Vector3<f64>) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r0 = random_rotation(&mut rng);
            let t0 = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let n = rng.random_range(3..20);
            let pairs = (0..n)
                .map(|_| {
                    let o = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                    let e = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * noise;
                    WeightedPair { map: r0 * o + t0 + e, obs: o, w_sim: rng.random_range(0.1..1.0), w_com: rng.random_range(0.1..1.0) }
                })
                .collect();
            (WeightedCorrespondenceSet::new(pairs), r0, t0)
        }

        proptest! {
            #[test]
            fn weight_scaling_is_invariant(seed in any::<u64>(), k in 0.01f64..100.0) {
                let (set, _, _) = instance(seed, 0.1);
                let scaled = WeightedCorrespondenceSet::new(set.pairs.iter().map(|p| WeightedPair { w_sim: p.w_sim * k, ..*p }).collect());
                let (a, b) = (solve_weighted_pose(&set).unwrap(), solve_weighted_pose(&scaled).unwrap());
                prop_assert!((a.pose.rotation() - b.pose.rotation()).amax() < 1e-9);
                prop_assert!((a.pose.translation() - b.pose.translation()).amax() < 1e-9);
            }

            #[test]
            fn equivariant_under_observation_motion(seed in any::<u64>()) {
                let (set, _, _) = instance(seed, 0.1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
                let r1 = random_rotation(&mut rng);
                let t1 = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                let moved = WeightedCorrespondenceSet::new(set.pairs.iter().map(|p| WeightedPair { obs: r1 * p.obs + t1, ..*p }).collect());
                let (a, b) = (solve_weighted_pose(&set).unwrap(), solve_weighted_pose(&moved).unwrap());
                let r_expected = a.pose.rotation() * r1.transpose();
                let t_expected = a.pose.translation() - r_expected * t1;
                prop_assert!((b.pose.rotation() - r_expected).amax() < 1e-9);
                prop_assert!((b.pose.translation() - t_expected).amax() < 1e-9);
            }

            #[test]
            fn closed_form_beats_perturbations(seed in any::<u64>()) {
                let (set, _, _) = instance(seed, 0.2);
                let est = solve_weighted_pose(&set).unwrap();
                let best = set.objective(est.pose.rotation(), est.pose.translation());
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
                for _ in 0..50 {
                    let dr = *Rotation3::from_scaled_axis(Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 0.05).matrix();
                    let dt = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 0.05;
                    prop_assert!(best <= set.objective(&(dr * est.pose.rotation()), &(est.pose.translation() + dt)) + 1e-12);
                }
            }
        }
    }
}
