//! Maps, observations and poses.
//!
//! Landmarks are ellipsoids carried as (position, orientation, half-axis
//! lengths). `axis_lengths` are **half-lengths**: a unit cube reconstructs to
//! `(0.5, 0.5, 0.5)`. The completeness weight only uses the ratio of axis
//! norms between an observation and its map landmark, so the convention does
//! not leak into pose estimation.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

/// Tolerance on `RᵀR − I` and `det R − 1` for a matrix to count as a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Relative eigenvalue gap under which two principal axes are treated as tied.
const EIGEN_TIE_TOLERANCE: f64 = 1e-9;

/// Smallest-to-largest covariance eigenvalue ratio below which a cloud is flat.
const RANK_TOLERANCE: f64 = 1e-12;

pub(crate) fn rotation_defect(m: &Matrix3<f64>) -> f64 {
    let ortho = (m.transpose() * m - Matrix3::identity()).amax();
    ortho.max((m.determinant() - 1.0).abs())
}

pub(crate) fn ensure_rotation(m: &Matrix3<f64>) -> Result<()> {
    let defect = rotation_defect(m);
    if defect.is_finite() && defect <= ROTATION_TOLERANCE {
        Ok(())
    } else {
        Err(Error::InvalidRotation(format!(
            "orthonormality/determinant defect {defect:.3e} exceeds {ROTATION_TOLERANCE:e}"
        )))
    }
}

/// Nearest rotation in the Frobenius sense.
pub(crate) fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// An ellipsoidal object landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidLandmark {
    id: u64,
    position: Vector3<f64>,
    orientation: Matrix3<f64>,
    axis_lengths: Vector3<f64>,
    class_id: usize,
    text_label: Option<String>,
    embedding_id: Option<String>,
}

impl EllipsoidLandmark {
    pub fn new(
        id: u64,
        position: Vector3<f64>,
        orientation: Matrix3<f64>,
        axis_lengths: Vector3<f64>,
        class_id: usize,
    ) -> Result<Self> {
        if !position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidLandmark(format!(
                "landmark {id}: non-finite position"
            )));
        }
        if !axis_lengths.iter().all(|&a| a.is_finite() && a > 0.0) {
            return Err(Error::InvalidLandmark(format!(
                "landmark {id}: axis lengths must be strictly positive, got {:?}",
                axis_lengths.as_slice()
            )));
        }
        ensure_rotation(&orientation)
            .map_err(|e| Error::InvalidLandmark(format!("landmark {id}: {e}")))?;
        Ok(Self {
            id,
            position,
            orientation,
            axis_lengths,
            class_id,
            text_label: None,
            embedding_id: None,
        })
    }

    pub fn with_text_label(mut self, label: impl Into<String>) -> Self {
        self.text_label = Some(label.into());
        self
    }

    pub fn with_embedding_id(mut self, embedding_id: impl Into<String>) -> Self {
        self.embedding_id = Some(embedding_id.into());
        self
    }

    pub fn with_id(mut self, id: u64) -> Self {
        self.id = id;
        self
    }

    pub fn with_class_id(mut self, class_id: usize) -> Self {
        self.class_id = class_id;
        self
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.position
    }

    pub fn orientation(&self) -> &Matrix3<f64> {
        &self.orientation
    }

    /// Half-axis lengths along the columns of `orientation`.
    pub fn axis_lengths(&self) -> &Vector3<f64> {
        &self.axis_lengths
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn text_label(&self) -> Option<&str> {
        self.text_label.as_deref()
    }

    pub fn embedding_id(&self) -> Option<&str> {
        self.embedding_id.as_deref()
    }

    /// Key used to look the landmark up in an embedding table: the explicit
    /// `embedding_id` if set, otherwise the decimal landmark id.
    pub fn embedding_key(&self) -> String {
        self.embedding_id
            .clone()
            .unwrap_or_else(|| self.id.to_string())
    }

    /// Same landmark expressed in another frame: `x ↦ R·x + t`.
    pub fn transformed(&self, pose: &Pose) -> Self {
        Self {
            position: pose.transform_point(&self.position),
            orientation: pose.rotation * self.orientation,
            ..self.clone()
        }
    }

    /// Same landmark with a different centre and half-axes.
    pub fn with_geometry(&self, position: Vector3<f64>, axis_lengths: Vector3<f64>) -> Result<Self> {
        let mut out = Self::new(self.id, position, self.orientation, axis_lengths, self.class_id)?;
        out.text_label = self.text_label.clone();
        out.embedding_id = self.embedding_id.clone();
        Ok(out)
    }
}

/// Prior object map.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMap {
    pub frame_id: String,
    pub landmarks: Vec<EllipsoidLandmark>,
}

impl ObjectMap {
    pub fn new(frame_id: impl Into<String>, landmarks: Vec<EllipsoidLandmark>) -> Self {
        Self {
            frame_id: frame_id.into(),
            landmarks,
        }
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }
}

/// Landmarks observed from a single view, in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub objects: Vec<EllipsoidLandmark>,
    /// Camera-to-map pose, when known.
    pub source_pose_gt: Option<Pose>,
}

impl ObservationSet {
    pub fn new(objects: Vec<EllipsoidLandmark>) -> Self {
        Self {
            objects,
            source_pose_gt: None,
        }
    }

    pub fn with_ground_truth(mut self, pose: Pose) -> Self {
        self.source_pose_gt = Some(pose);
        self
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

/// Rigid transform mapping camera-frame points into the map frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        ensure_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidRotation("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Caller guarantees `rotation` is in SO(3) up to rounding.
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(rotation_defect(&rotation) < 1e-6);
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Reconstruct an ellipsoid from a masked object point cloud.
///
/// The frame comes from the eigenvectors of the point covariance (columns by
/// descending eigenvalue, signs fixed so `det = +1`), the centre is the point
/// centroid, and the axes are the half-extents of the points projected on
/// each principal direction. Tied eigenvalues resolve to the basis of the
/// tied subspace closest to the world axes.
pub fn fit_ellipsoid(points: &[Vector3<f64>]) -> Result<EllipsoidLandmark> {
    if points.len() < 4 {
        return Err(Error::DegenerateCloud(format!(
            "{} points, need at least 4",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::DegenerateCloud("non-finite point".into()));
    }

    let n = points.len() as f64;
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let covariance = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - centroid;
        acc + d * d.transpose()
    }) / n;

    let eigen = SymmetricEigen::new(covariance);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
    let values: [f64; 3] = order.map(|i| eigen.eigenvalues[i]);

    if values[0] <= 0.0 || values[2] <= RANK_TOLERANCE * values[0] {
        return Err(Error::DegenerateCloud(format!(
            "covariance eigenvalues {values:?} are rank deficient"
        )));
    }

    let mut axes: [Vector3<f64>; 3] = order.map(|i| eigen.eigenvectors.column(i).into_owned());
    resolve_ties(&values, &mut axes);

    for axis in axes.iter_mut() {
        let (imax, _) = axis.iamax_full();
        if axis[imax] < 0.0 {
            *axis = -*axis;
        }
    }
    let mut orientation = Matrix3::from_columns(&axes);
    if orientation.determinant() < 0.0 {
        orientation.set_column(2, &(-axes[2]));
    }
    // Re-orthonormalise to remove eigen-solver rounding.
    let orientation = project_to_rotation(&orientation);

    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        let local = orientation.transpose() * (p - centroid);
        lo = lo.inf(&local);
        hi = hi.sup(&local);
    }
    let axis_lengths = (hi - lo) * 0.5;

    EllipsoidLandmark::new(0, centroid, orientation, axis_lengths, 0)
        .map_err(|e| Error::DegenerateCloud(e.to_string()))
}

/// Replace eigenvectors of (near-)equal eigenvalues with the world-aligned
/// basis of their common eigenspace.
fn resolve_ties(values: &[f64; 3], axes: &mut [Vector3<f64>; 3]) {
    let scale = values[0];
    let mut start = 0;
    while start < 3 {
        let mut end = start + 1;
        while end < 3 && (values[end - 1] - values[end]).abs() <= EIGEN_TIE_TOLERANCE * scale {
            end += 1;
        }
        if end - start > 1 {
            let group: Vec<Vector3<f64>> = axes[start..end].to_vec();
            let project = |w: &Vector3<f64>| -> Vector3<f64> {
                group.iter().fold(Vector3::zeros(), |acc, g| acc + g * g.dot(w))
            };
            let mut world: Vec<(usize, Vector3<f64>)> = (0..3)
                .map(|k| (k, project(&Vector3::ith(k, 1.0))))
                .collect();
            // Stable: equal projections keep x, y, z order.
            world.sort_by(|a, b| b.1.norm().total_cmp(&a.1.norm()));
            let mut basis: Vec<Vector3<f64>> = Vec::with_capacity(end - start);
            for (_, w) in world {
                let mut v = w;
                for b in &basis {
                    v -= b * b.dot(&v);
                }
                if v.norm() > 1e-6 {
                    basis.push(v.normalize());
                }
                if basis.len() == end - start {
                    break;
                }
            }
            if basis.len() == end - start {
                axes[start..end].copy_from_slice(&basis);
            }
        }
        start = end;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};

    fn box_corners(half: Vector3<f64>) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    pts.push(Vector3::new(sx * half.x, sy * half.y, sz * half.z));
                }
            }
        }
        pts
    }

    fn sorted(v: &Vector3<f64>) -> [f64; 3] {
        let mut a = [v.x, v.y, v.z];
        a.sort_by(f64::total_cmp);
        a
    }

    #[test]
    fn unit_cube_is_axis_aligned() {
        let lm = fit_ellipsoid(&box_corners(Vector3::repeat(0.5))).unwrap();
        assert!(lm.position().norm() < 1e-12);
        assert!((lm.axis_lengths() - Vector3::repeat(0.5)).amax() < 1e-12);
        let abs = lm.orientation().abs();
        // permutation of identity
        for r in 0..3 {
            let row_max = abs.row(r).max();
            assert!((row_max - 1.0).abs() < 1e-12);
            assert!((abs.row(r).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotated_box_recovers_frame() {
        let half = Vector3::new(1.2, 0.6, 0.3);
        let r0 = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(0.3, -1.0, 0.4)), 0.9);
        let t0 = Vector3::new(2.0, -1.0, 0.5);
        let pts: Vec<_> = box_corners(half).iter().map(|p| r0 * p + t0).collect();
        let lm = fit_ellipsoid(&pts).unwrap();
        assert!((lm.position() - t0).norm() < 1e-12);
        assert!((lm.axis_lengths() - half).amax() < 1e-12);
        // The recovered oriented box regenerates the same corner set.
        let regen: Vec<_> = box_corners(*lm.axis_lengths())
            .iter()
            .map(|p| lm.orientation() * p + lm.position())
            .collect();
        for p in &pts {
            let nearest = regen.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert!(nearest < 1e-9, "corner {p:?} not regenerated");
        }
        for k in 0..3 {
            let axis = lm.orientation().column(k);
            let reference = r0.matrix().column(k);
            assert!((axis.dot(&reference).abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_and_small_clouds_are_degenerate() {
        let line: Vec<_> = (0..3).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(fit_ellipsoid(&line), Err(Error::DegenerateCloud(_))));
        let line: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(fit_ellipsoid(&line), Err(Error::DegenerateCloud(_))));
        let plane: Vec<_> = (0..10)
            .map(|i| Vector3::new((i % 3) as f64, (i / 3) as f64, 1.0))
            .collect();
        assert!(matches!(fit_ellipsoid(&plane), Err(Error::DegenerateCloud(_))));
    }

    #[test]
    fn determinant_is_positive() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(3.0, 0.1, 0.0),
            Vector3::new(0.2, 1.5, 0.1),
            Vector3::new(0.1, 0.3, 0.7),
            Vector3::new(-1.0, -0.5, 0.2),
        ];
        let lm = fit_ellipsoid(&pts).unwrap();
        assert!(rotation_defect(lm.orientation()) < 1e-12);
    }

    #[test]
    fn landmark_rejects_bad_axes_and_rotation() {
        let r = Matrix3::identity();
        assert!(EllipsoidLandmark::new(0, Vector3::zeros(), r, Vector3::new(1.0, 0.0, 1.0), 0).is_err());
        let mut bad = r;
        bad[(0, 0)] = -1.0;
        assert!(EllipsoidLandmark::new(0, Vector3::zeros(), bad, Vector3::repeat(1.0), 0).is_err());
    }

    #[test]
    fn pose_inverse_and_compose() {
        let r = *Rotation3::from_euler_angles(0.1, -0.7, 2.0).matrix();
        let p = Pose::new(r, Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let id = p.compose(&p.inverse());
        assert!((id.rotation() - Matrix3::identity()).amax() < 1e-12);
        assert!(id.translation().norm() < 1e-12);
        let x = Vector3::new(-0.3, 0.4, 5.0);
        assert!((p.inverse().transform_point(&p.transform_point(&x)) - x).norm() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn anisotropic_cloud() -> impl Strategy<Value = Vec<Vector3<f64>>> {
            // Distinct extents keep the principal frame identifiable.
            (0.5f64..1.0, 1.5f64..2.0, 2.5f64..3.0, 20usize..60, any::<u64>()).prop_map(
                |(a, b, c, n, seed)| {
                    use rand::{Rng, SeedableRng};
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                    let mut pts = box_corners(Vector3::new(a, b, c));
                    for _ in 0..n {
                        pts.push(Vector3::new(
                            rng.random_range(-a..a),
                            rng.random_range(-b..b),
                            rng.random_range(-c..c),
                        ));
                    }
                    pts
                },
            )
        }

        proptest! {
            #[test]
            fn fit_is_rigidly_equivariant(
                pts in anisotropic_cloud(),
                axis in (-1.0f64..1.0, -1.0f64..1.0, 0.1f64..1.0),
                angle in -3.0f64..3.0,
                t in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0),
            ) {
                let r0 = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(axis.0, axis.1, axis.2)), angle);
                let t0 = Vector3::new(t.0, t.1, t.2);
                let base = fit_ellipsoid(&pts).unwrap();
                let moved: Vec<_> = pts.iter().map(|p| r0 * p + t0).collect();
                let fit = fit_ellipsoid(&moved).unwrap();
                prop_assert!((fit.position() - (r0 * base.position() + t0)).norm() < 1e-9);
                let (a, b) = (sorted(fit.axis_lengths()), sorted(base.axis_lengths()));
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }

            #[test]
            fn sorted_axes_ignore_point_order(pts in anisotropic_cloud(), seed in any::<u64>()) {
                use rand::{seq::SliceRandom, SeedableRng};
                let mut shuffled = pts.clone();
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let (a, b) = (fit_ellipsoid(&pts).unwrap(), fit_ellipsoid(&shuffled).unwrap());
                let (sa, sb) = (sorted(a.axis_lengths()), sorted(b.axis_lengths()));
                for k in 0..3 {
                    prop_assert!((sa[k] - sb[k]).abs() < 1e-9);
                }
            }
        }
    }
}
