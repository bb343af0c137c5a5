use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Drift in `‖RᵀR − I‖_F` above which a rotation is re-orthonormalized.
const DRIFT_TOLERANCE: f64 = 1e-12;
/// Construction rejects anything further than this from SO(3).
const ACCEPT_TOLERANCE: f64 = 1e-6;

/// Element of SE(3): `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

fn orthogonality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

/// Closest rotation in the Frobenius sense (polar factor via SVD).
fn polar_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut q = u * v_t;
    if q.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        q = u * v_t;
    }
    q
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Validating constructor. Matrices within the acceptance band are
    /// snapped back onto SO(3).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation.iter().chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(GeometryError::NotARotation("non-finite entry".into()));
        }
        let det = rotation.determinant();
        if det < 0.0 {
            return Err(GeometryError::NotARotation(format!("det(R) = {det}")));
        }
        let err = orthogonality_error(&rotation);
        if err > ACCEPT_TOLERANCE {
            return Err(GeometryError::NotARotation(format!("|RᵀR − I|_F = {err:e}")));
        }
        let rotation = if err > DRIFT_TOLERANCE { polar_rotation(&rotation) } else { rotation };
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// Rotation by `|axis_angle|` radians about its direction.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = *Rotation3::from_scaled_axis(axis_angle).matrix();
        Self { rotation, translation }
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs()) > 1e-9 {
            return Err(GeometryError::NotARotation(format!("bottom row {bottom:?}")));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]),
        )
    }

    pub fn from_row_major(m: &[f64; 16]) -> Result<Self, GeometryError> {
        Self::from_matrix4(&Matrix4::from_row_slice(m))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix4();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        let mut rotation = self.rotation * other.rotation;
        if orthogonality_error(&rotation) > DRIFT_TOLERANCE {
            rotation = polar_rotation(&rotation);
        }
        Self { rotation, translation: self.rotation * other.translation + self.translation }
    }

    /// Conjugate by `frame`: the same motion expressed in another frame,
    /// `frame ∘ self ∘ frame⁻¹`.
    pub fn conjugated_by(&self, frame: &RigidTransform) -> Self {
        frame.compose(self).compose(&frame.inverse())
    }

    /// Rotation angle of `R`, accurate for tiny angles.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
        let c = (r.trace() - 1.0) / 2.0;
        s.atan2(c)
    }

    /// Axis-angle vector of the rotation (angle in `[0, π]`).
    pub fn scaled_axis(&self) -> Vector3<f64> {
        Rotation3::from_matrix_unchecked(self.rotation).scaled_axis()
    }

    /// Angle of the relative rotation between two transforms.
    pub fn rotation_distance(&self, other: &RigidTransform) -> f64 {
        RigidTransform::from_parts_unchecked(self.rotation * other.rotation.transpose(), Vector3::zeros())
            .rotation_angle()
    }

    pub fn translation_distance(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// The `1/n`-th power along the screw motion: applying the result `n`
    /// times reproduces `self`.
    pub fn fractional(&self, n: usize) -> Self {
        assert!(n >= 1);
        let step_r = *Rotation3::from_scaled_axis(self.scaled_axis() / n as f64).matrix();
        // t = (I + R + ... + R^{n−1}) t_step
        let mut sum = Matrix3::zeros();
        let mut pow = Matrix3::identity();
        for _ in 0..n {
            sum += pow;
            pow = step_r * pow;
        }
        let step_t = sum.try_inverse().map(|inv| inv * self.translation).unwrap_or(self.translation / n as f64);
        Self { rotation: step_r, translation: step_t }
    }

    /// Bypass validation; caller guarantees `rotation ∈ SO(3)`.
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// `a ∘ b`: applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let m = <[f64; 16]>::deserialize(d)?;
        RigidTransform::from_row_major(&m).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    pub fn random_transform<R: Rng>(rng: &mut R, max_angle: f64, max_t: f64) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.random_range(0.0..max_angle);
        let mut t = Vector3::zeros();
        if max_t > 0.0 {
            t = Vector3::new(
                rng.random_range(-max_t..max_t),
                rng.random_range(-max_t..max_t),
                rng.random_range(-max_t..max_t),
            );
        }
        RigidTransform::from_axis_angle(axis * angle, t)
    }

    fn close(a: &RigidTransform, b: &RigidTransform, tol: f64) -> bool {
        (a.to_matrix4() - b.to_matrix4()).abs().max() < tol
    }

    #[test]
    fn compose_with_identity_and_inverse() {
        let mut rng = crate::rng::seeded(1);
        for _ in 0..100 {
            let t = random_transform(&mut rng, 3.0, 2.0);
            assert_eq!(compose(&t, &RigidTransform::identity()), t);
            assert!(close(&compose(&t, &t.inverse()), &RigidTransform::identity(), 1e-12));
        }
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let a = RigidTransform::from_axis_angle(Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2), Vector3::zeros());
        let b = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let p = compose(&a, &b).apply(&Vector3::zeros());
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn associativity_on_random_triples() {
        let mut rng = crate::rng::seeded(2);
        for _ in 0..1000 {
            let a = random_transform(&mut rng, 3.1, 5.0);
            let b = random_transform(&mut rng, 3.1, 5.0);
            let c = random_transform(&mut rng, 3.1, 5.0);
            let l = compose(&compose(&a, &b), &c);
            let r = compose(&a, &compose(&b, &c));
            assert!(close(&l, &r, 1e-10));
        }
    }

    #[test]
    fn construction_rejects_reflections_and_skew() {
        let refl = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(refl, Vector3::zeros()).is_err());
        let mut skew = Matrix3::identity();
        skew[(0, 1)] = 1e-4;
        assert!(RigidTransform::new(skew, Vector3::zeros()).is_err());
        let mut slight = Matrix3::identity();
        slight[(0, 1)] = 1e-8;
        let t = RigidTransform::new(slight, Vector3::zeros()).unwrap();
        assert!(orthogonality_error(t.rotation()) < 1e-12);
        assert!((t.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_angle_small_and_large() {
        for &a in &[1e-9, 1e-6, 0.3, 2.0, 3.1] {
            let t = RigidTransform::from_axis_angle(Vector3::new(0.0, a, 0.0), Vector3::zeros());
            assert!((t.rotation_angle() - a).abs() < 1e-12 * a.max(1.0), "angle {a}");
        }
    }

    #[test]
    fn fractional_power_reassembles() {
        let mut rng = crate::rng::seeded(3);
        for n in 1..9 {
            let t = random_transform(&mut rng, 2.5, 0.5);
            let step = t.fractional(n);
            let mut acc = RigidTransform::identity();
            for _ in 0..n {
                acc = step.compose(&acc);
            }
            assert!(close(&acc, &t, 1e-10), "n = {n}");
        }
    }

    #[test]
    fn matrix_roundtrip_and_serde() {
        let mut rng = crate::rng::seeded(4);
        let t = random_transform(&mut rng, 3.0, 1.0);
        let back = RigidTransform::from_row_major(&t.to_row_major()).unwrap();
        assert_eq!(back, t, "drift {:e}", orthogonality_error(t.rotation()));
        let json = serde_json::to_string(&t).unwrap();
        let de: RigidTransform = serde_json::from_str(&json).unwrap();
        assert_eq!(de, t);
    }

    proptest! {
        #[test]
        fn conjugation_matches_change_of_frame(seed in any::<u64>()) {
            let mut rng = crate::rng::seeded(seed);
            let t = random_transform(&mut rng, 3.0, 1.0);
            let q = random_transform(&mut rng, 3.0, 1.0);
            let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            // Moving p by t in the original frame, then mapping with q, equals
            // mapping first and moving by the conjugated motion.
            let lhs = q.apply(&t.apply(&p));
            let rhs = t.conjugated_by(&q).apply(&q.apply(&p));
            prop_assert!((lhs - rhs).norm() < 1e-12);
        }
    }
}
