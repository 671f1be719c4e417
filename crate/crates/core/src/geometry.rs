//! Proper rigid motions in 3D.

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Tolerance on `‖RᵀR − I‖∞` and `|det R − 1|`.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (max |RᵀR − I| = {deviation:e})")]
    NotOrthonormal { deviation: f64 },
    #[error("rotation has determinant {det}, expected +1")]
    Improper { det: f64 },
}

/// Rotation (det +1) followed by a translation: `c ↦ R·c + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::from(t),
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Result<Self, GeometryError> {
        Self::new(rotation, Vector3::zeros())
    }

    /// Rotation by `angle` radians about `axis` through `origin`.
    pub fn about_axis(origin: [f64; 3], axis: [f64; 3], angle: f64) -> Self {
        let rot = UnitQuaternion::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle)
            .to_rotation_matrix()
            .into_inner();
        let o = Vector3::from(origin);
        Self {
            rotation: rot,
            translation: o - rot * o,
        }
    }

    /// Uniformly random rotation and a translation with entries in `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Self {
        let q: Vector4<f64> = Vector4::from_fn(|_, _| rng.sample(StandardNormal));
        let rotation = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q))
            .to_rotation_matrix()
            .into_inner();
        let translation = Vector3::from_fn(|_, _| rng.random_range(-scale..=scale));
        Self {
            rotation,
            translation,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let deviation = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(deviation <= ROTATION_TOLERANCE) {
            return Err(GeometryError::NotOrthonormal { deviation });
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::Improper { det });
        }
        Ok(())
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        (self.rotation * Vector3::from(p) + self.translation).into()
    }

    pub fn apply_vec(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_transforms_are_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            RigidTransform::random(&mut rng, 5.0).validate().unwrap();
        }
    }

    #[test]
    fn reflection_is_rejected() {
        let m = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        assert!(matches!(RigidTransform::from_rotation(m), Err(GeometryError::Improper { .. })));
        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            RigidTransform::from_rotation(skew),
            Err(GeometryError::NotOrthonormal { .. })
        ));
    }

    #[test]
    fn axis_rotation_fixes_axis_points() {
        let t = RigidTransform::about_axis([1.0, 1.0, 0.0], [0.0, 0.0, 1.0], 1.3);
        let p = t.apply([1.0, 1.0, 4.0]);
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && (p[2] - 4.0).abs() < 1e-12);
    }
}
