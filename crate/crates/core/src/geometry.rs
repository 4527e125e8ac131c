//! Rigid-body math on SE(3).
//!
//! Poses are stored as a rotation matrix plus translation. Twists are ordered
//! `(omega, v)`: rotational part first, translational part second. A pose
//! `T_{s,t}` relating two frames maps target-frame coordinates into
//! source-frame coordinates, so `apply(T_{s,t}, p_t) = p_s`.

use std::fmt;

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;

/// Below this rotation angle exp/log switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Log map refuses rotations this close to pi.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {angle} is within {NEAR_PI_MARGIN} of pi; log map is ill-conditioned")]
    AngleNearPi { angle: f64 },
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

/// Lie-algebra coordinates of a rigid motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub omega: Vec3,
    pub v: Vec3,
}

impl Twist {
    pub fn new(omega: Vec3, v: Vec3) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::new(Vec3::zeros(), Vec3::zeros())
    }

    pub fn from_slice(xi: &[f64; 6]) -> Self {
        Self::new(
            Vec3::new(xi[0], xi[1], xi[2]),
            Vec3::new(xi[3], xi[4], xi[5]),
        )
    }

    pub fn from_vector(xi: &Vec6) -> Self {
        Self::new(xi.fixed_rows::<3>(0).into(), xi.fixed_rows::<3>(3).into())
    }

    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

/// Rigid transform: `p -> rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Checked constructor; the rotation must be orthonormal with determinant 1.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Caller guarantees the rotation is valid.
    pub fn from_parts_unchecked(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        Self::exp(&Twist::new(axis * (angle / n), Vec3::zeros()))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::z(), angle)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .all(|x| x.is_finite())
        {
            return Err(GeometryError::InvalidPose("non-finite entry".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).amax();
        if err > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation not orthonormal (max deviation {err:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation determinant {det} != 1"
            )));
        }
        Ok(())
    }

    /// Projects the rotation back onto SO(3) (polar decomposition via SVD).
    pub fn orthonormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Self {
            rotation: r,
            translation: self.translation,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Composition with re-orthonormalization when the result drifts off SO(3).
    pub fn compose_checked(&self, other: &Pose) -> Pose {
        let p = self.compose(other);
        if p.validate().is_err() {
            p.orthonormalized()
        } else {
            p
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Rotation angle in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::InvalidPose(format!(
                "bottom row {bottom:?} != [0, 0, 0, 1]"
            )));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Row-major 4×4 entries.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self, GeometryError> {
        if v.len() != 16 {
            return Err(GeometryError::InvalidPose(format!(
                "expected 16 entries, got {}",
                v.len()
            )));
        }
        Self::from_matrix(&Matrix4::from_row_slice(v))
    }

    /// Space-separated row-major matrix, 17 significant digits per entry.
    pub fn format_row_major(&self) -> String {
        self.to_row_major()
            .iter()
            .map(|x| format_f64(*x))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Closed-form exponential map (Rodrigues rotation, V-matrix translation).
    pub fn exp(xi: &Twist) -> Pose {
        let theta = xi.omega.norm();
        let w = skew(&xi.omega);
        let w2 = w * w;
        let (a, b, c) = if theta < SMALL_ANGLE {
            let t2 = theta * theta;
            (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
        } else {
            let t2 = theta * theta;
            (
                theta.sin() / theta,
                one_minus_cos(theta) / t2,
                (theta - theta.sin()) / (t2 * theta),
            )
        };
        let rotation = Mat3::identity() + w * a + w2 * b;
        let v = Mat3::identity() + w * b + w2 * c;
        Pose {
            rotation,
            translation: v * xi.v,
        }
    }

    /// Principal-branch logarithm.
    pub fn log(&self) -> Result<Twist, GeometryError> {
        let omega = so3_log(&self.rotation)?;
        let v_inv = so3_left_jacobian_inv(&omega);
        Ok(Twist::new(omega, v_inv * self.translation))
    }

    /// Adjoint in `(omega, v)` ordering: `T exp(d) T^-1 = exp(Ad_T d)`.
    pub fn adjoint(&self) -> Mat6 {
        let mut ad = Mat6::zeros();
        let r = self.rotation;
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(skew(&self.translation) * r));
        ad
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.format_row_major())
    }
}

pub fn se3_exp(xi: &Twist) -> Pose {
    Pose::exp(xi)
}

pub fn se3_log(t: &Pose) -> Result<Twist, GeometryError> {
    t.log()
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(a: &Pose) -> Pose {
    a.inverse()
}

pub fn apply(a: &Pose, p: &Vec3) -> Vec3 {
    a.apply(p)
}

/// 17 significant digits.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn skew(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn one_minus_cos(theta: f64) -> f64 {
    let h = (0.5 * theta).sin();
    2.0 * h * h
}

fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

pub fn rotation_angle(r: &Mat3) -> f64 {
    let s = 0.5 * vee(&(r - r.transpose())).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

pub fn so3_log(r: &Mat3) -> Result<Vec3, GeometryError> {
    let theta = rotation_angle(r);
    if std::f64::consts::PI - theta < NEAR_PI_MARGIN {
        return Err(GeometryError::AngleNearPi { angle: theta });
    }
    let axis_sin = 0.5 * vee(&(r - r.transpose()));
    if theta < SMALL_ANGLE {
        // sin(theta)/theta ≈ 1 - theta²/6
        Ok(axis_sin * (1.0 + theta * theta / 6.0))
    } else {
        Ok(axis_sin * (theta / theta.sin()))
    }
}

/// Left Jacobian of SO(3); also the V matrix of the SE(3) exponential.
pub fn so3_left_jacobian(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let w = skew(omega);
    let (b, c) = if theta < 1e-4 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        (one_minus_cos(theta) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    Mat3::identity() + w * b + w * w * c
}

pub fn so3_left_jacobian_inv(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let w = skew(omega);
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * one_minus_cos(theta))) / (theta * theta)
    };
    Mat3::identity() - w * 0.5 + w * w * c
}

/// Coupling block of the SE(3) left Jacobian.
fn se3_q(omega: &Vec3, v: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let t2 = theta * theta;
    let p = skew(omega);
    let r = skew(v);
    let (a, b, c) = if theta < 1e-2 {
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, co) = (theta.sin(), theta.cos());
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * co - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * co) / (2.0 * t2 * t2 * theta),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * a + (p * pr + rp * p - prp * 3.0) * b + (prp * p + p * prp) * c
}

/// Left Jacobian of SE(3) in `(omega, v)` ordering.
pub fn se3_left_jacobian(xi: &Twist) -> Mat6 {
    let j = so3_left_jacobian(&xi.omega);
    let q = se3_q(&xi.omega, &xi.v);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    out
}

pub fn se3_left_jacobian_inv(xi: &Twist) -> Mat6 {
    let ji = so3_left_jacobian_inv(&xi.omega);
    let q = se3_q(&xi.omega, &xi.v);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-(ji * q * ji)));
    out
}

/// Inverse right Jacobian: `log(exp(xi) exp(d)) ≈ xi + J_r^-1(xi) d`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Mat6 {
    se3_left_jacobian_inv(&Twist::new(-xi.omega, -xi.v))
}

/// Translation distance and rotation angle (radians) between two poses.
pub fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
    let d = a.inverse().compose(b);
    ((a.translation - b.translation).norm(), d.rotation_angle())
}
