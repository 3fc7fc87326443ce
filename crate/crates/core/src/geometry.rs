//! Camera model, frames, rotations and the grasp representation.
//!
//! Grasp rotations follow the intrinsic Euler convention
//! `R = Rz(theta) * Rx(beta) * Ry(gamma)` with every angle in `[-pi/2, pi/2]`.
//! The columns of `R` are, in order, the jaw closing axis, the binormal and
//! the approach direction. A parallel gripper is symmetric under a half turn
//! about the approach axis, so a closing axis and its negation describe the
//! same physical grasp; constructors pick whichever sign has an in-range
//! decomposition.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Isometry3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{NgsError, Result};

const ANGLE_SLACK: f64 = 1e-12;

/// Pinhole intrinsics. Pixel `(u, v)` denotes the pixel centre at integer
/// coordinates, `u` along the image width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(NgsError::Config(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(NgsError::Config(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Focal length used for depth-adaptive patch sizing.
    pub fn focal(&self) -> f64 {
        self.fx
    }

    /// Camera-frame point on the ray through `(u, v)` at depth `z`.
    pub fn deproject_pixel(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Pixel coordinates and depth of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy, p.z)
    }

    /// Unnormalised ray direction through `(u, v)` whose z component is one,
    /// so ray parameters equal depths.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Colour and metric depth on a shared `height x width` grid (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct RGBDFrame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl RGBDFrame {
    /// Builds a frame, marking non-finite or non-positive depths invalid.
    pub fn new(width: usize, height: usize, rgb: Vec<[f64; 3]>, depth: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if rgb.len() != n || depth.len() != n {
            return Err(NgsError::Config(format!(
                "frame grids disagree: expected {n} pixels, rgb has {}, depth has {}",
                rgb.len(),
                depth.len()
            )));
        }
        let valid = depth.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        Ok(Self { width, height, rgb, depth, valid })
    }

    /// Depth-only frame with mid-grey colour.
    pub fn from_depth(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        Self::new(width, height, vec![[0.5; 3]; width * height], depth)
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn depth_at(&self, u: usize, v: usize) -> Option<f64> {
        let i = self.index(u, v);
        self.valid[i].then(|| self.depth[i])
    }
}

/// Camera-frame XYZ per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    pub xyz: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl PointMap {
    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn point(&self, u: usize, v: usize) -> Option<Vector3<f64>> {
        let i = self.index(u, v);
        self.valid[i].then(|| self.xyz[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }
}

/// Back-projects every valid pixel through the pinhole model.
pub fn deproject(frame: &RGBDFrame, k: &CameraIntrinsics) -> Result<PointMap> {
    if frame.width != k.width || frame.height != k.height {
        return Err(NgsError::Config(format!(
            "frame is {}x{} but intrinsics describe {}x{}",
            frame.width, frame.height, k.width, k.height
        )));
    }
    let mut xyz = Vec::with_capacity(frame.depth.len());
    for v in 0..frame.height {
        for u in 0..frame.width {
            let i = frame.index(u, v);
            if frame.valid[i] {
                xyz.push(k.deproject_pixel(u as f64, v as f64, frame.depth[i]));
            } else {
                xyz.push(Vector3::zeros());
            }
        }
    }
    Ok(PointMap { width: frame.width, height: frame.height, xyz, valid: frame.valid.clone() })
}

/// Euler angles of a grasp rotation, each in `[-pi/2, pi/2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerRotation {
    pub theta: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl EulerRotation {
    pub fn new(theta: f64, gamma: f64, beta: f64) -> Result<Self> {
        for (name, a) in [("theta", theta), ("gamma", gamma), ("beta", beta)] {
            if !(-FRAC_PI_2..=FRAC_PI_2).contains(&a) {
                return Err(NgsError::Domain(format!("{name}={a} outside [-pi/2, pi/2]")));
            }
        }
        Ok(Self { theta, gamma, beta })
    }

    pub fn identity() -> Self {
        Self { theta: 0.0, gamma: 0.0, beta: 0.0 }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        euler_to_matrix(self)
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `Rz(theta) * Rx(beta) * Ry(gamma)`.
pub fn euler_to_matrix(r: &EulerRotation) -> Matrix3<f64> {
    rot_z(r.theta) * rot_x(r.beta) * rot_y(r.gamma)
}

/// Inverse of [`euler_to_matrix`] on the canonical branch.
///
/// With `|beta| < pi/2` the bottom row is `(-cos b sin g, sin b, cos b cos g)`,
/// which fixes `beta` and `gamma`; `theta` follows from the middle column.
pub fn matrix_to_euler(m: &Matrix3<f64>) -> Result<EulerRotation> {
    let cos_beta = m[(2, 0)].hypot(m[(2, 2)]);
    if cos_beta < 1e-12 {
        return Err(NgsError::NonCanonical(format!(
            "gimbal-degenerate rotation (cos beta = {cos_beta:e})"
        )));
    }
    let beta = m[(2, 1)].atan2(cos_beta);
    let gamma = (-m[(2, 0)]).atan2(m[(2, 2)]);
    let theta = (-m[(0, 1)]).atan2(m[(1, 1)]);
    let canon = |name: &str, a: f64| -> Result<f64> {
        if a.abs() <= FRAC_PI_2 {
            Ok(a)
        } else if a.abs() <= FRAC_PI_2 + ANGLE_SLACK {
            Ok(a.clamp(-FRAC_PI_2, FRAC_PI_2))
        } else {
            Err(NgsError::NonCanonical(format!("{name}={a} outside [-pi/2, pi/2]")))
        }
    };
    Ok(EulerRotation { theta: canon("theta", theta)?, gamma: canon("gamma", gamma)?, beta })
}

/// Angle of the relative rotation `R1^T R2`.
pub fn geodesic_angle(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let rel = r1.transpose() * r2;
    ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

/// Geodesic angle modulo the gripper's half-turn symmetry about the approach axis.
pub fn symmetric_grasp_angle(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let flipped = r2 * rot_z(std::f64::consts::PI);
    geodesic_angle(r1, r2).min(geodesic_angle(r1, &flipped))
}

/// A 6-DoF parallel-jaw grasp in the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grasp {
    pub t: Vector3<f64>,
    pub rot: EulerRotation,
    pub width: f64,
    pub score: f64,
}

impl Grasp {
    pub fn matrix(&self) -> Matrix3<f64> {
        self.rot.matrix()
    }

    pub fn closing_axis(&self) -> Vector3<f64> {
        self.matrix().column(0).into_owned()
    }

    pub fn approach(&self) -> Vector3<f64> {
        self.matrix().column(2).into_owned()
    }

    /// Builds the grasp whose jaws close along `closing` and approach along
    /// the component of `approach_ref` orthogonal to the closing axis.
    /// Returns `None` when the two are parallel or no canonical Euler
    /// decomposition exists for either closing-axis sign.
    pub fn from_axes(
        t: Vector3<f64>,
        closing: &Vector3<f64>,
        approach_ref: &Vector3<f64>,
        width: f64,
        score: f64,
    ) -> Option<Self> {
        let c = closing.try_normalize(1e-12)?;
        let a = (approach_ref - c * c.dot(approach_ref)).try_normalize(1e-9)?;
        let rot = Matrix3::from_columns(&[c, a.cross(&c), a]);
        let rot = canonical_rotation(&rot)?;
        Some(Self { t, rot, width, score })
    }

    /// Applies a rigid motion to the grasp, re-canonicalising the rotation.
    pub fn transformed(&self, iso: &Isometry3<f64>) -> Option<Self> {
        let m = iso.rotation.to_rotation_matrix().into_inner() * self.matrix();
        let rot = canonical_rotation(&m)?;
        Some(Self { t: iso.transform_vector(&self.t) + iso.translation.vector, rot, ..*self })
    }
}

/// Euler angles for `m` or for its half-turn twin `m * Rz(pi)`.
pub fn canonical_rotation(m: &Matrix3<f64>) -> Option<EulerRotation> {
    matrix_to_euler(m)
        .ok()
        .or_else(|| matrix_to_euler(&(m * rot_z(std::f64::consts::PI))).ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 320.0, 180.0, 640, 360).unwrap()
    }

    #[test]
    fn deproject_examples() {
        let mut depth = vec![0.0; 640 * 360];
        depth[180 * 640 + 320] = 0.5;
        depth[180 * 640 + 600] = 0.6;
        let frame = RGBDFrame::from_depth(640, 360, depth).unwrap();
        let pm = deproject(&frame, &k()).unwrap();
        assert_eq!(pm.point(320, 180).unwrap(), Vector3::new(0.0, 0.0, 0.5));
        let p = pm.point(600, 180).unwrap();
        assert_relative_eq!(p.x, 280.0 * 0.6 / 600.0, epsilon = 1e-15);
        assert!(pm.point(0, 0).is_none());
        assert_eq!(pm.valid_count(), 2);
    }

    #[test]
    fn deproject_far_pixel_arithmetic() {
        // (920 - 320) * 0.6 / 600 = 0.6 on a widened sensor.
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 180.0, 1000, 360).unwrap();
        let p = k.deproject_pixel(920.0, 180.0, 0.6);
        assert_relative_eq!(p, Vector3::new(0.6, 0.0, 0.6), epsilon = 1e-15);
    }

    #[test]
    fn deproject_rejects_mismatched_frame() {
        let frame = RGBDFrame::from_depth(4, 4, vec![1.0; 16]).unwrap();
        assert!(matches!(deproject(&frame, &k()), Err(NgsError::Config(_))));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn projection_inverts_deprojection() {
        let k = k();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (u, v) = (rng.random_range(0.0..640.0), rng.random_range(0.0..360.0));
            let z = rng.random_range(0.1..3.0);
            let (pu, pv, pz) = k.project(&k.deproject_pixel(u, v, z));
            assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9 && (pz - z).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_examples() {
        assert_relative_eq!(euler_to_matrix(&EulerRotation::identity()), Matrix3::identity());
        let m = euler_to_matrix(&EulerRotation::new(FRAC_PI_2, 0.0, 0.0).unwrap());
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(m, expected, epsilon = 1e-15);
        let r = EulerRotation::new(0.3, -0.2, 0.4).unwrap();
        let back = matrix_to_euler(&euler_to_matrix(&r)).unwrap();
        assert_relative_eq!(back.theta, 0.3, epsilon = 1e-9);
        assert_relative_eq!(back.gamma, -0.2, epsilon = 1e-9);
        assert_relative_eq!(back.beta, 0.4, epsilon = 1e-9);
        assert_eq!(matrix_to_euler(&Matrix3::identity()).unwrap(), EulerRotation::identity());
    }

    #[test]
    fn near_degenerate_beta_recovered() {
        let beta = FRAC_PI_2 - 1e-9;
        let e = matrix_to_euler(&rot_x(beta)).unwrap();
        assert!((e.beta - beta).abs() < 1e-6);
    }

    #[test]
    fn degenerate_and_out_of_range_reported() {
        assert!(matches!(matrix_to_euler(&rot_x(FRAC_PI_2)), Err(NgsError::NonCanonical(_))));
        assert!(matches!(matrix_to_euler(&rot_z(2.5)), Err(NgsError::NonCanonical(_))));
        assert!(EulerRotation::new(1.6, 0.0, 0.0).is_err());
    }

    #[test]
    fn round_trip_and_composition_batteries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let r = EulerRotation::new(
                rng.random_range(-FRAC_PI_2..=FRAC_PI_2),
                rng.random_range(-FRAC_PI_2..=FRAC_PI_2),
                rng.random_range(-1.55..=1.55),
            )
            .unwrap();
            let m = euler_to_matrix(&r);
            assert!((m * m.transpose() - Matrix3::identity()).abs().max() < 1e-12);
            assert!((m.determinant() - 1.0).abs() < 1e-12);
            let back = euler_to_matrix(&matrix_to_euler(&m).unwrap());
            assert!((back - m).abs().max() < 1e-9);

            let dt = rng.random_range(-0.5..0.5);
            if (r.theta + dt).abs() <= FRAC_PI_2 {
                let shifted = EulerRotation { theta: r.theta + dt, ..r };
                assert!((euler_to_matrix(&shifted) - rot_z(dt) * m).abs().max() < 1e-9);
            }
        }
    }

    #[test]
    fn from_axes_builds_requested_frame() {
        let g = Grasp::from_axes(
            Vector3::zeros(),
            &Vector3::new(-1.0, 0.2, 0.0),
            &Vector3::z(),
            0.05,
            1.0,
        )
        .unwrap();
        let c = g.closing_axis();
        assert!((c.dot(&Vector3::new(-1.0, 0.2, 0.0).normalize()).abs() - 1.0).abs() < 1e-12);
        assert_relative_eq!(g.approach(), Vector3::z(), epsilon = 1e-12);
        assert!(Grasp::from_axes(Vector3::zeros(), &Vector3::z(), &Vector3::z(), 0.0, 0.0).is_none());
    }

    #[test]
    fn symmetric_angle_ignores_half_turn() {
        let r = rot_z(0.3) * rot_x(0.2);
        assert!(symmetric_grasp_angle(&r, &(r * rot_z(std::f64::consts::PI))) < 1e-7);
        assert!((geodesic_angle(&r, &(r * rot_z(0.25))) - 0.25).abs() < 1e-9);
    }
}
