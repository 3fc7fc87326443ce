//! The normalized grasp space: regional coordinates centred on a patch
//! centre and scaled by the receptive field.
//!
//! A camera-frame point `p` maps to `(p - center) / w_ref`; grasp rotations
//! are unchanged and widths scale by `1 / w_ref`. Only grasps whose
//! normalized centre lies strictly inside the ball of radius
//! [`GRASP_BALL_RADIUS`] belong to a patch.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{NgsError, Result};
use crate::geometry::{EulerRotation, Grasp};
use crate::patch::RawPatch;

/// Normalized radius of the region a patch is responsible for.
pub const GRASP_BALL_RADIUS: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NGSContext {
    pub center: Vector3<f64>,
    pub w_ref: f64,
}

impl NGSContext {
    pub fn new(center: Vector3<f64>, w_ref: f64) -> Result<Self> {
        if !(w_ref > 0.0 && w_ref.is_finite()) {
            return Err(NgsError::Domain(format!("receptive field must be positive, got {w_ref}")));
        }
        Ok(Self { center, w_ref })
    }

    pub fn normalize_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.center) * self.w_ref.recip()
    }

    pub fn denormalize_point(&self, q: &Vector3<f64>) -> Vector3<f64> {
        q * self.w_ref + self.center
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedPatch {
    pub size: usize,
    /// RGB in `[0, 1]` followed by normalized XYZ.
    pub rgbxyz: Vec<[f64; 6]>,
    pub valid: Vec<bool>,
    pub ctx: NGSContext,
}

impl NormalizedPatch {
    pub fn xyz(&self, i: usize) -> Vector3<f64> {
        let p = &self.rgbxyz[i];
        Vector3::new(p[3], p[4], p[5])
    }

    pub fn center_index(&self) -> usize {
        let c = self.size / 2;
        c * self.size + c
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedGrasp {
    pub t_star: Vector3<f64>,
    pub rot: EulerRotation,
    pub w_star: f64,
    pub score: f64,
}

/// Re-expresses a raw patch's XYZ about `ctx`. Invalid pixels keep their sentinel.
pub fn normalize_patch(raw: &RawPatch, ctx: &NGSContext) -> Result<NormalizedPatch> {
    if !(ctx.w_ref > 0.0) {
        return Err(NgsError::Domain(format!("receptive field must be positive, got {}", ctx.w_ref)));
    }
    let rgbxyz = raw
        .rgbxyz
        .iter()
        .zip(&raw.valid)
        .map(|(px, &ok)| {
            if !ok {
                return *px;
            }
            let q = ctx.normalize_point(&Vector3::new(px[3], px[4], px[5]));
            [px[0], px[1], px[2], q.x, q.y, q.z]
        })
        .collect();
    Ok(NormalizedPatch { size: raw.size(), rgbxyz, valid: raw.valid.clone(), ctx: *ctx })
}

pub fn normalize_grasp(g: &Grasp, ctx: &NGSContext) -> NormalizedGrasp {
    NormalizedGrasp { t_star: ctx.normalize_point(&g.t), rot: g.rot, w_star: g.width * ctx.w_ref.recip(), score: g.score }
}

/// Normalizes every grasp and keeps those strictly inside the grasp ball.
pub fn normalize_grasps(grasps: &[Grasp], ctx: &NGSContext) -> Vec<NormalizedGrasp> {
    grasps
        .iter()
        .map(|g| normalize_grasp(g, ctx))
        .filter(|g| g.t_star.norm() < GRASP_BALL_RADIUS)
        .collect()
}

pub fn denormalize_grasp(g: &NormalizedGrasp, ctx: &NGSContext) -> Grasp {
    Grasp { t: ctx.denormalize_point(&g.t_star), rot: g.rot, width: g.w_star * ctx.w_ref, score: g.score }
}

/// Log-uniform draw from `[w_ref / 2, 2 w_ref]`.
pub fn randomize_scale<R: Rng + ?Sized>(w_ref: f64, rng: &mut R) -> Result<f64> {
    if !(w_ref > 0.0) {
        return Err(NgsError::Domain(format!("receptive field must be positive, got {w_ref}")));
    }
    let ln2 = std::f64::consts::LN_2;
    let s = rng.random_range(-ln2..=ln2);
    Ok((w_ref * s.exp()).clamp(w_ref / 2.0, 2.0 * w_ref))
}
