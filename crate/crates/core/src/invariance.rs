//! Property battery for the normalized grasp space: translation and scale
//! invariance, and equivariance under rotations about the optical axis.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{matrix_to_euler, rot_z, EulerRotation, Grasp};
use crate::ngs::{normalize_grasps, normalize_patch, NGSContext, NormalizedGrasp, NormalizedPatch};
use crate::patch::{PatchSpec, RawPatch};

pub const SCALE_FACTORS: [f64; 4] = [0.25, 0.5, 2.0, 4.0];
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

/// A random camera-frame patch with its context and some grasps around it.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub raw: RawPatch,
    pub ctx: NGSContext,
    pub grasps: Vec<Grasp>,
}

/// Random trial: a bumpy surface about 0.3-1.5 m away with a few invalid
/// pixels. Grasp centres avoid a thin shell around the grasp-ball boundary
/// so rounding cannot move a grasp across it.
pub fn random_trial(rng: &mut impl Rng, size: usize) -> Result<Trial> {
    let w_ref = rng.random_range(0.05..0.4);
    let center = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.3..1.5));
    let step = w_ref / size as f64;
    let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let half = (size / 2) as f64;
    let mut rgbxyz = Vec::with_capacity(size * size);
    let mut valid = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = ((x as f64 - half) * step, (y as f64 - half) * step);
            let dz = 0.2 * (a * dx + b * dy) + rng.random_range(-0.01..0.01) * w_ref;
            let rgb = [rng.random(), rng.random(), rng.random()];
            let p = center + Vector3::new(dx, dy, dz);
            let ok = (x, y) == (size / 2, size / 2) || rng.random_bool(0.95);
            let p = if ok { p } else { Vector3::zeros() };
            rgbxyz.push([rgb[0], rgb[1], rgb[2], p.x, p.y, p.z]);
            valid.push(ok);
        }
    }
    // Centre pixel carries the patch centre exactly.
    let c = (size / 2) * size + size / 2;
    rgbxyz[c][3..].copy_from_slice(center.as_slice());
    let spec = PatchSpec::new((0.0, 0.0), center, size as f64, size)?;
    let ctx = NGSContext::new(center, w_ref)?;
    let grasps = (0..rng.random_range(1..8))
        .map(|_| {
            let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .try_normalize(1e-9)
                .unwrap_or_else(Vector3::x);
            let r = if rng.random_bool(0.7) { rng.random_range(0.0..0.09) } else { rng.random_range(0.11..0.3) };
            Grasp {
                t: center + dir * (r * w_ref),
                rot: EulerRotation {
                    theta: rng.random_range(-1.2..1.2),
                    gamma: rng.random_range(-1.2..1.2),
                    beta: rng.random_range(-1.2..1.2),
                },
                width: rng.random_range(0.0..0.5) * w_ref,
                score: rng.random(),
            }
        })
        .collect();
    Ok(Trial { raw: RawPatch { rgbxyz, valid, spec }, ctx, grasps })
}

/// Applies `p -> f(p)` to every valid point and the centre.
fn map_trial(t: &Trial, w_ref: f64, f: impl Fn(&Vector3<f64>) -> Vector3<f64>, grasp: impl Fn(&Grasp) -> Grasp) -> Result<Trial> {
    let mut raw = t.raw.clone();
    for (px, &ok) in raw.rgbxyz.iter_mut().zip(&raw.valid) {
        if ok {
            let q = f(&Vector3::new(px[3], px[4], px[5]));
            px[3..].copy_from_slice(q.as_slice());
        }
    }
    let center = f(&t.ctx.center);
    raw.spec.center_3d = center;
    Ok(Trial { raw, ctx: NGSContext::new(center, w_ref)?, grasps: t.grasps.iter().map(grasp).collect() })
}

fn normalized(t: &Trial) -> Result<(NormalizedPatch, Vec<NormalizedGrasp>)> {
    Ok((normalize_patch(&t.raw, &t.ctx)?, normalize_grasps(&t.grasps, &t.ctx)))
}

/// Largest elementwise gap between two normalized patches and grasp sets.
/// Differing grasp counts or validity masks count as infinite.
fn discrepancy(a: &(NormalizedPatch, Vec<NormalizedGrasp>), b: &(NormalizedPatch, Vec<NormalizedGrasp>)) -> f64 {
    if a.0.valid != b.0.valid || a.1.len() != b.1.len() {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for ((pa, pb), &ok) in a.0.rgbxyz.iter().zip(&b.0.rgbxyz).zip(&a.0.valid) {
        if ok {
            for c in 0..6 {
                worst = worst.max((pa[c] - pb[c]).abs());
            }
        }
    }
    for (ga, gb) in a.1.iter().zip(&b.1) {
        worst = worst
            .max((ga.t_star - gb.t_star).amax())
            .max((ga.rot.matrix() - gb.rot.matrix()).amax())
            .max((ga.w_star - gb.w_star).abs());
    }
    worst
}

pub fn translation_discrepancy(t: &Trial, dt: &Vector3<f64>) -> Result<f64> {
    let moved = map_trial(t, t.ctx.w_ref, |p| p + dt, |g| Grasp { t: g.t + dt, ..*g })?;
    Ok(discrepancy(&normalized(t)?, &normalized(&moved)?))
}

pub fn scale_discrepancy(t: &Trial, a: f64) -> Result<f64> {
    let scaled = map_trial(t, a * t.ctx.w_ref, |p| p * a, |g| Grasp { t: g.t * a, width: g.width * a, ..*g })?;
    Ok(discrepancy(&normalized(t)?, &normalized(&scaled)?))
}

/// Rotates points and grasps by `Rz(dtheta)` about the patch centre. Returns
/// the largest gap between each rotated normalized grasp's matrix and
/// `Rz(dtheta) R*`, its Euler angles against `(theta + dtheta, gamma, beta)`,
/// and its centre against the rotated normalized centre; or `None` when some
/// grasp's theta would leave `[-pi/2, pi/2]`.
pub fn rotation_discrepancy(t: &Trial, dtheta: f64) -> Result<Option<f64>> {
    if t.grasps.iter().any(|g| (g.rot.theta + dtheta).abs() > FRAC_PI_2) {
        return Ok(None);
    }
    let rz: Matrix3<f64> = rot_z(dtheta);
    let c = t.ctx.center;
    let mut rotated_grasps = Vec::with_capacity(t.grasps.len());
    for g in &t.grasps {
        let rot = matrix_to_euler(&(rz * g.rot.matrix()))?;
        rotated_grasps.push(Grasp { t: c + rz * (g.t - c), rot, ..*g });
    }
    let rotated = Trial { grasps: rotated_grasps, ..map_trial(t, t.ctx.w_ref, |p| c + rz * (p - c), |g| *g)? };
    let (pa, ga) = normalized(t)?;
    let (pb, gb) = normalized(&rotated)?;
    if ga.len() != gb.len() {
        return Ok(Some(f64::INFINITY));
    }
    let mut worst = 0.0f64;
    for ((qa, qb), &ok) in pa.rgbxyz.iter().zip(&pb.rgbxyz).zip(&pa.valid) {
        if ok {
            let ra = rz * Vector3::new(qa[3], qa[4], qa[5]);
            worst = worst.max((ra - Vector3::new(qb[3], qb[4], qb[5])).amax());
        }
    }
    for (a, b) in ga.iter().zip(&gb) {
        worst = worst
            .max((rz * a.rot.matrix() - b.rot.matrix()).amax())
            .max((a.rot.theta + dtheta - b.rot.theta).abs())
            .max((a.rot.gamma - b.rot.gamma).abs())
            .max((a.rot.beta - b.rot.beta).abs())
            .max((rz * a.t_star - b.t_star).amax())
            .max((a.w_star - b.w_star).abs());
    }
    Ok(Some(worst))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub trials: usize,
    pub translation_max: f64,
    /// `(a, max discrepancy)` per scale factor.
    pub scale_max: Vec<(f64, f64)>,
    pub rotation_draws: usize,
    pub rotation_max: f64,
    /// Rotation draws discarded because theta would wrap.
    pub wraparound_skipped: usize,
    pub tolerance: f64,
}

impl InvarianceReport {
    pub fn translation_ok(&self) -> bool {
        self.translation_max <= self.tolerance
    }

    pub fn scale_ok(&self) -> bool {
        self.scale_max.iter().all(|&(_, d)| d <= self.tolerance)
    }

    pub fn rotation_ok(&self) -> bool {
        self.rotation_max <= self.tolerance
    }

    pub fn passed(&self) -> bool {
        self.translation_ok() && self.scale_ok() && self.rotation_ok()
    }
}

/// Runs `trials` random trials. Each gets one random translation, every
/// scale factor and rotation draws until one keeps all thetas in range.
pub fn run_invariance_suite(trials: usize, seed: u64, patch_size: usize) -> Result<InvarianceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = InvarianceReport {
        trials,
        translation_max: 0.0,
        scale_max: SCALE_FACTORS.iter().map(|&a| (a, 0.0)).collect(),
        rotation_draws: 0,
        rotation_max: 0.0,
        wraparound_skipped: 0,
        tolerance: DEFAULT_TOLERANCE,
    };
    for _ in 0..trials {
        let t = random_trial(&mut rng, patch_size)?;
        let dt = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.2..1.0));
        report.translation_max = report.translation_max.max(translation_discrepancy(&t, &dt)?);
        for (a, worst) in report.scale_max.iter_mut() {
            *worst = worst.max(scale_discrepancy(&t, *a)?);
        }
        loop {
            let dtheta = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
            match rotation_discrepancy(&t, dtheta)? {
                Some(d) => {
                    report.rotation_draws += 1;
                    report.rotation_max = report.rotation_max.max(d);
                    break;
                }
                None => report.wraparound_skipped += 1,
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_battery_passes_and_is_deterministic() {
        let r = run_invariance_suite(20, 5, 16).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.rotation_draws, 20);
        assert_eq!(r, run_invariance_suite(20, 5, 16).unwrap());
    }

    #[test]
    fn wraparound_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = random_trial(&mut rng, 8).unwrap();
        t.grasps[0].rot.theta = 1.4;
        assert_eq!(rotation_discrepancy(&t, 0.5).unwrap(), None);
    }

    #[test]
    fn broken_normalization_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_trial(&mut rng, 8).unwrap();
        // Scaling points without scaling the receptive field must show up.
        let wrong = map_trial(&t, t.ctx.w_ref, |p| p * 2.0, |g| *g).unwrap();
        assert!(discrepancy(&normalized(&t).unwrap(), &normalized(&wrong).unwrap()) > 1e-3);
    }
}
