//! Analytic regional grasp function: antipodal point pairs inside a
//! normalized patch, encoded as a rotation heatmap.

use std::f64::consts::FRAC_PI_2;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::normals::{patch_normals, SurfaceOracle};
use super::PredictorParams;
use crate::codec::{encode_scored, nearest_anchor, AnchorSet, RotationHeatmap};
use crate::geometry::{EulerRotation, Grasp};
use crate::ngs::{denormalize_grasp, NormalizedGrasp, NormalizedPatch, GRASP_BALL_RADIUS};

struct Candidate {
    grasp: NormalizedGrasp,
    cell: usize,
}

/// Samples antipodal pairs and encodes the best one per heatmap cell.
///
/// A pair `(p1, p2)` qualifies when it is no wider than the gripper, its
/// midpoint lies strictly inside the grasp ball, and both normals lie
/// within `atan(mu)` of the closing axis after the axis has been snapped
/// to the `(gamma, beta)` anchors the heatmap can express. The approach
/// direction is the camera optical axis projected orthogonal to the
/// closing axis, or along the bisector of the two normals when that fits
/// better. With an oracle that knows the contacts, each cell's
/// winner must also pass the exact two-contact test.
pub fn predict_antipodal(
    patch: &NormalizedPatch,
    params: &PredictorParams,
    anchors: &AnchorSet,
    oracle: Option<&dyn SurfaceOracle>,
) -> RotationHeatmap {
    let empty = RotationHeatmap::zeros(anchors);
    if patch.valid_count() < 2 {
        return empty;
    }
    let max_width = params.w_gripper / patch.ctx.w_ref;
    let cone = params.friction_mu.atan();
    let cos_cone = cone.cos();
    // A midpoint inside the ball and a half-span within the gripper bound
    // how far either point can sit from the centre.
    let reach = GRASP_BALL_RADIUS + max_width / 2.0;

    let normals = patch_normals(patch, oracle);
    let mut pool: Vec<(Vector3<f64>, Vector3<f64>)> = (0..patch.rgbxyz.len())
        .filter_map(|i| {
            let n = normals[i]?;
            let p = patch.xyz(i);
            (p.norm() < reach).then_some((p, n))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    pool.shuffle(&mut rng);

    let mut candidates = Vec::new();
    let mut budget = params.max_pairs;
    'outer: for i in 0..pool.len() {
        let (p1, n1) = pool[i];
        for &(p2, n2) in &pool[i + 1..] {
            if budget == 0 {
                break 'outer;
            }
            budget -= 1;
            // Necessary condition: the normals must roughly oppose.
            if n1.dot(&n2) > -(2.0 * cone).cos() + 1e-12 {
                continue;
            }
            let mid = (p1 + p2) * 0.5;
            if mid.norm() >= GRASP_BALL_RADIUS {
                continue;
            }
            let diff = p2 - p1;
            let width = diff.norm();
            if width > max_width || width < 1e-12 {
                continue;
            }
            let d = diff / width;
            if -n1.dot(&d) < cos_cone || n2.dot(&d) < cos_cone {
                continue;
            }
            // The normal bisector is free of the pixel-grid skew in `d`.
            let bisector = (n2 - n1).try_normalize(1e-12).filter(|b| b.dot(&d) > cos_cone);
            let best = [Some(d), bisector]
                .into_iter()
                .flatten()
                .filter_map(|axis| snap_candidate(mid, &axis, diff.dot(&axis), &n1, &n2, cone, anchors))
                .max_by(|a, b| a.grasp.score.total_cmp(&b.grasp.score));
            if let Some(c) = best {
                candidates.push(c);
            }
        }
    }
    if candidates.is_empty() {
        return empty;
    }
    // Best candidate per cell; equal scores keep the earlier candidate.
    candidates.sort_by(|a, b| b.grasp.score.total_cmp(&a.grasp.score));
    let mut taken = vec![false; anchors.cells()];
    let mut winners = Vec::new();
    for c in candidates {
        if taken[c.cell] {
            continue;
        }
        if let Some(o) = oracle {
            let g = denormalize_grasp(&c.grasp, &patch.ctx);
            if o.closes(&g, params.friction_mu, params.w_gripper) == Some(false) {
                continue;
            }
        }
        taken[c.cell] = true;
        winners.push(c.grasp);
    }
    encode_scored(&winners, anchors)
}

/// Builds the grasp for a pair and re-checks the friction cone against the
/// anchor-snapped closing axis. The score falls linearly from 1 for
/// perfectly opposed normals to 0 at a right angle.
fn snap_candidate(
    mid: Vector3<f64>,
    d: &Vector3<f64>,
    width: f64,
    n1: &Vector3<f64>,
    n2: &Vector3<f64>,
    cone: f64,
    anchors: &AnchorSet,
) -> Option<Candidate> {
    let g = Grasp::from_axes(mid, d, &Vector3::z(), width, 0.0)?;
    let gi = nearest_anchor(&anchors.gammas, g.rot.gamma);
    let bi = nearest_anchor(&anchors.betas, g.rot.beta);
    let rot = EulerRotation { theta: g.rot.theta, gamma: anchors.gammas[gi], beta: anchors.betas[bi] };
    let snapped = rot.matrix().column(0).into_owned();
    let axis = if snapped.dot(d) >= 0.0 { snapped } else { -snapped };
    let a1 = (-n1.dot(&axis)).clamp(-1.0, 1.0).acos();
    let a2 = n2.dot(&axis).clamp(-1.0, 1.0).acos();
    let worst = a1.max(a2);
    if worst > cone {
        return None;
    }
    Some(Candidate {
        grasp: NormalizedGrasp { t_star: mid, rot, w_star: width, score: 1.0 - worst / FRAC_PI_2 },
        cell: gi * anchors.betas.len() + bi,
    })
}
