//! Two-contact force-closure scoring, top-k precision and grasp coverage.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{NgsError, Result};
use crate::geometry::Grasp;
use crate::scene::{Scene, SurfaceHit};

pub const DEFAULT_MUS: [f64; 6] = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2];
pub const DEFAULT_TOP_K: usize = 50;
pub const DEFAULT_COVERAGE_DIST: f64 = 0.02;

const CONE_SLACK: f64 = 1e-12;

/// The two jaw contacts of a grasp, in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JawContacts {
    /// Contact reached along `+closing`, then along `-closing`.
    pub hits: [SurfaceHit; 2],
    pub axis: Vector3<f64>,
    pub span: f64,
}

/// Follows the closing axis outwards from the grasp centre in both
/// directions to where the jaws meet the surface. `None` when the centre
/// is in free space or a side never leaves the material.
pub fn jaw_contacts(g: &Grasp, scene: &Scene) -> Option<JawContacts> {
    let t = scene.camera.to_world(&g.t);
    let axis = scene.camera.vector_to_world(&g.closing_axis()).normalize();
    let pos = scene.exit_from_inside(&t, &axis)?;
    let neg = scene.exit_from_inside(&t, &-axis)?;
    Some(JawContacts { hits: [pos, neg], axis, span: pos.t + neg.t })
}

/// Largest angle between a contact normal and its jaw's pushing direction.
pub fn contact_angle(c: &JawContacts) -> f64 {
    let a = |n: &Vector3<f64>, d: &Vector3<f64>| n.dot(d).clamp(-1.0, 1.0).acos();
    a(&c.hits[0].normal, &c.axis).max(a(&c.hits[1].normal, &-c.axis))
}

/// True iff both contacts exist, both outward normals lie within
/// `atan(mu)` of the closing axis and the span fits the gripper.
pub fn force_closure(g: &Grasp, scene: &Scene, mu: f64, w_gripper: f64) -> bool {
    if !(mu > 0.0) {
        return false;
    }
    match jaw_contacts(g, scene) {
        Some(c) => c.span <= w_gripper && contact_angle(&c) <= mu.atan() + CONE_SLACK,
        None => false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopkReport {
    /// `(mu, AP_mu)` in the order requested.
    pub ap_per_mu: Vec<(f64, f64)>,
    pub overall: f64,
    pub evaluated: usize,
}

/// Mean of prefix precisions over the first `min(k, n)` grasps.
pub fn average_precision(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (j, &ok) in flags.iter().enumerate() {
        hits += ok as usize;
        sum += hits as f64 / (j + 1) as f64;
    }
    sum / flags.len() as f64
}

/// AP for each friction coefficient and their mean. Grasps are taken in
/// the order given, which should be score-sorted after grasp-NMS.
pub fn evaluate_topk(grasps: &[Grasp], scene: &Scene, mus: &[f64], k: usize, w_gripper: f64) -> Result<TopkReport> {
    if mus.iter().any(|&m| !(m > 0.0)) {
        return Err(NgsError::Domain("friction coefficients must be positive".into()));
    }
    let top = &grasps[..grasps.len().min(k)];
    let contacts: Vec<Option<(f64, f64)>> =
        top.iter().map(|g| jaw_contacts(g, scene).map(|c| (c.span, contact_angle(&c)))).collect();
    let ap_per_mu: Vec<(f64, f64)> = mus
        .iter()
        .map(|&mu| {
            let flags: Vec<bool> = contacts
                .iter()
                .map(|c| c.is_some_and(|(span, angle)| span <= w_gripper && angle <= mu.atan() + CONE_SLACK))
                .collect();
            (mu, average_precision(&flags))
        })
        .collect();
    let overall = if ap_per_mu.is_empty() { 0.0 } else { ap_per_mu.iter().map(|p| p.1).sum::<f64>() / ap_per_mu.len() as f64 };
    Ok(TopkReport { ap_per_mu, overall, evaluated: top.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub fraction: f64,
    /// Set when there was no ground truth to cover.
    pub empty_gt: bool,
}

/// Fraction of ground-truth grasps with a prediction whose centre lies
/// within `dist_thresh`.
pub fn coverage(pred: &[Grasp], gt: &[Grasp], dist_thresh: f64) -> Coverage {
    if gt.is_empty() {
        return Coverage { fraction: 1.0, empty_gt: true };
    }
    let covered = gt.iter().filter(|g| pred.iter().any(|p| p.t.metric_distance(&g.t) < dist_thresh)).count();
    Coverage { fraction: covered as f64 / gt.len() as f64, empty_gt: false }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_per_mu: BTreeMap<String, f64>,
    pub overall: f64,
    pub coverage: f64,
    pub coverage_empty_gt: bool,
}

impl EvalReport {
    pub fn new(topk: &TopkReport, cov: Coverage) -> Self {
        Self {
            ap_per_mu: topk.ap_per_mu.iter().map(|(mu, ap)| (format!("{mu:.2}"), *ap)).collect(),
            overall: topk.overall,
            coverage: cov.fraction,
            coverage_empty_gt: cov.empty_gt,
        }
    }
}

/// AP-versus-friction table with a `mu,ap` header.
pub fn write_ap_csv<W: Write>(out: &mut W, topk: &TopkReport) -> Result<()> {
    writeln!(out, "mu,ap")?;
    for (mu, ap) in &topk.ap_per_mu {
        writeln!(out, "{mu},{ap}")?;
    }
    Ok(())
}
