//! Surface normals for patch points: exact ones from the simulated scene or
//! a local plane fit on the patch grid.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::evaluator::force_closure;
use crate::geometry::Grasp;
use crate::ngs::NormalizedPatch;
use crate::scene::Scene;

/// Geometry knowledge a predictor may consult. Points, normals and grasps
/// are in the camera frame.
pub trait SurfaceOracle: Sync {
    /// Outward unit normal of the surface through `p`.
    fn normal(&self, p: &Vector3<f64>) -> Option<Vector3<f64>>;

    /// Exact two-contact test when the geometry is known.
    fn closes(&self, _g: &Grasp, _mu: f64, _w_gripper: f64) -> Option<bool> {
        None
    }
}

/// Analytic normals and contacts from a simulated scene.
pub struct SceneSurface<'a> {
    pub scene: &'a Scene,
}

impl SurfaceOracle for SceneSurface<'_> {
    fn normal(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let cam = &self.scene.camera;
        let n = self.scene.surface_normal(&cam.to_world(p));
        Some(cam.vector_to_camera(&n))
    }

    fn closes(&self, g: &Grasp, mu: f64, w_gripper: f64) -> Option<bool> {
        Some(force_closure(g, self.scene, mu, w_gripper))
    }
}

/// Normals from a closure, without contact knowledge.
pub struct FnNormals<F>(pub F);

impl<F> SurfaceOracle for FnNormals<F>
where
    F: Fn(&Vector3<f64>) -> Option<Vector3<f64>> + Sync,
{
    fn normal(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        (self.0)(p)
    }
}

const FIT_RADIUS: usize = 2;
const FIT_MIN_POINTS: usize = 5;

/// Least-squares plane normal over the 5x5 valid neighbourhood of each
/// valid pixel, oriented towards the camera. Pixels with too few valid
/// neighbours or a degenerate spread get `None`.
pub fn plane_fit_normals(patch: &NormalizedPatch) -> Vec<Option<Vector3<f64>>> {
    let s = patch.size;
    let camera = patch.ctx.normalize_point(&Vector3::zeros());
    let mut out = vec![None; s * s];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            if !patch.valid[i] {
                continue;
            }
            let mut pts = Vec::with_capacity(25);
            for yy in y.saturating_sub(FIT_RADIUS)..(y + FIT_RADIUS + 1).min(s) {
                for xx in x.saturating_sub(FIT_RADIUS)..(x + FIT_RADIUS + 1).min(s) {
                    let j = yy * s + xx;
                    if patch.valid[j] {
                        pts.push(patch.xyz(j));
                    }
                }
            }
            if pts.len() < FIT_MIN_POINTS {
                continue;
            }
            let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
            let cov = pts.iter().fold(Matrix3::zeros(), |acc, p| {
                let d = p - mean;
                acc + d * d.transpose()
            });
            let eig = SymmetricEigen::new(cov);
            let mut order = [0, 1, 2];
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            if eig.eigenvalues[order[1]] <= 1e-18 {
                continue;
            }
            let mut n: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
            if n.dot(&(camera - patch.xyz(i))) < 0.0 {
                n = -n;
            }
            out[i] = n.try_normalize(1e-12);
        }
    }
    out
}

/// Normals for every pixel of a patch, from the oracle when given.
pub fn patch_normals(patch: &NormalizedPatch, oracle: Option<&dyn SurfaceOracle>) -> Vec<Option<Vector3<f64>>> {
    match oracle {
        Some(o) => patch
            .valid
            .iter()
            .enumerate()
            .map(|(i, &ok)| {
                if !ok {
                    return None;
                }
                o.normal(&patch.ctx.denormalize_point(&patch.xyz(i))).and_then(|n| n.try_normalize(1e-12))
            })
            .collect(),
        None => plane_fit_normals(patch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngs::NGSContext;

    fn grid_patch(s: usize, f: impl Fn(f64, f64) -> f64) -> NormalizedPatch {
        let ctx = NGSContext::new(Vector3::new(0.0, 0.0, 0.5), 0.2).unwrap();
        let mut rgbxyz = Vec::new();
        for y in 0..s {
            for x in 0..s {
                let (u, v) = ((x as f64 - s as f64 / 2.0) * 0.02, (y as f64 - s as f64 / 2.0) * 0.02);
                rgbxyz.push([0.5, 0.5, 0.5, u, v, f(u, v)]);
            }
        }
        NormalizedPatch { size: s, rgbxyz, valid: vec![true; s * s], ctx }
    }

    #[test]
    fn plane_fit_recovers_tilted_plane_facing_camera() {
        let patch = grid_patch(16, |u, v| 0.3 * u - 0.2 * v);
        let expect = Vector3::new(0.3, -0.2, -1.0).normalize();
        for n in plane_fit_normals(&patch) {
            assert!((n.unwrap() - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn isolated_pixels_get_no_normal() {
        let mut patch = grid_patch(8, |_, _| 0.0);
        patch.valid = vec![false; 64];
        patch.valid[27] = true;
        patch.valid[28] = true;
        assert!(plane_fit_normals(&patch).iter().all(Option::is_none));
    }
}
