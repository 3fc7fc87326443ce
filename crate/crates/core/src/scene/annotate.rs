//! Analytic antipodal ground truth for each primitive.

use std::f64::consts::PI;

use nalgebra::Vector3;

use super::{Primitive, Scene, Shape};
use crate::geometry::Grasp;

const SPHERE_AZIMUTHS: usize = 32;
const SPHERE_ELEVATIONS: [f64; 9] = [-0.4, -0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.3, 0.4];
const CYLINDER_AZIMUTHS: usize = 24;
const CYLINDER_STEP: f64 = 0.005;

/// Ground-truth grasps in the camera frame of `scene.camera`.
///
/// Spheres get diametric grasps over a fan of camera-relative closing
/// directions, cylinders get diametric grasps perpendicular to the axis at
/// regular stations along it, and boxes get one centre grasp per face pair
/// whose span fits the gripper. Grasps whose jaws would not both land on
/// the primitive itself (for example closing into the table) are dropped.
pub fn annotate_grasps(scene: &Scene, w_gripper: f64) -> Vec<Grasp> {
    let mut out = Vec::new();
    for (id, prim) in scene.primitives.iter().enumerate() {
        for (t_world, axis_world, width) in candidates(prim, scene, w_gripper) {
            if !jaws_land_on(scene, id, &t_world, &axis_world, width) {
                continue;
            }
            let t = scene.camera.to_camera(&t_world);
            let axis = scene.camera.vector_to_camera(&axis_world);
            if let Some(g) = Grasp::from_axes(t, &axis, &Vector3::z(), width, 1.0) {
                out.push(g);
            }
        }
    }
    out
}

/// `(centre, closing axis, width)` triples in the world frame.
fn candidates(prim: &Primitive, scene: &Scene, w_gripper: f64) -> Vec<(Vector3<f64>, Vector3<f64>, f64)> {
    let c = prim.pose.translation.vector;
    let rot = prim.pose.rotation;
    match prim.shape {
        Shape::Sphere { radius } => {
            if 2.0 * radius > w_gripper {
                return Vec::new();
            }
            let mut out = Vec::new();
            for &e in &SPHERE_ELEVATIONS {
                for k in 0..SPHERE_AZIMUTHS {
                    let a = k as f64 * PI / SPHERE_AZIMUTHS as f64;
                    let cam_axis = Vector3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin());
                    out.push((c, scene.camera.vector_to_world(&cam_axis), 2.0 * radius));
                }
            }
            out
        }
        Shape::Cylinder { radius, height } => {
            if 2.0 * radius > w_gripper {
                return Vec::new();
            }
            let stations = ((height / CYLINDER_STEP).floor() as usize).max(1);
            let mut out = Vec::new();
            for j in 0..stations {
                let s = -height / 2.0 + (j as f64 + 0.5) * height / stations as f64;
                let t = c + rot * Vector3::new(0.0, 0.0, s);
                for k in 0..CYLINDER_AZIMUTHS {
                    let a = k as f64 * PI / CYLINDER_AZIMUTHS as f64;
                    out.push((t, rot * Vector3::new(a.cos(), a.sin(), 0.0), 2.0 * radius));
                }
            }
            out
        }
        Shape::Box { size } => (0..3)
            .filter(|&i| size[i] <= w_gripper)
            .map(|i| (c, rot * Vector3::ith(i, 1.0), size[i]))
            .collect(),
    }
}

/// Both jaw contacts, found by leaving the material along `+-axis`, lie on
/// primitive `id` at half the span from the centre.
fn jaws_land_on(scene: &Scene, id: usize, t: &Vector3<f64>, axis: &Vector3<f64>, width: f64) -> bool {
    [*axis, -axis].iter().all(|d| {
        scene
            .exit_from_inside(t, d)
            .is_some_and(|hit| hit.id == Some(id) && (hit.t - width / 2.0).abs() < 1e-9)
    })
}
