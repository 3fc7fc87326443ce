//! Analytic table-top worlds used for rendering, annotation and evaluation.
//!
//! The world frame has `+z` up and the table occupies the half-space
//! `z <= table_z`. Primitives carry a world pose; the camera rig carries
//! the world-from-camera pose. Grasps exchanged with the rest of the crate
//! are expressed in the rig's camera frame.

mod annotate;
mod render;

pub use annotate::annotate_grasps;
pub use render::{render, ray_sphere_depth, SurfaceHit};

use std::path::Path;

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{NgsError, Result};
use crate::geometry::{CameraIntrinsics, Grasp};
use crate::patch::TablePlane;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Full side lengths along the local axes.
    Box { size: [f64; 3] },
    /// Axis along local `z`, centred on the pose origin.
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

impl Shape {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Box { size } => size.iter().all(|&s| s > 0.0),
            Shape::Cylinder { radius, height } => radius > 0.0 && height > 0.0,
            Shape::Sphere { radius } => radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(NgsError::Config(format!("primitive dimensions must be positive: {self:?}")))
        }
    }

    fn scaled(&self, a: f64) -> Self {
        match *self {
            Shape::Box { size } => Shape::Box { size: size.map(|s| s * a) },
            Shape::Cylinder { radius, height } => Shape::Cylinder { radius: radius * a, height: height * a },
            Shape::Sphere { radius } => Shape::Sphere { radius: radius * a },
        }
    }

    /// Lowest world z of the shape under `pose`.
    fn lowest_z(&self, pose: &Isometry3<f64>) -> f64 {
        let r = pose.rotation.to_rotation_matrix();
        let c = pose.translation.vector.z;
        match *self {
            Shape::Sphere { radius } => c - radius,
            Shape::Box { size } => {
                c - (0..3).map(|i| r[(2, i)].abs() * size[i] / 2.0).sum::<f64>()
            }
            Shape::Cylinder { radius, height } => {
                let az = r[(2, 2)].abs();
                c - az * height / 2.0 - radius * (1.0 - az * az).max(0.0).sqrt()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MotionProfile {
    #[default]
    Static,
    ConstantVelocity { velocity: [f64; 3] },
    /// `amplitude * sin(2 pi t / period)` added to the rest position.
    Sinusoidal { amplitude: [f64; 3], period: f64 },
}

impl MotionProfile {
    pub fn offset(&self, time: f64) -> Vector3<f64> {
        match *self {
            MotionProfile::Static => Vector3::zeros(),
            MotionProfile::ConstantVelocity { velocity } => Vector3::from(velocity) * time,
            MotionProfile::Sinusoidal { amplitude, period } => {
                Vector3::from(amplitude) * (std::f64::consts::TAU * time / period).sin()
            }
        }
    }

    /// Instantaneous velocity at `time`.
    pub fn velocity(&self, time: f64) -> Vector3<f64> {
        match *self {
            MotionProfile::Static => Vector3::zeros(),
            MotionProfile::ConstantVelocity { velocity } => Vector3::from(velocity),
            MotionProfile::Sinusoidal { amplitude, period } => {
                let w = std::f64::consts::TAU / period;
                Vector3::from(amplitude) * w * (w * time).cos()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub pose: Isometry3<f64>,
    pub color: [f64; 3],
}

/// Intrinsics plus the world-from-camera pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRig {
    pub intrinsics: CameraIntrinsics,
    pub pose: Isometry3<f64>,
}

impl CameraRig {
    /// Camera at `position` looking at `target`; image rows run towards world down
    /// where possible.
    pub fn look_at(intrinsics: CameraIntrinsics, position: Vector3<f64>, target: Vector3<f64>) -> Result<Self> {
        let z = (target - position)
            .try_normalize(1e-12)
            .ok_or_else(|| NgsError::Config("camera viewing direction is zero".into()))?;
        let x = z.cross(&Vector3::z()).try_normalize(1e-9).unwrap_or_else(Vector3::x);
        let x = (x - z * z.dot(&x)).normalize();
        let y = z.cross(&x);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[x, y, z]));
        Ok(Self {
            intrinsics,
            pose: Isometry3::from_parts(Translation3::from(position), UnitQuaternion::from_rotation_matrix(&rot)),
        })
    }

    /// Camera `height` above the origin of a table at `table_z`, looking straight down.
    pub fn top_down(intrinsics: CameraIntrinsics, table_z: f64, height: f64) -> Self {
        Self::look_at(intrinsics, Vector3::new(0.0, 0.0, table_z + height), Vector3::new(0.0, 0.0, table_z))
            .expect("non-degenerate top-down camera")
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.pose.inverse_transform_point(&Point3::from(*world)).coords
    }

    pub fn to_world(&self, cam: &Vector3<f64>) -> Vector3<f64> {
        self.pose.transform_point(&Point3::from(*cam)).coords
    }

    pub fn vector_to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.pose.inverse_transform_vector(world)
    }

    pub fn vector_to_world(&self, cam: &Vector3<f64>) -> Vector3<f64> {
        self.pose.transform_vector(cam)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub table_z: f64,
    pub primitives: Vec<Primitive>,
    pub motions: Vec<MotionProfile>,
    /// Poses at `time == 0`; current poses add the motion offset.
    pub rest_poses: Vec<Isometry3<f64>>,
    pub time: f64,
    pub noise_sigma: f64,
    pub camera: CameraRig,
}

pub const TABLE_COLOR: [f64; 3] = [0.55, 0.5, 0.45];

impl Scene {
    pub fn new(table_z: f64, camera: CameraRig) -> Self {
        Self {
            table_z,
            primitives: Vec::new(),
            motions: Vec::new(),
            rest_poses: Vec::new(),
            time: 0.0,
            noise_sigma: 0.0,
            camera,
        }
    }

    pub fn with_primitive(mut self, shape: Shape, pose: Isometry3<f64>, motion: MotionProfile) -> Result<Self> {
        self.add(shape, pose, motion)?;
        Ok(self)
    }

    pub fn add(&mut self, shape: Shape, pose: Isometry3<f64>, motion: MotionProfile) -> Result<usize> {
        shape.validate()?;
        if shape.lowest_z(&pose) < self.table_z - 1e-9 {
            return Err(NgsError::Config(format!("primitive {shape:?} penetrates the table")));
        }
        if let MotionProfile::Sinusoidal { period, .. } = motion {
            if !(period > 0.0) {
                return Err(NgsError::Config("sinusoidal period must be positive".into()));
            }
        }
        let id = self.primitives.len();
        let color = PALETTE[id % PALETTE.len()];
        self.primitives.push(Primitive { shape, pose: self.pose_at(&pose, &motion, self.time), color });
        self.rest_poses.push(pose);
        self.motions.push(motion);
        Ok(id)
    }

    fn pose_at(&self, rest: &Isometry3<f64>, motion: &MotionProfile, time: f64) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(rest.translation.vector + motion.offset(time)), rest.rotation)
    }

    /// Advances every primitive along its motion profile.
    pub fn step(&self, dt: f64) -> Result<Scene> {
        if !(dt > 0.0) {
            return Err(NgsError::Domain(format!("time step must be positive, got {dt}")));
        }
        let mut next = self.clone();
        next.time = self.time + dt;
        for (i, p) in next.primitives.iter_mut().enumerate() {
            p.pose = self.pose_at(&self.rest_poses[i], &self.motions[i], next.time);
        }
        Ok(next)
    }

    /// Table plane expressed in the camera frame.
    pub fn table_plane(&self) -> TablePlane {
        let n = self.camera.vector_to_camera(&Vector3::z());
        let p = self.camera.to_camera(&Vector3::new(0.0, 0.0, self.table_z));
        TablePlane::new(n, p).expect("unit table normal")
    }

    /// Same world with every length multiplied by `a`, camera included.
    pub fn scaled(&self, a: f64) -> Scene {
        let scale_pose = |p: &Isometry3<f64>| Isometry3::from_parts(Translation3::from(p.translation.vector * a), p.rotation);
        let mut out = self.clone();
        out.table_z *= a;
        out.noise_sigma *= a;
        out.camera.pose = scale_pose(&self.camera.pose);
        for (p, rest) in out.primitives.iter_mut().zip(out.rest_poses.iter_mut()) {
            p.shape = p.shape.scaled(a);
            p.pose = scale_pose(&p.pose);
            *rest = scale_pose(rest);
        }
        out.motions = self
            .motions
            .iter()
            .map(|m| match *m {
                MotionProfile::Static => MotionProfile::Static,
                MotionProfile::ConstantVelocity { velocity } => {
                    MotionProfile::ConstantVelocity { velocity: velocity.map(|v| v * a) }
                }
                MotionProfile::Sinusoidal { amplitude, period } => {
                    MotionProfile::Sinusoidal { amplitude: amplitude.map(|v| v * a), period }
                }
            })
            .collect();
        out
    }

    /// Moves every primitive by a world isometry; the camera stays put.
    /// The motion must map the table plane onto itself.
    pub fn moved(&self, motion: &Isometry3<f64>) -> Scene {
        let mut out = self.clone();
        for (p, rest) in out.primitives.iter_mut().zip(out.rest_poses.iter_mut()) {
            p.pose = motion * p.pose;
            *rest = motion * *rest;
        }
        out
    }

    /// Camera-frame grasp moved along with [`Scene::moved`].
    pub fn move_grasp(&self, g: &Grasp, motion: &Isometry3<f64>) -> Option<Grasp> {
        let cam_motion = self.camera.pose.inverse() * motion * self.camera.pose;
        g.transformed(&cam_motion)
    }

    /// World velocity of primitive `i` at the current time.
    pub fn velocity(&self, i: usize) -> Vector3<f64> {
        self.motions[i].velocity(self.time)
    }

    pub fn load(path: &Path) -> Result<Scene> {
        let text = std::fs::read_to_string(path)?;
        let file: SceneFile = serde_json::from_str(&text)?;
        file.into_scene()
    }

    pub fn to_file(&self) -> SceneFile {
        let k = self.camera.intrinsics;
        let cam_pos = self.camera.pose.translation.vector;
        let forward = self.camera.vector_to_world(&Vector3::z());
        SceneFile {
            table_z: self.table_z,
            noise_sigma: self.noise_sigma,
            camera: CameraFile {
                fx: k.fx,
                fy: k.fy,
                cx: k.cx,
                cy: k.cy,
                width: k.width,
                height: k.height,
                position: cam_pos.into(),
                look_at: (cam_pos + forward).into(),
            },
            primitives: self
                .primitives
                .iter()
                .zip(&self.rest_poses)
                .zip(&self.motions)
                .map(|((p, rest), m)| {
                    let (roll, pitch, yaw) = rest.rotation.euler_angles();
                    PrimitiveFile {
                        shape: p.shape,
                        position: rest.translation.vector.into(),
                        rpy: [roll, pitch, yaw],
                        color: Some(p.color),
                        motion: *m,
                    }
                })
                .collect(),
        }
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.2, 0.2],
    [0.2, 0.6, 0.85],
    [0.25, 0.75, 0.3],
    [0.9, 0.75, 0.15],
    [0.6, 0.3, 0.75],
    [0.95, 0.5, 0.2],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveFile {
    #[serde(flatten)]
    pub shape: Shape,
    pub position: [f64; 3],
    /// Roll, pitch, yaw in radians.
    #[serde(default)]
    pub rpy: [f64; 3],
    #[serde(default)]
    pub color: Option<[f64; 3]>,
    #[serde(default)]
    pub motion: MotionProfile,
}

/// On-disk scene description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    #[serde(default)]
    pub table_z: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    pub camera: CameraFile,
    pub primitives: Vec<PrimitiveFile>,
}

impl SceneFile {
    pub fn into_scene(self) -> Result<Scene> {
        let c = &self.camera;
        let k = CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?;
        let rig = CameraRig::look_at(k, Vector3::from(c.position), Vector3::from(c.look_at))?;
        let mut scene = Scene::new(self.table_z, rig);
        if !(self.noise_sigma >= 0.0) {
            return Err(NgsError::Config("noise sigma must be non-negative".into()));
        }
        scene.noise_sigma = self.noise_sigma;
        for p in self.primitives {
            let rot = UnitQuaternion::from_euler_angles(p.rpy[0], p.rpy[1], p.rpy[2]);
            let pose = Isometry3::from_parts(Translation3::from(Vector3::from(p.position)), rot);
            let id = scene.add(p.shape, pose, p.motion)?;
            if let Some(color) = p.color {
                scene.primitives[id].color = color;
            }
        }
        Ok(scene)
    }
}
