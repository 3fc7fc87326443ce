//! Closed-loop grasping against a simulated scene: track the best grasp
//! with a speed-limited robot until close enough, then execute it.

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{grasp_nms_indices, AnchorSet, DecodeParams};
use crate::error::{NgsError, Result};
use crate::geometry::{deproject, symmetric_grasp_angle, CameraIntrinsics, EulerRotation, Grasp};
use crate::io::GraspRecord;
use crate::patch::{adaptive_side, PatchSpec};
use crate::pipeline::{process_patches, DEFAULT_MARGIN, DEFAULT_NMS_ROT, DEFAULT_NMS_TRANS};
use crate::predictor::{Predictor, SceneSurface, SurfaceOracle};
use crate::scene::{annotate_grasps, render, CameraRig, MotionProfile, Scene, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotState {
    Tracking,
    Grasping,
    Done,
}

/// Kinematic gripper stand-in, posed in the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotProxy {
    pub position: Vector3<f64>,
    pub rotation: EulerRotation,
    pub max_speed: f64,
    pub state: RobotState,
}

impl RobotProxy {
    pub fn new(position: Vector3<f64>, max_speed: f64) -> Result<Self> {
        if !(max_speed > 0.0) {
            return Err(NgsError::Config(format!("max speed must be positive, got {max_speed}")));
        }
        Ok(Self { position, rotation: EulerRotation::identity(), max_speed, state: RobotState::Tracking })
    }
}

/// Pixel mask of where patch centres may be drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct Workspace {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
}

impl Workspace {
    pub fn full(k: &CameraIntrinsics) -> Self {
        Self { width: k.width, height: k.height, mask: vec![true; k.width * k.height] }
    }

    /// Pixels with `u0 <= u < u1` and `v0 <= v < v1`.
    pub fn rect(k: &CameraIntrinsics, u0: usize, v0: usize, u1: usize, v1: usize) -> Self {
        let mask = (0..k.width * k.height)
            .map(|i| {
                let (u, v) = (i % k.width, i / k.width);
                (u0..u1).contains(&u) && (v0..v1).contains(&v)
            })
            .collect();
        Self { width: k.width, height: k.height, mask }
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        u < self.width && v < self.height && self.mask[v * self.width + u]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopConfig {
    pub min_dis: f64,
    pub control_dt: f64,
    pub workspace: Workspace,
    pub patches_per_step: usize,
    pub timeout_steps: usize,
    pub w_ref: f64,
    pub w_gripper: f64,
    pub patch_size: usize,
    /// Foreground height threshold above the table.
    pub margin: f64,
    pub seed: u64,
    /// A new target must beat the tracked one by this fraction.
    pub switch_margin: f64,
    /// Predictor may consult the scene's exact normals and contacts.
    pub analytic_normals: bool,
    pub success_trans: f64,
    pub success_rot: f64,
}

impl LoopConfig {
    pub fn new(k: &CameraIntrinsics, w_gripper: f64) -> Self {
        Self {
            min_dis: 0.01,
            control_dt: 0.04,
            workspace: Workspace::full(k),
            patches_per_step: 12,
            timeout_steps: 120,
            w_ref: 2.0 * w_gripper,
            w_gripper,
            patch_size: 64,
            margin: DEFAULT_MARGIN,
            seed: 0,
            switch_margin: 0.05,
            analytic_normals: true,
            success_trans: 0.01,
            success_rot: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_dis > 0.0) || !(self.control_dt > 0.0) {
            return Err(NgsError::Config("min_dis and control_dt must be positive".into()));
        }
        if self.patches_per_step == 0 {
            return Err(NgsError::Config("need at least one patch per step".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackOutput {
    pub velocity: Vector3<f64>,
    pub best: Option<Grasp>,
    /// Centre of the patch the chosen grasp came from.
    pub best_center: Option<Vector3<f64>>,
}

/// Saturated pursuit: full speed towards the target, or exactly the
/// remaining distance in one step when it is closer than that.
pub fn pursuit_velocity(from: &Vector3<f64>, to: &Vector3<f64>, max_speed: f64, dt: f64) -> Vector3<f64> {
    let d = to - from;
    let dist = d.norm();
    if dist == 0.0 {
        return Vector3::zeros();
    }
    d / dist * max_speed.min(dist / dt)
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// One sense-predict-act cycle. Renders the scene, draws patch centres
/// uniformly among foreground pixels of the workspace, predicts and
/// decodes every patch, then picks a target: the best grasp within one
/// step of travel from the previous target (else the nearest one), unless
/// the top grasp after suppression scores at least `switch_margin` higher
/// and is no farther from the robot.
pub fn track_step(
    scene: &Scene,
    robot: &RobotProxy,
    cfg: &LoopConfig,
    predictor: &Predictor,
    anchors: &AnchorSet,
    previous: Option<&Grasp>,
    step: u64,
) -> Result<TrackOutput> {
    cfg.validate()?;
    let rig = &scene.camera;
    let k = rig.intrinsics;
    let frame = render(scene, rig, cfg.seed ^ step.wrapping_mul(0xD1B5_4A32_D192_ED03))?;
    let pm = deproject(&frame, &k)?;
    let table = scene.table_plane();
    let pixels: Vec<usize> = (0..k.width * k.height)
        .filter(|&i| {
            let (u, v) = (i % k.width, i / k.width);
            cfg.workspace.contains(u, v) && pm.valid[i] && table.height(&pm.xyz[i]) > cfg.margin
        })
        .collect();
    let none = TrackOutput { velocity: Vector3::zeros(), best: None, best_center: None };
    if pixels.is_empty() {
        return Ok(none);
    }
    let mut rng = step_rng(cfg.seed, step);
    let n = cfg.patches_per_step.min(pixels.len());
    let mut picks: Vec<usize> = sample(&mut rng, pixels.len(), n).into_iter().map(|j| pixels[j]).collect();
    picks.sort_unstable();
    let specs = picks
        .iter()
        .map(|&i| {
            let p = pm.xyz[i];
            let (u, v) = ((i % k.width) as f64, (i / k.width) as f64);
            PatchSpec::new((u, v), p, adaptive_side(p.z, k.focal(), cfg.w_ref)?, cfg.patch_size)
        })
        .collect::<Result<Vec<_>>>()?;
    let decode = DecodeParams { score_thresh: 0.0, top_k: 50, w_gripper: cfg.w_gripper };
    let surface = SceneSurface { scene };
    let oracle: Option<&dyn SurfaceOracle> = if cfg.analytic_normals { Some(&surface) } else { None };
    let predictor = match predictor {
        Predictor::Antipodal(p) => Predictor::Antipodal(crate::predictor::PredictorParams { seed: p.seed ^ step, ..*p }),
        other => other.clone(),
    };
    let patches = process_patches(&frame, &pm, &specs, cfg.w_ref, &predictor, anchors, oracle, &decode)?;
    let (grasps, origin): (Vec<Grasp>, Vec<usize>) =
        patches.iter().enumerate().flat_map(|(i, p)| p.grasps.iter().map(move |g| (*g, i))).unzip();
    let kept = grasp_nms_indices(&grasps, DEFAULT_NMS_TRANS, DEFAULT_NMS_ROT);
    let Some(&top) = kept.first() else { return Ok(none) };
    let mut chosen = top;
    if let Some(prev) = previous {
        // Suppressed grasps are still candidates here so the target can move
        // smoothly: the best grasp within one step of travel, else the nearest.
        let near = |i: usize| grasps[i].t.metric_distance(&prev.t);
        let step_len = robot.max_speed * cfg.control_dt;
        let tracked = (0..grasps.len())
            .filter(|&i| near(i) <= step_len)
            .max_by(|&a, &b| grasps[a].score.total_cmp(&grasps[b].score).then(b.cmp(&a)))
            .or_else(|| (0..grasps.len()).min_by(|&a, &b| near(a).total_cmp(&near(b)).then(a.cmp(&b))));
        if let Some(t) = tracked {
            let reach = |i: usize| grasps[i].t.metric_distance(&robot.position);
            let better = grasps[top].score >= (1.0 + cfg.switch_margin) * grasps[t].score;
            if !better || reach(top) > reach(t) {
                chosen = t;
            }
        }
    }
    let best = grasps[chosen];
    Ok(TrackOutput {
        velocity: pursuit_velocity(&robot.position, &best.t, robot.max_speed, cfg.control_dt),
        best: Some(best),
        best_center: Some(patches[origin[chosen]].ctx.center),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub step: usize,
    pub time: f64,
    pub state: RobotState,
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub target: Option<GraspRecord>,
    pub distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub success: bool,
    pub timed_out: bool,
    /// Tracking steps in which the robot moved or waited for a detection.
    pub steps: usize,
    pub trajectory: Vec<TrajectoryEntry>,
    pub final_grasp: Option<GraspRecord>,
}

/// Whether `g` matches a current ground-truth grasp.
pub fn matches_ground_truth(g: &Grasp, scene: &Scene, cfg: &LoopConfig) -> bool {
    let m = g.matrix();
    annotate_grasps(scene, cfg.w_gripper).iter().any(|h| {
        h.width <= cfg.w_gripper
            && h.t.metric_distance(&g.t) <= cfg.success_trans
            && symmetric_grasp_angle(&h.matrix(), &m) <= cfg.success_rot
    })
}

/// Tracks until the chosen grasp is within `min_dis`, then snaps to it,
/// lets one control period pass while the jaws close and checks the grasp
/// against the ground truth of the scene at that moment.
pub fn run(scene: &Scene, robot: &RobotProxy, cfg: &LoopConfig, predictor: &Predictor, anchors: &AnchorSet) -> Result<Outcome> {
    cfg.validate()?;
    let mut scene = scene.clone();
    let mut robot = *robot;
    robot.state = RobotState::Tracking;
    let mut trajectory = Vec::new();
    let mut target: Option<Grasp> = None;
    let mut steps = 0;
    let log = |step: usize, scene: &Scene, robot: &RobotProxy, v: &Vector3<f64>, g: Option<&Grasp>| TrajectoryEntry {
        step,
        time: scene.time,
        state: robot.state,
        position: robot.position.into(),
        velocity: (*v).into(),
        target: g.map(GraspRecord::from),
        distance: g.map(|g| g.t.metric_distance(&robot.position)),
    };
    let final_grasp = loop {
        let out = track_step(&scene, &robot, cfg, predictor, anchors, target.as_ref(), steps as u64)?;
        if let Some(best) = out.best {
            if best.t.metric_distance(&robot.position) <= cfg.min_dis {
                break Some(best);
            }
        }
        if steps >= cfg.timeout_steps {
            break None;
        }
        trajectory.push(log(steps, &scene, &robot, &out.velocity, out.best.as_ref()));
        if out.best.is_some() {
            target = out.best;
        }
        robot.position += out.velocity * cfg.control_dt;
        scene = scene.step(cfg.control_dt)?;
        steps += 1;
    };
    let Some(g) = final_grasp else {
        robot.state = RobotState::Done;
        trajectory.push(log(steps, &scene, &robot, &Vector3::zeros(), None));
        return Ok(Outcome { success: false, timed_out: true, steps, trajectory, final_grasp: None });
    };
    robot.state = RobotState::Grasping;
    robot.position = g.t;
    robot.rotation = g.rot;
    trajectory.push(log(steps, &scene, &robot, &Vector3::zeros(), Some(&g)));
    let closed = scene.step(cfg.control_dt)?;
    let success = matches_ground_truth(&g, &closed, cfg);
    robot.state = RobotState::Done;
    trajectory.push(log(steps, &closed, &robot, &Vector3::zeros(), Some(&g)));
    Ok(Outcome { success, timed_out: false, steps, trajectory, final_grasp: Some(GraspRecord::from(&g)) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Static,
    /// Constant velocity along world `+x`.
    Conveyor,
    /// Sinusoidal sway in the table plane.
    Handover,
    /// Constant velocity directly away from the robot.
    Receding,
}

impl std::str::FromStr for Profile {
    type Err = NgsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Profile::Static),
            "conveyor" => Ok(Profile::Conveyor),
            "handover" => Ok(Profile::Handover),
            "receding" => Ok(Profile::Receding),
            _ => Err(NgsError::Config(format!("unknown profile {s:?}"))),
        }
    }
}

/// Handover sway period in seconds.
pub const HANDOVER_PERIOD: f64 = 3.0;

/// Replaces every primitive's motion with the profile's. `speed` is the
/// conveyor or receding speed and the handover amplitude times `2 pi / period`.
pub fn apply_profile(scene: &Scene, profile: Profile, speed: f64, robot_world: &Vector3<f64>) -> Result<Scene> {
    let mut out = Scene::new(scene.table_z, scene.camera);
    out.noise_sigma = scene.noise_sigma;
    out.time = scene.time;
    for (p, rest) in scene.primitives.iter().zip(&scene.rest_poses) {
        let motion = match profile {
            Profile::Static => MotionProfile::Static,
            Profile::Conveyor => MotionProfile::ConstantVelocity { velocity: [speed, 0.0, 0.0] },
            Profile::Handover => {
                let amp = speed * HANDOVER_PERIOD / std::f64::consts::TAU;
                MotionProfile::Sinusoidal { amplitude: [amp, amp * 0.5, 0.0], period: HANDOVER_PERIOD }
            }
            Profile::Receding => {
                let mut away = rest.translation.vector - robot_world;
                away.z = 0.0;
                let dir = away.try_normalize(1e-12).unwrap_or_else(Vector3::x);
                MotionProfile::ConstantVelocity { velocity: (dir * speed).into() }
            }
        };
        let id = out.add(p.shape, *rest, motion)?;
        out.primitives[id].color = p.color;
    }
    Ok(out)
}

/// Camera used by the seeded trials: 320x240, looking straight down from 0.6 m.
pub fn trial_camera() -> CameraRig {
    let k = CameraIntrinsics::new(320.0, 320.0, 160.0, 120.0, 320, 240).expect("valid intrinsics");
    CameraRig::top_down(k, 0.0, 0.6)
}

pub const TRIAL_MAX_SPEED: f64 = 0.2;

/// A reproducible single-object trial: a small sphere or lying cylinder on
/// the table and a robot starting 0.2-0.3 m away. `speed_ratio` scales the
/// object speed relative to the robot's maximum speed.
pub fn seeded_trial(profile: Profile, speed_ratio: f64, noise_sigma: f64, seed: u64) -> Result<(Scene, RobotProxy)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = trial_camera();
    let mut scene = Scene::new(0.0, rig);
    scene.noise_sigma = noise_sigma;
    let (x0, y0) = match profile {
        Profile::Conveyor => (rng.random_range(-0.2..-0.1), rng.random_range(-0.1..0.1)),
        _ => (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
    };
    let (shape, pose) = if rng.random_bool(2.0 / 3.0) {
        let r = rng.random_range(0.015..0.02);
        (Shape::Sphere { radius: r }, Isometry3::translation(x0, y0, r))
    } else {
        let r = rng.random_range(0.01..0.015);
        let h = rng.random_range(0.05..0.08);
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let rot = UnitQuaternion::from_euler_angles(std::f64::consts::FRAC_PI_2, 0.0, yaw);
        (Shape::Cylinder { radius: r, height: h }, Isometry3::from_parts(Translation3::new(x0, y0, r), rot))
    };
    scene.add(shape, pose, MotionProfile::Static)?;
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let reach = rng.random_range(0.15..0.22);
    let robot_world = Vector3::new(x0 + reach * heading.cos(), y0 + reach * heading.sin(), rng.random_range(0.12..0.2));
    let scene = apply_profile(&scene, profile, speed_ratio * TRIAL_MAX_SPEED, &robot_world)?;
    let robot = RobotProxy::new(rig.to_camera(&robot_world), TRIAL_MAX_SPEED)?;
    Ok((scene, robot))
}
