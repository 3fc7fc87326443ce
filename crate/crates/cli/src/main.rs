use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ngs_core::closed_loop::{self, apply_profile, LoopConfig, Profile, RobotProxy, TRIAL_MAX_SPEED};
use ngs_core::codec::{build_anchors, AnchorMode, AnchorSet};
use ngs_core::dataset::{generate_patches, write_dataset, DatasetConfig, DEFAULT_DEPTH_JITTER};
use ngs_core::evaluator::{coverage, evaluate_topk, write_ap_csv, EvalReport, DEFAULT_COVERAGE_DIST, DEFAULT_MUS, DEFAULT_TOP_K};
use ngs_core::geometry::{deproject, CameraIntrinsics, RGBDFrame};
use ngs_core::invariance::run_invariance_suite;
use ngs_core::io::{depth_plane, frame_from_files, read_grasps, read_pfm, read_ppm, write_grasps, write_pfm, write_ppm, Plane};
use ngs_core::patch::TablePlane;
use ngs_core::pipeline::{detect, DetectConfig};
use ngs_core::predictor::{GatedNet, NetShape, Predictor, PredictorParams, SceneSurface, SurfaceOracle};
use ngs_core::scene::{annotate_grasps, render, Scene};

#[derive(Parser, Debug)]
#[command(name = "ngs", version, about = "Normalized-grasp-space detection, simulation and evaluation")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Each may also come from the
/// `key = value` file given with `--config`; flags win.
#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Receptive field in metres (default: twice the gripper width).
    #[arg(long, global = true)]
    w_ref: Option<f64>,
    /// Gripper opening in metres (default 0.1).
    #[arg(long, global = true)]
    gripper_width: Option<f64>,
    /// Patch side in pixels after resampling (default 64).
    #[arg(long, global = true)]
    patch_size: Option<usize>,
    /// Anchors per rotation axis.
    #[arg(long, global = true)]
    anchors: Option<usize>,
    /// `antipodal` or `gated`.
    #[arg(long, global = true)]
    predictor: Option<String>,
    /// Weight file for the gated predictor; random weights when absent.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Seed for every random draw (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Detect grasps in a scene file or a depth image.
    Detect {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Depth PFM (metres) used instead of rendering a scene.
        #[arg(long, conflicts_with = "scene")]
        depth: Option<PathBuf>,
        #[arg(long, requires = "depth")]
        rgb: Option<PathBuf>,
        /// `fx,fy,cx,cy` for depth input.
        #[arg(long, requires = "depth")]
        intrinsics: Option<String>,
        /// Table depth for depth input; the farthest valid depth when absent.
        #[arg(long)]
        table_depth: Option<f64>,
        #[arg(long, default_value_t = 48)]
        num_patches: usize,
        /// Let the predictor use the scene's exact surface normals.
        #[arg(long)]
        analytic_normals: bool,
    },
    /// Render frames of a scene over time.
    Simulate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long, default_value_t = 0.04)]
        dt: f64,
    },
    /// Score grasps against a scene.
    Eval {
        #[arg(long)]
        grasps: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Comma-separated friction coefficients.
        #[arg(long)]
        mus: Option<String>,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Track and grasp in a simulated scene.
    ClosedLoop {
        /// Scene file; a seeded single-object trial when absent.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value = "static")]
        profile: String,
        /// Object speed as a fraction of the robot's maximum speed.
        #[arg(long, default_value_t = 0.5)]
        speed_ratio: f64,
        /// Robot start in world coordinates, `x,y,z`.
        #[arg(long)]
        robot: Option<String>,
        #[arg(long, default_value_t = TRIAL_MAX_SPEED)]
        max_speed: f64,
        #[arg(long)]
        timeout_steps: Option<usize>,
    },
    /// Generate normalized training patches from a scene.
    DatasetGen {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_DEPTH_JITTER)]
        depth_jitter: f64,
        #[arg(long)]
        no_scale_jitter: bool,
    },
    /// Build and print an anchor set.
    Anchors {
        /// `uniform` or `shifted`.
        #[arg(long, default_value = "uniform")]
        mode: String,
        /// Grasp file whose rotations drive shifted anchors.
        #[arg(long)]
        grasps: Option<PathBuf>,
    },
    /// Run the normalization property battery.
    InvarianceSuite {
        #[arg(long, default_value_t = 500)]
        trials: usize,
    },
}

/// Resolved common settings.
#[derive(Debug)]
struct Settings {
    w_ref: f64,
    w_gripper: f64,
    patch_size: usize,
    anchors: usize,
    predictor: String,
    weights: Option<PathBuf>,
    seed: u64,
    jobs: Option<usize>,
    out: PathBuf,
}

fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), n + 1))?;
        map.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(map)
}

fn pick<T: std::str::FromStr>(flag: Option<T>, file: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    let from_file = match file.remove(key) {
        Some(v) => Some(v.parse::<T>().map_err(|_| anyhow!("config value for {key} is invalid: {v:?}"))?),
        None => None,
    };
    Ok(flag.or(from_file))
}

impl Settings {
    fn resolve(c: CommonArgs) -> Result<Self> {
        let mut file = match &c.config {
            Some(p) => read_config(p)?,
            None => BTreeMap::new(),
        };
        let w_gripper = pick(c.gripper_width, &mut file, "gripper-width")?.unwrap_or(0.1);
        let s = Settings {
            w_ref: pick(c.w_ref, &mut file, "w-ref")?.unwrap_or(2.0 * w_gripper),
            w_gripper,
            patch_size: pick(c.patch_size, &mut file, "patch-size")?.unwrap_or(64),
            anchors: pick(c.anchors, &mut file, "anchors")?.unwrap_or(7),
            predictor: pick(c.predictor, &mut file, "predictor")?.unwrap_or_else(|| "antipodal".into()),
            weights: pick(c.weights, &mut file, "weights")?,
            seed: pick(c.seed, &mut file, "seed")?.unwrap_or(0),
            jobs: pick(c.jobs, &mut file, "jobs")?,
            out: pick(c.out, &mut file, "out")?.unwrap_or_else(|| PathBuf::from("out")),
        };
        if let Some(k) = file.keys().next() {
            bail!("unknown config key {k:?}");
        }
        if !(s.w_gripper > 0.0 && s.w_ref > 0.0) {
            bail!("gripper width and receptive field must be positive");
        }
        Ok(s)
    }

    fn anchor_set(&self) -> Result<AnchorSet> {
        Ok(build_anchors(self.anchors, AnchorMode::Uniform, None)?)
    }

    fn predictor(&self) -> Result<Predictor> {
        let params = PredictorParams { seed: self.seed, w_gripper: self.w_gripper, ..PredictorParams::default() };
        let p = match self.predictor.as_str() {
            "antipodal" => Predictor::Antipodal(params),
            "gated" => {
                let net = match &self.weights {
                    Some(path) => GatedNet::load(path).with_context(|| format!("loading weights {}", path.display()))?,
                    None => GatedNet::random(
                        NetShape {
                            patch_size: self.patch_size,
                            stage_channels: vec![8, 16, 32],
                            n_gamma: self.anchors,
                            n_beta: self.anchors,
                            n_theta: self.anchors,
                        },
                        self.seed,
                    )?,
                };
                Predictor::Gated { params, net }
            }
            other => bail!("unknown predictor {other:?} (expected antipodal or gated)"),
        };
        p.validate()?;
        Ok(p)
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn load_scene(path: &Path) -> Result<Scene> {
    Scene::load(path).with_context(|| format!("loading scene {}", path.display()))
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| anyhow!("bad {what} value {x:?}")))
        .collect()
}

fn load_depth_input(depth: &Path, rgb: Option<&Path>, intrinsics: Option<&str>) -> Result<(RGBDFrame, CameraIntrinsics)> {
    let mut input = BufReader::new(fs::File::open(depth).with_context(|| format!("opening {}", depth.display()))?);
    let plane = read_pfm(&mut input)?.ok_or_else(|| anyhow!("{} holds no image", depth.display()))?;
    let rgb = match rgb {
        Some(p) => Some(read_ppm(&mut BufReader::new(fs::File::open(p).with_context(|| format!("opening {}", p.display()))?))?),
        None => None,
    };
    let frame = frame_from_files(&plane, rgb)?;
    let v = parse_list(intrinsics.ok_or_else(|| anyhow!("--intrinsics fx,fy,cx,cy is required with --depth"))?, "intrinsics")?;
    let [fx, fy, cx, cy] = v[..] else { bail!("--intrinsics needs exactly four values") };
    Ok((frame, CameraIntrinsics::new(fx, fy, cx, cy, plane.width, plane.height)?))
}

#[derive(Serialize)]
struct DetectSummary {
    patches: usize,
    grasps: usize,
    shortfall: bool,
    predictor: String,
    seed: u64,
}

fn run_detect(s: &Settings, cmd: Command) -> Result<bool> {
    let Command::Detect { scene, depth, rgb, intrinsics, table_depth, num_patches, analytic_normals } = cmd else {
        unreachable!()
    };
    let scene = scene.as_deref().map(load_scene).transpose()?;
    let (frame, k, table) = match (&scene, &depth) {
        (Some(sc), _) => (render(sc, &sc.camera, s.seed)?, sc.camera.intrinsics, sc.table_plane()),
        (None, Some(d)) => {
            let (frame, k) = load_depth_input(d, rgb.as_deref(), intrinsics.as_deref())?;
            let far = frame.depth.iter().zip(&frame.valid).filter(|p| *p.1).map(|p| *p.0).fold(f64::NAN, f64::max);
            let z = table_depth.unwrap_or(far);
            if !z.is_finite() {
                bail!("depth image has no valid pixels");
            }
            (frame, k, TablePlane::facing_camera(z))
        }
        (None, None) => bail!("detect needs --scene or --depth"),
    };
    if analytic_normals && scene.is_none() {
        bail!("--analytic-normals needs --scene");
    }
    let mut cfg = DetectConfig::new(s.w_gripper);
    cfg.w_ref = s.w_ref;
    cfg.patch_size = s.patch_size;
    cfg.num_patches = num_patches;
    cfg.seed = s.seed;
    let predictor = s.predictor()?;
    let anchors = s.anchor_set()?;
    let surface = scene.as_ref().map(|scene| SceneSurface { scene });
    let oracle: Option<&dyn SurfaceOracle> = if analytic_normals { surface.as_ref().map(|x| x as _) } else { None };
    let det = detect(&frame, &k, &table, &cfg, &predictor, &anchors, oracle)?;

    let mut out = create(&s.out.join("grasps.jsonl"))?;
    write_grasps(&mut out, &det.grasps)?;
    out.flush()?;
    let mut hm = create(&s.out.join("heatmaps.pfm"))?;
    for p in &det.patches {
        let h = &p.heatmap;
        for plane in h.channel_planes() {
            write_pfm(&mut hm, &Plane { width: h.n_beta, height: h.n_gamma, data: plane.iter().map(|&v| v as f32).collect() })?;
        }
    }
    hm.flush()?;
    write_json(
        &s.out.join("detection.json"),
        &DetectSummary {
            patches: det.patches.len(),
            grasps: det.grasps.len(),
            shortfall: det.shortfall,
            predictor: s.predictor.clone(),
            seed: s.seed,
        },
    )?;
    println!("{} grasps from {} patches", det.grasps.len(), det.patches.len());
    Ok(true)
}

fn run_simulate(s: &Settings, scene: &Path, steps: usize, dt: f64) -> Result<bool> {
    let mut scene = load_scene(scene)?;
    fs::create_dir_all(&s.out)?;
    for i in 0..steps {
        let frame = render(&scene, &scene.camera, s.seed.wrapping_add(i as u64))?;
        let mut d = create(&s.out.join(format!("frame_{i:04}.pfm")))?;
        write_pfm(&mut d, &depth_plane(&frame))?;
        d.flush()?;
        let mut c = create(&s.out.join(format!("frame_{i:04}.ppm")))?;
        write_ppm(&mut c, frame.width, frame.height, &frame.rgb)?;
        c.flush()?;
        if i + 1 < steps {
            scene = scene.step(dt)?;
        }
    }
    println!("rendered {steps} frames to {}", s.out.display());
    Ok(true)
}

fn run_eval(s: &Settings, grasps: &Path, scene: &Path, mus: Option<&str>, top_k: usize) -> Result<bool> {
    let scene = load_scene(scene)?;
    let file = fs::File::open(grasps).with_context(|| format!("opening {}", grasps.display()))?;
    let grasps = read_grasps(BufReader::new(file))?;
    let mus = match mus {
        Some(m) => parse_list(m, "mu")?,
        None => DEFAULT_MUS.to_vec(),
    };
    let topk = evaluate_topk(&grasps, &scene, &mus, top_k, s.w_gripper)?;
    let gt = annotate_grasps(&scene, s.w_gripper);
    let report = EvalReport::new(&topk, coverage(&grasps, &gt, DEFAULT_COVERAGE_DIST));
    write_json(&s.out.join("report.json"), &report)?;
    let mut csv = create(&s.out.join("ap.csv"))?;
    write_ap_csv(&mut csv, &topk)?;
    csv.flush()?;
    println!("overall AP {:.4}, coverage {:.4}", report.overall, report.coverage);
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn run_closed_loop(
    s: &Settings,
    scene: Option<&Path>,
    profile: &str,
    speed_ratio: f64,
    robot: Option<&str>,
    max_speed: f64,
    timeout_steps: Option<usize>,
) -> Result<bool> {
    let profile: Profile = profile.parse()?;
    let (scene, robot) = match scene {
        None => closed_loop::seeded_trial(profile, speed_ratio, 0.0, s.seed)?,
        Some(path) => {
            let base = load_scene(path)?;
            let first = base.rest_poses.first().ok_or_else(|| anyhow!("scene has no primitives"))?.translation.vector;
            let start = match robot {
                Some(r) => {
                    let v = parse_list(r, "robot")?;
                    let [x, y, z] = v[..] else { bail!("--robot needs x,y,z") };
                    nalgebra::Vector3::new(x, y, z)
                }
                None => first + nalgebra::Vector3::new(0.15, 0.0, 0.15),
            };
            let scene = apply_profile(&base, profile, speed_ratio * max_speed, &start)?;
            let robot = RobotProxy::new(scene.camera.to_camera(&start), max_speed)?;
            (scene, robot)
        }
    };
    let robot = RobotProxy { max_speed, ..robot };
    let mut cfg = LoopConfig::new(&scene.camera.intrinsics, s.w_gripper);
    cfg.w_ref = s.w_ref;
    cfg.patch_size = s.patch_size;
    cfg.seed = s.seed;
    if let Some(t) = timeout_steps {
        cfg.timeout_steps = t;
    }
    let outcome = closed_loop::run(&scene, &robot, &cfg, &s.predictor()?, &s.anchor_set()?)?;
    write_json(&s.out.join("trajectory.json"), &outcome.trajectory)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        success: bool,
        timed_out: bool,
        steps: usize,
        final_grasp: &'a Option<ngs_core::io::GraspRecord>,
    }
    write_json(
        &s.out.join("outcome.json"),
        &Summary { success: outcome.success, timed_out: outcome.timed_out, steps: outcome.steps, final_grasp: &outcome.final_grasp },
    )?;
    println!("success={} timed_out={} steps={}", outcome.success, outcome.timed_out, outcome.steps);
    Ok(true)
}

fn run_dataset(s: &Settings, scene_path: &Path, n: usize, depth_jitter: f64, no_scale_jitter: bool) -> Result<bool> {
    let scene = load_scene(scene_path)?;
    let k = scene.camera.intrinsics;
    let frame = render(&scene, &scene.camera, s.seed)?;
    let pm = deproject(&frame, &k)?;
    let table = scene.table_plane();
    let mask: Vec<bool> = (0..pm.xyz.len()).map(|i| pm.valid[i] && table.height(&pm.xyz[i]) > 0.005).collect();
    let gt = annotate_grasps(&scene, s.w_gripper);
    let anchors = s.anchor_set()?;
    let cfg = DatasetConfig {
        w_ref: s.w_ref,
        patch_size: s.patch_size,
        depth_jitter,
        randomize_scale: !no_scale_jitter,
        ..DatasetConfig::new(n, s.w_gripper, s.seed)
    };
    let ds = generate_patches(&frame, &pm, &k, &mask, &gt, &anchors, &cfg)?;
    if ds.empty_mask {
        eprintln!("warning: scene has no foreground pixels; dataset is empty");
    }
    let stem = scene_path.file_stem().and_then(|x| x.to_str()).unwrap_or("scene");
    let files = write_dataset(&s.out, stem, &ds, &anchors, s.seed)?;
    println!("wrote {} records ({} files)", ds.records.len(), files.len());
    Ok(true)
}

fn run_anchors(s: &Settings, mode: &str, grasps: Option<&Path>) -> Result<bool> {
    let set = match mode {
        "uniform" => build_anchors(s.anchors, AnchorMode::Uniform, None)?,
        "shifted" => {
            let path = grasps.ok_or_else(|| anyhow!("shifted anchors need --grasps"))?;
            let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let rots: Vec<_> = read_grasps(BufReader::new(file))?.iter().map(|g| g.rot).collect();
            build_anchors(s.anchors, AnchorMode::Shifted, Some(&rots))?
        }
        other => bail!("unknown anchor mode {other:?}"),
    };
    let text = serde_json::to_string_pretty(&set)?;
    println!("{text}");
    write_json(&s.out.join("anchors.json"), &set)?;
    Ok(true)
}

fn run_invariance(s: &Settings, trials: usize) -> Result<bool> {
    let r = run_invariance_suite(trials, s.seed, s.patch_size)?;
    let line = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!("translation  {}  max {:.3e}", line(r.translation_ok()), r.translation_max);
    for &(a, d) in &r.scale_max {
        println!("scale {a:<5}   {}  max {d:.3e}", line(d <= r.tolerance));
    }
    println!(
        "rotation     {}  max {:.3e} over {} draws ({} wrap-around draws skipped)",
        line(r.rotation_ok()),
        r.rotation_max,
        r.rotation_draws,
        r.wraparound_skipped
    );
    println!("{} trials, seed {}: {}", r.trials, s.seed, line(r.passed()));
    write_json(&s.out.join("invariance.json"), &r)?;
    Ok(r.passed())
}

fn run(cli: Cli) -> Result<bool> {
    let s = Settings::resolve(cli.common)?;
    if let Some(j) = s.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global()?;
    }
    match cli.command {
        c @ Command::Detect { .. } => run_detect(&s, c),
        Command::Simulate { scene, steps, dt } => run_simulate(&s, &scene, steps, dt),
        Command::Eval { grasps, scene, mus, top_k } => run_eval(&s, &grasps, &scene, mus.as_deref(), top_k),
        Command::ClosedLoop { scene, profile, speed_ratio, robot, max_speed, timeout_steps } => {
            run_closed_loop(&s, scene.as_deref(), &profile, speed_ratio, robot.as_deref(), max_speed, timeout_steps)
        }
        Command::DatasetGen { scene, n, depth_jitter, no_scale_jitter } => {
            run_dataset(&s, &scene, n, depth_jitter, no_scale_jitter)
        }
        Command::Anchors { mode, grasps } => run_anchors(&s, &mode, grasps.as_deref()),
        Command::InvarianceSuite { trials } => run_invariance(&s, trials),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
