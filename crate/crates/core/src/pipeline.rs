//! Frame-level detection: patch centres, extraction, normalization,
//! per-patch prediction and decoding, then grasp-NMS across patches.

use rayon::prelude::*;

use crate::codec::{decode, grasp_nms, AnchorSet, DecodeParams, RotationHeatmap};
use crate::error::Result;
use crate::geometry::{deproject, CameraIntrinsics, Grasp, PointMap, RGBDFrame};
use crate::ngs::{normalize_patch, NGSContext};
use crate::patch::{extract_patch, locate_centers, PatchSpec, TablePlane};
use crate::predictor::{Predictor, SurfaceOracle};

pub const DEFAULT_NMS_TRANS: f64 = 0.02;
pub const DEFAULT_NMS_ROT: f64 = std::f64::consts::FRAC_PI_6;
pub const DEFAULT_MARGIN: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectConfig {
    pub w_ref: f64,
    pub patch_size: usize,
    pub num_patches: usize,
    /// Foreground height threshold above the table.
    pub margin: f64,
    pub seed: u64,
    pub decode: DecodeParams,
    pub nms_trans: f64,
    pub nms_rot: f64,
}

impl DetectConfig {
    pub fn new(w_gripper: f64) -> Self {
        Self {
            w_ref: 2.0 * w_gripper,
            patch_size: 64,
            num_patches: 48,
            margin: DEFAULT_MARGIN,
            seed: 0,
            decode: DecodeParams { score_thresh: 0.0, top_k: 50, w_gripper },
            nms_trans: DEFAULT_NMS_TRANS,
            nms_rot: DEFAULT_NMS_ROT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchOutput {
    pub spec: PatchSpec,
    pub ctx: NGSContext,
    pub heatmap: RotationHeatmap,
    /// Decoded camera-frame grasps, best first.
    pub grasps: Vec<Grasp>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub patches: Vec<PatchOutput>,
    /// All patch grasps, score-sorted and suppressed.
    pub grasps: Vec<Grasp>,
    pub shortfall: bool,
}

/// Seed for patch `i`, spread so neighbouring patches shuffle differently.
pub fn patch_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the predictor on each patch in parallel; output order follows `specs`.
#[allow(clippy::too_many_arguments)]
pub fn process_patches(
    frame: &RGBDFrame,
    pm: &PointMap,
    specs: &[PatchSpec],
    w_ref: f64,
    predictor: &Predictor,
    anchors: &AnchorSet,
    oracle: Option<&dyn SurfaceOracle>,
    decode_params: &DecodeParams,
) -> Result<Vec<PatchOutput>> {
    specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let raw = extract_patch(frame, pm, spec)?;
            let ctx = NGSContext::new(spec.center_3d, w_ref)?;
            let patch = normalize_patch(&raw, &ctx)?;
            let local = match predictor {
                Predictor::Antipodal(p) => {
                    Predictor::Antipodal(crate::predictor::PredictorParams { seed: patch_seed(p.seed, i), ..*p })
                }
                other => other.clone(),
            };
            let heatmap = local.predict(&patch, anchors, oracle)?;
            let grasps = decode(&heatmap, anchors, &ctx, decode_params);
            Ok(PatchOutput { spec: *spec, ctx, heatmap, grasps })
        })
        .collect()
}

/// Merges per-patch grasps: stable score sort, then grasp-NMS.
pub fn merge_grasps(patches: &[PatchOutput], nms_trans: f64, nms_rot: f64) -> Vec<Grasp> {
    let all: Vec<Grasp> = patches.iter().flat_map(|p| p.grasps.iter().copied()).collect();
    grasp_nms(&all, nms_trans, nms_rot)
}

/// Foreground farthest-point centres, then [`process_patches`] and [`merge_grasps`].
pub fn detect(
    frame: &RGBDFrame,
    k: &CameraIntrinsics,
    table: &TablePlane,
    cfg: &DetectConfig,
    predictor: &Predictor,
    anchors: &AnchorSet,
    oracle: Option<&dyn SurfaceOracle>,
) -> Result<Detection> {
    predictor.validate()?;
    let pm = deproject(frame, k)?;
    let centers = locate_centers(&pm, table, cfg.margin, cfg.num_patches, cfg.seed)?;
    let specs = centers.specs(k, cfg.w_ref, cfg.patch_size)?;
    let patches = process_patches(frame, &pm, &specs, cfg.w_ref, predictor, anchors, oracle, &cfg.decode)?;
    let grasps = merge_grasps(&patches, cfg.nms_trans, cfg.nms_rot);
    Ok(Detection { patches, grasps, shortfall: centers.shortfall })
}
