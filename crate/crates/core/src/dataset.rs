//! Training-pair generation: dilated object masks, seeded patch sampling
//! with depth and scale randomization, and per-record serialization.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{encode, AnchorSet, RotationHeatmap};
use crate::error::{NgsError, Result};
use crate::geometry::{CameraIntrinsics, Grasp, PointMap, RGBDFrame};
use crate::io::{write_pfm, ContextRecord, NormalizedGraspRecord, Plane};
use crate::ngs::{normalize_grasps, normalize_patch, randomize_scale, NGSContext, NormalizedGrasp, NormalizedPatch};
use crate::patch::{extract_patch, PatchSpec};

pub const DEFAULT_DEPTH_JITTER: f64 = 0.01;
pub const DEFAULT_DILATE_SIGMA: f64 = 2.0;
pub const DEFAULT_DILATE_THRESH: f64 = 0.1;

/// Blurs a binary mask with an unnormalized Gaussian (peak weight 1 at the
/// source pixel), saturates at 1 and keeps pixels at or above `thresh`.
/// Every set pixel therefore survives, and a lone pixel grows into a disk
/// of radius `sigma * sqrt(2 ln(1 / thresh))`.
pub fn dilate_mask(mask: &[bool], width: usize, height: usize, sigma: f64, thresh: f64) -> Result<Vec<bool>> {
    if mask.len() != width * height {
        return Err(NgsError::Config(format!("mask has {} pixels, expected {}", mask.len(), width * height)));
    }
    if !(sigma > 0.0) || !(thresh > 0.0 && thresh < 1.0) {
        return Err(NgsError::Config(format!("need sigma > 0 and 0 < thresh < 1, got {sigma} and {thresh}")));
    }
    let r = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    // The 2D kernel factors into rows and columns.
    let mut rows = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            for (k, w) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if (0..width as isize).contains(&xx) {
                    rows[y * width + xx as usize] += w;
                }
            }
        }
    }
    let mut out = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if (0..height as isize).contains(&yy) {
                    acc += w * rows[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc.min(1.0) >= thresh;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n: usize,
    pub w_ref: f64,
    pub w_gripper: f64,
    pub patch_size: usize,
    pub depth_jitter: f64,
    pub randomize_scale: bool,
    pub sigma: f64,
    pub thresh: f64,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(n: usize, w_gripper: f64, seed: u64) -> Self {
        Self {
            n,
            w_ref: 2.0 * w_gripper,
            w_gripper,
            patch_size: 64,
            depth_jitter: DEFAULT_DEPTH_JITTER,
            randomize_scale: true,
            sigma: DEFAULT_DILATE_SIGMA,
            thresh: DEFAULT_DILATE_THRESH,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub index: usize,
    pub center_px: (usize, usize),
    pub ctx: NGSContext,
    pub patch: NormalizedPatch,
    /// Ground truth inside this patch's grasp ball, as encoded.
    pub grasps: Vec<NormalizedGrasp>,
    pub target: RotationHeatmap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    /// Set when the dilated mask had no pixel with valid depth.
    pub empty_mask: bool,
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Samples `cfg.n` patch centres uniformly over dilated-mask pixels with
/// valid depth. Each centre's depth moves by a uniform draw in
/// `[-depth_jitter, depth_jitter]` before deprojection, and each patch may
/// draw its own receptive field. Targets hold the ground-truth grasps that
/// fall inside the patch and fit the gripper.
pub fn generate_patches(
    frame: &RGBDFrame,
    pm: &PointMap,
    k: &CameraIntrinsics,
    mask: &[bool],
    gt_grasps: &[Grasp],
    anchors: &AnchorSet,
    cfg: &DatasetConfig,
) -> Result<Dataset> {
    if cfg.n == 0 {
        return Err(NgsError::Config("need at least one patch".into()));
    }
    if !(cfg.depth_jitter >= 0.0) {
        return Err(NgsError::Config(format!("depth jitter must be non-negative, got {}", cfg.depth_jitter)));
    }
    anchors.validate()?;
    let dilated = dilate_mask(mask, pm.width, pm.height, cfg.sigma, cfg.thresh)?;
    let pixels: Vec<usize> = (0..dilated.len()).filter(|&i| dilated[i] && pm.valid[i]).collect();
    if pixels.is_empty() {
        return Ok(Dataset { records: Vec::new(), empty_mask: true });
    }
    let records = (0..cfg.n)
        .into_par_iter()
        .map(|index| {
            let mut rng = record_rng(cfg.seed, index);
            let pix = pixels[rng.random_range(0..pixels.len())];
            let (u, v) = (pix % pm.width, pix / pm.width);
            let jitter = if cfg.depth_jitter > 0.0 { rng.random_range(-cfg.depth_jitter..=cfg.depth_jitter) } else { 0.0 };
            let w_ref = if cfg.randomize_scale { randomize_scale(cfg.w_ref, &mut rng)? } else { cfg.w_ref };
            let z = pm.xyz[pix].z + jitter;
            let spec = PatchSpec::at_depth(k, u as f64, v as f64, z, w_ref, cfg.patch_size)?;
            let ctx = NGSContext::new(spec.center_3d, w_ref)?;
            let patch = normalize_patch(&extract_patch(frame, pm, &spec)?, &ctx)?;
            let max_width = cfg.w_gripper / w_ref;
            let grasps: Vec<NormalizedGrasp> =
                normalize_grasps(gt_grasps, &ctx).into_iter().filter(|g| g.w_star <= max_width).collect();
            let target = encode(&grasps, anchors);
            Ok(DatasetRecord { index, center_px: (u, v), ctx, patch, grasps, target })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { records, empty_mask: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub index: usize,
    pub seed: u64,
    pub stream: u64,
    pub center_px: [usize; 2],
    pub patch_size: usize,
    pub ctx: ContextRecord,
    pub anchors: AnchorSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub n_gamma: usize,
    pub n_beta: usize,
    pub n_theta: usize,
    /// Graspable, theta scores, residual, width, offset x/y/z.
    pub channels: Vec<Vec<f64>>,
    pub grasps: Vec<NormalizedGraspRecord>,
}

/// Planes of a patch: R, G, B, X, Y, Z, then validity as 0/1.
pub fn patch_planes(patch: &NormalizedPatch) -> Vec<Plane> {
    let s = patch.size;
    let mut planes: Vec<Plane> = (0..6)
        .map(|c| Plane { width: s, height: s, data: patch.rgbxyz.iter().map(|px| px[c] as f32).collect() })
        .collect();
    planes.push(Plane { width: s, height: s, data: patch.valid.iter().map(|&b| f32::from(u8::from(b))).collect() });
    planes
}

/// Writes every record under `dir/<scene>/` and returns the file paths in order.
pub fn write_dataset(dir: &Path, scene: &str, dataset: &Dataset, anchors: &AnchorSet, seed: u64) -> Result<Vec<PathBuf>> {
    let shard = dir.join(scene);
    fs::create_dir_all(&shard)?;
    let mut paths = Vec::new();
    for r in &dataset.records {
        let stem = shard.join(format!("record_{:05}", r.index));
        let header = RecordHeader {
            index: r.index,
            seed,
            stream: r.index as u64,
            center_px: [r.center_px.0, r.center_px.1],
            patch_size: r.patch.size,
            ctx: ContextRecord { center: r.ctx.center.into(), w_ref: r.ctx.w_ref },
            anchors: anchors.clone(),
        };
        let hdr = stem.with_extension("hdr.json");
        let mut line = serde_json::to_string(&header)?;
        line.push('\n');
        fs::write(&hdr, line)?;

        let pfm = stem.with_extension("pfm");
        let mut out = BufWriter::new(fs::File::create(&pfm)?);
        for plane in patch_planes(&r.patch) {
            write_pfm(&mut out, &plane)?;
        }
        out.flush()?;

        let target = TargetRecord {
            n_gamma: r.target.n_gamma,
            n_beta: r.target.n_beta,
            n_theta: r.target.n_theta,
            channels: r.target.channel_planes(),
            grasps: r.grasps.iter().map(|g| NormalizedGraspRecord::new(g, &r.ctx)).collect(),
        };
        let tgt = stem.with_extension("target.json");
        fs::write(&tgt, serde_json::to_string(&target)? + "\n")?;
        paths.extend([hdr, pfm, tgt]);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_examples() {
        let (w, h) = (21, 21);
        assert!(dilate_mask(&vec![false; w * h], w, h, 2.0, 0.1).unwrap().iter().all(|&b| !b));
        assert!(dilate_mask(&vec![true; w * h], w, h, 2.0, 0.1).unwrap().iter().all(|&b| b));
        let mut one = vec![false; w * h];
        one[10 * w + 10] = true;
        let d = dilate_mask(&one, w, h, 2.0, 0.1).unwrap();
        // exp(-r^2 / 8) >= 0.1 exactly when r^2 <= 8 ln 10.
        let r2 = 8.0 * 10f64.ln();
        for y in 0..h {
            for x in 0..w {
                let dd = (x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2);
                assert_eq!(d[y * w + x], dd <= r2, "({x}, {y})");
            }
        }
        assert!(dilate_mask(&one, w, h, 0.0, 0.1).is_err());
        assert!(dilate_mask(&one, w, h, 1.0, 1.0).is_err());
    }
}
