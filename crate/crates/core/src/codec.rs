//! Rotation-anchor heatmaps over `(gamma, beta)` with per-cell theta
//! classification, theta residual, width and centre-offset regression.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{NgsError, Result};
use crate::geometry::{euler_to_matrix, geodesic_angle, EulerRotation, Grasp};
use crate::ngs::{denormalize_grasp, NGSContext, NormalizedGrasp, GRASP_BALL_RADIUS};

pub const DEFAULT_ANCHOR_COUNT: usize = 7;

const LLOYD_TOL: f64 = 1e-4;
const LLOYD_MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub gammas: Vec<f64>,
    pub betas: Vec<f64>,
    pub thetas: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorMode {
    Uniform,
    /// Anchors pulled towards the label distribution by 1D Lloyd iteration.
    Shifted,
}

/// Cell centres of `count` equal bins over `[-pi/2, pi/2]`.
pub fn uniform_anchors(count: usize) -> Vec<f64> {
    (0..count).map(|i| -FRAC_PI_2 + (i as f64 + 0.5) * PI / count as f64).collect()
}

/// Index of the nearest anchor; exact ties go to the lower index.
pub fn nearest_anchor(anchors: &[f64], angle: f64) -> usize {
    let mut best = 0;
    for (i, a) in anchors.iter().enumerate().skip(1) {
        if (angle - a).abs() < (angle - anchors[best]).abs() {
            best = i;
        }
    }
    best
}

/// One-dimensional Lloyd iteration from uniform initial anchors. Anchors
/// with no assigned samples stay where they are.
pub fn lloyd_anchors(count: usize, samples: &[f64]) -> Vec<f64> {
    let mut anchors = uniform_anchors(count);
    for _ in 0..LLOYD_MAX_ITERS {
        let mut sums = vec![0.0; count];
        let mut counts = vec![0usize; count];
        for &s in samples {
            let i = nearest_anchor(&anchors, s);
            sums[i] += s;
            counts[i] += 1;
        }
        let mut max_shift: f64 = 0.0;
        for i in 0..count {
            if counts[i] > 0 {
                let mean = sums[i] / counts[i] as f64;
                max_shift = max_shift.max((mean - anchors[i]).abs());
                anchors[i] = mean;
            }
        }
        if max_shift < LLOYD_TOL {
            break;
        }
    }
    anchors
}

impl AnchorSet {
    pub fn uniform(count: usize) -> Self {
        let a = uniform_anchors(count);
        Self { gammas: a.clone(), betas: a.clone(), thetas: a }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [("gamma", &self.gammas), ("beta", &self.betas), ("theta", &self.thetas)] {
            if axis.is_empty() {
                return Err(NgsError::Config(format!("{name} anchors are empty")));
            }
            if axis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(NgsError::Config(format!("{name} anchors are not strictly increasing")));
            }
            if axis.iter().any(|a| a.abs() > FRAC_PI_2) {
                return Err(NgsError::Config(format!("{name} anchors leave [-pi/2, pi/2]")));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.gammas.len() * self.betas.len()
    }

    /// Largest distance from anchor `i` to the edge of its nearest-anchor
    /// interval within `[-pi/2, pi/2]`.
    pub fn cell_radius(axis: &[f64], i: usize) -> f64 {
        let lo = if i == 0 { -FRAC_PI_2 } else { (axis[i - 1] + axis[i]) / 2.0 };
        let hi = if i + 1 == axis.len() { FRAC_PI_2 } else { (axis[i] + axis[i + 1]) / 2.0 };
        (axis[i] - lo).max(hi - axis[i])
    }
}

/// Builds the anchor set; shifted mode needs the label rotations.
pub fn build_anchors(count: usize, mode: AnchorMode, gt: Option<&[EulerRotation]>) -> Result<AnchorSet> {
    if count < 2 {
        return Err(NgsError::Config(format!("need at least two anchors per axis, got {count}")));
    }
    let set = match mode {
        AnchorMode::Uniform => AnchorSet::uniform(count),
        AnchorMode::Shifted => {
            let gt = gt.ok_or_else(|| NgsError::Config("shifted anchors require label angles".into()))?;
            let axis = |f: fn(&EulerRotation) -> f64| lloyd_anchors(count, &gt.iter().map(f).collect::<Vec<_>>());
            AnchorSet { gammas: axis(|r| r.gamma), betas: axis(|r| r.beta), thetas: axis(|r| r.theta) }
        }
    };
    set.validate()?;
    Ok(set)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatCell {
    pub graspable: f64,
    pub theta_scores: Vec<f64>,
    pub theta_residual: f64,
    pub width: f64,
    pub offset: Vector3<f64>,
}

impl HeatCell {
    fn empty(theta_count: usize) -> Self {
        Self {
            graspable: 0.0,
            theta_scores: vec![0.0; theta_count],
            theta_residual: 0.0,
            width: 0.0,
            offset: Vector3::zeros(),
        }
    }
}

/// Grid of cells indexed `[gamma_index * n_beta + beta_index]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationHeatmap {
    pub n_gamma: usize,
    pub n_beta: usize,
    pub n_theta: usize,
    pub cells: Vec<HeatCell>,
}

impl RotationHeatmap {
    pub fn zeros(anchors: &AnchorSet) -> Self {
        let (n_gamma, n_beta, n_theta) = (anchors.gammas.len(), anchors.betas.len(), anchors.thetas.len());
        Self { n_gamma, n_beta, n_theta, cells: vec![HeatCell::empty(n_theta); n_gamma * n_beta] }
    }

    pub fn cell(&self, gi: usize, bi: usize) -> &HeatCell {
        &self.cells[gi * self.n_beta + bi]
    }

    pub fn cell_mut(&mut self, gi: usize, bi: usize) -> &mut HeatCell {
        &mut self.cells[gi * self.n_beta + bi]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_gamma == other.n_gamma && self.n_beta == other.n_beta && self.n_theta == other.n_theta
    }

    pub fn positives(&self) -> usize {
        self.cells.iter().filter(|c| c.graspable >= 0.5).count()
    }

    /// Channel planes in order: graspable, theta scores, residual, width,
    /// offset x/y/z. Each plane is `n_gamma` rows by `n_beta` columns.
    pub fn channel_planes(&self) -> Vec<Vec<f64>> {
        let mut planes = vec![self.cells.iter().map(|c| c.graspable).collect::<Vec<_>>()];
        for t in 0..self.n_theta {
            planes.push(self.cells.iter().map(|c| c.theta_scores[t]).collect());
        }
        planes.push(self.cells.iter().map(|c| c.theta_residual).collect());
        planes.push(self.cells.iter().map(|c| c.width).collect());
        for axis in 0..3 {
            planes.push(self.cells.iter().map(|c| c.offset[axis]).collect());
        }
        planes
    }
}

/// Writes each grasp into its nearest `(gamma, beta)` cell. When two grasps
/// share a cell the higher score wins; equal scores keep the earlier grasp.
pub fn encode(grasps: &[NormalizedGrasp], anchors: &AnchorSet) -> RotationHeatmap {
    encode_cells(grasps, anchors, false)
}

/// Like [`encode`], but the graspable channel carries each winner's score
/// instead of a hard one, which keeps predicted heatmaps rankable.
pub fn encode_scored(grasps: &[NormalizedGrasp], anchors: &AnchorSet) -> RotationHeatmap {
    encode_cells(grasps, anchors, true)
}

fn encode_cells(grasps: &[NormalizedGrasp], anchors: &AnchorSet, scored: bool) -> RotationHeatmap {
    let mut hm = RotationHeatmap::zeros(anchors);
    let mut owner: Vec<Option<f64>> = vec![None; hm.cells.len()];
    for g in grasps {
        let gi = nearest_anchor(&anchors.gammas, g.rot.gamma);
        let bi = nearest_anchor(&anchors.betas, g.rot.beta);
        let idx = gi * hm.n_beta + bi;
        if matches!(owner[idx], Some(s) if s >= g.score) {
            continue;
        }
        owner[idx] = Some(g.score);
        let ti = nearest_anchor(&anchors.thetas, g.rot.theta);
        let cell = &mut hm.cells[idx];
        cell.graspable = if scored { g.score.clamp(0.0, 1.0) } else { 1.0 };
        cell.theta_scores.iter_mut().for_each(|s| *s = 0.0);
        cell.theta_scores[ti] = 1.0;
        cell.theta_residual = g.rot.theta - anchors.thetas[ti];
        cell.width = g.w_star;
        cell.offset = g.t_star;
    }
    hm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeParams {
    pub score_thresh: f64,
    pub top_k: usize,
    pub w_gripper: f64,
}

/// Normalized grasps for every cell scoring above the threshold, best first.
pub fn decode_normalized(hm: &RotationHeatmap, anchors: &AnchorSet, params: &DecodeParams) -> Vec<NormalizedGrasp> {
    let mut out = Vec::new();
    for gi in 0..hm.n_gamma {
        for bi in 0..hm.n_beta {
            let cell = hm.cell(gi, bi);
            if cell.graspable <= params.score_thresh || cell.offset.norm() >= GRASP_BALL_RADIUS {
                continue;
            }
            let mut ti = 0;
            for (i, s) in cell.theta_scores.iter().enumerate() {
                if *s > cell.theta_scores[ti] {
                    ti = i;
                }
            }
            let theta = (anchors.thetas[ti] + cell.theta_residual).clamp(-FRAC_PI_2, FRAC_PI_2);
            out.push(NormalizedGrasp {
                t_star: cell.offset,
                rot: EulerRotation { theta, gamma: anchors.gammas[gi], beta: anchors.betas[bi] },
                w_star: cell.width,
                score: cell.graspable,
            });
        }
    }
    // Stable sort keeps row-major order among equal scores.
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(params.top_k);
    out
}

/// Decodes and maps back to the camera frame, clamping widths to the gripper.
pub fn decode(hm: &RotationHeatmap, anchors: &AnchorSet, ctx: &NGSContext, params: &DecodeParams) -> Vec<Grasp> {
    decode_normalized(hm, anchors, params)
        .iter()
        .map(|g| {
            let mut out = denormalize_grasp(g, ctx);
            out.width = out.width.clamp(0.0, params.w_gripper);
            out
        })
        .collect()
}

/// Greedy grasp non-maximum suppression. A grasp is dropped when a kept,
/// higher-scoring grasp is both closer than `trans_thresh` and within
/// `rot_thresh` geodesic angle.
pub fn grasp_nms(grasps: &[Grasp], trans_thresh: f64, rot_thresh: f64) -> Vec<Grasp> {
    grasp_nms_indices(grasps, trans_thresh, rot_thresh).into_iter().map(|i| grasps[i]).collect()
}

/// Indices of the [`grasp_nms`] survivors, best first.
pub fn grasp_nms_indices(grasps: &[Grasp], trans_thresh: f64, rot_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grasps.len()).collect();
    order.sort_by(|&a, &b| grasps[b].score.total_cmp(&grasps[a].score));
    let mats: Vec<_> = grasps.iter().map(|g| euler_to_matrix(&g.rot)).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&j| {
            grasps[i].t.metric_distance(&grasps[j].t) < trans_thresh && geodesic_angle(&mats[i], &mats[j]) < rot_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ng(theta: f64, gamma: f64, beta: f64, t: Vector3<f64>, w: f64, score: f64) -> NormalizedGrasp {
        NormalizedGrasp { t_star: t, rot: EulerRotation { theta, gamma, beta }, w_star: w, score }
    }

    #[test]
    fn uniform_two_anchors() {
        let a = build_anchors(2, AnchorMode::Uniform, None).unwrap();
        assert!((a.gammas[0] + PI / 4.0).abs() < 1e-15 && (a.gammas[1] - PI / 4.0).abs() < 1e-15);
        assert!(build_anchors(1, AnchorMode::Uniform, None).is_err());
        assert!(matches!(build_anchors(3, AnchorMode::Shifted, None), Err(NgsError::Config(_))));
    }

    #[test]
    fn shifted_anchors_fixed_point() {
        let gt = vec![EulerRotation { theta: 0.3, gamma: 0.3, beta: 0.3 }; 20];
        let a = build_anchors(7, AnchorMode::Shifted, Some(&gt)).unwrap();
        let moved = a.gammas.iter().filter(|&&x| (x - 0.3).abs() < 1e-12).count();
        assert_eq!(moved, 1);
        assert_eq!(a.gammas, a.betas);
    }

    /// Optimal 1D two-means by enumerating every split of the sorted samples.
    fn brute_two_means(samples: &[f64]) -> (f64, f64) {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let cost = |x: &[f64]| {
            let m = mean(x);
            x.iter().map(|v| (v - m).powi(2)).sum::<f64>()
        };
        (1..s.len())
            .map(|k| (cost(&s[..k]) + cost(&s[k..]), mean(&s[..k]), mean(&s[k..])))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, a, b)| (a, b))
            .unwrap()
    }

    #[test]
    fn shifted_anchors_match_two_means_oracle() {
        let mut samples = vec![-0.5; 10];
        samples.extend(vec![0.5; 10]);
        let got = lloyd_anchors(2, &samples);
        let (lo, hi) = brute_two_means(&samples);
        assert!((got[0] - lo).abs() < 1e-3 && (got[1] - hi).abs() < 1e-3);
        assert!((got[0] + 0.5).abs() < 1e-3 && (got[1] - 0.5).abs() < 1e-3);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy: Vec<f64> = (0..200)
            .map(|i| if i % 2 == 0 { -0.6 } else { 0.4 } + rng.random_range(-0.1..0.1))
            .collect();
        let got = lloyd_anchors(2, &noisy);
        let (lo, hi) = brute_two_means(&noisy);
        assert!((got[0] - lo).abs() < 1e-3 && (got[1] - hi).abs() < 1e-3);
    }

    #[test]
    fn encode_examples() {
        let anchors = AnchorSet::uniform(7);
        let hm = encode(&[], &anchors);
        assert!(hm.cells.iter().all(|c| c.graspable == 0.0));

        let (t3, g2, b5) = (anchors.thetas[3], anchors.gammas[2], anchors.betas[5]);
        let hm = encode(&[ng(t3, g2, b5, Vector3::new(0.01, 0.0, 0.0), 0.3, 0.9)], &anchors);
        let cell = hm.cell(2, 5);
        assert_eq!(cell.graspable, 1.0);
        assert_eq!(cell.theta_residual, 0.0);
        assert_eq!(cell.theta_scores[3], 1.0);
        assert_eq!(hm.positives(), 1);
    }

    #[test]
    fn midway_angle_goes_to_lower_anchor() {
        // Exhaustive check over every adjacent anchor pair.
        let anchors = AnchorSet { gammas: vec![-1.0, -0.5, 0.0, 0.5, 1.0], ..AnchorSet::uniform(5) };
        for i in 0..4 {
            let mid = (anchors.gammas[i] + anchors.gammas[i + 1]) / 2.0;
            assert_eq!(nearest_anchor(&anchors.gammas, mid), i);
            let hm = encode(&[ng(0.0, mid, 0.0, Vector3::zeros(), 0.1, 1.0)], &anchors);
            assert_eq!(hm.cell(i, 2).graspable, 1.0);
        }
    }

    #[test]
    fn collision_keeps_higher_score() {
        let anchors = AnchorSet::uniform(7);
        let a = ng(0.1, 0.0, 0.0, Vector3::new(0.01, 0.0, 0.0), 0.1, 0.4);
        let b = ng(-0.2, 0.05, 0.0, Vector3::new(0.0, 0.02, 0.0), 0.2, 0.8);
        for input in [vec![a, b], vec![b, a]] {
            let hm = encode(&input, &anchors);
            assert_eq!(hm.positives(), 1);
            assert_eq!(hm.cell(3, 3).width, 0.2);
        }
    }

    fn random_cells(seed: u64) -> (AnchorSet, Vec<NormalizedGrasp>) {
        let anchors = AnchorSet::uniform(7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grasps = Vec::new();
        for gi in 0..7 {
            for bi in 0..7 {
                if rng.random_bool(0.3) {
                    let th = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
                    let t = Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
                    grasps.push(ng(th, anchors.gammas[gi], anchors.betas[bi], t, rng.random_range(0.0..0.5), rng.random_range(0.1..1.0)));
                }
            }
        }
        (anchors, grasps)
    }

    #[test]
    fn decode_inverts_encode() {
        let (anchors, grasps) = random_cells(4);
        let params = DecodeParams { score_thresh: 0.5, top_k: 1000, w_gripper: 0.1 };
        let decoded = decode_normalized(&encode(&grasps, &anchors), &anchors, &params);
        assert_eq!(decoded.len(), grasps.len());
        for g in &grasps {
            let d = decoded.iter().find(|d| d.rot.gamma == g.rot.gamma && d.rot.beta == g.rot.beta).unwrap();
            assert!((d.rot.theta - g.rot.theta).abs() < 1e-9);
            assert!((d.t_star - g.t_star).abs().max() < 1e-9);
            assert!((d.w_star - g.w_star).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_threshold_and_top_k() {
        let anchors = AnchorSet::uniform(3);
        let mut hm = RotationHeatmap::zeros(&anchors);
        for (gi, bi, s) in [(0, 0, 0.7), (1, 2, 0.9), (2, 1, 0.8), (2, 2, 0.2)] {
            hm.cell_mut(gi, bi).graspable = s;
        }
        let ctx = NGSContext::new(Vector3::new(0.0, 0.0, 0.5), 0.2).unwrap();
        let none = decode(&hm, &anchors, &ctx, &DecodeParams { score_thresh: 0.95, top_k: 5, w_gripper: 0.1 });
        assert!(none.is_empty());
        let two = decode(&hm, &anchors, &ctx, &DecodeParams { score_thresh: 0.5, top_k: 2, w_gripper: 0.1 });
        let mut oracle: Vec<f64> = vec![0.7, 0.9, 0.8];
        oracle.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(two.iter().map(|g| g.score).collect::<Vec<_>>(), oracle[..2].to_vec());
        assert_eq!(two[0].t, ctx.center);
    }

    #[test]
    fn decode_clamps_width() {
        let anchors = AnchorSet::uniform(3);
        let mut hm = RotationHeatmap::zeros(&anchors);
        hm.cell_mut(1, 1).graspable = 1.0;
        hm.cell_mut(1, 1).width = 0.9;
        let ctx = NGSContext::new(Vector3::zeros(), 0.2).unwrap();
        let out = decode(&hm, &anchors, &ctx, &DecodeParams { score_thresh: 0.5, top_k: 5, w_gripper: 0.1 });
        assert_eq!(out[0].width, 0.1);
    }

    fn grasp_at(t: Vector3<f64>, theta: f64, score: f64) -> Grasp {
        Grasp { t, rot: EulerRotation { theta, gamma: 0.0, beta: 0.0 }, width: 0.05, score }
    }

    #[test]
    fn nms_examples() {
        let g = grasp_at(Vector3::zeros(), 0.0, 0.5);
        assert_eq!(grasp_nms(&[g, g], 0.02, PI / 6.0).len(), 1);
        let far = grasp_at(Vector3::new(1.0, 0.0, 0.0), 0.0, 0.4);
        assert_eq!(grasp_nms(&[g, far], 0.02, PI / 6.0).len(), 2);
        // Close in translation but rotated beyond the threshold.
        let turned = grasp_at(Vector3::zeros(), 1.0, 0.4);
        assert_eq!(grasp_nms(&[g, turned], 0.02, PI / 6.0).len(), 2);
    }
}
