//! Depth-adaptive patch extraction and foreground centre localization.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NgsError, Result};
use crate::geometry::{CameraIntrinsics, PointMap, RGBDFrame};

/// Pixel side length of a patch whose metric extent is `w_ref` at depth `z_center`.
pub fn adaptive_side(z_center: f64, focal: f64, w_ref: f64) -> Result<f64> {
    if !(z_center > 0.0 && focal > 0.0 && w_ref > 0.0) {
        return Err(NgsError::Domain(format!(
            "adaptive side needs positive inputs (z={z_center}, focal={focal}, w_ref={w_ref})"
        )));
    }
    Ok(w_ref * focal / z_center)
}

/// Where and how large a patch is cut from the source image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSpec {
    pub center_px: (f64, f64),
    pub center_3d: Vector3<f64>,
    pub side_px: f64,
    pub out_size: usize,
}

impl PatchSpec {
    pub fn new(center_px: (f64, f64), center_3d: Vector3<f64>, side_px: f64, out_size: usize) -> Result<Self> {
        if !(side_px > 0.0 && side_px.is_finite()) {
            return Err(NgsError::Domain(format!("patch side must be positive, got {side_px}")));
        }
        if out_size < 8 {
            return Err(NgsError::Config(format!("patch size {out_size} is below the minimum of 8")));
        }
        Ok(Self { center_px, center_3d, side_px, out_size })
    }

    /// Patch centred on pixel `(u, v)` at depth `z`, sized for receptive field `w_ref`.
    pub fn at_depth(k: &CameraIntrinsics, u: f64, v: f64, z: f64, w_ref: f64, out_size: usize) -> Result<Self> {
        let side = adaptive_side(z, k.focal(), w_ref)?;
        Self::new((u, v), k.deproject_pixel(u, v, z), side, out_size)
    }

    /// Patch centred on a valid pixel of a point map.
    pub fn at_pixel(pm: &PointMap, k: &CameraIntrinsics, u: usize, v: usize, w_ref: f64, out_size: usize) -> Result<Self> {
        let p = pm
            .point(u, v)
            .ok_or_else(|| NgsError::Domain(format!("patch centre ({u}, {v}) has no valid depth")))?;
        Self::new((u as f64, v as f64), p, adaptive_side(p.z, k.focal(), w_ref)?, out_size)
    }

    /// Continuous source coordinate of output sample `i` along one axis.
    #[inline]
    pub fn sample_coord(&self, center: f64, i: usize) -> f64 {
        let step = self.side_px / self.out_size as f64;
        center + (i as f64 - (self.out_size / 2) as f64) * step
    }
}

/// An `S x S` crop in RGBXYZ form with camera-frame XYZ.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPatch {
    pub rgbxyz: Vec<[f64; 6]>,
    pub valid: Vec<bool>,
    pub spec: PatchSpec,
}

impl RawPatch {
    pub fn size(&self) -> usize {
        self.spec.out_size
    }

    pub fn center_index(&self) -> usize {
        let c = self.size() / 2;
        c * self.size() + c
    }

    pub fn xyz(&self, i: usize) -> Vector3<f64> {
        let p = &self.rgbxyz[i];
        Vector3::new(p[3], p[4], p[5])
    }
}

fn bilinear_rgb(frame: &RGBDFrame, u: f64, v: f64) -> [f64; 3] {
    let max_u = (frame.width - 1) as f64;
    let max_v = (frame.height - 1) as f64;
    let (u, v) = (u.clamp(0.0, max_u), v.clamp(0.0, max_v));
    let (u0, v0) = (u.floor() as usize, v.floor() as usize);
    let (u1, v1) = ((u0 + 1).min(frame.width - 1), (v0 + 1).min(frame.height - 1));
    let (fu, fv) = (u - u0 as f64, v - v0 as f64);
    let px = |uu: usize, vv: usize| frame.rgb[frame.index(uu, vv)];
    let (a, b, c, d) = (px(u0, v0), px(u1, v0), px(u0, v1), px(u1, v1));
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let top = a[ch] * (1.0 - fu) + b[ch] * fu;
        let bottom = c[ch] * (1.0 - fu) + d[ch] * fu;
        out[ch] = top * (1.0 - fv) + bottom * fv;
    }
    out
}

/// Nearest source pixel of a continuous coordinate, if inside the image.
#[inline]
fn nearest_pixel(frame_w: usize, frame_h: usize, u: f64, v: f64) -> Option<(usize, usize)> {
    let (ru, rv) = ((u + 0.5).floor(), (v + 0.5).floor());
    (ru >= 0.0 && rv >= 0.0 && ru < frame_w as f64 && rv < frame_h as f64).then_some((ru as usize, rv as usize))
}

/// Resamples the square window described by `spec` to `S x S`.
///
/// Colour is bilinear; XYZ and validity are nearest-neighbour so no point is
/// ever interpolated across a depth edge. Samples outside the image are invalid.
pub fn extract_patch(frame: &RGBDFrame, pm: &PointMap, spec: &PatchSpec) -> Result<RawPatch> {
    let (cu, cv) = spec.center_px;
    if !(cu >= -0.5 && cv >= -0.5 && cu < frame.width as f64 - 0.5 && cv < frame.height as f64 - 0.5) {
        return Err(NgsError::Domain(format!("patch centre ({cu}, {cv}) outside the image")));
    }
    if pm.width != frame.width || pm.height != frame.height {
        return Err(NgsError::Config("point map and frame differ in size".into()));
    }
    let s = spec.out_size;
    let mut rgbxyz = vec![[0.0; 6]; s * s];
    let mut valid = vec![false; s * s];
    for row in 0..s {
        let v = spec.sample_coord(cv, row);
        for col in 0..s {
            let u = spec.sample_coord(cu, col);
            let Some((nu, nv)) = nearest_pixel(frame.width, frame.height, u, v) else { continue };
            let out = &mut rgbxyz[row * s + col];
            let [r, g, b] = bilinear_rgb(frame, u, v);
            out[..3].copy_from_slice(&[r, g, b]);
            let src = pm.index(nu, nv);
            if pm.valid[src] {
                let p = pm.xyz[src];
                out[3..].copy_from_slice(&[p.x, p.y, p.z]);
                valid[row * s + col] = true;
            }
        }
    }
    Ok(RawPatch { rgbxyz, valid, spec: *spec })
}

/// Table plane in the camera frame: `height(p) = normal . p - offset`,
/// with `normal` pointing away from the table towards free space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TablePlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl TablePlane {
    pub fn new(normal: Vector3<f64>, point_on_plane: Vector3<f64>) -> Result<Self> {
        let n = normal
            .try_normalize(1e-12)
            .ok_or_else(|| NgsError::Config("table normal must be non-zero".into()))?;
        Ok(Self { normal: n, offset: n.dot(&point_on_plane) })
    }

    /// Plane perpendicular to the optical axis at depth `table_depth`.
    pub fn facing_camera(table_depth: f64) -> Self {
        Self { normal: -Vector3::z(), offset: -table_depth }
    }

    pub fn height(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Center {
    pub pixel: (usize, usize),
    pub point: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterSet {
    pub centers: Vec<Center>,
    /// Fewer foreground points than requested centres.
    pub shortfall: bool,
}

impl CenterSet {
    pub fn specs(&self, k: &CameraIntrinsics, w_ref: f64, out_size: usize) -> Result<Vec<PatchSpec>> {
        self.centers
            .iter()
            .map(|c| {
                let (u, v) = (c.pixel.0 as f64, c.pixel.1 as f64);
                PatchSpec::new((u, v), c.point, adaptive_side(c.point.z, k.focal(), w_ref)?, out_size)
            })
            .collect()
    }
}

fn lex_less(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    (a.x, a.y, a.z) < (b.x, b.y, b.z)
}

/// Greedy max-min sampling of `k` indices starting from `first`.
/// Ties go to the lexicographically smallest point so the result depends
/// only on the point set, not its order.
pub fn farthest_point_sampling(points: &[Vector3<f64>], k: usize, first: usize) -> Vec<usize> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let k = k.min(points.len());
    let mut chosen = vec![first];
    let mut min_d2: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while chosen.len() < k {
        let mut best = usize::MAX;
        for (i, &d) in min_d2.iter().enumerate() {
            if best == usize::MAX
                || d > min_d2[best]
                || (d == min_d2[best] && lex_less(&points[i], &points[best]))
            {
                best = i;
            }
        }
        chosen.push(best);
        let anchor = points[best];
        for (d, p) in min_d2.iter_mut().zip(points) {
            *d = d.min((p - anchor).norm_squared());
        }
    }
    chosen
}

/// Foreground farthest-point centres: keeps valid points more than `margin`
/// above the table, picks the first one with a seeded draw, then samples
/// `k` centres by farthest-point sampling.
pub fn locate_centers(pm: &PointMap, table: &TablePlane, margin: f64, k: usize, seed: u64) -> Result<CenterSet> {
    if k == 0 {
        return Err(NgsError::Config("at least one centre must be requested".into()));
    }
    let mut pixels = Vec::new();
    let mut points = Vec::new();
    for v in 0..pm.height {
        for u in 0..pm.width {
            if let Some(p) = pm.point(u, v) {
                if table.height(&p) > margin {
                    pixels.push((u, v));
                    points.push(p);
                }
            }
        }
    }
    let shortfall = points.len() < k;
    if points.is_empty() {
        return Ok(CenterSet { centers: Vec::new(), shortfall });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..points.len());
    let centers = farthest_point_sampling(&points, k, first)
        .into_iter()
        .map(|i| Center { pixel: pixels[i], point: points[i] })
        .collect();
    Ok(CenterSet { centers, shortfall })
}
