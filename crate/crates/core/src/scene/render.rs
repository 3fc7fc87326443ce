//! Ray casting against the table half-space and primitives.

use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{CameraRig, Primitive, Scene, Shape, TABLE_COLOR};
use crate::error::{NgsError, Result};
use crate::geometry::RGBDFrame;

/// Parameter interval a ray spends inside one solid, with outward normals
/// at both ends (world frame). `id` is `None` for the table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct SolidSpan {
    pub t_in: f64,
    pub n_in: Vector3<f64>,
    pub t_out: f64,
    pub n_out: Vector3<f64>,
    pub id: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceHit {
    pub t: f64,
    pub normal: Vector3<f64>,
    pub id: Option<usize>,
}

const PARALLEL_EPS: f64 = 1e-15;

/// Interval of `o + t d` inside the slab `|x| <= h`, with the outward
/// normal sign at entry and exit.
fn slab(o: f64, d: f64, h: f64) -> Option<(f64, f64, f64, f64)> {
    if d.abs() < PARALLEL_EPS {
        return (o.abs() <= h).then_some((f64::NEG_INFINITY, 0.0, f64::INFINITY, 0.0));
    }
    let (t1, t2) = ((-h - o) / d, (h - o) / d);
    let s = d.signum();
    Some((t1.min(t2), -s, t1.max(t2), s))
}

fn primitive_span(p: &Primitive, o: &Vector3<f64>, d: &Vector3<f64>, id: usize) -> Option<SolidSpan> {
    let rot = p.pose.rotation;
    match p.shape {
        Shape::Sphere { radius } => {
            let c = p.pose.translation.vector;
            let oc = o - c;
            let a = d.norm_squared();
            let b = oc.dot(d);
            let disc = b * b - a * (oc.norm_squared() - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            // Numerically stable pair of roots.
            let q = if b >= 0.0 { -(b + sq) } else { -b + sq };
            let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, (oc.norm_squared() - radius * radius) / q) };
            let (t_in, t_out) = (r1.min(r2), r1.max(r2));
            Some(SolidSpan {
                t_in,
                n_in: (oc + d * t_in) / radius,
                t_out,
                n_out: (oc + d * t_out) / radius,
                id: Some(id),
            })
        }
        Shape::Box { size } => {
            let ol = p.pose.inverse_transform_point(&Point3::from(*o)).coords;
            let dl = p.pose.inverse_transform_vector(d);
            let (mut t_in, mut t_out) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut n_in, mut n_out) = (Vector3::zeros(), Vector3::zeros());
            for axis in 0..3 {
                let (a, sa, b, sb) = slab(ol[axis], dl[axis], size[axis] / 2.0)?;
                if a > t_in {
                    t_in = a;
                    n_in = Vector3::ith(axis, sa);
                }
                if b < t_out {
                    t_out = b;
                    n_out = Vector3::ith(axis, sb);
                }
            }
            (t_in <= t_out).then(|| SolidSpan { t_in, n_in: rot * n_in, t_out, n_out: rot * n_out, id: Some(id) })
        }
        Shape::Cylinder { radius, height } => {
            let ol = p.pose.inverse_transform_point(&Point3::from(*o)).coords;
            let dl = p.pose.inverse_transform_vector(d);
            let a = dl.x * dl.x + dl.y * dl.y;
            let radial_at = |t: f64| {
                let q = ol + dl * t;
                Vector3::new(q.x, q.y, 0.0) / radius
            };
            let (mut t_in, mut t_out, mut n_in, mut n_out);
            if a < PARALLEL_EPS {
                if ol.x * ol.x + ol.y * ol.y > radius * radius {
                    return None;
                }
                (t_in, t_out) = (f64::NEG_INFINITY, f64::INFINITY);
                (n_in, n_out) = (Vector3::zeros(), Vector3::zeros());
            } else {
                let b = ol.x * dl.x + ol.y * dl.y;
                let c = ol.x * ol.x + ol.y * ol.y - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let q = if b >= 0.0 { -(b + sq) } else { -b + sq };
                let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
                (t_in, t_out) = (r1.min(r2), r1.max(r2));
                (n_in, n_out) = (radial_at(t_in), radial_at(t_out));
            }
            let (a, sa, b, sb) = slab(ol.z, dl.z, height / 2.0)?;
            if a > t_in {
                t_in = a;
                n_in = Vector3::new(0.0, 0.0, sa);
            }
            if b < t_out {
                t_out = b;
                n_out = Vector3::new(0.0, 0.0, sb);
            }
            (t_in <= t_out).then(|| SolidSpan { t_in, n_in: rot * n_in, t_out, n_out: rot * n_out, id: Some(id) })
        }
    }
}

fn table_span(table_z: f64, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<SolidSpan> {
    let up = Vector3::z();
    if d.z.abs() < PARALLEL_EPS {
        return (o.z <= table_z).then_some(SolidSpan {
            t_in: f64::NEG_INFINITY,
            n_in: up,
            t_out: f64::INFINITY,
            n_out: up,
            id: None,
        });
    }
    let t = (table_z - o.z) / d.z;
    let (t_in, t_out) = if d.z < 0.0 { (t, f64::INFINITY) } else { (f64::NEG_INFINITY, t) };
    Some(SolidSpan { t_in, n_in: up, t_out, n_out: up, id: None })
}

impl Scene {
    /// Every solid the line `o + t d` passes through.
    pub(crate) fn spans(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Vec<SolidSpan> {
        let mut out: Vec<SolidSpan> = self
            .primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| primitive_span(p, o, d, i))
            .collect();
        out.extend(table_span(self.table_z, o, d));
        out
    }

    /// First surface entered by the ray for `t > 0` (world frame).
    pub fn first_hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<SurfaceHit> {
        self.spans(o, d)
            .into_iter()
            .filter(|s| s.t_in > 0.0 && s.t_in.is_finite())
            .min_by(|a, b| a.t_in.total_cmp(&b.t_in))
            .map(|s| SurfaceHit { t: s.t_in, normal: s.n_in, id: s.id })
    }

    /// Where a ray starting inside material first leaves the union of all
    /// solids. `None` when `o` is in free space.
    pub fn exit_from_inside(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<SurfaceHit> {
        const TOUCH: f64 = 1e-12;
        let spans = self.spans(o, d);
        let mut cur = 0.0;
        let mut exit: Option<&SolidSpan> = None;
        loop {
            let next = spans
                .iter()
                .filter(|s| s.t_in <= cur + TOUCH && s.t_out > cur)
                .max_by(|a, b| a.t_out.total_cmp(&b.t_out));
            match next {
                Some(s) if exit.is_none() || s.t_out > cur => {
                    if exit.is_none() && s.t_in > TOUCH {
                        return None;
                    }
                    cur = s.t_out;
                    exit = Some(s);
                    if !cur.is_finite() {
                        return None;
                    }
                }
                _ => break,
            }
        }
        exit.map(|s| SurfaceHit { t: s.t_out, normal: s.n_out, id: s.id })
    }

    /// Signed distance to the union of solids and the outward normal of the
    /// nearest surface (world frame).
    pub fn signed_distance(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>, Option<usize>) {
        let mut best = (p.z - self.table_z, Vector3::z(), None);
        for (i, prim) in self.primitives.iter().enumerate() {
            let (d, n) = primitive_sdf(prim, p);
            if d.abs() < best.0.abs() {
                best = (d, n, Some(i));
            }
        }
        best
    }

    /// Outward normal of the surface nearest to a world point.
    pub fn surface_normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.signed_distance(p).1
    }

    fn color_of(&self, id: Option<usize>) -> [f64; 3] {
        id.map_or(TABLE_COLOR, |i| self.primitives[i].color)
    }
}

/// Signed distance and outward gradient for one primitive.
pub(crate) fn primitive_sdf(prim: &Primitive, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let local = prim.pose.inverse_transform_point(&Point3::from(*p)).coords;
    let rot = prim.pose.rotation;
    let (d, n) = match prim.shape {
        Shape::Sphere { radius } => {
            let len = local.norm();
            let n = if len > 0.0 { local / len } else { Vector3::z() };
            (len - radius, n)
        }
        Shape::Box { size } => {
            let q = Vector3::new(local.x.abs() - size[0] / 2.0, local.y.abs() - size[1] / 2.0, local.z.abs() - size[2] / 2.0);
            let sign = local.map(|v| if v < 0.0 { -1.0 } else { 1.0 });
            let outside = q.map(|v| v.max(0.0));
            if outside.norm() > 0.0 {
                (outside.norm(), outside.component_mul(&sign).normalize())
            } else {
                let axis = q.imax();
                (q[axis], Vector3::ith(axis, sign[axis]))
            }
        }
        Shape::Cylinder { radius, height } => {
            let rxy = local.x.hypot(local.y);
            let radial = if rxy > 0.0 { Vector3::new(local.x / rxy, local.y / rxy, 0.0) } else { Vector3::x() };
            let axial = Vector3::new(0.0, 0.0, if local.z < 0.0 { -1.0 } else { 1.0 });
            let (dr, dz) = (rxy - radius, local.z.abs() - height / 2.0);
            if dr > 0.0 || dz > 0.0 {
                let (wr, wz) = (dr.max(0.0), dz.max(0.0));
                let len = wr.hypot(wz);
                ((len), (radial * wr + axial * wz) / len)
            } else if dr > dz {
                (dr, radial)
            } else {
                (dz, axial)
            }
        }
    };
    (d, rot * n)
}

/// Ray-casts every pixel of `rig`. Pixels whose ray misses everything are
/// invalid. With `scene.noise_sigma > 0` each valid depth gets additive
/// Gaussian noise drawn from a per-row stream of `noise_seed`.
pub fn render(scene: &Scene, rig: &CameraRig, noise_seed: u64) -> Result<RGBDFrame> {
    let k = rig.intrinsics;
    k.validate()?;
    let origin = rig.pose.translation.vector;
    if rig.vector_to_world(&Vector3::z()).norm() < 1e-12 {
        return Err(NgsError::Config("degenerate camera direction".into()));
    }
    let noise = if scene.noise_sigma > 0.0 {
        Some(Normal::new(0.0, scene.noise_sigma).map_err(|e| NgsError::Config(e.to_string()))?)
    } else {
        None
    };
    let rows: Vec<(Vec<[f64; 3]>, Vec<f64>)> = (0..k.height)
        .into_par_iter()
        .map(|v| {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            rng.set_stream(v as u64);
            let mut rgb = Vec::with_capacity(k.width);
            let mut depth = Vec::with_capacity(k.width);
            for u in 0..k.width {
                let d = rig.vector_to_world(&k.ray_direction(u as f64, v as f64));
                match scene.first_hit(&origin, &d) {
                    Some(hit) => {
                        let mut z = hit.t;
                        if let Some(n) = &noise {
                            z += n.sample(&mut rng);
                        }
                        rgb.push(scene.color_of(hit.id));
                        depth.push(if z > 0.0 { z } else { 0.0 });
                    }
                    None => {
                        rgb.push([0.0; 3]);
                        depth.push(0.0);
                    }
                }
            }
            (rgb, depth)
        })
        .collect();
    let (mut rgb, mut depth) = (Vec::with_capacity(k.width * k.height), Vec::with_capacity(k.width * k.height));
    for (r, d) in rows {
        rgb.extend(r);
        depth.extend(d);
    }
    RGBDFrame::new(k.width, k.height, rgb, depth)
}

/// Closed-form depth at which a camera-frame ray `o + t d` first meets a sphere.
pub fn ray_sphere_depth(d: &Vector3<f64>, center: &Vector3<f64>, radius: f64) -> Option<f64> {
    let a = d.norm_squared();
    let b = -center.dot(d);
    let c = center.norm_squared() - radius * radius;
    let disc = b * b - a * c;
    (disc >= 0.0).then(|| (-b - disc.sqrt()) / a)
}
