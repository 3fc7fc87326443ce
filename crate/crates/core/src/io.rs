//! File formats: PFM depth planes, binary PPM colour, grasp JSON lines.
//!
//! PFM files are single-channel (`Pf`), little-endian (scale `-1.0`), with
//! rows stored bottom to top. A "stack" is several PFM images concatenated
//! in one file. Invalid depth is written as `0`.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{NgsError, Result};
use crate::geometry::{EulerRotation, Grasp, RGBDFrame};
use crate::ngs::{NGSContext, NormalizedGrasp};

/// A single-channel float image, row-major top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

pub fn write_pfm<W: Write>(out: &mut W, plane: &Plane) -> Result<()> {
    if plane.data.len() != plane.width * plane.height {
        return Err(NgsError::Config("plane data does not match its dimensions".into()));
    }
    write!(out, "Pf\n{} {}\n-1.0\n", plane.width, plane.height)?;
    let mut buf = Vec::with_capacity(plane.data.len() * 4);
    for row in (0..plane.height).rev() {
        for &v in &plane.data[row * plane.width..(row + 1) * plane.width] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_token<R: BufRead>(input: &mut R) -> Result<Option<String>> {
    let mut tok = Vec::new();
    loop {
        let buf = input.fill_buf()?;
        if buf.is_empty() {
            break;
        }
        let b = buf[0];
        input.consume(1);
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b);
    }
    if tok.is_empty() {
        return Ok(None);
    }
    String::from_utf8(tok).map(Some).map_err(|_| NgsError::Format("non-UTF-8 header".into()))
}

fn parse<T: std::str::FromStr>(tok: Option<String>, what: &str) -> Result<T> {
    tok.ok_or_else(|| NgsError::Format(format!("missing {what}")))?
        .parse()
        .map_err(|_| NgsError::Format(format!("bad {what}")))
}

/// Reads one PFM image, or `None` at a clean end of input.
pub fn read_pfm<R: BufRead>(input: &mut R) -> Result<Option<Plane>> {
    let Some(magic) = read_token(input)? else { return Ok(None) };
    if magic != "Pf" {
        return Err(NgsError::Format(format!("unsupported PFM magic {magic:?}")));
    }
    let width: usize = parse(read_token(input)?, "width")?;
    let height: usize = parse(read_token(input)?, "height")?;
    let scale: f64 = parse(read_token(input)?, "scale")?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; width * height * 4];
    input.read_exact(&mut raw)?;
    let mut data = vec![0f32; width * height];
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(bytes) } else { f32::from_be_bytes(bytes) };
        let (row, col) = (height - 1 - k / width, k % width);
        data[row * width + col] = v;
    }
    Ok(Some(Plane { width, height, data }))
}

pub fn read_pfm_stack<R: BufRead>(input: &mut R) -> Result<Vec<Plane>> {
    let mut planes = Vec::new();
    while let Some(p) = read_pfm(input)? {
        planes.push(p);
    }
    Ok(planes)
}

pub fn depth_plane(frame: &RGBDFrame) -> Plane {
    let data = frame
        .depth
        .iter()
        .zip(&frame.valid)
        .map(|(&d, &ok)| if ok { d as f32 } else { 0.0 })
        .collect();
    Plane { width: frame.width, height: frame.height, data }
}

pub fn write_ppm<W: Write>(out: &mut W, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<()> {
    write!(out, "P6\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = rgb
        .iter()
        .flat_map(|px| px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_ppm<R: BufRead>(input: &mut R) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let magic = read_token(input)?;
    if magic.as_deref() != Some("P6") {
        return Err(NgsError::Format("expected binary PPM (P6)".into()));
    }
    let width: usize = parse(read_token(input)?, "width")?;
    let height: usize = parse(read_token(input)?, "height")?;
    let maxval: f64 = parse(read_token(input)?, "maxval")?;
    if maxval > 255.0 {
        return Err(NgsError::Format("16-bit PPM is not supported".into()));
    }
    let mut raw = vec![0u8; width * height * 3];
    input.read_exact(&mut raw)?;
    let rgb = raw
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / maxval, c[1] as f64 / maxval, c[2] as f64 / maxval])
        .collect();
    Ok((width, height, rgb))
}

/// Frame from a depth PFM (0 = invalid) and an optional PPM.
pub fn frame_from_files(depth: &Plane, rgb: Option<(usize, usize, Vec<[f64; 3]>)>) -> Result<RGBDFrame> {
    let d = depth.data.iter().map(|&v| v as f64).collect();
    match rgb {
        Some((w, h, rgb)) => {
            if w != depth.width || h != depth.height {
                return Err(NgsError::Config("colour and depth images differ in size".into()));
            }
            RGBDFrame::new(w, h, rgb, d)
        }
        None => RGBDFrame::from_depth(depth.width, depth.height, d),
    }
}

/// JSON form of a camera-frame grasp.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GraspRecord {
    pub t: [f64; 3],
    pub theta: f64,
    pub gamma: f64,
    pub beta: f64,
    pub width: f64,
    pub score: f64,
}

impl From<&Grasp> for GraspRecord {
    fn from(g: &Grasp) -> Self {
        Self {
            t: [g.t.x, g.t.y, g.t.z],
            theta: g.rot.theta,
            gamma: g.rot.gamma,
            beta: g.rot.beta,
            width: g.width,
            score: g.score,
        }
    }
}

impl TryFrom<GraspRecord> for Grasp {
    type Error = NgsError;

    fn try_from(r: GraspRecord) -> Result<Self> {
        Ok(Grasp {
            t: Vector3::from(r.t),
            rot: EulerRotation::new(r.theta, r.gamma, r.beta)?,
            width: r.width,
            score: r.score,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ContextRecord {
    pub center: [f64; 3],
    pub w_ref: f64,
}

/// JSON form of a normalized grasp; carries its normalization context.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NormalizedGraspRecord {
    pub normalized: bool,
    pub t: [f64; 3],
    pub theta: f64,
    pub gamma: f64,
    pub beta: f64,
    pub width: f64,
    pub score: f64,
    pub ctx: ContextRecord,
}

impl NormalizedGraspRecord {
    pub fn new(g: &NormalizedGrasp, ctx: &NGSContext) -> Self {
        Self {
            normalized: true,
            t: [g.t_star.x, g.t_star.y, g.t_star.z],
            theta: g.rot.theta,
            gamma: g.rot.gamma,
            beta: g.rot.beta,
            width: g.w_star,
            score: g.score,
            ctx: ContextRecord { center: [ctx.center.x, ctx.center.y, ctx.center.z], w_ref: ctx.w_ref },
        }
    }
}

pub fn write_grasps<W: Write>(out: &mut W, grasps: &[Grasp]) -> Result<()> {
    for g in grasps {
        serde_json::to_writer(&mut *out, &GraspRecord::from(g))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_grasps<R: BufRead>(input: R) -> Result<Vec<Grasp>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraspRecord = serde_json::from_str(&line)?;
        out.push(rec.try_into()?);
    }
    Ok(out)
}
