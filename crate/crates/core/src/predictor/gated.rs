//! Forward-only convolutional feature extractor with point-wise gates.
//!
//! Each stage is a 3x3 stride-2 convolution followed by ReLU. A small MLP
//! reads the XYZ coordinates at the stage's resolution and produces one
//! multiplicative gate per output channel and pixel. A linear head on the
//! pooled final features fills a rotation heatmap.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{AnchorSet, RotationHeatmap};
use crate::error::{NgsError, Result};
use crate::ngs::{NormalizedPatch, GRASP_BALL_RADIUS};

const IN_CHANNELS: usize = 6;
const HEAD_EXTRA: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `[outputs][inputs]`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            *y = self.bias[o] as f64 + row.iter().zip(x).map(|(w, v)| *w as f64 * v).sum::<f64>();
        }
    }
}

/// 3x3 kernel, stride 2, zero padding 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3 {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out_ch][in_ch][3][3]`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Three dense layers from XYZ to one gate per channel; ReLU between
/// layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMlp {
    pub layers: [Dense; 3],
}

impl GateMlp {
    fn apply(&self, xyz: &[f64; 3], scratch: &mut [Vec<f64>; 2], out: &mut [f64]) {
        let [a, b] = scratch;
        self.layers[0].apply(xyz, a);
        a.iter_mut().for_each(|v| *v = v.max(0.0));
        self.layers[1].apply(a, b);
        b.iter_mut().for_each(|v| *v = v.max(0.0));
        self.layers[2].apply(b, out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub conv: Conv3,
    pub gate: GateMlp,
}

/// Stage layout stored next to a weight file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub patch_size: usize,
    pub stage_channels: Vec<usize>,
    pub n_gamma: usize,
    pub n_beta: usize,
    pub n_theta: usize,
}

impl NetShape {
    pub fn validate(&self) -> Result<()> {
        let k = self.stage_channels.len();
        if k == 0 || self.stage_channels.contains(&0) {
            return Err(NgsError::Config("gated net needs at least one non-empty stage".into()));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(1 << k) {
            return Err(NgsError::Config(format!(
                "patch size {} is not divisible by 2^{k}",
                self.patch_size
            )));
        }
        if self.n_gamma == 0 || self.n_beta == 0 || self.n_theta == 0 {
            return Err(NgsError::Config("heatmap dimensions must be positive".into()));
        }
        Ok(())
    }

    fn head_outputs(&self) -> usize {
        self.n_gamma * self.n_beta * (self.n_theta + HEAD_EXTRA)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatedNet {
    pub shape: NetShape,
    pub stages: Vec<Stage>,
    pub head: Dense,
}

/// Channel-major feature map `[channels][size][size]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f64>,
}

impl GatedNet {
    /// All weights zero; gates and head produce their biases.
    pub fn zeros(shape: NetShape) -> Result<Self> {
        shape.validate()?;
        let mut stages = Vec::new();
        let mut in_ch = IN_CHANNELS;
        for &c in &shape.stage_channels {
            stages.push(Stage {
                conv: Conv3 { in_ch, out_ch: c, weights: vec![0.0; c * in_ch * 9], bias: vec![0.0; c] },
                gate: GateMlp { layers: [Dense::zeros(3, c), Dense::zeros(c, c), Dense::zeros(c, c)] },
            });
            in_ch = c;
        }
        let head = Dense::zeros(in_ch, shape.head_outputs());
        Ok(Self { shape, stages, head })
    }

    /// Uniform fan-in scaled weights from a seed; gate output biases start at 1.
    pub fn random(shape: NetShape, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |w: &mut [f32], fan_in: usize| {
            let b = (6.0 / fan_in as f64).sqrt() as f32;
            w.iter_mut().for_each(|v| *v = rng.random_range(-b..b));
        };
        for st in &mut net.stages {
            let fan = st.conv.in_ch * 9;
            fill(&mut st.conv.weights, fan);
            for layer in &mut st.gate.layers {
                let fan = layer.inputs;
                fill(&mut layer.weights, fan);
            }
            st.gate.layers[2].bias.iter_mut().for_each(|b| *b = 1.0);
        }
        let fan = net.head.inputs;
        fill(&mut net.head.weights, fan);
        Ok(net)
    }

    fn tensors(&self) -> Vec<&Vec<f32>> {
        let mut out = Vec::new();
        for st in &self.stages {
            out.push(&st.conv.weights);
            out.push(&st.conv.bias);
            for l in &st.gate.layers {
                out.push(&l.weights);
                out.push(&l.bias);
            }
        }
        out.push(&self.head.weights);
        out.push(&self.head.bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::new();
        for st in &mut self.stages {
            out.push(&mut st.conv.weights);
            out.push(&mut st.conv.bias);
            for l in &mut st.gate.layers {
                out.push(&mut l.weights);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.head.weights);
        out.push(&mut self.head.bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(NgsError::Config("gated net weights must be finite".into()));
        }
        Ok(())
    }

    /// Writes little-endian f32 weights to `path` and the layout to
    /// `path` with a `.json` extension appended.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.parameter_count() * 4);
        for t in self.tensors() {
            for v in t {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&bytes)?;
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&self.shape)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let shape: NetShape = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
        let mut net = Self::zeros(shape)?;
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let expected = net.parameter_count() * 4;
        if bytes.len() != expected {
            return Err(NgsError::Config(format!(
                "weight file has {} bytes, layout needs {expected}",
                bytes.len()
            )));
        }
        let mut chunks = bytes.chunks_exact(4);
        for t in net.tensors_mut() {
            for v in t.iter_mut() {
                let c = chunks.next().expect("length checked above");
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        net.validate()?;
        Ok(net)
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn conv_stride2(conv: &Conv3, input: &FeatureGrid) -> FeatureGrid {
    let n = input.size;
    let m = n / 2;
    let mut data = vec![0.0; conv.out_ch * m * m];
    for o in 0..conv.out_ch {
        for y in 0..m {
            for x in 0..m {
                let mut acc = conv.bias[o] as f64;
                for i in 0..conv.in_ch {
                    let plane = &input.data[i * n * n..(i + 1) * n * n];
                    let w = &conv.weights[(o * conv.in_ch + i) * 9..(o * conv.in_ch + i + 1) * 9];
                    for ky in 0..3 {
                        let sy = (2 * y + ky) as isize - 1;
                        if sy < 0 || sy >= n as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = (2 * x + kx) as isize - 1;
                            if sx < 0 || sx >= n as isize {
                                continue;
                            }
                            acc += w[ky * 3 + kx] as f64 * plane[sy as usize * n + sx as usize];
                        }
                    }
                }
                data[(o * m + y) * m + x] = acc.max(0.0);
            }
        }
    }
    FeatureGrid { channels: conv.out_ch, size: m, data }
}

fn input_grid(patch: &NormalizedPatch) -> (FeatureGrid, Vec<[f64; 3]>) {
    let s = patch.size;
    let mut data = vec![0.0; IN_CHANNELS * s * s];
    let mut xyz = vec![[0.0; 3]; s * s];
    for (i, (px, &ok)) in patch.rgbxyz.iter().zip(&patch.valid).enumerate() {
        if !ok {
            continue;
        }
        for c in 0..IN_CHANNELS {
            data[c * s * s + i] = px[c];
        }
        xyz[i] = [px[3], px[4], px[5]];
    }
    (FeatureGrid { channels: IN_CHANNELS, size: s, data }, xyz)
}

/// Gate values per stage, `[channel][y][x]` flattened.
pub type StageGates = Vec<Vec<f64>>;

fn run(patch: &NormalizedPatch, net: &GatedNet, gated: bool) -> Result<(FeatureGrid, StageGates)> {
    net.validate()?;
    if patch.size != net.shape.patch_size || patch.rgbxyz.len() != patch.size * patch.size {
        return Err(NgsError::Config(format!(
            "net expects {0}x{0} patches, got {1}x{1}",
            net.shape.patch_size, patch.size
        )));
    }
    let (mut feat, mut xyz) = input_grid(patch);
    let mut gates = Vec::new();
    for st in &net.stages {
        let n = feat.size;
        feat = conv_stride2(&st.conv, &feat);
        let m = feat.size;
        xyz = (0..m * m).map(|j| xyz[(2 * (j / m)) * n + 2 * (j % m)]).collect();
        if !gated {
            continue;
        }
        let c = feat.channels;
        let mut g = vec![0.0; c * m * m];
        let mut scratch = [vec![0.0; c], vec![0.0; c]];
        let mut out = vec![0.0; c];
        for (j, p) in xyz.iter().enumerate() {
            st.gate.apply(p, &mut scratch, &mut out);
            for ch in 0..c {
                g[ch * m * m + j] = out[ch];
                feat.data[ch * m * m + j] *= out[ch];
            }
        }
        gates.push(g);
    }
    Ok((feat, gates))
}

/// Gated feature map of spatial size `S / 2^k` for `k` stages.
pub fn gated_forward(patch: &NormalizedPatch, net: &GatedNet) -> Result<FeatureGrid> {
    run(patch, net, true).map(|r| r.0)
}

/// Features and the gate values applied at every stage.
pub fn gated_forward_with_gates(patch: &NormalizedPatch, net: &GatedNet) -> Result<(FeatureGrid, StageGates)> {
    run(patch, net, true)
}

/// The same convolution stack with every gate removed.
pub fn plain_forward(patch: &NormalizedPatch, net: &GatedNet) -> Result<FeatureGrid> {
    run(patch, net, false).map(|r| r.0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Heatmap from pooled gated features. Probabilities use a sigmoid for
/// graspability and a softmax over theta anchors; regression outputs are
/// squashed into their valid ranges.
pub fn predict_gated(patch: &NormalizedPatch, net: &GatedNet, anchors: &AnchorSet, max_width: f64) -> Result<RotationHeatmap> {
    let s = &net.shape;
    if (anchors.gammas.len(), anchors.betas.len(), anchors.thetas.len()) != (s.n_gamma, s.n_beta, s.n_theta) {
        return Err(NgsError::Config("anchor set does not match the net's heatmap layout".into()));
    }
    let feat = gated_forward(patch, net)?;
    let area = (feat.size * feat.size) as f64;
    let pooled: Vec<f64> = feat.data.chunks(feat.size * feat.size).map(|c| c.iter().sum::<f64>() / area).collect();
    let mut raw = vec![0.0; net.head.outputs];
    net.head.apply(&pooled, &mut raw);
    let mut hm = RotationHeatmap::zeros(anchors);
    let per = s.n_theta + HEAD_EXTRA;
    let half_step = std::f64::consts::PI / (2.0 * s.n_theta as f64);
    let offset_scale = GRASP_BALL_RADIUS / 3f64.sqrt() * (1.0 - 1e-9);
    for (cell, r) in hm.cells.iter_mut().zip(raw.chunks(per)) {
        cell.graspable = sigmoid(r[0]);
        let logits = &r[1..1 + s.n_theta];
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = exp.iter().sum();
        cell.theta_scores = exp.iter().map(|e| e / z).collect();
        let rest = &r[1 + s.n_theta..];
        cell.theta_residual = rest[0].tanh() * half_step;
        cell.width = sigmoid(rest[1]) * max_width;
        cell.offset = nalgebra::Vector3::new(rest[2].tanh(), rest[3].tanh(), rest[4].tanh()) * offset_scale;
    }
    Ok(hm)
}
