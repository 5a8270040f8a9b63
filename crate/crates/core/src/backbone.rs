//! Per-frame feature extraction: a small conv/ReLU stack, or feature maps
//! loaded from STAF files produced elsewhere.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, StaError};
use crate::numerics::{conv2d, conv2d_backward, relu, relu_backward, Tensor};

/// Stack of `N` non-negative `H×W×D` feature maps for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSet {
    maps: Tensor,
}

impl FeatureMapSet {
    /// Wraps an `N×H×W×D` tensor, rejecting negative or non-finite entries.
    pub fn new(maps: Tensor) -> Result<Self> {
        if maps.rank() != 4 {
            return Err(StaError::dim("feature map rank", 4, maps.rank()));
        }
        if let Some(i) = maps.data().iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(StaError::arg(format!(
                "feature maps must be finite and non-negative (value {} at flat index {i})",
                maps.data()[i]
            )));
        }
        Ok(Self { maps })
    }

    /// Wraps `maps`, replacing negative values with zero. Returns the number of clamped entries.
    pub fn clamped(mut maps: Tensor) -> Result<(Self, usize)> {
        let mut clamped = 0;
        for v in maps.data_mut() {
            if !v.is_finite() {
                return Err(StaError::arg("feature maps must be finite"));
            }
            if *v < 0.0 {
                *v = 0.0;
                clamped += 1;
            }
        }
        Ok((Self::new(maps)?, clamped))
    }

    pub fn from_frames(frames: Vec<Tensor>) -> Result<Self> {
        Self::new(Tensor::stack(&frames)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.maps
    }

    pub fn into_tensor(self) -> Tensor {
        self.maps
    }

    pub fn frames(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn depth(&self) -> usize {
        self.maps.shape()[3]
    }

    /// Copy of frame `n` as an `H×W×D` tensor.
    pub fn frame(&self, n: usize) -> Tensor {
        self.maps.slice_outer(n, n + 1).reshape(&self.maps.shape()[1..]).expect("frame reshape")
    }

    /// New set made of the listed frames, in order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let frames = indices
            .iter()
            .map(|&i| {
                if i >= self.frames() {
                    Err(StaError::arg(format!("frame index {i} out of range {}", self.frames())))
                } else {
                    Ok(self.frame(i))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_frames(frames)
    }
}

/// One convolution layer of the backbone; every layer is followed by ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Shape of the tiny backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneArch {
    pub input_height: usize,
    pub input_width: usize,
    /// Fixed per-channel affine applied to `[0,1]` pixels before the first layer.
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
    pub layers: Vec<ConvLayerSpec>,
}

impl BackboneArch {
    /// Three conv/ReLU layers taking `32×16` RGB frames to `16×8×depth` maps.
    pub fn desk_scale(depth: usize) -> Self {
        Self {
            input_height: 32,
            input_width: 16,
            input_mean: [0.5; 3],
            input_std: [0.25; 3],
            layers: vec![
                ConvLayerSpec { kernel: 4, in_channels: 3, out_channels: 8, stride: 2, pad: 1 },
                ConvLayerSpec { kernel: 3, in_channels: 8, out_channels: 16, stride: 1, pad: 1 },
                ConvLayerSpec { kernel: 3, in_channels: 16, out_channels: depth, stride: 1, pad: 1 },
            ],
        }
    }

    /// Output `(H, W, D)` of the stack, validating every layer on the way.
    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        if self.layers.is_empty() {
            return Err(StaError::config("backbone needs at least one layer"));
        }
        let (mut h, mut w, mut c) = (self.input_height, self.input_width, 3);
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != c {
                return Err(StaError::config(format!(
                    "layer {i} expects {} input channels but receives {c}",
                    l.in_channels
                )));
            }
            if l.kernel == 0 || l.stride == 0 || l.out_channels == 0 {
                return Err(StaError::config(format!("layer {i} has a zero kernel, stride or width")));
            }
            let step = |len: usize, axis: &str| -> Result<usize> {
                let padded = len + 2 * l.pad;
                if padded < l.kernel || !(padded - l.kernel).is_multiple_of(l.stride) {
                    return Err(StaError::config(format!(
                        "layer {i} {axis}: {len} does not tile with kernel {} stride {} pad {}",
                        l.kernel, l.stride, l.pad
                    )));
                }
                Ok((padded - l.kernel) / l.stride + 1)
            };
            h = step(h, "height")?;
            w = step(w, "width")?;
            c = l.out_channels;
        }
        Ok((h, w, c))
    }
}

/// Trainable backbone weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub arch: BackboneArch,
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Intermediate values of one frame's forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct FrameTrace {
    layer_inputs: Vec<Tensor>,
    pre_activations: Vec<Tensor>,
}

/// Parameter gradients, laid out like [`BackboneParams`].
#[derive(Debug, Clone)]
pub struct BackboneGrads {
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl BackboneGrads {
    pub fn zeros_like(params: &BackboneParams) -> Self {
        Self {
            kernels: params.kernels.iter().map(|k| Tensor::zeros(k.shape())).collect(),
            biases: params.biases.iter().map(|b| Tensor::zeros(b.shape())).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &BackboneGrads) {
        for (a, b) in self.kernels.iter_mut().zip(&other.kernels) {
            a.add_assign(b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.add_assign(b);
        }
    }
}

impl BackboneParams {
    /// He-normal kernels and zero biases.
    pub fn init(arch: BackboneArch, rng: &mut impl Rng) -> Result<Self> {
        arch.output_shape()?;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for l in &arch.layers {
            let fan_in = (l.kernel * l.kernel * l.in_channels) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            let shape = [l.kernel, l.kernel, l.in_channels, l.out_channels];
            kernels.push(Tensor::from_fn(&shape, |_| normal.sample(rng)));
            biases.push(Tensor::zeros(&[l.out_channels]));
        }
        Ok(Self { arch, kernels, biases })
    }

    /// Checks kernel/bias shapes against the architecture and that the output
    /// height splits into `k_regions` equal stripes.
    pub fn validate(&self, k_regions: usize) -> Result<(usize, usize, usize)> {
        let (h, w, d) = self.arch.output_shape()?;
        if self.kernels.len() != self.arch.layers.len() || self.biases.len() != self.arch.layers.len() {
            return Err(StaError::config("parameter count does not match layer count"));
        }
        for (i, l) in self.arch.layers.iter().enumerate() {
            self.kernels[i].expect_shape(
                &format!("layer {i} kernel"),
                &[l.kernel, l.kernel, l.in_channels, l.out_channels],
            )?;
            self.biases[i].expect_shape(&format!("layer {i} bias"), &[l.out_channels])?;
        }
        if k_regions == 0 || h % k_regions != 0 {
            return Err(StaError::config(format!(
                "backbone output height {h} is not divisible by {k_regions} regions"
            )));
        }
        Ok((h, w, d))
    }

    fn normalize(&self, frame: &Tensor) -> Result<Tensor> {
        frame.expect_shape("frame", &[self.arch.input_height, self.arch.input_width, 3])?;
        let mut x = frame.clone();
        for px in x.data_mut().chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - self.arch.input_mean[c]) / self.arch.input_std[c];
            }
        }
        Ok(x)
    }

    /// Forward pass of one `H_img×W_img×3` frame, keeping what backward needs.
    pub fn forward_frame(&self, frame: &Tensor) -> Result<(Tensor, FrameTrace)> {
        let mut x = self.normalize(frame)?;
        let mut trace = FrameTrace {
            layer_inputs: Vec::with_capacity(self.arch.layers.len()),
            pre_activations: Vec::with_capacity(self.arch.layers.len()),
        };
        for (i, l) in self.arch.layers.iter().enumerate() {
            let z = conv2d(&x, &self.kernels[i], &self.biases[i], l.stride, l.pad)?;
            let a = relu(&z);
            trace.layer_inputs.push(x);
            trace.pre_activations.push(z);
            x = a;
        }
        Ok((x, trace))
    }

    /// Backpropagates a gradient on the final feature map of one frame.
    pub fn backward_frame(&self, trace: &FrameTrace, grad_out: &Tensor) -> Result<BackboneGrads> {
        let mut grads = BackboneGrads::zeros_like(self);
        let mut g = grad_out.clone();
        for i in (0..self.arch.layers.len()).rev() {
            let l = &self.arch.layers[i];
            let gz = relu_backward(&trace.pre_activations[i], &g);
            let (dx, dk, db) = conv2d_backward(&trace.layer_inputs[i], &self.kernels[i], l.stride, l.pad, &gz)?;
            grads.kernels[i] = dk;
            grads.biases[i] = db;
            g = dx;
        }
        Ok(grads)
    }

    pub fn param_count(&self) -> usize {
        self.kernels.iter().chain(&self.biases).map(Tensor::len).sum()
    }
}

/// Runs the backbone on an `N×H_img×W_img×3` stack of frames.
pub fn tiny_backbone_forward(frames: &Tensor, params: &BackboneParams) -> Result<FeatureMapSet> {
    if frames.rank() != 4 {
        return Err(StaError::dim("frames rank", 4, frames.rank()));
    }
    let (h, w) = (params.arch.input_height, params.arch.input_width);
    if frames.shape()[1] != h || frames.shape()[2] != w {
        return Err(StaError::config(format!(
            "frames are {}x{} but the backbone expects {h}x{w}",
            frames.shape()[1],
            frames.shape()[2]
        )));
    }
    frames.expect_shape("frames", &[frames.shape()[0], h, w, 3])?;
    params.arch.output_shape()?;
    let maps = (0..frames.shape()[0])
        .map(|n| {
            let frame = frames.slice_outer(n, n + 1).reshape(&[h, w, 3])?;
            params.forward_frame(&frame).map(|(out, _)| out)
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureMapSet::from_frames(maps)
}

const STAF_MAGIC: &[u8; 4] = b"STAF";
const STAF_VERSION: u32 = 1;

/// Serializes a feature map set in STAF layout.
pub fn write_staf(set: &FeatureMapSet, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(STAF_MAGIC)?;
    w.write_all(&STAF_VERSION.to_le_bytes())?;
    for &d in set.tensor().shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in set.tensor().data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// A feature map set read from disk plus how many negative values were clamped.
#[derive(Debug, Clone)]
pub struct LoadedFeatures {
    pub set: FeatureMapSet,
    pub clamped: usize,
}

pub(crate) fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            StaError::format(*offset, format!("truncated while reading {what}"))
        } else {
            StaError::format(*offset, format!("read failed on {what}: {e}"))
        }
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

pub(crate) fn read_u32_at(r: &mut impl Read, offset: &mut u64, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_at(r, &mut b, offset, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Parses a STAF stream. Negative values are clamped to zero and counted.
pub fn read_staf(mut r: impl Read) -> Result<LoadedFeatures> {
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset, "magic")?;
    if &magic != STAF_MAGIC {
        return Err(StaError::format(0, format!("bad magic {magic:?}, expected \"STAF\"")));
    }
    let version = read_u32_at(&mut r, &mut offset, "version")?;
    if version != STAF_VERSION {
        return Err(StaError::format(4, format!("unsupported STAF version {version}")));
    }
    let mut dims = [0usize; 4];
    for (d, name) in dims.iter_mut().zip(["N", "H", "W", "D"]) {
        let start = offset;
        *d = read_u32_at(&mut r, &mut offset, name)? as usize;
        if *d == 0 {
            return Err(StaError::format(start, format!("dimension {name} is zero")));
        }
    }
    let count: usize = dims.iter().product();
    let mut payload = vec![0u8; count * 4];
    read_exact_at(&mut r, &mut payload, &mut offset, "payload")?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| StaError::format(offset, e.to_string()))? != 0 {
        return Err(StaError::format(offset, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let (set, clamped) = FeatureMapSet::clamped(Tensor::new(dims.to_vec(), data)?)?;
    Ok(LoadedFeatures { set, clamped })
}

pub fn save_feature_maps(set: &FeatureMapSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| StaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_staf(set, &mut w).and_then(|_| w.flush()).map_err(|e| StaError::io(path, e))
}

pub fn load_feature_maps(path: impl AsRef<Path>) -> Result<LoadedFeatures> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| StaError::io(path, e))?;
    let loaded = read_staf(BufReader::new(file))?;
    if loaded.clamped > 0 {
        log::warn!("{}: clamped {} negative feature values to 0", path.display(), loaded.clamped);
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::conv2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> BackboneArch {
        BackboneArch {
            input_height: 8,
            input_width: 4,
            input_mean: [0.5; 3],
            input_std: [0.25; 3],
            layers: vec![
                ConvLayerSpec { kernel: 4, in_channels: 3, out_channels: 4, stride: 2, pad: 1 },
                ConvLayerSpec { kernel: 3, in_channels: 4, out_channels: 5, stride: 1, pad: 1 },
            ],
        }
    }

    #[test]
    fn desk_scale_shape() {
        assert_eq!(BackboneArch::desk_scale(32).output_shape().unwrap(), (16, 8, 32));
    }

    #[test]
    fn zero_frames_zero_bias_give_zero_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut arch = BackboneArch::desk_scale(8);
        // zero pixels stay zero after the affine only when the mean is zero
        arch.input_mean = [0.0; 3];
        let params = BackboneParams::init(arch, &mut rng).unwrap();
        let out = tiny_backbone_forward(&Tensor::zeros(&[2, 32, 16, 3]), &params).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_frames_identical_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = BackboneParams::init(small_arch(), &mut rng).unwrap();
        let frame = Tensor::from_fn(&[8, 4, 3], |_| rng.random_range(0.0..1.0));
        let one = tiny_backbone_forward(&Tensor::stack(std::slice::from_ref(&frame)).unwrap(), &params).unwrap();
        let four = tiny_backbone_forward(&Tensor::stack(&vec![frame; 4]).unwrap(), &params).unwrap();
        for n in 0..4 {
            assert_eq!(four.frame(n), one.frame(0));
        }
    }

    #[test]
    fn matches_layer_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = BackboneParams::init(small_arch(), &mut rng).unwrap();
        for b in &mut params.biases {
            *b = Tensor::from_fn(b.shape(), |_| rng.random_range(-0.1..0.1));
        }
        let frame = Tensor::from_fn(&[8, 4, 3], |_| rng.random_range(0.0..1.0));
        let out = tiny_backbone_forward(&Tensor::stack(std::slice::from_ref(&frame)).unwrap(), &params).unwrap();
        let x = frame.map(|v| (v - 0.5) / 0.25);
        let a1 = conv2d(&x, &params.kernels[0], &params.biases[0], 2, 1).unwrap().map(|v| v.max(0.0));
        let a2 = conv2d(&a1, &params.kernels[1], &params.biases[1], 1, 1).unwrap().map(|v| v.max(0.0));
        for (a, b) in out.frame(0).data().iter().zip(a2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = BackboneParams::init(small_arch(), &mut rng).unwrap();
        params.biases[0] = Tensor::from_fn(&[4], |_| rng.random_range(0.05..0.2));
        let frame = Tensor::from_fn(&[8, 4, 3], |_| rng.random_range(0.0..1.0));
        let (out, trace) = params.forward_frame(&frame).unwrap();
        let probe = Tensor::from_fn(out.shape(), |_| rng.random_range(-1.0..1.0));
        let grads = params.backward_frame(&trace, &probe).unwrap();
        let objective = |p: &BackboneParams| {
            let (o, _) = p.forward_frame(&frame).unwrap();
            o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for layer in 0..2 {
            for i in (0..params.kernels[layer].len()).step_by(7) {
                let mut p = params.clone();
                p.kernels[layer].data_mut()[i] += h;
                let plus = objective(&p);
                p.kernels[layer].data_mut()[i] -= 2.0 * h;
                let minus = objective(&p);
                let num = (plus - minus) / (2.0 * h);
                let ana = grads.kernels[layer].data()[i];
                assert!((num - ana).abs() / 1f64.max(num.abs()) < 1e-5, "layer {layer} idx {i}: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn output_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = BackboneParams::init(small_arch(), &mut rng).unwrap();
        let frames = Tensor::from_fn(&[3, 8, 4, 3], |_| rng.random_range(0.0..1.0));
        let out = tiny_backbone_forward(&frames, &params).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn spatial_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = BackboneParams::init(small_arch(), &mut rng).unwrap();
        let r = tiny_backbone_forward(&Tensor::zeros(&[1, 6, 4, 3]), &params);
        assert!(matches!(r, Err(StaError::Config(_))));
    }

    #[test]
    fn region_divisibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = BackboneParams::init(BackboneArch::desk_scale(4), &mut rng).unwrap();
        assert!(params.validate(4).is_ok());
        assert!(matches!(params.validate(3), Err(StaError::Config(_))));
    }

    #[test]
    fn staf_header_and_truncation() {
        let set = FeatureMapSet::new(Tensor::full(&[4, 16, 8, 32], 0.5)).unwrap();
        let mut bytes = Vec::new();
        write_staf(&set, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 24 + 4 * 16 * 8 * 32 * 4);
        let loaded = read_staf(&bytes[..]).unwrap();
        assert_eq!(loaded.set.tensor().shape(), &[4, 16, 8, 32]);
        assert_eq!(loaded.clamped, 0);
        let err = read_staf(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, StaError::Format { offset: 24, .. }), "{err}");
    }

    #[test]
    fn staf_bad_magic_and_version() {
        let set = FeatureMapSet::new(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let mut bytes = Vec::new();
        write_staf(&set, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_staf(&bad[..]), Err(StaError::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(read_staf(&bad[..]), Err(StaError::Format { offset: 4, .. })));
    }

    #[test]
    fn staf_clamps_negatives() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"STAF");
        for v in [1u32, 1, 1, 2, 1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&(-1.5f32).to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        let loaded = read_staf(&bytes[..]).unwrap();
        assert_eq!(loaded.clamped, 1);
        assert_eq!(loaded.set.tensor().data(), &[0.0, 2.0]);
    }
}
