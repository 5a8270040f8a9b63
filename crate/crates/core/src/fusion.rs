//! Clip-level aggregation of per-frame feature maps.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{stripe_height, ScoreMatrix};
use crate::backbone::FeatureMapSet;
use crate::error::{Result, StaError};
use crate::numerics::{fully_connected, fully_connected_backward, global_avg_pool, global_avg_pool_backward, Tensor};

/// `H×W×2D` fused map: the first `D` channels hold per-region selected blocks,
/// the last `D` the score-weighted blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    map: Tensor,
    /// Frame chosen for each region in the first half, if produced by [`fuse`].
    selection: Vec<usize>,
}

impl FusedFeature {
    pub fn tensor(&self) -> &Tensor {
        &self.map
    }

    pub fn selection(&self) -> &[usize] {
        &self.selection
    }

    /// Half-depth `D` of the fused map.
    pub fn depth(&self) -> usize {
        self.map.shape()[2] / 2
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fuses a clip's feature maps under a score matrix.
///
/// For each region `k` the frame with the highest `S(n,k)` supplies the
/// discriminative half verbatim, and the global half is `Σ_n S(n,k)·f_{n,k}`.
pub fn fuse(f: &FeatureMapSet, s: &ScoreMatrix) -> Result<FusedFeature> {
    let (n, h, w, d) = (f.frames(), f.height(), f.width(), f.depth());
    if s.frames() != n {
        return Err(StaError::dim("score matrix frames", n, s.frames()));
    }
    let k_regions = s.regions();
    let stripe = stripe_height(h, k_regions)?;
    let mut out = Tensor::zeros(&[h, w, 2 * d]);
    let src = f.tensor().data();
    let frame_len = h * w * d;
    let mut selection = Vec::with_capacity(k_regions);
    for k in 0..k_regions {
        let column = s.column(k);
        let m = argmax_lowest(&column);
        selection.push(m);
        for row in k * stripe..(k + 1) * stripe {
            for col in 0..w {
                let cell = row * w + col;
                let dst = &mut out.data_mut()[cell * 2 * d..(cell + 1) * 2 * d];
                dst[..d].copy_from_slice(&src[m * frame_len + cell * d..][..d]);
                for (frame, &weight) in column.iter().enumerate() {
                    let block = &src[frame * frame_len + cell * d..][..d];
                    for (o, &v) in dst[d..].iter_mut().zip(block) {
                        *o += weight * v;
                    }
                }
            }
        }
    }
    Ok(FusedFeature { map: out, selection })
}

/// Backward of [`fuse`], holding the per-region selection fixed.
/// Returns gradients for the feature maps and for the score matrix.
pub fn fuse_backward(f: &FeatureMapSet, s: &ScoreMatrix, fused: &FusedFeature, grad: &Tensor) -> (Tensor, Tensor) {
    let (n, h, w, d) = (f.frames(), f.height(), f.width(), f.depth());
    let k_regions = s.regions();
    let stripe = h / k_regions;
    let frame_len = h * w * d;
    let mut df = Tensor::zeros(f.tensor().shape());
    let mut ds = Tensor::zeros(&[n, k_regions]);
    let src = f.tensor().data();
    for k in 0..k_regions {
        let m = fused.selection[k];
        for row in k * stripe..(k + 1) * stripe {
            for col in 0..w {
                let cell = row * w + col;
                let up = &grad.data()[cell * 2 * d..(cell + 1) * 2 * d];
                let (up_sel, up_sum) = up.split_at(d);
                for (o, &g) in df.data_mut()[m * frame_len + cell * d..][..d].iter_mut().zip(up_sel) {
                    *o += g;
                }
                for frame in 0..n {
                    let weight = s.get(frame, k);
                    let off = frame * frame_len + cell * d;
                    let mut dot = 0.0;
                    for j in 0..d {
                        dot += src[off + j] * up_sum[j];
                    }
                    ds.data_mut()[frame * k_regions + k] += dot;
                    for (o, &g) in df.data_mut()[off..off + d].iter_mut().zip(up_sum) {
                        *o += weight * g;
                    }
                }
            }
        }
    }
    (df, ds)
}

/// Score-weighted half only, duplicated along depth to `2D`.
pub fn weighted_only(f: &FeatureMapSet, s: &ScoreMatrix) -> Result<FusedFeature> {
    let fused = fuse(f, s)?;
    Ok(duplicate_half(&fused.map, fused.depth(), true))
}

/// Backward of [`weighted_only`]; the two copies both feed the weighted half.
pub fn weighted_only_backward(f: &FeatureMapSet, s: &ScoreMatrix, grad: &Tensor) -> (Tensor, Tensor) {
    let d = f.depth();
    let mut folded = Tensor::zeros(grad.shape());
    for (o, g) in folded.data_mut().chunks_exact_mut(2 * d).zip(grad.data().chunks_exact(2 * d)) {
        for j in 0..d {
            o[d + j] = g[j] + g[d + j];
        }
    }
    let dummy = FusedFeature {
        map: Tensor::zeros(grad.shape()),
        selection: vec![0; s.regions()],
    };
    fuse_backward(f, s, &dummy, &folded)
}

fn duplicate_half(map: &Tensor, d: usize, second: bool) -> FusedFeature {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = Tensor::zeros(&[h, w, 2 * d]);
    for (o, src) in out.data_mut().chunks_exact_mut(2 * d).zip(map.data().chunks_exact(2 * d)) {
        let half = if second { &src[d..] } else { &src[..d] };
        o[..d].copy_from_slice(half);
        o[d..].copy_from_slice(half);
    }
    FusedFeature { map: out, selection: Vec::new() }
}

/// Per-cell mean over frames, duplicated along depth to `2D` so it fits the same head.
pub fn average_pool_baseline(f: &FeatureMapSet) -> FusedFeature {
    let (n, h, w, d) = (f.frames(), f.height(), f.width(), f.depth());
    let frame_len = h * w * d;
    let mut mean = vec![0.0; frame_len];
    for frame in f.tensor().data().chunks_exact(frame_len) {
        for (m, &v) in mean.iter_mut().zip(frame) {
            *m += v;
        }
    }
    let inv = 1.0 / n as f64;
    let mut out = Tensor::zeros(&[h, w, 2 * d]);
    for (o, m) in out.data_mut().chunks_exact_mut(2 * d).zip(mean.chunks_exact(d)) {
        for j in 0..d {
            o[j] = m[j] * inv;
            o[d + j] = m[j] * inv;
        }
    }
    FusedFeature { map: out, selection: Vec::new() }
}

pub fn average_pool_backward(f: &FeatureMapSet, grad: &Tensor) -> Tensor {
    let (n, d) = (f.frames(), f.depth());
    let inv = 1.0 / n as f64;
    let per_frame: Vec<f64> = grad
        .data()
        .chunks_exact(2 * d)
        .flat_map(|g| (0..d).map(move |j| (g[j] + g[d + j]) * inv))
        .collect();
    let mut out = Tensor::zeros(f.tensor().shape());
    for frame in out.data_mut().chunks_exact_mut(per_frame.len()) {
        frame.copy_from_slice(&per_frame);
    }
    out
}

/// Single frame map `H×W×D` duplicated to `H×W×2D`.
pub fn single_frame(map: &Tensor) -> FusedFeature {
    let d = map.shape()[2];
    let mut out = Tensor::zeros(&[map.shape()[0], map.shape()[1], 2 * d]);
    for (o, m) in out.data_mut().chunks_exact_mut(2 * d).zip(map.data().chunks_exact(d)) {
        o[..d].copy_from_slice(m);
        o[d..].copy_from_slice(m);
    }
    FusedFeature { map: out, selection: Vec::new() }
}

/// Clip embedding vector of length `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipEmbedding(pub Tensor);

impl ClipEmbedding {
    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Projection from the pooled `2D` vector to the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ProjectionHead {
    pub fn init(in_width: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / in_width as f64).sqrt()).expect("valid std");
        Self {
            weight: Tensor::from_fn(&[in_width, embed_dim], |_| normal.sample(rng)),
            bias: Tensor::zeros(&[embed_dim]),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Global average pooling followed by the linear projection.
pub fn clip_embedding(fused: &FusedFeature, head: &ProjectionHead) -> Result<ClipEmbedding> {
    let channels = fused.tensor().shape()[2];
    if head.in_width() != channels {
        return Err(StaError::dim("head input width", channels, head.in_width()));
    }
    let pooled = global_avg_pool(fused.tensor())?;
    Ok(ClipEmbedding(fully_connected(&pooled, &head.weight, &head.bias)?))
}

/// Gradients of [`clip_embedding`]: `(d fused map, d weight, d bias)`.
pub fn clip_embedding_backward(fused: &FusedFeature, head: &ProjectionHead, grad: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let pooled = global_avg_pool(fused.tensor())?;
    let (dpooled, dw, db) = fully_connected_backward(&pooled, &head.weight, grad);
    Ok((global_avg_pool_backward(fused.tensor().shape(), &dpooled), dw, db))
}
