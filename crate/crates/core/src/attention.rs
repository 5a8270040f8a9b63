//! Parameter-free spatial-temporal attention.
//!
//! Each frame's feature energy (sum of squared channels per cell) is turned
//! into a spatial distribution, summed over `K` horizontal stripes, and each
//! stripe's scores are then normalized across frames. The result is an `N×K`
//! matrix whose columns are distributions over frames.
//!
//! Every step has an explicit backward so the training loop can push
//! gradients from the fused feature back onto the feature maps.

use crate::backbone::FeatureMapSet;
use crate::error::{Result, StaError};
use crate::numerics::Tensor;

/// Per-frame spatial attention maps, `N×H×W`, each frame summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    maps: Tensor,
    /// Per-frame energy totals; zero marks a frame that used the uniform fallback.
    totals: Vec<f64>,
}

impl AttentionMaps {
    pub fn tensor(&self) -> &Tensor {
        &self.maps
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

    pub fn frame(&self, n: usize) -> &[f64] {
        let cells = self.height() * self.width();
        &self.maps.data()[n * cells..(n + 1) * cells]
    }

    /// Whether frame `n` had zero energy and fell back to a uniform map.
    pub fn is_fallback(&self, n: usize) -> bool {
        self.totals[n] == 0.0
    }
}

/// Normalized `N×K` spatial-temporal scores; every column sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    scores: Tensor,
    column_totals: Vec<f64>,
}

impl ScoreMatrix {
    /// Wraps an explicit score matrix, checking non-negativity and column sums.
    pub fn from_tensor(scores: Tensor) -> Result<Self> {
        if scores.rank() != 2 {
            return Err(StaError::dim("score matrix rank", 2, scores.rank()));
        }
        let k = scores.shape()[1];
        let mut column_totals = vec![0.0; k];
        for row in scores.data().chunks_exact(k) {
            for (t, &v) in column_totals.iter_mut().zip(row) {
                if !(v >= 0.0) {
                    return Err(StaError::arg("scores must be non-negative"));
                }
                *t += v;
            }
        }
        if let Some(c) = column_totals.iter().position(|t| (t - 1.0).abs() > 1e-6) {
            return Err(StaError::arg(format!("score column {c} sums to {}", column_totals[c])));
        }
        Ok(Self {
            scores,
            column_totals: vec![1.0; k],
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.scores
    }

    pub fn frames(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn regions(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn get(&self, n: usize, k: usize) -> f64 {
        self.scores.data()[n * self.regions() + k]
    }

    /// Column `k` as a vector over frames.
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.frames()).map(|n| self.get(n, k)).collect()
    }
}

/// Per-frame attention map: squared channel energy over its frame total.
/// A frame with zero total energy maps to the uniform `1/(H·W)`.
pub fn attention_map(f: &FeatureMapSet) -> AttentionMaps {
    let (n, h, w, d) = (f.frames(), f.height(), f.width(), f.depth());
    let cells = h * w;
    let mut maps = Vec::with_capacity(n * cells);
    let mut totals = Vec::with_capacity(n);
    for frame in f.tensor().data().chunks_exact(cells * d) {
        let energy: Vec<f64> = frame
            .chunks_exact(d)
            .map(|cell| cell.iter().map(|v| v * v).sum())
            .collect();
        let total: f64 = energy.iter().sum();
        if total > 0.0 {
            maps.extend(energy.iter().map(|e| e / total));
        } else {
            maps.extend(std::iter::repeat_n(1.0 / cells as f64, cells));
        }
        totals.push(total);
    }
    AttentionMaps {
        maps: Tensor::new(vec![n, h, w], maps).expect("attention shape"),
        totals,
    }
}

/// Gradient of a loss w.r.t. the feature maps given its gradient w.r.t. the
/// attention maps. Fallback frames receive zero gradient.
pub fn attention_map_backward(f: &FeatureMapSet, g: &AttentionMaps, grad_g: &Tensor) -> Tensor {
    let (h, w, d) = (f.height(), f.width(), f.depth());
    let cells = h * w;
    assert_eq!(grad_g.shape(), g.tensor().shape());
    let mut out = Tensor::zeros(f.tensor().shape());
    let src = f.tensor().data();
    let dst = out.data_mut();
    for n in 0..f.frames() {
        let total = g.totals[n];
        if total == 0.0 {
            continue;
        }
        let gm = g.frame(n);
        let dg = &grad_g.data()[n * cells..(n + 1) * cells];
        let inner: f64 = gm.iter().zip(dg).map(|(a, b)| a * b).sum();
        for c in 0..cells {
            let de = (dg[c] - inner) / total;
            let base = (n * cells + c) * d;
            for j in 0..d {
                dst[base + j] = 2.0 * src[base + j] * de;
            }
        }
    }
    out
}

/// Splits each frame of an `N×H×W` or `N×H×W×D` tensor into `k_regions`
/// equal horizontal stripes. Returns `blocks[n][k]`.
pub fn split_blocks(m: &Tensor, k_regions: usize) -> Result<Vec<Vec<Tensor>>> {
    if m.rank() != 3 && m.rank() != 4 {
        return Err(StaError::dim("block input rank", 4, m.rank()));
    }
    let h = m.shape()[1];
    let stripe = stripe_height(h, k_regions)?;
    let row_len: usize = m.shape()[2..].iter().product();
    let frame_len = h * row_len;
    let mut shape = m.shape()[1..].to_vec();
    shape[0] = stripe;
    Ok((0..m.shape()[0])
        .map(|n| {
            (0..k_regions)
                .map(|k| {
                    let start = n * frame_len + k * stripe * row_len;
                    Tensor::new(shape.clone(), m.data()[start..start + stripe * row_len].to_vec())
                        .expect("block shape")
                })
                .collect()
        })
        .collect())
}

/// Rows per region, requiring `H` to be a multiple of `k_regions`.
pub fn stripe_height(h: usize, k_regions: usize) -> Result<usize> {
    if k_regions == 0 {
        return Err(StaError::config("region count must be at least 1"));
    }
    if !h.is_multiple_of(k_regions) {
        return Err(StaError::config(format!(
            "feature height {h} is not divisible by {k_regions} regions"
        )));
    }
    Ok(h / k_regions)
}

/// Raw `N×K` block scores: the ℓ1 mass of each frame's attention map per stripe.
pub fn block_scores(g: &AttentionMaps, k_regions: usize) -> Result<Tensor> {
    let (n, h, w) = (g.frames(), g.height(), g.width());
    let stripe = stripe_height(h, k_regions)?;
    let mut raw = Tensor::zeros(&[n, k_regions]);
    for f in 0..n {
        let frame = g.frame(f);
        for k in 0..k_regions {
            let block = &frame[k * stripe * w..(k + 1) * stripe * w];
            raw.data_mut()[f * k_regions + k] = block.iter().map(|v| v.abs()).sum();
        }
    }
    Ok(raw)
}

/// Spreads a gradient on raw block scores back over the attention cells.
pub fn block_scores_backward(g: &AttentionMaps, k_regions: usize, grad_raw: &Tensor) -> Tensor {
    let (n, h, w) = (g.frames(), g.height(), g.width());
    let stripe = h / k_regions;
    let mut out = Tensor::zeros(g.tensor().shape());
    for f in 0..n {
        for row in 0..h {
            let k = row / stripe;
            let gv = grad_raw.data()[f * k_regions + k];
            for col in 0..w {
                let idx = (f * h + row) * w + col;
                let sign = if g.tensor().data()[idx] < 0.0 { -1.0 } else { 1.0 };
                out.data_mut()[idx] = gv * sign;
            }
        }
    }
    out
}

/// Normalizes each column of raw scores across frames. An all-zero column becomes uniform `1/N`.
pub fn normalize_scores(raw: &Tensor) -> Result<ScoreMatrix> {
    if raw.rank() != 2 {
        return Err(StaError::dim("raw score rank", 2, raw.rank()));
    }
    if raw.data().iter().any(|v| !(*v >= 0.0)) {
        return Err(StaError::arg("raw scores must be non-negative"));
    }
    let (n, k) = (raw.shape()[0], raw.shape()[1]);
    let mut column_totals = vec![0.0; k];
    for row in raw.data().chunks_exact(k) {
        for (t, v) in column_totals.iter_mut().zip(row) {
            *t += v;
        }
    }
    let mut scores = raw.clone();
    for row in scores.data_mut().chunks_exact_mut(k) {
        for (v, &t) in row.iter_mut().zip(&column_totals) {
            *v = if t > 0.0 { *v / t } else { 1.0 / n as f64 };
        }
    }
    Ok(ScoreMatrix { scores, column_totals })
}

/// Gradient w.r.t. raw scores given a gradient w.r.t. the normalized matrix.
pub fn normalize_scores_backward(s: &ScoreMatrix, grad_s: &Tensor) -> Tensor {
    let (n, k) = (s.frames(), s.regions());
    let mut out = Tensor::zeros(&[n, k]);
    for c in 0..k {
        let total = s.column_totals[c];
        if total == 0.0 {
            continue;
        }
        let inner: f64 = (0..n).map(|r| grad_s.data()[r * k + c] * s.get(r, c)).sum();
        for r in 0..n {
            out.data_mut()[r * k + c] = (grad_s.data()[r * k + c] - inner) / total;
        }
    }
    out
}

/// The full chain from feature maps to the normalized score matrix.
pub fn score_matrix(f: &FeatureMapSet, k_regions: usize) -> Result<(AttentionMaps, ScoreMatrix)> {
    stripe_height(f.height(), k_regions)?;
    let g = attention_map(f);
    let raw = block_scores(&g, k_regions)?;
    let s = normalize_scores(&raw)?;
    Ok((g, s))
}

/// Backward of [`score_matrix`]: gradient on `S` to gradient on the feature maps.
pub fn score_matrix_backward(f: &FeatureMapSet, g: &AttentionMaps, s: &ScoreMatrix, grad_s: &Tensor) -> Tensor {
    let grad_raw = normalize_scores_backward(s, grad_s);
    let grad_g = block_scores_backward(g, s.regions(), &grad_raw);
    attention_map_backward(f, g, &grad_g)
}

/// Which norm the inter-frame regularizer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrobeniusVariant {
    /// `‖g_i − g_j‖_F`
    #[default]
    Sqrt,
    /// `‖g_i − g_j‖_F²`
    Squared,
}

/// Frobenius distance between the attention maps of frames `i` and `j`.
pub fn inter_frame_reg(g: &AttentionMaps, pair: (usize, usize), variant: FrobeniusVariant) -> Result<f64> {
    let (i, j) = check_pair(g, pair)?;
    let sq: f64 = g.frame(i).iter().zip(g.frame(j)).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(match variant {
        FrobeniusVariant::Sqrt => sq.sqrt(),
        FrobeniusVariant::Squared => sq,
    })
}

/// Gradient of [`inter_frame_reg`] w.r.t. the whole `N×H×W` attention tensor.
/// At zero distance the square-root variant uses the zero subgradient.
pub fn inter_frame_reg_backward(g: &AttentionMaps, pair: (usize, usize), variant: FrobeniusVariant) -> Result<Tensor> {
    let (i, j) = check_pair(g, pair)?;
    let cells = g.height() * g.width();
    let reg = inter_frame_reg(g, pair, variant)?;
    let scale = match variant {
        FrobeniusVariant::Sqrt if reg == 0.0 => 0.0,
        FrobeniusVariant::Sqrt => 1.0 / reg,
        FrobeniusVariant::Squared => 2.0,
    };
    let mut out = Tensor::zeros(g.tensor().shape());
    for c in 0..cells {
        let diff = g.frame(i)[c] - g.frame(j)[c];
        out.data_mut()[i * cells + c] = scale * diff;
        out.data_mut()[j * cells + c] = -scale * diff;
    }
    Ok(out)
}

fn check_pair(g: &AttentionMaps, (i, j): (usize, usize)) -> Result<(usize, usize)> {
    if i == j {
        return Err(StaError::arg(format!("regularizer needs two distinct frames, got ({i}, {j})")));
    }
    let n = g.frames();
    if i >= n || j >= n {
        return Err(StaError::arg(format!("frame pair ({i}, {j}) out of range for {n} frames")));
    }
    Ok((i, j))
}
