//! The trainable pipeline: backbone, attention aggregation, projection head and classifier.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Aggregator, RunConfig};
use crate::attention::{
    attention_map, attention_map_backward, inter_frame_reg, inter_frame_reg_backward, score_matrix,
    score_matrix_backward, AttentionMaps, FrobeniusVariant, ScoreMatrix,
};
use crate::backbone::{BackboneArch, BackboneGrads, BackboneParams, FeatureMapSet, FrameTrace};
use crate::data::FrameSource;
use crate::error::{Result, StaError};
use crate::fusion::{
    average_pool_backward, average_pool_baseline, clip_embedding, clip_embedding_backward, fuse, fuse_backward,
    single_frame, weighted_only, weighted_only_backward, FusedFeature, ProjectionHead,
};
use crate::numerics::Tensor;

/// Whether clips arrive as images (run through the backbone) or as feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Images,
    Features { depth: usize },
}

impl InputKind {
    pub fn of(frames: &FrameSource) -> Self {
        match frames {
            FrameSource::Images(_) => InputKind::Images,
            FrameSource::Features(f) => InputKind::Features { depth: f.depth() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    /// Absent when training on precomputed feature maps.
    pub backbone: Option<BackboneParams>,
    pub head: ProjectionHead,
    /// `E×C` identity classifier, used only by the softmax loss.
    pub classifier: Tensor,
}

/// Architecture implied by a run config.
pub fn backbone_arch(cfg: &RunConfig) -> BackboneArch {
    BackboneArch {
        input_height: cfg.image_height,
        input_width: cfg.image_width,
        ..BackboneArch::desk_scale(cfg.depth)
    }
}

impl Model {
    pub fn init(cfg: &RunConfig, input: InputKind, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if classes == 0 {
            return Err(StaError::config("training split has no identities"));
        }
        let backbone = match input {
            InputKind::Images => {
                let params = BackboneParams::init(backbone_arch(cfg), rng)?;
                params.validate(cfg.regions)?;
                Some(params)
            }
            InputKind::Features { depth } => {
                if depth != cfg.depth {
                    return Err(StaError::config(format!(
                        "feature maps have depth {depth} but the config says {}",
                        cfg.depth
                    )));
                }
                None
            }
        };
        let head = ProjectionHead::init(2 * cfg.depth, cfg.embed_dim, rng);
        let normal = Normal::new(0.0, (1.0 / cfg.embed_dim as f64).sqrt()).expect("valid std");
        let classifier = Tensor::from_fn(&[cfg.embed_dim, classes], |_| normal.sample(rng));
        let mut model = Self { backbone, head, classifier };
        model.round_to_f32();
        Ok(model)
    }

    pub fn classes(&self) -> usize {
        self.classifier.shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.head.embed_dim()
    }

    /// Parameter names in the fixed order used by the optimizer and checkpoints.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if let Some(b) = &self.backbone {
            for i in 0..b.kernels.len() {
                names.push(format!("backbone.conv{i}.kernel"));
                names.push(format!("backbone.conv{i}.bias"));
            }
        }
        names.extend(["head.weight", "head.bias", "classifier.weight"].map(String::from));
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some(b) = &self.backbone {
            for (k, bias) in b.kernels.iter().zip(&b.biases) {
                out.push(k);
                out.push(bias);
            }
        }
        out.extend([&self.head.weight, &self.head.bias, &self.classifier]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(b) = &mut self.backbone {
            for (k, bias) in b.kernels.iter_mut().zip(b.biases.iter_mut()) {
                out.push(k);
                out.push(bias);
            }
        }
        out.extend([&mut self.head.weight, &mut self.head.bias, &mut self.classifier]);
        out
    }

    /// Rounds every parameter to the nearest `f32`, the precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            round_f32(p);
        }
    }

    /// Feature maps of a clip, plus backbone traces when the clip holds images.
    pub fn feature_maps(&self, frames: &FrameSource) -> Result<(FeatureMapSet, Vec<FrameTrace>)> {
        match (frames, &self.backbone) {
            (FrameSource::Images(images), Some(b)) => {
                let mut maps = Vec::with_capacity(images.len());
                let mut traces = Vec::with_capacity(images.len());
                for img in images {
                    let (m, t) = b.forward_frame(img)?;
                    maps.push(m);
                    traces.push(t);
                }
                Ok((FeatureMapSet::from_frames(maps)?, traces))
            }
            (FrameSource::Features(f), None) => Ok((f.clone(), Vec::new())),
            (FrameSource::Images(_), None) => Err(StaError::config("model has no backbone but the clip holds images")),
            (FrameSource::Features(_), Some(_)) => {
                Err(StaError::config("model has a backbone but the clip holds feature maps"))
            }
        }
    }
}

pub(crate) fn round_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// Per-clip settings shared by forward and backward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipOptions {
    pub aggregator: Aggregator,
    pub regions: usize,
    pub frobenius: FrobeniusVariant,
}

impl ClipOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            aggregator: cfg.aggregator,
            regions: cfg.regions,
            frobenius: cfg.frobenius,
        }
    }
}

/// Everything a clip's backward pass needs.
#[derive(Debug, Clone)]
pub struct ClipForward {
    traces: Vec<FrameTrace>,
    maps: FeatureMapSet,
    attention: Option<AttentionMaps>,
    scores: Option<ScoreMatrix>,
    fused: Vec<FusedFeature>,
    /// One row for clip aggregators, one per frame for [`Aggregator::None`].
    pub embeddings: Vec<Tensor>,
    pub reg: Option<f64>,
    reg_pair: Option<(usize, usize)>,
}

impl ClipForward {
    pub fn scores(&self) -> Option<&ScoreMatrix> {
        self.scores.as_ref()
    }

    pub fn maps(&self) -> &FeatureMapSet {
        &self.maps
    }
}

/// Forward pass of one clip. `reg_pair` turns on the inter-frame regularizer.
pub fn forward_clip(model: &Model, frames: &FrameSource, opts: &ClipOptions, reg_pair: Option<(usize, usize)>) -> Result<ClipForward> {
    let (maps, traces) = model.feature_maps(frames)?;
    let (attention, scores) = match opts.aggregator {
        Aggregator::Sta | Aggregator::StaNoFusion => {
            let (g, s) = score_matrix(&maps, opts.regions)?;
            (Some(g), Some(s))
        }
        Aggregator::Average | Aggregator::None if reg_pair.is_some() => (Some(attention_map(&maps)), None),
        _ => (None, None),
    };
    let fused = match opts.aggregator {
        Aggregator::Sta => vec![fuse(&maps, scores.as_ref().expect("scores"))?],
        Aggregator::StaNoFusion => vec![weighted_only(&maps, scores.as_ref().expect("scores"))?],
        Aggregator::Average => vec![average_pool_baseline(&maps)],
        Aggregator::None => (0..maps.frames()).map(|n| single_frame(&maps.frame(n))).collect(),
    };
    let embeddings = fused
        .iter()
        .map(|f| clip_embedding(f, &model.head).map(|e| e.0))
        .collect::<Result<Vec<_>>>()?;
    let reg = match reg_pair {
        Some(pair) => Some(inter_frame_reg(attention.as_ref().expect("attention"), pair, opts.frobenius)?),
        None => None,
    };
    Ok(ClipForward {
        traces,
        maps,
        attention,
        scores,
        fused,
        embeddings,
        reg,
        reg_pair,
    })
}

/// Gradients of one clip for the backbone and head; the classifier is handled per batch.
#[derive(Debug, Clone)]
pub struct ClipGrads {
    pub backbone: Option<BackboneGrads>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl ClipGrads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            backbone: model.backbone.as_ref().map(BackboneGrads::zeros_like),
            head_weight: Tensor::zeros(model.head.weight.shape()),
            head_bias: Tensor::zeros(model.head.bias.shape()),
        }
    }

    pub fn accumulate(&mut self, other: &ClipGrads) {
        if let (Some(a), Some(b)) = (&mut self.backbone, &other.backbone) {
            a.accumulate(b);
        }
        self.head_weight.add_assign(&other.head_weight);
        self.head_bias.add_assign(&other.head_bias);
    }
}

/// Backward pass of one clip given the gradient on each embedding row and
/// the weight the regularizer carries in the objective.
pub fn backward_clip(model: &Model, fwd: &ClipForward, grad_rows: &[Tensor], reg_weight: f64, opts: &ClipOptions) -> Result<ClipGrads> {
    let (df, mut grads) = backward_to_maps(model, fwd, grad_rows, reg_weight, opts)?;
    let maps = &fwd.maps;
    if let (Some(b), Some(acc)) = (&model.backbone, &mut grads.backbone) {
        let frame_len = df.len() / maps.frames();
        let shape = &maps.tensor().shape()[1..];
        for (n, trace) in fwd.traces.iter().enumerate() {
            let g = Tensor::new(shape.to_vec(), df.data()[n * frame_len..(n + 1) * frame_len].to_vec())?;
            acc.accumulate(&b.backward_frame(trace, &g)?);
        }
    }
    Ok(grads)
}

/// Gradient on the clip's feature maps, plus head gradients.
pub(crate) fn backward_to_maps(
    model: &Model,
    fwd: &ClipForward,
    grad_rows: &[Tensor],
    reg_weight: f64,
    opts: &ClipOptions,
) -> Result<(Tensor, ClipGrads)> {
    if grad_rows.len() != fwd.embeddings.len() {
        return Err(StaError::dim("embedding gradient rows", fwd.embeddings.len(), grad_rows.len()));
    }
    let mut grads = ClipGrads::zeros_like(model);
    let mut dmaps = Vec::with_capacity(fwd.fused.len());
    for (fused, g) in fwd.fused.iter().zip(grad_rows) {
        let (dmap, dw, db) = clip_embedding_backward(fused, &model.head, g)?;
        grads.head_weight.add_assign(&dw);
        grads.head_bias.add_assign(&db);
        dmaps.push(dmap);
    }
    let maps = &fwd.maps;
    let mut df = match opts.aggregator {
        Aggregator::Sta | Aggregator::StaNoFusion => {
            let (g, s) = (fwd.attention.as_ref().expect("attention"), fwd.scores.as_ref().expect("scores"));
            let (mut df, ds) = if opts.aggregator == Aggregator::Sta {
                fuse_backward(maps, s, &fwd.fused[0], &dmaps[0])
            } else {
                weighted_only_backward(maps, s, &dmaps[0])
            };
            df.add_assign(&score_matrix_backward(maps, g, s, &ds));
            df
        }
        Aggregator::Average => average_pool_backward(maps, &dmaps[0]),
        Aggregator::None => {
            let d = maps.depth();
            let frame_len = maps.height() * maps.width() * d;
            let mut df = Tensor::zeros(maps.tensor().shape());
            for (n, dmap) in dmaps.iter().enumerate() {
                let dst = &mut df.data_mut()[n * frame_len..(n + 1) * frame_len];
                for (o, g) in dst.chunks_exact_mut(d).zip(dmap.data().chunks_exact(2 * d)) {
                    for j in 0..d {
                        o[j] = g[j] + g[d + j];
                    }
                }
            }
            df
        }
    };
    if let Some(pair) = fwd.reg_pair {
        let g = fwd.attention.as_ref().expect("attention");
        let mut grad_g = inter_frame_reg_backward(g, pair, opts.frobenius)?;
        grad_g.scale(reg_weight);
        df.add_assign(&attention_map_backward(maps, g, &grad_g));
    }
    Ok((df, grads))
}

/// Test-time embedding of one clip; frame embeddings are averaged for [`Aggregator::None`].
pub fn embed_clip(model: &Model, frames: &FrameSource, opts: &ClipOptions) -> Result<Vec<f64>> {
    let fwd = forward_clip(model, frames, opts, None)?;
    let rows = fwd.embeddings.len() as f64;
    let mut out = vec![0.0; model.embed_dim()];
    for e in &fwd.embeddings {
        for (o, v) in out.iter_mut().zip(e.data()) {
            *o += v;
        }
    }
    if rows > 1.0 {
        out.iter_mut().for_each(|v| *v /= rows);
    }
    Ok(out)
}

/// `rows×C` logits of `rows×E` embeddings under the bias-free classifier.
pub fn classifier_logits(embeddings: &Tensor, classifier: &Tensor) -> Tensor {
    let (rows, e) = (embeddings.shape()[0], embeddings.shape()[1]);
    let c = classifier.shape()[1];
    let mut out = Tensor::zeros(&[rows, c]);
    for r in 0..rows {
        let x = &embeddings.data()[r * e..(r + 1) * e];
        let dst = &mut out.data_mut()[r * c..(r + 1) * c];
        for (xv, wrow) in x.iter().zip(classifier.data().chunks_exact(c)) {
            for (o, w) in dst.iter_mut().zip(wrow) {
                *o += xv * w;
            }
        }
    }
    out
}
