//! Training loop and test-time embedding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Aggregator, EvalSampling, RunConfig};
use super::model::{backward_clip, classifier_logits, embed_clip, forward_clip, round_f32, ClipGrads, ClipOptions, InputKind, Model};
use crate::data::{evenly_spaced, pk_batch, sample_indices, Dataset, Tracklet};
use crate::error::{Result, StaError};
use crate::eval::{evaluate, ItemMeta, Matrix, MetricsReport, RetrievalSet};
use crate::losses::{batch_hard_triplet, softmax_xent, LossReport, Reduction};
use crate::numerics::Tensor;
use crate::optim::{adam_step, lr_at, AdamState};
use crate::par::{self, Exec};

/// Offset mixed into the seed of the evaluation sampler so it never shares a stream with training.
const EVAL_SEED_OFFSET: u64 = 0x5EED_0E7A;

/// Mean losses over one epoch's steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub lr: f64,
    pub l_softmax: f64,
    pub l_triplet: f64,
    pub reg: f64,
    pub total: f64,
    pub active_triplets: f64,
}

impl EpochRecord {
    pub fn csv_header() -> &'static str {
        "epoch,lr,l_softmax,l_triplet,reg,total,active_triplets"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.l_softmax, self.l_triplet, self.reg, self.total, self.active_triplets
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || StaError::format(0, format!("bad history row {line:?}"));
        if f.len() != 7 {
            return Err(bad());
        }
        let n = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            lr: n(f[1])?,
            l_softmax: n(f[2])?,
            l_triplet: n(f[3])?,
            reg: n(f[4])?,
            total: n(f[5])?,
            active_triplets: n(f[6])?,
        })
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(EpochRecord::csv_header());
    s.push('\n');
    for r in history {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u32,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

/// Class index of every training identity, in ascending identity order.
pub fn class_map(data: &Dataset) -> BTreeMap<u32, usize> {
    let ids: std::collections::BTreeSet<u32> = data.train.iter().map(|t| t.identity).collect();
    ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

fn input_kind(data: &Dataset) -> Result<InputKind> {
    let first = data
        .train
        .first()
        .ok_or_else(|| StaError::config("training split is empty"))?;
    let kind = InputKind::of(&first.frames);
    if let Some(t) = data.iter().map(|(_, t)| t).find(|t| InputKind::of(&t.frames) != kind) {
        return Err(StaError::config(format!(
            "tracklet {} mixes images and feature maps with the rest of the dataset",
            t.tracklet_id
        )));
    }
    Ok(kind)
}

/// Fresh model and optimizer state for a run.
pub fn init_training(cfg: &RunConfig, data: &Dataset) -> Result<TrainState> {
    cfg.validate()?;
    let kind = input_kind(data)?;
    let classes = class_map(data);
    if classes.len() < cfg.p {
        return Err(StaError::config(format!(
            "p = {} but the training split has {} identities",
            cfg.p,
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::init(cfg, kind, classes.len(), &mut rng)?;
    if let crate::data::FrameSource::Features(f) = &data.train[0].frames {
        if f.height() % cfg.regions != 0 {
            return Err(StaError::config(format!(
                "feature height {} is not divisible by {} regions",
                f.height(),
                cfg.regions
            )));
        }
    }
    let adam = AdamState::new(&model.params(), cfg.weight_decay);
    Ok(TrainState {
        model,
        adam,
        epoch: 0,
        rng,
        history: Vec::new(),
    })
}

fn steps_per_epoch(cfg: &RunConfig, data: &Dataset) -> usize {
    if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        data.train.len().div_ceil(cfg.batch_size()).max(1)
    }
}

fn reg_pair(n: usize, rng: &mut impl Rng) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

/// One optimizer step; returns its loss breakdown.
pub fn train_step(state: &mut TrainState, cfg: &RunConfig, data: &Dataset, classes: &BTreeMap<u32, usize>, lr: f64, exec: Exec) -> Result<LossReport> {
    let opts = ClipOptions::from_config(cfg);
    let rng = &mut state.rng;
    let batch = pk_batch(&data.train, cfg.p, cfg.k_per_id, rng)?;
    let mut jobs = Vec::with_capacity(batch.items.len());
    for &item in &batch.items {
        let t = &data.train[item];
        let idx = sample_indices(t.len(), cfg.frames, rng)?;
        let mut clip = t.frames.select(&idx)?;
        if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob) {
            clip = clip.flipped();
        }
        let pair = cfg.use_reg.then(|| reg_pair(cfg.frames, rng));
        jobs.push((clip, pair));
    }
    let model = &state.model;
    let fwds = par::map(exec, &jobs, |(clip, pair)| forward_clip(model, clip, &opts, *pair))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let e = model.embed_dim();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (f, id) in fwds.iter().zip(&batch.identities) {
        for r in &f.embeddings {
            rows.extend_from_slice(r.data());
            labels.push(classes[id]);
        }
    }
    let n_rows = labels.len();
    let emb = Tensor::new(vec![n_rows, e], rows)?;
    let logits = classifier_logits(&emb, &model.classifier);
    let soft = softmax_xent(&logits, &labels, cfg.reduction)?;
    let mut grad_emb = Tensor::zeros(&[n_rows, e]);
    let (l_triplet, active) = if cfg.use_triplet {
        let tri = batch_hard_triplet(&emb, &labels, cfg.margin, cfg.reduction)?;
        grad_emb.add_assign(&tri.grad);
        (tri.value, tri.active)
    } else {
        (0.0, 0)
    };
    let c = model.classes();
    let mut grad_classifier = Tensor::zeros(model.classifier.shape());
    for r in 0..n_rows {
        let x = &emb.data()[r * e..(r + 1) * e];
        let gl = &soft.grad.data()[r * c..(r + 1) * c];
        let ge = &mut grad_emb.data_mut()[r * e..(r + 1) * e];
        for (j, (xv, wrow)) in x.iter().zip(model.classifier.data().chunks_exact(c)).enumerate() {
            ge[j] += wrow.iter().zip(gl).map(|(w, g)| w * g).sum::<f64>();
            let dst = &mut grad_classifier.data_mut()[j * c..(j + 1) * c];
            for (d, g) in dst.iter_mut().zip(gl) {
                *d += xv * g;
            }
        }
    }

    let reg_scale = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / fwds.len() as f64,
    };
    let reg: f64 = fwds.iter().filter_map(|f| f.reg).sum::<f64>() * reg_scale;
    let reg_weight = if cfg.use_reg { cfg.lambda * reg_scale } else { 0.0 };

    let mut offsets = Vec::with_capacity(fwds.len());
    let mut start = 0;
    for f in &fwds {
        offsets.push(start);
        start += f.embeddings.len();
    }
    let clip_idx: Vec<usize> = (0..fwds.len()).collect();
    let clip_grads = par::map(exec, &clip_idx, |&i| {
        let f = &fwds[i];
        let grad_rows: Vec<Tensor> = (0..f.embeddings.len())
            .map(|r| {
                let row = offsets[i] + r;
                Tensor::from_vec(grad_emb.data()[row * e..(row + 1) * e].to_vec())
            })
            .collect();
        backward_clip(model, f, &grad_rows, reg_weight, &opts)
    });
    let mut total = ClipGrads::zeros_like(model);
    for g in clip_grads {
        total.accumulate(&g?);
    }

    let mut grads: Vec<&Tensor> = Vec::new();
    if let Some(b) = &total.backbone {
        for (k, bias) in b.kernels.iter().zip(&b.biases) {
            grads.push(k);
            grads.push(bias);
        }
    }
    grads.extend([&total.head_weight, &total.head_bias, &grad_classifier]);
    let report = LossReport::new(soft.value, l_triplet, reg, if cfg.use_reg { cfg.lambda } else { 0.0 }, active);
    if !report.total.is_finite() {
        return Err(StaError::Evaluation(format!("non-finite loss {}", report.total)));
    }
    adam_step(&mut state.model.params_mut(), &grads, &mut state.adam, lr)?;
    state.model.round_to_f32();
    for m in state.adam.first_moment.iter_mut().chain(state.adam.second_moment.iter_mut()) {
        round_f32(m);
    }
    Ok(report)
}

/// Runs one epoch and appends its record to the history.
pub fn train_epoch(state: &mut TrainState, cfg: &RunConfig, data: &Dataset, exec: Exec) -> Result<EpochRecord> {
    let classes = class_map(data);
    let steps = steps_per_epoch(cfg, data);
    let lr = lr_at(&cfg.schedule, state.epoch);
    let mut sums = [0.0f64; 5];
    for _ in 0..steps {
        let r = train_step(state, cfg, data, &classes, lr, exec)?;
        for (s, v) in sums.iter_mut().zip([r.l_softmax, r.l_triplet, r.reg, r.total, r.active_triplets as f64]) {
            *s += v;
        }
    }
    let n = steps as f64;
    let record = EpochRecord {
        epoch: state.epoch,
        lr,
        l_softmax: sums[0] / n,
        l_triplet: sums[1] / n,
        reg: sums[2] / n,
        total: sums[3] / n,
        active_triplets: sums[4] / n,
    };
    state.epoch += 1;
    state.history.push(record);
    log::info!(
        "epoch {} lr {} softmax {:.4} triplet {:.4} reg {:.4} total {:.4}",
        record.epoch,
        record.lr,
        record.l_softmax,
        record.l_triplet,
        record.reg,
        record.total
    );
    Ok(record)
}

/// Trains until `cfg.epochs`, starting fresh or from `resume`.
///
/// `after_epoch` sees the state after every epoch (used for periodic checkpoints).
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    resume: Option<TrainState>,
    exec: Exec,
    mut after_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    let mut state = match resume {
        Some(s) => s,
        None => init_training(cfg, data)?,
    };
    while state.epoch < cfg.epochs {
        train_epoch(&mut state, cfg, data, exec)?;
        after_epoch(&state)?;
    }
    Ok(state)
}

/// Embeddings (rounded to `f32`) of a list of tracklets at `test_n` frames per clip.
pub fn embed_split(model: &Model, cfg: &RunConfig, tracklets: &[Tracklet], test_n: usize, exec: Exec) -> Result<Matrix> {
    if test_n == 0 {
        return Err(StaError::arg("test clip length must be at least 1"));
    }
    let opts = ClipOptions::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(EVAL_SEED_OFFSET));
    let mut jobs = Vec::with_capacity(tracklets.len());
    for t in tracklets {
        let clips = (0..cfg.eval_clips)
            .map(|_| match cfg.eval_sampling {
                EvalSampling::Even => evenly_spaced(t.len(), test_n),
                EvalSampling::Random => sample_indices(t.len(), test_n, &mut rng),
            })
            .collect::<Result<Vec<_>>>()?;
        jobs.push((t, clips));
    }
    let rows = par::map(exec, &jobs, |(t, clips)| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; model.embed_dim()];
        for idx in clips {
            let e = embed_clip(model, &t.frames.select(idx)?, &opts)?;
            acc.iter_mut().zip(e).for_each(|(a, v)| *a += v);
        }
        Ok(acc.into_iter().map(|v| (v / clips.len() as f64) as f32 as f64).collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows, model.embed_dim())
}

pub fn split_meta(tracklets: &[Tracklet], distractor: bool) -> Vec<ItemMeta> {
    tracklets
        .iter()
        .map(|t| ItemMeta {
            identity: t.identity,
            camera: t.camera,
            distractor,
        })
        .collect()
}

/// Query set against gallery plus distractors.
pub fn retrieval_set(model: &Model, cfg: &RunConfig, data: &Dataset, test_n: usize, exec: Exec) -> Result<RetrievalSet> {
    let query = embed_split(model, cfg, &data.query, test_n, exec)?;
    let gallery_tracklets: Vec<Tracklet> = data.gallery.iter().chain(&data.distractors).cloned().collect();
    let gallery = embed_split(model, cfg, &gallery_tracklets, test_n, exec)?;
    let mut gallery_meta = split_meta(&data.gallery, false);
    gallery_meta.extend(split_meta(&data.distractors, true));
    RetrievalSet::new(query, split_meta(&data.query, false), gallery, gallery_meta)
}

pub fn evaluate_model(model: &Model, cfg: &RunConfig, data: &Dataset, test_n: usize, exec: Exec) -> Result<MetricsReport> {
    let set = retrieval_set(model, cfg, data, test_n, exec)?;
    evaluate(&set, cfg.normalize_embeddings, exec)
}

/// Whether the aggregator computes a score matrix.
pub fn has_scores(aggregator: Aggregator) -> bool {
    matches!(aggregator, Aggregator::Sta | Aggregator::StaNoFusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn tiny() -> (RunConfig, Dataset) {
        let data = synth_generate(&SynthConfig {
            num_identities: 10,
            tracklets_per_identity: 2,
            frames_per_tracklet: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = RunConfig {
            p: 3,
            k_per_id: 2,
            depth: 4,
            embed_dim: 8,
            epochs: 2,
            steps_per_epoch: 2,
            ..RunConfig::default()
        };
        (cfg, data)
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let (cfg, data) = tiny();
        let a = train(&cfg, &data, None, Exec::Sequential, |_| Ok(())).unwrap();
        let b = train(&cfg, &data, None, Exec::Parallel, |_| Ok(())).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 2);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (cfg, data) = tiny();
        let full = train(&cfg, &data, None, Exec::Sequential, |_| Ok(())).unwrap();
        let half = train(&RunConfig { epochs: 1, ..cfg.clone() }, &data, None, Exec::Sequential, |_| Ok(())).unwrap();
        let resumed = train(&cfg, &data, Some(half), Exec::Sequential, |_| Ok(())).unwrap();
        assert_eq!(full, resumed);
    }

    #[test]
    fn every_arm_trains() {
        let (cfg, data) = tiny();
        for (aggregator, use_triplet) in [
            (Aggregator::None, false),
            (Aggregator::Average, true),
            (Aggregator::StaNoFusion, true),
            (Aggregator::Sta, true),
        ] {
            let c = RunConfig { aggregator, use_triplet, epochs: 1, ..cfg.clone() };
            let s = train(&c, &data, None, Exec::Sequential, |_| Ok(())).unwrap();
            assert!(s.history[0].total.is_finite());
            let r = evaluate_model(&s.model, &c, &data, 2, Exec::Sequential).unwrap();
            assert_eq!(r.evaluated, 5);
        }
    }

    #[test]
    fn history_rows_round_trip() {
        let r = EpochRecord {
            epoch: 3,
            lr: 3e-4,
            l_softmax: 1.0 / 3.0,
            l_triplet: 0.1,
            reg: 2.5,
            total: 7.0,
            active_triplets: 12.5,
        };
        assert_eq!(EpochRecord::parse_csv_row(&r.to_csv_row()).unwrap(), r);
    }

    #[test]
    fn too_few_identities_is_config_error() {
        let (cfg, data) = tiny();
        let c = RunConfig { p: 6, ..cfg };
        assert!(matches!(init_training(&c, &data), Err(StaError::Config(_))));
    }
}
