//! Tracklets, clip sampling, identity-balanced batches and the synthetic benchmark.

mod layout;
mod sampling;
mod synth;

pub use layout::{load_dataset, load_tracklet_dir, save_dataset, tracklet_dir_name, MANIFEST_FILE};
pub use sampling::{evenly_spaced, pk_batch, sample_frames, sample_indices, PkBatch};
pub use synth::{synth_generate, Occlusion, SynthConfig, SynthWorld};

use crate::backbone::FeatureMapSet;
use crate::error::{Result, StaError};
use crate::numerics::Tensor;

/// Frames of a tracklet: raw `H×W×3` images in `[0,1]`, or precomputed feature maps.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameSource {
    Images(Vec<Tensor>),
    Features(FeatureMapSet),
}

impl FrameSource {
    pub fn len(&self) -> usize {
        match self {
            FrameSource::Images(v) => v.len(),
            FrameSource::Features(f) => f.frames(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frames at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<FrameSource> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(StaError::arg(format!("frame index {bad} out of range {}", self.len())));
        }
        Ok(match self {
            FrameSource::Images(v) => FrameSource::Images(indices.iter().map(|&i| v[i].clone()).collect()),
            FrameSource::Features(f) => FrameSource::Features(f.select(indices)?),
        })
    }

    /// Mirrors every frame left to right.
    pub fn flipped(&self) -> FrameSource {
        match self {
            FrameSource::Images(v) => FrameSource::Images(v.iter().map(flip_horizontal).collect()),
            FrameSource::Features(f) => {
                let frames = (0..f.frames()).map(|n| flip_horizontal(&f.frame(n))).collect();
                FrameSource::Features(FeatureMapSet::from_frames(frames).expect("flip keeps shape"))
            }
        }
    }
}

/// Mirrors an `H×W×C` tensor along its width axis.
pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Tensor::zeros(t.shape());
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * c;
            let dst = (y * w + (w - 1 - x)) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
        }
    }
    out
}

/// One person's frame sequence from one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub frames: FrameSource,
    pub identity: u32,
    pub camera: u32,
    pub tracklet_id: u32,
}

impl Tracklet {
    pub fn new(frames: FrameSource, identity: u32, camera: u32, tracklet_id: u32) -> Result<Self> {
        if frames.is_empty() {
            return Err(StaError::arg(format!("tracklet {tracklet_id} has no frames")));
        }
        Ok(Self {
            frames,
            identity,
            camera,
            tracklet_id,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Which part of a dataset a tracklet belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
    Distractor,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
            Split::Distractor => "distractor",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            "distractor" => Ok(Split::Distractor),
            other => Err(StaError::config(format!("unknown split {other:?}"))),
        }
    }
}

/// Train / query / gallery / distractor tracklets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Tracklet>,
    pub query: Vec<Tracklet>,
    pub gallery: Vec<Tracklet>,
    pub distractors: Vec<Tracklet>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Tracklet] {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
            Split::Distractor => &self.distractors,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Tracklet> {
        match split {
            Split::Train => &mut self.train,
            Split::Query => &mut self.query,
            Split::Gallery => &mut self.gallery,
            Split::Distractor => &mut self.distractors,
        }
    }

    /// All tracklets tagged with their split, in split order.
    pub fn iter(&self) -> impl Iterator<Item = (Split, &Tracklet)> {
        [Split::Train, Split::Query, Split::Gallery, Split::Distractor]
            .into_iter()
            .flat_map(move |s| self.split(s).iter().map(move |t| (s, t)))
    }

    pub fn tracklet_count(&self) -> usize {
        self.train.len() + self.query.len() + self.gallery.len() + self.distractors.len()
    }

    pub fn frame_count(&self) -> usize {
        self.iter().map(|(_, t)| t.len()).sum()
    }
}
