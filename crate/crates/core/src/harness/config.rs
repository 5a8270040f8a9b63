//! Flat `key = value` run and synthetic-data configuration files.

use std::path::{Path, PathBuf};

use crate::attention::FrobeniusVariant;
use crate::data::SynthConfig;
use crate::error::{Result, StaError};
use crate::losses::Reduction;
use crate::optim::LrSchedule;

/// How a clip's frame maps become one feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregator {
    /// Selected blocks plus score-weighted blocks.
    #[default]
    Sta,
    /// Score-weighted blocks only.
    StaNoFusion,
    /// Mean over frames.
    Average,
    /// Frames are treated independently; evaluation averages frame embeddings.
    None,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Sta => "sta",
            Aggregator::StaNoFusion => "sta_no_fusion",
            Aggregator::Average => "average",
            Aggregator::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sta" => Ok(Aggregator::Sta),
            "sta_no_fusion" => Ok(Aggregator::StaNoFusion),
            "average" => Ok(Aggregator::Average),
            "none" => Ok(Aggregator::None),
            other => Err(StaError::config(format!("unknown aggregator {other:?}"))),
        }
    }
}

/// Frame selection for evaluation clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalSampling {
    #[default]
    Even,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Frames per training clip.
    pub frames: usize,
    /// Frames per evaluation clip.
    pub test_frames: usize,
    pub regions: usize,
    pub p: usize,
    pub k_per_id: usize,
    pub margin: f64,
    pub lambda: f64,
    pub frobenius: FrobeniusVariant,
    pub reduction: Reduction,
    pub aggregator: Aggregator,
    pub use_triplet: bool,
    pub use_reg: bool,
    pub embed_dim: usize,
    /// Backbone output depth.
    pub depth: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub epochs: u32,
    /// Optimizer steps per epoch; 0 means one pass over the training tracklets.
    pub steps_per_epoch: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
    pub flip_prob: f64,
    pub eval_sampling: EvalSampling,
    /// Clips averaged per tracklet at evaluation.
    pub eval_clips: usize,
    pub normalize_embeddings: bool,
    /// Write an extra checkpoint every this many epochs (0 disables).
    pub checkpoint_every: u32,
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            test_frames: 4,
            regions: 4,
            p: 16,
            k_per_id: 4,
            margin: 0.3,
            lambda: 0.1,
            frobenius: FrobeniusVariant::Sqrt,
            reduction: Reduction::Sum,
            aggregator: Aggregator::Sta,
            use_triplet: true,
            use_reg: true,
            embed_dim: 128,
            depth: 32,
            image_height: 32,
            image_width: 16,
            epochs: 30,
            steps_per_epoch: 0,
            schedule: LrSchedule::new(3e-4, vec![(8, 3e-5), (15, 3e-6)]).expect("valid schedule"),
            weight_decay: 5e-4,
            seed: 0,
            flip_prob: 0.5,
            eval_sampling: EvalSampling::Even,
            eval_clips: 1,
            normalize_embeddings: false,
            checkpoint_every: 0,
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
        }
    }
}

fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| StaError::config(format!("line {}: expected key = value", i + 1)))?;
        let key = k.trim().to_string();
        if out.iter().any(|(seen, _)| *seen == key) {
            return Err(StaError::config(format!("line {}: duplicate key {key:?}", i + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| StaError::config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(StaError::config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_steps(v: &str) -> Result<Vec<(u32, f64)>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (e, r) = item
                .split_once(':')
                .ok_or_else(|| StaError::config(format!("lr_steps: expected epoch:rate, got {item:?}")))?;
            Ok((num("lr_steps", e.trim())?, num("lr_steps", r.trim())?))
        })
        .collect()
}

impl RunConfig {
    /// Parses a config file body; keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut lr = c.schedule.base;
        let mut steps = c.schedule.steps.clone();
        for (k, v) in parse_kv(text)? {
            let v = v.as_str();
            match k.as_str() {
                "frames" => c.frames = num(&k, v)?,
                "test_frames" => c.test_frames = num(&k, v)?,
                "regions" => c.regions = num(&k, v)?,
                "p" => c.p = num(&k, v)?,
                "k_per_id" => c.k_per_id = num(&k, v)?,
                "margin" => c.margin = num(&k, v)?,
                "lambda" => c.lambda = num(&k, v)?,
                "frobenius" => {
                    c.frobenius = match v {
                        "sqrt" => FrobeniusVariant::Sqrt,
                        "squared" => FrobeniusVariant::Squared,
                        _ => return Err(StaError::config(format!("frobenius: expected sqrt or squared, got {v:?}"))),
                    }
                }
                "reduction" => {
                    c.reduction = match v {
                        "sum" => Reduction::Sum,
                        "mean" => Reduction::Mean,
                        _ => return Err(StaError::config(format!("reduction: expected sum or mean, got {v:?}"))),
                    }
                }
                "aggregator" => c.aggregator = Aggregator::parse(v)?,
                "use_triplet" => c.use_triplet = boolean(&k, v)?,
                "use_reg" => c.use_reg = boolean(&k, v)?,
                "embed_dim" => c.embed_dim = num(&k, v)?,
                "depth" => c.depth = num(&k, v)?,
                "image_height" => c.image_height = num(&k, v)?,
                "image_width" => c.image_width = num(&k, v)?,
                "epochs" => c.epochs = num(&k, v)?,
                "steps_per_epoch" => c.steps_per_epoch = num(&k, v)?,
                "lr" => lr = num(&k, v)?,
                "lr_steps" => steps = parse_steps(v)?,
                "weight_decay" => c.weight_decay = num(&k, v)?,
                "seed" => c.seed = num(&k, v)?,
                "flip_prob" => c.flip_prob = num(&k, v)?,
                "eval_sampling" => {
                    c.eval_sampling = match v {
                        "even" => EvalSampling::Even,
                        "random" => EvalSampling::Random,
                        _ => return Err(StaError::config(format!("eval_sampling: expected even or random, got {v:?}"))),
                    }
                }
                "eval_clips" => c.eval_clips = num(&k, v)?,
                "normalize_embeddings" => c.normalize_embeddings = boolean(&k, v)?,
                "checkpoint_every" => c.checkpoint_every = num(&k, v)?,
                "data" => c.data = PathBuf::from(v),
                "out" => c.out = PathBuf::from(v),
                other => return Err(StaError::config(format!("unknown key {other:?}"))),
            }
        }
        c.schedule = LrSchedule::new(lr, steps)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| StaError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("test_frames", self.test_frames),
            ("regions", self.regions),
            ("p", self.p),
            ("k_per_id", self.k_per_id),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("eval_clips", self.eval_clips),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(StaError::config(format!("{name} must be at least 1")));
        }
        if self.use_reg && self.frames < 2 {
            return Err(StaError::config(format!(
                "use_reg needs at least 2 frames per clip, got {}",
                self.frames
            )));
        }
        if self.use_triplet && (self.p < 2 || self.k_per_id < 2) {
            return Err(StaError::config("the triplet loss needs p >= 2 and k_per_id >= 2"));
        }
        if !(self.margin >= 0.0) || !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(StaError::config("margin, lambda and weight_decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(StaError::config("flip_prob must lie in [0, 1]"));
        }
        if self.epochs == 0 {
            return Err(StaError::config("epochs must be at least 1"));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k_per_id
    }

    /// All keys in a fixed order; [`RunConfig::parse`] reads it back unchanged.
    pub fn echo(&self) -> String {
        let steps: Vec<String> = self.schedule.steps.iter().map(|(e, r)| format!("{e}:{r}")).collect();
        let lines = [
            ("frames", self.frames.to_string()),
            ("test_frames", self.test_frames.to_string()),
            ("regions", self.regions.to_string()),
            ("p", self.p.to_string()),
            ("k_per_id", self.k_per_id.to_string()),
            ("margin", self.margin.to_string()),
            ("lambda", self.lambda.to_string()),
            (
                "frobenius",
                match self.frobenius {
                    FrobeniusVariant::Sqrt => "sqrt",
                    FrobeniusVariant::Squared => "squared",
                }
                .to_string(),
            ),
            (
                "reduction",
                match self.reduction {
                    Reduction::Sum => "sum",
                    Reduction::Mean => "mean",
                }
                .to_string(),
            ),
            ("aggregator", self.aggregator.name().to_string()),
            ("use_triplet", self.use_triplet.to_string()),
            ("use_reg", self.use_reg.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("image_height", self.image_height.to_string()),
            ("image_width", self.image_width.to_string()),
            ("epochs", self.epochs.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("lr", self.schedule.base.to_string()),
            ("lr_steps", steps.join(",")),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("flip_prob", self.flip_prob.to_string()),
            (
                "eval_sampling",
                match self.eval_sampling {
                    EvalSampling::Even => "even",
                    EvalSampling::Random => "random",
                }
                .to_string(),
            ),
            ("eval_clips", self.eval_clips.to_string()),
            ("normalize_embeddings", self.normalize_embeddings.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("data", self.data.display().to_string()),
            ("out", self.out.display().to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

impl RunConfig {
    /// [`RunConfig::echo`] without the `data` and `out` paths, as stored in checkpoints.
    pub fn echo_portable(&self) -> String {
        self.echo()
            .lines()
            .filter(|l| !l.starts_with("data =") && !l.starts_with("out ="))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    /// Whether a model trained under `other` has the parameter shapes this config expects.
    pub fn same_model_shape(&self, other: &RunConfig) -> bool {
        (self.depth, self.embed_dim, self.image_height, self.image_width)
            == (other.depth, other.embed_dim, other.image_height, other.image_width)
    }
}

/// Parses a synthetic benchmark config; keys mirror the [`SynthConfig`] fields.
pub fn parse_synth_config(text: &str) -> Result<SynthConfig> {
    let mut c = SynthConfig::default();
    for (k, v) in parse_kv(text)? {
        let v = v.as_str();
        match k.as_str() {
            "num_identities" => c.num_identities = num(&k, v)?,
            "tracklets_per_identity" => c.tracklets_per_identity = num(&k, v)?,
            "frames_per_tracklet" => c.frames_per_tracklet = num(&k, v)?,
            "image_height" => c.image_height = num(&k, v)?,
            "image_width" => c.image_width = num(&k, v)?,
            "occlusion_prob" => c.occlusion_prob = num(&k, v)?,
            "occlusion_height" => c.occlusion_height = num(&k, v)?,
            "pose_shift" => c.pose_shift = num(&k, v)?,
            "noise_std" => c.noise_std = num(&k, v)?,
            "seed" => c.seed = num(&k, v)?,
            "num_cameras" => c.num_cameras = num(&k, v)?,
            "train_fraction" => c.train_fraction = num(&k, v)?,
            "num_distractors" => c.num_distractors = num(&k, v)?,
            "body_parts" => c.body_parts = num(&k, v)?,
            "color_spread" => c.color_spread = num(&k, v)?,
            "texture_amplitude" => c.texture_amplitude = num(&k, v)?,
            other => return Err(StaError::config(format!("unknown key {other:?}"))),
        }
    }
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!((c.frames, c.regions, c.p, c.k_per_id), (4, 4, 16, 4));
        assert_eq!(c.batch_size(), 64);
        assert_eq!(c.margin, 0.3);
        assert_eq!(c.schedule.base, 3e-4);
        assert_eq!(c.weight_decay, 5e-4);
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::parse("aggregator = average\nuse_reg=false # comment\nlr_steps = 3:1e-4\nseed = 9").unwrap();
        assert_eq!(RunConfig::parse(&c.echo()).unwrap(), c);
        assert_eq!(c.aggregator, Aggregator::Average);
        assert_eq!(c.schedule.steps, vec![(3, 1e-4)]);
    }

    #[test]
    fn reg_needs_two_frames() {
        assert!(matches!(RunConfig::parse("frames = 1"), Err(StaError::Config(_))));
        assert!(RunConfig::parse("frames = 1\nuse_reg = false").is_ok());
    }

    #[test]
    fn unknown_key_and_bad_values() {
        assert!(RunConfig::parse("colour = red").is_err());
        assert!(RunConfig::parse("frobenius = cubed").is_err());
        assert!(RunConfig::parse("p = x").is_err());
        assert!(RunConfig::parse("p = 1").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn synth_keys() {
        let c = parse_synth_config("num_identities = 5\nocclusion_prob = 0.5\nseed = 3").unwrap();
        assert_eq!((c.num_identities, c.occlusion_prob, c.seed), (5, 0.5, 3));
        assert!(parse_synth_config("occlusion_prob = 2").is_err());
        assert!(parse_synth_config("seed = 1\nseed = 2").is_err());
    }
}
