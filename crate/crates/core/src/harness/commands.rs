//! Subcommand implementations; the binary only parses arguments and prints.

use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::{parse_synth_config, RunConfig};
use super::model::{forward_clip, ClipOptions, Model};
use super::train::{embed_split, history_csv, retrieval_set, split_meta, train, TrainState};
use crate::attention::{score_matrix, ScoreMatrix};
use crate::data::{evenly_spaced, load_dataset, load_tracklet_dir, save_dataset, synth_generate, Dataset, FrameSource, Split, Tracklet};
use crate::error::{Result, StaError};
use crate::eval::{evaluate, load_embeddings, save_embeddings, EmbeddingFile, MetricsReport, RetrievalSet};
use crate::par::Exec;

pub const CHECKPOINT_FILE: &str = "checkpoint.stac";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| StaError::io(path, e))
}

/// Trains from a config file; writes the checkpoint, history and config echo into `cfg.out`.
pub fn run_train(cfg: &RunConfig, resume: Option<&Path>, exec: Exec) -> Result<TrainState> {
    let data = load_dataset(&cfg.data)?;
    let resume = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if !ck.config.same_model_shape(cfg) {
                return Err(StaError::Version(format!(
                    "{} was trained with a different model shape",
                    path.display()
                )));
            }
            Some(ck.state)
        }
        None => None,
    };
    fs::create_dir_all(&cfg.out).map_err(|e| StaError::io(&cfg.out, e))?;
    let state = train(cfg, &data, resume, exec, |s| {
        if cfg.checkpoint_every > 0 && s.epoch % cfg.checkpoint_every == 0 {
            save_checkpoint(cfg, s, cfg.out.join(format!("checkpoint_epoch{:04}.stac", s.epoch)))?;
        }
        Ok(())
    })?;
    save_checkpoint(cfg, &state, cfg.out.join(CHECKPOINT_FILE))?;
    write_file(&cfg.out.join(HISTORY_FILE), &history_csv(&state.history))?;
    write_file(&cfg.out.join(CONFIG_ECHO_FILE), &cfg.echo())?;
    Ok(state)
}

fn compatible(cfg: &RunConfig, ck: &Checkpoint, path: &Path) -> Result<()> {
    if !ck.config.same_model_shape(cfg) {
        return Err(StaError::Version(format!(
            "checkpoint {} does not match the config's model shape",
            path.display()
        )));
    }
    Ok(())
}

/// Evaluates a checkpoint on the query/gallery splits named by `cfg.data`.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, test_n: Option<usize>, exec: Exec) -> Result<MetricsReport> {
    let ck = load_checkpoint(checkpoint)?;
    compatible(cfg, &ck, checkpoint)?;
    let data = load_dataset(&cfg.data)?;
    let set = retrieval_set(&ck.state.model, cfg, &data, test_n.unwrap_or(cfg.test_frames), exec)?;
    evaluate(&set, cfg.normalize_embeddings, exec)
}

/// Evaluates two STAE files against each other.
pub fn run_eval_files(query: &Path, gallery: &Path, normalize: bool, exec: Exec) -> Result<MetricsReport> {
    let q = load_embeddings(query)?;
    let g = load_embeddings(gallery)?;
    let set = RetrievalSet::new(q.embeddings, q.meta, g.embeddings, g.meta)?;
    evaluate(&set, normalize, exec)
}

/// Which tracklets an export covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportSplit {
    One(Split),
    /// Gallery followed by distractors.
    GalleryWithDistractors,
    All,
}

impl ExportSplit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(ExportSplit::All),
            "gallery" => Ok(ExportSplit::GalleryWithDistractors),
            other => Split::parse(other).map(ExportSplit::One),
        }
    }

    fn select(self, data: &Dataset) -> Vec<(Tracklet, bool)> {
        let tag = |s: Split| data.split(s).iter().map(move |t| (t.clone(), s == Split::Distractor));
        match self {
            ExportSplit::One(s) => tag(s).collect(),
            ExportSplit::GalleryWithDistractors => tag(Split::Gallery).chain(tag(Split::Distractor)).collect(),
            ExportSplit::All => data.iter().map(|(s, t)| (t.clone(), s == Split::Distractor)).collect(),
        }
    }
}

/// Embeddings of a model for the chosen tracklets.
pub fn extract_embeddings(model: &Model, cfg: &RunConfig, data: &Dataset, split: ExportSplit, test_n: usize, exec: Exec) -> Result<EmbeddingFile> {
    let chosen = split.select(data);
    let tracklets: Vec<Tracklet> = chosen.iter().map(|(t, _)| t.clone()).collect();
    let embeddings = embed_split(model, cfg, &tracklets, test_n, exec)?;
    let meta = chosen
        .iter()
        .map(|(t, d)| split_meta(std::slice::from_ref(t), *d)[0])
        .collect();
    Ok(EmbeddingFile { embeddings, meta })
}

pub fn run_extract(checkpoint: &Path, data_dir: &Path, out: &Path, split: ExportSplit, test_n: Option<usize>, exec: Exec) -> Result<usize> {
    let ck = load_checkpoint(checkpoint)?;
    let data = load_dataset(data_dir)?;
    let file = extract_embeddings(&ck.state.model, &ck.config, &data, split, test_n.unwrap_or(ck.config.test_frames), exec)?;
    save_embeddings(&file, out)?;
    Ok(file.meta.len())
}

/// Score matrix of one clip under a model.
pub fn attention_scores(model: &Model, cfg: &RunConfig, frames: &FrameSource) -> Result<ScoreMatrix> {
    let opts = ClipOptions::from_config(cfg);
    let fwd = forward_clip(model, frames, &opts, None)?;
    match fwd.scores() {
        Some(s) => Ok(s.clone()),
        None => Ok(score_matrix(fwd.maps(), cfg.regions)?.1),
    }
}

pub fn score_csv(s: &ScoreMatrix) -> String {
    let mut out = String::from("frame_index,region_index,score\n");
    for n in 0..s.frames() {
        for k in 0..s.regions() {
            out.push_str(&format!("{n},{k},{}\n", s.get(n, k)));
        }
    }
    out
}

/// Writes the score matrix of an evenly spaced clip from one tracklet directory.
pub fn run_dump_attention(checkpoint: &Path, tracklet: &Path, out: &Path, frames: Option<usize>) -> Result<ScoreMatrix> {
    let ck = load_checkpoint(checkpoint)?;
    let t = load_tracklet_dir(tracklet)?;
    let n = frames.unwrap_or(ck.config.test_frames);
    let clip = t.frames.select(&evenly_spaced(t.len(), n)?)?;
    let s = attention_scores(&ck.state.model, &ck.config, &clip)?;
    write_file(out, &score_csv(&s))?;
    Ok(s)
}

pub fn run_synth(config: &Path, out: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(config).map_err(|e| StaError::io(config, e))?;
    let cfg = parse_synth_config(&text)?;
    let data = synth_generate(&cfg)?;
    save_dataset(&data, out)?;
    Ok(data)
}

/// Resolves `cfg.data` and `cfg.out` relative to the config file's directory.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
    cfg.data = resolve(&cfg.data);
    cfg.out = resolve(&cfg.out);
    Ok(cfg)
}
