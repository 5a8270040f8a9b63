//! On-disk dataset layout.
//!
//! ```text
//! root/
//!   manifest.txt              one "<split> <dir>" line per tracklet
//!   <identity>_<camera>_<tracklet>/
//!     frame_0000.png ...      RGB frames, or
//!     features.staf           precomputed feature maps
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::{Dataset, FrameSource, Split, Tracklet};
use crate::backbone::{load_feature_maps, save_feature_maps};
use crate::error::{Result, StaError};
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
const FEATURES_FILE: &str = "features.staf";

pub fn tracklet_dir_name(t: &Tracklet) -> String {
    format!("{}_{}_{}", t.identity, t.camera, t.tracklet_id)
}

fn parse_dir_name(name: &str) -> Result<(u32, u32, u32)> {
    let parts: Vec<&str> = name.split('_').collect();
    let bad = || StaError::config(format!("tracklet directory {name:?} is not <identity>_<camera>_<tracklet>"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let n = |s: &str| s.parse::<u32>().map_err(|_| bad());
    Ok((n(parts[0])?, n(parts[1])?, n(parts[2])?))
}

fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let file = File::create(path).map_err(|e| StaError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let to_io = |e: png::EncodingError| StaError::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| StaError::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let bad = |e: png::DecodingError| StaError::format(0, format!("{}: {e}", path.display()));
    let mut reader = dec.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| StaError::format(0, format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let channels = info.color_type.samples();
    let bytes = &buf[..info.buffer_size()];
    let data = (0..h * w)
        .flat_map(|p| {
            let px = &bytes[p * channels..(p + 1) * channels];
            (0..3).map(move |c| match channels {
                1 | 2 => px[0],
                _ => px[c],
            })
        })
        .map(|b| b as f64 / 255.0)
        .collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Reads one tracklet directory; identity, camera and tracklet id come from its name.
pub fn load_tracklet_dir(dir: impl AsRef<Path>) -> Result<Tracklet> {
    let dir = dir.as_ref();
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| StaError::config(format!("bad tracklet path {}", dir.display())))?;
    let (identity, camera, tracklet_id) = parse_dir_name(name)?;
    let features = dir.join(FEATURES_FILE);
    let frames = if features.exists() {
        FrameSource::Features(load_feature_maps(&features)?.set)
    } else {
        let mut pngs: Vec<_> = fs::read_dir(dir)
            .map_err(|e| StaError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        pngs.sort();
        FrameSource::Images(pngs.iter().map(|p| read_png(p)).collect::<Result<_>>()?)
    };
    Tracklet::new(frames, identity, camera, tracklet_id)
}

/// Loads every tracklet listed in `root/manifest.txt`.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest).map_err(|e| StaError::io(&manifest, e))?;
    let mut data = Dataset::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (split, dir) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| StaError::config(format!("manifest line {}: expected \"<split> <dir>\"", lineno + 1)))?;
        let split = Split::parse(split)?;
        data.split_mut(split).push(load_tracklet_dir(root.join(dir.trim()))?);
    }
    Ok(data)
}

/// Writes a dataset in the directory layout, replacing any existing manifest.
pub fn save_dataset(data: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| StaError::io(root, e))?;
    let mut manifest = String::new();
    for (split, t) in data.iter() {
        let name = tracklet_dir_name(t);
        let dir = root.join(&name);
        fs::create_dir_all(&dir).map_err(|e| StaError::io(&dir, e))?;
        match &t.frames {
            FrameSource::Images(frames) => {
                for (i, f) in frames.iter().enumerate() {
                    write_png(&dir.join(format!("frame_{i:04}.png")), f)?;
                }
            }
            FrameSource::Features(set) => save_feature_maps(set, dir.join(FEATURES_FILE))?,
        }
        manifest.push_str(&format!("{} {name}\n", split.name()));
    }
    let path = root.join(MANIFEST_FILE);
    let mut f = File::create(&path).map_err(|e| StaError::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| StaError::io(&path, e))
}
