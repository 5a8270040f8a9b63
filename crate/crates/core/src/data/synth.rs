//! Synthetic occluded-tracklet benchmark.
//!
//! Each identity is a vertical stack of coloured body parts with a fixed
//! texture. Frames jitter the prototype by a small pose shift, apply the
//! camera's colour gain, optionally paint a grey band across one horizontal
//! stripe, and add pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, FrameSource, Tracklet};
use crate::error::{Result, StaError};
use crate::numerics::Tensor;

/// Grey level painted over occluded rows.
const OCCLUDER_GRAY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub tracklets_per_identity: usize,
    pub frames_per_tracklet: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Per-frame probability of an occluding band.
    pub occlusion_prob: f64,
    /// Band height as a fraction of the image height.
    pub occlusion_height: f64,
    /// Maximum pose jitter in pixels, applied independently on both axes.
    pub pose_shift: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub num_cameras: usize,
    /// Fraction of identities used for training; the rest form query/gallery.
    pub train_fraction: f64,
    /// Extra single-tracklet identities placed in the gallery as distractors.
    pub num_distractors: usize,
    /// Number of coloured horizontal parts per identity.
    pub body_parts: usize,
    /// Part colours are drawn from `0.5 ± color_spread` per channel.
    pub color_spread: f64,
    pub texture_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 20,
            tracklets_per_identity: 4,
            frames_per_tracklet: 8,
            image_height: 32,
            image_width: 16,
            occlusion_prob: 0.3,
            occlusion_height: 0.25,
            pose_shift: 1,
            noise_std: 0.03,
            seed: 0,
            num_cameras: 2,
            train_fraction: 0.5,
            num_distractors: 0,
            body_parts: 8,
            color_spread: 0.4,
            texture_amplitude: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_identities", self.num_identities),
            ("tracklets_per_identity", self.tracklets_per_identity),
            ("frames_per_tracklet", self.frames_per_tracklet),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("num_cameras", self.num_cameras),
            ("body_parts", self.body_parts),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(StaError::config(format!("{name} must be at least 1")));
        }
        for (name, p) in [
            ("occlusion_prob", self.occlusion_prob),
            ("occlusion_height", self.occlusion_height),
            ("train_fraction", self.train_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(StaError::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(0.0..=0.5).contains(&self.color_spread) {
            return Err(StaError::config(format!("color_spread must lie in [0, 0.5], got {}", self.color_spread)));
        }
        if !(self.noise_std >= 0.0) || !(self.texture_amplitude >= 0.0) {
            return Err(StaError::config("noise_std and texture_amplitude must be non-negative"));
        }
        if self.occlusion_prob > 0.0 && self.band_rows() == 0 {
            return Err(StaError::config("occlusion band is thinner than one row"));
        }
        Ok(())
    }

    /// Rows covered by one occluding band.
    pub fn band_rows(&self) -> usize {
        (self.occlusion_height * self.image_height as f64).round() as usize
    }

    /// Number of band positions that tile the image height.
    pub fn band_slots(&self) -> usize {
        match self.band_rows() {
            0 => 0,
            rows => self.image_height / rows,
        }
    }

    pub fn train_identities(&self) -> usize {
        ((self.num_identities as f64 * self.train_fraction).round() as usize).min(self.num_identities)
    }
}

/// Whether and where a rendered frame is occluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Occlusion {
    None,
    /// Band at the given slot (`slot·band_rows` onwards).
    Band(usize),
    /// Drawn from the configured probability.
    Random,
}

/// Identity prototypes and camera gains for one seed.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    cfg: SynthConfig,
    prototypes: Vec<Tensor>,
    gains: Vec<[f64; 3]>,
    rng: ChaCha8Rng,
}

impl SynthWorld {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gains = (0..cfg.num_cameras)
            .map(|_| std::array::from_fn(|_| rng.random_range(0.8..1.2)))
            .collect();
        let prototypes = (0..cfg.num_identities + cfg.num_distractors)
            .map(|_| prototype(&cfg, &mut rng))
            .collect();
        Ok(Self {
            cfg,
            prototypes,
            gains,
            rng,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn prototype(&self, identity: usize) -> &Tensor {
        &self.prototypes[identity]
    }

    /// Renders one frame of `identity` seen from `camera`.
    pub fn render(&mut self, identity: usize, camera: usize, occlusion: Occlusion) -> Tensor {
        let cfg = &self.cfg;
        let (h, w) = (cfg.image_height, cfg.image_width);
        let rng = &mut self.rng;
        let shift = cfg.pose_shift as i64;
        let dy = rng.random_range(-shift..=shift) as isize;
        let dx = rng.random_range(-shift..=shift) as isize;
        let band = match occlusion {
            Occlusion::None => None,
            Occlusion::Band(slot) => Some(slot),
            Occlusion::Random => {
                if cfg.occlusion_prob > 0.0 && rng.random_bool(cfg.occlusion_prob) {
                    Some(rng.random_range(0..cfg.band_slots()))
                } else {
                    None
                }
            }
        };
        let band_rows = band.map(|slot| {
            let rows = cfg.band_rows();
            (slot * rows, ((slot + 1) * rows).min(h))
        });
        let proto = &self.prototypes[identity];
        let gain = self.gains[camera % self.gains.len()];
        let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut out = Tensor::zeros(&[h, w, 3]);
        for y in 0..h {
            let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
            let occluded = band_rows.is_some_and(|(a, b)| y >= a && y < b);
            for x in 0..w {
                let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
                for c in 0..3 {
                    let base = if occluded {
                        OCCLUDER_GRAY
                    } else {
                        proto.data()[(sy * w + sx) * 3 + c] * gain[c]
                    };
                    let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                    out.data_mut()[(y * w + x) * 3 + c] = (base + n).clamp(0.0, 1.0);
                }
            }
        }
        out
    }

    fn tracklet(&mut self, identity: usize, camera: usize, tracklet_id: u32) -> Tracklet {
        let frames = (0..self.cfg.frames_per_tracklet)
            .map(|_| self.render(identity, camera, Occlusion::Random))
            .collect();
        Tracklet::new(FrameSource::Images(frames), identity as u32, camera as u32, tracklet_id)
            .expect("at least one frame")
    }
}

fn prototype(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let colors: Vec<[f64; 3]> = (0..cfg.body_parts)
        .map(|_| std::array::from_fn(|_| 0.5 + cfg.color_spread * rng.random_range(-1.0..=1.0)))
        .collect();
    let (th, tw) = (h.div_ceil(2), w.div_ceil(2));
    let texture: Vec<f64> = (0..th * tw * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_fn(&[h, w, 3], |i| {
        let c = i % 3;
        let x = (i / 3) % w;
        let y = i / (3 * w);
        let part = (y * cfg.body_parts / h).min(cfg.body_parts - 1);
        let t = texture[((y / 2) * tw + x / 2) * 3 + c];
        (colors[part][c] + cfg.texture_amplitude * t).clamp(0.0, 1.0)
    })
}

/// Generates the full benchmark.
///
/// Training identities contribute every tracklet to `train`. For test
/// identities, tracklet `t` is filmed by camera `t mod num_cameras`; camera 0
/// tracklets become queries and the rest gallery items.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    let mut world = SynthWorld::new(cfg.clone())?;
    let mut data = Dataset::default();
    let n_train = cfg.train_identities();
    let mut next_id = 0u32;
    for identity in 0..cfg.num_identities {
        for t in 0..cfg.tracklets_per_identity {
            let camera = t % cfg.num_cameras;
            let tracklet = world.tracklet(identity, camera, next_id);
            next_id += 1;
            if identity < n_train {
                data.train.push(tracklet);
            } else if camera == 0 {
                data.query.push(tracklet);
            } else {
                data.gallery.push(tracklet);
            }
        }
    }
    for d in 0..cfg.num_distractors {
        let identity = cfg.num_identities + d;
        let camera = 1 % cfg.num_cameras;
        let tracklet = world.tracklet(identity, camera, next_id);
        next_id += 1;
        data.distractors.push(tracklet);
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let data = synth_generate(&SynthConfig::default()).unwrap();
        assert_eq!(data.tracklet_count(), 80);
        assert_eq!(data.frame_count(), 640);
        assert_eq!(data.train.len(), 40);
        assert_eq!(data.query.len(), 20);
        assert_eq!(data.gallery.len(), 20);
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig { num_distractors: 2, ..SynthConfig::default() };
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(synth_generate(&cfg).unwrap(), synth_generate(&other).unwrap());
    }

    #[test]
    fn clean_config_gives_static_tracklets() {
        let cfg = SynthConfig {
            occlusion_prob: 0.0,
            noise_std: 0.0,
            pose_shift: 0,
            num_identities: 3,
            ..SynthConfig::default()
        };
        let data = synth_generate(&cfg).unwrap();
        for (_, t) in data.iter() {
            let FrameSource::Images(frames) = &t.frames else { panic!() };
            assert!(frames.iter().all(|f| f == &frames[0]));
        }
    }

    #[test]
    fn forced_band_is_gray() {
        let cfg = SynthConfig { noise_std: 0.0, ..SynthConfig::default() };
        let mut world = SynthWorld::new(cfg).unwrap();
        let img = world.render(0, 0, Occlusion::Band(2));
        for y in 16..24 {
            for x in 0..16 {
                assert_eq!(img.at(&[y, x, 1]), 0.5);
            }
        }
    }

    #[test]
    fn validation() {
        assert!(SynthConfig { occlusion_prob: 1.5, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { num_identities: 0, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { color_spread: 0.6, ..SynthConfig::default() }.validate().is_err());
    }
}
