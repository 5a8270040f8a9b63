//! STAC checkpoint files.
//!
//! ```text
//! "STAC" u32 version
//! u32 epoch  u64 adam_step
//! u32 tensor_count, then per tensor: u32 name_len, name, u32 rank, rank × u32 dims, f32 payload
//! 32-byte ChaCha seed, u64 stream, u128 word position
//! u32 len + config echo, u32 len + loss history CSV
//! ```
//! Integers are little-endian. Tensors are the model parameters followed by
//! `adam.m.<name>` and `adam.v.<name>` for each of them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::model::{backbone_arch, Model};
use super::train::{history_csv, EpochRecord, TrainState};
use crate::backbone::{read_exact_at, read_u32_at, BackboneParams};
use crate::error::{Result, StaError};
use crate::fusion::ProjectionHead;
use crate::numerics::Tensor;
use crate::optim::AdamState;

const MAGIC: &[u8; 4] = b"STAC";
const VERSION: u32 = 1;

/// A training state together with the config that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_text(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn put_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    put_text(w, name)?;
    put_u32(w, t.rank() as u32)?;
    for &d in t.shape() {
        put_u32(w, d as u32)?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(cfg: &RunConfig, state: &TrainState, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u32(&mut w, state.epoch)?;
    w.write_all(&state.adam.step.to_le_bytes())?;
    let names = state.model.param_names();
    let params = state.model.params();
    put_u32(&mut w, (names.len() * 3) as u32)?;
    for (n, p) in names.iter().zip(&params) {
        put_tensor(&mut w, n, p)?;
    }
    for (n, m) in names.iter().zip(&state.adam.first_moment) {
        put_tensor(&mut w, &format!("adam.m.{n}"), m)?;
    }
    for (n, v) in names.iter().zip(&state.adam.second_moment) {
        put_tensor(&mut w, &format!("adam.v.{n}"), v)?;
    }
    w.write_all(&state.rng.get_seed())?;
    w.write_all(&state.rng.get_stream().to_le_bytes())?;
    w.write_all(&state.rng.get_word_pos().to_le_bytes())?;
    put_text(&mut w, &cfg.echo_portable())?;
    put_text(&mut w, &history_csv(&state.history))
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        read_exact_at(&mut self.inner, &mut buf, &mut self.offset, what)?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        read_u32_at(&mut self.inner, &mut self.offset, what)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let start = self.offset;
        let len = self.u32(what)? as usize;
        String::from_utf8(self.bytes(len, what)?).map_err(|_| StaError::format(start, format!("{what} is not UTF-8")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.text("tensor name")?;
        let at = self.offset;
        let rank = self.u32("tensor rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(StaError::format(at, format!("tensor {name} has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        if count == 0 {
            return Err(StaError::format(at, format!("tensor {name} is empty")));
        }
        let raw = self.bytes(count * 4, "tensor payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok((name, Tensor::new(dims, data)?))
    }
}

fn take(tensors: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    let pos = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| StaError::Version(format!("checkpoint has no tensor {name}")))?;
    Ok(tensors.remove(pos).1)
}

fn expect(t: &Tensor, name: &str, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(StaError::Version(format!(
            "tensor {name} has shape {:?} but the config implies {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn rebuild_model(cfg: &RunConfig, tensors: &mut Vec<(String, Tensor)>) -> Result<Model> {
    let backbone = if tensors.iter().any(|(n, _)| n.starts_with("backbone.")) {
        let arch = backbone_arch(cfg);
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for (i, l) in arch.layers.iter().enumerate() {
            let k = take(tensors, &format!("backbone.conv{i}.kernel"))?;
            expect(&k, "kernel", &[l.kernel, l.kernel, l.in_channels, l.out_channels])?;
            let b = take(tensors, &format!("backbone.conv{i}.bias"))?;
            expect(&b, "bias", &[l.out_channels])?;
            kernels.push(k);
            biases.push(b);
        }
        Some(BackboneParams { arch, kernels, biases })
    } else {
        None
    };
    let weight = take(tensors, "head.weight")?;
    expect(&weight, "head.weight", &[2 * cfg.depth, cfg.embed_dim])?;
    let bias = take(tensors, "head.bias")?;
    expect(&bias, "head.bias", &[cfg.embed_dim])?;
    let classifier = take(tensors, "classifier.weight")?;
    if classifier.rank() != 2 || classifier.shape()[0] != cfg.embed_dim {
        return Err(StaError::Version(format!(
            "classifier shape {:?} does not match embed_dim {}",
            classifier.shape(),
            cfg.embed_dim
        )));
    }
    Ok(Model {
        backbone,
        head: ProjectionHead { weight, bias },
        classifier,
    })
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint> {
    let mut r = Reader { inner: r, offset: 0 };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(StaError::format(0, format!("bad magic {magic:?}, expected \"STAC\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(StaError::Version(format!("unsupported checkpoint version {version}")));
    }
    let epoch = r.u32("epoch")?;
    let step = r.u64("adam step")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let seed: [u8; 32] = r.bytes(32, "rng seed")?.try_into().expect("32 bytes");
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.bytes(16, "rng position")?.try_into().expect("16 bytes"));
    let echo_at = r.offset;
    let echo = r.text("config echo")?;
    let history_at = r.offset;
    let history_text = r.text("history")?;
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing).map_err(|e| StaError::format(r.offset, e.to_string()))? != 0 {
        return Err(StaError::format(r.offset, "trailing bytes after history"));
    }

    let config = RunConfig::parse(&echo).map_err(|e| StaError::format(echo_at, format!("config echo: {e}")))?;
    let model = rebuild_model(&config, &mut tensors)?;
    let names = model.param_names();
    let mut adam = AdamState::new(&model.params(), config.weight_decay);
    adam.step = step;
    for (i, (n, p)) in names.iter().zip(model.params()).enumerate() {
        let m = take(&mut tensors, &format!("adam.m.{n}"))?;
        expect(&m, n, p.shape())?;
        let v = take(&mut tensors, &format!("adam.v.{n}"))?;
        expect(&v, n, p.shape())?;
        adam.first_moment[i] = m;
        adam.second_moment[i] = v;
    }
    if let Some((n, _)) = tensors.first() {
        return Err(StaError::Version(format!("unexpected tensor {n}")));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let history = history_text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(EpochRecord::parse_csv_row)
        .collect::<Result<Vec<_>>>()
        .map_err(|e| StaError::format(history_at, e.to_string()))?;
    Ok(Checkpoint {
        config,
        state: TrainState {
            model,
            adam,
            epoch,
            rng,
            history,
        },
    })
}

pub fn save_checkpoint(cfg: &RunConfig, state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| StaError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(cfg, state, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| StaError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| StaError::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::harness::train::train;
    use crate::par::Exec;

    fn trained(epochs: u32) -> (RunConfig, TrainState) {
        let data = synth_generate(&SynthConfig {
            num_identities: 8,
            tracklets_per_identity: 2,
            frames_per_tracklet: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = RunConfig {
            p: 2,
            k_per_id: 2,
            depth: 4,
            embed_dim: 6,
            epochs,
            steps_per_epoch: 1,
            ..RunConfig::default()
        };
        let s = train(&cfg, &data, None, Exec::Sequential, |_| Ok(())).unwrap();
        (cfg, s)
    }

    #[test]
    fn round_trip_is_exact() {
        let (cfg, state) = trained(2);
        let mut bytes = Vec::new();
        write_checkpoint(&cfg, &state, &mut bytes).unwrap();
        let back = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back.state, state);
        assert_eq!(back.config.echo_portable(), cfg.echo_portable());
    }

    #[test]
    fn corrupt_headers() {
        let (cfg, state) = trained(1);
        let mut bytes = Vec::new();
        write_checkpoint(&cfg, &state, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(matches!(read_checkpoint(&bad[..]), Err(StaError::Format { offset: 0, .. })));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(read_checkpoint(&v[..]), Err(StaError::Version(_))));
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(StaError::Format { .. })));
        bytes.push(0);
        assert!(matches!(read_checkpoint(&bytes[..]), Err(StaError::Format { .. })));
    }
}
