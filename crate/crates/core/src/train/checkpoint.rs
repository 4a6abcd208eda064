//! Little-endian binary checkpoints.
//!
//! Layout: magic, format version (u32), architecture hash (32 bytes), the
//! full config as TOML (u64 length + UTF-8), iteration, iterations per epoch,
//! RNG state (seed, stream, word position), then named `f64` records
//! (u32 name length, name, u32 rank, u64 extents, raw values).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Network, TrainConfig, TrainState};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"WCYCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }

    fn record(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.u32(name.len() as u32);
        self.bytes(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        for v in data {
            self.bytes(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Parse(format!("checkpoint truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Parse("length overflows".into()))
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Parse("record name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.len()?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Parse("record too large".into()))?;
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| Error::Parse("record too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, shape, data))
    }
}

fn network_records(prefix: &str, net: &Network, w: &mut Writer) {
    for (name, t) in net.params.iter() {
        w.record(&format!("{prefix}/{name}"), t.shape(), t.data());
    }
    w.record(&format!("{prefix}.adam/step"), &[1], &[net.opt.step as f64]);
    for ((name, t), (m, v)) in net.params.iter().zip(net.opt.m.iter().zip(&net.opt.v)) {
        w.record(&format!("{prefix}.adam/m/{name}"), t.shape(), m);
        w.record(&format!("{prefix}.adam/v/{name}"), t.shape(), v);
    }
}

pub(crate) fn to_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.bytes(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.bytes(&state.config.architecture_hash());
    let text = state.config.to_toml();
    w.u64(text.len() as u64);
    w.bytes(text.as_bytes());
    w.u64(state.iteration);
    w.u64(state.iters_per_epoch);
    w.bytes(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.bytes(&state.rng.get_word_pos().to_le_bytes());
    let nets = state.networks();
    let count: usize = nets.iter().map(|(_, n)| 1 + 3 * n.params.len()).sum();
    w.u64(count as u64);
    for (prefix, net) in nets {
        network_records(prefix, net, &mut w);
    }
    w.0
}

fn fill(state: &mut TrainState, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
    let incompatible = || Error::IncompatibleCheckpoint(format!("unexpected record `{name}` {shape:?}"));
    let (head, tail) = name.split_once('/').ok_or_else(incompatible)?;
    let (net_name, adam) = match head.strip_suffix(".adam") {
        Some(n) => (n, true),
        None => (head, false),
    };
    let net = state
        .networks_mut()
        .into_iter()
        .find(|(n, _)| *n == net_name)
        .map(|(_, n)| n)
        .ok_or_else(incompatible)?;
    if adam && tail == "step" {
        net.opt.step = data.first().copied().filter(|_| data.len() == 1).ok_or_else(incompatible)? as u64;
        return Ok(());
    }
    let (slot, pname) = if adam {
        let (kind, p) = tail.split_once('/').ok_or_else(incompatible)?;
        (Some(kind), p)
    } else {
        (None, tail)
    };
    let idx = net.params.iter().position(|(n, _)| n == pname).ok_or_else(incompatible)?;
    let tensor = net.params.get_mut(pname).ok_or_else(incompatible)?;
    if tensor.shape() != shape {
        return Err(incompatible());
    }
    match slot {
        None => tensor.data_mut().copy_from_slice(&data),
        Some("m") => net.opt.m[idx] = data,
        Some("v") => net.opt.v[idx] = data,
        Some(_) => return Err(incompatible()),
    }
    Ok(())
}

pub(crate) fn from_bytes(buf: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let n = r.len()?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Parse("embedded config is not UTF-8".into()))?;
    let config = TrainConfig::from_toml(text).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
    if config.architecture_hash() != hash {
        return Err(Error::IncompatibleCheckpoint("config hash does not match embedded config".into()));
    }
    let iteration = r.u64()?;
    let iters_per_epoch = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));

    let mut state = TrainState::new(config, iters_per_epoch)?;
    state.iteration = iteration;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;

    let count = r.len()?;
    let expected: usize = state.networks().iter().map(|(_, n)| 1 + 3 * n.params.len()).sum();
    if count != expected {
        return Err(Error::IncompatibleCheckpoint(format!("{count} records, expected {expected}")));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let (name, shape, data) = r.record()?;
        if !seen.insert(name.clone()) {
            return Err(Error::IncompatibleCheckpoint(format!("duplicate record `{name}`")));
        }
        fill(&mut state, &name, &shape, data)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Parse(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(state)).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let buf = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    from_bytes(&buf)
}

/// Loads a checkpoint and requires its architecture to match `config`.
pub fn load_checkpoint_for(path: &Path, config: &TrainConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    if state.config.architecture_hash() != config.architecture_hash() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint architecture {} differs from config {}",
            state.config.architecture_hash_hex(),
            config.architecture_hash_hex()
        )));
    }
    Ok(state)
}
