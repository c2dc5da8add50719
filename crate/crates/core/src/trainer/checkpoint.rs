//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "FPDN" u32 version
//! spec:   u32 base_channels, channel_cap, encoder_blocks, decoder_blocks,
//!         3 x u32 dilations, f32 dropout_rate, u32 input/output channels
//! params: u32 count, then per tensor: u32 name length, name bytes,
//!         u8 dtype (1 = f32), u8 rank, rank x u32 dims, f32 payload
//! bn:     u32 count, then per layer: name, u8 ready, u32 channels,
//!         f32 means, f32 variances
//! state:  u8 present; if 1: u64 epoch, u64 step, f64 best_val_loss,
//!         u64 epochs_since_improvement, 32-byte rng seed, u64 rng stream,
//!         u128 rng word position, then the Adam m and v tensor tables
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;

use super::{AdamState, EarlyStopping, TrainState};
use crate::network::{ModelParams, ModelSpec, NetworkError};
use crate::tensor::{BnState, Tensor};
use crate::Rng;

pub const MAGIC: [u8; 4] = *b"FPDN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint: magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (this build reads {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("malformed checkpoint at offset {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("parameter {name} has shape {actual:?} in the checkpoint, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("checkpoint does not match the model: {0}")]
    Model(NetworkError),
}

impl From<NetworkError> for CheckpointError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::ParameterShape { name, expected, actual } => Self::ShapeMismatch { name, expected, actual },
            other => Self::Model(other),
        }
    }
}

/// Everything a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ModelParams,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.spec, &self.params, self.state.as_ref())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        decode(bytes)
    }
}

/// Writes to a sibling temp file and renames it over `path`; a failed write
/// leaves any previous checkpoint intact.
pub fn save_checkpoint(
    path: &Path,
    spec: &ModelSpec,
    params: &ModelParams,
    state: Option<&TrainState>,
) -> Result<(), CheckpointError> {
    let bytes = encode(spec, params, state);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| CheckpointError::Io { path: p, source }
    };
    std::fs::write(&tmp, &bytes).map_err(io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

/// Loads a checkpoint and checks its tensors against `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelSpec) -> Result<Checkpoint, CheckpointError> {
    let ckpt = load_checkpoint(path)?;
    ckpt.params.verify(expected)?;
    Ok(ckpt)
}

fn encode(spec: &ModelSpec, params: &ModelParams, state: Option<&TrainState>) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(4 * params.scalar_count() + 4096));
    w.0.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    for v in [spec.base_channels, spec.channel_cap, spec.encoder_blocks, spec.decoder_blocks] {
        w.u32(v as u32);
    }
    for d in spec.dilations {
        w.u32(d as u32);
    }
    w.f32(spec.dropout_rate);
    w.u32(spec.input_channels as u32);
    w.u32(spec.output_channels as u32);
    w.tensors(params.iter());
    let bn: Vec<(&str, &BnState)> = params.bn_states().collect();
    w.u32(bn.len() as u32);
    for (name, s) in bn {
        w.name(name);
        w.0.push(s.ready as u8);
        w.u32(s.mean.len() as u32);
        s.mean.iter().chain(&s.var).for_each(|&v| w.f32(v));
    }
    match state {
        None => w.0.push(0),
        Some(st) => {
            w.0.push(1);
            w.u64(st.epoch as u64);
            w.u64(st.adam.step);
            w.0.extend_from_slice(&st.early_stop.best.to_le_bytes());
            w.u64(st.early_stop.wait as u64);
            w.0.extend_from_slice(&st.rng.get_seed());
            w.u64(st.rng.get_stream());
            w.0.extend_from_slice(&st.rng.get_word_pos().to_le_bytes());
            w.tensors(st.adam.m.iter().map(|(n, t)| (n.as_str(), t)));
            w.tensors(st.adam.v.iter().map(|(n, t)| (n.as_str(), t)));
        }
    }
    w.0
}

fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let mut head = [0usize; 7];
    for h in &mut head {
        *h = r.u32()? as usize;
    }
    let dropout_rate = r.f32()?;
    let spec = ModelSpec {
        base_channels: head[0],
        channel_cap: head[1],
        encoder_blocks: head[2],
        decoder_blocks: head[3],
        dilations: [head[4], head[5], head[6]],
        dropout_rate,
        input_channels: r.u32()? as usize,
        output_channels: r.u32()? as usize,
    };
    spec.validate().map_err(|e| r.malformed(e.to_string()))?;
    let tensors = r.tensors()?;
    let layers = r.u32()? as usize;
    let mut bn = BTreeMap::new();
    for _ in 0..layers {
        let name = r.name()?;
        let ready = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(r.malformed(format!("ready flag {b}"))),
        };
        let c = r.u32()? as usize;
        let mean = r.f32s(c)?;
        let var = r.f32s(c)?;
        bn.insert(name, BnState { mean, var, ready });
    }
    let state = match r.take(1)?[0] {
        0 => None,
        1 => {
            let epoch = r.u64()? as usize;
            let step = r.u64()?;
            let best = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            let wait = r.u64()? as usize;
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            let m = r.tensors()?;
            let v = r.tensors()?;
            let mut rng = Rng::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(word_pos);
            Some((epoch, step, best, wait, rng, m, v))
        }
        b => return Err(r.malformed(format!("state flag {b}"))),
    };
    if r.pos != bytes.len() {
        return Err(r.malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = ModelParams::from_parts(&spec, tensors, bn)?;
    let state = match state {
        None => None,
        Some((epoch, step, best, wait, rng, m, v)) => {
            for (name, t) in params.iter() {
                for (table, moments) in [("m", &m), ("v", &v)] {
                    let found = moments.get(name).map(|x| x.shape().to_vec());
                    if found.as_deref() != Some(t.shape()) {
                        return Err(CheckpointError::ShapeMismatch {
                            name: format!("adam.{table}.{name}"),
                            expected: t.shape().to_vec(),
                            actual: found.unwrap_or_default(),
                        });
                    }
                }
            }
            if m.len() != params.len() || v.len() != params.len() {
                return Err(CheckpointError::Malformed {
                    offset: bytes.len(),
                    message: "optimizer state lists unknown parameters".into(),
                });
            }
            Some(TrainState {
                epoch,
                adam: AdamState { step, m, v },
                early_stop: EarlyStopping { best, wait },
                rng,
            })
        }
    };
    Ok(Checkpoint { spec, params, state })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn name(&mut self, name: &str) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
    }

    fn tensors<'a>(&mut self, items: impl Iterator<Item = (&'a str, &'a Tensor)>) {
        let items: Vec<_> = items.collect();
        self.u32(items.len() as u32);
        for (name, t) in items {
            self.name(name);
            self.0.push(DTYPE_F32);
            self.0.push(t.shape().len() as u8);
            for &d in t.shape() {
                self.u32(d as u32);
            }
            for &v in t.data() {
                self.f32(v);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn malformed(&self, message: String) -> CheckpointError {
        CheckpointError::Malformed { offset: self.pos, message }
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.malformed("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Malformed {
            offset: at,
            message: "tensor name is not UTF-8".into(),
        })
    }

    fn tensors(&mut self) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
        let count = self.u32()? as usize;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name = self.name()?;
            let dtype = self.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(self.malformed(format!("{name}: dtype code {dtype}")));
            }
            let rank = self.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| self.malformed(format!("{name}: shape {shape:?} overflows")))?;
            let data = self.f32s(len)?;
            let t = Tensor::new(shape, data).expect("length matches shape");
            if out.insert(name.clone(), t).is_some() {
                return Err(self.malformed(format!("duplicate tensor {name}")));
            }
        }
        Ok(out)
    }
}
