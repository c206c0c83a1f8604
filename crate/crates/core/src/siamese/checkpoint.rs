//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic     8 bytes  "MMISSLCK"
//! version   u32
//! flags     u32      bit 0 batch-norm, bit 1 target, bit 2 predictor
//! step      u64
//! n         u32, then n × u32 encoder widths
//! [predictor only] k u32, then k × u32 predictor widths
//! f64 blocks: online, target, predictor, online velocity, predictor velocity
//! ```
//!
//! Each network block lists its layers in order; per layer the weight matrix
//! (row-major, `out × in`), bias, then batch-norm scale and shift if present.
//! The training config goes to a JSON sidecar at `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{EncoderState, Mlp, MlpSpec, TrainConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMISSLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_BN: u32 = 1;
const FLAG_TARGET: u32 = 2;
const FLAG_PREDICTOR: u32 = 4;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_widths(buf: &mut Vec<u8>, widths: &[usize]) {
    buf.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for &w in widths {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
}

fn put_net(buf: &mut Vec<u8>, net: &Mlp) {
    for v in net.flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the encoder state. Gradient accumulators are not stored, so
/// checkpoints should be taken at optimizer-step boundaries.
pub fn checkpoint_bytes(state: &EncoderState) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let predictor = state.params.predictor.as_ref();
    let mut flags = 0;
    if state.spec().batch_norm {
        flags |= FLAG_BN;
    }
    if state.target.is_some() {
        flags |= FLAG_TARGET;
    }
    if predictor.is_some() {
        flags |= FLAG_PREDICTOR;
    }
    buf.extend_from_slice(&flags.to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    put_widths(&mut buf, &state.spec().widths);
    if let Some(p) = predictor {
        put_widths(&mut buf, &p.spec().widths);
    }
    put_net(&mut buf, &state.params.online);
    if let Some(t) = &state.target {
        put_net(&mut buf, t);
    }
    if let Some(p) = predictor {
        put_net(&mut buf, p);
    }
    put_net(&mut buf, &state.velocity.online);
    if let Some(v) = &state.velocity.predictor {
        put_net(&mut buf, v);
    }
    buf
}

pub fn save_checkpoint(path: &Path, state: &EncoderState, cfg: &TrainConfig) -> Result<()> {
    fs::write(path, checkpoint_bytes(state))?;
    let json = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Checkpoint(format!("serializing sidecar: {e}")))?;
    fs::write(sidecar_path(path), json + "\n")?;
    Ok(())
}

/// Reads the training config stored next to a checkpoint.
pub fn read_sidecar(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(sidecar_path(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("sidecar: {e}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn widths(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        if n > 1024 {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn net(&mut self, spec: &MlpSpec) -> Result<Mlp> {
        let mut net = Mlp::zeros(spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let raw = self.take(8 * net.num_params())?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        net.set_flat(&values)?;
        Ok(net)
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<EncoderState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let flags = r.u32()?;
    let step = r.u64()?;
    let bn = flags & FLAG_BN != 0;
    let spec = MlpSpec::new(r.widths()?, bn).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let pspec = if flags & FLAG_PREDICTOR != 0 {
        Some(MlpSpec::new(r.widths()?, bn).map_err(|e| Error::Checkpoint(e.to_string()))?)
    } else {
        None
    };
    let online = r.net(&spec)?;
    let target = if flags & FLAG_TARGET != 0 {
        Some(r.net(&spec)?)
    } else {
        None
    };
    let predictor = pspec.as_ref().map(|s| r.net(s)).transpose()?;
    let mut state = EncoderState::from_parts(online, target, predictor);
    state.velocity.online = r.net(&spec)?;
    if let Some(s) = &pspec {
        state.velocity.predictor = Some(r.net(s)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    state.step = step;
    Ok(state)
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderState> {
    parse_checkpoint(&fs::read(path)?)
}
