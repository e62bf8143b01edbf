//! Binary checkpoints: configuration text plus named f32 arrays.
//!
//! Layout (little-endian): magic `SDLM`, u32 version, u32 length + config
//! text, u32 array count, then per array u32 name length, name, u32 rank,
//! u32 dims, f32 values.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::Config;
use crate::error::{MvsError, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::training::{AdamState, TrainState};

pub const MAGIC: &[u8; 4] = b"SDLM";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.ndim() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes the configuration and full training state.
pub fn encode_checkpoint(cfg: &Config, state: &TrainState) -> Vec<u8> {
    let mut arrays: Vec<(String, &Tensor)> = Vec::new();
    for (k, v) in &state.params.arrays {
        arrays.push((format!("param/{k}"), v));
    }
    for (k, v) in &state.adam.m {
        arrays.push((format!("adam.m/{k}"), v));
    }
    for (k, v) in &state.adam.v {
        arrays.push((format!("adam.v/{k}"), v));
    }
    // counters split into 24-bit halves so each is exact in f32
    let step = Tensor::from_vec(vec![(state.adam.step >> 24) as f64, (state.adam.step & 0xFF_FFFF) as f64]);
    let epoch = Tensor::from_vec(vec![(state.epoch >> 24) as f64, (state.epoch & 0xFF_FFFF) as f64]);
    arrays.push(("adam.step".into(), &step));
    arrays.push(("train.epoch".into(), &epoch));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let text = Config {
        model: state.params.config.clone(),
        train: cfg.train.clone(),
    }
    .to_text();
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, arrays.len() as u32);
    for (name, t) in &arrays {
        put_array(&mut out, name, t);
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> MvsError {
        MvsError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(MvsError::Format {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                msg: format!("truncated: need {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| MvsError::Format {
            path: self.path.to_path_buf(),
            offset: at,
            msg: "invalid UTF-8".into(),
        })
    }

    fn array(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = self.string(n)?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.err(format!("array '{name}' has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = self.take(count.checked_mul(4).ok_or_else(|| self.err("array too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

fn counter(path: &Path, arrays: &BTreeMap<String, Tensor>, name: &str) -> Result<u64> {
    let t = arrays.get(name).ok_or_else(|| MvsError::Format {
        path: path.to_path_buf(),
        offset: 0,
        msg: format!("missing array '{name}'"),
    })?;
    match t.data() {
        [hi, lo] => Ok(((*hi as u64) << 24) | *lo as u64),
        _ => Err(MvsError::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("array '{name}' must hold 2 values"),
        }),
    }
}

/// Parses a checkpoint; `path` is only used in error messages. Parameter
/// names and shapes must match what the stored configuration builds.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Config, TrainState)> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let text = r.string(n)?;
    let cfg = Config::from_text(&text)?;
    let count = r.u32()?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos;
        let (name, t) = r.array()?;
        if arrays.insert(name.clone(), t).is_some() {
            r.pos = at;
            return Err(r.err(format!("duplicate array '{name}'")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let template = ModelParams::init(&cfg.model)?;
    let mut params = BTreeMap::new();
    let mut adam = AdamState {
        step: counter(path, &arrays, "adam.step")?,
        ..AdamState::default()
    };
    let epoch = counter(path, &arrays, "train.epoch")? as usize;
    for (name, t) in arrays {
        let fail = |msg: String| MvsError::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg,
        };
        let (kind, key) = match name.split_once('/') {
            Some(p) => p,
            None if name == "adam.step" || name == "train.epoch" => continue,
            None => return Err(fail(format!("unknown array '{name}'"))),
        };
        let want = template
            .arrays
            .get(key)
            .ok_or_else(|| fail(format!("array '{name}' does not belong to this model")))?;
        if want.shape() != t.shape() {
            return Err(fail(format!("array '{name}' has shape {:?}, expected {:?}", t.shape(), want.shape())));
        }
        let slot = match kind {
            "param" => &mut params,
            "adam.m" => &mut adam.m,
            "adam.v" => &mut adam.v,
            _ => return Err(fail(format!("unknown array '{name}'"))),
        };
        slot.insert(key.to_string(), t);
    }
    if let Some(missing) = template.arrays.keys().find(|k| !params.contains_key(*k)) {
        return Err(MvsError::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("missing parameter '{missing}'"),
        });
    }
    let state = TrainState {
        params: ModelParams {
            config: cfg.model.clone(),
            arrays: params,
        },
        adam,
        epoch,
    };
    Ok((cfg, state))
}

pub fn save_checkpoint(path: &Path, cfg: &Config, state: &TrainState) -> Result<()> {
    std::fs::write(path, encode_checkpoint(cfg, state)).map_err(|e| MvsError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Config, TrainState)> {
    let bytes = std::fs::read(path).map_err(|e| MvsError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
