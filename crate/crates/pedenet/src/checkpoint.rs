//! One binary container for everything the pipeline persists: trained
//! parameters with optimizer state, running mixture statistics, and
//! embedding galleries.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! "PEDE"   magic
//! u32      format version
//! u32      config byte length, then that many UTF-8 bytes of key=value lines
//! record*  name (u32 length + UTF-8), dtype code u8, rank u32,
//!          one u64 extent per axis, then the raw little-endian elements
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::density::GmmParams;
use crate::error::{Error, Result};
use crate::numerics::scalar::{DType, Scalar};
use crate::numerics::tensor::Tensor;
use crate::pe::EMBED_DIM;
use crate::train::{ModelState, TrainConfig};

pub const MAGIC: [u8; 4] = *b"PEDE";
pub const VERSION: u32 = 1;

/// Upper bound on one tensor's payload; headers claiming more are treated as
/// corruption instead of an allocation request.
const MAX_TENSOR_BYTES: u64 = 1 << 31;

fn bad(msg: impl Into<String>) -> Error {
    Error::IncompatibleCheckpoint(msg.into())
}

/// Write a container file from config pairs and named tensors.
pub fn write_container<S: Scalar>(
    path: &Path,
    config: &[(String, String)],
    tensors: &[(&str, &Tensor<S>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let mut block = String::new();
    for (k, v) in config {
        block.push_str(k);
        block.push('=');
        block.push_str(v);
        block.push('\n');
    }
    w.write_all(&(block.len() as u32).to_le_bytes())?;
    w.write_all(block.as_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[S::DTYPE.code()])?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes_vec()).collect();
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed container contents.
pub struct Container<S: Scalar> {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Container<S> {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn read_exactly(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            bad(format!("file ends inside {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exactly(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exactly(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// `Ok(None)` at a clean end of file, the next record's name length otherwise.
fn next_name_len(r: &mut impl Read) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(bad("file ends inside a record header"))
            };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

fn read_header(r: &mut impl Read) -> Result<Vec<(String, String)>> {
    let mut magic = [0u8; 4];
    read_exactly(r, &mut magic, "the magic header")?;
    if magic != MAGIC {
        return Err(bad("not a model container (bad magic)"));
    }
    let version = read_u32(r, "the version field")?;
    if version != VERSION {
        return Err(bad(format!("container version {version}, expected {VERSION}")));
    }
    let cfg_len = read_u32(r, "the config header")? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    read_exactly(r, &mut cfg_bytes, "the config block")?;
    let text = String::from_utf8(cfg_bytes).map_err(|_| bad("config block is not UTF-8"))?;
    let mut config = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("config line without '=': {line}")))?;
        config.push((k.to_string(), v.to_string()));
    }
    Ok(config)
}

/// Config pairs only; lets the command layer pick the scalar width before
/// parsing tensor data.
pub fn read_config(path: &Path) -> Result<Vec<(String, String)>> {
    read_header(&mut BufReader::new(File::open(path)?))
}

pub fn read_container<S: Scalar>(path: &Path) -> Result<Container<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let config = read_header(&mut r)?;
    let mut tensors = Vec::new();
    while let Some(name_len) = next_name_len(&mut r)? {
        if name_len > 4096 {
            return Err(bad("implausible tensor name length"));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        read_exactly(&mut r, &mut name_bytes, "a tensor name")?;
        let name =
            String::from_utf8(name_bytes).map_err(|_| bad("tensor name is not UTF-8"))?;
        let mut code = [0u8; 1];
        read_exactly(&mut r, &mut code, "a dtype code")?;
        let dtype = DType::from_code(code[0])
            .ok_or_else(|| bad(format!("unknown dtype code {}", code[0])))?;
        if dtype != S::DTYPE {
            return Err(bad(format!(
                "tensor {name} holds {dtype}-bit values, expected {}",
                S::DTYPE
            )));
        }
        let rank = read_u32(&mut r, "a tensor rank")?;
        if rank > 8 {
            return Err(bad("implausible tensor rank"));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let e = read_u64(&mut r, "a tensor extent")?;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| bad("tensor extent overflow"))?;
            shape.push(e as usize);
        }
        let nbytes = numel
            .checked_mul(S::byte_width() as u64)
            .filter(|&b| b <= MAX_TENSOR_BYTES)
            .ok_or_else(|| bad("implausible tensor size"))?;
        let mut raw = vec![0u8; nbytes as usize];
        read_exactly(&mut r, &mut raw, &format!("the data of tensor {name}"))?;
        let data: Vec<S> = raw.chunks_exact(S::byte_width()).map(S::from_le_slice).collect();
        tensors.push((name, Tensor::raw(shape, data)));
    }
    Ok(Container { config, tensors })
}

/// Persist a run: hyperparameters, every parameter tensor, the optimizer
/// moments, and the smoothed mixture statistics.
pub fn save_checkpoint<S: Scalar>(state: &ModelState<S>, path: &Path) -> Result<()> {
    let mut config = state.config.to_pairs();
    config.push(("step".into(), state.step.to_string()));
    config.push(("adam_t".into(), state.adam.step_count().to_string()));
    config.push((
        "ema_gmm".into(),
        if state.gmm.is_some() { "present" } else { "absent" }.into(),
    ));

    let named = state.named_params();
    let (m, v) = state.adam.moments();
    if !m.is_empty() && m.len() != named.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} tensors, model has {}",
            m.len(),
            named.len()
        )));
    }
    let mut owned: Vec<(String, Tensor<S>)> = Vec::new();
    for (name, t) in &named {
        owned.push((name.clone(), (*t).clone()));
    }
    for (which, buffers) in [("m", m), ("v", v)] {
        for ((name, t), buf) in named.iter().zip(buffers) {
            owned.push((format!("adam.{which}.{name}"), Tensor::raw(t.shape().to_vec(), buf.clone())));
        }
    }
    if let Some(gmm) = &state.gmm {
        owned.push(("ema.phi".into(), gmm.phi.clone()));
        owned.push(("ema.mu".into(), gmm.mu.clone()));
        owned.push(("ema.sigma".into(), gmm.sigma.clone()));
    }
    let refs: Vec<(&str, &Tensor<S>)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_container(path, &config, &refs)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelState<S>> {
    let container = read_container::<S>(path)?;
    let mut cfg = TrainConfig::default();
    let mut step = 0u64;
    let mut adam_t = 0u64;
    let mut ema_present = false;
    for (k, v) in &container.config {
        match k.as_str() {
            "step" => step = v.parse().map_err(|_| bad(format!("bad step count: {v}")))?,
            "adam_t" => {
                adam_t = v.parse().map_err(|_| bad(format!("bad optimizer step count: {v}")))?
            }
            "ema_gmm" => ema_present = v == "present",
            _ => cfg.apply_pair(k, v).map_err(|e| bad(e.to_string()))?,
        }
    }
    if cfg.dtype != S::DTYPE {
        return Err(bad(format!(
            "checkpoint holds a {}-bit model, loader expects {}",
            cfg.dtype,
            S::DTYPE
        )));
    }
    let mut state =
        ModelState::<S>::init(cfg).map_err(|e| bad(format!("checkpoint config rejected: {e}")))?;
    let mut by_name: HashMap<String, Tensor<S>> = container.tensors.into_iter().collect();

    let shapes: Vec<(String, Vec<usize>)> = state
        .named_params()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    for (name, t) in state.named_params_mut() {
        let src = by_name
            .remove(&name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if src.shape() != t.shape() {
            return Err(bad(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                src.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    if adam_t > 0 {
        let mut fetch = |which: &str, name: &str, shape: &[usize]| -> Result<Vec<S>> {
            let key = format!("adam.{which}.{name}");
            let src = by_name.remove(&key).ok_or_else(|| bad(format!("missing tensor {key}")))?;
            if src.shape() != shape {
                return Err(bad(format!(
                    "tensor {key} has shape {:?}, expected {shape:?}",
                    src.shape()
                )));
            }
            Ok(src.data().to_vec())
        };
        let mut m = Vec::with_capacity(shapes.len());
        let mut v = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            m.push(fetch("m", name, shape)?);
            v.push(fetch("v", name, shape)?);
        }
        state.adam.restore(adam_t, m, v).map_err(|e| bad(e.to_string()))?;
    }
    if ema_present {
        let mut fetch = |name: &str, shape: &[usize]| -> Result<Tensor<S>> {
            let src = by_name.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if src.shape() != shape {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    src.shape()
                )));
            }
            Ok(src)
        };
        let k = state.config.k;
        state.gmm = Some(GmmParams {
            phi: fetch("ema.phi", &[k])?,
            mu: fetch("ema.mu", &[k, EMBED_DIM])?,
            sigma: fetch("ema.sigma", &[k, EMBED_DIM, EMBED_DIM])?,
        });
    }
    state.step = step;
    Ok(state)
}
