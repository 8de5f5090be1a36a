//! Flat binary model snapshots.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! "ENCP"  magic
//! u32     format version (1)
//! u64     model text length, then that many utf-8 bytes
//! u64     tensor count
//! per tensor:
//!   u64   name length, then that many utf-8 bytes
//!   u32   rank
//!   u64   each dimension
//!   f32   each value, row major
//! ```
//!
//! Parameters appear in layout order, followed by the batchnorm running
//! buffers as `{layer}.running_mean` / `{layer}.running_var` pairs. Loading
//! re-parses the embedded model text and refuses any name or shape drift.

use crate::error::{Error, Result};
use crate::exec::ModelParams;
use crate::model::ModelSpec;
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"ENCP";
const VERSION: u32 = 1;

fn push_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let text = params.spec.to_text();
    let count = params.tensors.len() + 2 * params.bn_names.len();

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for (name, tensor) in params.names.iter().zip(&params.tensors) {
        push_tensor(&mut buf, name, tensor.shape(), tensor.data());
    }
    for (i, name) in params.bn_names.iter().enumerate() {
        let c = params.bn_mean[i].len();
        push_tensor(&mut buf, &format!("{name}.running_mean"), &[c], &params.bn_mean[i]);
        push_tensor(&mut buf, &format!("{name}.running_var"), &[c], &params.bn_var[i]);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible {what} length {v}")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid utf-8")))
    }
}

fn read_tensor(cur: &mut Cursor<'_>) -> Result<(String, Tensor<f32>)> {
    let name = cur.string("tensor name")?;
    let rank = cur.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Checkpoint(format!(
            "tensor '{name}' has implausible rank {rank}"
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let d = cur.len("dimension")?;
        if d == 0 {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has a zero dimension"
            )));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' overflows")))?;
        shape.push(d);
    }
    let bytes = cur.take(numel * 4)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((name, Tensor::from_parts(shape, data)))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let buf = std::fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };

    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a model snapshot".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported snapshot version {version}"
        )));
    }
    let text = cur.string("model text")?;
    let spec = ModelSpec::parse(&text)?;

    let count = cur.len("tensor count")?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(&mut cur)?);
    }
    if cur.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            buf.len() - cur.pos
        )));
    }

    // params first, then running buffers in mean/var pairs
    let n_bn_tensors = tensors
        .iter()
        .filter(|(n, _)| n.ends_with(".running_mean") || n.ends_with(".running_var"))
        .count();
    if n_bn_tensors % 2 != 0 || n_bn_tensors > tensors.len() {
        return Err(Error::Checkpoint("unpaired running buffers".into()));
    }
    let split = tensors.len() - n_bn_tensors;
    let bn_part = tensors.split_off(split);
    let mut bn = Vec::with_capacity(bn_part.len() / 2);
    for pair in bn_part.chunks(2) {
        let (mean_name, mean) = &pair[0];
        let (var_name, var) = &pair[1];
        let base = mean_name.strip_suffix(".running_mean").ok_or_else(|| {
            Error::Checkpoint(format!("expected a running_mean tensor, found '{mean_name}'"))
        })?;
        if var_name.strip_suffix(".running_var") != Some(base) {
            return Err(Error::Checkpoint(format!(
                "'{mean_name}' is not paired with '{var_name}'"
            )));
        }
        bn.push((base.to_string(), mean.data().to_vec(), var.data().to_vec()));
    }
    ModelParams::from_saved(spec, tensors, bn)
}
