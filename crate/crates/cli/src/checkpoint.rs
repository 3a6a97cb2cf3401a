//! Binary parameter checkpoints.
//!
//! Layout, all integers `u64` little-endian:
//!
//! ```text
//! magic      8 bytes  "RESCKPT1"
//! backbone   in_channels height width num_classes blocks
//!            widths[blocks] kernel_sizes[blocks]
//! tensors    count, then per tensor:
//!            name_len name(utf-8) ndim dims[ndim] data(f64 LE, row-major)
//! ```
//!
//! Tensors are stored in name order, so equal parameters give equal bytes.

use std::path::Path;

use res_core::model::{BackboneConfig, ModelParams};
use res_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RESCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub backbone: BackboneConfig,
    pub params: ModelParams,
}

fn put(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let b = &ckpt.backbone;
    let mut out = Vec::with_capacity(64 + ckpt.params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    for v in [b.in_channels, b.height, b.width, b.num_classes, b.widths.len()] {
        put(&mut out, v);
    }
    for &v in b.widths.iter().chain(&b.kernel_sizes) {
        put(&mut out, v);
    }
    put(&mut out, ckpt.params.len());
    for (name, t) in ckpt.params.iter() {
        put(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.shape().len());
        for &d in t.shape() {
            put(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if n > self.bytes.len() {
            return Err(format!("truncated: wanted {n} bytes, {} left", self.bytes.len()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn word(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A count whose items each occupy at least `unit` further bytes.
    fn count(&mut self, unit: usize) -> Result<usize, String> {
        let n = self.word()?;
        if n.saturating_mul(unit as u64) > self.bytes.len() as u64 {
            return Err(format!("count {n} exceeds the remaining {} bytes", self.bytes.len()));
        }
        Ok(n as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, String> {
    let mut r = Reader { bytes };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err("not a checkpoint (bad magic)".into());
    }
    let mut header = [0usize; 4];
    for h in &mut header {
        *h = r.count(0)?;
    }
    let blocks = r.count(16)?;
    let mut words = (0..2 * blocks).map(|_| r.count(0));
    let widths = words.by_ref().take(blocks).collect::<Result<Vec<_>, _>>()?;
    let kernel_sizes = words.collect::<Result<Vec<_>, _>>()?;
    let backbone = BackboneConfig {
        in_channels: header[0],
        height: header[1],
        width: header[2],
        num_classes: header[3],
        widths,
        kernel_sizes,
    };
    backbone.validate().map_err(|e| e.to_string())?;
    let mut params = ModelParams::new();
    for _ in 0..r.count(16)? {
        let len = r.count(1)?;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| format!("tensor name: {e}"))?;
        let ndim = r.count(8)?;
        let shape = (0..ndim).map(|_| r.count(0)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.saturating_mul(8) <= r.bytes.len())
            .ok_or_else(|| format!("tensor {name}: shape {shape:?} exceeds the file"))?;
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params.get(name).is_some() {
            return Err(format!("duplicate tensor {name}"));
        }
        params.insert(name, Tensor::new(shape, data).map_err(|e| e.to_string())?);
    }
    if !r.bytes.is_empty() {
        return Err(format!("{} trailing bytes", r.bytes.len()));
    }
    Ok(Checkpoint { backbone, params })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt)).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode(&bytes).map_err(|e| Error::format(path, e))
}
