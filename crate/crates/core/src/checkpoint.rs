//! Binary model snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 8 bytes  magic "FUNLCKPT"
//! u32      layer count L
//! L x (u32 in_dim, u32 out_dim)
//! u32      class count (the last layer's out_dim)
//! u64      flat parameter count
//! N x f64  parameters, little-endian IEEE 754
//! ```
//!
//! Parameters round trip bit for bit.

use crate::error::{Error, Result};
use crate::nn::{LayerShape, ModelParams};
use crate::Real;
use std::path::Path;

const MAGIC: &[u8; 8] = b"FUNLCKPT";

pub fn save_checkpoint(model: &ModelParams<Real>, path: &Path) -> Result<()> {
    let shapes = model.shapes();
    let mut buf = Vec::with_capacity(24 + shapes.len() * 8 + model.dim() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    for s in shapes {
        buf.extend_from_slice(&(s.in_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(s.out_dim as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(model.n_classes() as u32).to_le_bytes());
    buf.extend_from_slice(&(model.dim() as u64).to_le_bytes());
    for &v in model.flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Ingestion(format!(
                "checkpoint {what}: need {n} bytes at offset {}, file holds {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<Real>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Ingestion(format!(
            "checkpoint magic: expected {MAGIC:?}, got {magic:?}"
        )));
    }
    let n_layers = cur.u32("layer count")? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(Error::Ingestion(format!(
            "checkpoint layer count: {n_layers} is outside [1, 64]"
        )));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let in_dim = cur.u32("layer shape")? as usize;
        let out_dim = cur.u32("layer shape")? as usize;
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Ingestion(format!(
                "checkpoint layer shape: layer {l} is {in_dim}x{out_dim}"
            )));
        }
        shapes.push(LayerShape { in_dim, out_dim });
    }
    let n_classes = cur.u32("class count")? as usize;
    if n_classes != shapes[n_layers - 1].out_dim {
        return Err(Error::Ingestion(format!(
            "checkpoint class count: {n_classes} does not match the last layer's {}",
            shapes[n_layers - 1].out_dim
        )));
    }
    let dim = cur.u64("parameter count")? as usize;
    let expected: usize = shapes.iter().map(LayerShape::param_count).sum();
    if dim != expected {
        return Err(Error::Ingestion(format!(
            "checkpoint parameter count: header says {dim}, layer shapes need {expected}"
        )));
    }
    let payload = cur.take(dim * 8, "payload")?;
    if cur.pos != bytes.len() {
        return Err(Error::Ingestion(format!(
            "checkpoint payload: {} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    let flat: Vec<Real> = payload
        .chunks_exact(8)
        .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ModelParams::new(shapes, flat)
        .map_err(|e| Error::Ingestion(format!("checkpoint payload: {e}")))
}
