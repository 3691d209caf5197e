//! Flat binary parameter checkpoints.
//!
//! Layout (little-endian): `b"FGAA"`, `u32` version, then per tensor
//! `u32` name length, name bytes (UTF-8), `u32` rank, `rank × u64` extents,
//! `f64` payload. Entries run to end of file.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FGAA";
pub const VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

pub fn write_checkpoint<'a>(
    out: &mut impl Write,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    out.write_all(MAGIC).map_err(io_err)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    for (name, t) in entries {
        let mut buf = Vec::with_capacity(16 + name.len() + 8 * t.len());
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io_err)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(io_err)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| TensorError::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = c.take(n * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((
            name.clone(),
            Tensor::new(&shape, data)
                .map_err(|e| TensorError::Checkpoint(format!("tensor {name}: {e}")))?,
        ));
    }
    Ok(out)
}

pub fn save_module(module: &impl Module, out: &mut impl Write) -> Result<()> {
    let mut entries = Vec::new();
    module.visit_params("", &mut |name, p| entries.push((name, p.value().clone())));
    write_checkpoint(out, entries.iter().map(|(n, t)| (n.as_str(), t)))
}

/// Overwrite every parameter of `module` from a checkpoint; all names must be present.
pub fn load_module(module: &mut impl Module, input: &mut impl Read) -> Result<()> {
    let mut stored: HashMap<String, Tensor> = read_checkpoint(input)?.into_iter().collect();
    let mut failure = None;
    module.visit_params_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        match stored.remove(&name) {
            Some(t) => {
                if let Err(e) = p.set(t) {
                    failure = Some(TensorError::Checkpoint(format!("{name}: {e}")));
                }
            }
            None => failure = Some(TensorError::Checkpoint(format!("missing tensor {name}"))),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
