//! Binary parameter checkpoints.
//!
//! Layout (little-endian): the 7-byte magic `BILEV01`, a `u32` tensor count,
//! then per tensor a `u32` name length, the UTF-8 name, a `u32` rank and the
//! `u32` dimensions, followed by every parameter as `f64` in layout order.

use std::io::{Read, Write};

use super::{Layout, TensorSpec, ThetaParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"BILEV01";

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in 32 bits")))
}

pub fn write_checkpoint<W: Write>(mut w: W, theta: &ThetaParams) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let tensors = theta.layout().tensors();
    w.write_all(&to_u32(tensors.len(), "tensor count")?.to_le_bytes())?;
    for t in tensors {
        w.write_all(&to_u32(t.name.len(), "name length")?.to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&to_u32(t.shape.len(), "rank")?.to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&to_u32(d, "dimension")?.to_le_bytes())?;
        }
    }
    for v in theta.flat() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ThetaParams> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file too short for checkpoint magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut specs = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| Error::Format("truncated tensor name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        specs.push(TensorSpec::new(name, shape));
    }
    let layout = Layout::new(specs);
    let mut flat = Vec::with_capacity(layout.len());
    let mut buf = [0u8; 8];
    for _ in 0..layout.len() {
        r.read_exact(&mut buf).map_err(|_| Error::Format("truncated parameter payload".into()))?;
        flat.push(f64::from_le_bytes(buf));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after parameter payload".into()));
    }
    ThetaParams::new(layout, flat)
}
