//! Checkpoint format: a little-endian binary container holding the config
//! digest and every parameter tensor as named f32 blobs.
//!
//! Layout:
//! ```text
//! magic   b"DARCKPT\0"            8 bytes
//! version u32                     currently 1
//! digest  [u8; 32]                SHA-256 of the canonical config text
//! count   u32                     number of tensors
//! repeated per tensor, in store order:
//!   name_len u32, name utf-8, rank u32, extents u64 x rank, data f32 x numel
//! ```
//! Writing then reading a store produces bitwise-identical f32 tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::config::ModelConfig;
use super::params::ParamStore;

const MAGIC: &[u8; 8] = b"DARCKPT\0";
const VERSION: u32 = 1;

fn io_err(context: &str, e: std::io::Error) -> Error {
    Error::io(context.to_string(), e)
}

/// Writes `store` (converted to f32 if needed) with `cfg`'s digest.
pub fn write_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore<f32>) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| io_err(&format!("creating checkpoint {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let ctx = "writing checkpoint";
    w.write_all(MAGIC).map_err(|e| io_err(ctx, e))?;
    w.write_all(&VERSION.to_le_bytes()).map_err(|e| io_err(ctx, e))?;
    w.write_all(&cfg.digest()).map_err(|e| io_err(ctx, e))?;
    let count = u32::try_from(store.len())
        .map_err(|_| Error::Format(format!("too many tensors: {}", store.len())))?;
    w.write_all(&count.to_le_bytes()).map_err(|e| io_err(ctx, e))?;
    for (name, tensor) in store.iter() {
        let name_len = u32::try_from(name.len())
            .map_err(|_| Error::Format(format!("name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes()).map_err(|e| io_err(ctx, e))?;
        w.write_all(name.as_bytes()).map_err(|e| io_err(ctx, e))?;
        let rank = u32::try_from(tensor.rank()).expect("small rank");
        w.write_all(&rank.to_le_bytes()).map_err(|e| io_err(ctx, e))?;
        for &extent in tensor.shape() {
            w.write_all(&(extent as u64).to_le_bytes()).map_err(|e| io_err(ctx, e))?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(|e| io_err(ctx, e))?;
        }
    }
    w.flush().map_err(|e| io_err(ctx, e))
}

/// Reads a checkpoint, returning the stored config digest and tensors.
pub fn read_checkpoint(path: &Path) -> Result<([u8; 32], ParamStore<f32>)> {
    let file = File::open(path)
        .map_err(|e| io_err(&format!("opening checkpoint {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let ctx = "reading checkpoint";

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(ctx, e))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "not a checkpoint (magic {magic:02x?})"
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| io_err(ctx, e))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest).map_err(|e| io_err(ctx, e))?;
    r.read_exact(&mut u32buf).map_err(|e| io_err(ctx, e))?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let mut store = ParamStore::new();
    let mut u64buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(|e| io_err(ctx, e))?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| io_err(ctx, e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?;
        r.read_exact(&mut u32buf).map_err(|e| io_err(ctx, e))?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u64buf).map_err(|e| io_err(ctx, e))?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut u32buf).map_err(|e| io_err(ctx, e))?;
            data.push(f32::from_le_bytes(u32buf));
        }
        store.insert(name, Tensor::from_vec(&shape, data)?)?;
    }
    // Trailing garbage means the file is not what we wrote.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok((digest, store)),
        Ok(_) => Err(Error::Format("trailing bytes after checkpoint payload".into())),
        Err(e) => Err(io_err(ctx, e)),
    }
}

/// Reads a checkpoint and verifies it was written for `cfg`.
pub fn load_for_config(path: &Path, cfg: &ModelConfig) -> Result<ParamStore<f32>> {
    let (digest, store) = read_checkpoint(path)?;
    if digest != cfg.digest() {
        return Err(Error::Format(format!(
            "checkpoint config digest mismatch: file {} vs current {}",
            hex(&digest),
            cfg.digest_hex()
        )));
    }
    Ok(store)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
