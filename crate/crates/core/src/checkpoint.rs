//! SGACKPT1 checkpoint container: named tensors with f32 payloads.
//!
//! Layout: magic "SGACKPT1", version byte, tensor count (u64 LE), then per
//! tensor: name length (u16 LE), UTF-8 name, rank (u8), dims (u64 LE each),
//! raw 32-bit LE floats. Optimizer moments live under "opt.<name>.m" /
//! "opt.<name>.v"; frozen prior parameters under the "prior." prefix.

use crate::error::{Result, SgaError};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SGACKPT1";
const VERSION: u8 = 1;

pub fn write_checkpoint(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(SgaError::contract("tensor name too long"));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        if t.rank() > u8::MAX as usize {
            return Err(SgaError::contract("tensor rank too large"));
        }
        buf.push(t.rank() as u8);
        for d in t.dims() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(SgaError::contract("truncated SGACKPT1 file"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 8)? != MAGIC {
        return Err(SgaError::contract(format!(
            "{} is not an SGACKPT1 file",
            path.display()
        )));
    }
    let version = take(&mut off, 1)?[0];
    if version != VERSION {
        return Err(SgaError::contract(format!(
            "unsupported SGACKPT1 version {version}"
        )));
    }
    let count = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut off, name_len)?)
            .map_err(|_| SgaError::contract("tensor name is not UTF-8"))?
            .to_string();
        let rank = take(&mut off, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for chunk in take(&mut off, len * 4)?.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        out.push((name, Tensor::new(dims, data)?));
    }
    if off != bytes.len() {
        return Err(SgaError::contract("trailing bytes after SGACKPT1 payload"));
    }
    Ok(out)
}

/// Lookup helper for loaders expecting a fixed tensor set.
pub fn find_tensor<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| SgaError::contract(format!("checkpoint missing tensor {name}")))
}
