//! On-disk formats: the MMPT binary tensor file, plain-text `key = value`
//! config files, and checkpoint directories (one tensor file per parameter
//! plus a manifest naming them).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMPT";
const VERSION: u32 = 1;

/// Serializes a tensor: magic "MMPT", u32 LE version, u32 LE dtype code
/// (0 = f32, 1 = f64), u32 LE rank, u64 LE extents, then raw little-endian
/// values row-major. No padding anywhere.
pub fn tensor_bytes<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + t.len() * S::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&S::DTYPE.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    fs::write(path, tensor_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn tensor_from_bytes<S: Scalar>(bytes: &[u8], origin: &str) -> Result<Tensor<S>> {
    let fail = |why: String| Error::Format(format!("{origin}: {why}"));
    if bytes.len() < 16 {
        return Err(fail("truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let dtype = u32_at(8);
    if dtype != S::DTYPE {
        return Err(fail(format!(
            "dtype code {dtype} does not match requested {}",
            S::NAME
        )));
    }
    let rank = u32_at(12) as usize;
    if rank == 0 || rank > 8 {
        return Err(fail(format!("rank {rank} out of range")));
    }
    if bytes.len() < 16 + 8 * rank {
        return Err(fail("truncated extents".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut n: usize = 1;
    for r in 0..rank {
        let o = 16 + 8 * r;
        let e = u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let e: usize = e
            .try_into()
            .map_err(|_| fail(format!("extent {e} too large")))?;
        n = n
            .checked_mul(e)
            .ok_or_else(|| fail("extent product overflow".into()))?;
        shape.push(e);
    }
    let payload = &bytes[16 + 8 * rank..];
    if payload.len() != n * S::BYTES {
        return Err(fail(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            n * S::BYTES
        )));
    }
    let data: Vec<S> = payload.chunks_exact(S::BYTES).map(S::read_le).collect();
    let t = Tensor::new(shape, data)?;
    if !t.all_finite() {
        return Err(Error::NonFinite(origin.into()));
    }
    Ok(t)
}

pub fn read_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    tensor_from_bytes(&bytes, &path.display().to_string())
}

/// Dtype code in a tensor file header without decoding the payload.
pub fn peek_dtype(path: &Path) -> Result<u32> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{}: not a tensor file", path.display())));
    }
    Ok(u32::from_le_bytes(bytes[8..12].try_into().unwrap()))
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
/// Later duplicates win, which is what lets flags override file entries.
pub fn parse_kv(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format(format!(
                "{origin}:{}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text, &path.display().to_string())
}

pub fn write_kv_file(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes named tensors as `<name>.mmpt` files plus `manifest.txt` with one
/// `name = relative/path` line each, in the given (stable) order.
pub fn write_tensor_dir<S: Scalar>(dir: &Path, entries: &[(String, &Tensor<S>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.txt");
    let mut manifest = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for (name, t) in entries {
        let rel = format!("{name}.mmpt");
        write_tensor(&dir.join(&rel), *t)?;
        writeln!(manifest, "{name} = {rel}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(())
}

/// Reads a manifest written by `write_tensor_dir`: name → absolute path.
pub fn read_tensor_dir_manifest(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let Some((name, rel)) = line.split_once('=') else {
            return Err(Error::Checkpoint(format!(
                "{}:{}: bad manifest line {raw:?}",
                manifest_path.display(),
                lineno + 1
            )));
        };
        out.push((name.trim().to_string(), dir.join(rel.trim())));
    }
    Ok(out)
}
