//! Binary checkpoint and feature file formats. All integers are u32 and
//! all values f32, little endian.
//!
//! Checkpoint: `HSGC`, version, manifest length, UTF-8 manifest of
//! `key=value` lines, record count, then per record the name length, name,
//! rank, dims, value count and values.
//!
//! Feature file: `HSGF`, row count, dim, row-major values. Labels live in a
//! text sidecar, one integer per line.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"HSGC";
const CHECKPOINT_VERSION: u32 = 1;
const FEATURE_MAGIC: &[u8; 4] = b"HSGF";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    err: fn(String) -> Error,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err((self.err)(format!("truncated at byte {}", self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| (self.err)("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err((self.err)(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn manifest_value(&self, key: &str) -> Option<&str> {
        self.manifest.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION as usize)?;
        let mut manifest = String::new();
        for (k, v) in &self.manifest {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("manifest entry {k:?} is not a single key=value line")));
            }
            manifest.push_str(&format!("{k}={v}\n"));
        }
        put_u32(&mut buf, manifest.len())?;
        buf.extend_from_slice(manifest.as_bytes());
        put_u32(&mut buf, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut buf, name.len())?;
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut buf, d)?;
            }
            put_u32(&mut buf, t.numel())?;
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, err: Error::Checkpoint };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let manifest = text
            .lines()
            .map(|line| {
                line.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Checkpoint(format!("manifest line without '=': {line:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Checkpoint(format!("record name: {e}")))?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = r.u32()?;
            if shape.iter().product::<usize>() != n {
                return Err(Error::Checkpoint(format!("{name}: shape {shape:?} does not hold {n} values")));
            }
            let data = r.f32s(n)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        r.finish()?;
        Ok(Self { manifest, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn features_to_bytes(features: &Tensor) -> Result<Vec<u8>> {
    if features.rank() != 2 {
        return Err(Error::FeatureFile(format!("features must be 2-d, got {:?}", features.shape())));
    }
    let mut buf = Vec::with_capacity(12 + 4 * features.numel());
    buf.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut buf, features.shape()[0]).map_err(|e| Error::FeatureFile(e.to_string()))?;
    put_u32(&mut buf, features.shape()[1]).map_err(|e| Error::FeatureFile(e.to_string()))?;
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0, err: Error::FeatureFile };
    if r.take(4)? != FEATURE_MAGIC {
        return Err(Error::FeatureFile("bad magic".into()));
    }
    let (n, d) = (r.u32()?, r.u32()?);
    let data = r.f32s(n.checked_mul(d).ok_or_else(|| Error::FeatureFile("size overflow".into()))?)?;
    r.finish()?;
    Tensor::new(vec![n, d], data).map_err(|e| Error::FeatureFile(e.to_string()))
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    fs::write(path, features_to_bytes(features)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    features_from_bytes(&fs::read(path)?)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    fs::write(path, text)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|e| Error::FeatureFile(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
