//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size        field
//! 0       8           magic  b"IGANETCK"
//! 8       4           u32    format version (currently 1)
//! 12      8           u64    L, byte length of the config JSON
//! 20      L           UTF-8  ModelConfig as JSON
//! ..      8           u64    K, number of arrays
//! then K times:
//!         4           u32    name length n
//!         n           UTF-8  dotted parameter name
//!         4           u32    rank r
//!         8·r         u64    dims
//!         8·∏dims     f64    values, row-major
//! ```
//!
//! Nothing may follow the last array.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::skeleton::SkeletonGraph;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"IGANETCK";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes a configuration and its parameters into checkpoint bytes.
pub fn to_bytes(config: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    params.check_against(config)?;
    let json = serde_json::to_vec(config)?;
    let mut out = Vec::with_capacity(64 + json.len() + params.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let names = params.names();
    out.extend_from_slice(&(names.len() as u64).to_le_bytes());
    params.visit("", &mut |name, t| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corrupt(format!("unexpected end of file while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("{what} of {v} exceeds the file size")))
    }
}

/// Parses checkpoint bytes. Either everything loads or nothing does.
pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Corrupt("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, supported: FORMAT_VERSION });
    }
    let json_len = r.len("config length")?;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len, "config")?)
        .map_err(|e| Error::Corrupt(format!("embedded config: {e}")))?;
    config.validate()?;

    let count = r.len("array count")?;
    let mut arrays: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Corrupt("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len("dimension")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Corrupt(format!("array `{name}` is larger than the file")))?;
        let raw = r.take(numel * 8, "array data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data)?;
        if arrays.insert(name.clone(), tensor).is_some() {
            return Err(Error::Corrupt(format!("duplicate array `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut params = ModelParams::init(&config, 0)?;
    let mut failure = None;
    params.visit_mut("", &mut |name, slot| {
        if failure.is_some() {
            return;
        }
        match arrays.remove(name) {
            None => failure = Some(Error::Corrupt(format!("missing array `{name}`"))),
            Some(t) if t.shape() != slot.shape() => {
                failure = Some(Error::ShapeMismatch {
                    field: name.to_string(),
                    expected: slot.shape().to_vec(),
                    found: t.shape().to_vec(),
                })
            }
            Some(t) => *slot = t,
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Corrupt(format!("unexpected array `{extra}`")));
    }
    Ok((config, params))
}

pub fn save(path: impl AsRef<Path>, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(config, params)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and checks it fits `graph`.
pub fn load_for_graph(path: impl AsRef<Path>, graph: &SkeletonGraph) -> Result<(ModelConfig, ModelParams)> {
    let (config, params) = load(path)?;
    if config.num_joints != graph.num_joints() {
        return Err(Error::ShapeMismatch {
            field: "num_joints".into(),
            expected: vec![graph.num_joints()],
            found: vec![config.num_joints],
        });
    }
    Ok((config, params))
}
