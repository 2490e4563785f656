//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SRMF"  u32 version
//! u64 config length, config as JSON
//! u64 completed epochs
//! f64 lr, f64 beta1, f64 beta2, f64 eps, u64 optimizer step
//! u32 tensor count, then per tensor:
//!   u32 name length, name (UTF-8), u8 dtype tag (1 = f64),
//!   u32 rank, u64 extent per axis, raw values
//! ```
//!
//! Parameters use their own names; Adam moments are stored as
//! `adam/m/<name>` and `adam/v/<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::{AdamState, Moments, ParamStore};
use crate::error::{Error, Result};
use crate::model::{param_specs, Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SRMF";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const MOMENT_M: &str = "adam/m/";
const MOMENT_V: &str = "adam/v/";

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Completed epochs.
    pub epoch: u64,
    pub params: ParamStore,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn new(model: Model, optimizer: AdamState, epoch: u64) -> Self {
        let config = model.config().clone();
        Self { config, epoch, params: model.into_params(), optimizer }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.clone(), self.params.clone())
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&ck.config)?;
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    let o = &ck.optimizer;
    for v in [o.lr, o.beta1, o.beta2, o.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&o.step.to_le_bytes());
    let count = ck.params.len() + 2 * o.moments.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, p) in ck.params.iter() {
        put_tensor(&mut out, name, &p.value);
    }
    for (name, m) in &o.moments {
        put_tensor(&mut out, &format!("{MOMENT_M}{name}"), &m.m);
        put_tensor(&mut out, &format!("{MOMENT_V}{name}"), &m.v);
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ck)?;
    // write then rename so a crash never leaves a half-written file behind
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("corrupt tensor table: truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, index: usize) -> Result<(String, Tensor)> {
        let len = self.u32(&format!("name of tensor #{index}"))? as usize;
        let name = String::from_utf8(self.take(len, &format!("name of tensor #{index}"))?.to_vec())
            .map_err(|_| Error::Format(format!("corrupt tensor table: name of tensor #{index} is not UTF-8")))?;
        let dtype = self.take(1, &format!("dtype of tensor {name}"))?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("corrupt tensor table: tensor {name} has unknown dtype tag {dtype}")));
        }
        let rank = self.u32(&format!("rank of tensor {name}"))? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("corrupt tensor table: tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64(&format!("extents of tensor {name}"))? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Format(format!("corrupt tensor table: tensor {name} extents overflow")))?;
        let raw = self.take(n * 8, &format!("data of tensor {name}"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, Tensor::from_vec(&shape, data)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}; this build reads version {VERSION}")));
    }
    let len = r.u64("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    config.validate()?;
    let epoch = r.u64("epoch")?;
    let (lr, beta1, beta2, eps) = (r.f64("optimizer")?, r.f64("optimizer")?, r.f64("optimizer")?, r.f64("optimizer")?);
    let step = r.u64("optimizer")?;
    let count = r.u32("tensor count")? as usize;

    let expected: BTreeMap<String, Vec<usize>> = param_specs(&config).into_iter().map(|s| (s.name, s.shape)).collect();
    let mut params = ParamStore::new();
    let mut m: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut v: BTreeMap<String, Tensor> = BTreeMap::new();
    for i in 0..count {
        let (name, t) = r.tensor(i)?;
        let (target, base) = if let Some(b) = name.strip_prefix(MOMENT_M) {
            (&mut m, b)
        } else if let Some(b) = name.strip_prefix(MOMENT_V) {
            (&mut v, b)
        } else {
            let want = expected
                .get(&name)
                .ok_or_else(|| Error::Format(format!("corrupt tensor table: unexpected tensor {name}")))?;
            if t.shape() != want.as_slice() {
                return Err(Error::Format(format!(
                    "corrupt tensor table: tensor {name} has shape {:?}, config needs {want:?}",
                    t.shape()
                )));
            }
            params.insert(name, t)?;
            continue;
        };
        let want = expected
            .get(base)
            .ok_or_else(|| Error::Format(format!("corrupt tensor table: moment for unknown parameter {base}")))?;
        if t.shape() != want.as_slice() {
            return Err(Error::Format(format!("corrupt tensor table: tensor {name} has shape {:?}", t.shape())));
        }
        target.insert(base.to_string(), t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("corrupt tensor table: {} trailing bytes", bytes.len() - r.pos)));
    }
    if let Some(missing) = expected.keys().find(|k| !params.contains(k)) {
        return Err(Error::Format(format!("corrupt tensor table: missing tensor {missing}")));
    }
    if m.len() != v.len() || m.keys().ne(v.keys()) {
        return Err(Error::Format("corrupt tensor table: unpaired optimizer moments".into()));
    }
    let moments = m
        .into_iter()
        .zip(v.into_values())
        .map(|((name, m), v)| (name, Moments { m, v }))
        .collect();
    let optimizer = AdamState { lr, beta1, beta2, eps, step, moments };
    Ok(Checkpoint { config, epoch, params, optimizer })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = Model::new(ModelConfig::gradcheck_tiny(), 5).unwrap();
        Checkpoint::new(model, AdamState::default(), 3)
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = encode_checkpoint(&sample()).unwrap();
        b[0] = b'X';
        assert_eq!(decode_checkpoint(&b).unwrap_err().to_string(), "not a checkpoint");
        b[0] = b'S';
        b[4] = 9;
        assert!(decode_checkpoint(&b).unwrap_err().to_string().contains("unsupported version"));
    }

    #[test]
    fn truncation_names_the_tensor() {
        let b = encode_checkpoint(&sample()).unwrap();
        let err = decode_checkpoint(&b[..b.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("corrupt tensor table") && err.contains("separator/mask/b"), "{err}");
    }
}
