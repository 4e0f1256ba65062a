//! `.mdn` network checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic     8 bytes  "MDNCKPT\0"
//! version   u32      1
//! n_sizes   u64      then n_sizes × u64 layer sizes [Dx, hidden..]
//! K, Dy     u64, u64
//! acts      n_sizes bytes, one per layer (0 identity, 1 GELU)
//! n_params  u64      then n_params × f64 in DenseNet::params order
//! ```

use std::fs;
use std::path::Path;

use crate::diffnet::{Activation, DenseNet};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MDNCKPT\0";
const VERSION: u32 = 1;

pub fn to_bytes(net: &DenseNet) -> Vec<u8> {
    let sizes = net.layer_sizes();
    let head = net.head();
    let mut out = Vec::with_capacity(64 + 8 * (sizes.len() + net.num_params()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sizes.len() as u64).to_le_bytes());
    for s in &sizes {
        out.extend_from_slice(&(*s as u64).to_le_bytes());
    }
    out.extend_from_slice(&(head.components as u64).to_le_bytes());
    out.extend_from_slice(&(head.target_dim as u64).to_le_bytes());
    out.extend(net.activations().iter().map(|a| match a {
        Activation::Identity => 0u8,
        Activation::Gelu => 1u8,
    }));
    out.extend_from_slice(&(net.num_params() as u64).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        // every counted item occupies at least one byte, which bounds allocations
        if v > self.bytes.len() as u64 {
            return Err(Error::Checkpoint(format!("implausible {what} {v}")));
        }
        Ok(v as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<DenseNet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(
            "not an .mdn checkpoint (bad magic)".into(),
        ));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_sizes = r.count("layer count")?;
    let sizes = (0..n_sizes)
        .map(|_| r.count("layer size"))
        .collect::<Result<Vec<_>>>()?;
    let k = r.count("component count")?;
    let dy = r.count("target dimension")?;
    let acts = r
        .take(n_sizes)?
        .iter()
        .map(|b| match b {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Gelu),
            other => Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let n_params = r.count("parameter count")?;
    let mut net = DenseNet::init(&sizes, k, dy, 0)
        .map_err(|e| Error::Checkpoint(format!("bad architecture: {e}")))?;
    if n_params != net.num_params() {
        return Err(Error::Checkpoint(format!(
            "architecture needs {} parameters, file has {n_params}",
            net.num_params()
        )));
    }
    let raw = r.take(8 * n_params)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    for (p, chunk) in net.params_mut().iter_mut().zip(raw.chunks_exact(8)) {
        *p = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
    }
    if net.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    if net.activations() != acts {
        let layers = (0..net.num_layers())
            .map(|l| (net.weight(l).to_owned(), net.bias(l).to_owned(), acts[l]))
            .collect();
        net = DenseNet::from_layers(layers, net.head())?;
    }
    Ok(net)
}

pub fn save(net: &DenseNet, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<DenseNet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
