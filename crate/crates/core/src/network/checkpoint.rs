//! Flat binary checkpoints plus a tab-separated manifest.
//!
//! ```text
//! magic "SNN1" | spec_len u32 | spec JSON | precision u8 (0 = f32, 1 = f64) | count u32
//! count × ( ndim u32 | dims u64 × ndim | values, little-endian )
//! ```
//!
//! Tensors are the parameters in registration order followed by the
//! batch-norm running statistics.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::{NetworkError, NetworkSpec, SpikingNetwork};
use crate::tensor::{Precision, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"SNN1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("checkpoint does not fit its spec: {0}")]
    Mismatch(#[from] NetworkError),
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn encode<F: Scalar>(net: &SpikingNetwork<F>) -> (Vec<u8>, Vec<Entry>) {
    let spec = serde_json::to_string(net.spec()).expect("spec serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    out.push(match F::PRECISION {
        Precision::F32 => 0,
        Precision::F64 => 1,
    });
    let tensors: Vec<(String, Tensor<F>)> = net
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .chain(net.buffers())
        .collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        entries.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset: out.len(),
        });
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    (out, entries)
}

/// Writes `checkpoint` and a manifest listing each tensor's name, shape and
/// data byte offset.
pub fn write_checkpoint<F: Scalar>(
    net: &SpikingNetwork<F>,
    checkpoint: impl AsRef<Path>,
    manifest: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let (bytes, entries) = encode(net);
    let mut text = String::from("name\tshape\toffset\n");
    for e in &entries {
        let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
        let _ = writeln!(text, "{}\t{}\t{}", e.name, shape.join("x"), e.offset);
    }
    write(checkpoint.as_ref(), &bytes)?;
    write(manifest.as_ref(), text.as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Format {
                offset: self.pos,
                detail: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn read_tensor<F: Scalar, G: Scalar>(r: &mut Reader<'_>) -> Result<Tensor<F>, CheckpointError> {
    let start = r.pos;
    let ndim = r.u32("tensor rank")? as usize;
    if ndim > 8 {
        return Err(CheckpointError::Format {
            offset: start,
            detail: format!("tensor rank {ndim}"),
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64("tensor shape")? as usize);
    }
    let n: usize = shape.iter().product();
    let width = G::PRECISION.bytes();
    let raw = r.take(n.saturating_mul(width), "tensor data")?;
    let data: Vec<F> = raw.chunks(width).map(|c| F::lit(G::read_le(c).to_f64().unwrap_or(f64::NAN))).collect();
    Tensor::new(shape, data).map_err(|e| CheckpointError::Format {
        offset: start,
        detail: e.to_string(),
    })
}

/// Parses a checkpoint into a network of precision `F`.
pub fn decode_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<SpikingNetwork<F>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::Format {
            offset: 0,
            detail: "missing SNN1 magic".into(),
        });
    }
    let len = r.u32("spec length")? as usize;
    let spec_at = r.pos;
    let spec_bytes = r.take(len, "spec")?;
    let spec: NetworkSpec = serde_json::from_slice(spec_bytes).map_err(|e| CheckpointError::Format {
        offset: spec_at,
        detail: format!("spec: {e}"),
    })?;
    let flag_at = r.pos;
    let precision = match r.take(1, "precision flag")?[0] {
        0 => Precision::F32,
        1 => Precision::F64,
        f => {
            return Err(CheckpointError::Format {
                offset: flag_at,
                detail: format!("precision flag {f}"),
            })
        }
    };
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        tensors.push(match precision {
            Precision::F32 => read_tensor::<F, f32>(&mut r)?,
            Precision::F64 => read_tensor::<F, f64>(&mut r)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format {
            offset: r.pos,
            detail: "trailing bytes".into(),
        });
    }

    let mut net = SpikingNetwork::<F>::new(spec, &crate::tensor::Rng::new(0))?;
    let n_params = net.params().len();
    if tensors.len() < n_params {
        return Err(NetworkError::Config(format!("{} tensors for {n_params} parameters", tensors.len())).into());
    }
    let buffers = tensors.split_off(n_params);
    for (i, t) in tensors.into_iter().enumerate() {
        let p = net.params_mut().get_mut(i);
        if p.value.shape() != t.shape() {
            return Err(NetworkError::Config(format!(
                "parameter {} has shape {:?}, checkpoint holds {:?}",
                p.name,
                p.value.shape(),
                t.shape()
            ))
            .into());
        }
        p.value = t;
    }
    net.set_buffers(&buffers)?;
    Ok(net)
}

pub fn read_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<SpikingNetwork<F>, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
