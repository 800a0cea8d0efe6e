//! Portable checkpoint format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic   8 bytes  b"EQFLOWCK"
//! version u32      1
//! spec    u64 length + UTF-8 JSON (NetworkSpec)
//! meta    u64 length + UTF-8 JSON (caller-defined metadata)
//! params  u64 count + count * f64, layer by layer, weights row-major
//!         then biases
//! ```
//!
//! Round-trips are bit-exact: floats are written as raw IEEE-754 bits.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::net::{FieldParams, Layer, NetworkSpec};

pub const MAGIC: [u8; 8] = *b"EQFLOWCK";
pub const VERSION: u32 = 1;

/// Serializes parameters, their architecture, and caller metadata.
pub fn save_checkpoint<W: Write>(
    w: &mut W,
    params: &FieldParams,
    spec: &NetworkSpec,
    metadata: &serde_json::Value,
) -> Result<()> {
    spec.validate()?;
    if params.network_spec() != *spec {
        return Err(Error::config("parameters do not match the declared spec"));
    }
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_blob(w, serde_json::to_string(spec)?.as_bytes())?;
    write_blob(w, serde_json::to_string(metadata)?.as_bytes())?;
    let count = params.parameter_count() as u64;
    w.write_all(&count.to_le_bytes())?;
    for v in params.flat_iter() {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

/// Reads a checkpoint back. Any structural problem (bad magic, wrong version,
/// truncation, shape inconsistency) is a format error.
pub fn load_checkpoint<R: Read>(
    r: &mut R,
) -> Result<(FieldParams, NetworkSpec, serde_json::Value)> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if magic != MAGIC {
        return Err(Error::format("bad magic bytes: not a checkpoint"));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let spec: NetworkSpec = serde_json::from_slice(&read_blob(r)?)
        .map_err(|e| Error::format(format!("bad spec payload: {e}")))?;
    spec.validate()
        .map_err(|e| Error::format(format!("invalid spec in checkpoint: {e}")))?;
    let metadata: serde_json::Value = serde_json::from_slice(&read_blob(r)?)
        .map_err(|e| Error::format(format!("bad metadata payload: {e}")))?;

    let count = u64::from_le_bytes(read_array(r)?) as usize;
    let dims = spec.layer_dims();
    let expected: usize = dims.iter().map(|(i, o)| i * o + o).sum();
    if count != expected {
        return Err(Error::format(format!(
            "parameter count {count} does not match spec ({expected})"
        )));
    }
    let mut layers = Vec::with_capacity(dims.len());
    for (in_dim, out_dim) in dims {
        let mut layer = Layer::zeros(in_dim, out_dim);
        for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
            *w = f64::from_bits(u64::from_le_bytes(read_array(r)?));
        }
        layers.push(layer);
    }
    let params = FieldParams {
        layers,
        activation: spec.activation,
    };
    Ok((params, spec, metadata))
}

pub fn save_checkpoint_file(
    path: &std::path::Path,
    params: &FieldParams,
    spec: &NetworkSpec,
    metadata: &serde_json::Value,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_checkpoint(&mut f, params, spec, metadata)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint_file(
    path: &std::path::Path,
) -> Result<(FieldParams, NetworkSpec, serde_json::Value)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    load_checkpoint(&mut f)
}

fn write_blob<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_blob<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = u64::from_le_bytes(read_array(r)?) as usize;
    if len > 1 << 30 {
        return Err(Error::format("unreasonable blob length"));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format("truncated checkpoint stream"))
}
