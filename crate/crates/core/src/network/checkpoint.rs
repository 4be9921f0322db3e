//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "PDCKPT01"
//! version u32      1
//! spec    u32 length + JSON bytes (the NetworkSpec)
//! seed    u64      initialization seed
//! iter    u64      training iteration the state was captured at
//! stats   u8 flag; if 1: f64 mean, f64 std (dataset normalization)
//! tables  u32 count; per conv layer: u32 n_out, u32 fan_in,
//!         u32 * (n_out * fan_in) input-map indices
//! params  u32 count; per parameter tensor (layer order, weights then
//!         bias): u64 length, f32 * length values
//! crc     u32 CRC-32 over everything above
//! ```
//!
//! Round trips are bit-exact: loading a saved state reproduces descriptors
//! bitwise.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::network::{Layer, NetworkSpec, NetworkState};
use crate::trainer::NormStats;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PDCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a state to bytes.
pub fn checkpoint_to_bytes(state: &NetworkState<f32>) -> Result<Vec<u8>> {
    let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    let spec_json = serde_json::to_string(&state.spec)
        .map_err(|e| Error::format(format!("spec serialization: {e}")))?;
    w.put_u32(spec_json.len() as u32);
    w.put_bytes(spec_json.as_bytes());
    w.put_u64(state.seed);
    w.put_u64(state.iteration);
    match &state.norm_stats {
        Some(s) => {
            w.put_u8(1);
            w.put_f64(s.mean);
            w.put_f64(s.std);
        }
        None => w.put_u8(0),
    }

    let convs: Vec<_> = state
        .layers
        .iter()
        .filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
        .collect();
    w.put_u32(convs.len() as u32);
    for c in convs {
        w.put_u32(c.n_out as u32);
        w.put_u32(c.fan_in as u32);
        for &m in &c.connections {
            w.put_u32(m);
        }
    }

    let params = state.param_tensors();
    w.put_u32(params.len() as u32);
    for t in params {
        w.put_u64(t.len() as u64);
        w.put_f32_slice(t.data());
    }
    Ok(w.finish())
}

/// Reconstructs a state from bytes produced by [`checkpoint_to_bytes`].
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<NetworkState<f32>> {
    let mut r = Reader::new(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let spec_len = r.get_u32()? as usize;
    let spec_json = std::str::from_utf8(r.get_bytes(spec_len)?)
        .map_err(|_| Error::format("spec payload is not UTF-8"))?;
    let spec: NetworkSpec = serde_json::from_str(spec_json)
        .map_err(|e| Error::format(format!("spec deserialization: {e}")))?;
    let seed = r.get_u64()?;
    let iteration = r.get_u64()?;
    let norm_stats = match r.get_u8()? {
        0 => None,
        1 => Some(NormStats {
            mean: r.get_f64()?,
            std: r.get_f64()?,
        }),
        other => {
            return Err(Error::format(format!(
                "bad normalization-stats flag {other}"
            )))
        }
    };

    // Rebuild the structure from the spec, then overwrite the connection
    // tables and parameters with the stored values.
    let mut state = NetworkState::<f32>::build(&spec, seed)?;
    state.iteration = iteration;
    state.norm_stats = norm_stats;

    let n_convs = r.get_u32()? as usize;
    let mut conv_layers: Vec<&mut crate::layers::ConvLayer<f32>> = state
        .layers
        .iter_mut()
        .filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
        .collect();
    if conv_layers.len() != n_convs {
        return Err(Error::format(format!(
            "checkpoint stores {n_convs} conv tables, spec builds {}",
            conv_layers.len()
        )));
    }
    for c in conv_layers.iter_mut() {
        let n_out = r.get_u32()? as usize;
        let fan_in = r.get_u32()? as usize;
        if n_out != c.n_out || fan_in != c.fan_in {
            return Err(Error::format(format!(
                "conv table {n_out}x{fan_in} does not match spec {}x{}",
                c.n_out, c.fan_in
            )));
        }
        let mut table = Vec::with_capacity(n_out * fan_in);
        for _ in 0..n_out * fan_in {
            table.push(r.get_u32()?);
        }
        // Revalidate row invariants through the regular constructor.
        let rebuilt = crate::layers::ConvLayer::<f32>::with_connections(
            c.n_in, c.n_out, c.kernel, table,
        )?;
        c.connections = rebuilt.connections;
    }

    let n_blocks = r.get_u32()? as usize;
    {
        let mut params = state.param_tensors_mut();
        if params.len() != n_blocks {
            return Err(Error::format(format!(
                "checkpoint stores {n_blocks} parameter tensors, spec builds {}",
                params.len()
            )));
        }
        for t in params.iter_mut() {
            let len = r.get_u64()? as usize;
            if len != t.len() {
                return Err(Error::format(format!(
                    "parameter tensor length {len} does not match spec {}",
                    t.len()
                )));
            }
            let values = r.get_f32_vec(len)?;
            t.data_mut().copy_from_slice(&values);
        }
    }
    r.expect_end()?;
    Ok(state)
}

/// Writes a checkpoint file.
pub fn save_checkpoint(state: &NetworkState<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(state)?)?;
    Ok(())
}

/// Reads a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<NetworkState<f32>> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}
