//! Binary serialization of [`VaptParams`] with a JSON sidecar holding the
//! [`PromptShapeConfig`].
//!
//! Layout (all integers and floats little-endian):
//!
//! | offset | size      | field                                        |
//! |--------|-----------|----------------------------------------------|
//! | 0      | 8         | magic `b"VAPTPRM\0"`                         |
//! | 8      | 4         | format version, currently 1                  |
//! | 12     | 4         | activation tag: 0 relu, 1 tanh, 2 identity   |
//! | 16     | 4         | LayerNorm enabled flag (0 or 1)              |
//! | 20     | 4         | reserved, 0                                  |
//! | 24     | 7 × 8     | u64 L, N_p, H, W, K, r, d                    |
//! | 80     | 8         | u64 count of doubles that follow             |
//! | 88     | 8 × count | f64 values in [`VaptParams::layout`] order   |

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::prompts::{Activation, PromptShapeConfig, VaptParams};

pub const MAGIC: &[u8; 8] = b"VAPTPRM\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 88;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn encode(params: &VaptParams<f64>) -> Vec<u8> {
    let values = params.to_flat();
    let c = &params.config;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&params.activation.tag().to_le_bytes());
    out.extend_from_slice(&u32::from(params.layer_norm).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in [c.blocks, c.prompts, c.height, c.width, c.kernel, c.rank, c.dim] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(buf: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(buf[off..off + 4].try_into().expect("4 bytes"))
}

fn u64_at(buf: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(buf[off..off + 8].try_into().expect("8 bytes"))
}

pub fn decode(buf: &[u8]) -> Result<VaptParams<f64>> {
    if buf.len() < HEADER_LEN {
        return Err(fmt_err(format!("file too short for header ({} bytes)", buf.len())));
    }
    if &buf[..8] != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = u32_at(buf, 8);
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let activation = Activation::from_tag(u32_at(buf, 12))
        .ok_or_else(|| fmt_err(format!("unknown activation tag {}", u32_at(buf, 12))))?;
    let layer_norm = match u32_at(buf, 16) {
        0 => false,
        1 => true,
        f => return Err(fmt_err(format!("bad LayerNorm flag {f}"))),
    };
    let dims: Vec<usize> = (0..7).map(|i| u64_at(buf, 24 + 8 * i) as usize).collect();
    let config = PromptShapeConfig {
        blocks: dims[0],
        prompts: dims[1],
        height: dims[2],
        width: dims[3],
        kernel: dims[4],
        rank: dims[5],
        dim: dims[6],
    };
    config.validate()?;
    let count = u64_at(buf, 80) as usize;
    let expected = VaptParams::<f64>::layout(&config).total_len();
    if count != expected {
        return Err(fmt_err(format!("header declares {count} values, shape needs {expected}")));
    }
    if buf.len() != HEADER_LEN + 8 * count {
        return Err(fmt_err(format!(
            "payload is {} bytes, expected {}",
            buf.len() - HEADER_LEN,
            8 * count
        )));
    }
    let values: Vec<f64> = buf[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    VaptParams::from_flat(config, activation, layer_norm, &values)
}

pub fn write_params<W: Write>(params: &VaptParams<f64>, mut w: W) -> std::io::Result<()> {
    w.write_all(&encode(params))
}

pub fn read_params<R: Read>(mut r: R) -> Result<VaptParams<f64>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| fmt_err(e.to_string()))?;
    decode(&buf)
}

pub fn config_to_json(config: &PromptShapeConfig) -> String {
    serde_json::to_string_pretty(config).expect("plain struct serializes")
}

pub fn config_from_json(s: &str) -> Result<PromptShapeConfig> {
    serde_json::from_str(s).map_err(|e| fmt_err(format!("sidecar: {e}")))
}

/// Sidecar path: same file name with a `.json` extension.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes the binary file and its JSON sidecar.
pub fn save(params: &VaptParams<f64>, bin: &Path) -> Result<()> {
    std::fs::write(bin, encode(params)).map_err(|e| fmt_err(e.to_string()))?;
    std::fs::write(sidecar_path(bin), config_to_json(&params.config) + "\n")
        .map_err(|e| fmt_err(e.to_string()))
}

/// Loads a binary file and checks it against its sidecar.
pub fn load(bin: &Path) -> Result<VaptParams<f64>> {
    let buf = std::fs::read(bin).map_err(|e| fmt_err(e.to_string()))?;
    let params = decode(&buf)?;
    let side = std::fs::read_to_string(sidecar_path(bin)).map_err(|e| fmt_err(e.to_string()))?;
    let config = config_from_json(&side)?;
    if config != params.config {
        return Err(fmt_err(format!(
            "sidecar {config:?} disagrees with binary header {:?}",
            params.config
        )));
    }
    Ok(params)
}
