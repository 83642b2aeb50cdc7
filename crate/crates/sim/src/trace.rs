//! Trace files: interleaved little-endian `f32` I/Q samples plus a JSON
//! sidecar at `<path>.json`.
//!
//! Samples are stored as `f32`, so a buffer round-trips bit-exactly only if
//! its values are representable in single precision.

use std::fs;
use std::path::{Path, PathBuf};

use lora_mpr::{Error as PhyError, IqBuffer, NodeTxState};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    /// Sample rate in Hz.
    pub rate: f64,
    pub sf: u8,
    pub bw: f64,
    /// Codeword length `n_c` of the coding rate `4/n_c`.
    pub cr: u8,
    pub users: usize,
    pub samples: usize,
    /// Ground truth, present for synthetic traces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lead: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<NodeTxState>>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn format_err(msg: impl Into<String>) -> crate::error::SimError {
    PhyError::Format(msg.into()).into()
}

pub fn write_trace(path: &Path, buf: &IqBuffer, meta: &TraceMeta) -> Result<()> {
    if meta.samples != buf.len() || meta.rate != buf.rate {
        return Err(format_err("metadata does not describe the buffer"));
    }
    let mut bytes = Vec::with_capacity(buf.len() * 8);
    for c in &buf.samples {
        bytes.extend_from_slice(&(c.re as f32).to_le_bytes());
        bytes.extend_from_slice(&(c.im as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<(IqBuffer, TraceMeta)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| format_err(format!("{}: {e}", side.display())))?;
    let meta: TraceMeta = serde_json::from_str(&text).map_err(|e| format_err(format!("{}: {e}", side.display())))?;
    if !(meta.rate > 0.0) {
        return Err(format_err("sample rate must be positive"));
    }
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 || bytes.len() / 8 != meta.samples {
        return Err(format_err(format!(
            "{} bytes of samples, metadata expects {}",
            bytes.len(),
            meta.samples * 8
        )));
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    let samples = bytes
        .chunks_exact(8)
        .map(|c| Complex64::new(f(&c[..4]), f(&c[4..])))
        .collect();
    Ok((IqBuffer::new(samples, meta.rate), meta))
}
