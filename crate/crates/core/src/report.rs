//! Report envelopes, trace fingerprints and CSV heatmap export.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trace::{ANNOTATIONS_FILE, ATTN_FILE, EMB_FILE, MANIFEST_FILE};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("ragged matrix: row {row} has {len} values, expected {expected}")]
    RaggedMatrix { row: usize, len: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub elapsed_ms: u128,
}

/// Envelope around every command result. Without `timing` the serialized report depends only
/// on the trace contents, command line and seed.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport<C: Serialize, R: Serialize> {
    pub tool_version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    /// SHA-256 over the trace directory files; absent when the command reads no trace.
    pub trace_fingerprint: Option<String>,
    pub config: C,
    pub result: R,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

/// SHA-256 over the four trace files in a fixed order, each prefixed by its name and length.
pub fn trace_fingerprint(dir: impl AsRef<Path>) -> io::Result<String> {
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    for name in [MANIFEST_FILE, ATTN_FILE, EMB_FILE, ANNOTATIONS_FILE] {
        let path = dir.as_ref().join(name);
        let mut file = File::open(&path)?;
        let len = file.metadata()?.len();
        hasher.update(name.as_bytes());
        hasher.update(len.to_le_bytes());
        loop {
            let read = file.read(&mut buf)?;
            if read == 0 {
                break;
            }
            hasher.update(&buf[..read]);
        }
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Formats with 6 significant digits, `%g` style: trailing zeros dropped, scientific notation
/// outside `[1e-4, 1e6)`.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let fixed = format!("{v:.*}", (5 - exp) as usize);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// CSV heatmap: header `layer,h1..hH`, one row per layer (0-based row index first).
pub fn heatmap_csv<R: AsRef<[f64]>>(matrix: &[R]) -> Result<String, ReportError> {
    let width = matrix.first().map(|r| r.as_ref().len()).unwrap_or(0);
    let mut out = String::from("layer");
    for h in 1..=width {
        out.push_str(&format!(",h{h}"));
    }
    out.push('\n');
    for (row, values) in matrix.iter().enumerate() {
        let values = values.as_ref();
        if values.len() != width {
            return Err(ReportError::RaggedMatrix { row, len: values.len(), expected: width });
        }
        out.push_str(&row.to_string());
        for v in values {
            out.push(',');
            out.push_str(&format_sig6(*v));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_heatmap<R: AsRef<[f64]>>(matrix: &[R], path: impl AsRef<Path>) -> Result<(), ReportError> {
    let csv = heatmap_csv(matrix)?;
    write_output(path.as_ref(), csv.as_bytes())
}

/// Writes to a file, or to stdout when the path is `-`.
pub fn write_output(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    if path == Path::new("-") {
        let mut stdout = io::stdout().lock();
        stdout.write_all(bytes)?;
        stdout.flush()?;
    } else {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, bytes)?;
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String, ReportError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}
