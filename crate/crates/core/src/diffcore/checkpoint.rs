//! Plain-text tensor container.
//!
//! ```text
//! panoscan-ckpt-v1
//! entries 2
//! policy.v 1 64
//! 0.013 -0.2 ...
//! policy.w_h 2 64 64
//! ...
//! ```
//!
//! Each entry is a header line `name ndim dim...` followed by one line of
//! row-major values. Values use the shortest representation that parses
//! back to the identical `f64`, so save/load round-trips bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "panoscan-ckpt-v1";

pub fn encode(entries: &[(String, Tensor)]) -> String {
    let mut out = String::new();
    writeln!(out, "{CHECKPOINT_HEADER}").unwrap();
    writeln!(out, "entries {}", entries.len()).unwrap();
    for (name, t) in entries {
        write!(out, "{name} {}", t.shape().len()).unwrap();
        for d in t.shape() {
            write!(out, " {d}").unwrap();
        }
        out.push('\n');
        let mut first = true;
        for v in t.data() {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn decode(text: &str) -> Result<Vec<(String, Tensor)>> {
    let bad = |msg: String| Error::Data(format!("malformed checkpoint: {msg}"));
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CHECKPOINT_HEADER => {}
        other => return Err(bad(format!("unexpected header {other:?}"))),
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("entries "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| bad("missing entry count".into()))?;
    let mut entries = Vec::with_capacity(count);
    for k in 0..count {
        let header = lines.next().ok_or_else(|| bad(format!("entry {k} truncated")))?;
        let mut parts = header.split_whitespace();
        let name = parts.next().ok_or_else(|| bad("empty entry header".into()))?;
        let ndim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("entry `{name}` lacks ndim")))?;
        let shape: Vec<usize> = parts
            .map(|s| s.parse().map_err(|_| bad(format!("entry `{name}` bad dim {s}"))))
            .collect::<Result<_>>()?;
        if shape.len() != ndim {
            return Err(bad(format!("entry `{name}` declares {ndim} dims")));
        }
        let values = lines.next().ok_or_else(|| bad(format!("entry `{name}` lacks values")))?;
        let data: Vec<f64> = values
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad(format!("entry `{name}` bad value {s}"))))
            .collect::<Result<_>>()?;
        let tensor = Tensor::new(shape, data).map_err(|e| bad(format!("entry `{name}`: {e}")))?;
        entries.push((name.to_string(), tensor));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode(&text)
}
