//! Checkpoint file: a text header followed by little-endian `f32` payload.
//!
//! ```text
//! TUTOR-CHECKPOINT v1
//! count <n>
//! <name> <offset> <ndim> <d0> <d1> ...
//! end
//! <raw f32 bytes>
//! ```
//! Offsets count `f32` elements from the start of the payload.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

const MAGIC: &str = "TUTOR-CHECKPOINT v1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[CheckpointEntry]) -> Result<()> {
    let mut header = format!("{MAGIC}\ncount {}\n", entries.len());
    let mut offset = 0usize;
    for e in entries {
        if e.name.is_empty() || e.name.chars().any(char::is_whitespace) {
            return Err(bad(format!("entry name {:?} is empty or has whitespace", e.name)));
        }
        if e.shape.iter().product::<usize>() != e.values.len() {
            return Err(bad(format!("{}: shape {:?} does not hold {} values", e.name, e.shape, e.values.len())));
        }
        header.push_str(&format!("{} {} {}", e.name, offset, e.shape.len()));
        for d in &e.shape {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
        offset += e.values.len();
    }
    header.push_str("end\n");
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(offset * 4);
    for e in entries {
        for v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Vec<CheckpointEntry>> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of header"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(bad("missing checkpoint magic line"));
    }
    let count_line = next_line(&mut r)?;
    let count: usize = count_line
        .strip_prefix("count ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad(format!("bad count line {count_line:?}")))?;
    let mut layout = Vec::with_capacity(count);
    let mut expect = 0usize;
    for _ in 0..count {
        let l = next_line(&mut r)?;
        let parts: Vec<&str> = l.split(' ').collect();
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number {s:?} in {l:?}")));
        if parts.len() < 3 {
            return Err(bad(format!("bad entry line {l:?}")));
        }
        let offset = parse(parts[1])?;
        let ndim = parse(parts[2])?;
        if parts.len() != 3 + ndim {
            return Err(bad(format!("entry {l:?} declares {ndim} dims")));
        }
        let shape = parts[3..].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?;
        if offset != expect {
            return Err(bad(format!("entry {} at offset {offset}, expected {expect}", parts[0])));
        }
        expect += shape.iter().product::<usize>();
        layout.push((parts[0].to_string(), shape));
    }
    if next_line(&mut r)? != "end" {
        return Err(bad("missing end line"));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expect * 4 {
        return Err(bad(format!("payload has {} bytes, header needs {}", payload.len(), expect * 4)));
    }
    let mut floats = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    Ok(layout
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            CheckpointEntry { name, shape, values: floats.by_ref().take(n).collect() }
        })
        .collect())
}
