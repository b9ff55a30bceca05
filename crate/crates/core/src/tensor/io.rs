//! Raw tensor interchange: one JSON header line `{"shape":[..],"name":".."}`
//! followed by the little-endian float32 payload. Files may hold several
//! records back to back.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    name: String,
}

pub fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> std::io::Result<()> {
    let header = Header {
        shape: t.shape().to_vec(),
        name: name.to_string(),
    };
    let line = serde_json::to_string(&header).map_err(std::io::Error::other)?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads the next record, or `None` at a clean end of stream.
pub fn read_tensor<R: BufRead>(r: &mut R) -> Result<Option<(String, Tensor)>> {
    let mut line = Vec::new();
    let n = r
        .read_until(b'\n', &mut line)
        .map_err(|e| Error::io("<tensor stream>", e))?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        return Err(Error::Format {
            path: "<tensor stream>".into(),
            msg: "truncated header line".into(),
        });
    }
    let header: Header = serde_json::from_slice(&line[..line.len() - 1])?;
    let count = numel(&header.shape);
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(|e| Error::Format {
        path: "<tensor stream>".into(),
        msg: format!("payload of '{}' truncated: {e}", header.name),
    })?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Some((header.name, Tensor::new(header.shape, data)?)))
}

pub fn write_tensors<'a, W, I>(w: &mut W, tensors: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    for (name, t) in tensors {
        write_tensor(w, name, t)?;
    }
    Ok(())
}

pub fn read_tensors<R: BufRead>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    while let Some(rec) = read_tensor(r)? {
        out.push(rec);
    }
    Ok(out)
}
