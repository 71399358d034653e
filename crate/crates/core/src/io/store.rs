//! Parameter container: a text header listing names and learning-rate
//! scales, a blank line, then one NDT record per parameter in the same order.
//!
//! ```text
//! MOCHA-PARAMS 1
//! 2
//! sfe.w 1
//! sfe.b 1
//!
//! <NDT><NDT>
//! ```

use super::ndt::{self, DType};
use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use std::path::Path;

const HEADER: &str = "MOCHA-PARAMS 1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut text = format!("{HEADER}\n{}\n", store.len());
    for (name, p) in store.iter() {
        text.push_str(&format!("{name} {:?}\n", p.lr_scale));
    }
    text.push('\n');
    let mut out = text.into_bytes();
    for (_, p) in store.iter() {
        out.extend_from_slice(&ndt::encode(&p.value, DType::F64));
    }
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(start, "unterminated header line"))?;
        let line = std::str::from_utf8(&bytes[start..start + end])
            .map_err(|_| format_err(start, "header is not UTF-8"))?
            .to_string();
        *pos = start + end + 1;
        Ok((start, line))
    };
    let (at, magic) = next_line(&mut pos)?;
    if magic != HEADER {
        return Err(format_err(at, format!("expected '{HEADER}'")));
    }
    let (at, count) = next_line(&mut pos)?;
    let count: usize = count
        .trim()
        .parse()
        .map_err(|_| format_err(at, "bad parameter count"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let (at, line) = next_line(&mut pos)?;
        let mut parts = line.split_whitespace();
        let (Some(name), Some(scale), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format_err(at, "expected 'name lr_scale'"));
        };
        let scale: f64 = scale
            .parse()
            .map_err(|_| format_err(at, format!("bad lr_scale for {name}")))?;
        entries.push((at, name.to_string(), scale));
    }
    let (at, blank) = next_line(&mut pos)?;
    if !blank.is_empty() {
        return Err(format_err(at, "expected blank line after header"));
    }
    let mut store = ParamStore::new();
    for (at, name, scale) in entries {
        let (t, end) = ndt::decode_at(bytes, pos)?;
        pos = end;
        store
            .insert_scaled(&name, t, scale)
            .map_err(|e| format_err(at, e.to_string()))?;
    }
    if pos != bytes.len() {
        return Err(format_err(pos, "trailing bytes after last tensor"));
    }
    Ok(store)
}

pub fn write(path: &Path, store: &ParamStore) -> Result<()> {
    write_bytes(path, &encode(store))
}

pub fn read(path: &Path) -> Result<ParamStore> {
    decode(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn roundtrip_keeps_order_and_scales() {
        let mut s = ParamStore::new();
        s.insert("z.w", Tensor::from_fn(&[2, 3], |i| i[1] as f64 - 0.25)).unwrap();
        s.insert_scaled("a.b", Tensor::ones(&[3]), 0.1).unwrap();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn corrupted_payload_is_a_format_error() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::ones(&[4])).unwrap();
        let b = encode(&s);
        assert!(matches!(decode(&b[..b.len() - 1]), Err(Error::Format { .. })));
        assert!(matches!(decode(b"garbage\n"), Err(Error::Format { offset: 0, .. })));
    }
}
