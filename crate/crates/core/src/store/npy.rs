//! Reading and writing the numpy `.npy` format.
//!
//! Only the subset needed for embedding matrices is supported: little-endian
//! `f4`/`f8` payloads in C order, with 1-D or 2-D shapes. Everything is
//! written as version 1.0, `<f8`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F4,
    F8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
}

/// A decoded array, widened to f64.
#[derive(Debug, Clone)]
pub struct RawArray {
    pub header: Header,
    pub data: Vec<f64>,
}

pub fn read_file(path: &Path) -> Result<RawArray> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}

pub fn write_file(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(shape, data)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Serializes `data` (C order) as an NPY v1.0 `<f8` array.
pub fn encode(shape: &[usize], data: &[f64]) -> Vec<u8> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let shape_str = match shape {
        [n] => format!("({n},)"),
        dims => {
            let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    };
    let mut dict = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_str}, }}");
    // magic + version + u16 length + dict + '\n' must be a multiple of ALIGN
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + dict.len() + data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<RawArray, String> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err("missing NPY magic string".into());
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, offset) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 => {
            if bytes.len() < 12 {
                return Err("truncated header".into());
            }
            (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12)
        }
        _ => return Err(format!("unsupported NPY version {major}.{minor}")),
    };
    let end = offset + header_len;
    if bytes.len() < end {
        return Err("truncated header".into());
    }
    let text = std::str::from_utf8(&bytes[offset..end]).map_err(|_| "header is not ASCII")?;
    let header = parse_header(text)?;

    let payload = &bytes[end..];
    let count: usize = header.shape.iter().product();
    let expected = count * header.dtype.size();
    if payload.len() != expected {
        return Err(format!(
            "payload is {} bytes, shape {:?} needs {expected}",
            payload.len(),
            header.shape
        ));
    }
    let data = match header.dtype {
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Ok(RawArray { header, data })
}

fn parse_header(text: &str) -> Result<Header, String> {
    let body = text.trim_end_matches(['\n', ' ', '\0']).trim();
    let body = body
        .strip_prefix('{')
        .and_then(|b| b.strip_suffix('}'))
        .ok_or("header is not a dict literal")?;

    let mut dtype = None;
    let mut fortran_order = None;
    let mut shape = None;
    let mut rest = body.trim();
    while !rest.is_empty() {
        let (key, after) = take_quoted(rest).ok_or("expected quoted key")?;
        let after = after.trim_start().strip_prefix(':').ok_or("expected ':'")?.trim_start();
        let consumed = match key {
            "descr" => {
                let (d, after) = take_quoted(after).ok_or("descr must be a string")?;
                dtype = Some(match d {
                    "<f8" => Dtype::F8,
                    "<f4" => Dtype::F4,
                    other => return Err(format!("unsupported dtype {other:?}")),
                });
                after
            }
            "fortran_order" => {
                if let Some(a) = after.strip_prefix("False") {
                    fortran_order = Some(false);
                    a
                } else if let Some(a) = after.strip_prefix("True") {
                    fortran_order = Some(true);
                    a
                } else {
                    return Err("fortran_order must be True or False".into());
                }
            }
            "shape" => {
                let inner = after.strip_prefix('(').ok_or("shape must be a tuple")?;
                let close = inner.find(')').ok_or("unterminated shape tuple")?;
                let dims = inner[..close]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim_end_matches('L').parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| "shape entries must be integers")?;
                shape = Some(dims);
                &inner[close + 1..]
            }
            other => return Err(format!("unexpected header key {other:?}")),
        };
        rest = consumed.trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }

    Ok(Header {
        dtype: dtype.ok_or("header lacks descr")?,
        fortran_order: fortran_order.ok_or("header lacks fortran_order")?,
        shape: shape.ok_or("header lacks shape")?,
    })
}

fn take_quoted(s: &str) -> Option<(&str, &str)> {
    let quote = s.chars().next()?;
    if quote != '\'' && quote != '"' {
        return None;
    }
    let close = s[1..].find(quote)? + 1;
    Some((&s[1..close], &s[close + 1..]))
}
