//! On-disk format for a trained encoder.
//!
//! All integers and floats are little-endian.
//!
//! | offset | size        | field                                   |
//! |--------|-------------|-----------------------------------------|
//! | 0      | 8           | magic `DGBENC\0\0`                      |
//! | 8      | 4           | format version (u32, currently 1)       |
//! | 12     | 1           | activation: 0 identity, 1 relu, 2 prelu |
//! | 13     | 3           | zero padding                            |
//! | 16     | 8           | input width `d` (u64)                   |
//! | 24     | 8           | output width `d′` (u64)                 |
//! | 32     | 8·d·d′      | weight, row-major f64                   |
//! |        | 8·d′        | bias                                    |
//! |        | 8           | slope count `k` (u64, 0 or d′)          |
//! |        | 8·k         | PReLU slopes                            |
//! |        | 4           | CRC-32 of every preceding byte          |

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::nn::{Activation, GcnEncoder, LinearLayer};

pub const MAGIC: [u8; 8] = *b"DGBENC\0\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(encoder: &GcnEncoder) -> Vec<u8> {
    let (d, dp) = encoder.layer.weight.shape();
    let mut out = Vec::with_capacity(48 + 8 * (d * dp + 2 * dp));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(encoder.activation.tag());
    out.extend_from_slice(&[0; 3]);
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&(dp as u64).to_le_bytes());
    for v in encoder.layer.weight.as_slice().iter().chain(&encoder.layer.bias) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(encoder.slopes.len() as u64).to_le_bytes());
    for v in &encoder.slopes {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("{what} size overflows")))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<GcnEncoder> {
    if bytes.len() < 8 || bytes[..8] != MAGIC {
        return Err(Error::Format("missing checkpoint magic".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Format("truncated while reading version".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    if bytes.len() < 4 {
        return Err(Error::Format("truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let header = r.take(4, "header")?;
    let activation = Activation::from_tag(header[0])
        .ok_or_else(|| Error::Format(format!("unknown activation tag {}", header[0])))?;
    if header[1..] != [0, 0, 0] {
        return Err(Error::Format("nonzero header padding".into()));
    }
    let d = r.u64("input width")? as usize;
    let dp = r.u64("output width")? as usize;
    let weight_len = d
        .checked_mul(dp)
        .ok_or_else(|| Error::Format("weight size overflows".into()))?;
    let weight = r.f64s(weight_len, "weight")?;
    let bias = r.f64s(dp, "bias")?;
    let k = r.u64("slope count")? as usize;
    let expected = if activation == Activation::Prelu { dp } else { 0 };
    if k != expected {
        return Err(Error::Format(format!("{k} slopes stored, expected {expected}")));
    }
    let slopes = r.f64s(k, "slopes")?;
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let weight = DenseMatrix::from_vec(d, dp, weight).map_err(|e| Error::Format(e.to_string()))?;
    let layer = LinearLayer::from_parts(weight, bias).map_err(|e| Error::Format(e.to_string()))?;
    let encoder = GcnEncoder {
        layer,
        activation,
        slopes,
    };
    if !encoder.layer.weight.is_finite() || encoder.layer.bias.iter().chain(&encoder.slopes).any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite parameter".into()));
    }
    Ok(encoder)
}

pub fn write_checkpoint(path: impl AsRef<Path>, encoder: &GcnEncoder) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(encoder)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<GcnEncoder> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
