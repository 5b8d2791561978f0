//! Binary container for named tensors with an embedded JSON header.
//!
//! Layout, little-endian: `FVAE`, version `u32`, header length `u64` and
//! UTF-8 JSON header, tensor count `u32`, then per tensor the name
//! (`u16` length + UTF-8), dtype tag `u8` (0 = f32, 1 = f64), rank `u8`,
//! extents `u64` each and the row-major payload. A CRC32 of everything
//! before it closes the file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Decoder, DecoderConfig};
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FVAE";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

/// Decoded file: JSON header plus tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("container has no tensor '{name}'")))
    }

    pub fn section(&self) -> Option<&str> {
        self.header.get("section").and_then(|s| s.as_str())
    }
}

pub fn encode(header: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let text = serde_json::to_string(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let n = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name '{name}' is too long")))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("tensor '{name}' rank too large")))?;
        out.push(rank);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 4 + 4 {
        bail!(Format, "file is truncated ({} bytes)", bytes.len());
    }
    if &bytes[..4] != MAGIC {
        bail!(Format, "bad magic {:?}", &bytes[..4]);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        bail!(Format, "unsupported format version {version}");
    }
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let hlen = r.len()?;
    let header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("tensor '{name}' is too large")))?;
        let data = match dtype {
            DTYPE_F64 => r
                .take(
                    numel
                        .checked_mul(8)
                        .ok_or_else(|| Error::Format("payload overflows".into()))?,
                )?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DTYPE_F32 => r
                .take(
                    numel
                        .checked_mul(4)
                        .ok_or_else(|| Error::Format("payload overflows".into()))?,
                )?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => bail!(Format, "tensor '{name}' has unknown dtype tag {other}"),
        };
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        bail!(Format, "{} trailing bytes after the last tensor", body.len() - r.pos);
    }
    Ok(Container { header, tensors })
}

pub fn write_container(path: &Path, header: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<()> {
    std::fs::write(path, encode(header, tensors)?)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    decode(&std::fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    section: String,
    fingerprint: String,
    config: DecoderConfig,
}

pub fn weights_to_bytes(decoder: &Decoder) -> Result<Vec<u8>> {
    let header = WeightsHeader {
        section: "weights".into(),
        fingerprint: decoder.config().fingerprint(),
        config: decoder.config().clone(),
    };
    let header = serde_json::to_value(header).map_err(|e| Error::Format(e.to_string()))?;
    let tensors: Vec<_> = decoder.params().iter().map(|(n, t)| (n.as_str(), t)).collect();
    encode(&header, &tensors)
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<Decoder> {
    let c = decode(bytes)?;
    if c.section() != Some("weights") {
        bail!(Format, "not a weights file (section {:?})", c.section());
    }
    let header: WeightsHeader =
        serde_json::from_value(c.header).map_err(|e| Error::Format(format!("weights header: {e}")))?;
    if header.config.fingerprint() != header.fingerprint {
        bail!(Format, "embedded config does not match its recorded fingerprint");
    }
    let params: BTreeMap<_, _> = c.tensors.into_iter().collect();
    Decoder::from_parts(header.config, params)
}

pub fn save_weights(decoder: &Decoder, path: &Path) -> Result<()> {
    std::fs::write(path, weights_to_bytes(decoder)?)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<Decoder> {
    weights_from_bytes(&std::fs::read(path)?)
}

/// Loads weights and rejects them unless they were saved for `expected`.
pub fn load_weights_checked(path: &Path, expected: &DecoderConfig) -> Result<Decoder> {
    let d = load_weights(path)?;
    if d.config().fingerprint() != expected.fingerprint() {
        bail!(
            Config,
            "weights in {} were saved for a different decoder configuration",
            path.display()
        );
    }
    Ok(d)
}
