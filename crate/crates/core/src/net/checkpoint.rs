//! Binary parameter container.
//!
//! ```text
//! magic       8 bytes  "DSNECKPT"
//! version     u32 LE   (currently 1)
//! header_len  u32 LE
//! header      UTF-8 JSON {"arch": <Arch>, "networks": [<role>, ...]}
//! count       u32 LE   number of tensors
//! per tensor:
//!   name_len  u32 LE, name (UTF-8, "<role>/<tensor>")
//!   ndim      u32 LE, dims (u64 LE each)
//!   data      prod(dims) × f64 LE
//! ```
//! Every network in a checkpoint shares one architecture. Tensors appear in
//! network order, then in parameter order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, ModelParams, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DSNECKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub networks: Vec<(String, ModelParams)>,
}

impl Checkpoint {
    pub fn single(role: impl Into<String>, params: ModelParams) -> Self {
        Self {
            networks: vec![(role.into(), params)],
        }
    }

    pub fn get(&self, role: &str) -> Option<&ModelParams> {
        self.networks.iter().find(|(r, _)| r == role).map(|(_, p)| p)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: Arch,
    networks: Vec<String>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let Some((_, first)) = ckpt.networks.first() else {
        return Err(Error::Config("checkpoint needs at least one network".into()));
    };
    if ckpt.networks.iter().any(|(r, p)| !p.same_layout(first) || r.contains('/')) {
        return Err(Error::Config(
            "checkpoint networks must share one architecture and have '/'-free roles".into(),
        ));
    }
    let header = serde_json::to_vec(&Header {
        arch: first.arch().clone(),
        networks: ckpt.networks.iter().map(|(r, _)| r.clone()).collect(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((header.len() as u32).to_le_bytes());
    out.extend(&header);
    let count: usize = ckpt.networks.iter().map(|(_, p)| p.tensors().len()).sum();
    out.extend((count as u32).to_le_bytes());
    for (role, params) in &ckpt.networks {
        for t in params.tensors() {
            let name = format!("{role}/{}", t.name);
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend((d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend(v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let per = tensors.len() / header.networks.len().max(1);
    if header.networks.is_empty() || per * header.networks.len() != tensors.len() {
        return Err(Error::Format("tensor count does not split across networks".into()));
    }
    let mut it = tensors.into_iter();
    let networks = header
        .networks
        .iter()
        .map(|role| {
            let prefix = format!("{role}/");
            let ts = it
                .by_ref()
                .take(per)
                .map(|mut t| {
                    t.name = t
                        .name
                        .strip_prefix(&prefix)
                        .ok_or_else(|| Error::Format(format!("tensor {} not under {prefix}", t.name)))?
                        .to_string();
                    Ok(t)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((role.clone(), ModelParams::from_tensors(&header.arch, ts)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint { networks })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = Arch::default();
        let ckpt = Checkpoint {
            networks: vec![
                ("source".into(), init_params(1, &arch).unwrap()),
                ("target".into(), init_params(2, &arch).unwrap()),
            ],
        };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert_eq!(back.get("target").unwrap().checksum(), ckpt.networks[1].1.checksum());
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let ckpt = Checkpoint::single("target", init_params(1, &Arch::default()).unwrap());
        let bytes = encode_checkpoint(&ckpt).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::Format(_))));
    }
}
