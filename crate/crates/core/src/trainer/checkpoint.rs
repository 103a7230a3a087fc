//! Binary checkpoint container: `RAGN`, version, tensor count, then per
//! tensor a length-prefixed UTF-8 name, rank, dims and little-endian `f32`
//! payload, followed by a CRC32 of everything before it. All integers are
//! little-endian `u32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RAGN";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;
const MAX_NAME: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Self {
        NamedTensor {
            name: name.into(),
            dims,
            data,
        }
    }

    /// A rank-1 tensor carrying `u32` values as raw bit patterns.
    pub fn from_words(name: impl Into<String>, words: &[u32]) -> Self {
        NamedTensor::new(
            name,
            vec![words.len() as u32],
            words.iter().map(|&w| f32::from_bits(w)).collect(),
        )
    }

    pub fn words(&self) -> Vec<u32> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}

/// Ordered named tensors. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

/// Size in bytes of the encoding of tensors with the given name lengths,
/// ranks and element counts.
pub fn encoded_len(items: impl IntoIterator<Item = (usize, usize, usize)>) -> usize {
    12 + items
        .into_iter()
        .map(|(name, rank, numel)| 4 + name + 4 + 4 * rank + 4 * numel)
        .sum::<usize>()
        + 4
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint lacks tensor `{name}`")))
    }

    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(encoded_len(
            self.tensors.iter().map(|t| (t.name.len(), t.dims.len(), t.data.len())),
        ));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::format("checkpoint", 0, "bad magic, expected RAGN"));
        }
        r.pos = 4;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(
                "checkpoint",
                4,
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32("name length")? as usize;
            if name_len > MAX_NAME {
                return Err(Error::format(
                    "checkpoint",
                    at,
                    format!("name length {name_len} exceeds {MAX_NAME}"),
                ));
            }
            let name_bytes = r.take(name_len, "name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::format("checkpoint", at + 4, "tensor name is not UTF-8"))?
                .to_string();
            let at = r.pos;
            let rank = r.u32("rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::format(
                    "checkpoint",
                    at,
                    format!("rank {rank} exceeds {MAX_RANK}"),
                ));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u32("dims")?;
                numel = numel
                    .checked_mul(d as usize)
                    .ok_or_else(|| Error::format("checkpoint", r.pos, "element count overflows"))?;
                dims.push(d);
            }
            let payload_len = numel
                .checked_mul(4)
                .ok_or_else(|| Error::format("checkpoint", r.pos, "payload size overflows"))?;
            let payload = r.take(payload_len, &format!("payload of `{name}`"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            if tensors.iter().any(|t: &NamedTensor| t.name == name) {
                return Err(Error::format("checkpoint", at, format!("duplicate tensor `{name}`")));
            }
            tensors.push(NamedTensor { name, dims, data });
        }
        let body_end = r.pos;
        let stored = r.u32("crc32")?;
        if r.pos != bytes.len() {
            return Err(Error::format(
                "checkpoint",
                r.pos,
                format!("{} trailing bytes after crc32", bytes.len() - r.pos),
            ));
        }
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(Error::format(
                "checkpoint",
                body_end,
                format!("crc32 mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename keeps the previous file intact on failure.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes).map_err(|e| match e {
            Error::Format { what, offset, msg } => Error::Format {
                what,
                offset,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                "checkpoint",
                self.pos,
                format!(
                    "truncated reading {what}: expected at least {} bytes, file has {}",
                    self.pos.saturating_add(n),
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                NamedTensor::new(
                    "a.w",
                    vec![2, 1, 1, 3],
                    vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25],
                ),
                NamedTensor::from_words("meta", &[0xffff_ffff, 0x7fc0_0001, 7]),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.encode();
        assert_eq!(bytes.len(), encoded_len([(3, 4, 6), (4, 1, 3)]));
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.tensors[1].words(), vec![0xffff_ffff, 0x7fc0_0001, 7]);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn truncation_names_lengths() {
        let bytes = sample().encode();
        let err = Checkpoint::decode(&bytes[..bytes.len() - 10]).unwrap_err().to_string();
        assert!(err.contains("expected at least") && err.contains("file has"), "{err}");
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(Checkpoint::decode(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = sample().encode();
        bytes[4] = 9;
        assert!(Checkpoint::decode(&bytes).unwrap_err().to_string().contains("version"));
        let mut bytes = sample().encode();
        let k = bytes.len() - 8;
        bytes[k] ^= 1;
        assert!(Checkpoint::decode(&bytes).unwrap_err().to_string().contains("crc32"));
        let mut bytes = sample().encode();
        bytes.push(0);
        assert!(Checkpoint::decode(&bytes).is_err());
    }
}
