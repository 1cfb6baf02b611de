//! Named-tensor binary container.
//!
//! Layout, all little-endian:
//! `"PMPO"` magic, u32 format version, u64 backbone checksum, u32 tensor
//! count, then per tensor in lexicographic name order: u32 name length,
//! UTF-8 name, u32 rank, one u64 extent per axis, u8 element tag (1 = f32),
//! row-major f32 payload. A u64 checksum over every preceding byte closes
//! the file.
//!
//! Round-trips are bitwise: the map is ordered, payload bits are copied
//! verbatim, and no field depends on environment or time.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"PMPO";
pub const FORMAT_VERSION: u32 = 1;
const TAG_F32: u8 = 1;

/// First eight bytes of SHA-256, little-endian.
pub fn checksum64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Checksum of the backbone this artifact belongs to (a backbone file
    /// stores the checksum of its own tensor section here).
    pub backbone_checksum: u64,
    tensors: BTreeMap<String, TensorEntry>,
}

impl Checkpoint {
    pub fn new(backbone_checksum: u64) -> Self {
        Self {
            version: FORMAT_VERSION,
            backbone_checksum,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Dimension(format!(
                "tensor {name}: shape {shape:?} holds {count} elements, got {}",
                data.len()
            )));
        }
        self.tensors.insert(name.to_string(), TensorEntry { shape, data });
        Ok(())
    }

    /// Store an f64 buffer, narrowing each element to f32.
    pub fn insert_f64(&mut self, name: &str, shape: Vec<usize>, data: &[f64]) -> Result<()> {
        self.insert(name, shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.get(name)
    }

    /// Fetch a tensor widened to f64, or an error naming the missing entry.
    pub fn get_f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let entry = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {name}")))?;
        Ok((
            entry.shape.clone(),
            entry.data.iter().map(|&v| v as f64).collect(),
        ))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn tensor_section(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, entry) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
            for &e in &entry.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.push(TAG_F32);
            for &v in &entry.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Checksum over the serialized tensor section; a backbone's identity.
    pub fn tensor_checksum(&self) -> u64 {
        checksum64(&self.tensor_section())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.backbone_checksum.to_le_bytes());
        out.extend_from_slice(&self.tensor_section());
        let check = checksum64(&out);
        out.extend_from_slice(&check.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                found: magic.try_into().unwrap(),
            });
        }
        if bytes.len() < 4 + 8 {
            return Err(r.corrupt("file too short for trailing checksum"));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let computed = checksum64(body);
        if stored != computed {
            return Err(Error::FileChecksum { stored, computed });
        }
        r.bytes = body;
        let version = r.u32()?;
        let backbone_checksum = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        let mut prev_name: Option<String> = None;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name_bytes = r.take(name_len)?;
            let name = String::from_utf8(name_bytes.to_vec())
                .map_err(|_| r.corrupt("tensor name is not UTF-8"))?;
            if let Some(prev) = &prev_name {
                if *prev >= name {
                    return Err(r.corrupt("tensor names out of lexicographic order"));
                }
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut count: usize = 1;
            for _ in 0..rank {
                let e = r.u64()? as usize;
                count = count
                    .checked_mul(e)
                    .ok_or_else(|| r.corrupt("extent product overflows"))?;
                shape.push(e);
            }
            let tag = r.take(1)?[0];
            if tag != TAG_F32 {
                return Err(r.corrupt(&format!("unknown element tag {tag}")));
            }
            let payload = r.take(count * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            prev_name = Some(name.clone());
            tensors.insert(name, TensorEntry { shape, data });
        }
        if r.pos != body.len() {
            return Err(r.corrupt("trailing bytes after last tensor"));
        }
        Ok(Self {
            version,
            backbone_checksum,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.corrupt(&format!("need {n} bytes, file ends")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn corrupt(&self, message: &str) -> Error {
        Error::Corrupt {
            offset: self.pos as u64,
            message: message.to_string(),
        }
    }
}
