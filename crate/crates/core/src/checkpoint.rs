//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MPFNCKPT" | u32 version | u64 header_len | header JSON
//! u64 tensor_count
//! per tensor (sorted by name):
//!   u32 name_len | name utf-8 | u32 rank | u64 dims[rank] | u8 trainable | f64 values[numel]
//! ```
//!
//! The header carries the model configuration, vocabularies and free-form
//! metadata (seeds, epoch, dev accuracy). Saving the same model twice gives
//! identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Vocabs;
use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamStore, Real, Tensor};

const MAGIC: &[u8; 8] = b"MPFNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocabs: Vocabs,
    metadata: BTreeMap<String, serde_json::Value>,
}

pub type Metadata = BTreeMap<String, serde_json::Value>;

pub fn to_bytes<T: Real>(model: &Model<T>, metadata: &Metadata) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config,
        vocabs: model.vocabs.clone(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::Internal(format!("encoding header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(u8::from(t.requires_grad()));
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
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
            .ok_or_else(|| Error::Parse {
                location: format!("checkpoint byte {}", self.pos),
                message: "truncated file".into(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| self.error("length overflow"))
    }

    fn error(&self, message: &str) -> Error {
        Error::Parse {
            location: format!("checkpoint byte {}", self.pos),
            message: message.into(),
        }
    }
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(Model<T>, Metadata)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(r.error("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error(&format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.len()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| r.error(&format!("bad header: {e}")))?;
    let count = r.len()?;
    let mut params = ParamStore::<T>::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.error("parameter name is not utf-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let trainable = r.take(1)?[0] != 0;
        let numel: usize = dims.iter().product();
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| r.error("tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        params.insert(
            name,
            Tensor::from_vec(dims, data)?.with_requires_grad(trainable),
        )?;
    }
    if r.pos != bytes.len() {
        return Err(r.error("trailing bytes"));
    }
    let model = Model {
        config: header.config,
        vocabs: header.vocabs,
        params,
    };
    Ok((model, header.metadata))
}

pub fn save<T: Real>(model: &Model<T>, metadata: &Metadata, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, metadata)?;
    let mut f =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load<T: Real>(path: &Path) -> Result<(Model<T>, Metadata)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes)
}
