//! Binary model checkpoints.
//!
//! Layout, all integers little-endian: magic `MCKP`, u32 version, u32
//! parameter count; per parameter a u16 name length, the UTF-8 name, a u8
//! rank, rank × u32 dims and the f32 data; finally a u32 byte length and a
//! JSON metadata trailer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::miniclip::{MiniClipModel, ModelConfig, Vocabulary};
use crate::numerics::Tensor;
use crate::params::ParameterStore;
use crate::unlearn::LevelLabel;

pub const MAGIC: &[u8; 4] = b"MCKP";
pub const VERSION: u32 = 1;

/// Where a checkpoint came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Pipeline stage, e.g. `pretrain`, `unlearn` or `oracle`.
    pub stage: String,
    pub forget_dataset: Option<String>,
    pub level: Option<LevelLabel>,
    pub seed: u64,
    /// SHA-256 of the producing configuration's JSON.
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Trailer {
    model: ModelConfig,
    vocabulary: Vocabulary,
    provenance: Provenance,
}

/// Hex SHA-256 of `value` serialized as JSON.
pub fn config_hash(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Serializes `model`. Parameters are stored as f32, so a model whose
/// values are already f32-representable round-trips exactly.
pub fn encode_checkpoint(model: &MiniClipModel, provenance: &Provenance) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let trailer = serde_json::to_vec(&Trailer {
        model: model.config.clone(),
        vocabulary: model.vocab.clone(),
        provenance: provenance.clone(),
    })?;
    out.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
    out.extend_from_slice(&trailer);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<(MiniClipModel, Provenance), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let n = r.u32()? as usize;
    let mut params = ParameterStore::new();
    for _ in 0..n {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| e.to_string())?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or("parameter too large")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        params.insert(name, tensor).map_err(|e| e.to_string())?;
    }
    let len = r.u32()? as usize;
    let trailer: Trailer = serde_json::from_slice(r.take(len)?).map_err(|e| e.to_string())?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let model = MiniClipModel::from_parts(trailer.model, trailer.vocabulary, params)
        .map_err(|e| e.to_string())?;
    Ok((model, trailer.provenance))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(MiniClipModel, Provenance)> {
    decode(bytes).map_err(|detail| Error::Format {
        path: Default::default(),
        detail,
    })
}

pub fn save_checkpoint(path: &Path, model: &MiniClipModel, provenance: &Provenance) -> Result<()> {
    fs::write(path, encode_checkpoint(model, provenance)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MiniClipModel, Provenance)> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut m = crate::miniclip::tests::tiny_model();
        m.params.round_to_f32();
        let bytes = encode_checkpoint(&m, &Provenance::default()).unwrap();
        assert_eq!(&bytes[..4], b"MCKP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
            m.params.len()
        );
        let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + name_len], m.params.names()[0].as_bytes());
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let m = crate::miniclip::tests::tiny_model();
        let bytes = encode_checkpoint(&m, &Provenance::default()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn hash_is_stable() {
        let a = config_hash(&ModelConfig::default()).unwrap();
        assert_eq!(a, config_hash(&ModelConfig::default()).unwrap());
        assert_eq!(a.len(), 64);
    }
}
