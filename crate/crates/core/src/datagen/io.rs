//! Directory layout: `manifest.json` plus a little-endian `samples.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassInfo, MultimodalDataset, Sample, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"MMDS";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    name: String,
    n_e: usize,
    #[serde(rename = "D")]
    dim: usize,
    classes: Vec<ClassInfo>,
    splits: BTreeMap<String, usize>,
    vocab: Vec<String>,
}

pub fn save_dataset(ds: &MultimodalDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        name: ds.name.clone(),
        n_e: ds.n_tokens,
        dim: ds.dim,
        classes: ds.classes.clone(),
        splits: BTreeMap::from([
            ("train".to_string(), ds.count(Split::Train)),
            ("test".to_string(), ds.count(Split::Test)),
        ]),
        vocab: ds.vocab.clone(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;

    let per = ds.n_tokens * ds.dim;
    let mut buf = Vec::with_capacity(16 + ds.samples.len() * (5 + 4 * per));
    buf.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        ds.samples.len() as u32,
        ds.n_tokens as u32,
        ds.dim as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.samples {
        buf.extend_from_slice(&s.class_id.to_le_bytes());
        buf.push(s.split.tag());
        for &x in s.tokens.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::write(dir.join("samples.bin"), buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                detail: "truncated".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_dataset(dir: &Path) -> Result<MultimodalDataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let bin_path = dir.join("samples.bin");
    let bytes = fs::read(&bin_path)?;
    let fmt = |detail: String| Error::Format {
        path: bin_path.clone(),
        detail,
    };
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
        path: &bin_path,
    };
    if r.take(4)? != MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let n_tokens = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if n_tokens != manifest.n_e || dim != manifest.dim {
        return Err(fmt("token grid disagrees with manifest".into()));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = r.u32()?;
        let tag = r.take(1)?[0];
        let split = Split::from_tag(tag).ok_or_else(|| fmt(format!("bad split tag {tag}")))?;
        let raw = r.take(4 * n_tokens * dim)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        samples.push(Sample {
            class_id,
            split,
            tokens: Tensor::matrix(n_tokens, dim, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(fmt("trailing bytes".into()));
    }
    let ds = MultimodalDataset {
        name: manifest.name,
        n_tokens,
        dim,
        classes: manifest.classes,
        samples,
        vocab: manifest.vocab,
    };
    for (split, key) in [(Split::Train, "train"), (Split::Test, "test")] {
        if manifest.splits.get(key).copied() != Some(ds.count(split)) {
            return Err(fmt(format!("{key} count disagrees with manifest")));
        }
    }
    ds.validate()?;
    Ok(ds)
}
