//! `SCFW` weight files.
//!
//! ```text
//! magic      b"SCFW"
//! version    u32 LE (= 1)
//! header_len u32 LE
//! header     JSON (architecture, config hash, dictionary reference, tensor table)
//! tensors    f32 LE, in header order
//! ```
//!
//! The dictionary itself is not embedded; the header names its `SCFD` file
//! and the SHA-256 of that file's bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClassifierConfig, Pipeline};
use crate::dictlearn::read_dictionary;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::tensor::{Float, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCFW";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionaryRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl DictionaryRef {
    pub fn for_file(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(fs::read(path)?)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendHeader {
    pub config: FrontendConfig,
    pub dictionary: DictionaryRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub image_size: usize,
    pub classifier: ClassifierConfig,
    pub frontend: Option<FrontendHeader>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&ckpt.header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(header.len() as u32)?;
    w.write_all(&header)?;
    for t in &ckpt.tensors {
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let bad = |offset: u64, msg: String| Error::Format { offset, msg };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad(0, "truncated header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(0, format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad(4, "truncated header".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(4, format!("unsupported version {version}")));
    }
    let len = r.read_u32::<LittleEndian>().map_err(|_| bad(8, "truncated header".into()))? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad(12, "truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| bad(12, format!("header: {e}")))?;
    let mut offset = 12 + len as u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(
                r.read_f32::<LittleEndian>()
                    .map_err(|_| bad(offset, format!("truncated tensor {}", entry.name)))?,
            );
            offset += 4;
        }
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad(offset, "trailing bytes".into()));
    }
    Ok(Checkpoint { header, tensors })
}

/// Snapshot of `pipeline`. A defended pipeline needs the dictionary file it
/// was built from.
pub fn checkpoint_of<F: Float>(pipeline: &Pipeline<F>, dictionary: Option<DictionaryRef>) -> Result<Checkpoint> {
    let frontend = match (pipeline.frontend(), dictionary) {
        (Some(f), Some(d)) => Some(FrontendHeader {
            config: f.config.clone(),
            dictionary: d,
        }),
        (Some(_), None) => return Err(Error::invalid("defended pipeline needs a dictionary reference")),
        (None, _) => None,
    };
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    for store in pipeline.param_stores() {
        for (name, t) in store.iter() {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
            tensors.push(t.cast::<f32>());
        }
    }
    Ok(Checkpoint {
        header: CheckpointHeader {
            config_hash: pipeline.config_hash(),
            image_size: pipeline.image_size(),
            classifier: pipeline.classifier().config().clone(),
            frontend,
            tensors: entries,
        },
        tensors,
    })
}

pub fn save_pipeline<F: Float>(pipeline: &Pipeline<F>, path: &Path, dictionary: Option<&Path>) -> Result<()> {
    let dict = dictionary.map(DictionaryRef::for_file).transpose()?;
    let ckpt = checkpoint_of(pipeline, dict)?;
    let mut buf = Vec::new();
    write_checkpoint(&ckpt, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Rebuilds the pipeline, checking the dictionary hash and the architecture
/// hash. A relative dictionary path is tried as given, then next to the
/// checkpoint.
pub fn load_pipeline<F: Float>(path: &Path) -> Result<Pipeline<F>> {
    let ckpt = read_checkpoint(fs::File::open(path).map(std::io::BufReader::new)?)?;
    let h = &ckpt.header;
    let mut pipeline = match &h.frontend {
        None => Pipeline::natural(h.image_size, &h.classifier)?,
        Some(f) => {
            let mut dict_path = f.dictionary.path.clone();
            if !dict_path.exists() && dict_path.is_relative() {
                if let Some(dir) = path.parent() {
                    dict_path = dir.join(&f.dictionary.path);
                }
            }
            let bytes = fs::read(&dict_path)?;
            let digest = hex::encode(Sha256::digest(&bytes));
            if digest != f.dictionary.sha256 {
                return Err(Error::Config(format!(
                    "dictionary {} has hash {digest}, checkpoint expects {}",
                    dict_path.display(),
                    f.dictionary.sha256
                )));
            }
            let dict = read_dictionary(&bytes[..])?;
            Pipeline::defended(h.image_size, dict, &f.config, &h.classifier)?
        }
    };
    let mut loaded = ckpt.tensors.iter().zip(&h.tensors);
    for store in pipeline.param_stores_mut() {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for (slot, name) in store.tensors_mut().iter_mut().zip(names) {
            let (t, entry) = loaded
                .next()
                .ok_or_else(|| Error::Config("checkpoint has too few tensors".into()))?;
            if entry.name != name || t.shape() != slot.shape() {
                return Err(Error::shape("checkpoint tensor", t.shape(), slot.shape()));
            }
            *slot = t.cast();
        }
    }
    if loaded.next().is_some() {
        return Err(Error::Config("checkpoint has extra tensors".into()));
    }
    if pipeline.config_hash() != h.config_hash {
        return Err(Error::Config("config hash mismatch".into()));
    }
    Ok(pipeline)
}
