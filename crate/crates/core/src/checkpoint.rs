//! Single-file checkpoint: magic, format version, a JSON header (config,
//! vocabulary, tensor table, training metadata) and the raw little-endian f64
//! tensor data.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::model::{MedSegModel, ModelConfig};
use crate::tokenizer::{Vocab, VocabList};

pub const FORMAT_TAG: &str = "medseg-ckpt-v1";
const MAGIC: &[u8; 8] = b"MEDSEGCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub step: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    vocab: VocabList,
    tensors: Vec<TensorEntry>,
    meta: TrainMeta,
}

pub fn to_bytes(model: &MedSegModel, meta: &TrainMeta) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::with_capacity(model.params().num_scalars() * 8);
    let mut offset = 0;
    for (name, value) in model.params().iter() {
        let (rows, cols) = value.dim();
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows,
            cols,
            offset,
        });
        for v in value.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        offset += rows * cols;
    }
    let header = Header {
        format: FORMAT_TAG.to_string(),
        config: model.config().clone(),
        vocab: VocabList::from(model.vocab()),
        tensors,
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(MedSegModel, TrainMeta)> {
    let mut at = 0;
    if take(bytes, &mut at, 8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(bytes, &mut at, len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!("unknown format tag `{}`", header.format)));
    }
    let data = &bytes[at..];
    let mut params = ParamStore::new();
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let start = t.offset * 8;
        let chunk = data
            .get(start..start + n * 8)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} lies outside the data block", t.name)))?;
        let values: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params.lookup(&t.name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", t.name)));
        }
        params.add(t.name.clone(), Array2::from_shape_vec((t.rows, t.cols), values).expect("sized"));
    }
    let vocab = Vocab::try_from(header.vocab)?;
    let model = MedSegModel::from_parts(header.config, vocab, params)?;
    Ok((model, header.meta))
}

/// Writes the checkpoint and a `vocab.json` next to it.
pub fn save(model: &MedSegModel, meta: &TrainMeta, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    crate::dataset::write_file(path, &bytes)?;
    let vocab_path = path.with_file_name("vocab.json");
    model.vocab().save(&vocab_path)
}

pub fn load(path: &Path) -> Result<(MedSegModel, TrainMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// `<format tag>+<first 12 hex digits of the file's sha256>`.
pub fn model_version(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("{FORMAT_TAG}+{hex}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MedSegModel {
        let vocab = Vocab::build(&["nodule"]);
        MedSegModel::new(ModelConfig::tiny(vocab.size()), vocab, 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = tiny();
        let meta = TrainMeta { step: 12, seed: 5 };
        let bytes = to_bytes(&m, &meta).unwrap();
        let (back, meta_back) = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta_back, meta);
        assert_eq!(to_bytes(&back, &meta).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = to_bytes(&tiny(), &TrainMeta::default()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_string_is_stable() {
        let bytes = to_bytes(&tiny(), &TrainMeta::default()).unwrap();
        let v = model_version(&bytes);
        assert!(v.starts_with("medseg-ckpt-v1+"));
        assert_eq!(v.len(), FORMAT_TAG.len() + 13);
        assert_eq!(v, model_version(&bytes));
    }
}
