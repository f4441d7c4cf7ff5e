//! Checkpoint container: a JSON header (metadata plus a name → shape/offset
//! index, sorted by name) followed by the raw little-endian f32 blob with
//! every parameter concatenated in index order. Round trips are bit-exact;
//! parameters are quantized to f32 before saving, so a reloaded model
//! reproduces a stage's forward outputs exactly.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::Params;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ILCK";
const VERSION: u32 = 1;

/// Stage provenance stored with every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMetadata {
    pub stage: String,
    pub step: u64,
    pub config_hash: String,
    pub model: ModelConfig,
    /// Groups the stage trained.
    pub trainable: Vec<String>,
    /// Groups the stage loaded and left untouched.
    pub frozen: Vec<String>,
    /// Post-stage hash of every parameter group.
    pub group_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    shape: Vec<usize>,
    /// Byte offset of this parameter inside the blob.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: CheckpointMetadata,
    index: BTreeMap<String, IndexEntry>,
}

/// Writes `params` and metadata to `path`.
pub fn save_checkpoint(path: &Path, params: &Params, metadata: &CheckpointMetadata) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut index = BTreeMap::new();
    let mut offset = 0u64;
    for (name, value) in params.iter() {
        index.insert(
            name.clone(),
            IndexEntry {
                shape: value.shape().to_vec(),
                offset,
            },
        );
        offset += 4 * value.len() as u64;
    }
    let header = Header {
        metadata: metadata.clone(),
        index,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");

    let mut blob = Vec::with_capacity(offset as usize);
    for (_, value) in params.iter() {
        for v in value.iter() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writer.write_all(MAGIC).map_err(io)?;
    writer.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    writer
        .write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io)?;
    writer.write_all(&header_bytes).map_err(io)?;
    writer.write_all(&blob).map_err(io)?;
    writer.flush().map_err(io)?;
    Ok(())
}

/// Reads a checkpoint back into a fresh [`Params`] store.
pub fn load_checkpoint(path: &Path) -> Result<(Params, CheckpointMetadata)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let io = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "bad magic; not a checkpoint file".into(),
        });
    }
    let mut version = [0u8; 4];
    reader.read_exact(&mut version).map_err(io)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut len = [0u8; 8];
    reader.read_exact(&mut len).map_err(io)?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader.read_exact(&mut header_bytes).map_err(io)?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;

    let mut blob = Vec::new();
    reader.read_to_end(&mut blob).map_err(io)?;
    let expected: u64 = header
        .index
        .values()
        .map(|e| 4 * e.shape.iter().product::<usize>() as u64)
        .sum();
    if blob.len() as u64 != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("blob is {} bytes, index needs {expected}", blob.len()),
        });
    }

    let mut params = Params::new();
    for (name, entry) in &header.index {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * count;
        if end > blob.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("parameter {name} overruns the blob"),
            });
        }
        let mut data = Vec::with_capacity(count);
        for chunk in blob[start..end].chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            data.push(v as f64);
        }
        let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), data).map_err(|_| {
            Error::Format {
                path: path.to_path_buf(),
                reason: format!("parameter {name} shape/data mismatch"),
            }
        })?;
        params.insert(name.clone(), array);
    }
    Ok((params, header.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_conv2d, Init};
    use tempfile::TempDir;

    fn metadata(params: &Params) -> CheckpointMetadata {
        CheckpointMetadata {
            stage: "test".into(),
            step: 3,
            config_hash: "abc".into(),
            model: ModelConfig::tiny(),
            trainable: vec!["student".into()],
            frozen: vec!["teacher".into()],
            group_hashes: params.all_group_hashes(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("model.ckpt");
        let mut params = Params::new();
        init_conv2d(&mut params, 9, "student.c1", 3, 4, 3, Init::He, 0.0);
        init_conv2d(&mut params, 9, "teacher.c1", 3, 4, 3, Init::He, 0.1);
        params.quantize_f32();

        save_checkpoint(&path, &params, &metadata(&params)).unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(&params, &loaded);
        assert_eq!(meta.stage, "test");
        assert_eq!(meta.group_hashes, loaded.all_group_hashes());

        // Saving the reload reproduces identical bytes.
        let path2 = tmp.path().join("model2.ckpt");
        save_checkpoint(&path2, &loaded, &meta).unwrap();
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(&path2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_magic_rejected() {
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPEnope").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncated_blob_rejected() {
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("model.ckpt");
        let mut params = Params::new();
        init_conv2d(&mut params, 9, "g.c", 2, 2, 3, Init::He, 0.0);
        params.quantize_f32();
        save_checkpoint(&path, &params, &metadata(&params)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
