//! On-disk checkpoints: `manifest.json` plus `params.bin`, a concatenation of
//! little-endian f32 arrays whose names, shapes and byte offsets are listed
//! in the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generator::{GeneratorNet, GeneratorSpec};
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob file.
    pub offset: u64,
}

/// Appends every array of `params` (prefixing names) to `buf`.
pub(crate) fn encode_params(params: &ParamSet, prefix: &str, buf: &mut Vec<u8>, entries: &mut Vec<BlobEntry>) {
    for (name, t) in params.iter() {
        entries.push(BlobEntry { name: format!("{prefix}{name}"), shape: t.shape().to_vec(), offset: buf.len() as u64 });
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

pub(crate) fn decode_tensor(path: &Path, blob: &[u8], entry: &BlobEntry) -> Result<Tensor> {
    let n: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + 4 * n;
    let bytes = blob
        .get(start..end)
        .ok_or_else(|| Error::format(path, format!("`{}` runs past end of blob", entry.name)))?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Tensor::new(entry.shape.clone(), data)
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("serializable value");
    s.push(b'\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub format_version: u32,
    pub kind: String,
    pub spec: GeneratorSpec,
    pub seed: u64,
    pub trained: bool,
    /// Free-form stage tag such as `teacher` or `stage-2`.
    pub stage: String,
    pub params: Vec<BlobEntry>,
    /// Weights digest at save time (of the f32-rounded values).
    pub digest: String,
    /// Extra provenance, e.g. the inputs of a weight-delta merge.
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub provenance: serde_json::Map<String, serde_json::Value>,
}

/// Rounds every value to f32 precision, matching what a save/load cycle yields.
pub fn round_to_f32(params: &mut ParamSet) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

pub fn save_generator(
    net: &GeneratorNet,
    dir: &Path,
    stage: &str,
    provenance: serde_json::Map<String, serde_json::Value>,
) -> Result<GeneratorManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::new();
    let mut entries = Vec::new();
    encode_params(net.params(), "", &mut buf, &mut entries);
    let mut rounded = net.params().clone();
    round_to_f32(&mut rounded);
    let manifest = GeneratorManifest {
        format_version: FORMAT_VERSION,
        kind: "generator".into(),
        spec: net.spec().clone(),
        seed: net.seed(),
        trained: net.is_trained(),
        stage: stage.into(),
        params: entries,
        digest: rounded.digest(),
        provenance,
    };
    write_atomic(&dir.join(BLOB_FILE), &buf)?;
    write_atomic(&dir.join(MANIFEST_FILE), &to_json_pretty(&manifest))?;
    Ok(manifest)
}

pub fn load_generator(dir: &Path) -> Result<(GeneratorNet, GeneratorManifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: GeneratorManifest = read_json(&mpath)?;
    if manifest.format_version != FORMAT_VERSION || manifest.kind != "generator" {
        return Err(Error::format(
            &mpath,
            format!("expected generator format {FORMAT_VERSION}, found {} v{}", manifest.kind, manifest.format_version),
        ));
    }
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut params = ParamSet::new();
    for entry in &manifest.params {
        params.push(entry.name.clone(), decode_tensor(&bpath, &blob, entry)?);
    }
    let net = GeneratorNet::from_parts(manifest.spec.clone(), params, manifest.seed, manifest.trained)?;
    Ok((net, manifest))
}
