//! Self-describing checkpoint files for embedding models and gates.
//!
//! A file is a UTF-8 header followed by little-endian tensor data and a
//! trailing SHA-256 of everything before it:
//!
//! ```text
//! glamor-checkpoint 1
//! kind model
//! descriptor embedding_dim=128
//! meta attribute=brand
//! tensor stem.conv.weight f32 16x3x7x7
//! data
//! <raw values, tensors in header order><32-byte digest>
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use glamor_core::datamodel::Attribute;
use glamor_core::model::{EmbeddingModel, ModelDescriptor};
use glamor_core::teaming::ProxyGate;
use sha2::{Digest, Sha256};

use crate::error::{format_error, IoContext, Result};

const MAGIC: &str = "glamor-checkpoint 1";
pub const EXTENSION: &str = "ckpt";

#[derive(Debug, Clone, PartialEq)]
enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Values,
}

#[derive(Debug, Default)]
struct RawCheckpoint {
    kind: String,
    descriptor: Vec<(String, String)>,
    meta: Vec<(String, String)>,
    tensors: Vec<Entry>,
}

impl RawCheckpoint {
    fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn encode(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\nkind {}\n", self.kind);
        for (k, v) in &self.descriptor {
            head.push_str(&format!("descriptor {k}={v}\n"));
        }
        for (k, v) in &self.meta {
            head.push_str(&format!("meta {k}={v}\n"));
        }
        for t in &self.tensors {
            let dtype = match t.values {
                Values::F32(_) => "f32",
                Values::F64(_) => "f64",
            };
            let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            head.push_str(&format!("tensor {} {dtype} {}\n", t.name, shape.join("x")));
        }
        head.push_str("data\n");
        let mut bytes = head.into_bytes();
        for t in &self.tensors {
            match &t.values {
                Values::F32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
                Values::F64(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        bytes
    }

    fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |m: String| format_error(path, m);
        if bytes.len() < 32 {
            return Err(err("file is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(err("checksum mismatch, the file is corrupt or truncated".into()));
        }
        let marker = b"\ndata\n";
        let split =
            body.windows(marker.len()).position(|w| w == marker).ok_or_else(|| err("missing `data` marker".into()))?;
        let head = std::str::from_utf8(&body[..split]).map_err(|_| err("header is not UTF-8".into()))?;
        let mut data = &body[split + marker.len()..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(err("not a glamor checkpoint".into()));
        }
        let mut raw = RawCheckpoint::default();
        for line in lines {
            let (tag, rest) = line.split_once(' ').ok_or_else(|| err(format!("bad header line `{line}`")))?;
            let kv = || {
                rest.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| err(format!("bad header line `{line}`")))
            };
            match tag {
                "kind" => raw.kind = rest.to_string(),
                "descriptor" => raw.descriptor.push(kv()?),
                "meta" => raw.meta.push(kv()?),
                "tensor" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let [name, dtype, shape] = parts[..] else {
                        return Err(err(format!("bad tensor line `{line}`")));
                    };
                    let shape: Vec<usize> = if shape.is_empty() {
                        Vec::new()
                    } else {
                        shape
                            .split('x')
                            .map(str::parse)
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| err(format!("bad shape in `{line}`")))?
                    };
                    let n: usize = shape.iter().product();
                    let width = match dtype {
                        "f32" => 4,
                        "f64" => 8,
                        _ => return Err(err(format!("unknown dtype `{dtype}`"))),
                    };
                    if data.len() < n * width {
                        return Err(err(format!("tensor `{name}` runs past the end of the data")));
                    }
                    let (chunk, rest) = data.split_at(n * width);
                    data = rest;
                    let values = if width == 4 {
                        Values::F32(chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                    } else {
                        Values::F64(chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                    };
                    raw.tensors.push(Entry { name: name.to_string(), shape, values });
                }
                _ => return Err(err(format!("unknown header tag `{tag}`"))),
            }
        }
        if !data.is_empty() {
            return Err(err(format!("{} unexplained bytes after the last tensor", data.len())));
        }
        Ok(raw)
    }

    fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).at(path)?, path)
    }

    fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }
}

/// Writes through a temporary sibling and a rename, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

fn model_entries(model: &EmbeddingModel, prefix: &str) -> Vec<Entry> {
    model
        .state_tensors()
        .into_iter()
        .map(|(name, shape, values)| Entry { name: format!("{prefix}{name}"), shape, values: Values::F32(values) })
        .collect()
}

fn model_from(raw: &RawCheckpoint, prefix: &str, path: &Path) -> Result<EmbeddingModel> {
    let descriptor = ModelDescriptor::from_key_values(raw.descriptor.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let mut model = EmbeddingModel::new(descriptor, 0)?;
    let mut tensors = Vec::new();
    for e in raw.tensors.iter().filter(|e| e.name.starts_with(prefix)) {
        let Values::F32(v) = &e.values else {
            return Err(format_error(path, format!("model tensor `{}` must be f32", e.name)));
        };
        tensors.push((e.name[prefix.len()..].to_string(), e.shape.clone(), v.clone()));
    }
    model.load_state_tensors(&tensors)?;
    Ok(model)
}

fn expect_kind(raw: &RawCheckpoint, kind: &str, path: &Path) -> Result<()> {
    if raw.kind != kind {
        return Err(format_error(path, format!("expected a {kind} checkpoint, found `{}`", raw.kind)));
    }
    Ok(())
}

pub fn write_model(model: &EmbeddingModel, path: &Path) -> Result<()> {
    RawCheckpoint {
        kind: "model".into(),
        descriptor: model.descriptor().to_key_values(),
        meta: vec![("content_hash".into(), model.content_hash())],
        tensors: model_entries(model, ""),
    }
    .write(path)
}

/// Loads a model and checks it against the content hash recorded at save
/// time.
pub fn read_model(path: &Path) -> Result<EmbeddingModel> {
    let raw = RawCheckpoint::read(path)?;
    expect_kind(&raw, "model", path)?;
    let model = model_from(&raw, "", path)?;
    if let Some(expected) = raw.meta("content_hash") {
        let actual = model.content_hash();
        if actual != expected {
            return Err(format_error(path, format!("content hash {actual} does not match recorded {expected}")));
        }
    }
    Ok(model)
}

/// Saves `model` as `<dir>/<content_hash>.ckpt`, the content-addressed
/// layout team manifests refer to.
pub fn store_model(model: &EmbeddingModel, dir: &Path) -> Result<(String, PathBuf)> {
    fs::create_dir_all(dir).at(dir)?;
    let hash = model.content_hash();
    let path = dir.join(format!("{hash}.{EXTENSION}"));
    if !path.exists() {
        write_model(model, &path)?;
    }
    Ok((hash, path))
}

pub fn write_gate(gate: &ProxyGate, path: &Path) -> Result<()> {
    let labels: Vec<String> = gate.labels.iter().map(u32::to_string).collect();
    let mut meta = vec![
        ("attribute".to_string(), gate.attribute.as_str().to_string()),
        ("sharpness".to_string(), format!("{:?}", gate.sharpness)),
        ("labels".to_string(), labels.join(",")),
    ];
    if let Some(m) = gate.max_distance {
        meta.push(("max_distance".into(), format!("{m:?}")));
    }
    let mut tensors = Vec::new();
    let mut descriptor = Vec::new();
    if let Some(model) = &gate.model {
        descriptor = model.descriptor().to_key_values();
        meta.push(("content_hash".into(), model.content_hash()));
        let dim = gate.centers.first().map_or(0, Vec::len);
        tensors.push(Entry {
            name: "gate.centers".into(),
            shape: vec![gate.centers.len(), dim],
            values: Values::F64(gate.centers.concat()),
        });
        tensors.extend(model_entries(model, "model."));
    }
    RawCheckpoint { kind: "gate".into(), descriptor, meta, tensors }.write(path)
}

pub fn read_gate(path: &Path) -> Result<ProxyGate> {
    let raw = RawCheckpoint::read(path)?;
    expect_kind(&raw, "gate", path)?;
    let get = |k: &str| raw.meta(k).ok_or_else(|| format_error(path, format!("gate is missing `{k}`")));
    let attribute = Attribute::parse(get("attribute")?).ok_or_else(|| format_error(path, "unknown gate attribute"))?;
    let sharpness: f64 = get("sharpness")?.parse().map_err(|_| format_error(path, "bad sharpness"))?;
    let labels: Vec<u32> = get("labels")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format_error(path, "bad gate labels"))?;
    let max_distance = raw
        .meta("max_distance")
        .map(|v| v.parse::<f64>().map_err(|_| format_error(path, "bad max_distance")))
        .transpose()?;
    if raw.descriptor.is_empty() {
        if labels.len() != 1 {
            return Err(format_error(path, "a gate without a model must have exactly one label"));
        }
        return Ok(ProxyGate { sharpness, max_distance, ..ProxyGate::constant(attribute, labels[0]) });
    }
    let model = model_from(&raw, "model.", path)?;
    if let Some(expected) = raw.meta("content_hash") {
        if model.content_hash() != expected {
            return Err(format_error(path, "gate model does not match its recorded content hash"));
        }
    }
    let centers = raw
        .tensors
        .iter()
        .find(|e| e.name == "gate.centers")
        .ok_or_else(|| format_error(path, "gate is missing its centers"))?;
    let Values::F64(values) = &centers.values else {
        return Err(format_error(path, "gate centers must be f64"));
    };
    let [rows, dim] = centers.shape[..] else {
        return Err(format_error(path, "gate centers must be a matrix"));
    };
    if rows != labels.len() || dim != model.embedding_dim() {
        return Err(format_error(
            path,
            format!("gate centers are {rows}x{dim}, expected {}x{}", labels.len(), model.embedding_dim()),
        ));
    }
    Ok(ProxyGate {
        attribute,
        model: Some(model),
        labels,
        centers: values.chunks(dim).map(<[f64]>::to_vec).collect(),
        sharpness,
        max_distance,
    })
}

/// Reads the `kind` line without loading tensors.
pub fn kind_of(path: &Path) -> Result<String> {
    Ok(RawCheckpoint::read(path)?.kind)
}
