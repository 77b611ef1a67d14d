//! Team directories: a text manifest plus a content-addressed checkpoint
//! store.
//!
//! ```text
//! <team>/team.manifest
//! <team>/checkpoints/<hash>.ckpt
//! ```
//!
//! The manifest holds `@policy` and `@gate` directives followed by one
//! expert record per line (`id | dimension | predicate | hash | dim`).
//! Expert hashes are model content hashes; gate hashes are SHA-256 of the
//! gate file. Both are checked on load.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use glamor_core::datamodel::Attribute;
use glamor_core::teaming::{
    AttributePredictor, Embedder, Expert, ExpertDescriptor, PolicyMode, Predicate, RoutingPolicy, TeamRegistry,
};

use crate::checkpoint::{self, write_atomic, EXTENSION};
use crate::error::{format_error, Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "team.manifest";
pub const STORE_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq)]
pub struct TeamManifest {
    pub policy: RoutingPolicy,
    pub gates: Vec<(Attribute, String)>,
    pub experts: Vec<ExpertDescriptor>,
}

impl TeamManifest {
    pub fn render(&self) -> String {
        let p = &self.policy;
        let priority: Vec<&str> = p.priority.iter().map(|a| a.as_str()).collect();
        let mut out = format!(
            "# glamor team manifest\n@policy mode={} threshold={:?} priority={}\n",
            p.mode.as_str(),
            p.confidence_threshold,
            priority.join(",")
        );
        for (a, hash) in &self.gates {
            out.push_str(&format!("@gate {} {hash}\n", a.as_str()));
        }
        for e in &self.experts {
            out.push_str(&e.to_manifest_line());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut policy = RoutingPolicy::default();
        let mut gates = Vec::new();
        let mut experts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            let err = |m: String| format_error(path, format!("line {}: {m}", n + 1));
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("@policy") {
                for item in rest.split_whitespace() {
                    let (k, v) = item.split_once('=').ok_or_else(|| err(format!("bad policy item `{item}`")))?;
                    match k {
                        "mode" => {
                            policy.mode =
                                PolicyMode::parse(v).ok_or_else(|| err(format!("unknown policy mode `{v}`")))?
                        }
                        "threshold" => {
                            policy.confidence_threshold = v.parse().map_err(|_| err(format!("bad threshold `{v}`")))?
                        }
                        "priority" => {
                            policy.priority = v
                                .split(',')
                                .map(|a| Attribute::parse(a).ok_or_else(|| err(format!("unknown attribute `{a}`"))))
                                .collect::<Result<_>>()?
                        }
                        _ => return Err(err(format!("unknown policy key `{k}`"))),
                    }
                }
            } else if let Some(rest) = line.strip_prefix("@gate") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [attr, hash] = parts[..] else {
                    return Err(err("expected `@gate <attribute> <hash>`".into()));
                };
                let attr = Attribute::parse(attr).ok_or_else(|| err(format!("unknown attribute `{attr}`")))?;
                gates.push((attr, hash.to_string()));
            } else if line.starts_with('@') {
                return Err(err(format!("unknown directive `{line}`")));
            } else {
                experts.push(ExpertDescriptor::parse_manifest_line(line).map_err(|e| err(e.to_string()))?);
            }
        }
        Ok(Self { policy, gates, experts })
    }
}

/// Copies a gate checkpoint into the store under the SHA-256 of its bytes.
pub fn store_gate_file(source: &Path, store: &Path) -> Result<String> {
    let bytes = fs::read(source).at(source)?;
    checkpoint::read_gate(source)?;
    let hash = crate::sha256_hex(&bytes);
    fs::create_dir_all(store).at(store)?;
    let path = store.join(format!("{hash}.{EXTENSION}"));
    if !path.exists() {
        write_atomic(&path, &bytes)?;
    }
    Ok(hash)
}

/// Copies a model checkpoint into the store under its content hash.
pub fn store_model_file(source: &Path, store: &Path) -> Result<(String, usize)> {
    let model = checkpoint::read_model(source)?;
    let (hash, _) = checkpoint::store_model(&model, store)?;
    Ok((hash, model.embedding_dim()))
}

fn load_gate(store: &Path, hash: &str) -> Result<Arc<dyn AttributePredictor>> {
    let path = store.join(format!("{hash}.{EXTENSION}"));
    let bytes = fs::read(&path).at(&path)?;
    if crate::sha256_hex(&bytes) != hash {
        return Err(format_error(&path, "gate file does not match its manifest hash"));
    }
    Ok(Arc::new(checkpoint::read_gate(&path)?))
}

fn load_expert(store: &Path, descriptor: &ExpertDescriptor) -> Result<Arc<dyn Embedder>> {
    let path = store.join(format!("{}.{EXTENSION}", descriptor.checkpoint_ref));
    Ok(Arc::new(checkpoint::read_model(&path)?))
}

/// A loaded team directory.
pub struct Team {
    pub dir: PathBuf,
    pub manifest: TeamManifest,
    pub registry: TeamRegistry,
}

impl Team {
    pub fn store(&self) -> PathBuf {
        self.dir.join(STORE_DIR)
    }

    /// Reads the manifest, verifies every referenced checkpoint and builds
    /// the registry.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let manifest = TeamManifest::parse(&fs::read_to_string(&path).at(&path)?, &path)?;
        let store = dir.join(STORE_DIR);
        let gates = manifest.gates.iter().map(|(_, h)| load_gate(&store, h)).collect::<Result<Vec<_>>>()?;
        for ((attr, hash), gate) in manifest.gates.iter().zip(&gates) {
            if gate.attribute() != *attr {
                return Err(format_error(
                    &path,
                    format!("gate {hash} predicts {}, manifest says {}", gate.attribute().as_str(), attr.as_str()),
                ));
            }
        }
        let experts = manifest
            .experts
            .iter()
            .map(|d| Ok(Expert { descriptor: d.clone(), model: load_expert(&store, d)? }))
            .collect::<Result<Vec<_>>>()?;
        let registry = TeamRegistry::new(experts, gates, manifest.policy.clone())?;
        Ok(Self { dir: dir.to_path_buf(), manifest, registry })
    }

    fn write_manifest(dir: &Path, manifest: &TeamManifest) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, manifest.render().as_bytes())?;
        Ok(path)
    }

    /// Builds a team directory from gate and expert checkpoint files. The
    /// registry is validated before the manifest is written.
    pub fn assemble(dir: &Path, gate_files: &[PathBuf], experts: &[ExpertSpec], policy: RoutingPolicy) -> Result<Self> {
        fs::create_dir_all(dir).at(dir)?;
        let store = dir.join(STORE_DIR);
        let mut gates = Vec::new();
        for g in gate_files {
            let hash = store_gate_file(g, &store)?;
            gates.push((checkpoint::read_gate(g)?.attribute, hash));
        }
        let mut descriptors = Vec::new();
        for e in experts {
            let (hash, dim) = store_model_file(&e.checkpoint, &store)?;
            descriptors.push(ExpertDescriptor::new(e.id.clone(), e.predicate, hash, dim));
        }
        let manifest = TeamManifest { policy, gates, experts: descriptors };
        let path = Self::write_manifest(dir, &manifest)?;
        match Self::load(dir) {
            Ok(team) => Ok(team),
            Err(e) => {
                let _ = fs::remove_file(&path);
                Err(e)
            }
        }
    }

    /// Hot extension: checks disjointness against the loaded registry first
    /// and only then touches the directory.
    pub fn add_expert(&self, spec: &ExpertSpec) -> Result<Self> {
        let model = checkpoint::read_model(&spec.checkpoint)?;
        let descriptor =
            ExpertDescriptor::new(spec.id.clone(), spec.predicate, model.content_hash(), model.embedding_dim());
        let registry = self.registry.add_expert(descriptor.clone(), Arc::new(model.clone()))?;
        checkpoint::store_model(&model, &self.store())?;
        let mut manifest = self.manifest.clone();
        manifest.experts.push(descriptor);
        Self::write_manifest(&self.dir, &manifest)?;
        Ok(Self { dir: self.dir.clone(), manifest, registry })
    }
}

/// An expert to register: id, subspace predicate and checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSpec {
    pub id: String,
    pub predicate: Predicate,
    pub checkpoint: PathBuf,
}

impl ExpertSpec {
    /// Parses `id:predicate:path`, e.g. `brand0:brand=0:runs/b0/final.ckpt`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.splitn(3, ':');
        let (Some(id), Some(pred), Some(path)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Usage(format!("expert `{s}` must be id:predicate:checkpoint")));
        };
        Ok(Self { id: id.to_string(), predicate: Predicate::parse(pred)?, checkpoint: PathBuf::from(path) })
    }
}
