//! Evaluation plumbing and the files commands emit: report JSON, ranking
//! and loss CSVs, train state, and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use glamor_core::datamodel::{DatasetView, Sample, Split};
use glamor_core::metrics::{
    distance_matrix, evaluate_reid, evaluate_zsl, l2_normalize_all, rank_row, EvaluationReport, Protocol,
    RankingResult, RetrievalMeta, VERI_CMC_KS, ZSL_RECALL_KS,
};
use glamor_core::model::EmbeddingModel;
use glamor_core::training::{LossPoint, TrainState};
use serde_json::{json, Map, Value};

use crate::checkpoint::write_atomic;
use crate::error::{Error, IoContext, Result};

/// Which samples an evaluation runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    /// Query and gallery samples (held-out identities).
    Test,
    /// Train samples, leave-one-out. Only meaningful for the zero-shot
    /// protocol.
    Train,
}

impl EvalSplit {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "test" => Some(EvalSplit::Test),
            "train" => Some(EvalSplit::Train),
            _ => None,
        }
    }
}

/// A report plus the per-query rankings behind it. Ranking indices are
/// dataset sample indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvaluationReport,
    pub rankings: Vec<RankingResult>,
}

fn embed_f64(model: &EmbeddingModel, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    Ok(model.embed(samples, true)?.iter().map(|e| e.to_f64()).collect())
}

fn meta(samples: &[&Sample]) -> Vec<RetrievalMeta> {
    samples.iter().map(|s| RetrievalMeta { identity: s.identity_id, camera: s.camera_id }).collect()
}

/// Evaluates `model` on `view` under `protocol`. The zero-shot protocol
/// clusters and ranks leave-one-out over one pool; the VeRi protocol ranks
/// queries against the gallery and needs camera ids.
pub fn evaluate_model(
    model: &EmbeddingModel,
    view: &DatasetView,
    protocol: Protocol,
    split: EvalSplit,
    seed: u64,
) -> Result<Evaluation> {
    match protocol {
        Protocol::Cars196Zsl => {
            let indices = match split {
                EvalSplit::Test => view.test_indices(),
                EvalSplit::Train => view.indices(Split::Train),
            };
            if indices.len() < 2 {
                return Err(Error::Usage(
                    "the zero-shot protocol needs at least 2 samples in the evaluated split".into(),
                ));
            }
            let samples: Vec<Sample> = indices.iter().map(|&i| view.samples()[i].clone()).collect();
            let emb = embed_f64(model, &samples)?;
            let labels: Vec<u32> = samples.iter().map(|s| s.identity_id).collect();
            let report = evaluate_zsl(&emb, &labels, &ZSL_RECALL_KS, seed)?;
            let points = l2_normalize_all(&emb);
            let dist = distance_matrix(&points, &points);
            let rankings = dist
                .iter()
                .enumerate()
                .map(|(q, row)| {
                    let order: Vec<usize> = rank_row(row).into_iter().filter(|&j| j != q).collect();
                    RankingResult {
                        query_index: indices[q],
                        relevance: order.iter().map(|&j| labels[j] == labels[q]).collect(),
                        distances: order.iter().map(|&j| row[j]).collect(),
                        gallery_order: order.iter().map(|&j| indices[j]).collect(),
                    }
                })
                .collect();
            Ok(Evaluation { report, rankings })
        }
        Protocol::Veri776 => {
            if split == EvalSplit::Train {
                return Err(Error::Usage(
                    "the veri776 protocol evaluates query against gallery; use --split test".into(),
                ));
            }
            let q_idx = view.indices(Split::Query);
            let g_idx = view.indices(Split::Gallery);
            if q_idx.is_empty() || g_idx.is_empty() {
                return Err(Error::Usage(
                    "protocol veri776 needs query and gallery splits, the dataset has none".into(),
                ));
            }
            let all = |idx: &[usize]| -> Vec<&Sample> { idx.iter().map(|&i| &view.samples()[i]).collect() };
            let (qs, gs) = (all(&q_idx), all(&g_idx));
            if qs.iter().chain(&gs).any(|s| s.camera_id.is_none()) {
                return Err(Error::Usage("protocol veri776 needs camera ids on every query and gallery sample".into()));
            }
            let owned = |v: &[&Sample]| -> Vec<Sample> { v.iter().map(|s| (*s).clone()).collect() };
            let q = embed_f64(model, &owned(&qs))?;
            let g = embed_f64(model, &owned(&gs))?;
            let (report, result) = evaluate_reid(&q, &g, &meta(&qs), &meta(&gs), protocol)?;
            let rankings = result
                .rankings
                .into_iter()
                .map(|r| RankingResult {
                    query_index: q_idx[r.query_index],
                    gallery_order: r.gallery_order.iter().map(|&j| g_idx[j]).collect(),
                    ..r
                })
                .collect();
            Ok(Evaluation { report, rankings })
        }
    }
}

/// Flat, schema-stable report JSON. The zero-shot protocol has keys
/// `nmi` and `recall_at.{1,2,4,8}`; the VeRi protocol has `map`,
/// `cmc.{1,5}` and `queries_without_relevant`. Both carry `protocol`.
pub fn report_json(report: &EvaluationReport) -> Value {
    let mut m = Map::new();
    m.insert("protocol".into(), json!(report.protocol.as_str()));
    match report.protocol {
        Protocol::Cars196Zsl => {
            m.insert("nmi".into(), json!(report.nmi));
            for k in ZSL_RECALL_KS {
                m.insert(format!("recall_at.{k}"), json!(report.recall_at.get(&k)));
            }
        }
        Protocol::Veri776 => {
            m.insert("map".into(), json!(report.map));
            for k in VERI_CMC_KS {
                let v = if report.cmc.is_empty() { 0.0 } else { report.cmc[(k - 1).min(report.cmc.len() - 1)] };
                m.insert(format!("cmc.{k}"), json!(v));
            }
            m.insert("queries_without_relevant".into(), json!(report.queries_without_relevant));
        }
    }
    Value::Object(m)
}

pub fn write_json(value: &Value, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    crate::error::format_error(path, e.to_string())
}

/// `query_id,rank,gallery_id,distance,relevant`, keeping the first `top`
/// entries of each ranking (all when `top` is `None`).
pub fn write_rankings_csv(rankings: &[RankingResult], top: Option<usize>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["query_id", "rank", "gallery_id", "distance", "relevant"]).map_err(|e| csv_error(path, e))?;
    for r in rankings {
        let n = top.unwrap_or(usize::MAX).min(r.gallery_order.len());
        for i in 0..n {
            w.write_record([
                r.query_index.to_string(),
                (i + 1).to_string(),
                r.gallery_order[i].to_string(),
                format!("{:?}", r.distances[i]),
                r.relevance[i].to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().at(path)
}

/// `step,loss,lr` with round-trip float formatting, so identical runs give
/// byte-identical files.
pub fn write_loss_csv(history: &[LossPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["step", "loss", "lr"]).map_err(|e| csv_error(path, e))?;
    for p in history {
        w.write_record([p.step.to_string(), format!("{:?}", p.loss), format!("{:?}", p.lr)])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().at(path)
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let bad =
            || crate::error::format_error(path, format!("bad loss row `{}`", rec.iter().collect::<Vec<_>>().join(",")));
        out.push(LossPoint {
            step: field(0).parse().map_err(|_| bad())?,
            loss: field(1).parse().map_err(|_| bad())?,
            lr: field(2).parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

pub fn train_state_json(state: &TrainState) -> Value {
    json!({
        "epoch": state.epoch,
        "step": state.step,
        "current_lr": state.current_lr,
        "best_metric": state.best_metric,
        "checkpoint_refs": state.checkpoint_refs,
        "final_loss": state.loss_history.last().map(|p| p.loss),
    })
}

pub const RUN_MANIFEST_FILE: &str = "manifest.json";

/// The last file a command writes. Its presence means the command
/// succeeded; every other file the command produced is listed in it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: Option<String>,
    pub dataset_fingerprint: Option<String>,
    pub artifact_paths: Vec<PathBuf>,
    pub metrics: Option<Value>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            config_hash: None,
            dataset_fingerprint: None,
            artifact_paths: Vec::new(),
            metrics: None,
        }
    }

    pub fn add(&mut self, path: impl Into<PathBuf>) {
        let path = path.into();
        if !self.artifact_paths.contains(&path) {
            self.artifact_paths.push(path);
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "command": self.command,
            "config_hash": self.config_hash,
            "dataset_fingerprint": self.dataset_fingerprint,
            "artifact_paths": self.artifact_paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "metrics": self.metrics,
        })
    }

    /// Removes a manifest left by an earlier run, so a failed run cannot be
    /// mistaken for a successful one.
    pub fn clear(dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST_FILE);
        match fs::remove_file(&path) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e).at(&path),
            _ => Ok(()),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for p in &self.artifact_paths {
            if !p.exists() {
                return Err(crate::error::format_error(p, "listed artifact is missing"));
            }
        }
        let path = dir.join(RUN_MANIFEST_FILE);
        write_json(&self.to_json(), &path)?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Value> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        serde_json::from_str(&text).map_err(|e| crate::error::format_error(&path, e.to_string()))
    }
}
