use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::merger::{MergeSettings, MergeTree, NodeId, RoundLog, StopReason};

use super::outputs::EntityInfo;
use super::stamp::file_sha256;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub config_digest: String,
    pub artifacts: Vec<Artifact>,
    pub entities: Vec<EntityInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNodeView {
    pub node_id: NodeId,
    pub label: String,
    pub explanation: String,
    pub count: u64,
    pub locked: bool,
    pub children: Vec<NodeId>,
    pub round_index: usize,
}

/// A merge tree with embeddings stripped, for display.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeView {
    pub setting: String,
    pub settings: MergeSettings,
    pub stop_reason: Option<StopReason>,
    pub rounds: usize,
    pub roots: Vec<NodeId>,
    pub nodes: Vec<TreeNodeView>,
    pub round_logs: Vec<RoundLog>,
}

impl TreeView {
    pub fn new(setting: &str, settings: MergeSettings, tree: &MergeTree) -> Self {
        Self {
            setting: setting.to_string(),
            settings,
            stop_reason: tree.stop_reason,
            rounds: tree.rounds(),
            roots: tree.roots.clone(),
            nodes: tree
                .nodes
                .values()
                .map(|n| TreeNodeView {
                    node_id: n.node_id,
                    label: n.topic.label.clone(),
                    explanation: n.topic.explanation.clone(),
                    count: n.topic.count,
                    locked: n.topic.locked,
                    children: n.children.clone(),
                    round_index: n.round_index,
                })
                .collect(),
            round_logs: tree.round_logs.clone(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported bundle schema version {0}")]
    Schema(u32),
    #[error("artifact {name}: expected sha256 {expected}, found {found}")]
    HashMismatch { name: String, expected: String, found: String },
    #[error("artifact {name}: expected {expected} bytes, found {found}")]
    SizeMismatch { name: String, expected: u64, found: u64 },
}

/// Writes `files` (name, bytes) into `dir` and a manifest describing them.
pub fn write_bundle(
    dir: &Path,
    run_id: &str,
    config_digest: &str,
    entities: Vec<EntityInfo>,
    files: &[(String, Vec<u8>)],
) -> Result<BundleManifest, BundleError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| BundleError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut artifacts = Vec::new();
    for (name, bytes) in files {
        let p = dir.join(name);
        crate::io::write_atomic(&p, bytes).map_err(io(&p))?;
        artifacts.push(Artifact {
            name: name.clone(),
            sha256: crate::io::sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = BundleManifest {
        schema_version: SCHEMA_VERSION,
        run_id: run_id.to_string(),
        config_digest: config_digest.to_string(),
        artifacts,
        entities,
    };
    let p = dir.join(MANIFEST);
    crate::io::write_json_atomic(&p, &manifest).map_err(io(&p))?;
    Ok(manifest)
}

/// Reads a bundle manifest and checks every artifact against it.
pub fn load_bundle(dir: &Path) -> Result<BundleManifest, BundleError> {
    let p = dir.join(MANIFEST);
    let manifest: BundleManifest = crate::io::read_json(&p).map_err(|source| BundleError::Io { path: p, source })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(BundleError::Schema(manifest.schema_version));
    }
    for a in &manifest.artifacts {
        let path = dir.join(&a.name);
        let bytes = fs::metadata(&path)
            .map_err(|source| BundleError::Io { path: path.clone(), source })?
            .len();
        if bytes != a.bytes {
            return Err(BundleError::SizeMismatch {
                name: a.name.clone(),
                expected: a.bytes,
                found: bytes,
            });
        }
        let found = file_sha256(&path).map_err(|source| BundleError::Io { path, source })?;
        if found != a.sha256 {
            return Err(BundleError::HashMismatch {
                name: a.name.clone(),
                expected: a.sha256.clone(),
                found,
            });
        }
    }
    Ok(manifest)
}
