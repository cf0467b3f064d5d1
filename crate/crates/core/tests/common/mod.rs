#![allow(dead_code)]

pub mod published;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use corpusalign::embedding::EmbeddingVector;
use corpusalign::gateway::parse::MergeDecision;
use corpusalign::merger::{FnJudge, MergeJudge};
use corpusalign::miner::TopicEntry;
use corpusalign::pipeline::{Pipeline, RunOptions, StageReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

pub fn golden_config() -> PathBuf {
    golden_dir().join("config.json")
}

pub fn golden_bundle() -> PathBuf {
    golden_dir().join("bundle")
}

pub fn options(workdir: &Path) -> RunOptions {
    RunOptions {
        workdir: Some(workdir.to_path_buf()),
        ..Default::default()
    }
}

/// Runs every stage of the golden config in `workdir`.
pub fn run_golden(workdir: &Path) -> (Pipeline, Vec<StageReport>) {
    let p = Pipeline::from_file(&golden_config(), options(workdir)).expect("golden config loads");
    let reports = p.run(&p.all_stages()).expect("golden run succeeds");
    (p, reports)
}

/// Files of a directory tree as (relative name, bytes), sorted by name.
pub fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let name = p.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
                out.push((name, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub const CLUSTERS: usize = 6;

/// Labels look like "Climate Change: Cluster 3 Item 17"; the cluster number
/// is what the rule judge merges on. Embeddings sit near a per-cluster axis.
pub fn random_pool(rng: &mut ChaCha8Rng, size: usize) -> Vec<TopicEntry> {
    let dim = CLUSTERS + 2;
    (0..size)
        .map(|i| {
            let c = rng.random_range(0..CLUSTERS);
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect();
            v[c] += 1.0;
            TopicEntry::new(
                &format!("Climate Change: Cluster {c} Item {i}"),
                &format!("Topic {i} of cluster {c}"),
                rng.random_range(1..=20),
                EmbeddingVector::new(v).unwrap(),
            )
        })
        .collect()
}

pub fn cluster_of(label: &str) -> Option<&str> {
    label.split_whitespace().nth(3)
}

/// Merges every candidate from the anchor's cluster; the parent takes a
/// cluster-level label so repeated merges collapse each cluster.
pub fn rule_judge() -> impl MergeJudge {
    FnJudge(|anchor: &TopicEntry, cands: &[&TopicEntry]| {
        let c = cluster_of(&anchor.label)?.to_string();
        let ids: Vec<String> = cands
            .iter()
            .enumerate()
            .filter(|(_, t)| cluster_of(&t.label) == Some(c.as_str()))
            .map(|(i, _)| (i + 2).to_string())
            .collect();
        Some(MergeDecision {
            merged_ids: ids,
            parent_topic: format!("Climate Change: Cluster {c} Merged"),
            parent_explanation: format!("Everything in cluster {c}"),
        })
    })
}

pub fn set(xs: &[&str]) -> BTreeSet<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// All subsets of `universe`.
pub fn power_set(universe: &[&str]) -> Vec<BTreeSet<String>> {
    (0..1u32 << universe.len())
        .map(|mask| {
            universe
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, s)| s.to_string())
                .collect()
        })
        .collect()
}

pub fn oracle_jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let mut inter = 0;
    let mut union: Vec<&String> = Vec::new();
    for x in a {
        if b.contains(x) {
            inter += 1;
        }
        union.push(x);
    }
    for x in b {
        if !a.contains(x) {
            union.push(x);
        }
    }
    if union.is_empty() {
        1.0
    } else {
        inter as f64 / union.len() as f64
    }
}

/// Micro-F1 with B as gold, from precision and recall rather than counts.
pub fn oracle_micro_f1(pairs: &[(BTreeSet<String>, BTreeSet<String>)]) -> f64 {
    let predicted: usize = pairs.iter().map(|(a, _)| a.len()).sum();
    let gold: usize = pairs.iter().map(|(_, b)| b.len()).sum();
    let hits: usize = pairs.iter().map(|(a, b)| a.intersection(b).count()).sum();
    if predicted == 0 && gold == 0 {
        return 1.0;
    }
    if hits == 0 {
        return 0.0;
    }
    let p = hits as f64 / predicted as f64;
    let r = hits as f64 / gold as f64;
    2.0 * p * r / (p + r)
}

/// Cohen's kappa over binary decisions, computed from proportions.
pub fn oracle_kappa(pairs: &[(BTreeSet<String>, BTreeSet<String>)], universe: &[&str]) -> f64 {
    let mut decisions = Vec::new();
    for (a, b) in pairs {
        for l in universe {
            decisions.push((a.contains(*l), b.contains(*l)));
        }
    }
    let n = decisions.len() as f64;
    let po = decisions.iter().filter(|(x, y)| x == y).count() as f64 / n;
    let pa = decisions.iter().filter(|(x, _)| *x).count() as f64 / n;
    let pb = decisions.iter().filter(|(_, y)| *y).count() as f64 / n;
    let pe = pa * pb + (1.0 - pa) * (1.0 - pb);
    if (1.0 - pe).abs() < 1e-15 {
        return if po == 1.0 { 1.0 } else { 0.0 };
    }
    (po - pe) / (1.0 - pe)
}

pub fn random_set(rng: &mut ChaCha8Rng, universe: &[&str]) -> BTreeSet<String> {
    universe
        .iter()
        .filter(|_| rng.random_bool(0.4))
        .map(|s| s.to_string())
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
