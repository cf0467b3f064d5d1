//! Iterative embedding-guided topic merging with full merge-tree provenance.
//!
//! The tree's roots are always the current topic set. Leaves are the initial
//! (collapsed) topics. A merge of an anchor with one or more candidates adds a
//! node whose children are the merged roots; an anchor that stays unmerged is
//! carried into the next round by reference and keeps its node id. When the
//! end-of-round dedup finds roots with the same normalized (label,
//! explanation), a node whose children are the colliding roots replaces them.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::embedding::dot;
use crate::gateway::parse::{parse_merge_decision, MergeDecision};
use crate::gateway::{Gateway, GatewayError, PromptDefaults, TemplateId};
use crate::miner::{collapse_duplicates, repair_topic_label, weighted_centroid, TopicEntry};

pub type NodeId = u64;

pub const DEFAULT_BATCH_SIZE: usize = 10;
pub const DEFAULT_THETA_MEAN: f64 = 0.3;
pub const DEFAULT_THETA_MAX: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("persisting merge checkpoint: {0}")]
    Checkpoint(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeNode {
    pub node_id: NodeId,
    pub topic: TopicEntry,
    #[serde(default)]
    pub children: Vec<NodeId>,
    pub round_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadStats {
    pub mean_pairwise_sim: f64,
    pub max_pairwise_sim: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub anchor: NodeId,
    pub merged: Vec<NodeId>,
    pub parent: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub topics_in: usize,
    pub topics_out: usize,
    pub k: usize,
    pub merges: Vec<MergeRecord>,
    pub self_links: Vec<NodeId>,
    /// Nodes created by the end-of-round dedup.
    pub dedup: Vec<MergeRecord>,
    pub judge_failures: usize,
    pub discarded_ids: usize,
    pub any_merge: bool,
    pub spread: Option<SpreadStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TooFewTopics,
    Inactivity,
    MeanSpread,
    MaxSpread,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeTree {
    pub nodes: BTreeMap<NodeId, MergeNode>,
    pub roots: Vec<NodeId>,
    pub round_logs: Vec<RoundLog>,
    pub next_id: NodeId,
    pub stop_reason: Option<StopReason>,
}

impl MergeTree {
    /// Collapses exact duplicates and makes every surviving topic a leaf root.
    pub fn from_topics(topics: Vec<TopicEntry>) -> Self {
        let mut tree = MergeTree::default();
        for topic in collapse_duplicates(topics) {
            let id = tree.add_node(topic, Vec::new(), 0);
            tree.roots.push(id);
        }
        tree
    }

    fn add_node(&mut self, topic: TopicEntry, children: Vec<NodeId>, round_index: usize) -> NodeId {
        let node_id = self.next_id;
        self.next_id += 1;
        self.nodes.insert(
            node_id,
            MergeNode {
                node_id,
                topic,
                children,
                round_index,
            },
        );
        node_id
    }

    pub fn topic(&self, id: NodeId) -> &TopicEntry {
        &self.nodes[&id].topic
    }

    /// The current topic set, in root order.
    pub fn topics(&self) -> Vec<TopicEntry> {
        self.roots.iter().map(|id| self.topic(*id).clone()).collect()
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.children.is_empty()).map(|n| n.node_id).collect()
    }

    pub fn rounds(&self) -> usize {
        self.round_logs.len()
    }

    pub fn is_converged(&self) -> bool {
        self.stop_reason.is_some()
    }

    /// Pins every root whose label matches, protecting it from merging.
    pub fn lock_label(&mut self, label: &str) -> usize {
        let mut n = 0;
        for id in &self.roots {
            let node = self.nodes.get_mut(id).expect("root exists");
            if node.topic.label == label {
                node.topic.locked = true;
                n += 1;
            }
        }
        n
    }

    /// Map from node to its parent.
    pub fn parents(&self) -> HashMap<NodeId, NodeId> {
        let mut out = HashMap::new();
        for node in self.nodes.values() {
            for c in &node.children {
                out.insert(*c, node.node_id);
            }
        }
        out
    }

    /// Leaf ids below `id` (the node itself if it is a leaf).
    pub fn leaves_under(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[&n];
            if node.children.is_empty() {
                out.push(n);
            } else {
                stack.extend(node.children.iter().rev());
            }
        }
        out
    }

    /// Checks structural invariants, returning a description of the first
    /// problem found.
    pub fn validate(&self) -> Result<(), String> {
        let mut parent_count: HashMap<NodeId, usize> = HashMap::new();
        for node in self.nodes.values() {
            if !node.children.is_empty() {
                let sum: u64 = node
                    .children
                    .iter()
                    .map(|c| self.nodes.get(c).map(|n| n.topic.count).ok_or(format!("dangling child {c}")))
                    .sum::<Result<u64, String>>()?;
                if sum != node.topic.count {
                    return Err(format!("node {} count {} != children sum {sum}", node.node_id, node.topic.count));
                }
            }
            for c in &node.children {
                if *c >= node.node_id {
                    return Err(format!("child {c} not older than parent {}", node.node_id));
                }
                *parent_count.entry(*c).or_default() += 1;
            }
        }
        let roots: std::collections::HashSet<_> = self.roots.iter().copied().collect();
        if roots.len() != self.roots.len() {
            return Err("duplicate root".into());
        }
        for id in self.nodes.keys() {
            let parents = parent_count.get(id).copied().unwrap_or(0);
            match (roots.contains(id), parents) {
                (true, 0) | (false, 1) => {}
                (true, _) => return Err(format!("root {id} has a parent")),
                (false, p) => return Err(format!("node {id} has {p} parents")),
            }
        }
        let leaf_total: u64 = self.leaves().iter().map(|id| self.topic(*id).count).sum();
        let root_total: u64 = self.roots.iter().map(|id| self.topic(*id).count).sum();
        if leaf_total != root_total {
            return Err(format!("root counts {root_total} != leaf counts {leaf_total}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeSettings {
    pub batch_size: usize,
    pub theta_mean: f64,
    pub theta_max: f64,
    pub defaults: PromptDefaults,
}

impl Default for MergeSettings {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            theta_mean: DEFAULT_THETA_MEAN,
            theta_max: DEFAULT_THETA_MAX,
            defaults: PromptDefaults::default(),
        }
    }
}

/// Number of candidates retrieved per anchor for a topic list of `list_size`.
pub fn candidate_k(list_size: usize, batch_size: usize) -> usize {
    batch_size.min((list_size / 10).max(1))
}

fn rank_order(anchor: &TopicEntry, a: (usize, &TopicEntry), b: (usize, &TopicEntry)) -> Ordering {
    let sa = anchor.embedding.cosine(&a.1.embedding);
    let sb = anchor.embedding.cosine(&b.1.embedding);
    sb.total_cmp(&sa)
        .then(b.1.count.cmp(&a.1.count))
        .then_with(|| a.1.label.cmp(&b.1.label))
        .then(a.0.cmp(&b.0))
}

/// Indices into `pool` of the `k` topics most similar to `anchor`.
pub fn top_k_indices(anchor: &TopicEntry, pool: &[&TopicEntry], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let cmp = |a: &usize, b: &usize| rank_order(anchor, (*a, pool[*a]), (*b, pool[*b]));
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.truncate(k);
    idx
}

/// Top-k candidates for `anchor`, with k derived from the current topic list size.
pub fn select_candidates(anchor: &TopicEntry, pool: &[TopicEntry], list_size: usize, batch_size: usize) -> Vec<TopicEntry> {
    let refs: Vec<&TopicEntry> = pool.iter().collect();
    top_k_indices(anchor, &refs, candidate_k(list_size, batch_size))
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

/// Decides which candidates merge into an anchor.
pub trait MergeJudge: Sync {
    /// `Ok(None)` means the judge answered but its output stayed unusable.
    fn decide(&self, anchor: &TopicEntry, candidates: &[&TopicEntry]) -> Result<Option<MergeDecision>, GatewayError>;
}

/// Judge backed by the topic-merging prompt.
pub struct GatewayJudge<'a> {
    pub gateway: &'a Gateway,
    pub defaults: PromptDefaults,
}

impl GatewayJudge<'_> {
    pub fn topics_json(anchor: &TopicEntry, candidates: &[&TopicEntry]) -> String {
        let items: Vec<_> = std::iter::once(anchor)
            .chain(candidates.iter().copied())
            .enumerate()
            .map(|(i, t)| json!({"id": (i + 1).to_string(), "topic": t.label, "explanation": t.explanation}))
            .collect();
        serde_json::to_string_pretty(&items).expect("topics serialize")
    }
}

impl MergeJudge for GatewayJudge<'_> {
    fn decide(&self, anchor: &TopicEntry, candidates: &[&TopicEntry]) -> Result<Option<MergeDecision>, GatewayError> {
        let req = self
            .gateway
            .request(TemplateId::TopicMerging)
            .var("topics_json", Self::topics_json(anchor, candidates))
            .with_defaults(&self.defaults);
        match self.gateway.complete_parsed(&req, parse_merge_decision) {
            Ok(d) => Ok(Some(d)),
            Err(GatewayError::Parse(e)) => {
                log::warn!("merge judge output unusable for {:?}: {e}", anchor.label);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

/// Judge defined by a closure; convenient for rule-based and test judges.
pub struct FnJudge<F>(pub F);

impl<F> MergeJudge for FnJudge<F>
where
    F: Fn(&TopicEntry, &[&TopicEntry]) -> Option<MergeDecision> + Sync,
{
    fn decide(&self, anchor: &TopicEntry, candidates: &[&TopicEntry]) -> Result<Option<MergeDecision>, GatewayError> {
        Ok((self.0)(anchor, candidates))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Proposal {
    /// Positions in the candidate list.
    pub merged: Vec<usize>,
    pub label: String,
    pub explanation: String,
    pub discarded_ids: usize,
    pub judge_failed: bool,
}

pub fn propose_merge(
    judge: &dyn MergeJudge,
    anchor: &TopicEntry,
    candidates: &[&TopicEntry],
    defaults: &PromptDefaults,
) -> Result<Proposal, GatewayError> {
    let unchanged = |discarded_ids, judge_failed| Proposal {
        merged: Vec::new(),
        label: anchor.label.clone(),
        explanation: anchor.explanation.clone(),
        discarded_ids,
        judge_failed,
    };
    if candidates.is_empty() {
        return Ok(unchanged(0, false));
    }
    let Some(decision) = judge.decide(anchor, candidates)? else {
        return Ok(unchanged(0, true));
    };
    let mut merged = Vec::new();
    let mut discarded = 0;
    for id in &decision.merged_ids {
        match id.trim().parse::<usize>() {
            Ok(i) if (2..=candidates.len() + 1).contains(&i) => {
                if !merged.contains(&(i - 2)) {
                    merged.push(i - 2);
                }
            }
            _ => {
                log::warn!("merge judge returned id {id:?} outside the offered candidates; ignoring it");
                discarded += 1;
            }
        }
    }
    if merged.is_empty() {
        return Ok(unchanged(discarded, false));
    }
    match repair_topic_label(&decision.parent_topic, &decision.parent_explanation, defaults) {
        Ok((label, explanation)) => Ok(Proposal {
            merged,
            label,
            explanation,
            discarded_ids: discarded,
            judge_failed: false,
        }),
        Err(v) => {
            log::warn!("parent label {:?} rejected ({v:?}); keeping the anchor's label", decision.parent_topic);
            Ok(Proposal {
                merged,
                label: anchor.label.clone(),
                explanation: anchor.explanation.clone(),
                discarded_ids: discarded,
                judge_failed: false,
            })
        }
    }
}

/// Builds the parent of `members` (anchor first). A single member is returned unchanged.
pub fn apply_merge(members: &[&TopicEntry], label: &str, explanation: &str) -> TopicEntry {
    assert!(!members.is_empty(), "apply_merge needs at least the anchor");
    if members.len() == 1 {
        return members[0].clone();
    }
    TopicEntry {
        label: label.to_string(),
        explanation: explanation.to_string(),
        count: members.iter().map(|t| t.count).sum(),
        embedding: weighted_centroid(members.iter().map(|t| (t.count, &t.embedding)), &members[0].embedding),
        locked: false,
    }
}

/// Exact mean and max cosine over all unordered pairs; `None` below two topics.
pub fn spread_stats(topics: &[TopicEntry]) -> Option<SpreadStats> {
    let n = topics.len();
    if n < 2 {
        return None;
    }
    let rows: Vec<(f64, f64)> = (0..n - 1)
        .into_par_iter()
        .map(|i| {
            let vi = topics[i].embedding.as_slice();
            let mut sum = 0.0;
            let mut max = f64::NEG_INFINITY;
            for t in &topics[i + 1..] {
                let s = dot(vi, t.embedding.as_slice());
                sum += s;
                max = max.max(s);
            }
            (sum, max)
        })
        .collect();
    let pairs = (n * (n - 1) / 2) as f64;
    let sum: f64 = rows.iter().map(|r| r.0).sum();
    let max = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    Some(SpreadStats {
        mean_pairwise_sim: (sum / pairs).clamp(-1.0, 1.0),
        max_pairwise_sim: max.clamp(-1.0, 1.0),
    })
}

fn sort_for_round(tree: &MergeTree) -> Vec<NodeId> {
    let mut ids = tree.roots.clone();
    ids.sort_by(|a, b| {
        let (ta, tb) = (tree.topic(*a), tree.topic(*b));
        tb.count
            .cmp(&ta.count)
            .then_with(|| ta.label.cmp(&tb.label))
            .then_with(|| ta.explanation.cmp(&tb.explanation))
            .then(a.cmp(b))
    });
    ids
}

/// One pass over the current roots. On error the tree is left untouched.
pub fn run_merge_round(
    tree: &mut MergeTree,
    judge: &dyn MergeJudge,
    settings: &MergeSettings,
) -> Result<RoundLog, GatewayError> {
    let round = tree.round_logs.len() + 1;
    let order = sort_for_round(tree);
    let list_size = order.len();
    let k = candidate_k(list_size, settings.batch_size);
    let mut staged = tree.clone();
    let mut merged = vec![false; order.len()];
    let mut new_roots: Vec<NodeId> = Vec::new();
    let mut log = RoundLog {
        round,
        topics_in: list_size,
        topics_out: 0,
        k,
        merges: Vec::new(),
        self_links: Vec::new(),
        dedup: Vec::new(),
        judge_failures: 0,
        discarded_ids: 0,
        any_merge: false,
        spread: None,
    };

    for pos in 0..order.len() {
        if merged[pos] {
            continue;
        }
        let anchor_id = order[pos];
        let anchor = tree.topic(anchor_id);
        merged[pos] = true;
        if anchor.locked {
            new_roots.push(anchor_id);
            log.self_links.push(anchor_id);
            continue;
        }
        let pool: Vec<usize> = (0..order.len())
            .filter(|&j| !merged[j] && !tree.topic(order[j]).locked)
            .collect();
        if pool.is_empty() {
            new_roots.push(anchor_id);
            log.self_links.push(anchor_id);
            continue;
        }
        let pool_topics: Vec<&TopicEntry> = pool.iter().map(|&j| tree.topic(order[j])).collect();
        let chosen = top_k_indices(anchor, &pool_topics, k);
        let candidates: Vec<&TopicEntry> = chosen.iter().map(|&c| pool_topics[c]).collect();
        let proposal = propose_merge(judge, anchor, &candidates, &settings.defaults)?;
        log.discarded_ids += proposal.discarded_ids;
        log.judge_failures += usize::from(proposal.judge_failed);
        if proposal.merged.is_empty() {
            new_roots.push(anchor_id);
            log.self_links.push(anchor_id);
            continue;
        }
        let mut members = vec![anchor];
        let mut member_ids = Vec::new();
        for &c in &proposal.merged {
            let j = pool[chosen[c]];
            merged[j] = true;
            members.push(tree.topic(order[j]));
            member_ids.push(order[j]);
        }
        let parent = apply_merge(&members, &proposal.label, &proposal.explanation);
        let children: Vec<NodeId> = std::iter::once(anchor_id).chain(member_ids.iter().copied()).collect();
        let parent_id = staged.add_node(parent, children, round);
        new_roots.push(parent_id);
        log.any_merge = true;
        log.merges.push(MergeRecord {
            anchor: anchor_id,
            merged: member_ids,
            parent: parent_id,
        });
    }

    // end-of-round dedup over the new roots, keeping first-occurrence order
    let mut groups: Vec<Vec<NodeId>> = Vec::new();
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    for id in new_roots {
        let key = staged.topic(id).dedup_key();
        match index.get(&key) {
            Some(&g) => groups[g].push(id),
            None => {
                index.insert(key, groups.len());
                groups.push(vec![id]);
            }
        }
    }
    let mut roots = Vec::with_capacity(groups.len());
    for group in groups {
        if group.len() == 1 {
            roots.push(group[0]);
            continue;
        }
        let entries: Vec<TopicEntry> = group.iter().map(|id| staged.topic(*id).clone()).collect();
        let collapsed = collapse_duplicates(entries).pop().expect("one group collapses to one entry");
        let id = staged.add_node(collapsed, group.clone(), round);
        log.dedup.push(MergeRecord {
            anchor: group[0],
            merged: group[1..].to_vec(),
            parent: id,
        });
        roots.push(id);
    }
    staged.roots = roots;
    log.topics_out = staged.roots.len();
    log.spread = spread_stats(&staged.topics());
    staged.round_logs.push(log.clone());
    *tree = staged;
    Ok(log)
}

fn stop_reason(log: &RoundLog, settings: &MergeSettings) -> Option<StopReason> {
    if !log.any_merge {
        return Some(StopReason::Inactivity);
    }
    match log.spread {
        None => Some(StopReason::TooFewTopics),
        Some(s) if s.mean_pairwise_sim < settings.theta_mean => Some(StopReason::MeanSpread),
        Some(s) if s.max_pairwise_sim < settings.theta_max => Some(StopReason::MaxSpread),
        Some(_) => None,
    }
}

/// Runs rounds until a stopping rule fires. `after_round` sees the tree after
/// every completed round (for checkpointing); a tree that already has rounds
/// continues from where it stopped.
pub fn merge_until_converged(
    mut tree: MergeTree,
    judge: &dyn MergeJudge,
    settings: &MergeSettings,
    mut after_round: impl FnMut(&MergeTree) -> std::io::Result<()>,
) -> Result<MergeTree, MergeError> {
    if tree.stop_reason.is_none() && tree.round_logs.is_empty() && tree.roots.len() < 2 {
        tree.stop_reason = Some(StopReason::TooFewTopics);
        after_round(&tree)?;
    }
    while tree.stop_reason.is_none() {
        let log = run_merge_round(&mut tree, judge, settings)?;
        tree.stop_reason = stop_reason(&log, settings);
        log::info!(
            "merge round {}: {} -> {} topics, {} merges{}",
            log.round,
            log.topics_in,
            log.topics_out,
            log.merges.len(),
            tree.stop_reason.map(|r| format!(", stop: {r:?}")).unwrap_or_default()
        );
        after_round(&tree)?;
    }
    Ok(tree)
}

/// Convenience wrapper: collapse, merge to convergence, return final topics and tree.
pub fn merge_topics(
    topics: Vec<TopicEntry>,
    judge: &dyn MergeJudge,
    settings: &MergeSettings,
) -> Result<(Vec<TopicEntry>, MergeTree), MergeError> {
    let tree = merge_until_converged(MergeTree::from_topics(topics), judge, settings, |_| Ok(()))?;
    Ok((tree.topics(), tree))
}
