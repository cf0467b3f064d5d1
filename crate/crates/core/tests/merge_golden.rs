use corpusalign::embedding::EmbeddingVector;
use corpusalign::gateway::parse::MergeDecision;
use corpusalign::merger::{merge_topics, FnJudge, MergeRecord, MergeSettings, MergeTree, StopReason, merge_until_converged};
use corpusalign::miner::TopicEntry;

fn topic(domain: &str, count: u64, v: [f64; 3]) -> TopicEntry {
    TopicEntry::new(
        &format!("Climate Change: {domain}"),
        domain,
        count,
        EmbeddingVector::new(v.to_vec()).unwrap(),
    )
}

fn pool() -> Vec<TopicEntry> {
    vec![
        topic("Heat Waves", 5, [1.0, 0.0, 0.0]),
        topic("Extreme Heat", 3, [0.9, 0.1, 0.0]),
        topic("Sea Level Rise", 4, [0.0, 1.0, 0.0]),
        topic("Coastal Flooding", 2, [0.1, 0.9, 0.0]),
        topic("Carbon Tax", 1, [0.0, 0.0, 1.0]),
        topic("Emission Trading", 1, [0.0, 0.1, 0.9]),
    ]
}

fn group(label: &str) -> &'static str {
    match label.trim_start_matches("Climate Change: ") {
        "Heat Waves" | "Extreme Heat" => "Heat",
        "Sea Level Rise" | "Coastal Flooding" => "Coasts",
        _ => "Policy",
    }
}

fn judge() -> FnJudge<impl Fn(&TopicEntry, &[&TopicEntry]) -> Option<MergeDecision> + Sync> {
    FnJudge(|a: &TopicEntry, c: &[&TopicEntry]| {
        let g = group(&a.label);
        Some(MergeDecision {
            merged_ids: c
                .iter()
                .enumerate()
                .filter(|(_, t)| group(&t.label) == g)
                .map(|(i, _)| (i + 2).to_string())
                .collect(),
            parent_topic: format!("Climate Change: {g}"),
            parent_explanation: format!("{g} topics"),
        })
    })
}

fn centroid(items: &[(u64, [f64; 3])]) -> Vec<f64> {
    let unit = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let mut acc = [0.0; 3];
    for (c, v) in items {
        let u = unit(*v);
        for i in 0..3 {
            acc[i] += *c as f64 * u[i];
        }
    }
    unit(acc).to_vec()
}

#[test]
fn six_topics_collapse_into_three_in_one_round() {
    let (topics, tree) = merge_topics(pool(), &judge(), &MergeSettings::default()).unwrap();
    // six topics give k = 1: each anchor sees only its nearest unmerged neighbour
    let log = &tree.round_logs[0];
    assert_eq!(tree.rounds(), 1);
    assert_eq!(log.k, 1);
    assert_eq!((log.topics_in, log.topics_out), (6, 3));
    assert_eq!(
        log.merges,
        [
            MergeRecord { anchor: 0, merged: vec![1], parent: 6 },
            MergeRecord { anchor: 2, merged: vec![3], parent: 7 },
            MergeRecord { anchor: 4, merged: vec![5], parent: 8 },
        ]
    );
    assert_eq!(tree.roots, [6, 7, 8]);
    let summary: Vec<(&str, u64)> = topics.iter().map(|t| (t.label.as_str(), t.count)).collect();
    assert_eq!(
        summary,
        [("Climate Change: Heat", 8), ("Climate Change: Coasts", 6), ("Climate Change: Policy", 2)]
    );
    let expected = [
        centroid(&[(5, [1.0, 0.0, 0.0]), (3, [0.9, 0.1, 0.0])]),
        centroid(&[(4, [0.0, 1.0, 0.0]), (2, [0.1, 0.9, 0.0])]),
        centroid(&[(1, [0.0, 0.0, 1.0]), (1, [0.0, 0.1, 0.9])]),
    ];
    for (t, e) in topics.iter().zip(&expected) {
        for (x, y) in t.embedding.as_slice().iter().zip(e) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let spread = log.spread.unwrap();
    assert!(spread.mean_pairwise_sim < 0.3);
    assert_eq!(tree.stop_reason, Some(StopReason::MeanSpread));
    tree.validate().unwrap();
}

#[test]
fn locked_topic_is_carried_unchanged() {
    let mut tree = MergeTree::from_topics(pool());
    assert_eq!(tree.lock_label("Climate Change: Carbon Tax"), 1);
    let tree = merge_until_converged(tree, &judge(), &MergeSettings::default(), |_| Ok(())).unwrap();
    let log = &tree.round_logs[0];
    assert_eq!(log.topics_out, 4);
    assert!(log.self_links.contains(&4) && log.self_links.contains(&5));
    assert!(tree.roots.contains(&4) && tree.roots.contains(&5));
    assert!(tree.topic(4).locked);
}

#[test]
fn rerun_is_byte_identical() {
    let a = merge_topics(pool(), &judge(), &MergeSettings::default()).unwrap().1;
    let b = merge_topics(pool(), &judge(), &MergeSettings::default()).unwrap().1;
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
}
