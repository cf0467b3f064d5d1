//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p corpusalign --test acceptance -- --nocapture` to see the lines.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use corpusalign::agreement::{
    aggregate_report, bootstrap_ci, cohens_kappa_multilabel, jaccard, mean_jaccard, micro_f1, LabeledInstance,
};
use corpusalign::analysis::{
    cross_distribution, dataset_distribution, group_distribution, rank_weights, rank_weights_exact, similarity_matrix,
    Distribution, Level, WeightScheme,
};
use corpusalign::corpus::SampleRecord;
use corpusalign::embedding::EmbeddingVector;
use corpusalign::merger::{apply_merge, candidate_k, merge_until_converged, MergeSettings, MergeTree};
use corpusalign::miner::TopicEntry;
use corpusalign::taxonomy::{AnnotationRecord, Codebook, Dimension};
use num_rational::Ratio;
use rand::Rng;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(name: &'static str, limit: Option<Duration>, f: impl FnOnce()) -> Outcome {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let (passed, detail) = match result {
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            (false, msg)
        }
        Ok(()) => match limit {
            Some(l) if elapsed > l => (false, format!("took {elapsed:.2?}, limit {l:?}")),
            _ => (true, format!("{elapsed:.2?}")),
        },
    };
    println!("{} {name} ({detail})", if passed { "PASS" } else { "FAIL" });
    Outcome { name, passed, detail }
}

fn ranked_weighting() {
    let r = |n, d| Ratio::new(n, d);
    assert_eq!(rank_weights_exact(1).unwrap(), [r(1, 1)]);
    assert_eq!(rank_weights_exact(2).unwrap(), [r(2, 3), r(1, 3)]);
    assert_eq!(rank_weights_exact(3).unwrap(), [r(1, 2), r(1, 3), r(1, 6)]);
    let expected: [&[f64]; 3] = [&[1.0], &[2.0 / 3.0, 1.0 / 3.0], &[0.5, 1.0 / 3.0, 1.0 / 6.0]];
    for (k, e) in (1..=3).zip(expected) {
        for (x, y) in rank_weights(k).unwrap().iter().zip(e) {
            assert!((x - y).abs() <= 1e-12, "k={k}: {x} vs {y}");
        }
    }
}

fn k_formula() {
    for (size, k) in [(5, 1), (25, 2), (100, 10), (10730, 10)] {
        assert_eq!(candidate_k(size, 10), k, "|T| = {size}");
    }
}

fn merge_engine() {
    let mut r = rng(2024);
    for trial in 0..200 {
        let size = r.random_range(0..=200);
        let seed = r.random::<u64>();
        let run = || {
            let pool = random_pool(&mut rng(seed), size);
            let leaf_count: u64 = pool.iter().map(|t| t.count).sum();
            let tree = MergeTree::from_topics(pool);
            let initial = tree.roots.len();
            let tree = merge_until_converged(tree, &rule_judge(), &MergeSettings::default(), |t| {
                let roots: u64 = t.roots.iter().map(|id| t.topic(*id).count).sum();
                assert_eq!(roots, leaf_count, "trial {trial}: counts not conserved");
                t.validate().map_err(std::io::Error::other)
            })
            .unwrap();
            assert!(tree.rounds() <= initial.max(1), "trial {trial}: {} rounds for {initial} topics", tree.rounds());
            assert_eq!(tree.leaves().len(), initial);
            serde_json::to_vec(&tree).unwrap()
        };
        assert!(run() == run(), "trial {trial}: rerun differs");
    }
}

fn centroid_math() {
    let a = TopicEntry::new("Climate Change: A", "a", 3, EmbeddingVector::new(vec![1.0, 0.0]).unwrap());
    let b = TopicEntry::new("Climate Change: B", "b", 1, EmbeddingVector::new(vec![0.0, 1.0]).unwrap());
    let merged = apply_merge(&[&a, &b], "Climate Change: AB", "ab");
    let norm = (3.0f64 * 3.0 + 1.0).sqrt();
    let oracle = [3.0 / norm, 1.0 / norm];
    for ((x, y), reference) in merged.embedding.as_slice().iter().zip(oracle).zip([0.94868, 0.31623]) {
        assert!((x - y).abs() <= 1e-12);
        assert!((x - reference).abs() <= 1e-5, "{x} vs {reference}");
    }
    assert_eq!(merged.count, 4);
}

fn random_samples(r: &mut rand_chacha::ChaCha8Rng, dataset: &str, n: usize) -> Vec<SampleRecord> {
    let topics = Codebook::builtin(Dimension::Topic).vector_codes(true);
    let intents = Codebook::builtin(Dimension::Intent).vector_codes(true);
    let forms = Codebook::builtin(Dimension::Form).vector_codes(true);
    let mut pick = |codes: &[String]| {
        let k = r.random_range(1..=3);
        let mut out: Vec<String> = Vec::new();
        while out.len() < k {
            let c = codes[r.random_range(0..codes.len())].clone();
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    };
    (0..n)
        .map(|i| {
            let mut s = SampleRecord::new(dataset, &format!("{dataset} {i}")).unwrap();
            s.annotations = Some(AnnotationRecord {
                topics: Some(pick(&topics)),
                intents: Some(pick(&intents)),
                forms: Some(pick(&forms)),
                ..Default::default()
            });
            s
        })
        .collect()
}

fn distribution_suite() {
    let mut r = rng(99);
    let datasets: Vec<Vec<SampleRecord>> = (0..5).map(|i| random_samples(&mut r, &format!("d{i}"), 40 + 20 * i)).collect();
    let schemes = [WeightScheme::LabelCount, WeightScheme::PerSample, WeightScheme::Ranked];
    for dim in [Dimension::Topic, Dimension::Intent, Dimension::Form] {
        let book = Codebook::builtin(dim);
        for scheme in schemes {
            for others in [false, true] {
                let dists: Vec<Distribution> = datasets
                    .iter()
                    .map(|s| dataset_distribution(s, &book, scheme, others).unwrap())
                    .collect();
                for d in &dists {
                    assert!((d.total() - 1.0).abs() <= 1e-9, "sum {}", d.total());
                }
                let named: Vec<(String, &Distribution)> =
                    dists.iter().enumerate().map(|(i, d)| (format!("d{i}"), d)).collect();
                let m = similarity_matrix(&named).unwrap().matrix;
                for i in 0..m.len() {
                    assert!((m[i][i] - 1.0).abs() <= 1e-12);
                    for j in 0..m.len() {
                        assert!((m[i][j] - m[j][i]).abs() <= 1e-12);
                        assert!((0.0..=1.0).contains(&m[i][j]));
                    }
                }
            }
        }
    }
    let (bt, bf) = (Codebook::builtin(Dimension::Topic), Codebook::builtin(Dimension::Form));
    for scheme in [WeightScheme::PerSample, WeightScheme::Ranked] {
        for s in &datasets {
            let c = cross_distribution(s, &bt, &bf, scheme, true).unwrap();
            let dt = dataset_distribution(s, &bt, scheme, true).unwrap();
            let df = dataset_distribution(s, &bf, scheme, true).unwrap();
            assert!(c.marginal_a().iter().zip(&dt.values).all(|(x, y)| (x - y).abs() <= 1e-9));
            assert!(c.marginal_b().iter().zip(&df.values).all(|(x, y)| (x - y).abs() <= 1e-9));
        }
    }
    let unit = |v: Vec<f64>| Distribution {
        dimension: Dimension::Topic,
        level: Level::Fine,
        scheme: WeightScheme::Ranked,
        include_others: false,
        codes: vec!["A1".into(), "A2".into()],
        values: v,
        empty: false,
        samples: 1,
    };
    let (wildchat, lmsys) = (unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0]));
    let g = group_distribution(&[(&wildchat, 1706), (&lmsys, 1331)]).unwrap();
    let oracle = [1706.0 / 3037.0, 1331.0 / 3037.0];
    for ((x, y), rounded) in g.values.iter().zip(oracle).zip([0.56174, 0.43826]) {
        assert!((x - y).abs() <= 1e-9);
        assert!((x - rounded).abs() <= 5e-6);
    }
}

fn instance(a: &BTreeSet<String>, b: &BTreeSet<String>, i: usize) -> LabeledInstance {
    LabeledInstance {
        sample_id: i.to_string(),
        segment: None,
        labels_a: a.clone(),
        labels_b: b.clone(),
    }
}

fn agree_with_oracles(pairs: &[(BTreeSet<String>, BTreeSet<String>)], universe: &[&str]) {
    let inst: Vec<LabeledInstance> = pairs.iter().enumerate().map(|(i, (a, b))| instance(a, b, i)).collect();
    let oracle_j = pairs.iter().map(|(a, b)| oracle_jaccard(a, b)).sum::<f64>() / pairs.len() as f64;
    assert!((mean_jaccard(&inst).unwrap() - oracle_j).abs() <= 1e-12);
    assert!((micro_f1(&inst).unwrap() - oracle_micro_f1(pairs)).abs() <= 1e-12, "{pairs:?}");
    let u: BTreeSet<String> = universe.iter().map(|s| s.to_string()).collect();
    let k = cohens_kappa_multilabel(&inst, &u).unwrap().value;
    assert!((k - oracle_kappa(pairs, universe)).abs() <= 1e-12, "{pairs:?}: {k}");
}

fn agreement_oracles() {
    let universe = ["p", "q", "r"];
    let sets = power_set(&universe);
    let all_pairs: Vec<(BTreeSet<String>, BTreeSet<String>)> =
        sets.iter().flat_map(|a| sets.iter().map(move |b| (a.clone(), b.clone()))).collect();
    for p in &all_pairs {
        assert_eq!(jaccard(&p.0, &p.1), oracle_jaccard(&p.0, &p.1));
        agree_with_oracles(std::slice::from_ref(p), &universe);
    }
    for p in &all_pairs {
        for q in &all_pairs {
            agree_with_oracles(&[p.clone(), q.clone()], &universe);
        }
    }
    let mut r = rng(5);
    let wide = ["a", "b", "c", "d", "e", "f"];
    let random: Vec<_> = (0..1000).map(|_| (random_set(&mut r, &wide), random_set(&mut r, &wide))).collect();
    agree_with_oracles(&random, &wide);
    for chunk in random.chunks(7) {
        agree_with_oracles(chunk, &wide);
    }

    // Overall rows for annotators A and B: Jaccard then Micro-F1, topic/intent/form
    let a = vec![0.734, 0.759, 0.757, 0.755, 0.772, 0.745];
    let b = vec![0.678, 0.727, 0.809, 0.691, 0.732, 0.817];
    let avg = aggregate_report(&[a, b]).unwrap();
    for (x, y) in avg.iter().zip([0.706, 0.743, 0.783, 0.723, 0.752, 0.781]) {
        assert!((x - y).abs() <= 0.001, "{x} vs {y}");
    }

    let inst: Vec<LabeledInstance> = random.iter().take(80).enumerate().map(|(i, (a, b))| instance(a, b, i)).collect();
    let metric = |s: &[&LabeledInstance]| mean_jaccard(s).unwrap();
    let first = bootstrap_ci(metric, &inst, 500, 0.95, 17).unwrap();
    assert_eq!(first, bootstrap_ci(metric, &inst, 500, 0.95, 17).unwrap());
    let point = mean_jaccard(&inst).unwrap();
    assert!(first.lo <= point && point <= first.hi);

    // Each instance agrees fully with probability 0.7 and not at all otherwise,
    // so the population mean Jaccard is 0.7.
    let trials = 500;
    let mut covered = 0;
    for t in 0..trials {
        let mut r = rng(10_000 + t);
        let inst: Vec<LabeledInstance> = (0..100)
            .map(|i| {
                let b = if r.random_bool(0.7) { set(&["x"]) } else { set(&["y"]) };
                instance(&set(&["x"]), &b, i)
            })
            .collect();
        let ci = bootstrap_ci(metric, &inst, 1000, 0.95, t).unwrap();
        if ci.lo <= 0.7 && 0.7 <= ci.hi {
            covered += 1;
        }
    }
    let coverage = covered as f64 / trials as f64;
    assert!((0.90..=0.99).contains(&coverage), "coverage {coverage}");
    println!("  bootstrap coverage {coverage:.3} over {trials} trials");
}

fn golden_run() {
    let work = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let (p, _) = run_golden(work.path());
    let elapsed = start.elapsed();
    assert!(tree_bytes(&p.bundle_dir()) == tree_bytes(&golden_bundle()), "bundle differs from golden");
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
}

#[test]
fn acceptance() {
    let secs = |s| Some(Duration::from_secs(s));
    let outcomes = vec![
        check("ranked-weighting", secs(1), ranked_weighting),
        check("k-formula", secs(1), k_formula),
        check("merge-engine", secs(30), merge_engine),
        check("centroid-math", None, centroid_math),
        check("distribution-suite", None, distribution_suite),
        check("agreement-oracles", secs(60), agreement_oracles),
        check("end-to-end-golden-run", secs(10), golden_run),
        check("published-example-annotations", None, published::check_published_labels),
    ];
    match std::env::var_os("CORPUSALIGN_LIVE_CONFIG") {
        Some(_) => println!("INFO qualitative-live-mode: run `cargo test --test acceptance -- --ignored live_mode`"),
        None => println!(
            "FAIL qualitative-live-mode (not evaluated: needs a live judge and embedder; \
             set CORPUSALIGN_LIVE_CONFIG and run the ignored live_mode test)"
        ),
    }
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{}: {}", o.name, o.detail))
        .collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}

/// Needs a pipeline config whose gateway points at a real judge and embedder.
/// Mines topics, merges the first 500 and checks convergence and a reduction of at least half.
#[test]
#[ignore]
fn live_mode() {
    use corpusalign::merger::{GatewayJudge, StopReason};
    use corpusalign::pipeline::{Pipeline, Stage};

    let path = std::env::var_os("CORPUSALIGN_LIVE_CONFIG").expect("set CORPUSALIGN_LIVE_CONFIG");
    let work = tempfile::tempdir().unwrap();
    let p = Pipeline::from_file(std::path::Path::new(&path), options(work.path())).unwrap();
    p.run(&[Stage::Ingest, Stage::Filter, Stage::Mine]).unwrap();
    let mined = corpusalign::miner::read_topics(&work.path().join("mine/topics.jsonl")).unwrap();
    let sample: Vec<TopicEntry> = mined.into_iter().take(500).collect();
    let tree = MergeTree::from_topics(sample);
    let before = tree.roots.len();
    let gw = p.gateway().unwrap();
    let settings = MergeSettings::default();
    let judge = GatewayJudge {
        gateway: &gw,
        defaults: settings.defaults.clone(),
    };
    let tree = merge_until_converged(tree, &judge, &settings, |_| Ok(())).unwrap();
    let after = tree.roots.len();
    let converged = matches!(
        tree.stop_reason,
        Some(StopReason::Inactivity | StopReason::MeanSpread | StopReason::MaxSpread)
    );
    let ok = converged && after * 2 <= before;
    println!(
        "{} qualitative-live-mode ({before} -> {after} topics, stop {:?})",
        if ok { "PASS" } else { "FAIL" },
        tree.stop_reason
    );
    assert!(ok);
}
