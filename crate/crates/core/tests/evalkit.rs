use std::collections::HashSet;

use genret::evalkit::*;
use genret::idstore::{IdStore, Truncation};
use genret::{DocId, IdSpace};

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for at in 0..=p.len() {
            let mut q = p.clone();
            q.insert(at, n - 1);
            out.push(q);
        }
    }
    out
}

/// Averages recall and reciprocal rank over every ordering of the target's
/// bucket; item 0 is the target.
fn enumerate(c: usize, m: usize, k: usize, cutoff: usize) -> (f64, f64) {
    let perms = permutations(m);
    let (mut recall, mut rr) = (0.0, 0.0);
    for p in &perms {
        let rank = c + 1 + p.iter().position(|&x| x == 0).unwrap();
        if rank <= k {
            recall += 1.0;
        }
        if rank <= cutoff {
            rr += 1.0 / rank as f64;
        }
    }
    (recall / perms.len() as f64, rr / perms.len() as f64)
}

#[test]
fn closed_forms_match_enumeration() {
    for c in 0..=8 {
        for m in 1..=6 {
            for k in KS {
                let (recall, rr) = enumerate(c, m, k, MRR_CUTOFF);
                assert!(
                    (expected_recall_at_k(c, m, k) - recall).abs() <= 1e-9,
                    "{c} {m} {k}"
                );
                assert!(
                    (expected_mrr(c, m, MRR_CUTOFF) - rr).abs() <= 1e-9,
                    "{c} {m}"
                );
            }
        }
    }
}

#[test]
fn closed_form_examples() {
    assert_eq!(expected_recall_at_k(0, 4, 1), 0.25);
    assert_eq!(expected_recall_at_k(10, 3, 5), 0.0);
    assert_eq!(expected_mrr(0, 1, 10), 1.0);
    assert_eq!(expected_mrr(0, 2, 10), 0.75);
    assert_eq!(expected_mrr(12, 2, 10), 0.0);
}

#[test]
fn recall_is_monotone() {
    for c in 0..30 {
        for m in 1..20 {
            for k in 1..30 {
                let r = expected_recall_at_k(c, m, k);
                assert!((0.0..=1.0).contains(&r));
                assert!(expected_recall_at_k(c, m, k + 1) >= r);
                assert!(expected_recall_at_k(c + 1, m, k) <= r);
            }
        }
    }
}

fn id(a: u32) -> DocId {
    DocId(vec![a, 257, 513, 769])
}

fn store(buckets: &[(u32, &[&str])]) -> IdStore {
    let pairs = buckets
        .iter()
        .flat_map(|(a, keys)| keys.iter().map(move |k| (id(*a), k.to_string())));
    IdStore::build(IdSpace::default(), pairs)
}

#[test]
fn singleton_buckets_make_both_variants_equal() {
    let s = store(&[(1, &["a"]), (2, &["b"]), (3, &["c"])]);
    let ids = [id(1), id(2), id(3)];
    for target in ["a", "b", "c", "zz"] {
        let q = score(&RankedBuckets::expand(
            &ids,
            &s,
            target,
            1000,
            1000,
            Truncation::Prefix,
        ));
        assert_eq!(q.recall, q.recall_det);
        assert_eq!(q.mrr, q.mrr_det);
    }
    let first = score(&RankedBuckets::expand(
        &ids,
        &s,
        "a",
        1000,
        1000,
        Truncation::Prefix,
    ));
    assert_eq!(first.recall, [1.0; 3]);
    assert_eq!(first.mrr, 1.0);
    let miss = score(&RankedBuckets::expand(
        &[id(2)],
        &s,
        "a",
        1000,
        1000,
        Truncation::Prefix,
    ));
    assert_eq!(miss.recall, [0.0; 3]);
    assert_eq!(miss.mrr, 0.0);
}

#[test]
fn hand_built_fixture() {
    // ids 1..=4 hold buckets of sizes 2, 4, 1, 6.
    let s = store(&[
        (1, &["a1", "a2"]),
        (2, &["b1", "b2", "b3", "b4"]),
        (3, &["c1"]),
        (4, &["d1", "d2", "d3", "d4", "d5", "d6"]),
    ]);
    let beam = [id(1), id(2), id(3), id(4)];
    let queries = [
        ("a2", &beam[..]),
        ("b3", &beam[..]),
        ("c1", &beam[..]),
        ("d5", &beam[..]),
        ("a1", &beam[1..]),
    ];
    let scores: Vec<QueryScore> = queries
        .iter()
        .map(|(t, ids)| {
            score(&RankedBuckets::expand(
                ids,
                &s,
                t,
                1000,
                1000,
                Truncation::Prefix,
            ))
        })
        .collect();
    let m = Metrics::aggregate(&scores, 0);
    // Per query (R@1, R@5, R@10, MRR@10):
    // a2: c=0 m=2 -> 1/2, 1, 1, (1 + 1/2)/2 = 3/4
    // b3: c=2 m=4 -> 0, 3/4, 1, (1/3 + 1/4 + 1/5 + 1/6)/4 = 19/80
    // c1: c=6 m=1 -> 0, 0, 1, 1/7
    // d5: c=7 m=6 -> 0, 0, 1/2, (1/8 + 1/9 + 1/10)/6
    // a1: absent -> 0
    let r1 = 0.5 / 5.0;
    let r5 = (1.0 + 0.75) / 5.0;
    let r10 = (1.0 + 1.0 + 1.0 + 0.5) / 5.0;
    let mrr = (0.75 + 19.0 / 80.0 + 1.0 / 7.0 + (1.0 / 8.0 + 1.0 / 9.0 + 1.0 / 10.0) / 6.0) / 5.0;
    assert!((m.r1 - r1).abs() < 1e-12);
    assert!((m.r5 - r5).abs() < 1e-12);
    assert!((m.r10 - r10).abs() < 1e-12);
    assert!((m.mrr10 - mrr).abs() < 1e-12);
    // Deterministic order: a2 rank 2, b3 rank 5, c1 rank 7, d5 rank 12.
    assert!((m.r1_det - 0.0).abs() < 1e-12);
    assert!((m.r5_det - 2.0 / 5.0).abs() < 1e-12);
    assert!((m.r10_det - 3.0 / 5.0).abs() < 1e-12);
    assert!((m.mrr10_det - (0.5 + 0.2 + 1.0 / 7.0) / 5.0).abs() < 1e-12);
    assert!((m.dq - (13.0 * 4.0 + 11.0) / 5.0).abs() < 1e-12);
    assert!(m.r1 <= m.r5 && m.r5 <= m.r10);
}

#[test]
fn caps_bound_retrieved_documents() {
    let keys: Vec<String> = (0..1500).map(|i| format!("k{i}")).collect();
    let refs: Vec<&str> = keys.iter().map(String::as_str).collect();
    let s = store(&[(1, &refs[..]), (2, &refs[..700])]);
    let ids = [id(1), id(2)];
    let b = RankedBuckets::expand(&ids, &s, "k5", 1000, 1000, Truncation::Prefix);
    assert_eq!(b.retrieved(), 1000);
    assert_eq!(b.buckets.len(), 1);
    let b = RankedBuckets::expand(&ids, &s, "k1200", 1000, 1000, Truncation::Prefix);
    assert_eq!(score(&b).recall, [0.0; 3]);
    let b = RankedBuckets::expand(&ids, &s, "k5", 600, 1000, Truncation::Prefix);
    assert_eq!(b.retrieved(), 1000);
    assert_eq!(
        b.buckets.iter().map(|x| x.size).collect::<Vec<_>>(),
        [600, 400]
    );
    let b = RankedBuckets::expand(&ids, &s, "k5", 1000, usize::MAX, Truncation::Prefix);
    assert_eq!(b.retrieved(), 1700);
    assert!(b.retrieved() <= ids.len() * 1000);
}

#[test]
fn taxonomy_fixture() {
    let train_keys: HashSet<String> = ["d1", "d2", "d3"].map(String::from).into();
    let train_ids: HashSet<DocId> = [id(1), id(2)].into();
    let eval = vec![
        ("d1".to_string(), id(1)),
        ("d3".to_string(), id(9)),
        ("n1".to_string(), id(2)),
        ("n2".to_string(), id(1)),
        ("n3".to_string(), id(7)),
    ];
    let got = classify_new_docs(&train_keys, &train_ids, &eval);
    use NewDocSplit::*;
    assert_eq!(
        got,
        [Existing, Existing, NewContent, NewContent, NewSemantic]
    );
    assert_eq!(
        got.iter().map(ToString::to_string).collect::<Vec<_>>()[2],
        "new-content"
    );
}
