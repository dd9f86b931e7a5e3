mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::rng;
use genret::idstore::{IdStore, Truncation, DEFAULT_LIMIT};
use genret::{DocId, IdSpace};
use rand::Rng;

fn id(c: &[u32]) -> DocId {
    DocId(c.to_vec())
}

fn random_id(r: &mut impl Rng, space: &IdSpace, width: usize) -> DocId {
    let locals: Vec<usize> = (0..space.length).map(|_| r.gen_range(0..width)).collect();
    DocId::from_locals(space, &locals)
}

#[test]
fn build_groups_in_input_order() {
    let space = IdSpace::default();
    let a = id(&[1, 257, 513, 769]);
    let b = id(&[2, 257, 513, 769]);
    let s = IdStore::build(
        space,
        vec![
            (a.clone(), "x".into()),
            (b.clone(), "y".into()),
            (a.clone(), "z".into()),
            (a.clone(), "w".into()),
        ],
    );
    assert_eq!(s.lookup(&a, DEFAULT_LIMIT), ["x", "z", "w"]);
    assert_eq!(s.lookup(&b, DEFAULT_LIMIT), ["y"]);
    assert!(s.lookup(&id(&[3, 257, 513, 769]), DEFAULT_LIMIT).is_empty());
    assert_eq!(s.unique_id_count(), 2);
    assert_eq!(s.num_docs(), 4);
    let empty = IdStore::build(space, Vec::new());
    assert_eq!(empty.unique_id_count(), 0);
    assert!(empty.utilization_histogram().is_empty());
}

#[test]
fn lookup_returns_exactly_what_was_inserted() {
    let space = IdSpace::new(2, 3).unwrap();
    let mut r = rng(1);
    let mut expect: BTreeMap<DocId, Vec<String>> = BTreeMap::new();
    let mut pairs = Vec::new();
    for i in 0..40 {
        let d = random_id(&mut r, &space, 3);
        let key = format!("d{i}");
        expect.entry(d.clone()).or_default().push(key.clone());
        pairs.push((d, key));
    }
    let s = IdStore::build(space, pairs);
    for a in 0..3 {
        for b in 0..3 {
            let d = DocId::from_locals(&space, &[a, b]);
            let got: Vec<String> = s
                .lookup(&d, DEFAULT_LIMIT)
                .into_iter()
                .map(String::from)
                .collect();
            assert_eq!(got, expect.get(&d).cloned().unwrap_or_default());
        }
    }
}

#[test]
fn oversized_postings_are_capped() {
    let space = IdSpace::default();
    let d = id(&[1, 257, 513, 769]);
    let s = IdStore::build(space, (0..1500).map(|i| (d.clone(), format!("k{i:04}"))));
    let got = s.lookup(&d, DEFAULT_LIMIT);
    assert_eq!(got.len(), 1000);
    assert_eq!(got[0], "k0000");
    assert_eq!(got[999], "k0999");

    let mode = Truncation::Random { seed: 3 };
    let a = s.lookup_with(&d, DEFAULT_LIMIT, mode);
    assert_eq!(a, s.lookup_with(&d, DEFAULT_LIMIT, mode));
    assert_eq!(a.len(), 1000);
    assert_ne!(a, got);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 1000);
    assert_ne!(
        a,
        s.lookup_with(&d, DEFAULT_LIMIT, Truncation::Random { seed: 4 })
    );
}

#[test]
fn histogram_conserves_documents() {
    let space = IdSpace::default();
    let one = IdStore::build(
        space,
        (0..10).map(|i| (id(&[1, 257, 513, 769]), format!("{i}"))),
    );
    assert_eq!(one.utilization_histogram(), BTreeMap::from([(10, 1)]));
    let spread = IdStore::build(
        space,
        (0..10).map(|i| (id(&[1 + i, 257, 513, 769]), format!("{i}"))),
    );
    assert_eq!(spread.utilization_histogram(), BTreeMap::from([(1, 10)]));
    assert_eq!(spread.unique_id_count(), 10);

    let mut r = rng(2);
    let s = IdStore::build(
        space,
        (0..10_000).map(|i| (random_id(&mut r, &space, 6), format!("doc{i}"))),
    );
    let h = s.utilization_histogram();
    assert_eq!(h.iter().map(|(size, n)| size * n).sum::<usize>(), 10_000);
    assert_eq!(h.values().sum::<usize>(), s.unique_id_count());
    assert!(h.keys().all(|&k| k >= 1));
    assert_eq!(*h.keys().last().unwrap(), s.max_posting());
    let csv = s.histogram_csv();
    assert!(csv.starts_with("size,count\n"));
    assert_eq!(csv.lines().count(), h.len() + 1);
}

#[test]
fn index_file_is_sorted_and_round_trips() {
    let space = IdSpace::default();
    let mut r = rng(3);
    let pairs: Vec<(DocId, String)> = (0..300)
        .map(|i| (random_id(&mut r, &space, 3), format!("doc{i}")))
        .collect();
    let s = IdStore::build(space, pairs.clone());
    let text = s.to_index_file();
    assert_eq!(text, IdStore::build(space, pairs).to_index_file());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 300);
    let parsed: Vec<(Vec<u32>, &str)> = lines
        .iter()
        .map(|l| {
            let (c, k) = l.split_once('\t').unwrap();
            (c.split(',').map(|x| x.parse().unwrap()).collect(), k)
        })
        .collect();
    assert!(parsed.windows(2).all(|w| w[0].0 <= w[1].0));
    let back = IdStore::from_index_file(space, &text).unwrap();
    assert_eq!(back.to_index_file(), text);
    assert_eq!(back.unique_id_count(), s.unique_id_count());
    assert!(IdStore::from_index_file(space, "1,257,513,769 nokey\n").is_err());
    assert!(IdStore::from_index_file(space, "1,2,3,4\tk\n").is_err());
}

#[test]
fn prefix_tree_shapes() {
    let space = IdSpace::default();
    let single = IdStore::build(space, vec![(id(&[1, 257, 513, 769]), "a".into())]);
    let t = single.export_prefix_tree(4, 1);
    let mut node = &t;
    for code in [1, 257, 513, 769] {
        assert_eq!(node.children.len(), 1);
        node = &node.children[0];
        assert_eq!(node.code, Some(code));
    }
    assert!(node.children.is_empty());
    assert_eq!(node.postings, [1]);
    assert_eq!(node.sample_keys, ["a"]);

    let two = IdStore::build(
        space,
        vec![
            (id(&[1, 257, 513, 769]), "a".into()),
            (id(&[1, 258, 513, 769]), "b".into()),
        ],
    );
    let t = two.export_prefix_tree(4, 1);
    assert_eq!(t.children.len(), 1);
    assert_eq!(t.children[0].children.len(), 2);
}

#[test]
fn prefix_tree_matches_postings() {
    let space = IdSpace::default();
    let mut r = rng(4);
    let pairs: Vec<(DocId, String)> = (0..500)
        .map(|i| (random_id(&mut r, &space, 4), format!("doc{i}")))
        .collect();
    let s = IdStore::build(space, pairs);
    let t = s.export_prefix_tree(4, 1);
    assert_eq!(t.unique_id_count(), s.unique_id_count());
    assert_eq!(t.num_docs(), s.num_docs());
    for (path, size) in t.leaves() {
        let d = DocId(path);
        space.validate(&d).unwrap();
        assert_eq!(s.posting_size(&d), size);
    }
    let back = genret::idstore::TreeNode::from_json(&t.to_json()).unwrap();
    assert_eq!(back, t);
    assert_eq!(back.unique_id_count(), s.unique_id_count());

    let filtered = s.export_prefix_tree(4, 2);
    let big = s
        .utilization_histogram()
        .range(2..)
        .map(|(_, n)| n)
        .sum::<usize>();
    assert_eq!(filtered.unique_id_count(), big);
    let shallow = s.export_prefix_tree(2, 1);
    assert_eq!(shallow.unique_id_count(), s.unique_id_count());
    assert!(shallow.leaves().iter().all(|(p, _)| p.len() == 2));
    assert!(t.leaves().iter().all(|(p, _)| p.len() == 4));
}
