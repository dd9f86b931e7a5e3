//! Identifier to documents store, its flat index file and trie view.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{DocId, IdSpace};
use crate::seed;

/// Per-lookup and per-query document cap.
pub const DEFAULT_LIMIT: usize = 1000;
const SAMPLE_KEYS: usize = 5;

/// How an oversized posting is cut down to the limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Truncation {
    /// First documents in natural order.
    #[default]
    Prefix,
    /// A seeded random subset, kept in natural order.
    Random { seed: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct IdStore {
    space: IdSpace,
    postings: BTreeMap<DocId, Vec<(u64, String)>>,
    members: HashSet<(DocId, String)>,
    next_seq: u64,
    total: usize,
    rejected: usize,
}

impl IdStore {
    pub fn new(space: IdSpace) -> Self {
        IdStore {
            space,
            ..IdStore::default()
        }
    }

    /// Builds from `(id, key)` pairs. Invalid identifiers are counted in
    /// [`IdStore::rejected`].
    pub fn build(space: IdSpace, pairs: impl IntoIterator<Item = (DocId, String)>) -> Self {
        let mut s = IdStore::new(space);
        for (id, key) in pairs {
            if s.insert(id, key).is_err() {
                s.rejected += 1;
            }
        }
        s
    }

    pub fn space(&self) -> &IdSpace {
        &self.space
    }

    /// Appends `key` to the posting of `id`. Returns false when the pair is
    /// already present.
    pub fn insert(&mut self, id: DocId, key: String) -> Result<bool> {
        self.space.validate(&id)?;
        if !self.members.insert((id.clone(), key.clone())) {
            return Ok(false);
        }
        self.postings
            .entry(id)
            .or_default()
            .push((self.next_seq, key));
        self.next_seq += 1;
        self.total += 1;
        Ok(true)
    }

    pub fn rejected(&self) -> usize {
        self.rejected
    }

    pub fn num_docs(&self) -> usize {
        self.total
    }

    pub fn unique_id_count(&self) -> usize {
        self.postings.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = &DocId> {
        self.postings.keys()
    }

    pub fn posting_size(&self, id: &DocId) -> usize {
        self.postings.get(id).map_or(0, Vec::len)
    }

    pub fn max_posting(&self) -> usize {
        self.postings.values().map(Vec::len).max().unwrap_or(0)
    }

    /// First `min(limit, |posting|)` keys in natural order.
    pub fn lookup(&self, id: &DocId, limit: usize) -> Vec<&str> {
        self.lookup_with(id, limit, Truncation::Prefix)
    }

    pub fn lookup_with(&self, id: &DocId, limit: usize, mode: Truncation) -> Vec<&str> {
        let Some(list) = self.postings.get(id) else {
            return Vec::new();
        };
        if list.len() <= limit {
            return list.iter().map(|(_, k)| k.as_str()).collect();
        }
        match mode {
            Truncation::Prefix => list[..limit].iter().map(|(_, k)| k.as_str()).collect(),
            Truncation::Random { seed: s } => {
                let tag = seed::derive(s, &id.to_string(), 0);
                let mut idx =
                    sample(&mut seed::rng(tag, "truncate", 0), list.len(), limit).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| list[i].1.as_str()).collect()
            }
        }
    }

    /// Posting size to number of identifiers with that size.
    pub fn utilization_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for list in self.postings.values() {
            *h.entry(list.len()).or_insert(0) += 1;
        }
        h
    }

    /// `size,count` lines.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("size,count\n");
        for (s, c) in self.utilization_histogram() {
            let _ = writeln!(out, "{s},{c}");
        }
        out
    }

    /// `c1,c2,...<TAB>key` lines sorted by code tuple, then insertion order.
    pub fn to_index_file(&self) -> String {
        let mut out = String::new();
        for (id, list) in &self.postings {
            for (_, key) in list {
                let _ = writeln!(out, "{id}\t{key}");
            }
        }
        out
    }

    /// Reads an index file; malformed lines are errors.
    pub fn from_index_file(space: IdSpace, text: &str) -> Result<Self> {
        let mut s = IdStore::new(space);
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (codes, key) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("index line {}: missing tab", n + 1)))?;
            let id: DocId = codes
                .parse()
                .map_err(|e| Error::Data(format!("index line {}: {e}", n + 1)))?;
            s.insert(id, key.to_string())
                .map_err(|e| Error::Data(format!("index line {}: {e}", n + 1)))?;
        }
        Ok(s)
    }

    /// Trie of the stored identifiers down to `max_depth` positions, keeping
    /// only leaves whose posting has at least `min_posting` documents.
    pub fn export_prefix_tree(&self, max_depth: usize, min_posting: usize) -> TreeNode {
        let depth = max_depth.min(self.space.length);
        let mut root = TreeNode::default();
        for (id, list) in &self.postings {
            if list.len() < min_posting {
                continue;
            }
            let mut node = &mut root;
            for &c in &id.codes()[..depth] {
                let at = match node.children.binary_search_by_key(&Some(c), |n| n.code) {
                    Ok(i) => i,
                    Err(i) => {
                        node.children.insert(
                            i,
                            TreeNode {
                                code: Some(c),
                                ..TreeNode::default()
                            },
                        );
                        i
                    }
                };
                node = &mut node.children[at];
            }
            node.postings.push(list.len());
            for (_, k) in list {
                if node.sample_keys.len() < SAMPLE_KEYS {
                    node.sample_keys.push(k.clone());
                }
            }
        }
        root
    }
}

/// One trie node. `postings` holds the posting sizes of every identifier
/// ending at or collapsed into this node.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TreeNode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub postings: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sample_keys: Vec<String>,
}

impl TreeNode {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("prefix tree: {e}")))
    }

    /// Number of identifiers represented.
    pub fn unique_id_count(&self) -> usize {
        self.postings.len()
            + self
                .children
                .iter()
                .map(TreeNode::unique_id_count)
                .sum::<usize>()
    }

    /// Sum of all posting sizes.
    pub fn num_docs(&self) -> usize {
        self.postings.iter().sum::<usize>()
            + self.children.iter().map(TreeNode::num_docs).sum::<usize>()
    }

    /// Code paths to every node that carries postings, with their sizes.
    pub fn leaves(&self) -> Vec<(Vec<u32>, usize)> {
        let mut out = Vec::new();
        self.walk(&mut Vec::new(), &mut out);
        out
    }

    fn walk(&self, path: &mut Vec<u32>, out: &mut Vec<(Vec<u32>, usize)>) {
        if let Some(c) = self.code {
            path.push(c);
        }
        for &n in &self.postings {
            out.push((path.clone(), n));
        }
        for child in &self.children {
            child.walk(path, out);
        }
        if self.code.is_some() {
            path.pop();
        }
    }
}

/// Sizes of the postings of each identifier, for quick comparisons.
pub fn posting_sizes(store: &IdStore) -> HashMap<DocId, usize> {
    store
        .postings
        .iter()
        .map(|(id, l)| (id.clone(), l.len()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(c: &[u32]) -> DocId {
        DocId(c.to_vec())
    }

    #[test]
    fn duplicate_pair_is_idempotent() {
        let mut s = IdStore::new(IdSpace::default());
        assert!(s.insert(id(&[1, 257, 513, 769]), "a".into()).unwrap());
        assert!(!s.insert(id(&[1, 257, 513, 769]), "a".into()).unwrap());
        assert_eq!(s.num_docs(), 1);
    }

    #[test]
    fn invalid_ids_are_rejected() {
        let s = IdStore::build(
            IdSpace::default(),
            vec![(id(&[1, 2, 3, 4]), "a".to_string())],
        );
        assert_eq!(s.rejected(), 1);
        assert_eq!(s.num_docs(), 0);
    }
}
