//! Pair files, the corpus-built tokenizer, batching with positive groups and
//! the synthetic clustered corpus.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::seed;

pub const UNK: usize = 0;
const UNK_WORD: &str = "[unk]";

/// Token ids of one text, never empty.
pub type TokenSeq = Vec<usize>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub query: String,
    #[serde(rename = "document")]
    pub doc: String,
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl PairRecord {
    /// Record keyed by the content hash of `doc`.
    pub fn new(query: impl Into<String>, doc: impl Into<String>) -> Self {
        let doc = doc.into();
        PairRecord {
            query: query.into(),
            key: content_key(&doc),
            doc,
            split: None,
        }
    }
}

/// Stable key of a document text.
pub fn content_key(doc: &str) -> String {
    seed::sha256_hex(doc.as_bytes())[..16].to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// `query<TAB>document[<TAB>key[<TAB>split]]`
    Tsv,
    /// One JSON object per line with `query`, `document`, `key` and optional `split`.
    Jsonl,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::Jsonl,
            _ => Format::Tsv,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Loaded {
    pub records: Vec<PairRecord>,
    pub malformed: usize,
}

fn parse_tsv(line: &str) -> Option<PairRecord> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() < 2 || cols.len() > 4 {
        return None;
    }
    let (q, d) = (cols[0], cols[1]);
    if q.trim().is_empty() || d.trim().is_empty() {
        return None;
    }
    let key = match cols.get(2) {
        Some(k) if !k.is_empty() => k.to_string(),
        Some(_) => return None,
        None => content_key(d),
    };
    let split = cols.get(3).map(|s| s.to_string());
    Some(PairRecord {
        query: q.to_string(),
        doc: d.to_string(),
        key,
        split,
    })
}

fn parse_jsonl(line: &str) -> Option<PairRecord> {
    #[derive(Deserialize)]
    struct Raw {
        query: String,
        document: String,
        key: Option<String>,
        split: Option<String>,
    }
    let raw: Raw = serde_json::from_str(line).ok()?;
    if raw.query.trim().is_empty() || raw.document.trim().is_empty() {
        return None;
    }
    let key = raw.key.unwrap_or_else(|| content_key(&raw.document));
    Some(PairRecord {
        query: raw.query,
        doc: raw.document,
        key,
        split: raw.split,
    })
}

/// Parses pair records from text. Blank lines are ignored; other lines that
/// fail to parse are skipped and counted.
pub fn parse_pairs(text: &str, format: Format) -> Result<Loaded> {
    let mut records = Vec::new();
    let mut malformed = 0usize;
    let mut total = 0usize;
    for line in text.lines() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let rec = match format {
            Format::Tsv => parse_tsv(line),
            Format::Jsonl => parse_jsonl(line),
        };
        match rec {
            Some(r) => records.push(r),
            None => malformed += 1,
        }
    }
    if malformed * 10 > total {
        return Err(Error::Data(format!(
            "{malformed} of {total} lines malformed"
        )));
    }
    if malformed > 0 {
        log::warn!("skipped {malformed} malformed line(s) of {total}");
    }
    check_keys(&records)?;
    Ok(Loaded { records, malformed })
}

/// A key must name one document text.
fn check_keys(records: &[PairRecord]) -> Result<()> {
    let mut seen: HashMap<&str, &str> = HashMap::new();
    for r in records {
        if let Some(prev) = seen.insert(&r.key, &r.doc) {
            if prev != r.doc {
                return Err(Error::Data(format!(
                    "key {} names two different documents",
                    r.key
                )));
            }
        }
    }
    Ok(())
}

pub fn load_pairs(path: &Path, format: Format) -> Result<Loaded> {
    let text = fsio::read_to_string(path)?;
    parse_pairs(&text, format).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Serializes records. TSV omits the key column when it equals the content
/// hash, so two-column files round-trip unchanged.
pub fn format_pairs(records: &[PairRecord], format: Format) -> Result<String> {
    let mut out = String::new();
    for r in records {
        match format {
            Format::Tsv => {
                for field in [&r.query, &r.doc, &r.key] {
                    if field.contains(['\t', '\n', '\r']) {
                        return Err(Error::Data(format!(
                            "field {field:?} cannot be written as TSV"
                        )));
                    }
                }
                out.push_str(&r.query);
                out.push('\t');
                out.push_str(&r.doc);
                if r.split.is_some() || r.key != content_key(&r.doc) {
                    out.push('\t');
                    out.push_str(&r.key);
                }
                if let Some(s) = &r.split {
                    out.push('\t');
                    out.push_str(s);
                }
            }
            Format::Jsonl => {
                out.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
            }
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn dump_pairs(path: &Path, records: &[PairRecord], format: Format) -> Result<()> {
    fsio::write_atomic(path, format_pairs(records, format)?.as_bytes())
}

/// Lowercased alphanumeric words.
pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Word vocabulary built from a corpus. Id 0 is the unknown word.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Vocab::from_words(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Keeps words seen at least `min_count` times, most frequent first
    /// (ties alphabetical), capped at `max_size` entries including `[unk]`.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_count: usize,
        max_size: usize,
    ) -> Vocab {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in normalize(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut words = vec![UNK_WORD.to_string()];
        words.extend(
            ranked
                .into_iter()
                .take(max_size.saturating_sub(1))
                .map(|(w, _)| w),
        );
        Vocab::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Vocab {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize(&self, text: &str, max_length: usize) -> TokenSeq {
        let mut ids: Vec<usize> = normalize(text)
            .iter()
            .take(max_length.max(1))
            .map(|w| self.id(w))
            .collect();
        if ids.is_empty() {
            ids.push(UNK);
        }
        ids
    }
}

/// True when every token is unknown.
pub fn all_unknown(tokens: &[usize]) -> bool {
    tokens.iter().all(|&t| t == UNK)
}

/// Records of one training batch, plus positive-group labels. Query `i` is
/// aligned with document `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<usize>,
    /// Labels `0..k`, numbered by first appearance.
    pub groups: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn same_group(&self, a: usize, b: usize) -> bool {
        self.groups[a] == self.groups[b]
    }

    pub fn num_groups(&self) -> usize {
        self.groups.iter().max().map_or(0, |g| g + 1)
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Positive groups: items linked by a shared query text or a shared document.
pub fn group_labels(records: &[PairRecord], items: &[usize]) -> Vec<usize> {
    let n = items.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut by_query: HashMap<&str, usize> = HashMap::new();
    let mut by_doc: HashMap<&str, usize> = HashMap::new();
    for (pos, &i) in items.iter().enumerate() {
        let r = &records[i];
        for first in [
            *by_query.entry(&r.query).or_insert(pos),
            *by_doc.entry(&r.key).or_insert(pos),
        ] {
            let (a, b) = (find(&mut parent, first), find(&mut parent, pos));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut label: HashMap<usize, usize> = HashMap::new();
    (0..n)
        .map(|pos| {
            let root = find(&mut parent, pos);
            let next = label.len();
            *label.entry(root).or_insert(next)
        })
        .collect()
}

/// Shuffled batches for one epoch; the order is a function of `(seed, epoch)`.
/// The last batch may be smaller.
pub fn make_batches(
    records: &[PairRecord],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be at least 2"
        )));
    }
    if batch_size > records.len() {
        log::warn!(
            "batch size {batch_size} exceeds corpus of {}; using one batch",
            records.len()
        );
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut seed::rng(seed, "batches", epoch));
    Ok(order
        .chunks(batch_size)
        .map(|items| Batch {
            items: items.to_vec(),
            groups: group_labels(records, items),
        })
        .collect())
}

/// Generated corpus plus the cluster of every document key.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub records: Vec<PairRecord>,
    pub clusters: Vec<(String, usize)>,
}

/// Shape of generated texts.
#[derive(Clone, Copy, Debug)]
pub struct SynthShape {
    pub doc_words: usize,
    /// Words a query borrows from its document.
    pub query_doc_words: usize,
    /// Extra cluster words appended to a query.
    pub query_cluster_words: usize,
}

impl Default for SynthShape {
    fn default() -> Self {
        SynthShape {
            doc_words: 12,
            query_doc_words: 4,
            query_cluster_words: 1,
        }
    }
}

pub fn synth_corpus(
    n_clusters: usize,
    docs_per_cluster: usize,
    queries_per_doc: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<SynthCorpus> {
    synth_corpus_with(
        n_clusters,
        docs_per_cluster,
        queries_per_doc,
        vocab_size,
        seed,
        SynthShape::default(),
    )
}

/// Each cluster owns `vocab_size / n_clusters` words. A document is a random
/// word set from its cluster; each query samples words of its document plus
/// further words of the same cluster.
pub fn synth_corpus_with(
    n_clusters: usize,
    docs_per_cluster: usize,
    queries_per_doc: usize,
    vocab_size: usize,
    seed: u64,
    shape: SynthShape,
) -> Result<SynthCorpus> {
    if n_clusters == 0 || docs_per_cluster == 0 || queries_per_doc == 0 {
        return Err(Error::Config(
            "synthetic corpus counts must be at least 1".into(),
        ));
    }
    if vocab_size < n_clusters * 8 {
        return Err(Error::Config(format!(
            "vocab size {vocab_size} too small for {n_clusters} clusters (need {})",
            n_clusters * 8
        )));
    }
    let per = vocab_size / n_clusters;
    if shape.doc_words == 0
        || shape.doc_words > per
        || shape.query_doc_words == 0
        || shape.query_doc_words > shape.doc_words
    {
        return Err(Error::Config(format!(
            "text shape {shape:?} does not fit {per} words per cluster"
        )));
    }
    let mut rng = seed::rng(seed, "synth", 0);
    let mut records = Vec::with_capacity(n_clusters * docs_per_cluster * queries_per_doc);
    let mut clusters = Vec::with_capacity(n_clusters * docs_per_cluster);
    let mut seen = std::collections::HashSet::new();
    let words: Vec<usize> = (0..per).collect();
    for c in 0..n_clusters {
        let name = |w: usize| format!("c{c}w{w}");
        let mut made = 0;
        while made < docs_per_cluster {
            let picked: Vec<usize> = words
                .choose_multiple(&mut rng, shape.doc_words)
                .copied()
                .collect();
            let doc = picked
                .iter()
                .map(|&w| name(w))
                .collect::<Vec<_>>()
                .join(" ");
            if !seen.insert(doc.clone()) {
                continue;
            }
            made += 1;
            let key = content_key(&doc);
            clusters.push((key.clone(), c));
            for _ in 0..queries_per_doc {
                let mut q: Vec<String> = picked
                    .choose_multiple(&mut rng, shape.query_doc_words)
                    .map(|&w| name(w))
                    .collect();
                for _ in 0..shape.query_cluster_words {
                    q.push(name(rng.gen_range(0..per)));
                }
                records.push(PairRecord {
                    query: q.join(" "),
                    doc: doc.clone(),
                    key: key.clone(),
                    split: None,
                });
            }
        }
    }
    Ok(SynthCorpus { records, clusters })
}

impl SynthCorpus {
    pub fn sidecar(&self) -> String {
        let mut out = String::new();
        for (k, c) in &self.clusters {
            let _ = writeln!(out, "{k}\t{c}");
        }
        out
    }

    pub fn cluster_of(&self) -> HashMap<&str, usize> {
        self.clusters
            .iter()
            .map(|(k, c)| (k.as_str(), *c))
            .collect()
    }
}

/// Moves one query of roughly `fraction` of the multi-query documents to a
/// held-out list; the documents themselves stay in training. The held-out
/// records carry split `heldout`.
pub fn split_heldout(
    records: &[PairRecord],
    fraction: f64,
    seed: u64,
) -> (Vec<PairRecord>, Vec<PairRecord>) {
    let mut by_doc: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_doc.entry(&r.key).or_default().push(i);
    }
    let mut candidates: Vec<usize> = by_doc
        .values()
        .filter(|v| v.len() >= 2)
        .map(|v| *v.last().expect("non-empty"))
        .collect();
    candidates.sort_unstable();
    candidates.shuffle(&mut seed::rng(seed, "heldout", 0));
    let want = ((records.len() as f64) * fraction).round() as usize;
    let held: std::collections::HashSet<usize> = candidates.into_iter().take(want).collect();
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if held.contains(&i) {
            let mut r = r.clone();
            r.split = Some("heldout".into());
            heldout.push(r);
        } else {
            train.push(r.clone());
        }
    }
    (train, heldout)
}

/// Distinct documents in first-appearance order, as `(key, text)`.
/// `per_doc` queries for every distinct document, each a random subset of
/// its words with a size drawn from `min_words..=max_words`.
pub fn pseudo_queries(
    records: &[PairRecord],
    per_doc: usize,
    min_words: usize,
    max_words: usize,
    seed: u64,
) -> Vec<PairRecord> {
    let mut out = Vec::new();
    for (n, (key, doc)) in documents(records).into_iter().enumerate() {
        let words: Vec<&str> = doc.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let mut rng = seed::rng(seed, "pseudo", n as u64);
        for _ in 0..per_doc {
            let k = rng.gen_range(min_words..=max_words).min(words.len());
            let q: Vec<&str> = words.choose_multiple(&mut rng, k).copied().collect();
            out.push(PairRecord {
                query: q.join(" "),
                doc: doc.clone(),
                key: key.clone(),
                split: None,
            });
        }
    }
    out
}

pub fn documents(records: &[PairRecord]) -> Vec<(String, String)> {
    let mut seen = std::collections::HashSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.key.clone()))
        .map(|r| (r.key.clone(), r.doc.clone()))
        .collect()
}
