//! Retrieval metrics under random within-bucket order, new-document
//! splits and reports.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ids::DocId;
use crate::idstore::{IdStore, Truncation, DEFAULT_LIMIT};
use crate::textdata::{all_unknown, PairRecord};
use crate::trainer::Checkpoint;

pub const KS: [usize; 3] = [1, 5, 10];
pub const MRR_CUTOFF: usize = 10;

/// Recall@K when the target sits uniformly at random inside a bucket of `m`
/// documents preceded by `c` others.
pub fn expected_recall_at_k(c: usize, m: usize, k: usize) -> f64 {
    if m == 0 || c >= k {
        0.0
    } else if c + m <= k {
        1.0
    } else {
        (k - c) as f64 / m as f64
    }
}

/// Reciprocal rank averaged over the target's possible positions.
pub fn expected_mrr(c: usize, m: usize, cutoff: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let top = m.min(cutoff.saturating_sub(c));
    (1..=top).map(|j| 1.0 / (c + j) as f64).sum::<f64>() / m as f64
}

/// One beam result after expansion through the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    pub id: DocId,
    pub size: usize,
    /// 1-based position of the target inside the bucket.
    pub target_pos: Option<usize>,
}

/// Buckets in beam order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankedBuckets {
    pub buckets: Vec<Bucket>,
}

impl RankedBuckets {
    /// Expands `ids` through `store`, truncating each posting at
    /// `per_lookup` and the running total at `per_query`.
    pub fn expand(
        ids: &[DocId],
        store: &IdStore,
        target: &str,
        per_lookup: usize,
        per_query: usize,
        mode: Truncation,
    ) -> Self {
        let mut buckets = Vec::with_capacity(ids.len());
        let mut total = 0;
        for id in ids {
            if total >= per_query {
                break;
            }
            let keys = store.lookup_with(id, per_lookup.min(per_query - total), mode);
            if keys.is_empty() {
                continue;
            }
            let target_pos = keys.iter().position(|k| *k == target).map(|p| p + 1);
            total += keys.len();
            buckets.push(Bucket {
                id: id.clone(),
                size: keys.len(),
                target_pos,
            });
        }
        RankedBuckets { buckets }
    }

    pub fn retrieved(&self) -> usize {
        self.buckets.iter().map(|b| b.size).sum()
    }

    /// Documents before the target's bucket, that bucket's size, and the
    /// target's position inside it.
    pub fn locate(&self) -> Option<(usize, usize, usize)> {
        let mut before = 0;
        for b in &self.buckets {
            if let Some(p) = b.target_pos {
                return Some((before, b.size, p));
            }
            before += b.size;
        }
        None
    }
}

/// Per-query scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub recall: [f64; 3],
    pub recall_det: [f64; 3],
    pub mrr: f64,
    pub mrr_det: f64,
    pub retrieved: usize,
}

pub fn score(buckets: &RankedBuckets) -> QueryScore {
    let mut s = QueryScore {
        retrieved: buckets.retrieved(),
        ..QueryScore::default()
    };
    if let Some((c, m, p)) = buckets.locate() {
        for (i, &k) in KS.iter().enumerate() {
            s.recall[i] = expected_recall_at_k(c, m, k);
            s.recall_det[i] = if c + p <= k { 1.0 } else { 0.0 };
        }
        s.mrr = expected_mrr(c, m, MRR_CUTOFF);
        s.mrr_det = if c + p <= MRR_CUTOFF {
            1.0 / (c + p) as f64
        } else {
            0.0
        };
    }
    s
}

/// Averages over a set of queries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub queries: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mrr10: f64,
    pub r1_det: f64,
    pub r5_det: f64,
    pub r10_det: f64,
    pub mrr10_det: f64,
    /// Mean number of documents retrieved per query.
    pub dq: f64,
    /// Queries whose text has no known word; scored as misses.
    pub empty_queries: usize,
}

impl Metrics {
    pub fn aggregate<'a>(
        scores: impl IntoIterator<Item = &'a QueryScore>,
        empty_queries: usize,
    ) -> Self {
        let mut m = Metrics {
            empty_queries,
            ..Metrics::default()
        };
        for s in scores {
            m.queries += 1;
            m.r1 += s.recall[0];
            m.r5 += s.recall[1];
            m.r10 += s.recall[2];
            m.mrr10 += s.mrr;
            m.r1_det += s.recall_det[0];
            m.r5_det += s.recall_det[1];
            m.r10_det += s.recall_det[2];
            m.mrr10_det += s.mrr_det;
            m.dq += s.retrieved as f64;
        }
        if m.queries > 0 {
            let n = m.queries as f64;
            for v in [
                &mut m.r1,
                &mut m.r5,
                &mut m.r10,
                &mut m.mrr10,
                &mut m.r1_det,
                &mut m.r5_det,
                &mut m.r10_det,
                &mut m.mrr10_det,
                &mut m.dq,
            ] {
                *v /= n;
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NewDocSplit {
    Existing,
    NewContent,
    NewSemantic,
}

impl fmt::Display for NewDocSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NewDocSplit::Existing => "existing",
            NewDocSplit::NewContent => "new-content",
            NewDocSplit::NewSemantic => "new-semantic",
        })
    }
}

/// Labels each `(key, id)` against the training documents and identifiers.
pub fn classify_new_docs(
    train_keys: &HashSet<String>,
    train_ids: &HashSet<DocId>,
    eval: &[(String, DocId)],
) -> Vec<NewDocSplit> {
    eval.iter()
        .map(|(key, id)| {
            if train_keys.contains(key) {
                NewDocSplit::Existing
            } else if train_ids.contains(id) {
                NewDocSplit::NewContent
            } else {
                NewDocSplit::NewSemantic
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub beam: usize,
    pub per_lookup: usize,
    pub per_query: usize,
    pub truncation: Truncation,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            beam: 10,
            per_lookup: DEFAULT_LIMIT,
            per_query: DEFAULT_LIMIT,
            truncation: Truncation::Prefix,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoreStats {
    pub documents: usize,
    pub unique_ids: usize,
    pub max_posting: usize,
}

impl StoreStats {
    pub fn of(store: &IdStore) -> Self {
        StoreStats {
            documents: store.num_docs(),
            unique_ids: store.unique_id_count(),
            max_posting: store.max_posting(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub overall: Metrics,
    pub splits: BTreeMap<String, Metrics>,
    pub beam: usize,
    pub config_hash: String,
    pub store: StoreStats,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Scores every query of `pairs` against its document key. Queries are
/// grouped by their split label (`all` when unset).
pub fn evaluate(
    ckpt: &Checkpoint,
    store: &IdStore,
    pairs: &[PairRecord],
    opts: &EvalOptions,
) -> Result<Report> {
    let decoder = ckpt.decoder()?;
    let bags: Vec<_> = pairs.iter().map(|r| ckpt.tokenize(&r.query)).collect();
    let e = crate::model::encode_batch(&ckpt.params, &bags)?;
    let mut scores = Vec::with_capacity(pairs.len());
    let mut split_scores: BTreeMap<String, (Vec<QueryScore>, usize)> = BTreeMap::new();
    let mut empty = 0;
    for (i, r) in pairs.iter().enumerate() {
        let is_empty = all_unknown(&bags[i]);
        let s = if is_empty {
            empty += 1;
            QueryScore::default()
        } else {
            let ids: Vec<DocId> = decoder
                .beam_search(e.row(i), opts.beam)?
                .into_iter()
                .map(|b| b.id)
                .collect();
            score(&RankedBuckets::expand(
                &ids,
                store,
                &r.key,
                opts.per_lookup,
                opts.per_query,
                opts.truncation,
            ))
        };
        let entry = split_scores
            .entry(r.split.clone().unwrap_or_else(|| "all".into()))
            .or_default();
        entry.0.push(s.clone());
        entry.1 += usize::from(is_empty);
        scores.push(s);
    }
    Ok(Report {
        overall: Metrics::aggregate(&scores, empty),
        splits: split_scores
            .into_iter()
            .map(|(k, (s, e))| (k, Metrics::aggregate(&s, e)))
            .collect(),
        beam: opts.beam,
        config_hash: ckpt.config_hash.clone(),
        store: StoreStats::of(store),
    })
}

/// Store of `docs` (`(key, text)`) under the identifiers `ckpt` assigns.
pub fn build_store(ckpt: &Checkpoint, docs: &[(String, String)]) -> Result<IdStore> {
    let texts: Vec<&str> = docs.iter().map(|(_, t)| t.as_str()).collect();
    let ids = ckpt.assign_docs(&texts)?;
    Ok(IdStore::build(
        ckpt.space(),
        ids.into_iter().zip(docs.iter().map(|(k, _)| k.clone())),
    ))
}
