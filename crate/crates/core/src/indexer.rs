//! Semantic indexing modules: dense representation to per-position code
//! distributions, in MLP, product-quantization and residual-quantization
//! flavours.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use diffcore::kernels;
use diffcore::{Graph, NodeId, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{DocId, IdSpace};
use crate::params::{normal, Bound, ParamStore};
use crate::seed;
use crate::sinkhorn::{Sinkhorn, SinkhornParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexerKind {
    Mlp,
    Pq,
    Rq,
}

impl FromStr for IndexerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(IndexerKind::Mlp),
            "pq" => Ok(IndexerKind::Pq),
            "rq" => Ok(IndexerKind::Rq),
            other => Err(Error::Config(format!(
                "unknown indexer `{other}` (mlp, pq or rq)"
            ))),
        }
    }
}

impl fmt::Display for IndexerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IndexerKind::Mlp => "mlp",
            IndexerKind::Pq => "pq",
            IndexerKind::Rq => "rq",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexerConfig {
    pub kind: IndexerKind,
    /// Hidden width of each per-position MLP.
    pub hidden: usize,
    pub dropout: f64,
    /// Start the MLP output layers at zero, which makes every row uniform.
    pub zero_init_output: bool,
    /// Standard deviation of the initial MLP logits.
    pub logit_scale: f64,
    pub sinkhorn: SinkhornParams,
}

impl Default for IndexerConfig {
    fn default() -> Self {
        IndexerConfig {
            kind: IndexerKind::Mlp,
            hidden: 128,
            dropout: 0.2,
            zero_init_output: false,
            logit_scale: 4.0,
            sinkhorn: SinkhornParams::default(),
        }
    }
}

/// Whether dropout is active, and the stream its masks come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64, step: u64 },
    Eval,
}

/// Output of [`Indexer::assign`] for a batch of representations.
pub struct Assignment {
    /// Per-position simplexes laid side by side: `[B, L * V]`.
    pub probs: NodeId,
    /// Quantized representations `[B, dim]` (PQ and RQ).
    pub quantized: Option<NodeId>,
    /// Mean over the batch of the squared reconstruction error (PQ and RQ).
    pub mse: Option<NodeId>,
    /// Slot-local code of the selected centroid per item and position (PQ and RQ).
    pub selected: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Indexer {
    pub cfg: IndexerConfig,
    pub space: IdSpace,
    pub dim: usize,
}

pub fn mlp_names(pos: usize) -> [String; 4] {
    [
        format!("idx.mlp{pos}.w1"),
        format!("idx.mlp{pos}.b1"),
        format!("idx.mlp{pos}.w2"),
        format!("idx.mlp{pos}.b2"),
    ]
}

pub fn codebook_name(kind: IndexerKind, pos: usize) -> String {
    match kind {
        IndexerKind::Pq => format!("idx.pq{pos}"),
        _ => format!("idx.rq{pos}"),
    }
}

impl Indexer {
    pub fn new(cfg: IndexerConfig, space: IdSpace, dim: usize) -> Result<Self> {
        if cfg.kind == IndexerKind::Pq && dim % space.length != 0 {
            return Err(Error::Config(format!(
                "dim {dim} is not divisible into {} groups",
                space.length
            )));
        }
        if !(cfg.logit_scale >= 0.0) {
            return Err(Error::Config(format!(
                "logit_scale {} must be non-negative",
                cfg.logit_scale
            )));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                cfg.dropout
            )));
        }
        if !(cfg.sinkhorn.epsilon > 0.0) || cfg.sinkhorn.iterations == 0 {
            return Err(Error::Config(
                "sinkhorn epsilon and iterations must be positive".into(),
            ));
        }
        Ok(Indexer { cfg, space, dim })
    }

    pub fn sub_dim(&self) -> usize {
        match self.cfg.kind {
            IndexerKind::Pq => self.dim / self.space.length,
            _ => self.dim,
        }
    }

    /// Adds initial parameters. Codebooks start random; [`Indexer::seed_codebooks`]
    /// replaces them from data.
    pub fn init_params(&self, seed: u64, store: &mut ParamStore) {
        let v = self.space.codes_per_slot;
        match self.cfg.kind {
            IndexerKind::Mlp => {
                for pos in 0..self.space.length {
                    let [w1, b1, w2, b2] = mlp_names(pos);
                    // Inputs have unit norm, so unit-variance weights give
                    // unit-variance pre-activations.
                    store.insert(
                        w1.clone(),
                        normal(seed, &w1, self.dim, self.cfg.hidden, 1.0),
                    );
                    store.insert(b1, Tensor::zeros(&[self.cfg.hidden]));
                    let out = if self.cfg.zero_init_output {
                        Tensor::zeros(&[self.cfg.hidden, v])
                    } else {
                        let std = self.cfg.logit_scale / (self.cfg.hidden as f64 / 2.0).sqrt();
                        normal(seed, &w2, self.cfg.hidden, v, std)
                    };
                    store.insert(w2, out);
                    store.insert(b2, Tensor::zeros(&[v]));
                }
            }
            kind => {
                let d = self.sub_dim();
                let scale = 1.0 / (d as f64).sqrt();
                for pos in 0..self.space.length {
                    let name = codebook_name(kind, pos);
                    store.insert(name.clone(), normal(seed, &name, v, d, scale));
                }
            }
        }
    }

    /// Maps representations `e` (`[B, dim]`) to code distributions.
    pub fn assign(&self, g: &mut Graph, p: &Bound, e: NodeId, mode: Mode) -> Result<Assignment> {
        let shape = g.shape(e).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Invalid(format!(
                "indexer expects [B, {}], got {shape:?}",
                self.dim
            )));
        }
        match self.cfg.kind {
            IndexerKind::Mlp => self.assign_mlp(g, p, e, mode),
            IndexerKind::Pq => self.assign_pq(g, p, e),
            IndexerKind::Rq => self.assign_rq(g, p, e),
        }
    }

    fn assign_mlp(&self, g: &mut Graph, p: &Bound, e: NodeId, mode: Mode) -> Result<Assignment> {
        let b = g.shape(e)[0];
        let mut rows = Vec::with_capacity(self.space.length);
        for pos in 0..self.space.length {
            let [w1, b1, w2, b2] = mlp_names(pos);
            let h = g.matmul(e, p.get(&w1)?)?;
            let h = g.add(h, p.get(&b1)?)?;
            let mut h = g.relu(h)?;
            if let Mode::Train { seed, step } = mode {
                if self.cfg.dropout > 0.0 {
                    let keep = 1.0 - self.cfg.dropout;
                    let mut rng = seed::rng(seed, &format!("dropout{pos}"), step);
                    let mask: Vec<f64> = (0..b * self.cfg.hidden)
                        .map(|_| {
                            if rng.gen::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let m = g.constant(Tensor::new(vec![b, self.cfg.hidden], mask)?)?;
                    h = g.mul(h, m)?;
                }
            }
            let z = g.matmul(h, p.get(&w2)?)?;
            let z = g.add(z, p.get(&b2)?)?;
            rows.push(g.softmax(z)?);
        }
        let probs = g.concat_cols(&rows)?;
        Ok(Assignment {
            probs,
            quantized: None,
            mse: None,
            selected: Vec::new(),
        })
    }

    /// Squared distances `[B, V]` between the rows of `x` and of `codebook`.
    fn cost(&self, g: &mut Graph, x: NodeId, codebook: NodeId) -> Result<NodeId> {
        let b = g.shape(x)[0];
        let v = g.shape(codebook)[0];
        let xx = g.square(x)?;
        let xx = g.sum_rows(xx)?;
        let xx = g.expand_cols(xx, v)?;
        let cc = g.square(codebook)?;
        let cc = g.sum_rows(cc)?;
        let cc = g.expand_rows(cc, b)?;
        let cross = g.matmul_nt(x, codebook)?;
        let cross = g.mul_scalar(cross, -2.0)?;
        let s = g.add(xx, cc)?;
        Ok(g.add(s, cross)?)
    }

    fn nearest(cost: &Tensor) -> Vec<usize> {
        (0..cost.rows())
            .map(|r| {
                let row = cost.row(r);
                let mut best = 0;
                for (j, &c) in row.iter().enumerate().skip(1) {
                    if c < row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    fn finish(
        &self,
        g: &mut Graph,
        e: NodeId,
        rows: Vec<NodeId>,
        quantized: NodeId,
        picks: Vec<Vec<usize>>,
    ) -> Result<Assignment> {
        let b = g.shape(e)[0];
        let probs = g.concat_cols(&rows)?;
        let diff = g.sub(e, quantized)?;
        let sq = g.square(diff)?;
        let total = g.sum(sq)?;
        let mse = g.mul_scalar(total, 1.0 / b as f64)?;
        let selected = (0..b)
            .map(|i| picks.iter().map(|p| p[i]).collect())
            .collect();
        Ok(Assignment {
            probs,
            quantized: Some(quantized),
            mse: Some(mse),
            selected,
        })
    }

    fn assign_pq(&self, g: &mut Graph, p: &Bound, e: NodeId) -> Result<Assignment> {
        let d = self.sub_dim();
        let op = Arc::new(Sinkhorn(self.cfg.sinkhorn));
        let mut rows = Vec::new();
        let mut parts = Vec::new();
        let mut picks = Vec::new();
        for pos in 0..self.space.length {
            let sub = g.slice_cols(e, pos * d, (pos + 1) * d)?;
            let cb = p.get(&codebook_name(IndexerKind::Pq, pos))?;
            let cost = self.cost(g, sub, cb)?;
            let k = Self::nearest(g.value(cost));
            rows.push(g.custom(op.clone(), &[cost])?);
            parts.push(g.gather_rows(cb, &k)?);
            picks.push(k);
        }
        let quantized = g.concat_cols(&parts)?;
        self.finish(g, e, rows, quantized, picks)
    }

    fn assign_rq(&self, g: &mut Graph, p: &Bound, e: NodeId) -> Result<Assignment> {
        let op = Arc::new(Sinkhorn(self.cfg.sinkhorn));
        let mut rows = Vec::new();
        let mut picks = Vec::new();
        let mut residual = e;
        let mut quantized: Option<NodeId> = None;
        for pos in 0..self.space.length {
            let cb = p.get(&codebook_name(IndexerKind::Rq, pos))?;
            let cost = self.cost(g, residual, cb)?;
            let k = Self::nearest(g.value(cost));
            rows.push(g.custom(op.clone(), &[cost])?);
            let sel = g.gather_rows(cb, &k)?;
            residual = g.sub(residual, sel)?;
            quantized = Some(match quantized {
                None => sel,
                Some(q) => g.add(q, sel)?,
            });
            picks.push(k);
        }
        let quantized = quantized.expect("at least one stage");
        self.finish(g, e, rows, quantized, picks)
    }

    /// Assigns a batch of stored representations without recording gradients.
    /// PQ and RQ use each chunk as the balancing context.
    pub fn assign_values(&self, store: &ParamStore, e: &Tensor, chunk: usize) -> Result<Tensor> {
        let mut out = Vec::with_capacity(e.rows() * self.space.num_codes());
        let n = e.rows();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut g = Graph::new();
            let p = store.bind(&mut g)?;
            let x = g.constant(Tensor::new(
                vec![end - start, e.cols()],
                e.data()[start * e.cols()..end * e.cols()].to_vec(),
            )?)?;
            let a = self.assign(&mut g, &p, x, Mode::Eval)?;
            out.extend_from_slice(g.value(a.probs).data());
            start = end;
        }
        Ok(Tensor::new(vec![n, self.space.num_codes()], out)?)
    }

    /// Replaces codebooks with k-means++ seeds drawn from `e` followed by a
    /// few Lloyd refinements. RQ seeds each stage on the residuals of the
    /// previous ones.
    pub fn seed_codebooks(
        &self,
        store: &mut ParamStore,
        e: &Tensor,
        seed: u64,
        lloyd_iters: usize,
    ) -> Result<()> {
        if self.cfg.kind == IndexerKind::Mlp {
            return Ok(());
        }
        let d = self.sub_dim();
        let v = self.space.codes_per_slot;
        let mut residual = e.clone();
        for pos in 0..self.space.length {
            let points: Vec<Vec<f64>> = (0..e.rows())
                .map(|r| match self.cfg.kind {
                    IndexerKind::Pq => e.row(r)[pos * d..(pos + 1) * d].to_vec(),
                    _ => residual.row(r).to_vec(),
                })
                .collect();
            let mut rng = seed::rng(seed, "kmeans", pos as u64);
            let mut centroids = kmeans_pp(&points, v, &mut rng);
            lloyd(&points, &mut centroids, lloyd_iters);
            if self.cfg.kind == IndexerKind::Rq {
                let assign = nearest_rows(&points, &centroids);
                for (r, &k) in assign.iter().enumerate() {
                    for (x, c) in residual.row_mut(r).iter_mut().zip(&centroids[k]) {
                        *x -= c;
                    }
                }
            }
            let flat: Vec<f64> = centroids.into_iter().flatten().collect();
            *store.get_mut(&codebook_name(self.cfg.kind, pos))? = Tensor::new(vec![v, d], flat)?;
        }
        Ok(())
    }

    /// Sets centroid `k` of position `pos` to `value`.
    pub fn reseed_centroid(
        &self,
        store: &mut ParamStore,
        pos: usize,
        k: usize,
        value: &[f64],
    ) -> Result<()> {
        let t = store.get_mut(&codebook_name(self.cfg.kind, pos))?;
        t.row_mut(k).copy_from_slice(value);
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid per point; ties resolve to the lowest index.
pub fn nearest_rows(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (k, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect()
}

/// k-means++ seeding. With fewer distinct points than `k`, the remaining
/// centroids are copies of sampled points.
pub fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    assert!(!points.is_empty(), "k-means++ needs points");
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd refinement. Every pass ends with centroids at the means of their
/// clusters; empty clusters keep their position.
pub fn lloyd(points: &[Vec<f64>], centroids: &mut [Vec<f64>], iters: usize) {
    let d = centroids.first().map_or(0, Vec::len);
    for _ in 0..iters {
        let assign = nearest_rows(points, centroids);
        let mut sums = vec![vec![0.0; d]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &k) in points.iter().zip(&assign) {
            counts[k] += 1;
            for (s, x) in sums[k].iter_mut().zip(p) {
                *s += x;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|x| x / n as f64).collect();
            }
        }
    }
}

/// Identifier of one distribution laid out as `L * V` values.
pub fn to_docid(space: &IdSpace, probs: &[f64]) -> DocId {
    let v = space.codes_per_slot;
    DocId(
        (0..space.length)
            .map(|pos| space.code(pos, kernels::argmax(&probs[pos * v..(pos + 1) * v])))
            .collect(),
    )
}

/// Identifiers of every row of a `[B, L * V]` tensor.
pub fn to_docids(space: &IdSpace, probs: &Tensor) -> Vec<DocId> {
    (0..probs.rows())
        .map(|r| to_docid(space, probs.row(r)))
        .collect()
}
