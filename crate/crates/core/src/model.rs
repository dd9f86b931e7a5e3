//! Bag-of-words encoder and the autoregressive identifier decoder.

use std::cmp::Ordering;

use diffcore::kernels::{self, gemm, Trans};
use diffcore::{Graph, NodeId, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{DocId, IdSpace};
use crate::params::{glorot, normal, Bound, ParamStore};
use crate::textdata::TokenSeq;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder word vocabulary, including the unknown word.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    /// Width of the dense bottleneck.
    pub dim: usize,
    pub dec_hidden: usize,
    /// Width of an extra tanh layer between the query representation and
    /// the decoder; 0 leaves it out.
    pub dec_pre_hidden: usize,
    pub max_length: usize,
    pub id_length: usize,
    pub codes_per_slot: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            embed_dim: 128,
            enc_hidden: 256,
            dim: 128,
            dec_hidden: 256,
            dec_pre_hidden: 0,
            max_length: 32,
            id_length: 4,
            codes_per_slot: 256,
        }
    }
}

impl ModelConfig {
    pub fn id_space(&self) -> IdSpace {
        IdSpace {
            length: self.id_length,
            codes_per_slot: self.codes_per_slot,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("enc_hidden", self.enc_hidden),
            ("dim", self.dim),
            ("dec_hidden", self.dec_hidden),
            ("max_length", self.max_length),
            ("id_length", self.id_length),
            ("codes_per_slot", self.codes_per_slot),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

pub const ENC_EMB: &str = "enc.emb";
pub const ENC_W1: &str = "enc.w1";
pub const ENC_B1: &str = "enc.b1";
pub const ENC_W2: &str = "enc.w2";
pub const ENC_B2: &str = "enc.b2";
pub const DEC_PRE_W: &str = "dec.pre_w";
pub const DEC_PRE_B: &str = "dec.pre_b";
pub const DEC_COND_W: &str = "dec.cond_w";
pub const DEC_COND_B: &str = "dec.cond_b";
pub const DEC_EMB: &str = "dec.emb";
pub const DEC_OUT_W: &str = "dec.out_w";
pub const DEC_OUT_B: &str = "dec.out_b";

/// Adds freshly initialized encoder and decoder parameters to `store`.
pub fn init_params(cfg: &ModelConfig, seed: u64, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    let space = cfg.id_space();
    let vocab = space.vocab_size();
    store.insert(
        ENC_EMB,
        normal(seed, ENC_EMB, cfg.vocab_size, cfg.embed_dim, 1.0),
    );
    store.insert(
        ENC_W1,
        glorot(seed, ENC_W1, cfg.embed_dim, cfg.enc_hidden, 1.0),
    );
    store.insert(ENC_B1, Tensor::zeros(&[cfg.enc_hidden]));
    store.insert(ENC_W2, glorot(seed, ENC_W2, cfg.enc_hidden, cfg.dim, 1.0));
    store.insert(ENC_B2, Tensor::zeros(&[cfg.dim]));
    let mut cond_in = cfg.dim;
    if cfg.dec_pre_hidden > 0 {
        store.insert(
            DEC_PRE_W,
            glorot(seed, DEC_PRE_W, cfg.dim, cfg.dec_pre_hidden, 1.0),
        );
        store.insert(DEC_PRE_B, Tensor::zeros(&[cfg.dec_pre_hidden]));
        cond_in = cfg.dec_pre_hidden;
    }
    store.insert(
        DEC_COND_W,
        glorot(seed, DEC_COND_W, cond_in, cfg.dec_hidden, 1.0),
    );
    store.insert(DEC_COND_B, Tensor::zeros(&[cfg.dec_hidden]));
    // bos, codes and eos, followed by one marker row per position.
    store.insert(
        DEC_EMB,
        normal(seed, DEC_EMB, vocab + space.length, cfg.dec_hidden, 0.1),
    );
    store.insert(
        DEC_OUT_W,
        glorot(seed, DEC_OUT_W, cfg.dec_hidden, vocab, 1.0),
    );
    store.insert(DEC_OUT_B, Tensor::zeros(&[vocab]));
    Ok(())
}

/// Records the encoder up to, but excluding, the normalization: `[B, dim]`.
pub fn encode_raw(g: &mut Graph, p: &Bound, bags: &[TokenSeq]) -> Result<NodeId> {
    let x = g.embedding_bag_mean(p.get(ENC_EMB)?, bags)?;
    let h = g.matmul(x, p.get(ENC_W1)?)?;
    let h = g.add(h, p.get(ENC_B1)?)?;
    let h = g.tanh(h)?;
    let y = g.matmul(h, p.get(ENC_W2)?)?;
    Ok(g.add(y, p.get(ENC_B2)?)?)
}

/// Unit-norm dense representations `[B, dim]`.
pub fn encode(g: &mut Graph, p: &Bound, bags: &[TokenSeq]) -> Result<NodeId> {
    let raw = encode_raw(g, p, bags)?;
    Ok(g.l2_normalize(raw)?)
}

/// Encodes without recording gradients for later use, in chunks.
pub fn encode_batch(store: &ParamStore, bags: &[TokenSeq]) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut dim = 0;
    for chunk in bags.chunks(1024) {
        let mut g = Graph::new();
        let p = store.bind(&mut g)?;
        let e = encode(&mut g, &p, chunk)?;
        dim = g.shape(e)[1];
        rows.extend_from_slice(g.value(e).data());
    }
    Ok(Tensor::new(vec![bags.len(), dim], rows)?)
}

fn position_marker(space: &IdSpace, pos: usize) -> usize {
    space.vocab_size() + pos
}

/// Teacher-forced logits over the full decoder vocabulary. Rows are grouped
/// by position: row `i * B + b` predicts code `i` of item `b` from its gold
/// prefix. Shape `[L * B, vocab]`.
pub fn teacher_forced_logits(
    g: &mut Graph,
    p: &Bound,
    space: &IdSpace,
    e_q: NodeId,
    gold: &[DocId],
) -> Result<NodeId> {
    let b = gold.len();
    if g.shape(e_q)[0] != b {
        return Err(Error::Invalid(format!(
            "{} queries but {} gold ids",
            g.shape(e_q)[0],
            b
        )));
    }
    let mut x = e_q;
    if p.contains(DEC_PRE_W) {
        let h = g.matmul(e_q, p.get(DEC_PRE_W)?)?;
        let h = g.add(h, p.get(DEC_PRE_B)?)?;
        x = g.tanh(h)?;
    }
    let cond = g.matmul(x, p.get(DEC_COND_W)?)?;
    let cond = g.add(cond, p.get(DEC_COND_B)?)?;
    let emb = p.get(DEC_EMB)?;
    let mut steps = Vec::with_capacity(space.length);
    for pos in 0..space.length {
        let bags: Vec<Vec<usize>> = gold
            .iter()
            .map(|id| {
                let mut bag = Vec::with_capacity(pos + 2);
                bag.push(space.bos());
                bag.extend(id.codes()[..pos].iter().map(|&c| c as usize));
                bag.push(position_marker(space, pos));
                bag
            })
            .collect();
        let mean = g.embedding_bag_mean(emb, &bags)?;
        let sum = g.mul_scalar(mean, (pos + 2) as f64)?;
        steps.push(g.add(cond, sum)?);
    }
    let z = g.concat_rows(&steps)?;
    let h = g.tanh(z)?;
    let logits = g.matmul(h, p.get(DEC_OUT_W)?)?;
    Ok(g.add(logits, p.get(DEC_OUT_B)?)?)
}

/// Read-only decoder evaluation over plain arrays.
pub struct Decoder<'a> {
    space: IdSpace,
    pre: Option<(&'a Tensor, &'a Tensor)>,
    cond_w: &'a Tensor,
    cond_b: &'a Tensor,
    emb: &'a Tensor,
    out_w: &'a Tensor,
    out_b: &'a Tensor,
}

/// Ranked beam output.
#[derive(Clone, Debug, PartialEq)]
pub struct Beam {
    pub id: DocId,
    pub log_prob: f64,
}

fn beam_order(a: &(Vec<u32>, f64), b: &(Vec<u32>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

impl<'a> Decoder<'a> {
    pub fn new(store: &'a ParamStore, space: IdSpace) -> Result<Self> {
        let pre = match store.contains(DEC_PRE_W) {
            true => Some((store.get(DEC_PRE_W)?, store.get(DEC_PRE_B)?)),
            false => None,
        };
        Ok(Decoder {
            space,
            pre,
            cond_w: store.get(DEC_COND_W)?,
            cond_b: store.get(DEC_COND_B)?,
            emb: store.get(DEC_EMB)?,
            out_w: store.get(DEC_OUT_W)?,
            out_b: store.get(DEC_OUT_B)?,
        })
    }

    pub fn space(&self) -> &IdSpace {
        &self.space
    }

    /// Conditioning vector of one query representation.
    pub fn condition(&self, e_q: &[f64]) -> Result<Vec<f64>> {
        let expect = self.pre.map_or(self.cond_w.rows(), |(w, _)| w.rows());
        if e_q.len() != expect {
            return Err(Error::Invalid(format!(
                "query representation has {} values, expected {expect}",
                e_q.len()
            )));
        }
        let mut pre_out;
        let mut e_q = e_q;
        if let Some((w, b)) = self.pre {
            pre_out = b.data().to_vec();
            gemm(
                1.0,
                e_q,
                (1, expect),
                Trans::No,
                w.data(),
                (expect, pre_out.len()),
                Trans::No,
                1.0,
                &mut pre_out,
            );
            pre_out.iter_mut().for_each(|v| *v = v.tanh());
            e_q = &pre_out;
        }
        let dim = self.cond_w.rows();
        let mut out = self.cond_b.data().to_vec();
        gemm(
            1.0,
            e_q,
            (1, dim),
            Trans::No,
            self.cond_w.data(),
            (dim, out.len()),
            Trans::No,
            1.0,
            &mut out,
        );
        Ok(out)
    }

    fn hidden(&self, cond: &[f64], prefix: &[u32]) -> Vec<f64> {
        let mut z = cond.to_vec();
        let rows = std::iter::once(self.space.bos())
            .chain(prefix.iter().map(|&c| c as usize))
            .chain(std::iter::once(position_marker(&self.space, prefix.len())));
        for r in rows {
            for (o, x) in z.iter_mut().zip(self.emb.row(r)) {
                *o += x;
            }
        }
        z.iter_mut().for_each(|v| *v = v.tanh());
        z
    }

    /// Logits of columns `start..end` for the state `(cond, prefix)`.
    fn logits_range(&self, cond: &[f64], prefix: &[u32], start: usize, end: usize) -> Vec<f64> {
        let h = self.hidden(cond, prefix);
        let mut out = self.out_b.data()[start..end].to_vec();
        for (j, &hj) in h.iter().enumerate() {
            let w = &self.out_w.row(j)[start..end];
            for (o, x) in out.iter_mut().zip(w) {
                *o += hj * x;
            }
        }
        out
    }

    /// Next-code distribution over the whole vocabulary. With `masked`, only
    /// the slice of the next position keeps mass.
    pub fn distribution(&self, cond: &[f64], prefix: &[u32], masked: bool) -> Result<Vec<f64>> {
        let pos = prefix.len();
        if pos >= self.space.length {
            return Err(Error::Invalid(format!("prefix already holds {pos} codes")));
        }
        for (i, &c) in prefix.iter().enumerate() {
            if !self.space.contains(i, c) {
                return Err(Error::Invalid(format!("prefix code {c} outside slot {i}")));
            }
        }
        let vocab = self.space.vocab_size();
        if !masked {
            let mut row = self.logits_range(cond, prefix, 0, vocab);
            kernels::softmax_in_place(&mut row);
            return Ok(row);
        }
        let (s, e) = (
            self.space.slot_start(pos) as usize,
            self.space.slot_end(pos) as usize + 1,
        );
        let mut slice = self.logits_range(cond, prefix, s, e);
        kernels::softmax_in_place(&mut slice);
        let mut row = vec![0.0; vocab];
        row[s..e].copy_from_slice(&slice);
        Ok(row)
    }

    /// Masked log-probabilities of the next position's slice.
    fn slice_log_probs(&self, cond: &[f64], prefix: &[u32]) -> Vec<f64> {
        let pos = prefix.len();
        let (s, e) = (
            self.space.slot_start(pos) as usize,
            self.space.slot_end(pos) as usize + 1,
        );
        let mut row = self.logits_range(cond, prefix, s, e);
        let lse = kernels::log_sum_exp(&row);
        row.iter_mut().for_each(|v| *v -= lse);
        row
    }

    /// Beam search under the slice mask. Once all positions are filled the
    /// only admissible token is `eos`, which then has probability one.
    pub fn beam_search(&self, e_q: &[f64], beam: usize) -> Result<Vec<Beam>> {
        if beam == 0 {
            return Err(Error::Invalid("beam must be at least 1".into()));
        }
        let cond = self.condition(e_q)?;
        let mut beams: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
        for pos in 0..self.space.length {
            let mut cand = Vec::with_capacity(beams.len() * self.space.codes_per_slot);
            for (prefix, lp) in &beams {
                let row = self.slice_log_probs(&cond, prefix);
                for (k, &l) in row.iter().enumerate() {
                    let mut codes = prefix.clone();
                    codes.push(self.space.code(pos, k));
                    cand.push((codes, lp + l));
                }
            }
            let keep = beam.min(cand.len());
            if keep < cand.len() {
                cand.select_nth_unstable_by(keep - 1, beam_order);
                cand.truncate(keep);
            }
            cand.sort_by(beam_order);
            beams = cand;
        }
        Ok(beams
            .into_iter()
            .map(|(codes, lp)| Beam {
                id: DocId(codes),
                log_prob: lp,
            })
            .collect())
    }

    /// Argmax at every step; ties resolve to the lowest code.
    pub fn greedy(&self, e_q: &[f64]) -> Result<Beam> {
        let cond = self.condition(e_q)?;
        let mut codes = Vec::with_capacity(self.space.length);
        let mut lp = 0.0;
        for pos in 0..self.space.length {
            let row = self.slice_log_probs(&cond, &codes);
            let k = kernels::argmax(&row);
            lp += row[k];
            codes.push(self.space.code(pos, k));
        }
        Ok(Beam {
            id: DocId(codes),
            log_prob: lp,
        })
    }

    /// Masked log-probability of a complete identifier.
    pub fn sequence_log_prob(&self, e_q: &[f64], id: &DocId) -> Result<f64> {
        self.space.validate(id)?;
        let cond = self.condition(e_q)?;
        let mut lp = 0.0;
        for pos in 0..self.space.length {
            let row = self.slice_log_probs(&cond, &id.codes()[..pos]);
            lp += row[self.space.local(pos, id.codes()[pos])];
        }
        Ok(lp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig {
            vocab_size: 20,
            embed_dim: 8,
            enc_hidden: 8,
            dim: 6,
            dec_hidden: 8,
            dec_pre_hidden: 0,
            max_length: 8,
            id_length: 2,
            codes_per_slot: 4,
        };
        let mut store = ParamStore::new();
        init_params(&cfg, 3, &mut store).unwrap();
        (cfg, store)
    }

    #[test]
    fn encoder_output_is_unit_norm() {
        let (_, store) = tiny();
        let e = encode_batch(&store, &[vec![1, 2, 3], vec![4]]).unwrap();
        for r in 0..2 {
            let n: f64 = e.row(r).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_distribution_support() {
        let (cfg, store) = tiny();
        let dec = Decoder::new(&store, cfg.id_space()).unwrap();
        let cond = dec.condition(&[0.1, 0.2, 0.3, 0.1, 0.0, -0.4]).unwrap();
        let row = dec.distribution(&cond, &[2], true).unwrap();
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (i, &p) in row.iter().enumerate() {
            assert_eq!(p > 0.0, (5..=8).contains(&i), "index {i}");
        }
        assert!(dec.distribution(&cond, &[2, 6], true).is_err());
    }
}
