//! Optimization loop, schedules and checkpoints.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use diffcore::{Graph, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LrDecay, TrainConfig};
use crate::criteria::{self, Aux, LossBreakdown};
use crate::error::{Error, Result};
use crate::fsio;
use crate::ids::{DocId, IdSpace};
use crate::indexer::{self, Indexer, IndexerKind, Mode};
use crate::model::{self, Decoder, ModelConfig};
use crate::params::{read_bytes, read_u64, ParamStore};
use crate::seed;
use crate::textdata::{make_batches, pseudo_queries, Batch, PairRecord, TokenSeq, Vocab};

/// `0.01` at step 0 rising linearly to `target` at `steps_per_epoch`.
pub fn lambda_schedule(step: u64, steps_per_epoch: u64, target: f64) -> f64 {
    if steps_per_epoch == 0 || step >= steps_per_epoch {
        return target;
    }
    0.01 + (target - 0.01) * step as f64 / steps_per_epoch as f64
}

/// Linear warmup from zero, then constant.
pub fn lr_schedule(step: u64, warmup: u64, base_lr: f64) -> f64 {
    if step >= warmup {
        base_lr
    } else {
        base_lr * step as f64 / warmup as f64
    }
}

pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    let warmup = cfg.warmup();
    let lr = lr_schedule(step, warmup, cfg.lr);
    match cfg.lr_decay {
        LrDecay::Constant => lr,
        LrDecay::Cosine if step < warmup => lr,
        LrDecay::Cosine => {
            let span = (cfg.steps - warmup).max(1) as f64;
            let t = ((step - warmup) as f64 / span).min(1.0);
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// First and second moments per parameter, plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl OptState {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let mut m = ParamStore::new();
        for (name, t) in params.iter() {
            m.insert(name, Tensor::zeros(t.shape()));
        }
        OptState {
            t: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One decoupled-weight-decay Adam update. Parameters without a gradient
/// are treated as having a zero gradient.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptState,
    opt: &AdamW,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - opt.beta1.powi(state.t as i32);
    let bc2 = 1.0 - opt.beta2.powi(state.t as i32);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let m = state.m.get_mut(&name)?;
        let v = state.v.get_mut(&name)?;
        let p = params.get_mut(&name)?;
        let g = grads.get(&name);
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::Invalid(format!(
                    "gradient of {name} has shape {:?}",
                    g.shape()
                )));
            }
        }
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = opt.beta1 * m.data()[i] + (1.0 - opt.beta1) * gi;
            let vi = opt.beta2 * v.data()[i] + (1.0 - opt.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let step = (mi / bc1) / ((vi / bc2).sqrt() + opt.eps) + opt.weight_decay * p.data()[i];
            p.data_mut()[i] -= lr * step;
        }
    }
    Ok(())
}

/// Scales gradients down to `max_norm` when their global norm exceeds it.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

const MAGIC: &[u8; 8] = b"GRCKPT01";

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    vocab: Vocab,
    step: u64,
    config_hash: String,
    seed: u64,
}

/// Everything needed to continue training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub opt: OptState,
    /// Per position, how often each centroid was selected this epoch.
    pub usage: Vec<Vec<u64>>,
    pub step: u64,
    pub config_hash: String,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.params.to_bytes());
        out.extend_from_slice(&self.opt.t.to_le_bytes());
        out.extend_from_slice(&self.opt.m.to_bytes());
        out.extend_from_slice(&self.opt.v.to_bytes());
        out.extend_from_slice(&(self.usage.len() as u64).to_le_bytes());
        for row in &self.usage {
            out.extend_from_slice(&(row.len() as u64).to_le_bytes());
            for c in row {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut buf = bytes;
        if read_bytes(&mut buf, MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let n = read_u64(&mut buf)? as usize;
        let header: Header = serde_json::from_slice(read_bytes(&mut buf, n)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let params = ParamStore::from_bytes(&mut buf)?;
        let t = read_u64(&mut buf)?;
        let m = ParamStore::from_bytes(&mut buf)?;
        let v = ParamStore::from_bytes(&mut buf)?;
        let positions = read_u64(&mut buf)? as usize;
        let mut usage = Vec::with_capacity(positions.min(1024));
        for _ in 0..positions {
            let k = read_u64(&mut buf)? as usize;
            let mut row = Vec::with_capacity(k.min(1 << 20));
            for _ in 0..k {
                row.push(read_u64(&mut buf)?);
            }
            usage.push(row);
        }
        if !buf.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len())));
        }
        if header.config.hash() != header.config_hash {
            return Err(Error::Checkpoint(
                "config hash does not match the stored config".into(),
            ));
        }
        Ok(Checkpoint {
            config: header.config,
            vocab: header.vocab,
            params,
            opt: OptState { t, m, v },
            usage,
            step: header.step,
            config_hash: header.config_hash,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        self.config.model_config(self.vocab.len())
    }

    pub fn space(&self) -> IdSpace {
        self.model_config().id_space()
    }

    pub fn indexer(&self) -> Result<Indexer> {
        Indexer::new(self.config.indexer_config(), self.space(), self.config.dim)
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        self.vocab.tokenize(text, self.config.max_length)
    }

    /// Unit-norm representations of `texts`, one row each.
    pub fn encode_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Tensor> {
        let bags: Vec<TokenSeq> = texts.iter().map(|t| self.tokenize(t.as_ref())).collect();
        model::encode_batch(&self.params, &bags)
    }

    /// Identifiers of documents; PQ and RQ balance within chunks of the
    /// training batch size, in input order.
    pub fn assign_docs<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<DocId>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let e = self.encode_texts(texts)?;
        let probs = self
            .indexer()?
            .assign_values(&self.params, &e, self.config.batch_size)?;
        Ok(indexer::to_docids(&self.space(), &probs))
    }

    pub fn decoder(&self) -> Result<Decoder<'_>> {
        Decoder::new(&self.params, self.space())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clamped: usize,
    pub unique_ids: usize,
    pub probe_size: usize,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("record serializes");
        s.push('\n');
        s
    }
}

/// Result of one optimization step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
    pub clamped: usize,
    pub gold: Vec<DocId>,
}

pub struct Trainer {
    cfg: TrainConfig,
    vocab: Vocab,
    space: IdSpace,
    indexer: Indexer,
    q_tok: Vec<TokenSeq>,
    d_tok: Vec<TokenSeq>,
    records: Vec<PairRecord>,
    probe: Vec<TokenSeq>,
    batches_per_epoch: u64,
    steps_per_epoch: u64,
    epoch_cache: Option<(u64, Vec<Batch>)>,
    params: ParamStore,
    opt: OptState,
    usage: Vec<Vec<u64>>,
    step: u64,
}

fn usable(batches: Vec<Batch>) -> Vec<Batch> {
    batches.into_iter().filter(|b| b.len() >= 2).collect()
}

impl Trainer {
    /// Fresh model on `records`. The vocabulary is built from them.
    pub fn new(cfg: TrainConfig, records: Vec<PairRecord>) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::build(
            records
                .iter()
                .flat_map(|r| [r.query.as_str(), r.doc.as_str()]),
            cfg.vocab_min_count,
            cfg.vocab_max_size,
        );
        let mut t = Self::assemble(cfg, vocab, records)?;
        let mcfg = t.cfg.model_config(t.vocab.len());
        model::init_params(&mcfg, t.cfg.seed, &mut t.params)?;
        t.indexer.init_params(t.cfg.seed, &mut t.params);
        if t.cfg.indexer != IndexerKind::Mlp {
            t.seed_codebooks()?;
        }
        t.opt = OptState::zeros_like(&t.params);
        Ok(t)
    }

    /// Continues from `ckpt` on the same corpus. `steps` may extend the run.
    pub fn resume(ckpt: Checkpoint, records: Vec<PairRecord>, steps: Option<u64>) -> Result<Self> {
        let mut cfg = ckpt.config.clone();
        if let Some(s) = steps {
            cfg.steps = s;
        }
        if ckpt.step > cfg.steps {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at step {} beyond {}",
                ckpt.step, cfg.steps
            )));
        }
        let mut t = Self::assemble(cfg, ckpt.vocab, records)?;
        t.params = ckpt.params;
        t.opt = ckpt.opt;
        t.usage = ckpt.usage;
        t.step = ckpt.step;
        Ok(t)
    }

    fn assemble(cfg: TrainConfig, vocab: Vocab, mut records: Vec<PairRecord>) -> Result<Self> {
        if records.len() < 2 {
            return Err(Error::Data(format!(
                "training needs at least 2 pairs, got {}",
                records.len()
            )));
        }
        if cfg.pseudo_queries > 0 {
            let extra = pseudo_queries(
                &records,
                cfg.pseudo_queries,
                cfg.pseudo_min_words,
                cfg.pseudo_max_words,
                cfg.seed,
            );
            records.extend(extra);
        }
        let space = cfg.model_config(vocab.len()).id_space();
        let indexer = Indexer::new(cfg.indexer_config(), space, cfg.dim)?;
        let q_tok = records
            .iter()
            .map(|r| vocab.tokenize(&r.query, cfg.max_length))
            .collect();
        let d_tok: Vec<TokenSeq> = records
            .iter()
            .map(|r| vocab.tokenize(&r.doc, cfg.max_length))
            .collect();
        let mut seen = HashSet::new();
        let probe = records
            .iter()
            .zip(&d_tok)
            .filter(|(r, _)| seen.insert(r.key.as_str()))
            .take(cfg.probe_size)
            .map(|(_, t)| t.clone())
            .collect();
        let batches_per_epoch =
            usable(make_batches(&records, cfg.batch_size, cfg.seed, 0)?).len() as u64;
        if batches_per_epoch == 0 {
            return Err(Error::Data("no batch of at least 2 pairs".into()));
        }
        let steps_per_epoch = cfg.steps_per_epoch.unwrap_or(batches_per_epoch);
        let usage = match cfg.indexer {
            IndexerKind::Mlp => Vec::new(),
            _ => vec![vec![0; space.codes_per_slot]; space.length],
        };
        Ok(Trainer {
            cfg,
            vocab,
            space,
            indexer,
            q_tok,
            d_tok,
            records,
            probe,
            batches_per_epoch,
            steps_per_epoch,
            epoch_cache: None,
            params: ParamStore::new(),
            opt: OptState {
                t: 0,
                m: ParamStore::new(),
                v: ParamStore::new(),
            },
            usage,
            step: 0,
        })
    }

    fn seed_codebooks(&mut self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut bags = Vec::new();
        for b in self.batches(0)? {
            for &i in &b.items {
                if seen.insert(self.records[i].key.clone()) {
                    bags.push(self.d_tok[i].clone());
                }
            }
        }
        let e = model::encode_batch(&self.params, &bags)?;
        self.indexer
            .seed_codebooks(&mut self.params, &e, self.cfg.seed, self.cfg.lloyd_iters)
    }

    fn batches(&mut self, epoch: u64) -> Result<Vec<Batch>> {
        if let Some((e, b)) = &self.epoch_cache {
            if *e == epoch {
                return Ok(b.clone());
            }
        }
        let b = usable(make_batches(
            &self.records,
            self.cfg.batch_size,
            self.cfg.seed,
            epoch,
        )?);
        self.epoch_cache = Some((epoch, b.clone()));
        Ok(b)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            opt: self.opt.clone(),
            usage: self.usage.clone(),
            step: self.step,
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
        }
    }

    /// Runs one step. On a non-finite loss or gradient the state is left
    /// untouched and [`Error::Diverged`] is returned.
    pub fn step(&mut self) -> Result<StepReport> {
        let s = self.step;
        let epoch = s / self.batches_per_epoch;
        let batch = self.batches(epoch)?[(s % self.batches_per_epoch) as usize].clone();
        let diverged = |detail: String| Error::Diverged { step: s, detail };
        let (report, grads, e_d, selected) = match self.forward_backward(s, &batch) {
            Err(Error::Diff(diffcore::DiffError::NonFinite { op })) => {
                return Err(diverged(format!("non-finite value produced by {op}")))
            }
            other => other?,
        };
        if !report.loss.total.is_finite() {
            return Err(diverged(format!("{:?}", report.loss)));
        }
        let mut grads = grads;
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(diverged("non-finite gradient norm".into()));
        }
        adamw_step(
            &mut self.params,
            &grads,
            &mut self.opt,
            &AdamW::from_config(&self.cfg),
            report.lr,
        )?;
        for sel in &selected {
            for (pos, &k) in sel.iter().enumerate() {
                self.usage[pos][k] += 1;
            }
        }
        self.step += 1;
        if !self.usage.is_empty()
            && self.steps_per_epoch > 0
            && self.step % self.steps_per_epoch == 0
        {
            self.reseed_dead(&e_d)?;
        }
        Ok(StepReport {
            grad_norm,
            ..report
        })
    }

    fn forward_backward(
        &self,
        s: u64,
        batch: &Batch,
    ) -> Result<(
        StepReport,
        BTreeMap<String, Tensor>,
        Tensor,
        Vec<Vec<usize>>,
    )> {
        let cfg = &self.cfg;
        let b = batch.len();
        let groups = &batch.groups;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let bags: Vec<TokenSeq> = batch
            .items
            .iter()
            .map(|&i| self.q_tok[i].clone())
            .chain(batch.items.iter().map(|&i| self.d_tok[i].clone()))
            .collect();
        let e = model::encode(&mut g, &p, &bags)?;
        let e_q = g.slice_rows(e, 0, b)?;
        let e_d = g.slice_rows(e, b, 2 * b)?;
        let a_d = self.indexer.assign(
            &mut g,
            &p,
            e_d,
            Mode::Train {
                seed: cfg.seed,
                step: 2 * s,
            },
        )?;
        let a_q = self.indexer.assign(
            &mut g,
            &p,
            e_q,
            Mode::Train {
                seed: cfg.seed,
                step: 2 * s + 1,
            },
        )?;
        let gold = indexer::to_docids(&self.space, g.value(a_d.probs));
        let lambda = lambda_schedule(s, self.steps_per_epoch, cfg.lambda);
        let hyper = cfg.hyper();
        let l_c = criteria::contrastive_id_loss(&mut g, a_q.probs, a_d.probs, groups, cfg.alpha)?;
        let logits = model::teacher_forced_logits(&mut g, &p, &self.space, e_q, &gold)?;
        let (l_ce, clamped) = criteria::generation_loss(&mut g, logits, &gold, &self.space)?;
        let mut parts = LossBreakdown {
            lambda,
            di_active: cfg.active(Aux::Di),
            bot_active: cfg.active(Aux::Bot),
            ib_active: cfg.active(Aux::Ib),
            quant_active: a_d.mse.is_some(),
            ..LossBreakdown::default()
        };
        let mut total = g.add(l_c, l_ce)?;
        let mut aux = Vec::new();
        if parts.di_active {
            let d1 =
                criteria::density_loss(&mut g, a_d.probs, groups, &self.space, hyper.weight_mode)?;
            let d2 =
                criteria::density_loss(&mut g, a_q.probs, groups, &self.space, hyper.weight_mode)?;
            let di = g.add(d1, d2)?;
            parts.l_di = g.value(di).item()?;
            aux.push(di);
        }
        if parts.bot_active {
            let bot = criteria::bottleneck_loss(&mut g, e_q, e_d, groups, cfg.gamma)?;
            parts.l_bot = g.value(bot).item()?;
            aux.push(bot);
        }
        if parts.ib_active {
            let ib = criteria::ib_loss(&mut g, e_d, cfg.sigma0, cfg.beta)?;
            parts.l_ib = g.value(ib).item()?;
            aux.push(ib);
        }
        for a in aux {
            let w = g.mul_scalar(a, lambda)?;
            total = g.add(total, w)?;
        }
        if let (Some(md), Some(mq)) = (a_d.mse, a_q.mse) {
            let q = g.add(md, mq)?;
            parts.l_quant = g.value(q).item()?;
            let w = g.mul_scalar(q, cfg.quant_weight)?;
            total = g.add(total, w)?;
        }
        parts.l_c = g.value(l_c).item()?;
        parts.l_ce = g.value(l_ce).item()?;
        parts.total = g.value(total).item()?;

        let selected: Vec<Vec<usize>> = a_d.selected.into_iter().chain(a_q.selected).collect();

        let mut grads = BTreeMap::new();
        if parts.total.is_finite() {
            let gr = g.backward(total)?;
            for (name, id) in p.iter() {
                if let Some(t) = gr.get(id) {
                    if !t.is_finite() {
                        return Err(Error::Diverged {
                            step: s,
                            detail: format!("non-finite gradient for {name}"),
                        });
                    }
                    grads.insert(name.to_string(), t.clone());
                }
            }
        }
        let e_d_val = g.value(e_d).clone();
        let lr = lr_at(cfg, s);
        Ok((
            StepReport {
                loss: parts,
                lr,
                grad_norm: 0.0,
                clamped,
                gold,
            },
            grads,
            e_d_val,
            selected,
        ))
    }

    /// Moves centroids that went unselected for the whole epoch onto random
    /// in-batch representations (stage inputs for RQ).
    fn reseed_dead(&mut self, e_d: &Tensor) -> Result<()> {
        let mut rng = seed::rng(self.cfg.seed, "reseed", self.step);
        let d = self.indexer.sub_dim();
        let mut residual = e_d.clone();
        for pos in 0..self.space.length {
            let dead: Vec<usize> = (0..self.space.codes_per_slot)
                .filter(|&k| self.usage[pos][k] == 0)
                .collect();
            let cb_name = indexer::codebook_name(self.cfg.indexer, pos);
            for &k in &dead {
                let r = rng.gen_range(0..e_d.rows());
                let value: Vec<f64> = match self.cfg.indexer {
                    IndexerKind::Pq => e_d.row(r)[pos * d..(pos + 1) * d].to_vec(),
                    _ => residual.row(r).to_vec(),
                };
                self.indexer
                    .reseed_centroid(&mut self.params, pos, k, &value)?;
            }
            if !dead.is_empty() {
                log::info!(
                    "step {}: re-seeded {} unused centroids at position {pos}",
                    self.step,
                    dead.len()
                );
            }
            if self.cfg.indexer == IndexerKind::Rq {
                let cb = self.params.get(&cb_name)?;
                let points: Vec<Vec<f64>> = (0..residual.rows())
                    .map(|r| residual.row(r).to_vec())
                    .collect();
                let cents: Vec<Vec<f64>> = (0..cb.rows()).map(|r| cb.row(r).to_vec()).collect();
                for (r, k) in indexer::nearest_rows(&points, &cents)
                    .into_iter()
                    .enumerate()
                {
                    for (x, c) in residual.row_mut(r).iter_mut().zip(&cents[k]) {
                        *x -= c;
                    }
                }
            }
            self.usage[pos].iter_mut().for_each(|c| *c = 0);
        }
        Ok(())
    }

    /// Distinct identifiers over the probe documents.
    pub fn probe_unique_ids(&self) -> Result<usize> {
        if self.probe.is_empty() {
            return Ok(0);
        }
        let e = model::encode_batch(&self.params, &self.probe)?;
        let probs = self
            .indexer
            .assign_values(&self.params, &e, self.cfg.batch_size)?;
        Ok(indexer::to_docids(&self.space, &probs)
            .into_iter()
            .collect::<HashSet<_>>()
            .len())
    }

    pub fn record(&self, report: &StepReport) -> Result<MetricsRecord> {
        Ok(MetricsRecord {
            step: self.step,
            lr: report.lr,
            loss: report.loss.clone(),
            grad_norm: report.grad_norm,
            clamped: report.clamped,
            unique_ids: self.probe_unique_ids()?,
            probe_size: self.probe.len(),
        })
    }

    fn should_log(&self) -> bool {
        self.step % self.cfg.log_interval == 0 || self.step == self.cfg.steps
    }

    /// Trains to the configured step count. `on_record` receives every
    /// metrics record; `on_checkpoint` every interval checkpoint.
    pub fn run(
        &mut self,
        mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
        mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let report = self.step()?;
            if self.should_log() {
                on_record(&self.record(&report)?)?;
            }
            if self.cfg.checkpoint_interval > 0 && self.step % self.cfg.checkpoint_interval == 0 {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final checkpoint with the metrics log.
pub fn train(
    cfg: TrainConfig,
    records: Vec<PairRecord>,
) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    let mut t = Trainer::new(cfg, records)?;
    let mut log = Vec::new();
    t.run(
        |r| {
            log.push(r.clone());
            Ok(())
        },
        |_| Ok(()),
    )?;
    Ok((t.checkpoint(), log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(lambda_schedule(0, 100, 0.25), 0.01);
        assert_eq!(lambda_schedule(100, 100, 0.25), 0.25);
        assert!((lambda_schedule(50, 100, 0.25) - 0.13).abs() < 1e-12);
        assert_eq!(lambda_schedule(3, 0, 0.25), 0.25);
        assert_eq!(lr_schedule(0, 10, 1e-4), 0.0);
        assert_eq!(lr_schedule(10, 10, 1e-4), 1e-4);
        assert!((lr_schedule(5, 10, 1e-4) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut st = OptState::zeros_like(&p);
        let opt = AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        adamw_step(&mut p, &BTreeMap::new(), &mut st, &opt, 0.1).unwrap();
        let w = p.get("w").unwrap().data();
        for (a, b) in w.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let n: f64 = g["a"].data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
