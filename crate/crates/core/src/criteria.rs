//! Training objectives over identifier distributions and dense
//! representations.

use std::any::Any;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use diffcore::kernels;
use diffcore::{CustomOp, Graph, NodeId, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{DocId, IdSpace};

/// Log-probability floor of the generation loss.
pub const LOG_PROB_FLOOR: f64 = -27.631021115928547; // ln(1e-12)
pub const DIST_EPS: f64 = 1e-6;
pub const VARIANCE_FLOOR: f64 = 1e-4;
const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// `w = E[D] / D_max`
    Literal,
    /// `w = 1 - E[D] / D_max`
    Complement,
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(WeightMode::Literal),
            "complement" => Ok(WeightMode::Complement),
            other => Err(Error::Config(format!(
                "unknown density weight mode `{other}`"
            ))),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Literal => "literal",
            WeightMode::Complement => "complement",
        })
    }
}

/// Auxiliary terms that can be switched off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aux {
    Di,
    Bot,
    Ib,
}

impl FromStr for Aux {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "di" => Ok(Aux::Di),
            "bot" => Ok(Aux::Bot),
            "ib" => Ok(Aux::Ib),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (di, bot or ib)"
            ))),
        }
    }
}

impl fmt::Display for Aux {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aux::Di => "di",
            Aux::Bot => "bot",
            Aux::Ib => "ib",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyper {
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub beta: f64,
    pub quant_weight: f64,
    pub sigma0: f64,
    pub weight_mode: WeightMode,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            alpha: 3.0,
            lambda: 0.25,
            gamma: 0.05,
            beta: 0.01,
            quant_weight: 1.0,
            sigma0: 0.1,
            weight_mode: WeightMode::Complement,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("quant_weight", self.quant_weight),
            ("sigma0", self.sigma0),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} = {v} must be finite and non-negative"
                )));
            }
        }
        if self.sigma0 == 0.0 {
            return Err(Error::Config("sigma0 must be positive".into()));
        }
        Ok(())
    }
}

/// Largest value of the distribution distance: `2L`.
pub fn d_max(space: &IdSpace) -> f64 {
    2.0 * space.length as f64
}

/// `sum_i ||P_i - Q_i||^2` for two distributions of equal layout.
pub fn pairwise_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Invalid(format!(
            "distributions of {} and {} values",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// All-pairs distance matrix `[B1, B2]` between rows of `p` and `q`.
pub fn distance_matrix(g: &mut Graph, p: NodeId, q: NodeId) -> Result<NodeId> {
    let (b1, b2) = (g.shape(p)[0], g.shape(q)[0]);
    let pp = g.square(p)?;
    let pp = g.sum_rows(pp)?;
    let pp = g.expand_cols(pp, b2)?;
    let qq = g.square(q)?;
    let qq = g.sum_rows(qq)?;
    let qq = g.expand_rows(qq, b1)?;
    let cross = g.matmul_nt(p, q)?;
    let cross = g.mul_scalar(cross, -2.0)?;
    let s = g.add(pp, qq)?;
    Ok(g.add(s, cross)?)
}

/// Row-pair squared distances of a plain matrix, `[B * B]`.
fn distance_values(p: &Tensor) -> Vec<f64> {
    let (b, w) = (p.rows(), p.cols());
    let mut gram = vec![0.0; b * b];
    kernels::gemm(
        1.0,
        p.data(),
        (b, w),
        kernels::Trans::No,
        p.data(),
        (b, w),
        kernels::Trans::Yes,
        0.0,
        &mut gram,
    );
    let norms: Vec<f64> = (0..b).map(|i| gram[i * b + i]).collect();
    for x in 0..b {
        for y in 0..b {
            gram[x * b + y] = (norms[x] + norms[y] - 2.0 * gram[x * b + y]).max(0.0);
        }
    }
    gram
}

fn check_groups(g: &Graph, x: NodeId, groups: &[usize]) -> Result<usize> {
    let b = g.shape(x)[0];
    if groups.len() != b {
        return Err(Error::Invalid(format!(
            "{} group labels for a batch of {b}",
            groups.len()
        )));
    }
    Ok(b)
}

/// Mean triplet hinge `max(0, D(q, d+) - D(q, d-) + alpha)` over queries and
/// their in-batch negatives (documents outside the query's group). Row `i`
/// of `p_q` is aligned with row `i` of `p_d`.
pub fn contrastive_id_loss(
    g: &mut Graph,
    p_q: NodeId,
    p_d: NodeId,
    groups: &[usize],
    alpha: f64,
) -> Result<NodeId> {
    let b = check_groups(g, p_q, groups)?;
    let mut mask = vec![0.0; b * b];
    let mut triples = 0usize;
    for i in 0..b {
        for j in 0..b {
            if groups[i] != groups[j] {
                mask[i * b + j] = 1.0;
                triples += 1;
            }
        }
    }
    if triples == 0 {
        log::warn!("contrastive loss: batch has a single positive group");
        return Ok(g.scalar(0.0)?);
    }
    let d = distance_matrix(g, p_q, p_d)?;
    let diag: Vec<usize> = (0..b).collect();
    let pos = g.pick(d, &diag)?;
    let pos = g.expand_cols(pos, b)?;
    let margin = g.sub(pos, d)?;
    let margin = g.add_scalar(margin, alpha)?;
    let hinge = g.relu(margin)?;
    let m = g.constant(Tensor::new(vec![b, b], mask)?)?;
    let hinge = g.mul(hinge, m)?;
    let total = g.sum(hinge)?;
    Ok(g.mul_scalar(total, 1.0 / triples as f64)?)
}

/// Teacher-forced cross-entropy: mean over items of the summed per-position
/// negative log-likelihood. `logits` rows follow
/// [`crate::model::teacher_forced_logits`]. Also returns how many gold
/// log-probabilities fell below the floor.
pub fn generation_loss(
    g: &mut Graph,
    logits: NodeId,
    gold: &[DocId],
    space: &IdSpace,
) -> Result<(NodeId, usize)> {
    let b = gold.len();
    if b == 0 || g.shape(logits)[0] != b * space.length {
        return Err(Error::Invalid(format!(
            "logits {:?} for {b} gold ids",
            g.shape(logits)
        )));
    }
    let mut idx = Vec::with_capacity(b * space.length);
    for pos in 0..space.length {
        for id in gold {
            idx.push(id.codes()[pos] as usize);
        }
    }
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, &idx)?;
    let clamped = g
        .value(picked)
        .data()
        .iter()
        .filter(|&&v| v < LOG_PROB_FLOOR)
        .count();
    if clamped > 0 {
        log::warn!("generation loss: {clamped} gold probabilities below 1e-12");
    }
    let picked = g.clamp_min(picked, LOG_PROB_FLOOR)?;
    let total = g.sum(picked)?;
    Ok((g.mul_scalar(total, -1.0 / b as f64)?, clamped))
}

/// `out[x, x'] = sum_i P[x, i*V + k_i(x')]` for fixed target codes `k`.
struct Overlap {
    targets: Vec<Vec<usize>>,
    v: usize,
}

impl CustomOp for Overlap {
    fn name(&self) -> &'static str {
        "overlap"
    }

    fn forward(
        &self,
        inputs: &[&Tensor],
    ) -> diffcore::Result<(Tensor, Option<Box<dyn Any + Send + Sync>>)> {
        let p = inputs[0];
        let b = p.rows();
        let mut out = vec![0.0; b * self.targets.len()];
        for x in 0..b {
            let row = p.row(x);
            for (y, k) in self.targets.iter().enumerate() {
                out[x * self.targets.len() + y] = k
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| row[i * self.v + c])
                    .sum();
            }
        }
        Ok((Tensor::new(vec![b, self.targets.len()], out)?, None))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _saved: Option<&(dyn Any + Send + Sync)>,
        grad_out: &Tensor,
    ) -> diffcore::Result<Vec<Option<Tensor>>> {
        let p = inputs[0];
        let mut gp = Tensor::zeros(p.shape());
        let n = self.targets.len();
        for x in 0..p.rows() {
            let go = &grad_out.data()[x * n..(x + 1) * n];
            let row = gp.row_mut(x);
            for (y, k) in self.targets.iter().enumerate() {
                for (i, &c) in k.iter().enumerate() {
                    row[i * self.v + c] += go[y];
                }
            }
        }
        Ok(vec![Some(gp)])
    }
}

/// Constants of the density loss, taken from the distributions' values:
/// argmax codes of every item and the weight of every (item, neighbor) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityTargets {
    pub codes: Vec<Vec<usize>>,
    /// `[B * B]`, zero for same-group pairs.
    pub weights: Vec<f64>,
    pub codes_per_slot: usize,
}

impl DensityTargets {
    /// For every item `x`, `w(x) = E[D(x, x')] / D_max` over the neighbors
    /// `x'` outside its group (or `1 - w(x)` in complement mode).
    pub fn from_values(
        p: &Tensor,
        groups: &[usize],
        space: &IdSpace,
        mode: WeightMode,
    ) -> Result<Self> {
        let b = p.rows();
        let width = space.num_codes();
        if groups.len() != b || p.cols() != width {
            return Err(Error::Invalid(format!(
                "density loss expects [B, {width}] with B group labels, got {:?} and {}",
                p.shape(),
                groups.len()
            )));
        }
        let v = space.codes_per_slot;
        let codes = (0..b)
            .map(|x| {
                (0..space.length)
                    .map(|i| kernels::argmax(&p.row(x)[i * v..(i + 1) * v]))
                    .collect()
            })
            .collect();
        let dmax = d_max(space);
        let dist = distance_values(p);
        let mut weights = vec![0.0; b * b];
        for x in 0..b {
            let neighbors: Vec<usize> = (0..b).filter(|&y| groups[y] != groups[x]).collect();
            if neighbors.is_empty() {
                continue;
            }
            let mean_d =
                neighbors.iter().map(|&y| dist[x * b + y]).sum::<f64>() / neighbors.len() as f64;
            let w = match mode {
                WeightMode::Literal => mean_d / dmax,
                WeightMode::Complement => 1.0 - mean_d / dmax,
            };
            for &y in &neighbors {
                weights[x * b + y] = w;
            }
        }
        Ok(DensityTargets {
            codes,
            weights,
            codes_per_slot: v,
        })
    }
}

/// Distribution density loss of one side of the batch. For every item `x`
/// and every neighbor `x'` outside its group, the overlap is the mass `x`
/// puts on the argmax codes of `x'`. Targets and weights carry no gradient.
pub fn density_loss(
    g: &mut Graph,
    p: NodeId,
    groups: &[usize],
    space: &IdSpace,
    mode: WeightMode,
) -> Result<NodeId> {
    let targets = DensityTargets::from_values(g.value(p), groups, space, mode)?;
    density_loss_with(g, p, &targets)
}

pub fn density_loss_with(g: &mut Graph, p: NodeId, t: &DensityTargets) -> Result<NodeId> {
    let b = t.codes.len();
    if g.shape(p)[0] != b {
        return Err(Error::Invalid(format!(
            "density targets for {b} items, batch of {}",
            g.shape(p)[0]
        )));
    }
    let overlap = g.custom(
        Arc::new(Overlap {
            targets: t.codes.clone(),
            v: t.codes_per_slot,
        }),
        &[p],
    )?;
    let w = g.constant(Tensor::new(vec![b, b], t.weights.clone())?)?;
    let s = g.mul(overlap, w)?;
    let total = g.sum(s)?;
    Ok(g.mul_scalar(total, 1.0 / b as f64)?)
}

/// Mean of `1 / (||a - b||^2 + eps)` over unordered cross-group pairs.
fn inverse_spread(g: &mut Graph, e: NodeId, groups: &[usize]) -> Result<Option<NodeId>> {
    let b = groups.len();
    let mut mask = vec![0.0; b * b];
    let mut pairs = 0usize;
    for i in 0..b {
        for j in i + 1..b {
            if groups[i] != groups[j] {
                mask[i * b + j] = 1.0;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Ok(None);
    }
    let d = distance_matrix(g, e, e)?;
    // The diagonal is masked out below; the clamp keeps it finite.
    let d = g.clamp_min(d, 0.0)?;
    let d = g.add_scalar(d, DIST_EPS)?;
    let inv = g.recip(d)?;
    let m = g.constant(Tensor::new(vec![b, b], mask)?)?;
    let inv = g.mul(inv, m)?;
    let s = g.sum(inv)?;
    Ok(Some(g.mul_scalar(s, 1.0 / pairs as f64)?))
}

/// InfoNCE over dot products (positive kept in the denominator, other
/// same-group documents removed) plus `gamma` times the inverse-distance
/// spread of documents and of queries.
pub fn bottleneck_loss(
    g: &mut Graph,
    e_q: NodeId,
    e_d: NodeId,
    groups: &[usize],
    gamma: f64,
) -> Result<NodeId> {
    let b = check_groups(g, e_q, groups)?;
    if b < 2 {
        return Err(Error::Invalid(
            "bottleneck loss needs a batch of at least 2".into(),
        ));
    }
    let s = g.matmul_nt(e_q, e_d)?;
    let mut mask = vec![0.0; b * b];
    let mut any = false;
    for i in 0..b {
        for j in 0..b {
            if i != j && groups[i] == groups[j] {
                mask[i * b + j] = MASKED;
                any = true;
            }
        }
    }
    let s = if any {
        let m = g.constant(Tensor::new(vec![b, b], mask)?)?;
        g.add(s, m)?
    } else {
        s
    };
    let lse = g.log_sum_exp(s)?;
    let diag: Vec<usize> = (0..b).collect();
    let pos = g.pick(s, &diag)?;
    let nll = g.sub(lse, pos)?;
    let term1 = g.mean(nll)?;
    let mut loss = term1;
    for side in [e_d, e_q] {
        if let Some(spread) = inverse_spread(g, side, groups)? {
            let t = g.mul_scalar(spread, gamma)?;
            loss = g.add(loss, t)?;
        }
    }
    Ok(loss)
}

/// Batch Gaussian prior: per-dimension mean and floored population variance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub sigma0: f64,
}

impl GaussianPrior {
    pub fn from_batch(e: &Tensor, sigma0: f64) -> Result<Self> {
        let (b, d) = (e.rows(), e.cols());
        if b < 2 {
            return Err(Error::Invalid(
                "information bottleneck loss needs a batch of at least 2".into(),
            ));
        }
        let mut mean = vec![0.0; d];
        for r in 0..b {
            for (m, x) in mean.iter_mut().zip(e.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; d];
        for r in 0..b {
            for ((v, x), m) in var.iter_mut().zip(e.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut()
            .for_each(|v| *v = (*v / b as f64).max(VARIANCE_FLOOR));
        Ok(GaussianPrior { mean, var, sigma0 })
    }
}

/// `beta` times the batch mean of `KL(N(e, sigma0^2 I) || N(mu, diag var))`
/// with the prior estimated from the batch and held constant.
pub fn ib_loss(g: &mut Graph, e_d: NodeId, sigma0: f64, beta: f64) -> Result<NodeId> {
    let prior = GaussianPrior::from_batch(g.value(e_d), sigma0)?;
    ib_loss_with(g, e_d, &prior, beta)
}

pub fn ib_loss_with(
    g: &mut Graph,
    e_d: NodeId,
    prior: &GaussianPrior,
    beta: f64,
) -> Result<NodeId> {
    let (b, d) = (g.shape(e_d)[0], g.shape(e_d)[1]);
    if prior.mean.len() != d || prior.var.len() != d {
        return Err(Error::Invalid(format!(
            "prior of width {} for representations of width {d}",
            prior.mean.len()
        )));
    }
    let s0 = prior.sigma0 * prior.sigma0;
    let constant: f64 = prior
        .var
        .iter()
        .map(|&v| 0.5 * (v / s0).ln() + s0 / (2.0 * v) - 0.5)
        .sum();
    let mu = g.constant(Tensor::vector(prior.mean.clone()))?;
    let scale = g.constant(Tensor::vector(
        prior.var.iter().map(|v| 1.0 / (2.0 * v)).collect(),
    ))?;
    let diff = g.sub(e_d, mu)?;
    let sq = g.square(diff)?;
    let sq = g.mul(sq, scale)?;
    let s = g.sum(sq)?;
    let per_item = g.mul_scalar(s, 1.0 / b as f64)?;
    let kl = g.add_scalar(per_item, constant)?;
    Ok(g.mul_scalar(kl, beta)?)
}

/// Values of every term of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_ce: f64,
    pub l_di: f64,
    pub l_bot: f64,
    pub l_ib: f64,
    pub l_quant: f64,
    pub total: f64,
    pub lambda: f64,
    pub di_active: bool,
    pub bot_active: bool,
    pub ib_active: bool,
    pub quant_active: bool,
}

/// `l_c + l_ce + lambda * (active auxiliaries) + quant_weight * l_quant`.
pub fn total_loss(parts: &LossBreakdown, hyper: &Hyper, lambda: f64) -> f64 {
    let mut aux = 0.0;
    if parts.di_active {
        aux += parts.l_di;
    }
    if parts.bot_active {
        aux += parts.l_bot;
    }
    if parts.ib_active {
        aux += parts.l_ib;
    }
    let quant = if parts.quant_active {
        hyper.quant_weight * parts.l_quant
    } else {
        0.0
    };
    parts.l_c + parts.l_ce + lambda * aux + quant
}
