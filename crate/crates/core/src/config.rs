//! Flat training configuration.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::criteria::{Aux, Hyper, WeightMode};
use crate::error::{Error, Result};
use crate::fsio;
use crate::indexer::{IndexerConfig, IndexerKind};
use crate::model::ModelConfig;
use crate::seed;
use crate::sinkhorn::SinkhornParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    Constant,
    Cosine,
}

/// Every training option, one key each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Defaults to 5% of `steps`.
    pub warmup_steps: Option<u64>,
    pub lr_decay: LrDecay,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,

    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub beta: f64,
    pub quant_weight: f64,
    pub sigma0: f64,
    pub density_weight: WeightMode,
    pub disable_loss: BTreeSet<Aux>,

    pub indexer: IndexerKind,
    pub indexer_hidden: usize,
    pub dropout: f64,
    pub zero_init_output: bool,
    pub logit_scale: f64,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iters: usize,
    pub lloyd_iters: usize,

    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub dim: usize,
    pub dec_hidden: usize,
    pub dec_pre_hidden: usize,
    pub max_length: usize,
    pub id_length: usize,
    pub codes_per_slot: usize,
    pub vocab_min_count: usize,
    pub vocab_max_size: usize,
    /// Sampled word-subset queries added per training document.
    pub pseudo_queries: usize,
    pub pseudo_min_words: usize,
    pub pseudo_max_words: usize,

    pub seed: u64,
    /// Defaults to the number of batches in one pass over the corpus.
    pub steps_per_epoch: Option<u64>,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let h = Hyper::default();
        let i = IndexerConfig::default();
        TrainConfig {
            steps: 5000,
            batch_size: 256,
            lr: 1e-4,
            warmup_steps: None,
            lr_decay: LrDecay::Constant,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 5.0,
            alpha: h.alpha,
            lambda: h.lambda,
            gamma: h.gamma,
            beta: h.beta,
            quant_weight: h.quant_weight,
            sigma0: h.sigma0,
            density_weight: h.weight_mode,
            disable_loss: BTreeSet::new(),
            indexer: i.kind,
            indexer_hidden: i.hidden,
            dropout: i.dropout,
            zero_init_output: i.zero_init_output,
            logit_scale: i.logit_scale,
            sinkhorn_epsilon: i.sinkhorn.epsilon,
            sinkhorn_iters: i.sinkhorn.iterations,
            lloyd_iters: 10,
            embed_dim: m.embed_dim,
            enc_hidden: m.enc_hidden,
            dim: m.dim,
            dec_hidden: m.dec_hidden,
            dec_pre_hidden: m.dec_pre_hidden,
            max_length: m.max_length,
            id_length: m.id_length,
            codes_per_slot: m.codes_per_slot,
            vocab_min_count: 1,
            vocab_max_size: 50_000,
            pseudo_queries: 0,
            pseudo_min_words: 3,
            pseudo_max_words: 6,
            seed: 0,
            steps_per_epoch: None,
            checkpoint_interval: 0,
            log_interval: 50,
            probe_size: 512,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fsio::read_to_string(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `key=value` overrides; values use TOML syntax, with bare
    /// words taken as strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = parse_value(raw);
            if key == "disable_loss" {
                let list = match &value {
                    toml::Value::String(s) => split_csv(s),
                    toml::Value::Array(a) => a
                        .iter()
                        .filter_map(|v| v.as_str().map(str::to_string))
                        .collect(),
                    _ => {
                        return Err(Error::Config(
                            "disable_loss takes a comma-separated list".into(),
                        ))
                    }
                };
                table.insert(
                    key.into(),
                    toml::Value::Array(list.into_iter().map(toml::Value::String).collect()),
                );
            } else {
                table.insert(key.into(), value);
            }
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.warmup() > self.steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds steps {}",
                self.warmup(),
                self.steps
            )));
        }
        if !(self.lr >= 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config(
                "lr must be non-negative and betas in [0, 1)".into(),
            ));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "adam_eps and clip_norm must be positive, weight_decay non-negative".into(),
            ));
        }
        if self.pseudo_min_words == 0 || self.pseudo_min_words > self.pseudo_max_words {
            return Err(Error::Config(
                "pseudo query word range must satisfy 1 <= min <= max".into(),
            ));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be positive".into()));
        }
        self.hyper().validate()?;
        self.model_config(1).validate()?;
        crate::indexer::Indexer::new(
            self.indexer_config(),
            self.model_config(1).id_space(),
            self.dim,
        )?;
        Ok(())
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.steps / 20)
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            alpha: self.alpha,
            lambda: self.lambda,
            gamma: self.gamma,
            beta: self.beta,
            quant_weight: self.quant_weight,
            sigma0: self.sigma0,
            weight_mode: self.density_weight,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            enc_hidden: self.enc_hidden,
            dim: self.dim,
            dec_hidden: self.dec_hidden,
            dec_pre_hidden: self.dec_pre_hidden,
            max_length: self.max_length,
            id_length: self.id_length,
            codes_per_slot: self.codes_per_slot,
        }
    }

    pub fn indexer_config(&self) -> IndexerConfig {
        IndexerConfig {
            kind: self.indexer,
            hidden: self.indexer_hidden,
            dropout: self.dropout,
            zero_init_output: self.zero_init_output,
            logit_scale: self.logit_scale,
            sinkhorn: SinkhornParams {
                epsilon: self.sinkhorn_epsilon,
                iterations: self.sinkhorn_iters,
            },
        }
    }

    pub fn active(&self, aux: Aux) -> bool {
        !self.disable_loss.contains(&aux)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the canonical serialized form.
    pub fn hash(&self) -> String {
        seed::sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

fn split_csv(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_fatal() {
        let err = TrainConfig::from_toml("stpes = 10\n").unwrap_err();
        assert!(err.to_string().contains("stpes"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let c = TrainConfig::default()
            .with_overrides(&[
                "steps=10".into(),
                "indexer=pq".into(),
                "disable_loss=di,ib".into(),
            ])
            .unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.indexer, IndexerKind::Pq);
        assert!(!c.active(Aux::Di) && c.active(Aux::Bot) && !c.active(Aux::Ib));
        assert!(TrainConfig::default()
            .with_overrides(&["nope=1".into()])
            .is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig {
            warmup_steps: Some(7),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
