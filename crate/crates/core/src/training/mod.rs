//! Core pre-training, the two adapter phases, full fine-tuning baselines,
//! entity F1, and grid search.
//!
//! Phase one trains one adapter and the scheme's head on pooled data of
//! every domain that shares the head. Phase two replicates that adapter per
//! domain and fine-tunes each replica on its own domain with the head frozen.

mod fit;
pub mod grid;
pub mod metrics;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use grid::{grid_search, GridAxis, GridResult, GridSpec};
pub use metrics::{entity_f1, entity_f1_by_domain, spans, F1Table, Prf, Span};

pub(crate) use fit::{encode_all, evaluate, fit, Example, Learner};
use fit::{AdapterLearner, FullLearner, HeadRef};

use crate::adapters::AdapterSet;
use crate::data::{Corpus, Sentence, Split, Tokenizer};
use crate::encoder::CoreModel;
use crate::error::{Error, Result};
use crate::heads_registry::{adapter_id_for, head_id_for, ClassifierHead, LabelScheme};
use crate::rng::{derive, sub_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 1e-4,
            max_epochs: 10,
            patience: 2,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// Phase-one settings: two epochs over the pooled data.
    pub fn pooled() -> Self {
        TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.max_epochs = epochs;
        self
    }

    /// `lr = 0` is accepted as a no-op control run.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Parameter(format!("learning rate {} is invalid", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::Parameter("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Parameter("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    /// Entity F1 for taggers, accuracy for the router.
    pub dev_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    /// Patience ran out, possibly on the final epoch.
    pub early_stopped: bool,
    pub elapsed_secs: f64,
    /// Training examples drawn per domain across all epochs.
    pub sampled: BTreeMap<String, usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl TrainReport {
    pub fn new(phase: &str) -> Self {
        TrainReport {
            phase: phase.to_string(),
            epochs: Vec::new(),
            best_epoch: 0,
            stopped_epoch: 0,
            early_stopped: false,
            elapsed_secs: 0.0,
            sampled: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn best_score(&self) -> Option<f64> {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .and_then(|e| e.dev_score)
    }
}

/// Which domains feed phase one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    All,
    ExcludeTarget(String),
}

fn name_index(domains: &[String]) -> impl Fn(&Sentence) -> usize + '_ {
    move |s: &Sentence| domains.iter().position(|d| *d == s.domain).unwrap_or(usize::MAX)
}

fn examples(
    corpus: &Corpus,
    tok: &Tokenizer,
    domains: &[String],
    split: Split,
    scheme: &LabelScheme,
    max_len: usize,
    group: usize,
) -> Result<Vec<Example>> {
    let sentences = corpus.pooled(domains, split)?;
    encode_all(&sentences, tok, scheme, max_len, group, name_index(domains))
}

/// The single scheme shared by `domains`; a contract error if they disagree.
fn common_scheme<'a>(corpus: &'a Corpus, domains: &[String]) -> Result<&'a LabelScheme> {
    let mut found: Option<&LabelScheme> = None;
    for d in domains {
        let s = corpus.scheme_of(d)?;
        match found {
            Some(f) if f != s => {
                return Err(Error::contract(format!(
                    "domains mix schemes `{}` and `{}`",
                    f.id, s.id
                )))
            }
            _ => found = Some(s),
        }
    }
    found.ok_or_else(|| Error::Data("no domains given".into()))
}

#[derive(Debug, Clone)]
pub struct CorePretraining {
    pub report: TrainReport,
    /// One trained head per corpus scheme, keyed by the canonical head id.
    pub heads: Vec<ClassifierHead>,
}

/// Trains an unfrozen core from scratch as a token classifier over every
/// domain of the corpus, with one head per scheme.
pub fn pretrain_core(core: &mut CoreModel, corpus: &Corpus, tok: &Tokenizer, cfg: &TrainConfig) -> Result<CorePretraining> {
    if core.is_frozen() {
        return Err(Error::contract("pretrain_core needs an unfrozen core"));
    }
    if corpus.sentences().is_empty() {
        return Err(Error::Data("cannot pre-train on an empty corpus".into()));
    }
    let schemes: Vec<LabelScheme> = corpus.schemes().cloned().collect();
    let domains = corpus.domains();
    let max_len = core.config.max_seq_len;
    let mut heads: Vec<ClassifierHead> = schemes
        .iter()
        .map(|s| {
            let id = head_id_for(s);
            ClassifierHead::new(id.clone(), s, core.config.d_model, &mut derive(cfg.seed, &format!("pretrain/{id}")))
        })
        .collect();
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (g, s) in schemes.iter().enumerate() {
        let ds = corpus.domains_of_scheme(&s.id);
        for d in &ds {
            let idx = name_index(&domains);
            train.extend(encode_all(&corpus.split(d, Split::Train)?, tok, s, max_len, g, &idx)?);
            dev.extend(encode_all(&corpus.split(d, Split::Dev)?, tok, s, max_len, g, &idx)?);
        }
    }
    if train.is_empty() {
        return Err(Error::Data("corpus has no training sentences".into()));
    }
    let report = {
        let mut learner = FullLearner {
            core,
            heads: heads.iter_mut().collect(),
            schemes: schemes.iter().collect(),
        };
        fit(&mut learner, &train, &dev, cfg, "pretrain-core", &domains)?
    };
    Ok(CorePretraining { report, heads })
}

/// Phase one: trains `adapter` and `head` on the pooled training split of
/// `domains` (minus the target under [`PoolMode::ExcludeTarget`]). The core
/// must be frozen and is never written.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_pooled(
    core: &CoreModel,
    adapter: &mut AdapterSet,
    head: &mut ClassifierHead,
    corpus: &Corpus,
    tok: &Tokenizer,
    domains: &[String],
    mode: &PoolMode,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if !core.is_frozen() {
        return Err(Error::contract("adapter training requires a frozen core"));
    }
    if head.is_frozen() {
        return Err(Error::contract(format!("head `{}` is frozen; phase one trains it", head.id)));
    }
    let pool: Vec<String> = match mode {
        PoolMode::All => domains.to_vec(),
        PoolMode::ExcludeTarget(t) => domains.iter().filter(|d| *d != t).cloned().collect(),
    };
    let scheme = common_scheme(corpus, &pool)?.clone();
    if scheme.id != head.scheme_id {
        return Err(Error::contract(format!(
            "pooled domains use scheme `{}` but head `{}` emits `{}`",
            scheme.id, head.id, head.scheme_id
        )));
    }
    let max_len = core.config.max_seq_len;
    let train = examples(corpus, tok, &pool, Split::Train, &scheme, max_len, 0)?;
    let dev = examples(corpus, tok, &pool, Split::Dev, &scheme, max_len, 0)?;
    if train.is_empty() {
        return Err(Error::Data("pooled training split is empty".into()));
    }
    adapter.set_trainable(true);
    let mut learner = AdapterLearner {
        core,
        adapter,
        head: HeadRef::Trainable(head),
        scheme: &scheme,
    };
    let mut report = fit(&mut learner, &train, &dev, cfg, &format!("pooled/{}", scheme.id), domains)?;
    adapter.trained_on = format!("pooled:{}", scheme.id);
    for d in domains {
        report.sampled.entry(d.clone()).or_insert(0);
    }
    Ok(report)
}

/// Phase two: a fresh replica of `pooled`, fine-tuned on `domain` alone
/// with the head frozen. Neither `pooled` nor `head` is modified.
pub fn finetune_domain(
    core: &CoreModel,
    pooled: &AdapterSet,
    head: &ClassifierHead,
    corpus: &Corpus,
    tok: &Tokenizer,
    domain: &str,
    cfg: &TrainConfig,
) -> Result<(AdapterSet, TrainReport)> {
    if !core.is_frozen() {
        return Err(Error::contract("adapter training requires a frozen core"));
    }
    if !corpus.has_domain(domain) {
        return Err(Error::Data(format!("domain `{domain}` is not in the corpus")));
    }
    let scheme = corpus.scheme_of(domain)?.clone();
    if scheme.id != head.scheme_id {
        return Err(Error::contract(format!(
            "domain `{domain}` uses scheme `{}` but head emits `{}`",
            scheme.id, head.scheme_id
        )));
    }
    let frozen_copy;
    let head = if head.is_frozen() {
        head
    } else {
        let mut h = head.clone();
        h.freeze();
        frozen_copy = h;
        &frozen_copy
    };
    let names = vec![domain.to_string()];
    let max_len = core.config.max_seq_len;
    let train = examples(corpus, tok, &names, Split::Train, &scheme, max_len, 0)?;
    let dev = examples(corpus, tok, &names, Split::Dev, &scheme, max_len, 0)?;
    if train.is_empty() {
        return Err(Error::Data(format!("domain `{domain}` has no training sentences")));
    }
    let mut replica = pooled.replicate(adapter_id_for(domain));
    replica.set_trainable(true);
    let cfg = cfg.clone().with_seed(sub_seed(cfg.seed, domain));
    let report = {
        let mut learner = AdapterLearner {
            core,
            adapter: &mut replica,
            head: HeadRef::Frozen(head),
            scheme: &scheme,
        };
        fit(&mut learner, &train, &dev, &cfg, &format!("finetune/{domain}"), &names)?
    };
    replica.trained_on = domain.to_string();
    Ok((replica, report))
}

/// A fully fine-tuned copy of the core with its own head.
#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub core: CoreModel,
    pub head: ClassifierHead,
    pub scheme: LabelScheme,
    pub report: TrainReport,
}

/// Fine-tunes a private copy of `core` (and `head`) on the concatenated
/// training data of `domains`, which must share one scheme.
pub fn train_general_baseline(
    core: &CoreModel,
    head: &ClassifierHead,
    corpus: &Corpus,
    tok: &Tokenizer,
    domains: &[String],
    cfg: &TrainConfig,
) -> Result<BaselineModel> {
    let scheme = common_scheme(corpus, domains)?.clone();
    full_finetune(core, head, &scheme, corpus, tok, domains, cfg, &format!("general/{}", scheme.id))
}

/// Second stage of the specialised baseline: continues from a general model
/// on `domain` alone.
pub fn specialize_baseline(
    general: &BaselineModel,
    corpus: &Corpus,
    tok: &Tokenizer,
    domain: &str,
    cfg: &TrainConfig,
) -> Result<BaselineModel> {
    if !corpus.has_domain(domain) {
        return Err(Error::Data(format!("domain `{domain}` is not in the corpus")));
    }
    let names = vec![domain.to_string()];
    let scheme = common_scheme(corpus, &names)?.clone();
    if scheme != general.scheme {
        return Err(Error::contract(format!(
            "domain `{domain}` uses scheme `{}`, the general model `{}`",
            scheme.id, general.scheme.id
        )));
    }
    let cfg = cfg.clone().with_seed(sub_seed(cfg.seed, domain));
    full_finetune(
        &general.core,
        &general.head,
        &scheme,
        corpus,
        tok,
        &names,
        &cfg,
        &format!("specialized/{domain}"),
    )
}

/// Both stages: pooled full fine-tune, then `target` only.
#[allow(clippy::too_many_arguments)]
pub fn train_specialized_baseline(
    core: &CoreModel,
    head: &ClassifierHead,
    corpus: &Corpus,
    tok: &Tokenizer,
    domains: &[String],
    target: &str,
    pooled_cfg: &TrainConfig,
    target_cfg: &TrainConfig,
) -> Result<BaselineModel> {
    if !domains.iter().any(|d| d == target) {
        return Err(Error::Data(format!("target `{target}` is not among the pooled domains")));
    }
    let general = train_general_baseline(core, head, corpus, tok, domains, pooled_cfg)?;
    specialize_baseline(&general, corpus, tok, target, target_cfg)
}

#[allow(clippy::too_many_arguments)]
fn full_finetune(
    core: &CoreModel,
    head: &ClassifierHead,
    scheme: &LabelScheme,
    corpus: &Corpus,
    tok: &Tokenizer,
    domains: &[String],
    cfg: &TrainConfig,
    phase: &str,
) -> Result<BaselineModel> {
    if head.scheme_id != scheme.id {
        return Err(Error::contract(format!(
            "head emits `{}` but the data uses `{}`",
            head.scheme_id, scheme.id
        )));
    }
    let mut core = core.clone();
    core.unfreeze();
    let mut head = head.clone();
    head.unfreeze();
    let max_len = core.config.max_seq_len;
    let train = examples(corpus, tok, domains, Split::Train, scheme, max_len, 0)?;
    let dev = examples(corpus, tok, domains, Split::Dev, scheme, max_len, 0)?;
    if train.is_empty() {
        return Err(Error::Data("baseline training split is empty".into()));
    }
    let report = {
        let mut learner = FullLearner {
            core: &mut core,
            heads: vec![&mut head],
            schemes: vec![scheme],
        };
        fit(&mut learner, &train, &dev, cfg, phase, domains)?
    };
    core.freeze();
    head.freeze();
    Ok(BaselineModel {
        core,
        head,
        scheme: scheme.clone(),
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.lr, c.max_epochs, c.patience), (16, 1e-4, 10, 2));
        assert_eq!(TrainConfig::pooled().max_epochs, 2);
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..c }.validate().is_ok());
    }
}
