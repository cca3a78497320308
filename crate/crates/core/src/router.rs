//! Group-level domain detection and routing.
//!
//! Consecutive inputs are concatenated into groups of up to `k`, capped at
//! `max_tokens`. A dedicated adapter on the frozen core plus a linear layer
//! over the `[CLS]` state classifies each group once; every member is then
//! tagged with the predicted domain's adapter and head.

use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, AdapterHyper, AdapterSet};
use crate::data::{encode_tokens, Corpus, Split, Tokenizer, CLS};
use crate::encoder::{CoreModel, PackedInput};
use crate::error::{Error, Result};
use crate::heads_registry::{DomainRegistry, Linear};
use crate::rng::{derive, shuffled_indices};
use crate::tagger::tag_resolved;
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{evaluate, fit, Example, Learner, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub group_size: usize,
    pub max_tokens: usize,
    pub domains: Vec<String>,
    /// Training groups are built from this many orderings of each domain's
    /// train split: stream order first, then seeded shuffles.
    #[serde(default = "default_passes")]
    pub train_passes: usize,
}

fn default_passes() -> usize {
    8
}

impl RouterConfig {
    pub fn new(domains: Vec<String>) -> Self {
        RouterConfig {
            group_size: 8,
            max_tokens: 512,
            domains,
            train_passes: default_passes(),
        }
    }

    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::Parameter("router group size must be at least 1".into()));
        }
        if self.max_tokens == 0 || self.max_tokens > max_seq_len {
            return Err(Error::Parameter(format!(
                "router max_tokens {} must be in 1..={max_seq_len}",
                self.max_tokens
            )));
        }
        if self.domains.is_empty() {
            return Err(Error::Parameter("router needs at least one domain".into()));
        }
        if self.train_passes == 0 {
            return Err(Error::Parameter("router train_passes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterModel {
    pub config: RouterConfig,
    pub adapter: AdapterSet,
    /// `d_model × n_domains` over the `[CLS]` hidden state.
    pub head: Linear,
}

/// Concatenated inputs classified as one unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub members: Vec<usize>,
    pub tokens: Vec<String>,
}

/// Greedy consecutive grouping: up to `group_size` inputs; the input that
/// takes the running total past `max_tokens` is the last one in its group,
/// and the concatenation is cut to its first `max_tokens` tokens.
pub fn build_groups<T: AsRef<[S]>, S: AsRef<str>>(sentences: &[T], cfg: &RouterConfig) -> Vec<Group> {
    let k = cfg.group_size.max(1);
    let mut groups = Vec::new();
    let mut cur = Group {
        members: Vec::new(),
        tokens: Vec::new(),
    };
    for (i, s) in sentences.iter().enumerate() {
        cur.members.push(i);
        cur.tokens.extend(s.as_ref().iter().map(|w| w.as_ref().to_string()));
        let over = cur.tokens.len() > cfg.max_tokens;
        if over {
            cur.tokens.truncate(cfg.max_tokens);
        }
        if over || cur.members.len() == k {
            groups.push(std::mem::replace(
                &mut cur,
                Group {
                    members: Vec::new(),
                    tokens: Vec::new(),
                },
            ));
        }
    }
    if !cur.members.is_empty() {
        groups.push(cur);
    }
    groups
}

/// `[CLS]` + group tokens, trimmed so that the whole input fits the core.
fn group_ids(tok: &Tokenizer, tokens: &[String], max_seq_len: usize) -> Vec<usize> {
    encode_tokens(tok, tokens, max_seq_len)
}

struct RouterLearner<'a> {
    core: &'a CoreModel,
    adapter: &'a mut AdapterSet,
    head: &'a mut Linear,
}

fn cls_logits(core: &CoreModel, adapter: &AdapterSet, head: &Linear, tape: &mut Tape, seqs: &[&[usize]]) -> Result<Var> {
    let input = PackedInput::from_sequences(seqs);
    let h = core.forward(tape, &input, Some(adapter))?;
    let cls = tape.rows(h, &input.first_rows())?;
    head.apply(tape, cls)
}

impl Learner for RouterLearner<'_> {
    fn logits(&self, tape: &mut Tape, batch: &[&Example]) -> Result<Var> {
        let seqs: Vec<&[usize]> = batch.iter().map(|e| e.ids.as_slice()).collect();
        cls_logits(self.core, self.adapter, self.head, tape, &seqs)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.adapter.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }

    fn score(&self, examples: &[&Example], argmax: &[Vec<usize>]) -> Result<f64> {
        Ok(accuracy(examples, argmax))
    }
}

fn accuracy(examples: &[&Example], argmax: &[Vec<usize>]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = examples.iter().zip(argmax).filter(|(e, p)| e.targets == **p).count();
    hits as f64 / examples.len() as f64
}

/// Labelled groups over one split, built per domain. With `passes > 1`
/// the split is regrouped from further seeded shuffles.
#[allow(clippy::too_many_arguments)]
fn labelled_groups(
    corpus: &Corpus,
    tok: &Tokenizer,
    cfg: &RouterConfig,
    split: Split,
    max_seq_len: usize,
    passes: usize,
    seed: u64,
    warnings: &mut Vec<String>,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (label, d) in cfg.domains.iter().enumerate() {
        let sents: Vec<Vec<String>> = corpus.split(d, split)?.into_iter().map(|s| s.tokens.clone()).collect();
        if sents.len() < cfg.group_size {
            warnings.push(format!(
                "domain `{d}` has {} {split:?} sentences, fewer than one group of {}",
                sents.len(),
                cfg.group_size
            ));
        }
        let mut rng = derive(seed, &format!("router/groups/{d}"));
        for pass in 0..passes {
            let order: Vec<usize> = if pass == 0 {
                (0..sents.len()).collect()
            } else {
                shuffled_indices(sents.len(), &mut rng)
            };
            let view: Vec<&[String]> = order.iter().map(|&i| sents[i].as_slice()).collect();
            for g in build_groups(&view, cfg) {
                out.push(Example {
                    ids: group_ids(tok, &g.tokens, max_seq_len),
                    targets: vec![label],
                    group: 0,
                    domain: label,
                });
            }
        }
    }
    Ok(out)
}

/// Trains a fresh router adapter and head on pooled, shuffled groups of
/// every configured domain. The core must be frozen.
pub fn train_router(
    core: &CoreModel,
    corpus: &Corpus,
    tok: &Tokenizer,
    cfg: &RouterConfig,
    hyper: &AdapterHyper,
    train_cfg: &TrainConfig,
) -> Result<(RouterModel, TrainReport)> {
    if !core.is_frozen() {
        return Err(Error::contract("router training requires a frozen core"));
    }
    let max_seq_len = core.config.max_seq_len;
    cfg.validate(max_seq_len)?;
    for d in &cfg.domains {
        if !corpus.has_domain(d) {
            return Err(Error::Data(format!("router domain `{d}` is not in the corpus")));
        }
    }
    let mut warnings = Vec::new();
    let train = labelled_groups(corpus, tok, cfg, Split::Train, max_seq_len, cfg.train_passes, train_cfg.seed, &mut warnings)?;
    let dev = labelled_groups(corpus, tok, cfg, Split::Dev, max_seq_len, 1, 0, &mut Vec::new())?;
    let mut rng = derive(train_cfg.seed, "router/init");
    let mut adapter = init_adapter("router", hyper, &core.config, &mut rng)?;
    adapter.trained_on = "router".into();
    let mut head = Linear::new(core.config.d_model, cfg.domains.len(), &mut rng);
    let mut report = {
        let mut learner = RouterLearner {
            core,
            adapter: &mut adapter,
            head: &mut head,
        };
        fit(&mut learner, &train, &dev, train_cfg, "router", &cfg.domains)?
    };
    report.warnings = warnings;
    adapter.set_trainable(false);
    for t in head.tensors_mut() {
        t.set_requires_grad(false);
    }
    Ok((
        RouterModel {
            config: cfg.clone(),
            adapter,
            head,
        },
        report,
    ))
}

/// Group-level accuracy of `router` on `split` groups of its domains.
pub fn router_accuracy(core: &CoreModel, router: &RouterModel, corpus: &Corpus, tok: &Tokenizer, split: Split) -> Result<f64> {
    let learner = RouterLearner {
        core,
        adapter: &mut router.adapter.clone(),
        head: &mut router.head.clone(),
    };
    let groups = labelled_groups(corpus, tok, &router.config, split, core.config.max_seq_len, 1, 0, &mut Vec::new())?;
    let (_, preds) = evaluate(&learner, &groups, 64)?;
    let refs: Vec<&Example> = groups.iter().collect();
    learner.score(&refs, &preds)
}

/// Predicted domain and the softmax score vector for one group.
pub fn classify_group<S: AsRef<str>>(
    core: &CoreModel,
    router: &RouterModel,
    tok: &Tokenizer,
    tokens: &[S],
) -> Result<(String, Vec<f64>)> {
    if tokens.is_empty() {
        return Err(Error::Input("cannot classify an empty group".into()));
    }
    if tokens.len() > router.config.max_tokens {
        return Err(Error::Input(format!(
            "group of {} tokens exceeds the router cap of {}",
            tokens.len(),
            router.config.max_tokens
        )));
    }
    let ids = encode_tokens(tok, tokens, core.config.max_seq_len);
    debug_assert_eq!(ids[0], CLS);
    let mut tape = Tape::new();
    let logits = cls_logits(core, &router.adapter, &router.head, &mut tape, &[ids.as_slice()])?;
    let probs = tape.softmax(logits, 1)?;
    let scores = tape.value(probs).to_vec();
    let best = (0..scores.len()).fold(0, |b, j| if scores[j] > scores[b] { j } else { b });
    Ok((router.config.domains[best].clone(), scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub group: usize,
    pub members: Vec<usize>,
    pub domain: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Routed {
    /// One tag sequence per input sentence, in input order.
    pub tags: Vec<Vec<String>>,
    pub records: Vec<RoutingRecord>,
}

/// Classifies each group once, then tags its members with the predicted
/// domain's adapter and head.
pub fn route_and_tag<S: AsRef<str>>(
    registry: &DomainRegistry,
    core: &CoreModel,
    router: &RouterModel,
    tok: &Tokenizer,
    sentences: &[Vec<S>],
) -> Result<Routed> {
    for d in &router.config.domains {
        if registry.entry(d).is_err() {
            return Err(Error::Routing(format!("router domain `{d}` is not registered")));
        }
    }
    let mut tags: Vec<Vec<String>> = vec![Vec::new(); sentences.len()];
    let mut records = Vec::new();
    for (gi, g) in build_groups(sentences, &router.config).into_iter().enumerate() {
        let members: Vec<Vec<&str>> = g
            .members
            .iter()
            .map(|&i| sentences[i].iter().map(AsRef::as_ref).collect())
            .collect();
        let (domain, scores) = if g.tokens.is_empty() {
            // All members empty: nothing to classify, nothing to tag.
            (router.config.domains[0].clone(), Vec::new())
        } else {
            classify_group(core, router, tok, &g.tokens)?
        };
        let resolved = registry
            .resolve(core, &domain)
            .map_err(|e| Error::Routing(format!("predicted domain `{domain}`: {e}")))?;
        let out = tag_resolved(&resolved, tok, &members)?;
        for (&i, t) in g.members.iter().zip(out) {
            tags[i] = t;
        }
        records.push(RoutingRecord {
            group: gi,
            members: g.members,
            domain,
            scores,
        });
    }
    Ok(Routed { tags, records })
}
