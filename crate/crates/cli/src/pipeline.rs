//! In-memory training and evaluation flows shared by the commands and the
//! acceptance suite.

use std::collections::BTreeMap;

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mdner::adapters::{init_adapter, AdapterHyper, AdapterKind, AdapterSet, PrefixHyper};
use mdner::data::{Corpus, Split, Tokenizer};
use mdner::encoder::CoreModel;
use mdner::heads_registry::{head_id_for, Bundle, ClassifierHead, DomainRegistry, LabelScheme};
use mdner::rng::derive;
use mdner::router::{train_router, RouterConfig, RouterModel};
use mdner::tagger::{tag_resolved, tag_sentences};
use mdner::training::{
    entity_f1_by_domain, finetune_domain, pretrain_core, pretrain_pooled, specialize_baseline,
    train_general_baseline, BaselineModel, F1Table, PoolMode, TrainReport,
};

use crate::config::ExperimentConfig;

pub fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of every tensor a tagging model uses: adapters and heads.
pub fn tagging_digest(reg: &DomainRegistry) -> String {
    let mut h = Sha256::new();
    for a in reg.adapters() {
        h.update(a.id.as_bytes());
        h.update(a.weight_bytes());
    }
    for hd in reg.heads() {
        h.update(hd.id.as_bytes());
        h.update(hd.weight_bytes());
    }
    hex::encode(h.finalize())
}

/// Corpus, vocabulary and the trained, frozen core.
pub struct Prepared {
    pub corpus: Corpus,
    pub tok: Tokenizer,
    pub core: CoreModel,
    /// Heads learned alongside the core, by head id.
    pub core_heads: BTreeMap<String, ClassifierHead>,
    pub core_report: TrainReport,
}

pub fn prepare(cfg: &ExperimentConfig, corpus: Corpus) -> Result<Prepared> {
    let train: Vec<_> = corpus
        .domains()
        .iter()
        .map(|d| corpus.split(d, Split::Train))
        .collect::<mdner::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let tok = Tokenizer::fit(train);
    let mut core = CoreModel::new(cfg.core.encoder(tok.len()), &mut derive(cfg.seed, "core/init"))?;
    let pre = pretrain_core(&mut core, &corpus, &tok, &cfg.seeded(&cfg.training.core)).context("core pre-training")?;
    core.freeze();
    let core_heads = pre
        .heads
        .into_iter()
        .map(|mut h| {
            h.freeze();
            (h.id.clone(), h)
        })
        .collect();
    Ok(Prepared {
        corpus,
        tok,
        core,
        core_heads,
        core_report: pre.report,
    })
}

/// Registers `domain` with `adapter` and makes `head` the scheme's head.
fn register(reg: &mut DomainRegistry, domain: &str, scheme: &LabelScheme, adapter: AdapterSet, head: &ClassifierHead) -> Result<()> {
    let d_model = head.linear.weight.shape()[0];
    reg.register_with(domain, scheme, adapter, d_model, &mut derive(0, "unused"))?;
    reg.replace_head(head.clone())?;
    Ok(())
}

/// A registry of zero-length prefix adapters: tagging through it is
/// exactly the bare model with the given heads.
pub fn bare_registry<'a>(
    core: &CoreModel,
    corpus: &Corpus,
    domains: &[String],
    head_of: impl Fn(&str) -> &'a ClassifierHead,
) -> Result<DomainRegistry> {
    let mut reg = DomainRegistry::new();
    let hyper = AdapterHyper::Prefix(PrefixHyper { length: 0 });
    for d in domains {
        let scheme = corpus.scheme_of(d)?;
        let mut a = init_adapter(mdner::heads_registry::adapter_id_for(d), &hyper, &core.config, &mut derive(0, "bare"))?;
        a.set_trainable(false);
        a.trained_on = "none".into();
        register(&mut reg, d, scheme, a, head_of(&scheme.id))?;
    }
    Ok(reg)
}

/// The pre-trained core with its own heads, as a loadable bundle.
pub fn core_bundle(p: &Prepared) -> Result<Bundle> {
    let registry = bare_registry(&p.core, &p.corpus, &p.corpus.domains(), |s| {
        &p.core_heads[&format!("head/{s}")]
    })?;
    Ok(Bundle {
        core: p.core.clone(),
        tokenizer: p.tok.clone(),
        registry,
        router: None,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiReports {
    pub kind: AdapterKind,
    pub pooled: BTreeMap<String, TrainReport>,
    pub finetune: BTreeMap<String, TrainReport>,
    /// sha256 of each head's weights at the end of phase one.
    pub head_after_pooled: BTreeMap<String, String>,
    /// sha256 of each head's weights after every domain fine-tune.
    pub head_after_finetune: BTreeMap<String, String>,
}

pub struct MultiRun {
    pub registry: DomainRegistry,
    pub reports: MultiReports,
}

/// Both training phases for one adapter kind over every scheme.
pub fn train_multi(cfg: &ExperimentConfig, p: &Prepared, kind: AdapterKind) -> Result<MultiRun> {
    let hyper = cfg.adapters.hyper(kind);
    let mut registry = DomainRegistry::new();
    let mut reports = MultiReports {
        kind,
        pooled: BTreeMap::new(),
        finetune: BTreeMap::new(),
        head_after_pooled: BTreeMap::new(),
        head_after_finetune: BTreeMap::new(),
    };
    let schemes: Vec<LabelScheme> = p.corpus.schemes().cloned().collect();
    for scheme in &schemes {
        let domains = p.corpus.domains_of_scheme(&scheme.id);
        let head_id = head_id_for(scheme);
        let mut head = p
            .core_heads
            .get(&head_id)
            .cloned()
            .ok_or_else(|| anyhow!("no pre-trained head for scheme `{}`", scheme.id))?;
        head.unfreeze();
        let mut pooled = init_adapter(
            format!("pooled/{}", scheme.id),
            &hyper,
            &p.core.config,
            &mut derive(cfg.seed, &format!("pooled/{}/{}", scheme.id, kind.name())),
        )?;
        let rep = pretrain_pooled(
            &p.core,
            &mut pooled,
            &mut head,
            &p.corpus,
            &p.tok,
            &domains,
            &PoolMode::All,
            &cfg.seeded(&cfg.training.phases(kind).pooled),
        )
        .with_context(|| format!("pooled pre-training for `{}`", scheme.id))?;
        head.freeze();
        reports.pooled.insert(scheme.id.clone(), rep);
        reports.head_after_pooled.insert(head_id.clone(), sha_hex(&head.weight_bytes()));
        for d in &domains {
            let (adapter, rep) = finetune_domain(
                &p.core,
                &pooled,
                &head,
                &p.corpus,
                &p.tok,
                d,
                &cfg.seeded(&cfg.training.phases(kind).finetune),
            )
            .with_context(|| format!("fine-tuning `{d}`"))?;
            let mut adapter = adapter;
            adapter.set_trainable(false);
            reports.finetune.insert(d.clone(), rep);
            register(&mut registry, d, scheme, adapter, &head)?;
        }
        reports.head_after_finetune.insert(head_id, sha_hex(&head.weight_bytes()));
    }
    registry.check_integrity()?;
    Ok(MultiRun { registry, reports })
}

pub fn router_config(cfg: &ExperimentConfig, corpus: &Corpus) -> RouterConfig {
    RouterConfig {
        group_size: cfg.router.group_size,
        max_tokens: cfg.router.max_tokens,
        train_passes: cfg.router.train_passes,
        domains: if cfg.router.domains.is_empty() {
            corpus.domains()
        } else {
            cfg.router.domains.clone()
        },
    }
}

pub fn train_router_for(cfg: &ExperimentConfig, p: &Prepared, rc: &RouterConfig) -> Result<(RouterModel, TrainReport)> {
    let hyper = cfg.adapters.hyper(cfg.router.kind);
    Ok(train_router(
        &p.core,
        &p.corpus,
        &p.tok,
        rc,
        &hyper,
        &cfg.seeded(&cfg.router.train),
    )?)
}

/// General baselines, one per scheme, keyed by scheme id.
pub fn train_generals(cfg: &ExperimentConfig, p: &Prepared) -> Result<BTreeMap<String, BaselineModel>> {
    let mut out = BTreeMap::new();
    for scheme in p.corpus.schemes() {
        let domains = p.corpus.domains_of_scheme(&scheme.id);
        let head = &p.core_heads[&head_id_for(scheme)];
        let m = train_general_baseline(
            &p.core,
            head,
            &p.corpus,
            &p.tok,
            &domains,
            &cfg.seeded(&cfg.training.general),
        )
        .with_context(|| format!("general baseline for `{}`", scheme.id))?;
        out.insert(scheme.id.clone(), m);
    }
    Ok(out)
}

pub fn train_specialized(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    tok: &Tokenizer,
    general: &BaselineModel,
    domain: &str,
) -> Result<BaselineModel> {
    specialize_baseline(general, corpus, tok, domain, &cfg.seeded(&cfg.training.specialized))
        .with_context(|| format!("specialized baseline for `{domain}`"))
}

/// A baseline model as a bundle over `domains`.
pub fn baseline_bundle(m: &BaselineModel, corpus: &Corpus, tok: &Tokenizer, domains: &[String]) -> Result<Bundle> {
    let registry = bare_registry(&m.core, corpus, domains, |_| &m.head)?;
    Ok(Bundle {
        core: m.core.clone(),
        tokenizer: tok.clone(),
        registry,
        router: None,
    })
}

/// Entity F1 of a registry's own adapter and head per domain.
pub fn eval_registry(
    reg: &DomainRegistry,
    core: &CoreModel,
    tok: &Tokenizer,
    corpus: &Corpus,
    domains: &[String],
    split: Split,
) -> Result<F1Table> {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for d in domains {
        let sents = corpus.split(d, split)?;
        let tokens: Vec<Vec<String>> = sents.iter().map(|s| s.tokens.clone()).collect();
        let r = reg.resolve(core, d)?;
        if r.scheme.id != corpus.scheme_of(d)?.id {
            return Err(anyhow!("domain `{d}`: model scheme `{}` differs from the corpus", r.scheme.id));
        }
        pred.extend(tag_resolved(&r, tok, &tokens)?);
        gold.extend(sents);
    }
    Ok(entity_f1_by_domain(&gold, &pred)?)
}

/// Entity F1 of a bare baseline model per domain.
pub fn eval_baseline(m: &BaselineModel, tok: &Tokenizer, corpus: &Corpus, domains: &[String], split: Split) -> Result<F1Table> {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for d in domains {
        let sents = corpus.split(d, split)?;
        let tokens: Vec<Vec<String>> = sents.iter().map(|s| s.tokens.clone()).collect();
        pred.extend(tag_sentences(&m.core, None, &m.head, &m.scheme, tok, &tokens)?);
        gold.extend(sents);
    }
    Ok(entity_f1_by_domain(&gold, &pred)?)
}
