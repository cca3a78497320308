//! A scaled-down desk corpus and a quickly pre-trained core.
#![allow(dead_code)]

use mdner::data::{desk_default, generate_synthetic, Corpus, Split, Tokenizer};
use mdner::encoder::{CoreModel, EncoderConfig};
use mdner::heads_registry::ClassifierHead;
use mdner::rng::derive;
use mdner::training::{pretrain_core, TrainConfig, TrainReport};

/// Every desk domain at a twentieth of its budget (at least 40 sentences).
pub fn small_corpus(seed: u64) -> Corpus {
    let mut spec = desk_default(seed);
    for d in &mut spec.domains {
        d.budget = (d.budget / 20).max(40);
    }
    generate_synthetic(&spec).unwrap()
}

pub fn tokenizer(corpus: &Corpus) -> Tokenizer {
    let mut train = Vec::new();
    for d in corpus.domains() {
        train.extend(corpus.split(&d, Split::Train).unwrap());
    }
    Tokenizer::fit(train)
}

pub fn encoder(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        max_seq_len: 64,
        ..EncoderConfig::toy(vocab)
    }
}

pub struct Fixture {
    pub corpus: Corpus,
    pub tok: Tokenizer,
    pub core: CoreModel,
    pub heads: Vec<ClassifierHead>,
    pub report: TrainReport,
}

/// Core pre-trained for eight epochs, then frozen with its heads.
pub fn fixture(seed: u64) -> Fixture {
    let corpus = small_corpus(seed);
    let tok = tokenizer(&corpus);
    let mut core = CoreModel::new(encoder(tok.len()), &mut derive(seed, "core")).unwrap();
    let cfg = TrainConfig::default().with_lr(1e-2).with_epochs(8).with_seed(seed);
    let pre = pretrain_core(&mut core, &corpus, &tok, &cfg).unwrap();
    core.freeze();
    let heads = pre
        .heads
        .into_iter()
        .map(|mut h| {
            h.freeze();
            h
        })
        .collect();
    Fixture {
        corpus,
        tok,
        core,
        heads,
        report: pre.report,
    }
}

impl Fixture {
    pub fn head(&self, scheme_id: &str) -> &ClassifierHead {
        self.heads.iter().find(|h| h.scheme_id == scheme_id).unwrap()
    }
}
