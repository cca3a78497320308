//! Phase contracts on a scaled-down desk corpus.

mod common;

use std::sync::OnceLock;

use common::{encoder, fixture, small_corpus, tokenizer, Fixture};
use mdner::adapters::{init_adapter, AdapterHyper, LoraHyper, PrefixHyper};
use mdner::data::Split;
use mdner::encoder::CoreModel;
use mdner::heads_registry::{ClassifierHead, LabelScheme};
use mdner::rng::{derive, seeded};
use mdner::tagger::tag_sentences;
use mdner::training::{
    entity_f1, finetune_domain, pretrain_core, pretrain_pooled, specialize_baseline, train_general_baseline,
    PoolMode, TrainConfig,
};

fn shared() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| fixture(3))
}

fn compact_domains(f: &Fixture) -> Vec<String> {
    f.corpus.domains_of_scheme("compact-misc")
}

fn dev_f1(core: &CoreModel, head: &ClassifierHead, f: &Fixture, domains: &[String]) -> f64 {
    let scheme = LabelScheme::compact();
    let sents = f.corpus.pooled(domains, Split::Dev).unwrap();
    let tokens: Vec<Vec<String>> = sents.iter().map(|s| s.tokens.clone()).collect();
    let gold: Vec<Vec<String>> = sents.iter().map(|s| s.labels.clone()).collect();
    let pred = tag_sentences(core, None, head, &scheme, &f.tok, &tokens).unwrap();
    entity_f1(&gold, &pred).unwrap().f1
}

#[test]
fn core_pretraining_learns() {
    let f = shared();
    let losses: Vec<f64> = f.report.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
    // Predicting the majority tag everywhere (`O`) finds no entity.
    let majority = entity_f1(&[vec!["B-PER".to_string()]], &[vec!["O".to_string()]]).unwrap().f1;
    let trained = dev_f1(&f.core, f.head("compact-misc"), f, &compact_domains(f));
    assert!(trained > majority, "dev F1 {trained}, losses {losses:?}");
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let corpus = small_corpus(4);
    let tok = tokenizer(&corpus);
    let mut core = CoreModel::new(encoder(tok.len()), &mut seeded(4)).unwrap();
    let before = core.weight_bytes();
    let cfg = TrainConfig::default().with_lr(0.0).with_epochs(1);
    let pre = pretrain_core(&mut core, &corpus, &tok, &cfg).unwrap();
    assert_eq!(core.weight_bytes(), before);
    let fresh = ClassifierHead::new(pre.heads[0].id.clone(), &LabelScheme::compact(), core.config.d_model, &mut derive(0, &format!("pretrain/{}", pre.heads[0].id)));
    assert_eq!(pre.heads[0].weight_bytes(), fresh.weight_bytes());
}

#[test]
fn pooled_phase_trains_head_and_adapter_only() {
    let f = shared();
    let domains = compact_domains(f);
    let mut head = f.head("compact-misc").clone();
    head.unfreeze();
    let head_before = head.weight_bytes();
    let core_before = f.core.weight_bytes();
    let hyper = AdapterHyper::Prefix(PrefixHyper { length: 4 });
    let mut adapter = init_adapter("pooled", &hyper, &f.core.config, &mut seeded(1)).unwrap();
    let cfg = TrainConfig::pooled().with_lr(1e-2).with_seed(1);
    let rep = pretrain_pooled(&f.core, &mut adapter, &mut head, &f.corpus, &f.tok, &domains, &PoolMode::All, &cfg).unwrap();
    assert_ne!(head.weight_bytes(), head_before);
    assert_eq!(f.core.weight_bytes(), core_before);
    let first = rep.epochs[0].dev_loss.unwrap();
    let best = rep.epochs.iter().find(|e| e.epoch == rep.best_epoch).unwrap().dev_loss.unwrap();
    assert!(best <= first);
    assert!(domains.iter().all(|d| rep.sampled[d] > 0));
}

#[test]
fn exclude_target_never_samples_the_target() {
    let f = shared();
    let domains = compact_domains(f);
    let mut head = f.head("compact-misc").clone();
    head.unfreeze();
    let mut adapter = init_adapter("pooled", &AdapterHyper::Prefix(PrefixHyper { length: 2 }), &f.core.config, &mut seeded(2)).unwrap();
    let cfg = TrainConfig::pooled().with_epochs(1).with_lr(1e-2);
    let mode = PoolMode::ExcludeTarget("travel".into());
    let rep = pretrain_pooled(&f.core, &mut adapter, &mut head, &f.corpus, &f.tok, &domains, &mode, &cfg).unwrap();
    assert_eq!(rep.sampled["travel"], 0);
    let n_train = |d: &str| f.corpus.split(d, Split::Train).unwrap().len();
    for d in domains.iter().filter(|d| *d != "travel") {
        assert_eq!(rep.sampled[d], n_train(d), "{d}");
    }
}

#[test]
fn finetune_leaves_pooled_and_head_untouched() {
    let f = shared();
    let head = f.head("compact-misc");
    let pooled = init_adapter("pooled", &AdapterHyper::Lora(LoraHyper::default()), &f.core.config, &mut seeded(5)).unwrap();
    let pooled_before = pooled.weight_bytes();
    let head_before = head.weight_bytes();
    let cfg = TrainConfig::default().with_lr(3e-2).with_seed(5);
    let (tuned, rep) = finetune_domain(&f.core, &pooled, head, &f.corpus, &f.tok, "econ", &cfg).unwrap();
    assert_eq!(pooled.weight_bytes(), pooled_before);
    assert_eq!(head.weight_bytes(), head_before);
    assert_ne!(tuned.weight_bytes(), pooled_before);
    assert_eq!(tuned.id, "adapter/econ");
    assert!(rep.best_epoch <= rep.stopped_epoch && rep.stopped_epoch <= 10);
    assert_eq!(rep.sampled.keys().collect::<Vec<_>>(), vec!["econ"]);
}

#[test]
fn wrong_scheme_head_is_rejected() {
    let f = shared();
    let pooled = init_adapter("p", &AdapterHyper::Prefix(PrefixHyper { length: 1 }), &f.core.config, &mut seeded(0)).unwrap();
    let cfg = TrainConfig::default();
    assert!(finetune_domain(&f.core, &pooled, f.head("wide-21"), &f.corpus, &f.tok, "econ", &cfg).is_err());
    let mut unfrozen = f.core.clone();
    unfrozen.unfreeze();
    assert!(finetune_domain(&unfrozen, &pooled, f.head("compact-misc"), &f.corpus, &f.tok, "econ", &cfg).is_err());
}

#[test]
fn baselines_copy_the_core() {
    let f = shared();
    let domains = compact_domains(f);
    let core_before = f.core.weight_bytes();
    let cfg = TrainConfig::default().with_lr(1e-3).with_epochs(2).with_seed(9);
    let general = train_general_baseline(&f.core, f.head("compact-misc"), &f.corpus, &f.tok, &domains, &cfg).unwrap();
    assert_eq!(f.core.weight_bytes(), core_before);
    assert_ne!(general.core.weight_bytes(), core_before);
    assert_eq!(general.scheme.id, "compact-misc");

    // Trained model beats a fresh core with a fresh head.
    let mut rng = seeded(10);
    let untrained = CoreModel::new(f.core.config.clone(), &mut rng).unwrap();
    let untrained_head = ClassifierHead::new("h", &LabelScheme::compact(), f.core.config.d_model, &mut rng);
    assert!(dev_f1(&general.core, &general.head, f, &domains) > dev_f1(&untrained, &untrained_head, f, &domains));

    // A specialised model costs one full core; a prefix adapter a sliver.
    let spec = specialize_baseline(&general, &f.corpus, &f.tok, "econ", &cfg).unwrap();
    assert_eq!(spec.core.weight_bytes().len(), core_before.len());
    let adapter = init_adapter("a", &AdapterHyper::Prefix(PrefixHyper::default()), &f.core.config, &mut rng).unwrap();
    assert!(adapter.weight_bytes().len() * 10 < core_before.len());
    assert_ne!(spec.core.weight_bytes(), general.core.weight_bytes());

    // Schemes must agree.
    assert!(specialize_baseline(&general, &f.corpus, &f.tok, "formal", &cfg).is_err());
    assert!(train_general_baseline(&f.core, f.head("compact-misc"), &f.corpus, &f.tok, &["formal".into(), "econ".into()], &cfg).is_err());
}

#[test]
fn same_seed_same_training() {
    let f = shared();
    let head = f.head("compact-misc");
    let pooled = init_adapter("p", &AdapterHyper::Prefix(PrefixHyper { length: 3 }), &f.core.config, &mut seeded(7)).unwrap();
    let cfg = TrainConfig::default().with_lr(3e-2).with_epochs(2).with_seed(7);
    let (a, ra) = finetune_domain(&f.core, &pooled, head, &f.corpus, &f.tok, "med", &cfg).unwrap();
    let (b, rb) = finetune_domain(&f.core, &pooled, head, &f.corpus, &f.tok, "med", &cfg).unwrap();
    assert_eq!(a.weight_bytes(), b.weight_bytes());
    assert_eq!(ra.epochs, rb.epochs);
}
